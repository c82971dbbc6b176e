use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;
use std::thread::JoinHandle;

use crossbeam_channel::{Receiver, Sender};

use super::config::BrokerConfig;
use super::lane::{AppendOutcome, Lane, LaneJob, PullOutcome};
use super::metrics::BrokerMetrics;
use super::push::{PushWorker, Subscription, SubscriptionParams};
use super::state::{Join, TopicState};
use crate::shared_store::ObjectStore;
use crate::stream::Chunk;
use crate::wire::{
    AppendAck, AppendRequest, ConnId, ConsumedNotify, Delivery, ErrorCode, ErrorReply, Inbound,
    MsgType, Network, PullReply, PullRequest, PullWant, PushedObjects, ReplicateAck,
    ReplicateRequest, ReplyTx, RpcEnvelope, SubscribeAck, SubscribeRequest, WireMessage,
};

/// Decodes requests, routes partition work to lanes and owns subscriptions.
pub(crate) struct Dispatcher {
    topics: Arc<HashMap<String, Arc<TopicState>>>,
    metrics: Arc<BrokerMetrics>,
    store: ObjectStore,
    replicate: bool,
    lanes: Vec<Sender<LaneJob>>,
    lane_handles: Vec<JoinHandle<()>>,
    subscriptions: BTreeMap<(String, String), Subscription>,
    next_subscription: u64,
    push_workers: Vec<Option<PushWorker>>,
    groups_per_worker: usize,
}

impl Dispatcher {
    pub fn new(
        config: &BrokerConfig,
        topics: Arc<HashMap<String, Arc<TopicState>>>,
        metrics: Arc<BrokerMetrics>,
        network: Network,
        store: ObjectStore,
    ) -> Self {
        let mut lanes = Vec::with_capacity(config.worker_count);
        let mut lane_handles = Vec::with_capacity(config.worker_count);
        for id in 0..config.worker_count {
            let (tx, rx) = crossbeam_channel::unbounded();
            let lane = Lane::new(id, Arc::clone(&metrics), network.clone(), config.backup.clone());
            lane_handles.push(
                std::thread::Builder::new()
                    .name(format!("broker-lane-{id}"))
                    .spawn(move || lane.run(rx))
                    .expect("spawn lane"),
            );
            lanes.push(tx);
        }
        Self {
            topics,
            metrics,
            store,
            replicate: config.replication == 2,
            lanes,
            lane_handles,
            subscriptions: BTreeMap::new(),
            next_subscription: 1,
            push_workers: Vec::new(),
            groups_per_worker: config.groups_per_push_worker,
        }
    }

    pub fn run(mut self, inbound: Receiver<Inbound>, stop: Receiver<()>) {
        loop {
            crossbeam_channel::select! {
                recv(inbound) -> ev => match ev {
                    Ok(Inbound::Request { conn, env, reply }) => self.handle(conn, env, reply),
                    Ok(Inbound::Closed { conn }) => self.connection_closed(conn),
                    Err(_) => break,
                },
                recv(stop) -> _ => break,
            }
        }
        self.drain();
    }

    fn drain(mut self) {
        for (_, sub) in std::mem::take(&mut self.subscriptions) {
            self.release(sub);
        }
        self.lanes.clear();
        for h in self.lane_handles.drain(..) {
            let _ = h.join();
        }
    }

    fn lane_of(&self, partition: u32) -> usize {
        partition as usize % self.lanes.len()
    }

    fn topic(&self, stream: &str) -> Result<Arc<TopicState>, ErrorReply> {
        self.topics
            .get(stream)
            .cloned()
            .ok_or_else(|| ErrorReply::new(ErrorCode::UnknownStream, format!("unknown stream {stream:?}")))
    }

    fn handle(&mut self, conn: ConnId, env: RpcEnvelope, reply: ReplyTx) {
        self.metrics.record_rpc(env.msg_type);
        let corr = env.correlation_id;
        match self.plan(conn, env) {
            Ok(Plan::Reply(mut env)) => {
                env.correlation_id = corr;
                reply.send(env)
            }
            Ok(Plan::Append { topic, parts, replicate, ack_type }) => {
                self.dispatch_append(topic, parts, replicate, ack_type, corr, reply)
            }
            Ok(Plan::Pull { topic, parts, total }) => self.dispatch_pull(topic, parts, total, corr, reply),
            Ok(Plan::Park { relay, task }) => {
                if let Err(e) = relay.request(task, corr, reply) {
                    log::warn!("relay request for task {task}: {e}");
                }
            }
            Err(e) => reply.send(e.to_envelope(corr)),
        }
    }

    fn plan(&mut self, conn: ConnId, env: RpcEnvelope) -> Result<Plan, ErrorReply> {
        match env.msg_type {
            MsgType::Append => {
                let req = decode::<AppendRequest>(env)?;
                req.validate().map_err(malformed)?;
                self.plan_append(&req.stream, req.chunks, self.replicate, MsgType::AppendAck)
            }
            MsgType::Replicate => {
                let req = decode::<ReplicateRequest>(env)?;
                self.plan_append(&req.stream, req.chunks, false, MsgType::ReplicateAck)
            }
            MsgType::Pull => {
                let req = decode::<PullRequest>(env)?;
                req.validate().map_err(malformed)?;
                self.plan_pull(req)
            }
            MsgType::SubscribePush => {
                let req = decode::<SubscribeRequest>(env)?;
                req.validate().map_err(malformed)?;
                let ack = self.subscribe(conn, req)?;
                Ok(Plan::Reply(ack.to_envelope(0)))
            }
            MsgType::ConsumedNotify => {
                let req = decode::<ConsumedNotify>(env)?;
                self.consumed(req)
            }
            other => Err(ErrorReply::new(
                ErrorCode::Protocol,
                format!("{} is not a request", other.name()),
            )),
        }
    }

    fn plan_append(
        &self,
        stream: &str,
        chunks: Vec<Chunk>,
        replicate: bool,
        ack_type: MsgType,
    ) -> Result<Plan, ErrorReply> {
        let topic = self.topic(stream)?;
        let mut parts: BTreeMap<usize, Vec<Chunk>> = BTreeMap::new();
        for c in chunks {
            if c.partition_id() >= topic.partition_count() {
                return Err(no_partition(stream, c.partition_id()));
            }
            parts.entry(self.lane_of(c.partition_id())).or_default().push(c);
        }
        Ok(Plan::Append {
            topic,
            parts,
            replicate,
            ack_type,
        })
    }

    fn dispatch_append(
        &self,
        topic: Arc<TopicState>,
        parts: BTreeMap<usize, Vec<Chunk>>,
        replicate: bool,
        ack_type: MsgType,
        corr: u64,
        reply: ReplyTx,
    ) {
        let join = Join::new(parts.len(), move |outcomes: Vec<AppendOutcome>| {
            let mut heads = Vec::new();
            for o in outcomes {
                match o {
                    Ok(h) => heads.extend(h),
                    Err(e) => return reply.send(e.to_envelope(corr)),
                }
            }
            heads.sort_unstable();
            let env = if ack_type == MsgType::ReplicateAck {
                ReplicateAck { heads }.to_envelope(corr)
            } else {
                AppendAck { heads }.to_envelope(corr)
            };
            reply.send(env);
        });
        for (part, (lane, chunks)) in parts.into_iter().enumerate() {
            let job = LaneJob::Append {
                topic: Arc::clone(&topic),
                chunks,
                replicate,
                part,
                join: Arc::clone(&join),
            };
            if self.lanes[lane].send(job).is_err() {
                join.complete(part, Err(ErrorReply::new(ErrorCode::Unavailable, "broker stopping")));
            }
        }
    }

    fn plan_pull(&self, req: PullRequest) -> Result<Plan, ErrorReply> {
        let topic = self.topic(&req.stream)?;
        let total = req.wants.len();
        let mut parts: BTreeMap<usize, Vec<(usize, PullWant)>> = BTreeMap::new();
        for (i, w) in req.wants.into_iter().enumerate() {
            if w.partition >= topic.partition_count() {
                return Err(no_partition(&req.stream, w.partition));
            }
            parts.entry(self.lane_of(w.partition)).or_default().push((i, w));
        }
        Ok(Plan::Pull { topic, parts, total })
    }

    fn dispatch_pull(
        &self,
        topic: Arc<TopicState>,
        parts: BTreeMap<usize, Vec<(usize, PullWant)>>,
        total: usize,
        corr: u64,
        reply: ReplyTx,
    ) {
        let join = Join::new(parts.len(), move |outcomes: Vec<PullOutcome>| {
            let mut slots = vec![None; total];
            for o in outcomes {
                match o {
                    Ok(v) => v.into_iter().for_each(|(i, p)| slots[i] = Some(p)),
                    Err(e) => return reply.send(e.to_envelope(corr)),
                }
            }
            let parts = slots.into_iter().map(|p| p.expect("every want answered")).collect();
            reply.send(PullReply { parts }.to_envelope(corr));
        });
        for (part, (lane, wants)) in parts.into_iter().enumerate() {
            let job = LaneJob::Pull {
                topic: Arc::clone(&topic),
                wants,
                part,
                join: Arc::clone(&join),
            };
            if self.lanes[lane].send(job).is_err() {
                join.complete(part, Err(ErrorReply::new(ErrorCode::Unavailable, "broker stopping")));
            }
        }
    }

    fn subscribe(&mut self, conn: ConnId, req: SubscribeRequest) -> Result<SubscribeAck, ErrorReply> {
        let topic = self.topic(&req.stream)?;
        let key = (req.stream.clone(), req.group_id.clone());
        if self.subscriptions.contains_key(&key) {
            return Err(ErrorReply::new(
                ErrorCode::SubscriptionConflict,
                format!("group {:?} already subscribed to {:?}", req.group_id, req.stream),
            ));
        }
        let object_size = req.pool.object_size as usize;
        for a in &req.assignments {
            let p = topic
                .partitions
                .get(a.partition as usize)
                .ok_or_else(|| no_partition(&req.stream, a.partition))?
                .read();
            if a.start_offset > p.head_offset() {
                return Err(ErrorReply::new(
                    ErrorCode::OffsetOutOfRange,
                    format!(
                        "start offset {} beyond head {} of partition {}",
                        a.start_offset,
                        p.head_offset(),
                        a.partition
                    ),
                ));
            }
            if p.largest_chunk() > object_size {
                return Err(ErrorReply::new(
                    ErrorCode::OversizedChunk,
                    format!(
                        "partition {} holds a {} byte chunk; objects are {} bytes",
                        a.partition,
                        p.largest_chunk(),
                        object_size
                    ),
                ));
            }
        }
        let id = self.next_subscription;
        let params = SubscriptionParams {
            id,
            owner: conn,
            group_id: req.group_id.clone(),
            delivery: req.pool.delivery,
            assignments: req
                .assignments
                .iter()
                .map(|a| (a.task_id, a.partition, a.start_offset))
                .collect(),
            objects_per_consumer: req.pool.objects_per_consumer as usize,
            object_size,
        };
        let worker = self.worker_with_room();
        let started = Subscription::start(
            topic,
            params,
            &self.store,
            worker,
            self.push_workers[worker].as_ref().expect("live worker"),
        );
        let sub = match started {
            Ok(s) => s,
            Err(e) => {
                self.retire_if_idle(worker);
                return Err(ErrorReply::new(ErrorCode::SubscriptionConflict, e.to_string()));
            }
        };
        self.next_subscription += 1;
        log::info!(
            "subscription {id}: group {:?} on {:?}, {} tasks, {:?} delivery",
            sub.group_id,
            sub.stream,
            sub.pool.tasks().count(),
            sub.delivery
        );
        self.subscriptions.insert(key, sub);
        Ok(SubscribeAck { subscription_id: id })
    }

    fn consumed(&mut self, req: ConsumedNotify) -> Result<Plan, ErrorReply> {
        self.topic(&req.stream)?;
        let sub = self
            .subscriptions
            .get(&(req.stream.clone(), req.group_id.clone()))
            .ok_or_else(|| {
                ErrorReply::new(
                    ErrorCode::Protocol,
                    format!("no subscription for group {:?} on {:?}", req.group_id, req.stream),
                )
            })?;
        let store_err = |e: crate::shared_store::StoreError| ErrorReply::new(ErrorCode::Protocol, e.to_string());
        match (&sub.relay, sub.delivery) {
            (Some(relay), Delivery::Remote) => {
                relay.release(req.task_id, &req.object_ids).map_err(store_err)?;
                Ok(Plan::Park {
                    relay: Arc::clone(relay),
                    task: req.task_id,
                })
            }
            _ => {
                // Co-located groups release objects in place; a notify only
                // acknowledges ids already returned.
                for &id in &req.object_ids {
                    if sub.pool.owner(id).map_err(store_err)? != req.task_id {
                        return Err(ErrorReply::new(ErrorCode::Protocol, format!("object {id} not owned")));
                    }
                }
                Ok(Plan::Reply(PushedObjects::default().to_envelope(0)))
            }
        }
    }

    fn connection_closed(&mut self, conn: ConnId) {
        let owned: Vec<_> = self
            .subscriptions
            .iter()
            .filter(|(_, s)| s.owner == conn)
            .map(|(k, _)| k.clone())
            .collect();
        for key in owned {
            if let Some(sub) = self.subscriptions.remove(&key) {
                log::info!("subscription {} closed with its connection", sub.id);
                self.release(sub);
            }
        }
    }
}

impl Dispatcher {
    fn worker_with_room(&mut self) -> usize {
        let room = self.push_workers.iter().position(|w| {
            w.as_ref()
                .is_some_and(|w| w.group_count() < self.groups_per_worker)
        });
        if let Some(i) = room {
            return i;
        }
        let slot = self.push_workers.iter().position(Option::is_none);
        let i = slot.unwrap_or(self.push_workers.len());
        let w = PushWorker::spawn(i, Arc::clone(&self.metrics));
        match slot {
            Some(i) => self.push_workers[i] = Some(w),
            None => self.push_workers.push(Some(w)),
        }
        i
    }

    fn release(&mut self, sub: Subscription) {
        let i = sub.worker;
        sub.teardown(&self.store, self.push_workers[i].as_ref().expect("live worker"));
        self.retire_if_idle(i);
    }

    fn retire_if_idle(&mut self, i: usize) {
        if self.push_workers[i].as_ref().is_some_and(|w| w.group_count() == 0) {
            self.push_workers[i].take().expect("checked").stop();
        }
    }
}

enum Plan {
    Reply(RpcEnvelope),
    Append {
        topic: Arc<TopicState>,
        parts: BTreeMap<usize, Vec<Chunk>>,
        replicate: bool,
        ack_type: MsgType,
    },
    Pull {
        topic: Arc<TopicState>,
        parts: BTreeMap<usize, Vec<(usize, PullWant)>>,
        total: usize,
    },
    Park {
        relay: Arc<super::push::RemoteRelay>,
        task: u32,
    },
}

fn decode<M: WireMessage>(env: RpcEnvelope) -> Result<M, ErrorReply> {
    M::from_envelope(&env).map_err(malformed)
}

fn malformed(e: crate::wire::WireError) -> ErrorReply {
    ErrorReply::new(ErrorCode::Framing, e.to_string())
}

fn no_partition(stream: &str, p: u32) -> ErrorReply {
    ErrorReply::new(ErrorCode::Protocol, format!("stream {stream:?} has no partition {p}"))
}
