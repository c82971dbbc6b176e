use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use bytes::Bytes;
use parking_lot::Mutex;

use super::metrics::BrokerMetrics;
use super::state::TopicState;
use crate::shared_store::{Doorbell, ObjectStore, PayloadMeta, SharedObjectPool, StoreError, TaskId};
use crate::stream::{Chunk, StreamError};
use crate::wire::{ConnId, Delivery, PushedObject, PushedObjects, ReplyTx, WireMessage};

/// Longest a remote `CONSUMED_NOTIFY` waits for data before an empty reply.
pub(crate) const REMOTE_PARK_LIMIT: Duration = Duration::from_millis(100);
const IDLE_WAIT: Duration = Duration::from_millis(50);

struct Parked {
    reply: ReplyTx,
    correlation_id: u64,
    since: Instant,
}

/// Broker-side proxy for sources in another process: filled objects are
/// copied into replies to their `CONSUMED_NOTIFY` calls.
pub(crate) struct RemoteRelay {
    pool: Arc<SharedObjectPool>,
    parked: Mutex<HashMap<TaskId, Parked>>,
}

impl RemoteRelay {
    pub fn new(pool: Arc<SharedObjectPool>) -> Self {
        Self {
            pool,
            parked: Mutex::new(HashMap::new()),
        }
    }

    /// Moves every notified object of `task` to CONSUMING and copies it out.
    fn collect(&self, task: TaskId) -> Result<PushedObjects, StoreError> {
        let mut objects = Vec::new();
        for id in self.pool.try_notifications(task) {
            self.pool.begin_consume(task, id)?;
            let chunk = self.pool.read(task, id, |v| {
                Chunk::new(
                    v.meta.partition_id,
                    v.meta.base_offset,
                    v.meta.record_count,
                    Bytes::copy_from_slice(v.bytes),
                )
            })?;
            objects.push(PushedObject { object_id: id, chunk });
        }
        Ok(PushedObjects { objects })
    }

    pub fn release(&self, task: TaskId, ids: &[u32]) -> Result<(), StoreError> {
        for &id in ids {
            self.pool.finish_consume(task, id)?;
        }
        Ok(())
    }

    /// Replies now if objects are ready, otherwise parks the request.
    pub fn request(&self, task: TaskId, correlation_id: u64, reply: ReplyTx) -> Result<(), StoreError> {
        let mut parked = self.parked.lock();
        let ready = self.collect(task)?;
        if !ready.objects.is_empty() {
            reply.send(ready.to_envelope(correlation_id));
            return Ok(());
        }
        if let Some(old) = parked.insert(
            task,
            Parked {
                reply,
                correlation_id,
                since: Instant::now(),
            },
        ) {
            old.reply.send(PushedObjects::default().to_envelope(old.correlation_id));
        }
        Ok(())
    }

    /// Called by the push worker after filling objects for `task`.
    fn offer(&self, task: TaskId) {
        let mut parked = self.parked.lock();
        if !parked.contains_key(&task) {
            return;
        }
        match self.collect(task) {
            Ok(ready) if ready.objects.is_empty() => {}
            Ok(ready) => {
                let p = parked.remove(&task).expect("checked above");
                p.reply.send(ready.to_envelope(p.correlation_id));
            }
            Err(e) => log::warn!("relay for task {task}: {e}"),
        }
    }

    fn expire(&self, limit: Duration) {
        let mut parked = self.parked.lock();
        let stale: Vec<TaskId> = parked
            .iter()
            .filter(|(_, p)| p.since.elapsed() >= limit)
            .map(|(t, _)| *t)
            .collect();
        for t in stale {
            let p = parked.remove(&t).expect("listed above");
            p.reply.send(PushedObjects::default().to_envelope(p.correlation_id));
        }
    }

    fn close(&self) {
        for (_, p) in self.parked.lock().drain() {
            p.reply.send(PushedObjects::default().to_envelope(p.correlation_id));
        }
    }
}

struct Cursor {
    task: TaskId,
    partitions: Vec<(u32, u64)>,
    next: usize,
}

impl Cursor {
    /// Next unread chunk of any assigned partition, rotating between them.
    fn next_chunk(
        &mut self,
        topic: &TopicState,
        object_size: usize,
        scratch: &mut Vec<Arc<Chunk>>,
    ) -> Result<Option<Arc<Chunk>>, StreamError> {
        let n = self.partitions.len();
        for i in 0..n {
            let slot = (self.next + i) % n;
            let (pid, offset) = self.partitions[slot];
            scratch.clear();
            topic.partitions[pid as usize]
                .read()
                .read_into(offset, object_size, 1, scratch)?;
            if let Some(chunk) = scratch.pop() {
                self.partitions[slot].1 = chunk.end_offset();
                self.next = (slot + 1) % n;
                return Ok(Some(chunk));
            }
        }
        Ok(None)
    }
}

/// Per-group push state served by one push worker.
pub(crate) struct GroupFeed {
    topic: Arc<TopicState>,
    pool: Arc<SharedObjectPool>,
    relay: Option<Arc<RemoteRelay>>,
    cursors: Mutex<Vec<Cursor>>,
}

impl GroupFeed {
    /// Fills every free object it can; returns whether anything was pushed.
    /// Errors fault the group: its pool is closed so sources observe it.
    fn pump(&self, metrics: &BrokerMetrics, scratch: &mut Vec<Arc<Chunk>>) -> bool {
        if self.pool.is_closed() {
            return false;
        }
        let object_size = self.pool.object_size();
        let mut progressed = false;
        let mut cursors = self.cursors.lock();
        for cursor in cursors.iter_mut() {
            let mut filled = false;
            while let Some(id) = self.pool.acquire_free(cursor.task) {
                let chunk = match cursor.next_chunk(&self.topic, object_size, scratch) {
                    Ok(Some(c)) => c,
                    Ok(None) => {
                        let _ = self.pool.cancel_lease(id);
                        break;
                    }
                    Err(e) => {
                        log::error!("push group {}: {e}; closing subscription", self.pool.group_id());
                        let _ = self.pool.cancel_lease(id);
                        self.fault();
                        return progressed;
                    }
                };
                let meta = PayloadMeta {
                    partition_id: chunk.partition_id(),
                    base_offset: chunk.base_offset(),
                    record_count: chunk.record_count(),
                };
                let published = self
                    .pool
                    .fill(id, meta, |buf| buf.extend_from_slice(chunk.payload()))
                    .and_then(|_| self.pool.publish_filled(id));
                if let Err(e) = published {
                    if e != StoreError::Closed {
                        log::error!("push group {}: {e}", self.pool.group_id());
                    }
                    self.fault();
                    return progressed;
                }
                metrics.record_pushed(u64::from(chunk.record_count()));
                filled = true;
            }
            if filled {
                progressed = true;
                if let Some(r) = &self.relay {
                    r.offer(cursor.task);
                }
            }
        }
        if let Some(r) = &self.relay {
            r.expire(REMOTE_PARK_LIMIT);
        }
        progressed
    }

    fn fault(&self) {
        self.pool.close();
        if let Some(r) = &self.relay {
            r.close();
        }
    }
}

/// A dedicated push thread serving up to `capacity` groups.
pub(crate) struct PushWorker {
    pub bell: Arc<Doorbell>,
    groups: Arc<Mutex<Vec<Arc<GroupFeed>>>>,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
    metrics: Arc<BrokerMetrics>,
}

impl PushWorker {
    pub fn spawn(id: usize, metrics: Arc<BrokerMetrics>) -> Self {
        let bell = Arc::new(Doorbell::new());
        let groups: Arc<Mutex<Vec<Arc<GroupFeed>>>> = Arc::default();
        let stop = Arc::new(AtomicBool::new(false));
        metrics.push_worker_started();
        let handle = {
            let (bell, groups, stop, metrics) =
                (Arc::clone(&bell), Arc::clone(&groups), Arc::clone(&stop), Arc::clone(&metrics));
            std::thread::Builder::new()
                .name(format!("push-worker-{id}"))
                .spawn(move || {
                    let mut scratch = Vec::with_capacity(1);
                    while !stop.load(Ordering::Acquire) {
                        let seen = bell.generation();
                        let snapshot: Vec<Arc<GroupFeed>> = groups.lock().clone();
                        let mut progressed = false;
                        for g in &snapshot {
                            progressed |= g.pump(&metrics, &mut scratch);
                        }
                        if !progressed {
                            bell.wait_past(seen, IDLE_WAIT);
                        }
                    }
                })
                .expect("spawn push worker")
        };
        Self {
            bell,
            groups,
            stop,
            handle: Some(handle),
            metrics,
        }
    }

    pub fn group_count(&self) -> usize {
        self.groups.lock().len()
    }

    fn add(&self, feed: Arc<GroupFeed>) {
        self.groups.lock().push(feed);
        self.bell.ring();
    }

    fn remove(&self, feed: &Arc<GroupFeed>) {
        self.groups.lock().retain(|g| !Arc::ptr_eq(g, feed));
    }

    pub fn stop(mut self) {
        self.stop.store(true, Ordering::Release);
        self.bell.ring();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
        self.metrics.push_worker_stopped();
    }
}

/// One subscription: a pool served by a push worker, and for remote groups a
/// relay.
pub(crate) struct Subscription {
    pub id: u64,
    pub owner: ConnId,
    pub stream: String,
    pub group_id: String,
    pub delivery: Delivery,
    pub pool: Arc<SharedObjectPool>,
    pub relay: Option<Arc<RemoteRelay>>,
    pub worker: usize,
    feed: Arc<GroupFeed>,
}

pub(crate) struct SubscriptionParams {
    pub id: u64,
    pub owner: ConnId,
    pub group_id: String,
    pub delivery: Delivery,
    pub assignments: Vec<(TaskId, u32, u64)>,
    pub objects_per_consumer: usize,
    pub object_size: usize,
}

impl Subscription {
    pub fn start(
        topic: Arc<TopicState>,
        params: SubscriptionParams,
        store: &ObjectStore,
        worker_idx: usize,
        worker: &PushWorker,
    ) -> Result<Self, StoreError> {
        let mut tasks: Vec<TaskId> = params.assignments.iter().map(|a| a.0).collect();
        tasks.sort_unstable();
        tasks.dedup();
        let pool = Arc::new(SharedObjectPool::new(
            params.group_id.clone(),
            &tasks,
            params.objects_per_consumer,
            params.object_size,
            Arc::clone(&worker.bell),
        ));
        if params.delivery == Delivery::Shared {
            store.insert(&topic.name, Arc::clone(&pool))?;
        }
        let relay = (params.delivery == Delivery::Remote).then(|| Arc::new(RemoteRelay::new(Arc::clone(&pool))));
        let mut cursors: Vec<Cursor> = tasks
            .iter()
            .map(|&task| Cursor {
                task,
                partitions: Vec::new(),
                next: 0,
            })
            .collect();
        for &(task, pid, start) in &params.assignments {
            let c = cursors.iter_mut().find(|c| c.task == task).expect("task listed");
            c.partitions.push((pid, start));
        }
        for c in &mut cursors {
            c.partitions.sort_unstable();
        }
        topic.watch(Arc::clone(&worker.bell));
        let feed = Arc::new(GroupFeed {
            topic: Arc::clone(&topic),
            pool: Arc::clone(&pool),
            relay: relay.clone(),
            cursors: Mutex::new(cursors),
        });
        worker.add(Arc::clone(&feed));
        Ok(Self {
            id: params.id,
            owner: params.owner,
            stream: topic.name.clone(),
            group_id: params.group_id,
            delivery: params.delivery,
            pool,
            relay,
            worker: worker_idx,
            feed,
        })
    }

    /// Detaches from the worker, closes the pool and unregisters it.
    pub fn teardown(self, store: &ObjectStore, worker: &PushWorker) {
        worker.remove(&self.feed);
        // The worker may be mid-pump on a snapshot; the lock waits it out.
        drop(self.feed.cursors.lock());
        self.feed.fault();
        self.feed.topic.unwatch(&worker.bell);
        if self.delivery == Delivery::Shared {
            store.remove(&self.stream, &self.group_id);
        }
    }
}
