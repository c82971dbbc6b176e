use std::collections::HashMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::Mutex;

use super::{ClientError, ClientKind, ClientReport, PerSecond, Poll, Source, SourceRecord};
use crate::shared_store::{ConsumeError, ObjectStore, SharedObjectPool, StoreError, TaskId};
use crate::stream::RecordIter;
use crate::wire::{
    Assignment, ConsumedNotify, Delivery, Endpoint, Network, PoolSpec, PushedObjects, RpcClient,
    RpcError, SubscribeAck, SubscribeRequest, DEFAULT_OBJECTS_PER_CONSUMER,
};

#[derive(Clone, Debug)]
pub struct PushMember {
    pub task_id: TaskId,
    /// Partitions with start offsets.
    pub partitions: Vec<(u32, u64)>,
}

#[derive(Clone, Debug)]
pub struct PushGroupConfig {
    pub group_id: String,
    pub stream: String,
    pub members: Vec<PushMember>,
    pub objects_per_consumer: u32,
    pub object_size: usize,
    pub delivery: Delivery,
}

impl PushGroupConfig {
    pub fn new(group_id: &str, stream: &str, members: Vec<PushMember>, object_size: usize) -> Self {
        Self {
            group_id: group_id.to_string(),
            stream: stream.to_string(),
            members,
            objects_per_consumer: DEFAULT_OBJECTS_PER_CONSUMER,
            object_size,
            delivery: Delivery::Shared,
        }
    }

    /// The member that issues the subscription: the smallest task id.
    pub fn leader(&self) -> Option<TaskId> {
        self.members.iter().map(|m| m.task_id).min()
    }

    fn request(&self) -> SubscribeRequest {
        SubscribeRequest {
            stream: self.stream.clone(),
            group_id: self.group_id.clone(),
            assignments: self
                .members
                .iter()
                .flat_map(|m| {
                    m.partitions.iter().map(|&(partition, start_offset)| Assignment {
                        partition,
                        start_offset,
                        task_id: m.task_id,
                    })
                })
                .collect(),
            pool: PoolSpec {
                objects_per_consumer: self.objects_per_consumer,
                object_size: self.object_size as u32,
                delivery: self.delivery,
            },
        }
    }
}

/// Keeps the leader's connection, and with it the subscription, alive until
/// every member source is dropped.
struct SubscriptionGuard {
    _leader: Mutex<RpcClient>,
}

enum Channel {
    Shared(Arc<SharedObjectPool>),
    Remote { client: RpcClient, release: Vec<u32> },
}

/// A subscribed group, ready to be split into one source per member task.
pub struct PushGroup {
    pub subscription_id: u64,
    pub leader: TaskId,
    pub subscribe_rpcs: u64,
    sources: Vec<PushSource>,
}

impl PushGroup {
    /// The leader subscribes once on behalf of all members. Shared delivery
    /// attaches to the pool in `store`, which must be the broker's.
    pub fn subscribe(
        network: &Network,
        broker: &Endpoint,
        cfg: &PushGroupConfig,
        store: Option<&ObjectStore>,
        run_start: Instant,
    ) -> Result<Self, ClientError> {
        let leader = cfg
            .leader()
            .ok_or_else(|| ClientError::Config("push group has no members".into()))?;
        if cfg.members.iter().any(|m| m.partitions.is_empty()) {
            return Err(ClientError::Config("every push member needs a partition".into()));
        }
        if cfg.delivery == Delivery::Shared && store.is_none() {
            return Err(ClientError::Config("shared delivery requires the broker's object store".into()));
        }
        let mut client = network.client(broker).map_err(RpcError::from)?;
        let ack: SubscribeAck = client.request(&cfg.request())?;
        let guard = Arc::new(SubscriptionGuard {
            _leader: Mutex::new(client),
        });
        let pool = match (cfg.delivery, store) {
            (Delivery::Shared, Some(store)) => Some(store.attach(&cfg.stream, &cfg.group_id).ok_or_else(|| {
                ClientError::Config(format!("broker pool for group {:?} is not in this process", cfg.group_id))
            })?),
            _ => None,
        };
        let mut sources = Vec::with_capacity(cfg.members.len());
        for m in &cfg.members {
            let channel = match &pool {
                Some(p) => Channel::Shared(Arc::clone(p)),
                None => Channel::Remote {
                    client: network.client(broker).map_err(RpcError::from)?,
                    release: Vec::new(),
                },
            };
            sources.push(PushSource {
                task_id: m.task_id,
                stream: cfg.stream.clone(),
                group_id: cfg.group_id.clone(),
                next: m.partitions.iter().copied().collect(),
                channel,
                records: PerSecond::new(run_start),
                rpcs: PerSecond::new(run_start),
                _guard: Arc::clone(&guard),
            });
        }
        Ok(Self {
            subscription_id: ack.subscription_id,
            leader,
            subscribe_rpcs: 1,
            sources,
        })
    }

    pub fn into_sources(self) -> Vec<PushSource> {
        self.sources
    }
}

/// One member task of a push group. It never polls: it blocks on its
/// notification queue (or, across processes, on a parked notify call).
pub struct PushSource {
    task_id: TaskId,
    stream: String,
    group_id: String,
    next: HashMap<u32, u64>,
    channel: Channel,
    records: PerSecond,
    rpcs: PerSecond,
    _guard: Arc<SubscriptionGuard>,
}

/// Emits the records of one pushed chunk at or past the expected offset.
fn emit_chunk(
    next: &mut HashMap<u32, u64>,
    partition: u32,
    base: u64,
    payload: &[u8],
    emit: &mut dyn FnMut(SourceRecord<'_>),
) -> Result<usize, ClientError> {
    let expected = next
        .get_mut(&partition)
        .ok_or_else(|| ClientError::Config(format!("pushed unassigned partition {partition}")))?;
    if base > *expected {
        return Err(ClientError::Gap {
            partition,
            expected: *expected,
            got: base,
        });
    }
    let mut n = 0;
    for (offset, rec) in (base..).zip(RecordIter::new(payload)) {
        let rec = rec?;
        if offset < *expected {
            continue;
        }
        emit(SourceRecord {
            partition,
            offset,
            key: rec.key,
            value: rec.value,
        });
        *expected = offset + 1;
        n += 1;
    }
    Ok(n)
}

impl PushSource {
    pub fn task_id(&self) -> TaskId {
        self.task_id
    }

    pub fn offsets(&self) -> Vec<(u32, u64)> {
        let mut v: Vec<_> = self.next.iter().map(|(&p, &o)| (p, o)).collect();
        v.sort_unstable();
        v
    }
}

impl Source for PushSource {
    fn id(&self) -> u32 {
        self.task_id
    }

    fn poll_next(
        &mut self,
        wait: Duration,
        emit: &mut dyn FnMut(SourceRecord<'_>),
    ) -> Result<Poll, ClientError> {
        let task = self.task_id;
        let n = match &mut self.channel {
            Channel::Shared(pool) => {
                let id = match pool.recv_notification(task, wait) {
                    Ok(Some(id)) => id,
                    Ok(None) => return Ok(Poll::Idle),
                    Err(StoreError::Closed) => return Ok(Poll::Closed),
                    Err(e) => return Err(e.into()),
                };
                let next = &mut self.next;
                let consumed = pool.consume_and_release(task, id, |v| {
                    emit_chunk(next, v.meta.partition_id, v.meta.base_offset, v.bytes, emit)
                });
                match consumed {
                    Ok(n) => n,
                    Err(ConsumeError::Store(StoreError::Closed)) => return Ok(Poll::Closed),
                    Err(ConsumeError::Store(e)) => return Err(e.into()),
                    Err(ConsumeError::Handler(e)) => return Err(e),
                }
            }
            Channel::Remote { client, release } => {
                let req = ConsumedNotify {
                    stream: self.stream.clone(),
                    group_id: self.group_id.clone(),
                    task_id: task,
                    object_ids: std::mem::take(release),
                };
                self.rpcs.add(1);
                let reply: PushedObjects = match client.request(&req) {
                    Ok(r) => r,
                    Err(RpcError::Transport(_)) => return Ok(Poll::Closed),
                    Err(e) => return Err(e.into()),
                };
                let mut n = 0;
                for o in reply.objects {
                    let c = &o.chunk;
                    n += emit_chunk(&mut self.next, c.partition_id(), c.base_offset(), c.payload(), emit)?;
                    release.push(o.object_id);
                }
                n
            }
        };
        if n == 0 {
            return Ok(Poll::Idle);
        }
        self.records.add(n as u64);
        Ok(Poll::Records(n))
    }

    fn report(&self) -> ClientReport {
        ClientReport {
            client_id: self.task_id,
            kind: ClientKind::Push,
            records_per_second: self.records.buckets().to_vec(),
            rpcs_per_second: self.rpcs.buckets().to_vec(),
            records_per_tick: self.records.ticks().to_vec(),
        }
    }
}
