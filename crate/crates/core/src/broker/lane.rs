use std::sync::Arc;
use std::time::Duration;

use crossbeam_channel::Receiver;

use super::metrics::BrokerMetrics;
use super::state::{Join, TopicState};
use super::error_reply;
use crate::stream::{Chunk, APPEND_AT_HEAD};
use crate::wire::{
    Endpoint, ErrorCode, ErrorReply, Network, PullPart, PullWant, ReplicateAck,
    ReplicateRequest, RpcClient,
};

pub(crate) type AppendOutcome = Result<Vec<(u32, u64)>, ErrorReply>;
pub(crate) type PullOutcome = Result<Vec<(usize, PullPart)>, ErrorReply>;

pub(crate) enum LaneJob {
    Append {
        topic: Arc<TopicState>,
        chunks: Vec<Chunk>,
        replicate: bool,
        part: usize,
        join: Arc<Join<AppendOutcome>>,
    },
    Pull {
        topic: Arc<TopicState>,
        wants: Vec<(usize, PullWant)>,
        part: usize,
        join: Arc<Join<PullOutcome>>,
    },
}

const REPLICATION_TIMEOUT: Duration = Duration::from_secs(5);

/// A worker lane: owns the partitions with `id % worker_count == lane` and
/// executes appends, replication and reads for them sequentially.
pub(crate) struct Lane {
    pub id: usize,
    pub metrics: Arc<BrokerMetrics>,
    pub network: Network,
    pub backup: Option<Endpoint>,
    backup_client: Option<RpcClient>,
}

impl Lane {
    pub fn new(id: usize, metrics: Arc<BrokerMetrics>, network: Network, backup: Option<Endpoint>) -> Self {
        Self {
            id,
            metrics,
            network,
            backup,
            backup_client: None,
        }
    }

    pub fn run(mut self, jobs: Receiver<LaneJob>) {
        for job in jobs {
            match job {
                LaneJob::Append {
                    topic,
                    chunks,
                    replicate,
                    part,
                    join,
                } => {
                    let out = self.append(&topic, chunks, replicate);
                    join.complete(part, out);
                }
                LaneJob::Pull {
                    topic,
                    wants,
                    part,
                    join,
                } => {
                    let out = pull(&topic, wants);
                    join.complete(part, out);
                }
            }
        }
        log::debug!("lane {} stopped", self.id);
    }

    fn append(&mut self, topic: &TopicState, chunks: Vec<Chunk>, replicate: bool) -> AppendOutcome {
        // Stage against current heads; nothing becomes visible until every
        // chunk checks out and, with a backup, the copy is acknowledged.
        let mut placed = Vec::with_capacity(chunks.len());
        for chunk in chunks {
            let pid = chunk.partition_id();
            let partition = topic
                .partitions
                .get(pid as usize)
                .ok_or_else(|| ErrorReply::new(ErrorCode::Protocol, format!("no partition {pid}")))?
                .read();
            let chunk = if chunk.base_offset() == APPEND_AT_HEAD {
                chunk.with_base_offset(partition.head_offset())
            } else {
                chunk
            };
            if let Err(e) = partition.check_append(&chunk) {
                drop(partition);
                let mut reply = error_reply(&e);
                if reply.code == ErrorCode::StaleProducer {
                    reply.heads = placed
                        .iter()
                        .map(Chunk::partition_id)
                        .chain(std::iter::once(pid))
                        .map(|p| (p, topic.partitions[p as usize].read().head_offset()))
                        .collect();
                }
                return Err(reply);
            }
            placed.push(chunk);
        }
        if replicate && self.backup.is_some() {
            self.replicate(&topic.name, &placed)?;
        }
        let mut heads = Vec::with_capacity(placed.len());
        let mut records = 0u64;
        for chunk in placed {
            let pid = chunk.partition_id();
            records += u64::from(chunk.record_count());
            let head = topic.partitions[pid as usize]
                .write()
                .append_checked(Arc::new(chunk));
            heads.push((pid, head));
        }
        self.metrics.record_appended(records);
        topic.notify_watchers();
        Ok(heads)
    }

    fn replicate(&mut self, stream: &str, chunks: &[Chunk]) -> Result<(), ErrorReply> {
        let unavailable = |e: String| ErrorReply::new(ErrorCode::Unavailable, format!("replication failed: {e}"));
        if self.backup_client.is_none() {
            let ep = self.backup.as_ref().expect("backup configured");
            let mut client = self.network.client(ep).map_err(|e| unavailable(e.to_string()))?;
            client.set_timeout(Some(REPLICATION_TIMEOUT));
            self.backup_client = Some(client);
        }
        let client = self.backup_client.as_mut().expect("connected above");
        let req = ReplicateRequest {
            stream: stream.to_string(),
            chunks: chunks.to_vec(),
        };
        match client.request::<_, ReplicateAck>(&req) {
            Ok(_) => Ok(()),
            Err(e) => {
                self.backup_client = None;
                Err(unavailable(e.to_string()))
            }
        }
    }
}

fn pull(topic: &TopicState, wants: Vec<(usize, PullWant)>) -> PullOutcome {
    let mut out = Vec::with_capacity(wants.len());
    let mut stored = Vec::new();
    for (idx, want) in wants {
        let partition = topic.partitions.get(want.partition as usize).ok_or_else(|| {
            ErrorReply::new(ErrorCode::Protocol, format!("no partition {}", want.partition))
        })?;
        stored.clear();
        partition
            .read()
            .read_into(want.offset, want.max_bytes as usize, usize::MAX, &mut stored)
            .map_err(|e| error_reply(&e))?;
        let next_offset = stored.last().map_or(want.offset, |c| c.end_offset());
        out.push((
            idx,
            PullPart {
                partition: want.partition,
                next_offset,
                chunks: stored.iter().map(|c| Chunk::clone(c)).collect(),
            },
        ));
    }
    Ok(out)
}
