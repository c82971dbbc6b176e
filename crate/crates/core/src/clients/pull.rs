use std::time::{Duration, Instant};

use super::{ClientError, ClientKind, ClientReport, PerSecond, Poll, Source, SourceRecord};
use crate::stream::RecordIter;
use crate::wire::{Endpoint, Network, PullReply, PullRequest, PullWant, RpcClient, RpcError};

pub const DEFAULT_MAX_BYTES: usize = 128 << 10;
pub const DEFAULT_POLL_TIMEOUT: Duration = Duration::from_millis(1);

#[derive(Clone, Debug)]
pub struct PullSourceConfig {
    pub consumer_id: u32,
    pub stream: String,
    /// Exclusively owned partitions with their start offsets.
    pub partitions: Vec<(u32, u64)>,
    /// Per-partition byte budget of one pull.
    pub max_bytes: usize,
    pub poll_timeout: Duration,
}

impl PullSourceConfig {
    pub fn new(consumer_id: u32, stream: &str, partitions: Vec<(u32, u64)>) -> Self {
        Self {
            consumer_id,
            stream: stream.to_string(),
            partitions,
            max_bytes: DEFAULT_MAX_BYTES,
            poll_timeout: DEFAULT_POLL_TIMEOUT,
        }
    }
}

/// A consumer that polls the broker with one PULL per cycle and sleeps
/// `poll_timeout` after an empty reply.
pub struct PullSource {
    cfg: PullSourceConfig,
    client: RpcClient,
    offsets: Vec<u64>,
    request: PullRequest,
    records: PerSecond,
    rpcs: PerSecond,
}

impl PullSource {
    pub fn connect(
        network: &Network,
        broker: &Endpoint,
        cfg: PullSourceConfig,
        run_start: Instant,
    ) -> Result<Self, ClientError> {
        if cfg.partitions.is_empty() {
            return Err(ClientError::Config(format!("consumer {} has no partitions", cfg.consumer_id)));
        }
        if cfg.max_bytes == 0 || cfg.max_bytes > u32::MAX as usize {
            return Err(ClientError::Config("max_bytes out of range".into()));
        }
        let client = network.client(broker).map_err(RpcError::from)?;
        let offsets = cfg.partitions.iter().map(|p| p.1).collect();
        let request = PullRequest {
            stream: cfg.stream.clone(),
            wants: Vec::with_capacity(cfg.partitions.len()),
        };
        Ok(Self {
            cfg,
            client,
            offsets,
            request,
            records: PerSecond::new(run_start),
            rpcs: PerSecond::new(run_start),
        })
    }

    pub fn offsets(&self) -> Vec<(u32, u64)> {
        self.cfg
            .partitions
            .iter()
            .map(|p| p.0)
            .zip(self.offsets.iter().copied())
            .collect()
    }

    fn pull(&mut self) -> Result<PullReply, ClientError> {
        self.request.wants.clear();
        let max_bytes = self.cfg.max_bytes as u32;
        self.request
            .wants
            .extend(self.cfg.partitions.iter().zip(&self.offsets).map(|(&(partition, _), &offset)| {
                PullWant {
                    partition,
                    offset,
                    max_bytes,
                }
            }));
        self.rpcs.add(1);
        Ok(self.client.request(&self.request)?)
    }
}

impl Source for PullSource {
    fn id(&self) -> u32 {
        self.cfg.consumer_id
    }

    fn poll_next(
        &mut self,
        wait: Duration,
        emit: &mut dyn FnMut(SourceRecord<'_>),
    ) -> Result<Poll, ClientError> {
        let reply = self.pull()?;
        let mut emitted = 0usize;
        for (i, part) in reply.parts.iter().enumerate() {
            let next = &mut self.offsets[i];
            for chunk in &part.chunks {
                if chunk.base_offset() > *next {
                    return Err(ClientError::Gap {
                        partition: part.partition,
                        expected: *next,
                        got: chunk.base_offset(),
                    });
                }
                for (offset, rec) in (chunk.base_offset()..).zip(RecordIter::new(chunk.payload())) {
                    let rec = rec?;
                    // A pull at an interior offset returns the whole chunk.
                    if offset < *next {
                        continue;
                    }
                    emit(SourceRecord {
                        partition: part.partition,
                        offset,
                        key: rec.key,
                        value: rec.value,
                    });
                    *next = offset + 1;
                    emitted += 1;
                }
            }
        }
        if emitted == 0 {
            std::thread::sleep(self.cfg.poll_timeout.min(wait));
            return Ok(Poll::Idle);
        }
        self.records.add(emitted as u64);
        Ok(Poll::Records(emitted))
    }

    fn report(&self) -> ClientReport {
        ClientReport {
            client_id: self.cfg.consumer_id,
            kind: ClientKind::Pull,
            records_per_second: self.records.buckets().to_vec(),
            rpcs_per_second: self.rpcs.buckets().to_vec(),
            records_per_tick: self.records.ticks().to_vec(),
        }
    }
}
