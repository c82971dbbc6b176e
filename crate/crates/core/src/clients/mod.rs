//! Producer and consumer clients: a chunking producer, a polling pull source
//! and a push source group fed through a shared object pool.

mod clock;
mod producer;
mod pull;
mod push;

pub use clock::{Clock, ManualClock, SystemClock};
pub use producer::{
    run_producer, ChunkAccumulator, CyclingValues, KeyMode, ProducerConfig, ProducerReport,
    ValueSource,
};
pub use pull::{PullSource, PullSourceConfig, DEFAULT_MAX_BYTES, DEFAULT_POLL_TIMEOUT};
pub use push::{PushGroup, PushGroupConfig, PushMember, PushSource};

use std::io::Write;
use std::time::{Duration, Instant};

use serde::Serialize;
use thiserror::Error;

use crate::shared_store::StoreError;
use crate::stream::StreamError;
use crate::wire::RpcError;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Rpc(#[from] RpcError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error("partition {partition}: expected offset {expected}, received {got}")]
    Gap { partition: u32, expected: u64, got: u64 },
}

/// A record handed to the dataflow, borrowed from the transport buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SourceRecord<'a> {
    pub partition: u32,
    pub offset: u64,
    pub key: &'a [u8],
    pub value: &'a [u8],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Poll {
    /// This many records were emitted.
    Records(usize),
    /// Nothing arrived within the wait.
    Idle,
    /// The source is finished (subscription closed).
    Closed,
}

/// The contract both source kinds give the dataflow layer.
pub trait Source: Send {
    fn id(&self) -> u32;

    /// Waits up to roughly `wait` for data and emits it in offset order per
    /// partition.
    fn poll_next(
        &mut self,
        wait: Duration,
        emit: &mut dyn FnMut(SourceRecord<'_>),
    ) -> Result<Poll, ClientError>;

    fn report(&self) -> ClientReport;
}

/// Runs a source until `until`, returning its report.
pub fn drain_until<S: Source + ?Sized>(
    source: &mut S,
    until: Instant,
    emit: &mut dyn FnMut(SourceRecord<'_>),
) -> Result<ClientReport, ClientError> {
    loop {
        let now = Instant::now();
        if now >= until {
            break;
        }
        let wait = (until - now).min(Duration::from_millis(50));
        if source.poll_next(wait, emit)? == Poll::Closed {
            break;
        }
    }
    Ok(source.report())
}

/// Resolution of the fine-grained series kept next to the per-second one.
pub const TICK: Duration = Duration::from_millis(100);

/// Counts bucketed by whole seconds since a shared run start, plus the same
/// counts at [`TICK`] resolution for runs too short for per-second medians.
#[derive(Clone, Debug)]
pub struct PerSecond {
    start: Instant,
    buckets: Vec<u64>,
    ticks: Vec<u64>,
}

fn bump(v: &mut Vec<u64>, i: usize, n: u64) {
    if v.len() <= i {
        v.resize(i + 1, 0);
    }
    v[i] += n;
}

impl PerSecond {
    pub fn new(start: Instant) -> Self {
        Self {
            start,
            buckets: Vec::new(),
            ticks: Vec::new(),
        }
    }

    pub fn add(&mut self, n: u64) {
        self.add_at(Instant::now(), n);
    }

    pub fn add_at(&mut self, at: Instant, n: u64) {
        let since = at.saturating_duration_since(self.start);
        bump(&mut self.buckets, since.as_secs() as usize, n);
        bump(&mut self.ticks, (since.as_millis() / TICK.as_millis()) as usize, n);
    }

    pub fn buckets(&self) -> &[u64] {
        &self.buckets
    }

    pub fn ticks(&self) -> &[u64] {
        &self.ticks
    }

    pub fn total(&self) -> u64 {
        self.buckets.iter().sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ClientKind {
    Producer,
    Pull,
    Push,
}

/// Per-second activity of one client.
#[derive(Clone, Debug, Serialize)]
pub struct ClientReport {
    pub client_id: u32,
    pub kind: ClientKind,
    pub records_per_second: Vec<u64>,
    pub rpcs_per_second: Vec<u64>,
    /// Records per [`TICK`].
    #[serde(skip)]
    pub records_per_tick: Vec<u64>,
}

impl ClientReport {
    pub fn records(&self) -> u64 {
        self.records_per_second.iter().sum()
    }

    pub fn rpcs(&self) -> u64 {
        self.rpcs_per_second.iter().sum()
    }
}

/// Writes `second,client_id,records,rpcs` rows for all reports.
pub fn write_report_csv(out: &mut impl Write, reports: &[ClientReport]) -> std::io::Result<()> {
    writeln!(out, "second,client_id,records,rpcs")?;
    for r in reports {
        let n = r.records_per_second.len().max(r.rpcs_per_second.len());
        for s in 0..n {
            let rec = r.records_per_second.get(s).copied().unwrap_or(0);
            let rpc = r.rpcs_per_second.get(s).copied().unwrap_or(0);
            writeln!(out, "{s},{},{rec},{rpc}", r.client_id)?;
        }
    }
    Ok(())
}

/// Writes `tick,client_id,records` rows (tick = [`TICK`]) for all reports.
pub fn write_tick_csv(out: &mut impl Write, reports: &[ClientReport]) -> std::io::Result<()> {
    writeln!(out, "tick,client_id,records")?;
    for r in reports {
        for (t, n) in r.records_per_tick.iter().enumerate() {
            writeln!(out, "{t},{},{n}", r.client_id)?;
        }
    }
    Ok(())
}

/// Consumer-side summary of one run of a source set.
#[derive(Clone, Debug, Serialize)]
pub struct ConsumerSummary {
    pub reports: Vec<ClientReport>,
    pub subscribe_rpcs: u64,
    /// Consumer threads that issue polling RPCs.
    pub polling_workers: usize,
    /// Consumer threads that block on push notifications.
    pub notification_workers: usize,
}
