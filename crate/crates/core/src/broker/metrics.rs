use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use parking_lot::Mutex;

use crate::wire::MsgType;

/// Counts bucketed by whole seconds since a start instant.
#[derive(Debug)]
pub struct SecondSeries {
    start: Instant,
    buckets: Mutex<Vec<u64>>,
}

impl SecondSeries {
    pub fn new(start: Instant) -> Self {
        Self {
            start,
            buckets: Mutex::new(Vec::new()),
        }
    }

    pub fn add(&self, n: u64) {
        self.add_at(self.start.elapsed().as_secs() as usize, n);
    }

    pub fn add_at(&self, second: usize, n: u64) {
        let mut b = self.buckets.lock();
        if b.len() <= second {
            b.resize(second + 1, 0);
        }
        b[second] += n;
    }

    pub fn snapshot(&self) -> Vec<u64> {
        self.buckets.lock().clone()
    }

    pub fn get(&self, second: usize) -> u64 {
        self.buckets.lock().get(second).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.buckets.lock().iter().sum()
    }
}

const TYPES: usize = MsgType::ALL.len();

#[derive(Debug)]
pub struct BrokerMetrics {
    start: Instant,
    rpcs: [AtomicU64; TYPES],
    rpc_series: Vec<SecondSeries>,
    appended: SecondSeries,
    pushed: SecondSeries,
    active_workers: AtomicUsize,
    push_workers: AtomicUsize,
    push_workers_peak: AtomicUsize,
}

impl BrokerMetrics {
    pub fn new() -> Self {
        let start = Instant::now();
        Self {
            start,
            rpcs: Default::default(),
            rpc_series: (0..TYPES).map(|_| SecondSeries::new(start)).collect(),
            appended: SecondSeries::new(start),
            pushed: SecondSeries::new(start),
            active_workers: AtomicUsize::new(0),
            push_workers: AtomicUsize::new(0),
            push_workers_peak: AtomicUsize::new(0),
        }
    }

    pub fn start(&self) -> Instant {
        self.start
    }

    pub(crate) fn record_rpc(&self, t: MsgType) {
        self.rpcs[t.index()].fetch_add(1, Ordering::Relaxed);
        self.rpc_series[t.index()].add(1);
    }

    pub(crate) fn record_appended(&self, records: u64) {
        self.appended.add(records);
    }

    pub(crate) fn record_pushed(&self, records: u64) {
        self.pushed.add(records);
    }

    pub(crate) fn set_active_workers(&self, n: usize) {
        self.active_workers.store(n, Ordering::Relaxed);
    }

    pub(crate) fn push_worker_started(&self) {
        let now = self.push_workers.fetch_add(1, Ordering::AcqRel) + 1;
        self.push_workers_peak.fetch_max(now, Ordering::AcqRel);
    }

    pub(crate) fn push_worker_stopped(&self) {
        self.push_workers.fetch_sub(1, Ordering::AcqRel);
    }

    pub fn rpcs(&self, t: MsgType) -> u64 {
        self.rpcs[t.index()].load(Ordering::Relaxed)
    }

    pub fn rpcs_by_type(&self) -> BTreeMap<MsgType, u64> {
        MsgType::ALL.iter().map(|&t| (t, self.rpcs(t))).collect()
    }

    pub fn appended_per_second(&self) -> Vec<u64> {
        self.appended.snapshot()
    }

    pub fn pushed_per_second(&self) -> Vec<u64> {
        self.pushed.snapshot()
    }

    pub fn appended_total(&self) -> u64 {
        self.appended.total()
    }

    pub fn pushed_total(&self) -> u64 {
        self.pushed.total()
    }

    pub fn active_worker_count(&self) -> usize {
        self.active_workers.load(Ordering::Relaxed)
    }

    /// Push workers currently running.
    pub fn push_worker_count(&self) -> usize {
        self.push_workers.load(Ordering::Acquire)
    }

    /// Highest concurrent push worker count observed.
    pub fn push_worker_peak(&self) -> usize {
        self.push_workers_peak.load(Ordering::Acquire)
    }

    /// Writes `second,msg_type,count` rows for seconds in `[from, to)` with
    /// nonzero counts.
    pub fn write_rpc_rows(&self, out: &mut impl Write, from: usize, to: usize) -> std::io::Result<()> {
        for second in from..to {
            for t in MsgType::ALL {
                let n = self.rpc_series[t.index()].get(second);
                if n > 0 {
                    writeln!(out, "{},{},{}", second, t.name(), n)?;
                }
            }
        }
        Ok(())
    }
}

impl Default for BrokerMetrics {
    fn default() -> Self {
        Self::new()
    }
}

/// Background writer flushing completed seconds to a CSV file.
pub struct MetricsCsvWriter {
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl MetricsCsvWriter {
    pub fn spawn(metrics: Arc<BrokerMetrics>, path: &Path) -> std::io::Result<Self> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(file, "second,msg_type,count")?;
        file.flush()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = Arc::clone(&stop);
        let handle = std::thread::Builder::new()
            .name("metrics-csv".into())
            .spawn(move || {
                let mut written = 0usize;
                loop {
                    let stopping = flag.load(Ordering::Acquire);
                    let elapsed = metrics.start().elapsed().as_secs() as usize;
                    let upto = if stopping { elapsed + 1 } else { elapsed };
                    if upto > written {
                        let _ = metrics.write_rpc_rows(&mut file, written, upto);
                        let _ = file.flush();
                        written = upto;
                    }
                    if stopping {
                        break;
                    }
                    std::thread::sleep(Duration::from_millis(200));
                }
            })?;
        Ok(Self {
            stop,
            handle: Some(handle),
        })
    }
}

impl Drop for MetricsCsvWriter {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Release);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}
