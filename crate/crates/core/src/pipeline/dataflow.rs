use std::collections::{BTreeMap, HashMap};
use std::hash::{Hash, Hasher};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_channel::{Receiver, Sender};
use serde::{Deserialize, Serialize};

use super::ops::{key_task, tokenize, CountWindows, Filter, KeyedSum, TimeWindows, WindowEmission, WindowKind, WindowSpec};
use super::{stage, PipelineError, ThroughputSample, DEFAULT_QUEUE_CAPACITY};
use crate::clients::{ClientReport, PerSecond, Poll, Source};

/// Records per queued batch; queue capacities are whole batches of this size.
const BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Workload {
    /// Iterate and count.
    Count,
    /// Substring filter, counting processed and passed records.
    Filter { pattern: String },
    /// Tokenize, key by word, running sum.
    WordCount,
    /// Tokenize, key by word, sliding window sum.
    WindowedWordCount { window: WindowSpec },
}

impl Workload {
    pub fn name(&self) -> &'static str {
        match self {
            Workload::Count => "count",
            Workload::Filter { .. } => "filter",
            Workload::WordCount => "wordcount",
            Workload::WindowedWordCount { .. } => "windowed_wordcount",
        }
    }

    pub fn is_keyed(&self) -> bool {
        matches!(self, Workload::WordCount | Workload::WindowedWordCount { .. })
    }
}

/// What to record for verification; all off by default because captures
/// grow with the input.
#[derive(Clone, Copy, Debug, Default)]
pub struct Capture {
    /// `(offset, value hash)` of every emitted record, per partition.
    pub offsets: bool,
    /// `(word, arrival ms)` of every pair entering a window operator.
    pub window_inputs: bool,
    /// Every window emission.
    pub windows: bool,
}

#[derive(Clone, Debug)]
pub struct DataflowConfig {
    pub workload: Workload,
    /// Source parallelism (Nc).
    pub source_tasks: usize,
    /// Map parallelism (Nmap).
    pub map_tasks: usize,
    /// `None` chains exactly when source and map parallelism match.
    pub chaining: Option<bool>,
    pub queue_capacity: usize,
    /// Processing slots (NFs); caps the larger of the two parallelisms.
    pub slots: Option<usize>,
    pub capture: Capture,
    pub run_start: Instant,
}

impl DataflowConfig {
    pub fn new(workload: Workload, source_tasks: usize, map_tasks: usize, run_start: Instant) -> Self {
        Self {
            workload,
            source_tasks,
            map_tasks,
            chaining: None,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            slots: None,
            capture: Capture::default(),
            run_start,
        }
    }
}

/// The deployed task graph.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TaskShape {
    pub source_tasks: usize,
    /// Separate map tasks; zero when the map stage is fused into sources.
    pub map_tasks: usize,
    pub keyed_tasks: usize,
    pub chained: bool,
    pub queues: usize,
    /// Per-queue capacity in records.
    pub queue_capacity: usize,
}

impl TaskShape {
    pub fn threads(&self) -> usize {
        self.source_tasks + self.map_tasks + self.keyed_tasks
    }
}

pub struct Dataflow {
    cfg: DataflowConfig,
    shape: TaskShape,
}

/// Validates a configuration and plans its task graph.
pub fn build_dataflow(cfg: DataflowConfig) -> Result<Dataflow, PipelineError> {
    if cfg.source_tasks == 0 || cfg.map_tasks == 0 {
        return Err(PipelineError::Config("parallelism must be at least 1".into()));
    }
    if cfg.queue_capacity < BATCH {
        return Err(PipelineError::Config(format!("queue capacity must be at least {BATCH}")));
    }
    if let Some(slots) = cfg.slots {
        let need = cfg.source_tasks.max(cfg.map_tasks);
        if need > slots {
            return Err(PipelineError::Config(format!("{need} parallel tasks exceed {slots} processing slots")));
        }
    }
    if let Workload::WindowedWordCount { window } = &cfg.workload {
        window.validate()?;
    }
    let matched = cfg.source_tasks == cfg.map_tasks;
    let chained = match cfg.chaining {
        None => matched,
        Some(true) if !matched => {
            return Err(PipelineError::Config(
                "chaining needs equal source and map parallelism".into(),
            ))
        }
        Some(c) => c,
    };
    let keyed = cfg.workload.is_keyed();
    let map_tasks = if chained { 0 } else { cfg.map_tasks };
    let keyed_tasks = if keyed { cfg.map_tasks } else { 0 };
    let shape = TaskShape {
        source_tasks: cfg.source_tasks,
        map_tasks,
        keyed_tasks,
        chained,
        queues: usize::from(!chained) + keyed_tasks,
        queue_capacity: cfg.queue_capacity / BATCH * BATCH,
    };
    Ok(Dataflow { cfg, shape })
}

/// Stop when the input is known to be complete and quiet.
#[derive(Clone, Debug)]
pub struct Drain {
    pub input_done: Arc<AtomicBool>,
    pub quiet: Duration,
    pub deadline: Instant,
}

#[derive(Clone, Debug)]
pub struct RunControl {
    /// Sources stop here unless draining.
    pub until: Instant,
    pub drain: Option<Drain>,
}

impl RunControl {
    pub fn until(until: Instant) -> Self {
        Self { until, drain: None }
    }
}

#[derive(Debug, Default)]
pub struct DataflowResult {
    pub shape: Option<TaskShape>,
    pub samples: Vec<ThroughputSample>,
    pub source_reports: Vec<ClientReport>,
    /// Records emitted by sources.
    pub records: u64,
    /// Records passing the filter.
    pub passed: u64,
    /// Tokens produced.
    pub tokens: u64,
    /// Tuples emitted by the keyed operator (running sums or windows).
    pub keyed_outputs: u64,
    pub totals: HashMap<String, u64>,
    pub windows: Vec<WindowEmission>,
    pub window_inputs: Vec<(String, u64)>,
    pub late_pairs: u64,
    pub captured: BTreeMap<u32, Vec<(u64, u64)>>,
}

impl DataflowResult {
    pub fn stage_total(&self, stage: &str) -> u64 {
        self.samples.iter().filter(|s| s.stage == stage).map(|s| s.records).sum()
    }
}

pub fn value_hash(v: &[u8]) -> u64 {
    let mut h = std::hash::DefaultHasher::new();
    v.hash(&mut h);
    h.finish()
}

struct ValueBatch {
    ts_ms: u64,
    data: Vec<u8>,
    ends: Vec<u32>,
}

impl ValueBatch {
    fn new(ts_ms: u64) -> Self {
        Self {
            ts_ms,
            data: Vec::new(),
            ends: Vec::with_capacity(BATCH),
        }
    }

    fn values(&self) -> impl Iterator<Item = &[u8]> {
        let mut start = 0;
        self.ends.iter().map(move |&e| {
            let v = &self.data[start..e as usize];
            start = e as usize;
            v
        })
    }
}

type Pair = (String, u64);

/// Routes words to keyed tasks in batches.
struct KeyRouter {
    queues: Vec<Sender<Vec<Pair>>>,
    bufs: Vec<Vec<Pair>>,
}

impl KeyRouter {
    fn push(&mut self, word: &str, ts_ms: u64) {
        let t = key_task(word, self.queues.len());
        self.bufs[t].push((word.to_string(), ts_ms));
        if self.bufs[t].len() >= BATCH {
            self.flush_one(t);
        }
    }

    fn flush_one(&mut self, t: usize) {
        let batch = std::mem::replace(&mut self.bufs[t], Vec::with_capacity(BATCH));
        // A closed receiver means the run is being torn down.
        let _ = self.queues[t].send(batch);
    }

    fn flush(&mut self) {
        for t in 0..self.bufs.len() {
            if !self.bufs[t].is_empty() {
                self.flush_one(t);
            }
        }
    }
}

enum MapKind {
    Count,
    Filter(Filter),
    Tokenize(KeyRouter),
}

/// The unkeyed map stage: counting logger, filter, or tokenizer.
struct MapStage {
    task_id: u32,
    kind: MapKind,
    pending: u64,
    pending_passed: u64,
    pending_tokens: u64,
    processed: PerSecond,
    passed: PerSecond,
    tokens: PerSecond,
}

impl MapStage {
    fn new(task_id: u32, kind: MapKind, start: Instant) -> Self {
        Self {
            task_id,
            kind,
            pending: 0,
            pending_passed: 0,
            pending_tokens: 0,
            processed: PerSecond::new(start),
            passed: PerSecond::new(start),
            tokens: PerSecond::new(start),
        }
    }

    fn record(&mut self, value: &[u8], ts_ms: u64) {
        self.pending += 1;
        match &mut self.kind {
            MapKind::Count => {}
            MapKind::Filter(f) => {
                if f.matches(value) {
                    self.pending_passed += 1;
                }
            }
            MapKind::Tokenize(router) => {
                let mut n = 0;
                tokenize(value, |w| {
                    router.push(w, ts_ms);
                    n += 1;
                });
                self.pending_tokens += n;
            }
        }
    }

    fn end_batch(&mut self) {
        if let MapKind::Tokenize(r) = &mut self.kind {
            r.flush();
        }
        let now = Instant::now();
        self.processed.add_at(now, std::mem::take(&mut self.pending));
        match self.kind {
            MapKind::Count => {}
            MapKind::Filter(_) => self.passed.add_at(now, std::mem::take(&mut self.pending_passed)),
            MapKind::Tokenize(_) => self.tokens.add_at(now, std::mem::take(&mut self.pending_tokens)),
        }
    }

    fn finish(mut self) -> Vec<Series> {
        self.end_batch();
        let mut out = vec![Series(stage::MAP, self.task_id, self.processed)];
        match self.kind {
            MapKind::Count => {}
            MapKind::Filter(_) => out.push(Series(stage::FILTER_PASS, self.task_id, self.passed)),
            MapKind::Tokenize(_) => out.push(Series(stage::TOKENIZE, self.task_id, self.tokens)),
        }
        out
    }
}

struct Series(&'static str, u32, PerSecond);

enum SourceSink {
    Chained(MapStage),
    Queue {
        tx: Sender<ValueBatch>,
        batch: Option<ValueBatch>,
    },
}

impl SourceSink {
    fn record(&mut self, value: &[u8], ts_ms: u64) {
        match self {
            SourceSink::Chained(m) => m.record(value, ts_ms),
            SourceSink::Queue { tx, batch } => {
                let b = batch.get_or_insert_with(|| ValueBatch::new(ts_ms));
                b.data.extend_from_slice(value);
                b.ends.push(b.data.len() as u32);
                if b.ends.len() >= BATCH {
                    let _ = tx.send(batch.take().expect("just filled"));
                }
            }
        }
    }

    fn end_batch(&mut self) {
        match self {
            SourceSink::Chained(m) => m.end_batch(),
            SourceSink::Queue { tx, batch } => {
                if let Some(b) = batch.take() {
                    let _ = tx.send(b);
                }
            }
        }
    }

    fn finish(mut self) -> Vec<Series> {
        self.end_batch();
        match self {
            SourceSink::Chained(m) => m.finish(),
            SourceSink::Queue { .. } => Vec::new(),
        }
    }
}

struct SourceOut {
    report: ClientReport,
    series: Vec<Series>,
    captured: BTreeMap<u32, Vec<(u64, u64)>>,
}

fn run_source(
    mut src: Box<dyn Source>,
    mut sink: SourceSink,
    ctl: RunControl,
    start: Instant,
    capture: bool,
) -> Result<SourceOut, PipelineError> {
    let task = src.id();
    let mut emitted = PerSecond::new(start);
    let mut captured: BTreeMap<u32, Vec<(u64, u64)>> = BTreeMap::new();
    let mut last_data = Instant::now();
    let mut done_seen: Option<Instant> = None;
    loop {
        let now = Instant::now();
        if let Some(d) = &ctl.drain {
            if now >= d.deadline {
                log::warn!("source {task}: drain deadline reached");
                break;
            }
        }
        if now >= ctl.until {
            let Some(d) = &ctl.drain else { break };
            if d.input_done.load(Ordering::Acquire) {
                let since = *done_seen.get_or_insert(now);
                if now.duration_since(last_data.max(since)) >= d.quiet {
                    break;
                }
            }
        }
        let mut ts_ms = None;
        let mut n = 0u64;
        let polled = src.poll_next(Duration::from_millis(20), &mut |r| {
            let ts = *ts_ms.get_or_insert_with(|| start.elapsed().as_millis() as u64);
            if capture {
                captured.entry(r.partition).or_default().push((r.offset, value_hash(r.value)));
            }
            sink.record(r.value, ts);
            n += 1;
        });
        match polled.map_err(|source| PipelineError::Source { task, source })? {
            Poll::Records(_) => {
                last_data = Instant::now();
                sink.end_batch();
                emitted.add_at(last_data, n);
            }
            Poll::Idle => {}
            Poll::Closed => break,
        }
    }
    let mut series = sink.finish();
    series.push(Series(stage::SOURCE, task, emitted));
    Ok(SourceOut {
        report: src.report(),
        series,
        captured,
    })
}

fn run_map(task_id: u32, mut stage: MapStage, rx: Receiver<ValueBatch>) -> Vec<Series> {
    debug_assert_eq!(stage.task_id, task_id);
    for batch in rx {
        for v in batch.values() {
            stage.record(v, batch.ts_ms);
        }
        stage.end_batch();
    }
    stage.finish()
}

enum KeyedOp {
    Sum(KeyedSum),
    CountWindow(CountWindows),
    TimeWindow(TimeWindows),
}

#[derive(Default)]
struct KeyedOut {
    series: Vec<Series>,
    outputs: u64,
    totals: HashMap<String, u64>,
    windows: Vec<WindowEmission>,
    inputs: Vec<(String, u64)>,
    late: u64,
}

fn run_keyed(task_id: u32, mut op: KeyedOp, rx: Receiver<Vec<Pair>>, start: Instant, capture: Capture) -> KeyedOut {
    let mut logger = PerSecond::new(start);
    let mut out = KeyedOut::default();
    let mut emitted = 0u64;
    for batch in rx {
        for (word, ts) in &batch {
            if capture.window_inputs && !matches!(op, KeyedOp::Sum(_)) {
                out.inputs.push((word.clone(), *ts));
            }
            let mut on_window = |e: WindowEmission| {
                emitted += 1;
                if capture.windows {
                    out.windows.push(e);
                }
            };
            match &mut op {
                KeyedOp::Sum(s) => {
                    s.add(word, 1);
                    emitted += 1;
                }
                KeyedOp::CountWindow(w) => w.add(word, 1, &mut on_window),
                KeyedOp::TimeWindow(w) => w.add(word, *ts, 1, &mut on_window),
            }
        }
        logger.add(std::mem::take(&mut emitted));
    }
    match op {
        KeyedOp::Sum(s) => out.totals = s.into_totals(),
        KeyedOp::CountWindow(_) => {}
        KeyedOp::TimeWindow(mut w) => {
            w.flush(|e| {
                emitted += 1;
                if capture.windows {
                    out.windows.push(e);
                }
            });
            out.late = w.late();
            logger.add(emitted);
        }
    }
    out.outputs = logger.total();
    out.series.push(Series(stage::LOGGER, task_id, logger));
    out
}

fn join<T>(h: JoinHandle<T>) -> Result<T, PipelineError> {
    h.join().map_err(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        PipelineError::Panicked(msg)
    })
}

impl Dataflow {
    pub fn shape(&self) -> &TaskShape {
        &self.shape
    }

    pub fn config(&self) -> &DataflowConfig {
        &self.cfg
    }

    /// Runs the graph over `sources` (one per source task) and joins every
    /// task before returning.
    pub fn run(self, sources: Vec<Box<dyn Source>>, ctl: RunControl) -> Result<DataflowResult, PipelineError> {
        let Dataflow { cfg, shape } = self;
        if sources.len() != cfg.source_tasks {
            return Err(PipelineError::Config(format!(
                "{} sources for {} source tasks",
                sources.len(),
                cfg.source_tasks
            )));
        }
        let start = cfg.run_start;
        let cap_batches = shape.queue_capacity / BATCH;

        // Keyed tasks first so routers can be handed out.
        let mut key_txs = Vec::new();
        let mut keyed_handles = Vec::new();
        for j in 0..shape.keyed_tasks {
            let (tx, rx) = crossbeam_channel::bounded(cap_batches);
            key_txs.push(tx);
            let op = match &cfg.workload {
                Workload::WindowedWordCount { window } => match window.kind {
                    WindowKind::Count => KeyedOp::CountWindow(CountWindows::new(window.size, window.slide)),
                    WindowKind::Time => KeyedOp::TimeWindow(TimeWindows::new(window.size, window.slide)),
                },
                _ => KeyedOp::Sum(KeyedSum::new()),
            };
            let capture = cfg.capture;
            keyed_handles.push(
                std::thread::Builder::new()
                    .name(format!("keyed-{j}"))
                    .spawn(move || run_keyed(j as u32, op, rx, start, capture))
                    .expect("spawn keyed task"),
            );
        }
        let make_stage = |task_id: u32| {
            let kind = match &cfg.workload {
                Workload::Count => MapKind::Count,
                Workload::Filter { pattern } => MapKind::Filter(Filter::new(pattern.as_bytes())),
                _ => MapKind::Tokenize(KeyRouter {
                    queues: key_txs.clone(),
                    bufs: vec![Vec::new(); key_txs.len()],
                }),
            };
            MapStage::new(task_id, kind, start)
        };

        let mut map_handles = Vec::new();
        let value_tx = if shape.chained {
            None
        } else {
            let (tx, rx) = crossbeam_channel::bounded::<ValueBatch>(cap_batches);
            for i in 0..shape.map_tasks {
                let stage = make_stage(i as u32);
                let rx = rx.clone();
                map_handles.push(
                    std::thread::Builder::new()
                        .name(format!("map-{i}"))
                        .spawn(move || run_map(i as u32, stage, rx))
                        .expect("spawn map task"),
                );
            }
            Some(tx)
        };

        let mut source_handles = Vec::new();
        for src in sources {
            let sink = match &value_tx {
                None => SourceSink::Chained(make_stage(src.id())),
                Some(tx) => SourceSink::Queue {
                    tx: tx.clone(),
                    batch: None,
                },
            };
            let ctl = ctl.clone();
            let capture = cfg.capture.offsets;
            let name = format!("source-{}", src.id());
            source_handles.push(
                std::thread::Builder::new()
                    .name(name)
                    .spawn(move || run_source(src, sink, ctl, start, capture))
                    .expect("spawn source task"),
            );
        }
        // Only tasks hold queue ends from here on, so queues close in order.
        drop(value_tx);
        drop(key_txs);

        let mut result = DataflowResult {
            shape: Some(shape),
            ..Default::default()
        };
        let mut series = Vec::new();
        let mut first_err = None;
        for h in source_handles {
            match join(h).and_then(|r| r) {
                Ok(out) => {
                    result.source_reports.push(out.report);
                    series.extend(out.series);
                    for (p, v) in out.captured {
                        result.captured.entry(p).or_default().extend(v);
                    }
                }
                Err(e) => {
                    first_err.get_or_insert(e);
                }
            }
        }
        for h in map_handles {
            series.extend(join(h)?);
        }
        for h in keyed_handles {
            let out = join(h)?;
            series.extend(out.series);
            result.keyed_outputs += out.outputs;
            result.totals.extend(out.totals);
            result.windows.extend(out.windows);
            result.window_inputs.extend(out.inputs);
            result.late_pairs += out.late;
        }
        if let Some(e) = first_err {
            return Err(e);
        }
        result.samples = to_samples(series);
        result.records = result.stage_total(stage::SOURCE);
        result.passed = result.stage_total(stage::FILTER_PASS);
        result.tokens = result.stage_total(stage::TOKENIZE);
        result.source_reports.sort_by_key(|r| r.client_id);
        Ok(result)
    }
}

/// One sample per (task, stage, second), zero-filled to the last active second.
fn to_samples(series: Vec<Series>) -> Vec<ThroughputSample> {
    let seconds = series.iter().map(|s| s.2.buckets().len()).max().unwrap_or(0);
    let mut out = Vec::with_capacity(series.len() * seconds);
    for Series(stage, task_id, ps) in series {
        for second in 0..seconds {
            out.push(ThroughputSample {
                second,
                task_id,
                stage,
                records: ps.buckets().get(second).copied().unwrap_or(0),
            });
        }
    }
    out.sort_by(|a, b| (a.second, a.stage, a.task_id).cmp(&(b.second, b.stage, b.task_id)));
    out
}
