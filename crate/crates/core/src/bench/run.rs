use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::fleet::{run_fleet, FleetConfig, FleetValues};
use super::spec::{assign_partitions, Deployment, ExperimentSpec, SourceMode, WorkloadKind};
use super::BenchError;
use crate::broker::{Broker, BrokerConfig};
use crate::clients::{
    write_report_csv, write_tick_csv, ClientKind, ClientReport, PullSource, PullSourceConfig, PushGroup,
    PushGroupConfig, PushMember, Source, TICK,
};
use crate::pipeline::{
    aggregate_per_second, build_dataflow, percentile, stage, write_sink_csv, Capture, DataflowConfig,
    DataflowResult, Drain, RunControl,
};
use crate::stream::RecordIter;
use crate::wire::{Delivery, Endpoint, MsgType, Network};

pub const BENCH_STREAM: &str = "bench";

/// How long consumers must see no data, after producers finish, before the
/// drain ends.
const DRAIN_QUIET: Duration = Duration::from_millis(300);

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Directory holding the `produce` and `broker` executables; required for
    /// multi-process runs.
    pub bin_dir: Option<PathBuf>,
    pub capture: Capture,
    /// Record `(offset, value hash)` of everything appended, per partition.
    pub capture_appended: bool,
}

impl RunOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Self {
            out_dir: out_dir.into(),
            ..Default::default()
        }
    }
}

/// Summary of one run, serialized as `result.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub run_id: String,
    pub spec: ExperimentSpec,
    /// Medians of summed per-second records over the steady-state seconds
    /// (see [`steady_p50`]).
    pub producer_p50_agg: u64,
    pub consumer_p50_agg: u64,
    /// Same medians over 100 ms ticks, scaled to records/s (see
    /// [`fine_p50`]); meaningful where capped runs finish within seconds.
    #[serde(default)]
    pub producer_p50_fine: u64,
    #[serde(default)]
    pub consumer_p50_fine: u64,
    /// The workload's logging stage (map for count/filter, keyed output for
    /// word counts).
    pub sink_p50_agg: u64,
    pub producer_records: u64,
    pub consumer_records: u64,
    pub sink_records: u64,
    pub filter_passed: u64,
    pub total_rpcs_by_type: BTreeMap<String, u64>,
    pub subscribe_rpcs: u64,
    pub pull_rpcs: u64,
    pub broker_worker_seconds: f64,
    pub broker_push_workers: usize,
    pub consumer_polling_workers: usize,
    pub consumer_notification_workers: usize,
    /// Consumer-side threads issuing RPCs.
    pub consumer_worker_count: usize,
    pub pipeline_threads: usize,
    pub distinct_keys: usize,
    pub window_emissions: u64,
    pub late_pairs: u64,
    pub record_cap_reached: bool,
    pub elapsed_seconds: f64,
    pub csv: BTreeMap<String, PathBuf>,
}

/// Everything a run produced, for callers that verify more than the summary.
pub struct ExperimentRun {
    pub result: ExperimentResult,
    pub dataflow: Option<DataflowResult>,
    pub producers: Vec<ClientReport>,
    pub appended: BTreeMap<u32, Vec<(u64, u64)>>,
}

pub fn run_experiment(spec: &ExperimentSpec, out_dir: &Path) -> Result<ExperimentResult, BenchError> {
    run_experiment_with(spec, &RunOptions::new(out_dir)).map(|r| r.result)
}

pub fn epoch_ms(t: SystemTime) -> u64 {
    t.duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

/// Maps a wall-clock instant shared between processes onto this process's
/// monotonic clock.
pub fn instant_from_epoch_ms(ms: u64) -> Instant {
    let now_ms = epoch_ms(SystemTime::now());
    let now = Instant::now();
    if ms <= now_ms {
        now.checked_sub(Duration::from_millis(now_ms - ms)).unwrap_or(now)
    } else {
        now + Duration::from_millis(ms - now_ms)
    }
}

/// Reads `second,client_id,records,rpcs` rows back into reports.
pub fn read_report_csv(path: &Path, kind: ClientKind) -> Result<Vec<ClientReport>, BenchError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| BenchError::Report(format!("{}: {e}", path.display())))?;
    let mut by_client: BTreeMap<u32, ClientReport> = BTreeMap::new();
    for row in rdr.deserialize::<(usize, u32, u64, u64)>() {
        let (second, client_id, records, rpcs) = row.map_err(|e| BenchError::Report(format!("{}: {e}", path.display())))?;
        let r = by_client.entry(client_id).or_insert_with(|| ClientReport {
            client_id,
            kind,
            records_per_second: Vec::new(),
            rpcs_per_second: Vec::new(),
            records_per_tick: Vec::new(),
        });
        for v in [&mut r.records_per_second, &mut r.rpcs_per_second] {
            if v.len() <= second {
                v.resize(second + 1, 0);
            }
        }
        r.records_per_second[second] += records;
        r.rpcs_per_second[second] += rpcs;
    }
    Ok(by_client.into_values().collect())
}

/// Median of the steady-state seconds of a per-second series: after the
/// warm-up, before `duration`, and before the second in which the component
/// went idle for good (that last second is partial).
pub fn steady_p50(per_second: &[u64], warmup: usize, duration: usize) -> u64 {
    let active_end = per_second.iter().rposition(|&n| n > 0).unwrap_or(0);
    let to = duration.min(active_end);
    let window = per_second.get(warmup..to.max(warmup)).unwrap_or(&[]);
    percentile(window, 0.5).unwrap_or(0)
}

fn summed(reports: &[ClientReport]) -> Vec<u64> {
    let len = reports.iter().map(|r| r.records_per_second.len()).max().unwrap_or(0);
    (0..len)
        .map(|s| reports.iter().map(|r| r.records_per_second.get(s).copied().unwrap_or(0)).sum())
        .collect()
}

/// Ticks skipped at the start of the fine-grained window.
const FINE_WARMUP_TICKS: usize = 2;

/// [`steady_p50`] over [`TICK`]-sized buckets: the first
/// 200 ms and the final partial tick are excluded, and the median is scaled
/// to records per second.
pub fn fine_p50(per_tick: &[u64], duration: Duration) -> u64 {
    let ticks = (duration.as_millis() / TICK.as_millis()) as usize;
    steady_p50(per_tick, FINE_WARMUP_TICKS, ticks) * (1000 / TICK.as_millis() as u64)
}

fn summed_ticks(reports: &[ClientReport]) -> Vec<u64> {
    let len = reports.iter().map(|r| r.records_per_tick.len()).max().unwrap_or(0);
    (0..len)
        .map(|t| reports.iter().map(|r| r.records_per_tick.get(t).copied().unwrap_or(0)).sum())
        .collect()
}

/// Reads `tick,client_id,records` rows back into the reports' tick series.
fn read_tick_csv(path: &Path, reports: &mut [ClientReport]) -> Result<(), BenchError> {
    let err = |e: csv::Error| BenchError::Report(format!("{}: {e}", path.display()));
    let mut rdr = csv::Reader::from_path(path).map_err(err)?;
    for row in rdr.deserialize::<(usize, u32, u64)>() {
        let (tick, client_id, records) = row.map_err(err)?;
        let r = reports
            .iter_mut()
            .find(|r| r.client_id == client_id)
            .ok_or_else(|| BenchError::Report(format!("{}: unknown client {client_id}", path.display())))?;
        if r.records_per_tick.len() <= tick {
            r.records_per_tick.resize(tick + 1, 0);
        }
        r.records_per_tick[tick] += records;
    }
    Ok(())
}

/// Unique loopback names so concurrent runs in one process do not collide.
fn next_run_tag() -> u64 {
    static NEXT: AtomicU64 = AtomicU64::new(0);
    NEXT.fetch_add(1, Ordering::Relaxed)
}

struct ChildGuard(Option<Child>);

impl ChildGuard {
    fn wait(mut self, what: &str) -> Result<(), BenchError> {
        let status = self.0.take().expect("child present").wait()?;
        if status.success() {
            Ok(())
        } else {
            Err(BenchError::Component {
                component: what.into(),
                message: format!("exited with {status}"),
            })
        }
    }
}

impl Drop for ChildGuard {
    fn drop(&mut self) {
        if let Some(c) = self.0.as_mut() {
            let _ = c.kill();
            let _ = c.wait();
        }
    }
}

enum Backup {
    Local(Broker),
    Child(ChildGuard),
}

fn bin(opts: &RunOptions, name: &str) -> Result<PathBuf, BenchError> {
    let dir = opts
        .bin_dir
        .as_ref()
        .ok_or_else(|| BenchError::Config("multi-process runs need the executables directory".into()))?;
    let p = dir.join(format!("{name}{}", std::env::consts::EXE_SUFFIX));
    if !p.exists() {
        return Err(BenchError::Config(format!("{} not found", p.display())));
    }
    Ok(p)
}

fn start_backup(spec: &ExperimentSpec, opts: &RunOptions, net: &Network, tag: u64) -> Result<(Backup, Endpoint), BenchError> {
    match spec.deployment {
        Deployment::SingleProcess => {
            let cfg = BrokerConfig::new(Endpoint::Loopback(format!("bench-backup-{tag}")))
                .with_workers(spec.nbc)
                .with_stream(BENCH_STREAM, spec.ns);
            let b = Broker::start(cfg, net)?;
            let ep = b.endpoint().clone();
            Ok((Backup::Local(b), ep))
        }
        Deployment::MultiProcess => {
            let mut child = Command::new(bin(opts, "broker")?)
                .args(["--listen", "127.0.0.1:0", "--workers", &spec.nbc.to_string()])
                .args(["--stream", &format!("{BENCH_STREAM}:{}", spec.ns)])
                .stdout(Stdio::piped())
                .stderr(Stdio::inherit())
                .spawn()?;
            let stdout = child.stdout.take().expect("piped stdout");
            let guard = ChildGuard(Some(child));
            let mut line = String::new();
            BufReader::new(stdout).read_line(&mut line)?;
            let ep = line
                .trim()
                .strip_prefix("listening ")
                .and_then(|s| s.parse::<Endpoint>().ok())
                .ok_or_else(|| BenchError::Component {
                    component: "backup broker".into(),
                    message: format!("unexpected banner {line:?}"),
                })?;
            Ok((Backup::Child(guard), ep))
        }
    }
}

fn fleet_config(spec: &ExperimentSpec) -> FleetConfig {
    FleetConfig {
        np: spec.np,
        first_id: 0,
        stream: BENCH_STREAM.into(),
        partitions: spec.ns,
        chunk_size: spec.cs_producer,
        record_size: spec.record_bytes(),
        seal_timeout: Duration::from_millis(spec.seal_timeout_ms),
        values: if spec.uses_corpus() {
            FleetValues::Corpus {
                path: spec.corpus_path.clone(),
                seed: spec.seed,
            }
        } else {
            FleetValues::Synthetic { seed: spec.seed }
        },
        record_cap: spec.record_cap,
    }
}

fn spawn_producers(
    spec: &ExperimentSpec,
    opts: &RunOptions,
    broker: &Endpoint,
    start_ms: u64,
    report: &Path,
    ticks: &Path,
) -> Result<ChildGuard, BenchError> {
    let mut cmd = Command::new(bin(opts, "produce")?);
    cmd.args(["--brokers", &broker.to_string()])
        .args(["--stream", BENCH_STREAM])
        .args(["--partitions", &spec.ns.to_string()])
        .args(["--np", &spec.np.to_string()])
        .args(["--cs", &spec.cs_producer.to_string()])
        .args(["--recs", &spec.record_bytes().to_string()])
        .args(["--duration", &spec.duration_seconds.to_string()])
        .args(["--replication", &spec.replication.to_string()])
        .args(["--seal-timeout-ms", &spec.seal_timeout_ms.to_string()])
        .args(["--seed", &spec.seed.to_string()])
        .args(["--run-start-ms", &start_ms.to_string()])
        .arg("--report")
        .arg(report)
        .arg("--tick-report")
        .arg(ticks);
    if let Some(cap) = spec.record_cap {
        cmd.args(["--max-records", &cap.to_string()]);
    }
    if spec.uses_corpus() {
        cmd.arg("--corpus");
        if let Some(p) = &spec.corpus_path {
            cmd.args(["--corpus-path".as_ref(), p.as_os_str()]);
        }
    }
    Ok(ChildGuard(Some(cmd.stdin(Stdio::null()).spawn()?)))
}

fn build_sources(
    spec: &ExperimentSpec,
    net: &Network,
    broker: &Broker,
    run_start: Instant,
) -> Result<(Vec<Box<dyn Source>>, u64), BenchError> {
    let assignment = assign_partitions(spec.ns, spec.nc);
    match spec.source_mode {
        SourceMode::Pull => {
            let mut out: Vec<Box<dyn Source>> = Vec::new();
            for (t, parts) in assignment.into_iter().enumerate() {
                let mut cfg = PullSourceConfig::new(t as u32, BENCH_STREAM, parts.into_iter().map(|p| (p, 0)).collect());
                cfg.max_bytes = spec.consumer_chunk();
                cfg.poll_timeout = Duration::from_millis(spec.poll_timeout_ms);
                out.push(Box::new(PullSource::connect(net, broker.endpoint(), cfg, run_start)?));
            }
            Ok((out, 0))
        }
        SourceMode::Push => {
            let members = assignment
                .into_iter()
                .enumerate()
                .map(|(t, parts)| PushMember {
                    task_id: t as u32,
                    partitions: parts.into_iter().map(|p| (p, 0)).collect(),
                })
                .collect();
            let mut cfg = PushGroupConfig::new("bench", BENCH_STREAM, members, spec.consumer_chunk());
            cfg.objects_per_consumer = spec.objects_per_consumer as u32;
            cfg.delivery = Delivery::Shared;
            let group = PushGroup::subscribe(net, broker.endpoint(), &cfg, Some(broker.store()), run_start)?;
            let rpcs = group.subscribe_rpcs;
            let sources = group
                .into_sources()
                .into_iter()
                .map(|s| Box::new(s) as Box<dyn Source>)
                .collect();
            Ok((sources, rpcs))
        }
    }
}

fn appended_hashes(broker: &Broker, ns: u32) -> Result<BTreeMap<u32, Vec<(u64, u64)>>, BenchError> {
    let mut out = BTreeMap::new();
    for p in 0..ns {
        let chunks = broker
            .read(BENCH_STREAM, p, 0, usize::MAX)
            .map_err(crate::clients::ClientError::from)?;
        let mut v = Vec::new();
        for c in chunks {
            for (i, r) in RecordIter::new(c.payload()).enumerate() {
                let r = r.map_err(crate::clients::ClientError::from)?;
                v.push((c.base_offset() + i as u64, crate::pipeline::value_hash(r.value)));
            }
        }
        out.insert(p, v);
    }
    Ok(out)
}

/// Runs one experiment: backup, broker, consumers and dataflow, then
/// producers; waits out the duration and the drain, tears down in reverse
/// and writes all CSVs plus `result.json` into the run directory.
pub fn run_experiment_with(spec: &ExperimentSpec, opts: &RunOptions) -> Result<ExperimentRun, BenchError> {
    spec.validate()?;
    std::fs::create_dir_all(&opts.out_dir)?;
    let out = |name: &str| opts.out_dir.join(name);
    let tag = next_run_tag();
    let net = Network::new();
    let listen = match spec.deployment {
        Deployment::SingleProcess => Endpoint::Loopback(format!("bench-broker-{tag}")),
        Deployment::MultiProcess => Endpoint::Tcp("127.0.0.1:0".into()),
    };

    let backup = if spec.replication == 2 {
        Some(start_backup(spec, opts, &net, tag)?)
    } else {
        None
    };
    let mut bcfg = BrokerConfig::new(listen)
        .with_workers(spec.nbc)
        .with_stream(BENCH_STREAM, spec.ns);
    bcfg.groups_per_push_worker = spec.groups_per_push_worker;
    bcfg.metrics_csv = Some(out("broker_rpcs.csv"));
    if let Some((_, ep)) = &backup {
        bcfg = bcfg.with_backup(ep.clone());
    }
    let broker = Broker::start(bcfg, &net)?;

    let wall_start = SystemTime::now();
    let run_start = Instant::now();
    let until = run_start + Duration::from_secs(spec.duration_seconds);
    let input_done = Arc::new(AtomicBool::new(false));

    // Consumers and the dataflow come up before producers.
    let consuming = spec.nc > 0;
    let mut subscribe_rpcs = 0;
    let dataflow = if consuming {
        let (sources, rpcs) = build_sources(spec, &net, &broker, run_start)?;
        subscribe_rpcs = rpcs;
        let mut cfg = DataflowConfig::new(spec.dataflow_workload(), spec.nc, spec.nmap(), run_start);
        cfg.chaining = spec.chaining;
        cfg.slots = Some(spec.nfs);
        cfg.capture = opts.capture;
        let df = build_dataflow(cfg)?;
        // With a drain, consumers run until producers are done and the
        // stream has gone quiet; without one they stop with the duration.
        let ctl = if spec.drain_seconds > 0 {
            RunControl {
                until: run_start,
                drain: Some(Drain {
                    input_done: Arc::clone(&input_done),
                    quiet: DRAIN_QUIET,
                    deadline: until + Duration::from_secs(spec.drain_seconds),
                }),
            }
        } else {
            RunControl::until(until)
        };
        let threads = df.shape().threads();
        let h = std::thread::Builder::new()
            .name("dataflow".into())
            .spawn(move || df.run(sources, ctl))
            .expect("spawn dataflow");
        Some((h, threads))
    } else {
        None
    };

    let producers: Result<Vec<ClientReport>, BenchError> = match spec.deployment {
        Deployment::SingleProcess => run_fleet(&net, broker.endpoint(), &fleet_config(spec), run_start, until).and_then(|reports| {
            if let Some(e) = reports.iter().find_map(|r| r.error.clone()) {
                return Err(BenchError::Component {
                    component: "producer".into(),
                    message: e,
                });
            }
            let clients: Vec<ClientReport> = reports.into_iter().map(|r| r.client).collect();
            write_report_csv(&mut BufWriter::new(File::create(out("producers.csv"))?), &clients)?;
            write_tick_csv(&mut BufWriter::new(File::create(out("producer_ticks.csv"))?), &clients)?;
            Ok(clients)
        }),
        Deployment::MultiProcess => spawn_producers(
            spec,
            opts,
            broker.endpoint(),
            epoch_ms(wall_start),
            &out("producers.csv"),
            &out("producer_ticks.csv"),
        )
        .and_then(|child| child.wait("producers"))
        .and_then(|()| {
            let mut reports = read_report_csv(&out("producers.csv"), ClientKind::Producer)?;
            read_tick_csv(&out("producer_ticks.csv"), &mut reports)?;
            Ok(reports)
        }),
    };
    input_done.store(true, Ordering::Release);

    let df_result = match dataflow {
        Some((h, threads)) => {
            let r = h.join().map_err(|_| BenchError::Component {
                component: "dataflow".into(),
                message: "panicked".into(),
            })?;
            Some((r?, threads))
        }
        None => None,
    };
    let producers = producers?;
    let elapsed = run_start.elapsed().as_secs_f64();
    let appended = if opts.capture_appended {
        appended_hashes(&broker, spec.ns)?
    } else {
        BTreeMap::new()
    };

    let metrics = Arc::clone(broker.metrics());
    broker.shutdown();
    match backup {
        Some((Backup::Local(b), _)) => b.shutdown(),
        Some((Backup::Child(c), _)) => drop(c),
        None => {}
    }

    let from = spec.warmup_seconds as usize;
    let to = spec.duration_seconds as usize;
    let producer_records: u64 = producers.iter().map(ClientReport::records).sum();
    let mut csv = BTreeMap::new();
    csv.insert("producers".to_string(), out("producers.csv"));
    csv.insert("producer_ticks".to_string(), out("producer_ticks.csv"));
    csv.insert("broker_rpcs".to_string(), out("broker_rpcs.csv"));
    let rpcs: BTreeMap<String, u64> = metrics
        .rpcs_by_type()
        .into_iter()
        .map(|(t, n)| (t.name().to_string(), n))
        .collect();
    let mut result = ExperimentResult {
        run_id: spec.run_id(),
        spec: spec.clone(),
        producer_p50_agg: steady_p50(&summed(&producers), from, to),
        consumer_p50_agg: 0,
        producer_p50_fine: fine_p50(&summed_ticks(&producers), Duration::from_secs(spec.duration_seconds)),
        consumer_p50_fine: 0,
        sink_p50_agg: 0,
        producer_records,
        consumer_records: 0,
        sink_records: 0,
        filter_passed: 0,
        total_rpcs_by_type: rpcs,
        subscribe_rpcs: metrics.rpcs(MsgType::SubscribePush).max(subscribe_rpcs),
        pull_rpcs: metrics.rpcs(MsgType::Pull),
        broker_worker_seconds: (spec.nbc + metrics.push_worker_peak()) as f64 * elapsed,
        broker_push_workers: metrics.push_worker_peak(),
        consumer_polling_workers: 0,
        consumer_notification_workers: 0,
        consumer_worker_count: 0,
        pipeline_threads: 0,
        distinct_keys: 0,
        window_emissions: 0,
        late_pairs: 0,
        record_cap_reached: spec.record_cap.is_some_and(|c| producer_records >= c),
        elapsed_seconds: elapsed,
        csv,
    };
    let mut df_out = None;
    if let Some((df, threads)) = df_result {
        let sink_stage = if spec.workload.is_word_count() { stage::LOGGER } else { stage::MAP };
        write_report_csv(&mut BufWriter::new(File::create(out("consumers.csv"))?), &df.source_reports)?;
        write_sink_csv(&mut BufWriter::new(File::create(out("sink.csv"))?), &df.samples)?;
        result.csv.insert("consumers".into(), out("consumers.csv"));
        result.csv.insert("sink".into(), out("sink.csv"));
        // Counted from behavior: a source that issued RPCs polled the broker.
        let polling = df.source_reports.iter().filter(|r| r.rpcs() > 0).count();
        result.consumer_polling_workers = polling;
        result.consumer_worker_count = polling;
        if spec.source_mode == SourceMode::Push {
            result.consumer_notification_workers = df.source_reports.len() - polling;
        }
        result.consumer_p50_agg = steady_p50(&summed(&df.source_reports), from, to);
        result.consumer_p50_fine = fine_p50(&summed_ticks(&df.source_reports), Duration::from_secs(spec.duration_seconds));
        result.consumer_records = df.records;
        let sink_len = df.samples.iter().map(|s| s.second + 1).max().unwrap_or(0);
        result.sink_p50_agg = steady_p50(&aggregate_per_second(&df.samples, sink_stage, 0, sink_len), from, to);
        result.sink_records = df.stage_total(sink_stage);
        result.filter_passed = df.passed;
        result.pipeline_threads = threads;
        result.distinct_keys = df.totals.len();
        result.window_emissions = if spec.workload == WorkloadKind::WindowedWordcount { df.keyed_outputs } else { 0 };
        result.late_pairs = df.late_pairs;
        df_out = Some(df);
    }
    let json = serde_json::to_string_pretty(&result).map_err(|e| BenchError::Report(e.to_string()))?;
    let mut f = File::create(out("result.json"))?;
    f.write_all(json.as_bytes())?;
    Ok(ExperimentRun {
        result,
        dataflow: df_out,
        producers,
        appended,
    })
}
