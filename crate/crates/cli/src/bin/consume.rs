use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use anyhow::{bail, Context};
use clap::{Parser, ValueEnum};
use colostream::bench::assign_partitions;
use colostream::clients::{
    write_report_csv, PullSource, PullSourceConfig, PushGroup, PushGroupConfig, PushMember, Source,
};
use colostream::pipeline::{build_dataflow, write_sink_csv, DataflowConfig, RunControl, WindowSpec, Workload};
use colostream::wire::{Delivery, Endpoint, Network};
use colostream_cli::{init_logging, parse_millis, parse_size};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Pull,
    Push,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Job {
    Count,
    Filter,
    Wordcount,
    WindowedWordcount,
}

/// Consumes a stream with Nc source tasks feeding a dataflow. Push sources
/// in a separate process receive objects through broker replies.
#[derive(Parser, Debug)]
#[command(version)]
struct Args {
    #[arg(long, value_delimiter = ',', default_value = "127.0.0.1:7070")]
    brokers: Vec<Endpoint>,
    #[arg(long, value_enum, default_value_t = Mode::Pull)]
    mode: Mode,
    #[arg(long, default_value_t = 1)]
    nc: usize,
    /// Pull byte budget per partition, or push object size.
    #[arg(long, value_parser = parse_size, default_value = "128KiB")]
    cs: usize,
    #[arg(long, default_value_t = 15)]
    duration: u64,
    #[arg(long, default_value = "bench")]
    stream: String,
    #[arg(long, default_value_t = 1)]
    partitions: u32,
    #[arg(long, value_parser = parse_millis, default_value = "1")]
    poll_timeout_ms: Duration,
    #[arg(long, default_value_t = 4)]
    objects_per_consumer: u32,
    #[arg(long, value_enum, default_value_t = Job::Count)]
    workload: Job,
    /// Map parallelism; defaults to --nc.
    #[arg(long)]
    nmap: Option<usize>,
    #[arg(long, default_value = "the")]
    pattern: String,
    /// `second,client_id,records,rpcs` for the source tasks.
    #[arg(long)]
    report: Option<PathBuf>,
    /// `second,task_id,stage,records` for every task.
    #[arg(long)]
    sink_csv: Option<PathBuf>,
}

fn main() -> anyhow::Result<()> {
    init_logging();
    let args = Args::parse();
    let Some(broker) = args.brokers.first() else { bail!("need a broker") };
    if args.brokers.len() > 1 {
        log::warn!("consumers read from the first broker only ({broker})");
    }
    if args.nc == 0 || args.nc > args.partitions as usize {
        bail!("nc must be between 1 and the partition count");
    }
    let net = Network::new();
    let run_start = Instant::now();
    let assignment = assign_partitions(args.partitions, args.nc);
    let sources: Vec<Box<dyn Source>> = match args.mode {
        Mode::Pull => assignment
            .into_iter()
            .enumerate()
            .map(|(t, parts)| {
                let mut cfg = PullSourceConfig::new(t as u32, &args.stream, parts.into_iter().map(|p| (p, 0)).collect());
                cfg.max_bytes = args.cs;
                cfg.poll_timeout = args.poll_timeout_ms;
                Ok(Box::new(PullSource::connect(&net, broker, cfg, run_start)?) as Box<dyn Source>)
            })
            .collect::<anyhow::Result<_>>()?,
        Mode::Push => {
            let members = assignment
                .into_iter()
                .enumerate()
                .map(|(t, parts)| PushMember {
                    task_id: t as u32,
                    partitions: parts.into_iter().map(|p| (p, 0)).collect(),
                })
                .collect();
            let mut cfg = PushGroupConfig::new(&format!("consume-{}", std::process::id()), &args.stream, members, args.cs);
            cfg.objects_per_consumer = args.objects_per_consumer;
            cfg.delivery = Delivery::Remote;
            let group = PushGroup::subscribe(&net, broker, &cfg, None, run_start).context("subscribing")?;
            group.into_sources().into_iter().map(|s| Box::new(s) as Box<dyn Source>).collect()
        }
    };
    let workload = match args.workload {
        Job::Count => Workload::Count,
        Job::Filter => Workload::Filter { pattern: args.pattern.clone() },
        Job::Wordcount => Workload::WordCount,
        Job::WindowedWordcount => Workload::WindowedWordCount { window: WindowSpec::default() },
    };
    let cfg = DataflowConfig::new(workload, args.nc, args.nmap.unwrap_or(args.nc), run_start);
    let df = build_dataflow(cfg)?;
    let result = df.run(sources, RunControl::until(run_start + Duration::from_secs(args.duration)))?;
    let rpcs: u64 = result.source_reports.iter().map(|r| r.rpcs()).sum();
    println!(
        "consumed {} records with {} RPCs ({} source tasks, {} keys)",
        result.records,
        rpcs,
        args.nc,
        result.totals.len()
    );
    if let Some(path) = &args.report {
        write_report_csv(&mut BufWriter::new(File::create(path)?), &result.source_reports)?;
    }
    if let Some(path) = &args.sink_csv {
        write_sink_csv(&mut BufWriter::new(File::create(path)?), &result.samples)?;
    }
    Ok(())
}
