use std::io::Write;
use std::path::PathBuf;
use std::time::Duration;

use anyhow::Context;
use clap::Parser;
use colostream::broker::{Broker, BrokerConfig, StreamSpec};
use colostream::stream::DEFAULT_SEGMENT_BYTES;
use colostream::wire::{Endpoint, Network};
use colostream_cli::{init_logging, parse_size};

/// Stream storage broker. Prints `listening ADDR` once ready.
#[derive(Parser, Debug)]
#[command(version)]
struct Args {
    #[arg(long, default_value = "127.0.0.1:7070")]
    listen: Endpoint,
    /// Worker lanes (NBc).
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long, value_parser = parse_size, default_value_t = DEFAULT_SEGMENT_BYTES)]
    segment_bytes: usize,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
    replication: u8,
    /// Required with --replication 2.
    #[arg(long)]
    backup: Option<Endpoint>,
    /// `second,msg_type,count` rows, flushed each second.
    #[arg(long)]
    metrics_csv: Option<PathBuf>,
    /// `NAME:PARTITIONS`; repeatable.
    #[arg(long = "stream", default_value = "bench:1")]
    streams: Vec<StreamSpec>,
    #[arg(long, default_value_t = 1)]
    groups_per_push_worker: usize,
    /// Shut down after this many seconds instead of running until killed.
    #[arg(long)]
    duration: Option<u64>,
}

fn main() -> anyhow::Result<()> {
    init_logging();
    let args = Args::parse();
    let mut cfg = BrokerConfig::new(args.listen);
    cfg.worker_count = args.workers;
    cfg.segment_bytes = args.segment_bytes;
    cfg.max_chunk_bytes = args.segment_bytes;
    cfg.replication = args.replication;
    cfg.backup = args.backup;
    cfg.metrics_csv = args.metrics_csv;
    cfg.streams = args.streams;
    cfg.groups_per_push_worker = args.groups_per_push_worker;
    let broker = Broker::start(cfg, &Network::new()).context("starting broker")?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "listening {}", broker.endpoint())?;
    out.flush()?;
    drop(out);
    log::info!("broker on {} serving {:?}", broker.endpoint(), broker.streams());
    match args.duration {
        Some(s) => std::thread::sleep(Duration::from_secs(s)),
        None => loop {
            std::thread::park();
        },
    }
    let m = broker.metrics();
    log::info!("appended {} records", m.appended_total());
    broker.shutdown();
    Ok(())
}
