use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use anyhow::{bail, Context};
use clap::Parser;
use colostream::bench::{instant_from_epoch_ms, run_fleet, FleetConfig, FleetValues, CORPUS_RECORD_BYTES};
use colostream::clients::{write_report_csv, write_tick_csv, ClientReport};
use colostream::wire::{Endpoint, Network};
use colostream_cli::{init_logging, parse_size};

/// Runs producers appending to every partition of a stream. Producers are
/// spread round-robin over the given brokers.
#[derive(Parser, Debug)]
#[command(version)]
struct Args {
    #[arg(long, value_delimiter = ',', default_value = "127.0.0.1:7070")]
    brokers: Vec<Endpoint>,
    #[arg(long, default_value = "bench")]
    stream: String,
    #[arg(long, default_value_t = 1)]
    partitions: u32,
    #[arg(long, default_value_t = 1)]
    np: usize,
    /// Chunk size.
    #[arg(long, value_parser = parse_size, default_value = "16KiB")]
    cs: usize,
    /// Record size (ignored with --corpus, which uses 2 KiB records).
    #[arg(long, value_parser = parse_size, default_value = "100")]
    recs: usize,
    /// Seconds to produce for.
    #[arg(long, default_value_t = 15)]
    duration: u64,
    /// Replication of the target stream; configured on the broker, recorded
    /// here for the run log.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
    replication: u8,
    #[arg(long, default_value_t = 1)]
    seal_timeout_ms: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Total records across producers.
    #[arg(long)]
    max_records: Option<u64>,
    /// Send the text corpus once instead of synthetic values.
    #[arg(long)]
    corpus: bool,
    /// Corpus file; the generated corpus is used when absent.
    #[arg(long, requires = "corpus")]
    corpus_path: Option<PathBuf>,
    /// Shared run start (Unix ms) so per-second buckets line up across
    /// processes.
    #[arg(long)]
    run_start_ms: Option<u64>,
    /// `second,client_id,records,rpcs`.
    #[arg(long)]
    report: Option<PathBuf>,
    /// `tick,client_id,records` at 100 ms resolution.
    #[arg(long)]
    tick_report: Option<PathBuf>,
}

fn main() -> anyhow::Result<()> {
    init_logging();
    let args = Args::parse();
    if args.brokers.is_empty() || args.np == 0 {
        bail!("need at least one broker and one producer");
    }
    let run_start = args.run_start_ms.map_or_else(Instant::now, instant_from_epoch_ms);
    let until = run_start + Duration::from_secs(args.duration);
    log::info!(
        "{} producers, cs={} recs={} replication={} -> {:?}",
        args.np,
        args.cs,
        args.recs,
        args.replication,
        args.brokers
    );
    let net = Network::new();
    // One fleet per broker; ids stay unique across fleets.
    let nb = args.brokers.len();
    let mut fleets = Vec::new();
    let mut first_id = 0u32;
    for (b, ep) in args.brokers.iter().enumerate() {
        let np = args.np / nb + usize::from(b < args.np % nb);
        if np == 0 {
            continue;
        }
        // Cumulative split so the shares add up to the total exactly.
        let lo = u64::from(first_id);
        let hi = lo + np as u64;
        let share = |total: u64| total * hi / args.np as u64 - total * lo / args.np as u64;
        let cfg = FleetConfig {
            np,
            first_id,
            stream: args.stream.clone(),
            partitions: args.partitions,
            chunk_size: args.cs,
            record_size: if args.corpus { CORPUS_RECORD_BYTES } else { args.recs },
            seal_timeout: Duration::from_millis(args.seal_timeout_ms),
            values: if args.corpus {
                FleetValues::Corpus {
                    path: args.corpus_path.clone(),
                    seed: args.seed,
                }
            } else {
                FleetValues::Synthetic { seed: args.seed }
            },
            record_cap: args.max_records.map(share),
        };
        first_id += np as u32;
        let net = net.clone();
        let ep = ep.clone();
        fleets.push(std::thread::spawn(move || run_fleet(&net, &ep, &cfg, run_start, until)));
    }
    let mut reports: Vec<ClientReport> = Vec::new();
    let mut failed = Vec::new();
    for f in fleets {
        let rs = f.join().map_err(|_| anyhow::anyhow!("producer fleet panicked"))??;
        for r in rs {
            if let Some(e) = &r.error {
                failed.push(format!("producer {}: {e}", r.client.client_id));
            }
            reports.push(r.client);
        }
    }
    let total: u64 = reports.iter().map(ClientReport::records).sum();
    println!("produced {total} records");
    if let Some(path) = &args.report {
        let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
        write_report_csv(&mut w, &reports)?;
    }
    if let Some(path) = &args.tick_report {
        let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
        write_tick_csv(&mut w, &reports)?;
    }
    if !failed.is_empty() {
        bail!("{}", failed.join("; "));
    }
    Ok(())
}
