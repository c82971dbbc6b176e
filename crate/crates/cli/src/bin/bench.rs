use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use colostream::bench::{
    compare_modes, comparison_table, expand_matrix, preset, run_experiment_with, write_comparison_csv,
    Deployment, ExperimentResult, RunOptions, PRESETS,
};
use colostream_cli::init_logging;

/// Experiment harness.
#[derive(Parser, Debug)]
#[command(version)]
struct Args {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Runs every experiment in a spec file (lists expand to a matrix).
    Run {
        #[arg(long, required_unless_present = "preset", conflicts_with = "preset")]
        spec: Option<PathBuf>,
        /// A shipped preset instead of a spec file.
        #[arg(long)]
        preset: Option<String>,
        /// Long runs without the record cap.
        #[arg(long)]
        full: bool,
        /// Run everything in this process over loopback.
        #[arg(long)]
        single_process: bool,
        /// Where the `broker` and `produce` executables live; defaults to
        /// this executable's directory.
        #[arg(long)]
        bin_dir: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pairs pull and push results in DIR/results.jsonl.
    Compare {
        #[arg(long)]
        out: PathBuf,
    },
    Presets {
        #[command(subcommand)]
        cmd: PresetCmd,
    },
}

#[derive(Subcommand, Debug)]
enum PresetCmd {
    List,
    Show { name: String },
}

const RESULTS: &str = "results.jsonl";

fn run(spec_text: &str, full: bool, single: bool, bin_dir: Option<PathBuf>, out: &Path) -> anyhow::Result<()> {
    let specs = expand_matrix(spec_text)?;
    let bin_dir = match bin_dir {
        Some(d) => Some(d),
        None => std::env::current_exe()?.parent().map(Path::to_path_buf),
    };
    std::fs::create_dir_all(out)?;
    let mut results = OpenOptions::new().create(true).append(true).open(out.join(RESULTS))?;
    let total: usize = specs.iter().map(|s| s.repetitions).sum();
    let mut n = 0;
    for spec in specs {
        let mut spec = if full { spec.full() } else { spec };
        if single {
            spec.deployment = Deployment::SingleProcess;
        }
        for rep in 0..spec.repetitions {
            n += 1;
            let dir = out.join(spec.run_id()).join(format!("rep{rep}"));
            log::info!("[{n}/{total}] {}", dir.display());
            let opts = RunOptions {
                out_dir: dir,
                bin_dir: bin_dir.clone(),
                ..Default::default()
            };
            let r = run_experiment_with(&spec, &opts).with_context(|| spec.run_id())?.result;
            println!(
                "{} rep{rep}: producers {} rec/s, consumers {} rec/s (p50), {} consumed",
                r.run_id, r.producer_p50_agg, r.consumer_p50_agg, r.consumer_records
            );
            writeln!(results, "{}", serde_json::to_string(&r)?)?;
        }
    }
    Ok(())
}

fn compare(out: &Path) -> anyhow::Result<()> {
    let f = File::open(out.join(RESULTS)).with_context(|| format!("no {RESULTS} in {}", out.display()))?;
    let results = BufReader::new(f)
        .lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| Ok(serde_json::from_str::<ExperimentResult>(&l?)?))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let rows = compare_modes(&results)?;
    let mut w = BufWriter::new(File::create(out.join("comparison.csv"))?);
    write_comparison_csv(&mut w, &rows)?;
    w.flush()?;
    print!("{}", comparison_table(&rows));
    Ok(())
}

fn main() -> anyhow::Result<()> {
    init_logging();
    match Args::parse().cmd {
        Cmd::Run { spec, preset: name, full, single_process, bin_dir, out } => {
            let text = match (spec, name) {
                (Some(p), _) => std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?,
                (None, Some(n)) => match preset(&n) {
                    Some(t) => t.to_string(),
                    None => bail!("unknown preset {n:?}; see `bench presets list`"),
                },
                (None, None) => unreachable!("clap requires one"),
            };
            run(&text, full, single_process, bin_dir, &out)
        }
        Cmd::Compare { out } => compare(&out),
        Cmd::Presets { cmd: PresetCmd::List } => {
            for (name, text) in PRESETS {
                let runs: usize = expand_matrix(text)?.iter().map(|s| s.repetitions).sum();
                println!("{name:<20} {runs:>4} runs");
            }
            Ok(())
        }
        Cmd::Presets { cmd: PresetCmd::Show { name } } => {
            print!("{}", preset(&name).with_context(|| format!("unknown preset {name:?}"))?);
            Ok(())
        }
    }
}
