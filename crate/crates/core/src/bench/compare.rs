use std::collections::BTreeMap;
use std::io::Write;

use serde::Serialize;

use super::run::ExperimentResult;
use super::spec::SourceMode;
use super::BenchError;

/// One pull/push pair sharing every other parameter; repetitions are
/// reduced to medians.
#[derive(Clone, Debug, Serialize)]
pub struct ComparisonRow {
    pub key: String,
    pub runs: usize,
    pub pull_consumer_p50: u64,
    pub push_consumer_p50: u64,
    /// push / pull consumer throughput.
    pub ratio: f64,
    pub pull_producer_p50: u64,
    pub push_producer_p50: u64,
    pub pull_rpcs: u64,
    pub push_rpcs: u64,
    pub push_subscribe_rpcs: u64,
    pub pull_consumer_workers: usize,
    pub push_consumer_workers: usize,
    pub push_broker_workers: usize,
}

/// Lower median, matching the nearest-rank p50 used elsewhere.
pub fn median(values: &[u64]) -> u64 {
    crate::pipeline::percentile(values, 0.5).unwrap_or(0)
}

fn pair_key(r: &ExperimentResult) -> String {
    let mut spec = r.spec.clone();
    spec.source_mode = SourceMode::Pull;
    spec.run_id()
}

/// RPCs issued by the consumer side of a run.
fn consumer_rpcs(r: &ExperimentResult) -> u64 {
    ["PULL", "SUBSCRIBE_PUSH", "CONSUMED_NOTIFY"]
        .iter()
        .filter_map(|t| r.total_rpcs_by_type.get(*t))
        .sum()
}

pub fn compare_modes(results: &[ExperimentResult]) -> Result<Vec<ComparisonRow>, BenchError> {
    let mut groups: BTreeMap<String, (Vec<&ExperimentResult>, Vec<&ExperimentResult>)> = BTreeMap::new();
    for r in results {
        let g = groups.entry(pair_key(r)).or_default();
        match r.spec.source_mode {
            SourceMode::Pull => g.0.push(r),
            SourceMode::Push => g.1.push(r),
        }
    }
    let mut rows = Vec::new();
    for (key, (pull, push)) in groups {
        if pull.is_empty() || push.is_empty() {
            return Err(BenchError::Report(format!(
                "{key}: has {} pull and {} push runs; every spec needs both modes",
                pull.len(),
                push.len()
            )));
        }
        let med = |rs: &[&ExperimentResult], f: fn(&ExperimentResult) -> u64| {
            median(&rs.iter().map(|r| f(r)).collect::<Vec<_>>())
        };
        let pull_c = med(&pull, |r| r.consumer_p50_agg);
        let push_c = med(&push, |r| r.consumer_p50_agg);
        rows.push(ComparisonRow {
            key,
            runs: pull.len().min(push.len()),
            pull_consumer_p50: pull_c,
            push_consumer_p50: push_c,
            ratio: if pull_c == 0 { f64::NAN } else { push_c as f64 / pull_c as f64 },
            pull_producer_p50: med(&pull, |r| r.producer_p50_agg),
            push_producer_p50: med(&push, |r| r.producer_p50_agg),
            pull_rpcs: med(&pull, consumer_rpcs),
            push_rpcs: med(&push, consumer_rpcs),
            push_subscribe_rpcs: med(&push, |r| r.subscribe_rpcs),
            pull_consumer_workers: pull[0].consumer_worker_count,
            push_consumer_workers: push[0].consumer_worker_count,
            push_broker_workers: push.iter().map(|r| r.broker_push_workers).max().unwrap_or(0),
        });
    }
    Ok(rows)
}

const HEADER: &str = "key,runs,pull_consumer_p50,push_consumer_p50,ratio,pull_producer_p50,push_producer_p50,pull_rpcs,push_rpcs,push_subscribe_rpcs,pull_consumer_workers,push_consumer_workers,push_broker_workers";

pub fn write_comparison_csv(out: &mut impl Write, rows: &[ComparisonRow]) -> std::io::Result<()> {
    writeln!(out, "{HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{:.3},{},{},{},{},{},{},{},{}",
            r.key,
            r.runs,
            r.pull_consumer_p50,
            r.push_consumer_p50,
            r.ratio,
            r.pull_producer_p50,
            r.push_producer_p50,
            r.pull_rpcs,
            r.push_rpcs,
            r.push_subscribe_rpcs,
            r.pull_consumer_workers,
            r.push_consumer_workers,
            r.push_broker_workers
        )?;
    }
    Ok(())
}

/// Fixed-width table for terminals.
pub fn comparison_table(rows: &[ComparisonRow]) -> String {
    let mut s = format!(
        "{:<60} {:>12} {:>12} {:>7} {:>10} {:>9} {:>8} {:>8}\n",
        "experiment", "pull rec/s", "push rec/s", "ratio", "pull rpcs", "push rpcs", "pull thr", "push thr"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<60} {:>12} {:>12} {:>7.2} {:>10} {:>9} {:>8} {:>8}\n",
            r.key,
            r.pull_consumer_p50,
            r.push_consumer_p50,
            r.ratio,
            r.pull_rpcs,
            r.push_rpcs,
            r.pull_consumer_workers,
            r.push_consumer_workers + r.push_broker_workers
        ));
    }
    s
}
