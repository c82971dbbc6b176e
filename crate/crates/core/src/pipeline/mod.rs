//! A small dataflow engine: sources feed count, filter, tokenize, keyed-sum
//! and window operators through bounded queues, with per-task per-second
//! throughput logging.

mod dataflow;
mod ops;

pub use dataflow::{
    build_dataflow, Capture, Dataflow, DataflowConfig, DataflowResult, Drain, RunControl,
    TaskShape, Workload, value_hash,
};
pub use ops::{
    key_task, percentile, tokenize, CountWindows, Filter, KeyedSum, TimeWindows, WindowEmission,
    WindowKind, WindowSpec,
};

use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::clients::ClientError;

pub const DEFAULT_QUEUE_CAPACITY: usize = 1024;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid dataflow: {0}")]
    Config(String),
    #[error("source {task}: {source}")]
    Source { task: u32, source: ClientError },
    #[error("sink output: {0}")]
    Io(#[from] std::io::Error),
    #[error("task panicked: {0}")]
    Panicked(String),
}

/// Stage names used in samples.
pub mod stage {
    pub const SOURCE: &str = "source";
    pub const MAP: &str = "map";
    pub const FILTER_PASS: &str = "filter_pass";
    pub const TOKENIZE: &str = "tokenize";
    pub const LOGGER: &str = "logger";
}

/// Records one task handled in one second.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ThroughputSample {
    pub second: usize,
    pub task_id: u32,
    pub stage: &'static str,
    pub records: u64,
}

/// Writes `second,task_id,stage,records`.
pub fn write_sink_csv(out: &mut impl Write, samples: &[ThroughputSample]) -> std::io::Result<()> {
    writeln!(out, "second,task_id,stage,records")?;
    for s in samples {
        writeln!(out, "{},{},{},{}", s.second, s.task_id, s.stage, s.records)?;
    }
    Ok(())
}

/// Per-second totals of one stage summed over tasks, for seconds in
/// `[from, to)`.
pub fn aggregate_per_second(samples: &[ThroughputSample], stage: &str, from: usize, to: usize) -> Vec<u64> {
    let mut agg = vec![0u64; to.saturating_sub(from)];
    for s in samples.iter().filter(|s| s.stage == stage) {
        if (from..to).contains(&s.second) {
            agg[s.second - from] += s.records;
        }
    }
    agg
}

/// Median of a stage's aggregated per-second throughput over `[from, to)`.
pub fn p50_aggregate(samples: &[ThroughputSample], stage: &str, from: usize, to: usize) -> u64 {
    percentile(&aggregate_per_second(samples, stage, from, to), 0.5).unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(second: usize, task_id: u32, records: u64) -> ThroughputSample {
        ThroughputSample {
            second,
            task_id,
            stage: stage::SOURCE,
            records,
        }
    }

    #[test]
    fn constant_rate_median() {
        let samples: Vec<_> = (0..3).map(|sec| s(sec, 0, 100)).collect();
        assert_eq!(p50_aggregate(&samples, stage::SOURCE, 0, 3), 100);
    }

    #[test]
    fn aggregation_sums_tasks_and_skips_warmup() {
        let samples = vec![s(0, 0, 999), s(1, 0, 40), s(1, 1, 40), s(2, 0, 100), s(3, 1, 120)];
        assert_eq!(aggregate_per_second(&samples, stage::SOURCE, 1, 4), vec![80, 100, 120]);
        assert_eq!(p50_aggregate(&samples, stage::SOURCE, 1, 4), 100);
    }

    #[test]
    fn csv_header_and_rows() {
        let mut out = Vec::new();
        write_sink_csv(&mut out, &[s(0, 3, 7)]).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "second,task_id,stage,records\n0,3,source,7\n");
    }
}
