use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::corpus::CORPUS_RECORD_BYTES;
use super::BenchError;
use crate::pipeline::{WindowKind, WindowSpec, Workload};
use crate::stream::RECORD_OVERHEAD;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkloadKind {
    Count,
    Filter,
    Wordcount,
    WindowedWordcount,
}

impl WorkloadKind {
    /// Word counts; by default they ingest the text corpus.
    pub fn is_word_count(self) -> bool {
        matches!(self, WorkloadKind::Wordcount | WorkloadKind::WindowedWordcount)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceMode {
    Pull,
    Push,
}

impl SourceMode {
    pub fn name(self) -> &'static str {
        match self {
            SourceMode::Pull => "pull",
            SourceMode::Push => "push",
        }
    }
}

/// Where producer values come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValuesKind {
    /// The corpus for word-count workloads, synthetic otherwise.
    Auto,
    /// `rec_s`-byte values cut from generated text.
    Synthetic,
    /// 2 KiB corpus records, each sent once.
    Corpus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Deployment {
    /// Producers (and the backup broker) run as child processes over TCP.
    MultiProcess,
    /// Everything in this process over the loopback transport.
    SingleProcess,
}

/// One experiment. Sizes are bytes; `nc = 0` runs producers only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub workload: WorkloadKind,
    pub source_mode: SourceMode,
    pub np: usize,
    pub nc: usize,
    /// Defaults to `nc`.
    pub nmap: Option<usize>,
    pub ns: u32,
    pub cs_producer: usize,
    pub cs_consumer: usize,
    /// When set, overrides `cs_consumer` with `cs_producer * factor`.
    pub cs_consumer_factor: Option<usize>,
    pub rec_s: usize,
    pub replication: u8,
    pub nbc: usize,
    pub nfs: usize,
    pub duration_seconds: u64,
    /// Duration used under `--full`.
    pub full_duration_seconds: u64,
    pub warmup_seconds: u64,
    pub values: ValuesKind,
    pub corpus_path: Option<PathBuf>,
    pub seed: u64,
    pub filter_pattern: String,
    pub window_kind: WindowKind,
    pub window_size: u64,
    pub window_slide: u64,
    /// Total records across producers; `None` is unbounded.
    pub record_cap: Option<u64>,
    pub poll_timeout_ms: u64,
    pub seal_timeout_ms: u64,
    pub objects_per_consumer: usize,
    pub groups_per_push_worker: usize,
    pub chaining: Option<bool>,
    /// Longest wait for consumers to catch up after producers stop; 0 stops
    /// consumers with the producers.
    pub drain_seconds: u64,
    pub repetitions: usize,
    pub deployment: Deployment,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        let window = WindowSpec::default();
        Self {
            name: String::new(),
            workload: WorkloadKind::Count,
            source_mode: SourceMode::Pull,
            np: 1,
            nc: 1,
            nmap: None,
            ns: 1,
            cs_producer: 16 << 10,
            cs_consumer: 128 << 10,
            cs_consumer_factor: None,
            rec_s: 100,
            replication: 1,
            nbc: 1,
            nfs: 16,
            duration_seconds: 15,
            full_duration_seconds: 60,
            warmup_seconds: 2,
            values: ValuesKind::Auto,
            corpus_path: None,
            seed: 0,
            filter_pattern: "the".into(),
            window_kind: window.kind,
            window_size: window.size,
            window_slide: window.slide,
            record_cap: Some(5_000_000),
            poll_timeout_ms: 1,
            seal_timeout_ms: 1,
            objects_per_consumer: 4,
            groups_per_push_worker: 1,
            chaining: None,
            drain_seconds: 10,
            repetitions: 1,
            deployment: Deployment::MultiProcess,
        }
    }
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self, BenchError> {
        let spec: Self = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn nmap(&self) -> usize {
        self.nmap.unwrap_or(self.nc.max(1))
    }

    pub fn consumer_chunk(&self) -> usize {
        self.cs_consumer_factor
            .map_or(self.cs_consumer, |f| self.cs_producer * f)
    }

    pub fn uses_corpus(&self) -> bool {
        match self.values {
            ValuesKind::Auto => self.workload.is_word_count(),
            ValuesKind::Synthetic => false,
            ValuesKind::Corpus => true,
        }
    }

    /// Bytes per produced record.
    pub fn record_bytes(&self) -> usize {
        if self.uses_corpus() {
            CORPUS_RECORD_BYTES
        } else {
            self.rec_s
        }
    }

    pub fn window(&self) -> WindowSpec {
        WindowSpec {
            kind: self.window_kind,
            size: self.window_size,
            slide: self.window_slide,
        }
    }

    pub fn dataflow_workload(&self) -> Workload {
        match self.workload {
            WorkloadKind::Count => Workload::Count,
            WorkloadKind::Filter => Workload::Filter {
                pattern: self.filter_pattern.clone(),
            },
            WorkloadKind::Wordcount => Workload::WordCount,
            WorkloadKind::WindowedWordcount => Workload::WindowedWordCount { window: self.window() },
        }
    }

    /// Switches to the long run: full duration, no record cap.
    pub fn full(mut self) -> Self {
        self.duration_seconds = self.full_duration_seconds;
        self.record_cap = None;
        self
    }

    /// A directory-safe identifier covering the swept parameters.
    pub fn run_id(&self) -> String {
        let mut id = format!(
            "{:?}-{}-np{}-nc{}-nmap{}-ns{}-cs{}-cc{}-r{}-nbc{}",
            self.workload,
            self.source_mode.name(),
            self.np,
            self.nc,
            self.nmap(),
            self.ns,
            self.cs_producer,
            self.consumer_chunk(),
            self.replication,
            self.nbc
        )
        .to_lowercase();
        if !self.name.is_empty() {
            id = format!("{}-{id}", self.name);
        }
        id
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: String| Err(BenchError::Config(m));
        if self.np == 0 {
            return bad("np must be at least 1".into());
        }
        if self.ns == 0 {
            return bad("ns must be at least 1".into());
        }
        if self.nc > self.ns as usize {
            return bad(format!("nc={} exceeds ns={}: partitions are consumed exclusively", self.nc, self.ns));
        }
        if self.nc > 0 {
            let need = self.nc.max(self.nmap());
            if need > self.nfs {
                return bad(format!("{need} parallel tasks exceed nfs={}", self.nfs));
            }
        }
        if self.source_mode == SourceMode::Push && self.nc > 0 && self.consumer_chunk() < self.cs_producer {
            return bad(format!(
                "push mode needs cs_consumer ({}) >= cs_producer ({})",
                self.consumer_chunk(),
                self.cs_producer
            ));
        }
        if self.cs_producer < self.record_bytes() + RECORD_OVERHEAD {
            return bad(format!(
                "cs_producer {} cannot hold one {} byte record",
                self.cs_producer,
                self.record_bytes()
            ));
        }
        if self.nc > 0 && self.consumer_chunk() < self.cs_producer.min(self.record_bytes() + RECORD_OVERHEAD) {
            return bad("cs_consumer too small for one record".into());
        }
        if !(1..=2).contains(&self.replication) {
            return bad("replication must be 1 or 2".into());
        }
        if self.nbc == 0 || self.groups_per_push_worker == 0 {
            return bad("nbc and groups_per_push_worker must be at least 1".into());
        }
        if self.duration_seconds == 0 || self.warmup_seconds >= self.duration_seconds {
            return bad("duration must exceed the warm-up".into());
        }
        if self.objects_per_consumer < 2 {
            return bad("objects_per_consumer must be at least 2".into());
        }
        if self.repetitions == 0 {
            return bad("repetitions must be at least 1".into());
        }
        if self.workload == WorkloadKind::Filter && self.filter_pattern.is_empty() {
            return bad("empty filter pattern".into());
        }
        if self.workload == WorkloadKind::WindowedWordcount {
            self.window().validate()?;
        }
        Ok(())
    }
}

/// Exclusive partition assignment: partition `p` goes to task `p % nc`, so
/// any remainder lands on the lowest task ids.
pub fn assign_partitions(ns: u32, nc: usize) -> Vec<Vec<u32>> {
    let mut out = vec![Vec::new(); nc];
    if nc == 0 {
        return out;
    }
    for p in 0..ns {
        out[p as usize % nc].push(p);
    }
    out
}

/// Expands a flat spec file where any key may hold an array of
/// alternatives into the cartesian product of specs; keys vary slowest to
/// fastest in alphabetical order.
pub fn expand_matrix(text: &str) -> Result<Vec<ExperimentSpec>, BenchError> {
    let table: toml::Table = toml::from_str(text)?;
    let mut combos: Vec<toml::Table> = vec![toml::Table::new()];
    for (key, value) in table {
        let choices = match value {
            toml::Value::Array(a) if a.is_empty() => {
                return Err(BenchError::Config(format!("{key}: empty list")))
            }
            toml::Value::Array(a) => a,
            v => vec![v],
        };
        let mut next = Vec::with_capacity(combos.len() * choices.len());
        for c in &combos {
            for v in &choices {
                let mut c = c.clone();
                c.insert(key.clone(), v.clone());
                next.push(c);
            }
        }
        combos = next;
    }
    combos
        .into_iter()
        .map(|t| {
            let spec: ExperimentSpec = toml::Value::Table(t).try_into()?;
            spec.validate()?;
            Ok(spec)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn remainder_partitions_go_to_low_task_ids() {
        let a = assign_partitions(8, 3);
        assert_eq!(a, vec![vec![0, 3, 6], vec![1, 4, 7], vec![2, 5]]);
        assert_eq!(assign_partitions(4, 4), vec![vec![0], vec![1], vec![2], vec![3]]);
    }

    #[test]
    fn validation_rules() {
        let ok = ExperimentSpec::default();
        ok.validate().unwrap();
        let more_consumers = ExperimentSpec { nc: 2, ..ok.clone() };
        assert!(more_consumers.validate().is_err());
        let small_objects = ExperimentSpec {
            source_mode: SourceMode::Push,
            cs_consumer: 4096,
            ..ok.clone()
        };
        assert!(small_objects.validate().is_err());
        let wiki_small_chunk = ExperimentSpec {
            workload: WorkloadKind::Wordcount,
            cs_producer: 2048,
            ..ok.clone()
        };
        assert!(wiki_small_chunk.validate().is_err());
        let slots = ExperimentSpec { ns: 8, nc: 4, nmap: Some(32), ..ok };
        assert!(slots.validate().is_err());
    }

    #[test]
    fn matrix_is_cartesian_in_alphabetical_key_order() {
        let specs = expand_matrix(
            "deployment = \"single_process\"\nsource_mode = [\"pull\", \"push\"]\ncs_producer = [1024, 4096, 16384, 65536]\ncs_consumer = 131072\n",
        )
        .unwrap();
        assert_eq!(specs.len(), 8);
        assert_eq!((specs[0].cs_producer, specs[0].source_mode), (1024, SourceMode::Pull));
        assert_eq!((specs[1].cs_producer, specs[1].source_mode), (1024, SourceMode::Push));
        assert_eq!((specs[7].cs_producer, specs[7].source_mode), (65536, SourceMode::Push));
        assert!(specs.iter().all(|s| s.deployment == Deployment::SingleProcess));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(expand_matrix("bogus = 1").is_err());
        assert!(ExperimentSpec::from_toml("np = 2\nwindow_kind = \"count\"\nwindow_size = 10\nwindow_slide = 5").is_ok());
    }

    #[test]
    fn consumer_factor_overrides() {
        let s = ExperimentSpec {
            cs_producer: 2048,
            cs_consumer_factor: Some(8),
            ..Default::default()
        };
        assert_eq!(s.consumer_chunk(), 16384);
    }
}
