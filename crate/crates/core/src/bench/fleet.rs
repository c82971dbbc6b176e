use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use super::corpus::{generated_corpus, load_corpus, split_records, RecordValues, CORPUS_RECORD_BYTES, GENERATED_CORPUS_BYTES};
use super::BenchError;
use crate::clients::{
    run_producer, ClientKind, ClientReport, CyclingValues, ProducerConfig, ProducerReport, ValueSource,
};
use crate::wire::{Endpoint, Network};

/// Synthetic values are cut from a generated text this large.
const SYNTHETIC_TEXT_BYTES: usize = 1 << 20;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FleetValues {
    /// Fixed-size values cycled from generated text.
    Synthetic { seed: u64 },
    /// Each corpus record exactly once across the fleet (striped by
    /// producer id); `None` uses the generated corpus.
    Corpus { path: Option<PathBuf>, seed: u64 },
}

/// A set of producers writing every partition of one stream.
#[derive(Clone, Debug)]
pub struct FleetConfig {
    pub np: usize,
    pub first_id: u32,
    pub stream: String,
    pub partitions: u32,
    pub chunk_size: usize,
    pub record_size: usize,
    pub seal_timeout: Duration,
    pub values: FleetValues,
    /// Total across producers.
    pub record_cap: Option<u64>,
}

/// The records a corpus run sends, in order.
pub fn corpus_records(path: Option<&std::path::Path>, seed: u64) -> Result<Vec<Vec<u8>>, BenchError> {
    match path {
        Some(p) => load_corpus(p, CORPUS_RECORD_BYTES),
        None => split_records(&generated_corpus(GENERATED_CORPUS_BYTES, seed), CORPUS_RECORD_BYTES),
    }
}

/// Runs `np` producer threads until `until`, their caps, or the corpus is
/// exhausted.
pub fn run_fleet(
    network: &Network,
    broker: &Endpoint,
    cfg: &FleetConfig,
    run_start: Instant,
    until: Instant,
) -> Result<Vec<ProducerReport>, BenchError> {
    if cfg.np == 0 {
        return Err(BenchError::Config("fleet needs at least one producer".into()));
    }
    let partitions: Vec<u32> = (0..cfg.partitions).collect();
    let mut values: Vec<(Box<dyn ValueSource>, Option<u64>)> = Vec::with_capacity(cfg.np);
    let share = |i: usize, total: u64| total / cfg.np as u64 + u64::from((i as u64) < total % cfg.np as u64);
    match &cfg.values {
        FleetValues::Synthetic { seed } => {
            let text: Arc<[u8]> = generated_corpus(SYNTHETIC_TEXT_BYTES, *seed).into();
            for i in 0..cfg.np {
                let start = i * 7919 % (text.len() / cfg.record_size.max(1)).max(1);
                let v = CyclingValues::new(Arc::clone(&text), cfg.record_size, start);
                values.push((Box::new(v), cfg.record_cap.map(|c| share(i, c))));
            }
        }
        FleetValues::Corpus { path, seed } => {
            let recs = Arc::new(corpus_records(path.as_deref(), *seed)?);
            for i in 0..cfg.np {
                let v = RecordValues::new(Arc::clone(&recs), i, cfg.np);
                let n = v.len() as u64;
                let cap = cfg.record_cap.map_or(n, |c| n.min(share(i, c)));
                values.push((Box::new(v), Some(cap)));
            }
        }
    }
    let handles: Vec<_> = values
        .into_iter()
        .enumerate()
        .map(|(i, (mut v, cap))| {
            let mut pc = ProducerConfig::new(cfg.first_id + i as u32, &cfg.stream, partitions.clone());
            pc.chunk_size = cfg.chunk_size;
            pc.record_size = cfg.record_size;
            pc.seal_timeout = cfg.seal_timeout;
            pc.max_records = cap;
            let net = network.clone();
            let ep = broker.clone();
            std::thread::Builder::new()
                .name(format!("producer-{}", pc.producer_id))
                .spawn(move || {
                    if cap == Some(0) {
                        return Ok(ProducerReport {
                            client: ClientReport {
                                client_id: pc.producer_id,
                                kind: ClientKind::Producer,
                                records_per_second: Vec::new(),
                                rpcs_per_second: Vec::new(),
                                records_per_tick: Vec::new(),
                            },
                            chunks: 0,
                            resyncs: 0,
                            error: None,
                        });
                    }
                    run_producer(&net, &ep, &pc, v.as_mut(), run_start, until)
                })
                .expect("spawn producer")
        })
        .collect();
    let mut reports = Vec::with_capacity(handles.len());
    for h in handles {
        let r = h
            .join()
            .map_err(|_| BenchError::Component {
                component: "producer".into(),
                message: "panicked".into(),
            })??;
        reports.push(r);
    }
    Ok(reports)
}
