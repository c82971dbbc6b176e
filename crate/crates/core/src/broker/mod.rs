//! Stream broker: partitioned append-only storage behind the RPC protocol,
//! with pull reads and push delivery into shared object pools.

mod config;
mod dispatcher;
mod lane;
mod metrics;
mod push;
mod state;

pub use config::{BrokerConfig, StreamSpec};
pub use metrics::{BrokerMetrics, MetricsCsvWriter, SecondSeries};

use std::collections::HashMap;
use std::sync::Arc;
use std::thread::JoinHandle;

use crossbeam_channel::Sender;
use thiserror::Error;

use crate::shared_store::ObjectStore;
use crate::stream::{Chunk, StreamError};
use crate::wire::{Endpoint, ErrorCode, ErrorReply, Listener, Network, TransportError};
use state::TopicState;

#[derive(Debug, Error)]
pub enum BrokerError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("metrics output: {0}")]
    Io(#[from] std::io::Error),
}

/// Maps a storage error to the code sent back to clients.
pub(crate) fn error_reply(e: &StreamError) -> ErrorReply {
    let code = match e {
        StreamError::StaleProducer { .. } => ErrorCode::StaleProducer,
        StreamError::OversizedChunk { .. } | StreamError::ChunkExceedsReadLimit { .. } => {
            ErrorCode::OversizedChunk
        }
        StreamError::OffsetOutOfRange { .. } => ErrorCode::OffsetOutOfRange,
        StreamError::CorruptChunk(_) | StreamError::InvalidRecord(_) | StreamError::Truncated => {
            ErrorCode::Framing
        }
        StreamError::InvalidTopic(_) => ErrorCode::UnknownStream,
    };
    ErrorReply::new(code, e.to_string())
}

/// A running broker. Dropping it (or calling [`Broker::shutdown`]) stops
/// accepting, tears down subscriptions and joins every thread.
pub struct Broker {
    endpoint: Endpoint,
    topics: Arc<HashMap<String, Arc<TopicState>>>,
    metrics: Arc<BrokerMetrics>,
    store: ObjectStore,
    listener: Option<Listener>,
    stop: Option<Sender<()>>,
    dispatcher: Option<JoinHandle<()>>,
    csv: Option<MetricsCsvWriter>,
}

impl Broker {
    pub fn start(config: BrokerConfig, network: &Network) -> Result<Self, BrokerError> {
        Self::start_with_store(config, network, ObjectStore::new())
    }

    /// Starts with a caller-supplied store so co-located sources can attach
    /// to pools the broker creates.
    pub fn start_with_store(
        config: BrokerConfig,
        network: &Network,
        store: ObjectStore,
    ) -> Result<Self, BrokerError> {
        config.validate()?;
        let mut topics = HashMap::new();
        for s in &config.streams {
            if topics.contains_key(&s.name) {
                return Err(BrokerError::Config(format!("stream {} declared twice", s.name)));
            }
            let t = TopicState::new(&s.name, s.partitions, config.segment_bytes, config.max_chunk_bytes);
            topics.insert(s.name.clone(), Arc::new(t));
        }
        let topics = Arc::new(topics);
        let metrics = Arc::new(BrokerMetrics::new());
        metrics.set_active_workers(config.worker_count);
        let csv = match &config.metrics_csv {
            Some(path) => Some(MetricsCsvWriter::spawn(Arc::clone(&metrics), path)?),
            None => None,
        };

        let (inbound_tx, inbound_rx) = crossbeam_channel::unbounded();
        let listener = network.listen(&config.listen, inbound_tx)?;
        let endpoint = listener.endpoint().clone();
        let (stop_tx, stop_rx) = crossbeam_channel::bounded(1);
        let d = dispatcher::Dispatcher::new(
            &config,
            Arc::clone(&topics),
            Arc::clone(&metrics),
            network.clone(),
            store.clone(),
        );
        let handle = std::thread::Builder::new()
            .name("broker-dispatch".into())
            .spawn(move || d.run(inbound_rx, stop_rx))
            .expect("spawn dispatcher");
        log::info!("broker listening on {endpoint}");
        Ok(Self {
            endpoint,
            topics,
            metrics,
            store,
            listener: Some(listener),
            stop: Some(stop_tx),
            dispatcher: Some(handle),
            csv,
        })
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    pub fn metrics(&self) -> &Arc<BrokerMetrics> {
        &self.metrics
    }

    pub fn store(&self) -> &ObjectStore {
        &self.store
    }

    pub fn streams(&self) -> Vec<(String, u32)> {
        let mut v: Vec<_> = self
            .topics
            .values()
            .map(|t| (t.name.clone(), t.partition_count()))
            .collect();
        v.sort();
        v
    }

    /// Current head offset of every partition of `stream`.
    pub fn heads(&self, stream: &str) -> Option<Vec<u64>> {
        self.topics.get(stream).map(|t| t.heads())
    }

    /// Reads committed chunks directly, bypassing the RPC layer.
    pub fn read(
        &self,
        stream: &str,
        partition: u32,
        offset: u64,
        max_bytes: usize,
    ) -> Result<Vec<Chunk>, StreamError> {
        let t = self
            .topics
            .get(stream)
            .ok_or_else(|| StreamError::InvalidTopic(stream.to_string()))?;
        let p = t
            .partitions
            .get(partition as usize)
            .ok_or_else(|| StreamError::InvalidTopic(format!("{stream}/{partition}")))?;
        let chunks = p.read().read_from(offset, max_bytes)?;
        Ok(chunks.iter().map(|c| Chunk::clone(c)).collect())
    }

    /// Checks structural invariants of every partition.
    pub fn check_invariants(&self) -> Result<(), String> {
        for t in self.topics.values() {
            for p in &t.partitions {
                p.read().check_invariants()?;
            }
        }
        Ok(())
    }

    pub fn shutdown(mut self) {
        self.stop_all();
    }

    fn stop_all(&mut self) {
        self.listener.take();
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        if let Some(h) = self.dispatcher.take() {
            let _ = h.join();
        }
        self.csv.take();
    }
}

impl Drop for Broker {
    fn drop(&mut self) {
        self.stop_all();
    }
}
