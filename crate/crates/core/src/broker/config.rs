use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::BrokerError;
use crate::stream::DEFAULT_SEGMENT_BYTES;
use crate::wire::Endpoint;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamSpec {
    pub name: String,
    pub partitions: u32,
}

impl std::str::FromStr for StreamSpec {
    type Err = String;

    /// `NAME:PARTITIONS`
    fn from_str(s: &str) -> Result<Self, String> {
        let (name, n) = s
            .rsplit_once(':')
            .ok_or_else(|| format!("expected NAME:PARTITIONS, got {s:?}"))?;
        let partitions = n.parse().map_err(|e| format!("{s:?}: {e}"))?;
        Ok(Self {
            name: name.to_string(),
            partitions,
        })
    }
}

#[derive(Clone, Debug)]
pub struct BrokerConfig {
    pub listen: Endpoint,
    /// Worker lanes (NBc).
    pub worker_count: usize,
    pub segment_bytes: usize,
    /// Largest accepted chunk payload; defaults to the segment size.
    pub max_chunk_bytes: usize,
    pub replication: u8,
    pub backup: Option<Endpoint>,
    pub streams: Vec<StreamSpec>,
    /// Push groups sharing one dedicated push worker.
    pub groups_per_push_worker: usize,
    pub metrics_csv: Option<PathBuf>,
}

impl BrokerConfig {
    pub fn new(listen: Endpoint) -> Self {
        Self {
            listen,
            worker_count: 1,
            segment_bytes: DEFAULT_SEGMENT_BYTES,
            max_chunk_bytes: DEFAULT_SEGMENT_BYTES,
            replication: 1,
            backup: None,
            streams: Vec::new(),
            groups_per_push_worker: 1,
            metrics_csv: None,
        }
    }

    pub fn with_stream(mut self, name: &str, partitions: u32) -> Self {
        self.streams.push(StreamSpec {
            name: name.to_string(),
            partitions,
        });
        self
    }

    pub fn with_workers(mut self, n: usize) -> Self {
        self.worker_count = n;
        self
    }

    pub fn with_backup(mut self, backup: Endpoint) -> Self {
        self.replication = 2;
        self.backup = Some(backup);
        self
    }

    pub fn validate(&self) -> Result<(), BrokerError> {
        if self.worker_count == 0 {
            return Err(BrokerError::Config("worker_count must be >= 1".into()));
        }
        if self.groups_per_push_worker == 0 {
            return Err(BrokerError::Config("groups_per_push_worker must be >= 1".into()));
        }
        if !(1..=2).contains(&self.replication) {
            return Err(BrokerError::Config("replication must be 1 or 2".into()));
        }
        if self.replication == 2 && self.backup.is_none() {
            return Err(BrokerError::Config("replication 2 requires a backup endpoint".into()));
        }
        if self.max_chunk_bytes > self.segment_bytes {
            return Err(BrokerError::Config("max_chunk_bytes exceeds segment_bytes".into()));
        }
        for s in &self.streams {
            if s.partitions == 0 {
                return Err(BrokerError::Config(format!("stream {} has no partitions", s.name)));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replication_two_needs_backup() {
        let mut c = BrokerConfig::new(Endpoint::Loopback("b".into()));
        c.replication = 2;
        assert!(c.validate().is_err());
        let c = c.with_backup(Endpoint::Loopback("backup".into()));
        assert!(c.validate().is_ok());
    }

    #[test]
    fn stream_spec_parses() {
        let s: StreamSpec = "events:8".parse().unwrap();
        assert_eq!(s.partitions, 8);
        assert!("events".parse::<StreamSpec>().is_err());
    }
}
