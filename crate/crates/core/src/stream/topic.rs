use super::partition::Partition;
use super::StreamError;

/// A named stream with `Ns` partitions.
#[derive(Clone, Debug)]
pub struct StreamTopic {
    name: String,
    partitions: Vec<Partition>,
    replication: u8,
}

impl StreamTopic {
    pub fn new(
        name: impl Into<String>,
        partition_count: u32,
        replication: u8,
        segment_bytes: usize,
    ) -> Result<Self, StreamError> {
        if partition_count == 0 {
            return Err(StreamError::InvalidTopic("at least one partition required".into()));
        }
        if !(1..=2).contains(&replication) {
            return Err(StreamError::InvalidTopic(format!(
                "replication must be 1 or 2, got {replication}"
            )));
        }
        Ok(Self {
            name: name.into(),
            partitions: (0..partition_count)
                .map(|id| Partition::new(id, segment_bytes))
                .collect(),
            replication,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn replication(&self) -> u8 {
        self.replication
    }

    pub fn partition_count(&self) -> u32 {
        self.partitions.len() as u32
    }

    pub fn partition(&self, id: u32) -> Option<&Partition> {
        self.partitions.get(id as usize)
    }

    pub fn partition_mut(&mut self, id: u32) -> Option<&mut Partition> {
        self.partitions.get_mut(id as usize)
    }

    pub fn partitions(&self) -> &[Partition] {
        &self.partitions
    }

    pub fn into_partitions(self) -> Vec<Partition> {
        self.partitions
    }
}
