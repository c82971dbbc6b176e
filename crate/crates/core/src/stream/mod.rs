//! Records, chunks, segments and partitions.
//!
//! A partition is an append-only sequence of producer chunks grouped into
//! fixed-capacity segments. Offsets count records, not bytes.

mod chunk;
mod partition;
mod record;
mod topic;

pub use chunk::{Chunk, ChunkBuilder, APPEND_AT_HEAD, CHUNK_HEADER_LEN};
pub use partition::{Partition, Segment, DEFAULT_SEGMENT_BYTES};
pub use record::{
    decode_record, encode_record, encode_record_into, Record, RecordIter, RecordRef,
    RECORD_OVERHEAD,
};
pub use topic::StreamTopic;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StreamError {
    #[error("invalid record: {0}")]
    InvalidRecord(&'static str),
    #[error("truncated input")]
    Truncated,
    #[error("stale producer on partition {partition}: head is {expected}, chunk starts at {got}")]
    StaleProducer { partition: u32, expected: u64, got: u64 },
    #[error("chunk of {len} bytes exceeds the {limit} byte limit")]
    OversizedChunk { len: usize, limit: usize },
    #[error("partition {partition}: stored chunk of {len} bytes exceeds read limit {limit}")]
    ChunkExceedsReadLimit { partition: u32, len: usize, limit: usize },
    #[error("partition {partition}: offset {offset} beyond head {head}")]
    OffsetOutOfRange { partition: u32, offset: u64, head: u64 },
    #[error("corrupt chunk: {0}")]
    CorruptChunk(String),
    #[error("invalid topic: {0}")]
    InvalidTopic(String),
}
