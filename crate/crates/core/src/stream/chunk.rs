use bytes::{Buf, Bytes};

use super::record::{encode_record_into, RecordIter, RECORD_OVERHEAD};
use super::StreamError;

/// `[partition_id: u32][base_offset: u64][record_count: u32][byte_length: u32]`
pub const CHUNK_HEADER_LEN: usize = 20;

/// Base offset a producer sends when it lets the broker place the chunk at the
/// partition head.
pub const APPEND_AT_HEAD: u64 = u64::MAX;

/// A sealed batch of records destined for one partition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Chunk {
    partition_id: u32,
    base_offset: u64,
    record_count: u32,
    payload: Bytes,
}

impl Chunk {
    /// Builds a chunk without checking that `payload` holds `record_count`
    /// records; see [`Chunk::validate`].
    pub fn new(partition_id: u32, base_offset: u64, record_count: u32, payload: Bytes) -> Self {
        Self {
            partition_id,
            base_offset,
            record_count,
            payload,
        }
    }

    pub fn partition_id(&self) -> u32 {
        self.partition_id
    }

    pub fn base_offset(&self) -> u64 {
        self.base_offset
    }

    pub fn record_count(&self) -> u32 {
        self.record_count
    }

    /// Offset one past the last record.
    pub fn end_offset(&self) -> u64 {
        self.base_offset + u64::from(self.record_count)
    }

    pub fn byte_length(&self) -> usize {
        self.payload.len()
    }

    pub fn payload(&self) -> &Bytes {
        &self.payload
    }

    pub fn records(&self) -> RecordIter<'_> {
        RecordIter::new(&self.payload)
    }

    pub fn framed_len(&self) -> usize {
        CHUNK_HEADER_LEN + self.payload.len()
    }

    pub fn with_base_offset(mut self, base_offset: u64) -> Self {
        self.base_offset = base_offset;
        self
    }

    /// Walks the record framing and checks the count.
    pub fn validate(&self) -> Result<(), StreamError> {
        let mut rest: &[u8] = &self.payload;
        let mut count = 0u32;
        while !rest.is_empty() {
            if rest.len() < 4 {
                return Err(StreamError::CorruptChunk("truncated key length".into()));
            }
            let key_len = u32::from_le_bytes(rest[..4].try_into().unwrap()) as usize;
            let value_at = 4 + key_len;
            if rest.len() < value_at + 4 {
                return Err(StreamError::CorruptChunk("truncated value length".into()));
            }
            let value_len =
                u32::from_le_bytes(rest[value_at..value_at + 4].try_into().unwrap()) as usize;
            let end = value_at + 4 + value_len;
            if value_len == 0 || rest.len() < end {
                return Err(StreamError::CorruptChunk("bad value".into()));
            }
            rest = &rest[end..];
            count += 1;
        }
        if count != self.record_count {
            return Err(StreamError::CorruptChunk(format!(
                "header says {} records, payload holds {}",
                self.record_count, count
            )));
        }
        Ok(())
    }

    pub fn encode_into(&self, buf: &mut Vec<u8>) {
        buf.extend_from_slice(&self.partition_id.to_le_bytes());
        buf.extend_from_slice(&self.base_offset.to_le_bytes());
        buf.extend_from_slice(&self.record_count.to_le_bytes());
        buf.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        buf.extend_from_slice(&self.payload);
    }

    /// Decodes one framed chunk from the front of `buf`, advancing it. The
    /// payload shares `buf`'s allocation.
    pub fn decode(buf: &mut Bytes) -> Result<Self, StreamError> {
        if buf.len() < CHUNK_HEADER_LEN {
            return Err(StreamError::Truncated);
        }
        let mut header = &buf[..CHUNK_HEADER_LEN];
        let partition_id = header.get_u32_le();
        let base_offset = header.get_u64_le();
        let record_count = header.get_u32_le();
        let byte_length = header.get_u32_le() as usize;
        if buf.len() < CHUNK_HEADER_LEN + byte_length {
            return Err(StreamError::Truncated);
        }
        buf.advance(CHUNK_HEADER_LEN);
        let payload = buf.split_to(byte_length);
        Ok(Self {
            partition_id,
            base_offset,
            record_count,
            payload,
        })
    }
}

/// Accumulates records for one partition until the chunk is full.
#[derive(Debug)]
pub struct ChunkBuilder {
    partition_id: u32,
    capacity: usize,
    buf: Vec<u8>,
    count: u32,
}

impl ChunkBuilder {
    pub fn new(partition_id: u32, capacity: usize) -> Self {
        Self {
            partition_id,
            capacity,
            buf: Vec::with_capacity(capacity),
            count: 0,
        }
    }

    pub fn partition_id(&self) -> u32 {
        self.partition_id
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn record_count(&self) -> u32 {
        self.count
    }

    /// Whether a record of the given sizes still fits.
    pub fn fits(&self, key_len: usize, value_len: usize) -> bool {
        self.buf.len() + RECORD_OVERHEAD + key_len + value_len <= self.capacity
    }

    /// Appends a record, returning `Ok(false)` when it does not fit. A record
    /// that cannot fit even an empty chunk is an error.
    pub fn try_push(&mut self, key: &[u8], value: &[u8]) -> Result<bool, StreamError> {
        if !self.fits(key.len(), value.len()) {
            if self.is_empty() {
                return Err(StreamError::OversizedChunk {
                    len: RECORD_OVERHEAD + key.len() + value.len(),
                    limit: self.capacity,
                });
            }
            return Ok(false);
        }
        encode_record_into(&mut self.buf, key, value)?;
        self.count += 1;
        Ok(true)
    }

    /// Seals the open chunk and resets the builder.
    pub fn seal(&mut self, base_offset: u64) -> Chunk {
        let payload = std::mem::replace(&mut self.buf, Vec::with_capacity(self.capacity));
        let count = std::mem::take(&mut self.count);
        Chunk::new(self.partition_id, base_offset, count, Bytes::from(payload))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chunk_of(pid: u32, base: u64, n: u32) -> Chunk {
        let mut b = ChunkBuilder::new(pid, 1 << 20);
        for i in 0..n {
            assert!(b.try_push(b"", &i.to_le_bytes()).unwrap());
        }
        b.seal(base)
    }

    #[test]
    fn framed_round_trip() {
        let c = chunk_of(3, 42, 7);
        let mut buf = Vec::new();
        c.encode_into(&mut buf);
        assert_eq!(buf.len(), CHUNK_HEADER_LEN + c.byte_length());
        let mut bytes = Bytes::from(buf);
        let d = Chunk::decode(&mut bytes).unwrap();
        assert!(bytes.is_empty());
        assert_eq!(c, d);
        d.validate().unwrap();
    }

    #[test]
    fn header_layout_is_little_endian() {
        let c = Chunk::new(1, 2, 0, Bytes::new());
        let mut buf = Vec::new();
        c.encode_into(&mut buf);
        assert_eq!(
            buf,
            [1, 0, 0, 0, 2, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]
        );
    }

    #[test]
    fn builder_packs_nine_hundred_byte_records_per_kib() {
        let mut b = ChunkBuilder::new(0, 1024);
        let value = [7u8; 100];
        let mut n = 0;
        while b.try_push(b"", &value).unwrap() {
            n += 1;
        }
        assert_eq!(n, 1024 / 108);
        assert_eq!(b.len(), 9 * 108);
    }

    #[test]
    fn oversized_record_is_an_error() {
        let mut b = ChunkBuilder::new(0, 64);
        assert!(matches!(
            b.try_push(b"", &[0u8; 100]),
            Err(StreamError::OversizedChunk { len: 108, limit: 64 })
        ));
    }

    #[test]
    fn validate_detects_count_mismatch() {
        let c = chunk_of(0, 0, 3);
        let bad = Chunk::new(0, 0, 4, c.payload().clone());
        assert!(matches!(bad.validate(), Err(StreamError::CorruptChunk(_))));
        let truncated = Chunk::new(0, 0, 3, c.payload().slice(..c.byte_length() - 1));
        assert!(truncated.validate().is_err());
    }

    #[test]
    fn truncated_frame_leaves_input_untouched() {
        let c = chunk_of(0, 0, 2);
        let mut buf = Vec::new();
        c.encode_into(&mut buf);
        buf.pop();
        let mut bytes = Bytes::from(buf);
        let before = bytes.len();
        assert_eq!(Chunk::decode(&mut bytes), Err(StreamError::Truncated));
        assert_eq!(bytes.len(), before);
    }
}
