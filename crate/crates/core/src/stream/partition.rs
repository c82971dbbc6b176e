use std::sync::Arc;

use super::chunk::Chunk;
use super::StreamError;

pub const DEFAULT_SEGMENT_BYTES: usize = 8 << 20;

/// Fixed-capacity block of consecutive chunks.
#[derive(Clone, Debug)]
pub struct Segment {
    capacity_bytes: usize,
    base_offset: u64,
    chunks: Vec<Arc<Chunk>>,
    used_bytes: usize,
}

impl Segment {
    fn new(capacity_bytes: usize, base_offset: u64) -> Self {
        Self {
            capacity_bytes,
            base_offset,
            chunks: Vec::new(),
            used_bytes: 0,
        }
    }

    pub fn capacity_bytes(&self) -> usize {
        self.capacity_bytes
    }

    pub fn used_bytes(&self) -> usize {
        self.used_bytes
    }

    pub fn remaining_bytes(&self) -> usize {
        self.capacity_bytes - self.used_bytes
    }

    pub fn base_offset(&self) -> u64 {
        self.base_offset
    }

    pub fn chunks(&self) -> &[Arc<Chunk>] {
        &self.chunks
    }

    fn end_offset(&self) -> u64 {
        self.chunks.last().map_or(self.base_offset, |c| c.end_offset())
    }
}

/// Append-only log of one stream partition. Offsets are record indices.
#[derive(Clone, Debug)]
pub struct Partition {
    id: u32,
    segment_bytes: usize,
    max_chunk_bytes: usize,
    segments: Vec<Segment>,
    head_offset: u64,
    appended_bytes: u64,
    largest_chunk: usize,
}

impl Partition {
    pub fn new(id: u32, segment_bytes: usize) -> Self {
        Self {
            id,
            segment_bytes,
            max_chunk_bytes: segment_bytes,
            segments: Vec::new(),
            head_offset: 0,
            appended_bytes: 0,
            largest_chunk: 0,
        }
    }

    /// Caps accepted chunk payloads below the segment size.
    pub fn with_max_chunk_bytes(mut self, max_chunk_bytes: usize) -> Self {
        self.max_chunk_bytes = max_chunk_bytes.min(self.segment_bytes);
        self
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn head_offset(&self) -> u64 {
        self.head_offset
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn appended_bytes(&self) -> u64 {
        self.appended_bytes
    }

    /// Payload size of the largest chunk stored so far.
    pub fn largest_chunk(&self) -> usize {
        self.largest_chunk
    }

    /// Checks that `chunk` may be appended next without mutating anything.
    pub fn check_append(&self, chunk: &Chunk) -> Result<(), StreamError> {
        if chunk.base_offset() != self.head_offset {
            return Err(StreamError::StaleProducer {
                partition: self.id,
                expected: self.head_offset,
                got: chunk.base_offset(),
            });
        }
        if chunk.record_count() == 0 {
            return Err(StreamError::CorruptChunk("empty chunk".into()));
        }
        if chunk.byte_length() > self.max_chunk_bytes {
            return Err(StreamError::OversizedChunk {
                len: chunk.byte_length(),
                limit: self.max_chunk_bytes,
            });
        }
        chunk.validate()
    }

    /// Appends a chunk whose base offset equals the current head and returns
    /// the new head.
    pub fn append_chunk(&mut self, chunk: Chunk) -> Result<u64, StreamError> {
        self.append_shared(Arc::new(chunk))
    }

    pub fn append_shared(&mut self, chunk: Arc<Chunk>) -> Result<u64, StreamError> {
        self.check_append(&chunk)?;
        Ok(self.append_checked(chunk))
    }

    /// Appends a chunk that already passed [`Partition::check_append`]
    /// against the current head.
    pub fn append_checked(&mut self, chunk: Arc<Chunk>) -> u64 {
        debug_assert_eq!(chunk.base_offset(), self.head_offset);
        let len = chunk.byte_length();
        let needs_segment = self
            .segments
            .last()
            .map_or(true, |s| s.remaining_bytes() < len);
        if needs_segment {
            self.segments
                .push(Segment::new(self.segment_bytes, self.head_offset));
        }
        let segment = self.segments.last_mut().expect("segment opened above");
        segment.used_bytes += len;
        self.head_offset = chunk.end_offset();
        self.appended_bytes += len as u64;
        self.largest_chunk = self.largest_chunk.max(len);
        segment.chunks.push(chunk);
        self.head_offset
    }

    /// Returns whole stored chunks starting with the one containing `offset`,
    /// as many as fit in `max_bytes`.
    pub fn read_from(&self, offset: u64, max_bytes: usize) -> Result<Vec<Arc<Chunk>>, StreamError> {
        let mut out = Vec::new();
        self.read_into(offset, max_bytes, usize::MAX, &mut out)?;
        Ok(out)
    }

    /// Like [`Partition::read_from`] but bounded to `max_chunks` and appending
    /// to `out`. Returns the number of bytes added.
    pub fn read_into(
        &self,
        offset: u64,
        max_bytes: usize,
        max_chunks: usize,
        out: &mut Vec<Arc<Chunk>>,
    ) -> Result<usize, StreamError> {
        if offset > self.head_offset {
            return Err(StreamError::OffsetOutOfRange {
                partition: self.id,
                offset,
                head: self.head_offset,
            });
        }
        if offset == self.head_offset || max_chunks == 0 {
            return Ok(0);
        }
        // Last segment whose base is <= offset.
        let seg_idx = self
            .segments
            .partition_point(|s| s.base_offset <= offset)
            .saturating_sub(1);
        let first_chunk = {
            let chunks = &self.segments[seg_idx].chunks;
            chunks.partition_point(|c| c.end_offset() <= offset)
        };
        let mut total = 0usize;
        let mut taken = 0usize;
        let iter = self.segments[seg_idx..]
            .iter()
            .enumerate()
            .flat_map(|(i, s)| {
                let skip = if i == 0 { first_chunk } else { 0 };
                s.chunks[skip..].iter()
            });
        for chunk in iter {
            let len = chunk.byte_length();
            if total + len > max_bytes {
                if taken == 0 {
                    return Err(StreamError::ChunkExceedsReadLimit {
                        partition: self.id,
                        len,
                        limit: max_bytes,
                    });
                }
                break;
            }
            total += len;
            taken += 1;
            out.push(Arc::clone(chunk));
            if taken == max_chunks {
                break;
            }
        }
        Ok(total)
    }

    /// Chunks in offset order.
    pub fn chunks(&self) -> impl Iterator<Item = &Arc<Chunk>> {
        self.segments.iter().flat_map(|s| s.chunks.iter())
    }

    /// Verifies segment accounting and offset contiguity.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut expected = 0u64;
        let mut total = 0u64;
        for seg in &self.segments {
            if seg.base_offset != expected {
                return Err(format!("segment base {} != {}", seg.base_offset, expected));
            }
            let used: usize = seg.chunks.iter().map(|c| c.byte_length()).sum();
            if used != seg.used_bytes || used > seg.capacity_bytes {
                return Err(format!("segment accounting {} vs {}", used, seg.used_bytes));
            }
            for c in &seg.chunks {
                if c.base_offset() != expected {
                    return Err(format!("gap at {}", expected));
                }
                expected = c.end_offset();
            }
            debug_assert_eq!(seg.end_offset(), expected);
            total += used as u64;
        }
        if expected != self.head_offset {
            return Err(format!("head {} != {}", self.head_offset, expected));
        }
        if total != self.appended_bytes {
            return Err(format!("appended {} != {}", self.appended_bytes, total));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::chunk::ChunkBuilder;
    use bytes::Bytes;
    use proptest::prelude::*;

    fn records_chunk(base: u64, n: u32) -> Chunk {
        let mut b = ChunkBuilder::new(0, 1 << 20);
        for i in 0..n {
            b.try_push(b"", &(base + u64::from(i)).to_le_bytes()).unwrap();
        }
        b.seal(base)
    }

    /// A chunk whose payload is exactly `bytes` long, holding one record.
    fn sized_chunk(base: u64, bytes: usize) -> Chunk {
        let mut b = ChunkBuilder::new(0, bytes);
        b.try_push(b"", &vec![1u8; bytes - 8]).unwrap();
        b.seal(base)
    }

    #[test]
    fn first_append() {
        let mut p = Partition::new(0, DEFAULT_SEGMENT_BYTES);
        assert_eq!(p.append_chunk(records_chunk(0, 10)), Ok(10));
    }

    #[test]
    fn contiguous_append() {
        let mut p = Partition::new(0, DEFAULT_SEGMENT_BYTES);
        p.append_chunk(records_chunk(0, 10)).unwrap();
        assert_eq!(p.append_chunk(records_chunk(10, 5)), Ok(15));
    }

    #[test]
    fn stale_and_oversized() {
        let mut p = Partition::new(2, 4096).with_max_chunk_bytes(1024);
        p.append_chunk(records_chunk(0, 3)).unwrap();
        assert_eq!(
            p.append_chunk(records_chunk(0, 1)),
            Err(StreamError::StaleProducer {
                partition: 2,
                expected: 3,
                got: 0
            })
        );
        assert!(matches!(
            p.append_chunk(sized_chunk(3, 2048)),
            Err(StreamError::OversizedChunk { len: 2048, limit: 1024 })
        ));
        assert_eq!(p.head_offset(), 3);
    }

    /// Oracle: count segments by replaying the open-new-segment rule on sizes.
    fn simulated_segment_count(sizes: &[usize], capacity: usize) -> usize {
        let mut segments = 0;
        let mut remaining = 0usize;
        for &s in sizes {
            if segments == 0 || remaining < s {
                segments += 1;
                remaining = capacity;
            }
            remaining -= s;
        }
        segments
    }

    #[test]
    fn full_size_chunks_fill_two_segments() {
        let sizes = vec![128 << 10; 100];
        let expected = simulated_segment_count(&sizes, DEFAULT_SEGMENT_BYTES);
        assert_eq!(expected, 2);
        let mut p = Partition::new(0, DEFAULT_SEGMENT_BYTES);
        for (i, &s) in sizes.iter().enumerate() {
            p.append_chunk(sized_chunk(i as u64, s)).unwrap();
        }
        assert_eq!(p.segments().len(), expected);
        assert_eq!(p.segments()[0].chunks().len(), 64);
        p.check_invariants().unwrap();
    }

    #[test]
    fn read_at_head_is_empty() {
        let mut p = Partition::new(0, DEFAULT_SEGMENT_BYTES);
        assert!(p.read_from(0, 1024).unwrap().is_empty());
        p.append_chunk(records_chunk(0, 4)).unwrap();
        assert!(p.read_from(4, 1024).unwrap().is_empty());
        assert!(matches!(
            p.read_from(5, 1024),
            Err(StreamError::OffsetOutOfRange { offset: 5, head: 4, .. })
        ));
    }

    #[test]
    fn single_small_chunk() {
        let mut p = Partition::new(0, DEFAULT_SEGMENT_BYTES);
        p.append_chunk(sized_chunk(0, 1024)).unwrap();
        let got = p.read_from(0, 128 << 10).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].byte_length(), 1024);
    }

    #[test]
    fn greedy_prefix_of_equal_chunks() {
        let mut p = Partition::new(0, DEFAULT_SEGMENT_BYTES);
        let sizes = vec![4096usize; 64];
        for (i, &s) in sizes.iter().enumerate() {
            p.append_chunk(sized_chunk(i as u64, s)).unwrap();
        }
        // Oracle: greedy prefix sum.
        let mut acc = 0;
        let expected = sizes
            .iter()
            .take_while(|&&s| {
                acc += s;
                acc <= 16 << 10
            })
            .count();
        assert_eq!(expected, 4);
        let got = p.read_from(0, 16 << 10).unwrap();
        assert_eq!(got.len(), expected);
        assert_eq!(got[3].base_offset(), 3);
    }

    #[test]
    fn interior_offset_returns_whole_chunk() {
        let mut p = Partition::new(0, DEFAULT_SEGMENT_BYTES);
        p.append_chunk(records_chunk(0, 5)).unwrap();
        p.append_chunk(records_chunk(5, 5)).unwrap();
        let got = p.read_from(7, 1 << 20).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].base_offset(), 5);
    }

    #[test]
    fn read_crosses_segments() {
        let mut p = Partition::new(0, 4096);
        for i in 0..6 {
            p.append_chunk(sized_chunk(i, 2048)).unwrap();
        }
        assert_eq!(p.segments().len(), 3);
        let got = p.read_from(1, 1 << 20).unwrap();
        let bases: Vec<_> = got.iter().map(|c| c.base_offset()).collect();
        assert_eq!(bases, vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn first_chunk_larger_than_limit() {
        let mut p = Partition::new(0, DEFAULT_SEGMENT_BYTES);
        p.append_chunk(sized_chunk(0, 2048)).unwrap();
        assert!(matches!(
            p.read_from(0, 1024),
            Err(StreamError::ChunkExceedsReadLimit { len: 2048, limit: 1024, .. })
        ));
    }

    #[test]
    fn corrupt_payload_rejected() {
        let mut p = Partition::new(0, DEFAULT_SEGMENT_BYTES);
        let c = Chunk::new(0, 0, 2, Bytes::from_static(&[1, 0, 0, 0]));
        assert!(matches!(p.append_chunk(c), Err(StreamError::CorruptChunk(_))));
    }

    proptest! {
        #[test]
        fn contiguity_and_accounting(counts in proptest::collection::vec(1u32..40, 1..60),
                                     seg in 256usize..4096,
                                     probe in any::<prop::sample::Index>()) {
            let mut p = Partition::new(0, seg);
            let mut base = 0u64;
            for n in counts {
                let mut b = ChunkBuilder::new(0, seg);
                let mut pushed = 0;
                while pushed < n && b.try_push(b"", &(base + u64::from(pushed)).to_le_bytes()).unwrap() {
                    pushed += 1;
                }
                base = p.append_chunk(b.seal(base)).unwrap();
            }
            p.check_invariants().unwrap();
            // Concatenated chunks hold offsets 0..head in order.
            let mut next = 0u64;
            for c in p.chunks() {
                for r in c.records() {
                    let v = u64::from_le_bytes(r.unwrap().value.try_into().unwrap());
                    prop_assert_eq!(v, next);
                    next += 1;
                }
            }
            prop_assert_eq!(next, p.head_offset());
            // read_from is deterministic and starts at the containing chunk.
            let off = probe.index(p.head_offset() as usize + 1) as u64;
            let a = p.read_from(off, 1 << 20).unwrap();
            let b = p.read_from(off, 1 << 20).unwrap();
            prop_assert_eq!(a.len(), b.len());
            if let Some(first) = a.first() {
                prop_assert!(first.base_offset() <= off && off < first.end_offset());
            } else {
                prop_assert_eq!(off, p.head_offset());
            }
        }
    }
}
