//! Message bodies. All integers are little-endian; strings and lists carry a
//! `u32` length prefix.

use std::collections::HashSet;

use bytes::{Buf, BufMut, Bytes};

use super::envelope::{MsgType, RpcEnvelope};
use super::WireError;
use crate::stream::Chunk;

/// A typed message body bound to its envelope type.
pub trait WireMessage: Sized {
    const TYPE: MsgType;

    fn encode_body(&self, buf: &mut Vec<u8>);
    fn decode_body(body: Bytes) -> Result<Self, WireError>;

    fn to_envelope(&self, correlation_id: u64) -> RpcEnvelope {
        let mut buf = Vec::new();
        self.encode_body(&mut buf);
        RpcEnvelope::new(Self::TYPE, correlation_id, buf)
    }

    fn from_envelope(env: &RpcEnvelope) -> Result<Self, WireError> {
        if env.msg_type != Self::TYPE {
            return Err(WireError::UnexpectedType {
                expected: Self::TYPE,
                got: env.msg_type,
            });
        }
        Self::decode_body(env.body.clone())
    }
}

pub(crate) struct Reader {
    buf: Bytes,
}

impl Reader {
    pub(crate) fn new(buf: Bytes) -> Self {
        Self { buf }
    }

    fn need(&self, n: usize) -> Result<(), WireError> {
        if self.buf.remaining() < n {
            Err(WireError::Malformed("body truncated"))
        } else {
            Ok(())
        }
    }

    pub(crate) fn u8(&mut self) -> Result<u8, WireError> {
        self.need(1)?;
        Ok(self.buf.get_u8())
    }

    pub(crate) fn u16(&mut self) -> Result<u16, WireError> {
        self.need(2)?;
        Ok(self.buf.get_u16_le())
    }

    pub(crate) fn u32(&mut self) -> Result<u32, WireError> {
        self.need(4)?;
        Ok(self.buf.get_u32_le())
    }

    pub(crate) fn u64(&mut self) -> Result<u64, WireError> {
        self.need(8)?;
        Ok(self.buf.get_u64_le())
    }

    pub(crate) fn string(&mut self) -> Result<String, WireError> {
        let len = self.u32()? as usize;
        self.need(len)?;
        let raw = self.buf.split_to(len);
        String::from_utf8(raw.to_vec()).map_err(|_| WireError::Malformed("invalid utf-8"))
    }

    /// Reads a list length, rejecting counts that cannot fit the remaining body.
    pub(crate) fn count(&mut self, min_item: usize) -> Result<usize, WireError> {
        let n = self.u32()? as usize;
        if n.saturating_mul(min_item) > self.buf.remaining() {
            return Err(WireError::Malformed("list count exceeds body"));
        }
        Ok(n)
    }

    pub(crate) fn chunk(&mut self) -> Result<Chunk, WireError> {
        Chunk::decode(&mut self.buf).map_err(|_| WireError::Malformed("chunk truncated"))
    }

    pub(crate) fn finish(self) -> Result<(), WireError> {
        if self.buf.has_remaining() {
            Err(WireError::Malformed("trailing bytes"))
        } else {
            Ok(())
        }
    }
}

pub(crate) fn put_string(buf: &mut Vec<u8>, s: &str) {
    buf.put_u32_le(s.len() as u32);
    buf.put_slice(s.as_bytes());
}

/// One chunk per partition; the total is the request size.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AppendRequest {
    pub stream: String,
    pub chunks: Vec<Chunk>,
}

impl AppendRequest {
    pub fn validate(&self) -> Result<(), WireError> {
        let mut seen = HashSet::new();
        if self.chunks.iter().all(|c| seen.insert(c.partition_id())) {
            Ok(())
        } else {
            Err(WireError::Malformed("duplicate partition in append"))
        }
    }

    pub fn request_bytes(&self) -> usize {
        self.chunks.iter().map(Chunk::byte_length).sum()
    }

    pub fn record_count(&self) -> u64 {
        self.chunks.iter().map(|c| u64::from(c.record_count())).sum()
    }
}

fn encode_chunks(buf: &mut Vec<u8>, stream: &str, chunks: &[Chunk]) {
    put_string(buf, stream);
    buf.put_u32_le(chunks.len() as u32);
    for c in chunks {
        c.encode_into(buf);
    }
}

fn decode_chunks(body: Bytes) -> Result<(String, Vec<Chunk>), WireError> {
    let mut r = Reader::new(body);
    let stream = r.string()?;
    let n = r.count(crate::stream::CHUNK_HEADER_LEN)?;
    let chunks = (0..n).map(|_| r.chunk()).collect::<Result<_, _>>()?;
    r.finish()?;
    Ok((stream, chunks))
}

impl WireMessage for AppendRequest {
    const TYPE: MsgType = MsgType::Append;

    fn encode_body(&self, buf: &mut Vec<u8>) {
        buf.reserve(8 + self.stream.len() + self.chunks.iter().map(Chunk::framed_len).sum::<usize>());
        encode_chunks(buf, &self.stream, &self.chunks);
    }

    fn decode_body(body: Bytes) -> Result<Self, WireError> {
        let (stream, chunks) = decode_chunks(body)?;
        Ok(Self { stream, chunks })
    }
}

/// Broker-to-backup copy of an already placed append.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReplicateRequest {
    pub stream: String,
    pub chunks: Vec<Chunk>,
}

impl WireMessage for ReplicateRequest {
    const TYPE: MsgType = MsgType::Replicate;

    fn encode_body(&self, buf: &mut Vec<u8>) {
        encode_chunks(buf, &self.stream, &self.chunks);
    }

    fn decode_body(body: Bytes) -> Result<Self, WireError> {
        let (stream, chunks) = decode_chunks(body)?;
        Ok(Self { stream, chunks })
    }
}

/// New head offset per partition.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AppendAck {
    pub heads: Vec<(u32, u64)>,
}

fn encode_heads(buf: &mut Vec<u8>, heads: &[(u32, u64)]) {
    buf.put_u32_le(heads.len() as u32);
    for &(p, h) in heads {
        buf.put_u32_le(p);
        buf.put_u64_le(h);
    }
}

fn decode_heads(r: &mut Reader) -> Result<Vec<(u32, u64)>, WireError> {
    let n = r.count(12)?;
    (0..n).map(|_| Ok((r.u32()?, r.u64()?))).collect()
}

impl WireMessage for AppendAck {
    const TYPE: MsgType = MsgType::AppendAck;

    fn encode_body(&self, buf: &mut Vec<u8>) {
        encode_heads(buf, &self.heads);
    }

    fn decode_body(body: Bytes) -> Result<Self, WireError> {
        let mut r = Reader::new(body);
        let heads = decode_heads(&mut r)?;
        r.finish()?;
        Ok(Self { heads })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ReplicateAck {
    pub heads: Vec<(u32, u64)>,
}

impl WireMessage for ReplicateAck {
    const TYPE: MsgType = MsgType::ReplicateAck;

    fn encode_body(&self, buf: &mut Vec<u8>) {
        encode_heads(buf, &self.heads);
    }

    fn decode_body(body: Bytes) -> Result<Self, WireError> {
        let mut r = Reader::new(body);
        let heads = decode_heads(&mut r)?;
        r.finish()?;
        Ok(Self { heads })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PullWant {
    pub partition: u32,
    pub offset: u64,
    pub max_bytes: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PullRequest {
    pub stream: String,
    pub wants: Vec<PullWant>,
}

impl PullRequest {
    pub fn validate(&self) -> Result<(), WireError> {
        let mut seen = HashSet::new();
        for w in &self.wants {
            if w.max_bytes == 0 {
                return Err(WireError::Malformed("max_bytes must be positive"));
            }
            if !seen.insert(w.partition) {
                return Err(WireError::Malformed("duplicate partition in pull"));
            }
        }
        Ok(())
    }
}

impl WireMessage for PullRequest {
    const TYPE: MsgType = MsgType::Pull;

    fn encode_body(&self, buf: &mut Vec<u8>) {
        put_string(buf, &self.stream);
        buf.put_u32_le(self.wants.len() as u32);
        for w in &self.wants {
            buf.put_u32_le(w.partition);
            buf.put_u64_le(w.offset);
            buf.put_u32_le(w.max_bytes);
        }
    }

    fn decode_body(body: Bytes) -> Result<Self, WireError> {
        let mut r = Reader::new(body);
        let stream = r.string()?;
        let n = r.count(16)?;
        let wants = (0..n)
            .map(|_| {
                Ok(PullWant {
                    partition: r.u32()?,
                    offset: r.u64()?,
                    max_bytes: r.u32()?,
                })
            })
            .collect::<Result<_, WireError>>()?;
        r.finish()?;
        Ok(Self { stream, wants })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PullPart {
    pub partition: u32,
    pub next_offset: u64,
    pub chunks: Vec<Chunk>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PullReply {
    pub parts: Vec<PullPart>,
}

impl PullReply {
    pub fn is_empty(&self) -> bool {
        self.parts.iter().all(|p| p.chunks.is_empty())
    }
}

impl WireMessage for PullReply {
    const TYPE: MsgType = MsgType::PullReply;

    fn encode_body(&self, buf: &mut Vec<u8>) {
        let payload: usize = self
            .parts
            .iter()
            .flat_map(|p| p.chunks.iter().map(Chunk::framed_len))
            .sum();
        buf.reserve(4 + 16 * self.parts.len() + payload);
        buf.put_u32_le(self.parts.len() as u32);
        for p in &self.parts {
            buf.put_u32_le(p.partition);
            buf.put_u64_le(p.next_offset);
            buf.put_u32_le(p.chunks.len() as u32);
            for c in &p.chunks {
                c.encode_into(buf);
            }
        }
    }

    fn decode_body(body: Bytes) -> Result<Self, WireError> {
        let mut r = Reader::new(body);
        let n = r.count(16)?;
        let mut parts = Vec::with_capacity(n);
        for _ in 0..n {
            let partition = r.u32()?;
            let next_offset = r.u64()?;
            let m = r.count(crate::stream::CHUNK_HEADER_LEN)?;
            let chunks = (0..m).map(|_| r.chunk()).collect::<Result<_, _>>()?;
            parts.push(PullPart {
                partition,
                next_offset,
                chunks,
            });
        }
        r.finish()?;
        Ok(Self { parts })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Assignment {
    pub partition: u32,
    pub start_offset: u64,
    pub task_id: u32,
}

/// How filled objects reach the sources.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Delivery {
    /// Sources attach to the broker's shared object store in-process.
    Shared = 0,
    /// Sources live in another process; filled objects are copied back in
    /// replies to `CONSUMED_NOTIFY`.
    Remote = 1,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolSpec {
    pub objects_per_consumer: u32,
    pub object_size: u32,
    pub delivery: Delivery,
}

pub const DEFAULT_OBJECTS_PER_CONSUMER: u32 = 4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubscribeRequest {
    pub stream: String,
    pub group_id: String,
    pub assignments: Vec<Assignment>,
    pub pool: PoolSpec,
}

impl SubscribeRequest {
    pub fn validate(&self) -> Result<(), WireError> {
        if self.pool.objects_per_consumer < 2 {
            return Err(WireError::Malformed("objects_per_consumer must be >= 2"));
        }
        if self.pool.object_size == 0 {
            return Err(WireError::Malformed("object_size must be positive"));
        }
        let mut seen = HashSet::new();
        if !self.assignments.iter().all(|a| seen.insert(a.partition)) {
            return Err(WireError::Malformed("partition assigned twice"));
        }
        Ok(())
    }

    /// Distinct task ids in ascending order.
    pub fn task_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.assignments.iter().map(|a| a.task_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

impl WireMessage for SubscribeRequest {
    const TYPE: MsgType = MsgType::SubscribePush;

    fn encode_body(&self, buf: &mut Vec<u8>) {
        put_string(buf, &self.stream);
        put_string(buf, &self.group_id);
        buf.put_u32_le(self.assignments.len() as u32);
        for a in &self.assignments {
            buf.put_u32_le(a.partition);
            buf.put_u64_le(a.start_offset);
            buf.put_u32_le(a.task_id);
        }
        buf.put_u32_le(self.pool.objects_per_consumer);
        buf.put_u32_le(self.pool.object_size);
        buf.put_u8(self.pool.delivery as u8);
    }

    fn decode_body(body: Bytes) -> Result<Self, WireError> {
        let mut r = Reader::new(body);
        let stream = r.string()?;
        let group_id = r.string()?;
        let n = r.count(16)?;
        let assignments = (0..n)
            .map(|_| {
                Ok(Assignment {
                    partition: r.u32()?,
                    start_offset: r.u64()?,
                    task_id: r.u32()?,
                })
            })
            .collect::<Result<_, WireError>>()?;
        let objects_per_consumer = r.u32()?;
        let object_size = r.u32()?;
        let delivery = match r.u8()? {
            0 => Delivery::Shared,
            1 => Delivery::Remote,
            _ => return Err(WireError::Malformed("unknown delivery mode")),
        };
        r.finish()?;
        Ok(Self {
            stream,
            group_id,
            assignments,
            pool: PoolSpec {
                objects_per_consumer,
                object_size,
                delivery,
            },
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SubscribeAck {
    pub subscription_id: u64,
}

impl WireMessage for SubscribeAck {
    const TYPE: MsgType = MsgType::SubscribeAck;

    fn encode_body(&self, buf: &mut Vec<u8>) {
        buf.put_u64_le(self.subscription_id);
    }

    fn decode_body(body: Bytes) -> Result<Self, WireError> {
        let mut r = Reader::new(body);
        let subscription_id = r.u64()?;
        r.finish()?;
        Ok(Self { subscription_id })
    }
}

/// A source releasing consumed objects. For remote delivery this doubles as
/// the request for the next filled objects.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConsumedNotify {
    pub stream: String,
    pub group_id: String,
    pub task_id: u32,
    pub object_ids: Vec<u32>,
}

impl WireMessage for ConsumedNotify {
    const TYPE: MsgType = MsgType::ConsumedNotify;

    fn encode_body(&self, buf: &mut Vec<u8>) {
        put_string(buf, &self.stream);
        put_string(buf, &self.group_id);
        buf.put_u32_le(self.task_id);
        buf.put_u32_le(self.object_ids.len() as u32);
        for id in &self.object_ids {
            buf.put_u32_le(*id);
        }
    }

    fn decode_body(body: Bytes) -> Result<Self, WireError> {
        let mut r = Reader::new(body);
        let stream = r.string()?;
        let group_id = r.string()?;
        let task_id = r.u32()?;
        let n = r.count(4)?;
        let object_ids = (0..n).map(|_| r.u32()).collect::<Result<_, _>>()?;
        r.finish()?;
        Ok(Self {
            stream,
            group_id,
            task_id,
            object_ids,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PushedObject {
    pub object_id: u32,
    pub chunk: Chunk,
}

/// Reply to [`ConsumedNotify`] under remote delivery: the objects filled for
/// the task since its last notify, in fill order. Sent as a
/// `CONSUMED_NOTIFY` envelope carrying the request's correlation id.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PushedObjects {
    pub objects: Vec<PushedObject>,
}

impl WireMessage for PushedObjects {
    const TYPE: MsgType = MsgType::ConsumedNotify;

    fn encode_body(&self, buf: &mut Vec<u8>) {
        buf.put_u32_le(self.objects.len() as u32);
        for o in &self.objects {
            buf.put_u32_le(o.object_id);
            o.chunk.encode_into(buf);
        }
    }

    fn decode_body(body: Bytes) -> Result<Self, WireError> {
        let mut r = Reader::new(body);
        let n = r.count(4 + crate::stream::CHUNK_HEADER_LEN)?;
        let objects = (0..n)
            .map(|_| {
                Ok(PushedObject {
                    object_id: r.u32()?,
                    chunk: r.chunk()?,
                })
            })
            .collect::<Result<_, WireError>>()?;
        r.finish()?;
        Ok(Self { objects })
    }
}

/// Numeric error codes carried by `ERROR` replies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u16)]
pub enum ErrorCode {
    Framing = 1,
    OffsetOutOfRange = 2,
    StaleProducer = 3,
    UnknownStream = 4,
    SubscriptionConflict = 5,
    OversizedChunk = 6,
    Protocol = 7,
    Unavailable = 8,
}

impl ErrorCode {
    pub fn from_u16(v: u16) -> Option<Self> {
        Some(match v {
            1 => ErrorCode::Framing,
            2 => ErrorCode::OffsetOutOfRange,
            3 => ErrorCode::StaleProducer,
            4 => ErrorCode::UnknownStream,
            5 => ErrorCode::SubscriptionConflict,
            6 => ErrorCode::OversizedChunk,
            7 => ErrorCode::Protocol,
            8 => ErrorCode::Unavailable,
            _ => return None,
        })
    }
}

/// `[code: u16][message][heads]`; `heads` lists current partition heads for
/// stale-producer errors so the producer can re-sync.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ErrorReply {
    pub code: ErrorCode,
    pub message: String,
    pub heads: Vec<(u32, u64)>,
}

impl ErrorReply {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
            heads: Vec::new(),
        }
    }
}

impl WireMessage for ErrorReply {
    const TYPE: MsgType = MsgType::Error;

    fn encode_body(&self, buf: &mut Vec<u8>) {
        buf.put_u16_le(self.code as u16);
        put_string(buf, &self.message);
        encode_heads(buf, &self.heads);
    }

    fn decode_body(body: Bytes) -> Result<Self, WireError> {
        let mut r = Reader::new(body);
        let raw = r.u16()?;
        let code = ErrorCode::from_u16(raw).ok_or(WireError::Malformed("unknown error code"))?;
        let message = r.string()?;
        let heads = decode_heads(&mut r)?;
        r.finish()?;
        Ok(Self {
            code,
            message,
            heads,
        })
    }
}
