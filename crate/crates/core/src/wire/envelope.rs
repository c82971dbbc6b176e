use bytes::{Buf, BufMut, Bytes, BytesMut};

use super::WireError;

/// `[length: u32 LE][msg_type: u8][correlation_id: u64 LE]`; `length` counts
/// the header too.
pub const HEADER_LEN: usize = 13;

/// Frames above this size are rejected as corrupt.
pub const MAX_FRAME_LEN: usize = 256 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum MsgType {
    Append = 1,
    AppendAck = 2,
    Pull = 3,
    PullReply = 4,
    SubscribePush = 5,
    SubscribeAck = 6,
    ConsumedNotify = 7,
    Replicate = 8,
    ReplicateAck = 9,
    Error = 10,
}

impl MsgType {
    pub const ALL: [MsgType; 10] = [
        MsgType::Append,
        MsgType::AppendAck,
        MsgType::Pull,
        MsgType::PullReply,
        MsgType::SubscribePush,
        MsgType::SubscribeAck,
        MsgType::ConsumedNotify,
        MsgType::Replicate,
        MsgType::ReplicateAck,
        MsgType::Error,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MsgType::Append => "APPEND",
            MsgType::AppendAck => "APPEND_ACK",
            MsgType::Pull => "PULL",
            MsgType::PullReply => "PULL_REPLY",
            MsgType::SubscribePush => "SUBSCRIBE_PUSH",
            MsgType::SubscribeAck => "SUBSCRIBE_ACK",
            MsgType::ConsumedNotify => "CONSUMED_NOTIFY",
            MsgType::Replicate => "REPLICATE",
            MsgType::ReplicateAck => "REPLICATE_ACK",
            MsgType::Error => "ERROR",
        }
    }

    pub fn index(self) -> usize {
        self as usize - 1
    }
}

impl TryFrom<u8> for MsgType {
    type Error = WireError;

    fn try_from(v: u8) -> Result<Self, WireError> {
        MsgType::ALL
            .get(usize::from(v).wrapping_sub(1))
            .copied()
            .ok_or(WireError::UnknownMsgType(v))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RpcEnvelope {
    pub msg_type: MsgType,
    pub correlation_id: u64,
    pub body: Bytes,
}

impl RpcEnvelope {
    pub fn new(msg_type: MsgType, correlation_id: u64, body: impl Into<Bytes>) -> Self {
        Self {
            msg_type,
            correlation_id,
            body: body.into(),
        }
    }

    pub fn frame_len(&self) -> usize {
        HEADER_LEN + self.body.len()
    }

    pub fn encode_into(&self, buf: &mut impl BufMut) {
        buf.put_u32_le(self.frame_len() as u32);
        buf.put_u8(self.msg_type as u8);
        buf.put_u64_le(self.correlation_id);
        buf.put_slice(&self.body);
    }
}

pub fn encode_envelope(env: &RpcEnvelope) -> Vec<u8> {
    let mut buf = Vec::with_capacity(env.frame_len());
    env.encode_into(&mut buf);
    buf
}

/// Decodes one frame from the front of `buf`. Returns
/// [`WireError::Incomplete`] when more bytes are needed; nothing is consumed
/// in that case.
pub fn decode_envelope(buf: &[u8]) -> Result<(RpcEnvelope, usize), WireError> {
    let (msg_type, correlation_id, len) = decode_header(buf)?;
    if buf.len() < len {
        return Err(WireError::Incomplete {
            needed: len - buf.len(),
        });
    }
    let body = Bytes::copy_from_slice(&buf[HEADER_LEN..len]);
    Ok((
        RpcEnvelope {
            msg_type,
            correlation_id,
            body,
        },
        len,
    ))
}

/// Parses and validates a header, returning the full frame length.
pub fn decode_header(buf: &[u8]) -> Result<(MsgType, u64, usize), WireError> {
    if buf.len() < HEADER_LEN {
        return Err(WireError::Incomplete {
            needed: HEADER_LEN - buf.len(),
        });
    }
    let mut hdr = &buf[..HEADER_LEN];
    let len = hdr.get_u32_le() as usize;
    if !(HEADER_LEN..=MAX_FRAME_LEN).contains(&len) {
        return Err(WireError::BadLength(len));
    }
    let msg_type = MsgType::try_from(hdr.get_u8())?;
    let correlation_id = hdr.get_u64_le();
    Ok((msg_type, correlation_id, len))
}

/// Incremental decoder over a byte stream split at arbitrary points.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: BytesMut,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn extend(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    /// Pops the next complete frame, or `Ok(None)` if one is not buffered yet.
    pub fn next_frame(&mut self) -> Result<Option<RpcEnvelope>, WireError> {
        let (msg_type, correlation_id, len) = match decode_header(&self.buf) {
            Ok(h) => h,
            Err(WireError::Incomplete { .. }) => return Ok(None),
            Err(e) => return Err(e),
        };
        if self.buf.len() < len {
            self.buf.reserve(len - self.buf.len());
            return Ok(None);
        }
        let mut frame = self.buf.split_to(len);
        frame.advance(HEADER_LEN);
        Ok(Some(RpcEnvelope {
            msg_type,
            correlation_id,
            body: frame.freeze(),
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let env = RpcEnvelope::new(MsgType::Pull, 0x0102, vec![9u8, 9]);
        let bytes = encode_envelope(&env);
        assert_eq!(&bytes[..4], &15u32.to_le_bytes());
        assert_eq!(bytes[4], 3);
        assert_eq!(&bytes[5..13], &0x0102u64.to_le_bytes());
        assert_eq!(decode_envelope(&bytes).unwrap(), (env, 15));
    }

    #[test]
    fn unknown_type_and_bad_length() {
        let mut bytes = encode_envelope(&RpcEnvelope::new(MsgType::Pull, 1, Bytes::new()));
        bytes[4] = 0;
        assert_eq!(decode_envelope(&bytes), Err(WireError::UnknownMsgType(0)));
        bytes[4] = 11;
        assert_eq!(decode_envelope(&bytes), Err(WireError::UnknownMsgType(11)));
        bytes[4] = 3;
        bytes[..4].copy_from_slice(&5u32.to_le_bytes());
        assert_eq!(decode_envelope(&bytes), Err(WireError::BadLength(5)));
    }

    #[test]
    fn truncated_frames_need_more() {
        let bytes = encode_envelope(&RpcEnvelope::new(MsgType::Append, 7, vec![1u8; 32]));
        for cut in 0..bytes.len() {
            assert!(matches!(
                decode_envelope(&bytes[..cut]),
                Err(WireError::Incomplete { .. })
            ));
        }
        let mut dec = FrameDecoder::new();
        dec.extend(&bytes[..20]);
        assert_eq!(dec.next_frame().unwrap(), None);
        assert_eq!(dec.buffered(), 20);
    }

    fn arb_envelope() -> impl Strategy<Value = RpcEnvelope> {
        (
            prop::sample::select(MsgType::ALL.to_vec()),
            any::<u64>(),
            proptest::collection::vec(any::<u8>(), 0..300),
        )
            .prop_map(|(t, c, b)| RpcEnvelope::new(t, c, b))
    }

    proptest! {
        #[test]
        fn segmentation_independent(envs in proptest::collection::vec(arb_envelope(), 1..20),
                                    cuts in proptest::collection::vec(1usize..64, 1..50)) {
            let mut stream = Vec::new();
            for e in &envs {
                stream.extend(encode_envelope(e));
            }
            let mut dec = FrameDecoder::new();
            let mut out = Vec::new();
            let mut pos = 0;
            let mut cut = cuts.iter().cycle();
            while pos < stream.len() {
                let n = (*cut.next().unwrap()).min(stream.len() - pos);
                dec.extend(&stream[pos..pos + n]);
                pos += n;
                while let Some(f) = dec.next_frame().unwrap() {
                    out.push(f);
                }
            }
            prop_assert_eq!(out, envs);
        }
    }
}
