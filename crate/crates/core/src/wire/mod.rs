//! Framed binary request/response protocol and its transports.
//!
//! Every frame is `[length: u32 LE][msg_type: u8][correlation_id: u64 LE]`
//! followed by a message body. Two transports share the [`Connection`]
//! contract: TCP and an in-process loopback used for deterministic tests.

mod envelope;
mod messages;
mod tcp;
mod transport;

pub use envelope::{
    decode_envelope, decode_header, encode_envelope, FrameDecoder, MsgType, RpcEnvelope,
    HEADER_LEN, MAX_FRAME_LEN,
};
pub use messages::{
    AppendAck, AppendRequest, Assignment, ConsumedNotify, Delivery, ErrorCode, ErrorReply,
    PoolSpec, PullPart, PullReply, PullRequest, PullWant, PushedObject, PushedObjects,
    ReplicateAck, ReplicateRequest, SubscribeAck, SubscribeRequest, WireMessage,
    DEFAULT_OBJECTS_PER_CONSUMER,
};
pub use transport::{
    ConnId, Connection, Endpoint, Inbound, InboundSender, Listener, LoopbackConnection, Network,
    ReplyTx, RpcClient,
};

use thiserror::Error;

pub const DEFAULT_BROKER_PORT: u16 = 7070;
pub const DEFAULT_BACKUP_PORT: u16 = 7071;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("incomplete frame: {needed} more bytes needed")]
    Incomplete { needed: usize },
    #[error("bad frame length {0}")]
    BadLength(usize),
    #[error("unknown message type {0}")]
    UnknownMsgType(u8),
    #[error("expected {expected:?}, got {got:?}")]
    UnexpectedType { expected: MsgType, got: MsgType },
    #[error("malformed body: {0}")]
    Malformed(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("i/o: {0}")]
    Io(String),
    #[error("timed out")]
    Timeout,
    #[error("connection closed")]
    Closed,
    #[error("unreachable endpoint {0}")]
    Unreachable(String),
    #[error("reply correlation id {got} does not match request {sent}")]
    CorrelationMismatch { sent: u64, got: u64 },
    #[error("recv without outstanding request")]
    NothingPending,
    #[error(transparent)]
    Framing(#[from] WireError),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RpcError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("remote error {:?}: {}", .0.code, .0.message)]
    Remote(ErrorReply),
}

impl RpcError {
    pub fn code(&self) -> Option<ErrorCode> {
        match self {
            RpcError::Remote(e) => Some(e.code),
            _ => None,
        }
    }
}
