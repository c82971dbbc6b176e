use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use crossbeam_channel::{Receiver, Sender};
use parking_lot::Mutex;

use super::envelope::{MsgType, RpcEnvelope};
use super::messages::{ErrorReply, WireMessage};
use super::{tcp, RpcError, TransportError};

pub type ConnId = u64;

/// Where a broker listens.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Endpoint {
    /// `host:port`
    Tcp(String),
    /// In-process endpoint, written `loop:NAME`.
    Loopback(String),
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Tcp(a) => f.write_str(a),
            Endpoint::Loopback(n) => write!(f, "loop:{n}"),
        }
    }
}

impl FromStr for Endpoint {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if let Some(name) = s.strip_prefix("loop:") {
            return Ok(Endpoint::Loopback(name.to_string()));
        }
        if s.rsplit_once(':').is_some_and(|(_, p)| p.parse::<u16>().is_ok()) {
            Ok(Endpoint::Tcp(s.to_string()))
        } else {
            Err(format!("expected HOST:PORT or loop:NAME, got {s:?}"))
        }
    }
}

/// One request/response connection. Replies arrive in request order.
pub trait Connection: Send {
    fn send(&mut self, env: RpcEnvelope) -> Result<(), TransportError>;
    fn recv(&mut self) -> Result<RpcEnvelope, TransportError>;
    fn set_timeout(&mut self, timeout: Option<Duration>);

    /// Sends one request and waits for its reply.
    fn call(&mut self, env: RpcEnvelope) -> Result<RpcEnvelope, TransportError> {
        let sent = env.correlation_id;
        self.send(env)?;
        let reply = self.recv()?;
        if reply.correlation_id != sent {
            return Err(TransportError::CorrelationMismatch {
                sent,
                got: reply.correlation_id,
            });
        }
        Ok(reply)
    }
}

/// Single-use reply slot handed to the server with each request.
#[derive(Debug)]
pub struct ReplyTx(Sender<RpcEnvelope>);

impl ReplyTx {
    pub fn pair() -> (ReplyTx, Receiver<RpcEnvelope>) {
        let (tx, rx) = crossbeam_channel::bounded(1);
        (ReplyTx(tx), rx)
    }

    /// Delivers the reply; a vanished client is not an error.
    pub fn send(self, env: RpcEnvelope) {
        let _ = self.0.send(env);
    }
}

/// Events a listening endpoint feeds to its server loop.
#[derive(Debug)]
pub enum Inbound {
    Request {
        conn: ConnId,
        env: RpcEnvelope,
        reply: ReplyTx,
    },
    Closed {
        conn: ConnId,
    },
}

pub type InboundSender = Sender<Inbound>;

static NEXT_CONN: AtomicU64 = AtomicU64::new(1);

pub(crate) fn next_conn_id() -> ConnId {
    NEXT_CONN.fetch_add(1, Ordering::Relaxed)
}

/// Connects to and listens on both TCP and loopback endpoints. Clones share
/// the same loopback namespace.
#[derive(Clone, Default)]
pub struct Network {
    loopback: Arc<Mutex<HashMap<String, InboundSender>>>,
}

impl fmt::Debug for Network {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Network").finish_non_exhaustive()
    }
}

impl Network {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn connect(&self, endpoint: &Endpoint) -> Result<Box<dyn Connection>, TransportError> {
        match endpoint {
            Endpoint::Tcp(addr) => Ok(Box::new(tcp::TcpConnection::connect(addr)?)),
            Endpoint::Loopback(name) => {
                let server = self
                    .loopback
                    .lock()
                    .get(name)
                    .cloned()
                    .ok_or_else(|| TransportError::Unreachable(endpoint.to_string()))?;
                Ok(Box::new(LoopbackConnection::new(server)))
            }
        }
    }

    pub fn client(&self, endpoint: &Endpoint) -> Result<RpcClient, TransportError> {
        Ok(RpcClient::new(self.connect(endpoint)?))
    }

    /// Starts accepting connections; every request is delivered to `inbound`.
    pub fn listen(
        &self,
        endpoint: &Endpoint,
        inbound: InboundSender,
    ) -> Result<Listener, TransportError> {
        match endpoint {
            Endpoint::Tcp(addr) => {
                let l = tcp::TcpAcceptor::bind(addr, inbound)?;
                Ok(Listener {
                    endpoint: Endpoint::Tcp(l.local_addr().to_string()),
                    kind: ListenerKind::Tcp(l),
                })
            }
            Endpoint::Loopback(name) => {
                let mut map = self.loopback.lock();
                if map.contains_key(name) {
                    return Err(TransportError::Io(format!("{endpoint} already bound")));
                }
                map.insert(name.clone(), inbound);
                Ok(Listener {
                    endpoint: endpoint.clone(),
                    kind: ListenerKind::Loopback {
                        registry: Arc::clone(&self.loopback),
                        name: name.clone(),
                    },
                })
            }
        }
    }
}

enum ListenerKind {
    Tcp(tcp::TcpAcceptor),
    Loopback {
        registry: Arc<Mutex<HashMap<String, InboundSender>>>,
        name: String,
    },
}

/// A bound endpoint; dropping it stops accepting and closes server-side
/// connections.
pub struct Listener {
    endpoint: Endpoint,
    kind: ListenerKind,
}

impl Listener {
    /// The bound endpoint, with the real port when `:0` was requested.
    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }
}

impl Drop for Listener {
    fn drop(&mut self) {
        match &mut self.kind {
            ListenerKind::Tcp(acceptor) => acceptor.shutdown(),
            ListenerKind::Loopback { registry, name } => {
                registry.lock().remove(name);
            }
        }
    }
}

/// In-process connection: envelopes are handed to the server loop directly.
pub struct LoopbackConnection {
    id: ConnId,
    server: InboundSender,
    pending: std::collections::VecDeque<Receiver<RpcEnvelope>>,
    timeout: Option<Duration>,
}

impl LoopbackConnection {
    pub fn new(server: InboundSender) -> Self {
        Self {
            id: next_conn_id(),
            server,
            pending: Default::default(),
            timeout: None,
        }
    }
}

impl Connection for LoopbackConnection {
    fn send(&mut self, env: RpcEnvelope) -> Result<(), TransportError> {
        let (reply, rx) = ReplyTx::pair();
        self.server
            .send(Inbound::Request {
                conn: self.id,
                env,
                reply,
            })
            .map_err(|_| TransportError::Closed)?;
        self.pending.push_back(rx);
        Ok(())
    }

    fn recv(&mut self) -> Result<RpcEnvelope, TransportError> {
        let rx = self.pending.front().ok_or(TransportError::NothingPending)?;
        let res = match self.timeout {
            Some(t) => rx.recv_timeout(t).map_err(|e| match e {
                crossbeam_channel::RecvTimeoutError::Timeout => TransportError::Timeout,
                crossbeam_channel::RecvTimeoutError::Disconnected => TransportError::Closed,
            }),
            None => rx.recv().map_err(|_| TransportError::Closed),
        };
        if !matches!(res, Err(TransportError::Timeout)) {
            self.pending.pop_front();
        }
        res
    }

    fn set_timeout(&mut self, timeout: Option<Duration>) {
        self.timeout = timeout;
    }
}

impl Drop for LoopbackConnection {
    fn drop(&mut self) {
        let _ = self.server.send(Inbound::Closed { conn: self.id });
    }
}

/// Typed synchronous client over one connection.
pub struct RpcClient {
    conn: Box<dyn Connection>,
    next_id: u64,
}

impl RpcClient {
    pub fn new(conn: Box<dyn Connection>) -> Self {
        Self { conn, next_id: 1 }
    }

    pub fn set_timeout(&mut self, timeout: Option<Duration>) {
        self.conn.set_timeout(timeout);
    }

    pub fn call_raw<M: WireMessage>(&mut self, msg: &M) -> Result<RpcEnvelope, TransportError> {
        let id = self.next_id;
        self.next_id += 1;
        self.conn.call(msg.to_envelope(id))
    }

    /// Sends `msg` and decodes the reply as `R`; `ERROR` replies become
    /// [`RpcError::Remote`].
    pub fn request<M: WireMessage, R: WireMessage>(&mut self, msg: &M) -> Result<R, RpcError> {
        let reply = self.call_raw(msg)?;
        if reply.msg_type == MsgType::Error {
            return Err(RpcError::Remote(ErrorReply::from_envelope(&reply)?));
        }
        Ok(R::from_envelope(&reply)?)
    }

    pub fn connection(&mut self) -> &mut dyn Connection {
        self.conn.as_mut()
    }
}
