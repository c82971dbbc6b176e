use std::io::{BufReader, BufWriter, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use bytes::Bytes;
use crossbeam_channel::Receiver;
use parking_lot::Mutex;

use super::envelope::{decode_header, RpcEnvelope, HEADER_LEN};
use super::transport::{next_conn_id, Connection, Inbound, InboundSender, ReplyTx};
use super::TransportError;

fn io_err(e: std::io::Error) -> TransportError {
    match e.kind() {
        std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut => TransportError::Timeout,
        std::io::ErrorKind::UnexpectedEof
        | std::io::ErrorKind::ConnectionReset
        | std::io::ErrorKind::ConnectionAborted
        | std::io::ErrorKind::BrokenPipe => TransportError::Closed,
        _ => TransportError::Io(e.to_string()),
    }
}

pub(crate) fn read_frame(r: &mut impl Read) -> Result<RpcEnvelope, TransportError> {
    let mut header = [0u8; HEADER_LEN];
    r.read_exact(&mut header).map_err(io_err)?;
    let (msg_type, correlation_id, len) = decode_header(&header)?;
    let mut body = vec![0u8; len - HEADER_LEN];
    r.read_exact(&mut body).map_err(io_err)?;
    Ok(RpcEnvelope {
        msg_type,
        correlation_id,
        body: Bytes::from(body),
    })
}

pub(crate) fn write_frame(w: &mut impl Write, env: &RpcEnvelope) -> Result<(), TransportError> {
    let mut header = [0u8; HEADER_LEN];
    header[..4].copy_from_slice(&(env.frame_len() as u32).to_le_bytes());
    header[4] = env.msg_type as u8;
    header[5..].copy_from_slice(&env.correlation_id.to_le_bytes());
    w.write_all(&header).map_err(io_err)?;
    w.write_all(&env.body).map_err(io_err)?;
    w.flush().map_err(io_err)
}

pub struct TcpConnection {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    pending: usize,
}

impl TcpConnection {
    pub fn connect(addr: &str) -> Result<Self, TransportError> {
        let addrs: Vec<SocketAddr> = addr
            .to_socket_addrs()
            .map_err(|e| TransportError::Unreachable(format!("{addr}: {e}")))?
            .collect();
        let stream = addrs
            .iter()
            .find_map(|a| TcpStream::connect_timeout(a, Duration::from_secs(5)).ok())
            .ok_or_else(|| TransportError::Unreachable(addr.to_string()))?;
        stream.set_nodelay(true).map_err(io_err)?;
        Ok(Self {
            reader: BufReader::with_capacity(256 << 10, stream.try_clone().map_err(io_err)?),
            writer: BufWriter::with_capacity(256 << 10, stream),
            pending: 0,
        })
    }
}

impl Connection for TcpConnection {
    fn send(&mut self, env: RpcEnvelope) -> Result<(), TransportError> {
        write_frame(&mut self.writer, &env)?;
        self.pending += 1;
        Ok(())
    }

    fn recv(&mut self) -> Result<RpcEnvelope, TransportError> {
        if self.pending == 0 {
            return Err(TransportError::NothingPending);
        }
        let env = read_frame(&mut self.reader)?;
        self.pending -= 1;
        Ok(env)
    }

    fn set_timeout(&mut self, timeout: Option<Duration>) {
        let _ = self.reader.get_ref().set_read_timeout(timeout);
    }
}

/// Accept loop plus one reader and one writer thread per connection. Readers
/// forward decoded envelopes to the server loop; writers emit replies in
/// request order.
pub struct TcpAcceptor {
    local: SocketAddr,
    stop: Arc<AtomicBool>,
    streams: Arc<Mutex<Vec<TcpStream>>>,
    accept: Option<JoinHandle<()>>,
}

impl TcpAcceptor {
    pub fn bind(addr: &str, inbound: InboundSender) -> Result<Self, TransportError> {
        let listener = TcpListener::bind(addr).map_err(|e| TransportError::Io(format!("bind {addr}: {e}")))?;
        let local = listener.local_addr().map_err(io_err)?;
        let stop = Arc::new(AtomicBool::new(false));
        let streams = Arc::new(Mutex::new(Vec::new()));
        let accept = {
            let stop = Arc::clone(&stop);
            let streams = Arc::clone(&streams);
            std::thread::Builder::new()
                .name("tcp-accept".into())
                .spawn(move || {
                    for stream in listener.incoming() {
                        if stop.load(Ordering::Acquire) {
                            break;
                        }
                        let Ok(stream) = stream else { continue };
                        let _ = stream.set_nodelay(true);
                        if let Ok(clone) = stream.try_clone() {
                            streams.lock().push(clone);
                        }
                        serve_connection(stream, inbound.clone());
                    }
                })
                .map_err(|e| TransportError::Io(e.to_string()))?
        };
        Ok(Self {
            local,
            stop,
            streams,
            accept: Some(accept),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local
    }

    pub fn shutdown(&mut self) {
        if self.stop.swap(true, Ordering::AcqRel) {
            return;
        }
        // Wake the blocking accept.
        let _ = TcpStream::connect(self.local);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
        for s in self.streams.lock().drain(..) {
            let _ = s.shutdown(Shutdown::Both);
        }
    }
}

impl Drop for TcpAcceptor {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn serve_connection(stream: TcpStream, inbound: InboundSender) {
    let conn = next_conn_id();
    let Ok(write_half) = stream.try_clone() else {
        return;
    };
    let (order_tx, order_rx) = crossbeam_channel::unbounded::<Receiver<RpcEnvelope>>();
    let _ = std::thread::Builder::new()
        .name(format!("conn-{conn}-w"))
        .spawn(move || {
            let mut w = BufWriter::with_capacity(256 << 10, write_half);
            for rx in order_rx {
                let Ok(env) = rx.recv() else { break };
                if write_frame(&mut w, &env).is_err() {
                    break;
                }
            }
        });
    let _ = std::thread::Builder::new()
        .name(format!("conn-{conn}-r"))
        .spawn(move || {
            let mut r = BufReader::with_capacity(256 << 10, stream);
            loop {
                match read_frame(&mut r) {
                    Ok(env) => {
                        let (reply, rx) = ReplyTx::pair();
                        if order_tx.send(rx).is_err() {
                            break;
                        }
                        if inbound.send(Inbound::Request { conn, env, reply }).is_err() {
                            break;
                        }
                    }
                    Err(e) => {
                        if !matches!(e, TransportError::Closed) {
                            log::debug!("connection {conn}: {e}");
                        }
                        break;
                    }
                }
            }
            let _ = inbound.send(Inbound::Closed { conn });
        });
}
