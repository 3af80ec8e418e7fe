//! Cloud endpoint: per-client sessions, an in-process endpoint, and a
//! thread-per-connection TCP server with its client.

use std::collections::HashMap;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use log::{debug, info, warn};

use crate::cache::{decode_snapshot, encode_snapshot, DispatchState, EndpointCache};
use crate::error::{Error, Result};
use crate::motion::AccumMv;
use crate::pipeline::PipelineOptions;
use crate::refnet::NetworkSpec;
use crate::reuse::ThresholdVector;
use crate::rfap::RfapRegistry;
use crate::wire::{self, Message, OffloadPayload, ResultMessage};

/// Everything both sides must agree on.
#[derive(Clone)]
pub struct SessionConfig {
    pub net: Arc<NetworkSpec>,
    pub thresholds: ThresholdVector,
    pub rfap: String,
    pub opts: PipelineOptions,
}

impl SessionConfig {
    pub fn hash(&self) -> u64 {
        let extra = format!(
            "{}rfap={}\nremap={}\nsparse={}\n",
            self.thresholds.canonical(),
            self.rfap,
            self.opts.remap,
            self.opts.sparse
        );
        self.net.config_hash(&extra)
    }
}

/// Server-side state for one client.
pub struct CloudSession {
    config: SessionConfig,
    cache: EndpointCache,
    last_frame: Option<u64>,
}

impl CloudSession {
    pub fn new(config: SessionConfig) -> Result<Self> {
        RfapRegistry::default().get(&config.rfap)?;
        let cache = EndpointCache::new(&config.net)?;
        Ok(Self {
            config,
            cache,
            last_frame: None,
        })
    }

    pub fn handle(&mut self, payload: &OffloadPayload) -> Result<ResultMessage> {
        if let Some(last) = self.last_frame {
            if payload.frame_id <= last {
                self.cache.mark_cold();
                return Err(Error::ProtocolDesync(format!(
                    "frame id {} does not follow {last}",
                    payload.frame_id
                )));
            }
        }
        let net = &self.config.net;
        let (h, w, c) = net.input_dims();
        if (payload.height as usize, payload.width as usize) != (h, w) {
            return Err(Error::protocol("payload dims do not match the network"));
        }
        let (frame, mask) = payload.frame(c)?;
        if self.cache.is_cold() && !mask.is_full() {
            return Err(Error::ProtocolDesync(format!(
                "frame {} is sparse but the session has no cache",
                payload.frame_id
            )));
        }
        self.cache.dispatch.accum = AccumMv::from_block_field(&payload.mv);
        let registry = RfapRegistry::default();
        let rfap = registry.get(&self.config.rfap)?;
        let (out, stats) = crate::pipeline::sparse_forward(
            net,
            &mut self.cache,
            &frame,
            &mask,
            rfap,
            &self.config.thresholds,
            self.config.opts,
        )?;
        self.last_frame = Some(payload.frame_id);
        self.cache.last_update_frame = Some(payload.frame_id);
        Ok(ResultMessage {
            frame_id: payload.frame_id,
            output: out,
            compute_ratio: stats.compute_ratio,
            layer_counts: stats.layer_counts.iter().map(|&n| n as u32).collect(),
        })
    }

    pub fn dispatch_state(&self) -> &DispatchState {
        &self.cache.dispatch
    }

    pub fn cache(&self) -> &EndpointCache {
        &self.cache
    }
}

pub trait CloudEndpoint: Send {
    /// Sends one encoded offload payload and waits for the result.
    fn offload(&mut self, payload: &[u8]) -> Result<ResultMessage>;

    /// The server's current dispatch-layer state (consistency audits).
    fn snapshot(&mut self) -> Result<DispatchState>;
}

/// In-process cloud; payloads still go through the wire codec.
pub struct LocalCloud {
    session: CloudSession,
}

impl LocalCloud {
    pub fn new(config: SessionConfig) -> Result<Self> {
        Ok(Self {
            session: CloudSession::new(config)?,
        })
    }

    pub fn session(&self) -> &CloudSession {
        &self.session
    }
}

impl CloudEndpoint for LocalCloud {
    fn offload(&mut self, payload: &[u8]) -> Result<ResultMessage> {
        let p = wire::decode_offload(payload)?;
        self.session.handle(&p)
    }

    fn snapshot(&mut self) -> Result<DispatchState> {
        Ok(self.session.dispatch_state().clone())
    }
}

fn snapshot_message(state: &DispatchState) -> Message {
    Message::Snapshot {
        cold: state.cold,
        blob: encode_snapshot(&[&state.input], &state.accum),
    }
}

fn snapshot_from(cold: bool, blob: &[u8]) -> Result<DispatchState> {
    let (mut maps, accum) = decode_snapshot(blob)?;
    if maps.len() != 1 {
        return Err(Error::protocol("dispatch snapshot must hold one map"));
    }
    Ok(DispatchState {
        input: maps.remove(0),
        accum,
        cold,
    })
}

pub struct TcpCloud {
    stream: TcpStream,
}

impl TcpCloud {
    pub fn connect(addr: &str, client_id: u64, config_hash: u64) -> Result<Self> {
        let mut stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        wire::write_message(&mut stream, &wire::encode(&Message::Hello { client_id, config_hash }))?;
        let reply = wire::read_message(&mut stream)?.ok_or_else(|| Error::protocol("server closed during handshake"))?;
        match wire::decode(&reply)? {
            Message::HelloAck { accepted: true, .. } => Ok(Self { stream }),
            Message::HelloAck { reason, .. } => Err(Error::HandshakeRejected(reason)),
            other => Err(Error::protocol(format!("unexpected handshake reply {other:?}"))),
        }
    }

    fn round_trip(&mut self, bytes: &[u8]) -> Result<Message> {
        wire::write_message(&mut self.stream, bytes)?;
        let reply = wire::read_message(&mut self.stream)?.ok_or_else(|| Error::protocol("server closed connection"))?;
        match wire::decode(&reply)? {
            Message::Error { code, message } => Err(match code {
                wire::ERR_DESYNC => Error::ProtocolDesync(message),
                wire::ERR_PROTOCOL => Error::Protocol(message),
                _ => Error::Internal(message),
            }),
            m => Ok(m),
        }
    }
}

impl CloudEndpoint for TcpCloud {
    fn offload(&mut self, payload: &[u8]) -> Result<ResultMessage> {
        match self.round_trip(payload)? {
            Message::Result(r) => Ok(r),
            other => Err(Error::protocol(format!("expected result, got {other:?}"))),
        }
    }

    fn snapshot(&mut self) -> Result<DispatchState> {
        match self.round_trip(&wire::encode(&Message::SnapshotRequest))? {
            Message::Snapshot { cold, blob } => snapshot_from(cold, &blob),
            other => Err(Error::protocol(format!("expected snapshot, got {other:?}"))),
        }
    }
}

type Sessions = Arc<Mutex<HashMap<u64, Arc<Mutex<CloudSession>>>>>;

pub struct Server {
    listener: TcpListener,
    config: SessionConfig,
    sessions: Sessions,
}

impl Server {
    pub fn bind(addr: &str, config: SessionConfig) -> Result<Self> {
        RfapRegistry::default().get(&config.rfap)?;
        Ok(Self {
            listener: TcpListener::bind(addr)?,
            config,
            sessions: Arc::default(),
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    /// Accepts connections until `stop` is set (checked after each accept),
/// then closes every open connection.
    pub fn serve(self, stop: Arc<AtomicBool>) -> Result<()> {
        info!("serving on {}", self.local_addr()?);
        let mut live = Vec::new();
        for conn in self.listener.incoming() {
            if stop.load(Ordering::SeqCst) {
                break;
            }
            let stream = match conn {
                Ok(s) => s,
                Err(e) => {
                    warn!("accept failed: {e}");
                    continue;
                }
            };
            live.retain(|s: &TcpStream| s.peer_addr().is_ok());
            if let Ok(s) = stream.try_clone() {
                live.push(s);
            }
            let config = self.config.clone();
            let sessions = Arc::clone(&self.sessions);
            std::thread::spawn(move || {
                let peer = stream.peer_addr().ok();
                if let Err(e) = handle_connection(stream, config, sessions) {
                    debug!("connection {peer:?} ended: {e}");
                }
            });
        }
        for s in live {
            let _ = s.shutdown(std::net::Shutdown::Both);
        }
        Ok(())
    }

    /// Runs the accept loop on a background thread.
    pub fn spawn(self) -> Result<ServerHandle> {
        let addr = self.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = Arc::clone(&stop);
        let thread = std::thread::spawn(move || {
            if let Err(e) = self.serve(flag) {
                warn!("server stopped: {e}");
            }
        });
        Ok(ServerHandle {
            addr,
            stop,
            thread: Some(thread),
        })
    }
}

pub struct ServerHandle {
    pub addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr_string(&self) -> String {
        self.addr.to_string()
    }

    pub fn shutdown(mut self) {
        self.stop_inner();
    }

    fn stop_inner(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if self.thread.is_some() {
            self.stop_inner();
        }
    }
}

fn error_message(e: &Error) -> Message {
    let code = match e {
        Error::ProtocolDesync(_) => wire::ERR_DESYNC,
        Error::Protocol(_) | Error::UnsupportedVersion { .. } => wire::ERR_PROTOCOL,
        _ => wire::ERR_INTERNAL,
    };
    Message::Error {
        code,
        message: e.to_string(),
    }
}

fn handle_connection(mut stream: TcpStream, config: SessionConfig, sessions: Sessions) -> Result<()> {
    stream.set_nodelay(true)?;
    let Some(first) = wire::read_message(&mut stream)? else {
        return Ok(());
    };
    let client_id = match wire::decode(&first)? {
        Message::Hello { client_id, config_hash } => {
            if config_hash != config.hash() {
                let ack = Message::HelloAck {
                    accepted: false,
                    reason: "network configuration hash mismatch".into(),
                };
                wire::write_message(&mut stream, &wire::encode(&ack))?;
                return Ok(());
            }
            client_id
        }
        _ => return Err(Error::protocol("expected hello")),
    };
    let session = {
        let mut map = sessions.lock().map_err(|_| Error::internal("session map poisoned"))?;
        match map.get(&client_id) {
            Some(s) => Arc::clone(s),
            None => {
                let s = Arc::new(Mutex::new(CloudSession::new(config.clone())?));
                map.insert(client_id, Arc::clone(&s));
                s
            }
        }
    };
    let ack = Message::HelloAck {
        accepted: true,
        reason: String::new(),
    };
    wire::write_message(&mut stream, &wire::encode(&ack))?;
    debug!("client {client_id} connected");

    while let Some(bytes) = wire::read_message(&mut stream)? {
        let reply = match wire::decode(&bytes) {
            Ok(Message::Offload(p)) => {
                let mut s = session.lock().map_err(|_| Error::internal("session poisoned"))?;
                match s.handle(&p) {
                    Ok(r) => Message::Result(r),
                    Err(e) => error_message(&e),
                }
            }
            Ok(Message::SnapshotRequest) => {
                let s = session.lock().map_err(|_| Error::internal("session poisoned"))?;
                snapshot_message(s.dispatch_state())
            }
            Ok(other) => error_message(&Error::protocol(format!("unexpected message {other:?}"))),
            Err(e) => error_message(&e),
        };
        wire::write_message(&mut stream, &wire::encode(&reply))?;
    }
    Ok(())
}
