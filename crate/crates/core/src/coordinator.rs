// SPDX-License-Identifier: Apache-2.0

//! Checkpoint coordinator: client registry, phase barriers, restart barrier
//! and the namespaced key-value exchange used to remap ids.
//!
//! [`CoordinatorCore`] is the deterministic state machine. [`LocalSession`]
//! drives it in-process; [`CoordinatorServer`] and [`TcpSession`] put it
//! behind the length-prefixed wire protocol.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::rc::Rc;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use sha2::{Digest, Sha256};
use thiserror::Error;

pub const NS_QP_PD: &str = "qp_pd";
pub const NS_VRKEY_PD_RKEY: &str = "vrkey_pd_rkey";
pub const NS_LID: &str = "lid";
pub const NS_QP_REAL: &str = "qp_real";
pub const NAMESPACES: [&str; 4] = [NS_QP_PD, NS_VRKEY_PD_RKEY, NS_LID, NS_QP_REAL];

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum Phase {
    Running = 0,
    Quiesced = 1,
    Drained = 2,
    Written = 3,
    RestartWait = 4,
}

impl Phase {
    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            0 => Self::Running,
            1 => Self::Quiesced,
            2 => Self::Drained,
            3 => Self::Written,
            4 => Self::RestartWait,
            _ => return None,
        })
    }

    /// Position inside a checkpoint round.
    fn step(self) -> u8 {
        match self {
            Self::Running | Self::RestartWait => 0,
            Self::Quiesced => 1,
            Self::Drained => 2,
            Self::Written => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClientRecord {
    pub client_id: u32,
    pub node_id: u32,
    pub phase: Phase,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PhaseEvent {
    pub seq: u64,
    pub round: u32,
    pub client_id: u32,
    pub phase: Phase,
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum CoordError {
    #[error("node {0} is already registered")]
    DuplicateNode(u32),
    #[error("registration is closed")]
    RegistrationClosed,
    #[error("unknown client {0}")]
    UnknownClient(u32),
    #[error("unknown namespace {0:?}")]
    UnknownNamespace(String),
    #[error("conflicting publish in {ns} for key {key:02x?}")]
    PublishConflict { ns: String, key: Vec<u8> },
    #[error("barrier not reached: {arrived}/{expected} clients")]
    BarrierPending { arrived: usize, expected: usize },
    #[error("client {client_id} failed during {phase:?}: {reason}")]
    CheckpointAborted {
        client_id: u32,
        phase: Phase,
        reason: String,
    },
    #[error("restart aborted, missing nodes {missing:?}")]
    RestartAborted { missing: Vec<u32> },
    #[error("client {client_id} cannot enter {phase:?} yet")]
    PhaseOrder { client_id: u32, phase: Phase },
    #[error("timed out")]
    Timeout,
    #[error("malformed request: {0}")]
    BadRequest(String),
    #[error("transport: {0}")]
    Io(String),
}

impl From<io::Error> for CoordError {
    fn from(e: io::Error) -> Self {
        Self::Io(e.to_string())
    }
}

/// What to do once every image is written.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AfterCheckpoint {
    Resume,
    Halt,
}

/// The per-node actions of a checkpoint round. Drain is global because the
/// nodes share one simulated fabric.
pub trait CheckpointDriver {
    type Report;
    fn quiesce(&mut self, node_id: u32) -> Result<(), String>;
    fn drain(&mut self, nodes: &[u32]) -> Result<BTreeMap<u32, Self::Report>, String>;
    fn write(&mut self, node_id: u32) -> Result<String, String>;
    fn resume(&mut self, node_id: u32) -> Result<(), String>;
}

#[derive(Clone, Debug)]
pub struct CheckpointSummary<R> {
    pub round: u32,
    pub reports: BTreeMap<u32, R>,
    pub images: BTreeMap<u32, String>,
}

type Namespace = BTreeMap<Vec<u8>, (Vec<u8>, u32)>;

#[derive(Debug)]
pub struct CoordinatorCore {
    clients: BTreeMap<u32, ClientRecord>,
    next_client: u32,
    registration_open: bool,
    kv: BTreeMap<&'static str, Namespace>,
    epoch: u32,
    expected: Option<usize>,
    arrived: BTreeSet<u32>,
    round: u32,
    events: Vec<PhaseEvent>,
}

impl Default for CoordinatorCore {
    fn default() -> Self {
        Self::new()
    }
}

fn namespace(ns: &str) -> Result<&'static str, CoordError> {
    NAMESPACES
        .iter()
        .find(|n| **n == ns)
        .copied()
        .ok_or_else(|| CoordError::UnknownNamespace(ns.to_string()))
}

impl CoordinatorCore {
    pub fn new() -> Self {
        Self {
            clients: BTreeMap::new(),
            next_client: 1,
            registration_open: true,
            kv: NAMESPACES.iter().map(|n| (*n, Namespace::new())).collect(),
            epoch: 0,
            expected: None,
            arrived: BTreeSet::new(),
            round: 0,
            events: Vec::new(),
        }
    }

    /// Fixes the number of clients the barriers wait for. Without it, every
    /// registered client is expected.
    pub fn expect(&mut self, n: usize) {
        self.expected = Some(n);
    }

    pub fn register(&mut self, node_id: u32) -> Result<u32, CoordError> {
        if !self.registration_open {
            return Err(CoordError::RegistrationClosed);
        }
        if self.clients.values().any(|c| c.node_id == node_id) {
            return Err(CoordError::DuplicateNode(node_id));
        }
        let id = self.next_client;
        self.next_client += 1;
        self.clients.insert(
            id,
            ClientRecord {
                client_id: id,
                node_id,
                phase: Phase::Running,
            },
        );
        Ok(id)
    }

    pub fn clients(&self) -> impl Iterator<Item = &ClientRecord> {
        self.clients.values()
    }

    pub fn client_for_node(&self, node_id: u32) -> Option<u32> {
        self.clients
            .values()
            .find(|c| c.node_id == node_id)
            .map(|c| c.client_id)
    }

    pub fn phase(&self, client_id: u32) -> Option<Phase> {
        self.clients.get(&client_id).map(|c| c.phase)
    }

    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    pub fn events(&self) -> &[PhaseEvent] {
        &self.events
    }

    fn expected_count(&self) -> usize {
        self.expected.unwrap_or(self.clients.len())
    }

    /// Starts a checkpoint round. Registration closes for good.
    pub fn begin_checkpoint(&mut self) -> Result<u32, CoordError> {
        if let Some(c) = self.clients.values().find(|c| c.phase != Phase::Running) {
            return Err(CoordError::PhaseOrder {
                client_id: c.client_id,
                phase: Phase::Quiesced,
            });
        }
        self.registration_open = false;
        self.round += 1;
        Ok(self.round)
    }

    /// Records that a client reached `phase`. Phases are global barriers: a
    /// client may only move to step k once every client has reached k-1.
    pub fn ack_phase(&mut self, client_id: u32, phase: Phase) -> Result<(), CoordError> {
        let cur = self
            .clients
            .get(&client_id)
            .ok_or(CoordError::UnknownClient(client_id))?
            .phase;
        let order = || CoordError::PhaseOrder { client_id, phase };
        let next_ok = matches!(
            (cur, phase),
            (Phase::Running, Phase::Quiesced)
                | (Phase::Quiesced, Phase::Drained)
                | (Phase::Drained, Phase::Written)
                | (Phase::Written, Phase::Running)
                | (Phase::Written, Phase::RestartWait)
                | (Phase::Running, Phase::RestartWait)
                | (Phase::RestartWait, Phase::Running)
        );
        if !next_ok {
            return Err(order());
        }
        if matches!(phase, Phase::Drained | Phase::Written) {
            let need = phase.step() - 1;
            if self.clients.values().any(|c| c.phase.step() < need) {
                return Err(order());
            }
        }
        if phase == Phase::Running && cur == Phase::Written
            && self.clients.values().any(|c| c.phase.step() < 3 && c.phase != Phase::Running)
        {
            return Err(order());
        }
        self.clients.get_mut(&client_id).expect("checked").phase = phase;
        self.events.push(PhaseEvent {
            seq: self.events.len() as u64,
            round: self.round,
            client_id,
            phase,
        });
        Ok(())
    }

    /// Runs a full checkpoint round over every registered client.
    pub fn broadcast_checkpoint<D: CheckpointDriver>(
        &mut self,
        driver: &mut D,
        after: AfterCheckpoint,
    ) -> Result<CheckpointSummary<D::Report>, CoordError> {
        let round = self.begin_checkpoint()?;
        let clients: Vec<(u32, u32)> = self
            .clients
            .values()
            .map(|c| (c.client_id, c.node_id))
            .collect();
        let abort = |client_id, phase, reason| CoordError::CheckpointAborted {
            client_id,
            phase,
            reason,
        };
        for &(cid, node) in &clients {
            driver
                .quiesce(node)
                .map_err(|r| abort(cid, Phase::Quiesced, r))?;
            self.ack_phase(cid, Phase::Quiesced)?;
        }
        let nodes: Vec<u32> = clients.iter().map(|c| c.1).collect();
        let reports = driver
            .drain(&nodes)
            .map_err(|r| abort(clients[0].0, Phase::Drained, r))?;
        for &(cid, _) in &clients {
            self.ack_phase(cid, Phase::Drained)?;
        }
        let mut images = BTreeMap::new();
        for &(cid, node) in &clients {
            let path = driver.write(node).map_err(|r| abort(cid, Phase::Written, r))?;
            images.insert(node, path);
            self.ack_phase(cid, Phase::Written)?;
        }
        if after == AfterCheckpoint::Resume {
            for &(cid, node) in &clients {
                driver
                    .resume(node)
                    .map_err(|r| abort(cid, Phase::Running, r))?;
                self.ack_phase(cid, Phase::Running)?;
            }
        }
        Ok(CheckpointSummary {
            round,
            reports,
            images,
        })
    }

    /// Opens a fresh exchange epoch: the key-value store and barrier reset.
    pub fn open_epoch(&mut self) -> u32 {
        self.epoch += 1;
        for ns in self.kv.values_mut() {
            ns.clear();
        }
        self.arrived.clear();
        self.epoch
    }

    /// Moves every client into RESTART_WAIT and opens a new epoch.
    pub fn begin_restart(&mut self) -> Result<u32, CoordError> {
        let ids: Vec<u32> = self.clients.keys().copied().collect();
        for id in ids {
            if self.clients[&id].phase != Phase::RestartWait {
                self.ack_phase(id, Phase::RestartWait)?;
            }
        }
        Ok(self.open_epoch())
    }

    pub fn finish_restart(&mut self, client_id: u32) -> Result<(), CoordError> {
        self.ack_phase(client_id, Phase::Running)
    }

    pub fn publish(
        &mut self,
        client_id: u32,
        ns: &str,
        key: &[u8],
        value: &[u8],
    ) -> Result<(), CoordError> {
        if !self.clients.contains_key(&client_id) {
            return Err(CoordError::UnknownClient(client_id));
        }
        let ns = namespace(ns)?;
        let table = self.kv.get_mut(ns).expect("fixed namespaces");
        match table.get(key) {
            Some((v, _)) if v == value => Ok(()),
            Some(_) => Err(CoordError::PublishConflict {
                ns: ns.to_string(),
                key: key.to_vec(),
            }),
            None => {
                table.insert(key.to_vec(), (value.to_vec(), client_id));
                Ok(())
            }
        }
    }

    pub fn arrive(&mut self, client_id: u32) -> Result<(), CoordError> {
        if !self.clients.contains_key(&client_id) {
            return Err(CoordError::UnknownClient(client_id));
        }
        self.arrived.insert(client_id);
        Ok(())
    }

    pub fn barrier_reached(&self) -> bool {
        self.arrived.len() >= self.expected_count()
    }

    /// Fails with the nodes that never arrived unless the barrier is met.
    pub fn close_barrier(&self) -> Result<(), CoordError> {
        if self.barrier_reached() {
            return Ok(());
        }
        let mut missing: Vec<u32> = self
            .clients
            .values()
            .filter(|c| !self.arrived.contains(&c.client_id))
            .map(|c| c.node_id)
            .collect();
        // expected clients that never even registered
        let absent = self.expected_count().saturating_sub(self.clients.len());
        missing.extend((0..absent).map(|_| u32::MAX));
        Err(CoordError::RestartAborted { missing })
    }

    /// Snapshot of a namespace; only available once the barrier is reached.
    pub fn subscribe(&self, ns: &str) -> Result<Vec<(Vec<u8>, Vec<u8>)>, CoordError> {
        let ns = namespace(ns)?;
        if !self.barrier_reached() {
            return Err(CoordError::BarrierPending {
                arrived: self.arrived.len(),
                expected: self.expected_count(),
            });
        }
        Ok(self.kv[ns]
            .iter()
            .map(|(k, (v, _))| (k.clone(), v.clone()))
            .collect())
    }
}

/// Checks that every recorded round is barrier-ordered: within a round, no
/// client enters phase k before all participants have entered k-1.
pub fn audit_phase_log(events: &[PhaseEvent]) -> bool {
    let mut rounds: BTreeMap<u32, Vec<&PhaseEvent>> = BTreeMap::new();
    for e in events {
        rounds.entry(e.round).or_default().push(e);
    }
    for evs in rounds.values() {
        let clients: BTreeSet<u32> = evs.iter().map(|e| e.client_id).collect();
        let order = [Phase::Quiesced, Phase::Drained, Phase::Written];
        for w in order.windows(2) {
            let last_prev = evs.iter().filter(|e| e.phase == w[0]).map(|e| e.seq).max();
            let first_next = evs.iter().filter(|e| e.phase == w[1]).map(|e| e.seq).min();
            if let (Some(p), Some(n)) = (last_prev, first_next) {
                let reached = evs.iter().filter(|e| e.phase == w[0]).count();
                if n < p || reached != clients.len() {
                    return false;
                }
            }
        }
    }
    true
}

/// Client side of the id exchange.
pub trait CoordinatorSession {
    fn publish(&mut self, ns: &str, key: &[u8], value: &[u8]) -> Result<(), CoordError>;
    /// Announces arrival. Blocking sessions return once all clients arrived.
    fn barrier(&mut self) -> Result<(), CoordError>;
    fn subscribe(&mut self, ns: &str) -> Result<Vec<(Vec<u8>, Vec<u8>)>, CoordError>;
}

/// In-process session over a shared core. `barrier` only records arrival;
/// callers drive all clients phase by phase.
#[derive(Clone, Debug)]
pub struct LocalSession {
    pub core: Rc<RefCell<CoordinatorCore>>,
    pub client_id: u32,
}

impl CoordinatorSession for LocalSession {
    fn publish(&mut self, ns: &str, key: &[u8], value: &[u8]) -> Result<(), CoordError> {
        self.core.borrow_mut().publish(self.client_id, ns, key, value)
    }

    fn barrier(&mut self) -> Result<(), CoordError> {
        self.core.borrow_mut().arrive(self.client_id)
    }

    fn subscribe(&mut self, ns: &str) -> Result<Vec<(Vec<u8>, Vec<u8>)>, CoordError> {
        self.core.borrow().subscribe(ns)
    }
}

/// Digest of every namespace as one client sees it.
pub fn snapshot_hash(session: &mut dyn CoordinatorSession) -> Result<[u8; 32], CoordError> {
    let mut h = Sha256::new();
    for ns in NAMESPACES {
        h.update(ns.as_bytes());
        for (k, v) in session.subscribe(ns)? {
            h.update((k.len() as u32).to_le_bytes());
            h.update(&k);
            h.update((v.len() as u32).to_le_bytes());
            h.update(&v);
        }
    }
    Ok(h.finalize().into())
}

// ---- wire protocol ------------------------------------------------------

pub const MSG_REGISTER: u8 = 1;
pub const MSG_CKPT_PHASE_ACK: u8 = 2;
pub const MSG_PUBLISH: u8 = 3;
pub const MSG_SUBSCRIBE: u8 = 4;
pub const MSG_BARRIER: u8 = 5;
pub const MSG_CTRL_CKPT: u8 = 6;
pub const MSG_CTRL_RESTART: u8 = 7;

pub const STATUS_OK: u8 = 0;
pub const STATUS_PUBLISH_CONFLICT: u8 = 1;
pub const STATUS_UNKNOWN_NAMESPACE: u8 = 2;
pub const STATUS_TIMEOUT: u8 = 3;
pub const STATUS_DUPLICATE_NODE: u8 = 4;
pub const STATUS_REGISTRATION_CLOSED: u8 = 5;
pub const STATUS_BAD_REQUEST: u8 = 6;

/// Appends a u16-length-prefixed byte string.
fn put_bytes(out: &mut Vec<u8>, b: &[u8]) -> Result<(), CoordError> {
    let n = u16::try_from(b.len()).map_err(|_| CoordError::BadRequest("field over 64 KiB".into()))?;
    out.extend_from_slice(&n.to_be_bytes());
    out.extend_from_slice(b);
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CoordError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or_else(|| CoordError::BadRequest("truncated message".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CoordError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CoordError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn bytes(&mut self) -> Result<Vec<u8>, CoordError> {
        let n = u16::from_be_bytes(self.take(2)?.try_into().expect("2 bytes"));
        Ok(self.take(n as usize)?.to_vec())
    }

    fn string(&mut self) -> Result<String, CoordError> {
        String::from_utf8(self.bytes()?).map_err(|_| CoordError::BadRequest("non-utf8 string".into()))
    }
}

fn write_msg(stream: &mut TcpStream, body: &[u8]) -> io::Result<()> {
    let mut out = Vec::with_capacity(body.len() + 4);
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(body);
    stream.write_all(&out)
}

const MAX_MESSAGE: u32 = 16 << 20;

fn read_msg(stream: &mut TcpStream) -> io::Result<Vec<u8>> {
    let mut len = [0u8; 4];
    stream.read_exact(&mut len)?;
    let len = u32::from_be_bytes(len);
    if len > MAX_MESSAGE {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "message too large"));
    }
    let mut body = vec![0; len as usize];
    stream.read_exact(&mut body)?;
    Ok(body)
}

fn status_of(e: &CoordError) -> u8 {
    match e {
        CoordError::PublishConflict { .. } => STATUS_PUBLISH_CONFLICT,
        CoordError::UnknownNamespace(_) => STATUS_UNKNOWN_NAMESPACE,
        CoordError::Timeout => STATUS_TIMEOUT,
        CoordError::DuplicateNode(_) => STATUS_DUPLICATE_NODE,
        CoordError::RegistrationClosed => STATUS_REGISTRATION_CLOSED,
        _ => STATUS_BAD_REQUEST,
    }
}

fn error_of(status: u8, detail: String) -> CoordError {
    match status {
        STATUS_PUBLISH_CONFLICT => CoordError::PublishConflict {
            ns: detail,
            key: Vec::new(),
        },
        STATUS_UNKNOWN_NAMESPACE => CoordError::UnknownNamespace(detail),
        STATUS_TIMEOUT => CoordError::Timeout,
        STATUS_DUPLICATE_NODE => CoordError::DuplicateNode(detail.parse().unwrap_or(u32::MAX)),
        STATUS_REGISTRATION_CLOSED => CoordError::RegistrationClosed,
        _ => CoordError::BadRequest(detail),
    }
}

struct Shared {
    core: Mutex<CoordinatorCore>,
    changed: Condvar,
    timeout: Duration,
}

impl Shared {
    fn handle(&self, req: &[u8]) -> Result<Vec<u8>, CoordError> {
        let mut c = Cursor::new(req);
        let kind = c.u8()?;
        let mut out = vec![STATUS_OK];
        let mut core = self.core.lock().expect("coordinator lock");
        match kind {
            MSG_REGISTER => {
                let node = c.u32()?;
                let id = core.register(node)?;
                out.extend_from_slice(&id.to_be_bytes());
            }
            MSG_CKPT_PHASE_ACK => {
                let client = c.u32()?;
                let phase = Phase::from_u8(c.u8()?)
                    .ok_or_else(|| CoordError::BadRequest("unknown phase".into()))?;
                core.ack_phase(client, phase)?;
            }
            MSG_PUBLISH => {
                let client = c.u32()?;
                let ns = c.string()?;
                let key = c.bytes()?;
                let value = c.bytes()?;
                core.publish(client, &ns, &key, &value)?;
            }
            MSG_SUBSCRIBE => {
                let _client = c.u32()?;
                let ns = c.string()?;
                let entries = core.subscribe(&ns)?;
                out.extend_from_slice(&(entries.len() as u32).to_be_bytes());
                for (k, v) in entries {
                    put_bytes(&mut out, &k)?;
                    put_bytes(&mut out, &v)?;
                }
            }
            MSG_BARRIER => {
                let client = c.u32()?;
                core.arrive(client)?;
                self.changed.notify_all();
                let deadline = Instant::now() + self.timeout;
                while !core.barrier_reached() {
                    let left = deadline.saturating_duration_since(Instant::now());
                    if left.is_zero() {
                        return Err(CoordError::Timeout);
                    }
                    core = self.changed.wait_timeout(core, left).expect("coordinator lock").0;
                }
            }
            MSG_CTRL_CKPT => {
                let round = core.begin_checkpoint()?;
                out.extend_from_slice(&round.to_be_bytes());
            }
            MSG_CTRL_RESTART => {
                let epoch = core.begin_restart()?;
                out.extend_from_slice(&epoch.to_be_bytes());
            }
            other => return Err(CoordError::BadRequest(format!("message type {other}"))),
        }
        self.changed.notify_all();
        Ok(out)
    }
}

/// TCP front end for a [`CoordinatorCore`]. Each connection gets its own
/// thread; all of them share the core under one lock.
pub struct CoordinatorServer {
    addr: SocketAddr,
    shared: Arc<Shared>,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl CoordinatorServer {
    pub fn bind(
        listen: impl ToSocketAddrs,
        expect: Option<usize>,
        timeout: Duration,
    ) -> Result<Self, CoordError> {
        let listener = TcpListener::bind(listen)?;
        let addr = listener.local_addr()?;
        let mut core = CoordinatorCore::new();
        if let Some(n) = expect {
            core.expect(n);
        }
        let shared = Arc::new(Shared {
            core: Mutex::new(core),
            changed: Condvar::new(),
            timeout,
        });
        let stop = Arc::new(AtomicBool::new(false));
        let (s, st) = (shared.clone(), stop.clone());
        let accept = std::thread::spawn(move || {
            for conn in listener.incoming() {
                if st.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = conn else { continue };
                let s = s.clone();
                std::thread::spawn(move || serve_connection(stream, &s));
            }
        });
        Ok(Self {
            addr,
            shared,
            stop,
            accept: Some(accept),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Runs `f` against the live core.
    pub fn with_core<T>(&self, f: impl FnOnce(&mut CoordinatorCore) -> T) -> T {
        let mut core = self.shared.core.lock().expect("coordinator lock");
        let out = f(&mut core);
        self.shared.changed.notify_all();
        out
    }

    /// Blocks until the accept loop ends (never, unless shut down).
    pub fn wait(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop_accepting();
    }

    fn stop_accepting(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // unblock accept()
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for CoordinatorServer {
    fn drop(&mut self) {
        if self.accept.is_some() {
            self.stop_accepting();
        }
    }
}

fn serve_connection(mut stream: TcpStream, shared: &Shared) {
    while let Ok(req) = read_msg(&mut stream) {
        let resp = match shared.handle(&req) {
            Ok(r) => r,
            Err(e) => {
                let mut r = vec![status_of(&e)];
                let detail = match &e {
                    CoordError::PublishConflict { ns, .. } => ns.clone(),
                    CoordError::UnknownNamespace(ns) => ns.clone(),
                    CoordError::DuplicateNode(n) => n.to_string(),
                    other => other.to_string(),
                };
                let _ = put_bytes(&mut r, detail.as_bytes());
                r
            }
        };
        if write_msg(&mut stream, &resp).is_err() {
            break;
        }
    }
}

/// Blocking client for [`CoordinatorServer`].
pub struct TcpSession {
    stream: TcpStream,
    client_id: u32,
}

impl TcpSession {
    pub fn register(addr: impl ToSocketAddrs, node_id: u32) -> Result<Self, CoordError> {
        let mut stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let mut req = vec![MSG_REGISTER];
        req.extend_from_slice(&node_id.to_be_bytes());
        let resp = Self::call_on(&mut stream, &req)?;
        let client_id = Cursor::new(&resp).u32()?;
        Ok(Self { stream, client_id })
    }

    pub fn client_id(&self) -> u32 {
        self.client_id
    }

    fn call_on(stream: &mut TcpStream, req: &[u8]) -> Result<Vec<u8>, CoordError> {
        write_msg(stream, req)?;
        let resp = read_msg(stream)?;
        let mut c = Cursor::new(&resp);
        match c.u8()? {
            STATUS_OK => Ok(resp[1..].to_vec()),
            status => Err(error_of(status, c.string().unwrap_or_default())),
        }
    }

    fn call(&mut self, req: &[u8]) -> Result<Vec<u8>, CoordError> {
        Self::call_on(&mut self.stream, req)
    }

    fn header(&self, kind: u8) -> Vec<u8> {
        let mut req = vec![kind];
        req.extend_from_slice(&self.client_id.to_be_bytes());
        req
    }

    pub fn ack_phase(&mut self, phase: Phase) -> Result<(), CoordError> {
        let mut req = self.header(MSG_CKPT_PHASE_ACK);
        req.push(phase as u8);
        self.call(&req).map(drop)
    }

    pub fn request_checkpoint(&mut self) -> Result<u32, CoordError> {
        let resp = self.call(&[MSG_CTRL_CKPT])?;
        Cursor::new(&resp).u32()
    }

    pub fn request_restart(&mut self) -> Result<u32, CoordError> {
        let resp = self.call(&[MSG_CTRL_RESTART])?;
        Cursor::new(&resp).u32()
    }
}

impl CoordinatorSession for TcpSession {
    fn publish(&mut self, ns: &str, key: &[u8], value: &[u8]) -> Result<(), CoordError> {
        let mut req = self.header(MSG_PUBLISH);
        put_bytes(&mut req, ns.as_bytes())?;
        put_bytes(&mut req, key)?;
        put_bytes(&mut req, value)?;
        self.call(&req).map(drop)
    }

    fn barrier(&mut self) -> Result<(), CoordError> {
        let req = self.header(MSG_BARRIER);
        self.call(&req).map(drop)
    }

    fn subscribe(&mut self, ns: &str) -> Result<Vec<(Vec<u8>, Vec<u8>)>, CoordError> {
        let mut req = self.header(MSG_SUBSCRIBE);
        put_bytes(&mut req, ns.as_bytes())?;
        let resp = self.call(&req)?;
        let mut c = Cursor::new(&resp);
        let n = c.u32()?;
        (0..n).map(|_| Ok((c.bytes()?, c.bytes()?))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn register_ids_and_duplicates() {
        let mut c = CoordinatorCore::new();
        assert_eq!(c.register(0).unwrap(), 1);
        assert_eq!(c.register(0), Err(CoordError::DuplicateNode(0)));
        assert_eq!(c.register(1).unwrap(), 2);
        c.begin_checkpoint().unwrap();
        assert_eq!(c.register(5), Err(CoordError::RegistrationClosed));
    }

    #[test]
    fn publish_rules() {
        let mut c = CoordinatorCore::new();
        let a = c.register(0).unwrap();
        let b = c.register(1).unwrap();
        c.publish(a, NS_VRKEY_PD_RKEY, b"k1", b"v").unwrap();
        c.publish(a, NS_VRKEY_PD_RKEY, b"k1", b"v").unwrap();
        assert!(matches!(
            c.publish(b, NS_VRKEY_PD_RKEY, b"k1", b"w"),
            Err(CoordError::PublishConflict { .. })
        ));
        c.publish(b, NS_VRKEY_PD_RKEY, b"k2", b"v").unwrap();
        assert!(matches!(
            c.publish(a, "qp-pd", b"k", b"v"),
            Err(CoordError::UnknownNamespace(_))
        ));
        assert!(matches!(
            c.subscribe(NS_VRKEY_PD_RKEY),
            Err(CoordError::BarrierPending { arrived: 0, expected: 2 })
        ));
        c.arrive(a).unwrap();
        c.arrive(b).unwrap();
        let got = c.subscribe(NS_VRKEY_PD_RKEY).unwrap();
        assert_eq!(got, vec![(b"k1".to_vec(), b"v".to_vec()), (b"k2".to_vec(), b"v".to_vec())]);
        c.open_epoch();
        assert!(c.subscribe(NS_LID).is_err());
    }

    #[test]
    fn barrier_with_absent_node_aborts() {
        let mut c = CoordinatorCore::new();
        c.expect(3);
        let ids: Vec<u32> = (0..3).map(|n| c.register(n).unwrap()).collect();
        c.arrive(ids[0]).unwrap();
        c.arrive(ids[2]).unwrap();
        assert_eq!(
            c.close_barrier(),
            Err(CoordError::RestartAborted { missing: vec![1] })
        );
        let mut single = CoordinatorCore::new();
        let id = single.register(0).unwrap();
        single.arrive(id).unwrap();
        single.close_barrier().unwrap();
    }

    struct Driver {
        refuse: Option<u32>,
        log: Vec<(char, u32)>,
    }

    impl CheckpointDriver for Driver {
        type Report = usize;
        fn quiesce(&mut self, node: u32) -> Result<(), String> {
            if self.refuse == Some(node) {
                return Err("no ack".into());
            }
            self.log.push(('q', node));
            Ok(())
        }
        fn drain(&mut self, nodes: &[u32]) -> Result<BTreeMap<u32, usize>, String> {
            self.log.push(('d', nodes.len() as u32));
            Ok(nodes.iter().map(|n| (*n, 0)).collect())
        }
        fn write(&mut self, node: u32) -> Result<String, String> {
            self.log.push(('w', node));
            Ok(format!("node{node}.img"))
        }
        fn resume(&mut self, node: u32) -> Result<(), String> {
            self.log.push(('r', node));
            Ok(())
        }
    }

    #[test]
    fn broadcast_is_barrier_ordered() {
        let mut c = CoordinatorCore::new();
        for n in 0..4 {
            c.register(n).unwrap();
        }
        let mut d = Driver {
            refuse: None,
            log: Vec::new(),
        };
        let s = c.broadcast_checkpoint(&mut d, AfterCheckpoint::Resume).unwrap();
        assert_eq!(s.reports.len(), 4);
        assert!(s.reports.values().all(|r| *r == 0));
        assert_eq!(s.images[&2], "node2.img");
        assert!(audit_phase_log(c.events()));
        assert!(c.clients().all(|r| r.phase == Phase::Running));
        // a second round works too
        c.broadcast_checkpoint(&mut d, AfterCheckpoint::Resume).unwrap();
        assert!(audit_phase_log(c.events()));
    }

    #[test]
    fn silent_client_aborts_checkpoint() {
        let mut c = CoordinatorCore::new();
        c.register(0).unwrap();
        let b = c.register(1).unwrap();
        let mut d = Driver {
            refuse: Some(1),
            log: Vec::new(),
        };
        let err = c
            .broadcast_checkpoint(&mut d, AfterCheckpoint::Resume)
            .unwrap_err();
        assert!(matches!(err, CoordError::CheckpointAborted { client_id, phase: Phase::Quiesced, .. } if client_id == b));
    }

    #[test]
    fn out_of_order_ack_rejected_and_audit_catches_reordering() {
        let mut c = CoordinatorCore::new();
        let a = c.register(0).unwrap();
        let b = c.register(1).unwrap();
        c.begin_checkpoint().unwrap();
        c.ack_phase(a, Phase::Quiesced).unwrap();
        assert!(matches!(
            c.ack_phase(a, Phase::Drained),
            Err(CoordError::PhaseOrder { .. })
        ));
        c.ack_phase(b, Phase::Quiesced).unwrap();
        c.ack_phase(a, Phase::Drained).unwrap();

        let bad = vec![
            PhaseEvent { seq: 0, round: 1, client_id: 1, phase: Phase::Quiesced },
            PhaseEvent { seq: 1, round: 1, client_id: 1, phase: Phase::Drained },
            PhaseEvent { seq: 2, round: 1, client_id: 2, phase: Phase::Quiesced },
        ];
        assert!(!audit_phase_log(&bad));
    }

    #[test]
    fn tcp_barrier_gives_identical_snapshots() {
        let server = CoordinatorServer::bind("127.0.0.1:0", Some(3), Duration::from_secs(10)).unwrap();
        let addr = server.local_addr();
        let handles: Vec<_> = (0..3u32)
            .map(|n| {
                std::thread::spawn(move || {
                    let mut s = TcpSession::register(addr, n).unwrap();
                    s.publish(NS_LID, &(n as u16).to_be_bytes(), &[n as u8; 2]).unwrap();
                    s.publish(NS_VRKEY_PD_RKEY, &[1, 0, 0, 0, n as u8], &[7]).unwrap();
                    s.barrier().unwrap();
                    snapshot_hash(&mut s).unwrap()
                })
            })
            .collect();
        let hashes: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
        assert!(hashes.windows(2).all(|w| w[0] == w[1]));
        let n = server.with_core(|c| c.subscribe(NS_LID).unwrap().len());
        assert_eq!(n, 3);
    }

    #[test]
    fn tcp_status_codes() {
        let server = CoordinatorServer::bind("127.0.0.1:0", Some(2), Duration::from_millis(200)).unwrap();
        let addr = server.local_addr();
        let mut a = TcpSession::register(addr, 0).unwrap();
        assert_eq!(a.client_id(), 1);
        assert_eq!(
            TcpSession::register(addr, 0).err(),
            Some(CoordError::DuplicateNode(0))
        );
        a.publish(NS_QP_PD, b"k", b"1").unwrap();
        assert!(matches!(
            a.publish(NS_QP_PD, b"k", b"2"),
            Err(CoordError::PublishConflict { .. })
        ));
        assert_eq!(
            a.publish("bogus", b"k", b"1"),
            Err(CoordError::UnknownNamespace("bogus".into()))
        );
        // second expected client never shows up
        assert_eq!(a.barrier(), Err(CoordError::Timeout));
        a.request_checkpoint().unwrap();
        a.ack_phase(Phase::Quiesced).unwrap();
        assert_eq!(TcpSession::register(addr, 9).err(), Some(CoordError::RegistrationClosed));
        server.shutdown();
    }
}
