// SPDX-License-Identifier: Apache-2.0

//! Reliable-connection frame transport between simulated nodes.
//!
//! Time is virtual and advances only when the owner calls [`Fabric::tick`].
//! Every frame sent on a half-connection (one direction of a connection) is
//! delivered exactly once and in sequence order. Frames due on the same tick
//! across different half-connections are ordered by a seeded tie-break, so a
//! fixed seed always yields the same delivery schedule.
//!
//! In [`TransportMode::Stream`] the frame bytes really travel over a loopback
//! TCP connection; the scheduler only keeps the delivery metadata and checks
//! that what comes out of the socket is what it expected.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::{self, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::mpsc;
use std::thread::JoinHandle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub type ConnId = u64;

/// Magic byte opening every encoded frame.
pub const FRAME_MAGIC: u8 = 0xF1;

/// Fixed part of an encoded frame, before the payload bytes.
pub const FRAME_HEADER_LEN: usize = 1 + 1 + 8 + 8 + 1 + 4 + 8 + 4 + 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeAddr {
    pub node_id: u32,
    /// Analog of the HCA port.
    pub port_index: u32,
}

impl NodeAddr {
    pub const fn new(node_id: u32, port_index: u32) -> Self {
        Self {
            node_id,
            port_index,
        }
    }
}

impl std::fmt::Display for NodeAddr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.node_id, self.port_index)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum FrameKind {
    SendData = 1,
    RdmaWriteData = 2,
    RdmaReadReq = 3,
    RdmaReadResp = 4,
    DeliveryAck = 5,
}

impl FrameKind {
    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            1 => Self::SendData,
            2 => Self::RdmaWriteData,
            3 => Self::RdmaReadReq,
            4 => Self::RdmaReadResp,
            5 => Self::DeliveryAck,
            _ => return None,
        })
    }

    /// Frames produced by an application post, as opposed to frames the
    /// adapter generates on its own (acks, read responses).
    pub fn is_application_originated(self) -> bool {
        matches!(
            self,
            Self::SendData | Self::RdmaWriteData | Self::RdmaReadReq
        )
    }

    /// Kinds whose wire record carries a meaningful remote address and rkey.
    pub fn carries_remote(self) -> bool {
        matches!(self, Self::RdmaWriteData | Self::RdmaReadReq)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub conn_id: ConnId,
    /// Assigned by the fabric on send; ignored on input.
    pub seq: u64,
    pub kind: FrameKind,
    pub payload: Vec<u8>,
    pub imm: Option<u32>,
    pub remote_addr: Option<u64>,
    pub rkey: Option<u32>,
}

impl Frame {
    pub fn new(kind: FrameKind, payload: Vec<u8>) -> Self {
        Self {
            conn_id: 0,
            seq: 0,
            kind,
            payload,
            imm: None,
            remote_addr: None,
            rkey: None,
        }
    }

    /// Encodes the frame record without the stream length prefix.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(FRAME_HEADER_LEN + self.payload.len());
        out.push(FRAME_MAGIC);
        out.push(self.kind as u8);
        out.extend_from_slice(&self.conn_id.to_le_bytes());
        out.extend_from_slice(&self.seq.to_le_bytes());
        out.push(u8::from(self.imm.is_some()));
        out.extend_from_slice(&self.imm.unwrap_or(0).to_le_bytes());
        out.extend_from_slice(&self.remote_addr.unwrap_or(0).to_le_bytes());
        out.extend_from_slice(&self.rkey.unwrap_or(0).to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    /// Encodes the frame with its big-endian length prefix, as written to a
    /// stream connection.
    pub fn encode_prefixed(&self) -> Vec<u8> {
        let body = self.encode();
        let mut out = Vec::with_capacity(4 + body.len());
        out.extend_from_slice(&(body.len() as u32).to_be_bytes());
        out.extend_from_slice(&body);
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self, FrameDecodeError> {
        if buf.len() < FRAME_HEADER_LEN {
            return Err(FrameDecodeError::Truncated);
        }
        if buf[0] != FRAME_MAGIC {
            return Err(FrameDecodeError::BadMagic(buf[0]));
        }
        let kind = FrameKind::from_u8(buf[1]).ok_or(FrameDecodeError::BadKind(buf[1]))?;
        let u64_at = |o: usize| u64::from_le_bytes(buf[o..o + 8].try_into().unwrap());
        let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
        let conn_id = u64_at(2);
        let seq = u64_at(10);
        let imm_present = buf[18];
        let imm = u32_at(19);
        let remote_addr = u64_at(23);
        let rkey = u32_at(31);
        let payload_len = u32_at(35) as usize;
        if buf.len() != FRAME_HEADER_LEN + payload_len {
            return Err(FrameDecodeError::LengthMismatch {
                declared: payload_len,
                available: buf.len() - FRAME_HEADER_LEN,
            });
        }
        let imm = match imm_present {
            0 => None,
            1 => Some(imm),
            v => return Err(FrameDecodeError::BadFlag(v)),
        };
        let (remote_addr, rkey) = if kind.carries_remote() {
            (Some(remote_addr), Some(rkey))
        } else {
            (None, None)
        };
        Ok(Self {
            conn_id,
            seq,
            kind,
            payload: buf[FRAME_HEADER_LEN..].to_vec(),
            imm,
            remote_addr,
            rkey,
        })
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FrameDecodeError {
    #[error("frame shorter than its fixed header")]
    Truncated,
    #[error("bad frame magic {0:#04x}")]
    BadMagic(u8),
    #[error("unknown frame kind {0}")]
    BadKind(u8),
    #[error("bad imm_present flag {0}")]
    BadFlag(u8),
    #[error("payload length {declared} but {available} bytes follow")]
    LengthMismatch { declared: usize, available: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum TransportMode {
    #[default]
    InProcess,
    Stream,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FabricConfig {
    pub mode: TransportMode,
    pub delivery_delay_ticks: u64,
    /// Gap between the receiver-side and the sender-side completion of one
    /// message. Acks travel with this delay instead of the delivery delay.
    pub completion_skew_ticks: u64,
    pub rng_seed: u64,
    pub port_count: u32,
}

impl Default for FabricConfig {
    fn default() -> Self {
        Self {
            mode: TransportMode::InProcess,
            delivery_delay_ticks: 1,
            completion_skew_ticks: 0,
            rng_seed: 42,
            port_count: 4,
        }
    }
}

#[derive(Debug, Error)]
pub enum FabricError {
    #[error("address {0} is not registered with the fabric")]
    AddressUnknown(NodeAddr),
    #[error("address {0} is already registered")]
    AddressInUse(NodeAddr),
    #[error("port index {port} exceeds configured port count {count}")]
    PortOutOfRange { port: u32, count: u32 },
    #[error("self-connection on {0} rejected")]
    SelfConnectRejected(NodeAddr),
    #[error("connection {0} does not exist")]
    UnknownConnection(ConnId),
    #[error("{0} is not an endpoint of connection {1}")]
    NotAnEndpoint(NodeAddr, ConnId),
    #[error("node {0} is quiesced; send suppressed")]
    SendSuppressed(u32),
    #[error("node {0} still has live connections")]
    RebindWhileActive(u32),
    #[error("stream transport: {0}")]
    Transport(String),
}

impl From<io::Error> for FabricError {
    fn from(e: io::Error) -> Self {
        Self::Transport(e.to_string())
    }
}

/// A frame handed to its destination.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Delivery {
    pub tick: u64,
    pub from: NodeAddr,
    pub to: NodeAddr,
    pub frame: Frame,
}

/// Summary of an undelivered frame, for introspection.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InFlightFrame {
    pub conn_id: ConnId,
    pub seq: u64,
    pub kind: FrameKind,
    pub from: NodeAddr,
    pub to: NodeAddr,
    pub due: u64,
}

struct Pending {
    due: u64,
    tiebreak: u64,
    order: u64,
    seq: u64,
    kind: FrameKind,
    /// `None` in stream mode, where the bytes sit in the socket.
    frame: Option<Frame>,
}

struct HalfConn {
    next_seq: u64,
    next_deliver: u64,
    last_due: u64,
    queue: VecDeque<Pending>,
}

impl HalfConn {
    fn new() -> Self {
        Self {
            next_seq: 0,
            next_deliver: 0,
            last_due: 0,
            queue: VecDeque::new(),
        }
    }
}

struct Conn {
    ends: [NodeAddr; 2],
    /// Index 0 carries ends[0] -> ends[1].
    halves: [HalfConn; 2],
    link: Option<StreamLink>,
}

impl Conn {
    fn direction(&self, from: NodeAddr) -> Option<usize> {
        self.ends.iter().position(|e| *e == from)
    }
}

/// Loopback socket pair backing one stream-mode connection.
struct StreamLink {
    writers: [Option<mpsc::Sender<Vec<u8>>>; 2],
    readers: [TcpStream; 2],
    threads: Vec<JoinHandle<()>>,
}

impl StreamLink {
    fn open() -> io::Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let a = TcpStream::connect(listener.local_addr()?)?;
        let (b, _) = listener.accept()?;
        a.set_nodelay(true)?;
        b.set_nodelay(true)?;
        // Direction 0 writes on a and reads on b; direction 1 the reverse.
        let mut threads = Vec::with_capacity(2);
        let mut writers = [None, None];
        for (dir, sock) in [(0usize, a.try_clone()?), (1, b.try_clone()?)] {
            let (tx, rx) = mpsc::channel::<Vec<u8>>();
            threads.push(std::thread::spawn(move || {
                let mut sock = sock;
                for buf in rx {
                    if sock.write_all(&buf).is_err() {
                        break;
                    }
                }
            }));
            writers[dir] = Some(tx);
        }
        Ok(Self {
            writers,
            readers: [b, a],
            threads,
        })
    }

    fn write(&self, dir: usize, bytes: Vec<u8>) -> Result<(), FabricError> {
        self.writers[dir]
            .as_ref()
            .expect("writer present until drop")
            .send(bytes)
            .map_err(|_| FabricError::Transport("writer thread gone".into()))
    }

    fn read_frame(&mut self, dir: usize) -> Result<Frame, FabricError> {
        let sock = &mut self.readers[dir];
        let mut len = [0u8; 4];
        sock.read_exact(&mut len)?;
        let mut body = vec![0u8; u32::from_be_bytes(len) as usize];
        sock.read_exact(&mut body)?;
        Frame::decode(&body).map_err(|e| FabricError::Transport(e.to_string()))
    }
}

impl Drop for StreamLink {
    fn drop(&mut self) {
        for w in &mut self.writers {
            w.take();
        }
        for r in &self.readers {
            let _ = r.shutdown(std::net::Shutdown::Both);
        }
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

pub struct Fabric {
    config: FabricConfig,
    now: u64,
    nodes: BTreeSet<NodeAddr>,
    node_modes: BTreeMap<u32, TransportMode>,
    conns: BTreeMap<ConnId, Conn>,
    next_conn: ConnId,
    quiesced: BTreeSet<u32>,
    rng: ChaCha8Rng,
    send_order: u64,
    delivered: u64,
    log_hasher: Sha256,
    seq_violations: u64,
}

impl Fabric {
    pub fn new(config: FabricConfig) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
        Self {
            config,
            now: 0,
            nodes: BTreeSet::new(),
            node_modes: BTreeMap::new(),
            conns: BTreeMap::new(),
            next_conn: 1,
            quiesced: BTreeSet::new(),
            rng,
            send_order: 0,
            delivered: 0,
            log_hasher: Sha256::new(),
            seq_violations: 0,
        }
    }

    pub fn config(&self) -> &FabricConfig {
        &self.config
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn register(&mut self, addr: NodeAddr) -> Result<(), FabricError> {
        if addr.port_index >= self.config.port_count {
            return Err(FabricError::PortOutOfRange {
                port: addr.port_index,
                count: self.config.port_count,
            });
        }
        if !self.nodes.insert(addr) {
            return Err(FabricError::AddressInUse(addr));
        }
        Ok(())
    }

    pub fn is_registered(&self, addr: NodeAddr) -> bool {
        self.nodes.contains(&addr)
    }

    pub fn registered(&self) -> impl Iterator<Item = NodeAddr> + '_ {
        self.nodes.iter().copied()
    }

    pub fn mode_of(&self, node_id: u32) -> TransportMode {
        self.node_modes
            .get(&node_id)
            .copied()
            .unwrap_or(self.config.mode)
    }

    pub fn connect(&mut self, a: NodeAddr, b: NodeAddr) -> Result<ConnId, FabricError> {
        for addr in [a, b] {
            if !self.nodes.contains(&addr) {
                return Err(FabricError::AddressUnknown(addr));
            }
        }
        if a == b {
            return Err(FabricError::SelfConnectRejected(a));
        }
        let stream = self.mode_of(a.node_id) == TransportMode::Stream
            || self.mode_of(b.node_id) == TransportMode::Stream;
        let link = if stream {
            Some(StreamLink::open()?)
        } else {
            None
        };
        let id = self.next_conn;
        self.next_conn += 1;
        self.conns.insert(
            id,
            Conn {
                ends: [a, b],
                halves: [HalfConn::new(), HalfConn::new()],
                link,
            },
        );
        Ok(id)
    }

    pub fn is_stream(&self, conn: ConnId) -> bool {
        self.conns
            .get(&conn)
            .map(|c| c.link.is_some())
            .unwrap_or(false)
    }

    /// Returns the endpoint opposite `from` on `conn`.
    pub fn peer(&self, conn: ConnId, from: NodeAddr) -> Result<NodeAddr, FabricError> {
        let c = self
            .conns
            .get(&conn)
            .ok_or(FabricError::UnknownConnection(conn))?;
        let dir = c
            .direction(from)
            .ok_or(FabricError::NotAnEndpoint(from, conn))?;
        Ok(c.ends[1 - dir])
    }

    /// Sends a frame with the configured delivery delay. Returns the sequence
    /// number assigned on the half-connection.
    pub fn send(&mut self, from: NodeAddr, frame: Frame) -> Result<u64, FabricError> {
        let delay = self.config.delivery_delay_ticks;
        self.send_with_delay(from, frame, delay)
    }

    /// Sends an ack; acks trail the data they acknowledge by the completion
    /// skew.
    pub fn send_ack(&mut self, from: NodeAddr, frame: Frame) -> Result<u64, FabricError> {
        let delay = self.config.completion_skew_ticks;
        self.send_with_delay(from, frame, delay)
    }

    fn send_with_delay(
        &mut self,
        from: NodeAddr,
        mut frame: Frame,
        delay: u64,
    ) -> Result<u64, FabricError> {
        if frame.kind.is_application_originated() && self.quiesced.contains(&from.node_id) {
            return Err(FabricError::SendSuppressed(from.node_id));
        }
        let conn_id = frame.conn_id;
        let tiebreak = self.rng.next_u64();
        let order = self.send_order;
        self.send_order += 1;
        let now = self.now;
        let conn = self
            .conns
            .get_mut(&conn_id)
            .ok_or(FabricError::UnknownConnection(conn_id))?;
        let dir = conn
            .direction(from)
            .ok_or(FabricError::NotAnEndpoint(from, conn_id))?;
        let half = &mut conn.halves[dir];
        frame.seq = half.next_seq;
        half.next_seq += 1;
        // A frame never overtakes an earlier one on the same half-connection.
        let due = (now + delay).max(half.last_due);
        half.last_due = due;
        let seq = frame.seq;
        let kind = frame.kind;
        let stored = match &conn.link {
            Some(link) => {
                link.write(dir, frame.encode_prefixed())?;
                None
            }
            None => Some(frame),
        };
        half.queue.push_back(Pending {
            due,
            tiebreak,
            order,
            seq,
            kind,
            frame: stored,
        });
        Ok(seq)
    }

    /// Advances virtual time by one tick.
    pub fn tick(&mut self) {
        self.now += 1;
    }

    /// Jumps the clock forward; never moves it backwards.
    pub fn advance_to(&mut self, tick: u64) {
        self.now = self.now.max(tick);
    }

    /// Earliest due tick among undelivered frames.
    pub fn next_due(&self) -> Option<u64> {
        self.conns
            .values()
            .flat_map(|c| c.halves.iter())
            .filter_map(|h| h.queue.front().map(|p| p.due))
            .min()
    }

    /// Removes and returns the next frame due at or before the current tick.
    pub fn pop_due(&mut self) -> Result<Option<Delivery>, FabricError> {
        let now = self.now;
        let mut best: Option<((u64, u64, u64), ConnId, usize)> = None;
        for (id, c) in &self.conns {
            for (dir, h) in c.halves.iter().enumerate() {
                if let Some(p) = h.queue.front() {
                    if p.due <= now {
                        let key = (p.due, p.tiebreak, p.order);
                        if best.as_ref().map(|b| key < b.0).unwrap_or(true) {
                            best = Some((key, *id, dir));
                        }
                    }
                }
            }
        }
        let Some((_, conn_id, dir)) = best else {
            return Ok(None);
        };
        let conn = self.conns.get_mut(&conn_id).expect("selected above");
        let pending = conn.halves[dir].queue.pop_front().expect("non-empty");
        let frame = match pending.frame {
            Some(f) => f,
            None => {
                let link = conn.link.as_mut().expect("stream frame without link");
                let f = link.read_frame(dir)?;
                if f.seq != pending.seq || f.conn_id != conn_id || f.kind != pending.kind {
                    return Err(FabricError::Transport(format!(
                        "stream desync on conn {conn_id}: expected seq {} got {}",
                        pending.seq, f.seq
                    )));
                }
                f
            }
        };
        let half = &mut conn.halves[dir];
        if frame.seq != half.next_deliver {
            self.seq_violations += 1;
        }
        half.next_deliver = frame.seq + 1;
        let from = conn.ends[dir];
        let to = conn.ends[1 - dir];
        self.delivered += 1;
        self.log_hasher.update(now.to_le_bytes());
        self.log_hasher.update(conn_id.to_le_bytes());
        self.log_hasher.update(frame.seq.to_le_bytes());
        self.log_hasher.update([frame.kind as u8, dir as u8]);
        self.log_hasher.update((frame.payload.len() as u64).to_le_bytes());
        Ok(Some(Delivery {
            tick: now,
            from,
            to,
            frame,
        }))
    }

    /// Advances `ticks` ticks and collects everything delivered on the way.
    /// Used when no adapter sits on top of the fabric.
    pub fn step(&mut self, ticks: u64) -> Result<Vec<Delivery>, FabricError> {
        let mut out = Vec::new();
        for _ in 0..ticks {
            self.tick();
            while let Some(d) = self.pop_due()? {
                out.push(d);
            }
        }
        Ok(out)
    }

    /// Stops application-originated sends from `node_id` and reports how many
    /// frames are still travelling to or from it.
    pub fn quiesce(&mut self, node_id: u32) -> usize {
        self.quiesced.insert(node_id);
        self.in_flight_for(node_id)
    }

    pub fn release(&mut self, node_id: u32) {
        self.quiesced.remove(&node_id);
    }

    pub fn is_quiesced(&self, node_id: u32) -> bool {
        self.quiesced.contains(&node_id)
    }

    pub fn in_flight(&self) -> usize {
        self.conns
            .values()
            .flat_map(|c| c.halves.iter())
            .map(|h| h.queue.len())
            .sum()
    }

    pub fn in_flight_for(&self, node_id: u32) -> usize {
        self.conns
            .values()
            .filter(|c| c.ends.iter().any(|e| e.node_id == node_id))
            .flat_map(|c| c.halves.iter())
            .map(|h| h.queue.len())
            .sum()
    }

    pub fn in_flight_frames(&self) -> Vec<InFlightFrame> {
        let mut out = Vec::new();
        for (id, c) in &self.conns {
            for (dir, h) in c.halves.iter().enumerate() {
                for p in &h.queue {
                    out.push(InFlightFrame {
                        conn_id: *id,
                        seq: p.seq,
                        kind: p.kind,
                        from: c.ends[dir],
                        to: c.ends[1 - dir],
                        due: p.due,
                    });
                }
            }
        }
        out
    }

    pub fn live_connections(&self, node_id: u32) -> usize {
        self.conns
            .values()
            .filter(|c| c.ends.iter().any(|e| e.node_id == node_id))
            .count()
    }

    /// Drops every connection touching `node_id` together with its in-flight
    /// frames, as happens when the processes on that node die.
    pub fn discard_node(&mut self, node_id: u32) -> usize {
        let doomed: Vec<ConnId> = self
            .conns
            .iter()
            .filter(|(_, c)| c.ends.iter().any(|e| e.node_id == node_id))
            .map(|(id, _)| *id)
            .collect();
        let mut dropped = 0;
        for id in doomed {
            if let Some(c) = self.conns.remove(&id) {
                dropped += c.halves.iter().map(|h| h.queue.len()).sum::<usize>();
            }
        }
        self.quiesced.remove(&node_id);
        dropped
    }

    /// Drops all connections and frames. Registrations and the clock survive.
    pub fn discard_all(&mut self) -> usize {
        let dropped = self.in_flight();
        self.conns.clear();
        self.quiesced.clear();
        dropped
    }

    /// Switches the transport used for future connections of `node_id`.
    pub fn teardown_and_rebind(
        &mut self,
        node_id: u32,
        new_mode: TransportMode,
    ) -> Result<(), FabricError> {
        if self.live_connections(node_id) > 0 {
            return Err(FabricError::RebindWhileActive(node_id));
        }
        self.node_modes.insert(node_id, new_mode);
        Ok(())
    }

    pub fn delivered_count(&self) -> u64 {
        self.delivered
    }

    /// Digest of the delivery log so far (tick, conn, seq, kind, direction,
    /// payload length of every delivered frame).
    pub fn delivery_digest(&self) -> [u8; 32] {
        self.log_hasher.clone().finalize().into()
    }

    /// Count of deliveries that broke per-half-connection sequence order.
    pub fn seq_violations(&self) -> u64 {
        self.seq_violations
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fabric(delay: u64) -> Fabric {
        let mut f = Fabric::new(FabricConfig {
            delivery_delay_ticks: delay,
            ..FabricConfig::default()
        });
        for n in 0..3 {
            f.register(NodeAddr::new(n, 0)).unwrap();
        }
        f
    }

    fn data(conn: ConnId, bytes: &[u8]) -> Frame {
        Frame {
            conn_id: conn,
            ..Frame::new(FrameKind::SendData, bytes.to_vec())
        }
    }

    #[test]
    fn first_connection_is_one() {
        let mut f = fabric(1);
        assert_eq!(f.connect(NodeAddr::new(0, 0), NodeAddr::new(1, 0)).unwrap(), 1);
    }

    #[test]
    fn self_connect_rejected() {
        let mut f = fabric(1);
        let a = NodeAddr::new(0, 0);
        assert!(matches!(
            f.connect(a, a),
            Err(FabricError::SelfConnectRejected(_))
        ));
    }

    #[test]
    fn unknown_address() {
        let mut f = fabric(1);
        assert!(matches!(
            f.connect(NodeAddr::new(0, 0), NodeAddr::new(9, 0)),
            Err(FabricError::AddressUnknown(_))
        ));
    }

    #[test]
    fn repeated_connects_get_distinct_ids() {
        let mut f = fabric(1);
        let (a, b) = (NodeAddr::new(0, 0), NodeAddr::new(1, 0));
        let ids: Vec<_> = (0..5).map(|_| f.connect(a, b).unwrap()).collect();
        // allocation counter: one fresh id per call, starting from 1
        assert_eq!(ids, (1..=5).collect::<Vec<_>>());
    }

    #[test]
    fn zero_delay_delivers_on_next_step() {
        let mut f = fabric(0);
        let (a, b) = (NodeAddr::new(0, 0), NodeAddr::new(1, 0));
        let c = f.connect(a, b).unwrap();
        f.send(a, data(c, b"x")).unwrap();
        let d = f.step(1).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].tick, 1);
        assert_eq!(d[0].to, b);
    }

    #[test]
    fn delay_is_added_to_send_tick() {
        let mut f = fabric(5);
        let (a, b) = (NodeAddr::new(0, 0), NodeAddr::new(1, 0));
        let c = f.connect(a, b).unwrap();
        f.step(10).unwrap();
        f.send(a, data(c, b"x")).unwrap();
        assert!(f.step(4).unwrap().is_empty());
        let d = f.step(1).unwrap();
        assert_eq!(d[0].tick, 10 + 5);
    }

    #[test]
    fn quiesce_suppresses_app_sends_only() {
        let mut f = fabric(3);
        let (a, b) = (NodeAddr::new(0, 0), NodeAddr::new(1, 0));
        let c = f.connect(a, b).unwrap();
        assert_eq!(f.quiesce(0), 0);
        assert!(matches!(
            f.send(a, data(c, b"x")),
            Err(FabricError::SendSuppressed(0))
        ));
        let ack = Frame {
            conn_id: c,
            ..Frame::new(FrameKind::DeliveryAck, vec![0])
        };
        f.send_ack(a, ack).unwrap();
        assert_eq!(f.in_flight(), 1);
    }

    #[test]
    fn quiesce_counts_in_flight_and_is_idempotent() {
        let mut f = fabric(10);
        let (a, b) = (NodeAddr::new(0, 0), NodeAddr::new(1, 0));
        let c = f.connect(a, b).unwrap();
        for _ in 0..3 {
            f.send(a, data(c, b"x")).unwrap();
        }
        let oracle = f.in_flight_frames().len();
        assert_eq!(f.quiesce(0), oracle);
        assert_eq!(f.quiesce(0), 3);
        let mut last = 3;
        for _ in 0..12 {
            f.step(1).unwrap();
            let now = f.in_flight_for(0);
            assert!(now <= last);
            last = now;
        }
        assert_eq!(last, 0);
    }

    #[test]
    fn rebind_requires_no_live_connections() {
        let mut f = fabric(1);
        let (a, b) = (NodeAddr::new(0, 0), NodeAddr::new(1, 0));
        f.teardown_and_rebind(2, TransportMode::Stream).unwrap();
        f.connect(a, b).unwrap();
        assert!(matches!(
            f.teardown_and_rebind(0, TransportMode::Stream),
            Err(FabricError::RebindWhileActive(0))
        ));
        f.discard_node(0);
        f.teardown_and_rebind(0, TransportMode::Stream).unwrap();
        assert_eq!(f.mode_of(0), TransportMode::Stream);
    }

    #[test]
    fn acks_never_overtake_data() {
        let mut f = Fabric::new(FabricConfig {
            delivery_delay_ticks: 10,
            completion_skew_ticks: 0,
            ..FabricConfig::default()
        });
        let (a, b) = (NodeAddr::new(0, 0), NodeAddr::new(1, 0));
        f.register(a).unwrap();
        f.register(b).unwrap();
        let c = f.connect(a, b).unwrap();
        f.send(a, data(c, b"1")).unwrap();
        f.send_ack(
            a,
            Frame {
                conn_id: c,
                ..Frame::new(FrameKind::DeliveryAck, vec![])
            },
        )
        .unwrap();
        let d = f.step(20).unwrap();
        assert_eq!(d[0].frame.kind, FrameKind::SendData);
        assert_eq!(d[1].frame.kind, FrameKind::DeliveryAck);
        assert_eq!(d[0].tick, d[1].tick);
    }

    #[test]
    fn frame_wire_layout() {
        let f = Frame {
            conn_id: 7,
            seq: 3,
            kind: FrameKind::RdmaWriteData,
            payload: vec![0xAA, 0xBB],
            imm: Some(0x01020304),
            remote_addr: Some(0x1122),
            rkey: Some(9),
        };
        let bytes = f.encode_prefixed();
        assert_eq!(&bytes[..4], &(FRAME_HEADER_LEN as u32 + 2).to_be_bytes());
        let body = &bytes[4..];
        assert_eq!(body[0], 0xF1);
        assert_eq!(body[1], 2);
        assert_eq!(&body[2..10], &7u64.to_le_bytes());
        assert_eq!(&body[10..18], &3u64.to_le_bytes());
        assert_eq!(body[18], 1);
        assert_eq!(&body[19..23], &[4, 3, 2, 1]);
        assert_eq!(&body[23..31], &0x1122u64.to_le_bytes());
        assert_eq!(&body[31..35], &9u32.to_le_bytes());
        assert_eq!(&body[35..39], &2u32.to_le_bytes());
        assert_eq!(&body[39..], &[0xAA, 0xBB]);
        assert_eq!(Frame::decode(body).unwrap(), f);
    }

    #[test]
    fn decode_rejects_garbage() {
        assert_eq!(Frame::decode(&[0xF1]), Err(FrameDecodeError::Truncated));
        let mut b = data(1, b"abc").encode();
        b[0] = 0;
        assert_eq!(Frame::decode(&b), Err(FrameDecodeError::BadMagic(0)));
        let mut b = data(1, b"abc").encode();
        b.pop();
        assert!(matches!(
            Frame::decode(&b),
            Err(FrameDecodeError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn stream_link_carries_frames() {
        let mut f = Fabric::new(FabricConfig {
            mode: TransportMode::Stream,
            delivery_delay_ticks: 2,
            ..FabricConfig::default()
        });
        let (a, b) = (NodeAddr::new(0, 0), NodeAddr::new(1, 0));
        f.register(a).unwrap();
        f.register(b).unwrap();
        let c = f.connect(a, b).unwrap();
        assert!(f.is_stream(c));
        let big = vec![7u8; 300_000];
        f.send(a, data(c, &big)).unwrap();
        f.send(b, data(c, b"back")).unwrap();
        let d = f.step(3).unwrap();
        assert_eq!(d.len(), 2);
        let fwd = d.iter().find(|x| x.to == b).unwrap();
        assert_eq!(fwd.frame.payload, big);
    }
}
