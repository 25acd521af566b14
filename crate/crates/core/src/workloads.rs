// SPDX-License-Identifier: Apache-2.0
//! Reference applications. Each one is a cooperative state machine driven
//! by the cluster scheduler: `step` polls, posts and returns whether it did
//! anything. State serializes to JSON so a checkpoint can carry it.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::engine::{
    AccessFlags, CompletionEvent, Engine, Opcode, QpTransition, Sge, VerbsError, WorkRequest, MEM_BASE,
};
use crate::plugin::{NodePlugin, PluginError};

const RECV_WR_BASE: u64 = 1 << 32;
const READ_WR_ID: u64 = 1 << 40;
const CQ_CAPACITY: usize = 1024;
const POLL_BATCH: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum WorkloadKind {
    PingPong,
    RdmaStream,
    RingExchange,
}

impl FromStr for WorkloadKind {
    type Err = SpecError;

    fn from_str(s: &str) -> Result<Self, SpecError> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "ping_pong" => Ok(Self::PingPong),
            "rdma_stream" => Ok(Self::RdmaStream),
            "ring_exchange" => Ok(Self::RingExchange),
            _ => Err(SpecError::UnknownWorkload(s.to_string())),
        }
    }
}

impl fmt::Display for WorkloadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::PingPong => "PING_PONG",
            Self::RdmaStream => "RDMA_STREAM",
            Self::RingExchange => "RING_EXCHANGE",
        })
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SpecError {
    #[error("unknown workload {0:?}")]
    UnknownWorkload(String),
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("bad value {value:?} for {key}")]
    BadValue { key: String, value: String },
    #[error("missing key {0}")]
    Missing(&'static str),
    #[error("line {0:?} is not key=value")]
    Syntax(String),
    #[error("{0}")]
    Invalid(String),
    #[error("{kind} cannot run on {nodes} nodes")]
    NodeCount { kind: WorkloadKind, nodes: u32 },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub kind: WorkloadKind,
    pub iterations: u64,
    pub msg_size: u32,
    /// RDMA_STREAM only: every n-th write carries an immediate.
    pub imm_every: Option<u64>,
    pub signaled_every: u64,
    pub seed: u64,
}

impl WorkloadSpec {
    pub fn new(kind: WorkloadKind, iterations: u64, msg_size: u32) -> Self {
        Self {
            kind,
            iterations,
            msg_size,
            imm_every: None,
            signaled_every: 1,
            seed: 0,
        }
    }

    /// Parses `key=value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, SpecError> {
        let mut kind = None;
        let mut iterations = None;
        let mut msg_size = None;
        let mut imm_every = None;
        let mut signaled_every = 1;
        let mut seed = 0;
        for raw in text.lines() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| SpecError::Syntax(line.to_string()))?;
            let (k, v) = (k.trim(), v.trim());
            let num = || {
                v.parse::<u64>().map_err(|_| SpecError::BadValue {
                    key: k.to_string(),
                    value: v.to_string(),
                })
            };
            match k {
                "workload" => kind = Some(v.parse()?),
                "iterations" => iterations = Some(num()?),
                "msg_size" => {
                    msg_size = Some(u32::try_from(num()?).map_err(|_| SpecError::BadValue {
                        key: k.to_string(),
                        value: v.to_string(),
                    })?)
                }
                "imm_every" => imm_every = Some(num()?),
                "signaled_every" => signaled_every = num()?,
                "seed" => seed = num()?,
                other => return Err(SpecError::UnknownKey(other.to_string())),
            }
        }
        let spec = Self {
            kind: kind.ok_or(SpecError::Missing("workload"))?,
            iterations: iterations.ok_or(SpecError::Missing("iterations"))?,
            msg_size: msg_size.ok_or(SpecError::Missing("msg_size"))?,
            imm_every,
            signaled_every,
            seed,
        };
        spec.check()?;
        Ok(spec)
    }

    fn check(&self) -> Result<(), SpecError> {
        if self.iterations == 0 {
            return Err(SpecError::Invalid("iterations must be positive".into()));
        }
        if self.msg_size == 0 {
            return Err(SpecError::Invalid("msg_size must be positive".into()));
        }
        if self.signaled_every == 0 {
            return Err(SpecError::Invalid("signaled_every must be positive".into()));
        }
        if let Some(m) = self.imm_every {
            if m == 0 || m % self.signaled_every != 0 {
                return Err(SpecError::Invalid(
                    "imm_every must be a positive multiple of signaled_every".into(),
                ));
            }
        }
        if self.kind == WorkloadKind::RingExchange && self.msg_size < 8 {
            return Err(SpecError::Invalid("RING_EXCHANGE needs msg_size >= 8".into()));
        }
        Ok(())
    }

    /// Checks the spec against a node count.
    pub fn validate(&self, nodes: u32) -> Result<(), SpecError> {
        self.check()?;
        let ok = match self.kind {
            WorkloadKind::PingPong | WorkloadKind::RdmaStream => nodes >= 2 && nodes.is_multiple_of(2),
            WorkloadKind::RingExchange => nodes >= 3,
        };
        if ok {
            Ok(())
        } else {
            Err(SpecError::NodeCount {
                kind: self.kind,
                nodes,
            })
        }
    }

    /// Bytes of node memory the workload touches.
    pub fn memory_needed(&self, nodes: u32) -> u64 {
        let m = self.msg_size as u64;
        match self.kind {
            WorkloadKind::PingPong => 3 * m,
            WorkloadKind::RdmaStream => 2 * self.signaled_every * m + 64,
            WorkloadKind::RingExchange => (1 + ring_window(nodes)) * m,
        }
    }

    pub fn build(&self, node: u32, nodes: u32) -> Box<dyn Application> {
        match self.kind {
            WorkloadKind::PingPong => Box::new(PingPong::new(self.clone(), node)),
            WorkloadKind::RdmaStream => Box::new(RdmaStream::new(self.clone(), node)),
            WorkloadKind::RingExchange => Box::new(RingExchange::new(self.clone(), node, nodes)),
        }
    }
}

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error(transparent)]
    Plugin(#[from] PluginError),
    #[error(transparent)]
    Verbs(#[from] VerbsError),
    #[error("node {node}: completion failed: {event:?}")]
    Completion { node: u32, event: CompletionEvent },
    #[error("node {node}: {what}")]
    Protocol { node: u32, what: String },
    #[error("workload state: {0}")]
    State(#[from] serde_json::Error),
}

/// One observable event of an application run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub index: u64,
    pub wr_id: u64,
    pub opcode: Opcode,
    pub byte_len: u32,
    pub payload_hash: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub entries: Vec<TranscriptEntry>,
}

impl Transcript {
    pub fn record(&mut self, wr_id: u64, opcode: Opcode, byte_len: u32, payload: &[u8]) {
        let index = self.entries.len() as u64;
        self.entries.push(TranscriptEntry {
            index,
            wr_id,
            opcode,
            byte_len,
            payload_hash: payload_hash(payload),
        });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update(e.index.to_le_bytes());
            h.update(e.wr_id.to_le_bytes());
            h.update([e.opcode as u8]);
            h.update(e.byte_len.to_le_bytes());
            h.update(e.payload_hash.to_le_bytes());
        }
        h.finalize().into()
    }
}

/// Transcripts agree when their digests do.
pub fn verify(a: &Transcript, b: &Transcript) -> bool {
    a.digest() == b.digest()
}

pub fn payload_hash(bytes: &[u8]) -> u64 {
    let d = Sha256::digest(bytes);
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Deterministic message body for `(seed, tags)`.
pub fn payload(seed: u64, tags: &[u64], len: usize) -> Vec<u8> {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for t in tags {
        h.update(t.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
    let mut out = vec![0u8; len];
    rng.fill_bytes(&mut out);
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppStats {
    /// Payload bytes whose send-side completion was seen.
    pub bytes_sent: u64,
    pub sender_completions: u64,
    pub receiver_completions: u64,
}

/// What a node tells its peers so they can connect to it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Endpoint {
    pub owner: u32,
    pub peer: u32,
    pub vlid: u16,
    pub vqp_num: u32,
    pub vrkey: u32,
    pub buf_addr: u64,
}

/// Borrowed verbs surface an application step runs against.
pub struct Verbs<'a> {
    pub engine: &'a mut Engine,
    pub plugin: &'a mut NodePlugin,
}

impl Verbs<'_> {
    fn read(&self, base: u64, len: u64) -> Result<Vec<u8>, WorkloadError> {
        Ok(self.engine.read_memory(self.plugin.addr(), base, len)?)
    }

    fn write(&mut self, base: u64, bytes: &[u8]) -> Result<(), WorkloadError> {
        let addr = self.plugin.addr();
        Ok(self.engine.write_memory(addr, base, bytes)?)
    }

    fn poll(&mut self, vcq: u64) -> Result<Vec<CompletionEvent>, WorkloadError> {
        let node = self.plugin.node_id();
        let evs = self.plugin.poll_cq(self.engine, vcq, POLL_BATCH)?;
        if let Some(bad) = evs.iter().find(|e| !e.status.is_ok()) {
            return Err(WorkloadError::Completion {
                node,
                event: bad.clone(),
            });
        }
        Ok(evs)
    }

    fn connect(&mut self, vqp: u64, ep: &Endpoint) -> Result<(), WorkloadError> {
        self.plugin.modify_qp(self.engine, vqp, QpTransition::ToInit)?;
        self.plugin.modify_qp(
            self.engine,
            vqp,
            QpTransition::ToRtr {
                remote_lid: ep.vlid,
                remote_qp_num: ep.vqp_num,
            },
        )?;
        self.plugin.modify_qp(self.engine, vqp, QpTransition::ToRts)?;
        Ok(())
    }
}

pub trait Application {
    fn node_id(&self) -> u32;
    /// Creates resources and returns this node's endpoints.
    fn setup(&mut self, v: &mut Verbs) -> Result<Vec<Endpoint>, WorkloadError>;
    /// Connects to peers and posts the initial receives.
    fn connect(&mut self, v: &mut Verbs, all: &[Endpoint]) -> Result<(), WorkloadError>;
    fn step(&mut self, v: &mut Verbs) -> Result<bool, WorkloadError>;
    fn done(&self) -> bool;
    /// Completed application iterations.
    fn iteration(&self) -> u64;
    fn transcript(&self) -> &Transcript;
    fn stats(&self) -> AppStats;
    fn save(&self) -> Vec<u8>;
    fn restore(&mut self, state: &[u8]) -> Result<(), WorkloadError>;
    /// Token history, for workloads that move tokens.
    fn tokens(&self) -> Option<&[u64]> {
        None
    }
}

macro_rules! state_io {
    () => {
        fn save(&self) -> Vec<u8> {
            serde_json::to_vec(self).expect("workload state serializes")
        }

        fn restore(&mut self, state: &[u8]) -> Result<(), WorkloadError> {
            *self = serde_json::from_slice(state)?;
            Ok(())
        }

        fn node_id(&self) -> u32 {
            self.node
        }

        fn transcript(&self) -> &Transcript {
            &self.transcript
        }

        fn stats(&self) -> AppStats {
            self.stats
        }
    };
}

/// Device, pd and one memory region spanning the workload's buffers.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
struct Basic {
    ctx: u64,
    pd: u64,
    vlid: u16,
    lkey: u32,
    rkey: u32,
}

impl Basic {
    fn open(v: &mut Verbs, len: u64) -> Result<Self, WorkloadError> {
        let ctx = v.plugin.open_device(v.engine)?;
        let pd = v.plugin.alloc_pd(v.engine, ctx.virtual_id)?;
        let mr = v
            .plugin
            .reg_mr(v.engine, pd.virtual_id, MEM_BASE, len, AccessFlags::ALL)?;
        Ok(Self {
            ctx: ctx.virtual_id,
            pd: pd.virtual_id,
            vlid: ctx.lid().expect("ctx lid"),
            lkey: mr.lkey().expect("mr lkey"),
            rkey: mr.rkey().expect("mr rkey"),
        })
    }

    fn sge(&self, addr: u64, len: u64) -> Sge {
        Sge {
            addr,
            length: len as u32,
            lkey: self.lkey,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Inbound {
    wr_id: u64,
    byte_len: u32,
    bytes: Vec<u8>,
}

fn find_endpoint(all: &[Endpoint], owner: u32, peer: u32) -> Result<Endpoint, WorkloadError> {
    all.iter()
        .find(|e| e.owner == owner && e.peer == peer)
        .copied()
        .ok_or_else(|| WorkloadError::Protocol {
            node: peer,
            what: format!("no endpoint from node {owner}"),
        })
}

fn xor_5a(bytes: &[u8]) -> Vec<u8> {
    bytes.iter().map(|b| b ^ 0x5A).collect()
}

// ---- PING_PONG -----------------------------------------------------------

/// Pairs (2k, 2k+1). The even node pings, the odd node answers with the
/// ping XOR 0x5A. Two receives stay posted on each side.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PingPong {
    spec: WorkloadSpec,
    node: u32,
    peer: u32,
    res: Basic,
    qp: u64,
    cq: u64,
    iter: u64,
    posted: bool,
    send_done: bool,
    sent_hash: u64,
    inbox: VecDeque<Inbound>,
    recvs_posted: u64,
    transcript: Transcript,
    stats: AppStats,
}

impl PingPong {
    pub fn new(spec: WorkloadSpec, node: u32) -> Self {
        Self {
            spec,
            node,
            peer: node ^ 1,
            res: Basic::default(),
            qp: 0,
            cq: 0,
            iter: 0,
            posted: false,
            send_done: false,
            sent_hash: 0,
            inbox: VecDeque::new(),
            recvs_posted: 0,
            transcript: Transcript::default(),
            stats: AppStats::default(),
        }
    }

    fn pinger(&self) -> bool {
        self.node.is_multiple_of(2)
    }

    fn msg(&self) -> u64 {
        self.spec.msg_size as u64
    }

    fn slot_addr(&self, wr_id: u64) -> u64 {
        MEM_BASE + self.msg() * (1 + (wr_id - RECV_WR_BASE) % 2)
    }

    fn post_recv(&mut self, v: &mut Verbs) -> Result<(), WorkloadError> {
        let wr_id = RECV_WR_BASE + self.recvs_posted;
        let wr = WorkRequest::recv(wr_id, self.res.sge(self.slot_addr(wr_id), self.msg()));
        v.plugin.post_recv(v.engine, self.qp, &wr)?;
        self.recvs_posted += 1;
        Ok(())
    }

    fn pump(&mut self, v: &mut Verbs) -> Result<bool, WorkloadError> {
        let evs = v.poll(self.cq)?;
        for e in &evs {
            match e.opcode {
                Opcode::Send => {
                    self.send_done = true;
                    self.stats.sender_completions += 1;
                    self.stats.bytes_sent += e.byte_len as u64;
                }
                Opcode::Recv => {
                    let bytes = v.read(self.slot_addr(e.wr_id), e.byte_len as u64)?;
                    self.inbox.push_back(Inbound {
                        wr_id: e.wr_id,
                        byte_len: e.byte_len,
                        bytes,
                    });
                    self.stats.receiver_completions += 1;
                    self.post_recv(v)?;
                }
                other => {
                    return Err(WorkloadError::Protocol {
                        node: self.node,
                        what: format!("unexpected {other:?} completion"),
                    })
                }
            }
        }
        Ok(!evs.is_empty())
    }

    fn post_send(&mut self, v: &mut Verbs, body: &[u8]) -> Result<(), WorkloadError> {
        v.write(MEM_BASE, body)?;
        let wr = WorkRequest::send(self.iter, self.res.sge(MEM_BASE, self.msg()), true);
        v.plugin.post_send(v.engine, self.qp, &wr)?;
        self.sent_hash = payload_hash(body);
        self.posted = true;
        Ok(())
    }

    fn log_send(&mut self) {
        let e = TranscriptEntry {
            index: self.transcript.len() as u64,
            wr_id: self.iter,
            opcode: Opcode::Send,
            byte_len: self.spec.msg_size,
            payload_hash: self.sent_hash,
        };
        self.transcript.entries.push(e);
    }

    fn act(&mut self, v: &mut Verbs) -> Result<bool, WorkloadError> {
        if self.iter >= self.spec.iterations {
            return Ok(false);
        }
        let pair = (self.node / 2) as u64;
        if self.pinger() {
            if !self.posted {
                let body = payload(self.spec.seed, &[pair, self.iter], self.msg() as usize);
                self.post_send(v, &body)?;
                return Ok(true);
            }
            if self.send_done && !self.inbox.is_empty() {
                let m = self.inbox.pop_front().expect("non-empty");
                self.log_send();
                self.transcript.record(m.wr_id, Opcode::Recv, m.byte_len, &m.bytes);
                self.finish_iteration();
                return Ok(true);
            }
        } else {
            if !self.posted {
                if let Some(m) = self.inbox.front() {
                    let body = xor_5a(&m.bytes);
                    self.post_send(v, &body)?;
                    return Ok(true);
                }
            } else if self.send_done {
                let m = self.inbox.pop_front().expect("ping consumed");
                self.transcript.record(m.wr_id, Opcode::Recv, m.byte_len, &m.bytes);
                self.log_send();
                self.finish_iteration();
                return Ok(true);
            }
        }
        Ok(false)
    }

    fn finish_iteration(&mut self) {
        self.iter += 1;
        self.posted = false;
        self.send_done = false;
    }
}

impl Application for PingPong {
    state_io!();

    fn setup(&mut self, v: &mut Verbs) -> Result<Vec<Endpoint>, WorkloadError> {
        self.res = Basic::open(v, 3 * self.msg())?;
        self.cq = v.plugin.create_cq(v.engine, self.res.ctx, CQ_CAPACITY)?.virtual_id;
        let qp = v.plugin.create_qp(v.engine, self.res.pd, self.cq, self.cq, None)?;
        self.qp = qp.virtual_id;
        Ok(vec![Endpoint {
            owner: self.node,
            peer: self.peer,
            vlid: self.res.vlid,
            vqp_num: qp.qp_num().expect("qp num"),
            vrkey: self.res.rkey,
            buf_addr: MEM_BASE,
        }])
    }

    fn connect(&mut self, v: &mut Verbs, all: &[Endpoint]) -> Result<(), WorkloadError> {
        let ep = find_endpoint(all, self.peer, self.node)?;
        v.connect(self.qp, &ep)?;
        for _ in 0..2 {
            self.post_recv(v)?;
        }
        Ok(())
    }

    fn step(&mut self, v: &mut Verbs) -> Result<bool, WorkloadError> {
        let mut any = false;
        loop {
            let polled = self.pump(v)?;
            let acted = self.act(v)?;
            if !polled && !acted {
                return Ok(any);
            }
            any = true;
        }
    }

    fn done(&self) -> bool {
        self.iter >= self.spec.iterations
    }

    fn iteration(&self) -> u64 {
        self.iter
    }
}

// ---- RDMA_STREAM ---------------------------------------------------------

/// The even node of each pair writes `iterations` messages into a window
/// of `signaled_every` slots at its peer. Only the last write of a batch is
/// signaled; a batch completes before the next one is posted. The final
/// write carries an immediate, after which the writer reads the window back.
/// The target logs each immediate; on the final one it also hashes the
/// window.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RdmaStream {
    spec: WorkloadSpec,
    node: u32,
    peer: u32,
    res: Basic,
    qp: u64,
    cq: u64,
    remote: Option<Endpoint>,
    /// Writes completed (writer) or immediates seen (target).
    iter: u64,
    posted: bool,
    batch_done: bool,
    read_posted: bool,
    read_done: bool,
    finished: bool,
    recvs_posted: u64,
    transcript: Transcript,
    stats: AppStats,
}

impl RdmaStream {
    pub fn new(spec: WorkloadSpec, node: u32) -> Self {
        Self {
            spec,
            node,
            peer: node ^ 1,
            res: Basic::default(),
            qp: 0,
            cq: 0,
            remote: None,
            iter: 0,
            posted: false,
            batch_done: false,
            read_posted: false,
            read_done: false,
            finished: false,
            recvs_posted: 0,
            transcript: Transcript::default(),
            stats: AppStats::default(),
        }
    }

    fn writer(&self) -> bool {
        self.node.is_multiple_of(2)
    }

    fn msg(&self) -> u64 {
        self.spec.msg_size as u64
    }

    fn window(&self) -> u64 {
        self.spec.signaled_every
    }

    /// Bytes of the target window actually written.
    fn span(&self) -> u64 {
        self.window().min(self.spec.iterations) * self.msg()
    }

    fn batch_end(&self) -> u64 {
        (self.iter + self.window()).min(self.spec.iterations)
    }

    fn opcode_of(&self, i: u64) -> Opcode {
        let last = i + 1 == self.spec.iterations;
        let periodic = self.spec.imm_every.is_some_and(|m| (i + 1).is_multiple_of(m));
        if last || periodic {
            Opcode::RdmaWriteWithImm
        } else {
            Opcode::RdmaWrite
        }
    }

    fn body(&self, i: u64) -> Vec<u8> {
        payload(self.spec.seed, &[(self.node / 2) as u64, i], self.msg() as usize)
    }

    fn post_recv(&mut self, v: &mut Verbs) -> Result<(), WorkloadError> {
        let wr_id = RECV_WR_BASE + self.recvs_posted;
        let addr = MEM_BASE + self.window() * self.msg() + (wr_id % 2);
        let wr = WorkRequest::recv(wr_id, self.res.sge(addr, 1));
        v.plugin.post_recv(v.engine, self.qp, &wr)?;
        self.recvs_posted += 1;
        Ok(())
    }

    fn writer_step(&mut self, v: &mut Verbs) -> Result<bool, WorkloadError> {
        let mut acted = false;
        for e in v.poll(self.cq)? {
            acted = true;
            match e.opcode {
                Opcode::RdmaWrite | Opcode::RdmaWriteWithImm => self.batch_done = true,
                Opcode::RdmaRead => self.read_done = true,
                other => {
                    return Err(WorkloadError::Protocol {
                        node: self.node,
                        what: format!("unexpected {other:?} completion"),
                    })
                }
            }
            self.stats.sender_completions += 1;
        }
        let remote = self.remote.ok_or(WorkloadError::Protocol {
            node: self.node,
            what: "not connected".into(),
        })?;
        if self.iter < self.spec.iterations {
            if !self.posted {
                let end = self.batch_end();
                for i in self.iter..end {
                    let slot = (i % self.window()) * self.msg();
                    v.write(MEM_BASE + slot, &self.body(i))?;
                    let op = self.opcode_of(i);
                    let mut wr = WorkRequest::rdma(
                        i,
                        op,
                        self.res.sge(MEM_BASE + slot, self.msg()),
                        remote.buf_addr + slot,
                        remote.vrkey,
                        i + 1 == end,
                    );
                    if op == Opcode::RdmaWriteWithImm {
                        wr.imm = Some(i as u32);
                    }
                    v.plugin.post_send(v.engine, self.qp, &wr)?;
                }
                self.posted = true;
                acted = true;
            } else if self.batch_done {
                let end = self.batch_end();
                let last = end - 1;
                let e = TranscriptEntry {
                    index: self.transcript.len() as u64,
                    wr_id: last,
                    opcode: self.opcode_of(last),
                    byte_len: self.spec.msg_size,
                    payload_hash: payload_hash(&self.body(last)),
                };
                self.transcript.entries.push(e);
                self.stats.bytes_sent += (end - self.iter) * self.msg();
                self.iter = end;
                self.posted = false;
                self.batch_done = false;
                acted = true;
            }
        } else if !self.read_posted {
            let local = MEM_BASE + self.window() * self.msg();
            let wr = WorkRequest::rdma(
                READ_WR_ID,
                Opcode::RdmaRead,
                self.res.sge(local, self.span()),
                remote.buf_addr,
                remote.vrkey,
                true,
            );
            v.plugin.post_send(v.engine, self.qp, &wr)?;
            self.read_posted = true;
            acted = true;
        } else if self.read_done && !self.finished {
            let bytes = v.read(MEM_BASE + self.window() * self.msg(), self.span())?;
            self.transcript
                .record(READ_WR_ID, Opcode::RdmaRead, self.span() as u32, &bytes);
            self.finished = true;
            acted = true;
        }
        Ok(acted)
    }

    fn target_step(&mut self, v: &mut Verbs) -> Result<bool, WorkloadError> {
        let evs = v.poll(self.cq)?;
        for e in &evs {
            if e.opcode != Opcode::RecvRdmaWithImm {
                return Err(WorkloadError::Protocol {
                    node: self.node,
                    what: format!("unexpected {:?} completion", e.opcode),
                });
            }
            let last = e.imm.map(u64::from) == Some(self.spec.iterations - 1);
            // the window is only stable once the final write has landed
            let bytes = if last {
                v.read(MEM_BASE, self.span())?
            } else {
                e.imm.unwrap_or_default().to_le_bytes().to_vec()
            };
            self.transcript
                .record(e.wr_id, e.opcode, e.byte_len, &bytes);
            self.stats.receiver_completions += 1;
            self.iter += 1;
            self.post_recv(v)?;
            self.finished |= last;
        }
        Ok(!evs.is_empty())
    }
}

impl Application for RdmaStream {
    state_io!();

    fn setup(&mut self, v: &mut Verbs) -> Result<Vec<Endpoint>, WorkloadError> {
        self.res = Basic::open(v, 2 * self.window() * self.msg() + 64)?;
        self.cq = v.plugin.create_cq(v.engine, self.res.ctx, CQ_CAPACITY)?.virtual_id;
        let qp = v.plugin.create_qp(v.engine, self.res.pd, self.cq, self.cq, None)?;
        self.qp = qp.virtual_id;
        Ok(vec![Endpoint {
            owner: self.node,
            peer: self.peer,
            vlid: self.res.vlid,
            vqp_num: qp.qp_num().expect("qp num"),
            vrkey: self.res.rkey,
            buf_addr: MEM_BASE,
        }])
    }

    fn connect(&mut self, v: &mut Verbs, all: &[Endpoint]) -> Result<(), WorkloadError> {
        let ep = find_endpoint(all, self.peer, self.node)?;
        v.connect(self.qp, &ep)?;
        self.remote = Some(ep);
        if !self.writer() {
            for _ in 0..2 {
                self.post_recv(v)?;
            }
        }
        Ok(())
    }

    fn step(&mut self, v: &mut Verbs) -> Result<bool, WorkloadError> {
        let mut any = false;
        loop {
            let acted = if self.writer() {
                self.writer_step(v)?
            } else {
                self.target_step(v)?
            };
            if !acted {
                return Ok(any);
            }
            any = true;
        }
    }

    fn done(&self) -> bool {
        self.finished
    }

    fn iteration(&self) -> u64 {
        self.iter
    }
}

// ---- RING_EXCHANGE -------------------------------------------------------

fn ring_window(nodes: u32) -> u64 {
    nodes as u64 + 2
}

/// Node i sends a third of its tokens to node i+1 each round and receives
/// from node i-1 through a shared receive queue.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RingExchange {
    spec: WorkloadSpec,
    node: u32,
    nodes: u32,
    res: Basic,
    send_cq: u64,
    recv_cq: u64,
    srq: u64,
    qp_right: u64,
    qp_left: u64,
    tokens: u64,
    history: Vec<u64>,
    round: u64,
    posted: bool,
    send_done: bool,
    pending_amount: u64,
    sent_hash: u64,
    inbox: VecDeque<Inbound>,
    recvs_posted: u64,
    transcript: Transcript,
    stats: AppStats,
}

impl RingExchange {
    pub fn new(spec: WorkloadSpec, node: u32, nodes: u32) -> Self {
        Self {
            spec,
            node,
            nodes,
            res: Basic::default(),
            send_cq: 0,
            recv_cq: 0,
            srq: 0,
            qp_right: 0,
            qp_left: 0,
            tokens: Self::initial_tokens(node),
            history: Vec::new(),
            round: 0,
            posted: false,
            send_done: false,
            pending_amount: 0,
            sent_hash: 0,
            inbox: VecDeque::new(),
            recvs_posted: 0,
            transcript: Transcript::default(),
            stats: AppStats::default(),
        }
    }

    pub fn initial_tokens(node: u32) -> u64 {
        1000 * (node as u64 + 1)
    }

    fn msg(&self) -> u64 {
        self.spec.msg_size as u64
    }

    fn right(&self) -> u32 {
        (self.node + 1) % self.nodes
    }

    fn left(&self) -> u32 {
        (self.node + self.nodes - 1) % self.nodes
    }

    fn slot_addr(&self, wr_id: u64) -> u64 {
        MEM_BASE + self.msg() * (1 + (wr_id - RECV_WR_BASE) % ring_window(self.nodes))
    }

    fn post_recv(&mut self, v: &mut Verbs) -> Result<(), WorkloadError> {
        let wr_id = RECV_WR_BASE + self.recvs_posted;
        let wr = WorkRequest::recv(wr_id, self.res.sge(self.slot_addr(wr_id), self.msg()));
        v.plugin.post_srq_recv(v.engine, self.srq, &wr)?;
        self.recvs_posted += 1;
        Ok(())
    }

    fn pump(&mut self, v: &mut Verbs) -> Result<bool, WorkloadError> {
        let mut n = 0;
        for e in v.poll(self.send_cq)? {
            n += 1;
            self.send_done = true;
            self.stats.sender_completions += 1;
            self.stats.bytes_sent += e.byte_len as u64;
        }
        for e in v.poll(self.recv_cq)? {
            n += 1;
            let bytes = v.read(self.slot_addr(e.wr_id), e.byte_len as u64)?;
            self.inbox.push_back(Inbound {
                wr_id: e.wr_id,
                byte_len: e.byte_len,
                bytes,
            });
            self.stats.receiver_completions += 1;
            self.post_recv(v)?;
        }
        Ok(n > 0)
    }

    fn act(&mut self, v: &mut Verbs) -> Result<bool, WorkloadError> {
        if self.round >= self.spec.iterations {
            return Ok(false);
        }
        if !self.posted {
            let amount = self.tokens / 3;
            let mut body = payload(
                self.spec.seed,
                &[self.node as u64, self.round],
                self.msg() as usize,
            );
            body[..8].copy_from_slice(&amount.to_le_bytes());
            v.write(MEM_BASE, &body)?;
            let wr = WorkRequest::send(self.round, self.res.sge(MEM_BASE, self.msg()), true);
            v.plugin.post_send(v.engine, self.qp_right, &wr)?;
            self.pending_amount = amount;
            self.sent_hash = payload_hash(&body);
            self.posted = true;
            return Ok(true);
        }
        if self.send_done && !self.inbox.is_empty() {
            let m = self.inbox.pop_front().expect("non-empty");
            let got = u64::from_le_bytes(m.bytes[..8].try_into().expect("msg_size >= 8"));
            self.tokens = self.tokens - self.pending_amount + got;
            self.history.push(self.tokens);
            let e = TranscriptEntry {
                index: self.transcript.len() as u64,
                wr_id: self.round,
                opcode: Opcode::Send,
                byte_len: self.spec.msg_size,
                payload_hash: self.sent_hash,
            };
            self.transcript.entries.push(e);
            self.transcript.record(m.wr_id, Opcode::Recv, m.byte_len, &m.bytes);
            self.round += 1;
            self.posted = false;
            self.send_done = false;
            return Ok(true);
        }
        Ok(false)
    }
}

impl Application for RingExchange {
    state_io!();

    fn setup(&mut self, v: &mut Verbs) -> Result<Vec<Endpoint>, WorkloadError> {
        let w = ring_window(self.nodes);
        self.res = Basic::open(v, (1 + w) * self.msg())?;
        self.send_cq = v.plugin.create_cq(v.engine, self.res.ctx, CQ_CAPACITY)?.virtual_id;
        self.recv_cq = v.plugin.create_cq(v.engine, self.res.ctx, CQ_CAPACITY)?.virtual_id;
        self.srq = v.plugin.create_srq(v.engine, self.res.pd, w as u32)?.virtual_id;
        let r = v
            .plugin
            .create_qp(v.engine, self.res.pd, self.send_cq, self.recv_cq, Some(self.srq))?;
        let l = v
            .plugin
            .create_qp(v.engine, self.res.pd, self.send_cq, self.recv_cq, Some(self.srq))?;
        self.qp_right = r.virtual_id;
        self.qp_left = l.virtual_id;
        let ep = |peer, vqp_num| Endpoint {
            owner: self.node,
            peer,
            vlid: self.res.vlid,
            vqp_num,
            vrkey: self.res.rkey,
            buf_addr: MEM_BASE,
        };
        Ok(vec![
            ep(self.right(), r.qp_num().expect("qp num")),
            ep(self.left(), l.qp_num().expect("qp num")),
        ])
    }

    fn connect(&mut self, v: &mut Verbs, all: &[Endpoint]) -> Result<(), WorkloadError> {
        let right = find_endpoint(all, self.right(), self.node)?;
        let left = find_endpoint(all, self.left(), self.node)?;
        v.connect(self.qp_right, &right)?;
        v.connect(self.qp_left, &left)?;
        for _ in 0..ring_window(self.nodes) {
            self.post_recv(v)?;
        }
        Ok(())
    }

    fn step(&mut self, v: &mut Verbs) -> Result<bool, WorkloadError> {
        let mut any = false;
        loop {
            let polled = self.pump(v)?;
            let acted = self.act(v)?;
            if !polled && !acted {
                return Ok(any);
            }
            any = true;
        }
    }

    fn done(&self) -> bool {
        self.round >= self.spec.iterations
    }

    fn iteration(&self) -> u64 {
        self.round
    }

    fn tokens(&self) -> Option<&[u64]> {
        Some(&self.history)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_spec() {
        let s = WorkloadSpec::parse(
            "workload=rdma_stream\niterations=10 # ten\nmsg_size=64\nsignaled_every=2\nimm_every=4\nseed=9\n",
        )
        .unwrap();
        assert_eq!(s.kind, WorkloadKind::RdmaStream);
        assert_eq!((s.iterations, s.msg_size, s.signaled_every, s.imm_every, s.seed), (10, 64, 2, Some(4), 9));
    }

    #[test]
    fn parse_rejects() {
        assert!(matches!(
            WorkloadSpec::parse("workload=x\niterations=1\nmsg_size=1"),
            Err(SpecError::UnknownWorkload(_))
        ));
        assert!(matches!(
            WorkloadSpec::parse("workload=ping_pong\nmsg_size=1"),
            Err(SpecError::Missing("iterations"))
        ));
        assert!(matches!(
            WorkloadSpec::parse("workload=rdma_stream\niterations=4\nmsg_size=8\nsignaled_every=3\nimm_every=4"),
            Err(SpecError::Invalid(_))
        ));
        assert!(matches!(
            WorkloadSpec::parse("workload=ping_pong\niterations=1\nmsg_size=1\ncolour=red"),
            Err(SpecError::UnknownKey(_))
        ));
        let ring = WorkloadSpec::new(WorkloadKind::RingExchange, 3, 8);
        assert!(ring.validate(2).is_err());
        assert!(ring.validate(3).is_ok());
        assert!(WorkloadSpec::new(WorkloadKind::PingPong, 3, 8).validate(3).is_err());
    }

    #[test]
    fn payload_is_deterministic() {
        assert_eq!(payload(1, &[2, 3], 100), payload(1, &[2, 3], 100));
        assert_ne!(payload(1, &[2, 3], 100), payload(1, &[2, 4], 100));
    }

    #[test]
    fn transcript_digest_tracks_content() {
        let mut a = Transcript::default();
        a.record(1, Opcode::Send, 4, b"abcd");
        let mut b = a.clone();
        assert!(verify(&a, &b));
        b.entries[0].payload_hash ^= 1;
        assert!(!verify(&a, &b));
    }
}
