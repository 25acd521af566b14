// SPDX-License-Identifier: Apache-2.0

//! Checkpoint-restart interposition layer.
//!
//! A [`NodePlugin`] sits between one node's application and the verbs
//! engine. The application only ever sees virtual ids: every handle, qp_num,
//! lid and memory key it receives comes from a [`ShadowDescriptor`], and every
//! id it passes in is translated on the way down. The plugin also logs what
//! it needs to rebuild the node on a fresh engine: resource creations and
//! modifications, outstanding work requests, and completions drained at
//! checkpoint time.

use std::cell::Cell;
use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coordinator::{
    CoordError, CoordinatorSession, NS_LID, NS_QP_PD, NS_QP_REAL, NS_VRKEY_PD_RKEY,
};
use crate::engine::{
    AccessFlags, CompletionEvent, CqId, CtxId, DispatchSlots, Engine, EngineSnapshot, MrId,
    Opcode, PdId, QpId, QpState, QpTransition, ResourceHandle, SrqId, VerbsError, WorkRequest,
};
use crate::fabric::NodeAddr;

/// Serializes a map as a sequence of pairs so non-string keys survive JSON.
pub(crate) mod pairs {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<K: Serialize, V: Serialize, S: Serializer>(
        m: &BTreeMap<K, V>,
        s: S,
    ) -> Result<S::Ok, S::Error> {
        s.collect_seq(m.iter())
    }

    pub fn deserialize<'de, K, V, D>(d: D) -> Result<BTreeMap<K, V>, D::Error>
    where
        K: Deserialize<'de> + Ord,
        V: Deserialize<'de>,
        D: Deserializer<'de>,
    {
        Ok(Vec::<(K, V)>::deserialize(d)?.into_iter().collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Kind {
    Ctx,
    Pd,
    Mr,
    Cq,
    Qp,
    Srq,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum IdPolicy {
    /// Virtual ids equal the real ids handed out at first creation.
    #[default]
    RealEqualsVirtual,
    /// Virtual ids carry the node number and never come from the engine.
    GloballyUnique,
}

impl FromStr for IdPolicy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "real_equals_virtual" | "real_equals_virtual_at_create" => Ok(Self::RealEqualsVirtual),
            "globally_unique" | "globally_unique_virtual" => Ok(Self::GloballyUnique),
            other => Err(format!("unknown id policy {other:?}")),
        }
    }
}

impl fmt::Display for IdPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::RealEqualsVirtual => "real_equals_virtual",
            Self::GloballyUnique => "globally_unique",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PluginConfig {
    pub id_policy: IdPolicy,
    pub drain_interval_ticks: u64,
    pub drain_max_rounds: u32,
    pub capture_inline_payloads: bool,
    /// Keep draining while a receiver has seen more messages than its
    /// sender has retired.
    pub await_balance: bool,
}

impl Default for PluginConfig {
    fn default() -> Self {
        Self {
            id_policy: IdPolicy::RealEqualsVirtual,
            drain_interval_ticks: 100,
            drain_max_rounds: 16,
            capture_inline_payloads: true,
            await_balance: true,
        }
    }
}

/// Application-facing fields of a resource. All ids are virtual.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum VisibleRecord {
    Ctx {
        lid: u16,
    },
    Pd {
        ctx: u64,
        global_pd_uid: u64,
    },
    Mr {
        pd: u64,
        base_addr: u64,
        length: u64,
        lkey: u32,
        rkey: u32,
        access: AccessFlags,
    },
    Cq {
        ctx: u64,
        capacity: usize,
    },
    Qp {
        pd: u64,
        send_cq: u64,
        recv_cq: u64,
        srq: Option<u64>,
        qp_num: u32,
        state: QpState,
        remote: Option<(u16, u32)>,
    },
    Srq {
        pd: u64,
        limit: u32,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShadowDescriptor {
    pub kind: Kind,
    pub virtual_id: u64,
    pub visible: VisibleRecord,
    /// Real handle currently behind the descriptor. Introspection only.
    pub real_ref: u64,
}

impl ShadowDescriptor {
    pub fn lid(&self) -> Option<u16> {
        match self.visible {
            VisibleRecord::Ctx { lid } => Some(lid),
            _ => None,
        }
    }

    pub fn qp_num(&self) -> Option<u32> {
        match self.visible {
            VisibleRecord::Qp { qp_num, .. } => Some(qp_num),
            _ => None,
        }
    }

    pub fn lkey(&self) -> Option<u32> {
        match self.visible {
            VisibleRecord::Mr { lkey, .. } => Some(lkey),
            _ => None,
        }
    }

    pub fn rkey(&self) -> Option<u32> {
        match self.visible {
            VisibleRecord::Mr { rkey, .. } => Some(rkey),
            _ => None,
        }
    }

    pub fn pd_uid(&self) -> Option<u64> {
        match self.visible {
            VisibleRecord::Pd { global_pd_uid, .. } => Some(global_pd_uid),
            _ => None,
        }
    }
}

/// A map that must stay one-to-one.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(
    from = "Vec<(T, T)>",
    into = "Vec<(T, T)>",
    bound(
        serialize = "T: Serialize + Ord + Copy",
        deserialize = "T: Deserialize<'de> + Ord + Copy"
    )
)]
pub struct BiMap<T: Ord + Copy> {
    fwd: BTreeMap<T, T>,
    rev: BTreeMap<T, T>,
}

impl<T: Ord + Copy> Default for BiMap<T> {
    fn default() -> Self {
        Self {
            fwd: BTreeMap::new(),
            rev: BTreeMap::new(),
        }
    }
}

impl<T: Ord + Copy> From<Vec<(T, T)>> for BiMap<T> {
    fn from(v: Vec<(T, T)>) -> Self {
        let mut m = Self::default();
        for (a, b) in v {
            m.fwd.insert(a, b);
            m.rev.insert(b, a);
        }
        m
    }
}

impl<T: Ord + Copy> From<BiMap<T>> for Vec<(T, T)> {
    fn from(m: BiMap<T>) -> Self {
        m.fwd.into_iter().collect()
    }
}

impl<T: Ord + Copy> BiMap<T> {
    /// Inserts `v <-> r`; false if either side is bound to something else.
    pub fn insert(&mut self, v: T, r: T) -> bool {
        match (self.fwd.get(&v), self.rev.get(&r)) {
            (Some(x), _) if *x != r => false,
            (_, Some(x)) if *x != v => false,
            _ => {
                self.fwd.insert(v, r);
                self.rev.insert(r, v);
                true
            }
        }
    }

    pub fn real(&self, v: T) -> Option<T> {
        self.fwd.get(&v).copied()
    }

    pub fn virt(&self, r: T) -> Option<T> {
        self.rev.get(&r).copied()
    }

    pub fn has_virtual(&self, v: T) -> bool {
        self.fwd.contains_key(&v)
    }

    pub fn remove_virtual(&mut self, v: T) {
        if let Some(r) = self.fwd.remove(&v) {
            self.rev.remove(&r);
        }
    }

    pub fn len(&self) -> usize {
        self.fwd.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fwd.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (T, T)> + '_ {
        self.fwd.iter().map(|(a, b)| (*a, *b))
    }

    pub fn is_bijective(&self) -> bool {
        self.fwd.len() == self.rev.len() && self.fwd.iter().all(|(v, r)| self.rev.get(r) == Some(v))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranslationTable {
    pub handles: BiMap<u64>,
    pub qp_nums: BiMap<u32>,
    pub lkeys: BiMap<u32>,
    /// Per virtual pd handle; rkeys are only unique inside a pd.
    #[serde(with = "pairs")]
    pub rkeys: BTreeMap<u64, BiMap<u32>>,
    pub lids: BiMap<u16>,
    pub pd_uids: BiMap<u64>,
}

impl TranslationTable {
    pub fn is_bijective(&self) -> bool {
        self.handles.is_bijective()
            && self.qp_nums.is_bijective()
            && self.lkeys.is_bijective()
            && self.rkeys.values().all(BiMap::is_bijective)
            && self.lids.is_bijective()
            && self.pd_uids.is_bijective()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CreateParams {
    Ctx,
    Pd {
        ctx: u64,
    },
    Mr {
        pd: u64,
        base_addr: u64,
        length: u64,
        access: AccessFlags,
    },
    Cq {
        ctx: u64,
        capacity: usize,
    },
    Qp {
        pd: u64,
        send_cq: u64,
        recv_cq: u64,
        srq: Option<u64>,
    },
    Srq {
        pd: u64,
        limit: u32,
    },
}

impl CreateParams {
    pub fn kind(&self) -> Kind {
        match self {
            Self::Ctx => Kind::Ctx,
            Self::Pd { .. } => Kind::Pd,
            Self::Mr { .. } => Kind::Mr,
            Self::Cq { .. } => Kind::Cq,
            Self::Qp { .. } => Kind::Qp,
            Self::Srq { .. } => Kind::Srq,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CreationRecord {
    pub params: CreateParams,
    pub virtual_id: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModifyRecord {
    /// Remote ids inside the transition are virtual.
    Qp { vqp: u64, transition: QpTransition },
    Srq { vsrq: u64, limit: u32 },
}

impl ModifyRecord {
    fn target(&self) -> u64 {
        match self {
            Self::Qp { vqp, .. } => *vqp,
            Self::Srq { vsrq, .. } => *vsrq,
        }
    }
}

/// Creations and modifications of live resources, in call order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceLog {
    pub creations: Vec<CreationRecord>,
    pub modifies: Vec<ModifyRecord>,
}

impl ResourceLog {
    pub fn len(&self) -> usize {
        self.creations.len() + self.modifies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn forget(&mut self, vid: u64) {
        self.creations.retain(|c| c.virtual_id != vid);
        self.modifies.retain(|m| m.target() != vid);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum WqeQueue {
    Send(u64),
    Recv(u64),
    Srq(u64),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WqeEntry {
    pub index: u64,
    /// As posted by the application, with virtual keys.
    pub wr: WorkRequest,
}

/// Posted work requests whose completions the application has not yet
/// received, per virtual queue, in post order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WqeLog {
    #[serde(with = "pairs")]
    pub queues: BTreeMap<WqeQueue, VecDeque<WqeEntry>>,
    pub next_index: u64,
}

impl WqeLog {
    pub fn push(&mut self, q: WqeQueue, wr: WorkRequest) -> u64 {
        let index = self.next_index;
        self.next_index += 1;
        self.queues
            .entry(q)
            .or_default()
            .push_back(WqeEntry { index, wr });
        index
    }

    pub fn remove_first(&mut self, q: WqeQueue, wr_id: u64) -> Option<WqeEntry> {
        let list = self.queues.get_mut(&q)?;
        let pos = list.iter().position(|e| e.wr.wr_id == wr_id)?;
        list.remove(pos)
    }

    /// Drops unsignaled entries posted before `index`; a later signaled
    /// completion on the same queue proves they finished.
    pub fn prune_unsignaled_before(&mut self, q: WqeQueue, index: u64) -> Vec<WqeEntry> {
        let Some(list) = self.queues.get_mut(&q) else {
            return Vec::new();
        };
        let (gone, keep): (VecDeque<_>, VecDeque<_>) = list
            .drain(..)
            .partition(|e| e.index < index && !e.wr.signaled);
        *list = keep;
        gone.into()
    }

    pub fn entries(&self, q: WqeQueue) -> impl Iterator<Item = &WqeEntry> {
        self.queues.get(&q).into_iter().flatten()
    }

    pub fn len(&self) -> usize {
        self.queues.values().map(VecDeque::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Completions drained at checkpoint time, served before real polling.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VirtualCompletionQueue {
    #[serde(with = "pairs")]
    pub queues: BTreeMap<u64, VecDeque<CompletionEvent>>,
}

impl VirtualCompletionQueue {
    pub fn len(&self) -> usize {
        self.queues.values().map(VecDeque::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pending(&self, vcq: u64) -> usize {
        self.queues.get(&vcq).map_or(0, VecDeque::len)
    }
}

/// Remote id information learned through the coordinator.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RkeyDirectory {
    /// (vlid, vqp_num) -> global pd uid
    #[serde(with = "pairs")]
    pub qp_pd: BTreeMap<(u16, u32), u64>,
    /// (vrkey, global pd uid) -> rkey
    #[serde(with = "pairs")]
    pub vrkey_pd_rkey: BTreeMap<(u32, u64), u32>,
    /// vlid -> lid
    #[serde(with = "pairs")]
    pub lid: BTreeMap<u16, u16>,
    /// (vlid, vqp_num) -> qp_num
    #[serde(with = "pairs")]
    pub qp_real: BTreeMap<(u16, u32), u32>,
}

impl RkeyDirectory {
    pub fn is_empty(&self) -> bool {
        self.qp_pd.is_empty() && self.vrkey_pd_rkey.is_empty() && self.lid.is_empty() && self.qp_real.is_empty()
    }
}

/// Messages seen by a queue pair in each direction; used to tell whether a
/// sender still owes a completion for something its peer already received.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Balance {
    pub received: u64,
    pub retired: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UniqueCounters {
    pub handle: u64,
    pub qp_num: u32,
    pub lkey: u32,
    pub rkey: u32,
    pub pd: u64,
}

/// Counts calls that went through the plugin's dispatch layer.
#[derive(Debug, Default)]
pub struct PluginTap {
    pub posts: Cell<u64>,
    pub polls: Cell<u64>,
}

#[derive(Debug, Error)]
pub enum PluginError {
    #[error("{op} on virtual {vid:#x}: {source}")]
    Engine {
        op: &'static str,
        vid: u64,
        #[source]
        source: VerbsError,
    },
    #[error("stale virtual handle {0:#x}")]
    StaleHandle(u64),
    #[error("virtual handle {vid:#x} is not a {expected:?}")]
    WrongKind { vid: u64, expected: Kind },
    #[error("no real id for remote vlid {vlid:#x} vqp {vqp_num:#x}")]
    UnknownRemoteVirtualId { vlid: u16, vqp_num: u32 },
    #[error("no rkey for vrkey {vrkey:#x} in pd {pd_uid:#x}")]
    UnknownVrkey { vrkey: u32, pd_uid: u64 },
    #[error("unknown virtual lkey {0:#x}")]
    UnknownVirtualKey(u32),
    #[error("virtual queue pair {0:#x} is not connected")]
    NotConnected(u64),
    #[error("new {kind:?} would reuse virtual id {vid:#x}")]
    VirtualIdConflict { kind: Kind, vid: u64 },
    #[error("restart directory incomplete: {0}")]
    RestartDirectoryIncomplete(String),
    #[error(transparent)]
    Coordinator(#[from] CoordError),
}

type PResult<T> = Result<T, PluginError>;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DrainReport {
    pub node_id: u32,
    pub rounds: u32,
    pub events_drained: u64,
    /// WQE log entries left after the drain.
    pub wqes_outstanding: usize,
    /// Frames to or from this node still on the fabric; their WQEs stay
    /// logged.
    pub in_flight_frames: usize,
    /// Completions peers have seen but this node's senders have not retired.
    pub owed_completions: u64,
    pub complete: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RestartReport {
    pub resources: usize,
    pub modifies: usize,
    pub reposted_recvs: usize,
    pub reposted_sends: usize,
}

/// Sections of plugin state that go into a checkpoint image.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceSection {
    pub node_id: u32,
    pub addr: NodeAddr,
    pub config: PluginConfig,
    #[serde(with = "pairs")]
    pub shadows: BTreeMap<u64, ShadowDescriptor>,
    pub log: ResourceLog,
    pub unique: UniqueCounters,
    #[serde(with = "pairs")]
    pub balances: BTreeMap<u64, Balance>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranslationSection {
    pub tables: TranslationTable,
    pub directory: RkeyDirectory,
}

pub struct NodePlugin {
    node_id: u32,
    addr: NodeAddr,
    config: PluginConfig,
    restarted: bool,
    shadows: BTreeMap<u64, ShadowDescriptor>,
    tables: TranslationTable,
    log: ResourceLog,
    wqes: WqeLog,
    vcq: VirtualCompletionQueue,
    directory: RkeyDirectory,
    unique: UniqueCounters,
    balances: BTreeMap<u64, Balance>,
    tap: Rc<PluginTap>,
}

impl fmt::Debug for NodePlugin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NodePlugin")
            .field("node_id", &self.node_id)
            .field("addr", &self.addr)
            .field("resources", &self.shadows.len())
            .field("wqes", &self.wqes.len())
            .finish()
    }
}

fn engine_err(op: &'static str, vid: u64) -> impl FnOnce(VerbsError) -> PluginError {
    move |source| PluginError::Engine { op, vid, source }
}

fn qp_key(vlid: u16, vqp: u32) -> Vec<u8> {
    let mut k = vlid.to_be_bytes().to_vec();
    k.extend_from_slice(&vqp.to_be_bytes());
    k
}

fn parse_qp_key(k: &[u8]) -> Option<(u16, u32)> {
    (k.len() == 6).then(|| {
        (
            u16::from_be_bytes([k[0], k[1]]),
            u32::from_be_bytes([k[2], k[3], k[4], k[5]]),
        )
    })
}

fn be_u16(v: &[u8]) -> Option<u16> {
    Some(u16::from_be_bytes(v.try_into().ok()?))
}

fn be_u32(v: &[u8]) -> Option<u32> {
    Some(u32::from_be_bytes(v.try_into().ok()?))
}

fn be_u64(v: &[u8]) -> Option<u64> {
    Some(u64::from_be_bytes(v.try_into().ok()?))
}

impl NodePlugin {
    /// `node_id` is the logical node number; `addr` the fabric address the
    /// node currently runs on.
    pub fn new(node_id: u32, addr: NodeAddr, config: PluginConfig) -> Self {
        Self {
            node_id,
            addr,
            config,
            restarted: false,
            shadows: BTreeMap::new(),
            tables: TranslationTable::default(),
            log: ResourceLog::default(),
            wqes: WqeLog::default(),
            vcq: VirtualCompletionQueue::default(),
            directory: RkeyDirectory::default(),
            unique: UniqueCounters::default(),
            balances: BTreeMap::new(),
            tap: Rc::new(PluginTap::default()),
        }
    }

    pub fn node_id(&self) -> u32 {
        self.node_id
    }

    pub fn addr(&self) -> NodeAddr {
        self.addr
    }

    pub fn config(&self) -> &PluginConfig {
        &self.config
    }

    pub fn shadows(&self) -> impl Iterator<Item = &ShadowDescriptor> {
        self.shadows.values()
    }

    pub fn shadow(&self, vid: u64) -> PResult<&ShadowDescriptor> {
        self.shadows.get(&vid).ok_or(PluginError::StaleHandle(vid))
    }

    pub fn tables(&self) -> &TranslationTable {
        &self.tables
    }

    pub fn log(&self) -> &ResourceLog {
        &self.log
    }

    pub fn wqe_log(&self) -> &WqeLog {
        &self.wqes
    }

    pub fn drained(&self) -> &VirtualCompletionQueue {
        &self.vcq
    }

    pub fn directory(&self) -> &RkeyDirectory {
        &self.directory
    }

    pub fn tap(&self) -> &PluginTap {
        &self.tap
    }

    pub fn balances(&self) -> &BTreeMap<u64, Balance> {
        &self.balances
    }

    // ---- id assignment --------------------------------------------------

    fn unique_handle(&mut self) -> u64 {
        self.unique.handle += 1;
        (1 << 63) | ((self.node_id as u64) << 32) | self.unique.handle
    }

    fn unique_key(node: u32, counter: &mut u32) -> u32 {
        *counter += 1;
        ((node & 0xFF) << 24) | (*counter & 0x00FF_FFFF)
    }

    fn unique_lid(&self) -> u16 {
        0xC000 | (self.node_id as u16 & 0x3FFF)
    }

    fn gu(&self) -> bool {
        self.config.id_policy == IdPolicy::GloballyUnique
    }

    fn choose_handle(&mut self, kind: Kind, real: u64) -> PResult<u64> {
        let vid = if self.gu() { self.unique_handle() } else { real };
        if self.shadows.contains_key(&vid) || self.tables.handles.has_virtual(vid) {
            return Err(PluginError::VirtualIdConflict { kind, vid });
        }
        Ok(vid)
    }

    fn bind<T: Ord + Copy>(map: &mut BiMap<T>, kind: Kind, v: T, r: T, wide: impl Fn(T) -> u64) -> PResult<()> {
        if map.insert(v, r) {
            Ok(())
        } else {
            Err(PluginError::VirtualIdConflict { kind, vid: wide(v) })
        }
    }

    fn real(&self, vid: u64, expected: Kind) -> PResult<u64> {
        let s = self.shadow(vid)?;
        if s.kind != expected {
            return Err(PluginError::WrongKind { vid, expected });
        }
        self.tables
            .handles
            .real(vid)
            .ok_or(PluginError::StaleHandle(vid))
    }

    fn install_layer(&self, engine: &mut Engine, ctx: CtxId) -> PResult<()> {
        let tap = self.tap.clone();
        engine
            .dispatch_mut(ctx)
            .and_then(|t| {
                t.install("cr-plugin", move |inner| {
                    let mut s = DispatchSlots::identity(inner);
                    let (send, recv, srq, poll) = (
                        s.post_send.clone(),
                        s.post_recv.clone(),
                        s.post_srq_recv.clone(),
                        s.poll_cq.clone(),
                    );
                    let t1 = tap.clone();
                    s.post_send = Rc::new(move |e, qp, wr| {
                        t1.posts.set(t1.posts.get() + 1);
                        send(e, qp, wr)
                    });
                    let t2 = tap.clone();
                    s.post_recv = Rc::new(move |e, qp, wr| {
                        t2.posts.set(t2.posts.get() + 1);
                        recv(e, qp, wr)
                    });
                    let t3 = tap.clone();
                    s.post_srq_recv = Rc::new(move |e, q, wr| {
                        t3.posts.set(t3.posts.get() + 1);
                        srq(e, q, wr)
                    });
                    let t4 = tap;
                    s.poll_cq = Rc::new(move |e, cq, max| {
                        t4.polls.set(t4.polls.get() + 1);
                        poll(e, cq, max)
                    });
                    s
                })
            })
            .map_err(engine_err("install", ctx.0))
    }

    // ---- creation -------------------------------------------------------

    fn record(&mut self, params: CreateParams, shadow: ShadowDescriptor) -> ShadowDescriptor {
        self.log.creations.push(CreationRecord {
            params,
            virtual_id: shadow.virtual_id,
        });
        self.shadows.insert(shadow.virtual_id, shadow.clone());
        shadow
    }

    /// Creates the real resource for `params` and binds it to `vid`, or to
    /// a freshly chosen virtual id when `vid` is `None`.
    fn materialize(
        &mut self,
        engine: &mut Engine,
        params: &CreateParams,
        vid: Option<u64>,
    ) -> PResult<ShadowDescriptor> {
        let prior = vid.and_then(|v| self.shadows.get(&v).cloned());
        let kind = params.kind();
        let (real, visible) = match params {
            CreateParams::Ctx => {
                let c = engine
                    .open_device(self.addr)
                    .map_err(engine_err("open_device", vid.unwrap_or(0)))?;
                self.install_layer(engine, c.ctx_id)?;
                let vlid = match &prior {
                    Some(p) => p.lid().expect("ctx shadow"),
                    None if self.gu() => self.unique_lid(),
                    None => c.lid,
                };
                Self::bind(&mut self.tables.lids, Kind::Ctx, vlid, c.lid, u64::from)?;
                (c.ctx_id.0, VisibleRecord::Ctx { lid: vlid })
            }
            CreateParams::Pd { ctx } => {
                let rctx = self.real(*ctx, Kind::Ctx)?;
                let pd = engine
                    .alloc_pd(CtxId(rctx))
                    .map_err(engine_err("alloc_pd", *ctx))?;
                let vuid = match &prior {
                    Some(p) => p.pd_uid().expect("pd shadow"),
                    None if self.gu() => {
                        self.unique.pd += 1;
                        ((self.node_id as u64) << 32) | self.unique.pd
                    }
                    None => pd.global_pd_uid,
                };
                Self::bind(&mut self.tables.pd_uids, Kind::Pd, vuid, pd.global_pd_uid, |x| x)?;
                (
                    pd.pd_id.0,
                    VisibleRecord::Pd {
                        ctx: *ctx,
                        global_pd_uid: vuid,
                    },
                )
            }
            CreateParams::Mr {
                pd,
                base_addr,
                length,
                access,
            } => {
                let rpd = self.real(*pd, Kind::Pd)?;
                let mr = engine
                    .reg_mr(PdId(rpd), *base_addr, *length, *access)
                    .map_err(engine_err("reg_mr", *pd))?;
                let (vl, vr) = match &prior {
                    Some(p) => (p.lkey().expect("mr"), p.rkey().expect("mr")),
                    None if self.gu() => {
                        let node = self.node_id;
                        (
                            Self::unique_key(node, &mut self.unique.lkey),
                            Self::unique_key(node, &mut self.unique.rkey),
                        )
                    }
                    None => (mr.lkey, mr.rkey),
                };
                Self::bind(&mut self.tables.lkeys, Kind::Mr, vl, mr.lkey, u64::from)?;
                let rk = self.tables.rkeys.entry(*pd).or_default();
                Self::bind(rk, Kind::Mr, vr, mr.rkey, u64::from)?;
                (
                    mr.mr_id.0,
                    VisibleRecord::Mr {
                        pd: *pd,
                        base_addr: *base_addr,
                        length: *length,
                        lkey: vl,
                        rkey: vr,
                        access: *access,
                    },
                )
            }
            CreateParams::Cq { ctx, capacity } => {
                let rctx = self.real(*ctx, Kind::Ctx)?;
                let cq = engine
                    .create_cq(CtxId(rctx), *capacity)
                    .map_err(engine_err("create_cq", *ctx))?;
                (
                    cq.0,
                    VisibleRecord::Cq {
                        ctx: *ctx,
                        capacity: *capacity,
                    },
                )
            }
            CreateParams::Srq { pd, limit } => {
                let rpd = self.real(*pd, Kind::Pd)?;
                let srq = engine
                    .create_srq(PdId(rpd), *limit)
                    .map_err(engine_err("create_srq", *pd))?;
                (srq.0, VisibleRecord::Srq { pd: *pd, limit: *limit })
            }
            CreateParams::Qp {
                pd,
                send_cq,
                recv_cq,
                srq,
            } => {
                let rpd = self.real(*pd, Kind::Pd)?;
                let scq = self.real(*send_cq, Kind::Cq)?;
                let rcq = self.real(*recv_cq, Kind::Cq)?;
                let rsrq = srq.map(|s| self.real(s, Kind::Srq)).transpose()?;
                let (qp, qp_num) = engine
                    .create_qp(PdId(rpd), CqId(scq), CqId(rcq), rsrq.map(SrqId))
                    .map_err(engine_err("create_qp", *pd))?;
                let vnum = match &prior {
                    Some(p) => p.qp_num().expect("qp"),
                    None if self.gu() => {
                        let node = self.node_id;
                        Self::unique_key(node, &mut self.unique.qp_num)
                    }
                    None => qp_num,
                };
                Self::bind(&mut self.tables.qp_nums, Kind::Qp, vnum, qp_num, u64::from)?;
                (
                    qp.0,
                    VisibleRecord::Qp {
                        pd: *pd,
                        send_cq: *send_cq,
                        recv_cq: *recv_cq,
                        srq: *srq,
                        qp_num: vnum,
                        state: QpState::Reset,
                        remote: None,
                    },
                )
            }
        };
        let vid = match vid {
            Some(v) => v,
            None => self.choose_handle(kind, real)?,
        };
        if !self.tables.handles.insert(vid, real) {
            return Err(PluginError::VirtualIdConflict { kind, vid });
        }
        Ok(ShadowDescriptor {
            kind,
            virtual_id: vid,
            visible: prior.map_or(visible, |p| p.visible),
            real_ref: real,
        })
    }

    fn create(&mut self, engine: &mut Engine, params: CreateParams) -> PResult<ShadowDescriptor> {
        let s = self.materialize(engine, &params, None)?;
        Ok(self.record(params, s))
    }

    pub fn open_device(&mut self, engine: &mut Engine) -> PResult<ShadowDescriptor> {
        self.create(engine, CreateParams::Ctx)
    }

    pub fn alloc_pd(&mut self, engine: &mut Engine, vctx: u64) -> PResult<ShadowDescriptor> {
        self.create(engine, CreateParams::Pd { ctx: vctx })
    }

    pub fn reg_mr(
        &mut self,
        engine: &mut Engine,
        vpd: u64,
        base_addr: u64,
        length: u64,
        access: AccessFlags,
    ) -> PResult<ShadowDescriptor> {
        self.create(
            engine,
            CreateParams::Mr {
                pd: vpd,
                base_addr,
                length,
                access,
            },
        )
    }

    pub fn create_cq(&mut self, engine: &mut Engine, vctx: u64, capacity: usize) -> PResult<ShadowDescriptor> {
        self.create(engine, CreateParams::Cq { ctx: vctx, capacity })
    }

    pub fn create_srq(&mut self, engine: &mut Engine, vpd: u64, limit: u32) -> PResult<ShadowDescriptor> {
        self.create(engine, CreateParams::Srq { pd: vpd, limit })
    }

    pub fn create_qp(
        &mut self,
        engine: &mut Engine,
        vpd: u64,
        send_cq: u64,
        recv_cq: u64,
        srq: Option<u64>,
    ) -> PResult<ShadowDescriptor> {
        let s = self.create(
            engine,
            CreateParams::Qp {
                pd: vpd,
                send_cq,
                recv_cq,
                srq,
            },
        )?;
        self.balances.insert(s.virtual_id, Balance::default());
        Ok(s)
    }

    // ---- modification ---------------------------------------------------

    /// Identity stands in for missing directory entries only before any
    /// restart, and only when virtual ids started out as real ones.
    fn identity_allowed(&self) -> bool {
        !self.restarted && self.config.id_policy == IdPolicy::RealEqualsVirtual
    }

    fn remote_real(&self, vlid: u16, vqp_num: u32) -> PResult<(u16, u32)> {
        let lid = self.directory.lid.get(&vlid).copied();
        let qpn = self.directory.qp_real.get(&(vlid, vqp_num)).copied();
        match (lid, qpn) {
            (Some(l), Some(q)) => Ok((l, q)),
            (None, None) if self.identity_allowed() => Ok((vlid, vqp_num)),
            _ => Err(PluginError::UnknownRemoteVirtualId { vlid, vqp_num }),
        }
    }

    fn apply_modify(&mut self, engine: &mut Engine, vqp: u64, t: QpTransition) -> PResult<()> {
        let real = self.real(vqp, Kind::Qp)?;
        let rt = match t {
            QpTransition::ToRtr {
                remote_lid,
                remote_qp_num,
            } => {
                let (l, q) = self.remote_real(remote_lid, remote_qp_num)?;
                QpTransition::ToRtr {
                    remote_lid: l,
                    remote_qp_num: q,
                }
            }
            other => other,
        };
        engine
            .modify_qp(QpId(real), rt)
            .map_err(engine_err("modify_qp", vqp))?;
        let state = engine.qp_state(QpId(real)).map_err(engine_err("modify_qp", vqp))?;
        if let Some(ShadowDescriptor {
            visible: VisibleRecord::Qp { state: s, remote, .. },
            ..
        }) = self.shadows.get_mut(&vqp)
        {
            *s = state;
            if let QpTransition::ToRtr {
                remote_lid,
                remote_qp_num,
            } = t
            {
                *remote = Some((remote_lid, remote_qp_num));
            }
        }
        Ok(())
    }

    pub fn modify_qp(&mut self, engine: &mut Engine, vqp: u64, t: QpTransition) -> PResult<()> {
        self.apply_modify(engine, vqp, t)?;
        self.log.modifies.push(ModifyRecord::Qp { vqp, transition: t });
        Ok(())
    }

    pub fn modify_srq(&mut self, engine: &mut Engine, vsrq: u64, limit: u32) -> PResult<()> {
        let real = self.real(vsrq, Kind::Srq)?;
        engine
            .modify_srq(SrqId(real), limit)
            .map_err(engine_err("modify_srq", vsrq))?;
        if let Some(ShadowDescriptor {
            visible: VisibleRecord::Srq { limit: l, .. },
            ..
        }) = self.shadows.get_mut(&vsrq)
        {
            *l = limit;
        }
        self.log.modifies.push(ModifyRecord::Srq { vsrq, limit });
        Ok(())
    }

    pub fn destroy(&mut self, engine: &mut Engine, vid: u64) -> PResult<()> {
        let s = self.shadow(vid)?.clone();
        let real = self.real(vid, s.kind)?;
        let h = match s.kind {
            Kind::Ctx => ResourceHandle::Ctx(CtxId(real)),
            Kind::Pd => ResourceHandle::Pd(PdId(real)),
            Kind::Mr => ResourceHandle::Mr(MrId(real)),
            Kind::Cq => ResourceHandle::Cq(CqId(real)),
            Kind::Qp => ResourceHandle::Qp(QpId(real)),
            Kind::Srq => ResourceHandle::Srq(SrqId(real)),
        };
        engine.destroy(h).map_err(engine_err("destroy", vid))?;
        self.tables.handles.remove_virtual(vid);
        match s.visible {
            VisibleRecord::Mr { pd, lkey, rkey, .. } => {
                self.tables.lkeys.remove_virtual(lkey);
                if let Some(m) = self.tables.rkeys.get_mut(&pd) {
                    m.remove_virtual(rkey);
                }
            }
            VisibleRecord::Qp { qp_num, .. } => {
                self.tables.qp_nums.remove_virtual(qp_num);
                self.wqes.queues.remove(&WqeQueue::Send(vid));
                self.wqes.queues.remove(&WqeQueue::Recv(vid));
                self.balances.remove(&vid);
            }
            VisibleRecord::Srq { .. } => {
                self.wqes.queues.remove(&WqeQueue::Srq(vid));
            }
            VisibleRecord::Cq { .. } => {
                self.vcq.queues.remove(&vid);
            }
            VisibleRecord::Pd { global_pd_uid, .. } => {
                self.tables.pd_uids.remove_virtual(global_pd_uid);
                self.tables.rkeys.remove(&vid);
            }
            VisibleRecord::Ctx { lid } => {
                let shared = self
                    .shadows
                    .values()
                    .any(|o| o.virtual_id != vid && o.lid() == Some(lid));
                if !shared {
                    self.tables.lids.remove_virtual(lid);
                }
            }
        }
        self.shadows.remove(&vid);
        self.log.forget(vid);
        Ok(())
    }

    // ---- data path ------------------------------------------------------

    fn qp_info(&self, vqp: u64) -> PResult<(u64, Option<u64>, Option<(u16, u32)>)> {
        match self.shadow(vqp)?.visible {
            VisibleRecord::Qp { pd, srq, remote, .. } => Ok((pd, srq, remote)),
            _ => Err(PluginError::WrongKind {
                vid: vqp,
                expected: Kind::Qp,
            }),
        }
    }

    /// Resolves a remote vrkey through the remote queue pair's pd.
    pub fn resolve_rkey(&self, vqp: u64, vrkey: u32) -> PResult<u32> {
        let (_, _, remote) = self.qp_info(vqp)?;
        let (rvlid, rvqp) = remote.ok_or(PluginError::NotConnected(vqp))?;
        match self.directory.qp_pd.get(&(rvlid, rvqp)) {
            Some(pd) => self
                .directory
                .vrkey_pd_rkey
                .get(&(vrkey, *pd))
                .copied()
                .ok_or(PluginError::UnknownVrkey { vrkey, pd_uid: *pd }),
            None if self.identity_allowed() => Ok(vrkey),
            None => Err(PluginError::UnknownRemoteVirtualId {
                vlid: rvlid,
                vqp_num: rvqp,
            }),
        }
    }

    fn to_real_wr(&self, vqp: Option<u64>, wr: &WorkRequest) -> PResult<WorkRequest> {
        let mut out = wr.clone();
        for s in &mut out.sg_list {
            s.lkey = self
                .tables
                .lkeys
                .real(s.lkey)
                .ok_or(PluginError::UnknownVirtualKey(s.lkey))?;
        }
        if let (Some(vrkey), Some(vqp)) = (wr.rkey, vqp) {
            out.rkey = Some(self.resolve_rkey(vqp, vrkey)?);
        }
        Ok(out)
    }

    fn capture(&self, engine: &Engine, wr: &WorkRequest) -> WorkRequest {
        let mut logged = wr.clone();
        let carries = matches!(
            wr.opcode,
            Opcode::Send | Opcode::RdmaWrite | Opcode::RdmaWriteWithImm
        );
        if self.config.capture_inline_payloads && wr.inline_flag && carries && wr.inline_data.is_none() {
            let mut bytes = Vec::new();
            for s in &wr.sg_list {
                match engine.read_memory(self.addr, s.addr, s.length as u64) {
                    Ok(b) => bytes.extend(b),
                    Err(_) => return logged,
                }
            }
            logged.inline_data = Some(bytes);
        }
        logged
    }

    pub fn post_send(&mut self, engine: &mut Engine, vqp: u64, wr: &WorkRequest) -> PResult<()> {
        let real = self.real(vqp, Kind::Qp)?;
        let rwr = self.to_real_wr(Some(vqp), wr)?;
        let logged = self.capture(engine, wr);
        engine
            .post_send(QpId(real), &rwr)
            .map_err(engine_err("post_send", vqp))?;
        self.wqes.push(WqeQueue::Send(vqp), logged);
        Ok(())
    }

    pub fn post_recv(&mut self, engine: &mut Engine, vqp: u64, wr: &WorkRequest) -> PResult<()> {
        let real = self.real(vqp, Kind::Qp)?;
        let rwr = self.to_real_wr(None, wr)?;
        engine
            .post_recv(QpId(real), &rwr)
            .map_err(engine_err("post_recv", vqp))?;
        self.wqes.push(WqeQueue::Recv(vqp), wr.clone());
        Ok(())
    }

    pub fn post_srq_recv(&mut self, engine: &mut Engine, vsrq: u64, wr: &WorkRequest) -> PResult<()> {
        let real = self.real(vsrq, Kind::Srq)?;
        let rwr = self.to_real_wr(None, wr)?;
        engine
            .post_srq_recv(SrqId(real), &rwr)
            .map_err(engine_err("post_srq_recv", vsrq))?;
        self.wqes.push(WqeQueue::Srq(vsrq), wr.clone());
        Ok(())
    }

    fn vqp_by_num(&self, vnum: u32) -> Option<u64> {
        self.shadows
            .values()
            .find(|s| s.kind == Kind::Qp && s.qp_num() == Some(vnum))
            .map(|s| s.virtual_id)
    }

    /// Rewrites a real completion to virtual ids and settles the WQE log.
    fn account(&mut self, mut ev: CompletionEvent) -> CompletionEvent {
        let Some(vnum) = self.tables.qp_nums.virt(ev.qp_num) else {
            return ev;
        };
        ev.qp_num = vnum;
        let Some(vqp) = self.vqp_by_num(vnum) else {
            return ev;
        };
        let srq = self.qp_info(vqp).ok().and_then(|i| i.1);
        if matches!(ev.opcode, Opcode::Recv | Opcode::RecvRdmaWithImm) {
            let q = srq.map_or(WqeQueue::Recv(vqp), WqeQueue::Srq);
            self.wqes.remove_first(q, ev.wr_id);
            self.balances.entry(vqp).or_default().received += 1;
        } else {
            let q = WqeQueue::Send(vqp);
            if let Some(done) = self.wqes.remove_first(q, ev.wr_id) {
                let mut retired = done.wr.opcode.consumes_remote_recv() as u64;
                for e in self.wqes.prune_unsignaled_before(q, done.index) {
                    retired += e.wr.opcode.consumes_remote_recv() as u64;
                }
                self.balances.entry(vqp).or_default().retired += retired;
            }
        }
        ev
    }

    /// Serves drained completions first; only once those are gone does a
    /// call reach the real queue. A single call never mixes the two.
    pub fn poll_cq(&mut self, engine: &mut Engine, vcq: u64, max: usize) -> PResult<Vec<CompletionEvent>> {
        let real = self.real(vcq, Kind::Cq)?;
        if let Some(q) = self.vcq.queues.get_mut(&vcq) {
            if !q.is_empty() {
                let n = max.min(q.len());
                let out: Vec<_> = q.drain(..n).collect();
                if q.is_empty() {
                    self.vcq.queues.remove(&vcq);
                }
                return Ok(out);
            }
        }
        let evs = engine
            .poll_cq(CqId(real), max)
            .map_err(engine_err("poll_cq", vcq))?;
        Ok(evs.into_iter().map(|e| self.account(e)).collect())
    }

    // ---- checkpoint -----------------------------------------------------

    /// Moves every pending real completion into the private queues.
    pub fn drain_round(&mut self, engine: &mut Engine) -> PResult<u64> {
        let cqs: Vec<(u64, u64)> = self
            .shadows
            .values()
            .filter(|s| s.kind == Kind::Cq)
            .map(|s| (s.virtual_id, s.real_ref))
            .collect();
        let mut n = 0;
        for (vcq, real) in cqs {
            loop {
                let evs = engine
                    .poll_cq(CqId(real), 64)
                    .map_err(engine_err("drain", vcq))?;
                if evs.is_empty() {
                    break;
                }
                for e in evs {
                    let v = self.account(e);
                    self.vcq.queues.entry(vcq).or_default().push_back(v);
                    n += 1;
                }
            }
        }
        Ok(n)
    }

    /// Nothing to redo: queues kept their WQEs, drained events wait in the
    /// private queues.
    pub fn on_resume(&mut self) {}

    fn qp_endpoints(&self) -> Vec<(u64, (u16, u32), Option<(u16, u32)>)> {
        self.shadows
            .values()
            .filter_map(|s| match &s.visible {
                VisibleRecord::Qp { pd, qp_num, remote, .. } => {
                    let ctx = match self.shadows.get(pd).map(|p| &p.visible) {
                        Some(VisibleRecord::Pd { ctx, .. }) => *ctx,
                        _ => return None,
                    };
                    let vlid = self.shadows.get(&ctx)?.lid()?;
                    Some((s.virtual_id, (vlid, *qp_num), *remote))
                }
                _ => None,
            })
            .collect()
    }

    /// Checks the invariant that every WQE sitting in a real queue is logged,
    /// and every logged WQE missing from the real queues has either a
    /// pending real completion or was unsignaled. Returns the violations.
    pub fn audit(&self, snap: &EngineSnapshot) -> Vec<String> {
        let mut bad = Vec::new();
        let Some(host) = snap.host(self.addr) else {
            if !self.shadows.is_empty() {
                bad.push(format!("node {}: no host {} in snapshot", self.node_id, self.addr));
            }
            return bad;
        };
        let pending = |cq: u64, rqpn: Option<u32>| -> BTreeMap<u64, usize> {
            let mut m = BTreeMap::new();
            for c in host.cqs.iter().filter(|c| c.id.0 == cq) {
                for e in &c.pending {
                    if rqpn.is_none_or(|n| n == e.qp_num) {
                        *m.entry(e.wr_id).or_default() += 1;
                    }
                }
            }
            m
        };
        let check = |bad: &mut Vec<String>,
                     q: WqeQueue,
                     queued: &[u64],
                     mut pend: BTreeMap<u64, usize>| {
            let mut logged: BTreeMap<u64, Vec<bool>> = BTreeMap::new();
            for e in self.wqes.entries(q) {
                logged.entry(e.wr.wr_id).or_default().push(e.wr.signaled);
            }
            for id in queued {
                match logged.get_mut(id).and_then(|v| (!v.is_empty()).then(|| v.remove(v.len() - 1))) {
                    Some(_) => {}
                    None => bad.push(format!("node {}: {q:?} wr_id {id} queued but not logged", self.node_id)),
                }
            }
            for (id, rest) in logged {
                for signaled in rest {
                    let p = pend.entry(id).or_default();
                    if *p > 0 {
                        *p -= 1;
                    } else if signaled || !matches!(q, WqeQueue::Send(_)) {
                        bad.push(format!(
                            "node {}: {q:?} wr_id {id} logged but neither queued nor completed",
                            self.node_id
                        ));
                    }
                }
            }
        };
        for s in self.shadows.values() {
            match &s.visible {
                VisibleRecord::Qp { send_cq, recv_cq, srq, .. } => {
                    let Some(qs) = host.qps.iter().find(|q| q.id.0 == s.real_ref) else {
                        bad.push(format!("node {}: qp {:#x} missing", self.node_id, s.virtual_id));
                        continue;
                    };
                    let rs = self.real(*send_cq, Kind::Cq).unwrap_or(0);
                    let rr = self.real(*recv_cq, Kind::Cq).unwrap_or(0);
                    let sq: Vec<u64> = qs.send_queue.iter().map(|w| w.wr_id).collect();
                    check(&mut bad, WqeQueue::Send(s.virtual_id), &sq, pending(rs, Some(qs.qp_num)));
                    if srq.is_none() {
                        let rq: Vec<u64> = qs.recv_queue.iter().map(|w| w.wr_id).collect();
                        check(&mut bad, WqeQueue::Recv(s.virtual_id), &rq, pending(rr, Some(qs.qp_num)));
                    }
                }
                VisibleRecord::Srq { .. } => {
                    let Some(ss) = host.srqs.iter().find(|q| q.id.0 == s.real_ref) else {
                        bad.push(format!("node {}: srq {:#x} missing", self.node_id, s.virtual_id));
                        continue;
                    };
                    let mut pend = BTreeMap::new();
                    for q in self.shadows.values() {
                        if let VisibleRecord::Qp { recv_cq, srq: Some(x), .. } = &q.visible {
                            if *x == s.virtual_id {
                                let rr = self.real(*recv_cq, Kind::Cq).unwrap_or(0);
                                let rnum = self.tables.qp_nums.real(q.qp_num().unwrap_or(0));
                                for (k, v) in pending(rr, rnum) {
                                    *pend.entry(k).or_default() += v;
                                }
                            }
                        }
                    }
                    let sq: Vec<u64> = ss.queue.iter().map(|w| w.wr_id).collect();
                    check(&mut bad, WqeQueue::Srq(s.virtual_id), &sq, pend);
                }
                _ => {}
            }
        }
        bad
    }

    // ---- images ---------------------------------------------------------

    pub fn resource_section(&self) -> ResourceSection {
        ResourceSection {
            node_id: self.node_id,
            addr: self.addr,
            config: self.config.clone(),
            shadows: self.shadows.clone(),
            log: self.log.clone(),
            unique: self.unique,
            balances: self.balances.clone(),
        }
    }

    pub fn translation_section(&self) -> TranslationSection {
        TranslationSection {
            tables: self.tables.clone(),
            directory: self.directory.clone(),
        }
    }

    /// Rebuilds plugin state from image sections. Real resources do not
    /// exist yet; call [`NodePlugin::restart_recreate`] next.
    pub fn from_sections(
        res: ResourceSection,
        wqes: WqeLog,
        vcq: VirtualCompletionQueue,
        tr: TranslationSection,
    ) -> Self {
        Self {
            node_id: res.node_id,
            addr: res.addr,
            config: res.config,
            restarted: false,
            shadows: res.shadows,
            tables: tr.tables,
            log: res.log,
            wqes,
            vcq,
            directory: tr.directory,
            unique: res.unique,
            balances: res.balances,
            tap: Rc::new(PluginTap::default()),
        }
    }

    /// Address ranges of every registered region, merged.
    pub fn memory_ranges(&self) -> Vec<(u64, u64)> {
        let mut r: Vec<(u64, u64)> = self
            .shadows
            .values()
            .filter_map(|s| match s.visible {
                VisibleRecord::Mr { base_addr, length, .. } => Some((base_addr, base_addr + length)),
                _ => None,
            })
            .collect();
        r.sort_unstable();
        let mut out: Vec<(u64, u64)> = Vec::new();
        for (a, b) in r {
            match out.last_mut() {
                Some(last) if a <= last.1 => last.1 = last.1.max(b),
                _ => out.push((a, b)),
            }
        }
        out.into_iter().map(|(a, b)| (a, b - a)).collect()
    }

    // ---- restart --------------------------------------------------------

    /// Recreates every logged resource on `engine` at `addr`. Virtual ids
    /// are kept; the translation tables now point at the new real ids.
    pub fn restart_recreate(&mut self, engine: &mut Engine, addr: NodeAddr) -> PResult<usize> {
        self.addr = addr;
        self.restarted = true;
        self.tables = TranslationTable::default();
        self.directory = RkeyDirectory::default();
        self.tap = Rc::new(PluginTap::default());
        let creations = self.log.creations.clone();
        for c in &creations {
            let s = self.materialize(engine, &c.params, Some(c.virtual_id))?;
            let entry = self.shadows.get_mut(&c.virtual_id).expect("logged shadow");
            entry.real_ref = s.real_ref;
            if let VisibleRecord::Qp { state, .. } = &mut entry.visible {
                // replayed modifications bring it back
                *state = QpState::Reset;
            }
        }
        Ok(creations.len())
    }

    /// Publishes this node's id tuples.
    pub fn publish(&self, session: &mut dyn CoordinatorSession) -> PResult<()> {
        for s in self.shadows.values() {
            if let Some(vlid) = s.lid() {
                let lid = self.tables.lids.real(vlid).expect("ctx lid bound");
                session.publish(NS_LID, &vlid.to_be_bytes(), &lid.to_be_bytes())?;
            }
        }
        for (vqp, (vlid, vnum), _) in self.qp_endpoints() {
            let (pd, _, _) = self.qp_info(vqp)?;
            let uid = self.shadow(pd)?.pd_uid().expect("pd shadow");
            let real = self.tables.qp_nums.real(vnum).expect("qp bound");
            session.publish(NS_QP_PD, &qp_key(vlid, vnum), &uid.to_be_bytes())?;
            session.publish(NS_QP_REAL, &qp_key(vlid, vnum), &real.to_be_bytes())?;
        }
        for s in self.shadows.values() {
            if let VisibleRecord::Mr { pd, rkey, .. } = s.visible {
                let uid = self.shadow(pd)?.pd_uid().expect("pd shadow");
                let real = self
                    .tables
                    .rkeys
                    .get(&pd)
                    .and_then(|m| m.real(rkey))
                    .expect("rkey bound");
                let mut k = rkey.to_be_bytes().to_vec();
                k.extend_from_slice(&uid.to_be_bytes());
                session.publish(NS_VRKEY_PD_RKEY, &k, &real.to_be_bytes())?;
            }
        }
        Ok(())
    }

    /// Loads the directory from the coordinator; the barrier must be met.
    pub fn subscribe(&mut self, session: &mut dyn CoordinatorSession) -> PResult<()> {
        let bad = |ns: &str| PluginError::RestartDirectoryIncomplete(format!("malformed entry in {ns}"));
        let mut d = RkeyDirectory::default();
        for (k, v) in session.subscribe(NS_LID)? {
            d.lid.insert(be_u16(&k).ok_or_else(|| bad(NS_LID))?, be_u16(&v).ok_or_else(|| bad(NS_LID))?);
        }
        for (k, v) in session.subscribe(NS_QP_PD)? {
            let key = parse_qp_key(&k).ok_or_else(|| bad(NS_QP_PD))?;
            d.qp_pd.insert(key, be_u64(&v).ok_or_else(|| bad(NS_QP_PD))?);
        }
        for (k, v) in session.subscribe(NS_QP_REAL)? {
            let key = parse_qp_key(&k).ok_or_else(|| bad(NS_QP_REAL))?;
            d.qp_real.insert(key, be_u32(&v).ok_or_else(|| bad(NS_QP_REAL))?);
        }
        for (k, v) in session.subscribe(NS_VRKEY_PD_RKEY)? {
            if k.len() != 12 {
                return Err(bad(NS_VRKEY_PD_RKEY));
            }
            let vrkey = be_u32(&k[..4]).expect("4 bytes");
            let pd = be_u64(&k[4..]).expect("8 bytes");
            d.vrkey_pd_rkey.insert((vrkey, pd), be_u32(&v).ok_or_else(|| bad(NS_VRKEY_PD_RKEY))?);
        }
        self.directory = d;
        self.verify_directory()
    }

    /// Every connected queue pair must be able to reach its peer.
    pub fn verify_directory(&self) -> PResult<()> {
        for (vqp, _, remote) in self.qp_endpoints() {
            let Some((vlid, vnum)) = remote else { continue };
            let ok = self.directory.lid.contains_key(&vlid)
                && self.directory.qp_real.contains_key(&(vlid, vnum))
                && self.directory.qp_pd.contains_key(&(vlid, vnum));
            if !ok {
                return Err(PluginError::RestartDirectoryIncomplete(format!(
                    "queue pair {vqp:#x} cannot reach vlid {vlid:#x} vqp {vnum:#x}"
                )));
            }
        }
        Ok(())
    }

    /// Replays logged modifications against the recreated resources.
    pub fn replay_modifies(&mut self, engine: &mut Engine) -> PResult<usize> {
        let mods = self.log.modifies.clone();
        for m in &mods {
            match *m {
                ModifyRecord::Qp { vqp, transition } => {
                    self.apply_modify(engine, vqp, transition).map_err(|e| match e {
                        PluginError::UnknownRemoteVirtualId { vlid, vqp_num } => {
                            PluginError::RestartDirectoryIncomplete(format!(
                                "vlid {vlid:#x} vqp {vqp_num:#x}"
                            ))
                        }
                        other => other,
                    })?
                }
                ModifyRecord::Srq { vsrq, limit } => {
                    let real = self.real(vsrq, Kind::Srq)?;
                    engine
                        .modify_srq(SrqId(real), limit)
                        .map_err(engine_err("modify_srq", vsrq))?;
                }
            }
        }
        Ok(mods.len())
    }

    fn repost(&mut self, engine: &mut Engine, sends: bool) -> PResult<usize> {
        let queues: Vec<(WqeQueue, Vec<WqeEntry>)> = self
            .wqes
            .queues
            .iter()
            .filter(|(q, _)| matches!(q, WqeQueue::Send(_)) == sends)
            .map(|(q, l)| (*q, l.iter().cloned().collect()))
            .collect();
        let mut n = 0;
        for (q, entries) in queues {
            for e in entries {
                match q {
                    WqeQueue::Send(vqp) => {
                        let real = self.real(vqp, Kind::Qp)?;
                        let rwr = self.to_real_wr(Some(vqp), &e.wr)?;
                        engine
                            .post_send(QpId(real), &rwr)
                            .map_err(engine_err("repost_send", vqp))?;
                    }
                    WqeQueue::Recv(vqp) => {
                        let real = self.real(vqp, Kind::Qp)?;
                        let rwr = self.to_real_wr(None, &e.wr)?;
                        engine
                            .post_recv(QpId(real), &rwr)
                            .map_err(engine_err("repost_recv", vqp))?;
                    }
                    WqeQueue::Srq(vsrq) => {
                        let real = self.real(vsrq, Kind::Srq)?;
                        let rwr = self.to_real_wr(None, &e.wr)?;
                        engine
                            .post_srq_recv(SrqId(real), &rwr)
                            .map_err(engine_err("repost_srq_recv", vsrq))?;
                    }
                }
                n += 1;
            }
        }
        Ok(n)
    }

    /// Re-posts logged receive WQEs in post order, keeping their wr_ids.
    pub fn repost_recvs(&mut self, engine: &mut Engine) -> PResult<usize> {
        self.repost(engine, false)
    }

    /// Re-posts logged send WQEs in post order, keeping their wr_ids.
    pub fn repost_sends(&mut self, engine: &mut Engine) -> PResult<usize> {
        self.repost(engine, true)
    }
}

/// Completions owed across all connected queue pairs: for every pair, how
/// far the receiver's count runs ahead of the sender's retirements.
pub fn owed_completions(plugins: &[&mut NodePlugin]) -> BTreeMap<u32, u64> {
    let mut by_endpoint: BTreeMap<(u16, u32), Balance> = BTreeMap::new();
    for p in plugins {
        for (vqp, ep, _) in p.qp_endpoints() {
            by_endpoint.insert(ep, p.balances.get(&vqp).copied().unwrap_or_default());
        }
    }
    let mut owed = BTreeMap::new();
    for p in plugins {
        let mut n = 0;
        for (vqp, _, remote) in p.qp_endpoints() {
            let Some(remote) = remote else { continue };
            let mine = p.balances.get(&vqp).copied().unwrap_or_default();
            if let Some(peer) = by_endpoint.get(&remote) {
                n += peer.received.saturating_sub(mine.retired);
            }
        }
        owed.insert(p.node_id, n);
    }
    owed
}

/// Drains every node in lockstep. A round polls all real queues; the loop
/// stops at the first round that finds nothing while no sender owes a
/// completion, or when the round budget runs out.
pub fn drain_all(engine: &mut Engine, plugins: &mut [&mut NodePlugin]) -> PResult<Vec<DrainReport>> {
    let Some(first) = plugins.first() else {
        return Ok(Vec::new());
    };
    let cfg = first.config.clone();
    let mut reports: Vec<DrainReport> = plugins
        .iter()
        .map(|p| DrainReport {
            node_id: p.node_id,
            ..DrainReport::default()
        })
        .collect();
    let mut rounds = 0;
    let complete = loop {
        rounds += 1;
        let mut found = 0;
        for (p, r) in plugins.iter_mut().zip(&mut reports) {
            let n = p.drain_round(engine)?;
            r.events_drained += n;
            found += n;
        }
        let owed: u64 = if cfg.await_balance {
            owed_completions(plugins).values().sum()
        } else {
            0
        };
        if found == 0 && owed == 0 {
            break true;
        }
        if rounds >= cfg.drain_max_rounds {
            break false;
        }
        engine
            .progress(cfg.drain_interval_ticks)
            .map_err(engine_err("drain", 0))?;
    };
    let owed = owed_completions(plugins);
    let frames = engine.fabric().in_flight_frames();
    for (p, r) in plugins.iter().zip(&mut reports) {
        r.rounds = rounds;
        r.complete = complete;
        r.wqes_outstanding = p.wqes.len();
        r.owed_completions = owed.get(&p.node_id).copied().unwrap_or(0);
        r.in_flight_frames = frames
            .iter()
            .filter(|f| f.from == p.addr || f.to == p.addr)
            .count();
    }
    Ok(reports)
}
