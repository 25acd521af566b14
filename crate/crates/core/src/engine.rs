// SPDX-License-Identifier: Apache-2.0

//! Simulated host channel adapter and verbs library.
//!
//! One [`Engine`] models every adapter on a fabric for a single epoch. Real
//! ids (context, handle, qp_num, lkey, rkey, lid) are drawn from counters
//! offset by the epoch nonce, so a fresh epoch never reissues the ids of the
//! previous one.
//!
//! Post and poll calls go through the context's [`DispatchTable`], which an
//! interposition layer may rebind.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::rc::Rc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fabric::{
    ConnId, Delivery, Fabric, FabricError, Frame, FrameKind, InFlightFrame, NodeAddr,
};

/// First byte of every node's simulated address space.
pub const MEM_BASE: u64 = 0x1000_0000;
/// Lid of port 0 on node 0 in epoch 0.
pub const LID_BASE: u16 = 0x10;

macro_rules! handle {
    ($name:ident) => {
        #[derive(
            Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
        )]
        pub struct $name(pub u64);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}#{:#x}", stringify!($name), self.0)
            }
        }
    };
}

handle!(CtxId);
handle!(PdId);
handle!(MrId);
handle!(CqId);
handle!(QpId);
handle!(SrqId);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ResourceHandle {
    Ctx(CtxId),
    Pd(PdId),
    Mr(MrId),
    Cq(CqId),
    Qp(QpId),
    Srq(SrqId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AccessFlags(pub u8);

impl AccessFlags {
    pub const LOCAL_WRITE: Self = Self(1);
    pub const REMOTE_WRITE: Self = Self(2);
    pub const REMOTE_READ: Self = Self(4);
    pub const ALL: Self = Self(7);

    pub fn contains(self, other: Self) -> bool {
        self.0 & other.0 == other.0
    }
}

impl std::ops::BitOr for AccessFlags {
    type Output = Self;
    fn bitor(self, rhs: Self) -> Self {
        Self(self.0 | rhs.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Opcode {
    Send = 0,
    Recv = 1,
    RdmaWrite = 2,
    RdmaWriteWithImm = 3,
    RdmaRead = 4,
    /// Receiver-side completion of an RDMA write carrying immediate data.
    RecvRdmaWithImm = 5,
}

impl Opcode {
    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            0 => Self::Send,
            1 => Self::Recv,
            2 => Self::RdmaWrite,
            3 => Self::RdmaWriteWithImm,
            4 => Self::RdmaRead,
            5 => Self::RecvRdmaWithImm,
            _ => return None,
        })
    }

    pub fn is_rdma(self) -> bool {
        matches!(
            self,
            Self::RdmaWrite | Self::RdmaWriteWithImm | Self::RdmaRead
        )
    }

    /// Send-side opcodes that consume a receive WQE at the target.
    pub fn consumes_remote_recv(self) -> bool {
        matches!(self, Self::Send | Self::RdmaWriteWithImm)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sge {
    pub addr: u64,
    pub length: u32,
    pub lkey: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkRequest {
    pub wr_id: u64,
    pub opcode: Opcode,
    pub sg_list: Vec<Sge>,
    pub signaled: bool,
    pub inline_flag: bool,
    pub remote_addr: Option<u64>,
    pub rkey: Option<u32>,
    pub imm: Option<u32>,
    /// Bytes to send instead of gathering `sg_list`; only honoured for
    /// inline sends. Filled by the interposition layer when re-posting.
    #[serde(default)]
    pub inline_data: Option<Vec<u8>>,
}

impl WorkRequest {
    pub fn recv(wr_id: u64, sge: Sge) -> Self {
        Self {
            wr_id,
            opcode: Opcode::Recv,
            sg_list: vec![sge],
            signaled: true,
            inline_flag: false,
            remote_addr: None,
            rkey: None,
            imm: None,
            inline_data: None,
        }
    }

    pub fn send(wr_id: u64, sge: Sge, signaled: bool) -> Self {
        Self {
            opcode: Opcode::Send,
            signaled,
            ..Self::recv(wr_id, sge)
        }
    }

    pub fn rdma(
        wr_id: u64,
        opcode: Opcode,
        sge: Sge,
        remote_addr: u64,
        rkey: u32,
        signaled: bool,
    ) -> Self {
        Self {
            opcode,
            signaled,
            remote_addr: Some(remote_addr),
            rkey: Some(rkey),
            ..Self::recv(wr_id, sge)
        }
    }

    pub fn total_len(&self) -> u64 {
        self.sg_list.iter().map(|s| s.length as u64).sum()
    }

    fn validate_shape(&self) -> Result<(), VerbsError> {
        match self.opcode {
            Opcode::Send | Opcode::Recv => {
                if self.remote_addr.is_some() || self.rkey.is_some() {
                    return Err(VerbsError::InvalidWorkRequest(
                        "send/recv must not carry remote_addr or rkey",
                    ));
                }
            }
            Opcode::RdmaWrite | Opcode::RdmaWriteWithImm | Opcode::RdmaRead => {
                if self.remote_addr.is_none() || self.rkey.is_none() {
                    return Err(VerbsError::InvalidWorkRequest(
                        "rdma operations need remote_addr and rkey",
                    ));
                }
            }
            Opcode::RecvRdmaWithImm => {
                return Err(VerbsError::InvalidWorkRequest(
                    "completion-only opcode cannot be posted",
                ))
            }
        }
        if self.opcode == Opcode::RdmaWriteWithImm && self.imm.is_none() {
            return Err(VerbsError::InvalidWorkRequest(
                "write-with-imm needs an immediate value",
            ));
        }
        if self.sg_list.is_empty() && !(self.inline_flag && self.inline_data.is_some()) {
            return Err(VerbsError::InvalidWorkRequest("empty scatter/gather list"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum WcStatus {
    Success = 0,
    /// Receive buffer shorter than the incoming message.
    LocalLengthError = 1,
    LocalProtectionError = 2,
    RemoteAccessError = 3,
    /// No receive WQE was posted when the message arrived.
    ReceiverNotReady = 4,
    RemoteInvalidRequest = 5,
}

impl WcStatus {
    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            0 => Self::Success,
            1 => Self::LocalLengthError,
            2 => Self::LocalProtectionError,
            3 => Self::RemoteAccessError,
            4 => Self::ReceiverNotReady,
            5 => Self::RemoteInvalidRequest,
            _ => return None,
        })
    }

    pub fn is_ok(self) -> bool {
        self == Self::Success
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CompletionEvent {
    pub wr_id: u64,
    pub status: WcStatus,
    pub opcode: Opcode,
    pub byte_len: u32,
    pub imm: Option<u32>,
    pub qp_num: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum QpState {
    Reset,
    Init,
    Rtr,
    Rts,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum QpTransition {
    ToInit,
    ToRtr { remote_lid: u16, remote_qp_num: u32 },
    ToRts,
}

#[derive(Debug, Error)]
pub enum VerbsError {
    #[error("address {0} is not attached to the engine")]
    AddressUnknown(NodeAddr),
    #[error("stale handle {0}")]
    StaleHandle(String),
    #[error("range [{base:#x}, +{length}) is not valid node memory")]
    InvalidRange { base: u64, length: u64 },
    #[error("invalid transition {transition:?} from state {from:?}")]
    InvalidTransition {
        from: QpState,
        transition: QpTransition,
    },
    #[error("no queue pair {qp_num:#x} behind lid {lid:#x}")]
    RemoteUnknown { lid: u16, qp_num: u32 },
    #[error("queue pair {qp_num:#x} in state {state:?} cannot accept this post")]
    InvalidState { qp_num: u32, state: QpState },
    #[error("invalid work request: {0}")]
    InvalidWorkRequest(&'static str),
    #[error("lkey {0:#x} does not cover the scatter/gather element")]
    InvalidLkey(u32),
    #[error("{0} still has dependent resources")]
    ResourceBusy(String),
    #[error("dispatch layer {0:?} already installed")]
    LayerInstalled(String),
    #[error("srq limit must be positive")]
    InvalidSrqLimit,
    #[error(transparent)]
    Fabric(#[from] FabricError),
}

pub type PostSendFn = Rc<dyn Fn(&mut Engine, QpId, &WorkRequest) -> Result<(), VerbsError>>;
pub type PostRecvFn = Rc<dyn Fn(&mut Engine, QpId, &WorkRequest) -> Result<(), VerbsError>>;
pub type PostSrqRecvFn = Rc<dyn Fn(&mut Engine, SrqId, &WorkRequest) -> Result<(), VerbsError>>;
pub type PollCqFn =
    Rc<dyn Fn(&mut Engine, CqId, usize) -> Result<Vec<CompletionEvent>, VerbsError>>;

/// The four hot-path entry points of a context.
#[derive(Clone)]
pub struct DispatchSlots {
    pub post_send: PostSendFn,
    pub post_recv: PostRecvFn,
    pub post_srq_recv: PostSrqRecvFn,
    pub poll_cq: PollCqFn,
}

impl DispatchSlots {
    pub fn native() -> Self {
        Self {
            post_send: Rc::new(Engine::native_post_send),
            post_recv: Rc::new(Engine::native_post_recv),
            post_srq_recv: Rc::new(Engine::native_post_srq_recv),
            poll_cq: Rc::new(Engine::native_poll_cq),
        }
    }

    /// Slots that forward straight to `inner`.
    pub fn identity(inner: &DispatchSlots) -> Self {
        let (s, r, q, p) = (
            inner.post_send.clone(),
            inner.post_recv.clone(),
            inner.post_srq_recv.clone(),
            inner.poll_cq.clone(),
        );
        Self {
            post_send: Rc::new(move |e, qp, wr| s(e, qp, wr)),
            post_recv: Rc::new(move |e, qp, wr| r(e, qp, wr)),
            post_srq_recv: Rc::new(move |e, srq, wr| q(e, srq, wr)),
            poll_cq: Rc::new(move |e, cq, max| p(e, cq, max)),
        }
    }
}

/// Per-context function table. Each interposition layer may replace the
/// slots once.
#[derive(Clone)]
pub struct DispatchTable {
    slots: DispatchSlots,
    layers: Vec<String>,
}

impl fmt::Debug for DispatchTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DispatchTable")
            .field("layers", &self.layers)
            .finish()
    }
}

impl DispatchTable {
    pub fn native() -> Self {
        Self {
            slots: DispatchSlots::native(),
            layers: Vec::new(),
        }
    }

    pub fn slots(&self) -> &DispatchSlots {
        &self.slots
    }

    pub fn layers(&self) -> &[String] {
        &self.layers
    }

    /// Replaces every slot; `wrap` receives the current slots so the new
    /// ones can chain to them.
    pub fn install(
        &mut self,
        layer: &str,
        wrap: impl FnOnce(&DispatchSlots) -> DispatchSlots,
    ) -> Result<(), VerbsError> {
        if self.layers.iter().any(|l| l == layer) {
            return Err(VerbsError::LayerInstalled(layer.to_string()));
        }
        self.slots = wrap(&self.slots);
        self.layers.push(layer.to_string());
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub epoch: u32,
    /// Offset for every real id of the epoch; defaults to the epoch number.
    pub nonce: Option<u32>,
    pub memory_size: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            epoch: 0,
            nonce: None,
            memory_size: 1 << 20,
        }
    }
}

/// What the creator of a context gets back.
#[derive(Clone, Debug)]
pub struct RealContext {
    pub ctx_id: CtxId,
    pub node: NodeAddr,
    pub lid: u16,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtectionDomain {
    pub pd_id: PdId,
    pub global_pd_uid: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryRegion {
    pub mr_id: MrId,
    pub pd: PdId,
    pub base_addr: u64,
    pub length: u64,
    pub lkey: u32,
    pub rkey: u32,
    pub access: AccessFlags,
}

struct Host {
    lid: u16,
    memory: Vec<u8>,
    next_lkey: u32,
    next_qp_num: u32,
    next_local_pd: u64,
}

struct CtxState {
    addr: NodeAddr,
    dispatch: DispatchTable,
}

struct PdState {
    ctx: CtxId,
    addr: NodeAddr,
    global_uid: u64,
    next_rkey: u32,
}

struct CqState {
    ctx: CtxId,
    addr: NodeAddr,
    capacity: usize,
    events: VecDeque<CompletionEvent>,
    overruns: u64,
}

struct SrqState {
    pd: PdId,
    addr: NodeAddr,
    limit: u32,
    queue: VecDeque<WorkRequest>,
}

#[derive(Clone, Debug)]
struct OutstandingSend {
    wr: WorkRequest,
    byte_len: u32,
}

struct QpRecord {
    addr: NodeAddr,
    pd: PdId,
    qp_num: u32,
    state: QpState,
    send_cq: CqId,
    recv_cq: CqId,
    srq: Option<SrqId>,
    remote: Option<(u16, u32)>,
    conn: Option<ConnId>,
    send_queue: VecDeque<OutstandingSend>,
    recv_queue: VecDeque<WorkRequest>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EngineStats {
    pub frames_handled: u64,
    pub completions_generated: u64,
    pub completions_polled: u64,
}

pub struct Engine {
    fabric: Fabric,
    config: EngineConfig,
    nonce: u32,
    hosts: BTreeMap<NodeAddr, Host>,
    lids: BTreeMap<u16, NodeAddr>,
    ctxs: BTreeMap<CtxId, CtxState>,
    pds: BTreeMap<PdId, PdState>,
    mrs: BTreeMap<MrId, MemoryRegion>,
    mr_owner: BTreeMap<MrId, NodeAddr>,
    cqs: BTreeMap<CqId, CqState>,
    qps: BTreeMap<QpId, QpRecord>,
    qp_nums: BTreeMap<(NodeAddr, u32), QpId>,
    srqs: BTreeMap<SrqId, SrqState>,
    endpoints: BTreeMap<(ConnId, NodeAddr), QpId>,
    pair_conns: BTreeMap<(QpId, QpId), ConnId>,
    next_handle: u64,
    stats: EngineStats,
}

impl Engine {
    pub fn new(fabric: Fabric, config: EngineConfig) -> Self {
        let nonce = config.nonce.unwrap_or(config.epoch);
        Self {
            fabric,
            config,
            nonce,
            hosts: BTreeMap::new(),
            lids: BTreeMap::new(),
            ctxs: BTreeMap::new(),
            pds: BTreeMap::new(),
            mrs: BTreeMap::new(),
            mr_owner: BTreeMap::new(),
            cqs: BTreeMap::new(),
            qps: BTreeMap::new(),
            qp_nums: BTreeMap::new(),
            srqs: BTreeMap::new(),
            endpoints: BTreeMap::new(),
            pair_conns: BTreeMap::new(),
            next_handle: 1,
            stats: EngineStats::default(),
        }
    }

    pub fn epoch(&self) -> u32 {
        self.config.epoch
    }

    pub fn nonce(&self) -> u32 {
        self.nonce
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn fabric(&self) -> &Fabric {
        &self.fabric
    }

    pub fn fabric_mut(&mut self) -> &mut Fabric {
        &mut self.fabric
    }

    /// Hands the fabric back, e.g. to start the next epoch on it.
    pub fn into_fabric(self) -> Fabric {
        self.fabric
    }

    pub fn stats(&self) -> EngineStats {
        self.stats
    }

    pub fn now(&self) -> u64 {
        self.fabric.now()
    }

    /// Registers `addr` with the fabric and gives it zeroed memory and a lid.
    pub fn attach(&mut self, addr: NodeAddr) -> Result<u16, VerbsError> {
        if let Some(h) = self.hosts.get(&addr) {
            return Ok(h.lid);
        }
        if !self.fabric.is_registered(addr) {
            self.fabric.register(addr)?;
        }
        let slot = addr.node_id * self.fabric.config().port_count + addr.port_index;
        let lid = LID_BASE
            .wrapping_add((self.nonce as u16).wrapping_mul(0x100))
            .wrapping_add(slot as u16);
        self.hosts.insert(
            addr,
            Host {
                lid,
                memory: vec![0; self.config.memory_size],
                next_lkey: 1,
                next_qp_num: 1,
                next_local_pd: 1,
            },
        );
        self.lids.insert(lid, addr);
        Ok(lid)
    }

    pub fn is_attached(&self, addr: NodeAddr) -> bool {
        self.hosts.contains_key(&addr)
    }

    fn fresh_handle(&mut self) -> u64 {
        let h = ((self.nonce as u64) << 32) | self.next_handle;
        self.next_handle += 1;
        h
    }

    fn host(&self, addr: NodeAddr) -> Result<&Host, VerbsError> {
        self.hosts.get(&addr).ok_or(VerbsError::AddressUnknown(addr))
    }

    fn host_mut(&mut self, addr: NodeAddr) -> Result<&mut Host, VerbsError> {
        self.hosts
            .get_mut(&addr)
            .ok_or(VerbsError::AddressUnknown(addr))
    }

    fn mem_range(&self, base: u64, length: u64) -> Result<std::ops::Range<usize>, VerbsError> {
        let size = self.config.memory_size as u64;
        let err = || VerbsError::InvalidRange { base, length };
        let start = base.checked_sub(MEM_BASE).ok_or_else(err)?;
        let end = start.checked_add(length).ok_or_else(err)?;
        if end > size {
            return Err(err());
        }
        Ok(start as usize..end as usize)
    }

    pub fn read_memory(&self, addr: NodeAddr, base: u64, len: u64) -> Result<Vec<u8>, VerbsError> {
        let r = self.mem_range(base, len)?;
        Ok(self.host(addr)?.memory[r].to_vec())
    }

    pub fn write_memory(&mut self, addr: NodeAddr, base: u64, bytes: &[u8]) -> Result<(), VerbsError> {
        let r = self.mem_range(base, bytes.len() as u64)?;
        self.host_mut(addr)?.memory[r].copy_from_slice(bytes);
        Ok(())
    }

    // ---- creation -------------------------------------------------------

    pub fn open_device(&mut self, addr: NodeAddr) -> Result<RealContext, VerbsError> {
        let lid = self.host(addr)?.lid;
        let ctx_id = CtxId(self.fresh_handle());
        self.ctxs.insert(
            ctx_id,
            CtxState {
                addr,
                dispatch: DispatchTable::native(),
            },
        );
        Ok(RealContext {
            ctx_id,
            node: addr,
            lid,
        })
    }

    pub fn query_lid(&self, ctx: CtxId) -> Result<u16, VerbsError> {
        let c = self.ctx(ctx)?;
        Ok(self.host(c.addr)?.lid)
    }

    fn ctx(&self, ctx: CtxId) -> Result<&CtxState, VerbsError> {
        self.ctxs
            .get(&ctx)
            .ok_or_else(|| VerbsError::StaleHandle(ctx.to_string()))
    }

    pub fn dispatch(&self, ctx: CtxId) -> Result<&DispatchTable, VerbsError> {
        Ok(&self.ctx(ctx)?.dispatch)
    }

    pub fn dispatch_mut(&mut self, ctx: CtxId) -> Result<&mut DispatchTable, VerbsError> {
        self.ctxs
            .get_mut(&ctx)
            .map(|c| &mut c.dispatch)
            .ok_or_else(|| VerbsError::StaleHandle(ctx.to_string()))
    }

    pub fn alloc_pd(&mut self, ctx: CtxId) -> Result<ProtectionDomain, VerbsError> {
        let addr = self.ctx(ctx)?.addr;
        let local = {
            // the uid counter is per node, shared by all its ports
            let next = self
                .hosts
                .iter()
                .filter(|(a, _)| a.node_id == addr.node_id)
                .map(|(_, h)| h.next_local_pd)
                .max()
                .unwrap_or(1);
            for (a, h) in self.hosts.iter_mut() {
                if a.node_id == addr.node_id {
                    h.next_local_pd = next + 1;
                }
            }
            next
        };
        let global_uid = ((addr.node_id as u64) << 32) | local;
        let pd_id = PdId(self.fresh_handle());
        self.pds.insert(
            pd_id,
            PdState {
                ctx,
                addr,
                global_uid,
                next_rkey: 1,
            },
        );
        Ok(ProtectionDomain {
            pd_id,
            global_pd_uid: global_uid,
        })
    }

    fn pd(&self, pd: PdId) -> Result<&PdState, VerbsError> {
        self.pds
            .get(&pd)
            .ok_or_else(|| VerbsError::StaleHandle(pd.to_string()))
    }

    pub fn pd_global_uid(&self, pd: PdId) -> Result<u64, VerbsError> {
        Ok(self.pd(pd)?.global_uid)
    }

    pub fn reg_mr(
        &mut self,
        pd: PdId,
        base_addr: u64,
        length: u64,
        access: AccessFlags,
    ) -> Result<MemoryRegion, VerbsError> {
        let addr = self.pd(pd)?.addr;
        if length == 0 {
            return Err(VerbsError::InvalidRange {
                base: base_addr,
                length,
            });
        }
        self.mem_range(base_addr, length)?;
        let nonce = self.nonce;
        let host = self.host_mut(addr)?;
        let lkey = (nonce << 20) | 0x8_0000 | host.next_lkey;
        host.next_lkey += 1;
        let pd_state = self.pds.get_mut(&pd).expect("checked above");
        let rkey = (nonce << 20) | pd_state.next_rkey;
        pd_state.next_rkey += 1;
        let mr = MemoryRegion {
            mr_id: MrId(self.fresh_handle()),
            pd,
            base_addr,
            length,
            lkey,
            rkey,
            access,
        };
        self.mrs.insert(mr.mr_id, mr);
        self.mr_owner.insert(mr.mr_id, addr);
        Ok(mr)
    }

    pub fn create_cq(&mut self, ctx: CtxId, capacity: usize) -> Result<CqId, VerbsError> {
        let addr = self.ctx(ctx)?.addr;
        if capacity == 0 {
            return Err(VerbsError::InvalidWorkRequest("cq capacity must be positive"));
        }
        let id = CqId(self.fresh_handle());
        self.cqs.insert(
            id,
            CqState {
                ctx,
                addr,
                capacity,
                events: VecDeque::new(),
                overruns: 0,
            },
        );
        Ok(id)
    }

    pub fn create_srq(&mut self, pd: PdId, limit: u32) -> Result<SrqId, VerbsError> {
        let addr = self.pd(pd)?.addr;
        if limit == 0 {
            return Err(VerbsError::InvalidSrqLimit);
        }
        let id = SrqId(self.fresh_handle());
        self.srqs.insert(
            id,
            SrqState {
                pd,
                addr,
                limit,
                queue: VecDeque::new(),
            },
        );
        Ok(id)
    }

    pub fn modify_srq(&mut self, srq: SrqId, limit: u32) -> Result<(), VerbsError> {
        if limit == 0 {
            return Err(VerbsError::InvalidSrqLimit);
        }
        self.srqs
            .get_mut(&srq)
            .ok_or_else(|| VerbsError::StaleHandle(srq.to_string()))?
            .limit = limit;
        Ok(())
    }

    /// Creates a queue pair in state RESET. Returns its handle and real
    /// qp_num.
    pub fn create_qp(
        &mut self,
        pd: PdId,
        send_cq: CqId,
        recv_cq: CqId,
        srq: Option<SrqId>,
    ) -> Result<(QpId, u32), VerbsError> {
        let addr = self.pd(pd)?.addr;
        for cq in [send_cq, recv_cq] {
            let c = self
                .cqs
                .get(&cq)
                .ok_or_else(|| VerbsError::StaleHandle(cq.to_string()))?;
            if c.addr != addr {
                return Err(VerbsError::InvalidWorkRequest("cq belongs to another port"));
            }
        }
        if let Some(s) = srq {
            if !self.srqs.contains_key(&s) {
                return Err(VerbsError::StaleHandle(s.to_string()));
            }
        }
        let nonce = self.nonce;
        let host = self.host_mut(addr)?;
        let qp_num = (nonce << 16) | host.next_qp_num;
        host.next_qp_num += 1;
        let id = QpId(self.fresh_handle());
        self.qps.insert(
            id,
            QpRecord {
                addr,
                pd,
                qp_num,
                state: QpState::Reset,
                send_cq,
                recv_cq,
                srq,
                remote: None,
                conn: None,
                send_queue: VecDeque::new(),
                recv_queue: VecDeque::new(),
            },
        );
        self.qp_nums.insert((addr, qp_num), id);
        Ok((id, qp_num))
    }

    fn qp(&self, qp: QpId) -> Result<&QpRecord, VerbsError> {
        self.qps
            .get(&qp)
            .ok_or_else(|| VerbsError::StaleHandle(qp.to_string()))
    }

    fn qp_mut(&mut self, qp: QpId) -> Result<&mut QpRecord, VerbsError> {
        self.qps
            .get_mut(&qp)
            .ok_or_else(|| VerbsError::StaleHandle(qp.to_string()))
    }

    pub fn qp_num(&self, qp: QpId) -> Result<u32, VerbsError> {
        Ok(self.qp(qp)?.qp_num)
    }

    pub fn qp_state(&self, qp: QpId) -> Result<QpState, VerbsError> {
        Ok(self.qp(qp)?.state)
    }

    pub fn qp_conn(&self, qp: QpId) -> Result<Option<ConnId>, VerbsError> {
        Ok(self.qp(qp)?.conn)
    }

    fn qp_ctx(&self, qp: QpId) -> Result<CtxId, VerbsError> {
        let pd = self.qp(qp)?.pd;
        Ok(self.pd(pd)?.ctx)
    }

    pub fn modify_qp(&mut self, qp: QpId, transition: QpTransition) -> Result<(), VerbsError> {
        let from = self.qp(qp)?.state;
        match (from, transition) {
            (QpState::Reset, QpTransition::ToInit) => {
                self.qp_mut(qp)?.state = QpState::Init;
            }
            (
                QpState::Init,
                QpTransition::ToRtr {
                    remote_lid,
                    remote_qp_num,
                },
            ) => {
                let unknown = VerbsError::RemoteUnknown {
                    lid: remote_lid,
                    qp_num: remote_qp_num,
                };
                let Some(&raddr) = self.lids.get(&remote_lid) else {
                    return Err(unknown);
                };
                let Some(&rqp) = self.qp_nums.get(&(raddr, remote_qp_num)) else {
                    return Err(unknown);
                };
                let laddr = self.qp(qp)?.addr;
                let key = (qp.min(rqp), qp.max(rqp));
                let conn = match self.pair_conns.get(&key) {
                    Some(c) => *c,
                    None => {
                        let c = self.fabric.connect(laddr, raddr)?;
                        self.pair_conns.insert(key, c);
                        self.endpoints.insert((c, laddr), qp);
                        self.endpoints.insert((c, raddr), rqp);
                        c
                    }
                };
                let rec = self.qp_mut(qp)?;
                rec.remote = Some((remote_lid, remote_qp_num));
                rec.conn = Some(conn);
                rec.state = QpState::Rtr;
            }
            (QpState::Rtr, QpTransition::ToRts) => {
                self.qp_mut(qp)?.state = QpState::Rts;
            }
            _ => return Err(VerbsError::InvalidTransition { from, transition }),
        }
        Ok(())
    }

    pub fn destroy(&mut self, handle: ResourceHandle) -> Result<(), VerbsError> {
        let stale = || VerbsError::StaleHandle(format!("{handle:?}"));
        let busy = || VerbsError::ResourceBusy(format!("{handle:?}"));
        match handle {
            ResourceHandle::Ctx(id) => {
                self.ctx(id)?;
                if self.pds.values().any(|p| p.ctx == id) || self.cqs.values().any(|c| c.ctx == id)
                {
                    return Err(busy());
                }
                self.ctxs.remove(&id);
            }
            ResourceHandle::Pd(id) => {
                self.pd(id)?;
                if self.mrs.values().any(|m| m.pd == id)
                    || self.qps.values().any(|q| q.pd == id)
                    || self.srqs.values().any(|s| s.pd == id)
                {
                    return Err(busy());
                }
                self.pds.remove(&id);
            }
            ResourceHandle::Mr(id) => {
                self.mrs.remove(&id).ok_or_else(stale)?;
                self.mr_owner.remove(&id);
            }
            ResourceHandle::Cq(id) => {
                if !self.cqs.contains_key(&id) {
                    return Err(stale());
                }
                if self
                    .qps
                    .values()
                    .any(|q| q.send_cq == id || q.recv_cq == id)
                {
                    return Err(busy());
                }
                // pending events go with it
                self.cqs.remove(&id);
            }
            ResourceHandle::Qp(id) => {
                let rec = self.qps.remove(&id).ok_or_else(stale)?;
                self.qp_nums.remove(&(rec.addr, rec.qp_num));
                self.endpoints.retain(|_, q| *q != id);
                self.pair_conns.retain(|k, _| k.0 != id && k.1 != id);
            }
            ResourceHandle::Srq(id) => {
                if !self.srqs.contains_key(&id) {
                    return Err(stale());
                }
                if self.qps.values().any(|q| q.srq == Some(id)) {
                    return Err(busy());
                }
                self.srqs.remove(&id);
            }
        }
        Ok(())
    }

    // ---- dispatched entry points ---------------------------------------

    pub fn post_send(&mut self, qp: QpId, wr: &WorkRequest) -> Result<(), VerbsError> {
        let f = self.ctx(self.qp_ctx(qp)?)?.dispatch.slots.post_send.clone();
        f(self, qp, wr)
    }

    pub fn post_recv(&mut self, qp: QpId, wr: &WorkRequest) -> Result<(), VerbsError> {
        let f = self.ctx(self.qp_ctx(qp)?)?.dispatch.slots.post_recv.clone();
        f(self, qp, wr)
    }

    pub fn post_srq_recv(&mut self, srq: SrqId, wr: &WorkRequest) -> Result<(), VerbsError> {
        let pd = self
            .srqs
            .get(&srq)
            .ok_or_else(|| VerbsError::StaleHandle(srq.to_string()))?
            .pd;
        let ctx = self.pd(pd)?.ctx;
        let f = self.ctx(ctx)?.dispatch.slots.post_srq_recv.clone();
        f(self, srq, wr)
    }

    pub fn poll_cq(&mut self, cq: CqId, max: usize) -> Result<Vec<CompletionEvent>, VerbsError> {
        let ctx = self
            .cqs
            .get(&cq)
            .ok_or_else(|| VerbsError::StaleHandle(cq.to_string()))?
            .ctx;
        let f = self.ctx(ctx)?.dispatch.slots.poll_cq.clone();
        f(self, cq, max)
    }

    // ---- native implementations ----------------------------------------

    fn gather(&self, addr: NodeAddr, sg: &[Sge]) -> Result<Vec<u8>, VerbsError> {
        let mut out = Vec::new();
        for s in sg {
            self.check_lkey(addr, s, AccessFlags::default())?;
            out.extend(self.read_memory(addr, s.addr, s.length as u64)?);
        }
        Ok(out)
    }

    fn check_lkey(&self, addr: NodeAddr, s: &Sge, need: AccessFlags) -> Result<(), VerbsError> {
        let ok = self.mrs.values().any(|m| {
            m.lkey == s.lkey
                && self.mr_owner.get(&m.mr_id) == Some(&addr)
                && m.access.contains(need)
                && s.addr >= m.base_addr
                && s.addr + s.length as u64 <= m.base_addr + m.length
        });
        if ok {
            Ok(())
        } else {
            Err(VerbsError::InvalidLkey(s.lkey))
        }
    }

    pub fn native_post_send(&mut self, qp: QpId, wr: &WorkRequest) -> Result<(), VerbsError> {
        wr.validate_shape()?;
        let rec = self.qp(qp)?;
        if wr.opcode == Opcode::Recv {
            return Err(VerbsError::InvalidWorkRequest("recv posted to send queue"));
        }
        if rec.state != QpState::Rts {
            return Err(VerbsError::InvalidState {
                qp_num: rec.qp_num,
                state: rec.state,
            });
        }
        let addr = rec.addr;
        let conn = rec.conn.expect("RTS implies a bound connection");
        let mut frame = match wr.opcode {
            Opcode::Send | Opcode::RdmaWrite | Opcode::RdmaWriteWithImm => {
                let bytes = match (&wr.inline_data, wr.inline_flag) {
                    (Some(d), true) => d.clone(),
                    _ => self.gather(addr, &wr.sg_list)?,
                };
                let kind = if wr.opcode == Opcode::Send {
                    FrameKind::SendData
                } else {
                    FrameKind::RdmaWriteData
                };
                let mut f = Frame::new(kind, bytes);
                f.imm = wr.imm;
                f
            }
            Opcode::RdmaRead => {
                for s in &wr.sg_list {
                    self.check_lkey(addr, s, AccessFlags::LOCAL_WRITE)?;
                }
                let mut f = Frame::new(
                    FrameKind::RdmaReadReq,
                    (wr.total_len() as u32).to_le_bytes().to_vec(),
                );
                f.imm = None;
                f
            }
            _ => unreachable!("shape validated"),
        };
        if wr.opcode.is_rdma() {
            frame.remote_addr = wr.remote_addr;
            frame.rkey = wr.rkey;
        }
        frame.conn_id = conn;
        let byte_len = if wr.opcode == Opcode::RdmaRead {
            wr.total_len() as u32
        } else {
            frame.payload.len() as u32
        };
        self.fabric.send(addr, frame)?;
        self.qp_mut(qp)?.send_queue.push_back(OutstandingSend {
            wr: wr.clone(),
            byte_len,
        });
        Ok(())
    }

    pub fn native_post_recv(&mut self, qp: QpId, wr: &WorkRequest) -> Result<(), VerbsError> {
        wr.validate_shape()?;
        if wr.opcode != Opcode::Recv {
            return Err(VerbsError::InvalidWorkRequest("only recv may be posted here"));
        }
        let rec = self.qp_mut(qp)?;
        if rec.state < QpState::Init {
            return Err(VerbsError::InvalidState {
                qp_num: rec.qp_num,
                state: rec.state,
            });
        }
        if rec.srq.is_some() {
            return Err(VerbsError::InvalidWorkRequest("qp receives through its srq"));
        }
        rec.recv_queue.push_back(wr.clone());
        Ok(())
    }

    pub fn native_post_srq_recv(&mut self, srq: SrqId, wr: &WorkRequest) -> Result<(), VerbsError> {
        wr.validate_shape()?;
        if wr.opcode != Opcode::Recv {
            return Err(VerbsError::InvalidWorkRequest("only recv may be posted here"));
        }
        self.srqs
            .get_mut(&srq)
            .ok_or_else(|| VerbsError::StaleHandle(srq.to_string()))?
            .queue
            .push_back(wr.clone());
        Ok(())
    }

    pub fn native_poll_cq(
        &mut self,
        cq: CqId,
        max: usize,
    ) -> Result<Vec<CompletionEvent>, VerbsError> {
        let c = self
            .cqs
            .get_mut(&cq)
            .ok_or_else(|| VerbsError::StaleHandle(cq.to_string()))?;
        let n = max.min(c.events.len());
        let out: Vec<_> = c.events.drain(..n).collect();
        self.stats.completions_polled += out.len() as u64;
        Ok(out)
    }

    // ---- progress --------------------------------------------------------

    /// Advances virtual time, delivering due frames and posting completions.
    pub fn progress(&mut self, ticks: u64) -> Result<(), VerbsError> {
        for _ in 0..ticks {
            self.fabric.tick();
            self.deliver_due()?;
        }
        Ok(())
    }

    /// Delivers everything already due without advancing time.
    pub fn deliver_due(&mut self) -> Result<(), VerbsError> {
        while let Some(d) = self.fabric.pop_due()? {
            self.handle_delivery(d)?;
        }
        Ok(())
    }

    /// Jumps to `tick` (or the next due frame, if earlier), delivering what
    /// falls due on the way. Equivalent to ticking one by one.
    pub fn advance_to(&mut self, tick: u64) -> Result<(), VerbsError> {
        while self.fabric.now() < tick {
            match self.fabric.next_due() {
                Some(due) if due <= tick => {
                    let to = due.max(self.fabric.now() + 1);
                    self.fabric.advance_to(to);
                    self.deliver_due()?;
                }
                _ => {
                    self.fabric.advance_to(tick);
                }
            }
        }
        Ok(())
    }

    fn push_completion(&mut self, cq: CqId, ev: CompletionEvent) {
        if let Some(c) = self.cqs.get_mut(&cq) {
            if c.events.len() < c.capacity {
                c.events.push_back(ev);
                self.stats.completions_generated += 1;
            } else {
                c.overruns += 1;
            }
        }
    }

    fn reply(&mut self, from: NodeAddr, conn: ConnId, kind: FrameKind, payload: Vec<u8>) -> Result<(), VerbsError> {
        let mut f = Frame::new(kind, payload);
        f.conn_id = conn;
        if kind == FrameKind::DeliveryAck {
            self.fabric.send_ack(from, f)?;
        } else {
            self.fabric.send(from, f)?;
        }
        Ok(())
    }

    fn take_recv_wqe(&mut self, qp: QpId) -> Option<WorkRequest> {
        let rec = self.qps.get_mut(&qp)?;
        match rec.srq {
            Some(s) => self.srqs.get_mut(&s)?.queue.pop_front(),
            None => rec.recv_queue.pop_front(),
        }
    }

    fn remote_mr(&self, qp: QpId, rkey: u32, base: u64, len: u64, need: AccessFlags) -> bool {
        let Some(rec) = self.qps.get(&qp) else {
            return false;
        };
        self.mrs.values().any(|m| {
            m.pd == rec.pd
                && m.rkey == rkey
                && m.access.contains(need)
                && base >= m.base_addr
                && base + len <= m.base_addr + m.length
        })
    }

    fn scatter(&mut self, addr: NodeAddr, sg: &[Sge], bytes: &[u8]) -> Result<(), VerbsError> {
        let mut off = 0usize;
        for s in sg {
            if off >= bytes.len() {
                break;
            }
            let n = (s.length as usize).min(bytes.len() - off);
            self.write_memory(addr, s.addr, &bytes[off..off + n])?;
            off += n;
        }
        Ok(())
    }

    fn handle_delivery(&mut self, d: Delivery) -> Result<(), VerbsError> {
        self.stats.frames_handled += 1;
        let conn = d.frame.conn_id;
        let to = d.to;
        let Some(&qp) = self.endpoints.get(&(conn, to)) else {
            // destination queue pair is gone
            if d.frame.kind.is_application_originated() {
                let status = WcStatus::RemoteInvalidRequest as u8;
                match d.frame.kind {
                    FrameKind::RdmaReadReq => {
                        self.reply(to, conn, FrameKind::RdmaReadResp, vec![status])?
                    }
                    _ => self.reply(to, conn, FrameKind::DeliveryAck, vec![status])?,
                }
            }
            return Ok(());
        };
        match d.frame.kind {
            FrameKind::SendData => self.on_send_data(qp, to, d.frame),
            FrameKind::RdmaWriteData => self.on_write_data(qp, to, d.frame),
            FrameKind::RdmaReadReq => self.on_read_req(qp, to, d.frame),
            FrameKind::DeliveryAck => {
                let status = d
                    .frame
                    .payload
                    .first()
                    .and_then(|b| WcStatus::from_u8(*b))
                    .unwrap_or(WcStatus::RemoteInvalidRequest);
                self.retire_send(qp, status, None)
            }
            FrameKind::RdmaReadResp => {
                let status = d
                    .frame
                    .payload
                    .first()
                    .and_then(|b| WcStatus::from_u8(*b))
                    .unwrap_or(WcStatus::RemoteInvalidRequest);
                let data = d.frame.payload.get(1..).unwrap_or(&[]).to_vec();
                self.retire_send(qp, status, Some(data))
            }
        }
    }

    fn receiver_ready(&self, qp: QpId) -> bool {
        self.qps
            .get(&qp)
            .map(|q| q.state >= QpState::Rtr)
            .unwrap_or(false)
    }

    fn on_send_data(&mut self, qp: QpId, to: NodeAddr, frame: Frame) -> Result<(), VerbsError> {
        let conn = frame.conn_id;
        if !self.receiver_ready(qp) {
            return self.reply(to, conn, FrameKind::DeliveryAck, vec![WcStatus::ReceiverNotReady as u8]);
        }
        let Some(wqe) = self.take_recv_wqe(qp) else {
            return self.reply(to, conn, FrameKind::DeliveryAck, vec![WcStatus::ReceiverNotReady as u8]);
        };
        let rec = self.qp(qp)?;
        let (recv_cq, qp_num) = (rec.recv_cq, rec.qp_num);
        let (status, byte_len) = if wqe.total_len() < frame.payload.len() as u64 {
            (WcStatus::LocalLengthError, 0)
        } else if wqe
            .sg_list
            .iter()
            .any(|s| self.check_lkey(to, s, AccessFlags::LOCAL_WRITE).is_err())
        {
            (WcStatus::LocalProtectionError, 0)
        } else {
            self.scatter(to, &wqe.sg_list, &frame.payload)?;
            (WcStatus::Success, frame.payload.len() as u32)
        };
        self.push_completion(
            recv_cq,
            CompletionEvent {
                wr_id: wqe.wr_id,
                status,
                opcode: Opcode::Recv,
                byte_len,
                imm: frame.imm,
                qp_num,
            },
        );
        let ack = if status.is_ok() {
            WcStatus::Success
        } else {
            WcStatus::RemoteInvalidRequest
        };
        self.reply(to, conn, FrameKind::DeliveryAck, vec![ack as u8])
    }

    fn on_write_data(&mut self, qp: QpId, to: NodeAddr, frame: Frame) -> Result<(), VerbsError> {
        let conn = frame.conn_id;
        if !self.receiver_ready(qp) {
            return self.reply(to, conn, FrameKind::DeliveryAck, vec![WcStatus::ReceiverNotReady as u8]);
        }
        let base = frame.remote_addr.unwrap_or(0);
        let rkey = frame.rkey.unwrap_or(0);
        let len = frame.payload.len() as u64;
        if !self.remote_mr(qp, rkey, base, len, AccessFlags::REMOTE_WRITE) {
            return self.reply(to, conn, FrameKind::DeliveryAck, vec![WcStatus::RemoteAccessError as u8]);
        }
        if let Some(imm) = frame.imm {
            let Some(wqe) = self.take_recv_wqe(qp) else {
                return self.reply(to, conn, FrameKind::DeliveryAck, vec![WcStatus::ReceiverNotReady as u8]);
            };
            if len > 0 {
                self.write_memory(to, base, &frame.payload)?;
            }
            let rec = self.qp(qp)?;
            let (recv_cq, qp_num) = (rec.recv_cq, rec.qp_num);
            self.push_completion(
                recv_cq,
                CompletionEvent {
                    wr_id: wqe.wr_id,
                    status: WcStatus::Success,
                    opcode: Opcode::RecvRdmaWithImm,
                    byte_len: len as u32,
                    imm: Some(imm),
                    qp_num,
                },
            );
        } else if len > 0 {
            self.write_memory(to, base, &frame.payload)?;
        }
        self.reply(to, conn, FrameKind::DeliveryAck, vec![WcStatus::Success as u8])
    }

    fn on_read_req(&mut self, qp: QpId, to: NodeAddr, frame: Frame) -> Result<(), VerbsError> {
        let conn = frame.conn_id;
        let base = frame.remote_addr.unwrap_or(0);
        let rkey = frame.rkey.unwrap_or(0);
        let len = frame
            .payload
            .get(..4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as u64)
            .unwrap_or(0);
        if !self.receiver_ready(qp) || !self.remote_mr(qp, rkey, base, len, AccessFlags::REMOTE_READ)
        {
            return self.reply(to, conn, FrameKind::RdmaReadResp, vec![WcStatus::RemoteAccessError as u8]);
        }
        let mut payload = vec![WcStatus::Success as u8];
        payload.extend(self.read_memory(to, base, len)?);
        self.reply(to, conn, FrameKind::RdmaReadResp, payload)
    }

    fn retire_send(
        &mut self,
        qp: QpId,
        status: WcStatus,
        read_data: Option<Vec<u8>>,
    ) -> Result<(), VerbsError> {
        let rec = self.qp_mut(qp)?;
        let Some(out) = rec.send_queue.pop_front() else {
            return Ok(());
        };
        let (addr, send_cq, qp_num) = (rec.addr, rec.send_cq, rec.qp_num);
        let mut status = status;
        if let (Some(data), true) = (read_data, status.is_ok()) {
            if self.scatter(addr, &out.wr.sg_list, &data).is_err() {
                status = WcStatus::LocalProtectionError;
            }
        }
        // errors always complete, even for unsignaled requests
        if out.wr.signaled || !status.is_ok() {
            self.push_completion(
                send_cq,
                CompletionEvent {
                    wr_id: out.wr.wr_id,
                    status,
                    opcode: out.wr.opcode,
                    byte_len: if status.is_ok() { out.byte_len } else { 0 },
                    imm: None,
                    qp_num,
                },
            );
        }
        Ok(())
    }

    // ---- introspection --------------------------------------------------

    pub fn snapshot(&self) -> EngineSnapshot {
        let mut hosts = Vec::new();
        for (addr, h) in &self.hosts {
            let addr = *addr;
            hosts.push(HostSnapshot {
                addr,
                lid: h.lid,
                contexts: self
                    .ctxs
                    .iter()
                    .filter(|(_, c)| c.addr == addr)
                    .map(|(id, _)| *id)
                    .collect(),
                pds: self
                    .pds
                    .iter()
                    .filter(|(_, p)| p.addr == addr)
                    .map(|(id, p)| ProtectionDomain {
                        pd_id: *id,
                        global_pd_uid: p.global_uid,
                    })
                    .collect(),
                mrs: self
                    .mrs
                    .values()
                    .filter(|m| self.mr_owner.get(&m.mr_id) == Some(&addr))
                    .copied()
                    .collect(),
                cqs: self
                    .cqs
                    .iter()
                    .filter(|(_, c)| c.addr == addr)
                    .map(|(id, c)| CqSnapshot {
                        id: *id,
                        capacity: c.capacity,
                        pending: c.events.iter().cloned().collect(),
                        overruns: c.overruns,
                    })
                    .collect(),
                qps: self
                    .qps
                    .iter()
                    .filter(|(_, q)| q.addr == addr)
                    .map(|(id, q)| QpSnapshot {
                        id: *id,
                        qp_num: q.qp_num,
                        state: q.state,
                        pd: q.pd,
                        send_cq: q.send_cq,
                        recv_cq: q.recv_cq,
                        srq: q.srq,
                        remote: q.remote,
                        conn: q.conn,
                        send_queue: q
                            .send_queue
                            .iter()
                            .map(|o| QueuedWqe {
                                wr_id: o.wr.wr_id,
                                opcode: o.wr.opcode,
                                signaled: o.wr.signaled,
                            })
                            .collect(),
                        recv_queue: q
                            .recv_queue
                            .iter()
                            .map(|w| QueuedWqe {
                                wr_id: w.wr_id,
                                opcode: w.opcode,
                                signaled: w.signaled,
                            })
                            .collect(),
                    })
                    .collect(),
                srqs: self
                    .srqs
                    .iter()
                    .filter(|(_, s)| s.addr == addr)
                    .map(|(id, s)| SrqSnapshot {
                        id: *id,
                        limit: s.limit,
                        queue: s
                            .queue
                            .iter()
                            .map(|w| QueuedWqe {
                                wr_id: w.wr_id,
                                opcode: w.opcode,
                                signaled: w.signaled,
                            })
                            .collect(),
                    })
                    .collect(),
            });
        }
        EngineSnapshot {
            epoch: self.config.epoch,
            now: self.fabric.now(),
            hosts,
            in_flight: self.fabric.in_flight_frames(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QueuedWqe {
    pub wr_id: u64,
    pub opcode: Opcode,
    pub signaled: bool,
}

#[derive(Clone, Debug)]
pub struct CqSnapshot {
    pub id: CqId,
    pub capacity: usize,
    pub pending: Vec<CompletionEvent>,
    pub overruns: u64,
}

#[derive(Clone, Debug)]
pub struct QpSnapshot {
    pub id: QpId,
    pub qp_num: u32,
    pub state: QpState,
    pub pd: PdId,
    pub send_cq: CqId,
    pub recv_cq: CqId,
    pub srq: Option<SrqId>,
    pub remote: Option<(u16, u32)>,
    pub conn: Option<ConnId>,
    pub send_queue: Vec<QueuedWqe>,
    pub recv_queue: Vec<QueuedWqe>,
}

#[derive(Clone, Debug)]
pub struct SrqSnapshot {
    pub id: SrqId,
    pub limit: u32,
    pub queue: Vec<QueuedWqe>,
}

#[derive(Clone, Debug)]
pub struct HostSnapshot {
    pub addr: NodeAddr,
    pub lid: u16,
    pub contexts: Vec<CtxId>,
    pub pds: Vec<ProtectionDomain>,
    pub mrs: Vec<MemoryRegion>,
    pub cqs: Vec<CqSnapshot>,
    pub qps: Vec<QpSnapshot>,
    pub srqs: Vec<SrqSnapshot>,
}

/// Read-only view of every live resource and in-flight frame, for test
/// oracles.
#[derive(Clone, Debug)]
pub struct EngineSnapshot {
    pub epoch: u32,
    pub now: u64,
    pub hosts: Vec<HostSnapshot>,
    pub in_flight: Vec<InFlightFrame>,
}

impl EngineSnapshot {
    pub fn host(&self, addr: NodeAddr) -> Option<&HostSnapshot> {
        self.hosts.iter().find(|h| h.addr == addr)
    }
}
