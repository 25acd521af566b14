// SPDX-License-Identifier: Apache-2.0
//! Multi-node harness: one simulated fabric, one plugin and one workload per
//! node, a coordinator core, and the checkpoint, resume and restart flows.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coordinator::{
    AfterCheckpoint, CheckpointDriver, CoordError, CoordinatorCore, CoordinatorSession, LocalSession, Phase, TcpSession,
};
use crate::engine::{Engine, EngineConfig, VerbsError};
use crate::fabric::{Fabric, FabricConfig, NodeAddr, TransportMode};
use crate::image::{decode_image, encode_image, read_image, write_image, ImageError, ImageStats, MemorySegment, NodeImage};
use crate::plugin::{drain_all, DrainReport, IdPolicy, NodePlugin, PluginConfig, PluginError, RestartReport};
use crate::workloads::{AppStats, Application, Endpoint, SpecError, Transcript, Verbs, WorkloadError, WorkloadSpec};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Plugin(#[from] PluginError),
    #[error(transparent)]
    Verbs(#[from] VerbsError),
    #[error(transparent)]
    Coordinator(#[from] CoordError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("no image for node {node} at {path}")]
    ImageMissing { node: u32, path: PathBuf },
    #[error("bad checkpoint directory: {0}")]
    Manifest(String),
    #[error("run stalled at tick {tick} with work outstanding")]
    Stalled { tick: u64 },
    #[error("checkpoint at iteration {0} was never reached")]
    CheckpointNotReached(u64),
}

type CResult<T> = Result<T, ClusterError>;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClusterConfig {
    pub fabric: FabricConfig,
    pub plugin: PluginConfig,
    /// Real-id offset for the first epoch; defaults to the epoch.
    pub nonce: Option<u32>,
    pub compress: bool,
    /// Images go here when set, otherwise they stay in memory.
    pub ckpt_dir: Option<PathBuf>,
    /// Abort as stalled after this many ticks.
    pub max_ticks: u64,
    /// Ranks sharing one host at launch.
    pub procs_per_node: u32,
    /// External coordinator (`host:port`) for the id exchange.
    pub coordinator: Option<String>,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            fabric: FabricConfig::default(),
            plugin: PluginConfig::default(),
            nonce: None,
            compress: false,
            ckpt_dir: None,
            max_ticks: 1 << 40,
            procs_per_node: 1,
            coordinator: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RestartOptions {
    pub mode: TransportMode,
    /// Pack all ranks onto this many hosts.
    pub hosts: Option<u32>,
    pub nonce: Option<u32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CkptAction {
    Resume,
    Restart(RestartOptions),
    /// Write images and stop.
    Halt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CkptPlan {
    pub at_iteration: u64,
    pub action: CkptAction,
}

#[derive(Clone, Debug, Default)]
pub struct CheckpointRecord {
    pub round: u32,
    pub tick: u64,
    pub iteration: u64,
    /// Frames on the fabric when the nodes were quiesced.
    pub in_flight_at_quiesce: usize,
    pub drain: Vec<DrainReport>,
    pub drain_ticks: u64,
    /// Invariant violations found at the quiesce points.
    pub audit: Vec<String>,
    pub images: BTreeMap<u32, String>,
    pub image_stats: Vec<ImageStats>,
}

impl CheckpointRecord {
    pub fn drain_complete(&self) -> bool {
        self.drain.iter().all(|r| r.complete)
    }

    pub fn image_bytes(&self) -> u64 {
        self.image_stats.iter().map(|s| s.bytes_written).sum()
    }
}

#[derive(Clone, Debug)]
pub struct RestartRecord {
    pub epoch: u32,
    pub mode: TransportMode,
    pub placement: Vec<NodeAddr>,
    pub per_node: Vec<RestartReport>,
    /// Ticks from restart until node 0 finished its next iteration.
    pub ticks_to_progress: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub transcripts: Vec<Transcript>,
    pub stats: Vec<AppStats>,
    pub tokens: Vec<Option<Vec<u64>>>,
    pub ticks: u64,
    pub checkpoints: Vec<CheckpointRecord>,
    pub restarts: Vec<RestartRecord>,
    pub halted: bool,
}

impl RunResult {
    pub fn digests(&self) -> Vec<[u8; 32]> {
        self.transcripts.iter().map(Transcript::digest).collect()
    }
}

/// Everything needed besides the images to bring a checkpoint back.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: WorkloadSpec,
    pub nodes: u32,
    pub fabric: FabricConfig,
    pub epoch: u32,
    pub round: u32,
    pub memory_size: usize,
}

impl Manifest {
    pub fn from_json(raw: &[u8]) -> Result<Self, ClusterError> {
        serde_json::from_slice(raw).map_err(|e| ClusterError::Manifest(e.to_string()))
    }
}

pub fn image_path(dir: &Path, node: u32) -> PathBuf {
    dir.join(format!("node-{node}.img"))
}

fn consolidated(rank: u32, hosts: u32) -> NodeAddr {
    NodeAddr::new(rank % hosts, rank / hosts)
}

pub struct Cluster {
    spec: WorkloadSpec,
    nodes: u32,
    cfg: ClusterConfig,
    memory_size: usize,
    engine: Engine,
    plugins: Vec<NodePlugin>,
    apps: Vec<Box<dyn Application>>,
    coord: Rc<RefCell<CoordinatorCore>>,
    clients: Vec<u32>,
    remote: Option<Vec<TcpSession>>,
    ticks_before: u64,
    checkpoints: Vec<CheckpointRecord>,
    restarts: Vec<RestartRecord>,
}

impl Cluster {
    /// Builds the nodes, creates and connects every workload resource.
    pub fn launch(spec: &WorkloadSpec, nodes: u32, cfg: ClusterConfig) -> CResult<Self> {
        spec.validate(nodes)?;
        let memory_size = memory_for(spec, nodes);
        let engine = Engine::new(
            Fabric::new(cfg.fabric.clone()),
            EngineConfig {
                epoch: 0,
                nonce: cfg.nonce,
                memory_size,
            },
        );
        let mut c = Self {
            spec: spec.clone(),
            nodes,
            memory_size,
            engine,
            plugins: Vec::new(),
            apps: Vec::new(),
            coord: Rc::new(RefCell::new(CoordinatorCore::new())),
            clients: Vec::new(),
            remote: None,
            ticks_before: 0,
            checkpoints: Vec::new(),
            restarts: Vec::new(),
            cfg,
        };
        let per_host = c.cfg.procs_per_node.max(1);
        for n in 0..nodes {
            let addr = NodeAddr::new(n / per_host, n % per_host);
            c.engine.attach(addr)?;
            c.plugins.push(NodePlugin::new(n, addr, c.cfg.plugin.clone()));
            c.apps.push(spec.build(n, nodes));
            c.clients.push(c.coord.borrow_mut().register(n)?);
        }
        if let Some(addr) = c.cfg.coordinator.clone() {
            c.remote = Some(register_remote(&addr, nodes)?);
        }
        let mut endpoints: Vec<Endpoint> = Vec::new();
        for (app, plugin) in c.apps.iter_mut().zip(&mut c.plugins) {
            let mut v = Verbs {
                engine: &mut c.engine,
                plugin,
            };
            endpoints.extend(app.setup(&mut v)?);
        }
        if c.cfg.plugin.id_policy == IdPolicy::GloballyUnique {
            // virtual ids mean nothing to the engine; peers learn the real
            // ones through the coordinator before connecting
            c.exchange_directory()?;
        }
        for (app, plugin) in c.apps.iter_mut().zip(&mut c.plugins) {
            let mut v = Verbs {
                engine: &mut c.engine,
                plugin,
            };
            app.connect(&mut v, &endpoints)?;
        }
        Ok(c)
    }

    fn exchange_directory(&mut self) -> CResult<()> {
        exchange(&mut self.plugins, &self.coord, &self.clients, self.remote.as_deref_mut())
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub fn engine_mut(&mut self) -> &mut Engine {
        &mut self.engine
    }

    pub fn plugins(&self) -> &[NodePlugin] {
        &self.plugins
    }

    pub fn apps(&self) -> &[Box<dyn Application>] {
        &self.apps
    }

    pub fn coordinator(&self) -> Rc<RefCell<CoordinatorCore>> {
        self.coord.clone()
    }

    pub fn checkpoints(&self) -> &[CheckpointRecord] {
        &self.checkpoints
    }

    pub fn done(&self) -> bool {
        self.apps.iter().all(|a| a.done())
    }

    pub fn ticks(&self) -> u64 {
        self.ticks_before + self.engine.now()
    }

    fn step_node(&mut self, i: usize) -> CResult<bool> {
        let mut v = Verbs {
            engine: &mut self.engine,
            plugin: &mut self.plugins[i],
        };
        Ok(self.apps[i].step(&mut v)?)
    }

    /// Runs until every workload finishes. With a plan, a checkpoint fires
    /// once node 0 reaches the iteration, right after its step.
    pub fn run(&mut self, plan: Option<CkptPlan>) -> CResult<bool> {
        let mut pending = plan;
        let mut measuring = match self.restarts.last() {
            Some(r) if r.ticks_to_progress.is_none() => Some((self.ticks(), self.apps[0].iteration())),
            _ => None,
        };
        while !self.done() {
            let mut any = false;
            for i in 0..self.apps.len() {
                any |= self.step_node(i)?;
                if i != 0 {
                    continue;
                }
                if let Some((t0, it0)) = measuring {
                    if self.apps[0].iteration() > it0 || self.apps[0].done() {
                        let dt = self.ticks() - t0;
                        if let Some(r) = self.restarts.last_mut() {
                            r.ticks_to_progress = Some(dt);
                        }
                        measuring = None;
                    }
                }
                if let Some(p) = pending {
                    if self.apps[0].iteration() >= p.at_iteration {
                        pending = None;
                        match p.action {
                            CkptAction::Resume => {
                                self.checkpoint(AfterCheckpoint::Resume)?;
                            }
                            CkptAction::Halt => {
                                self.checkpoint(AfterCheckpoint::Halt)?;
                                return Ok(false);
                            }
                            CkptAction::Restart(opts) => {
                                let images = self.checkpoint(AfterCheckpoint::Halt)?;
                                self.restart(images, opts)?;
                                measuring = Some((self.ticks(), self.apps[0].iteration()));
                            }
                        }
                        any = true;
                    }
                }
            }
            if self.ticks() > self.cfg.max_ticks {
                return Err(ClusterError::Stalled { tick: self.ticks() });
            }
            if any {
                self.engine.progress(1)?;
            } else {
                match self.engine.fabric().next_due() {
                    Some(due) => {
                        let to = due.max(self.engine.now() + 1);
                        self.engine.advance_to(to)?;
                    }
                    None => return Err(ClusterError::Stalled { tick: self.ticks() }),
                }
            }
        }
        if let Some(p) = pending {
            return Err(ClusterError::CheckpointNotReached(p.at_iteration));
        }
        Ok(true)
    }

    pub fn result(&self, halted: bool) -> RunResult {
        RunResult {
            transcripts: self.apps.iter().map(|a| a.transcript().clone()).collect(),
            stats: self.apps.iter().map(|a| a.stats()).collect(),
            tokens: self.apps.iter().map(|a| a.tokens().map(<[u64]>::to_vec)).collect(),
            ticks: self.ticks(),
            checkpoints: self.checkpoints.clone(),
            restarts: self.restarts.clone(),
            halted,
        }
    }

    fn audit(&self) -> Vec<String> {
        let snap = self.engine.snapshot();
        self.plugins
            .iter()
            .flat_map(|p| {
                p.audit(&snap)
                    .into_iter()
                    .map(move |v| format!("node {}: {v}", p.node_id()))
            })
            .collect()
    }

    /// Quiesce, drain, write. Returns the images so a restart can use them.
    pub fn checkpoint(&mut self, after: AfterCheckpoint) -> CResult<Vec<NodeImage>> {
        let tick = self.ticks();
        let iteration = self.apps[0].iteration();
        let epoch = self.engine.epoch();
        let coord = self.coord.clone();
        let mut driver = Driver {
            cluster: self,
            epoch,
            images: BTreeMap::new(),
            stats: Vec::new(),
            audit: Vec::new(),
            in_flight: 0,
            drain_ticks: 0,
        };
        let summary = coord
            .borrow_mut()
            .broadcast_checkpoint(&mut driver, after)?;
        let Driver {
            images,
            stats,
            audit,
            in_flight,
            drain_ticks,
            ..
        } = driver;
        if let Some(remote) = self.remote.as_mut() {
            // replay this round's phase log so the remote coordinator
            // enforces and records the same barrier order
            remote[0].request_checkpoint()?;
            let core = self.coord.borrow();
            for e in core.events().iter().filter(|e| e.round == summary.round) {
                let idx = self.clients.iter().position(|c| *c == e.client_id).expect("known client");
                remote[idx].ack_phase(e.phase)?;
            }
        }
        if let Some(dir) = &self.cfg.ckpt_dir {
            let m = Manifest {
                spec: self.spec.clone(),
                nodes: self.nodes,
                fabric: self.cfg.fabric.clone(),
                epoch,
                round: summary.round,
                memory_size: self.memory_size,
            };
            fs::write(dir.join(MANIFEST), serde_json::to_vec_pretty(&m).expect("manifest"))
                .map_err(ImageError::WriteFailed)?;
        }
        self.checkpoints.push(CheckpointRecord {
            round: summary.round,
            tick,
            iteration,
            in_flight_at_quiesce: in_flight,
            drain: summary.reports.into_values().collect(),
            drain_ticks,
            audit,
            images: summary.images,
            image_stats: stats,
        });
        Ok(images.into_values().collect())
    }

    /// Tears the fabric down and brings every node back from its image on
    /// a fresh engine, possibly with another transport or placement.
    pub fn restart(&mut self, images: Vec<NodeImage>, opts: RestartOptions) -> CResult<()> {
        let epoch = self.engine.epoch() + 1;
        self.ticks_before += self.engine.now();
        self.coord.borrow_mut().begin_restart()?;
        if let Some(first) = self.remote.as_mut().and_then(|r| r.first_mut()) {
            first.request_restart()?;
        }
        let (engine, plugins, apps, record) = rebuild(
            &self.spec,
            self.nodes,
            &self.cfg.fabric,
            self.memory_size,
            epoch,
            images,
            opts,
            &self.coord,
            &self.clients,
            self.remote.as_deref_mut(),
        )?;
        // the old engine, and with it every old connection, goes away here
        self.engine = engine;
        self.plugins = plugins;
        self.apps = apps;
        self.restarts.push(record);
        for &c in &self.clients {
            self.coord.borrow_mut().finish_restart(c)?;
        }
        for s in self.remote.iter_mut().flatten() {
            s.ack_phase(Phase::Running)?;
        }
        Ok(())
    }

    /// Restarts a run from a checkpoint directory.
    pub fn from_checkpoint_dir(dir: &Path, cfg: ClusterConfig, opts: RestartOptions) -> CResult<Self> {
        let raw = fs::read(dir.join(MANIFEST)).map_err(|e| ClusterError::Manifest(format!("{}: {e}", dir.display())))?;
        let m = Manifest::from_json(&raw)?;
        let mut images = Vec::new();
        for n in 0..m.nodes {
            let path = image_path(dir, n);
            if !path.exists() {
                return Err(ClusterError::ImageMissing { node: n, path });
            }
            images.push(read_image(&path)?);
        }
        let coord = Rc::new(RefCell::new(CoordinatorCore::new()));
        let mut clients = Vec::new();
        for n in 0..m.nodes {
            clients.push(coord.borrow_mut().register(n)?);
        }
        coord.borrow_mut().begin_restart()?;
        let mut remote = match &cfg.coordinator {
            Some(addr) => {
                let mut r = register_remote(addr, m.nodes)?;
                r[0].request_restart()?;
                Some(r)
            }
            None => None,
        };
        let fabric = m.fabric.clone();
        let (engine, plugins, apps, record) = rebuild(
            &m.spec,
            m.nodes,
            &fabric,
            m.memory_size,
            m.epoch + 1,
            images,
            opts,
            &coord,
            &clients,
            remote.as_deref_mut(),
        )?;
        for &c in &clients {
            coord.borrow_mut().finish_restart(c)?;
        }
        for s in remote.iter_mut().flatten() {
            s.ack_phase(Phase::Running)?;
        }
        Ok(Self {
            spec: m.spec,
            nodes: m.nodes,
            memory_size: m.memory_size,
            engine,
            plugins,
            apps,
            coord,
            clients,
            remote,
            ticks_before: 0,
            checkpoints: Vec::new(),
            restarts: vec![record],
            cfg: ClusterConfig { fabric, ..cfg },
        })
    }
}

/// Publish, barrier, subscribe for every node. A remote coordinator, when
/// present, carries the exchange; its barrier blocks, so each node waits on
/// its own thread.
fn exchange(
    plugins: &mut [NodePlugin],
    coord: &Rc<RefCell<CoordinatorCore>>,
    clients: &[u32],
    remote: Option<&mut [TcpSession]>,
) -> CResult<()> {
    if let Some(sessions) = remote {
        for (p, s) in plugins.iter().zip(sessions.iter_mut()) {
            p.publish(s)?;
        }
        std::thread::scope(|sc| {
            let waits: Vec<_> = sessions.iter_mut().map(|s| sc.spawn(move || s.barrier())).collect();
            waits
                .into_iter()
                .map(|h| h.join().unwrap_or(Err(CoordError::Timeout)))
                .collect::<Result<Vec<()>, CoordError>>()
        })?;
        for (p, s) in plugins.iter_mut().zip(sessions.iter_mut()) {
            p.subscribe(s)?;
        }
        return Ok(());
    }
    let mut sessions: Vec<LocalSession> = clients
        .iter()
        .map(|&client_id| LocalSession {
            core: coord.clone(),
            client_id,
        })
        .collect();
    for (p, s) in plugins.iter().zip(&mut sessions) {
        p.publish(s)?;
        s.barrier()?;
    }
    coord.borrow().close_barrier()?;
    for (p, s) in plugins.iter_mut().zip(&mut sessions) {
        p.subscribe(s)?;
    }
    Ok(())
}

type Rebuilt = (Engine, Vec<NodePlugin>, Vec<Box<dyn Application>>, RestartRecord);

#[allow(clippy::too_many_arguments)]
fn rebuild(
    spec: &WorkloadSpec,
    nodes: u32,
    fabric: &FabricConfig,
    memory_size: usize,
    epoch: u32,
    mut images: Vec<NodeImage>,
    opts: RestartOptions,
    coord: &Rc<RefCell<CoordinatorCore>>,
    clients: &[u32],
    remote: Option<&mut [TcpSession]>,
) -> CResult<Rebuilt> {
    images.sort_by_key(|i| i.node_id);
    if images.len() != nodes as usize || images.iter().enumerate().any(|(i, img)| img.node_id != i as u32) {
        return Err(ClusterError::Manifest(format!("expected images for nodes 0..{nodes}")));
    }
    let mut fcfg = fabric.clone();
    fcfg.mode = opts.mode;
    if let Some(h) = opts.hosts {
        fcfg.port_count = fcfg.port_count.max(nodes.div_ceil(h.clamp(1, nodes)));
    }
    let mut engine = Engine::new(
        Fabric::new(fcfg),
        EngineConfig {
            epoch,
            nonce: opts.nonce,
            memory_size,
        },
    );
    let mut plugins = Vec::new();
    let mut reports = Vec::new();
    let mut placement = Vec::new();
    let mut states = Vec::new();
    for img in images {
        let addr = match opts.hosts {
            Some(h) => consolidated(img.node_id, h.clamp(1, nodes)),
            None => img.resources.addr,
        };
        engine.attach(addr)?;
        for seg in &img.memory {
            engine.write_memory(addr, seg.base, &seg.bytes)?;
        }
        let mut p = NodePlugin::from_sections(img.resources, img.wqe_log, img.drained, img.translation);
        let resources = p.restart_recreate(&mut engine, addr)?;
        reports.push(RestartReport {
            resources,
            ..RestartReport::default()
        });
        placement.push(addr);
        states.push(img.workload_state);
        plugins.push(p);
    }
    exchange(&mut plugins, coord, clients, remote)?;
    for (p, r) in plugins.iter_mut().zip(&mut reports) {
        r.modifies = p.replay_modifies(&mut engine)?;
    }
    for (p, r) in plugins.iter_mut().zip(&mut reports) {
        r.reposted_recvs = p.repost_recvs(&mut engine)?;
    }
    for (p, r) in plugins.iter_mut().zip(&mut reports) {
        r.reposted_sends = p.repost_sends(&mut engine)?;
    }
    let mut apps = Vec::new();
    for (n, state) in states.iter().enumerate() {
        let mut app = spec.build(n as u32, nodes);
        app.restore(state)?;
        apps.push(app);
    }
    Ok((
        engine,
        plugins,
        apps,
        RestartRecord {
            epoch,
            mode: opts.mode,
            placement,
            per_node: reports,
            ticks_to_progress: None,
        },
    ))
}

fn register_remote(addr: &str, nodes: u32) -> CResult<Vec<TcpSession>> {
    Ok((0..nodes)
        .map(|n| TcpSession::register(addr, n))
        .collect::<Result<_, _>>()?)
}

fn memory_for(spec: &WorkloadSpec, nodes: u32) -> usize {
    let need = spec.memory_needed(nodes) + 4096;
    (need as usize).max(1 << 20).next_power_of_two()
}

struct Driver<'a> {
    cluster: &'a mut Cluster,
    epoch: u32,
    images: BTreeMap<u32, NodeImage>,
    stats: Vec<ImageStats>,
    audit: Vec<String>,
    in_flight: usize,
    drain_ticks: u64,
}

impl Driver<'_> {
    fn node_image(&self, node: u32) -> Result<NodeImage, String> {
        let c = &*self.cluster;
        let i = node as usize;
        let p = c.plugins.get(i).ok_or_else(|| format!("no node {node}"))?;
        let mut memory = Vec::new();
        for (base, len) in p.memory_ranges() {
            let bytes = c
                .engine
                .read_memory(p.addr(), base, len)
                .map_err(|e| e.to_string())?;
            memory.push(MemorySegment { base, bytes });
        }
        let tr = p.translation_section();
        Ok(NodeImage {
            node_id: node,
            epoch: self.epoch,
            memory,
            resources: p.resource_section(),
            wqe_log: p.wqe_log().clone(),
            drained: p.drained().clone(),
            translation: tr,
            workload_state: c.apps[i].save(),
        })
    }
}

impl CheckpointDriver for Driver<'_> {
    type Report = DrainReport;

    fn quiesce(&mut self, node_id: u32) -> Result<(), String> {
        let host = self.cluster.plugins[node_id as usize].addr().node_id;
        self.cluster.engine.fabric_mut().quiesce(host);
        if node_id as usize + 1 == self.cluster.plugins.len() {
            self.in_flight = self.cluster.engine.fabric().in_flight();
            self.audit.extend(self.cluster.audit());
        }
        Ok(())
    }

    fn drain(&mut self, _nodes: &[u32]) -> Result<BTreeMap<u32, DrainReport>, String> {
        let c = &mut *self.cluster;
        let t0 = c.engine.now();
        let mut refs: Vec<&mut NodePlugin> = c.plugins.iter_mut().collect();
        let reports = drain_all(&mut c.engine, &mut refs).map_err(|e| e.to_string())?;
        self.drain_ticks = c.engine.now() - t0;
        self.audit.extend(c.audit());
        Ok(reports.into_iter().map(|r| (r.node_id, r)).collect())
    }

    fn write(&mut self, node_id: u32) -> Result<String, String> {
        let img = self.node_image(node_id)?;
        let compress = self.cluster.cfg.compress;
        let (label, stats) = match &self.cluster.cfg.ckpt_dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| e.to_string())?;
                let path = image_path(dir, node_id);
                let stats = write_image(&img, &path, compress).map_err(|e| e.to_string())?;
                (path.display().to_string(), stats)
            }
            None => {
                let (bytes, stats) = encode_image(&img, compress);
                // round-trip through the format even when nothing hits disk
                let back = decode_image(&bytes).map_err(|e| e.to_string())?;
                self.images.insert(node_id, back);
                (format!("memory:node-{node_id}"), stats)
            }
        };
        if self.cluster.cfg.ckpt_dir.is_some() {
            self.images.insert(node_id, img);
        }
        self.stats.push(stats);
        Ok(label)
    }

    fn resume(&mut self, node_id: u32) -> Result<(), String> {
        let host = self.cluster.plugins[node_id as usize].addr().node_id;
        self.cluster.engine.fabric_mut().release(host);
        self.cluster.plugins[node_id as usize].on_resume();
        Ok(())
    }
}

/// Runs a workload to completion, optionally with one checkpoint.
pub fn run_workload(
    spec: &WorkloadSpec,
    nodes: u32,
    cfg: ClusterConfig,
    plan: Option<CkptPlan>,
) -> CResult<RunResult> {
    let mut c = Cluster::launch(spec, nodes, cfg)?;
    let finished = c.run(plan)?;
    Ok(c.result(!finished))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Match,
    Mismatch,
    Error,
}

impl Outcome {
    pub fn exit_code(self) -> i32 {
        match self {
            Self::Match => 0,
            Self::Mismatch => 1,
            Self::Error => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Match => "MATCH",
            Self::Mismatch => "MISMATCH",
            Self::Error => "ERROR",
        }
    }
}

/// Outcome of a run compared against an uninterrupted reference.
#[derive(Clone, Debug)]
pub struct RunReport {
    pub workload: String,
    pub nodes: u32,
    pub seed: u64,
    pub outcome: Outcome,
    pub digests: Vec<String>,
    pub reference: Vec<String>,
    pub ckpt_time_ticks: Option<u64>,
    pub restart_time_ticks: Option<u64>,
    pub drain_rounds: Option<u32>,
    pub image_bytes: Option<u64>,
    pub total_ticks: u64,
    /// Anything the harness noticed that a digest match would not show.
    pub discrepancies: Vec<String>,
    pub error: Option<String>,
}

pub fn hex(d: &[u8]) -> String {
    d.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

impl RunReport {
    pub fn failed(spec: &WorkloadSpec, nodes: u32, err: impl ToString) -> Self {
        Self {
            workload: spec.kind.to_string(),
            nodes,
            seed: spec.seed,
            outcome: Outcome::Error,
            digests: Vec::new(),
            reference: Vec::new(),
            ckpt_time_ticks: None,
            restart_time_ticks: None,
            drain_rounds: None,
            image_bytes: None,
            total_ticks: 0,
            discrepancies: Vec::new(),
            error: Some(err.to_string()),
        }
    }

    /// Compares `run` with `reference`, node by node.
    pub fn compare(spec: &WorkloadSpec, nodes: u32, reference: &RunResult, run: &RunResult) -> Self {
        let digests: Vec<String> = run.digests().iter().map(|d| hex(d)).collect();
        let refs: Vec<String> = reference.digests().iter().map(|d| hex(d)).collect();
        let mut discrepancies = Vec::new();
        for (n, (a, b)) in digests.iter().zip(&refs).enumerate() {
            if a != b {
                discrepancies.push(format!("node {n} transcript differs from reference"));
            }
        }
        if let Some(c) = run.checkpoints.first() {
            if !c.drain_complete() {
                let owed: u64 = c.drain.iter().map(|r| r.owed_completions).sum();
                discrepancies.push(format!(
                    "drain incomplete after {} rounds; {owed} completions still owed",
                    c.drain.first().map_or(0, |r| r.rounds)
                ));
            }
            discrepancies.extend(c.audit.iter().map(|a| format!("audit: {a}")));
        }
        let outcome = if digests == refs && !run.halted {
            Outcome::Match
        } else {
            Outcome::Mismatch
        };
        let ckpt = run.checkpoints.first();
        Self {
            workload: spec.kind.to_string(),
            nodes,
            seed: spec.seed,
            outcome,
            digests,
            reference: refs,
            ckpt_time_ticks: ckpt.map(|c| c.drain_ticks),
            restart_time_ticks: run.restarts.first().and_then(|r| r.ticks_to_progress),
            drain_rounds: ckpt.and_then(|c| c.drain.first().map(|r| r.rounds)),
            image_bytes: ckpt.map(CheckpointRecord::image_bytes),
            total_ticks: run.ticks,
            discrepancies,
            error: None,
        }
    }

    /// `key=value` lines.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "workload={}", self.workload);
        let _ = writeln!(s, "nodes={}", self.nodes);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "outcome={}", self.outcome.as_str());
        for (n, d) in self.digests.iter().enumerate() {
            let _ = writeln!(s, "digest.{n}={d}");
        }
        for (n, d) in self.reference.iter().enumerate() {
            let _ = writeln!(s, "reference.{n}={d}");
        }
        let opt = |v: Option<u64>| v.map_or_else(|| "none".to_string(), |x| x.to_string());
        let _ = writeln!(s, "ckpt_time_ticks={}", opt(self.ckpt_time_ticks));
        let _ = writeln!(s, "restart_time_ticks={}", opt(self.restart_time_ticks));
        let _ = writeln!(s, "drain_rounds={}", opt(self.drain_rounds.map(u64::from)));
        let _ = writeln!(s, "image_bytes={}", opt(self.image_bytes));
        let _ = writeln!(s, "total_ticks={}", self.total_ticks);
        for d in &self.discrepancies {
            let _ = writeln!(s, "discrepancy={d}");
        }
        if let Some(e) = &self.error {
            let _ = writeln!(s, "error={e}");
        }
        s
    }
}

/// Runs the reference and the checkpointed run, then compares them.
pub fn compare_run(spec: &WorkloadSpec, nodes: u32, cfg: ClusterConfig, plan: Option<CkptPlan>) -> RunReport {
    let reference_cfg = ClusterConfig {
        ckpt_dir: None,
        coordinator: None,
        ..cfg.clone()
    };
    let reference = match run_workload(spec, nodes, reference_cfg, None) {
        Ok(r) => r,
        Err(e) => return RunReport::failed(spec, nodes, format!("reference run: {e}")),
    };
    match run_workload(spec, nodes, cfg, plan) {
        Ok(run) => RunReport::compare(spec, nodes, &reference, &run),
        Err(e) => RunReport::failed(spec, nodes, e),
    }
}
