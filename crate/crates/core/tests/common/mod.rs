// SPDX-License-Identifier: Apache-2.0
//! Plugin-level rig: an engine, one plugin per node, and an in-process
//! coordinator, with checkpoint and restart driven by hand.
#![allow(dead_code)]

use std::cell::RefCell;
use std::rc::Rc;

use ibcr_core::coordinator::{CoordinatorCore, CoordinatorSession, LocalSession};
use ibcr_core::engine::*;
use ibcr_core::fabric::{Fabric, FabricConfig, NodeAddr};
use ibcr_core::plugin::*;

pub mod images;

pub const REGION: u64 = 64 * 1024;

#[derive(Clone, Debug)]
pub struct Node {
    pub id: u32,
    pub ctx: u64,
    pub pd: u64,
    pub vlid: u16,
    pub mr: ShadowDescriptor,
    pub scq: u64,
    pub rcq: u64,
}

impl Node {
    pub fn lkey(&self) -> u32 {
        self.mr.lkey().unwrap()
    }

    pub fn rkey(&self) -> u32 {
        self.mr.rkey().unwrap()
    }

    pub fn sge(&self, off: u64, len: u32) -> Sge {
        Sge {
            addr: MEM_BASE + off,
            length: len,
            lkey: self.lkey(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Qp {
    pub node: u32,
    pub vqp: u64,
    pub vnum: u32,
    pub vlid: u16,
    pub scq: u64,
    pub rcq: u64,
}

pub struct Rig {
    pub engine: Engine,
    pub plugins: Vec<NodePlugin>,
    pub coord: Rc<RefCell<CoordinatorCore>>,
    pub clients: Vec<u32>,
    pub fabric: FabricConfig,
}

impl Rig {
    pub fn new(nodes: u32, policy: IdPolicy) -> Self {
        Self::with(nodes, FabricConfig::default(), PluginConfig {
            id_policy: policy,
            ..PluginConfig::default()
        })
    }

    pub fn with(nodes: u32, fabric: FabricConfig, plugin: PluginConfig) -> Self {
        let mut engine = Engine::new(Fabric::new(fabric.clone()), EngineConfig::default());
        let coord = Rc::new(RefCell::new(CoordinatorCore::new()));
        let mut plugins = Vec::new();
        let mut clients = Vec::new();
        for n in 0..nodes {
            let addr = NodeAddr::new(n, 0);
            engine.attach(addr).unwrap();
            plugins.push(NodePlugin::new(n, addr, plugin.clone()));
            clients.push(coord.borrow_mut().register(n).unwrap());
        }
        Self {
            engine,
            plugins,
            coord,
            clients,
            fabric,
        }
    }

    pub fn split(&mut self, n: u32) -> (&mut Engine, &mut NodePlugin) {
        (&mut self.engine, &mut self.plugins[n as usize])
    }

    pub fn node(&mut self, n: u32) -> Node {
        let (e, p) = self.split(n);
        let ctx = p.open_device(e).unwrap();
        let pd = p.alloc_pd(e, ctx.virtual_id).unwrap();
        let mr = p
            .reg_mr(e, pd.virtual_id, MEM_BASE, REGION, AccessFlags::ALL)
            .unwrap();
        let scq = p.create_cq(e, ctx.virtual_id, 256).unwrap();
        let rcq = p.create_cq(e, ctx.virtual_id, 256).unwrap();
        Node {
            id: n,
            ctx: ctx.virtual_id,
            pd: pd.virtual_id,
            vlid: ctx.lid().unwrap(),
            mr,
            scq: scq.virtual_id,
            rcq: rcq.virtual_id,
        }
    }

    pub fn qp(&mut self, node: &Node) -> Qp {
        let (e, p) = self.split(node.id);
        let s = p.create_qp(e, node.pd, node.scq, node.rcq, None).unwrap();
        Qp {
            node: node.id,
            vqp: s.virtual_id,
            vnum: s.qp_num().unwrap(),
            vlid: node.vlid,
            scq: node.scq,
            rcq: node.rcq,
        }
    }

    pub fn connect(&mut self, a: Qp, b: Qp) {
        for (x, y) in [(a, b), (b, a)] {
            let (e, p) = self.split(x.node);
            p.modify_qp(e, x.vqp, QpTransition::ToInit).unwrap();
            p.modify_qp(
                e,
                x.vqp,
                QpTransition::ToRtr {
                    remote_lid: y.vlid,
                    remote_qp_num: y.vnum,
                },
            )
            .unwrap();
            p.modify_qp(e, x.vqp, QpTransition::ToRts).unwrap();
        }
    }

    fn sessions(&self) -> Vec<LocalSession> {
        self.clients
            .iter()
            .map(|&client_id| LocalSession {
                core: self.coord.clone(),
                client_id,
            })
            .collect()
    }

    /// Publish, barrier, subscribe.
    pub fn exchange(&mut self) -> Result<(), PluginError> {
        let mut sessions = self.sessions();
        for (p, s) in self.plugins.iter().zip(&mut sessions) {
            p.publish(s)?;
            s.barrier()?;
        }
        for (p, s) in self.plugins.iter_mut().zip(&mut sessions) {
            p.subscribe(s)?;
        }
        Ok(())
    }

    pub fn post_send(&mut self, q: Qp, wr: &WorkRequest) -> Result<(), PluginError> {
        let (e, p) = self.split(q.node);
        p.post_send(e, q.vqp, wr)
    }

    pub fn post_recv(&mut self, q: Qp, wr: &WorkRequest) -> Result<(), PluginError> {
        let (e, p) = self.split(q.node);
        p.post_recv(e, q.vqp, wr)
    }

    pub fn poll(&mut self, node: u32, vcq: u64, max: usize) -> Vec<CompletionEvent> {
        let (e, p) = self.split(node);
        p.poll_cq(e, vcq, max).unwrap()
    }

    /// Advances the fabric until `want` events were polled from `vcq`.
    pub fn poll_until(&mut self, node: u32, vcq: u64, want: usize) -> Vec<CompletionEvent> {
        let mut got = Vec::new();
        for _ in 0..100_000 {
            got.extend(self.poll(node, vcq, want - got.len()));
            if got.len() >= want {
                return got;
            }
            self.engine.progress(1).unwrap();
        }
        panic!("node {node}: only {} of {want} completions arrived", got.len());
    }

    pub fn drain(&mut self) -> Vec<DrainReport> {
        let mut refs: Vec<&mut NodePlugin> = self.plugins.iter_mut().collect();
        drain_all(&mut self.engine, &mut refs).unwrap()
    }

    pub fn audit(&self) -> Vec<String> {
        let snap = self.engine.snapshot();
        self.plugins.iter().flat_map(|p| p.audit(&snap)).collect()
    }

    pub fn read(&self, node: u32, off: u64, len: u64) -> Vec<u8> {
        let addr = self.plugins[node as usize].addr();
        self.engine.read_memory(addr, MEM_BASE + off, len).unwrap()
    }

    pub fn write(&mut self, node: u32, off: u64, bytes: &[u8]) {
        let addr = self.plugins[node as usize].addr();
        self.engine.write_memory(addr, MEM_BASE + off, bytes).unwrap();
    }

    /// Rebuilds every node on a fresh engine of the next epoch, keeping
    /// registered memory, and replays the plugin state.
    pub fn restart(&mut self, nonce: Option<u32>) -> Result<Vec<RestartReport>, PluginError> {
        let mut engine = Engine::new(
            Fabric::new(self.fabric.clone()),
            EngineConfig {
                epoch: self.engine.epoch() + 1,
                nonce,
                ..self.engine.config().clone()
            },
        );
        let mut plugins = Vec::new();
        let mut reports = Vec::new();
        for old in &self.plugins {
            let addr = old.addr();
            engine.attach(addr).unwrap();
            for (base, len) in old.memory_ranges() {
                let bytes = self.engine.read_memory(addr, base, len).unwrap();
                engine.write_memory(addr, base, &bytes).unwrap();
            }
            let mut p = NodePlugin::from_sections(
                old.resource_section(),
                old.wqe_log().clone(),
                old.drained().clone(),
                old.translation_section(),
            );
            let resources = p.restart_recreate(&mut engine, addr)?;
            reports.push(RestartReport {
                resources,
                ..RestartReport::default()
            });
            plugins.push(p);
        }
        self.engine = engine;
        self.plugins = plugins;
        self.coord.borrow_mut().begin_restart()?;
        self.exchange()?;
        for (p, r) in self.plugins.iter_mut().zip(&mut reports) {
            r.modifies = p.replay_modifies(&mut self.engine)?;
        }
        for (p, r) in self.plugins.iter_mut().zip(&mut reports) {
            r.reposted_recvs = p.repost_recvs(&mut self.engine)?;
        }
        for (p, r) in self.plugins.iter_mut().zip(&mut reports) {
            r.reposted_sends = p.repost_sends(&mut self.engine)?;
        }
        for &c in &self.clients {
            self.coord.borrow_mut().finish_restart(c)?;
        }
        Ok(reports)
    }
}

/// Two nodes with one connected queue pair each.
pub fn pair(policy: IdPolicy) -> (Rig, Node, Node, Qp, Qp) {
    pair_with(FabricConfig::default(), PluginConfig {
        id_policy: policy,
        ..PluginConfig::default()
    })
}

pub fn pair_with(fabric: FabricConfig, plugin: PluginConfig) -> (Rig, Node, Node, Qp, Qp) {
    let gu = plugin.id_policy == IdPolicy::GloballyUnique;
    let mut rig = Rig::with(2, fabric, plugin);
    let a = rig.node(0);
    let b = rig.node(1);
    let qa = rig.qp(&a);
    let qb = rig.qp(&b);
    if gu {
        rig.exchange().unwrap();
    }
    rig.connect(qa, qb);
    (rig, a, b, qa, qb)
}
