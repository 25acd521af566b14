// SPDX-License-Identifier: Apache-2.0
//! Random node states reached by driving a real rig, for image tests.

use ibcr_core::engine::*;
use ibcr_core::fabric::FabricConfig;
use ibcr_core::image::{MemorySegment, NodeImage};
use ibcr_core::plugin::*;
use proptest::prelude::*;

use super::{Qp, Rig};

#[derive(Clone, Debug)]
pub struct Shape {
    pub gu: bool,
    pub qps: usize,
    pub recvs: Vec<u16>,
    pub sends: Vec<bool>,
    pub ticks: u64,
    pub drain: bool,
    pub node: u32,
    pub epoch: u32,
    pub segments: Vec<(u32, Vec<u8>)>,
    pub state: Vec<u8>,
}

pub fn shape() -> impl Strategy<Value = Shape> {
    (
        any::<bool>(),
        1usize..4,
        prop::collection::vec(1u16..512, 0..8),
        prop::collection::vec(any::<bool>(), 0..8),
        0u64..12,
        any::<bool>(),
        0u32..2,
        any::<u32>(),
        prop::collection::vec((any::<u32>(), prop::collection::vec(any::<u8>(), 0..256)), 0..4),
        prop::collection::vec(any::<u8>(), 0..512),
    )
        .prop_map(
            |(gu, qps, recvs, sends, ticks, drain, node, epoch, segments, state)| Shape {
                gu,
                qps,
                recvs,
                sends,
                ticks,
                drain,
                node,
                epoch,
                segments,
                state,
            },
        )
}

/// Drives a two-node rig into the shape and captures one node.
pub fn build(s: &Shape) -> NodeImage {
    let policy = if s.gu {
        IdPolicy::GloballyUnique
    } else {
        IdPolicy::RealEqualsVirtual
    };
    let fabric = FabricConfig {
        delivery_delay_ticks: 3,
        completion_skew_ticks: 1,
        ..FabricConfig::default()
    };
    let plugin = PluginConfig {
        id_policy: policy,
        ..PluginConfig::default()
    };
    let mut rig = Rig::with(2, fabric, plugin);
    let a = rig.node(0);
    let b = rig.node(1);
    let pairs: Vec<(Qp, Qp)> = (0..s.qps).map(|_| (rig.qp(&a), rig.qp(&b))).collect();
    if s.gu {
        rig.exchange().unwrap();
    }
    for &(x, y) in &pairs {
        rig.connect(x, y);
    }
    let (qa, qb) = pairs[0];
    for (i, len) in s.recvs.iter().enumerate() {
        let wr = WorkRequest::recv(i as u64, b.sge(i as u64 * 512, 512));
        rig.post_recv(qb, &wr).unwrap();
        let wr = WorkRequest::send(i as u64, a.sge(0, *len as u32), s.sends.get(i).copied().unwrap_or(true));
        rig.post_send(qa, &wr).unwrap();
    }
    rig.engine.progress(s.ticks).unwrap();
    if s.drain {
        rig.drain();
    }
    let p = &rig.plugins[s.node as usize];
    NodeImage {
        node_id: s.node,
        epoch: s.epoch,
        memory: s
            .segments
            .iter()
            .map(|(base, bytes)| MemorySegment {
                base: *base as u64,
                bytes: bytes.clone(),
            })
            .collect(),
        resources: p.resource_section(),
        wqe_log: p.wqe_log().clone(),
        drained: p.drained().clone(),
        translation: p.translation_section(),
        workload_state: s.state.clone(),
    }
}
