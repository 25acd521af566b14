// SPDX-License-Identifier: Apache-2.0

mod common;

use common::*;
use ibcr_core::engine::*;
use ibcr_core::fabric::FabricConfig;
use ibcr_core::plugin::*;

fn rev() -> (Rig, Node, Node, Qp, Qp) {
    pair(IdPolicy::RealEqualsVirtual)
}

fn real_qp_num(rig: &Rig, q: Qp) -> u32 {
    rig.plugins[q.node as usize].tables().qp_nums.real(q.vnum).unwrap()
}

fn real_rkey(rig: &Rig, n: &Node) -> u32 {
    rig.plugins[n.id as usize].tables().rkeys[&n.pd]
        .real(n.rkey())
        .unwrap()
}

/// Remote (lid, qp_num) the engine actually connected `q` to.
fn engine_remote(rig: &Rig, q: Qp) -> (u16, u32) {
    let p = &rig.plugins[q.node as usize];
    let real = p.shadow(q.vqp).unwrap().real_ref;
    let snap = rig.engine.snapshot();
    snap.host(p.addr())
        .unwrap()
        .qps
        .iter()
        .find(|s| s.id.0 == real)
        .unwrap()
        .remote
        .unwrap()
}

fn send_one(rig: &mut Rig, a: &Node, b: &Node, qa: Qp, qb: Qp, wr_id: u64, bytes: &[u8]) {
    rig.write(a.id, 0, bytes);
    rig.post_recv(qb, &WorkRequest::recv(wr_id, b.sge(4096, 1024))).unwrap();
    rig.post_send(qa, &WorkRequest::send(wr_id, a.sge(0, bytes.len() as u32), true))
        .unwrap();
}

#[test]
fn rev_virtual_ids_equal_real_before_restart() {
    let (rig, a, _, qa, _) = rev();
    assert_eq!(real_qp_num(&rig, qa), qa.vnum);
    assert_eq!(real_rkey(&rig, &a), a.rkey());
    let real_lkey = rig.plugins[0].tables().lkeys.real(a.lkey()).unwrap();
    assert_eq!(real_lkey, a.lkey());
    let q = rig.engine.qp_num(QpId(rig.plugins[0].shadow(qa.vqp).unwrap().real_ref)).unwrap();
    assert_eq!(q, qa.vnum);
}

#[test]
fn gu_mr_on_node_two_carries_prefix() {
    let mut rig = Rig::new(3, IdPolicy::GloballyUnique);
    let n = rig.node(2);
    assert_eq!(n.rkey() >> 24, 2);
    assert_eq!(n.lkey() >> 24, 2);
    assert_ne!(n.rkey(), real_rkey(&rig, &n));
}

#[test]
fn create_appends_to_log() {
    let mut rig = Rig::new(1, IdPolicy::RealEqualsVirtual);
    let n = rig.node(0);
    let before = rig.plugins[0].log().creations.len();
    let (e, p) = rig.split(0);
    p.create_cq(e, n.ctx, 16).unwrap();
    assert_eq!(p.log().creations.len(), before + 1);
}

#[test]
fn to_rtr_passes_identity_before_checkpoint() {
    let (rig, _, _, qa, qb) = rev();
    assert_eq!(engine_remote(&rig, qa), (qb.vlid, qb.vnum));
    assert_eq!(engine_remote(&rig, qb), (qa.vlid, qa.vnum));
}

#[test]
fn to_rtr_after_restart_uses_new_real_ids() {
    let (mut rig, _, _, qa, qb) = rev();
    rig.restart(None).unwrap();
    let new_b = (
        rig.plugins[1].tables().lids.real(qb.vlid).unwrap(),
        real_qp_num(&rig, qb),
    );
    assert_ne!(new_b, (qb.vlid, qb.vnum));
    assert_eq!(engine_remote(&rig, qa), new_b);
    assert_eq!(rig.plugins[0].directory().qp_real[&(qb.vlid, qb.vnum)], new_b.1);
}

#[test]
fn illegal_transition_is_propagated() {
    let mut rig = Rig::new(1, IdPolicy::RealEqualsVirtual);
    let n = rig.node(0);
    let q = rig.qp(&n);
    let (e, p) = rig.split(0);
    let err = p.modify_qp(e, q.vqp, QpTransition::ToRts).unwrap_err();
    assert!(
        matches!(
            err,
            PluginError::Engine {
                source: VerbsError::InvalidTransition { .. },
                ..
            }
        ),
        "{err:?}"
    );
    assert!(p.log().modifies.is_empty());
}

#[test]
fn unknown_remote_virtual_id() {
    let mut rig = Rig::new(1, IdPolicy::GloballyUnique);
    let n = rig.node(0);
    let q = rig.qp(&n);
    let (e, p) = rig.split(0);
    p.modify_qp(e, q.vqp, QpTransition::ToInit).unwrap();
    let err = p
        .modify_qp(
            e,
            q.vqp,
            QpTransition::ToRtr {
                remote_lid: 0x7777,
                remote_qp_num: 5,
            },
        )
        .unwrap_err();
    assert!(matches!(
        err,
        PluginError::UnknownRemoteVirtualId {
            vlid: 0x7777,
            vqp_num: 5
        }
    ));
}

#[test]
fn unknown_vrkey() {
    let (mut rig, a, _, qa, _) = pair(IdPolicy::GloballyUnique);
    let wr = WorkRequest::rdma(1, Opcode::RdmaWrite, a.sge(0, 8), MEM_BASE, 0xDEAD, true);
    let err = rig.post_send(qa, &wr).unwrap_err();
    assert!(matches!(err, PluginError::UnknownVrkey { vrkey: 0xDEAD, .. }), "{err:?}");
    assert!(rig.plugins[0].wqe_log().is_empty());
}

#[test]
fn vrkey_resolution_is_identity_before_restart() {
    let (rig, _, b, qa, _) = rev();
    assert_eq!(rig.plugins[0].resolve_rkey(qa.vqp, b.rkey()).unwrap(), b.rkey());
}

#[test]
fn write_after_restart_resolves_new_rkey() {
    let (mut rig, a, b, qa, _) = rev();
    rig.restart(None).unwrap();
    let new = real_rkey(&rig, &b);
    assert_ne!(new, b.rkey());
    assert_eq!(rig.plugins[0].resolve_rkey(qa.vqp, b.rkey()).unwrap(), new);
    rig.write(0, 0, b"after restart");
    let wr = WorkRequest::rdma(9, Opcode::RdmaWrite, a.sge(0, 13), MEM_BASE + 512, b.rkey(), true);
    rig.post_send(qa, &wr).unwrap();
    let ev = rig.poll_until(0, qa.scq, 1);
    assert_eq!(ev[0].status, WcStatus::Success);
    assert_eq!(rig.read(1, 512, 13), b"after restart");
}

#[test]
fn recv_log_tracks_post_and_completion() {
    let (mut rig, a, b, qa, qb) = rev();
    rig.post_recv(qb, &WorkRequest::recv(5, b.sge(0, 64))).unwrap();
    assert_eq!(rig.plugins[1].wqe_log().len(), 1);
    rig.post_send(qa, &WorkRequest::send(5, a.sge(0, 64), true)).unwrap();
    let ev = rig.poll_until(1, qb.rcq, 1);
    assert_eq!(ev[0].qp_num, qb.vnum);
    assert_eq!(rig.plugins[1].wqe_log().len(), 0);
}

#[test]
fn private_queue_served_alone() {
    let (mut rig, a, b, qa, qb) = rev();
    for i in 0..2 {
        send_one(&mut rig, &a, &b, qa, qb, i, b"x");
    }
    rig.engine.progress(50).unwrap();
    rig.drain();
    assert_eq!(rig.plugins[1].drained().pending(qb.rcq), 2);
    send_one(&mut rig, &a, &b, qa, qb, 2, b"y");
    rig.engine.progress(50).unwrap();
    let real_cq = rig.plugins[1].shadow(qb.rcq).unwrap().real_ref;
    let snap = rig.engine.snapshot();
    let pending = &snap.host(rig.plugins[1].addr()).unwrap().cqs;
    assert_eq!(pending.iter().find(|c| c.id.0 == real_cq).unwrap().pending.len(), 1);

    let first = rig.poll(1, qb.rcq, 5);
    assert_eq!(first.iter().map(|e| e.wr_id).collect::<Vec<_>>(), [0, 1]);
    let second = rig.poll(1, qb.rcq, 5);
    assert_eq!(second.iter().map(|e| e.wr_id).collect::<Vec<_>>(), [2]);
}

#[test]
fn unsignaled_sends_pruned_by_signaled_completion() {
    let (mut rig, a, b, qa, qb) = rev();
    for i in 0..4 {
        rig.post_recv(qb, &WorkRequest::recv(i, b.sge(i * 64, 64))).unwrap();
    }
    for i in 0..4 {
        rig.post_send(qa, &WorkRequest::send(i, a.sge(0, 16), i == 3)).unwrap();
    }
    assert_eq!(rig.plugins[0].wqe_log().len(), 4);
    let ev = rig.poll_until(0, qa.scq, 1);
    assert_eq!(ev[0].wr_id, 3);
    assert!(rig.plugins[0].wqe_log().is_empty());
    rig.engine.progress(100).unwrap();
    assert!(rig.poll(0, qa.scq, 8).is_empty());
    assert_eq!(rig.poll_until(1, qb.rcq, 4).len(), 4);
    let bal = rig.plugins[0].balances()[&qa.vqp];
    assert_eq!(bal.retired, 4);
}

#[test]
fn stale_handle() {
    let mut rig = Rig::new(1, IdPolicy::RealEqualsVirtual);
    let n = rig.node(0);
    let (e, p) = rig.split(0);
    assert!(matches!(p.poll_cq(e, 0xABCDEF, 1), Err(PluginError::StaleHandle(0xABCDEF))));
    let cq = p.create_cq(e, n.ctx, 4).unwrap().virtual_id;
    p.destroy(e, cq).unwrap();
    assert!(matches!(p.poll_cq(e, cq, 1), Err(PluginError::StaleHandle(v)) if v == cq));
}

#[test]
fn idle_drain_is_empty() {
    let (mut rig, ..) = rev();
    for r in rig.drain() {
        assert_eq!(r.events_drained, 0);
        assert_eq!(r.wqes_outstanding, 0);
        assert_eq!(r.rounds, 1);
        assert!(r.complete);
    }
}

#[test]
fn late_sender_completion_caught_in_later_round() {
    let fabric = FabricConfig {
        completion_skew_ticks: 2,
        ..FabricConfig::default()
    };
    let (mut rig, a, b, qa, qb) = pair_with(fabric, PluginConfig::default());
    send_one(&mut rig, &a, &b, qa, qb, 1, b"skewed");
    let (rcq, scq) = (
        rig.plugins[1].shadow(qb.rcq).unwrap().real_ref,
        rig.plugins[0].shadow(qa.scq).unwrap().real_ref,
    );
    let pending = |rig: &Rig, node: usize, cq: u64| {
        let snap = rig.engine.snapshot();
        let h = snap.host(rig.plugins[node].addr()).unwrap();
        h.cqs.iter().find(|c| c.id.0 == cq).unwrap().pending.len()
    };
    let mut ticks = 0;
    while pending(&rig, 1, rcq) == 0 {
        rig.engine.progress(1).unwrap();
        ticks += 1;
        assert!(ticks < 100);
    }
    assert_eq!(pending(&rig, 0, scq), 0, "sender completion should lag");
    let reports = rig.drain();
    assert!(reports[0].rounds >= 2);
    assert!(reports.iter().all(|r| r.complete && r.owed_completions == 0));
    assert_eq!(rig.plugins[0].drained().pending(qa.scq), 1);
    assert_eq!(rig.plugins[1].drained().pending(qb.rcq), 1);
    assert!(rig.plugins.iter().all(|p| p.wqe_log().is_empty()));
}

fn slow_fabric() -> (FabricConfig, PluginConfig) {
    (
        FabricConfig {
            delivery_delay_ticks: 10_000,
            ..FabricConfig::default()
        },
        PluginConfig {
            drain_max_rounds: 3,
            ..PluginConfig::default()
        },
    )
}

#[test]
fn in_flight_message_stays_logged() {
    let (f, p) = slow_fabric();
    let (mut rig, a, b, qa, qb) = pair_with(f, p);
    send_one(&mut rig, &a, &b, qa, qb, 1, b"slow");
    let reports = rig.drain();
    assert!(reports.iter().all(|r| r.events_drained == 0));
    assert!(reports[0].in_flight_frames >= 1);
    let send = WqeQueue::Send(qa.vqp);
    assert_eq!(rig.plugins[0].wqe_log().entries(send).count(), 1);
    assert_eq!(rig.plugins[1].wqe_log().len(), 1);
    assert!(rig.audit().is_empty());
}

#[test]
fn resume_serves_drained_then_real() {
    let (mut rig, a, b, qa, qb) = rev();
    send_one(&mut rig, &a, &b, qa, qb, 7, b"before");
    rig.engine.progress(50).unwrap();
    rig.drain();
    let snap = rig.engine.snapshot();
    rig.plugins.iter_mut().for_each(|p| p.on_resume());
    let after = rig.engine.snapshot();
    assert_eq!(
        format!("{:?}", snap.hosts),
        format!("{:?}", after.hosts),
        "resume must not touch real queues"
    );
    let ev = rig.poll(1, qb.rcq, 4);
    assert_eq!(ev.len(), 1);
    assert_eq!(ev[0].wr_id, 7);
    assert_eq!(rig.read(1, 4096, 6), b"before");
}

#[test]
fn resume_with_in_flight_delivers_once() {
    let (f, p) = slow_fabric();
    let (mut rig, a, b, qa, qb) = pair_with(f, p);
    send_one(&mut rig, &a, &b, qa, qb, 3, b"in flight");
    rig.drain();
    rig.plugins.iter_mut().for_each(|p| p.on_resume());
    assert_eq!(rig.poll_until(1, qb.rcq, 1)[0].wr_id, 3);
    assert_eq!(rig.poll_until(0, qa.scq, 1)[0].wr_id, 3);
    rig.engine.progress(30_000).unwrap();
    assert!(rig.poll(1, qb.rcq, 4).is_empty());
    assert!(rig.poll(0, qa.scq, 4).is_empty());
    assert_eq!(rig.read(1, 4096, 9), b"in flight");
}

#[test]
fn restart_reposts_in_flight_send_exactly_once() {
    let (f, p) = slow_fabric();
    let (mut rig, a, b, qa, qb) = pair_with(f, p);
    send_one(&mut rig, &a, &b, qa, qb, 11, b"survives");
    rig.drain();
    let reports = rig.restart(None).unwrap();
    assert_eq!(reports[0].reposted_sends, 1);
    assert_eq!(reports[1].reposted_recvs, 1);
    let ev = rig.poll_until(1, qb.rcq, 1);
    assert_eq!((ev[0].wr_id, ev[0].byte_len, ev[0].qp_num), (11, 8, qb.vnum));
    assert_eq!(rig.poll_until(0, qa.scq, 1)[0].qp_num, qa.vnum);
    rig.engine.progress(30_000).unwrap();
    assert!(rig.poll(1, qb.rcq, 4).is_empty());
    assert_eq!(rig.read(1, 4096, 8), b"survives");
    assert!(rig.plugins.iter().all(|p| p.wqe_log().is_empty()));
}

#[test]
fn restart_without_outstanding_work_serves_drained_first() {
    let (mut rig, a, b, qa, qb) = rev();
    send_one(&mut rig, &a, &b, qa, qb, 4, b"done");
    rig.engine.progress(50).unwrap();
    rig.drain();
    let reports = rig.restart(None).unwrap();
    assert!(reports.iter().all(|r| r.reposted_recvs == 0 && r.reposted_sends == 0));
    assert!(reports.iter().all(|r| r.modifies == 3));
    assert_eq!(rig.poll(1, qb.rcq, 4)[0].wr_id, 4);
    assert_eq!(rig.poll(0, qa.scq, 4)[0].wr_id, 4);
    send_one(&mut rig, &a, &b, qa, qb, 5, b"next");
    assert_eq!(rig.poll_until(1, qb.rcq, 1)[0].wr_id, 5);
}

#[test]
fn inline_payload_captured_at_post() {
    let (f, p) = slow_fabric();
    let (mut rig, a, b, qa, qb) = pair_with(f, p);
    rig.write(0, 0, b"original");
    rig.post_recv(qb, &WorkRequest::recv(1, b.sge(4096, 64))).unwrap();
    let wr = WorkRequest {
        inline_flag: true,
        ..WorkRequest::send(1, a.sge(0, 8), true)
    };
    rig.post_send(qa, &wr).unwrap();
    rig.write(0, 0, b"clobber!");
    rig.drain();
    rig.restart(None).unwrap();
    rig.poll_until(1, qb.rcq, 1);
    assert_eq!(rig.read(1, 4096, 8), b"original");
}

/// Three queue pairs on node 0, the first destroyed before checkpoint, so
/// that the restarted engine hands out real qp_nums equal to other live
/// virtual ones when forced back to nonce 0.
fn forced_collision(policy: IdPolicy) -> Result<(Rig, Vec<Qp>), PluginError> {
    let mut rig = Rig::new(1, policy);
    let n = rig.node(0);
    let qps: Vec<Qp> = (0..3).map(|_| rig.qp(&n)).collect();
    let (e, p) = rig.split(0);
    p.destroy(e, qps[0].vqp)?;
    rig.restart(Some(0))?;
    Ok((rig, qps[1..].to_vec()))
}

#[test]
fn gu_survives_forced_real_id_collision() {
    let (mut rig, live) = forced_collision(IdPolicy::GloballyUnique).unwrap();
    let t = rig.plugins[0].tables();
    let reals: Vec<u32> = live.iter().map(|q| t.qp_nums.real(q.vnum).unwrap()).collect();
    assert!(
        live.iter().any(|q| reals.contains(&q.vnum) && t.qp_nums.real(q.vnum) != Some(q.vnum)),
        "fixture should make a real id equal another live virtual id"
    );
    let n = rig.node(0);
    let fresh = rig.qp(&n);
    assert!(live.iter().all(|q| q.vnum != fresh.vnum));
    assert!(rig.plugins[0].tables().is_bijective());
}

#[test]
fn rev_forced_collision_is_a_conflict() {
    let (mut rig, live) = forced_collision(IdPolicy::RealEqualsVirtual).unwrap();
    let real_of_second = rig.plugins[0].tables().qp_nums.real(live[1].vnum).unwrap();
    assert_eq!(real_of_second, live[0].vnum);
    let n = rig.plugins[0].shadows().find(|s| s.kind == Kind::Pd).unwrap().virtual_id;
    let cq = rig.plugins[0].shadows().find(|s| s.kind == Kind::Cq).unwrap().virtual_id;
    let (e, p) = rig.split(0);
    let err = p.create_qp(e, n, cq, cq, None).unwrap_err();
    assert!(matches!(err, PluginError::VirtualIdConflict { .. }), "{err:?}");
}

#[test]
fn virtual_ids_stable_and_real_ids_fresh() {
    for policy in [IdPolicy::RealEqualsVirtual, IdPolicy::GloballyUnique] {
        let (mut rig, _, _, qa, qb) = pair(policy);
        let before: Vec<Vec<(u64, Kind)>> = rig
            .plugins
            .iter()
            .map(|p| p.shadows().map(|s| (s.virtual_id, s.kind)).collect())
            .collect();
        let reals = [real_qp_num(&rig, qa), real_qp_num(&rig, qb)];
        rig.restart(None).unwrap();
        let after: Vec<Vec<(u64, Kind)>> = rig
            .plugins
            .iter()
            .map(|p| p.shadows().map(|s| (s.virtual_id, s.kind)).collect())
            .collect();
        assert_eq!(before, after);
        assert_ne!(real_qp_num(&rig, qa), reals[0]);
        assert_ne!(real_qp_num(&rig, qb), reals[1]);
    }
}

#[test]
fn directory_must_cover_connected_peers() {
    let (rig, ..) = rev();
    let old = &rig.plugins[0];
    let mut p = NodePlugin::from_sections(
        old.resource_section(),
        old.wqe_log().clone(),
        old.drained().clone(),
        old.translation_section(),
    );
    let mut engine = Engine::new(
        ibcr_core::fabric::Fabric::new(FabricConfig::default()),
        EngineConfig {
            epoch: 1,
            ..EngineConfig::default()
        },
    );
    engine.attach(p.addr()).unwrap();
    p.restart_recreate(&mut engine, p.addr()).unwrap();
    assert!(matches!(
        p.verify_directory(),
        Err(PluginError::RestartDirectoryIncomplete(_))
    ));
    assert!(matches!(
        p.replay_modifies(&mut engine),
        Err(PluginError::RestartDirectoryIncomplete(_))
    ));
}

#[test]
fn audit_flags_unlogged_wqe() {
    let (mut rig, a, b, qa, qb) = rev();
    send_one(&mut rig, &a, &b, qa, qb, 1, b"ok");
    rig.engine.progress(3).unwrap();
    assert!(rig.audit().is_empty());
    let real = rig.plugins[1].shadow(qb.vqp).unwrap().real_ref;
    let lkey = rig.plugins[1].tables().lkeys.real(b.lkey()).unwrap();
    let sneaky = WorkRequest::recv(
        99,
        Sge {
            lkey,
            ..b.sge(0, 8)
        },
    );
    rig.engine.post_recv(QpId(real), &sneaky).unwrap();
    let v = rig.audit();
    assert_eq!(v.len(), 1, "{v:?}");
    assert!(v[0].contains("wr_id 99"));
}

#[test]
fn dispatch_layer_counts_calls() {
    let (mut rig, a, b, qa, qb) = rev();
    let before = rig.plugins[0].tap().posts.get();
    send_one(&mut rig, &a, &b, qa, qb, 1, b"tap");
    rig.poll_until(1, qb.rcq, 1);
    assert_eq!(rig.plugins[0].tap().posts.get(), before + 1);
    assert!(rig.plugins[1].tap().polls.get() >= 1);
}
