// SPDX-License-Identifier: Apache-2.0

use ibcr_core::cluster::{compare_run, run_workload, CkptAction, CkptPlan, ClusterConfig, Outcome, RestartOptions};
use ibcr_core::fabric::TransportMode;
use ibcr_core::plugin::IdPolicy;
use ibcr_core::workloads::{WorkloadKind, WorkloadSpec};

fn spec(kind: WorkloadKind, iters: u64, msg: u32) -> WorkloadSpec {
    WorkloadSpec {
        seed: 7,
        ..WorkloadSpec::new(kind, iters, msg)
    }
}

fn plan(at: u64, action: CkptAction) -> Option<CkptPlan> {
    Some(CkptPlan {
        at_iteration: at,
        action,
    })
}

fn restart() -> CkptAction {
    CkptAction::Restart(RestartOptions::default())
}

#[test]
fn ping_pong_reference_runs() {
    let r = run_workload(&spec(WorkloadKind::PingPong, 50, 64), 2, ClusterConfig::default(), None).unwrap();
    assert_eq!(r.transcripts[0].len(), 100);
    assert_eq!(r.transcripts[1].len(), 100);
    let bytes: u64 = r.stats.iter().map(|s| s.bytes_sent).sum();
    assert_eq!(bytes, 50 * 2 * 64);
}

#[test]
fn every_workload_survives_every_action() {
    let cases = [
        (spec(WorkloadKind::PingPong, 30, 128), 2),
        (
            WorkloadSpec {
                signaled_every: 4,
                imm_every: Some(8),
                ..spec(WorkloadKind::RdmaStream, 37, 96)
            },
            2,
        ),
        (spec(WorkloadKind::RingExchange, 25, 64), 4),
    ];
    let actions = [
        CkptAction::Resume,
        restart(),
        CkptAction::Restart(RestartOptions {
            mode: TransportMode::Stream,
            ..RestartOptions::default()
        }),
    ];
    for (s, nodes) in &cases {
        for a in actions {
            for policy in [IdPolicy::RealEqualsVirtual, IdPolicy::GloballyUnique] {
                let mut cfg = ClusterConfig::default();
                cfg.plugin.id_policy = policy;
                cfg.fabric.delivery_delay_ticks = 3;
                cfg.fabric.completion_skew_ticks = 2;
                let rep = compare_run(s, *nodes, cfg, plan(12, a));
                assert_eq!(rep.outcome, Outcome::Match, "{:?} {a:?} {policy:?}\n{}", s.kind, rep.render());
            }
        }
    }
}

#[test]
fn consolidated_ring() {
    let s = spec(WorkloadKind::RingExchange, 20, 32);
    let rep = compare_run(
        &s,
        4,
        ClusterConfig::default(),
        plan(
            7,
            CkptAction::Restart(RestartOptions {
                hosts: Some(1),
                ..RestartOptions::default()
            }),
        ),
    );
    assert_eq!(rep.outcome, Outcome::Match, "{}", rep.render());
}
