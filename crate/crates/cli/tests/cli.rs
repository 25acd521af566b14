// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;
use std::process::{Command, Output};

fn ibcr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ibcr"))
        .args(args)
        .env_remove("IBCR_SEED")
        .output()
        .unwrap()
}

fn fields(out: &Output) -> BTreeMap<String, String> {
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

#[test]
fn run_restart_matches() {
    let out = ibcr(&[
        "run", "--workload", "ping_pong", "--iters", "200", "--msg-size", "256", "--ckpt-at", "90",
        "--action", "restart",
    ]);
    let f = fields(&out);
    assert_eq!(out.status.code(), Some(0), "{f:?}");
    assert_eq!(f["outcome"], "MATCH");
    assert_eq!(f["digest.0"], f["reference.0"]);
    assert_ne!(f["restart_time_ticks"], "none");
}

#[test]
fn every_action_matches() {
    for action in ["resume", "restart_migrate", "restart_consolidate"] {
        let out = ibcr(&[
            "run", "--workload", "ring_exchange", "--nodes", "4", "--iters", "30", "--msg-size", "64",
            "--ckpt-at", "10", "--action", action, "--id-policy", "globally_unique",
        ]);
        assert_eq!(out.status.code(), Some(0), "{action}: {:?}", fields(&out));
    }
}

#[test]
fn spec_file_and_seed_env() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("w.cfg");
    std::fs::write(&spec, "# stream\nworkload=rdma_stream\niterations=40\nmsg_size=32\nsignaled_every=4\nimm_every=8\n").unwrap();
    let run = |seed: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_ibcr"));
        c.args(["run", "--spec", spec.to_str().unwrap(), "--ckpt-at", "12"]);
        match seed {
            Some(s) => c.env("IBCR_SEED", s),
            None => c.env_remove("IBCR_SEED"),
        };
        c.output().unwrap()
    };
    let a = fields(&run(None));
    let b = fields(&run(Some("5")));
    assert_eq!(a["outcome"], "MATCH");
    assert_eq!(a["workload"], "RDMA_STREAM");
    assert_eq!(a["seed"], "42");
    assert_eq!(b["seed"], "5");
    assert_ne!(a["digest.0"], b["digest.0"]);
}

#[test]
fn invalid_input_exits_2() {
    let out = ibcr(&["run", "--workload", "ping_pong", "--nodes", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(fields(&out)["outcome"], "ERROR");
    let out = ibcr(&["run", "--workload", "bogus"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn checkpoint_then_restart_from_directory() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let out = ibcr(&[
        "run", "--workload", "ping_pong", "--iters", "120", "--msg-size", "128", "--ckpt-at", "50",
        "--ckpt-dir", d, "--exit-after-ckpt",
    ]);
    let f = fields(&out);
    assert_eq!(out.status.code(), Some(0), "{f:?}");
    assert_eq!(f["outcome"], "CHECKPOINTED");
    assert!(std::path::Path::new(&f["image.0"]).exists());

    for extra in [&[][..], &["--transport", "stream"], &["--consolidate", "1"]] {
        let mut args = vec!["restart", d];
        args.extend_from_slice(extra);
        let out = ibcr(&args);
        assert_eq!(out.status.code(), Some(0), "{extra:?}: {:?}", fields(&out));
        assert_eq!(fields(&out)["outcome"], "MATCH");
    }

    std::fs::remove_file(&f["image.1"]).unwrap();
    let out = ibcr(&["restart", d]);
    assert_eq!(out.status.code(), Some(2));
    assert!(fields(&out)["error"].contains("node 1"), "{:?}", fields(&out));
}

#[test]
fn overhead_subcommand() {
    let out = ibcr(&["overhead", "--t1", "18.5", "--o1", "3.2", "--t2", "292.6", "--o2", "5.4"]);
    assert_eq!(out.status.code(), Some(0));
    let f = fields(&out);
    let s: f64 = f["startup_s"].parse().unwrap();
    let pct: f64 = f["ratio_percent"].parse().unwrap();
    assert!((s - 3.1).abs() <= 0.1);
    assert!((pct - 0.8).abs() <= 0.1);
    let out = ibcr(&["overhead", "--t1", "1", "--o1", "1", "--t2", "1", "--o2", "2"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn over_budget_skew_is_reported() {
    let out = ibcr(&[
        "run", "--workload", "ping_pong", "--iters", "60", "--msg-size", "64", "--ckpt-at", "20",
        "--action", "restart", "--completion-skew-ticks", "5000",
    ]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert_ne!(out.status.code(), Some(0), "{text}");
    assert!(text.contains("discrepancy=drain incomplete"), "{text}");
}
