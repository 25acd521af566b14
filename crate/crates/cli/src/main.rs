// SPDX-License-Identifier: Apache-2.0
//! `ibcr`: run workloads under checkpoint-restart, restart from images,
//! decompose overheads, or host a coordinator.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ibcr_core::cluster::{
    compare_run, run_workload, CkptAction, CkptPlan, Cluster, ClusterConfig, Manifest, RestartOptions, RunReport,
    MANIFEST,
};
use ibcr_core::coordinator::CoordinatorServer;
use ibcr_core::fabric::TransportMode;
use ibcr_core::plugin::IdPolicy;
use ibcr_core::workloads::{WorkloadKind, WorkloadSpec};
use ibcr_core::{derive_overhead, Overhead};

#[derive(Parser)]
#[command(name = "ibcr", version, about = "Checkpoint-restart harness for a simulated verbs fabric")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a workload, optionally checkpointing it, and compare against an
    /// uninterrupted reference run.
    Run(RunArgs),
    /// Restart from a checkpoint directory and finish the workload.
    Restart(RestartArgs),
    /// Split overhead into startup cost and runtime slope.
    Overhead(OverheadArgs),
    /// Serve the coordinator protocol over TCP.
    Coordinator(CoordinatorArgs),
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum Action {
    Resume,
    Restart,
    RestartMigrate,
    RestartConsolidate,
}

#[derive(Clone, Copy, ValueEnum)]
enum Transport {
    Sim,
    Stream,
}

impl From<Transport> for TransportMode {
    fn from(t: Transport) -> Self {
        match t {
            Transport::Sim => TransportMode::InProcess,
            Transport::Stream => TransportMode::Stream,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum Policy {
    RealEqualsVirtual,
    GloballyUnique,
}

#[derive(Args)]
struct FabricArgs {
    #[arg(long, default_value_t = 100)]
    drain_interval_ticks: u64,
    #[arg(long, default_value_t = 16)]
    drain_max_rounds: u32,
    #[arg(long, default_value_t = 1)]
    delivery_delay_ticks: u64,
    #[arg(long, default_value_t = 0)]
    completion_skew_ticks: u64,
    #[arg(long, value_enum, default_value_t = Transport::Sim)]
    transport: Transport,
    /// External coordinator, `host:port`.
    #[arg(long)]
    coordinator: Option<String>,
}

#[derive(Args)]
struct RunArgs {
    /// key=value workload file; flags override its entries.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    workload: Option<String>,
    #[arg(long, default_value_t = 2)]
    nodes: u32,
    #[arg(long, default_value_t = 1)]
    procs_per_node: u32,
    #[arg(long)]
    iters: Option<u64>,
    #[arg(long)]
    msg_size: Option<u32>,
    #[arg(long)]
    imm_every: Option<u64>,
    #[arg(long)]
    signaled_every: Option<u64>,
    /// Overridden by IBCR_SEED.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    ckpt_at: Option<u64>,
    #[arg(long, value_enum, default_value_t = Action::Resume)]
    action: Action,
    /// Host slots for restart_consolidate.
    #[arg(long, default_value_t = 1)]
    consolidate: u32,
    #[arg(long)]
    ckpt_dir: Option<PathBuf>,
    #[arg(long)]
    no_compress: bool,
    #[arg(long, value_enum, default_value_t = Policy::RealEqualsVirtual)]
    id_policy: Policy,
    /// Write the images and stop instead of continuing.
    #[arg(long)]
    exit_after_ckpt: bool,
    #[command(flatten)]
    fabric: FabricArgs,
}

#[derive(Args)]
struct RestartArgs {
    image_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = Transport::Sim)]
    transport: Transport,
    /// Pack every rank onto this many host slots.
    #[arg(long)]
    consolidate: Option<u32>,
    #[arg(long)]
    coordinator: Option<String>,
}

#[derive(Args)]
struct OverheadArgs {
    #[arg(long)]
    t1: f64,
    #[arg(long)]
    o1: f64,
    #[arg(long)]
    t2: f64,
    #[arg(long)]
    o2: f64,
}

#[derive(Args)]
struct CoordinatorArgs {
    #[arg(long, default_value = "127.0.0.1:7070")]
    listen: String,
    #[arg(long)]
    expect: Option<usize>,
    #[arg(long, default_value_t = 30)]
    timeout_secs: u64,
}

fn seed(flag: u64) -> Result<u64, String> {
    match std::env::var("IBCR_SEED") {
        Ok(v) => v.trim().parse().map_err(|_| format!("IBCR_SEED={v:?} is not a number")),
        Err(_) => Ok(flag),
    }
}

fn build_spec(a: &RunArgs) -> Result<WorkloadSpec, String> {
    let mut spec = match &a.spec {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
            WorkloadSpec::parse(&text).map_err(|e| e.to_string())?
        }
        None => {
            let kind: WorkloadKind = a
                .workload
                .as_deref()
                .ok_or("--workload or --spec is required")?
                .parse()
                .map_err(|e: ibcr_core::workloads::SpecError| e.to_string())?;
            WorkloadSpec::new(kind, 1000, 4096)
        }
    };
    if let Some(k) = &a.workload {
        spec.kind = k.parse().map_err(|e: ibcr_core::workloads::SpecError| e.to_string())?;
    }
    if let Some(v) = a.iters {
        spec.iterations = v;
    }
    if let Some(v) = a.msg_size {
        spec.msg_size = v;
    }
    if a.imm_every.is_some() {
        spec.imm_every = a.imm_every;
    }
    if let Some(v) = a.signaled_every {
        spec.signaled_every = v;
    }
    spec.seed = seed(a.seed)?;
    spec.validate(a.nodes).map_err(|e| e.to_string())?;
    Ok(spec)
}

fn cluster_config(a: &RunArgs, seed: u64) -> ClusterConfig {
    let mut cfg = ClusterConfig {
        compress: !a.no_compress,
        ckpt_dir: a.ckpt_dir.clone(),
        procs_per_node: a.procs_per_node,
        coordinator: a.fabric.coordinator.clone(),
        ..ClusterConfig::default()
    };
    cfg.fabric.mode = a.fabric.transport.into();
    cfg.fabric.delivery_delay_ticks = a.fabric.delivery_delay_ticks;
    cfg.fabric.completion_skew_ticks = a.fabric.completion_skew_ticks;
    cfg.fabric.rng_seed = seed;
    cfg.fabric.port_count = cfg.fabric.port_count.max(a.procs_per_node);
    cfg.plugin.drain_interval_ticks = a.fabric.drain_interval_ticks;
    cfg.plugin.drain_max_rounds = a.fabric.drain_max_rounds;
    cfg.plugin.id_policy = match a.id_policy {
        Policy::RealEqualsVirtual => IdPolicy::RealEqualsVirtual,
        Policy::GloballyUnique => IdPolicy::GloballyUnique,
    };
    cfg
}

fn action(a: &RunArgs) -> CkptAction {
    if a.exit_after_ckpt {
        return CkptAction::Halt;
    }
    match a.action {
        Action::Resume => CkptAction::Resume,
        Action::Restart => CkptAction::Restart(RestartOptions::default()),
        Action::RestartMigrate => CkptAction::Restart(RestartOptions {
            mode: TransportMode::Stream,
            ..RestartOptions::default()
        }),
        Action::RestartConsolidate => CkptAction::Restart(RestartOptions {
            hosts: Some(a.consolidate),
            ..RestartOptions::default()
        }),
    }
}

fn finish(report: RunReport) -> ExitCode {
    print!("{}", report.render());
    ExitCode::from(report.outcome.exit_code() as u8)
}

fn error(msg: impl std::fmt::Display) -> ExitCode {
    println!("outcome=ERROR");
    println!("error={msg}");
    ExitCode::from(2)
}

fn cmd_run(a: RunArgs) -> ExitCode {
    let spec = match build_spec(&a) {
        Ok(s) => s,
        Err(e) => return error(e),
    };
    if a.exit_after_ckpt && (a.ckpt_dir.is_none() || a.ckpt_at.is_none()) {
        return error("--exit-after-ckpt needs --ckpt-dir and --ckpt-at");
    }
    let cfg = cluster_config(&a, spec.seed);
    let plan = a.ckpt_at.map(|at| CkptPlan {
        at_iteration: at,
        action: action(&a),
    });
    if a.exit_after_ckpt {
        return match run_workload(&spec, a.nodes, cfg, plan) {
            Ok(r) => {
                let c = &r.checkpoints[0];
                println!("workload={}", spec.kind);
                println!("nodes={}", a.nodes);
                println!("seed={}", spec.seed);
                println!("outcome=CHECKPOINTED");
                println!("ckpt_time_ticks={}", c.drain_ticks);
                println!("image_bytes={}", c.image_bytes());
                for (n, p) in &c.images {
                    println!("image.{n}={p}");
                }
                ExitCode::SUCCESS
            }
            Err(e) => error(e),
        };
    }
    finish(compare_run(&spec, a.nodes, cfg, plan))
}

fn cmd_restart(a: RestartArgs) -> ExitCode {
    let raw = match std::fs::read(a.image_dir.join(MANIFEST)) {
        Ok(r) => r,
        Err(e) => return error(format!("{}: {e}", a.image_dir.display())),
    };
    let m = match Manifest::from_json(&raw) {
        Ok(m) => m,
        Err(e) => return error(format!("bad manifest: {e}")),
    };
    let reference_cfg = ClusterConfig {
        fabric: m.fabric.clone(),
        ..ClusterConfig::default()
    };
    let reference = match run_workload(&m.spec, m.nodes, reference_cfg, None) {
        Ok(r) => r,
        Err(e) => return error(format!("reference run: {e}")),
    };
    let cfg = ClusterConfig {
        coordinator: a.coordinator.clone(),
        ..ClusterConfig::default()
    };
    let opts = RestartOptions {
        mode: a.transport.into(),
        hosts: a.consolidate,
        nonce: None,
    };
    let run = Cluster::from_checkpoint_dir(&a.image_dir, cfg, opts).and_then(|mut c| {
        c.run(None)?;
        Ok(c.result(false))
    });
    match run {
        Ok(run) => finish(RunReport::compare(&m.spec, m.nodes, &reference, &run)),
        Err(e) => error(e),
    }
}

fn cmd_overhead(a: OverheadArgs) -> ExitCode {
    match derive_overhead(a.t1, a.o1, a.t2, a.o2) {
        Ok(Overhead { startup, ratio }) => {
            println!("startup_s={startup:.6}");
            println!("ratio={ratio:.6}");
            println!("ratio_percent={:.4}", ratio * 100.0);
            ExitCode::SUCCESS
        }
        Err(e) => error(e),
    }
}

fn cmd_coordinator(a: CoordinatorArgs) -> ExitCode {
    match CoordinatorServer::bind(&a.listen, a.expect, Duration::from_secs(a.timeout_secs)) {
        Ok(server) => {
            println!("listening={}", server.local_addr());
            server.wait();
            ExitCode::SUCCESS
        }
        Err(e) => error(e),
    }
}

fn main() -> ExitCode {
    match Cli::parse().cmd {
        Cmd::Run(a) => cmd_run(a),
        Cmd::Restart(a) => cmd_restart(a),
        Cmd::Overhead(a) => cmd_overhead(a),
        Cmd::Coordinator(a) => cmd_coordinator(a),
    }
}
