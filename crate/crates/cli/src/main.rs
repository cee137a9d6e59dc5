//! `farl`: command-line front door for the pipeline — demo generation, phase
//! execution, evaluation, the tabular theorem probe, and cross-run reports.

mod config;
mod plots;
mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use farl_core::data::{derive_seed, save_demos};
use farl_core::envs::TaskId;
use farl_core::trainer::{
    evaluate, expert_reference_return, generate_demo_bundle, load_policy, normalized_return,
    random_reference_return, run_offline_phase, run_online_phase, sample_probe_instance,
    save_policy, theorem_probe, write_run_dir, ProbeConfig, RunConfig, RunMetrics,
};
use farl_core::worldmodel::{save_world_model, wm_train, WorldModel};
use farl_core::FarlError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

#[derive(Parser)]
#[command(name = "farl", version, about = "Failure-aware offline-to-online RL on 2D pushing tasks")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Flat JSON config file with dotted keys, e.g. {"safety.h": 5}.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-key override, repeatable: --set safety.eps_safe=0.25
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Task id: bounded-push | bounded-soccer | fragile-push-wall | obstructed-push
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Shield mode: none | world_model | qsafe | mppi
    #[arg(long)]
    shield: Option<String>,
    /// Online environment-step budget.
    #[arg(long)]
    budget: Option<usize>,
}

impl ConfigArgs {
    fn build(&self) -> Result<RunConfig> {
        let mut overrides = Vec::new();
        if let Some(t) = &self.task {
            overrides.push(("task".to_string(), json!(t)));
        }
        if let Some(s) = self.seed {
            overrides.push(("seed".to_string(), json!(s)));
        }
        if let Some(m) = &self.shield {
            overrides.push(("safety.mode".to_string(), json!(m)));
        }
        if let Some(b) = self.budget {
            overrides.push(("online_budget".to_string(), json!(b)));
        }
        for pair in &self.set {
            overrides.push(config::parse_override(pair)?);
        }
        config::effective_config(self.config.as_deref(), &overrides)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Collect task, recovery, and failure demonstration corpora.
    GenDemos {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pre-train task policy, recovery policy, and world model from demos.
    TrainOffline {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train only the world model and report holdout quality.
    TrainWm {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full pipeline: demos, offline phase, shielded online fine-tuning.
    Finetune {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated seed list fanned out as independent jobs.
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a policy checkpoint with deterministic mean-action rollouts.
    Eval {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long, default_value_t = 20)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Exact tabular check of the action-correction bound on sampled MDPs.
    ProbeTheorem {
        #[arg(long, default_value_t = 100)]
        cases: usize,
        #[arg(long, default_value_t = 10)]
        states: usize,
        #[arg(long, default_value_t = 4)]
        actions: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare run directories: CSV table plus SVG charts.
    Report {
        /// Run directories, each containing a summary.json.
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Error classes map to distinct exit codes: config 2, data 3, training 4.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<FarlError>() {
        Some(FarlError::InvalidConfig(_) | FarlError::ShapeMismatch(_) | FarlError::Serde(_)) => 2,
        Some(FarlError::Data(_) | FarlError::Generator(_) | FarlError::Io(_)) => 3,
        Some(
            FarlError::Training(_) | FarlError::NonFinite(_) | FarlError::ContractViolation(_),
        ) => 4,
        None => 1,
    }
}

/// Output root: explicit flag beats FARL_RUN_ROOT beats ./runs.
fn run_root(explicit: &Option<PathBuf>) -> PathBuf {
    explicit
        .clone()
        .or_else(|| std::env::var_os("FARL_RUN_ROOT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenDemos { cfg, out } => gen_demos(&cfg.build()?, &run_root(&out)),
        Cmd::TrainOffline { cfg, out } => train_offline(&cfg.build()?, &run_root(&out)),
        Cmd::TrainWm { cfg, out } => train_wm(&cfg.build()?, &run_root(&out)),
        Cmd::Finetune { cfg, seeds, out } => finetune(&cfg.build()?, seeds.as_deref(), &run_root(&out)),
        Cmd::Eval {
            policy,
            task,
            episodes,
            seed,
        } => eval_checkpoint(&policy, &task, episodes, seed),
        Cmd::ProbeTheorem {
            cases,
            states,
            actions,
            seed,
        } => probe(cases, states, actions, seed),
        Cmd::Report { runs, out } => {
            let loaded = report::load_runs(&runs)?;
            let out = out.unwrap_or_else(|| run_root(&None).join("report"));
            for path in report::write_report(&loaded, &out)? {
                println!("{}", path.display());
            }
            Ok(())
        }
    }
}

fn gen_demos(cfg: &RunConfig, root: &Path) -> Result<()> {
    let bundle = generate_demo_bundle(cfg)?;
    let dir = root.join("demos").join(cfg.task.as_str());
    std::fs::create_dir_all(&dir).map_err(FarlError::from)?;
    for (set, name) in [
        (&bundle.task, "task_demo"),
        (&bundle.recovery, "recovery_demo"),
        (&bundle.failure, "failure_demo"),
    ] {
        let path = dir.join(format!("{name}.jsonl"));
        save_demos(set, &path)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn train_offline(cfg: &RunConfig, root: &Path) -> Result<()> {
    let bundle = generate_demo_bundle(cfg)?;
    let (artifacts, report) = run_offline_phase(cfg, &bundle)?;
    let dir = root
        .join(cfg.task.as_str())
        .join(format!("offline-seed{}", cfg.seed));
    let ckpt = dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt).map_err(FarlError::from)?;
    save_policy(&ckpt.join("task_policy.json"), &artifacts.task_policy)?;
    save_policy(&ckpt.join("recovery_policy.json"), &artifacts.recovery_policy)?;
    std::fs::write(
        ckpt.join("value.json"),
        serde_json::to_vec_pretty(&artifacts.value).map_err(FarlError::from)?,
    )
    .map_err(FarlError::from)?;
    save_world_model(&ckpt.join("world_model"), &artifacts.world_model)?;
    if let Some(q) = &artifacts.qsafe {
        std::fs::write(
            ckpt.join("qsafe.json"),
            serde_json::to_vec_pretty(q).map_err(FarlError::from)?,
        )
        .map_err(FarlError::from)?;
    }
    std::fs::write(
        dir.join("offline_report.json"),
        serde_json::to_vec_pretty(&report).map_err(FarlError::from)?,
    )
    .map_err(FarlError::from)?;
    println!("{}", dir.display());
    Ok(())
}

fn train_wm(cfg: &RunConfig, root: &Path) -> Result<()> {
    let bundle = generate_demo_bundle(cfg)?;
    let init = WorldModel::init(
        &cfg.wm,
        &mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 14)),
    );
    let (model, report) = wm_train(
        init,
        &bundle.task,
        &bundle.failure,
        &cfg.wm,
        cfg.wm_steps,
        derive_seed(cfg.seed, 15),
    )?;
    let dir = root
        .join(cfg.task.as_str())
        .join(format!("wm-seed{}", cfg.seed));
    std::fs::create_dir_all(&dir).map_err(FarlError::from)?;
    save_world_model(&dir.join("world_model"), &model)?;
    std::fs::write(
        dir.join("wm_report.json"),
        serde_json::to_vec_pretty(&report).map_err(FarlError::from)?,
    )
    .map_err(FarlError::from)?;
    println!("{}", dir.display());
    Ok(())
}

fn finetune(cfg: &RunConfig, seeds: Option<&str>, root: &Path) -> Result<()> {
    let seeds: Vec<u64> = match seeds {
        Some(list) => list
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|e| FarlError::InvalidConfig(format!("--seeds {s:?}: {e}")))
            })
            .collect::<std::result::Result<_, _>>()?,
        None => vec![cfg.seed],
    };
    // Seeds are independent jobs sharing nothing mutable; fan out on threads.
    let dirs: Vec<PathBuf> = std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&seed| {
                let mut job = cfg.clone();
                job.seed = seed;
                let root = root.to_path_buf();
                scope.spawn(move || finetune_one(&job, &root))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("seed job panicked"))
            .collect::<Result<_>>()
    })?;
    for dir in dirs {
        println!("{}", dir.display());
    }
    Ok(())
}

fn finetune_one(cfg: &RunConfig, root: &Path) -> Result<PathBuf> {
    let bundle = generate_demo_bundle(cfg)?;
    let (artifacts, offline_report) = run_offline_phase(cfg, &bundle)?;
    let outcome = run_online_phase(cfg, &artifacts)?;
    let dir = root
        .join(cfg.task.as_str())
        .join(cfg.safety.mode.to_string())
        .join(format!("seed{}", cfg.seed));
    write_run_dir(&dir, cfg, &offline_report, &artifacts, &outcome)?;
    write_run_plots(&dir, &outcome.metrics)?;
    Ok(dir)
}

/// Per-run curves: episode returns and the cumulative failure-episode count.
fn write_run_plots(dir: &Path, metrics: &RunMetrics) -> Result<()> {
    let plots_dir = dir.join("plots");
    std::fs::create_dir_all(&plots_dir).map_err(FarlError::from)?;
    let returns: Vec<(f64, f64)> = metrics
        .episodes
        .iter()
        .map(|e| (e.index as f64, e.ret))
        .collect();
    std::fs::write(
        plots_dir.join("return_curve.svg"),
        plots::line_chart(
            "Episode return",
            "episode",
            "return",
            &[("return".to_string(), returns)],
        ),
    )
    .map_err(FarlError::from)?;
    let mut cum = 0.0;
    let failures: Vec<(f64, f64)> = metrics
        .episodes
        .iter()
        .map(|e| {
            cum += f64::from(u8::from(e.failed));
            (e.index as f64, cum)
        })
        .collect();
    std::fs::write(
        plots_dir.join("cumulative_failures.svg"),
        plots::line_chart(
            "Cumulative failure episodes",
            "episode",
            "failures",
            &[("failures".to_string(), failures)],
        ),
    )
    .map_err(FarlError::from)?;
    Ok(())
}

fn eval_checkpoint(policy_path: &Path, task: &str, episodes: usize, seed: u64) -> Result<()> {
    let task = TaskId::parse(task)?;
    let policy = load_policy(policy_path)?;
    let report = evaluate(&policy, task, episodes, seed)?;
    let expert = expert_reference_return(task, episodes, derive_seed(seed, 16))?;
    let random = random_reference_return(task, episodes, derive_seed(seed, 18))?;
    let out = json!({
        "task": task.as_str(),
        "episodes": report.episodes,
        "mean_return": report.mean_return,
        "std_return": report.std_return,
        "success_rate": report.success_rate,
        "failure_rate": report.failure_rate,
        "normalized_return": normalized_return(report.mean_return, expert, random),
    });
    println!("{}", serde_json::to_string_pretty(&out).map_err(FarlError::from)?);
    Ok(())
}

fn probe(cases: usize, states: usize, actions: usize, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ProbeConfig::default();
    let mut holds = 0usize;
    let mut max_identity_err: f64 = 0.0;
    let mut min_margin = f64::INFINITY;
    for _ in 0..cases {
        let (mdp, pi_task, pi_rec) = sample_probe_instance(states, actions, &mut rng);
        let probe = theorem_probe(&mdp, &pi_task, &pi_rec, &cfg)?;
        max_identity_err = max_identity_err.max(probe.per_state_identity_max_err);
        min_margin = min_margin.min(probe.gain - probe.bound);
        if probe.bound_holds == Some(true) {
            holds += 1;
        }
    }
    let out = json!({
        "cases": cases,
        "states": states,
        "actions": actions,
        "bound_holds": holds,
        "per_state_identity_max_err": max_identity_err,
        "min_gain_minus_bound": min_margin,
    });
    println!("{}", serde_json::to_string_pretty(&out).map_err(FarlError::from)?);
    if holds != cases {
        return Err(FarlError::Training(format!(
            "bound held on {holds}/{cases} sampled instances"
        ))
        .into());
    }
    Ok(())
}
