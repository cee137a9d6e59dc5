//! Pipeline orchestration: demo generation, the offline pre-training phase,
//! the shielded online fine-tuning phase, evaluation with expert-normalized
//! returns, run-directory artifacts, and the exact tabular probe of the
//! action-correction bound.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    collect_failure_demos, collect_recovery_demos, collect_task_demos, derive_seed,
    DemoSet,
};
use crate::envs::{env_reset, env_step, ActionCommand, EnvState, TaskId, HORIZON};
use crate::numerics::{NetworkParams, OptimizerState};
use crate::policy::{
    bc_train, default_policy_spec, default_value_spec, offline_finetune, online_update,
    BufferStep, PolicyBundle, PpoConfig, RolloutBuffer, ValueFunction,
};
use crate::shield::{
    qsafe_train, shield_action, MppiConfig, QSafeCritic, QSafeSample, SafetyConfig, ShieldBackend,
    ShieldDecision, ShieldMode,
};
use crate::worldmodel::{wm_train, WMConfig, WmReport, WorldModel};
use crate::{FarlError, Result};

pub const SUMMARY_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub task: TaskId,
    pub seed: u64,
    pub ppo: PpoConfig,
    pub wm: WMConfig,
    pub safety: SafetyConfig,
    pub mppi: MppiConfig,
    /// Total environment steps spent online.
    pub online_budget: usize,
    /// Steps collected per policy update.
    pub rollout_steps: usize,
    pub eval_episodes: usize,
    pub task_demo_count: usize,
    pub recovery_demo_count: usize,
    pub failure_transitions: usize,
    pub demo_noise: f64,
    pub failure_noise: f64,
    pub bc_epochs: usize,
    pub recovery_bc_epochs: usize,
    pub offline_epochs: usize,
    pub wm_steps: usize,
    pub qsafe_steps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: TaskId::BoundedPush,
            seed: 0,
            ppo: PpoConfig::default(),
            wm: WMConfig::default(),
            safety: SafetyConfig::default(),
            mppi: MppiConfig::default(),
            online_budget: 200_000,
            rollout_steps: 2048,
            eval_episodes: 20,
            task_demo_count: 40,
            recovery_demo_count: 40,
            failure_transitions: 3000,
            demo_noise: 0.1,
            failure_noise: 0.3,
            bc_epochs: 60,
            recovery_bc_epochs: 60,
            offline_epochs: 10,
            wm_steps: 8000,
            qsafe_steps: 6000,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.wm.validate()?;
        self.safety.validate()?;
        if self.eval_episodes == 0 {
            return Err(FarlError::InvalidConfig("eval_episodes must be >= 1".into()));
        }
        if self.rollout_steps == 0 {
            return Err(FarlError::InvalidConfig("rollout_steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// FNV-1a over the bit patterns of network parameters; used for the
/// phase-isolation checks (frozen components must hash identically before
/// and after the online phase).
pub fn fingerprint_nets(nets: &[&NetworkParams]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    let mut eat = |bits: u64| {
        for byte in bits.to_le_bytes() {
            h ^= u64::from(byte);
            h = h.wrapping_mul(0x100000001b3);
        }
    };
    for net in nets {
        for v in &net.values {
            eat(v.to_bits());
        }
    }
    h
}

pub fn policy_fingerprint(p: &PolicyBundle) -> u64 {
    let mut h = fingerprint_nets(&[&p.mean_net]);
    for v in &p.log_std {
        h ^= v.to_bits();
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub fn wm_fingerprint(m: &WorldModel) -> u64 {
    fingerprint_nets(&[
        &m.encoder,
        &m.dynamics,
        &m.reward_head,
        &m.value_head,
        &m.policy_head,
        &m.decoder,
        &m.constraint_head,
        &m.encoder_target,
        &m.value_target,
    ])
}

// --- Evaluation ---

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub mean_return: f64,
    pub std_return: f64,
    pub success_rate: f64,
    pub failure_rate: f64,
}

/// Deterministic mean-action rollouts without the shield.
pub fn evaluate(policy: &PolicyBundle, task: TaskId, n_episodes: usize, seed: u64) -> Result<EvalReport> {
    rollout_eval(task, n_episodes, seed, |obs, _rng| policy.act_mean(obs))
}

fn rollout_eval(
    task: TaskId,
    n_episodes: usize,
    seed: u64,
    mut act: impl FnMut(&[f64], &mut ChaCha8Rng) -> Result<Vec<f64>>,
) -> Result<EvalReport> {
    if n_episodes == 0 {
        return Err(FarlError::InvalidConfig("evaluate: n_episodes must be >= 1".into()));
    }
    let mut returns = Vec::with_capacity(n_episodes);
    let mut successes = 0usize;
    let mut failures = 0usize;
    for ep in 0..n_episodes {
        let episode_seed = derive_seed(seed, ep as u64);
        let mut reset_rng = ChaCha8Rng::seed_from_u64(episode_seed);
        let mut rng = ChaCha8Rng::seed_from_u64(episode_seed ^ 0xA5A5);
        let mut state = env_reset(task, &mut reset_rng);
        let mut ret = 0.0;
        for _ in 0..HORIZON {
            let action = act(&state.observation(), &mut rng)?;
            let out = env_step(task, &state, &ActionCommand::from_slice(&action)?)?;
            ret += out.reward;
            if out.failed {
                failures += 1;
                break;
            }
            if out.terminated {
                successes += 1;
                break;
            }
            state = out.next_state;
        }
        returns.push(ret);
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    Ok(EvalReport {
        episodes: n_episodes,
        mean_return: mean,
        std_return: var.sqrt(),
        success_rate: successes as f64 / n,
        failure_rate: failures as f64 / n,
    })
}

/// Raw return of the noise-free scripted expert; the per-task normalizer
/// that defines normalized return 100.
pub fn expert_reference_return(task: TaskId, n_episodes: usize, seed: u64) -> Result<f64> {
    use crate::envs::scripted::scripted_expert_action;
    let report = rollout_eval(task, n_episodes, seed, |obs, rng| {
        let state = crate::data::obs_to_state(task, obs);
        let cmd = scripted_expert_action(task, &state, 0.0, rng);
        Ok(vec![cmd.velocity[0], cmd.velocity[1]])
    })?;
    Ok(report.mean_return)
}

/// Mean return of uniform-random actions; the zero point of the normalizer.
pub fn random_reference_return(task: TaskId, n_episodes: usize, seed: u64) -> Result<f64> {
    let report = rollout_eval(task, n_episodes, seed, |_obs, rng| {
        Ok(vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
    })?;
    Ok(report.mean_return)
}

/// Affine normalization: random reference scores 0, expert scores 100. Raw
/// returns can be negative (shaping penalties), so a plain ratio would flip
/// signs; anchoring at the random baseline keeps the scale meaningful.
pub fn normalized_return(raw: f64, expert_reference: f64, random_reference: f64) -> f64 {
    100.0 * (raw - random_reference) / (expert_reference - random_reference)
}

// --- Demo generation ---

#[derive(Debug, Clone)]
pub struct DemoBundle {
    pub task: DemoSet,
    pub recovery: DemoSet,
    pub failure: DemoSet,
}

/// Collect all three demo corpora. Failure demos roll the blind chaser with
/// exploration noise: unlike the scripted expert it ignores failure geometry,
/// so noisy rollouts actually reach the failure surfaces on every task.
pub fn generate_demo_bundle(cfg: &RunConfig) -> Result<DemoBundle> {
    let task = collect_task_demos(cfg.task, cfg.task_demo_count, cfg.demo_noise, cfg.seed)?;
    let recovery =
        collect_recovery_demos(cfg.task, cfg.recovery_demo_count, derive_seed(cfg.seed, 1))?;
    let failure = collect_failure_demos(
        cfg.task,
        cfg.failure_transitions,
        &crate::data::blind_chaser_policy(),
        cfg.failure_noise,
        derive_seed(cfg.seed, 3),
    )?;
    Ok(DemoBundle {
        task,
        recovery,
        failure,
    })
}

// --- Offline phase ---

pub struct OfflineArtifacts {
    pub task_policy: PolicyBundle,
    pub value: ValueFunction,
    pub recovery_policy: PolicyBundle,
    pub world_model: WorldModel,
    pub qsafe: Option<QSafeCritic>,
    /// Normalizer anchors: expert mean return is 100, random is 0.
    pub expert_return: f64,
    pub random_return: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OfflineReport {
    pub bc_final_loss: f64,
    pub recovery_bc_final_loss: f64,
    pub finetune_epochs_run: usize,
    pub finetune_kl_stops: usize,
    pub demo_log_likelihood_before: f64,
    pub demo_log_likelihood_after: f64,
    pub wm: WmReport,
    pub offline_eval: EvalReport,
    pub expert_return: f64,
    pub random_return: f64,
}

pub fn run_offline_phase(
    cfg: &RunConfig,
    demos: &DemoBundle,
) -> Result<(OfflineArtifacts, OfflineReport)> {
    cfg.validate()?;
    let phase = |name: &str, e: FarlError| FarlError::Training(format!("offline phase '{name}': {e}"));

    let bc = bc_train(
        &demos.task,
        default_policy_spec(),
        cfg.bc_epochs,
        cfg.ppo.lr_policy,
        derive_seed(cfg.seed, 10),
    )
    .map_err(|e| phase("bc_task", e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 11));
    let value = ValueFunction::init(default_value_spec(), &mut rng);
    let (task_policy, value, finetune) = offline_finetune(
        bc.bundle,
        value,
        &demos.task,
        &cfg.ppo,
        cfg.offline_epochs,
        derive_seed(cfg.seed, 12),
    )
    .map_err(|e| phase("offline_finetune", e))?;

    let recovery = bc_train(
        &demos.recovery,
        default_policy_spec(),
        cfg.recovery_bc_epochs,
        cfg.ppo.lr_policy,
        derive_seed(cfg.seed, 13),
    )
    .map_err(|e| phase("bc_recovery", e))?;

    let wm_init = WorldModel::init(&cfg.wm, &mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 14)));
    let (world_model, wm_report) = wm_train(
        wm_init,
        &demos.task,
        &demos.failure,
        &cfg.wm,
        cfg.wm_steps,
        derive_seed(cfg.seed, 15),
    )
    .map_err(|e| phase("wm_train", e))?;

    let qsafe = if cfg.safety.mode == ShieldMode::QSafe {
        Some(train_qsafe_from_demos(cfg, demos, &task_policy).map_err(|e| phase("qsafe", e))?)
    } else {
        None
    };

    let expert_return =
        expert_reference_return(cfg.task, cfg.eval_episodes, derive_seed(cfg.seed, 16))?;
    let random_return =
        random_reference_return(cfg.task, cfg.eval_episodes, derive_seed(cfg.seed, 18))?;
    let offline_eval = evaluate(
        &task_policy,
        cfg.task,
        cfg.eval_episodes,
        derive_seed(cfg.seed, 17),
    )?;

    let report = OfflineReport {
        bc_final_loss: *bc.epoch_losses.last().expect("epochs >= 1"),
        recovery_bc_final_loss: *recovery.epoch_losses.last().expect("epochs >= 1"),
        finetune_epochs_run: finetune.epochs_run,
        finetune_kl_stops: finetune.kl_stops,
        demo_log_likelihood_before: finetune.mean_log_likelihood_before,
        demo_log_likelihood_after: finetune.mean_log_likelihood_after,
        wm: wm_report,
        offline_eval,
        expert_return,
        random_return,
    };
    Ok((
        OfflineArtifacts {
            task_policy,
            value,
            recovery_policy: recovery.bundle,
            world_model,
            qsafe,
            expert_return,
            random_return,
        },
        report,
    ))
}

fn train_qsafe_from_demos(
    cfg: &RunConfig,
    demos: &DemoBundle,
    task_policy: &PolicyBundle,
) -> Result<QSafeCritic> {
    let mut samples = Vec::new();
    for set in [&demos.task, &demos.failure] {
        for traj in &set.trajectories {
            for t in &traj.transitions {
                samples.push(QSafeSample {
                    obs: t.obs.clone(),
                    action: t.action.clone(),
                    cost: t.cost,
                    next_obs: t.next_obs.clone(),
                    terminated: t.terminated,
                });
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 20));
    let mut critic = QSafeCritic::init(
        crate::envs::OBS_DIM,
        crate::envs::ACTION_DIM,
        64,
        cfg.safety.gamma_safe,
        &mut rng,
    );
    let policy = |obs: &[f64]| task_policy.act_mean(obs);
    qsafe_train(
        &mut critic,
        &samples,
        &policy,
        cfg.qsafe_steps,
        128,
        1e-3,
        0.05,
        derive_seed(cfg.seed, 21),
    )?;
    Ok(critic)
}

// --- Online phase ---

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub index: usize,
    pub ret: f64,
    pub failed: bool,
    pub shield_firings: usize,
    pub steps: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMetrics {
    pub episodes: Vec<EpisodeRecord>,
    pub failure_episode_count: usize,
    pub intervention_rate: f64,
    pub mean_return_before: f64,
    pub mean_return_after: f64,
    pub total_env_steps: usize,
}

pub const METRICS_CSV_HEADER: &str = "episode,return,failed,shield_firings,steps";

impl RunMetrics {
    /// (failure count, intervention rate) recomputed from the episode log;
    /// must equal the stored aggregates exactly.
    pub fn recompute(&self) -> (usize, f64) {
        let failures = self.episodes.iter().filter(|e| e.failed).count();
        let fired: usize = self.episodes.iter().map(|e| e.shield_firings).sum();
        let steps: usize = self.episodes.iter().map(|e| e.steps).sum();
        let rate = if steps == 0 {
            0.0
        } else {
            fired as f64 / steps as f64
        };
        (failures, rate)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from(METRICS_CSV_HEADER);
        out.push('\n');
        for e in &self.episodes {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.index, e.ret, e.failed, e.shield_firings, e.steps
            ));
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn read_csv_episodes(path: &Path) -> Result<Vec<EpisodeRecord>> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h == METRICS_CSV_HEADER => {}
            other => {
                return Err(FarlError::Data(format!(
                    "{}: bad metrics header {other:?}",
                    path.display()
                )))
            }
        }
        let mut episodes = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 5 {
                return Err(FarlError::Data(format!(
                    "{} line {}: expected 5 fields",
                    path.display(),
                    lineno + 2
                )));
            }
            let bad = |e: String| FarlError::Data(format!("{} line {}: {e}", path.display(), lineno + 2));
            episodes.push(EpisodeRecord {
                index: parts[0].parse().map_err(|e| bad(format!("{e}")))?,
                ret: parts[1].parse().map_err(|e| bad(format!("{e}")))?,
                failed: parts[2].parse().map_err(|e| bad(format!("{e}")))?,
                shield_firings: parts[3].parse().map_err(|e| bad(format!("{e}")))?,
                steps: parts[4].parse().map_err(|e| bad(format!("{e}")))?,
            });
        }
        Ok(episodes)
    }
}

pub struct OnlineOutcome {
    pub metrics: RunMetrics,
    pub policy: PolicyBundle,
    pub value: ValueFunction,
    pub decisions: Vec<ShieldDecision>,
    pub final_eval: EvalReport,
}

/// Shielded online fine-tuning. The recovery policy and world model are
/// frozen; this is asserted by fingerprinting them before and after.
pub fn run_online_phase(cfg: &RunConfig, artifacts: &OfflineArtifacts) -> Result<OnlineOutcome> {
    cfg.validate()?;
    let recovery_fp = policy_fingerprint(&artifacts.recovery_policy);
    let wm_fp = wm_fingerprint(&artifacts.world_model);
    if cfg.safety.mode == ShieldMode::QSafe && artifacts.qsafe.is_none() {
        return Err(FarlError::InvalidConfig(
            "shield mode qsafe requires a trained Q_safe critic checkpoint".into(),
        ));
    }

    let mut policy = artifacts.task_policy.clone();
    let mut value = artifacts.value.clone();
    let mut policy_opt = OptimizerState::new(policy.param_count(), cfg.ppo.lr_policy);
    let mut value_opt = OptimizerState::new(value.net.values.len(), cfg.ppo.lr_value);

    let before_eval = evaluate(&policy, cfg.task, cfg.eval_episodes, derive_seed(cfg.seed, 30))?;

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 31));
    let mut episodes: Vec<EpisodeRecord> = Vec::new();
    let mut decisions: Vec<ShieldDecision> = Vec::new();
    let mut env_steps: usize = 0;
    let mut update_round: u64 = 0;

    let mut episode_idx = 0usize;
    let mut state: Option<EnvState> = None;
    let mut ep_ret = 0.0;
    let mut ep_firings = 0usize;
    let mut ep_failed = false;
    let mut ep_steps = 0usize;

    while env_steps < cfg.online_budget {
        let target = cfg.rollout_steps.min(cfg.online_budget - env_steps);
        let mut buffer = RolloutBuffer::default();
        let recovery = |obs: &[f64]| artifacts.recovery_policy.act_mean(obs);
        {
            // Rollout closures borrow the policy immutably; the update below
            // runs after they are dropped.
            let task_rollout =
                |obs: &[f64], _r: &mut ChaCha8Rng| -> Result<Vec<f64>> { policy.act_mean(obs) };
            let backend = match cfg.safety.mode {
                ShieldMode::None => ShieldBackend::None,
                ShieldMode::WorldModel => ShieldBackend::WorldModel(&artifacts.world_model),
                ShieldMode::QSafe => {
                    ShieldBackend::QSafe(artifacts.qsafe.as_ref().expect("checked above"))
                }
                ShieldMode::Mppi => ShieldBackend::Mppi {
                    model: &artifacts.world_model,
                    mppi: &cfg.mppi,
                },
            };
            while buffer.len() < target {
                let s = match state.take() {
                    Some(s) => s,
                    None => {
                        let mut reset_rng =
                            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1000 + episode_idx as u64));
                        env_reset(cfg.task, &mut reset_rng)
                    }
                };
                let obs = s.observation();
                let proposed = policy.act_sample(&obs, &mut rng)?;
                let decision = shield_action(
                    &backend,
                    &task_rollout,
                    &recovery,
                    &obs,
                    &proposed,
                    env_steps as u64,
                    &cfg.safety,
                    &mut rng,
                )?;
                if decision.fired {
                    ep_firings += 1;
                }
                let out = env_step(cfg.task, &s, &ActionCommand::from_slice(&decision.action)?)?;
                let episode_over = out.terminated || ep_steps + 1 == HORIZON as usize;
                buffer.steps.push(BufferStep {
                    obs,
                    action: decision.action.clone(),
                    reward: out.reward,
                    next_obs: out.next_state.observation(),
                    terminated: out.terminated,
                    episode_end: episode_over,
                    old_log_prob: policy
                        .distribution(&s.observation())?
                        .log_prob(&decision.action)?,
                    action_source: decision.action_source,
                });
                decisions.push(decision);
                ep_ret += out.reward;
                ep_failed |= out.failed;
                ep_steps += 1;
                env_steps += 1;
                if episode_over {
                    episodes.push(EpisodeRecord {
                        index: episode_idx,
                        ret: ep_ret,
                        failed: ep_failed,
                        shield_firings: ep_firings,
                        steps: ep_steps,
                    });
                    episode_idx += 1;
                    ep_ret = 0.0;
                    ep_firings = 0;
                    ep_failed = false;
                    ep_steps = 0;
                    state = None;
                } else {
                    state = Some(out.next_state);
                }
            }
        }
        online_update(
            &mut policy,
            &mut value,
            &mut policy_opt,
            &mut value_opt,
            &buffer,
            &cfg.ppo,
            derive_seed(cfg.seed, 2_000_000 + update_round),
        )?;
        update_round += 1;
    }
    // Budget exhausted mid-episode: record the truncated episode.
    if ep_steps > 0 {
        episodes.push(EpisodeRecord {
            index: episode_idx,
            ret: ep_ret,
            failed: ep_failed,
            shield_firings: ep_firings,
            steps: ep_steps,
        });
    }

    if policy_fingerprint(&artifacts.recovery_policy) != recovery_fp {
        return Err(FarlError::ContractViolation(
            "recovery policy changed during the online phase".into(),
        ));
    }
    if wm_fingerprint(&artifacts.world_model) != wm_fp {
        return Err(FarlError::ContractViolation(
            "world model changed during the online phase".into(),
        ));
    }

    let final_eval = evaluate(&policy, cfg.task, cfg.eval_episodes, derive_seed(cfg.seed, 32))?;
    let (failure_episode_count, intervention_rate) = {
        let fired: usize = episodes.iter().map(|e| e.shield_firings).sum();
        (
            episodes.iter().filter(|e| e.failed).count(),
            if env_steps == 0 {
                0.0
            } else {
                fired as f64 / env_steps as f64
            },
        )
    };
    let metrics = RunMetrics {
        episodes,
        failure_episode_count,
        intervention_rate,
        mean_return_before: before_eval.mean_return,
        mean_return_after: final_eval.mean_return,
        total_env_steps: env_steps,
    };
    Ok(OnlineOutcome {
        metrics,
        policy,
        value,
        decisions,
        final_eval,
    })
}

// --- Run directory artifacts ---

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub config: RunConfig,
    pub offline: OfflineReport,
    pub failure_episode_count: usize,
    pub intervention_rate: f64,
    pub mean_return_before: f64,
    pub mean_return_after: f64,
    pub normalized_return_before: f64,
    pub normalized_return_after: f64,
    pub total_env_steps: usize,
    pub episode_count: usize,
}

/// Write metrics.csv, decisions.csv, summary.json, and checkpoints/ into
/// `dir`; the directory then fully describes the run.
pub fn write_run_dir(
    dir: &Path,
    cfg: &RunConfig,
    offline: &OfflineReport,
    artifacts: &OfflineArtifacts,
    outcome: &OnlineOutcome,
) -> Result<RunSummary> {
    std::fs::create_dir_all(dir)?;
    outcome.metrics.write_csv(&dir.join("metrics.csv"))?;

    let mut csv = String::from(crate::shield::DECISIONS_CSV_HEADER);
    csv.push('\n');
    for d in &outcome.decisions {
        csv.push_str(&d.csv_row());
        csv.push('\n');
    }
    std::fs::write(dir.join("decisions.csv"), csv)?;

    let ckpt = dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt)?;
    save_policy(&ckpt.join("task_policy.json"), &outcome.policy)?;
    save_policy(&ckpt.join("recovery_policy.json"), &artifacts.recovery_policy)?;
    std::fs::write(
        ckpt.join("value.json"),
        serde_json::to_vec_pretty(&outcome.value)?,
    )?;
    crate::worldmodel::save_world_model(&ckpt.join("world_model"), &artifacts.world_model)?;
    if let Some(q) = &artifacts.qsafe {
        std::fs::write(ckpt.join("qsafe.json"), serde_json::to_vec_pretty(q)?)?;
    }

    let summary = RunSummary {
        schema_version: SUMMARY_SCHEMA_VERSION,
        config: cfg.clone(),
        offline: offline.clone(),
        failure_episode_count: outcome.metrics.failure_episode_count,
        intervention_rate: outcome.metrics.intervention_rate,
        mean_return_before: outcome.metrics.mean_return_before,
        mean_return_after: outcome.metrics.mean_return_after,
        normalized_return_before: normalized_return(
            outcome.metrics.mean_return_before,
            artifacts.expert_return,
            artifacts.random_return,
        ),
        normalized_return_after: normalized_return(
            outcome.metrics.mean_return_after,
            artifacts.expert_return,
            artifacts.random_return,
        ),
        total_env_steps: outcome.metrics.total_env_steps,
        episode_count: outcome.metrics.episodes.len(),
    };
    std::fs::write(
        dir.join("summary.json"),
        serde_json::to_vec_pretty(&summary)?,
    )?;
    Ok(summary)
}

pub fn save_policy(path: &Path, policy: &PolicyBundle) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(policy)?)?;
    Ok(())
}

pub fn load_policy(path: &Path) -> Result<PolicyBundle> {
    let policy: PolicyBundle = serde_json::from_slice(&std::fs::read(path)?)?;
    policy.mean_net.check()?;
    Ok(policy)
}

// --- Theorem probe (exact tabular) ---

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// transition[s][a] is a distribution over next states.
    pub transition: Vec<Vec<Vec<f64>>>,
    pub reward: Vec<Vec<f64>>,
    pub cost: Vec<Vec<f64>>,
    pub initial: Vec<f64>,
    pub gamma: f64,
}

impl TabularMdp {
    pub fn validate(&self) -> Result<()> {
        let (s, a) = (self.n_states, self.n_actions);
        if s == 0 || a == 0 || s > 50 || self.n_actions > 8 {
            return Err(FarlError::InvalidConfig(format!(
                "tabular probe supports 1..=50 states and 1..=8 actions, got {s}x{a}"
            )));
        }
        if self.transition.len() != s || self.reward.len() != s || self.cost.len() != s {
            return Err(FarlError::ShapeMismatch("tabular arrays misaligned".into()));
        }
        let row_ok = |row: &[f64]| {
            row.iter().all(|p| *p >= 0.0) && (row.iter().sum::<f64>() - 1.0).abs() < 1e-9
        };
        for st in 0..s {
            if self.transition[st].len() != a
                || self.reward[st].len() != a
                || self.cost[st].len() != a
            {
                return Err(FarlError::ShapeMismatch("tabular arrays misaligned".into()));
            }
            for dist in &self.transition[st] {
                if dist.len() != s || !row_ok(dist) {
                    return Err(FarlError::ContractViolation(
                        "transition rows must be normalized distributions".into(),
                    ));
                }
            }
        }
        if self.initial.len() != s || !row_ok(&self.initial) {
            return Err(FarlError::ContractViolation(
                "initial distribution must be normalized".into(),
            ));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(FarlError::InvalidConfig("gamma must be in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub h: usize,
    pub gamma_risk: f64,
    pub eps_safe: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            h: 5,
            gamma_risk: 0.9,
            eps_safe: 0.3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TheoremProbe {
    pub ch: Vec<Vec<f64>>,
    pub risky: Vec<Vec<bool>>,
    pub p_risk: Vec<f64>,
    pub occupancy: Vec<f64>,
    pub advantage: Vec<Vec<f64>>,
    pub delta: f64,
    pub eps_rec: f64,
    pub expected_p_risk: f64,
    /// E_rho[ corrected expected advantage - baseline expected advantage ].
    pub gain: f64,
    /// E[p_risk] * delta * (1 - eps_rec) - eps_rec * (max A - min A).
    pub bound: f64,
    pub per_state_identity_max_err: f64,
    pub assumption_failures: Vec<String>,
    /// None when an assumption fails (bound check skipped).
    pub bound_holds: Option<bool>,
}

/// Solve A x = b by Gaussian elimination with partial pivoting.
fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        if a[pivot][col].abs() < 1e-12 {
            return Err(FarlError::NonFinite("singular linear system".into()));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in row + 1..n {
            acc -= a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
    }
    Ok(x)
}

fn policy_transition(mdp: &TabularMdp, pi: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let s = mdp.n_states;
    let mut p = vec![vec![0.0; s]; s];
    for st in 0..s {
        for a in 0..mdp.n_actions {
            for (sp, prob) in mdp.transition[st][a].iter().enumerate() {
                p[st][sp] += pi[st][a] * prob;
            }
        }
    }
    p
}

/// Exact V^pi via (I - gamma P_pi) V = r_pi, then Q and A.
fn exact_advantage(mdp: &TabularMdp, pi: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let s = mdp.n_states;
    let p_pi = policy_transition(mdp, pi);
    let r_pi: Vec<f64> = (0..s)
        .map(|st| {
            (0..mdp.n_actions)
                .map(|a| pi[st][a] * mdp.reward[st][a])
                .sum()
        })
        .collect();
    let mut m = vec![vec![0.0; s]; s];
    for st in 0..s {
        for sp in 0..s {
            m[st][sp] = f64::from(u8::from(st == sp)) - mdp.gamma * p_pi[st][sp];
        }
    }
    let v = solve_linear(m, r_pi)?;
    let mut adv = vec![vec![0.0; mdp.n_actions]; s];
    for st in 0..s {
        for a in 0..mdp.n_actions {
            let q: f64 = mdp.reward[st][a]
                + mdp.gamma
                    * mdp.transition[st][a]
                        .iter()
                        .enumerate()
                        .map(|(sp, p)| p * v[sp])
                        .sum::<f64>();
            adv[st][a] = q - v[st];
        }
    }
    Ok((v, adv))
}

/// Exact C_H(s, a): first step takes `a`, later steps follow pi_task.
fn exact_ch(mdp: &TabularMdp, pi: &[Vec<f64>], cfg: &ProbeConfig) -> Vec<Vec<f64>> {
    let s = mdp.n_states;
    let p_pi = policy_transition(mdp, pi);
    let cbar: Vec<f64> = (0..s)
        .map(|st| {
            (0..mdp.n_actions)
                .map(|a| pi[st][a] * mdp.cost[st][a])
                .sum()
        })
        .collect();
    let mut ch = vec![vec![0.0; mdp.n_actions]; s];
    for st in 0..s {
        for a in 0..mdp.n_actions {
            let mut total = mdp.cost[st][a];
            let mut dist = mdp.transition[st][a].clone();
            for i in 1..=cfg.h {
                total += cfg.gamma_risk.powi(i as i32)
                    * dist.iter().zip(&cbar).map(|(p, c)| p * c).sum::<f64>();
                if i < cfg.h {
                    let mut next = vec![0.0; s];
                    for (from, p) in dist.iter().enumerate() {
                        if *p == 0.0 {
                            continue;
                        }
                        for (to, q) in p_pi[from].iter().enumerate() {
                            next[to] += p * q;
                        }
                    }
                    dist = next;
                }
            }
            ch[st][a] = total;
        }
    }
    ch
}

/// Normalized discounted occupancy rho = (1 - gamma)(I - gamma P^T)^-1 mu.
fn exact_occupancy(mdp: &TabularMdp, pi: &[Vec<f64>]) -> Result<Vec<f64>> {
    let s = mdp.n_states;
    let p_pi = policy_transition(mdp, pi);
    let mut m = vec![vec![0.0; s]; s];
    for st in 0..s {
        for sp in 0..s {
            m[st][sp] = f64::from(u8::from(st == sp)) - mdp.gamma * p_pi[sp][st];
        }
    }
    let b: Vec<f64> = mdp.initial.iter().map(|p| (1.0 - mdp.gamma) * p).collect();
    solve_linear(m, b)
}

pub fn theorem_probe(
    mdp: &TabularMdp,
    pi_task: &[Vec<f64>],
    pi_rec: &[Vec<f64>],
    cfg: &ProbeConfig,
) -> Result<TheoremProbe> {
    mdp.validate()?;
    let check_pi = |pi: &[Vec<f64>], name: &str| -> Result<()> {
        if pi.len() != mdp.n_states
            || pi.iter().any(|row| {
                row.len() != mdp.n_actions
                    || row.iter().any(|p| *p < 0.0)
                    || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9
            })
        {
            return Err(FarlError::ContractViolation(format!(
                "{name} must be a row-normalized policy table"
            )));
        }
        Ok(())
    };
    check_pi(pi_task, "pi_task")?;
    check_pi(pi_rec, "pi_rec")?;

    let (_, advantage) = exact_advantage(mdp, pi_task)?;
    let ch = exact_ch(mdp, pi_task, cfg);
    let occupancy = exact_occupancy(mdp, pi_task)?;

    let risky: Vec<Vec<bool>> = ch
        .iter()
        .map(|row| row.iter().map(|c| *c > cfg.eps_safe).collect())
        .collect();
    let p_risk: Vec<f64> = (0..mdp.n_states)
        .map(|s| {
            (0..mdp.n_actions)
                .filter(|&a| risky[s][a])
                .map(|a| pi_task[s][a])
                .sum()
        })
        .collect();
    let s_rec: Vec<usize> = (0..mdp.n_states).filter(|&s| p_risk[s] > 0.0).collect();

    let a_max = advantage.iter().flatten().cloned().fold(f64::MIN, f64::max);
    let a_min = advantage.iter().flatten().cloned().fold(f64::MAX, f64::min);

    let mut eps_rec: f64 = 0.0;
    let mut delta = f64::INFINITY;
    let mut gain = 0.0;
    let mut identity_err: f64 = 0.0;
    let mut recovery_fully_risky = false;
    for &s in &s_rec {
        let risky_mass_rec: f64 = (0..mdp.n_actions)
            .filter(|&a| risky[s][a])
            .map(|a| pi_rec[s][a])
            .sum();
        eps_rec = eps_rec.max(risky_mass_rec);
        let e_rec: f64 = (0..mdp.n_actions)
            .map(|a| pi_rec[s][a] * advantage[s][a])
            .sum();
        let e_risk: f64 = (0..mdp.n_actions)
            .filter(|&a| risky[s][a])
            .map(|a| pi_task[s][a] * advantage[s][a])
            .sum::<f64>()
            / p_risk[s];
        // Corrected policy: risky proposals are replaced by a recovery draw.
        let corrected: f64 = (0..mdp.n_actions)
            .filter(|&a| !risky[s][a])
            .map(|a| pi_task[s][a] * advantage[s][a])
            .sum::<f64>()
            + p_risk[s] * e_rec;
        let baseline: f64 = (0..mdp.n_actions)
            .map(|a| pi_task[s][a] * advantage[s][a])
            .sum();
        let per_state_gain = corrected - baseline;
        identity_err =
            identity_err.max((per_state_gain - p_risk[s] * (e_rec - e_risk)).abs());
        gain += occupancy[s] * per_state_gain;

        // Safe-restricted recovery advantage for the measured delta.
        let safe_mass_rec = 1.0 - risky_mass_rec;
        if safe_mass_rec <= 0.0 {
            recovery_fully_risky = true;
        } else {
            let e_rec_safe: f64 = (0..mdp.n_actions)
                .filter(|&a| !risky[s][a])
                .map(|a| pi_rec[s][a] * advantage[s][a])
                .sum::<f64>()
                / safe_mass_rec;
            delta = delta.min(e_rec_safe - e_risk);
        }
    }
    let expected_p_risk: f64 = occupancy.iter().zip(&p_risk).map(|(o, p)| o * p).sum();

    let mut failures = Vec::new();
    if s_rec.is_empty() || expected_p_risk <= 0.0 {
        failures.push("non-trivial risk distribution: no reachable risky state".to_string());
    }
    if recovery_fully_risky || eps_rec >= 1.0 {
        failures
            .push("probabilistic safe recovery: recovery has no safe support somewhere".to_string());
    }
    if !s_rec.is_empty() && !recovery_fully_risky && delta <= 0.0 {
        failures.push(format!("safe action advantage: delta = {delta} not positive"));
    }

    let bound = expected_p_risk * delta * (1.0 - eps_rec) - eps_rec * (a_max - a_min);
    let (delta_out, bound_out, holds) = if failures.is_empty() {
        (delta, bound, Some(gain >= bound))
    } else {
        (
            if delta.is_finite() { delta } else { 0.0 },
            f64::NAN,
            None,
        )
    };
    Ok(TheoremProbe {
        ch,
        risky,
        p_risk,
        occupancy,
        advantage,
        delta: delta_out,
        eps_rec,
        expected_p_risk,
        gain,
        bound: bound_out,
        per_state_identity_max_err: identity_err,
        assumption_failures: failures,
        bound_holds: holds,
    })
}

/// Rejection-sample a random MDP plus policies satisfying the probe's three
/// assumptions; recovery concentrates on safe actions with a small risky leak.
pub fn sample_probe_instance(
    n_states: usize,
    n_actions: usize,
    rng: &mut ChaCha8Rng,
) -> (TabularMdp, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let cfg = ProbeConfig::default();
    loop {
        let mut transition = vec![vec![vec![0.0; n_states]; n_actions]; n_states];
        let mut reward = vec![vec![0.0; n_actions]; n_states];
        let mut cost = vec![vec![0.0; n_actions]; n_states];
        for s in 0..n_states {
            for a in 0..n_actions {
                // Sparse-ish random rows via normalized exponentials.
                let raw: Vec<f64> = (0..n_states)
                    .map(|_| -(rng.gen_range(1e-12..1.0f64)).ln())
                    .collect();
                let sum: f64 = raw.iter().sum();
                transition[s][a] = raw.iter().map(|r| r / sum).collect();
                reward[s][a] = rng.gen_range(-1.0..1.0);
                cost[s][a] = f64::from(u8::from(rng.gen_bool(0.15)));
            }
        }
        let raw: Vec<f64> = (0..n_states)
            .map(|_| -(rng.gen_range(1e-12..1.0f64)).ln())
            .collect();
        let sum: f64 = raw.iter().sum();
        let initial: Vec<f64> = raw.iter().map(|r| r / sum).collect();
        let mdp = TabularMdp {
            n_states,
            n_actions,
            transition,
            reward,
            cost,
            initial,
            gamma: 0.95,
        };

        let mut pi_task = vec![vec![0.0; n_actions]; n_states];
        for row in pi_task.iter_mut() {
            let raw: Vec<f64> = (0..n_actions).map(|_| rng.gen_range(0.05..1.0)).collect();
            let sum: f64 = raw.iter().sum();
            *row = raw.iter().map(|r| r / sum).collect();
        }

        let ch = exact_ch(&mdp, &pi_task, &cfg);
        let risky: Vec<Vec<bool>> = ch
            .iter()
            .map(|row| row.iter().map(|c| *c > cfg.eps_safe).collect())
            .collect();
        if risky.iter().any(|row| row.iter().all(|r| *r)) {
            continue; // some state has no safe action; recovery impossible
        }
        let Ok((_, advantage)) = exact_advantage(&mdp, &pi_task) else {
            continue;
        };

        // Recovery: mass on the best safe action, small leak over the rest.
        let mut pi_rec = vec![vec![0.0; n_actions]; n_states];
        let leak = rng.gen_range(0.0..0.05);
        for s in 0..n_states {
            let best_safe = (0..n_actions)
                .filter(|&a| !risky[s][a])
                .max_by(|&a, &b| advantage[s][a].partial_cmp(&advantage[s][b]).unwrap())
                .expect("safe action exists");
            for a in 0..n_actions {
                pi_rec[s][a] = if a == best_safe {
                    1.0 - leak
                } else {
                    leak / (n_actions - 1) as f64
                };
            }
        }

        let Ok(probe) = theorem_probe(&mdp, &pi_task, &pi_rec, &cfg) else {
            continue;
        };
        if probe.assumption_failures.is_empty() {
            return (mdp, pi_task, pi_rec);
        }
    }
}
