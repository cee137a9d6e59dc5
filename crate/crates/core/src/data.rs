//! Demonstration corpora: transition/trajectory types, JSONL persistence, and
//! the three collection drivers (task, recovery, failure demos).

use std::io::{BufRead, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::envs::scripted::{
    sample_near_failure_state, scripted_expert_action, scripted_recovery_action, NEAR_FAILURE_MARGIN,
};
use crate::envs::{
    env_reset, env_step, failure_distance, geometry, ActionCommand, EnvState, TaskId, ACTION_DIM,
    AGENT_RADIUS, DT, GOAL_RADIUS, HORIZON, OBJECT_RADIUS, OBS_DIM, SUCCESS_BONUS,
};
use crate::numerics::NetworkParams;
use crate::{FarlError, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Which controller produced the action in a transition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionSource {
    Task,
    Recovery,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub next_obs: Vec<f64>,
    pub reward: f64,
    pub cost: u8,
    pub terminated: bool,
    pub failed: bool,
    pub action_source: ActionSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: TaskId,
    pub episode_seed: u64,
    pub transitions: Vec<Transition>,
}

impl Trajectory {
    pub fn ret(&self) -> f64 {
        self.transitions.iter().map(|t| t.reward).sum()
    }

    pub fn ends_failed(&self) -> bool {
        self.transitions.last().is_some_and(|t| t.failed)
    }

    /// Structural invariants shared by every trajectory: consistent widths,
    /// chained observations, failure only as the terminal transition.
    pub fn validate(&self) -> Result<()> {
        if self.transitions.is_empty() {
            return Err(FarlError::Data("empty trajectory".into()));
        }
        for (i, t) in self.transitions.iter().enumerate() {
            if t.obs.len() != OBS_DIM || t.next_obs.len() != OBS_DIM {
                return Err(FarlError::Data(format!(
                    "transition {i}: obs widths {}/{} != {OBS_DIM}",
                    t.obs.len(),
                    t.next_obs.len()
                )));
            }
            if t.action.len() != ACTION_DIM {
                return Err(FarlError::Data(format!(
                    "transition {i}: action width {} != {ACTION_DIM}",
                    t.action.len()
                )));
            }
            if t.failed && t.cost != 1 {
                return Err(FarlError::Data(format!(
                    "transition {i}: failed without cost=1"
                )));
            }
            if t.failed && i + 1 != self.transitions.len() {
                return Err(FarlError::Data(format!(
                    "transition {i}: failure before the end of the trajectory"
                )));
            }
            if i + 1 < self.transitions.len() && t.next_obs != self.transitions[i + 1].obs {
                return Err(FarlError::Data(format!(
                    "transition {i}: next_obs does not chain into obs of {}",
                    i + 1
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemoKind {
    TaskDemo,
    RecoveryDemo,
    FailureDemo,
}

impl DemoKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DemoKind::TaskDemo => "task_demo",
            DemoKind::RecoveryDemo => "recovery_demo",
            DemoKind::FailureDemo => "failure_demo",
        }
    }
}

/// First line of every demo file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoHeader {
    pub schema_version: u32,
    pub task_id: TaskId,
    pub kind: DemoKind,
    pub env_config_hash: String,
    pub seed: u64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoSet {
    pub kind: DemoKind,
    pub task_id: TaskId,
    pub env_config_hash: String,
    pub seed: u64,
    pub trajectories: Vec<Trajectory>,
}

impl DemoSet {
    pub fn transition_count(&self) -> usize {
        self.trajectories.iter().map(|t| t.transitions.len()).sum()
    }

    /// Kind-specific invariants on top of [`Trajectory::validate`].
    pub fn validate(&self) -> Result<()> {
        if self.env_config_hash != env_config_hash(self.task_id) {
            return Err(FarlError::Data(format!(
                "env config hash {} does not match current geometry",
                self.env_config_hash
            )));
        }
        for (i, traj) in self.trajectories.iter().enumerate() {
            traj.validate()?;
            if traj.task_id != self.task_id {
                return Err(FarlError::Data(format!(
                    "trajectory {i} task {} != set task {}",
                    traj.task_id, self.task_id
                )));
            }
            match self.kind {
                DemoKind::TaskDemo => {
                    if traj.transitions.iter().any(|t| t.cost != 0) {
                        return Err(FarlError::Data(format!(
                            "task demo {i} contains a cost transition"
                        )));
                    }
                }
                DemoKind::RecoveryDemo => {
                    if traj.transitions.iter().any(|t| t.failed) {
                        return Err(FarlError::Data(format!("recovery demo {i} failed")));
                    }
                    let first = obs_to_state(self.task_id, &traj.transitions[0].obs);
                    let d0 = failure_distance(self.task_id, &first);
                    if !(d0 > 0.0 && d0 < NEAR_FAILURE_MARGIN) {
                        return Err(FarlError::Data(format!(
                            "recovery demo {i} starts at clearance {d0}, outside the near-failure band"
                        )));
                    }
                    let last = &traj.transitions[traj.transitions.len() - 1];
                    let end = obs_to_state(self.task_id, &last.next_obs);
                    if failure_distance(self.task_id, &end) < NEAR_FAILURE_MARGIN {
                        return Err(FarlError::Data(format!(
                            "recovery demo {i} ends inside the near-failure band"
                        )));
                    }
                }
                DemoKind::FailureDemo => {
                    if !traj.ends_failed() {
                        return Err(FarlError::Data(format!(
                            "failure demo {i} does not end in failure"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// FNV-1a hash of the task geometry and dynamics constants; stamped into every
/// dataset header so stale corpora are rejected when constants change.
pub fn env_config_hash(task: TaskId) -> String {
    let geo = geometry(task);
    let canon = format!(
        "{}|{:?}|dt={DT}|ra={AGENT_RADIUS}|ro={OBJECT_RADIUS}|rg={GOAL_RADIUS}|h={HORIZON}|b={SUCCESS_BONUS}",
        task.as_str(),
        geo
    );
    let mut h: u64 = 0xcbf29ce484222325;
    for byte in canon.as_bytes() {
        h ^= u64::from(*byte);
        h = h.wrapping_mul(0x100000001b3);
    }
    format!("{h:016x}")
}

/// Reconstruct the dynamical part of a state from its observation vector.
/// `step_index` is not observable and comes back as zero.
pub fn obs_to_state(_task: TaskId, obs: &[f64]) -> EnvState {
    EnvState {
        agent_pos: [obs[0], obs[1]],
        object_pos: [obs[2], obs[3]],
        object_vel: [obs[4], obs[5]],
        goal_pos: [obs[6], obs[7]],
        step_index: 0,
        done: false,
    }
}

pub fn save_demos(set: &DemoSet, path: &Path) -> Result<()> {
    set.validate()?;
    let header = DemoHeader {
        schema_version: SCHEMA_VERSION,
        task_id: set.task_id,
        kind: set.kind,
        env_config_hash: set.env_config_hash.clone(),
        seed: set.seed,
        count: set.trajectories.len(),
    };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("jsonl.tmp");
    {
        let mut w = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for traj in &set.trajectories {
            serde_json::to_writer(&mut w, traj)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_demos(path: &Path) -> Result<DemoSet> {
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut lines = reader.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| FarlError::Data(format!("{}: empty demo file", path.display())))??;
    let header: DemoHeader = serde_json::from_str(&header_line)?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(FarlError::Data(format!(
            "unsupported schema version {}",
            header.schema_version
        )));
    }
    let mut trajectories = Vec::with_capacity(header.count);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        trajectories.push(serde_json::from_str::<Trajectory>(&line)?);
    }
    if trajectories.len() != header.count {
        return Err(FarlError::Data(format!(
            "header count {} but {} trajectories on disk",
            header.count,
            trajectories.len()
        )));
    }
    let set = DemoSet {
        kind: header.kind,
        task_id: header.task_id,
        env_config_hash: header.env_config_hash,
        seed: header.seed,
        trajectories,
    };
    set.validate()?;
    Ok(set)
}

pub fn derive_seed(base: u64, attempt: u64) -> u64 {
    base ^ attempt.wrapping_mul(0x9e3779b97f4a7c15)
}

fn rollout<F>(
    task: TaskId,
    mut start: EnvState,
    episode_seed: u64,
    source: ActionSource,
    max_steps: u32,
    mut act: F,
) -> Result<Trajectory>
where
    F: FnMut(&EnvState, &mut ChaCha8Rng) -> ActionCommand,
{
    let mut rng = ChaCha8Rng::seed_from_u64(episode_seed.wrapping_add(1));
    let mut transitions = Vec::new();
    for _ in 0..max_steps {
        if start.done {
            break;
        }
        let action = act(&start, &mut rng);
        let out = env_step(task, &start, &action)?;
        transitions.push(Transition {
            obs: start.observation(),
            action: action.velocity.to_vec(),
            next_obs: out.next_state.observation(),
            reward: out.reward,
            cost: out.cost,
            terminated: out.terminated,
            failed: out.failed,
            action_source: source,
        });
        if out.terminated {
            break;
        }
        start = out.next_state;
    }
    Ok(Trajectory {
        task_id: task,
        episode_seed,
        transitions,
    })
}

/// Collect `n` successful expert episodes, resampling seeds on failure or
/// timeout. Fails after `10 * n` attempts.
pub fn collect_task_demos(task: TaskId, n: usize, noise_scale: f64, seed: u64) -> Result<DemoSet> {
    if n == 0 {
        return Err(FarlError::InvalidConfig("collect_task_demos: n = 0".into()));
    }
    let mut trajectories = Vec::with_capacity(n);
    let mut attempts = 0u64;
    while trajectories.len() < n {
        if attempts >= 10 * n as u64 {
            return Err(FarlError::Generator(format!(
                "{task}: only {} task-demo successes in {attempts} attempts",
                trajectories.len()
            )));
        }
        let episode_seed = derive_seed(seed, attempts);
        attempts += 1;
        let mut reset_rng = ChaCha8Rng::seed_from_u64(episode_seed);
        let start = env_reset(task, &mut reset_rng);
        let traj = rollout(task, start, episode_seed, ActionSource::Task, HORIZON, |s, rng| {
            scripted_expert_action(task, s, noise_scale, rng)
        })?;
        let last = traj.transitions.last();
        let success = last.is_some_and(|t| t.terminated && !t.failed && t.reward > 1.0);
        if success {
            trajectories.push(traj);
        }
    }
    Ok(DemoSet {
        kind: DemoKind::TaskDemo,
        task_id: task,
        env_config_hash: env_config_hash(task),
        seed,
        trajectories,
    })
}

/// Collect `n` recovery episodes: start inside the near-failure band, run the
/// recovery controller for at most 20 steps, and require the object to end
/// clear of the band without a failure.
pub fn collect_recovery_demos(task: TaskId, n: usize, seed: u64) -> Result<DemoSet> {
    if n == 0 {
        return Err(FarlError::InvalidConfig(
            "collect_recovery_demos: n = 0".into(),
        ));
    }
    let mut trajectories = Vec::with_capacity(n);
    let mut attempts = 0u64;
    while trajectories.len() < n {
        if attempts >= 10 * n as u64 {
            return Err(FarlError::Generator(format!(
                "{task}: only {} recovery-demo successes in {attempts} attempts",
                trajectories.len()
            )));
        }
        let episode_seed = derive_seed(seed, attempts);
        attempts += 1;
        let mut reset_rng = ChaCha8Rng::seed_from_u64(episode_seed);
        let start = sample_near_failure_state(task, &mut reset_rng);
        let traj = rollout(
            task,
            start,
            episode_seed,
            ActionSource::Recovery,
            20,
            |s, _| scripted_recovery_action(task, s),
        )?;
        if traj.transitions.is_empty() || traj.transitions.iter().any(|t| t.failed) {
            continue;
        }
        let end = obs_to_state(task, &traj.transitions[traj.transitions.len() - 1].next_obs);
        if failure_distance(task, &end) >= NEAR_FAILURE_MARGIN {
            trajectories.push(traj);
        }
    }
    Ok(DemoSet {
        kind: DemoKind::RecoveryDemo,
        task_id: task,
        env_config_hash: env_config_hash(task),
        seed,
        trajectories,
    })
}

/// Roll a pre-trained policy with Gaussian action noise, keeping only episodes
/// that end in failure, until at least `n_transitions` transitions accumulate.
/// A failure rate below 1/500 episodes means the noise cannot surface enough
/// failures and is reported as a generator mismatch.
pub fn collect_failure_demos(
    task: TaskId,
    n_transitions: usize,
    policy: &NetworkParams,
    noise_scale: f64,
    seed: u64,
) -> Result<DemoSet> {
    if policy.spec.input_dim() != OBS_DIM || policy.spec.output_dim() != ACTION_DIM {
        return Err(FarlError::ShapeMismatch(format!(
            "failure-demo policy is {}->{}, env needs {OBS_DIM}->{ACTION_DIM}",
            policy.spec.input_dim(),
            policy.spec.output_dim()
        )));
    }
    let mut trajectories = Vec::new();
    let mut stored = 0usize;
    let mut episodes = 0u64;
    let mut failures = 0u64;
    while stored < n_transitions {
        if episodes >= 500 && failures * 500 < episodes {
            return Err(FarlError::Generator(format!(
                "{task}: failure rate {failures}/{episodes} below 1/500; noise_scale {noise_scale} too low"
            )));
        }
        let episode_seed = derive_seed(seed, episodes);
        episodes += 1;
        let mut reset_rng = ChaCha8Rng::seed_from_u64(episode_seed);
        let start = env_reset(task, &mut reset_rng);
        let traj = rollout(task, start, episode_seed, ActionSource::Task, HORIZON, |s, rng| {
            let mean = policy.forward(&s.observation()).expect("policy forward");
            let v: Vec<f64> = mean
                .iter()
                .map(|m| {
                    let n: f64 = StandardNormal.sample(rng);
                    (m + noise_scale * n).clamp(-1.0, 1.0)
                })
                .collect();
            ActionCommand::new([v[0], v[1]])
        })?;
        if traj.ends_failed() {
            failures += 1;
            stored += traj.transitions.len();
            trajectories.push(traj);
        }
    }
    Ok(DemoSet {
        kind: DemoKind::FailureDemo,
        task_id: task,
        env_config_hash: env_config_hash(task),
        seed,
        trajectories,
    })
}

/// Linear chase-the-object policy used as the failure-demo generator: it rams
/// the object toward the agent's far side with no regard for failure geometry,
/// so with added noise it reliably drives the object into walls, the vase, or
/// out of bounds.
pub fn blind_chaser_policy() -> NetworkParams {
    let spec = crate::numerics::NetworkSpec::new(
        vec![OBS_DIM, ACTION_DIM],
        crate::numerics::Activation::Tanh,
        crate::numerics::OutputTransform::Identity,
    )
    .expect("linear spec is valid");
    let mut net = NetworkParams::zeros(spec);
    // Row-major [out][in] weights; obs layout is agent(0,1), object(2,3).
    let w = |out: usize, inp: usize| out * OBS_DIM + inp;
    net.values[w(0, 2)] = 4.0;
    net.values[w(0, 0)] = -4.0;
    net.values[w(1, 3)] = 4.0;
    net.values[w(1, 1)] = -4.0;
    net
}
