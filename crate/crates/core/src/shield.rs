//! Safety shield: estimate the discounted probability of a constraint
//! violation over a short lookahead and replace risky task actions with
//! recovery actions. Estimators: the learned world model (default), a Q_safe
//! critic, or an MPPI planner; `none` disables shielding.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::ActionSource;
use crate::numerics::{optimizer_step, NetworkParams, OptimizerState};
use crate::worldmodel::{latent_rollout, ActionProvider, WorldModel};
use crate::{FarlError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShieldMode {
    WorldModel,
    #[serde(rename = "qsafe")]
    QSafe,
    Mppi,
    None,
}

impl ShieldMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ShieldMode::WorldModel => "world_model",
            ShieldMode::QSafe => "qsafe",
            ShieldMode::Mppi => "mppi",
            ShieldMode::None => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "world_model" => Ok(ShieldMode::WorldModel),
            "qsafe" => Ok(ShieldMode::QSafe),
            "mppi" => Ok(ShieldMode::Mppi),
            "none" => Ok(ShieldMode::None),
            other => Err(FarlError::InvalidConfig(format!(
                "unknown shield mode '{other}' (expected world_model|qsafe|mppi|none)"
            ))),
        }
    }
}

impl std::fmt::Display for ShieldMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SafetyConfig {
    /// Lookahead horizon H; the estimate sums H+1 discounted terms.
    pub h: usize,
    pub gamma_risk: f64,
    pub eps_safe: f64,
    pub gamma_safe: f64,
    /// Rollouts averaged per estimate; 1 uses deterministic mean actions.
    pub n_mc: usize,
    pub mode: ShieldMode,
}

impl Default for SafetyConfig {
    fn default() -> Self {
        Self {
            h: 5,
            gamma_risk: 0.9,
            eps_safe: 0.3,
            gamma_safe: 0.9,
            n_mc: 1,
            mode: ShieldMode::WorldModel,
        }
    }
}

impl SafetyConfig {
    /// Maximum attainable estimate: sum_{i=0..H} gamma_risk^i.
    pub fn risk_budget(&self) -> f64 {
        (0..=self.h).map(|i| self.gamma_risk.powi(i as i32)).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_risk > 0.0 && self.gamma_risk <= 1.0) {
            return Err(FarlError::InvalidConfig(format!(
                "gamma_risk {} outside (0, 1]",
                self.gamma_risk
            )));
        }
        if !(self.gamma_safe > 0.0 && self.gamma_safe <= 1.0) {
            return Err(FarlError::InvalidConfig(format!(
                "gamma_safe {} outside (0, 1]",
                self.gamma_safe
            )));
        }
        if self.n_mc < 1 {
            return Err(FarlError::InvalidConfig("n_mc must be >= 1".into()));
        }
        // A threshold at or above the budget could never fire.
        if !(self.eps_safe > 0.0 && self.eps_safe < self.risk_budget()) {
            return Err(FarlError::InvalidConfig(format!(
                "eps_safe {} outside (0, {}) for h={} gamma_risk={}",
                self.eps_safe,
                self.risk_budget(),
                self.h,
                self.gamma_risk
            )));
        }
        Ok(())
    }
}

/// Minimal dynamics interface the risk estimate needs. The learned world
/// model implements it deterministically; tests substitute exact models whose
/// `step` may sample.
pub trait RiskModel {
    fn encode(&self, obs: &[f64]) -> Result<Vec<f64>>;
    fn decode(&self, z: &[f64]) -> Result<Vec<f64>>;
    fn step(&self, z: &[f64], action: &[f64], rng: &mut ChaCha8Rng) -> Result<Vec<f64>>;
    fn constraint(&self, z: &[f64], action: &[f64]) -> Result<f64>;
}

impl RiskModel for WorldModel {
    fn encode(&self, obs: &[f64]) -> Result<Vec<f64>> {
        WorldModel::encode(self, obs)
    }

    fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        WorldModel::decode(self, z)
    }

    fn step(&self, z: &[f64], action: &[f64], _rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        self.step_latent(z, action)
    }

    fn constraint(&self, z: &[f64], action: &[f64]) -> Result<f64> {
        WorldModel::constraint(self, z, action)
    }
}

/// Rollout policy: maps a decoded observation (plus rollout randomness) to an
/// action. Deterministic estimates ignore the rng.
pub type RolloutPolicy<'a> = &'a dyn Fn(&[f64], &mut ChaCha8Rng) -> Result<Vec<f64>>;

/// C_H(s_t, a_t): mean over n_mc rollouts of sum_{i=0..H} gamma_risk^i *
/// C(z_i, a_i), where a_0 is the proposed action and later actions come from
/// the rollout policy applied to decoded latents.
pub fn ch_estimate(
    model: &dyn RiskModel,
    policy: RolloutPolicy,
    obs: &[f64],
    proposed: &[f64],
    cfg: &SafetyConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    cfg.validate()?;
    let mut total = 0.0;
    for _ in 0..cfg.n_mc {
        let mut z = model.encode(obs)?;
        for i in 0..=cfg.h {
            let action = if i == 0 {
                proposed.to_vec()
            } else {
                policy(&model.decode(&z)?, rng)?
            };
            total += cfg.gamma_risk.powi(i as i32) * model.constraint(&z, &action)?;
            if i < cfg.h {
                z = model.step(&z, &action, rng)?;
            }
        }
    }
    Ok(total / cfg.n_mc as f64)
}

/// One shield intervention record; serialized as a decisions.csv row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShieldDecision {
    pub step: u64,
    pub estimate: f64,
    pub eps_safe: f64,
    pub fired: bool,
    pub action_source: ActionSource,
    pub mode: ShieldMode,
    pub action: Vec<f64>,
}

pub const DECISIONS_CSV_HEADER: &str = "step,estimate,eps_safe,fired,action_source,mode";

impl ShieldDecision {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step,
            self.estimate,
            self.eps_safe,
            self.fired,
            match self.action_source {
                ActionSource::Task => "task",
                ActionSource::Recovery => "recovery",
            },
            self.mode
        )
    }
}

/// Estimator bound to its supporting data for one shield mode.
pub enum ShieldBackend<'a> {
    None,
    WorldModel(&'a dyn RiskModel),
    QSafe(&'a QSafeCritic),
    Mppi {
        model: &'a WorldModel,
        mppi: &'a MppiConfig,
    },
}

impl ShieldBackend<'_> {
    pub fn mode(&self) -> ShieldMode {
        match self {
            ShieldBackend::None => ShieldMode::None,
            ShieldBackend::WorldModel(_) => ShieldMode::WorldModel,
            ShieldBackend::QSafe(_) => ShieldMode::QSafe,
            ShieldBackend::Mppi { .. } => ShieldMode::Mppi,
        }
    }
}

/// Gate one proposed task action. Fires exactly when the risk estimate
/// strictly exceeds eps_safe; a risky action is replaced by the recovery
/// policy's action (or the planner's, in MPPI mode).
pub fn shield_action(
    backend: &ShieldBackend,
    task_policy: RolloutPolicy,
    recovery_policy: &dyn Fn(&[f64]) -> Result<Vec<f64>>,
    obs: &[f64],
    proposed: &[f64],
    step: u64,
    cfg: &SafetyConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ShieldDecision> {
    let estimate = match backend {
        ShieldBackend::None => 0.0,
        ShieldBackend::WorldModel(model) => {
            ch_estimate(*model, task_policy, obs, proposed, cfg, rng)?
        }
        ShieldBackend::QSafe(critic) => critic.estimate(obs, proposed)?,
        ShieldBackend::Mppi { model, .. } => {
            ch_estimate(*model, task_policy, obs, proposed, cfg, rng)?
        }
    };
    let fired = estimate > cfg.eps_safe;
    let (action, action_source) = if !fired {
        (proposed.to_vec(), ActionSource::Task)
    } else {
        match backend {
            ShieldBackend::Mppi { model, mppi } => {
                let plan = mppi_plan(model, task_policy, obs, cfg, mppi, rng)?;
                (plan.action, ActionSource::Recovery)
            }
            _ => (recovery_policy(obs)?, ActionSource::Recovery),
        }
    };
    Ok(ShieldDecision {
        step,
        estimate,
        eps_safe: cfg.eps_safe,
        fired,
        action_source,
        mode: backend.mode(),
        action,
    })
}

/// Discounted violation-probability critic over (obs, action), trained by
/// bootstrapping: y = c + (1 - c) * gamma_safe * Q^-(s', pi(s')).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QSafeCritic {
    pub net: NetworkParams,
    pub target: NetworkParams,
    pub gamma_safe: f64,
}

#[derive(Debug, Clone)]
pub struct QSafeSample {
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub cost: u8,
    pub next_obs: Vec<f64>,
    pub terminated: bool,
}

impl QSafeCritic {
    pub fn init(
        obs_dim: usize,
        action_dim: usize,
        hidden: usize,
        gamma_safe: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        use crate::numerics::{Activation, NetworkSpec, OutputTransform};
        let spec = NetworkSpec::new(
            vec![obs_dim + action_dim, hidden, hidden, 1],
            Activation::Tanh,
            OutputTransform::Sigmoid,
        )
        .expect("static spec");
        let net = NetworkParams::init(spec, rng);
        Self {
            target: net.clone(),
            net,
            gamma_safe,
        }
    }

    pub fn estimate(&self, obs: &[f64], action: &[f64]) -> Result<f64> {
        let input: Vec<f64> = obs.iter().chain(action.iter()).copied().collect();
        Ok(self.net.forward(&input)?[0])
    }

    /// Bootstrap regression target; a violating step pins it to exactly 1.
    pub fn bootstrap_target(
        &self,
        sample: &QSafeSample,
        next_action: &[f64],
    ) -> Result<f64> {
        if sample.cost == 1 {
            return Ok(1.0);
        }
        if sample.terminated {
            return Ok(0.0);
        }
        let input: Vec<f64> = sample
            .next_obs
            .iter()
            .chain(next_action.iter())
            .copied()
            .collect();
        Ok(self.gamma_safe * self.target.forward(&input)?[0])
    }
}

/// MSE regression loss toward the bootstrap targets (targets come from the
/// frozen Polyak copy, so the loss is a pure function of the live net) and
/// its gradient over the live net's parameters.
pub fn qsafe_loss_grad(
    critic: &QSafeCritic,
    batch: &[QSafeSample],
    policy: &dyn Fn(&[f64]) -> Result<Vec<f64>>,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(FarlError::InvalidConfig("qsafe_loss_grad: empty batch".into()));
    }
    let mut grad = vec![0.0; critic.net.values.len()];
    let mut loss = 0.0;
    let n = batch.len() as f64;
    for sample in batch {
        let next_action = policy(&sample.next_obs)?;
        let y = critic.bootstrap_target(sample, &next_action)?;
        let input: Vec<f64> = sample
            .obs
            .iter()
            .chain(sample.action.iter())
            .copied()
            .collect();
        let trace = critic.net.forward_trace(&input)?;
        let res = trace.output[0] - y;
        loss += res * res / n;
        let back = critic
            .net
            .backward_from_trace(&trace, &[2.0 * res / n])?;
        for (g, b) in grad.iter_mut().zip(&back.params) {
            *g += b;
        }
    }
    if !loss.is_finite() {
        return Err(FarlError::NonFinite(format!("qsafe batch loss {loss}")));
    }
    Ok((loss, grad))
}

/// One MSE step toward the bootstrap targets, then a Polyak target update.
pub fn qsafe_train_step(
    critic: &mut QSafeCritic,
    batch: &[QSafeSample],
    policy: &dyn Fn(&[f64]) -> Result<Vec<f64>>,
    opt: &mut OptimizerState,
    tau: f64,
) -> Result<f64> {
    let (loss, grad) = qsafe_loss_grad(critic, batch, policy)?;
    optimizer_step(opt, &mut critic.net.values, &grad)?;
    for (t, l) in critic.target.values.iter_mut().zip(&critic.net.values) {
        *t = tau * l + (1.0 - tau) * *t;
    }
    Ok(loss)
}

/// Fitted-iteration driver over a fixed sample buffer.
pub fn qsafe_train(
    critic: &mut QSafeCritic,
    samples: &[QSafeSample],
    policy: &dyn Fn(&[f64]) -> Result<Vec<f64>>,
    steps: usize,
    batch_size: usize,
    lr: f64,
    tau: f64,
    seed: u64,
) -> Result<f64> {
    use rand::SeedableRng;
    if samples.is_empty() {
        return Err(FarlError::InvalidConfig("qsafe_train: no samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = OptimizerState::new(critic.net.values.len(), lr);
    let mut last = 0.0;
    for _ in 0..steps {
        let batch: Vec<QSafeSample> = (0..batch_size.min(samples.len()))
            .map(|_| samples[rng.gen_range(0..samples.len())].clone())
            .collect();
        last = qsafe_train_step(critic, &batch, policy, &mut opt, tau)?;
    }
    Ok(last)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MppiConfig {
    pub n_samples: usize,
    pub sigma: f64,
    pub horizon: usize,
}

impl Default for MppiConfig {
    fn default() -> Self {
        Self {
            n_samples: 256,
            sigma: 0.3,
            horizon: 5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MppiPlan {
    pub action: Vec<f64>,
    pub ch: f64,
    pub expected_return: f64,
    pub safe_candidates: usize,
    /// Every candidate was unsafe; the minimum-risk sequence was used instead.
    pub fallback: bool,
    pub chosen_index: usize,
}

/// Candidate action sequences: the task policy's closed-loop mean sequence
/// perturbed by N(0, sigma^2 I), clamped to the action box.
pub fn mppi_sample_sequences(
    model: &WorldModel,
    task_policy: RolloutPolicy,
    obs: &[f64],
    mcfg: &MppiConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let mean_fn = |o: &[f64]| -> Result<Vec<f64>> {
        // Mean sequence uses a throwaway rng so candidate noise stays aligned
        // with the caller's stream.
        use rand::SeedableRng;
        task_policy(o, &mut ChaCha8Rng::seed_from_u64(0))
    };
    let provider = ActionProvider::Policy(&mean_fn);
    let mean_steps = latent_rollout(model, obs, None, &provider, mcfg.horizon)?;
    let mut out = Vec::with_capacity(mcfg.n_samples);
    for _ in 0..mcfg.n_samples {
        let seq: Vec<Vec<f64>> = mean_steps
            .iter()
            .map(|s| {
                s.action
                    .iter()
                    .map(|a| {
                        let n: f64 = StandardNormal.sample(rng);
                        (a + mcfg.sigma * n).clamp(-1.0, 1.0)
                    })
                    .collect()
            })
            .collect();
        out.push(seq);
    }
    Ok(out)
}

/// (C_H, summed predicted reward) per candidate sequence.
pub fn mppi_evaluate(
    model: &WorldModel,
    obs: &[f64],
    sequences: &[Vec<Vec<f64>>],
    cfg: &SafetyConfig,
) -> Result<Vec<(f64, f64)>> {
    sequences
        .iter()
        .map(|seq| {
            let provider = ActionProvider::Sequence(seq);
            let steps = latent_rollout(model, obs, None, &provider, seq.len() - 1)?;
            let ch = steps
                .iter()
                .enumerate()
                .map(|(i, s)| cfg.gamma_risk.powi(i as i32) * s.c_hat)
                .sum();
            let ret = steps.iter().map(|s| s.r_hat).sum();
            Ok((ch, ret))
        })
        .collect()
}

/// Highest-return candidate among those with C_H <= eps_safe; ties prefer
/// lower C_H, then lower index. All unsafe -> minimum-C_H fallback.
pub fn mppi_select(evals: &[(f64, f64)], eps_safe: f64) -> (usize, bool) {
    let mut best: Option<usize> = None;
    for (i, (ch, ret)) in evals.iter().enumerate() {
        if *ch > eps_safe {
            continue;
        }
        let better = match best {
            None => true,
            Some(j) => {
                let (bch, bret) = evals[j];
                *ret > bret || (*ret == bret && *ch < bch)
            }
        };
        if better {
            best = Some(i);
        }
    }
    if let Some(i) = best {
        return (i, false);
    }
    let mut min_i = 0;
    for (i, (ch, _)) in evals.iter().enumerate() {
        if *ch < evals[min_i].0 {
            min_i = i;
        }
    }
    (min_i, true)
}

pub fn mppi_plan(
    model: &WorldModel,
    task_policy: RolloutPolicy,
    obs: &[f64],
    cfg: &SafetyConfig,
    mcfg: &MppiConfig,
    rng: &mut ChaCha8Rng,
) -> Result<MppiPlan> {
    if mcfg.n_samples == 0 || mcfg.horizon == 0 {
        return Err(FarlError::InvalidConfig(
            "mppi needs n_samples >= 1 and horizon >= 1".into(),
        ));
    }
    let sequences = mppi_sample_sequences(model, task_policy, obs, mcfg, rng)?;
    let evals = mppi_evaluate(model, obs, &sequences, cfg)?;
    let safe_candidates = evals.iter().filter(|(ch, _)| *ch <= cfg.eps_safe).count();
    let (chosen, fallback) = mppi_select(&evals, cfg.eps_safe);
    Ok(MppiPlan {
        action: sequences[chosen][0].clone(),
        ch: evals[chosen].0,
        expected_return: evals[chosen].1,
        safe_candidates,
        fallback,
        chosen_index: chosen,
    })
}
