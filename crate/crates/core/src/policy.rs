//! Task/recovery policy learning: behavior cloning, GAE, and the clipped
//! surrogate update shared by the offline and online phases.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ActionSource, DemoSet};
use crate::envs::{ACTION_DIM, OBS_DIM};
use crate::numerics::{
    optimizer_step, Activation, DiagonalGaussian, NetworkParams, NetworkSpec, OptimizerState,
    OutputTransform, LOG_STD_MAX, LOG_STD_MIN,
};
use crate::{FarlError, Result};

/// Live Gaussian policy plus a frozen behavior snapshot (the `pi_k` of the
/// clipped objective). Acting always uses the live parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyBundle {
    pub mean_net: NetworkParams,
    pub log_std: Vec<f64>,
    pub snapshot_net: NetworkParams,
    pub snapshot_log_std: Vec<f64>,
}

pub fn default_policy_spec() -> NetworkSpec {
    NetworkSpec::new(
        vec![OBS_DIM, 64, 64, ACTION_DIM],
        Activation::Tanh,
        OutputTransform::Identity,
    )
    .expect("static spec")
}

pub fn default_value_spec() -> NetworkSpec {
    NetworkSpec::new(
        vec![OBS_DIM, 64, 64, 1],
        Activation::Tanh,
        OutputTransform::Identity,
    )
    .expect("static spec")
}

impl PolicyBundle {
    pub fn init(spec: NetworkSpec, rng: &mut ChaCha8Rng) -> Self {
        let net = NetworkParams::init(spec, rng);
        let log_std = vec![-0.5; net.spec.output_dim()];
        Self {
            snapshot_net: net.clone(),
            snapshot_log_std: log_std.clone(),
            mean_net: net,
            log_std,
        }
    }

    pub fn distribution(&self, obs: &[f64]) -> Result<DiagonalGaussian> {
        DiagonalGaussian::new(self.mean_net.forward(obs)?, self.log_std.clone())
    }

    pub fn snapshot_distribution(&self, obs: &[f64]) -> Result<DiagonalGaussian> {
        DiagonalGaussian::new(self.snapshot_net.forward(obs)?, self.snapshot_log_std.clone())
    }

    /// Deterministic action: the mean head, clamped to the command range.
    pub fn act_mean(&self, obs: &[f64]) -> Result<Vec<f64>> {
        Ok(self
            .mean_net
            .forward(obs)?
            .into_iter()
            .map(|v| v.clamp(-1.0, 1.0))
            .collect())
    }

    pub fn act_sample(&self, obs: &[f64], rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        Ok(self
            .distribution(obs)?
            .sample(rng)
            .into_iter()
            .map(|v| v.clamp(-1.0, 1.0))
            .collect())
    }

    pub fn refresh_snapshot(&mut self) {
        self.snapshot_net = self.mean_net.clone();
        self.snapshot_log_std = self.log_std.clone();
    }

    pub fn param_count(&self) -> usize {
        self.mean_net.values.len() + self.log_std.len()
    }

    /// One Adam step over the concatenated (net, log_std) parameter vector.
    fn apply_grad(&mut self, opt: &mut OptimizerState, grad: &[f64]) -> Result<()> {
        let n = self.mean_net.values.len();
        let mut params: Vec<f64> = self
            .mean_net
            .values
            .iter()
            .chain(self.log_std.iter())
            .copied()
            .collect();
        optimizer_step(opt, &mut params, grad)?;
        self.mean_net.values.copy_from_slice(&params[..n]);
        for (dst, src) in self.log_std.iter_mut().zip(&params[n..]) {
            *dst = src.clamp(LOG_STD_MIN, LOG_STD_MAX);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueFunction {
    pub net: NetworkParams,
}

impl ValueFunction {
    pub fn init(spec: NetworkSpec, rng: &mut ChaCha8Rng) -> Self {
        Self {
            net: NetworkParams::init(spec, rng),
        }
    }

    pub fn value(&self, obs: &[f64]) -> Result<f64> {
        Ok(self.net.forward(obs)?[0])
    }
}

/// Aligned arrays feeding one clipped-objective evaluation.
#[derive(Debug, Clone)]
pub struct AdvantageBatch {
    pub obs: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub value_targets: Vec<f64>,
    /// Whether `advantages` were normalized to zero mean / unit variance.
    pub normalized: bool,
}

impl AdvantageBatch {
    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    fn validate(&self) -> Result<()> {
        let n = self.obs.len();
        if [
            self.actions.len(),
            self.old_log_probs.len(),
            self.advantages.len(),
            self.value_targets.len(),
        ]
        .iter()
        .any(|&l| l != n)
        {
            return Err(FarlError::ShapeMismatch(
                "advantage batch arrays are not aligned".into(),
            ));
        }
        if n == 0 {
            return Err(FarlError::InvalidConfig("empty advantage batch".into()));
        }
        Ok(())
    }
}

/// PPO-style hyperparameters shared by the offline and online updates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lambda_gae: f64,
    pub eps_clip: f64,
    pub lr_policy: f64,
    pub lr_value: f64,
    pub batch_size: usize,
    pub epochs_per_iter: usize,
    /// Snapshot refresh cadence during the offline phase, in epochs.
    pub snapshot_refresh_k: usize,
    pub kl_early_stop: f64,
    pub normalize_advantages: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda_gae: 0.95,
            eps_clip: 0.2,
            lr_policy: 3e-4,
            lr_value: 1e-3,
            batch_size: 256,
            epochs_per_iter: 4,
            snapshot_refresh_k: 10,
            kl_early_stop: 0.5,
            normalize_advantages: true,
        }
    }
}

const LOG_RATIO_CLAMP: f64 = 20.0;

/// Gaussian log-density gradient pieces for one sample: (dlogp/dmean,
/// dlogp/dlog_std), with z = (a - mean) / std.
fn log_prob_grads(dist: &DiagonalGaussian, action: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut d_mean = Vec::with_capacity(action.len());
    let mut d_log_std = Vec::with_capacity(action.len());
    for j in 0..action.len() {
        let std = dist.log_std()[j].exp();
        let z = (action[j] - dist.mean()[j]) / std;
        d_mean.push(z / std);
        d_log_std.push(z * z - 1.0);
    }
    (d_mean, d_log_std)
}

pub struct BcOutcome {
    pub bundle: PolicyBundle,
    /// Mean negative log-likelihood per epoch.
    pub epoch_losses: Vec<f64>,
}

/// BC batch loss (mean negative log-likelihood) and its gradient over
/// concatenated (mean_net, log_std) parameters.
pub fn bc_loss_grad(
    bundle: &PolicyBundle,
    pairs: &[(&[f64], &[f64])],
) -> Result<(f64, Vec<f64>)> {
    if pairs.is_empty() {
        return Err(FarlError::InvalidConfig("bc_loss_grad: empty batch".into()));
    }
    let n = pairs.len() as f64;
    let net_len = bundle.mean_net.values.len();
    let mut grad = vec![0.0; bundle.param_count()];
    let mut loss = 0.0;
    for (obs, action) in pairs {
        let trace = bundle.mean_net.forward_trace(obs)?;
        let dist = DiagonalGaussian::new(trace.output.clone(), bundle.log_std.clone())?;
        loss -= dist.log_prob(action)?;
        let (d_mean, d_log_std) = log_prob_grads(&dist, action);
        // loss = -mean logp, so flip sign and divide by batch size.
        let out_grad: Vec<f64> = d_mean.iter().map(|g| -g / n).collect();
        let back = bundle.mean_net.backward_from_trace(&trace, &out_grad)?;
        for (g, b) in grad[..net_len].iter_mut().zip(&back.params) {
            *g += b;
        }
        for (g, d) in grad[net_len..].iter_mut().zip(&d_log_std) {
            *g += -d / n;
        }
    }
    Ok((loss / n, grad))
}

/// Behavior cloning: maximize the Gaussian log-likelihood of demo actions.
pub fn bc_train(
    demos: &DemoSet,
    spec: NetworkSpec,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<BcOutcome> {
    let pairs: Vec<(&[f64], &[f64])> = demos
        .trajectories
        .iter()
        .flat_map(|t| &t.transitions)
        .map(|t| (t.obs.as_slice(), t.action.as_slice()))
        .collect();
    if pairs.is_empty() {
        return Err(FarlError::InvalidConfig("bc_train: empty demo set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bundle = PolicyBundle::init(spec, &mut rng);
    let mut opt = OptimizerState::new(bundle.param_count(), lr);
    let batch_size = 256.min(pairs.len());
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut epoch_losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut loss_n = 0usize;
        for chunk in order.chunks(batch_size) {
            let batch: Vec<(&[f64], &[f64])> = chunk.iter().map(|&i| pairs[i]).collect();
            let (batch_loss, grad) = bc_loss_grad(&bundle, &batch)?;
            if !batch_loss.is_finite() {
                return Err(FarlError::Training(format!(
                    "bc_train diverged at epoch {epoch}"
                )));
            }
            loss_sum += batch_loss * chunk.len() as f64;
            loss_n += chunk.len();
            bundle.apply_grad(&mut opt, &grad)?;
        }
        epoch_losses.push(loss_sum / loss_n as f64);
    }
    bundle.refresh_snapshot();
    Ok(BcOutcome {
        bundle,
        epoch_losses,
    })
}

/// GAE backward recursion. `bootstrap` is V(s_T) (zero after true terminals).
pub fn gae_compute(
    rewards: &[f64],
    values: &[f64],
    bootstrap: f64,
    gamma: f64,
    lambda_gae: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if rewards.len() != values.len() {
        return Err(FarlError::ShapeMismatch(format!(
            "gae: rewards {} vs values {}",
            rewards.len(),
            values.len()
        )));
    }
    if !(0.0..=1.0).contains(&gamma) || !(0.0..=1.0).contains(&lambda_gae) {
        return Err(FarlError::InvalidConfig(format!(
            "gae: gamma {gamma}, lambda {lambda_gae} outside [0,1]"
        )));
    }
    let n = rewards.len();
    let mut advantages = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let next_v = if t + 1 < n { values[t + 1] } else { bootstrap };
        let delta = rewards[t] + gamma * next_v - values[t];
        acc = delta + gamma * lambda_gae * acc;
        advantages[t] = acc;
    }
    let targets = advantages
        .iter()
        .zip(values)
        .map(|(a, v)| a + v)
        .collect();
    Ok((advantages, targets))
}

pub struct ObjectiveOutcome {
    pub loss: f64,
    /// Gradient over concatenated (mean_net, log_std) parameters.
    pub grad: Vec<f64>,
    /// Samples whose log-ratio hit the +/-20 clamp (flagged, gradient zeroed).
    pub clamped: usize,
    /// Mean estimated KL(pi_k || pi) over the batch.
    pub approx_kl: f64,
}

/// Clipped surrogate: loss = -mean_t min(r_t A_t, clip(r_t, 1-eps, 1+eps) A_t)
/// with r_t the live/snapshot density ratio. `eps_clip = f64::INFINITY`
/// disables clipping.
pub fn clipped_objective(
    batch: &AdvantageBatch,
    policy: &PolicyBundle,
    eps_clip: f64,
) -> Result<ObjectiveOutcome> {
    batch.validate()?;
    if !(eps_clip > 0.0) {
        return Err(FarlError::InvalidConfig(format!(
            "eps_clip {eps_clip} must be positive"
        )));
    }
    let n = batch.len() as f64;
    let net_len = policy.mean_net.values.len();
    let mut grad = vec![0.0; policy.param_count()];
    let mut loss = 0.0;
    let mut clamped = 0usize;
    let mut kl_sum = 0.0;
    for i in 0..batch.len() {
        let obs = &batch.obs[i];
        let action = &batch.actions[i];
        let adv = batch.advantages[i];
        let trace = policy.mean_net.forward_trace(obs)?;
        let dist = DiagonalGaussian::new(trace.output.clone(), policy.log_std.clone())?;
        let logp = dist.log_prob(action)?;
        let raw_ratio = logp - batch.old_log_probs[i];
        kl_sum += batch.old_log_probs[i] - logp;
        let hit_clamp = raw_ratio.abs() > LOG_RATIO_CLAMP;
        if hit_clamp {
            clamped += 1;
        }
        let ratio = raw_ratio.clamp(-LOG_RATIO_CLAMP, LOG_RATIO_CLAMP).exp();
        let unclipped = ratio * adv;
        let clipped = if eps_clip.is_finite() {
            ratio.clamp(1.0 - eps_clip, 1.0 + eps_clip) * adv
        } else {
            unclipped
        };
        loss -= unclipped.min(clipped) / n;
        // Gradient flows only through the unclipped branch when it is active.
        let active = unclipped <= clipped && !hit_clamp;
        if active {
            let coeff = -ratio * adv / n;
            let (d_mean, d_log_std) = log_prob_grads(&dist, action);
            let out_grad: Vec<f64> = d_mean.iter().map(|g| coeff * g).collect();
            let back = policy.mean_net.backward_from_trace(&trace, &out_grad)?;
            for (g, b) in grad[..net_len].iter_mut().zip(&back.params) {
                *g += b;
            }
            for (g, d) in grad[net_len..].iter_mut().zip(&d_log_std) {
                *g += coeff * d;
            }
        }
    }
    if !loss.is_finite() {
        return Err(FarlError::NonFinite(format!("clipped objective = {loss}")));
    }
    Ok(ObjectiveOutcome {
        loss,
        grad,
        clamped,
        approx_kl: kl_sum / n,
    })
}

/// One value-regression step toward `targets`: loss = mean (V - y)^2.
pub fn value_update(
    value: &mut ValueFunction,
    opt: &mut OptimizerState,
    obs: &[Vec<f64>],
    targets: &[f64],
) -> Result<f64> {
    if obs.len() != targets.len() || obs.is_empty() {
        return Err(FarlError::ShapeMismatch(
            "value_update: obs/targets misaligned or empty".into(),
        ));
    }
    let n = obs.len() as f64;
    let mut grad = vec![0.0; value.net.values.len()];
    let mut loss = 0.0;
    for (o, y) in obs.iter().zip(targets) {
        let trace = value.net.forward_trace(o)?;
        let v = trace.output[0];
        loss += (v - y) * (v - y);
        let back = value
            .net
            .backward_from_trace(&trace, &[2.0 * (v - y) / n])?;
        for (g, b) in grad.iter_mut().zip(&back.params) {
            *g += b;
        }
    }
    loss /= n;
    if !loss.is_finite() {
        return Err(FarlError::NonFinite(format!("value loss = {loss}")));
    }
    optimizer_step(opt, &mut value.net.values, &grad)?;
    Ok(loss)
}

fn normalize_advantages(advantages: &mut [f64]) {
    let n = advantages.len() as f64;
    let mean = advantages.iter().sum::<f64>() / n;
    let var = advantages.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    for a in advantages.iter_mut() {
        *a = (*a - mean) / std;
    }
}

pub struct FinetuneReport {
    pub epochs_run: usize,
    pub kl_stops: usize,
    pub mean_log_likelihood_before: f64,
    pub mean_log_likelihood_after: f64,
}

fn demo_mean_log_likelihood(policy: &PolicyBundle, demos: &DemoSet) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for traj in &demos.trajectories {
        for t in &traj.transitions {
            sum += policy.distribution(&t.obs)?.log_prob(&t.action)?;
            n += 1;
        }
    }
    Ok(sum / n as f64)
}

/// Offline fine-tuning on demo trajectories: fit V to discounted returns,
/// compute GAE over the demos, and apply the clipped objective against the
/// behavior snapshot, refreshing it every `snapshot_refresh_k` epochs.
pub fn offline_finetune(
    mut policy: PolicyBundle,
    mut value: ValueFunction,
    demos: &DemoSet,
    cfg: &PpoConfig,
    epochs: usize,
    seed: u64,
) -> Result<(PolicyBundle, ValueFunction, FinetuneReport)> {
    if demos.trajectories.is_empty() {
        return Err(FarlError::InvalidConfig(
            "offline_finetune: empty demo set".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut policy_opt = OptimizerState::new(policy.param_count(), cfg.lr_policy);
    let mut value_opt = OptimizerState::new(value.net.values.len(), cfg.lr_value);
    let ll_before = demo_mean_log_likelihood(&policy, demos)?;
    policy.refresh_snapshot();
    let mut kl_stops = 0usize;
    let mut epochs_run = 0usize;
    for epoch in 0..epochs {
        if epoch > 0 && epoch % cfg.snapshot_refresh_k == 0 {
            policy.refresh_snapshot();
        }
        // Value regression toward discounted returns-to-go.
        let mut v_obs = Vec::new();
        let mut v_targets = Vec::new();
        for traj in &demos.trajectories {
            let mut ret = 0.0;
            for t in traj.transitions.iter().rev() {
                ret = t.reward + cfg.gamma * ret;
                v_obs.push(t.obs.clone());
                v_targets.push(ret);
            }
        }
        value_update(&mut value, &mut value_opt, &v_obs, &v_targets)?;

        // GAE over demo trajectories with the refreshed value function.
        let mut obs = Vec::new();
        let mut actions = Vec::new();
        let mut old_log_probs = Vec::new();
        let mut advantages = Vec::new();
        let mut value_targets = Vec::new();
        for traj in &demos.trajectories {
            let rewards: Vec<f64> = traj.transitions.iter().map(|t| t.reward).collect();
            let values: Vec<f64> = traj
                .transitions
                .iter()
                .map(|t| value.value(&t.obs))
                .collect::<Result<_>>()?;
            let last = traj.transitions.last().expect("validated non-empty");
            let bootstrap = if last.terminated {
                0.0
            } else {
                value.value(&last.next_obs)?
            };
            let (adv, tgt) = gae_compute(&rewards, &values, bootstrap, cfg.gamma, cfg.lambda_gae)?;
            for (t, (a, y)) in traj.transitions.iter().zip(adv.iter().zip(&tgt)) {
                obs.push(t.obs.clone());
                actions.push(t.action.clone());
                old_log_probs.push(policy.snapshot_distribution(&t.obs)?.log_prob(&t.action)?);
                advantages.push(*a);
                value_targets.push(*y);
            }
        }
        if cfg.normalize_advantages {
            normalize_advantages(&mut advantages);
        }
        let batch = AdvantageBatch {
            obs,
            actions,
            old_log_probs,
            advantages,
            value_targets,
            normalized: cfg.normalize_advantages,
        };

        let mut order: Vec<usize> = (0..batch.len()).collect();
        order.shuffle(&mut rng);
        let mut stopped = false;
        for chunk in order.chunks(cfg.batch_size.min(batch.len())) {
            let mini = AdvantageBatch {
                obs: chunk.iter().map(|&i| batch.obs[i].clone()).collect(),
                actions: chunk.iter().map(|&i| batch.actions[i].clone()).collect(),
                old_log_probs: chunk.iter().map(|&i| batch.old_log_probs[i]).collect(),
                advantages: chunk.iter().map(|&i| batch.advantages[i]).collect(),
                value_targets: chunk.iter().map(|&i| batch.value_targets[i]).collect(),
                normalized: batch.normalized,
            };
            let out = clipped_objective(&mini, &policy, cfg.eps_clip)?;
            if out.approx_kl > cfg.kl_early_stop {
                kl_stops += 1;
                policy.refresh_snapshot();
                stopped = true;
                break;
            }
            policy.apply_grad(&mut policy_opt, &out.grad)?;
        }
        epochs_run += 1;
        let _ = stopped;
    }
    let ll_after = demo_mean_log_likelihood(&policy, demos)?;
    policy.refresh_snapshot();
    Ok((
        policy,
        value,
        FinetuneReport {
            epochs_run,
            kl_stops,
            mean_log_likelihood_before: ll_before,
            mean_log_likelihood_after: ll_after,
        },
    ))
}

/// One on-policy step collected under the shield.
#[derive(Debug, Clone)]
pub struct BufferStep {
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    /// True termination (success or failure) - bootstrap is zero after it.
    pub terminated: bool,
    /// Episode boundary of any kind (termination or horizon truncation).
    pub episode_end: bool,
    pub old_log_prob: f64,
    pub action_source: ActionSource,
}

#[derive(Debug, Clone, Default)]
pub struct RolloutBuffer {
    pub steps: Vec<BufferStep>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

pub struct UpdateReport {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub kl_stops: usize,
    pub clamped_ratios: usize,
}

/// Standard on-policy update over a shielded rollout buffer. Recovery-action
/// transitions participate with their executed actions; `old_log_prob` was
/// recorded under the live policy at collection time.
pub fn online_update(
    policy: &mut PolicyBundle,
    value: &mut ValueFunction,
    policy_opt: &mut OptimizerState,
    value_opt: &mut OptimizerState,
    buffer: &RolloutBuffer,
    cfg: &PpoConfig,
    seed: u64,
) -> Result<UpdateReport> {
    if buffer.is_empty() {
        return Err(FarlError::InvalidConfig("online_update: empty buffer".into()));
    }
    policy.refresh_snapshot();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // GAE per episode segment.
    let mut advantages = Vec::with_capacity(buffer.len());
    let mut value_targets = Vec::with_capacity(buffer.len());
    let mut start = 0usize;
    for end in 0..buffer.len() {
        let boundary = buffer.steps[end].episode_end || end + 1 == buffer.len();
        if !boundary {
            continue;
        }
        let seg = &buffer.steps[start..=end];
        let rewards: Vec<f64> = seg.iter().map(|s| s.reward).collect();
        let values: Vec<f64> = seg
            .iter()
            .map(|s| value.value(&s.obs))
            .collect::<Result<_>>()?;
        let last = &seg[seg.len() - 1];
        let bootstrap = if last.terminated {
            0.0
        } else {
            value.value(&last.next_obs)?
        };
        let (adv, tgt) = gae_compute(&rewards, &values, bootstrap, cfg.gamma, cfg.lambda_gae)?;
        advantages.extend(adv);
        value_targets.extend(tgt);
        start = end + 1;
    }
    if cfg.normalize_advantages {
        normalize_advantages(&mut advantages);
    }

    let obs: Vec<Vec<f64>> = buffer.steps.iter().map(|s| s.obs.clone()).collect();
    let actions: Vec<Vec<f64>> = buffer.steps.iter().map(|s| s.action.clone()).collect();
    let old_log_probs: Vec<f64> = buffer.steps.iter().map(|s| s.old_log_prob).collect();

    let mut order: Vec<usize> = (0..buffer.len()).collect();
    let mut kl_stops = 0usize;
    let mut clamped = 0usize;
    let mut last_policy_loss = 0.0;
    let mut last_value_loss = 0.0;
    'epochs: for _ in 0..cfg.epochs_per_iter {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size.min(buffer.len())) {
            let mini = AdvantageBatch {
                obs: chunk.iter().map(|&i| obs[i].clone()).collect(),
                actions: chunk.iter().map(|&i| actions[i].clone()).collect(),
                old_log_probs: chunk.iter().map(|&i| old_log_probs[i]).collect(),
                advantages: chunk.iter().map(|&i| advantages[i]).collect(),
                value_targets: chunk.iter().map(|&i| value_targets[i]).collect(),
                normalized: cfg.normalize_advantages,
            };
            let out = clipped_objective(&mini, policy, cfg.eps_clip)?;
            if out.approx_kl > cfg.kl_early_stop {
                kl_stops += 1;
                break 'epochs;
            }
            clamped += out.clamped;
            last_policy_loss = out.loss;
            policy.apply_grad(policy_opt, &out.grad)?;
            let mini_targets: Vec<f64> = chunk.iter().map(|&i| value_targets[i]).collect();
            last_value_loss = value_update(value, value_opt, &mini.obs, &mini_targets)?;
        }
    }
    Ok(UpdateReport {
        policy_loss: last_policy_loss,
        value_loss: last_value_loss,
        kl_stops,
        clamped_ratios: clamped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::collect_task_demos;
    use crate::envs::TaskId;
    use rand::Rng;

    fn tiny_spec(input: usize, output: usize) -> NetworkSpec {
        NetworkSpec::new(
            vec![input, 8, output],
            Activation::Tanh,
            OutputTransform::Identity,
        )
        .unwrap()
    }

    fn synthetic_demoset(pairs: &[(Vec<f64>, Vec<f64>)]) -> DemoSet {
        use crate::data::{env_config_hash, DemoKind, Trajectory, Transition};
        // Chained dummy trajectory; only (obs, action) matter to BC.
        let transitions: Vec<Transition> = pairs
            .iter()
            .enumerate()
            .map(|(i, (obs, action))| Transition {
                obs: obs.clone(),
                action: action.clone(),
                next_obs: pairs
                    .get(i + 1)
                    .map(|(o, _)| o.clone())
                    .unwrap_or_else(|| obs.clone()),
                reward: 0.0,
                cost: 0,
                terminated: i + 1 == pairs.len(),
                failed: false,
                action_source: ActionSource::Task,
            })
            .collect();
        DemoSet {
            kind: DemoKind::TaskDemo,
            task_id: TaskId::BoundedPush,
            env_config_hash: env_config_hash(TaskId::BoundedPush),
            seed: 0,
            trajectories: vec![Trajectory {
                task_id: TaskId::BoundedPush,
                episode_seed: 0,
                transitions,
            }],
        }
    }

    #[test]
    fn bc_point_mass_converges_to_the_action() {
        let obs = vec![0.2; OBS_DIM];
        let action = vec![0.4, -0.3];
        let demos = synthetic_demoset(&[(obs.clone(), action.clone())]);
        let out = bc_train(&demos, tiny_spec(OBS_DIM, ACTION_DIM), 400, 1e-2, 0).unwrap();
        let mean = out.bundle.mean_net.forward(&obs).unwrap();
        for (m, a) in mean.iter().zip(&action) {
            assert!((m - a).abs() < 1e-2, "mean {m} vs action {a}");
        }
    }

    #[test]
    fn bc_epoch_losses_non_increasing_in_seed_median() {
        let demos = collect_task_demos(TaskId::BoundedPush, 3, 0.1, 17).unwrap();
        let epochs = 8;
        let mut per_epoch: Vec<Vec<f64>> = vec![Vec::new(); epochs];
        for seed in 0..20 {
            let out = bc_train(&demos, tiny_spec(OBS_DIM, ACTION_DIM), epochs, 3e-4, seed).unwrap();
            for (e, l) in out.epoch_losses.iter().enumerate() {
                per_epoch[e].push(*l);
            }
        }
        let medians: Vec<f64> = per_epoch
            .iter()
            .map(|v| {
                let mut s = v.clone();
                s.sort_by(f64::total_cmp);
                s[s.len() / 2]
            })
            .collect();
        for w in medians.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "median losses increased: {medians:?}");
        }
    }

    /// Least-squares fit via normal equations (tiny dims, Gaussian elimination).
    fn least_squares(xs: &[Vec<f64>], ys: &[f64]) -> Vec<f64> {
        let d = xs[0].len() + 1; // affine term
        let mut ata = vec![vec![0.0; d]; d];
        let mut atb = vec![0.0; d];
        for (x, y) in xs.iter().zip(ys) {
            let row: Vec<f64> = x.iter().copied().chain(std::iter::once(1.0)).collect();
            for i in 0..d {
                for j in 0..d {
                    ata[i][j] += row[i] * row[j];
                }
                atb[i] += row[i] * y;
            }
        }
        // Gaussian elimination with partial pivoting.
        for col in 0..d {
            let piv = (col..d)
                .max_by(|&a, &b| ata[a][col].abs().total_cmp(&ata[b][col].abs()))
                .unwrap();
            ata.swap(col, piv);
            atb.swap(col, piv);
            let diag = ata[col][col];
            for row in 0..d {
                if row == col {
                    continue;
                }
                let f = ata[row][col] / diag;
                for k in 0..d {
                    ata[row][k] -= f * ata[col][k];
                }
                atb[row] -= f * atb[col];
            }
        }
        (0..d).map(|i| atb[i] / ata[i][i]).collect()
    }

    #[test]
    fn bc_matches_least_squares_on_linear_demos() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = [[0.5, -0.3, 0.2], [-0.1, 0.4, 0.6]];
        let b = [0.1, -0.2];
        let mut pairs = Vec::new();
        for _ in 0..200 {
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..2)
                .map(|k| w[k].iter().zip(&x).map(|(wi, xi)| wi * xi).sum::<f64>() + b[k])
                .collect();
            pairs.push((x, y));
        }
        let demos = synthetic_demoset(&pairs);
        let out = bc_train(&demos, tiny_spec(3, 2), 600, 3e-3, 5).unwrap();
        // Oracle: per-output-dim least squares on the same data.
        let xs: Vec<Vec<f64>> = pairs.iter().map(|(x, _)| x.clone()).collect();
        let mut sq = 0.0;
        let mut n = 0usize;
        for k in 0..2 {
            let ys: Vec<f64> = pairs.iter().map(|(_, y)| y[k]).collect();
            let coef = least_squares(&xs, &ys);
            for x in &xs {
                let ls: f64 =
                    coef[..3].iter().zip(x).map(|(c, xi)| c * xi).sum::<f64>() + coef[3];
                let net = out.bundle.mean_net.forward(x).unwrap()[k];
                sq += (net - ls) * (net - ls);
                n += 1;
            }
        }
        let rmse = (sq / n as f64).sqrt();
        assert!(rmse < 5e-2, "rmse vs least squares = {rmse}");
    }

    #[test]
    fn gae_lambda_zero_is_one_step_td() {
        let rewards = [1.0, -0.5, 2.0];
        let values = [0.3, 0.1, -0.2];
        let (adv, _) = gae_compute(&rewards, &values, 0.7, 0.9, 0.0).unwrap();
        let expect = [
            1.0 + 0.9 * 0.1 - 0.3,
            -0.5 + 0.9 * (-0.2) - 0.1,
            2.0 + 0.9 * 0.7 - (-0.2),
        ];
        for (a, e) in adv.iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn gae_full_lambda_is_monte_carlo_return() {
        let rewards = [1.0, 2.0, 3.0, 4.0];
        let values = [0.0; 4];
        let (adv, targets) = gae_compute(&rewards, &values, 0.0, 1.0, 1.0).unwrap();
        let expect = [10.0, 9.0, 7.0, 4.0];
        for ((a, t), e) in adv.iter().zip(&targets).zip(&expect) {
            assert!((a - e).abs() < 1e-12);
            assert!((t - e).abs() < 1e-12);
        }
    }

    #[test]
    fn gae_recursion_matches_double_sum() {
        // Oracle: A_t = sum_l (gamma*lambda)^l * delta_{t+l}, computed directly.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let n = rng.gen_range(1..40);
            let rewards: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let bootstrap = rng.gen_range(-2.0..2.0);
            let gamma = rng.gen_range(0.0..1.0);
            let lam = rng.gen_range(0.0..1.0);
            let (adv, _) = gae_compute(&rewards, &values, bootstrap, gamma, lam).unwrap();
            let delta = |t: usize| {
                let next_v = if t + 1 < n { values[t + 1] } else { bootstrap };
                rewards[t] + gamma * next_v - values[t]
            };
            for t in 0..n {
                let mut direct = 0.0;
                for l in 0..n - t {
                    direct += (gamma * lam).powi(l as i32) * delta(t + l);
                }
                assert!((adv[t] - direct).abs() < 1e-8, "t={t}: {} vs {direct}", adv[t]);
            }
        }
    }

    fn singleton_batch(
        policy: &PolicyBundle,
        obs: Vec<f64>,
        action: Vec<f64>,
        adv: f64,
        ratio: f64,
    ) -> AdvantageBatch {
        let logp = policy.distribution(&obs).unwrap().log_prob(&action).unwrap();
        AdvantageBatch {
            old_log_probs: vec![logp - ratio.ln()],
            obs: vec![obs],
            actions: vec![action],
            advantages: vec![adv],
            value_targets: vec![0.0],
            normalized: false,
        }
    }

    #[test]
    fn clipped_objective_arithmetic_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let policy = PolicyBundle::init(tiny_spec(4, 2), &mut rng);
        let obs = vec![0.1, -0.2, 0.3, 0.0];
        let action = vec![0.2, 0.1];
        // r = 1 everywhere -> objective = A.
        let b = singleton_batch(&policy, obs.clone(), action.clone(), 0.7, 1.0);
        let out = clipped_objective(&b, &policy, 0.2).unwrap();
        assert!((out.loss - (-0.7)).abs() < 1e-10);
        // r = 1.5, A = 1.0, eps = 0.2 -> min(1.5, 1.2) = 1.2.
        let b = singleton_batch(&policy, obs.clone(), action.clone(), 1.0, 1.5);
        let out = clipped_objective(&b, &policy, 0.2).unwrap();
        assert!((out.loss - (-1.2)).abs() < 1e-10, "loss {}", out.loss);
        // r = 0.5, A = -1.0, eps = 0.2 -> min(-0.5, -0.8) = -0.8.
        let b = singleton_batch(&policy, obs, action, -1.0, 0.5);
        let out = clipped_objective(&b, &policy, 0.2).unwrap();
        assert!((out.loss - 0.8).abs() < 1e-10, "loss {}", out.loss);
    }

    fn random_batch(
        policy: &PolicyBundle,
        n: usize,
        rng: &mut ChaCha8Rng,
    ) -> AdvantageBatch {
        let din = policy.mean_net.spec.input_dim();
        let dout = policy.mean_net.spec.output_dim();
        let mut obs = Vec::new();
        let mut actions = Vec::new();
        let mut old_log_probs = Vec::new();
        let mut advantages = Vec::new();
        for _ in 0..n {
            let o: Vec<f64> = (0..din).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let a: Vec<f64> = (0..dout).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let logp = policy.distribution(&o).unwrap().log_prob(&a).unwrap();
            old_log_probs.push(logp + rng.gen_range(-0.3..0.3));
            obs.push(o);
            actions.push(a);
            advantages.push(rng.gen_range(-2.0..2.0));
        }
        AdvantageBatch {
            obs,
            actions,
            old_log_probs,
            advantages,
            value_targets: vec![0.0; n],
            normalized: false,
        }
    }

    #[test]
    fn clipped_objective_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for case in 0..20 {
            let mut policy = PolicyBundle::init(tiny_spec(3, 2), &mut rng);
            let batch = random_batch(&policy, 8, &mut rng);
            let out = clipped_objective(&batch, &policy, 0.2).unwrap();
            let n_net = policy.mean_net.values.len();
            let eps = 1e-6;
            for k in (0..policy.param_count()).step_by(7) {
                let orig = if k < n_net {
                    policy.mean_net.values[k]
                } else {
                    policy.log_std[k - n_net]
                };
                let set = |p: &mut PolicyBundle, v: f64| {
                    if k < n_net {
                        p.mean_net.values[k] = v;
                    } else {
                        p.log_std[k - n_net] = v;
                    }
                };
                set(&mut policy, orig + eps);
                let up = clipped_objective(&batch, &policy, 0.2).unwrap().loss;
                set(&mut policy, orig - eps);
                let dn = clipped_objective(&batch, &policy, 0.2).unwrap().loss;
                set(&mut policy, orig);
                let fd = (up - dn) / (2.0 * eps);
                let g = out.grad[k];
                let denom = fd.abs().max(g.abs());
                if denom > 1e-7 {
                    assert!(
                        ((fd - g) / denom).abs() < 1e-4,
                        "case {case} param {k}: fd {fd} vs grad {g}"
                    );
                }
            }
        }
    }

    #[test]
    fn unclipped_identity_ratio_equals_vanilla_policy_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let policy = PolicyBundle::init(tiny_spec(3, 2), &mut rng);
        let mut batch = random_batch(&policy, 16, &mut rng);
        // Force r = 1: old log-probs equal live log-probs.
        for i in 0..batch.len() {
            batch.old_log_probs[i] = policy
                .distribution(&batch.obs[i])
                .unwrap()
                .log_prob(&batch.actions[i])
                .unwrap();
        }
        let out = clipped_objective(&batch, &policy, f64::INFINITY).unwrap();
        // Vanilla estimator: grad of -mean(logp * A).
        let n = batch.len() as f64;
        let net_len = policy.mean_net.values.len();
        let mut vanilla = vec![0.0; policy.param_count()];
        for i in 0..batch.len() {
            let trace = policy.mean_net.forward_trace(&batch.obs[i]).unwrap();
            let dist =
                DiagonalGaussian::new(trace.output.clone(), policy.log_std.clone()).unwrap();
            let (d_mean, d_log_std) = log_prob_grads(&dist, &batch.actions[i]);
            let coeff = -batch.advantages[i] / n;
            let og: Vec<f64> = d_mean.iter().map(|g| coeff * g).collect();
            let back = policy.mean_net.backward_from_trace(&trace, &og).unwrap();
            for (g, b) in vanilla[..net_len].iter_mut().zip(&back.params) {
                *g += b;
            }
            for (g, d) in vanilla[net_len..].iter_mut().zip(&d_log_std) {
                *g += coeff * d;
            }
        }
        let dot: f64 = out.grad.iter().zip(&vanilla).map(|(a, b)| a * b).sum();
        let na: f64 = out.grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        let nb: f64 = vanilla.iter().map(|g| g * g).sum::<f64>().sqrt();
        assert!(dot / (na * nb) > 0.999, "cosine {}", dot / (na * nb));
    }

    #[test]
    fn advantage_scaling_preserves_update_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let policy = PolicyBundle::init(tiny_spec(3, 2), &mut rng);
        let batch = random_batch(&policy, 16, &mut rng);
        let mut scaled = batch.clone();
        let c = 3.7;
        for a in scaled.advantages.iter_mut() {
            *a *= c;
        }
        let base = clipped_objective(&batch, &policy, 0.2).unwrap();
        let big = clipped_objective(&scaled, &policy, 0.2).unwrap();
        assert!((big.loss - c * base.loss).abs() < 1e-9 * c.max(1.0));
        let dot: f64 = base.grad.iter().zip(&big.grad).map(|(a, b)| a * b).sum();
        let na: f64 = base.grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        let nb: f64 = big.grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        assert!(dot / (na * nb) > 0.999);
    }

    #[test]
    fn zero_advantages_produce_no_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let policy = PolicyBundle::init(tiny_spec(3, 2), &mut rng);
        let mut batch = random_batch(&policy, 16, &mut rng);
        batch.advantages = vec![0.0; batch.len()];
        let out = clipped_objective(&batch, &policy, 0.2).unwrap();
        let norm: f64 = out.grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        assert!(norm < 1e-6, "gradient norm {norm}");
    }

    #[test]
    fn snapshot_log_probs_are_bit_stable_across_live_updates() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut policy = PolicyBundle::init(tiny_spec(3, 2), &mut rng);
        let obs = vec![0.1, 0.2, -0.3];
        let action = vec![0.4, -0.1];
        policy.refresh_snapshot();
        let before = policy
            .snapshot_distribution(&obs)
            .unwrap()
            .log_prob(&action)
            .unwrap();
        // Move the live parameters; snapshot must not budge.
        for v in policy.mean_net.values.iter_mut() {
            *v += 0.123;
        }
        policy.log_std[0] = 1.0;
        let after = policy
            .snapshot_distribution(&obs)
            .unwrap()
            .log_prob(&action)
            .unwrap();
        assert_eq!(before.to_bits(), after.to_bits());
    }

    #[test]
    fn offline_finetune_preserves_demo_log_likelihood() {
        let demos = collect_task_demos(TaskId::BoundedPush, 5, 0.1, 23).unwrap();
        let bc = bc_train(&demos, default_policy_spec(), 30, 1e-3, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let value = ValueFunction::init(default_value_spec(), &mut rng);
        let cfg = PpoConfig::default();
        let (_tuned, _v, report) =
            offline_finetune(bc.bundle, value, &demos, &cfg, 20, 2).unwrap();
        // Log-likelihoods are negative; "not reduced by more than 30%" means
        // the magnitude may grow by at most 30% below the BC endpoint.
        let before = report.mean_log_likelihood_before;
        let after = report.mean_log_likelihood_after;
        let floor = if before < 0.0 { before * 1.3 } else { before * 0.7 };
        assert!(after >= floor, "LL collapsed: before {before}, after {after}");
    }

    #[test]
    fn online_update_rejects_empty_buffer() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut policy = PolicyBundle::init(tiny_spec(3, 2), &mut rng);
        let mut value = ValueFunction::init(
            NetworkSpec::new(vec![3, 8, 1], Activation::Tanh, OutputTransform::Identity).unwrap(),
            &mut rng,
        );
        let mut po = OptimizerState::new(policy.param_count(), 3e-4);
        let mut vo = OptimizerState::new(value.net.values.len(), 1e-3);
        let buffer = RolloutBuffer::default();
        let err = online_update(
            &mut policy,
            &mut value,
            &mut po,
            &mut vo,
            &buffer,
            &PpoConfig::default(),
            0,
        );
        assert!(matches!(err, Err(FarlError::InvalidConfig(_))));
    }
}
