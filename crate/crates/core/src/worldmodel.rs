//! Seven-component latent world model: encoder, dynamics, reward, value,
//! policy, decoder, and constraint heads, trained with a multi-step discounted
//! loss over open-loop latent rollouts. The constraint head is what the shield
//! consumes; everything else supports it.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::DemoSet;
use crate::envs::{ACTION_DIM, OBS_DIM};
use crate::numerics::{
    optimizer_step, Activation, NetworkParams, NetworkSpec, OptimizerState, OutputTransform,
};
use crate::{FarlError, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WMConfig {
    pub d_z: usize,
    pub hidden: usize,
    pub lambda_wm: f64,
    /// Loss coefficients: reward, value, consistency, constraint, decoder.
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    pub c5: f64,
    pub h_train: usize,
    pub tau: f64,
    pub lr: f64,
    pub gamma: f64,
    /// Weight of the policy head's Q-maximization auxiliary term.
    pub aux_policy_weight: f64,
    pub batch_segments: usize,
    pub holdout_fraction: f64,
}

impl Default for WMConfig {
    fn default() -> Self {
        Self {
            d_z: 32,
            hidden: 64,
            lambda_wm: 0.9,
            c1: 0.5,
            c2: 0.1,
            c3: 1.0,
            c4: 2.0,
            c5: 0.5,
            h_train: 5,
            tau: 0.01,
            lr: 1e-3,
            gamma: 0.99,
            aux_policy_weight: 0.1,
            batch_segments: 32,
            holdout_fraction: 0.1,
        }
    }
}

impl WMConfig {
    pub fn validate(&self) -> Result<()> {
        if self.h_train < 1 {
            return Err(FarlError::InvalidConfig("h_train must be >= 1".into()));
        }
        if !(self.c4 > 0.0) {
            return Err(FarlError::InvalidConfig(
                "constraint coefficient c4 must be positive".into(),
            ));
        }
        if !(self.lambda_wm > 0.0 && self.lambda_wm <= 1.0) {
            return Err(FarlError::InvalidConfig(format!(
                "lambda_wm {} outside (0, 1]",
                self.lambda_wm
            )));
        }
        if [self.c1, self.c2, self.c3, self.c5].iter().any(|c| *c < 0.0) {
            return Err(FarlError::InvalidConfig(
                "loss coefficients must be non-negative".into(),
            ));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(FarlError::InvalidConfig(format!("tau {} outside (0, 1]", self.tau)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldModel {
    pub encoder: NetworkParams,
    pub dynamics: NetworkParams,
    pub reward_head: NetworkParams,
    pub value_head: NetworkParams,
    pub policy_head: NetworkParams,
    pub decoder: NetworkParams,
    pub constraint_head: NetworkParams,
    /// Target copies, moved only by explicit Polyak steps.
    pub encoder_target: NetworkParams,
    pub value_target: NetworkParams,
    pub d_z: usize,
}

fn mlp(widths: Vec<usize>, out: OutputTransform) -> NetworkSpec {
    NetworkSpec::new(widths, Activation::Tanh, out).expect("static spec")
}

impl WorldModel {
    pub fn init(cfg: &WMConfig, rng: &mut ChaCha8Rng) -> Self {
        Self::init_with_dims(cfg, OBS_DIM, ACTION_DIM, rng)
    }

    /// Dimension-parametric constructor; tests use tiny synthetic spaces.
    pub fn init_with_dims(
        cfg: &WMConfig,
        obs_dim: usize,
        action_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let (z, h) = (cfg.d_z, cfg.hidden);
        let encoder = NetworkParams::init(mlp(vec![obs_dim, h, z], OutputTransform::Identity), rng);
        let value_head = NetworkParams::init(
            mlp(vec![z + action_dim, h, 1], OutputTransform::Identity),
            rng,
        );
        Self {
            dynamics: NetworkParams::init(
                mlp(vec![z + action_dim, h, z], OutputTransform::Identity),
                rng,
            ),
            reward_head: NetworkParams::init(
                mlp(vec![z + action_dim, h, 1], OutputTransform::Identity),
                rng,
            ),
            policy_head: NetworkParams::init(
                mlp(vec![z, h, action_dim], OutputTransform::Identity),
                rng,
            ),
            decoder: NetworkParams::init(mlp(vec![z, h, obs_dim], OutputTransform::Identity), rng),
            constraint_head: NetworkParams::init(
                mlp(vec![z + action_dim, h, 1], OutputTransform::Sigmoid),
                rng,
            ),
            encoder_target: encoder.clone(),
            value_target: value_head.clone(),
            encoder,
            value_head,
            d_z: z,
        }
    }

    fn live_components(&self) -> [&NetworkParams; 7] {
        [
            &self.encoder,
            &self.dynamics,
            &self.reward_head,
            &self.value_head,
            &self.policy_head,
            &self.decoder,
            &self.constraint_head,
        ]
    }

    pub fn live_param_count(&self) -> usize {
        self.live_components().iter().map(|n| n.values.len()).sum()
    }

    pub fn flatten_live(&self) -> Vec<f64> {
        self.live_components()
            .iter()
            .flat_map(|n| n.values.iter().copied())
            .collect()
    }

    pub fn scatter_live(&mut self, flat: &[f64]) {
        let mut at = 0;
        for net in [
            &mut self.encoder,
            &mut self.dynamics,
            &mut self.reward_head,
            &mut self.value_head,
            &mut self.policy_head,
            &mut self.decoder,
            &mut self.constraint_head,
        ] {
            let len = net.values.len();
            net.values.copy_from_slice(&flat[at..at + len]);
            at += len;
        }
    }

    /// theta_minus <- tau * theta + (1 - tau) * theta_minus.
    pub fn polyak_update(&mut self, tau: f64) {
        for (tgt, live) in [
            (&mut self.encoder_target, &self.encoder),
            (&mut self.value_target, &self.value_head),
        ] {
            for (t, l) in tgt.values.iter_mut().zip(&live.values) {
                *t = tau * l + (1.0 - tau) * *t;
            }
        }
    }

    pub fn encode(&self, obs: &[f64]) -> Result<Vec<f64>> {
        self.encoder.forward(obs)
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.decoder.forward(z)
    }

    pub fn step_latent(&self, z: &[f64], action: &[f64]) -> Result<Vec<f64>> {
        self.dynamics.forward(&concat(z, action))
    }

    pub fn constraint(&self, z: &[f64], action: &[f64]) -> Result<f64> {
        Ok(self.constraint_head.forward(&concat(z, action))?[0])
    }

    pub fn reward(&self, z: &[f64], action: &[f64]) -> Result<f64> {
        Ok(self.reward_head.forward(&concat(z, action))?[0])
    }
}

fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().chain(b.iter()).copied().collect()
}

/// Contiguous slice of one trajectory used as an open-loop training target.
#[derive(Debug, Clone)]
pub struct TrainingSegment {
    /// len L+1 observations bracketing L transitions.
    pub obs: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub costs: Vec<u8>,
    /// Whether the final transition truly terminated the episode.
    pub terminal: bool,
}

impl TrainingSegment {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn has_cost(&self) -> bool {
        self.costs.iter().any(|&c| c == 1)
    }

    fn validate(&self) -> Result<()> {
        let l = self.actions.len();
        if l == 0
            || self.obs.len() != l + 1
            || self.rewards.len() != l
            || self.costs.len() != l
        {
            return Err(FarlError::ShapeMismatch(format!(
                "segment arrays misaligned: obs {} actions {} rewards {} costs {}",
                self.obs.len(),
                l,
                self.rewards.len(),
                self.costs.len()
            )));
        }
        // A failure ends the segment.
        if self.costs[..l - 1].iter().any(|&c| c == 1) {
            return Err(FarlError::ContractViolation(
                "segment crosses a failure step".into(),
            ));
        }
        Ok(())
    }
}

/// All length-<=h windows (stride 1) of a trajectory's transitions.
pub fn segments_from_trajectory(
    traj: &crate::data::Trajectory,
    h_train: usize,
) -> Vec<TrainingSegment> {
    let n = traj.transitions.len();
    let mut out = Vec::new();
    for start in 0..n {
        let end = (start + h_train).min(n);
        let slice = &traj.transitions[start..end];
        // Failure (or any termination) truncates the window.
        let mut cut = slice.len();
        for (i, t) in slice.iter().enumerate() {
            if t.terminated {
                cut = i + 1;
                break;
            }
        }
        let slice = &slice[..cut];
        let mut obs: Vec<Vec<f64>> = slice.iter().map(|t| t.obs.clone()).collect();
        obs.push(slice[slice.len() - 1].next_obs.clone());
        out.push(TrainingSegment {
            obs,
            actions: slice.iter().map(|t| t.action.clone()).collect(),
            rewards: slice.iter().map(|t| t.reward).collect(),
            costs: slice.iter().map(|t| t.cost).collect(),
            terminal: slice[slice.len() - 1].terminated,
        });
    }
    out
}

/// Stop-gradient quantities for one segment, computed before the gradient
/// pass so the differentiated objective is a pure function of live params.
#[derive(Debug, Clone)]
pub struct SegmentTargets {
    /// Bootstrapped value-regression target per step.
    pub value_y: Vec<f64>,
    /// h_{theta^-}(obs_{i+1}) per step.
    pub consistency: Vec<Vec<f64>>,
    /// Detached open-loop latents z_0..z_L.
    pub latents: Vec<Vec<f64>>,
}

pub fn compute_targets(
    model: &WorldModel,
    segment: &TrainingSegment,
    cfg: &WMConfig,
) -> Result<SegmentTargets> {
    segment.validate()?;
    let l = segment.len();
    let mut latents = Vec::with_capacity(l + 1);
    latents.push(model.encode(&segment.obs[0])?);
    for i in 0..l {
        let z = model.step_latent(&latents[i], &segment.actions[i])?;
        latents.push(z);
    }
    let mut value_y = Vec::with_capacity(l);
    let mut consistency = Vec::with_capacity(l);
    for i in 0..l {
        consistency.push(model.encoder_target.forward(&segment.obs[i + 1])?);
        let last = i + 1 == l;
        let y = if last && segment.terminal {
            segment.rewards[i]
        } else {
            let a_next = model.policy_head.forward(&latents[i + 1])?;
            let q_next = model.value_target.forward(&concat(&latents[i + 1], &a_next))?[0];
            segment.rewards[i] + cfg.gamma * q_next
        };
        value_y.push(y);
    }
    Ok(SegmentTargets {
        value_y,
        consistency,
        latents,
    })
}

/// Lambda-weighted loss components. `total` is the five-term model loss; the
/// optimized objective additionally includes the policy-aux term.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub reward: f64,
    pub value: f64,
    pub consistency: f64,
    pub constraint: f64,
    pub decoder: f64,
    pub policy_aux: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn objective(&self) -> f64 {
        self.total + self.policy_aux
    }

    fn add(&mut self, other: &LossBreakdown) {
        self.reward += other.reward;
        self.value += other.value;
        self.consistency += other.consistency;
        self.constraint += other.constraint;
        self.decoder += other.decoder;
        self.policy_aux += other.policy_aux;
        self.total += other.total;
    }

    fn scale(&mut self, s: f64) {
        self.reward *= s;
        self.value *= s;
        self.consistency *= s;
        self.constraint *= s;
        self.decoder *= s;
        self.policy_aux *= s;
        self.total *= s;
    }
}

/// Loss and gradient (over concatenated live params) for one segment with
/// frozen targets. Differentiable paths: all heads at the live open-loop
/// latents, the latent chain through dynamics into the encoder, and the
/// policy head through the frozen target value at detached latents.
pub fn segment_objective(
    model: &WorldModel,
    segment: &TrainingSegment,
    targets: &SegmentTargets,
    cfg: &WMConfig,
) -> Result<(LossBreakdown, Vec<f64>)> {
    segment.validate()?;
    let l = segment.len();
    let d_z = model.d_z;
    let sizes: Vec<usize> = model.live_components().iter().map(|n| n.values.len()).collect();
    let offset: Vec<usize> = sizes
        .iter()
        .scan(0, |acc, s| {
            let o = *acc;
            *acc += s;
            Some(o)
        })
        .collect();
    let (o_enc, o_dyn, o_rew, o_val, o_pol, o_dec, o_con) = (
        offset[0], offset[1], offset[2], offset[3], offset[4], offset[5], offset[6],
    );
    let mut grad = vec![0.0; model.live_param_count()];
    let mut bd = LossBreakdown::default();

    // Live open-loop forward pass.
    let enc_trace = model.encoder.forward_trace(&segment.obs[0])?;
    let mut z = vec![enc_trace.output.clone()];
    let mut dyn_traces = Vec::with_capacity(l);
    for i in 0..l {
        let t = model.dynamics.forward_trace(&concat(&z[i], &segment.actions[i]))?;
        z.push(t.output.clone());
        dyn_traces.push(t);
    }

    // dL/dz_i accumulators along the live chain.
    let mut dz = vec![vec![0.0; d_z]; l + 1];
    let acc = |dst: &mut [f64], off: usize, src: &[f64]| {
        for (g, s) in dst[off..off + src.len()].iter_mut().zip(src) {
            *g += s;
        }
    };

    for i in 0..l {
        let w = cfg.lambda_wm.powi(i as i32);
        let za = concat(&z[i], &segment.actions[i]);

        let rt = model.reward_head.forward_trace(&za)?;
        let res = rt.output[0] - segment.rewards[i];
        bd.reward += w * cfg.c1 * res * res;
        let back = model
            .reward_head
            .backward_from_trace(&rt, &[w * cfg.c1 * 2.0 * res])?;
        acc(&mut grad, o_rew, &back.params);
        for (g, s) in dz[i].iter_mut().zip(&back.input[..d_z]) {
            *g += s;
        }

        let qt = model.value_head.forward_trace(&za)?;
        let res = qt.output[0] - targets.value_y[i];
        bd.value += w * cfg.c2 * res * res;
        let back = model
            .value_head
            .backward_from_trace(&qt, &[w * cfg.c2 * 2.0 * res])?;
        acc(&mut grad, o_val, &back.params);
        for (g, s) in dz[i].iter_mut().zip(&back.input[..d_z]) {
            *g += s;
        }

        let ct = model.constraint_head.forward_trace(&za)?;
        let res = ct.output[0] - f64::from(segment.costs[i]);
        bd.constraint += w * cfg.c4 * res * res;
        let back = model
            .constraint_head
            .backward_from_trace(&ct, &[w * cfg.c4 * 2.0 * res])?;
        acc(&mut grad, o_con, &back.params);
        for (g, s) in dz[i].iter_mut().zip(&back.input[..d_z]) {
            *g += s;
        }

        let st = model.decoder.forward_trace(&z[i])?;
        let mut out_grad = vec![0.0; st.output.len()];
        for (k, (s, o)) in st.output.iter().zip(&segment.obs[i]).enumerate() {
            let res = s - o;
            bd.decoder += w * cfg.c5 * res * res;
            out_grad[k] = w * cfg.c5 * 2.0 * res;
        }
        let back = model.decoder.backward_from_trace(&st, &out_grad)?;
        acc(&mut grad, o_dec, &back.params);
        for (g, s) in dz[i].iter_mut().zip(&back.input) {
            *g += s;
        }

        // Consistency: live z_{i+1} toward the frozen target encoding.
        for (k, (zk, tk)) in z[i + 1].iter().zip(&targets.consistency[i]).enumerate() {
            let res = zk - tk;
            bd.consistency += w * cfg.c3 * res * res;
            dz[i + 1][k] += w * cfg.c3 * 2.0 * res;
        }

        // Policy aux: maximize the frozen target value at the detached latent.
        if cfg.aux_policy_weight > 0.0 {
            let z_det = &targets.latents[i];
            let pt = model.policy_head.forward_trace(z_det)?;
            let q_in = concat(z_det, &pt.output);
            let q_val = model.value_target.forward(&q_in)?[0];
            bd.policy_aux += -cfg.aux_policy_weight * w * q_val;
            let q_back = model
                .value_target
                .backward(&q_in, &[-cfg.aux_policy_weight * w])?;
            let back = model
                .policy_head
                .backward_from_trace(&pt, &q_back.input[d_z..])?;
            acc(&mut grad, o_pol, &back.params);
        }
    }

    // Backward through the latent chain.
    for i in (1..=l).rev() {
        let back = model.dynamics.backward_from_trace(&dyn_traces[i - 1], &dz[i])?;
        acc(&mut grad, o_dyn, &back.params);
        for (g, s) in dz[i - 1].iter_mut().zip(&back.input[..d_z]) {
            *g += s;
        }
    }
    let back = model.encoder.backward_from_trace(&enc_trace, &dz[0])?;
    acc(&mut grad, o_enc, &back.params);

    bd.total = bd.reward + bd.value + bd.consistency + bd.constraint + bd.decoder;
    Ok((bd, grad))
}

/// One optimizer step over a segment batch, then a Polyak target update.
/// A non-finite loss rejects the batch and leaves the parameters untouched.
pub fn wm_train_step(
    model: &mut WorldModel,
    batch: &[TrainingSegment],
    cfg: &WMConfig,
    opt: &mut OptimizerState,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(FarlError::InvalidConfig("wm_train_step: empty batch".into()));
    }
    let mut total = LossBreakdown::default();
    let mut grad = vec![0.0; model.live_param_count()];
    for segment in batch {
        let targets = compute_targets(model, segment, cfg)?;
        let (bd, g) = segment_objective(model, segment, &targets, cfg)?;
        total.add(&bd);
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    let n = batch.len() as f64;
    total.scale(1.0 / n);
    for g in grad.iter_mut() {
        *g /= n;
    }
    if !total.objective().is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(FarlError::NonFinite(format!(
            "world-model batch loss {} rejected; parameters unchanged",
            total.objective()
        )));
    }
    let mut flat = model.flatten_live();
    optimizer_step(opt, &mut flat, &grad)?;
    model.scatter_live(&flat);
    model.polyak_update(cfg.tau);
    Ok(total)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WmReport {
    pub steps: usize,
    pub final_loss: LossBreakdown,
    pub holdout_constraint_auc: f64,
    pub holdout_decoder_rmse_one_step: f64,
    pub holdout_decoder_rmse_open_loop: f64,
    /// Mean constraint prediction on held-out cost=1 vs cost=0 steps.
    pub holdout_chat_cost1: f64,
    pub holdout_chat_cost0: f64,
    /// Set when held-out constraint AUC < 0.7.
    pub quality_warning: bool,
}

/// Train on task + failure demos with cost-balanced segment sampling; returns
/// the trained model plus a held-out evaluation report.
pub fn wm_train(
    mut model: WorldModel,
    task_demos: &DemoSet,
    failure_demos: &DemoSet,
    cfg: &WMConfig,
    steps: usize,
    seed: u64,
) -> Result<(WorldModel, WmReport)> {
    cfg.validate()?;
    if task_demos.trajectories.is_empty() || failure_demos.trajectories.is_empty() {
        return Err(FarlError::InvalidConfig(
            "wm_train needs both task and failure demos".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all: Vec<&crate::data::Trajectory> = task_demos
        .trajectories
        .iter()
        .chain(&failure_demos.trajectories)
        .collect();
    let holdout_every = (1.0 / cfg.holdout_fraction.max(1e-9)).round().max(2.0) as usize;
    let mut train_segments = Vec::new();
    let mut holdout = Vec::new();
    for (i, traj) in all.iter().enumerate() {
        let segs = segments_from_trajectory(traj, cfg.h_train);
        if i % holdout_every == holdout_every - 1 {
            holdout.extend(segs);
        } else {
            train_segments.extend(segs);
        }
    }
    let cost_pool: Vec<usize> = (0..train_segments.len())
        .filter(|&i| train_segments[i].has_cost())
        .collect();
    let other_pool: Vec<usize> = (0..train_segments.len())
        .filter(|&i| !train_segments[i].has_cost())
        .collect();
    if other_pool.is_empty() {
        return Err(FarlError::InvalidConfig("no cost-free segments".into()));
    }

    let mut opt = OptimizerState::new(model.live_param_count(), cfg.lr);
    let mut last = LossBreakdown::default();
    for _ in 0..steps {
        let mut batch = Vec::with_capacity(cfg.batch_segments);
        for k in 0..cfg.batch_segments {
            // Cost-balanced: half the batch must contain a violation.
            let idx = if k % 2 == 0 && !cost_pool.is_empty() {
                cost_pool[rng.gen_range(0..cost_pool.len())]
            } else {
                other_pool[rng.gen_range(0..other_pool.len())]
            };
            batch.push(train_segments[idx].clone());
        }
        match wm_train_step(&mut model, &batch, cfg, &mut opt) {
            Ok(bd) => last = bd,
            Err(FarlError::NonFinite(_)) => continue,
            Err(e) => return Err(e),
        }
    }

    let report = holdout_report(&model, &holdout, cfg, steps, last)?;
    Ok((model, report))
}

fn holdout_report(
    model: &WorldModel,
    holdout: &[TrainingSegment],
    cfg: &WMConfig,
    steps: usize,
    final_loss: LossBreakdown,
) -> Result<WmReport> {
    // One-step constraint predictions vs ground-truth costs.
    let mut scores: Vec<(f64, u8)> = Vec::new();
    let mut sq1 = 0.0;
    let mut n1 = 0usize;
    let mut sq_open = 0.0;
    let mut n_open = 0usize;
    for seg in holdout {
        let mut z = model.encode(&seg.obs[0])?;
        for i in 0..seg.len() {
            if i == 0 {
                scores.push((model.constraint(&z, &seg.actions[0])?, seg.costs[0]));
            }
            let dec = model.decode(&z)?;
            for (d, o) in dec.iter().zip(&seg.obs[i]) {
                let r = d - o;
                sq_open += r * r;
                n_open += 1;
                if i <= 1 {
                    sq1 += r * r;
                    n1 += 1;
                }
            }
            z = model.step_latent(&z, &seg.actions[i])?;
        }
    }
    let auc = ranked_auc(&scores);
    let (mut s1, mut n1c, mut s0, mut n0c) = (0.0, 0usize, 0.0, 0usize);
    for (s, c) in &scores {
        if *c == 1 {
            s1 += s;
            n1c += 1;
        } else {
            s0 += s;
            n0c += 1;
        }
    }
    let _ = cfg;
    Ok(WmReport {
        steps,
        final_loss,
        holdout_constraint_auc: auc,
        holdout_decoder_rmse_one_step: if n1 > 0 { (sq1 / n1 as f64).sqrt() } else { 0.0 },
        holdout_decoder_rmse_open_loop: if n_open > 0 {
            (sq_open / n_open as f64).sqrt()
        } else {
            0.0
        },
        holdout_chat_cost1: if n1c > 0 { s1 / n1c as f64 } else { f64::NAN },
        holdout_chat_cost0: if n0c > 0 { s0 / n0c as f64 } else { f64::NAN },
        quality_warning: auc < 0.7,
    })
}

/// Mann-Whitney AUC of scores against binary labels; 0.5 when degenerate.
pub fn ranked_auc(scores: &[(f64, u8)]) -> f64 {
    let pos: Vec<f64> = scores.iter().filter(|(_, c)| *c == 1).map(|(s, _)| *s).collect();
    let neg: Vec<f64> = scores.iter().filter(|(_, c)| *c == 0).map(|(s, _)| *s).collect();
    if pos.is_empty() || neg.is_empty() {
        return 0.5;
    }
    let mut wins = 0.0;
    for p in &pos {
        for q in &neg {
            wins += if p > q {
                1.0
            } else if p == q {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

/// Action source for a latent rollout.
pub enum ActionProvider<'a> {
    /// Decode the latent, then ask the policy for an action.
    Policy(&'a dyn Fn(&[f64]) -> Result<Vec<f64>>),
    /// Explicit per-step action sequence (planning mode).
    Sequence(&'a [Vec<f64>]),
}

#[derive(Debug, Clone)]
pub struct RolloutStep {
    pub z: Vec<f64>,
    pub action: Vec<f64>,
    pub c_hat: f64,
    pub r_hat: f64,
}

/// Open-loop latent rollout of H+1 steps (indices t..t+H). `first_action`
/// overrides the provider at step t so the estimate is action-conditional.
pub fn latent_rollout(
    model: &WorldModel,
    obs: &[f64],
    first_action: Option<&[f64]>,
    provider: &ActionProvider,
    h: usize,
) -> Result<Vec<RolloutStep>> {
    let mut z = model.encode(obs)?;
    let mut steps = Vec::with_capacity(h + 1);
    for i in 0..=h {
        let action = if i == 0 && first_action.is_some() {
            first_action.expect("checked").to_vec()
        } else {
            match provider {
                ActionProvider::Policy(f) => f(&model.decode(&z)?)?,
                ActionProvider::Sequence(seq) => seq
                    .get(i)
                    .ok_or_else(|| {
                        FarlError::InvalidConfig(format!(
                            "action sequence of length {} exhausted at step {i}",
                            seq.len()
                        ))
                    })?
                    .clone(),
            }
        };
        let c_hat = model.constraint(&z, &action)?;
        let r_hat = model.reward(&z, &action)?;
        let z_next = model.step_latent(&z, &action)?;
        steps.push(RolloutStep {
            z: std::mem::replace(&mut z, z_next),
            action,
            c_hat,
            r_hat,
        });
    }
    Ok(steps)
}

const WM_COMPONENTS: [&str; 9] = [
    "encoder",
    "dynamics",
    "reward_head",
    "value_head",
    "policy_head",
    "decoder",
    "constraint_head",
    "encoder_target",
    "value_target",
];

#[derive(Serialize, Deserialize)]
struct WmManifest {
    d_z: usize,
    components: Vec<String>,
}

/// Persist the model as one `.farlnet` per component plus a JSON manifest.
pub fn save_world_model(dir: &std::path::Path, model: &WorldModel) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let nets = [
        &model.encoder,
        &model.dynamics,
        &model.reward_head,
        &model.value_head,
        &model.policy_head,
        &model.decoder,
        &model.constraint_head,
        &model.encoder_target,
        &model.value_target,
    ];
    for (name, net) in WM_COMPONENTS.iter().zip(nets) {
        crate::numerics::save_farlnet(&dir.join(format!("{name}.farlnet")), net)?;
    }
    let manifest = WmManifest {
        d_z: model.d_z,
        components: WM_COMPONENTS.iter().map(|s| s.to_string()).collect(),
    };
    std::fs::write(
        dir.join("world_model.json"),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(())
}

pub fn load_world_model(dir: &std::path::Path) -> Result<WorldModel> {
    let manifest: WmManifest =
        serde_json::from_slice(&std::fs::read(dir.join("world_model.json"))?)?;
    if manifest.components != WM_COMPONENTS {
        return Err(FarlError::Data(format!(
            "unexpected world-model manifest components in {}",
            dir.display()
        )));
    }
    let mut nets = WM_COMPONENTS
        .iter()
        .map(|name| crate::numerics::load_farlnet(&dir.join(format!("{name}.farlnet"))))
        .collect::<Result<Vec<_>>>()?;
    let value_target = nets.pop().expect("nine components");
    let encoder_target = nets.pop().expect("nine components");
    let constraint_head = nets.pop().expect("nine components");
    let decoder = nets.pop().expect("nine components");
    let policy_head = nets.pop().expect("nine components");
    let value_head = nets.pop().expect("nine components");
    let reward_head = nets.pop().expect("nine components");
    let dynamics = nets.pop().expect("nine components");
    let encoder = nets.pop().expect("nine components");
    let model = WorldModel {
        encoder,
        dynamics,
        reward_head,
        value_head,
        policy_head,
        decoder,
        constraint_head,
        encoder_target,
        value_target,
        d_z: manifest.d_z,
    };
    if model.encoder.spec.output_dim() != model.d_z {
        return Err(FarlError::Data("encoder width disagrees with manifest d_z".into()));
    }
    Ok(model)
}
