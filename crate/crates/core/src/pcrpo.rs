//! Projection-based constrained policy optimization.
//!
//! Each batch is classified by its average timestep cost `J_c` against the
//! soft region `[b + h_minus, b + h_plus]`:
//!
//! * above the region the policy follows the cost gradient only,
//! * below it the policy follows the reward gradient only,
//! * inside it the two gradients are combined, and projected onto each
//!   other's normal plane when they conflict (negative dot product).
//!
//! Gradients come from the clipped importance-ratio surrogate. The cost
//! gradient is the ascent direction of the surrogate built on negated cost
//! advantages, i.e. the direction that lowers expected cost.

use std::fmt;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{ACTION_DIM, OBS_DIM};
use crate::error::{Error, Result};
use crate::ewc::EwcState;
use crate::numcore::{dot, GaussianPolicy, Mlp, ParamVector};
use crate::rollout::{batch_stats, Batch, Critics};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// `p += lr * direction`
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PcrpoConfig {
    /// Cost limit `b` on the average timestep cost. Set per phase.
    #[serde(skip)]
    pub cost_limit: f64,
    pub h_minus: f64,
    pub h_plus: f64,
    /// Policy step size.
    pub eta: f64,
    pub x_r: f64,
    pub x_c: f64,
    pub clip_eps: f64,
    /// Passes over each batch.
    pub epochs: usize,
    /// Samples per policy step; `0` uses the whole batch.
    pub minibatch_size: usize,
    pub policy_optimizer: OptimizerKind,
    pub critic_lr: f64,
    pub critic_epochs: usize,
    pub critic_minibatch_size: usize,
    pub critic_optimizer: OptimizerKind,
}

impl Default for PcrpoConfig {
    fn default() -> Self {
        Self {
            cost_limit: 0.12,
            h_minus: -0.03,
            h_plus: 0.03,
            eta: 3e-4,
            x_r: 0.5,
            x_c: 0.5,
            clip_eps: 0.2,
            epochs: 5,
            minibatch_size: 800,
            policy_optimizer: OptimizerKind::Adam,
            critic_lr: 1e-3,
            critic_epochs: 5,
            critic_minibatch_size: 256,
            critic_optimizer: OptimizerKind::Adam,
        }
    }
}

impl PcrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cost_limit.is_finite() && self.cost_limit >= 0.0) {
            return Err(Error::validation("pcrpo.cost_limit", "must be >= 0"));
        }
        if self.h_minus.is_nan() || self.h_minus > 0.0 {
            return Err(Error::validation("pcrpo.h_minus", "must be <= 0"));
        }
        if self.h_plus.is_nan() || self.h_plus < 0.0 {
            return Err(Error::validation("pcrpo.h_plus", "must be >= 0"));
        }
        if !(self.x_r >= 0.0 && self.x_c >= 0.0) {
            return Err(Error::validation(
                "pcrpo.x_r",
                "gradient weights must be >= 0",
            ));
        }
        if (self.x_r + self.x_c - 1.0).abs() > 1e-9 {
            return Err(Error::validation(
                "pcrpo.x_r",
                format!("x_r + x_c must equal 1, got {}", self.x_r + self.x_c),
            ));
        }
        for (field, v) in [("pcrpo.eta", self.eta), ("pcrpo.critic_lr", self.critic_lr)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::validation(field, "must be positive"));
            }
        }
        if !(self.clip_eps.is_finite() && self.clip_eps > 0.0) {
            return Err(Error::validation("pcrpo.clip_eps", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::validation("pcrpo.epochs", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StageDecision {
    SafetyViolation,
    SoftViolation { conflict: bool },
    NoViolation,
}

impl StageDecision {
    pub fn label(&self) -> &'static str {
        match self {
            StageDecision::SafetyViolation => "safety",
            StageDecision::SoftViolation { conflict: true } => "soft_conflict",
            StageDecision::SoftViolation { conflict: false } => "soft_aligned",
            StageDecision::NoViolation => "none",
        }
    }

    pub fn from_label(label: &str) -> Option<Self> {
        Some(match label {
            "safety" => StageDecision::SafetyViolation,
            "soft_conflict" => StageDecision::SoftViolation { conflict: true },
            "soft_aligned" => StageDecision::SoftViolation { conflict: false },
            "none" => StageDecision::NoViolation,
            _ => return None,
        })
    }

    /// Whether updates in this stage use the cost gradient at all.
    pub fn uses_cost(&self) -> bool {
        !matches!(self, StageDecision::NoViolation)
    }
}

impl fmt::Display for StageDecision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateDiagnostics {
    pub stage: StageDecision,
    pub j_c: f64,
    pub grad_norm_r: f64,
    pub grad_norm_c: f64,
    pub cos_angle: f64,
    pub ewc_penalty: f64,
    pub critic_loss_r: f64,
    pub critic_loss_c: f64,
}

/// Average timestep cost of the batch.
pub fn estimate_cost_value(batch: &Batch) -> Result<f64> {
    Ok(batch_stats(batch)?.avg_timestep_cost)
}

pub fn select_stage(
    j_c: f64,
    g_r: &ParamVector,
    g_c: &ParamVector,
    cfg: &PcrpoConfig,
) -> StageDecision {
    if j_c > cfg.cost_limit + cfg.h_plus {
        StageDecision::SafetyViolation
    } else if j_c < cfg.cost_limit + cfg.h_minus {
        StageDecision::NoViolation
    } else {
        StageDecision::SoftViolation {
            conflict: g_r.dot(g_c) < 0.0,
        }
    }
}

/// Combined update direction inside the soft region.
///
/// With a conflict each gradient is projected onto the normal plane of the
/// other before weighting. A zero-norm divisor falls back to the plain
/// weighted sum.
pub fn project_gradients(
    g_r: &ParamVector,
    g_c: &ParamVector,
    cfg: &PcrpoConfig,
    conflict: bool,
) -> ParamVector {
    project_slices(g_r.values(), g_c.values(), cfg.x_r, cfg.x_c, conflict)
        .map(|v| g_r.with_values(v).expect("same layout"))
        .expect("aligned gradients")
}

fn project_slices(
    g_r: &[f64],
    g_c: &[f64],
    x_r: f64,
    x_c: f64,
    conflict: bool,
) -> Option<Vec<f64>> {
    if g_r.len() != g_c.len() {
        return None;
    }
    let rc = dot(g_r, g_c);
    let rr = dot(g_r, g_r);
    let cc = dot(g_c, g_c);
    let out = if conflict && rr > 0.0 && cc > 0.0 {
        let a = rc / cc;
        let b = rc / rr;
        g_r.iter()
            .zip(g_c)
            .map(|(&r, &c)| x_r * (r - a * c) + x_c * (c - b * r))
            .collect()
    } else {
        g_r.iter()
            .zip(g_c)
            .map(|(&r, &c)| x_r * r + x_c * c)
            .collect()
    };
    Some(out)
}

/// Flat view of the samples a surrogate is evaluated on.
#[derive(Debug, Clone)]
pub struct SurrogateData<'a> {
    pub observations: Vec<&'a [f64; OBS_DIM]>,
    pub actions: Vec<&'a [f64; ACTION_DIM]>,
    pub old_logprobs: Vec<f64>,
}

impl<'a> SurrogateData<'a> {
    pub fn from_batch(batch: &'a Batch) -> Self {
        Self {
            observations: batch.observations().collect(),
            actions: batch.actions().collect(),
            old_logprobs: batch.logprobs(),
        }
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }
}

#[inline]
fn clipped_term(ratio: f64, adv: f64, clip_eps: f64) -> (f64, bool) {
    let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps);
    let (a, b) = (ratio * adv, clipped * adv);
    if a <= b {
        (a, true)
    } else {
        (b, false)
    }
}

/// `(1/n) sum_i min(rho_i A_i, clip(rho_i) A_i)` over `indices`.
pub fn surrogate_value(
    policy: &GaussianPolicy,
    data: &SurrogateData<'_>,
    advantages: &[f64],
    indices: &[usize],
    clip_eps: f64,
) -> f64 {
    let mut cache = policy.new_cache();
    let n = indices.len() as f64;
    indices
        .iter()
        .map(|&i| {
            let logp = policy.forward_logprob(data.observations[i], data.actions[i], &mut cache);
            let ratio = (logp - data.old_logprobs[i]).exp();
            clipped_term(ratio, advantages[i], clip_eps).0
        })
        .sum::<f64>()
        / n
}

const GRAD_CHUNK: usize = 256;

/// Gradients of the clipped surrogate for up to two advantage channels,
/// sharing one forward pass per sample. Chunks are reduced in index order,
/// so the result does not depend on the thread count.
pub fn surrogate_grads(
    policy: &GaussianPolicy,
    data: &SurrogateData<'_>,
    channels: &[&[f64]],
    indices: &[usize],
    clip_eps: f64,
) -> Result<Vec<ParamVector>> {
    if indices.is_empty() {
        return Err(Error::Empty("surrogate sample set"));
    }
    let n_params = policy.param_count();
    let n = indices.len() as f64;
    let partials: Vec<Result<Vec<Vec<f64>>>> = indices
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut cache = policy.new_cache();
            let mut grads = vec![vec![0.0; n_params]; channels.len()];
            for &i in chunk {
                let action = data.actions[i];
                let logp = policy.forward_logprob(data.observations[i], action, &mut cache);
                let ratio = (logp - data.old_logprobs[i]).exp();
                if !ratio.is_finite() {
                    return Err(Error::NonFinite {
                        context: "importance ratio",
                        layer: "policy".into(),
                        index: i,
                    });
                }
                for (adv, grad) in channels.iter().zip(grads.iter_mut()) {
                    let (_, active) = clipped_term(ratio, adv[i], clip_eps);
                    let coef = if active { adv[i] * ratio / n } else { 0.0 };
                    if coef != 0.0 {
                        // The backward pass only reads the cached activations.
                        policy.backward_logprob(&mut cache, action, coef, grad);
                    }
                }
            }
            Ok(grads)
        })
        .collect();

    let layout = GaussianPolicy::param_layout(policy.spec());
    let mut totals = vec![vec![0.0; n_params]; channels.len()];
    for part in partials {
        for (total, g) in totals.iter_mut().zip(part?) {
            total.iter_mut().zip(g).for_each(|(t, v)| *t += v);
        }
    }
    totals
        .into_iter()
        .map(|v| {
            let p = ParamVector::new(v, layout.clone())?;
            p.check_finite("surrogate gradient")?;
            Ok(p)
        })
        .collect()
}

/// Gradient of the clipped surrogate over the whole batch.
pub fn surrogate_grad(
    policy: &GaussianPolicy,
    data: &SurrogateData<'_>,
    advantages: &[f64],
    clip_eps: f64,
) -> Result<ParamVector> {
    let indices: Vec<usize> = (0..data.len()).collect();
    Ok(surrogate_grads(policy, data, &[advantages], &indices, clip_eps)?.remove(0))
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64, n: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Moves `params` along `+direction`.
    pub fn ascend(&mut self, params: &mut [f64], direction: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(direction)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p += self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Step rule shared by policy and critics.
#[derive(Debug, Clone, PartialEq)]
pub enum Stepper {
    Sgd { lr: f64 },
    Adam(Adam),
}

impl Stepper {
    pub fn new(kind: OptimizerKind, lr: f64, n: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => Stepper::Sgd { lr },
            OptimizerKind::Adam => Stepper::Adam(Adam::new(lr, n)),
        }
    }

    pub fn ascend(&mut self, params: &mut [f64], direction: &[f64]) {
        match self {
            Stepper::Sgd { lr } => {
                for (p, d) in params.iter_mut().zip(direction) {
                    *p += *lr * d;
                }
            }
            Stepper::Adam(adam) => adam.ascend(params, direction),
        }
    }

    pub fn descend(&mut self, params: &mut [f64], gradient: &[f64]) {
        let neg: Vec<f64> = gradient.iter().map(|g| -g).collect();
        self.ascend(params, &neg);
    }
}

/// Mean squared error of a critic on `(inputs, targets)` restricted to `indices`,
/// with its gradient accumulated into `grad`.
fn critic_mse_grad(
    critic: &Mlp,
    inputs: &[&[f64; OBS_DIM]],
    targets: &[f64],
    indices: &[usize],
    grad: &mut [f64],
) -> f64 {
    let n = indices.len() as f64;
    let mut cache = critic.new_cache();
    let mut loss = 0.0;
    for &i in indices {
        let y = critic.forward_cached(inputs[i], &mut cache)[0];
        let err = y - targets[i];
        loss += err * err / n;
        critic.backward(&mut cache, &[2.0 * err / n], grad);
    }
    loss
}

/// Optimizer state for both critics.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticTrainer {
    reward: Stepper,
    cost: Stepper,
    epochs: usize,
    minibatch_size: usize,
}

impl CriticTrainer {
    pub fn new(cfg: &PcrpoConfig, critics: &Critics) -> Self {
        Self {
            reward: Stepper::new(
                cfg.critic_optimizer,
                cfg.critic_lr,
                critics.reward.params().len(),
            ),
            cost: Stepper::new(
                cfg.critic_optimizer,
                cfg.critic_lr,
                critics.cost.params().len(),
            ),
            epochs: cfg.critic_epochs,
            minibatch_size: cfg.critic_minibatch_size,
        }
    }

    /// Regresses the reward critic on `returns_r` and the cost critic on
    /// `returns_c`. Returns the mean pre-update losses of the last epoch.
    pub fn fit(&mut self, critics: &mut Critics, batch: &Batch, seed: u64) -> Result<(f64, f64)> {
        if !batch.has_advantages() {
            return Err(Error::InvalidArgument("batch returns not computed".into()));
        }
        fit_critics(
            critics,
            batch,
            &mut self.reward,
            &mut self.cost,
            self.epochs,
            self.minibatch_size,
            seed,
        )
    }
}

/// Minibatch regression of both critics onto the batch returns.
pub fn fit_critics(
    critics: &mut Critics,
    batch: &Batch,
    reward_opt: &mut Stepper,
    cost_opt: &mut Stepper,
    epochs: usize,
    minibatch_size: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let inputs: Vec<&[f64; OBS_DIM]> = batch.observations().collect();
    let n = inputs.len();
    if n == 0 {
        return Err(Error::Empty("batch"));
    }
    let mb = if minibatch_size == 0 {
        n
    } else {
        minibatch_size.min(n)
    };
    let mut rng = seed::stream(seed, &[seed::UPDATE, 1]);
    let mut order: Vec<usize> = (0..n).collect();
    let mut losses = (0.0, 0.0);
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = (0.0, 0.0);
        for chunk in order.chunks(mb) {
            let w = chunk.len() as f64 / n as f64;
            for (critic, targets, opt, acc) in [
                (
                    &mut critics.reward,
                    &batch.returns_r,
                    &mut *reward_opt,
                    &mut epoch_loss.0,
                ),
                (
                    &mut critics.cost,
                    &batch.returns_c,
                    &mut *cost_opt,
                    &mut epoch_loss.1,
                ),
            ] {
                let mut grad = vec![0.0; critic.params().len()];
                *acc += w * critic_mse_grad(critic, &inputs, targets, chunk, &mut grad);
                let mut values = critic.params().values().to_vec();
                opt.descend(&mut values, &grad);
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        context: "critic update",
                        layer: "critic".into(),
                        index: values.iter().position(|v| !v.is_finite()).unwrap_or(0),
                    });
                }
                critic.set_values(&values)?;
            }
        }
        losses = epoch_loss;
    }
    Ok(losses)
}

/// Policy and critic optimizer state carried across the iterations of one phase.
#[derive(Debug, Clone)]
pub struct PcrpoLearner {
    cfg: PcrpoConfig,
    policy_opt: Stepper,
    critics: CriticTrainer,
}

impl PcrpoLearner {
    pub fn new(cfg: PcrpoConfig, policy: &GaussianPolicy, critics: &Critics) -> Self {
        let policy_opt = Stepper::new(cfg.policy_optimizer, cfg.eta, policy.param_count());
        let critics = CriticTrainer::new(&cfg, critics);
        Self {
            cfg,
            policy_opt,
            critics,
        }
    }

    pub fn config(&self) -> &PcrpoConfig {
        &self.cfg
    }

    /// One batch update of the policy followed by critic fitting.
    ///
    /// The stage is decided once from `J_c` and the full-batch gradients at
    /// the behaviour policy and held for every epoch. With
    /// `safety_enabled == false` the stage is always `NoViolation`. An EWC
    /// state adds `-lambda F (p - snapshot)` to every step direction; critics
    /// are never regularized.
    ///
    /// On a non-finite step the policy and critics are left untouched.
    pub fn update(
        &mut self,
        policy: &mut GaussianPolicy,
        critics: &mut Critics,
        batch: &Batch,
        ewc: Option<&EwcState>,
        safety_enabled: bool,
        seed: u64,
    ) -> Result<UpdateDiagnostics> {
        if !batch.has_advantages() {
            return Err(Error::InvalidArgument(
                "batch advantages not computed".into(),
            ));
        }
        let cfg = &self.cfg;
        let data = SurrogateData::from_batch(batch);
        let all: Vec<usize> = (0..data.len()).collect();
        let neg_cost_adv: Vec<f64> = batch.advantages_c.iter().map(|a| -a).collect();

        let j_c = estimate_cost_value(batch)?;
        let mut full = surrogate_grads(
            policy,
            &data,
            &[&batch.advantages_r, &neg_cost_adv],
            &all,
            cfg.clip_eps,
        )?;
        let g_c = full.pop().expect("two channels");
        let g_r = full.pop().expect("two channels");
        let stage = if safety_enabled {
            select_stage(j_c, &g_r, &g_c, cfg)
        } else {
            StageDecision::NoViolation
        };
        let (nr, nc) = (g_r.norm(), g_c.norm());
        let cos_angle = if nr > 0.0 && nc > 0.0 {
            (g_r.dot(&g_c) / (nr * nc)).clamp(-1.0, 1.0)
        } else {
            0.0
        };
        let start = policy.flat_params();
        let ewc_penalty = match ewc {
            Some(state) => state.penalty(&start)?,
            None => 0.0,
        };

        let mut params = start.clone();
        let mut work = policy.clone();
        let mut rng = seed::stream(seed, &[seed::UPDATE, 0]);
        let mut order = all.clone();
        let mb = if cfg.minibatch_size == 0 {
            data.len()
        } else {
            cfg.minibatch_size.min(data.len())
        };
        let n_chunks = data.len().div_ceil(mb);
        let chunk_len = data.len().div_ceil(n_chunks);
        let mut policy_opt = self.policy_opt.clone();

        for _ in 0..cfg.epochs {
            if n_chunks > 1 {
                order.shuffle(&mut rng);
            }
            for chunk in order.chunks(chunk_len) {
                let mut direction = match stage {
                    StageDecision::NoViolation => {
                        surrogate_grads(&work, &data, &[&batch.advantages_r], chunk, cfg.clip_eps)?
                            .remove(0)
                            .into_values()
                    }
                    StageDecision::SafetyViolation => {
                        surrogate_grads(&work, &data, &[&neg_cost_adv], chunk, cfg.clip_eps)?
                            .remove(0)
                            .into_values()
                    }
                    StageDecision::SoftViolation { conflict } => {
                        let g = surrogate_grads(
                            &work,
                            &data,
                            &[&batch.advantages_r, &neg_cost_adv],
                            chunk,
                            cfg.clip_eps,
                        )?;
                        project_slices(g[0].values(), g[1].values(), cfg.x_r, cfg.x_c, conflict)
                            .expect("aligned gradients")
                    }
                };
                if let Some(state) = ewc {
                    state.subtract_penalty_grad(params.values(), &mut direction)?;
                }
                policy_opt.ascend(params.values_mut(), &direction);
                if let Err(e) = params.check_finite("policy update") {
                    return Err(Error::Divergence {
                        iteration: 0,
                        reason: e.to_string(),
                    });
                }
                work.set_flat_params(&params)?;
            }
        }

        let mut new_critics = critics.clone();
        let mut critic_trainer = self.critics.clone();
        let (critic_loss_r, critic_loss_c) = critic_trainer
            .fit(
                &mut new_critics,
                batch,
                seed::derive_seed(seed, &[seed::UPDATE, 2]),
            )
            .map_err(|e| Error::Divergence {
                iteration: 0,
                reason: e.to_string(),
            })?;

        *policy = work;
        *critics = new_critics;
        self.policy_opt = policy_opt;
        self.critics = critic_trainer;

        Ok(UpdateDiagnostics {
            stage,
            j_c,
            grad_norm_r: nr,
            grad_norm_c: nc,
            cos_angle,
            ewc_penalty,
            critic_loss_r,
            critic_loss_c,
        })
    }
}
