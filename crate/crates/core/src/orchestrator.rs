//! Experiment protocol: pretraining, sequential adaptation, evaluation and
//! Fisher-importance analysis.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::env::{DomainProfile, RewardSource};
use crate::error::{Error, Result};
use crate::ewc::{estimate_fisher, take_snapshot, EwcState, FisherBuffer};
use crate::io::checkpoint::Checkpoint;
use crate::io::config::{ExperimentConfig, PhaseConfig};
use crate::io::metrics::MetricsRow;
use crate::numcore::{ActionMode, GaussianPolicy, Mlp, ParamVector};
use crate::pcrpo::{PcrpoLearner, StageDecision, UpdateDiagnostics};
use crate::rollout::{batch_stats, collect_batch, Batch, CollectConfig, Critics};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Zero-shot: no updates.
    Zs,
    /// Reward only.
    Da,
    /// Reward and safety.
    Sda,
    /// Reward with EWC.
    Cda,
    /// Reward, safety and EWC.
    Scda,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Zs,
        Strategy::Da,
        Strategy::Sda,
        Strategy::Cda,
        Strategy::Scda,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Strategy::Zs => "zs",
            Strategy::Da => "da",
            Strategy::Sda => "sda",
            Strategy::Cda => "cda",
            Strategy::Scda => "scda",
        }
    }

    pub fn updates(self) -> bool {
        self != Strategy::Zs
    }

    pub fn safety_enabled(self) -> bool {
        matches!(self, Strategy::Sda | Strategy::Scda)
    }

    pub fn uses_ewc(self) -> bool {
        matches!(self, Strategy::Cda | Strategy::Scda)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown strategy {s:?}")))
    }
}

/// Stage label for iterations that collect but never update.
pub const FROZEN_STAGE: &str = "frozen";

pub fn init_policy(cfg: &ExperimentConfig, seed: u64) -> Result<GaussianPolicy> {
    GaussianPolicy::init(
        cfg.policy_spec(),
        seed::derive_seed(seed, &[seed::INIT_POLICY]),
        cfg.policy.init_log_std,
    )
}

pub fn init_critics(cfg: &ExperimentConfig, seed: u64) -> Result<Critics> {
    Ok(Critics {
        reward: Mlp::init(
            cfg.critic_spec(),
            seed::derive_seed(seed, &[seed::INIT_REWARD_CRITIC]),
        )?,
        cost: Mlp::init(
            cfg.critic_spec(),
            seed::derive_seed(seed, &[seed::INIT_COST_CRITIC]),
        )?,
    })
}

#[derive(Debug, Clone)]
pub struct PretrainOutput {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRow>,
    pub diagnostics: Vec<UpdateDiagnostics>,
}

/// Trains from scratch on every target under the pretraining profile, then
/// anchors EWC at the final parameters.
pub fn pretrain(cfg: &ExperimentConfig, seed: u64) -> Result<PretrainOutput> {
    pretrain_with(cfg, seed, |_| {})
}

/// [`pretrain`] with a callback after every iteration.
pub fn pretrain_with(
    cfg: &ExperimentConfig,
    seed: u64,
    mut on_iteration: impl FnMut(&MetricsRow),
) -> Result<PretrainOutput> {
    cfg.validate()?;
    let phase = &cfg.pretrain;
    let profile = cfg.profile(&phase.profile)?;
    let targets = cfg.targets();
    let target_ids = cfg.target_ids();
    let mut policy = init_policy(cfg, seed)?;
    let mut critics = init_critics(cfg, seed)?;
    let mut learner = PcrpoLearner::new(phase.pcrpo(&cfg.pcrpo), &policy, &critics);
    let run_id = format!("s{seed}-pretrain");

    let collect = CollectConfig {
        env: &cfg.env,
        profile,
        targets: &targets,
        target_ids: &target_ids,
        n_episodes: phase.episodes_per_batch,
        mode: ActionMode::Stochastic,
        reward_source: phase.reward_source,
    };

    let mut metrics = Vec::with_capacity(phase.n_iterations);
    let mut diagnostics = Vec::with_capacity(phase.n_iterations);
    for it in 0..phase.n_iterations {
        let (row, diag) = iteration(
            &mut policy,
            &mut critics,
            &mut learner,
            &collect,
            cfg,
            None,
            true,
            seed::derive_seed(seed, &[seed::COLLECT, it as u64]),
            seed::derive_seed(seed, &[seed::UPDATE, it as u64]),
        )
        .map_err(|e| at_iteration(e, it))?;
        let row = MetricsRow {
            run_id: run_id.clone(),
            seed,
            strategy: "pretrain".into(),
            phase: "pretrain".into(),
            iteration: it,
            target_id: 0,
            ..row
        };
        on_iteration(&row);
        metrics.push(row);
        diagnostics.push(diag);
    }

    let fisher_collect = CollectConfig { ..collect };
    let buffer = FisherBuffer::collect(
        &policy,
        &fisher_collect,
        cfg.ewc.fisher_samples,
        seed::derive_seed(seed, &[seed::FISHER]),
    )?;
    let fisher = estimate_fisher(&policy, &buffer)?;
    let anchor = take_snapshot(&policy, fisher, cfg.ewc.lambda)?;

    let checkpoint = Checkpoint {
        phase: "pretrain".into(),
        seed,
        config_hash: cfg.hash()?,
        config_toml: cfg.to_toml()?,
        policy,
        critics,
        fisher: Some(anchor.fisher),
        snapshot: Some(anchor.snapshot),
    };
    Ok(PretrainOutput {
        checkpoint,
        metrics,
        diagnostics,
    })
}

fn at_iteration(e: Error, iteration: usize) -> Error {
    match e {
        Error::Divergence { reason, .. } => Error::Divergence { iteration, reason },
        other => other,
    }
}

/// Collect one batch and, if `learner` is given, update on it.
#[allow(clippy::too_many_arguments)]
fn iteration(
    policy: &mut GaussianPolicy,
    critics: &mut Critics,
    learner: &mut PcrpoLearner,
    collect: &CollectConfig<'_>,
    cfg: &ExperimentConfig,
    ewc: Option<&EwcState>,
    safety_enabled: bool,
    collect_seed: u64,
    update_seed: u64,
) -> Result<(MetricsRow, UpdateDiagnostics)> {
    let mut batch = collect_batch(policy, Some(critics), collect, collect_seed)?;
    batch.compute_advantages(&cfg.gae);
    let diag = learner.update(policy, critics, &batch, ewc, safety_enabled, update_seed)?;
    Ok((row_from(&batch, diag.stage.label())?, diag))
}

fn row_from(batch: &Batch, stage: &str) -> Result<MetricsRow> {
    let stats = batch_stats(batch)?;
    Ok(MetricsRow {
        run_id: String::new(),
        seed: 0,
        strategy: String::new(),
        phase: String::new(),
        iteration: 0,
        target_id: 0,
        avg_timestep_reward: stats.avg_timestep_reward,
        avg_timestep_cost: stats.avg_timestep_cost,
        total: stats.total(),
        j_c: stats.avg_timestep_cost,
        stage: stage.into(),
        violation_rate: stats.violation_rate,
    })
}

/// One adaptation run.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub run_id: String,
    pub seed: u64,
    pub strategy: Strategy,
    pub domain: String,
    pub target_sequence: Vec<usize>,
    pub metrics: Vec<MetricsRow>,
    /// Stage per iteration; `None` for frozen iterations.
    pub stages: Vec<Option<StageDecision>>,
    /// Flat policy parameters after each target.
    pub snapshots: Vec<ParamVector>,
    pub final_policy: GaussianPolicy,
    pub final_critics: Critics,
}

/// Adapts the checkpoint policy to `domain`, one target at a time.
pub fn adapt(
    ckpt: &Checkpoint,
    strategy: Strategy,
    domain: &DomainProfile,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<RunRecord> {
    adapt_with(ckpt, strategy, domain, cfg, seed, |_| {})
}

pub fn adapt_with(
    ckpt: &Checkpoint,
    strategy: Strategy,
    domain: &DomainProfile,
    cfg: &ExperimentConfig,
    seed: u64,
    mut on_iteration: impl FnMut(&MetricsRow),
) -> Result<RunRecord> {
    cfg.validate()?;
    domain.validate()?;
    let phase: &PhaseConfig = &cfg.adapt;
    let ewc = if strategy.uses_ewc() {
        let (Some(snapshot), Some(fisher)) = (&ckpt.snapshot, &ckpt.fisher) else {
            return Err(Error::MissingFisher(strategy.label().into()));
        };
        Some(EwcState::new(
            snapshot.clone(),
            fisher.clone(),
            cfg.ewc.lambda,
        )?)
    } else {
        None
    };

    let targets = cfg.targets();
    let mut policy = ckpt.policy.clone();
    let mut critics = ckpt.critics.clone();
    let mut learner = PcrpoLearner::new(phase.pcrpo(&cfg.pcrpo), &policy, &critics);
    let run_id = format!("s{seed}-{strategy}");

    let mut metrics = Vec::new();
    let mut stages = Vec::new();
    let mut snapshots = Vec::with_capacity(cfg.adapt_sequence.len());
    let mut global_it = 0usize;
    for (k, &target_id) in cfg.adapt_sequence.iter().enumerate() {
        let ids = [target_id];
        let collect = CollectConfig {
            env: &cfg.env,
            profile: domain,
            targets: &targets,
            target_ids: &ids,
            n_episodes: phase.episodes_per_batch,
            mode: ActionMode::Stochastic,
            reward_source: phase.reward_source,
        };
        for _ in 0..phase.n_iterations {
            // Collection streams depend on the seed and position only, so
            // every strategy sees the same first batch.
            let collect_seed =
                seed::derive_seed(seed, &[seed::COLLECT, k as u64, global_it as u64]);
            let update_seed = seed::derive_seed(seed, &[seed::UPDATE, global_it as u64]);
            let (row, stage) = if strategy.updates() {
                let (row, diag) = iteration(
                    &mut policy,
                    &mut critics,
                    &mut learner,
                    &collect,
                    cfg,
                    ewc.as_ref(),
                    strategy.safety_enabled(),
                    collect_seed,
                    update_seed,
                )
                .map_err(|e| at_iteration(e, global_it))?;
                (row, Some(diag.stage))
            } else {
                let batch = collect_batch(&policy, Some(&critics), &collect, collect_seed)?;
                (row_from(&batch, FROZEN_STAGE)?, None)
            };
            let row = MetricsRow {
                run_id: run_id.clone(),
                seed,
                strategy: strategy.label().into(),
                phase: "adapt".into(),
                iteration: global_it,
                target_id,
                ..row
            };
            on_iteration(&row);
            metrics.push(row);
            stages.push(stage);
            global_it += 1;
        }
        snapshots.push(policy.flat_params());
    }

    Ok(RunRecord {
        run_id,
        seed,
        strategy,
        domain: domain.name.clone(),
        target_sequence: cfg.adapt_sequence.clone(),
        metrics,
        stages,
        snapshots,
        final_policy: policy,
        final_critics: critics,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetEval {
    pub target_id: usize,
    pub episode_reward: f64,
    pub episode_cost: f64,
    pub total: f64,
}

/// Deterministic-action episodes on each target, scored on the true state.
/// Episode `i` on target `t` uses the same stream for every policy.
pub fn evaluate(
    policy: &GaussianPolicy,
    cfg: &ExperimentConfig,
    domain: &DomainProfile,
    target_ids: &[usize],
    n_episodes: usize,
    seed: u64,
) -> Result<Vec<TargetEval>> {
    let targets = cfg.targets();
    target_ids
        .iter()
        .map(|&id| {
            let ids = [id];
            let collect = CollectConfig {
                env: &cfg.env,
                profile: domain,
                targets: &targets,
                target_ids: &ids,
                n_episodes,
                mode: ActionMode::Deterministic,
                reward_source: RewardSource::TrueState,
            };
            let batch = collect_batch(
                policy,
                None,
                &collect,
                seed::derive_seed(seed, &[seed::EVAL, id as u64]),
            )?;
            let stats = batch_stats(&batch)?;
            Ok(TargetEval {
                target_id: id,
                episode_reward: stats.avg_episode_reward,
                episode_cost: stats.avg_episode_cost,
                total: stats.avg_episode_reward - stats.avg_episode_cost,
            })
        })
        .collect()
}

/// Evaluates every snapshot of a run on every target.
pub fn evaluate_snapshots(
    record: &RunRecord,
    template: &GaussianPolicy,
    cfg: &ExperimentConfig,
    domain: &DomainProfile,
    seed: u64,
) -> Result<Vec<Vec<TargetEval>>> {
    let ids = cfg.target_ids();
    let mut policy = template.clone();
    record
        .snapshots
        .iter()
        .map(|p| {
            policy.set_flat_params(p)?;
            evaluate(
                &policy,
                cfg,
                domain,
                &ids,
                cfg.eval.episodes_per_target,
                seed,
            )
        })
        .collect()
}

/// Current, Others and Combined totals averaged over snapshots.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Views {
    /// Total on the target the snapshot was adapted to.
    pub current: f64,
    /// Mean total on every other target.
    pub others: f64,
    /// Mean total on all targets.
    pub combined: f64,
}

/// `evals[k]` is the evaluation of the snapshot taken after `sequence[k]`.
pub fn views(evals: &[Vec<TargetEval>], sequence: &[usize]) -> Result<Views> {
    if evals.is_empty() {
        return Err(Error::Empty("snapshot evaluations"));
    }
    if evals.len() != sequence.len() {
        return Err(Error::DimensionMismatch {
            context: "snapshot evaluations vs target sequence",
            expected: sequence.len(),
            actual: evals.len(),
        });
    }
    let mut acc = (0.0, 0.0, 0.0);
    for (snap, &current_id) in evals.iter().zip(sequence) {
        let current = snap
            .iter()
            .find(|e| e.target_id == current_id)
            .ok_or_else(|| Error::InvalidArgument(format!("target {current_id} not evaluated")))?;
        let others: Vec<f64> = snap
            .iter()
            .filter(|e| e.target_id != current_id)
            .map(|e| e.total)
            .collect();
        acc.0 += current.total;
        acc.1 += if others.is_empty() {
            f64::NAN
        } else {
            others.iter().sum::<f64>() / others.len() as f64
        };
        acc.2 += snap.iter().map(|e| e.total).sum::<f64>() / snap.len() as f64;
    }
    let n = evals.len() as f64;
    Ok(Views {
        current: acc.0 / n,
        others: acc.1 / n,
        combined: acc.2 / n,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FisherRow {
    /// Index into the flat policy parameters.
    pub param_id: usize,
    pub fisher: f64,
    pub relative_change: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FisherAnalysis {
    pub block: String,
    pub rows: Vec<FisherRow>,
    pub spearman: f64,
}

pub const RELATIVE_CHANGE_EPS: f64 = 1e-8;

/// Fisher importance against relative parameter change over one block,
/// by default the weights into the output layer.
pub fn fisher_analysis(
    before: &Checkpoint,
    after: &ParamVector,
    block: Option<&str>,
) -> Result<FisherAnalysis> {
    let fisher = before
        .fisher
        .as_ref()
        .ok_or_else(|| Error::MissingFisher("fisher analysis".into()))?;
    let start = before.policy.flat_params();
    start.ensure_same_layout(after)?;
    let name = block
        .map(str::to_string)
        .unwrap_or_else(|| before.policy.spec().output_weight_name());
    let range = start
        .segment(&name)
        .ok_or_else(|| Error::LayoutMismatch(format!("no parameter block named {name:?}")))?;
    let rows: Vec<FisherRow> = range
        .map(|j| {
            let b = start.values()[j];
            FisherRow {
                param_id: j,
                fisher: fisher.values()[j],
                relative_change: (after.values()[j] - b).abs() / (b.abs() + RELATIVE_CHANGE_EPS),
            }
        })
        .collect();
    let f: Vec<f64> = rows.iter().map(|r| r.fisher).collect();
    let c: Vec<f64> = rows.iter().map(|r| r.relative_change).collect();
    Ok(FisherAnalysis {
        block: name,
        spearman: spearman(&f, &c),
        rows,
    })
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of the average ranks. `NaN` when either side is
/// constant or the inputs are shorter than two.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "spearman inputs must align");
    if x.len() < 2 {
        return f64::NAN;
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return f64::NAN;
    }
    sxy / (sxx * syy).sqrt()
}

/// `sum_j F_j (after_j - before_j)^2`
pub fn fisher_displacement(
    fisher: &ParamVector,
    before: &ParamVector,
    after: &ParamVector,
) -> Result<f64> {
    fisher.ensure_same_layout(before)?;
    fisher.ensure_same_layout(after)?;
    Ok(fisher
        .values()
        .iter()
        .zip(before.values())
        .zip(after.values())
        .map(|((f, b), a)| f * (a - b).powi(2))
        .sum())
}
