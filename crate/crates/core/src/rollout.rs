//! Episode collection, advantage estimation and batch statistics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{
    env_reset, env_step, observe, reward_and_cost, sample_randomization, DomainInstance,
    DomainProfile, EnvConfig, RewardSource, Vec3, ACTION_DIM, OBS_DIM,
};
use crate::error::{Error, Result};
use crate::numcore::{ActionMode, ForwardCache, GaussianPolicy, Mlp};
use crate::seed;

/// Reward and cost value networks.
#[derive(Debug, Clone, PartialEq)]
pub struct Critics {
    pub reward: Mlp,
    pub cost: Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaeConfig {
    pub gamma: f64,
    pub lambda_gae: f64,
    /// Standardize advantages per batch and channel.
    pub normalize: bool,
}

impl Default for GaeConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda_gae: 0.95,
            normalize: true,
        }
    }
}

impl GaeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::validation("gae.gamma", "must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.lambda_gae) {
            return Err(Error::validation("gae.lambda_gae", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub observations: Vec<[f64; OBS_DIM]>,
    pub actions: Vec<[f64; ACTION_DIM]>,
    pub logprobs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub costs: Vec<f64>,
    pub values_r: Vec<f64>,
    pub values_c: Vec<f64>,
    pub terminal: bool,
    pub violated: bool,
    pub episode_index: usize,
    pub instance: DomainInstance,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn target_id(&self) -> usize {
        self.instance.target_id
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }

    pub fn total_cost(&self) -> f64 {
        self.costs.iter().sum()
    }
}

/// Trajectories plus per-step advantages and returns, flattened in
/// trajectory order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Batch {
    pub trajectories: Vec<Trajectory>,
    pub advantages_r: Vec<f64>,
    pub advantages_c: Vec<f64>,
    pub returns_r: Vec<f64>,
    pub returns_c: Vec<f64>,
}

impl Batch {
    pub fn from_trajectories(trajectories: Vec<Trajectory>) -> Self {
        Self {
            trajectories,
            ..Self::default()
        }
    }

    pub fn num_steps(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.num_steps() == 0
    }

    pub fn observations(&self) -> impl Iterator<Item = &[f64; OBS_DIM]> {
        self.trajectories.iter().flat_map(|t| t.observations.iter())
    }

    pub fn actions(&self) -> impl Iterator<Item = &[f64; ACTION_DIM]> {
        self.trajectories.iter().flat_map(|t| t.actions.iter())
    }

    pub fn logprobs(&self) -> Vec<f64> {
        self.trajectories
            .iter()
            .flat_map(|t| t.logprobs.iter().copied())
            .collect()
    }

    pub fn has_advantages(&self) -> bool {
        let n = self.num_steps();
        self.advantages_r.len() == n
            && self.advantages_c.len() == n
            && self.returns_r.len() == n
            && self.returns_c.len() == n
    }

    /// Fills advantages and returns for both channels from the values
    /// recorded during collection. Every episode is treated as terminal.
    ///
    /// A batch without any cost carries no information about the cost
    /// surrogate, so its cost advantages are zero rather than standardized
    /// critic noise.
    pub fn compute_advantages(&mut self, cfg: &GaeConfig) {
        let n = self.num_steps();
        let mut adv_r = Vec::with_capacity(n);
        let mut adv_c = Vec::with_capacity(n);
        let mut ret_r = Vec::with_capacity(n);
        let mut ret_c = Vec::with_capacity(n);
        for t in &self.trajectories {
            let (a, r) = compute_gae(&t.rewards, &t.values_r, t.terminal, 0.0, cfg);
            adv_r.extend(a);
            ret_r.extend(r);
            let (a, r) = compute_gae(&t.costs, &t.values_c, t.terminal, 0.0, cfg);
            adv_c.extend(a);
            ret_c.extend(r);
        }
        let any_cost = self
            .trajectories
            .iter()
            .any(|t| t.costs.iter().any(|&c| c != 0.0));
        if !any_cost {
            adv_c.iter_mut().for_each(|a| *a = 0.0);
        }
        if cfg.normalize {
            standardize(&mut adv_r);
            standardize(&mut adv_c);
        }
        self.advantages_r = adv_r;
        self.advantages_c = adv_c;
        self.returns_r = ret_r;
        self.returns_c = ret_c;
    }
}

/// Zero mean, unit standard deviation (population). Constant input maps to zeros.
pub fn standardize(xs: &mut [f64]) {
    if xs.is_empty() {
        return;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for x in xs.iter_mut() {
        *x = if std > 1e-12 { (*x - mean) / std } else { 0.0 };
    }
}

/// Generalized advantage estimation for one episode.
///
/// `bootstrap` is `V(s_L)` and only used when `terminal` is false.
/// Returns `(advantages, returns)` with `returns = advantages + values`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    terminal: bool,
    bootstrap: f64,
    cfg: &GaeConfig,
) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(rewards.len(), values.len(), "rewards and values must align");
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_value = if terminal { 0.0 } else { bootstrap };
    let mut running = 0.0;
    for t in (0..n).rev() {
        let delta = rewards[t] + cfg.gamma * next_value - values[t];
        running = delta + cfg.gamma * cfg.lambda_gae * running;
        adv[t] = running;
        next_value = values[t];
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// What to collect and where.
#[derive(Debug, Clone)]
pub struct CollectConfig<'a> {
    pub env: &'a EnvConfig,
    pub profile: &'a DomainProfile,
    pub targets: &'a [Vec3],
    /// Episodes are assigned round-robin over these 1-based target ids.
    pub target_ids: &'a [usize],
    pub n_episodes: usize,
    pub mode: ActionMode,
    pub reward_source: RewardSource,
}

/// Collects `n_episodes` episodes, in parallel, in a deterministic order.
/// Episode `i` draws everything from the stream `(seed, i)`.
pub fn collect_batch(
    policy: &GaussianPolicy,
    critics: Option<&Critics>,
    cfg: &CollectConfig<'_>,
    seed: u64,
) -> Result<Batch> {
    if cfg.n_episodes == 0 {
        return Err(Error::InvalidArgument("n_episodes must be >= 1".into()));
    }
    if cfg.target_ids.is_empty() {
        return Err(Error::Empty("target id list"));
    }
    let trajectories = (0..cfg.n_episodes)
        .into_par_iter()
        .map(|i| {
            let target_id = cfg.target_ids[i % cfg.target_ids.len()];
            run_episode(policy, critics, cfg, target_id, i, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Batch::from_trajectories(trajectories))
}

pub fn run_episode(
    policy: &GaussianPolicy,
    critics: Option<&Critics>,
    cfg: &CollectConfig<'_>,
    target_id: usize,
    episode_index: usize,
    seed: u64,
) -> Result<Trajectory> {
    let mut rng = seed::stream(seed, &[seed::EPISODE, episode_index as u64]);
    let instance = sample_randomization(cfg.profile, cfg.targets, target_id, &mut rng)?;
    let env = cfg.env;
    let mut state = env_reset(&instance, env);
    let mut obs = observe(&state, &instance, env, &mut rng);

    let mut policy_cache = policy.new_cache();
    let mut critic_caches: Option<(ForwardCache, ForwardCache)> =
        critics.map(|c| (c.reward.new_cache(), c.cost.new_cache()));

    let cap = env.horizon;
    let mut traj = Trajectory {
        observations: Vec::with_capacity(cap),
        actions: Vec::with_capacity(cap),
        logprobs: Vec::with_capacity(cap),
        rewards: Vec::with_capacity(cap),
        costs: Vec::with_capacity(cap),
        values_r: Vec::with_capacity(cap),
        values_c: Vec::with_capacity(cap),
        terminal: false,
        violated: false,
        episode_index,
        instance: instance.clone(),
    };

    loop {
        let (action, logp) = policy.act(obs.as_slice(), cfg.mode, &mut rng, &mut policy_cache);
        let (v_r, v_c) = match (critics, critic_caches.as_mut()) {
            (Some(c), Some((cr, cc))) => (
                c.reward.forward_cached(obs.as_slice(), cr)[0],
                c.cost.forward_cached(obs.as_slice(), cc)[0],
            ),
            _ => (0.0, 0.0),
        };
        let out = env_step(&state, &action, &instance, env)?;
        let next_obs = observe(&out.state, &instance, env, &mut rng);
        let (reward, cost) = match cfg.reward_source {
            RewardSource::TrueState => (out.reward, out.cost),
            RewardSource::Observation => {
                reward_and_cost(next_obs.distance(), out.violated, state.t, env.horizon)
            }
        };

        traj.observations.push(obs.0);
        traj.actions.push([action[0], action[1]]);
        traj.logprobs.push(logp);
        traj.rewards.push(reward);
        traj.costs.push(cost);
        traj.values_r.push(v_r);
        traj.values_c.push(v_c);

        if out.done {
            traj.terminal = true;
            traj.violated = out.violated;
            break;
        }
        state = out.state;
        obs = next_obs;
    }
    Ok(traj)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchStats {
    pub avg_timestep_reward: f64,
    pub avg_timestep_cost: f64,
    pub avg_episode_reward: f64,
    pub avg_episode_cost: f64,
    pub violation_rate: f64,
}

impl BatchStats {
    /// Reward plus negative cost, per timestep.
    pub fn total(&self) -> f64 {
        self.avg_timestep_reward - self.avg_timestep_cost
    }
}

/// Per-step averages are weighted by episode length (sum over all steps
/// divided by the step count); per-episode averages weight episodes equally.
pub fn batch_stats(b: &Batch) -> Result<BatchStats> {
    let steps = b.num_steps();
    if steps == 0 {
        return Err(Error::Empty("batch"));
    }
    let episodes = b.trajectories.len() as f64;
    let reward: f64 = b.trajectories.iter().map(Trajectory::total_reward).sum();
    let cost: f64 = b.trajectories.iter().map(Trajectory::total_cost).sum();
    let violations = b.trajectories.iter().filter(|t| t.violated).count() as f64;
    Ok(BatchStats {
        avg_timestep_reward: reward / steps as f64,
        avg_timestep_cost: cost / steps as f64,
        avg_episode_reward: reward / episodes,
        avg_episode_cost: cost / episodes,
        violation_rate: violations / episodes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::default_targets;
    use crate::numcore::MlpSpec;
    use proptest::prelude::*;

    fn gae(gamma: f64, lambda_gae: f64) -> GaeConfig {
        GaeConfig {
            gamma,
            lambda_gae,
            normalize: false,
        }
    }

    #[test]
    fn gae_zero_rewards_and_values() {
        let (a, r) = compute_gae(&[0.0; 5], &[0.0; 5], true, 0.0, &gae(0.99, 0.95));
        assert!(a.iter().chain(&r).all(|&v| v == 0.0));
    }

    #[test]
    fn gae_single_terminal_step() {
        for (g, l) in [(0.5, 0.0), (0.99, 0.95), (1.0, 1.0)] {
            let (a, _) = compute_gae(&[1.0], &[0.0], true, 123.0, &gae(g, l));
            assert_eq!(a, vec![1.0]);
        }
    }

    #[test]
    fn gae_two_steps_by_hand() {
        let (a, r) = compute_gae(&[1.0, 1.0], &[0.0, 0.0], true, 0.0, &gae(0.5, 1.0));
        assert_eq!(a, vec![1.5, 1.0]);
        assert_eq!(r, a);
    }

    #[test]
    fn gae_bootstraps_when_not_terminal() {
        let (a, _) = compute_gae(&[0.0], &[0.0], false, 2.0, &gae(0.5, 1.0));
        assert_eq!(a, vec![1.0]);
    }

    proptest! {
        #[test]
        fn gae_lambda_one_is_monte_carlo(
            data in proptest::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 1..40)
        ) {
            let (rewards, values): (Vec<f64>, Vec<f64>) = data.into_iter().unzip();
            let (a, _) = compute_gae(&rewards, &values, true, 0.0, &gae(1.0, 1.0));
            for t in 0..rewards.len() {
                let ret: f64 = rewards[t..].iter().sum();
                prop_assert!((a[t] - (ret - values[t])).abs() < 1e-9);
            }
        }

        #[test]
        fn gae_is_linear_in_rewards(
            rewards in proptest::collection::vec(-2.0f64..2.0, 1..40),
            alpha in -3.0f64..3.0,
        ) {
            let zeros = vec![0.0; rewards.len()];
            let cfg = gae(0.97, 0.9);
            let (a, _) = compute_gae(&rewards, &zeros, true, 0.0, &cfg);
            let scaled: Vec<f64> = rewards.iter().map(|r| alpha * r).collect();
            let (b, _) = compute_gae(&scaled, &zeros, true, 0.0, &cfg);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((alpha * x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn standardize_gives_zero_mean_unit_variance() {
        let mut xs = vec![1.0, 2.0, 3.0, 10.0];
        standardize(&mut xs);
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
        let mut flat = vec![0.5; 4];
        standardize(&mut flat);
        assert_eq!(flat, vec![0.0; 4]);
    }

    fn toy_traj(rewards: Vec<f64>, costs: Vec<f64>, violated: bool) -> Trajectory {
        let n = rewards.len();
        Trajectory {
            observations: vec![[0.0; OBS_DIM]; n],
            actions: vec![[0.0; ACTION_DIM]; n],
            logprobs: vec![0.0; n],
            rewards,
            costs,
            values_r: vec![0.0; n],
            values_c: vec![0.0; n],
            terminal: true,
            violated,
            episode_index: 0,
            instance: DomainInstance {
                noise_pct: 0.0,
                stiffness: 1.0,
                damping: 1.0,
                target_id: 1,
                target_pos: [0.0; 3],
            },
        }
    }

    #[test]
    fn stats_arithmetic() {
        let b = Batch::from_trajectories(vec![toy_traj(vec![-0.5; 100], vec![0.0; 100], false)]);
        let s = batch_stats(&b).unwrap();
        assert!((s.avg_timestep_reward + 0.5).abs() < 1e-12);
        assert_eq!(s.avg_timestep_cost, 0.0);
        assert_eq!(s.violation_rate, 0.0);

        let mut costs = vec![0.0; 50];
        costs[49] = 30.0;
        let mut rewards = vec![-0.1; 50];
        rewards[49] = 0.0;
        let b = Batch::from_trajectories(vec![toy_traj(rewards, costs, true)]);
        let s = batch_stats(&b).unwrap();
        assert!((s.avg_timestep_cost - 0.6).abs() < 1e-12);
        assert_eq!(s.violation_rate, 1.0);
        assert!((s.total() - (s.avg_timestep_reward - 0.6)).abs() < 1e-12);

        assert!(matches!(
            batch_stats(&Batch::default()),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn costless_batch_has_zero_cost_advantages() {
        let mut t = toy_traj(vec![-0.2; 10], vec![0.0; 10], false);
        t.values_c = (0..10).map(|i| 0.01 * i as f64).collect();
        let mut b = Batch::from_trajectories(vec![t]);
        b.compute_advantages(&GaeConfig::default());
        assert!(b.advantages_c.iter().all(|&a| a == 0.0));
        assert!(b.has_advantages());
    }

    fn setup() -> (GaussianPolicy, Critics, EnvConfig, Vec<Vec3>) {
        let spec = MlpSpec::new(OBS_DIM, vec![16, 16], ACTION_DIM);
        let critic = MlpSpec::new(OBS_DIM, vec![16, 16], 1);
        let env = EnvConfig::default();
        let targets = default_targets(&env);
        (
            GaussianPolicy::init(spec, 1, 0.5f64.ln()).unwrap(),
            Critics {
                reward: Mlp::init(critic.clone(), 2).unwrap(),
                cost: Mlp::init(critic, 3).unwrap(),
            },
            env,
            targets,
        )
    }

    #[test]
    fn round_robin_assignment() {
        let (policy, critics, env, targets) = setup();
        let profile = DomainProfile::randomized();
        let cfg = CollectConfig {
            env: &env,
            profile: &profile,
            targets: &targets,
            target_ids: &[1, 2, 3, 4],
            n_episodes: 64,
            mode: ActionMode::Stochastic,
            reward_source: RewardSource::TrueState,
        };
        let b = collect_batch(&policy, Some(&critics), &cfg, 7).unwrap();
        for id in 1..=4 {
            assert_eq!(
                b.trajectories
                    .iter()
                    .filter(|t| t.target_id() == id)
                    .count(),
                16
            );
        }
        let single = CollectConfig {
            target_ids: &[3],
            n_episodes: 10,
            ..cfg
        };
        let b = collect_batch(&policy, Some(&critics), &single, 7).unwrap();
        assert!(b.trajectories.iter().all(|t| t.target_id() == 3));
        assert_eq!(b.trajectories.len(), 10);
    }

    #[test]
    fn collection_is_reproducible() {
        let (policy, critics, env, targets) = setup();
        let profile = DomainProfile::randomized();
        let cfg = CollectConfig {
            env: &env,
            profile: &profile,
            targets: &targets,
            target_ids: &[1, 2, 3, 4],
            n_episodes: 8,
            mode: ActionMode::Stochastic,
            reward_source: RewardSource::Observation,
        };
        let a = collect_batch(&policy, Some(&critics), &cfg, 11).unwrap();
        let b = collect_batch(&policy, Some(&critics), &cfg, 11).unwrap();
        assert_eq!(a, b);
        let c = collect_batch(&policy, Some(&critics), &cfg, 12).unwrap();
        assert_ne!(a, c);

        // Sequential collection matches the parallel batch.
        let seq: Vec<Trajectory> = (0..8)
            .map(|i| {
                run_episode(&policy, Some(&critics), &cfg, [1, 2, 3, 4][i % 4], i, 11).unwrap()
            })
            .collect();
        assert_eq!(seq, a.trajectories);
    }

    #[test]
    fn deterministic_noise_free_episodes_repeat() {
        let (policy, _, env, targets) = setup();
        let profile = DomainProfile {
            name: "fixed".into(),
            noise_pct: [0.0, 0.0],
            stiffness: [50.0, 50.0],
            damping: [30.0, 30.0],
        };
        let cfg = CollectConfig {
            env: &env,
            profile: &profile,
            targets: &targets,
            target_ids: &[2],
            n_episodes: 3,
            mode: ActionMode::Deterministic,
            reward_source: RewardSource::TrueState,
        };
        let b = collect_batch(&policy, None, &cfg, 0).unwrap();
        let first = &b.trajectories[0];
        for t in &b.trajectories[1..] {
            assert_eq!(t.rewards, first.rewards);
            assert_eq!(t.actions, first.actions);
        }
    }

    #[test]
    fn violating_trajectories_end_with_cost() {
        let (policy, critics, env, targets) = setup();
        let profile = DomainProfile::randomized();
        let cfg = CollectConfig {
            env: &env,
            profile: &profile,
            targets: &targets,
            target_ids: &[1, 2, 3, 4],
            n_episodes: 32,
            mode: ActionMode::Stochastic,
            reward_source: RewardSource::TrueState,
        };
        let b = collect_batch(&policy, Some(&critics), &cfg, 1).unwrap();
        for t in &b.trajectories {
            assert!(t.len() <= env.horizon);
            if t.violated {
                assert!(*t.costs.last().unwrap() > 0.0);
                assert_eq!(*t.rewards.last().unwrap(), 0.0);
            } else {
                assert_eq!(t.len(), env.horizon);
                assert!(t.costs.iter().all(|&c| c == 0.0));
            }
        }
    }
}
