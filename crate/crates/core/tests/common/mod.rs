//! Finite-difference oracles shared by the integration tests.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scda::env::{ACTION_DIM, OBS_DIM};
use scda::ewc::{EwcPenalty, EwcState};
use scda::numcore::{
    GaussianPolicy, LogProbObjective, MlpSpec, MseObjective, Objective, ParamVector,
};
use scda::pcrpo::{surrogate_grad, surrogate_value, SurrogateData};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_REL_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Central differences of `f` at `p`, one coordinate at a time.
pub fn central_diff(mut f: impl FnMut(&ParamVector) -> f64, p: &ParamVector) -> ParamVector {
    let mut probe = p.clone();
    let mut out = p.zeros_like();
    for j in 0..p.len() {
        let v = p.values()[j];
        probe.values_mut()[j] = v + FD_STEP;
        let up = f(&probe);
        probe.values_mut()[j] = v - FD_STEP;
        let down = f(&probe);
        probe.values_mut()[j] = v;
        out.values_mut()[j] = (up - down) / (2.0 * FD_STEP);
    }
    out
}

/// `||analytic - numeric|| / max(||numeric||, 1e-8)`.
pub fn rel_err(analytic: &ParamVector, numeric: &ParamVector) -> f64 {
    let diff: f64 = analytic
        .values()
        .iter()
        .zip(numeric.values())
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    diff / numeric.norm().max(1e-8)
}

fn small_spec<R: Rng>(r: &mut R, input: usize, output: usize) -> MlpSpec {
    let depth = r.random_range(1..=2);
    let hidden = (0..depth).map(|_| r.random_range(2..=6)).collect();
    MlpSpec::new(input, hidden, output)
}

fn random_policy<R: Rng>(r: &mut R) -> GaussianPolicy {
    let spec = small_spec(r, OBS_DIM, ACTION_DIM);
    let mut p = GaussianPolicy::init(spec, r.random(), r.random_range(-1.5..0.5)).unwrap();
    let mut flat = p.flat_params();
    for v in flat.values_mut() {
        *v += r.random_range(-0.3..0.3);
    }
    p.set_flat_params(&flat).unwrap();
    p
}

fn random_vec<R: Rng>(r: &mut R, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-scale..scale)).collect()
}

/// Gaussian log-probability of a random policy, observation and action.
pub fn logprob_instance(seed: u64) -> f64 {
    let mut r = rng(seed);
    let policy = random_policy(&mut r);
    let obs = random_vec(&mut r, OBS_DIM, 1.0);
    let action = random_vec(&mut r, ACTION_DIM, 1.5);
    let f = LogProbObjective {
        spec: policy.spec(),
        obs: &obs,
        action: &action,
    };
    let p = policy.flat_params();
    rel_err(
        &f.gradient(&p).unwrap(),
        &central_diff(|q| f.value(q).unwrap(), &p),
    )
}

/// Clipped surrogate on a random sample set whose ratios straddle the clip range.
pub fn surrogate_instance(seed: u64) -> f64 {
    let mut r = rng(seed);
    let policy = random_policy(&mut r);
    let n = r.random_range(4..=24);
    let obs: Vec<[f64; OBS_DIM]> = (0..n)
        .map(|_| random_vec(&mut r, OBS_DIM, 1.0).try_into().unwrap())
        .collect();
    let actions: Vec<[f64; ACTION_DIM]> = (0..n)
        .map(|_| random_vec(&mut r, ACTION_DIM, 1.5).try_into().unwrap())
        .collect();
    let mut cache = policy.new_cache();
    let spread = if seed.is_multiple_of(2) { 0.1 } else { 0.6 };
    let old: Vec<f64> = obs
        .iter()
        .zip(&actions)
        .map(|(o, a)| policy.forward_logprob(o, a, &mut cache) + r.random_range(-spread..spread))
        .collect();
    let adv = random_vec(&mut r, n, 2.0);
    let data = SurrogateData {
        observations: obs.iter().collect(),
        actions: actions.iter().collect(),
        old_logprobs: old,
    };
    let indices: Vec<usize> = (0..n).collect();
    let p = policy.flat_params();
    let analytic = surrogate_grad(&policy, &data, &adv, 0.2).unwrap();
    let mut probe = policy.clone();
    let numeric = central_diff(
        |q| {
            probe.set_flat_params(q).unwrap();
            surrogate_value(&probe, &data, &adv, &indices, 0.2)
        },
        &p,
    );
    rel_err(&analytic, &numeric)
}

/// Critic mean squared error on a random dataset.
pub fn critic_mse_instance(seed: u64) -> f64 {
    let mut r = rng(seed);
    let spec = small_spec(&mut r, OBS_DIM, 1);
    let p = scda::numcore::mlp_init(&spec, r.random());
    let n = r.random_range(1..=16);
    let inputs: Vec<Vec<f64>> = (0..n).map(|_| random_vec(&mut r, OBS_DIM, 1.0)).collect();
    let targets: Vec<Vec<f64>> = (0..n).map(|_| random_vec(&mut r, 1, 3.0)).collect();
    let f = MseObjective {
        spec: &spec,
        inputs: &inputs,
        targets: &targets,
    };
    rel_err(
        &f.gradient(&p).unwrap(),
        &central_diff(|q| f.value(q).unwrap(), &p),
    )
}

/// EWC penalty with a random anchor, Fisher diagonal and strength.
pub fn ewc_instance(seed: u64) -> f64 {
    let mut r = rng(seed);
    let policy = random_policy(&mut r);
    let anchor = policy.flat_params();
    let fisher = anchor
        .with_values(
            (0..anchor.len())
                .map(|_| r.random_range(0.0..3.0))
                .collect(),
        )
        .unwrap();
    let state = EwcState::new(anchor.clone(), fisher, r.random_range(0.0..20.0)).unwrap();
    let p = anchor
        .with_values(
            anchor
                .values()
                .iter()
                .map(|v| v + r.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap();
    let f = EwcPenalty(&state);
    rel_err(
        &f.gradient(&p).unwrap(),
        &central_diff(|q| f.value(q).unwrap(), &p),
    )
}

pub type Instance = fn(u64) -> f64;

pub const GRADIENT_CHECKS: [(&str, Instance); 4] = [
    ("surrogate", surrogate_instance),
    ("gaussian logprob", logprob_instance),
    ("critic mse", critic_mse_instance),
    ("ewc penalty", ewc_instance),
];

/// Worst relative error of `check` over `n` instances.
pub fn worst(check: Instance, n: u64) -> f64 {
    (0..n).map(check).fold(0.0, f64::max)
}
