//! Diagonal Gaussian policy head over a tanh MLP mean.

use rand::Rng;
use rand_distr::StandardNormal;

use super::mlp::{ForwardCache, Mlp, MlpSpec};
use super::params::{LayerShape, ParamVector};
use crate::error::{Error, Result};

/// Name of the block holding the state-independent log standard deviations.
pub const LOG_STD_BLOCK: &str = "log_std";

/// Largest action dimension a [`GaussianPolicy`] accepts.
pub const MAX_ACTION_DIM: usize = 8;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Sum over dimensions of the diagonal Gaussian log density.
pub fn gaussian_logprob(mean: &[f64], log_std: &[f64], action: &[f64]) -> f64 {
    debug_assert!(mean.len() == log_std.len() && mean.len() == action.len());
    mean.iter()
        .zip(log_std)
        .zip(action)
        .map(|((&m, &s), &a)| {
            let z = (a - m) * (-s).exp();
            -0.5 * z * z - s - HALF_LN_2PI
        })
        .sum()
}

/// `mean + exp(log_std) * z` with `z` standard normal.
pub fn gaussian_sample<R: Rng + ?Sized>(mean: &[f64], log_std: &[f64], rng: &mut R) -> Vec<f64> {
    mean.iter()
        .zip(log_std)
        .map(|(&m, &s)| {
            let z: f64 = rng.sample(StandardNormal);
            m + s.exp() * z
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionMode {
    /// Sample from the Gaussian.
    Stochastic,
    /// Use the mean action.
    Deterministic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicy {
    net: Mlp,
    log_std: Vec<f64>,
}

impl GaussianPolicy {
    pub fn new(net: Mlp, log_std: Vec<f64>) -> Result<Self> {
        if log_std.len() != net.spec().output_dim {
            return Err(Error::DimensionMismatch {
                context: "GaussianPolicy log_std",
                expected: net.spec().output_dim,
                actual: log_std.len(),
            });
        }
        if log_std.len() > MAX_ACTION_DIM {
            return Err(Error::InvalidArgument(format!(
                "action dimension {} exceeds {MAX_ACTION_DIM}",
                log_std.len()
            )));
        }
        if log_std.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument("log_std must be finite".into()));
        }
        Ok(Self { net, log_std })
    }

    pub fn init(spec: MlpSpec, seed: u64, init_log_std: f64) -> Result<Self> {
        let dim = spec.output_dim;
        Self::new(Mlp::init(spec, seed)?, vec![init_log_std; dim])
    }

    pub fn spec(&self) -> &MlpSpec {
        self.net.spec()
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn log_std(&self) -> &[f64] {
        &self.log_std
    }

    pub fn action_dim(&self) -> usize {
        self.log_std.len()
    }

    pub fn new_cache(&self) -> ForwardCache {
        self.net.new_cache()
    }

    /// Layout of [`flat_params`](Self::flat_params): network blocks then `log_std`.
    pub fn param_layout(spec: &MlpSpec) -> Vec<LayerShape> {
        let mut layout = spec.layout();
        layout.push(LayerShape::new(LOG_STD_BLOCK, spec.output_dim, 1));
        layout
    }

    pub fn param_count(&self) -> usize {
        self.net.params().len() + self.log_std.len()
    }

    pub fn flat_params(&self) -> ParamVector {
        let mut values = Vec::with_capacity(self.param_count());
        values.extend_from_slice(self.net.params().values());
        values.extend_from_slice(&self.log_std);
        ParamVector::new(values, Self::param_layout(self.spec())).expect("consistent layout")
    }

    pub fn set_flat_params(&mut self, p: &ParamVector) -> Result<()> {
        if p.layout() != Self::param_layout(self.spec()).as_slice() {
            return Err(Error::LayoutMismatch(
                "policy parameter vector does not match policy network".into(),
            ));
        }
        let n = self.net.params().len();
        let log_std = &p.values()[n..];
        if log_std.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument("log_std must be finite".into()));
        }
        self.net.set_values(&p.values()[..n])?;
        self.log_std.copy_from_slice(log_std);
        Ok(())
    }

    pub fn mean(&self, obs: &[f64]) -> Result<Vec<f64>> {
        self.net.forward(obs)
    }

    pub fn act<R: Rng + ?Sized>(
        &self,
        obs: &[f64],
        mode: ActionMode,
        rng: &mut R,
        cache: &mut ForwardCache,
    ) -> (Vec<f64>, f64) {
        let mean = self.net.forward_cached(obs, cache);
        let action = match mode {
            ActionMode::Stochastic => gaussian_sample(mean, &self.log_std, rng),
            ActionMode::Deterministic => mean.to_vec(),
        };
        let logp = gaussian_logprob(mean, &self.log_std, &action);
        (action, logp)
    }

    /// Runs the forward pass and returns `log pi(action | obs)`; the cache is
    /// left ready for [`backward_logprob`](Self::backward_logprob).
    pub fn forward_logprob(&self, obs: &[f64], action: &[f64], cache: &mut ForwardCache) -> f64 {
        let mean = self.net.forward_cached(obs, cache);
        gaussian_logprob(mean, &self.log_std, action)
    }

    /// Adds `coef * grad log pi(action | obs)` into `grad` (flat policy layout).
    pub fn backward_logprob(
        &self,
        cache: &mut ForwardCache,
        action: &[f64],
        coef: f64,
        grad: &mut [f64],
    ) {
        let n = self.net.params().len();
        let dim = self.action_dim();
        let mut buf = [0.0f64; MAX_ACTION_DIM];
        let d_mean = &mut buf[..dim];
        let mean = cache.output();
        for k in 0..dim {
            let inv_var = (-2.0 * self.log_std[k]).exp();
            let diff = action[k] - mean[k];
            d_mean[k] = coef * diff * inv_var;
            grad[n + k] += coef * (diff * diff * inv_var - 1.0);
        }
        let (net_grad, _) = grad.split_at_mut(n);
        self.net.backward(cache, d_mean, net_grad);
    }

    /// Gradient of `log pi(action | obs)` w.r.t. all policy parameters.
    pub fn logprob_grad(&self, obs: &[f64], action: &[f64]) -> (f64, ParamVector) {
        let mut cache = self.new_cache();
        let mut grad = ParamVector::zeros(Self::param_layout(self.spec()));
        let logp = self.forward_logprob(obs, action, &mut cache);
        self.backward_logprob(&mut cache, action, 1.0, grad.values_mut());
        (logp, grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    #[test]
    fn standard_normal_at_mode() {
        let lp = gaussian_logprob(&[0.0], &[0.0], &[0.0]);
        assert!((lp - (-0.5 * (2.0 * PI).ln())).abs() < 1e-15);
        assert!((lp + 0.9189).abs() < 1e-4);
    }

    #[test]
    fn mode_with_arbitrary_log_std() {
        let s = [0.3, -1.2, 0.7];
        let m = [1.0, -2.0, 0.5];
        let lp = gaussian_logprob(&m, &s, &m);
        let expected = -s.iter().sum::<f64>() - 1.5 * (2.0 * PI).ln();
        assert!((lp - expected).abs() < 1e-12);
        assert!((0.5 * (2.0 * PI).ln() - HALF_LN_2PI).abs() < 1e-15);
    }

    #[test]
    fn translation_invariance() {
        let s = [0.1, -0.4];
        let a = gaussian_logprob(&[0.2, 0.3], &s, &[1.0, -1.0]);
        let b = gaussian_logprob(&[5.2, -6.7], &s, &[6.0, -8.0]);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn sampling_is_reproducible() {
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(
            gaussian_sample(&[0.0, 1.0], &[0.0, -1.0], &mut r1),
            gaussian_sample(&[0.0, 1.0], &[0.0, -1.0], &mut r2)
        );
    }

    #[test]
    fn sample_mean_converges() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let mean: f64 = (0..n)
            .map(|_| gaussian_sample(&[0.7], &[0.0], &mut rng)[0])
            .sum::<f64>()
            / n as f64;
        assert!((mean - 0.7).abs() < 0.02, "{mean}");
    }

    #[test]
    fn deterministic_mode_uses_mean() {
        let policy = GaussianPolicy::init(MlpSpec::new(3, vec![8], 2), 4, 0.5f64.ln()).unwrap();
        let obs = [0.1, 0.2, -0.3];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut cache = policy.new_cache();
        let (a, _) = policy.act(&obs, ActionMode::Deterministic, &mut rng, &mut cache);
        assert_eq!(a, policy.mean(&obs).unwrap());
    }

    #[test]
    fn flat_params_round_trip() {
        let mut policy = GaussianPolicy::init(MlpSpec::new(3, vec![8], 2), 4, -0.3).unwrap();
        let mut p = policy.flat_params();
        assert_eq!(p.segment(LOG_STD_BLOCK), Some(p.len() - 2..p.len()));
        p.values_mut()[0] = 42.0;
        let last = p.len() - 1;
        p.values_mut()[last] = 0.25;
        policy.set_flat_params(&p).unwrap();
        assert_eq!(policy.flat_params(), p);
        assert_eq!(policy.log_std()[1], 0.25);
    }
}
