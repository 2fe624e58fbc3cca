//! Dense math, MLPs with analytic gradients and the Gaussian policy head.

mod gaussian;
mod mlp;
mod params;

pub use gaussian::{
    gaussian_logprob, gaussian_sample, ActionMode, GaussianPolicy, LOG_STD_BLOCK, MAX_ACTION_DIM,
};
pub use mlp::{mlp_forward, mlp_init, Activation, ForwardCache, Mlp, MlpSpec};
pub use params::{axpy, dot, LayerShape, ParamBlock, ParamVector};

use crate::error::{Error, Result};

/// A scalar function of a parameter vector with an analytic gradient.
pub trait Objective {
    fn value(&self, params: &ParamVector) -> Result<f64>;
    fn gradient(&self, params: &ParamVector) -> Result<ParamVector>;
}

/// Analytic gradient of `f` at `p`, rejecting non-finite results.
pub fn grad_scalar<O: Objective + ?Sized>(f: &O, p: &ParamVector) -> Result<ParamVector> {
    p.check_finite("grad_scalar input")?;
    let g = f.gradient(p)?;
    p.ensure_same_layout(&g)?;
    g.check_finite("grad_scalar")?;
    Ok(g)
}

/// Mean squared error of a network over a fixed dataset:
/// `(1/n) sum_i ||f(x_i) - y_i||^2`.
#[derive(Debug, Clone)]
pub struct MseObjective<'a> {
    pub spec: &'a MlpSpec,
    pub inputs: &'a [Vec<f64>],
    pub targets: &'a [Vec<f64>],
}

impl Objective for MseObjective<'_> {
    fn value(&self, params: &ParamVector) -> Result<f64> {
        self.check()?;
        let mut cache = ForwardCache::new(self.spec);
        let mut total = 0.0;
        for (x, t) in self.inputs.iter().zip(self.targets) {
            mlp::forward_raw(self.spec, params.values(), x, &mut cache);
            total += cache
                .output()
                .iter()
                .zip(t)
                .map(|(y, t)| (y - t).powi(2))
                .sum::<f64>();
        }
        Ok(total / self.inputs.len() as f64)
    }

    fn gradient(&self, params: &ParamVector) -> Result<ParamVector> {
        self.check()?;
        let n = self.inputs.len() as f64;
        let mut cache = ForwardCache::new(self.spec);
        let mut grad = params.zeros_like();
        let mut d_out = vec![0.0; self.spec.output_dim];
        for (x, t) in self.inputs.iter().zip(self.targets) {
            mlp::forward_raw(self.spec, params.values(), x, &mut cache);
            for ((d, y), t) in d_out.iter_mut().zip(cache.output()).zip(t) {
                *d = 2.0 * (y - t) / n;
            }
            mlp::backward_raw(
                self.spec,
                params.values(),
                &mut cache,
                &d_out,
                grad.values_mut(),
            );
        }
        Ok(grad)
    }
}

impl MseObjective<'_> {
    fn check(&self) -> Result<()> {
        if self.inputs.is_empty() {
            return Err(Error::Empty("MSE dataset"));
        }
        if self.inputs.len() != self.targets.len() {
            return Err(Error::DimensionMismatch {
                context: "MSE targets",
                expected: self.inputs.len(),
                actual: self.targets.len(),
            });
        }
        Ok(())
    }
}

/// `log pi(action | obs)` as a function of the flat policy parameters.
#[derive(Debug, Clone)]
pub struct LogProbObjective<'a> {
    pub spec: &'a MlpSpec,
    pub obs: &'a [f64],
    pub action: &'a [f64],
}

impl LogProbObjective<'_> {
    fn policy_at(&self, params: &ParamVector) -> Result<GaussianPolicy> {
        let mut policy = GaussianPolicy::init(self.spec.clone(), 0, 0.0)?;
        policy.set_flat_params(params)?;
        Ok(policy)
    }
}

impl Objective for LogProbObjective<'_> {
    fn value(&self, params: &ParamVector) -> Result<f64> {
        let policy = self.policy_at(params)?;
        let mut cache = policy.new_cache();
        Ok(policy.forward_logprob(self.obs, self.action, &mut cache))
    }

    fn gradient(&self, params: &ParamVector) -> Result<ParamVector> {
        Ok(self
            .policy_at(params)?
            .logprob_grad(self.obs, self.action)
            .1)
    }
}
