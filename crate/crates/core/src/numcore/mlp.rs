//! Fully connected networks with hand-written reverse mode.
//!
//! Parameters are laid out layer by layer as `l{i}.weight` (row-major,
//! `out x in`) followed by `l{i}.bias` (`out x 1`). Hidden layers apply the
//! activation, the output layer is linear.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{LayerShape, ParamVector};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dims,
            output_dim,
            activation: Activation::Tanh,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "all layer widths must be >= 1, got {self:?}"
            )));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` per layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut prev = self.input_dim;
        for &h in &self.hidden_dims {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.output_dim));
        dims
    }

    pub fn layout(&self) -> Vec<LayerShape> {
        self.layer_dims()
            .into_iter()
            .enumerate()
            .flat_map(|(i, (fan_in, fan_out))| {
                [
                    LayerShape::new(format!("l{i}.weight"), fan_out, fan_in),
                    LayerShape::new(format!("l{i}.bias"), fan_out, 1),
                ]
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }

    /// Name of the weight block feeding the output units.
    pub fn output_weight_name(&self) -> String {
        format!("l{}.weight", self.hidden_dims.len())
    }

    fn max_width(&self) -> usize {
        self.hidden_dims
            .iter()
            .copied()
            .chain([self.input_dim, self.output_dim])
            .max()
            .unwrap_or(1)
    }
}

/// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
pub fn mlp_init(spec: &MlpSpec, seed: u64) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(spec.param_count());
    for (fan_in, fan_out) in spec.layer_dims() {
        let bound = 1.0 / (fan_in as f64).sqrt();
        values.extend((0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)));
        values.extend(std::iter::repeat_n(0.0, fan_out));
    }
    ParamVector::new(values, spec.layout()).expect("layout built from the same spec")
}

pub fn mlp_forward(params: &ParamVector, spec: &MlpSpec, x: &[f64]) -> Result<Vec<f64>> {
    check_params(params, spec)?;
    check_input(spec, x)?;
    let mut cache = ForwardCache::new(spec);
    forward_raw(spec, params.values(), x, &mut cache);
    Ok(cache.output().to_vec())
}

/// Activations kept from a forward pass, plus backward scratch space.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

impl ForwardCache {
    pub fn new(spec: &MlpSpec) -> Self {
        let mut acts = vec![vec![0.0; spec.input_dim]];
        acts.extend(spec.layer_dims().iter().map(|&(_, out)| vec![0.0; out]));
        let width = spec.max_width();
        Self {
            acts,
            delta: vec![0.0; width],
            delta_prev: vec![0.0; width],
        }
    }

    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("at least one layer")
    }
}

/// A network: spec plus its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    params: ParamVector,
}

impl Mlp {
    pub fn new(spec: MlpSpec, params: ParamVector) -> Result<Self> {
        spec.validate()?;
        check_params(&params, &spec)?;
        Ok(Self { spec, params })
    }

    pub fn init(spec: MlpSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let params = mlp_init(&spec, seed);
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn set_params(&mut self, params: ParamVector) -> Result<()> {
        check_params(&params, &self.spec)?;
        self.params = params;
        Ok(())
    }

    pub fn set_values(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::DimensionMismatch {
                context: "Mlp::set_values",
                expected: self.params.len(),
                actual: values.len(),
            });
        }
        self.params.values_mut().copy_from_slice(values);
        Ok(())
    }

    pub fn new_cache(&self) -> ForwardCache {
        ForwardCache::new(&self.spec)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_input(&self.spec, x)?;
        let mut cache = self.new_cache();
        forward_raw(&self.spec, self.params.values(), x, &mut cache);
        Ok(cache.output().to_vec())
    }

    /// Forward pass into a reusable cache. Panics on input length mismatch.
    pub fn forward_cached<'c>(&self, x: &[f64], cache: &'c mut ForwardCache) -> &'c [f64] {
        assert_eq!(x.len(), self.spec.input_dim, "input length");
        forward_raw(&self.spec, self.params.values(), x, cache);
        cache.output()
    }

    /// Accumulates `J^T d_out` into `grad` using the activations in `cache`.
    pub fn backward(&self, cache: &mut ForwardCache, d_out: &[f64], grad: &mut [f64]) {
        backward_raw(&self.spec, self.params.values(), cache, d_out, grad);
    }
}

fn check_params(params: &ParamVector, spec: &MlpSpec) -> Result<()> {
    if params.layout() != spec.layout().as_slice() {
        return Err(Error::LayoutMismatch(format!(
            "parameters do not match network {}->{:?}->{}",
            spec.input_dim, spec.hidden_dims, spec.output_dim
        )));
    }
    Ok(())
}

fn check_input(spec: &MlpSpec, x: &[f64]) -> Result<()> {
    if x.len() != spec.input_dim {
        return Err(Error::DimensionMismatch {
            context: "mlp input",
            expected: spec.input_dim,
            actual: x.len(),
        });
    }
    Ok(())
}

pub(crate) fn forward_raw(spec: &MlpSpec, params: &[f64], x: &[f64], cache: &mut ForwardCache) {
    cache.acts[0].copy_from_slice(x);
    let dims = spec.layer_dims();
    let last = dims.len() - 1;
    let mut offset = 0;
    for (l, &(fan_in, fan_out)) in dims.iter().enumerate() {
        let (w, rest) = params[offset..].split_at(fan_in * fan_out);
        let b = &rest[..fan_out];
        offset += fan_in * fan_out + fan_out;

        let (prev, next) = cache.acts.split_at_mut(l + 1);
        let input = &prev[l];
        let out = &mut next[0];
        for j in 0..fan_out {
            let row = &w[j * fan_in..(j + 1) * fan_in];
            let z = b[j]
                + row
                    .iter()
                    .zip(input.iter())
                    .map(|(a, c)| a * c)
                    .sum::<f64>();
            out[j] = if l == last {
                z
            } else {
                activate(spec.activation, z)
            };
        }
    }
}

pub(crate) fn backward_raw(
    spec: &MlpSpec,
    params: &[f64],
    cache: &mut ForwardCache,
    d_out: &[f64],
    grad: &mut [f64],
) {
    let dims = spec.layer_dims();
    let n_layers = dims.len();
    let mut offsets = Vec::with_capacity(n_layers);
    let mut offset = 0;
    for &(fan_in, fan_out) in &dims {
        offsets.push(offset);
        offset += fan_in * fan_out + fan_out;
    }
    debug_assert!(grad.len() >= offset);

    let ForwardCache {
        acts,
        delta,
        delta_prev,
    } = cache;
    delta[..spec.output_dim].copy_from_slice(d_out);

    for l in (0..n_layers).rev() {
        let (fan_in, fan_out) = dims[l];
        let w_off = offsets[l];
        let b_off = w_off + fan_in * fan_out;
        let input = &acts[l];

        for j in 0..fan_out {
            let dj = delta[j];
            grad[b_off + j] += dj;
            if dj != 0.0 {
                let g_row = &mut grad[w_off + j * fan_in..w_off + (j + 1) * fan_in];
                for (g, a) in g_row.iter_mut().zip(input.iter()) {
                    *g += dj * a;
                }
            }
        }

        if l > 0 {
            let dp = &mut delta_prev[..fan_in];
            dp.iter_mut().for_each(|v| *v = 0.0);
            for j in 0..fan_out {
                let dj = delta[j];
                if dj == 0.0 {
                    continue;
                }
                let row = &params[w_off + j * fan_in..w_off + (j + 1) * fan_in];
                for (d, w) in dp.iter_mut().zip(row) {
                    *d += dj * w;
                }
            }
            // Hidden activations are stored post-activation.
            for (d, a) in dp.iter_mut().zip(input.iter()) {
                *d *= activate_grad_from_output(spec.activation, *a);
            }
            std::mem::swap(delta, delta_prev);
        }
    }
}

#[inline]
fn activate(act: Activation, z: f64) -> f64 {
    match act {
        Activation::Tanh => z.tanh(),
    }
}

#[inline]
fn activate_grad_from_output(act: Activation, a: f64) -> f64 {
    match act {
        Activation::Tanh => 1.0 - a * a,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_count_for_policy_net() {
        let spec = MlpSpec::new(5, vec![64, 64], 2);
        assert_eq!(spec.param_count(), 5 * 64 + 64 + 64 * 64 + 64 + 64 * 2 + 2);
        assert_eq!(mlp_init(&spec, 0).len(), 4674);
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let spec = MlpSpec::new(5, vec![64, 64], 2);
        let a = mlp_init(&spec, 7);
        let b = mlp_init(&spec, 7);
        assert_eq!(a, b);
        assert_ne!(mlp_init(&spec, 0), mlp_init(&spec, 1));
    }

    #[test]
    fn init_respects_bounds_and_zero_bias() {
        let spec = MlpSpec::new(5, vec![64, 64], 2);
        let p = mlp_init(&spec, 3);
        for block in p.unflatten() {
            if block.shape.name.ends_with("bias") {
                assert!(block.data.iter().all(|&v| v == 0.0));
            } else {
                let bound = 1.0 / (block.shape.cols as f64).sqrt();
                assert!(block.data.iter().all(|v| v.abs() <= bound));
            }
        }
    }

    #[test]
    fn zero_params_give_zero_output() {
        let spec = MlpSpec::new(3, vec![4, 4], 2);
        let p = ParamVector::zeros(spec.layout());
        let y = mlp_forward(&p, &spec, &[1.0, -2.0, 0.5]).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
    }

    #[test]
    fn tanh_identity_net_at_zero() {
        let spec = MlpSpec::new(1, vec![1], 1);
        let p = ParamVector::new(vec![1.0, 0.0, 1.0, 0.0], spec.layout()).unwrap();
        assert_eq!(mlp_forward(&p, &spec, &[0.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let spec = MlpSpec::new(3, vec![4], 1);
        let p = mlp_init(&spec, 0);
        assert!(matches!(
            mlp_forward(&p, &spec, &[1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        let other = MlpSpec::new(2, vec![4], 1);
        assert!(matches!(
            mlp_forward(&mlp_init(&other, 0), &spec, &[1.0, 2.0, 3.0]),
            Err(Error::LayoutMismatch(_))
        ));
    }

    #[test]
    fn zero_width_spec_rejected() {
        assert!(MlpSpec::new(0, vec![4], 1).validate().is_err());
        assert!(MlpSpec::new(2, vec![0], 1).validate().is_err());
    }
}
