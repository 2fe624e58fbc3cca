//! Elastic weight consolidation around a pretrained policy.

use rayon::prelude::*;

use crate::env::{ACTION_DIM, OBS_DIM};
use crate::error::{Error, Result};
use crate::numcore::{GaussianPolicy, Objective, ParamVector};
use crate::rollout::{collect_batch, CollectConfig};

/// State-action samples drawn from the pretrained policy.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FisherBuffer {
    pub observations: Vec<[f64; OBS_DIM]>,
    pub actions: Vec<[f64; ACTION_DIM]>,
}

impl FisherBuffer {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// Collects exactly `n_samples` timesteps with `cfg`, in rounds of
    /// `cfg.n_episodes` episodes, each round on its own seed.
    pub fn collect(
        policy: &GaussianPolicy,
        cfg: &CollectConfig<'_>,
        n_samples: usize,
        seed: u64,
    ) -> Result<Self> {
        if n_samples == 0 {
            return Err(Error::InvalidArgument(
                "fisher sample count must be >= 1".into(),
            ));
        }
        let mut buf = Self::default();
        let mut round = 0u64;
        while buf.len() < n_samples {
            let batch = collect_batch(policy, None, cfg, crate::seed::derive_seed(seed, &[round]))?;
            for t in &batch.trajectories {
                buf.observations.extend_from_slice(&t.observations);
                buf.actions.extend_from_slice(&t.actions);
            }
            round += 1;
        }
        buf.observations.truncate(n_samples);
        buf.actions.truncate(n_samples);
        Ok(buf)
    }
}

/// Empirical diagonal Fisher: the mean squared score over the buffer, for
/// every policy parameter including `log_std`.
pub fn estimate_fisher(policy: &GaussianPolicy, buffer: &FisherBuffer) -> Result<ParamVector> {
    if buffer.is_empty() {
        return Err(Error::Empty("fisher buffer"));
    }
    let n_params = policy.param_count();
    let partials: Vec<Vec<f64>> = (0..buffer.len())
        .collect::<Vec<_>>()
        .par_chunks(256)
        .map(|chunk| {
            let mut cache = policy.new_cache();
            let mut acc = vec![0.0; n_params];
            let mut g = vec![0.0; n_params];
            for &i in chunk {
                g.iter_mut().for_each(|v| *v = 0.0);
                policy.forward_logprob(&buffer.observations[i], &buffer.actions[i], &mut cache);
                policy.backward_logprob(&mut cache, &buffer.actions[i], 1.0, &mut g);
                acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v * v);
            }
            acc
        })
        .collect();
    let mut fisher = vec![0.0; n_params];
    for part in partials {
        fisher.iter_mut().zip(part).for_each(|(f, v)| *f += v);
    }
    let n = buffer.len() as f64;
    fisher.iter_mut().for_each(|f| *f /= n);
    let fisher = ParamVector::new(fisher, GaussianPolicy::param_layout(policy.spec()))?;
    fisher.check_finite("fisher")?;
    Ok(fisher)
}

/// Anchor parameters, their Fisher weights and the penalty strength.
#[derive(Debug, Clone, PartialEq)]
pub struct EwcState {
    pub snapshot: ParamVector,
    pub fisher: ParamVector,
    pub lambda: f64,
}

impl EwcState {
    pub fn new(snapshot: ParamVector, fisher: ParamVector, lambda: f64) -> Result<Self> {
        snapshot.ensure_same_layout(&fisher)?;
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "ewc lambda must be >= 0, got {lambda}"
            )));
        }
        if fisher
            .values()
            .iter()
            .any(|f| !(f.is_finite() && *f >= 0.0))
        {
            return Err(Error::InvalidArgument(
                "fisher entries must be finite and >= 0".into(),
            ));
        }
        Ok(Self {
            snapshot,
            fisher,
            lambda,
        })
    }

    /// `(lambda / 2) sum_i F_i (p_i - snapshot_i)^2`
    pub fn penalty(&self, p: &ParamVector) -> Result<f64> {
        self.snapshot.ensure_same_layout(p)?;
        let s: f64 = p
            .values()
            .iter()
            .zip(self.snapshot.values())
            .zip(self.fisher.values())
            .map(|((p, a), f)| f * (p - a) * (p - a))
            .sum();
        Ok(0.5 * self.lambda * s)
    }

    /// `lambda F (p - snapshot)`
    pub fn penalty_grad(&self, p: &ParamVector) -> Result<ParamVector> {
        self.snapshot.ensure_same_layout(p)?;
        let mut g = p.zeros_like();
        self.subtract_penalty_grad(p.values(), g.values_mut())?;
        g.scale(-1.0);
        Ok(g)
    }

    /// `direction -= lambda F (p - snapshot)`
    pub fn subtract_penalty_grad(&self, p: &[f64], direction: &mut [f64]) -> Result<()> {
        let n = self.snapshot.len();
        if p.len() != n || direction.len() != n {
            return Err(Error::DimensionMismatch {
                context: "ewc gradient",
                expected: n,
                actual: p.len().min(direction.len()),
            });
        }
        if self.lambda == 0.0 {
            return Ok(());
        }
        for (((d, p), a), f) in direction
            .iter_mut()
            .zip(p)
            .zip(self.snapshot.values())
            .zip(self.fisher.values())
        {
            *d -= self.lambda * f * (p - a);
        }
        Ok(())
    }
}

/// Anchors EWC at the current policy parameters.
pub fn take_snapshot(
    policy: &GaussianPolicy,
    fisher: ParamVector,
    lambda: f64,
) -> Result<EwcState> {
    EwcState::new(policy.flat_params(), fisher, lambda)
}

/// The EWC penalty as an [`Objective`].
#[derive(Debug, Clone)]
pub struct EwcPenalty<'a>(pub &'a EwcState);

impl Objective for EwcPenalty<'_> {
    fn value(&self, params: &ParamVector) -> Result<f64> {
        self.0.penalty(params)
    }

    fn gradient(&self, params: &ParamVector) -> Result<ParamVector> {
        self.0.penalty_grad(params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{LayerShape, MlpSpec};
    use proptest::prelude::*;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec(), vec![LayerShape::new("w", v.len(), 1)]).unwrap()
    }

    #[test]
    fn penalty_example() {
        let s = EwcState::new(pv(&[0.0, 0.0]), pv(&[1.0, 4.0]), 2.0).unwrap();
        let p = pv(&[1.0, 0.5]);
        assert!((s.penalty(&p).unwrap() - 2.0).abs() < 1e-15);
        assert_eq!(s.penalty_grad(&p).unwrap().values(), &[2.0, 4.0]);
    }

    #[test]
    fn zero_at_snapshot() {
        let s = EwcState::new(pv(&[0.3, -1.0]), pv(&[2.0, 5.0]), 1.0).unwrap();
        assert_eq!(s.penalty(&pv(&[0.3, -1.0])).unwrap(), 0.0);
        assert!(s
            .penalty_grad(&pv(&[0.3, -1.0]))
            .unwrap()
            .values()
            .iter()
            .all(|v| *v == 0.0));
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(EwcState::new(pv(&[0.0]), pv(&[-1.0]), 1.0).is_err());
        assert!(EwcState::new(pv(&[0.0]), pv(&[1.0]), -1.0).is_err());
        assert!(EwcState::new(pv(&[0.0]), pv(&[1.0, 2.0]), 1.0).is_err());
    }

    #[test]
    fn fisher_matches_direct_mean_of_squares() {
        let policy = GaussianPolicy::init(MlpSpec::new(5, vec![6], 2), 3, -0.7).unwrap();
        let buffer = FisherBuffer {
            observations: vec![[0.1, -0.2, 0.3, 0.5, -0.4], [1.0, 0.0, -1.0, 0.2, 0.1]],
            actions: vec![[0.2, -0.1], [-0.3, 0.4]],
        };
        let f = estimate_fisher(&policy, &buffer).unwrap();
        let g0 = policy
            .logprob_grad(&buffer.observations[0], &buffer.actions[0])
            .1;
        let g1 = policy
            .logprob_grad(&buffer.observations[1], &buffer.actions[1])
            .1;
        for i in 0..f.len() {
            let want = 0.5 * (g0.values()[i].powi(2) + g1.values()[i].powi(2));
            assert!((f.values()[i] - want).abs() <= 1e-12 * want.max(1.0));
        }
        assert!(f.values().iter().all(|v| *v >= 0.0));
    }

    proptest! {
        #[test]
        fn penalty_nonnegative_and_symmetric(
            d in proptest::collection::vec(-3.0f64..3.0, 4),
            f in proptest::collection::vec(0.0f64..10.0, 4),
            lambda in 0.0f64..5.0,
        ) {
            let s = EwcState::new(pv(&[0.5, -0.5, 1.0, 0.0]), pv(&f), lambda).unwrap();
            let plus: Vec<f64> = s.snapshot.values().iter().zip(&d).map(|(a, d)| a + d).collect();
            let minus: Vec<f64> = s.snapshot.values().iter().zip(&d).map(|(a, d)| a - d).collect();
            let a = s.penalty(&pv(&plus)).unwrap();
            let b = s.penalty(&pv(&minus)).unwrap();
            prop_assert!(a >= 0.0);
            prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        }

        #[test]
        fn zero_fisher_entries_are_unconstrained(
            d in proptest::collection::vec(-3.0f64..3.0, 4),
        ) {
            let s = EwcState::new(pv(&[0.0; 4]), pv(&[0.0, 1.0, 0.0, 2.0]), 1.0).unwrap();
            let g = s.penalty_grad(&pv(&d)).unwrap();
            prop_assert_eq!(g.values()[0], 0.0);
            prop_assert_eq!(g.values()[2], 0.0);
        }
    }
}
