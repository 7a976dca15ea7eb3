//! Discrete random variables that stay on the tape.
//!
//! Hard samples are produced in the forward pass and gradients are passed
//! straight through to the probabilities. For categorical variables a
//! Gumbel-softmax relaxation is available as an alternative; it is biased
//! when many relaxed samples are composed, so the simulator itself only uses
//! the straight-through path.

use thiserror::Error;

use crate::rng::RngStream;
use crate::tape::Var;

/// Probabilities may stray outside `[0, 1]` by this much from rounding.
pub const PROB_TOL: f64 = 1e-12;
const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum DomainError {
    #[error("probability {value} at index {index} is outside [0, 1]")]
    Probability { index: usize, value: f64 },
    #[error("probabilities sum to {sum}, expected 1")]
    NotNormalized { sum: f64 },
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("empty probability vector")]
    Empty,
}

fn check_prob(index: usize, p: f64) -> Result<(), DomainError> {
    if !(-PROB_TOL..=1.0 + PROB_TOL).contains(&p) {
        return Err(DomainError::Probability { index, value: p });
    }
    Ok(())
}

/// Hard Bernoulli draw with a straight-through gradient, `∂b/∂p = 1`.
///
/// Works element-wise on vector nodes; element `k` uses draw `k` of `rng`.
pub fn bernoulli_st<'t>(p: Var<'t>, rng: &RngStream) -> Result<Var<'t>, DomainError> {
    let sample = p.with_value(|ps| {
        ps.iter()
            .enumerate()
            .map(|(k, &pk)| {
                check_prob(k, pk)?;
                Ok(if rng.uniform_at(k as u64) < pk {
                    1.0
                } else {
                    0.0
                })
            })
            .collect::<Result<Vec<f64>, DomainError>>()
    })?;
    Ok(p.tape().straight_through(p, sample))
}

/// Hard Bernoulli draw against an explicit uniform; used by the simulator's
/// vectorized paths where every agent has its own stream.
#[inline]
pub fn bernoulli_hard(p: f64, u: f64) -> bool {
    u < p
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CategoricalMode {
    /// One-hot hard sample with identity gradient to the probabilities.
    HardSt,
    /// Relaxed sample `softmax((ln π + g) / τ)`.
    GumbelSoftmax { temperature: f64 },
}

/// Result of [`categorical_st`]: the sampled index plus a differentiable
/// vector on the simplex (one-hot for the hard mode).
pub struct CategoricalSample<'t> {
    pub index: usize,
    pub value: Var<'t>,
}

/// Draws from the categorical distribution `probs`.
pub fn categorical_st<'t>(
    probs: Var<'t>,
    rng: &mut RngStream,
    mode: CategoricalMode,
) -> Result<CategoricalSample<'t>, DomainError> {
    let ps = probs.value();
    if ps.is_empty() {
        return Err(DomainError::Empty);
    }
    for (k, &p) in ps.iter().enumerate() {
        if p < 0.0 || !p.is_finite() {
            return Err(DomainError::Probability { index: k, value: p });
        }
    }
    let sum: f64 = ps.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(DomainError::NotNormalized { sum });
    }
    match mode {
        CategoricalMode::HardSt => {
            let u = rng.uniform();
            let index = inverse_cdf(&ps, u);
            let mut onehot = vec![0.0; ps.len()];
            onehot[index] = 1.0;
            Ok(CategoricalSample {
                index,
                value: probs.tape().straight_through(probs, onehot),
            })
        }
        CategoricalMode::GumbelSoftmax { temperature } => {
            if !(temperature > 0.0) {
                return Err(DomainError::Temperature(temperature));
            }
            let noise: Vec<f64> = (0..ps.len()).map(|_| rng.gumbel()).collect();
            gumbel_softmax_with_noise(probs, &noise, temperature)
        }
    }
}

/// Gumbel-softmax with caller-supplied noise, so the same noise can be
/// replayed at several temperatures.
pub fn gumbel_softmax_with_noise<'t>(
    probs: Var<'t>,
    noise: &[f64],
    temperature: f64,
) -> Result<CategoricalSample<'t>, DomainError> {
    if !(temperature > 0.0) {
        return Err(DomainError::Temperature(temperature));
    }
    let tape = probs.tape();
    // Zero-probability categories get -inf logits; keep them off the tape's
    // ln by flooring, they still vanish after exponentiation.
    let floored = probs.with_value(|v| v.iter().map(|&p| p.max(1e-300)).collect::<Vec<_>>());
    let safe = tape.straight_through(probs, floored);
    let logits = (safe.ln() + tape.constant(noise.to_vec())).scale(1.0 / temperature);
    let max = logits.with_value(|v| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    let e = logits.shift(-max).exp();
    let y = e / e.sum();
    let index = y.with_value(|v| {
        v.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| {
                if x > bv {
                    (i, x)
                } else {
                    (bi, bv)
                }
            })
            .0
    });
    Ok(CategoricalSample { index, value: y })
}

/// Smallest index whose cumulative probability exceeds `u`.
pub fn inverse_cdf(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (k, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    // Rounding left u above the final cumulative sum: take the last
    // category with nonzero mass.
    probs
        .iter()
        .rposition(|&p| p > 0.0)
        .unwrap_or(probs.len() - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Channel;
    use crate::tape::Tape;

    #[test]
    fn degenerate_bernoulli() {
        let tape = Tape::new();
        for seed in 0..50 {
            let rng = RngStream::new(seed, 0, 0, Channel::Behavior);
            assert_eq!(
                bernoulli_st(tape.leaf_scalar(1.0), &rng).unwrap().scalar(),
                1.0
            );
            assert_eq!(
                bernoulli_st(tape.leaf_scalar(0.0), &rng).unwrap().scalar(),
                0.0
            );
        }
    }

    #[test]
    fn bernoulli_rejects_out_of_range() {
        let tape = Tape::new();
        let rng = RngStream::new(0, 0, 0, Channel::Behavior);
        assert!(bernoulli_st(tape.leaf_scalar(1.0 + 1e-9), &rng).is_err());
        assert!(bernoulli_st(tape.leaf_scalar(-1e-9), &rng).is_err());
        assert!(bernoulli_st(tape.leaf_scalar(1.0 + 1e-13), &rng).is_ok());
    }

    #[test]
    fn affine_functional_gradient_is_exact() {
        let tape = Tape::new();
        for seed in 0..100 {
            let p = tape.leaf_scalar(0.5);
            let b = bernoulli_st(p, &RngStream::new(seed, 0, 0, Channel::Behavior)).unwrap();
            let f = b * 3.0 + 1.0;
            assert_eq!(tape.backward(f).unwrap().wrt_scalar(p).unwrap(), 3.0);
        }
    }

    #[test]
    fn categorical_point_mass() {
        let tape = Tape::new();
        for seed in 0..50 {
            let mut rng = RngStream::new(seed, 0, 0, Channel::Progression);
            let s = categorical_st(
                tape.leaf(vec![1.0, 0.0, 0.0]),
                &mut rng,
                CategoricalMode::HardSt,
            )
            .unwrap();
            assert_eq!(s.index, 0);
        }
    }

    #[test]
    fn categorical_fair_coin_frequency() {
        let tape = Tape::new();
        let probs = tape.leaf(vec![0.5, 0.5]);
        let m = 100_000;
        let zeros = (0..m)
            .filter(|&i| {
                let mut rng = RngStream::new(3, i, 0, Channel::Progression);
                categorical_st(probs, &mut rng, CategoricalMode::HardSt)
                    .unwrap()
                    .index
                    == 0
            })
            .count();
        let freq = zeros as f64 / m as f64;
        assert!((freq - 0.5).abs() <= 0.005, "freq {freq}");
    }

    #[test]
    fn categorical_domain_errors() {
        let tape = Tape::new();
        let mut rng = RngStream::new(0, 0, 0, Channel::Gumbel);
        assert!(matches!(
            categorical_st(
                tape.leaf(vec![1.2, -0.2]),
                &mut rng,
                CategoricalMode::HardSt
            ),
            Err(DomainError::Probability { index: 1, .. })
        ));
        assert!(matches!(
            categorical_st(tape.leaf(vec![0.5, 0.4]), &mut rng, CategoricalMode::HardSt),
            Err(DomainError::NotNormalized { .. })
        ));
        assert!(matches!(
            categorical_st(
                tape.leaf(vec![0.5, 0.5]),
                &mut rng,
                CategoricalMode::GumbelSoftmax { temperature: 0.0 }
            ),
            Err(DomainError::Temperature(_))
        ));
    }

    #[test]
    fn gumbel_softmax_on_simplex() {
        let tape = Tape::new();
        for seed in 0..200 {
            let mut rng = RngStream::new(seed, 0, 0, Channel::Gumbel);
            let probs = tape.leaf(vec![0.2, 0.3, 0.5]);
            let tau = 0.05 + (seed as f64) * 0.01;
            let s = categorical_st(
                probs,
                &mut rng,
                CategoricalMode::GumbelSoftmax { temperature: tau },
            )
            .unwrap();
            let v = s.value.value();
            assert!((v.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            assert!(v.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }

    #[test]
    fn gumbel_softmax_gradient_flows() {
        let tape = Tape::new();
        let probs = tape.leaf(vec![0.25, 0.75]);
        let s = gumbel_softmax_with_noise(probs, &[0.1, -0.2], 0.5).unwrap();
        let g = tape.backward(s.value.index(0)).unwrap().wrt(probs).unwrap();
        assert!(g.iter().all(|x| x.is_finite()));
        assert!(g[0] > 0.0 && g[1] < 0.0);
    }
}
