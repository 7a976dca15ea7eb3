//! Monthly labor dynamics linking willingness to work with unemployment.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::behavior::{sample_bernoulli, Action};
use crate::tape::Var;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LaborError {
    #[error("month {month} outside the unemployment claims series of length {len}")]
    MonthOutOfRange { month: usize, len: usize },
    #[error("willingness vector is empty")]
    Empty,
}

/// Labor section of the run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LaborConfig {
    pub gamma0: f64,
    pub gamma1: f64,
    /// Insured unemployment rate per month.
    pub iur: Vec<f64>,
}

impl Default for LaborConfig {
    fn default() -> Self {
        Self {
            gamma0: -0.4,
            gamma1: 1.0,
            iur: vec![0.5; 24],
        }
    }
}

/// Draws each agent's willingness to work (1 = willing).
pub fn willingness_step(p: &[f64], agent_ids: &[u64], seed: u64, step: u32) -> Vec<f64> {
    sample_bernoulli(p, agent_ids, seed, step, Action::Work)
        .into_iter()
        .map(|b| b as u8 as f64)
        .collect()
}

/// `γ0 · mean(W) + γ1 · C_month`, clamped to `[0, 1]`.
pub fn unemployment_rate(
    willingness: &[f64],
    gamma0: f64,
    gamma1: f64,
    iur: &[f64],
    month: usize,
) -> Result<f64, LaborError> {
    if willingness.is_empty() {
        return Err(LaborError::Empty);
    }
    let c = *iur.get(month).ok_or(LaborError::MonthOutOfRange {
        month,
        len: iur.len(),
    })?;
    let w = willingness.iter().sum::<f64>() / willingness.len() as f64;
    Ok((gamma0 * w + gamma1 * c).clamp(0.0, 1.0))
}

/// Taped form of [`unemployment_rate`]. `mean_willingness` and `iur` are
/// scalar nodes. The clamp passes gradients straight through so the
/// structural parameters keep receiving signal at the bounds.
pub fn unemployment_rate_taped<'t>(
    mean_willingness: Var<'t>,
    gamma0: Var<'t>,
    gamma1: Var<'t>,
    iur: Var<'t>,
) -> Var<'t> {
    (gamma0 * mean_willingness + gamma1 * iur).clamp_st(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    #[test]
    fn closed_forms() {
        assert!(
            (unemployment_rate(&[1.0, 0.0], 0.0, 1.0, &[0.05], 0).unwrap() - 0.05).abs() < 1e-15
        );
        let w = [1.0, 1.0, 1.0, 1.0, 0.0];
        assert!((unemployment_rate(&w, -0.5, 1.0, &[0.5], 0).unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(unemployment_rate(&w, 0.0, 0.0, &[0.5], 0).unwrap(), 0.0);
        assert_eq!(
            unemployment_rate(&w, 0.0, 0.0, &[0.5], 1),
            Err(LaborError::MonthOutOfRange { month: 1, len: 1 })
        );
    }

    #[test]
    fn clamped_to_unit_interval() {
        assert_eq!(
            unemployment_rate(&[1.0], -1.0, 0.0, &[0.0], 0).unwrap(),
            0.0
        );
        assert_eq!(unemployment_rate(&[0.0], 0.0, 2.0, &[0.9], 0).unwrap(), 1.0);
    }

    #[test]
    fn monotone_in_willingness_for_negative_gamma0() {
        for g0 in [-1.0, -0.5, -0.1] {
            let mut prev = f64::INFINITY;
            for k in 0..=10 {
                let w: Vec<f64> = (0..10).map(|i| (i < k) as u8 as f64).collect();
                let mu = unemployment_rate(&w, g0, 1.0, &[0.6], 0).unwrap();
                assert!(mu <= prev);
                prev = mu;
            }
        }
    }

    #[test]
    fn gradient_wrt_gamma0_is_mean_willingness() {
        let tape = Tape::new();
        let w = tape.constant(vec![1.0, 0.0, 1.0, 1.0]).mean();
        let g0 = tape.leaf_scalar(-0.5);
        let g1 = tape.leaf_scalar(1.0);
        let c = tape.leaf_scalar(0.3);
        let mu = unemployment_rate_taped(w, g0, g1, c);
        let g = tape.backward(mu).unwrap();
        assert_eq!(g.wrt_scalar(g0).unwrap(), 0.75);
        assert_eq!(g.wrt_scalar(g1).unwrap(), 0.3);
        assert_eq!(g.wrt_scalar(c).unwrap(), 1.0);
    }

    #[test]
    fn heuristic_participation() {
        let n = 100_000;
        let ids: Vec<u64> = (0..n).collect();
        let w = willingness_step(&vec![0.6; n as usize], &ids, 4, 0);
        let m = w.iter().sum::<f64>() / n as f64;
        assert!((m - 0.6).abs() <= 0.0046, "{m}");
        assert!(willingness_step(&[1.0; 10], &ids[..10], 4, 0)
            .iter()
            .all(|&x| x == 1.0));
    }
}
