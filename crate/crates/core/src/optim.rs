//! Bounded parameters and the Adam optimizer.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tape::{Gradients, Tape, TapeError, Var};

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient for parameter {name}[{index}]: {value}")]
    NonFiniteGradient {
        name: String,
        index: usize,
        value: f64,
    },
    #[error("optimizer state has {state} entries but there are {params} parameters")]
    StateMismatch { state: usize, params: usize },
    #[error("duplicate parameter name {0}")]
    DuplicateName(String),
    #[error("parameter {name} value {value} outside bounds [{lo}, {hi}]")]
    OutOfBounds {
        name: String,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error(transparent)]
    Tape(#[from] TapeError),
}

/// A named block of trainable values sharing one closed interval of bounds.
/// Scalars are blocks of length one.
/// Infinite bounds are written as `null`. The gradient is scratch space
/// and takes no part in equality or serialization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Vec<f64>,
    #[serde(with = "lower")]
    pub lo: f64,
    #[serde(with = "upper")]
    pub hi: f64,
    #[serde(default, skip_serializing)]
    pub grad: Vec<f64>,
}

impl PartialEq for Param {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
            && self.value == other.value
            && self.lo == other.lo
            && self.hi == other.hi
    }
}

macro_rules! bound_serde {
    ($m:ident, $inf:expr) => {
        mod $m {
            use serde::{Deserialize, Deserializer, Serializer};

            pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
                if v.is_finite() {
                    s.serialize_some(v)
                } else {
                    s.serialize_none()
                }
            }

            pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
                Ok(Option::<f64>::deserialize(d)?.unwrap_or($inf))
            }
        }
    };
}

bound_serde!(lower, f64::NEG_INFINITY);
bound_serde!(upper, f64::INFINITY);

impl Param {
    pub fn new(
        name: impl Into<String>,
        value: Vec<f64>,
        lo: f64,
        hi: f64,
    ) -> Result<Self, OptimError> {
        let name = name.into();
        if let Some(&v) = value.iter().find(|v| !(**v >= lo && **v <= hi)) {
            return Err(OptimError::OutOfBounds {
                name,
                value: v,
                lo,
                hi,
            });
        }
        let grad = vec![0.0; value.len()];
        Ok(Self {
            name,
            value,
            lo,
            hi,
            grad,
        })
    }

    pub fn scalar(
        name: impl Into<String>,
        value: f64,
        lo: f64,
        hi: f64,
    ) -> Result<Self, OptimError> {
        Self::new(name, vec![value], lo, hi)
    }

    pub fn unbounded(name: impl Into<String>, value: Vec<f64>) -> Self {
        let grad = vec![0.0; value.len()];
        Self {
            name: name.into(),
            value,
            lo: f64::NEG_INFINITY,
            hi: f64::INFINITY,
            grad,
        }
    }
}

/// Ordered collection of uniquely named parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new(params: Vec<Param>) -> Result<Self, OptimError> {
        let mut seen = HashSet::new();
        for p in &params {
            if !seen.insert(p.name.clone()) {
                return Err(OptimError::DuplicateName(p.name.clone()));
            }
        }
        Ok(Self { params })
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries.
    pub fn size(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Places every parameter on `tape` as a leaf, in set order.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.value.clone()))
            .collect()
    }

    /// Copies gradients out of `grads` into each parameter's `grad`.
    pub fn absorb(&mut self, grads: &Gradients, bound: &[Var<'_>]) -> Result<(), OptimError> {
        for (p, v) in self.params.iter_mut().zip(bound) {
            p.grad = grads.wrt(*v)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }
}

/// First and second moment estimates for every scalar entry of a
/// [`ParamSet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn for_params(params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One bias-corrected Adam update using the `grad` stored on each
/// parameter, followed by clamping into bounds.
pub fn adam_step(params: &mut ParamSet, state: &mut AdamState, lr: f64) -> Result<(), OptimError> {
    if state.m.len() != params.len() {
        return Err(OptimError::StateMismatch {
            state: state.m.len(),
            params: params.len(),
        });
    }
    for (p, m) in params.iter().zip(&state.m) {
        if m.len() != p.value.len() || p.grad.len() != p.value.len() {
            return Err(OptimError::StateMismatch {
                state: m.len(),
                params: p.value.len(),
            });
        }
        if let Some((index, &value)) = p.grad.iter().enumerate().find(|(_, g)| !g.is_finite()) {
            return Err(OptimError::NonFiniteGradient {
                name: p.name.clone(),
                index,
                value,
            });
        }
    }
    state.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for (k, p) in params.params.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for i in 0..p.value.len() {
            let g = p.grad[i];
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p.value[i] = (p.value[i] - lr * mhat / (vhat.sqrt() + ADAM_EPS)).clamp(p.lo, p.hi);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64, lo: f64, hi: f64) -> ParamSet {
        ParamSet::new(vec![Param::scalar("x", v, lo, hi).unwrap()]).unwrap()
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut ps = single(0.3, -1.0, 1.0);
        let mut st = AdamState::for_params(&ps);
        for _ in 0..10 {
            adam_step(&mut ps, &mut st, 0.1).unwrap();
        }
        assert_eq!(ps.get("x").unwrap().value, vec![0.3]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut ps = single(0.0, -1.0, 1.0);
        ps.get_mut("x").unwrap().grad = vec![1.0];
        let mut st = AdamState::for_params(&ps);
        adam_step(&mut ps, &mut st, 1e-4).unwrap();
        let x = ps.get("x").unwrap().value[0];
        assert!((x + 1e-4).abs() < 1e-11, "{x}");
    }

    #[test]
    fn clamps_at_lower_bound() {
        let mut ps = single(0.0, 0.0, 1.0);
        let mut st = AdamState::for_params(&ps);
        for _ in 0..5 {
            ps.get_mut("x").unwrap().grad = vec![2.0];
            adam_step(&mut ps, &mut st, 0.5).unwrap();
            assert_eq!(ps.get("x").unwrap().value, vec![0.0]);
        }
    }

    #[test]
    fn nan_gradient_aborts() {
        let mut ps = single(0.0, -1.0, 1.0);
        ps.get_mut("x").unwrap().grad = vec![f64::NAN];
        let mut st = AdamState::for_params(&ps);
        assert!(matches!(
            adam_step(&mut ps, &mut st, 0.1),
            Err(OptimError::NonFiniteGradient { .. })
        ));
        assert_eq!(st.t, 0);
    }

    #[test]
    fn construction_checks() {
        assert!(Param::scalar("a", 2.0, 0.0, 1.0).is_err());
        let a = Param::scalar("a", 0.5, 0.0, 1.0).unwrap();
        assert!(ParamSet::new(vec![a.clone(), a]).is_err());
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut ps = single(3.0, -10.0, 10.0);
        let mut st = AdamState::for_params(&ps);
        for _ in 0..2000 {
            let mut tape = Tape::new();
            let bound = ps.bind(&tape);
            let f = (bound[0] - 1.0).square().sum();
            let g = tape.backward(f).unwrap();
            ps.absorb(&g, &bound).unwrap();
            drop(bound);
            tape.reset();
            adam_step(&mut ps, &mut st, 0.05).unwrap();
        }
        assert!((ps.get("x").unwrap().value[0] - 1.0).abs() < 1e-3);
    }
}
