//! Smooth stand-ins for comparisons and boolean logic.

use crate::stochastic::{DomainError, PROB_TOL};
use crate::tape::Var;

pub const DEFAULT_TEMPERATURE: f64 = 0.1;

/// Soft `x < y`: `σ((y − x) / τ)`.
pub fn soft_compare<'t>(x: Var<'t>, y: Var<'t>, temperature: f64) -> Result<Var<'t>, DomainError> {
    if !(temperature > 0.0) {
        return Err(DomainError::Temperature(temperature));
    }
    Ok(((y - x) * (1.0 / temperature)).sigmoid())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Logical {
    And,
    Or,
}

/// Product t-norm (`and`) and its dual (`or`) on truth values in `[0, 1]`.
pub fn soft_logical<'t>(a: Var<'t>, b: Var<'t>, kind: Logical) -> Result<Var<'t>, DomainError> {
    for v in [a, b] {
        v.with_value(|xs| {
            xs.iter().enumerate().try_for_each(|(k, &x)| {
                if (-PROB_TOL..=1.0 + PROB_TOL).contains(&x) {
                    Ok(())
                } else {
                    Err(DomainError::Probability { index: k, value: x })
                }
            })
        })?;
    }
    Ok(match kind {
        Logical::And => a * b,
        Logical::Or => a + b - a * b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    #[test]
    fn compare_examples() {
        let tape = Tape::new();
        let x = tape.leaf_scalar(0.7);
        assert_eq!(soft_compare(x, x, 0.1).unwrap().scalar(), 0.5);
        let (a, b) = (tape.leaf_scalar(0.0), tape.leaf_scalar(1.0));
        assert!((soft_compare(a, b, 0.1).unwrap().scalar() - 0.9999546).abs() < 1e-7);
        // age 60 is not below 59 in the hard limit
        let (age, limit) = (tape.leaf_scalar(60.0), tape.leaf_scalar(59.0));
        assert!(soft_compare(age, limit, 1e-3).unwrap().scalar() < 1e-300);
        assert!(soft_compare(age, limit, 0.0).is_err());
    }

    #[test]
    fn compare_gradient_signs() {
        let tape = Tape::new();
        let (x, y) = (tape.leaf_scalar(0.2), tape.leaf_scalar(0.4));
        let g = tape.backward(soft_compare(x, y, 0.1).unwrap()).unwrap();
        assert!(g.wrt_scalar(x).unwrap() < 0.0);
        assert!(g.wrt_scalar(y).unwrap() > 0.0);
    }

    #[test]
    fn logical_examples() {
        let tape = Tape::new();
        let one = tape.leaf_scalar(1.0);
        let zero = tape.leaf_scalar(0.0);
        assert_eq!(soft_logical(one, one, Logical::And).unwrap().scalar(), 1.0);
        assert_eq!(soft_logical(zero, zero, Logical::Or).unwrap().scalar(), 0.0);
        let a = tape.leaf_scalar(0.3);
        let b = tape.leaf_scalar(0.5);
        assert!((soft_logical(a, b, Logical::And).unwrap().scalar() - 0.15).abs() < 1e-15);
        assert!((soft_logical(a, b, Logical::Or).unwrap().scalar() - 0.65).abs() < 1e-15);
        assert!(soft_logical(tape.leaf_scalar(1.5), b, Logical::And).is_err());
    }
}
