use log::warn;

use super::{JointTable, MarginalTable, PopgenError};

/// Outcome of [`ipf_fit`].
#[derive(Debug, Clone)]
pub struct IpfFit {
    pub table: JointTable,
    /// Completed sweeps (one sweep rescales every axis once).
    pub sweeps: usize,
    /// Residual before the first sweep and after each sweep.
    pub residuals: Vec<f64>,
    pub warnings: Vec<String>,
}

impl IpfFit {
    pub fn residual(&self) -> f64 {
        *self.residuals.last().unwrap_or(&0.0)
    }
}

/// Iterative proportional fitting of `seed` to the given axis marginals.
///
/// The residual is the largest absolute deviation between fitted and target
/// marginals, both normalized by the target total. Cells that are zero in the
/// seed stay zero. Marginal totals that disagree by more than `1e-6`
/// relative are rescaled to their mean total.
pub fn ipf_fit(
    seed: &JointTable,
    marginals: &[MarginalTable],
    tol: f64,
    max_iter: usize,
) -> Result<IpfFit, PopgenError> {
    let mut warnings = Vec::new();
    // Align each table axis with its marginal, in table axis order.
    let mut targets: Vec<Vec<f64>> = Vec::with_capacity(seed.axes.len());
    for (a, axis) in seed.axes.iter().enumerate() {
        let m = marginals
            .iter()
            .find(|m| &m.axis == axis)
            .ok_or_else(|| PopgenError::UnknownAxis(axis.clone()))?;
        m.validate()?;
        let mut t = vec![0.0; seed.bins[a].len()];
        if m.bins.len() != t.len() {
            return Err(PopgenError::BadMarginal {
                axis: axis.clone(),
                reason: format!("{} bins, table has {}", m.bins.len(), t.len()),
            });
        }
        for (bin, &c) in m.bins.iter().zip(&m.counts) {
            let k = seed.bins[a].iter().position(|b| b == bin).ok_or_else(|| {
                PopgenError::BadMarginal {
                    axis: axis.clone(),
                    reason: format!("bin {bin} not in table"),
                }
            })?;
            t[k] = c;
        }
        targets.push(t);
    }
    if let Some(m) = marginals
        .iter()
        .find(|m| seed.axis_index(&m.axis).is_none())
    {
        return Err(PopgenError::UnknownAxis(m.axis.clone()));
    }

    let totals: Vec<f64> = targets.iter().map(|t| t.iter().sum()).collect();
    let mean_total = totals.iter().sum::<f64>() / totals.len().max(1) as f64;
    if totals
        .iter()
        .any(|&t| ((t - mean_total) / mean_total).abs() > 1e-6)
    {
        let msg = format!("marginal totals {totals:?} disagree; rescaled to {mean_total}");
        warn!("{msg}");
        warnings.push(msg);
        for (t, &tot) in targets.iter_mut().zip(&totals) {
            t.iter_mut().for_each(|c| *c *= mean_total / tot);
        }
    }

    if seed.total() <= 0.0 {
        return Err(PopgenError::EmptyJoint);
    }
    for (a, t) in targets.iter().enumerate() {
        let have = seed.marginal(a);
        for (k, (&tk, &hk)) in t.iter().zip(&have).enumerate() {
            if tk > 0.0 && hk <= 0.0 {
                return Err(PopgenError::Infeasible {
                    axis: seed.axes[a].clone(),
                    bin: seed.bins[a][k].clone(),
                    target: tk,
                });
            }
        }
    }

    let residual = |t: &JointTable| -> f64 {
        let mut r: f64 = 0.0;
        for (a, target) in targets.iter().enumerate() {
            for (have, want) in t.marginal(a).iter().zip(target) {
                r = r.max(((have - want) / mean_total).abs());
            }
        }
        r
    };

    let mut table = seed.clone();
    let shape = table.shape();
    let mut residuals = vec![residual(&table)];
    let mut sweeps = 0;
    while residuals.last().copied().unwrap_or(0.0) > tol {
        if sweeps >= max_iter {
            return Err(PopgenError::NotConverged {
                iterations: sweeps,
                residual: residuals[sweeps],
            });
        }
        for (a, target) in targets.iter().enumerate() {
            let have = table.marginal(a);
            let factor: Vec<f64> = have
                .iter()
                .zip(target)
                .map(|(&h, &w)| if h > 0.0 { w / h } else { 0.0 })
                .collect();
            let inner: usize = shape[a + 1..].iter().product();
            let n = shape[a];
            for (k, c) in table.cells.iter_mut().enumerate() {
                *c *= factor[(k / inner) % n];
            }
        }
        sweeps += 1;
        residuals.push(residual(&table));
    }
    Ok(IpfFit {
        table,
        sweeps,
        residuals,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(axis: &str, counts: &[f64]) -> MarginalTable {
        let bins = (0..counts.len()).map(|k| format!("{axis}{k}")).collect();
        MarginalTable::new(axis, bins, counts.to_vec()).unwrap()
    }

    #[test]
    fn two_by_two_closed_form() {
        let margs = [m("r", &[3.0, 1.0]), m("c", &[2.0, 2.0])];
        let fit = ipf_fit(&JointTable::uniform_seed(&margs), &margs, 1e-12, 100).unwrap();
        let want = [1.5, 1.5, 0.5, 0.5];
        for (a, b) in fit.table.cells.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(fit.sweeps, 1);
    }

    #[test]
    fn fixed_point_is_untouched() {
        let margs = [m("r", &[3.0, 1.0]), m("c", &[2.0, 2.0])];
        let seed = JointTable::new(
            vec!["r".into(), "c".into()],
            vec![margs[0].bins.clone(), margs[1].bins.clone()],
            vec![1.5, 1.5, 0.5, 0.5],
        )
        .unwrap();
        let fit = ipf_fit(&seed, &margs, 1e-12, 100).unwrap();
        assert_eq!(fit.sweeps, 0);
        assert_eq!(fit.residuals, vec![0.0]);
        assert_eq!(fit.table, seed);
    }

    #[test]
    fn zero_cells_stay_zero() {
        let margs = [m("r", &[3.0, 1.0]), m("c", &[2.0, 2.0])];
        let mut seed = JointTable::uniform_seed(&margs);
        seed.cells[3] = 0.0;
        let fit = ipf_fit(&seed, &margs, 1e-10, 10_000).unwrap();
        assert_eq!(fit.table.cells[3], 0.0);
        let want = [1.0, 2.0, 1.0, 0.0];
        for (a, b) in fit.table.cells.iter().zip(want) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn infeasible_zero_pattern() {
        let margs = [m("r", &[3.0, 1.0]), m("c", &[2.0, 2.0])];
        let mut seed = JointTable::uniform_seed(&margs);
        seed.cells[2] = 0.0;
        seed.cells[3] = 0.0;
        assert!(matches!(
            ipf_fit(&seed, &margs, 1e-10, 100),
            Err(PopgenError::Infeasible { .. })
        ));
    }

    #[test]
    fn structurally_unreachable_target_does_not_converge() {
        // Diagonal seed forces row marginals to equal column marginals.
        let margs = [m("r", &[3.0, 1.0]), m("c", &[2.0, 2.0])];
        let mut seed = JointTable::uniform_seed(&margs);
        seed.cells[1] = 0.0;
        seed.cells[2] = 0.0;
        match ipf_fit(&seed, &margs, 1e-10, 50) {
            Err(PopgenError::NotConverged {
                iterations,
                residual,
            }) => {
                assert_eq!(iterations, 50);
                assert!(residual > 0.1);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn inconsistent_totals_are_rescaled() {
        let margs = [m("r", &[3.0, 1.0]), m("c", &[4.0, 4.0])];
        let fit = ipf_fit(&JointTable::uniform_seed(&margs), &margs, 1e-12, 100).unwrap();
        assert_eq!(fit.warnings.len(), 1);
        assert!((fit.table.total() - 6.0).abs() < 1e-9);
    }

    #[test]
    fn unknown_axis_rejected() {
        let margs = [m("r", &[3.0, 1.0])];
        let seed = JointTable::uniform_seed(&[m("q", &[1.0, 1.0])]);
        assert!(matches!(
            ipf_fit(&seed, &margs, 1e-9, 10),
            Err(PopgenError::UnknownAxis(_))
        ));
    }
}
