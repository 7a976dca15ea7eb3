use serde::{Deserialize, Serialize};

use super::{CalibError, CovariateSeries};
use crate::optim::{Param, ParamSet};
use crate::rng::{Channel, RngStream};
use crate::tape::{Tape, Var};

/// Names of the network weight blocks, in binding order.
pub const WEIGHTS: [&str; 6] = ["w_ih", "w_hh", "b_ih", "b_hh", "head_w", "head_b"];

/// Closed interval an output is squashed into.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lo: f64,
    pub hi: f64,
}

impl Bounds {
    pub fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    fn squash<'t>(&self, x: Var<'t>) -> Var<'t> {
        x.sigmoid().scale(self.hi - self.lo).shift(self.lo)
    }
}

/// Single-layer GRU over the covariates with a linear head producing the
/// contact-rate driver `R0_t` and the claims rate `IUR_t`.
///
/// Gates follow the usual layout: rows `[0, h)` of the stacked matrices
/// are the reset gate, `[h, 2h)` the update gate, `[2h, 3h)` the candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibNet {
    pub input_dim: usize,
    pub hidden: usize,
    pub params: ParamSet,
    pub r0_bounds: Bounds,
    pub iur_bounds: Bounds,
}

/// Network weights placed on a tape.
#[derive(Debug, Clone, Copy)]
pub struct BoundNet<'t> {
    pub w_ih: Var<'t>,
    pub w_hh: Var<'t>,
    pub b_ih: Var<'t>,
    pub b_hh: Var<'t>,
    pub head_w: Var<'t>,
    pub head_b: Var<'t>,
}

/// Structural series predicted by the network.
#[derive(Debug, Clone)]
pub struct StructuralSeries<'t> {
    pub r0: Vec<Var<'t>>,
    pub iur: Vec<Var<'t>>,
}

impl CalibNet {
    /// All-zero weights.
    pub fn zeros(input_dim: usize, hidden: usize, r0_bounds: Bounds, iur_bounds: Bounds) -> Self {
        let (d, h) = (input_dim, hidden);
        let shapes = [3 * h * d, 3 * h * h, 3 * h, 3 * h, 2 * h, 2];
        let params = ParamSet::new(
            WEIGHTS
                .iter()
                .zip(shapes)
                .map(|(n, k)| Param::unbounded(*n, vec![0.0; k]))
                .collect(),
        )
        .expect("distinct names");
        Self {
            input_dim,
            hidden,
            params,
            r0_bounds,
            iur_bounds,
        }
    }

    /// Recurrent weights uniform in `±1/√h`; head weights a tenth of that.
    pub fn random(
        input_dim: usize,
        hidden: usize,
        r0_bounds: Bounds,
        iur_bounds: Bounds,
        seed: u64,
    ) -> Self {
        let mut net = Self::zeros(input_dim, hidden, r0_bounds, iur_bounds);
        let k = 1.0 / (hidden as f64).sqrt();
        for (b, name) in WEIGHTS.iter().enumerate() {
            let scale = if name.starts_with("head") { 0.1 * k } else { k };
            let rng = RngStream::keyed(seed, 0, b as u64, Channel::Synthesis);
            let p = net.params.get_mut(name).expect("weight block");
            for (i, v) in p.value.iter_mut().enumerate() {
                *v = scale * (2.0 * rng.uniform_at(i as u64) - 1.0);
            }
        }
        net
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundNet<'t> {
        let v = self.params.bind(tape);
        BoundNet {
            w_ih: v[0],
            w_hh: v[1],
            b_ih: v[2],
            b_hh: v[3],
            head_w: v[4],
            head_b: v[5],
        }
    }

    pub fn vars<'t>(bound: &BoundNet<'t>) -> [Var<'t>; 6] {
        [
            bound.w_ih,
            bound.w_hh,
            bound.b_ih,
            bound.b_hh,
            bound.head_w,
            bound.head_b,
        ]
    }

    fn check(&self, cov: &CovariateSeries) -> Result<(), CalibError> {
        if cov.dim != self.input_dim {
            return Err(CalibError::Dimension {
                expected: self.input_dim,
                got: cov.dim,
            });
        }
        Ok(())
    }

    /// Hidden state after each step, starting from zero.
    pub fn gru_forward<'t>(
        &self,
        tape: &'t Tape,
        w: &BoundNet<'t>,
        cov: &CovariateSeries,
    ) -> Result<Vec<Var<'t>>, CalibError> {
        self.check(cov)?;
        let (d, h) = (self.input_dim, self.hidden);
        let mut state = tape.zeros(h);
        let mut out = Vec::with_capacity(cov.steps);
        for t in 0..cov.steps {
            let x = tape.constant(cov.row(t).to_vec());
            let gi = w.w_ih.matvec(x, 3 * h, d) + w.b_ih;
            let gh = w.w_hh.matvec(state, 3 * h, h) + w.b_hh;
            let r = (gi.slice(0, h) + gh.slice(0, h)).sigmoid();
            let z = (gi.slice(h, h) + gh.slice(h, h)).sigmoid();
            let n = (gi.slice(2 * h, h) + r * gh.slice(2 * h, h)).tanh();
            state = n + z * (state - n);
            out.push(state);
        }
        Ok(out)
    }

    /// Bounded `R0_t` for the first `steps` steps and `IUR` for each 30-step
    /// month, read at the month's first step.
    pub fn predict_structural<'t>(
        &self,
        tape: &'t Tape,
        w: &BoundNet<'t>,
        cov: &CovariateSeries,
        steps: usize,
    ) -> Result<StructuralSeries<'t>, CalibError> {
        if cov.steps < steps {
            return Err(CalibError::Length {
                what: "covariate steps",
                expected: steps,
                got: cov.steps,
            });
        }
        let hidden = self.gru_forward(tape, w, &cov.truncated(steps))?;
        let heads: Vec<Var<'t>> = hidden
            .iter()
            .map(|&hs| w.head_w.matvec(hs, 2, self.hidden) + w.head_b)
            .collect();
        let r0 = heads
            .iter()
            .map(|o| self.r0_bounds.squash(o.index(0)))
            .collect();
        let iur = (0..steps.div_ceil(30))
            .map(|m| self.iur_bounds.squash(heads[30 * m].index(1)))
            .collect();
        Ok(StructuralSeries { r0, iur })
    }

    /// Plain values of [`CalibNet::predict_structural`].
    pub fn predict_values(
        &self,
        cov: &CovariateSeries,
        steps: usize,
    ) -> Result<(Vec<f64>, Vec<f64>), CalibError> {
        let tape = Tape::new();
        let w = self.bind(&tape);
        let s = self.predict_structural(&tape, &w, cov, steps)?;
        Ok((
            s.r0.iter().map(|v| v.scalar()).collect(),
            s.iur.iter().map(|v| v.scalar()).collect(),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    fn bounds() -> (Bounds, Bounds) {
        (Bounds::new(2.5, 8.0), Bounds::new(0.0, 1.0))
    }

    fn cov(steps: usize, dim: usize, seed: u64) -> CovariateSeries {
        let rng = RngStream::keyed(seed, 1, 2, Channel::Synthesis);
        let values = (0..steps * dim)
            .map(|i| 2.0 * rng.uniform_at(i as u64) - 1.0)
            .collect();
        CovariateSeries::new(
            values,
            steps,
            dim,
            (0..dim).map(|k| format!("c{k}")).collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_net_zero_hidden() {
        let (r, i) = bounds();
        let net = CalibNet::zeros(3, 4, r, i);
        let c = CovariateSeries::new(
            vec![0.0; 15],
            5,
            3,
            vec!["a".into(), "b".into(), "c".into()],
        )
        .unwrap();
        let tape = Tape::new();
        let w = net.bind(&tape);
        for hs in net.gru_forward(&tape, &w, &c).unwrap() {
            assert_eq!(hs.value(), vec![0.0; 4]);
        }
        let (r0, iur) = net.predict_values(&c, 5).unwrap();
        assert!(r0.iter().all(|&x| x == 5.25));
        assert_eq!(iur, vec![0.5]);
    }

    #[test]
    fn one_by_one_cell_by_hand() {
        let (rb, ib) = bounds();
        let mut net = CalibNet::zeros(1, 1, rb, ib);
        let set = |net: &mut CalibNet, name: &str, v: Vec<f64>| {
            net.params.get_mut(name).unwrap().value = v
        };
        set(&mut net, "w_ih", vec![0.5, -0.3, 0.8]);
        set(&mut net, "w_hh", vec![0.2, 0.4, -0.6]);
        set(&mut net, "b_ih", vec![0.1, 0.0, -0.2]);
        set(&mut net, "b_hh", vec![-0.1, 0.3, 0.05]);
        let c = CovariateSeries::new(vec![0.7, -1.2], 2, 1, vec!["x".into()]).unwrap();
        let tape = Tape::new();
        let w = net.bind(&tape);
        let hs = net.gru_forward(&tape, &w, &c).unwrap();
        let mut h = 0.0;
        for (t, x) in [0.7, -1.2].into_iter().enumerate() {
            let r = sig(0.5 * x + 0.1 + 0.2 * h - 0.1);
            let z = sig(-0.3 * x + 0.0 + 0.4 * h + 0.3);
            let n = (0.8 * x - 0.2 + r * (-0.6 * h + 0.05)).tanh();
            h = (1.0 - z) * n + z * h;
            assert!((hs[t].scalar() - h).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (rb, ib) = bounds();
        let net = CalibNet::random(2, 3, rb, ib, 9);
        let c = cov(4, 2, 3);
        let f = |net: &CalibNet| -> f64 {
            let tape = Tape::new();
            let w = net.bind(&tape);
            let s = net.predict_structural(&tape, &w, &c, 4).unwrap();
            let total = s.r0.iter().copied().reduce(|a, b| a + b * b).unwrap() + s.iur[0];
            total.scalar()
        };
        let tape = Tape::new();
        let w = net.bind(&tape);
        let s = net.predict_structural(&tape, &w, &c, 4).unwrap();
        let total = s.r0.iter().copied().reduce(|a, b| a + b * b).unwrap() + s.iur[0];
        let g = tape.backward(total).unwrap();
        let h = 1e-5;
        for (b, name) in WEIGHTS.iter().enumerate() {
            let grad = g.wrt(CalibNet::vars(&w)[b]).unwrap();
            for i in 0..grad.len() {
                let mut up = net.clone();
                up.params.get_mut(name).unwrap().value[i] += h;
                let mut dn = net.clone();
                dn.params.get_mut(name).unwrap().value[i] -= h;
                let fd = (f(&up) - f(&dn)) / (2.0 * h);
                let err = (grad[i] - fd).abs() / fd.abs().max(1.0);
                assert!(err <= 1e-7, "{name}[{i}]: {} vs {fd}", grad[i]);
            }
        }
    }

    #[test]
    fn large_bias_saturates_upper_bound() {
        let (rb, ib) = bounds();
        let mut net = CalibNet::zeros(1, 2, rb, ib);
        net.params.get_mut("head_b").unwrap().value = vec![40.0, 40.0];
        let (r0, iur) = net.predict_values(&cov(3, 1, 0), 3).unwrap();
        assert!(r0.iter().all(|&x| (x - 8.0).abs() < 1e-12));
        assert!((iur[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn outputs_stay_in_bounds() {
        let (rb, ib) = bounds();
        let c = cov(31, 2, 5);
        for seed in 0..1000 {
            let mut net = CalibNet::random(2, 3, rb, ib, seed);
            // Inflate weights so the squashing saturates for some nets.
            for name in WEIGHTS {
                let scale = 1.0 + (seed % 50) as f64;
                net.params
                    .get_mut(name)
                    .unwrap()
                    .value
                    .iter_mut()
                    .for_each(|v| *v *= scale);
            }
            let (r0, iur) = net.predict_values(&c, 31).unwrap();
            assert!(r0.iter().all(|&x| (2.5..=8.0).contains(&x)));
            assert!(iur.iter().all(|&x| (0.0..=1.0).contains(&x)));
            assert_eq!(iur.len(), 2);
        }
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let (rb, ib) = bounds();
        let net = CalibNet::zeros(2, 3, rb, ib);
        assert!(matches!(
            net.predict_values(&cov(3, 1, 0), 3),
            Err(CalibError::Dimension {
                expected: 2,
                got: 1
            })
        ));
    }
}
