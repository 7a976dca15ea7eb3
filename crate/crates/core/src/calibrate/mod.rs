//! Gradient-based calibration: a recurrent network maps covariates to a
//! daily `R0` series and a monthly claims rate, the simulator turns those
//! into cases and unemployment, and Adam fits the network and the labor
//! coefficients to observed series.

mod data;
mod gru;

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use data::{synthetic_covariates, CovariateSeries, ObservedData};
pub use gru::{BoundNet, Bounds, CalibNet, StructuralSeries, WEIGHTS};

use crate::behavior::ProviderHandle;
use crate::engine::{run_taped, EngineError, ExecutionMode, SimulationConfig, Structural, World};
use crate::epi::beta_from_r0;
use crate::optim::{adam_step, AdamState, OptimError, Param, ParamSet};
use crate::rng::{Channel, RngStream};
use crate::tape::{Tape, Var};

#[derive(Debug, Error)]
pub enum CalibError {
    #[error("covariate width {got} does not match network input {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("{what}: expected length {expected}, got {got}")]
    Length {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("data: {0}")]
    Data(String),
    #[error(
        "non-finite loss at epoch {epoch} (cases {cases_mse}, unemployment {unemployment_mse})"
    )]
    NonFiniteLoss {
        epoch: usize,
        cases_mse: f64,
        unemployment_mse: f64,
    },
    #[error("epoch {epoch}: {source}")]
    Optim { epoch: usize, source: OptimError },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Tape(#[from] crate::tape::TapeError),
}

/// Where the monthly claims rate comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IurSource {
    /// Second output of the network.
    Network,
    /// The `labor.iur` series of the run configuration.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationOptions {
    pub epochs: usize,
    pub lr: f64,
    pub hidden: usize,
    pub cases_weight: f64,
    pub unemployment_weight: f64,
    pub r0_bounds: Bounds,
    pub iur_bounds: Bounds,
    pub gamma0_bounds: Bounds,
    pub gamma1_bounds: Bounds,
    pub iur_source: IurSource,
    /// Seed of the random initialization.
    pub init_seed: u64,
    /// Seeds of stochastic runs averaged per epoch; empty means a single
    /// mean-field run.
    pub stochastic_seeds: Vec<u64>,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            epochs: 500,
            lr: 1e-4,
            hidden: 32,
            cases_weight: 1.0,
            unemployment_weight: 1.0,
            r0_bounds: Bounds::new(2.5, 8.0),
            iur_bounds: Bounds::new(0.0, 1.0),
            gamma0_bounds: Bounds::new(-1.0, 0.0),
            gamma1_bounds: Bounds::new(0.0, 2.0),
            iur_source: IurSource::Network,
            init_seed: 0,
            stochastic_seeds: Vec::new(),
        }
    }
}

/// Loss components of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub epoch: usize,
    pub cases_mse: f64,
    pub unemployment_mse: f64,
    pub total: f64,
    pub wall_seconds: f64,
}

fn mse<'t>(
    tape: &'t Tape,
    sim: &[Var<'t>],
    obs: &[f64],
    what: &'static str,
) -> Result<Var<'t>, CalibError> {
    if sim.len() != obs.len() {
        return Err(CalibError::Length {
            what,
            expected: obs.len(),
            got: sim.len(),
        });
    }
    if sim.is_empty() {
        return Ok(tape.scalar(0.0));
    }
    let diff = tape.concat(sim) - tape.constant(obs.to_vec());
    Ok(diff.square().mean())
}

/// `w_cases · MSE(weekly cases) + w_unemployment · MSE(monthly unemployment)`.
/// A zero weight drops its term, including the length check.
pub fn loss<'t>(
    tape: &'t Tape,
    weekly_cases: &[Var<'t>],
    monthly_unemployment: &[Var<'t>],
    observed: &ObservedData,
    weights: (f64, f64),
) -> Result<(Var<'t>, Var<'t>, Var<'t>), CalibError> {
    let cases = if weights.0 != 0.0 {
        mse(tape, weekly_cases, &observed.weekly_cases, "weekly cases")?
    } else {
        tape.scalar(0.0)
    };
    let unemp = if weights.1 != 0.0 {
        mse(
            tape,
            monthly_unemployment,
            &observed.monthly_unemployment,
            "monthly unemployment",
        )?
    } else {
        tape.scalar(0.0)
    };
    Ok((cases * weights.0 + unemp * weights.1, cases, unemp))
}

/// Fitted network, labor coefficients, and loss history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub net: CalibNet,
    /// `gamma0` and `gamma1`.
    pub labor: ParamSet,
    pub options: CalibrationOptions,
    pub covariate_names: Vec<String>,
    pub history: Vec<LossReport>,
    /// Epoch whose parameters are returned; `None` when no epoch ran.
    pub best_epoch: Option<usize>,
    pub best_loss: f64,
    /// Predicted daily `R0` over the horizon.
    pub r0: Vec<f64>,
    /// Monthly claims rate used by the fitted model.
    pub iur: Vec<f64>,
}

impl Calibration {
    pub fn gamma0(&self) -> f64 {
        self.labor.get("gamma0").expect("gamma0").value[0]
    }

    pub fn gamma1(&self) -> f64 {
        self.labor.get("gamma1").expect("gamma1").value[0]
    }

    pub fn mean_r0(&self) -> f64 {
        self.r0.iter().sum::<f64>() / self.r0.len().max(1) as f64
    }

    pub fn save(&self, path: &Path) -> Result<(), CalibError> {
        let text =
            serde_json::to_string_pretty(self).map_err(|e| CalibError::Data(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| CalibError::Data(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, CalibError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CalibError::Data(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CalibError::Data(e.to_string()))
    }

    /// Loss report of the returned parameters.
    pub fn best(&self) -> Option<&LossReport> {
        self.best_epoch.map(|e| &self.history[e])
    }
}

fn initial_labor(opts: &CalibrationOptions) -> ParamSet {
    let rng = RngStream::keyed(opts.init_seed, 1, 0, Channel::Synthesis);
    let draw = |b: Bounds, i: u64| b.lo + (b.hi - b.lo) * (0.1 + 0.8 * rng.uniform_at(i));
    ParamSet::new(vec![
        Param::scalar(
            "gamma0",
            draw(opts.gamma0_bounds, 0),
            opts.gamma0_bounds.lo,
            opts.gamma0_bounds.hi,
        )
        .expect("inside bounds"),
        Param::scalar(
            "gamma1",
            draw(opts.gamma1_bounds, 1),
            opts.gamma1_bounds.lo,
            opts.gamma1_bounds.hi,
        )
        .expect("inside bounds"),
    ])
    .expect("distinct names")
}

/// Fits the network and labor coefficients by Adam on the simulator loss.
///
/// Each epoch predicts the structural series, runs the simulator on the
/// tape, aggregates, and takes one step. The parameters with the lowest
/// loss seen are returned.
pub fn calibrate(
    cfg: &SimulationConfig,
    world: &World,
    observed: &ObservedData,
    cov: &CovariateSeries,
    opts: &CalibrationOptions,
    provider: Option<&ProviderHandle>,
) -> Result<Calibration, CalibError> {
    let net = CalibNet::random(
        cov.dim,
        opts.hidden,
        opts.r0_bounds,
        opts.iur_bounds,
        opts.init_seed,
    );
    calibrate_from(
        cfg,
        world,
        observed,
        cov,
        opts,
        provider,
        net,
        initial_labor(opts),
    )
}

/// [`calibrate`] starting from given parameters.
#[allow(clippy::too_many_arguments)]
pub fn calibrate_from(
    cfg: &SimulationConfig,
    world: &World,
    observed: &ObservedData,
    cov: &CovariateSeries,
    opts: &CalibrationOptions,
    provider: Option<&ProviderHandle>,
    mut net: CalibNet,
    mut labor: ParamSet,
) -> Result<Calibration, CalibError> {
    let horizon = cfg.execution.horizon_steps;
    if cov.steps < horizon {
        return Err(CalibError::Length {
            what: "covariate steps",
            expected: horizon,
            got: cov.steps,
        });
    }
    let mut runs: Vec<SimulationConfig> = Vec::new();
    if opts.stochastic_seeds.is_empty() {
        let mut c = cfg.clone();
        c.execution.mode = ExecutionMode::MeanField;
        runs.push(c);
    } else {
        for &s in &opts.stochastic_seeds {
            let mut c = cfg.clone();
            c.execution.mode = ExecutionMode::Stochastic;
            c.execution.seed = s;
            runs.push(c);
        }
    }

    let mut net_state = AdamState::for_params(&net.params);
    let mut labor_state = AdamState::for_params(&labor);
    let mut history = Vec::with_capacity(opts.epochs);
    let mut best: Option<(usize, f64, CalibNet, ParamSet)> = None;
    let start = Instant::now();

    for epoch in 0..opts.epochs {
        let tape = Tape::new();
        let report = {
            let w = net.bind(&tape);
            let lab = labor.bind(&tape);
            let (total, cases, unemp) = objective(
                &tape, cfg, world, observed, cov, opts, provider, &net, &w, &lab, &runs,
            )?;
            let report = LossReport {
                epoch,
                cases_mse: cases.scalar(),
                unemployment_mse: unemp.scalar(),
                total: total.scalar(),
                wall_seconds: start.elapsed().as_secs_f64(),
            };
            if !report.total.is_finite() {
                return Err(CalibError::NonFiniteLoss {
                    epoch,
                    cases_mse: report.cases_mse,
                    unemployment_mse: report.unemployment_mse,
                });
            }
            let g = tape.backward(total)?;
            net.params
                .absorb(&g, &CalibNet::vars(&w))
                .map_err(|source| CalibError::Optim { epoch, source })?;
            labor
                .absorb(&g, &lab)
                .map_err(|source| CalibError::Optim { epoch, source })?;
            report
        };
        log::debug!("epoch {epoch}: loss {:.6e}", report.total);
        if best.as_ref().is_none_or(|b| report.total < b.1) {
            best = Some((epoch, report.total, net.clone(), labor.clone()));
        }
        history.push(report);
        adam_step(&mut net.params, &mut net_state, opts.lr)
            .map_err(|source| CalibError::Optim { epoch, source })?;
        adam_step(&mut labor, &mut labor_state, opts.lr)
            .map_err(|source| CalibError::Optim { epoch, source })?;
    }

    let (best_epoch, best_loss) = match best {
        Some((e, l, n, p)) => {
            net = n;
            labor = p;
            (Some(e), l)
        }
        None => (None, f64::NAN),
    };
    let (r0, net_iur) = net.predict_values(cov, horizon)?;
    let iur = match opts.iur_source {
        IurSource::Network => net_iur,
        IurSource::Fixed => cfg.labor.iur[..horizon.div_ceil(30)].to_vec(),
    };
    Ok(Calibration {
        net,
        labor,
        options: opts.clone(),
        covariate_names: cov.names.clone(),
        history,
        best_epoch,
        best_loss,
        r0,
        iur,
    })
}

/// Structural parameters predicted by the network, as tape nodes.
#[allow(clippy::too_many_arguments)]
pub fn structural_from_net<'t>(
    tape: &'t Tape,
    cfg: &SimulationConfig,
    world: &World,
    net: &CalibNet,
    w: &BoundNet<'t>,
    labor: &[Var<'t>],
    cov: &CovariateSeries,
    iur_source: IurSource,
) -> Result<Structural<'t>, CalibError> {
    let horizon = cfg.execution.horizon_steps;
    let pred = net.predict_structural(tape, w, cov, horizon)?;
    let per_r0 = beta_from_r0(1.0, cfg.epi.infectious_period, cfg.epi.dt);
    let mut s = Structural::constants(tape, cfg, world);
    s.beta = pred.r0.iter().map(|&r| r * per_r0).collect();
    s.gamma0 = labor[0];
    s.gamma1 = labor[1];
    if iur_source == IurSource::Network {
        s.iur = pred.iur;
    }
    Ok(s)
}

#[allow(clippy::too_many_arguments)]
fn objective<'t>(
    tape: &'t Tape,
    cfg: &SimulationConfig,
    world: &World,
    observed: &ObservedData,
    cov: &CovariateSeries,
    opts: &CalibrationOptions,
    provider: Option<&ProviderHandle>,
    net: &CalibNet,
    w: &BoundNet<'t>,
    labor: &[Var<'t>],
    runs: &[SimulationConfig],
) -> Result<(Var<'t>, Var<'t>, Var<'t>), CalibError> {
    let s = structural_from_net(tape, cfg, world, net, w, labor, cov, opts.iur_source)?;
    let weights = (opts.cases_weight, opts.unemployment_weight);
    let mut parts = Vec::with_capacity(runs.len());
    for run_cfg in runs {
        let (_, taped) = run_taped(tape, run_cfg, world, provider, &s)?;
        parts.push(loss(
            tape,
            &taped.weekly_cases(),
            &taped.unemployment_rate,
            observed,
            weights,
        )?);
    }
    let k = 1.0 / parts.len() as f64;
    let sum = |f: fn(&(Var<'t>, Var<'t>, Var<'t>)) -> Var<'t>| {
        parts
            .iter()
            .map(f)
            .reduce(|a, b| a + b)
            .expect("at least one run")
            .scale(k)
    };
    Ok((sum(|p| p.0), sum(|p| p.1), sum(|p| p.2)))
}
