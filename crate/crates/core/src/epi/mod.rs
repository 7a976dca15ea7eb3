//! Disease dynamics: the neighborhood infection kernel, isolation, SEIRM
//! progression, and clinical and financial interventions.

mod interventions;

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use interventions::{
    efficacy_in_force, payment_in_month, priority_order, stimulus_step, test_outcomes,
    testing_step, vaccination_step, Allocation, StimulusEvent, StimulusSchedule, TestEvent,
    TestKind, TestProtocol, VaccinationOutcome, VaccineProtocol,
};

use crate::popgen::{Attribute, Population, Stage};
use crate::rng::{Channel, RngStream};
use crate::sparse::Csr;
use crate::stochastic::inverse_cdf;
use crate::tape::Var;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EpiError {
    #[error("vector lengths differ: {0} vs {1}")]
    Length(usize, usize),
    #[error("agent has infected neighbors but zero degree")]
    ZeroDegree,
    #[error("invalid parameter {name}: {value}")]
    Invalid { name: &'static str, value: f64 },
}

/// Disease section of the run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpiConfig {
    /// Basic reproduction number; converted to a contact rate.
    #[serde(rename = "R0", skip_serializing_if = "Option::is_none")]
    pub r0: Option<f64>,
    /// Contact rate used directly when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    /// Relative susceptibility by age band label.
    pub susceptibility: BTreeMap<String, f64>,
    pub default_susceptibility: f64,
    /// Probability that an infection ends in death, by age band label.
    pub mortality: BTreeMap<String, f64>,
    pub default_mortality: f64,
    pub latent_period: u16,
    pub infectious_period: u16,
    pub dt: f64,
    pub initial_infected_fraction: f64,
}

impl Default for EpiConfig {
    fn default() -> Self {
        Self {
            r0: None,
            beta: None,
            susceptibility: BTreeMap::new(),
            default_susceptibility: 1.0,
            mortality: BTreeMap::new(),
            default_mortality: 0.01,
            latent_period: 5,
            infectious_period: 7,
            dt: 1.0,
            initial_infected_fraction: 0.001,
        }
    }
}

pub const DEFAULT_R0: f64 = 3.0;

/// Contact rate giving `r0` expected secondary infections: an infectious
/// agent exerts rate `beta` on its neighborhood for `infectious_period` steps.
pub fn beta_from_r0(r0: f64, infectious_period: u16, dt: f64) -> f64 {
    r0 / (infectious_period as f64 * dt)
}

impl EpiConfig {
    pub fn beta(&self) -> f64 {
        match (self.beta, self.r0) {
            (Some(b), _) => b,
            (None, Some(r)) => beta_from_r0(r, self.infectious_period, self.dt),
            (None, None) => beta_from_r0(DEFAULT_R0, self.infectious_period, self.dt),
        }
    }

    /// Resolves per-label tables against a population's age bands.
    pub fn resolve(&self, pop: &Population) -> EpiParams {
        let bands = pop.labels.get(Attribute::AgeBand);
        EpiParams {
            beta: self.beta(),
            susceptibility: bands
                .iter()
                .map(|b| {
                    *self
                        .susceptibility
                        .get(b)
                        .unwrap_or(&self.default_susceptibility)
                })
                .collect(),
            latent_period: self.latent_period,
            infectious_period: self.infectious_period,
            mortality: bands
                .iter()
                .map(|b| *self.mortality.get(b).unwrap_or(&self.default_mortality))
                .collect(),
            dt: self.dt,
        }
    }
}

/// Disease parameters with per-age-band tables indexed by age code.
#[derive(Debug, Clone, PartialEq)]
pub struct EpiParams {
    pub beta: f64,
    pub susceptibility: Vec<f64>,
    pub latent_period: u16,
    pub infectious_period: u16,
    pub mortality: Vec<f64>,
    pub dt: f64,
}

impl EpiParams {
    pub fn validate(&self) -> Result<(), EpiError> {
        let bad = |name, value| Err(EpiError::Invalid { name, value });
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta", self.beta);
        }
        if let Some(&s) = self
            .susceptibility
            .iter()
            .find(|s| !(**s >= 0.0 && s.is_finite()))
        {
            return bad("susceptibility", s);
        }
        if let Some(&m) = self.mortality.iter().find(|m| !(0.0..=1.0).contains(*m)) {
            return bad("mortality", m);
        }
        if self.infectious_period < 1 {
            return bad("infectious_period", 0.0);
        }
        if !(self.dt > 0.0) {
            return bad("dt", self.dt);
        }
        Ok(())
    }
}

/// `1 − exp(−β·S·dt·ΣI / n)`; zero for an agent without neighbors.
pub fn infection_probability(
    beta: f64,
    s: f64,
    n: f64,
    infected_sum: f64,
    dt: f64,
) -> Result<f64, EpiError> {
    if infected_sum == 0.0 {
        return Ok(0.0);
    }
    if n <= 0.0 {
        return Err(EpiError::ZeroDegree);
    }
    Ok(-(-beta * s * dt * infected_sum / n).exp_m1())
}

/// `I_j · (1 − A_j)`: isolating agents stop exposing their neighbors.
pub fn apply_isolation(infected: &[f64], isolating: &[f64]) -> Result<Vec<f64>, EpiError> {
    if infected.len() != isolating.len() {
        return Err(EpiError::Length(infected.len(), isolating.len()));
    }
    Ok(infected
        .iter()
        .zip(isolating)
        .map(|(i, a)| i * (1.0 - a))
        .collect())
}

/// Reciprocal weighted degree, zero for isolated vertices.
pub fn inverse_degree(graph: &Csr) -> Vec<f64> {
    graph
        .row_sums()
        .into_iter()
        .map(|d| if d > 0.0 { 1.0 / d } else { 0.0 })
        .collect()
}

/// Taped per-agent infection probabilities for expected infectious mass
/// `infectious`.
pub fn exposure_probabilities<'t>(
    beta: Var<'t>,
    susceptibility: Var<'t>,
    graph: &Arc<Csr>,
    inv_degree: Var<'t>,
    infectious: Var<'t>,
    dt: f64,
) -> Var<'t> {
    let pressure = infectious.spmv(graph) * inv_degree;
    let hazard = pressure * susceptibility * beta;
    (hazard.scale(-dt)).exp().one_minus()
}

/// Inputs of one stochastic exposure pass; all reads refer to the state at
/// the start of the step.
#[derive(Debug, Clone, Copy)]
pub struct ExposureInput<'a> {
    pub graph: &'a Csr,
    pub inv_degree: &'a [f64],
    /// Effective infectious indicator per agent, after isolation.
    pub infectious: &'a [f64],
    pub beta: f64,
    /// Susceptibility by age code.
    pub susceptibility: &'a [f64],
    /// `1 − efficacy` per agent.
    pub protection: &'a [f64],
    pub dt: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExposureOutcome {
    /// Agents infected this step, ascending.
    pub exposed: Vec<u32>,
    /// Sum of infection probabilities over susceptible agents.
    pub expected: f64,
    /// `Σ ∂p_i/∂β`.
    pub d_beta: f64,
    /// `Σ ∂p_i/∂S_a` by age code.
    pub d_susceptibility: Vec<f64>,
}

const CHUNK: usize = 4096;

/// Samples new exposures among susceptible agents.
pub fn exposure_step(
    pop: &Population,
    inp: ExposureInput<'_>,
    seed: u64,
    step: u32,
) -> ExposureOutcome {
    let n = pop.len();
    let ages = pop.codes(Attribute::AgeBand);
    let bands = inp.susceptibility.len();
    let parts: Vec<ExposureOutcome> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut out = ExposureOutcome {
                d_susceptibility: vec![0.0; bands],
                ..Default::default()
            };
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                if pop.disease_stage[i] != Stage::S {
                    continue;
                }
                let (cols, w) = inp.graph.row(i);
                let mut sum = 0.0;
                for (&j, &wj) in cols.iter().zip(w) {
                    sum += wj * inp.infectious[j as usize];
                }
                if sum == 0.0 {
                    continue;
                }
                let x = sum * inp.inv_degree[i];
                let a = ages[i] as usize;
                let s = inp.susceptibility[a] * inp.protection[i];
                let lambda = inp.beta * s * inp.dt * x;
                let p = -(-lambda).exp_m1();
                let survive = 1.0 - p;
                out.expected += p;
                out.d_beta += survive * s * inp.dt * x;
                out.d_susceptibility[a] += survive * inp.beta * inp.protection[i] * inp.dt * x;
                let u =
                    RngStream::new(seed, step as u64, pop.agent_id[i], Channel::Exposure).uniform();
                if u < p {
                    out.exposed.push(i as u32);
                }
            }
            out
        })
        .collect();
    let mut total = ExposureOutcome {
        d_susceptibility: vec![0.0; bands],
        ..Default::default()
    };
    for p in parts {
        total.exposed.extend(p.exposed);
        total.expected += p.expected;
        total.d_beta += p.d_beta;
        for (t, d) in total.d_susceptibility.iter_mut().zip(p.d_susceptibility) {
            *t += d;
        }
    }
    total
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ProgressOutcome {
    /// Agents that became infectious this step.
    pub new_infections: Vec<u32>,
    pub new_recoveries: usize,
    pub new_deaths: usize,
}

/// Advances E and I timers, resolves infections ending this step, then moves
/// `exposed` from S into E (or straight into I when the latent period is 0).
pub fn seirm_progress(
    pop: &mut Population,
    params: &EpiParams,
    exposed: &[u32],
    seed: u64,
    step: u32,
) -> ProgressOutcome {
    let ages = pop.codes(Attribute::AgeBand).to_vec();
    let d = params.infectious_period;
    let mut out = ProgressOutcome::default();
    for i in 0..pop.len() {
        match pop.disease_stage[i] {
            Stage::E => {
                pop.stage_timer[i] = pop.stage_timer[i].saturating_sub(1);
                if pop.stage_timer[i] == 0 {
                    pop.disease_stage[i] = Stage::I;
                    pop.stage_timer[i] = d;
                    out.new_infections.push(i as u32);
                }
            }
            Stage::I => {
                pop.stage_timer[i] = pop.stage_timer[i].saturating_sub(1);
                if pop.stage_timer[i] == 0 {
                    let m = params.mortality[ages[i] as usize];
                    let u =
                        RngStream::new(seed, step as u64, pop.agent_id[i], Channel::Progression)
                            .uniform();
                    if inverse_cdf(&[1.0 - m, m], u) == 1 {
                        pop.disease_stage[i] = Stage::M;
                        out.new_deaths += 1;
                    } else {
                        pop.disease_stage[i] = Stage::R;
                        out.new_recoveries += 1;
                    }
                }
            }
            _ => {}
        }
    }
    for &i in exposed {
        let i = i as usize;
        debug_assert_eq!(pop.disease_stage[i], Stage::S);
        if params.latent_period == 0 {
            pop.disease_stage[i] = Stage::I;
            pop.stage_timer[i] = d;
            out.new_infections.push(i as u32);
        } else {
            pop.disease_stage[i] = Stage::E;
            pop.stage_timer[i] = params.latent_period;
        }
    }
    out
}

/// Marks a seeded fraction of agents infectious at step 0.
pub fn seed_infections(
    pop: &mut Population,
    fraction: f64,
    infectious_period: u16,
    seed: u64,
) -> usize {
    let mut k = 0;
    for i in 0..pop.len() {
        if pop.disease_stage[i] == Stage::S
            && RngStream::new(seed, 0, pop.agent_id[i], Channel::Seeding).uniform() < fraction
        {
            pop.disease_stage[i] = Stage::I;
            pop.stage_timer[i] = infectious_period;
            k += 1;
        }
    }
    k
}
