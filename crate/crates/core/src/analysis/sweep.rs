use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::AnalysisError;
use crate::behavior::ProviderHandle;
use crate::engine::{run, ExecutionMode, SimulationConfig, World};
use crate::epi::VaccineProtocol;

/// A vaccine protocol field and the values it takes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub field: String,
    pub grid: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitnessPoint {
    pub value: f64,
    /// Deaths by the horizon under the first protocol, averaged over seeds.
    pub deaths_p1: f64,
    pub deaths_p2: f64,
    /// `deaths_p2 / deaths_p1`; `None` when `deaths_p1` is zero.
    pub fitness: Option<f64>,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitnessCurve {
    pub field: String,
    pub seeds: Vec<u64>,
    pub points: Vec<FitnessPoint>,
    /// Smallest grid value with fitness below one.
    pub threshold: Option<f64>,
}

impl FitnessCurve {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{},deaths_p1,deaths_p2,fitness,flagged\n", self.field);
        for p in &self.points {
            let f = p.fitness.map(|f| f.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{f},{}\n",
                p.value, p.deaths_p1, p.deaths_p2, p.flagged
            ));
        }
        out
    }

    pub fn write(&self, dir: &std::path::Path) -> Result<(), AnalysisError> {
        super::write_outputs(dir, "fitness", self, &self.to_csv())
    }
}

fn with_field(
    p: &VaccineProtocol,
    field: &str,
    value: f64,
) -> Result<VaccineProtocol, AnalysisError> {
    let mut v = serde_json::to_value(p).map_err(|e| AnalysisError::Sweep(e.to_string()))?;
    let slot = v
        .get_mut(field)
        .ok_or_else(|| AnalysisError::Sweep(format!("vaccine protocol has no field {field}")))?;
    *slot = if slot.is_u64() {
        if value.fract() != 0.0 || value < 0.0 {
            return Err(AnalysisError::Sweep(format!(
                "{field} takes non-negative integers, got {value}"
            )));
        }
        Value::from(value as u64)
    } else {
        Value::from(value)
    };
    serde_json::from_value(v).map_err(|e| AnalysisError::Sweep(format!("{field} = {value}: {e}")))
}

/// Sets `sweep.field` in both protocols to each grid value and compares
/// deaths at the horizon under paired seeds.
///
/// Fitness is the ratio of seed-averaged deaths. Mean-field configurations
/// run once per point since they do not depend on the seed.
pub fn prospective_sweep(
    config: &SimulationConfig,
    protocol_a: &VaccineProtocol,
    protocol_b: &VaccineProtocol,
    sweep: &Sweep,
    n_seeds: usize,
    provider: Option<&ProviderHandle>,
) -> Result<FitnessCurve, AnalysisError> {
    if n_seeds == 0 {
        return Err(AnalysisError::NoSeeds);
    }
    if sweep.grid.is_empty() {
        return Err(AnalysisError::Sweep("empty grid".into()));
    }
    if sweep.grid.windows(2).any(|w| !(w[0] < w[1])) || sweep.grid.iter().any(|v| !v.is_finite()) {
        return Err(AnalysisError::Sweep(
            "grid must be finite and strictly increasing".into(),
        ));
    }
    let seeds = if config.execution.mode == ExecutionMode::MeanField {
        vec![config.execution.seed]
    } else {
        super::paired_seeds(config.execution.seed, n_seeds)
    };
    let mut jobs = Vec::new();
    for (g, &value) in sweep.grid.iter().enumerate() {
        for (arm, proto) in [protocol_a, protocol_b].into_iter().enumerate() {
            let vaccine = with_field(proto, &sweep.field, value)?;
            for &seed in &seeds {
                let mut c = config.clone();
                c.vaccine = vaccine.clone();
                c.execution.seed = seed;
                c.validate()?;
                jobs.push((g, arm, c));
            }
        }
    }
    let world = World::build(config)?;
    let one = |(_, _, c): &(usize, usize, SimulationConfig)| -> Result<f64, AnalysisError> {
        Ok(run(c, &world, provider)?.trajectory.total_deaths())
    };
    let deaths: Vec<f64> = if provider.is_some() {
        jobs.iter().map(one).collect::<Result<_, _>>()?
    } else {
        jobs.par_iter().map(one).collect::<Result<_, _>>()?
    };

    let mut sums = vec![[0.0; 2]; sweep.grid.len()];
    for ((g, arm, _), d) in jobs.iter().zip(&deaths) {
        sums[*g][*arm] += d;
    }
    let k = seeds.len() as f64;
    let points: Vec<FitnessPoint> = sweep
        .grid
        .iter()
        .zip(&sums)
        .map(|(&value, s)| {
            let (d1, d2) = (s[0] / k, s[1] / k);
            let fitness = (d1 > 0.0).then(|| d2 / d1);
            FitnessPoint {
                value,
                deaths_p1: d1,
                deaths_p2: d2,
                fitness,
                flagged: fitness.is_none(),
            }
        })
        .collect();
    let threshold = points
        .iter()
        .find(|p| p.fitness.is_some_and(|f| f < 1.0))
        .map(|p| p.value);
    Ok(FitnessCurve {
        field: sweep.field.clone(),
        seeds,
        points,
        threshold,
    })
}
