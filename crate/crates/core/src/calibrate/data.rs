use std::path::Path;

use serde::{Deserialize, Serialize};

use super::CalibError;
use crate::engine::{aggregate, Cadence, Reduce, Trajectory};
use crate::rng::{Channel, RngStream};

/// Row-major `steps × dim` matrix of daily covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSeries {
    pub values: Vec<f64>,
    pub steps: usize,
    pub dim: usize,
    pub names: Vec<String>,
}

impl CovariateSeries {
    pub fn new(
        values: Vec<f64>,
        steps: usize,
        dim: usize,
        names: Vec<String>,
    ) -> Result<Self, CalibError> {
        if values.len() != steps * dim || names.len() != dim {
            return Err(CalibError::Length {
                what: "covariate matrix",
                expected: steps * dim,
                got: values.len(),
            });
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(CalibError::Data(format!(
                "covariate row {} column {} is not finite",
                k / dim,
                k % dim
            )));
        }
        Ok(Self {
            values,
            steps,
            dim,
            names,
        })
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }

    pub fn truncated(&self, steps: usize) -> CovariateSeries {
        let steps = steps.min(self.steps);
        Self {
            values: self.values[..steps * self.dim].to_vec(),
            steps,
            dim: self.dim,
            names: self.names.clone(),
        }
    }

    /// Reads a CSV with a header row; every column is a covariate.
    pub fn read_csv(path: &Path) -> Result<Self, CalibError> {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| CalibError::Data(e.to_string()))?;
        let names: Vec<String> = rdr
            .headers()
            .map_err(|e| CalibError::Data(e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect();
        let mut values = Vec::new();
        let mut steps = 0;
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| CalibError::Data(e.to_string()))?;
            for (col, field) in rec.iter().enumerate() {
                let v: f64 = field.trim().parse().map_err(|_| {
                    CalibError::Data(format!(
                        "row {} column {}: bad number {field:?}",
                        row + 1,
                        names[col]
                    ))
                })?;
                values.push(v);
            }
            steps += 1;
        }
        Self::new(values, steps, names.len(), names)
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), CalibError> {
        let mut w = csv::Writer::from_path(path).map_err(|e| CalibError::Data(e.to_string()))?;
        w.write_record(&self.names)
            .map_err(|e| CalibError::Data(e.to_string()))?;
        for t in 0..self.steps {
            w.write_record(self.row(t).iter().map(|v| v.to_string()))
                .map_err(|e| CalibError::Data(e.to_string()))?;
        }
        w.flush().map_err(|e| CalibError::Data(e.to_string()))
    }
}

fn standardize(x: &mut [f64]) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    for v in x.iter_mut() {
        *v = if sd > 0.0 { (*v - mean) / sd } else { 0.0 };
    }
}

/// Stand-in covariates: the daily case curve shifted back by each lag
/// (padded with its first value), standardized, plus Gaussian noise of the
/// given scale; followed by `noise_columns` pure noise columns.
pub fn synthetic_covariates(
    daily_cases: &[f64],
    lags: &[usize],
    noise_scale: f64,
    noise_columns: usize,
    seed: u64,
) -> Result<CovariateSeries, CalibError> {
    let steps = daily_cases.len();
    if steps == 0 {
        return Err(CalibError::Data("empty case series".into()));
    }
    let dim = lags.len() + noise_columns;
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(dim);
    let mut names = Vec::with_capacity(dim);
    for &lag in lags {
        let mut c: Vec<f64> = (0..steps)
            .map(|t| daily_cases[t.saturating_sub(lag)])
            .collect();
        standardize(&mut c);
        cols.push(c);
        names.push(format!("cases_lag{lag}"));
    }
    for k in 0..noise_columns {
        cols.push(vec![0.0; steps]);
        names.push(format!("noise{k}"));
    }
    for (j, c) in cols.iter_mut().enumerate() {
        let scale = if j < lags.len() { noise_scale } else { 1.0 };
        let mut rng = RngStream::keyed(seed, j as u64, 0, Channel::Synthesis);
        for v in c.iter_mut() {
            // Box-Muller.
            let u1 = rng.open_uniform();
            let u2 = rng.uniform();
            *v += scale * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
    let mut values = Vec::with_capacity(steps * dim);
    for t in 0..steps {
        values.extend(cols.iter().map(|c| c[t]));
    }
    CovariateSeries::new(values, steps, dim, names)
}

/// Targets of a calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedData {
    /// New infections per complete 7-step week.
    pub weekly_cases: Vec<f64>,
    /// Unemployment rate per 30-step month.
    pub monthly_unemployment: Vec<f64>,
}

impl ObservedData {
    pub fn from_trajectory(t: &Trajectory) -> Self {
        Self {
            weekly_cases: aggregate(&t.new_infections, Cadence::Weekly, Reduce::Sum).values,
            monthly_unemployment: t.unemployment_rate.clone(),
        }
    }

    /// Reads `week,cases` and `month,unemployment_rate` files.
    pub fn read_csv(cases: &Path, unemployment: Option<&Path>) -> Result<Self, CalibError> {
        let weekly_cases = read_series(cases, "cases")?;
        let monthly_unemployment = match unemployment {
            Some(p) => read_series(p, "unemployment_rate")?,
            None => Vec::new(),
        };
        Ok(Self {
            weekly_cases,
            monthly_unemployment,
        })
    }
}

fn read_series(path: &Path, column: &str) -> Result<Vec<f64>, CalibError> {
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| CalibError::Data(format!("{}: {e}", path.display())))?;
    let headers = rdr
        .headers()
        .map_err(|e| CalibError::Data(e.to_string()))?
        .clone();
    let col = headers
        .iter()
        .position(|h| h == column)
        .ok_or_else(|| CalibError::Data(format!("{}: missing column {column}", path.display())))?;
    let mut out = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CalibError::Data(e.to_string()))?;
        let v = rec
            .get(col)
            .and_then(|f| f.trim().parse::<f64>().ok())
            .filter(|v| v.is_finite())
            .ok_or_else(|| {
                CalibError::Data(format!(
                    "{}: row {} has no valid {column}",
                    path.display(),
                    row + 1
                ))
            })?;
        out.push(v);
    }
    Ok(out)
}
