//! Retrospective polling, paired counterfactuals, and prospective protocol
//! sweeps over configured simulations.

mod counterfactual;
mod poll;
mod sweep;

use thiserror::Error;

pub use counterfactual::{
    counterfactual, paired_seeds, CounterfactualReport, PeakPair, SeriesDelta,
};
pub use poll::{lower_median, poll, Metric, PollQuery, PollRow, PollTable};
pub use sweep::{prospective_sweep, FitnessCurve, FitnessPoint, Sweep};

use crate::engine::EngineError;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("unknown attribute {0}")]
    UnknownAttribute(String),
    #[error("unknown metric {0}")]
    UnknownMetric(String),
    #[error("invalid query: {0}")]
    Query(String),
    #[error("invalid sweep: {0}")]
    Sweep(String),
    #[error("at least one seed is required")]
    NoSeeds,
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for AnalysisError {
    fn from(e: std::io::Error) -> Self {
        AnalysisError::Io(e.to_string())
    }
}

fn write_outputs(
    dir: &std::path::Path,
    stem: &str,
    json: &impl serde::Serialize,
    csv: &str,
) -> Result<(), AnalysisError> {
    std::fs::create_dir_all(dir)?;
    let text = serde_json::to_string_pretty(json).map_err(|e| AnalysisError::Io(e.to_string()))?;
    std::fs::write(dir.join(format!("{stem}.json")), text)?;
    std::fs::write(dir.join(format!("{stem}.csv")), csv)?;
    Ok(())
}
