//! Differentiable agent-based epidemic and labor simulation: synthetic
//! populations, SEIRM dynamics on contact networks, archetype-level agent
//! behavior, gradient-based calibration, and scenario analysis.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod analysis;
pub mod behavior;
pub mod calibrate;
pub mod engine;
pub mod epi;
pub mod labor;
pub mod optim;
pub mod popgen;
pub mod rng;
pub mod soft;
pub mod sparse;
pub mod stochastic;
pub mod tape;

pub use analysis::{
    AnalysisError, CounterfactualReport, FitnessCurve, PollQuery, PollTable, Sweep,
};
pub use behavior::{PromptTemplate, ProviderHandle};
pub use calibrate::{CalibError, Calibration, CalibrationOptions, CovariateSeries, ObservedData};
pub use engine::{
    apply_patch, run, simulate, EngineError, ExecutionMode, RunOutput, ScenarioPatch,
    SimulationConfig, Trajectory, World,
};
pub use epi::VaccineProtocol;
pub use popgen::{Attribute, Population};
