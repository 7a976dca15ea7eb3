//! Simulation driver: configuration, world assembly, and the per-step loop
//! in stochastic and mean-field form.

mod config;
mod meanfield;
mod stochastic;
mod trajectory;

use std::borrow::Cow;
use std::sync::Arc;

use thiserror::Error;

pub use config::{
    apply_patch, default_marginals, BehaviorConfig, BehaviorMode, ConfigIssue, ExecutionConfig,
    ExecutionMode, PopulationConfig, ScenarioPatch, SimulationConfig,
};
pub use trajectory::{aggregate, Aggregated, Cadence, Reduce, Trajectory};

use crate::behavior::{
    agent_probabilities, estimate_archetype_probs, Action, ArchetypeSpace, ArchetypeTable,
    BehaviorError, ContextBin, ProviderHandle,
};
use crate::epi::{inverse_degree, priority_order, EpiError};
use crate::labor::LaborError;
use crate::popgen::{
    build_contact_graph, ipf_fit, read_population, sample_population, Attribute, AttributeLabels,
    ContactGraph, HouseholdSizeDist, JointTable, PopgenError, Population, PopulationIoError,
};
use crate::tape::{Tape, TapeError, Var};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid configuration: {}", format_issues(.0))]
    Config(Vec<ConfigIssue>),
    #[error("scenario patch: {0}")]
    Patch(String),
    #[error(transparent)]
    Popgen(#[from] PopgenError),
    #[error(transparent)]
    PopulationIo(#[from] PopulationIoError),
    #[error(transparent)]
    Behavior(#[from] BehaviorError),
    #[error(transparent)]
    Epi(#[from] EpiError),
    #[error(transparent)]
    Labor(#[from] LaborError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("behavior mode {0:?} needs a decision provider")]
    MissingProvider(BehaviorMode),
    #[error("io: {0}")]
    Io(String),
    #[error("run aborted at step {step}: {source}")]
    Aborted {
        step: usize,
        source: Box<EngineError>,
        /// Series recorded before the failing step.
        partial: Box<Trajectory>,
    },
}

impl From<std::io::Error> for EngineError {
    fn from(e: std::io::Error) -> Self {
        EngineError::Io(e.to_string())
    }
}

fn format_issues(issues: &[ConfigIssue]) -> String {
    issues
        .iter()
        .map(|i| i.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

/// Population, contact network, and derived lookup tables for one run.
#[derive(Debug, Clone)]
pub struct World {
    pub population: Population,
    pub graph: ContactGraph,
    pub inv_degree: Vec<f64>,
    /// Vaccination order.
    pub priority: Vec<u32>,
    pub archetypes: Option<ArchetypeSpace>,
    pub warnings: Vec<String>,
}

/// Synthesizes the population described by the config, or reads it from
/// the configured path.
pub fn build_population(cfg: &PopulationConfig) -> Result<(Population, Vec<String>), EngineError> {
    if let Some(path) = &cfg.path {
        // Label codes follow the marginal bin order, as in a synthesized population.
        let mut dict = AttributeLabels::default();
        for m in &cfg.marginals {
            if let Ok(a) = m.axis.parse::<Attribute>() {
                *dict.get_mut(a) = m.bins.clone();
            }
        }
        return Ok((read_population(path, Some(&dict))?, Vec::new()));
    }
    let seed = JointTable::uniform_seed(&cfg.marginals);
    let fit = ipf_fit(&seed, &cfg.marginals, cfg.ipf_tolerance, cfg.ipf_max_sweeps)?;
    let pop = sample_population(
        &fit.table,
        cfg.size,
        &HouseholdSizeDist(cfg.household_sizes.clone()),
        cfg.seed,
    )?;
    Ok((pop, fit.warnings))
}

impl World {
    pub fn build(cfg: &SimulationConfig) -> Result<World, EngineError> {
        let (pop, warnings) = build_population(&cfg.population)?;
        let mut w = World::from_population(pop, cfg)?;
        w.warnings.splice(0..0, warnings);
        Ok(w)
    }

    pub fn from_population(pop: Population, cfg: &SimulationConfig) -> Result<World, EngineError> {
        let graph = build_contact_graph(&pop, &cfg.graph, cfg.population.seed);
        World::from_parts(pop, graph, cfg)
    }

    pub fn from_parts(
        pop: Population,
        graph: ContactGraph,
        cfg: &SimulationConfig,
    ) -> Result<World, EngineError> {
        let archetypes = match cfg.behavior.mode {
            BehaviorMode::Heuristic => None,
            BehaviorMode::Archetype => Some(ArchetypeSpace::from_attributes(
                &pop,
                &cfg.behavior.archetype_attributes,
            )),
            BehaviorMode::Agent => {
                if pop.len() > cfg.behavior.agent_cap {
                    return Err(EngineError::Config(vec![ConfigIssue {
                        pointer: "/population/size".into(),
                        message: format!(
                            "per-agent behavior allows at most {} agents, population has {}",
                            cfg.behavior.agent_cap,
                            pop.len()
                        ),
                    }]));
                }
                Some(ArchetypeSpace::per_agent(&pop))
            }
        };
        Ok(World {
            inv_degree: inverse_degree(&graph.combined),
            priority: priority_order(&pop),
            warnings: graph.warnings.clone(),
            population: pop,
            graph,
            archetypes,
        })
    }

    pub fn n_agents(&self) -> usize {
        self.population.len()
    }

    pub(crate) fn age_index(&self) -> Arc<Vec<u32>> {
        Arc::new(
            self.population
                .codes(Attribute::AgeBand)
                .iter()
                .map(|&c| c as u32)
                .collect(),
        )
    }
}

/// Structural parameters as tape nodes, so runs can be differentiated with
/// respect to them.
#[derive(Debug, Clone)]
pub struct Structural<'t> {
    /// Contact rate per step, each a scalar node.
    pub beta: Vec<Var<'t>>,
    /// Susceptibility by age code.
    pub susceptibility: Var<'t>,
    pub gamma0: Var<'t>,
    pub gamma1: Var<'t>,
    /// Insured unemployment rate per month, each a scalar node.
    pub iur: Vec<Var<'t>>,
}

impl<'t> Structural<'t> {
    /// Constant nodes holding the configured values.
    pub fn constants(tape: &'t Tape, cfg: &SimulationConfig, world: &World) -> Structural<'t> {
        let params = cfg.epi.resolve(&world.population);
        Structural {
            beta: (0..cfg.execution.horizon_steps)
                .map(|_| tape.scalar(params.beta))
                .collect(),
            susceptibility: tape.constant(params.susceptibility),
            gamma0: tape.scalar(cfg.labor.gamma0),
            gamma1: tape.scalar(cfg.labor.gamma1),
            iur: cfg.labor.iur.iter().map(|&c| tape.scalar(c)).collect(),
        }
    }
}

/// Taped outputs of a run. Entries are scalar nodes aligned with the
/// corresponding [`Trajectory`] series.
#[derive(Debug, Clone, Default)]
pub struct TapedSeries<'t> {
    pub new_exposures: Vec<Var<'t>>,
    pub new_infections: Vec<Var<'t>>,
    pub deaths: Vec<Var<'t>>,
    pub unemployment_rate: Vec<Var<'t>>,
}

impl<'t> TapedSeries<'t> {
    /// Sums of `new_infections` over complete weeks.
    pub fn weekly_cases(&self) -> Vec<Var<'t>> {
        self.new_infections
            .chunks_exact(7)
            .map(|w| {
                w.iter()
                    .copied()
                    .reduce(|a, b| a + b)
                    .expect("non-empty week")
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trajectory: Trajectory,
    /// Agent state after the last step; stochastic runs only.
    pub final_population: Option<Population>,
    /// Final S, E, I, R, M totals (expected masses in mean-field runs).
    pub stage_mass: [f64; 5],
}

/// Per-step action probabilities from the configured behavior source.
pub(crate) struct BehaviorDriver<'a> {
    cfg: &'a BehaviorConfig,
    space: Option<Cow<'a, ArchetypeSpace>>,
    provider: Option<&'a ProviderHandle>,
    n: usize,
}

impl<'a> BehaviorDriver<'a> {
    fn new(
        cfg: &'a SimulationConfig,
        world: &'a World,
        provider: Option<&'a ProviderHandle>,
    ) -> Result<Self, EngineError> {
        let mode = cfg.behavior.mode;
        if mode != BehaviorMode::Heuristic && provider.is_none() {
            return Err(EngineError::MissingProvider(mode));
        }
        let space = match (mode, &world.archetypes) {
            (BehaviorMode::Heuristic, _) => None,
            (_, Some(space)) => Some(Cow::Borrowed(space)),
            (BehaviorMode::Archetype, None) => Some(Cow::Owned(ArchetypeSpace::from_attributes(
                &world.population,
                &cfg.behavior.archetype_attributes,
            ))),
            (BehaviorMode::Agent, None) => {
                Some(Cow::Owned(ArchetypeSpace::per_agent(&world.population)))
            }
        };
        Ok(Self {
            cfg: &cfg.behavior,
            space,
            provider,
            n: world.n_agents(),
        })
    }

    fn probabilities(&self, ctx: &ContextBin, action: Action) -> Result<Vec<f64>, EngineError> {
        let (Some(space), Some(provider)) = (self.space.as_deref(), self.provider) else {
            let p = match action {
                Action::Isolate => self.cfg.isolate_prob,
                Action::Work => self.cfg.work_prob,
            };
            return Ok(vec![p; self.n]);
        };
        let mut table = ArchetypeTable::new();
        estimate_archetype_probs(
            provider,
            &self.cfg.template,
            space,
            ctx,
            action,
            self.cfg.samples_per_entry,
            &mut table,
        )?;
        Ok(agent_probabilities(&table, space, ctx, action)?)
    }

    fn calls(&self) -> u64 {
        self.provider.map_or(0, |p| p.calls())
    }
}

/// Runs the configured simulation on a prebuilt world.
pub fn run(
    cfg: &SimulationConfig,
    world: &World,
    provider: Option<&ProviderHandle>,
) -> Result<RunOutput, EngineError> {
    let tape = Tape::new();
    let s = Structural::constants(&tape, cfg, world);
    run_taped(&tape, cfg, world, provider, &s).map(|(out, _)| out)
}

/// Builds the world from the config and runs it.
pub fn simulate(
    cfg: &SimulationConfig,
    provider: Option<&ProviderHandle>,
) -> Result<RunOutput, EngineError> {
    cfg.validate()?;
    let world = World::build(cfg)?;
    run(cfg, &world, provider)
}

/// Runs with structural parameters supplied as tape nodes and returns the
/// taped outputs next to the plain trajectory.
///
/// Mean-field runs are differentiable end to end. Stochastic runs attach
/// straight-through gradients to exposures, infections, and unemployment.
pub fn run_taped<'t>(
    tape: &'t Tape,
    cfg: &SimulationConfig,
    world: &World,
    provider: Option<&ProviderHandle>,
    structural: &Structural<'t>,
) -> Result<(RunOutput, TapedSeries<'t>), EngineError> {
    cfg.validate()?;
    let horizon = cfg.execution.horizon_steps;
    if structural.beta.len() < horizon {
        return Err(EngineError::Patch(format!(
            "{} contact rates for {horizon} steps",
            structural.beta.len()
        )));
    }
    let driver = BehaviorDriver::new(cfg, world, provider)?;
    let (mut out, taped) = match cfg.execution.mode {
        ExecutionMode::Stochastic => stochastic::run(tape, cfg, world, &driver, structural)?,
        ExecutionMode::MeanField => meanfield::run(tape, cfg, world, &driver, structural)?,
    };
    if cfg.behavior.mode == BehaviorMode::Agent && cfg.behavior.population_scale != 1.0 {
        out.trajectory.scale_counts(cfg.behavior.population_scale);
    }
    Ok((out, taped))
}

pub(crate) fn abort(step: usize, e: EngineError, partial: &Trajectory) -> EngineError {
    EngineError::Aborted {
        step,
        source: Box::new(e),
        partial: Box::new(partial.clone()),
    }
}

#[cfg(test)]
mod tests;
