use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::EngineError;
use crate::behavior::{ContextConfig, PromptTemplate};
use crate::epi::{EpiConfig, StimulusSchedule, TestProtocol, VaccineProtocol};
use crate::labor::LaborConfig;
use crate::popgen::{Attribute, GraphConfig, MarginalTable};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PopulationConfig {
    pub size: usize,
    /// Seed for attribute sampling, households, and the contact graph.
    pub seed: u64,
    pub marginals: Vec<MarginalTable>,
    /// `(size, weight)` pairs.
    pub household_sizes: Vec<(usize, f64)>,
    /// Population CSV used instead of synthesis.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub ipf_tolerance: f64,
    pub ipf_max_sweeps: usize,
}

fn marginal(axis: &str, bins: &[&str], counts: &[f64]) -> MarginalTable {
    MarginalTable {
        axis: axis.into(),
        bins: bins.iter().map(|b| b.to_string()).collect(),
        counts: counts.to_vec(),
    }
}

/// Coarse city-scale marginals used when none are configured.
pub fn default_marginals() -> Vec<MarginalTable> {
    vec![
        marginal(
            "age_band",
            &["0t19", "20t29", "30t39", "40t49", "50t59", "60t69", "70p"],
            &[2.0, 1.4, 1.4, 1.1, 1.1, 0.9, 0.9],
        ),
        marginal("gender", &["F", "M"], &[4.4, 4.0]),
        marginal(
            "borough",
            &["Bronx", "Brooklyn", "Manhattan", "Queens", "Staten Island"],
            &[1.4, 2.6, 1.6, 2.3, 0.5],
        ),
        marginal(
            "income_band",
            &["0t2000", "2000t5000", "5000t10000", "10000p"],
            &[2.0, 3.0, 2.2, 1.2],
        ),
        marginal(
            "occupation",
            &["essential", "office", "retail", "not working"],
            &[2.5, 2.4, 1.1, 2.4],
        ),
    ]
}

impl Default for PopulationConfig {
    fn default() -> Self {
        Self {
            size: 1000,
            seed: 0,
            marginals: default_marginals(),
            household_sizes: vec![(1, 0.32), (2, 0.29), (3, 0.16), (4, 0.13), (5, 0.10)],
            path: None,
            ipf_tolerance: 1e-10,
            ipf_max_sweeps: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BehaviorMode {
    /// Fixed action probabilities for every agent.
    Heuristic,
    /// One provider estimate per archetype.
    Archetype,
    /// One provider estimate per agent.
    Agent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BehaviorConfig {
    pub mode: BehaviorMode,
    pub isolate_prob: f64,
    pub work_prob: f64,
    pub archetype_attributes: Vec<Attribute>,
    /// Provider replies per archetype estimate.
    pub samples_per_entry: u32,
    pub context: ContextConfig,
    /// Largest population allowed in per-agent mode.
    pub agent_cap: usize,
    /// Full-population size over simulated size; scales count outputs in
    /// per-agent mode.
    pub population_scale: f64,
    /// Concurrent provider queries.
    pub parallelism: usize,
    pub template: PromptTemplate,
}

impl Default for BehaviorConfig {
    fn default() -> Self {
        Self {
            mode: BehaviorMode::Heuristic,
            isolate_prob: 0.1,
            work_prob: 0.9,
            archetype_attributes: vec![Attribute::AgeBand, Attribute::Gender, Attribute::Borough],
            samples_per_entry: 10,
            context: ContextConfig::default(),
            agent_cap: 1000,
            population_scale: 1.0,
            parallelism: 4,
            template: PromptTemplate::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionMode {
    Stochastic,
    MeanField,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExecutionConfig {
    pub mode: ExecutionMode,
    pub horizon_steps: usize,
    pub seed: u64,
}

impl Default for ExecutionConfig {
    fn default() -> Self {
        Self {
            mode: ExecutionMode::Stochastic,
            horizon_steps: 60,
            seed: 0,
        }
    }
}

/// Complete description of a run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub population: PopulationConfig,
    pub graph: GraphConfig,
    pub epi: EpiConfig,
    pub labor: LaborConfig,
    pub vaccine: VaccineProtocol,
    pub testing: TestProtocol,
    pub stimulus: StimulusSchedule,
    pub behavior: BehaviorConfig,
    pub execution: ExecutionConfig,
}

/// One schema violation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfigIssue {
    /// JSON pointer of the offending value.
    pub pointer: String,
    pub message: String,
}

impl std::fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.pointer, self.message)
    }
}

struct Checker(Vec<ConfigIssue>);

impl Checker {
    fn fail(&mut self, pointer: impl Into<String>, message: impl Into<String>) {
        self.0.push(ConfigIssue {
            pointer: pointer.into(),
            message: message.into(),
        });
    }

    fn nonneg(&mut self, pointer: &str, v: f64) {
        if !(v >= 0.0 && v.is_finite()) {
            self.fail(
                pointer,
                format!("must be a finite nonnegative number, got {v}"),
            );
        }
    }

    fn prob(&mut self, pointer: &str, v: f64) {
        if !(0.0..=1.0).contains(&v) {
            self.fail(pointer, format!("must lie in [0, 1], got {v}"));
        }
    }
}

impl SimulationConfig {
    pub fn from_json(text: &str) -> Result<Self, EngineError> {
        serde_json::from_str(text).map_err(|e| {
            EngineError::Config(vec![ConfigIssue {
                pointer: String::new(),
                message: e.to_string(),
            }])
        })
    }

    pub fn months(&self) -> usize {
        self.execution.horizon_steps.div_ceil(30)
    }

    /// All semantic violations, each with its JSON pointer.
    pub fn issues(&self) -> Vec<ConfigIssue> {
        let mut c = Checker(Vec::new());
        let p = &self.population;
        if p.path.is_none() && p.size == 0 {
            c.fail("/population/size", "must be at least 1");
        }
        for (k, (s, w)) in p.household_sizes.iter().enumerate() {
            if *s == 0 {
                c.fail(
                    format!("/population/household_sizes/{k}/0"),
                    "household size must be at least 1",
                );
            }
            c.nonneg(&format!("/population/household_sizes/{k}/1"), *w);
        }
        if p.household_sizes.iter().map(|h| h.1).sum::<f64>() <= 0.0 {
            c.fail("/population/household_sizes", "needs a positive weight");
        }
        for (k, m) in p.marginals.iter().enumerate() {
            if let Err(e) = m.validate() {
                c.fail(format!("/population/marginals/{k}"), e.to_string());
            }
            if m.axis.parse::<Attribute>().is_err() {
                c.fail(
                    format!("/population/marginals/{k}/axis"),
                    format!("unknown attribute {}", m.axis),
                );
            }
        }

        let g = &self.graph;
        for (name, v) in [
            ("household_weight", g.household_weight),
            ("workplace_mean_degree", g.workplace_mean_degree),
            ("workplace_weight", g.workplace_weight),
            ("mobility_mean_degree", g.mobility_mean_degree),
            ("mobility_weight", g.mobility_weight),
        ] {
            c.nonneg(&format!("/graph/{name}"), v);
        }

        let e = &self.epi;
        if let Some(b) = e.beta {
            c.nonneg("/epi/beta", b);
        }
        if let Some(r) = e.r0 {
            c.nonneg("/epi/R0", r);
        }
        c.nonneg("/epi/default_susceptibility", e.default_susceptibility);
        for (band, v) in &e.susceptibility {
            c.nonneg(&format!("/epi/susceptibility/{band}"), *v);
        }
        c.prob("/epi/default_mortality", e.default_mortality);
        for (band, v) in &e.mortality {
            c.prob(&format!("/epi/mortality/{band}"), *v);
        }
        if e.infectious_period < 1 {
            c.fail("/epi/infectious_period", "must be at least 1");
        }
        if !(e.dt > 0.0) {
            c.fail("/epi/dt", "must be positive");
        }
        c.prob(
            "/epi/initial_infected_fraction",
            e.initial_infected_fraction,
        );

        let l = &self.labor;
        for (k, v) in l.iur.iter().enumerate() {
            c.prob(&format!("/labor/iur/{k}"), *v);
        }
        if l.iur.len() < self.months() {
            c.fail(
                "/labor/iur",
                format!(
                    "needs {} monthly values, has {}",
                    self.months(),
                    l.iur.len()
                ),
            );
        }

        let v = &self.vaccine;
        if v.dose_gap < 1 {
            c.fail("/vaccine/dose_gap", "must be at least 1");
        }
        c.prob("/vaccine/first_dose_efficacy", v.first_dose_efficacy);
        c.prob("/vaccine/second_dose_efficacy", v.second_dose_efficacy);
        c.prob("/vaccine/second_dose_dropout", v.second_dose_dropout);

        let t = &self.testing;
        c.prob("/testing/specificity", t.specificity);
        c.prob("/testing/sensitivity", t.sensitivity);
        c.prob("/testing/uptake", t.uptake);
        c.prob("/testing/background_rate", t.background_rate);

        for (k, ev) in self.stimulus.events.iter().enumerate() {
            c.nonneg(
                &format!("/stimulus/events/{k}/adult_amount"),
                ev.adult_amount,
            );
            c.nonneg(
                &format!("/stimulus/events/{k}/per_child_amount"),
                ev.per_child_amount,
            );
            if self.execution.horizon_steps > 0 && ev.step as usize >= self.execution.horizon_steps
            {
                c.fail(
                    format!("/stimulus/events/{k}/step"),
                    "lies beyond the horizon",
                );
            }
        }

        let b = &self.behavior;
        c.prob("/behavior/isolate_prob", b.isolate_prob);
        c.prob("/behavior/work_prob", b.work_prob);
        if b.samples_per_entry < 1 {
            c.fail("/behavior/samples_per_entry", "must be at least 1");
        }
        let mut seen = std::collections::HashSet::new();
        for (k, a) in b.archetype_attributes.iter().enumerate() {
            if !seen.insert(a) {
                c.fail(
                    format!("/behavior/archetype_attributes/{k}"),
                    format!("{a} listed twice"),
                );
            }
        }
        if b.mode == BehaviorMode::Agent && p.path.is_none() && p.size > b.agent_cap {
            c.fail(
                "/population/size",
                format!("per-agent behavior allows at most {} agents", b.agent_cap),
            );
        }
        if !(b.population_scale > 0.0) {
            c.fail("/behavior/population_scale", "must be positive");
        }
        c.nonneg("/behavior/context/cases_scale", b.context.cases_scale);
        if b.context.window == 0 {
            c.fail("/behavior/context/window", "must be at least 1");
        }
        c.0
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        let issues = self.issues();
        if issues.is_empty() {
            Ok(())
        } else {
            Err(EngineError::Config(issues))
        }
    }

    /// Config with every default written out.
    pub fn normalized_json(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// SHA-256 of the normalized config with sorted keys.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(&self.normalized_json()).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

/// Overrides keyed by dotted config path, e.g. `"epi.R0"`.
pub type ScenarioPatch = BTreeMap<String, Value>;

/// Returns a copy of `config` with the patch applied. Setting `epi.R0`
/// clears `epi.beta` and vice versa, so the patched quantity takes effect.
pub fn apply_patch(
    config: &SimulationConfig,
    patch: &ScenarioPatch,
) -> Result<SimulationConfig, EngineError> {
    let mut root = config.normalized_json();
    for (path, value) in patch {
        let parts: Vec<&str> = path.split('.').collect();
        let unknown = || EngineError::Patch(format!("unknown config path {path}"));
        let (last, parents) = parts.split_last().ok_or_else(unknown)?;
        let mut node = &mut root;
        for p in parents {
            node = node
                .get_mut(*p)
                .filter(|n| n.is_object())
                .ok_or_else(unknown)?;
        }
        let obj = node.as_object_mut().ok_or_else(unknown)?;
        if path == "epi.R0" {
            obj.remove("beta");
        } else if path == "epi.beta" {
            obj.remove("R0");
        }
        obj.insert(last.to_string(), value.clone());
        serde_json::from_value::<SimulationConfig>(root.clone())
            .map_err(|e| EngineError::Patch(format!("{path}: {e}")))?;
    }
    serde_json::from_value(root).map_err(|e| EngineError::Patch(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn defaults_round_trip() {
        let c = SimulationConfig::default();
        assert!(c.issues().is_empty(), "{:?}", c.issues());
        let back: SimulationConfig = serde_json::from_value(c.normalized_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(SimulationConfig::from_json("{}").unwrap(), c);
    }

    #[test]
    fn negative_beta_is_located() {
        let c = SimulationConfig::from_json(r#"{"epi": {"beta": -1}}"#).unwrap();
        let issues = c.issues();
        assert_eq!(issues.len(), 1);
        assert_eq!(issues[0].pointer, "/epi/beta");
    }

    #[test]
    fn all_issues_reported_together() {
        let c = SimulationConfig::from_json(
            r#"{"epi": {"beta": -1}, "vaccine": {"first_dose_efficacy": 2}}"#,
        )
        .unwrap();
        let ptrs: Vec<String> = c.issues().into_iter().map(|i| i.pointer).collect();
        assert_eq!(ptrs, vec!["/epi/beta", "/vaccine/first_dose_efficacy"]);
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(SimulationConfig::from_json(r#"{"epi": {"betta": 1}}"#).is_err());
    }

    #[test]
    fn patch_r0() {
        let base = SimulationConfig::from_json(r#"{"epi": {"beta": 0.2}}"#).unwrap();
        let patched = apply_patch(&base, &[("epi.R0".to_string(), json!(5.5))].into()).unwrap();
        assert_eq!(patched.epi.r0, Some(5.5));
        assert_eq!(patched.epi.beta, None);
        assert_eq!(base.epi.beta, Some(0.2));
        assert_ne!(patched.hash(), base.hash());
    }

    #[test]
    fn empty_patch_keeps_hash() {
        let base = SimulationConfig::default();
        assert_eq!(
            apply_patch(&base, &ScenarioPatch::new()).unwrap().hash(),
            base.hash()
        );
    }

    #[test]
    fn unknown_patch_path_is_named() {
        let base = SimulationConfig::default();
        let err = apply_patch(&base, &[("epi.nonsense".to_string(), json!(1))].into()).unwrap_err();
        assert!(err.to_string().contains("epi.nonsense"), "{err}");
        let err = apply_patch(&base, &[("nowhere.x".to_string(), json!(1))].into()).unwrap_err();
        assert!(err.to_string().contains("nowhere.x"), "{err}");
    }

    #[test]
    fn patch_duration_offset_and_schedule() {
        let base = SimulationConfig::default();
        let patch: ScenarioPatch = [
            (
                "behavior.context.duration_offset_weeks".to_string(),
                json!(60),
            ),
            (
                "stimulus.events".to_string(),
                json!([{"step": 3, "adult_amount": 600}]),
            ),
        ]
        .into();
        let p = apply_patch(&base, &patch).unwrap();
        assert_eq!(p.behavior.context.duration_offset_weeks, 60.0);
        assert_eq!(p.stimulus.events.len(), 1);
    }
}
