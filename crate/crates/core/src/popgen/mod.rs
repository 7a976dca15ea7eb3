//! Synthetic populations: marginal fitting, agent sampling, contact layers,
//! and the population CSV format.

mod graph;
mod io;
mod ipf;
mod sample;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use graph::{build_contact_graph, ContactGraph, GraphConfig, Layer};
pub use io::{read_marginals, read_population, write_population, PopulationIoError};
pub use ipf::{ipf_fit, IpfFit};
pub use sample::{sample_population, HouseholdSizeDist};

#[derive(Debug, Error, PartialEq)]
pub enum PopgenError {
    #[error("marginal for axis {axis} has no positive mass")]
    EmptyMarginal { axis: String },
    #[error("marginal for axis {axis}: {reason}")]
    BadMarginal { axis: String, reason: String },
    #[error("no marginal matches table axis {0}")]
    UnknownAxis(String),
    #[error(
        "infeasible: axis {axis} bin {bin} has target {target} but the seed has no mass there"
    )]
    Infeasible {
        axis: String,
        bin: String,
        target: f64,
    },
    #[error("IPF did not converge after {iterations} sweeps (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("joint table has no mass")]
    EmptyJoint,
    #[error("population size must be at least 1")]
    EmptyPopulation,
    #[error("invalid household size distribution: {0}")]
    HouseholdDist(String),
    #[error("joint table: {0}")]
    BadJoint(String),
}

/// Static attributes an agent carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    AgeBand,
    Gender,
    Borough,
    IncomeBand,
    Occupation,
}

impl Attribute {
    pub const ALL: [Attribute; 5] = [
        Attribute::AgeBand,
        Attribute::Gender,
        Attribute::Borough,
        Attribute::IncomeBand,
        Attribute::Occupation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Attribute::AgeBand => "age_band",
            Attribute::Gender => "gender",
            Attribute::Borough => "borough",
            Attribute::IncomeBand => "income_band",
            Attribute::Occupation => "occupation",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Attribute {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Attribute::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown attribute {s}"))
    }
}

/// One census-style marginal: counts per bin of a single attribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalTable {
    pub axis: String,
    pub bins: Vec<String>,
    pub counts: Vec<f64>,
}

impl MarginalTable {
    pub fn new(
        axis: impl Into<String>,
        bins: Vec<String>,
        counts: Vec<f64>,
    ) -> Result<Self, PopgenError> {
        let m = Self {
            axis: axis.into(),
            bins,
            counts,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), PopgenError> {
        let bad = |reason: &str| PopgenError::BadMarginal {
            axis: self.axis.clone(),
            reason: reason.into(),
        };
        if self.bins.len() != self.counts.len() {
            return Err(bad("bins and counts differ in length"));
        }
        let mut seen = std::collections::HashSet::new();
        if !self.bins.iter().all(|b| seen.insert(b)) {
            return Err(bad("bin labels are not unique"));
        }
        if self.counts.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(bad("counts must be finite and nonnegative"));
        }
        if self.total() <= 0.0 {
            return Err(PopgenError::EmptyMarginal {
                axis: self.axis.clone(),
            });
        }
        Ok(())
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }
}

/// Dense joint table over several attribute axes, row-major with the last
/// axis varying fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointTable {
    pub axes: Vec<String>,
    pub bins: Vec<Vec<String>>,
    pub cells: Vec<f64>,
}

impl JointTable {
    pub fn new(
        axes: Vec<String>,
        bins: Vec<Vec<String>>,
        cells: Vec<f64>,
    ) -> Result<Self, PopgenError> {
        if axes.len() != bins.len() {
            return Err(PopgenError::BadJoint(
                "axes and bins differ in length".into(),
            ));
        }
        let size: usize = bins.iter().map(Vec::len).product();
        if size != cells.len() {
            return Err(PopgenError::BadJoint(format!(
                "expected {size} cells, got {}",
                cells.len()
            )));
        }
        if cells.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(PopgenError::BadJoint(
                "cells must be finite and nonnegative".into(),
            ));
        }
        Ok(Self { axes, bins, cells })
    }

    /// All-ones table over the bins of the given marginals.
    pub fn uniform_seed(marginals: &[MarginalTable]) -> Self {
        let axes = marginals.iter().map(|m| m.axis.clone()).collect();
        let bins: Vec<Vec<String>> = marginals.iter().map(|m| m.bins.clone()).collect();
        let size = bins.iter().map(Vec::len).product();
        Self {
            axes,
            bins,
            cells: vec![1.0; size],
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        self.bins.iter().map(Vec::len).collect()
    }

    pub fn total(&self) -> f64 {
        self.cells.iter().sum()
    }

    /// Sum over all axes except `axis`.
    pub fn marginal(&self, axis: usize) -> Vec<f64> {
        let shape = self.shape();
        let inner: usize = shape[axis + 1..].iter().product();
        let n = shape[axis];
        let mut out = vec![0.0; n];
        for (k, &c) in self.cells.iter().enumerate() {
            out[(k / inner) % n] += c;
        }
        out
    }

    pub fn axis_index(&self, name: &str) -> Option<usize> {
        self.axes.iter().position(|a| a == name)
    }

    /// Bin index per axis for flat cell `k`.
    pub fn unravel(&self, mut k: usize) -> Vec<usize> {
        let shape = self.shape();
        let mut idx = vec![0; shape.len()];
        for a in (0..shape.len()).rev() {
            idx[a] = k % shape[a];
            k /= shape[a];
        }
        idx
    }
}

/// Disease compartment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Stage {
    S = 0,
    E = 1,
    I = 2,
    R = 3,
    M = 4,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::S, Stage::E, Stage::I, Stage::R, Stage::M];

    pub fn letter(self) -> char {
        ['S', 'E', 'I', 'R', 'M'][self as usize]
    }

    pub fn from_letter(c: &str) -> Option<Stage> {
        match c {
            "S" => Some(Stage::S),
            "E" => Some(Stage::E),
            "I" => Some(Stage::I),
            "R" => Some(Stage::R),
            "M" => Some(Stage::M),
            _ => None,
        }
    }
}

/// Category dictionaries for each static attribute.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttributeLabels {
    pub age_band: Vec<String>,
    pub gender: Vec<String>,
    pub borough: Vec<String>,
    pub income_band: Vec<String>,
    pub occupation: Vec<String>,
}

impl AttributeLabels {
    pub fn get(&self, attr: Attribute) -> &[String] {
        match attr {
            Attribute::AgeBand => &self.age_band,
            Attribute::Gender => &self.gender,
            Attribute::Borough => &self.borough,
            Attribute::IncomeBand => &self.income_band,
            Attribute::Occupation => &self.occupation,
        }
    }

    pub fn get_mut(&mut self, attr: Attribute) -> &mut Vec<String> {
        match attr {
            Attribute::AgeBand => &mut self.age_band,
            Attribute::Gender => &mut self.gender,
            Attribute::Borough => &mut self.borough,
            Attribute::IncomeBand => &mut self.income_band,
            Attribute::Occupation => &mut self.occupation,
        }
    }
}

/// Structure-of-arrays agent table.
///
/// Static attributes are stored as `u16` codes into [`AttributeLabels`].
/// Agents of one household occupy a contiguous index range.
#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    /// Persistent agent tag; random streams are keyed by it, not by row.
    pub agent_id: Vec<u64>,
    pub labels: AttributeLabels,
    attrs: [Vec<u16>; 5],
    pub household_id: Vec<u32>,
    pub disease_stage: Vec<Stage>,
    pub stage_timer: Vec<u16>,
    pub doses_received: Vec<u8>,
    /// Step of the most recent dose, `-1` if none.
    pub last_dose_step: Vec<i32>,
    pub employed: Vec<bool>,
    pub willingness: Vec<f64>,
    pub isolating: Vec<bool>,
}

impl Population {
    /// Population of susceptible agents with the given static attributes.
    pub fn from_static(
        agent_id: Vec<u64>,
        labels: AttributeLabels,
        attrs: [Vec<u16>; 5],
        household_id: Vec<u32>,
    ) -> Self {
        let n = agent_id.len();
        assert!(attrs.iter().all(|a| a.len() == n) && household_id.len() == n);
        Self {
            agent_id,
            labels,
            attrs,
            household_id,
            disease_stage: vec![Stage::S; n],
            stage_timer: vec![0; n],
            doses_received: vec![0; n],
            last_dose_step: vec![-1; n],
            employed: vec![true; n],
            willingness: vec![1.0; n],
            isolating: vec![false; n],
        }
    }

    pub fn len(&self) -> usize {
        self.agent_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.agent_id.is_empty()
    }

    pub fn codes(&self, attr: Attribute) -> &[u16] {
        &self.attrs[attr.index()]
    }

    pub fn label(&self, attr: Attribute, agent: usize) -> &str {
        &self.labels.get(attr)[self.attrs[attr.index()][agent] as usize]
    }

    pub fn cardinality(&self, attr: Attribute) -> usize {
        self.labels.get(attr).len()
    }

    /// Household member ranges `[start, end)` in agent order.
    pub fn households(&self) -> Vec<std::ops::Range<usize>> {
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..=self.len() {
            if i == self.len() || self.household_id[i] != self.household_id[start] {
                out.push(start..i);
                start = i;
            }
        }
        out
    }

    /// Counts per disease stage, in `Stage::ALL` order.
    pub fn stage_counts(&self) -> [usize; 5] {
        let mut c = [0; 5];
        for s in &self.disease_stage {
            c[*s as usize] += 1;
        }
        c
    }

    /// Reorders agents by `perm` (new row `k` is old row `perm[k]`).
    /// Household ids keep their values, so contiguity only holds if `perm`
    /// moves whole households.
    pub fn permuted(&self, perm: &[usize]) -> Population {
        fn take<T: Clone>(v: &[T], perm: &[usize]) -> Vec<T> {
            perm.iter().map(|&i| v[i].clone()).collect()
        }
        Population {
            agent_id: take(&self.agent_id, perm),
            labels: self.labels.clone(),
            attrs: std::array::from_fn(|a| take(&self.attrs[a], perm)),
            household_id: take(&self.household_id, perm),
            disease_stage: take(&self.disease_stage, perm),
            stage_timer: take(&self.stage_timer, perm),
            doses_received: take(&self.doses_received, perm),
            last_dose_step: take(&self.last_dose_step, perm),
            employed: take(&self.employed, perm),
            willingness: take(&self.willingness, perm),
            isolating: take(&self.isolating, perm),
        }
    }
}

/// Numeric monthly income encoded by an income band label: a plain number,
/// a range `LOtHI` (midpoint), or an open band `LOp`.
pub fn income_value(label: &str) -> Option<f64> {
    if let Ok(v) = label.parse::<f64>() {
        return Some(v);
    }
    if let Some((lo, hi)) = label.split_once('t') {
        if let (Ok(a), Ok(b)) = (lo.parse::<f64>(), hi.parse::<f64>()) {
            return Some(0.5 * (a + b));
        }
    }
    label.strip_suffix('p').and_then(|lo| lo.parse().ok())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn marginal_validation() {
        assert!(
            MarginalTable::new("age_band", vec!["a".into(), "a".into()], vec![1.0, 1.0]).is_err()
        );
        assert!(MarginalTable::new("age_band", vec!["a".into()], vec![0.0]).is_err());
        assert!(MarginalTable::new("age_band", vec!["a".into()], vec![-1.0]).is_err());
        assert!(
            MarginalTable::new("age_band", vec!["a".into(), "b".into()], vec![1.0, 0.0]).is_ok()
        );
    }

    #[test]
    fn joint_marginals() {
        let t = JointTable::new(
            vec!["x".into(), "y".into()],
            vec![
                vec!["a".into(), "b".into()],
                vec!["c".into(), "d".into(), "e".into()],
            ],
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
        )
        .unwrap();
        assert_eq!(t.marginal(0), vec![6.0, 15.0]);
        assert_eq!(t.marginal(1), vec![5.0, 7.0, 9.0]);
        assert_eq!(t.unravel(4), vec![1, 1]);
    }

    #[test]
    fn income_labels() {
        assert_eq!(income_value("168"), Some(168.0));
        assert_eq!(income_value("1000t3000"), Some(2000.0));
        assert_eq!(income_value("8000p"), Some(8000.0));
        assert_eq!(income_value("low"), None);
    }
}
