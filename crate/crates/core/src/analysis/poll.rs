use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::AnalysisError;
use crate::engine::Trajectory;
use crate::popgen::{income_value, Attribute, Population, Stage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    MedianIncome,
    IsolationRate,
    InfectionRate,
    UnemploymentRate,
    MeanWillingness,
}

impl Metric {
    pub const ALL: [Metric; 5] = [
        Metric::MedianIncome,
        Metric::IsolationRate,
        Metric::InfectionRate,
        Metric::UnemploymentRate,
        Metric::MeanWillingness,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::MedianIncome => "median_income",
            Metric::IsolationRate => "isolation_rate",
            Metric::InfectionRate => "infection_rate",
            Metric::UnemploymentRate => "unemployment_rate",
            Metric::MeanWillingness => "mean_willingness",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = AnalysisError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| AnalysisError::UnknownMetric(s.to_string()))
    }
}

/// Structured question about a population snapshot.
///
/// Without a window, metrics are read from the agent table: infection rate
/// is the share of agents that have left `S`, unemployment the share of
/// living agents not employed. A window `[from, to)` reads the
/// population-wide series of the trajectory instead and cannot be combined
/// with grouping or filtering.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PollQuery {
    pub group_by: Vec<String>,
    pub metric: String,
    /// Attribute name to accepted labels; an agent must match every entry.
    pub filter: BTreeMap<String, Vec<String>>,
    pub window: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PollRow {
    pub group: Vec<String>,
    /// Agents in the group.
    pub count: usize,
    /// `None` when the metric has an empty denominator in this group.
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PollTable {
    pub group_by: Vec<String>,
    pub metric: Metric,
    pub rows: Vec<PollRow>,
}

impl PollTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for g in &self.group_by {
            out.push_str(g);
            out.push(',');
        }
        out.push_str(&format!("count,{}\n", self.metric));
        for r in &self.rows {
            for g in &r.group {
                out.push_str(g);
                out.push(',');
            }
            let v = r.value.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{v}\n", r.count));
        }
        out
    }

    pub fn write(&self, dir: &std::path::Path) -> Result<(), AnalysisError> {
        super::write_outputs(dir, "poll", self, &self.to_csv())
    }
}

/// Element at rank `(n - 1) / 2` of the sorted values.
pub fn lower_median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    Some(values[(values.len() - 1) / 2])
}

fn attribute(name: &str) -> Result<Attribute, AnalysisError> {
    name.parse()
        .map_err(|_| AnalysisError::UnknownAttribute(name.to_string()))
}

fn sorted_mean(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    Some(values.iter().sum::<f64>() / values.len() as f64)
}

fn window_mean(series: &[f64], from: usize, to: usize) -> Option<f64> {
    let s = &series[from.min(series.len())..to.min(series.len())];
    (!s.is_empty()).then(|| s.iter().sum::<f64>() / s.len() as f64)
}

/// Answers `q` on an agent table and the trajectory that produced it.
/// Rows are ordered by group labels, so the result does not depend on
/// agent order.
pub fn poll(
    pop: &Population,
    traj: &Trajectory,
    q: &PollQuery,
) -> Result<PollTable, AnalysisError> {
    let metric: Metric = q.metric.parse()?;
    let group: Vec<Attribute> = q
        .group_by
        .iter()
        .map(|g| attribute(g))
        .collect::<Result<_, _>>()?;
    let filter: Vec<(Attribute, &Vec<String>)> = q
        .filter
        .iter()
        .map(|(k, v)| Ok((attribute(k)?, v)))
        .collect::<Result<_, AnalysisError>>()?;

    if let Some((from, to)) = q.window {
        if !group.is_empty() || !filter.is_empty() {
            return Err(AnalysisError::Query(
                "a time window applies to population-wide series only".into(),
            ));
        }
        if from >= to || to > traj.steps() {
            return Err(AnalysisError::Query(format!(
                "window [{from}, {to}) outside 0..{}",
                traj.steps()
            )));
        }
        let months = (from / 30, to.div_ceil(30));
        let value = match metric {
            Metric::MedianIncome => {
                return poll(
                    pop,
                    traj,
                    &PollQuery {
                        window: None,
                        ..q.clone()
                    },
                )
            }
            Metric::InfectionRate => Some(
                traj.new_infections[from..to].iter().sum::<f64>() / traj.n_agents.max(1) as f64,
            ),
            Metric::IsolationRate => window_mean(&traj.isolation_rate, from, to),
            Metric::UnemploymentRate => window_mean(&traj.unemployment_rate, months.0, months.1),
            Metric::MeanWillingness => window_mean(&traj.mean_willingness, months.0, months.1),
        };
        return Ok(PollTable {
            group_by: Vec::new(),
            metric,
            rows: vec![PollRow {
                group: Vec::new(),
                count: traj.n_agents,
                value,
            }],
        });
    }

    let income: Vec<f64> = if metric == Metric::MedianIncome {
        pop.labels
            .get(Attribute::IncomeBand)
            .iter()
            .map(|l| {
                income_value(l)
                    .ok_or_else(|| AnalysisError::Query(format!("income band {l} is not numeric")))
            })
            .collect::<Result<_, _>>()?
    } else {
        Vec::new()
    };
    let accepted: Vec<(Attribute, Vec<bool>)> = filter
        .iter()
        .map(|(a, labels)| {
            (
                *a,
                pop.labels
                    .get(*a)
                    .iter()
                    .map(|l| labels.contains(l))
                    .collect(),
            )
        })
        .collect();

    let mut groups: BTreeMap<Vec<String>, Vec<usize>> = BTreeMap::new();
    for i in 0..pop.len() {
        if accepted.iter().all(|(a, ok)| ok[pop.codes(*a)[i] as usize]) {
            let key = group.iter().map(|a| pop.label(*a, i).to_string()).collect();
            groups.entry(key).or_default().push(i);
        }
    }

    let rows = groups
        .into_iter()
        .map(|(key, members)| {
            let share = |hit: &dyn Fn(usize) -> bool, of: &dyn Fn(usize) -> bool| {
                let base = members.iter().filter(|&&i| of(i)).count();
                let k = members.iter().filter(|&&i| of(i) && hit(i)).count();
                (base > 0).then(|| k as f64 / base as f64)
            };
            let value = match metric {
                Metric::MedianIncome => {
                    let codes = pop.codes(Attribute::IncomeBand);
                    lower_median(
                        &mut members
                            .iter()
                            .map(|&i| income[codes[i] as usize])
                            .collect::<Vec<_>>(),
                    )
                }
                Metric::IsolationRate => share(&|i| pop.isolating[i], &|_| true),
                Metric::InfectionRate => share(&|i| pop.disease_stage[i] != Stage::S, &|_| true),
                Metric::UnemploymentRate => {
                    share(&|i| !pop.employed[i], &|i| pop.disease_stage[i] != Stage::M)
                }
                Metric::MeanWillingness => sorted_mean(
                    &mut members
                        .iter()
                        .map(|&i| pop.willingness[i])
                        .collect::<Vec<_>>(),
                ),
            };
            PollRow {
                group: key,
                count: members.len(),
                value,
            }
        })
        .collect();
    Ok(PollTable {
        group_by: q.group_by.clone(),
        metric,
        rows,
    })
}
