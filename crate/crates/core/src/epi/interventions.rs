use serde::{Deserialize, Serialize};

use crate::popgen::{Attribute, Population, Stage};
use crate::rng::{Channel, RngStream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaccineProtocol {
    /// Minimum steps between first and second dose.
    pub dose_gap: u32,
    pub first_dose_efficacy: f64,
    pub second_dose_efficacy: f64,
    pub daily_supply: u64,
    /// Probability that an agent never returns for the second dose.
    pub second_dose_dropout: f64,
    pub start_step: u32,
}

impl Default for VaccineProtocol {
    fn default() -> Self {
        Self {
            dose_gap: 21,
            first_dose_efficacy: 0.5,
            second_dose_efficacy: 0.9,
            daily_supply: 0,
            second_dose_dropout: 0.0,
            start_step: 0,
        }
    }
}

/// Whether dropout is drawn per agent or applied as an expectation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Allocation {
    Sampled,
    Expected,
}

fn age_lower_bound(label: &str) -> Option<u32> {
    let digits: String = label.chars().take_while(|c| c.is_ascii_digit()).collect();
    digits.parse().ok()
}

/// Vaccination order: oldest age band first, then by agent tag. Bands are
/// ranked by the number their label starts with, else by code.
pub fn priority_order(pop: &Population) -> Vec<u32> {
    let labels = pop.labels.get(Attribute::AgeBand);
    let rank: Vec<(u32, u16)> = labels
        .iter()
        .enumerate()
        .map(|(c, l)| (age_lower_bound(l).unwrap_or(0), c as u16))
        .collect();
    let ages = pop.codes(Attribute::AgeBand);
    let mut order: Vec<u32> = (0..pop.len() as u32).collect();
    order.sort_by(|&a, &b| {
        let ka = rank[ages[a as usize] as usize];
        let kb = rank[ages[b as usize] as usize];
        kb.cmp(&ka)
            .then(pop.agent_id[a as usize].cmp(&pop.agent_id[b as usize]))
    });
    order
}

fn drops_out(seed: u64, agent_id: u64, dropout: f64) -> bool {
    RngStream::new(seed, 0, agent_id, Channel::Vaccine).uniform() < dropout
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct VaccinationOutcome {
    pub first_doses: u64,
    pub second_doses: u64,
}

/// Hands out up to `daily_supply` doses in priority order. Due second doses
/// are served before new first doses. Under [`Allocation::Expected`] nobody
/// is dropped; instead each second dose costs `1 − dropout` of the supply
/// and confers the expected efficacy.
#[allow(clippy::too_many_arguments)]
pub fn vaccination_step(
    doses: &mut [u8],
    last_dose_step: &mut [i32],
    agent_id: &[u64],
    order: &[u32],
    protocol: &VaccineProtocol,
    step: u32,
    seed: u64,
    mode: Allocation,
) -> VaccinationOutcome {
    let mut out = VaccinationOutcome::default();
    if protocol.daily_supply == 0 || step < protocol.start_step {
        return out;
    }
    let mut budget = protocol.daily_supply as f64;
    let cost2 = match mode {
        Allocation::Sampled => 1.0,
        Allocation::Expected => 1.0 - protocol.second_dose_dropout,
    };
    for &i in order {
        let i = i as usize;
        if doses[i] != 1 || (step as i64 - last_dose_step[i] as i64) < protocol.dose_gap as i64 {
            continue;
        }
        if mode == Allocation::Sampled && drops_out(seed, agent_id[i], protocol.second_dose_dropout)
        {
            continue;
        }
        if budget < cost2 || budget <= 0.0 {
            break;
        }
        budget -= cost2;
        doses[i] = 2;
        last_dose_step[i] = step as i32;
        out.second_doses += 1;
    }
    for &i in order {
        if budget < 1.0 {
            break;
        }
        let i = i as usize;
        if doses[i] == 0 {
            budget -= 1.0;
            doses[i] = 1;
            last_dose_step[i] = step as i32;
            out.first_doses += 1;
        }
    }
    out
}

/// Protection from infection currently in force.
pub fn efficacy_in_force(doses: u8, protocol: &VaccineProtocol, mode: Allocation) -> f64 {
    match (doses, mode) {
        (0, _) => 0.0,
        (1, _) => protocol.first_dose_efficacy,
        (_, Allocation::Sampled) => protocol.second_dose_efficacy,
        (_, Allocation::Expected) => {
            let keep = 1.0 - protocol.second_dose_dropout;
            protocol.first_dose_efficacy
                + keep * (protocol.second_dose_efficacy - protocol.first_dose_efficacy)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    Antigen,
    Pcr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TestProtocol {
    pub kind: TestKind,
    pub specificity: f64,
    pub sensitivity: f64,
    pub result_delay: u32,
    /// Probability that a newly symptomatic agent gets tested.
    pub uptake: f64,
    /// Per-step probability that an agent without symptoms gets tested.
    pub background_rate: f64,
}

impl Default for TestProtocol {
    fn default() -> Self {
        Self {
            kind: TestKind::Antigen,
            specificity: 0.98,
            sensitivity: 0.8,
            result_delay: 1,
            uptake: 0.0,
            background_rate: 0.0,
        }
    }
}

impl TestProtocol {
    pub fn pcr() -> Self {
        Self {
            kind: TestKind::Pcr,
            specificity: 0.99,
            sensitivity: 0.95,
            result_delay: 2,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TestEvent {
    pub agent: u32,
    pub infected: bool,
    pub positive: bool,
    /// Step at which the result is known.
    pub result_step: u32,
}

/// Test results for the given agents.
pub fn test_outcomes(
    agents: &[u32],
    infected: &[bool],
    agent_id: &[u64],
    protocol: &TestProtocol,
    step: u32,
    seed: u64,
) -> Vec<TestEvent> {
    agents
        .iter()
        .map(|&a| {
            let inf = infected[a as usize];
            let u = RngStream::new(seed, step as u64, agent_id[a as usize], Channel::Test)
                .uniform_at(1);
            let positive = if inf {
                u < protocol.sensitivity
            } else {
                u < 1.0 - protocol.specificity
            };
            TestEvent {
                agent: a,
                infected: inf,
                positive,
                result_step: step + protocol.result_delay,
            }
        })
        .collect()
}

/// Tests newly symptomatic agents (with probability `uptake`) and living
/// agents without symptoms (with probability `background_rate`).
pub fn testing_step(
    pop: &Population,
    newly_symptomatic: &[u32],
    protocol: &TestProtocol,
    step: u32,
    seed: u64,
) -> Vec<TestEvent> {
    let pick = |i: usize, rate: f64| {
        RngStream::new(seed, step as u64, pop.agent_id[i], Channel::Test).uniform_at(0) < rate
    };
    let mut tested: Vec<u32> = newly_symptomatic
        .iter()
        .copied()
        .filter(|&i| pick(i as usize, protocol.uptake))
        .collect();
    if protocol.background_rate > 0.0 {
        for i in 0..pop.len() {
            let s = pop.disease_stage[i];
            if s != Stage::I && s != Stage::M && pick(i, protocol.background_rate) {
                tested.push(i as u32);
            }
        }
    }
    let infected: Vec<bool> = pop.disease_stage.iter().map(|&s| s == Stage::I).collect();
    test_outcomes(&tested, &infected, &pop.agent_id, protocol, step, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StimulusEvent {
    pub step: u32,
    pub adult_amount: f64,
    #[serde(default)]
    pub per_child_amount: f64,
    /// Income bands that qualify; all when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eligible_income_bands: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StimulusSchedule {
    pub events: Vec<StimulusEvent>,
    /// Age bands counted as children.
    pub child_age_bands: Vec<String>,
}

impl Default for StimulusSchedule {
    fn default() -> Self {
        Self {
            events: Vec::new(),
            child_age_bands: vec!["0t17".into(), "0t19".into()],
        }
    }
}

/// Adult amount of the events falling in the 30-step month containing `step`.
pub fn payment_in_month(schedule: &StimulusSchedule, step: u32) -> f64 {
    let m = step / 30;
    schedule
        .events
        .iter()
        .filter(|e| e.step / 30 == m)
        .map(|e| e.adult_amount)
        .sum()
}

/// Payment per agent at `step`: each eligible adult receives the adult
/// amount plus the child amount for every child in the household.
pub fn stimulus_step(pop: &Population, schedule: &StimulusSchedule, step: u32) -> Vec<f64> {
    let mut pay = vec![0.0; pop.len()];
    let events: Vec<&StimulusEvent> = schedule.events.iter().filter(|e| e.step == step).collect();
    if events.is_empty() {
        return pay;
    }
    let age_labels = pop.labels.get(Attribute::AgeBand);
    let child_code: Vec<bool> = age_labels
        .iter()
        .map(|l| schedule.child_age_bands.contains(l))
        .collect();
    let ages = pop.codes(Attribute::AgeBand);
    let is_child = |i: usize| child_code[ages[i] as usize];
    for hh in pop.households() {
        let children = hh.clone().filter(|&i| is_child(i)).count() as f64;
        for i in hh {
            if is_child(i) || pop.disease_stage[i] == Stage::M {
                continue;
            }
            for e in &events {
                let eligible = e.eligible_income_bands.as_ref().is_none_or(|bands| {
                    bands
                        .iter()
                        .any(|b| b == pop.label(Attribute::IncomeBand, i))
                });
                if eligible {
                    pay[i] += e.adult_amount + e.per_child_amount * children;
                }
            }
        }
    }
    pay
}
