//! Agent decisions: prompts, providers, and archetype-level probability
//! estimates that every agent of an archetype samples from.

mod context;
mod prompt;
mod provider;
mod remote;

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use context::{
    cases_bucket, context_from_trajectory, ChangeBin, ContextBin, ContextConfig, ContextKey,
    InitialContext,
};
pub use prompt::{format_decision, parse_decision, Action, Decision, PromptTemplate};
pub use provider::{
    months_in_prompt, DecisionProvider, FatigueProvider, HeuristicProvider, MockEntry,
    MockTableProvider, ProviderError, ProviderHandle, Query, Response,
};
pub use remote::RemoteProvider;

use crate::popgen::{Attribute, Population};
use crate::rng::{Channel, RngStream};
use crate::tape::Var;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BehaviorError {
    #[error("template error: {0}")]
    Template(String),
    #[error("unparseable reply {0:?}")]
    Parse(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("no probability for archetype {key} under {context:?} ({action:?})")]
    MissingEntry {
        key: String,
        context: ContextKey,
        action: Action,
    },
    #[error("samples per entry must be at least 1")]
    ZeroSamples,
}

/// Attribute values identifying an archetype.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ArchetypeKey {
    pub values: BTreeMap<Attribute, String>,
}

impl std::fmt::Display for ArchetypeKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self
            .values
            .iter()
            .map(|(a, v)| format!("{a}={v}"))
            .collect();
        write!(f, "({})", parts.join(", "))
    }
}

/// Every combination of the chosen attributes, and each agent's archetype.
#[derive(Debug, Clone)]
pub struct ArchetypeSpace {
    pub attributes: Vec<Attribute>,
    pub keys: Vec<ArchetypeKey>,
    pub agent_key: Arc<Vec<u32>>,
}

impl ArchetypeSpace {
    /// Archetypes are the full product of the attributes' label sets, so the
    /// key count does not depend on which combinations occur.
    pub fn from_attributes(pop: &Population, attributes: &[Attribute]) -> Self {
        let cards: Vec<usize> = attributes.iter().map(|&a| pop.cardinality(a)).collect();
        let k: usize = cards.iter().product();
        let mut keys = Vec::with_capacity(k);
        for flat in 0..k {
            let mut rem = flat;
            let mut key = ArchetypeKey::default();
            for (i, &a) in attributes.iter().enumerate().rev() {
                let code = rem % cards[i];
                rem /= cards[i];
                key.values.insert(a, pop.labels.get(a)[code].clone());
            }
            keys.push(key);
        }
        let agent_key = (0..pop.len())
            .map(|i| {
                attributes.iter().enumerate().fold(0usize, |acc, (j, &a)| {
                    acc * cards[j] + pop.codes(a)[i] as usize
                }) as u32
            })
            .collect();
        Self {
            attributes: attributes.to_vec(),
            keys,
            agent_key: Arc::new(agent_key),
        }
    }

    /// One archetype per agent carrying all of its attributes.
    pub fn per_agent(pop: &Population) -> Self {
        let keys = (0..pop.len())
            .map(|i| ArchetypeKey {
                values: Attribute::ALL
                    .iter()
                    .map(|&a| (a, pop.label(a, i).to_string()))
                    .collect(),
            })
            .collect();
        Self {
            attributes: Attribute::ALL.to_vec(),
            keys,
            agent_key: Arc::new((0..pop.len() as u32).collect()),
        }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

/// Estimated yes-probabilities per (archetype, context, action).
#[derive(Debug, Clone, Default)]
pub struct ArchetypeTable {
    entries: HashMap<(u32, ContextKey, Action), f64>,
}

impl ArchetypeTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: u32, ctx: ContextKey, action: Action, p: f64) {
        assert!((0.0..=1.0).contains(&p), "probability {p} outside [0, 1]");
        self.entries.insert((key, ctx, action), p);
    }

    pub fn get(&self, key: u32, ctx: ContextKey, action: Action) -> Option<f64> {
        self.entries.get(&(key, ctx, action)).copied()
    }

    pub fn contains(&self, ctx: ContextKey, action: Action, n_keys: usize) -> bool {
        (0..n_keys as u32).all(|k| self.entries.contains_key(&(k, ctx, action)))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Per-archetype probabilities for one context, in key order.
    pub fn slice(
        &self,
        space: &ArchetypeSpace,
        ctx: ContextKey,
        action: Action,
    ) -> Result<Vec<f64>, BehaviorError> {
        (0..space.len() as u32)
            .map(|k| {
                self.get(k, ctx, action)
                    .ok_or_else(|| BehaviorError::MissingEntry {
                        key: space.keys[k as usize].to_string(),
                        context: ctx,
                        action,
                    })
            })
            .collect()
    }
}

/// Fills the table slice for `ctx` and `action`: each archetype's
/// probability is the yes-fraction of `m` provider replies, so the provider
/// is called `K · m` times regardless of population size.
pub fn estimate_archetype_probs(
    provider: &ProviderHandle,
    template: &PromptTemplate,
    space: &ArchetypeSpace,
    ctx: &ContextBin,
    action: Action,
    m: u32,
    table: &mut ArchetypeTable,
) -> Result<(), BehaviorError> {
    if m == 0 {
        return Err(BehaviorError::ZeroSamples);
    }
    let prompts = space
        .keys
        .iter()
        .map(|k| template.render(action, k, ctx))
        .collect::<Result<Vec<_>, _>>()?;
    let estimate = |user: &String| -> Result<f64, BehaviorError> {
        let mut yes = 0u32;
        for j in 0..m {
            let q = Query {
                system: &template.system_text,
                user,
                action,
                step: ctx.step,
                sample: j,
            };
            if provider.decide(&q)?.answer {
                yes += 1;
            }
        }
        Ok(yes as f64 / m as f64)
    };
    let probs: Vec<Result<f64, BehaviorError>> =
        provider.install(|| prompts.par_iter().map(estimate).collect());
    let key = ctx.key();
    for (k, p) in probs.into_iter().enumerate() {
        table.insert(k as u32, key, action, p?);
    }
    Ok(())
}

fn action_draw(seed: u64, step: u32, agent_id: u64, action: Action) -> f64 {
    RngStream::new(seed, step as u64, agent_id, Channel::Behavior).uniform_at(action as u64)
}

/// Per-agent probabilities looked up from the table.
pub fn agent_probabilities(
    table: &ArchetypeTable,
    space: &ArchetypeSpace,
    ctx: &ContextBin,
    action: Action,
) -> Result<Vec<f64>, BehaviorError> {
    let per_key = table.slice(space, ctx.key(), action)?;
    Ok(space
        .agent_key
        .iter()
        .map(|&k| per_key[k as usize])
        .collect())
}

/// Draws each agent's action from its archetype's probability.
pub fn sample_actions(
    table: &ArchetypeTable,
    space: &ArchetypeSpace,
    ctx: &ContextBin,
    action: Action,
    agent_ids: &[u64],
    seed: u64,
) -> Result<Vec<bool>, BehaviorError> {
    let p = agent_probabilities(table, space, ctx, action)?;
    Ok(sample_bernoulli(&p, agent_ids, seed, ctx.step, action))
}

/// Hard draws against per-agent streams, keyed by agent tag.
pub fn sample_bernoulli(
    p: &[f64],
    agent_ids: &[u64],
    seed: u64,
    step: u32,
    action: Action,
) -> Vec<bool> {
    p.par_iter()
        .zip(agent_ids.par_iter())
        .map(|(&pi, &id)| action_draw(seed, step, id, action) < pi)
        .collect()
}

/// Taped variant: `key_probs` holds one probability per archetype; the
/// result is the 0/1 action vector with a straight-through gradient back to
/// `key_probs`.
pub fn sample_actions_st<'t>(
    key_probs: Var<'t>,
    space: &ArchetypeSpace,
    agent_ids: &[u64],
    seed: u64,
    step: u32,
    action: Action,
) -> Var<'t> {
    let p = key_probs.gather(&space.agent_key);
    let hard = p.with_value(|ps| sample_bernoulli(ps, agent_ids, seed, step, action));
    p.tape()
        .straight_through(p, hard.into_iter().map(|b| b as u8 as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::popgen::{sample_population, HouseholdSizeDist, JointTable};
    use crate::tape::Tape;

    fn pop(n: usize) -> Population {
        let j = JointTable::new(
            vec!["age_band".into(), "gender".into()],
            vec![
                vec!["20t29".into(), "60t69".into(), "70p".into()],
                vec!["F".into(), "M".into()],
            ],
            vec![1.0, 1.0, 1.0, 1.0, 1.0, 0.0],
        )
        .unwrap();
        sample_population(&j, n, &HouseholdSizeDist::point(1), 5).unwrap()
    }

    fn ctx() -> ContextBin {
        ContextBin {
            cases: 10.0,
            change_pct: 0.0,
            duration_months: 3,
            payment: 0.0,
            step: 4,
        }
    }

    fn heuristic(p: f64) -> ProviderHandle {
        ProviderHandle::new(Box::new(HeuristicProvider { p, seed: 9 }))
    }

    #[test]
    fn key_space_is_full_product() {
        let p = pop(50);
        let s = ArchetypeSpace::from_attributes(&p, &[Attribute::AgeBand, Attribute::Gender]);
        assert_eq!(s.len(), 6);
        for i in 0..p.len() {
            let k = &s.keys[s.agent_key[i] as usize];
            assert_eq!(
                k.values[&Attribute::AgeBand],
                p.label(Attribute::AgeBand, i)
            );
            assert_eq!(k.values[&Attribute::Gender], p.label(Attribute::Gender, i));
        }
    }

    #[test]
    fn degenerate_provider_probabilities() {
        let p = pop(40);
        let s = ArchetypeSpace::from_attributes(&p, &[Attribute::AgeBand]);
        for (q, want) in [(1.0, true), (0.0, false)] {
            let mut t = ArchetypeTable::new();
            let h = heuristic(q);
            estimate_archetype_probs(
                &h,
                &PromptTemplate::default(),
                &s,
                &ctx(),
                Action::Isolate,
                10,
                &mut t,
            )
            .unwrap();
            assert_eq!(h.calls(), 30);
            assert!(t
                .slice(&s, ctx().key(), Action::Isolate)
                .unwrap()
                .iter()
                .all(|&x| x == q));
            let acts = sample_actions(&t, &s, &ctx(), Action::Isolate, &p.agent_id, 1).unwrap();
            assert!(acts.iter().all(|&a| a == want));
        }
    }

    #[test]
    fn heuristic_estimate_concentrates() {
        let p = pop(10);
        let s = ArchetypeSpace::from_attributes(&p, &[]);
        let mut t = ArchetypeTable::new();
        estimate_archetype_probs(
            &heuristic(0.5),
            &PromptTemplate::default(),
            &s,
            &ctx(),
            Action::Work,
            10_000,
            &mut t,
        )
        .unwrap();
        let est = t.get(0, ctx().key(), Action::Work).unwrap();
        assert!((est - 0.5).abs() <= 0.015, "{est}");
    }

    #[test]
    fn scripted_mock_gives_exact_fraction() {
        let p = pop(10);
        let s = ArchetypeSpace::from_attributes(&p, &[]);
        let mut answers = vec!["Yes. a.".to_string(); 7];
        answers.extend(vec!["No. b.".to_string(); 3]);
        let m = MockTableProvider::new(vec![MockEntry {
            prompt_contains: "isolate".into(),
            answers,
        }])
        .unwrap();
        let h = ProviderHandle::new(Box::new(m)).with_parallelism(2);
        let mut t = ArchetypeTable::new();
        estimate_archetype_probs(
            &h,
            &PromptTemplate::default(),
            &s,
            &ctx(),
            Action::Isolate,
            10,
            &mut t,
        )
        .unwrap();
        assert_eq!(t.get(0, ctx().key(), Action::Isolate), Some(0.7));
    }

    #[test]
    fn sampled_fraction_matches_probability() {
        let n = 100_000;
        let ids: Vec<u64> = (0..n).collect();
        let f = sample_bernoulli(&vec![0.3; n as usize], &ids, 2, 0, Action::Isolate)
            .iter()
            .filter(|&&b| b)
            .count() as f64
            / n as f64;
        assert!((f - 0.3).abs() <= 0.0043, "{f}");
    }

    #[test]
    fn missing_entry_names_archetype() {
        let p = pop(10);
        let s = ArchetypeSpace::from_attributes(&p, &[Attribute::Gender]);
        let err = sample_actions(
            &ArchetypeTable::new(),
            &s,
            &ctx(),
            Action::Work,
            &p.agent_id,
            0,
        )
        .unwrap_err();
        match err {
            BehaviorError::MissingEntry { key, action, .. } => {
                assert_eq!(key, "(gender=F)");
                assert_eq!(action, Action::Work);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn straight_through_reaches_archetype_probabilities() {
        let p = pop(200);
        let s = ArchetypeSpace::from_attributes(&p, &[Attribute::Gender]);
        let tape = Tape::new();
        let kp = tape.leaf(vec![0.4, 0.6]);
        let a = sample_actions_st(kp, &s, &p.agent_id, 3, 0, Action::Isolate);
        let g = tape.backward(a.sum()).unwrap().wrt(kp).unwrap();
        let females = s.agent_key.iter().filter(|&&k| k == 0).count() as f64;
        assert_eq!(g, vec![females, p.len() as f64 - females]);
    }

    #[test]
    fn per_agent_space_has_one_key_per_agent() {
        let p = pop(25);
        let s = ArchetypeSpace::per_agent(&p);
        assert_eq!(s.len(), 25);
        assert_eq!(s.keys[3].values.len(), 5);
    }
}
