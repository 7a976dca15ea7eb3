use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::prompt::{parse_decision, Action, Decision};
use super::BehaviorError;
use crate::rng::{stable_hash, Channel, RngStream};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProviderError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("endpoint returned status {status}: {body}")]
    Protocol { status: u16, body: String },
    #[error("no mock entry matches the prompt")]
    NoMockEntry,
    #[error("provider configuration: {0}")]
    Config(String),
}

/// One request to a decision provider.
#[derive(Debug, Clone, Copy)]
pub struct Query<'a> {
    pub system: &'a str,
    pub user: &'a str,
    pub action: Action,
    pub step: u32,
    /// Index of the repeated sample within an archetype estimate.
    pub sample: u32,
}

/// Source of yes/no replies.
pub trait DecisionProvider: Send + Sync {
    /// Returns the raw reply text.
    fn complete(&self, q: &Query<'_>) -> Result<String, ProviderError>;
}

fn reply(yes: bool) -> String {
    if yes {
        "Yes. Chosen by the heuristic provider.".to_string()
    } else {
        "No. Chosen by the heuristic provider.".to_string()
    }
}

fn query_uniform(seed: u64, q: &Query<'_>) -> f64 {
    let h = stable_hash(q.user.as_bytes());
    RngStream::keyed(seed, q.step as u64, h, Channel::Provider).uniform_at(q.sample as u64)
}

/// Answers "Yes" with a fixed probability, independently per query.
#[derive(Debug, Clone)]
pub struct HeuristicProvider {
    pub p: f64,
    pub seed: u64,
}

impl DecisionProvider for HeuristicProvider {
    fn complete(&self, q: &Query<'_>) -> Result<String, ProviderError> {
        Ok(reply(query_uniform(self.seed, q) < self.p))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockEntry {
    pub prompt_contains: String,
    pub answers: Vec<String>,
}

/// Scripted replies: the first entry whose substring occurs in the prompt
/// answers with `answers[sample % len]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MockTableProvider {
    pub entries: Vec<MockEntry>,
}

impl MockTableProvider {
    pub fn new(entries: Vec<MockEntry>) -> Result<Self, ProviderError> {
        if let Some(e) = entries.iter().find(|e| e.answers.is_empty()) {
            return Err(ProviderError::Config(format!(
                "entry {:?} has no answers",
                e.prompt_contains
            )));
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self, ProviderError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ProviderError::Config(format!("{}: {e}", path.display())))?;
        let entries: Vec<MockEntry> = serde_json::from_str(&text)
            .map_err(|e| ProviderError::Config(format!("{}: {e}", path.display())))?;
        Self::new(entries)
    }
}

impl DecisionProvider for MockTableProvider {
    fn complete(&self, q: &Query<'_>) -> Result<String, ProviderError> {
        let e = self
            .entries
            .iter()
            .find(|e| q.user.contains(&e.prompt_contains))
            .ok_or(ProviderError::NoMockEntry)?;
        Ok(e.answers[q.sample as usize % e.answers.len()].clone())
    }
}

/// Linear response `clamp(base − slope · months, 0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub base: f64,
    pub slope: f64,
}

impl Response {
    pub fn probability(&self, months: f64) -> f64 {
        (self.base - self.slope * months).clamp(0.0, 1.0)
    }
}

/// Yes-probability that decays with the pandemic duration read from the
/// prompt, one response per action.
#[derive(Debug, Clone)]
pub struct FatigueProvider {
    pub isolate: Response,
    pub work: Response,
    pub seed: u64,
}

/// Extracts `N` from "It has been N months".
pub fn months_in_prompt(text: &str) -> Option<f64> {
    let k = text.find("It has been ")? + "It has been ".len();
    let rest = &text[k..];
    let end = rest.find(' ')?;
    rest[..end].parse().ok()
}

impl DecisionProvider for FatigueProvider {
    fn complete(&self, q: &Query<'_>) -> Result<String, ProviderError> {
        let months = months_in_prompt(q.user).unwrap_or(0.0);
        let r = match q.action {
            Action::Isolate => self.isolate,
            Action::Work => self.work,
        };
        Ok(reply(query_uniform(self.seed, q) < r.probability(months)))
    }
}

/// Wraps a provider with call counting, reply parsing, and a bounded worker
/// pool for concurrent queries.
pub struct ProviderHandle {
    inner: Box<dyn DecisionProvider>,
    calls: AtomicU64,
    pool: Option<rayon::ThreadPool>,
}

impl std::fmt::Debug for ProviderHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProviderHandle")
            .field("calls", &self.calls())
            .finish()
    }
}

impl ProviderHandle {
    pub fn new(inner: Box<dyn DecisionProvider>) -> Self {
        Self {
            inner,
            calls: AtomicU64::new(0),
            pool: None,
        }
    }

    /// Limits concurrent queries to `threads`.
    pub fn with_parallelism(mut self, threads: usize) -> Self {
        self.pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build()
            .ok();
        self
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn reset_calls(&self) {
        self.calls.store(0, Ordering::Relaxed);
    }

    /// Queries and parses, retrying once on an unparseable reply.
    pub fn decide(&self, q: &Query<'_>) -> Result<Decision, BehaviorError> {
        let mut last = None;
        for _ in 0..2 {
            self.calls.fetch_add(1, Ordering::Relaxed);
            let text = self.inner.complete(q).map_err(BehaviorError::Provider)?;
            match parse_decision(&text) {
                Ok(d) => return Ok(d),
                Err(e) => last = Some(e),
            }
        }
        Err(last.expect("two attempts"))
    }

    pub(crate) fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        match &self.pool {
            Some(p) => p.install(f),
            None => f(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q<'a>(user: &'a str, sample: u32) -> Query<'a> {
        Query {
            system: "",
            user,
            action: Action::Isolate,
            step: 0,
            sample,
        }
    }

    #[test]
    fn mock_cycles_through_answers() {
        let m = MockTableProvider::new(vec![MockEntry {
            prompt_contains: "Bronx".into(),
            answers: vec!["Yes. a".into(), "No. b".into()],
        }])
        .unwrap();
        assert_eq!(m.complete(&q("in the Bronx", 0)).unwrap(), "Yes. a");
        assert_eq!(m.complete(&q("in the Bronx", 3)).unwrap(), "No. b");
        assert_eq!(
            m.complete(&q("in Queens", 0)),
            Err(ProviderError::NoMockEntry)
        );
    }

    #[test]
    fn heuristic_is_deterministic() {
        let h = HeuristicProvider { p: 0.5, seed: 3 };
        for s in 0..20 {
            assert_eq!(
                h.complete(&q("x", s)).unwrap(),
                h.complete(&q("x", s)).unwrap()
            );
        }
    }

    #[test]
    fn fatigue_reads_months() {
        assert_eq!(months_in_prompt("It has been 17 months since"), Some(17.0));
        assert_eq!(months_in_prompt("no duration here"), None);
        let r = Response {
            base: 0.6,
            slope: 0.05,
        };
        assert!((r.probability(2.0) - 0.5).abs() < 1e-12);
        assert_eq!(r.probability(20.0), 0.0);
    }

    #[test]
    fn unparseable_reply_is_retried_once() {
        let m = MockTableProvider::new(vec![MockEntry {
            prompt_contains: "".into(),
            answers: vec!["Perhaps.".into()],
        }])
        .unwrap();
        let h = ProviderHandle::new(Box::new(m));
        assert!(matches!(h.decide(&q("x", 0)), Err(BehaviorError::Parse(_))));
        assert_eq!(h.calls(), 2);
    }
}
