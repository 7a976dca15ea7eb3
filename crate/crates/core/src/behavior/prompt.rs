use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::context::ContextBin;
use super::{ArchetypeKey, BehaviorError};
use crate::popgen::Attribute;

/// Decision an agent is asked about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Isolate,
    Work,
}

impl Action {
    pub const ALL: [Action; 2] = [Action::Isolate, Action::Work];

    pub fn question(self) -> &'static str {
        match self {
            Action::Isolate => "Given these factors, do you choose to isolate at home?",
            Action::Work => "Given these factors, are you willing to work this month?",
        }
    }
}

pub const SYSTEM_PROMPT: &str =
    "There is a novel disease. It spreads through contact. It is more dangerous to older people.
People have the option to isolate at home or continue their usual recreational activities outside.
Given this scenario, you must estimate your actions based on
    1) the information you are given,
    2) what you know about the general population with these attributes.

\"There isn't enough information\" and \"It is unclear\" are not acceptable answers.
Give a \"Yes\" or \"No\" answer, followed by a period. Give one sentence explaining your choice.";

pub const USER_PROMPT: &str = "You are a {gender} of age {age}, living in the {location} region. You work in {occupation} industry with a monthly income of {income}.
The number of new cases in your neighborhood is {cases}, which is a {change}% change from the previous month. It has been {duration} months since the start of the pandemic.
This month, you have received a stimulus payment of {payment} to support your living expenses.";

pub const NO_PAYMENT: &str = "This month, you have not received a stimulus payment.";

pub const ANSWER_RULES: &str =
    "\"There isn't enough information\" and \"It is unclear\" are not acceptable answers.
Give a \"Yes\" or \"No\" answer, followed by a period. Give one sentence explaining your choice.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptTemplate {
    pub system_text: String,
    pub user_text: String,
    /// Replaces every line mentioning `{payment}` when the payment is zero.
    pub no_payment_text: String,
    pub answer_rules: String,
    /// Values for placeholders the archetype key does not carry.
    pub fallbacks: BTreeMap<String, String>,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        let fallbacks = [
            ("gender", "person"),
            ("age", "working"),
            ("location", "local"),
            ("occupation", "a local"),
            ("income", "the local median"),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
        Self {
            system_text: SYSTEM_PROMPT.to_string(),
            user_text: USER_PROMPT.to_string(),
            no_payment_text: NO_PAYMENT.to_string(),
            answer_rules: ANSWER_RULES.to_string(),
            fallbacks,
        }
    }
}

fn format_amount(x: f64) -> String {
    if x.fract() == 0.0 {
        format!("{x:.0}")
    } else {
        format!("{x:.2}")
    }
}

impl PromptTemplate {
    fn bind(&self, name: &str, key: &ArchetypeKey, ctx: &ContextBin) -> Option<String> {
        let attr = match name {
            "gender" => Some(Attribute::Gender),
            "age" => Some(Attribute::AgeBand),
            "location" => Some(Attribute::Borough),
            "occupation" => Some(Attribute::Occupation),
            "income" => Some(Attribute::IncomeBand),
            _ => None,
        };
        if let Some(a) = attr {
            if let Some(v) = key.values.get(&a) {
                return Some(v.clone());
            }
        }
        let v = match name {
            "cases" => Some(ctx.cases_bin().to_string()),
            "change" => {
                let r = ctx.change_bin().representative();
                Some(if r > 0 {
                    format!("+{r}")
                } else {
                    r.to_string()
                })
            }
            "duration" => Some(ctx.duration_months.to_string()),
            "payment" => Some(format_amount(ctx.payment)),
            _ => None,
        };
        v.or_else(|| self.fallbacks.get(name).cloned())
    }

    fn fill(
        &self,
        text: &str,
        key: &ArchetypeKey,
        ctx: &ContextBin,
    ) -> Result<String, BehaviorError> {
        let mut out = String::with_capacity(text.len() + 64);
        let mut rest = text;
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let after = &rest[open + 1..];
            let close = after.find('}').ok_or_else(|| {
                BehaviorError::Template(format!("unclosed placeholder in {:?}", &rest[open..]))
            })?;
            let name = &after[..close];
            let value = self
                .bind(name, key, ctx)
                .ok_or_else(|| BehaviorError::Template(format!("unbound placeholder {name}")))?;
            out.push_str(&value);
            rest = &after[close + 1..];
        }
        out.push_str(rest);
        Ok(out)
    }

    /// Renders the user prompt for one archetype under one context.
    pub fn render(
        &self,
        action: Action,
        key: &ArchetypeKey,
        ctx: &ContextBin,
    ) -> Result<String, BehaviorError> {
        let body: Vec<&str> = if ctx.payment == 0.0 {
            self.user_text
                .lines()
                .map(|l| {
                    if l.contains("{payment}") {
                        self.no_payment_text.as_str()
                    } else {
                        l
                    }
                })
                .collect()
        } else {
            self.user_text.lines().collect()
        };
        let body = self.fill(&body.join("\n"), key, ctx)?;
        Ok(format!(
            "{body}\n\n{}\n\n{}",
            action.question(),
            self.answer_rules
        ))
    }
}

/// Answer parsed from a provider reply.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub answer: bool,
    pub rationale: String,
}

/// Reads a reply of the form `Yes. <reason>` or `No. <reason>`.
pub fn parse_decision(text: &str) -> Result<Decision, BehaviorError> {
    let t = text.trim_start();
    let (head, tail) = match t.find('.') {
        Some(k) => (&t[..k], &t[k + 1..]),
        None => (t, ""),
    };
    let answer = match head.trim().to_ascii_lowercase().as_str() {
        "yes" => true,
        "no" => false,
        _ => return Err(BehaviorError::Parse(text.chars().take(80).collect())),
    };
    Ok(Decision {
        answer,
        rationale: tail.trim().to_string(),
    })
}

pub fn format_decision(d: &Decision) -> String {
    let head = if d.answer { "Yes." } else { "No." };
    if d.rationale.is_empty() {
        head.to_string()
    } else {
        format!("{head} {}", d.rationale)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn key() -> ArchetypeKey {
        let mut k = ArchetypeKey::default();
        k.values.insert(Attribute::Gender, "female".into());
        k.values.insert(Attribute::AgeBand, "20t29".into());
        k.values.insert(Attribute::Borough, "Bronx".into());
        k
    }

    fn ctx(payment: f64) -> ContextBin {
        ContextBin {
            cases: 120.0,
            change_pct: 15.0,
            duration_months: 6,
            payment,
            step: 0,
        }
    }

    #[test]
    fn golden_isolation_prompt() {
        let text = PromptTemplate::default()
            .render(Action::Isolate, &key(), &ctx(600.0))
            .unwrap();
        let want = "You are a female of age 20t29, living in the Bronx region. You work in a local industry with a monthly income of the local median.
The number of new cases in your neighborhood is 64, which is a +15% change from the previous month. It has been 6 months since the start of the pandemic.
This month, you have received a stimulus payment of 600 to support your living expenses.

Given these factors, do you choose to isolate at home?

\"There isn't enough information\" and \"It is unclear\" are not acceptable answers.
Give a \"Yes\" or \"No\" answer, followed by a period. Give one sentence explaining your choice.";
        assert_eq!(text, want);
    }

    #[test]
    fn zero_payment_uses_other_sentence() {
        let text = PromptTemplate::default()
            .render(Action::Work, &key(), &ctx(0.0))
            .unwrap();
        assert!(text.contains(NO_PAYMENT));
        assert!(!text.contains("stimulus payment of"));
        assert!(text.contains("willing to work"));
    }

    #[test]
    fn unknown_placeholder_is_reported() {
        let t = PromptTemplate {
            user_text: "hello {foo}".into(),
            ..Default::default()
        };
        match t.render(Action::Isolate, &key(), &ctx(1.0)) {
            Err(BehaviorError::Template(m)) => assert_eq!(m, "unbound placeholder foo"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rendering_is_pure() {
        let t = PromptTemplate::default();
        assert_eq!(
            t.render(Action::Isolate, &key(), &ctx(600.0)).unwrap(),
            t.render(Action::Isolate, &key(), &ctx(600.0)).unwrap()
        );
    }

    #[test]
    fn parses_canonical_replies() {
        assert_eq!(
            parse_decision("Yes. I fear infection at my age.").unwrap(),
            Decision {
                answer: true,
                rationale: "I fear infection at my age.".into()
            }
        );
        let d = parse_decision("No. I need income for my family.").unwrap();
        assert!(!d.answer);
        assert_eq!(d.rationale, "I need income for my family.");
        assert!(parse_decision("  yes . fine").unwrap().answer);
        assert!(matches!(
            parse_decision("It is unclear"),
            Err(BehaviorError::Parse(_))
        ));
        assert!(matches!(
            parse_decision("Maybe. Who knows."),
            Err(BehaviorError::Parse(_))
        ));
    }

    proptest! {
        #[test]
        fn parse_inverts_format(answer: bool, rationale in "[A-Za-z ,']{0,40}") {
            let d = Decision { answer, rationale: rationale.trim().to_string() };
            prop_assert_eq!(parse_decision(&format_decision(&d)).unwrap(), d);
        }
    }
}
