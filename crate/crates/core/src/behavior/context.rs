use serde::{Deserialize, Serialize};

/// Percent-change bucket of the monthly case count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ChangeBin {
    /// ≤ −25%
    SharpDrop,
    /// (−25%, −5%]
    Drop,
    /// (−5%, 5%)
    Flat,
    /// [5%, 25%)
    Rise,
    /// ≥ 25%
    SharpRise,
}

impl ChangeBin {
    pub fn of(pct: f64) -> ChangeBin {
        if pct <= -25.0 {
            ChangeBin::SharpDrop
        } else if pct <= -5.0 {
            ChangeBin::Drop
        } else if pct < 5.0 {
            ChangeBin::Flat
        } else if pct < 25.0 {
            ChangeBin::Rise
        } else {
            ChangeBin::SharpRise
        }
    }

    /// Value shown in prompts.
    pub fn representative(self) -> i32 {
        match self {
            ChangeBin::SharpDrop => -25,
            ChangeBin::Drop => -15,
            ChangeBin::Flat => 0,
            ChangeBin::Rise => 15,
            ChangeBin::SharpRise => 25,
        }
    }
}

/// Lower edge of the power-of-two bucket holding `cases` (0 below 1).
pub fn cases_bucket(cases: f64) -> u64 {
    if !(cases >= 1.0) {
        return 0;
    }
    let c = cases.min(u64::MAX as f64 / 2.0) as u64;
    1u64 << (63 - c.leading_zeros())
}

/// Situation an agent is prompted with. Raw values are kept; identity for
/// archetype lookup is the binned [`ContextKey`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextBin {
    pub cases: f64,
    pub change_pct: f64,
    pub duration_months: u32,
    pub payment: f64,
    pub step: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ContextKey {
    pub cases_bin: u64,
    pub change: ChangeBin,
    pub duration_months: u32,
    pub payment_cents: i64,
}

impl ContextBin {
    pub fn cases_bin(&self) -> u64 {
        cases_bucket(self.cases)
    }

    pub fn change_bin(&self) -> ChangeBin {
        ChangeBin::of(self.change_pct)
    }

    pub fn key(&self) -> ContextKey {
        ContextKey {
            cases_bin: self.cases_bin(),
            change: self.change_bin(),
            duration_months: self.duration_months,
            payment_cents: (self.payment * 100.0).round() as i64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitialContext {
    pub cases: f64,
    pub change_pct: f64,
}

impl Default for InitialContext {
    fn default() -> Self {
        Self {
            cases: 0.0,
            change_pct: 0.0,
        }
    }
}

/// How simulated aggregates become prompt context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContextConfig {
    /// Context of step 0, before any simulated history exists.
    pub initial: InitialContext,
    pub start_duration_months: u32,
    /// Shifts the reported pandemic duration (4 weeks per month).
    pub duration_offset_weeks: f64,
    /// Multiplies simulated counts before binning, e.g. full/simulated size.
    pub cases_scale: f64,
    /// Steps per reporting window.
    pub window: usize,
}

impl Default for ContextConfig {
    fn default() -> Self {
        Self {
            initial: InitialContext::default(),
            start_duration_months: 0,
            duration_offset_weeks: 0.0,
            cases_scale: 1.0,
            window: 30,
        }
    }
}

impl ContextConfig {
    pub fn duration_months(&self, t: usize) -> u32 {
        let base = self.start_duration_months as i64 + (t / 30) as i64;
        let shifted = base + (self.duration_offset_weeks / 4.0).round() as i64;
        shifted.max(0) as u32
    }
}

/// Builds the context of step `t` from the simulated new-case series of
/// steps `0..t`.
///
/// Cases are the count over the trailing window, scaled to a full window when
/// fewer steps exist. The change compares against the window before it, or
/// against the initial context when that window has not started yet.
pub fn context_from_trajectory(
    daily_cases: &[f64],
    t: usize,
    cfg: &ContextConfig,
    payment: f64,
) -> ContextBin {
    let duration_months = cfg.duration_months(t);
    if t == 0 {
        return ContextBin {
            cases: cfg.initial.cases,
            change_pct: cfg.initial.change_pct,
            duration_months,
            payment,
            step: 0,
        };
    }
    let t = t.min(daily_cases.len());
    let w = cfg.window.max(1);
    let window_rate = |lo: usize, hi: usize| -> f64 {
        let s: f64 = daily_cases[lo..hi].iter().sum();
        s * cfg.cases_scale * w as f64 / (hi - lo) as f64
    };
    let cur_lo = t.saturating_sub(w);
    let cur = window_rate(cur_lo, t);
    let prev = if cur_lo == 0 {
        cfg.initial.cases
    } else {
        window_rate(cur_lo.saturating_sub(w), cur_lo)
    };
    let change_pct = if prev > 0.0 {
        100.0 * (cur - prev) / prev
    } else if cur > 0.0 {
        100.0
    } else {
        0.0
    };
    ContextBin {
        cases: cur,
        change_pct,
        duration_months,
        payment,
        step: t as u32,
    }
}
