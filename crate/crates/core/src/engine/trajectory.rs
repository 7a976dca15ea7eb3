use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExecutionMode;
use super::EngineError;

/// Time series produced by one run.
///
/// Step series have one entry per simulated step and describe the state at
/// the end of that step. Monthly series have one entry per 30-step month.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub mode: ExecutionMode,
    pub seed: u64,
    pub config_hash: String,
    pub n_agents: usize,
    pub new_exposures: Vec<f64>,
    /// Agents becoming infectious.
    pub new_infections: Vec<f64>,
    pub active_infections: Vec<f64>,
    /// Agents ever infected, including those seeded at the start.
    pub cumulative_infections: Vec<f64>,
    /// New deaths.
    pub deaths: Vec<f64>,
    pub isolation_rate: Vec<f64>,
    /// S, E, I, R, M totals after each step (expected masses in mean-field
    /// runs).
    pub stage_counts: Vec<[f64; 5]>,
    /// Stimulus paid out during each step, summed over agents.
    pub stimulus_paid: Vec<f64>,
    /// Provider calls made during each step.
    pub provider_calls: Vec<u64>,
    pub unemployment_rate: Vec<f64>,
    pub mean_willingness: Vec<f64>,
}

impl Trajectory {
    pub fn new(mode: ExecutionMode, seed: u64, config_hash: String, n_agents: usize) -> Self {
        Self {
            mode,
            seed,
            config_hash,
            n_agents,
            new_exposures: Vec::new(),
            new_infections: Vec::new(),
            active_infections: Vec::new(),
            cumulative_infections: Vec::new(),
            deaths: Vec::new(),
            isolation_rate: Vec::new(),
            stage_counts: Vec::new(),
            stimulus_paid: Vec::new(),
            provider_calls: Vec::new(),
            unemployment_rate: Vec::new(),
            mean_willingness: Vec::new(),
        }
    }

    pub fn steps(&self) -> usize {
        self.new_infections.len()
    }

    pub fn total_deaths(&self) -> f64 {
        self.deaths.iter().sum()
    }

    /// Deaths over steps `[from, to)`, clipped to the recorded range.
    pub fn deaths_between(&self, from: usize, to: usize) -> f64 {
        let to = to.min(self.deaths.len());
        if from >= to {
            return 0.0;
        }
        self.deaths[from..to].iter().sum()
    }

    /// Weekly new infections over complete weeks.
    pub fn weekly_cases(&self) -> Vec<f64> {
        aggregate(&self.new_infections, Cadence::Weekly, Reduce::Sum).values
    }

    /// Multiplies every count series by `k`.
    pub fn scale_counts(&mut self, k: f64) {
        for s in [
            &mut self.new_exposures,
            &mut self.new_infections,
            &mut self.active_infections,
            &mut self.cumulative_infections,
            &mut self.deaths,
        ] {
            s.iter_mut().for_each(|x| *x *= k);
        }
        self.stage_counts.iter_mut().flatten().for_each(|x| *x *= k);
    }

    pub fn step_csv(&self) -> String {
        let mut out = String::from(
            "step,new_exposures,new_infections,active_infections,deaths,isolation_rate\n",
        );
        for t in 0..self.steps() {
            out.push_str(&format!(
                "{t},{},{},{},{},{}\n",
                self.new_exposures[t],
                self.new_infections[t],
                self.active_infections[t],
                self.deaths[t],
                self.isolation_rate[t]
            ));
        }
        out
    }

    pub fn monthly_csv(&self) -> String {
        let mut out = String::from("month,unemployment_rate,mean_willingness\n");
        for m in 0..self.unemployment_rate.len() {
            out.push_str(&format!(
                "{m},{},{}\n",
                self.unemployment_rate[m], self.mean_willingness[m]
            ));
        }
        out
    }

    /// Writes `trajectory.csv`, `monthly.csv`, and `trajectory.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), EngineError> {
        fs::create_dir_all(dir)?;
        fs::File::create(dir.join("trajectory.csv"))?.write_all(self.step_csv().as_bytes())?;
        fs::File::create(dir.join("monthly.csv"))?.write_all(self.monthly_csv().as_bytes())?;
        let json =
            serde_json::to_string_pretty(self).map_err(|e| EngineError::Io(e.to_string()))?;
        fs::write(dir.join("trajectory.json"), json)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Trajectory, EngineError> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| EngineError::Io(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cadence {
    Weekly,
    Monthly,
}

impl Cadence {
    pub fn steps(self) -> usize {
        match self {
            Cadence::Weekly => 7,
            Cadence::Monthly => 30,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    Last,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregated {
    pub values: Vec<f64>,
    /// Steps at the end that did not fill a window and were dropped.
    pub dropped: usize,
}

/// Resamples a step series over complete windows of the cadence.
pub fn aggregate(series: &[f64], cadence: Cadence, how: Reduce) -> Aggregated {
    let w = cadence.steps();
    let values = series
        .chunks_exact(w)
        .map(|c| match how {
            Reduce::Sum => c.iter().sum(),
            Reduce::Mean => c.iter().sum::<f64>() / w as f64,
            Reduce::Last => c[w - 1],
        })
        .collect();
    Aggregated {
        values,
        dropped: series.len() % w,
    }
}
