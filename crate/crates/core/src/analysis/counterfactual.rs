use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::AnalysisError;
use crate::behavior::ProviderHandle;
use crate::engine::{apply_patch, run, ScenarioPatch, SimulationConfig, Trajectory, World};

/// Patched minus baseline, summarized across paired seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesDelta {
    pub name: String,
    pub mean: Vec<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

/// Peak active infections of one paired run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeakPair {
    pub seed: u64,
    pub baseline_peak: f64,
    pub baseline_peak_step: usize,
    pub patched_peak: f64,
    pub patched_peak_step: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualReport {
    pub baseline_hash: String,
    pub patched_hash: String,
    pub patch: ScenarioPatch,
    pub seeds: Vec<u64>,
    pub baseline: Vec<Trajectory>,
    pub patched: Vec<Trajectory>,
    /// Per-step series, then monthly ones.
    pub deltas: Vec<SeriesDelta>,
    pub peaks: Vec<PeakPair>,
    /// Change in infections by the horizon, per seed.
    pub cumulative_infections_delta: Vec<f64>,
    /// Change in deaths by the horizon, per seed.
    pub deaths_delta: Vec<f64>,
}

impl CounterfactualReport {
    /// Long-format delta table: `series,index,mean,min,max`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("series,index,mean,min,max\n");
        for d in &self.deltas {
            for k in 0..d.mean.len() {
                out.push_str(&format!(
                    "{},{k},{},{},{}\n",
                    d.name, d.mean[k], d.min[k], d.max[k]
                ));
            }
        }
        out
    }

    pub fn write(&self, dir: &std::path::Path) -> Result<(), AnalysisError> {
        super::write_outputs(dir, "counterfactual", self, &self.to_csv())
    }

    pub fn delta(&self, name: &str) -> Option<&SeriesDelta> {
        self.deltas.iter().find(|d| d.name == name)
    }
}

type SeriesOf = fn(&Trajectory) -> &Vec<f64>;

/// `n` consecutive run seeds starting at `base`.
pub fn paired_seeds(base: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|k| base.wrapping_add(k)).collect()
}

fn peak(series: &[f64]) -> (f64, usize) {
    series
        .iter()
        .enumerate()
        .fold((f64::NEG_INFINITY, 0), |best, (t, &v)| {
            if v > best.0 {
                (v, t)
            } else {
                best
            }
        })
}

fn summarize(name: &str, pairs: &[(Vec<f64>, Vec<f64>)]) -> SeriesDelta {
    let len = pairs
        .iter()
        .map(|(a, b)| a.len().min(b.len()))
        .min()
        .unwrap_or(0);
    let mut d = SeriesDelta {
        name: name.to_string(),
        mean: vec![0.0; len],
        min: vec![f64::INFINITY; len],
        max: vec![f64::NEG_INFINITY; len],
    };
    for (base, patched) in pairs {
        for t in 0..len {
            let x = patched[t] - base[t];
            d.mean[t] += x;
            d.min[t] = d.min[t].min(x);
            d.max[t] = d.max[t].max(x);
        }
    }
    d.mean.iter_mut().for_each(|m| *m /= pairs.len() as f64);
    d
}

fn same_world(a: &SimulationConfig, b: &SimulationConfig) -> bool {
    a.population == b.population
        && a.graph == b.graph
        && a.behavior.mode == b.behavior.mode
        && a.behavior.archetype_attributes == b.behavior.archetype_attributes
        && a.behavior.agent_cap == b.behavior.agent_cap
}

/// Runs the baseline and patched configurations on the same seeds.
///
/// Seeds are `config.execution.seed`, `+1`, ... The two arms share the
/// population and every random stream, so an empty patch reproduces the
/// baseline bit for bit. Runs go in parallel unless a provider is shared,
/// whose call counter must see one run at a time.
pub fn counterfactual(
    config: &SimulationConfig,
    patch: &ScenarioPatch,
    n_seeds: usize,
    provider: Option<&ProviderHandle>,
) -> Result<CounterfactualReport, AnalysisError> {
    if n_seeds == 0 {
        return Err(AnalysisError::NoSeeds);
    }
    let patched_cfg = apply_patch(config, patch)?;
    config.validate()?;
    patched_cfg.validate()?;
    let world = World::build(config)?;
    let patched_world = if same_world(config, &patched_cfg) {
        None
    } else {
        Some(World::build(&patched_cfg)?)
    };
    let seeds = paired_seeds(config.execution.seed, n_seeds);

    let one = |&seed: &u64| -> Result<(Trajectory, Trajectory), AnalysisError> {
        let mut b = config.clone();
        b.execution.seed = seed;
        let mut p = patched_cfg.clone();
        p.execution.seed = seed;
        let base = run(&b, &world, provider)?.trajectory;
        let alt = run(&p, patched_world.as_ref().unwrap_or(&world), provider)?.trajectory;
        Ok((base, alt))
    };
    let runs: Vec<(Trajectory, Trajectory)> = if provider.is_some() {
        seeds.iter().map(one).collect::<Result<_, _>>()?
    } else {
        seeds.par_iter().map(one).collect::<Result<_, _>>()?
    };

    let series: [(&str, SeriesOf); 8] = [
        ("new_exposures", |t| &t.new_exposures),
        ("new_infections", |t| &t.new_infections),
        ("active_infections", |t| &t.active_infections),
        ("cumulative_infections", |t| &t.cumulative_infections),
        ("deaths", |t| &t.deaths),
        ("isolation_rate", |t| &t.isolation_rate),
        ("unemployment_rate", |t| &t.unemployment_rate),
        ("mean_willingness", |t| &t.mean_willingness),
    ];
    let deltas = series
        .iter()
        .map(|(name, get)| {
            let pairs: Vec<(Vec<f64>, Vec<f64>)> = runs
                .iter()
                .map(|(a, b)| (get(a).clone(), get(b).clone()))
                .collect();
            summarize(name, &pairs)
        })
        .collect();
    let peaks = seeds
        .iter()
        .zip(&runs)
        .map(|(&seed, (a, b))| {
            let (bp, bt) = peak(&a.active_infections);
            let (pp, pt) = peak(&b.active_infections);
            PeakPair {
                seed,
                baseline_peak: bp,
                baseline_peak_step: bt,
                patched_peak: pp,
                patched_peak_step: pt,
            }
        })
        .collect();
    let last = |v: &[f64]| v.last().copied().unwrap_or(0.0);
    let cumulative_infections_delta = runs
        .iter()
        .map(|(a, b)| last(&b.cumulative_infections) - last(&a.cumulative_infections))
        .collect();
    let deaths_delta = runs
        .iter()
        .map(|(a, b)| b.total_deaths() - a.total_deaths())
        .collect();
    let (baseline, patched) = runs.into_iter().unzip();
    Ok(CounterfactualReport {
        baseline_hash: config.hash(),
        patched_hash: patched_cfg.hash(),
        patch: patch.clone(),
        seeds,
        baseline,
        patched,
        deltas,
        peaks,
        cumulative_infections_delta,
        deaths_delta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{ExecutionConfig, ExecutionMode};

    fn small(mode: ExecutionMode) -> SimulationConfig {
        let mut c = SimulationConfig::default();
        c.population.size = 300;
        c.epi.initial_infected_fraction = 0.02;
        c.execution = ExecutionConfig {
            mode,
            horizon_steps: 40,
            seed: 3,
        };
        c
    }

    #[test]
    fn identity_patch_is_bitwise_neutral() {
        let r = counterfactual(
            &small(ExecutionMode::Stochastic),
            &ScenarioPatch::new(),
            3,
            None,
        )
        .unwrap();
        assert_eq!(r.baseline, r.patched);
        assert_eq!(r.baseline_hash, r.patched_hash);
        assert_eq!(r.seeds, vec![3, 4, 5]);
        for d in &r.deltas {
            assert!(
                d.mean.iter().chain(&d.min).chain(&d.max).all(|&x| x == 0.0),
                "{}",
                d.name
            );
        }
        assert!(r.cumulative_infections_delta.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn higher_r0_raises_every_peak() {
        let patch: ScenarioPatch = [("epi.R0".to_string(), serde_json::json!(5.5))]
            .into_iter()
            .collect();
        let mut cfg = small(ExecutionMode::Stochastic);
        cfg.epi.r0 = Some(3.0);
        let r = counterfactual(&cfg, &patch, 4, None).unwrap();
        assert_ne!(r.baseline_hash, r.patched_hash);
        assert!(r.peaks.iter().all(|p| p.patched_peak > p.baseline_peak));
        let d = r.delta("cumulative_infections").unwrap();
        assert!(d
            .min
            .iter()
            .zip(&d.mean)
            .zip(&d.max)
            .all(|((a, b), c)| a <= b && b <= c));
        assert_eq!(d.mean.len(), 40);
        assert_eq!(r.delta("unemployment_rate").unwrap().mean.len(), 2);
        assert!(r.to_csv().lines().count() > 1);
    }

    #[test]
    fn bad_patch_and_zero_seeds_fail() {
        let cfg = small(ExecutionMode::MeanField);
        let patch: ScenarioPatch = [("epi.nope".to_string(), serde_json::json!(1))]
            .into_iter()
            .collect();
        assert!(counterfactual(&cfg, &patch, 1, None)
            .unwrap_err()
            .to_string()
            .contains("epi.nope"));
        assert!(matches!(
            counterfactual(&cfg, &ScenarioPatch::new(), 0, None),
            Err(AnalysisError::NoSeeds)
        ));
    }

    #[test]
    fn population_patch_builds_a_second_world() {
        let patch: ScenarioPatch = [("population.size".to_string(), serde_json::json!(200))]
            .into_iter()
            .collect();
        let r = counterfactual(&small(ExecutionMode::MeanField), &patch, 1, None).unwrap();
        assert_eq!(r.baseline[0].n_agents, 300);
        assert_eq!(r.patched[0].n_agents, 200);
    }
}
