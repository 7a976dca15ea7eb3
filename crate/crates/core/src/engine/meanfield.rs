//! Deterministic expected-value dynamics. Each agent carries a probability
//! mass over disease sub-stages: `S`, `E_k` with `k` steps of latency left,
//! `I_k` with `k` infectious steps left, `R`, and `M`. Every operation is
//! recorded on the tape, so outputs are differentiable in the structural
//! parameters.

use std::sync::Arc;

use crate::behavior::{context_from_trajectory, Action};
use crate::epi::{
    efficacy_in_force, exposure_probabilities, payment_in_month, stimulus_step, vaccination_step,
    Allocation,
};
use crate::labor::{unemployment_rate_taped, LaborError};
use crate::popgen::Stage;
use crate::tape::{Tape, Var};

use super::{
    abort, BehaviorDriver, EngineError, RunOutput, SimulationConfig, Structural, TapedSeries,
    Trajectory, World,
};

fn total<'t>(parts: &[Var<'t>]) -> Option<Var<'t>> {
    parts.iter().copied().reduce(|a, b| a + b)
}

fn mass(v: Var<'_>) -> f64 {
    v.with_value(|x| x.iter().sum())
}

pub(super) fn run<'t>(
    tape: &'t Tape,
    cfg: &SimulationConfig,
    world: &World,
    driver: &BehaviorDriver<'_>,
    s: &Structural<'t>,
) -> Result<(RunOutput, TapedSeries<'t>), EngineError> {
    let pop = &world.population;
    let n = pop.len();
    let params = cfg.epi.resolve(pop);
    let l = params.latent_period as usize;
    let d = params.infectious_period as usize;
    let f = cfg.epi.initial_infected_fraction;

    let mut s0 = vec![0.0; n];
    let mut e0 = vec![vec![0.0; n]; l];
    let mut i0 = vec![vec![0.0; n]; d];
    let mut r0 = vec![0.0; n];
    let mut m0 = vec![0.0; n];
    for a in 0..n {
        let timer = pop.stage_timer[a] as usize;
        match pop.disease_stage[a] {
            Stage::S => {
                s0[a] = 1.0 - f;
                i0[d - 1][a] = f;
            }
            Stage::E if l > 0 => e0[timer.clamp(1, l) - 1][a] = 1.0,
            Stage::E => i0[d - 1][a] = 1.0,
            Stage::I => i0[timer.clamp(1, d) - 1][a] = 1.0,
            Stage::R => r0[a] = 1.0,
            Stage::M => m0[a] = 1.0,
        }
    }
    let mut sus = tape.constant(s0);
    let mut e: Vec<Var<'t>> = e0.into_iter().map(|v| tape.constant(v)).collect();
    let mut inf: Vec<Var<'t>> = i0.into_iter().map(|v| tape.constant(v)).collect();
    let mut rec = tape.constant(r0);
    let mut dead = tape.constant(m0);

    let ages: Arc<Vec<u32>> = world.age_index();
    let inv_degree = tape.constant(world.inv_degree.clone());
    let mortality = tape.constant(ages.iter().map(|&c| params.mortality[c as usize]).collect());
    let graph = world.graph.combined.clone();
    // Infectious sub-stages `I_k` with `k ≤ D − delay` are past their test result.
    let tested_upto = d.saturating_sub(cfg.testing.result_delay as usize);
    let test_keep = 1.0 - cfg.testing.uptake * cfg.testing.sensitivity;
    let mut doses = pop.doses_received.clone();
    let mut last_dose = pop.last_dose_step.clone();

    let seed = cfg.execution.seed;
    let mut traj = Trajectory::new(cfg.execution.mode, seed, cfg.hash(), n);
    let mut taped = TapedSeries::default();

    for t in 0..cfg.execution.horizon_steps {
        let step = t as u32;
        let calls_before = driver.calls();
        let result = (|| -> Result<(), EngineError> {
            let ctx = context_from_trajectory(
                &traj.new_infections,
                t,
                &cfg.behavior.context,
                payment_in_month(&cfg.stimulus, step),
            );
            let p_iso = driver.probabilities(&ctx, Action::Isolate)?;
            if t % 30 == 0 {
                let month = t / 30;
                let p_work = driver.probabilities(&ctx, Action::Work)?;
                let mean_w = (tape.constant(p_work) * dead.one_minus()).mean();
                let iur = *s.iur.get(month).ok_or(LaborError::MonthOutOfRange {
                    month,
                    len: s.iur.len(),
                })?;
                let mu = unemployment_rate_taped(mean_w, s.gamma0, s.gamma1, iur);
                traj.unemployment_rate.push(mu.scalar());
                traj.mean_willingness.push(mean_w.scalar());
                taped.unemployment_rate.push(mu);
            }

            let keep = tape.constant(p_iso.iter().map(|p| 1.0 - p).collect());
            let tested = total(&inf[..tested_upto.min(d)]);
            let untested = total(&inf[tested_upto.min(d)..]);
            let infectious = match (tested, untested) {
                (Some(a), Some(b)) => a * test_keep + b,
                (Some(a), None) => a * test_keep,
                (None, Some(b)) => b,
                (None, None) => unreachable!("infectious period is at least one step"),
            } * keep;
            let protection: Vec<f64> = doses
                .iter()
                .map(|&k| 1.0 - efficacy_in_force(k, &cfg.vaccine, Allocation::Expected))
                .collect();
            let susceptibility = s.susceptibility.gather(&ages) * tape.constant(protection);
            let p = exposure_probabilities(
                s.beta[t],
                susceptibility,
                &graph,
                inv_degree,
                infectious,
                params.dt,
            );
            let new_e = sus * p;
            sus = sus - new_e;

            let leaving = inf[0];
            let died = leaving * mortality;
            rec = rec + (leaving - died);
            dead = dead + died;
            let entering = if l > 0 { e[0] } else { new_e };
            inf.remove(0);
            inf.push(entering);
            if l > 0 {
                e.remove(0);
                e.push(new_e);
            }

            vaccination_step(
                &mut doses,
                &mut last_dose,
                &pop.agent_id,
                &world.priority,
                &cfg.vaccine,
                step,
                seed,
                Allocation::Expected,
            );

            let new_exposures = new_e.sum();
            let new_infections = if l > 0 { entering.sum() } else { new_exposures };
            let deaths = died.sum();
            traj.new_exposures.push(new_exposures.scalar());
            traj.new_infections.push(new_infections.scalar());
            traj.active_infections
                .push(inf.iter().map(|&v| mass(v)).sum());
            traj.cumulative_infections.push(n as f64 - mass(sus));
            traj.deaths.push(deaths.scalar());
            traj.isolation_rate
                .push(p_iso.iter().sum::<f64>() / n as f64);
            let paid = stimulus_step(pop, &cfg.stimulus, step);
            let alive = dead.value();
            traj.stimulus_paid
                .push(paid.iter().zip(&alive).map(|(p, m)| p * (1.0 - m)).sum());
            traj.stage_counts.push([
                mass(sus),
                e.iter().map(|&v| mass(v)).sum(),
                inf.iter().map(|&v| mass(v)).sum(),
                mass(rec),
                mass(dead),
            ]);
            taped.new_exposures.push(new_exposures);
            taped.new_infections.push(new_infections);
            taped.deaths.push(deaths);
            Ok(())
        })();
        traj.provider_calls.push(driver.calls() - calls_before);
        if let Err(e) = result {
            traj.provider_calls.pop();
            return Err(abort(t, e, &traj));
        }
    }
    let stage_mass = traj.stage_counts.last().copied().unwrap_or_else(|| {
        [
            mass(sus),
            e.iter().map(|&v| mass(v)).sum(),
            inf.iter().map(|&v| mass(v)).sum(),
            mass(rec),
            mass(dead),
        ]
    });
    Ok((
        RunOutput {
            trajectory: traj,
            final_population: None,
            stage_mass,
        },
        taped,
    ))
}
