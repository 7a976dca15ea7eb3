use crate::behavior::{context_from_trajectory, sample_bernoulli, Action};
use crate::epi::{
    efficacy_in_force, exposure_step, payment_in_month, seed_infections, seirm_progress,
    stimulus_step, testing_step, vaccination_step, Allocation, ExposureInput, TestProtocol,
};
use crate::labor::{unemployment_rate_taped, willingness_step, LaborError};
use crate::popgen::Stage;
use crate::tape::{Tape, Var};

use super::{
    abort, BehaviorDriver, EngineError, RunOutput, SimulationConfig, Structural, TapedSeries,
    Trajectory, World,
};

pub(super) fn run<'t>(
    tape: &'t Tape,
    cfg: &SimulationConfig,
    world: &World,
    driver: &BehaviorDriver<'_>,
    s: &Structural<'t>,
) -> Result<(RunOutput, TapedSeries<'t>), EngineError> {
    let seed = cfg.execution.seed;
    let mut pop = world.population.clone();
    let n = pop.len();
    let mut params = cfg.epi.resolve(&pop);
    params.susceptibility = s.susceptibility.value();
    let d = params.infectious_period;
    seed_infections(&mut pop, cfg.epi.initial_infected_fraction, d, seed);

    let mut traj = Trajectory::new(cfg.execution.mode, seed, cfg.hash(), n);
    let mut taped = TapedSeries::default();
    // Test-driven isolation window per agent, `[from, until)`.
    let mut iso_from = vec![u32::MAX; n];
    let mut iso_until = vec![0u32; n];
    // Agents infectious at the start count as having become infectious just
    // before step 0.
    if cfg.testing.uptake > 0.0 {
        let protocol = TestProtocol {
            background_rate: 0.0,
            ..cfg.testing.clone()
        };
        let infectious: Vec<u32> = (0..n as u32)
            .filter(|&i| pop.disease_stage[i as usize] == Stage::I)
            .collect();
        for ev in testing_step(&pop, &infectious, &protocol, 0, seed) {
            let a = ev.agent as usize;
            if ev.positive && ev.result_step < pop.stage_timer[a] as u32 {
                iso_from[a] = ev.result_step;
                iso_until[a] = pop.stage_timer[a] as u32;
            }
        }
    }
    // Exposure nodes by step, for infections that surface after the latent period.
    let mut exposure_nodes: Vec<Var<'t>> = Vec::new();

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
            pop.isolating = sample_bernoulli(&p_iso, &pop.agent_id, seed, step, Action::Isolate);
            if t % 30 == 0 {
                let month = t / 30;
                let p_work = driver.probabilities(&ctx, Action::Work)?;
                let mut w = willingness_step(&p_work, &pop.agent_id, seed, step);
                for (wi, st) in w.iter_mut().zip(&pop.disease_stage) {
                    if *st == Stage::M {
                        *wi = 0.0;
                    }
                }
                let mean_w = w.iter().sum::<f64>() / n as f64;
                let iur = *s.iur.get(month).ok_or(LaborError::MonthOutOfRange {
                    month,
                    len: s.iur.len(),
                })?;
                let mu_node = unemployment_rate_taped(tape.scalar(mean_w), s.gamma0, s.gamma1, iur);
                traj.unemployment_rate.push(mu_node.scalar());
                traj.mean_willingness.push(mean_w);
                taped.unemployment_rate.push(mu_node);
                pop.employed = w.iter().map(|&x| x > 0.5).collect();
                pop.willingness = w;
            }

            let infectious: Vec<f64> = (0..n)
                .map(|i| {
                    let tested = iso_from[i] <= step && step < iso_until[i];
                    let inf = pop.disease_stage[i] == Stage::I && !pop.isolating[i] && !tested;
                    inf as u8 as f64
                })
                .collect();
            let protection: Vec<f64> = pop
                .doses_received
                .iter()
                .map(|&k| 1.0 - efficacy_in_force(k, &cfg.vaccine, Allocation::Sampled))
                .collect();
            let beta = s.beta[t];
            params.beta = beta.scalar();
            let exp = exposure_step(
                &pop,
                ExposureInput {
                    graph: &world.graph.combined,
                    inv_degree: &world.inv_degree,
                    infectious: &infectious,
                    beta: params.beta,
                    susceptibility: &params.susceptibility,
                    protection: &protection,
                    dt: params.dt,
                },
                seed,
                step,
            );
            let exposure_node = tape.custom(
                exp.exposed.len() as f64,
                vec![
                    (beta, vec![exp.d_beta]),
                    (s.susceptibility, exp.d_susceptibility.clone()),
                ],
            );
            exposure_nodes.push(exposure_node);

            let prog = seirm_progress(&mut pop, &params, &exp.exposed, seed, step);
            let k = prog.new_infections.len() as f64;
            let infection_node = match t.checked_sub(params.latent_period as usize) {
                Some(src) => {
                    // Carries the gradient of the exposures that surface now.
                    tape.custom(k, vec![(exposure_nodes[src], vec![1.0])])
                }
                None => tape.scalar(k),
            };

            vaccination_step(
                &mut pop.doses_received,
                &mut pop.last_dose_step,
                &pop.agent_id,
                &world.priority,
                &cfg.vaccine,
                step,
                seed,
                Allocation::Sampled,
            );

            if cfg.testing.uptake > 0.0 || cfg.testing.background_rate > 0.0 {
                for ev in testing_step(&pop, &prog.new_infections, &cfg.testing, step, seed) {
                    if !ev.positive {
                        continue;
                    }
                    let a = ev.agent as usize;
                    let from = ev.result_step + 1;
                    let until = if ev.infected {
                        step + d as u32 + 1
                    } else {
                        from + d as u32
                    };
                    if from < until {
                        iso_from[a] = from;
                        iso_until[a] = until;
                    }
                }
            }

            let paid: f64 = stimulus_step(&pop, &cfg.stimulus, step).iter().sum();

            let counts = pop.stage_counts();
            traj.new_exposures.push(exp.exposed.len() as f64);
            traj.new_infections.push(k);
            traj.active_infections
                .push(counts[Stage::I as usize] as f64);
            traj.cumulative_infections
                .push((n - counts[Stage::S as usize]) as f64);
            traj.deaths.push(prog.new_deaths as f64);
            traj.isolation_rate
                .push(pop.isolating.iter().filter(|&&x| x).count() as f64 / n as f64);
            traj.stimulus_paid.push(paid);
            traj.stage_counts.push(counts.map(|c| c as f64));
            taped.new_exposures.push(exposure_node);
            taped.new_infections.push(infection_node);
            taped.deaths.push(tape.scalar(prog.new_deaths as f64));
            Ok(())
        })();
        traj.provider_calls.push(driver.calls() - calls_before);
        if let Err(e) = result {
            traj.provider_calls.pop();
            return Err(abort(t, e, &traj));
        }
    }
    let stage_mass = pop.stage_counts().map(|c| c as f64);
    Ok((
        RunOutput {
            trajectory: traj,
            final_population: Some(pop),
            stage_mass,
        },
        taped,
    ))
}
