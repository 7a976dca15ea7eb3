use super::*;
use crate::behavior::{HeuristicProvider, MockTableProvider};
use crate::popgen::{GraphConfig, Stage};

fn small(mode: ExecutionMode) -> SimulationConfig {
    let mut c = SimulationConfig::default();
    c.population.size = 400;
    c.population.seed = 3;
    c.execution = ExecutionConfig {
        mode,
        horizon_steps: 40,
        seed: 11,
    };
    c.epi.initial_infected_fraction = 0.02;
    c.epi.r0 = Some(4.0);
    c
}

/// Complete graph with singleton households.
fn complete(n: usize, mode: ExecutionMode) -> SimulationConfig {
    let mut c = small(mode);
    c.population.size = n;
    c.population.household_sizes = vec![(1, 1.0)];
    c.graph = GraphConfig {
        workplace_mean_degree: 0.0,
        mobility_mean_degree: (n - 1) as f64,
        mobility_stratified: false,
        ..Default::default()
    };
    c
}

#[test]
fn same_seed_same_trajectory() {
    let cfg = small(ExecutionMode::Stochastic);
    let a = simulate(&cfg, None).unwrap().trajectory;
    let b = simulate(&cfg, None).unwrap().trajectory;
    assert_eq!(a, b);
    assert_eq!(a.step_csv(), b.step_csv());
    let mut other = cfg.clone();
    other.execution.seed = 12;
    assert_ne!(
        simulate(&other, None).unwrap().trajectory.new_exposures,
        a.new_exposures
    );
}

#[test]
fn thread_count_does_not_change_results() {
    let cfg = small(ExecutionMode::Stochastic);
    let world = World::build(&cfg).unwrap();
    let one = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    let three = rayon::ThreadPoolBuilder::new()
        .num_threads(3)
        .build()
        .unwrap();
    let a = one.install(|| run(&cfg, &world, None).unwrap().trajectory);
    let b = three.install(|| run(&cfg, &world, None).unwrap().trajectory);
    assert_eq!(a, b);
}

#[test]
fn agents_are_conserved() {
    for mode in [ExecutionMode::Stochastic, ExecutionMode::MeanField] {
        let cfg = small(mode);
        let out = simulate(&cfg, None).unwrap();
        let total: f64 = out.stage_mass.iter().sum();
        assert!((total - 400.0).abs() < 1e-9, "{mode:?}: {total}");
        let t = &out.trajectory;
        assert_eq!(t.stage_counts.len(), 40);
        for c in &t.stage_counts {
            assert!((c.iter().sum::<f64>() - 400.0).abs() < 1e-9);
        }
        assert_eq!(t.stage_counts.last(), Some(&out.stage_mass));
        let last = t.cumulative_infections.last().copied().unwrap();
        assert!((last - (400.0 - out.stage_mass[0])).abs() < 1e-9);
        assert!((t.total_deaths() - out.stage_mass[4]).abs() < 1e-9);
    }
}

#[test]
fn zero_contact_rate_means_no_transmission() {
    for mode in [ExecutionMode::Stochastic, ExecutionMode::MeanField] {
        let mut cfg = small(mode);
        cfg.epi.beta = Some(0.0);
        cfg.execution.horizon_steps = 20;
        let out = simulate(&cfg, None).unwrap();
        assert!(out.trajectory.new_exposures.iter().all(|&x| x == 0.0));
        assert_eq!(
            out.trajectory.active_infections.last().copied().unwrap(),
            0.0
        );
    }
}

#[test]
fn full_isolation_stops_transmission() {
    for mode in [ExecutionMode::Stochastic, ExecutionMode::MeanField] {
        let mut cfg = small(mode);
        cfg.behavior.isolate_prob = 1.0;
        let t = simulate(&cfg, None).unwrap().trajectory;
        assert!(t.new_exposures.iter().all(|&x| x == 0.0), "{mode:?}");
        assert!(t.isolation_rate.iter().all(|&x| x == 1.0));
    }
}

#[test]
fn isolation_reduces_attack_rate() {
    let mut lo = small(ExecutionMode::MeanField);
    lo.behavior.isolate_prob = 0.0;
    let mut hi = lo.clone();
    hi.behavior.isolate_prob = 0.5;
    let a = simulate(&lo, None).unwrap().trajectory;
    let b = simulate(&hi, None).unwrap().trajectory;
    assert!(b.cumulative_infections.last() < a.cumulative_infections.last());
}

#[test]
fn zero_horizon_gives_empty_series() {
    let mut cfg = small(ExecutionMode::Stochastic);
    cfg.execution.horizon_steps = 0;
    let t = simulate(&cfg, None).unwrap().trajectory;
    assert_eq!(t.steps(), 0);
    assert!(t.unemployment_rate.is_empty());
}

/// Independent recursion for a homogeneous population on a complete graph
/// with no latency and no deaths.
fn sir_oracle(beta: f64, d: usize, f: f64, keep: f64, steps: usize) -> Vec<f64> {
    let mut s = 1.0 - f;
    let mut i = vec![0.0; d];
    i[d - 1] = f;
    let mut out = Vec::new();
    for _ in 0..steps {
        let pressure: f64 = i.iter().sum::<f64>() * keep;
        let new = s * (1.0 - (-beta * pressure).exp());
        s -= new;
        i.remove(0);
        i.push(new);
        out.push(new);
    }
    out
}

#[test]
fn mean_field_matches_sir_recursion() {
    let n = 60;
    let mut cfg = complete(n, ExecutionMode::MeanField);
    cfg.epi.latent_period = 0;
    cfg.epi.default_mortality = 0.0;
    cfg.epi.initial_infected_fraction = 0.05;
    cfg.behavior.isolate_prob = 0.2;
    let t = simulate(&cfg, None).unwrap().trajectory;
    let want = sir_oracle(cfg.epi.beta(), 7, 0.05, 0.8, 40);
    for (k, (got, w)) in t.new_infections.iter().zip(&want).enumerate() {
        assert!(
            (got - n as f64 * w).abs() < 1e-9,
            "step {k}: {got} vs {}",
            n as f64 * w
        );
    }
    assert!(t.deaths.iter().all(|&x| x == 0.0));
}

#[test]
fn latency_delays_infections() {
    let mut cfg = complete(50, ExecutionMode::MeanField);
    cfg.epi.latent_period = 3;
    let t = simulate(&cfg, None).unwrap().trajectory;
    for k in 3..t.steps() {
        assert!((t.new_infections[k] - t.new_exposures[k - 3]).abs() < 1e-12);
    }
    assert_eq!(&t.new_infections[..3], &[0.0, 0.0, 0.0]);

    let mut cfg = cfg.clone();
    cfg.execution.mode = ExecutionMode::Stochastic;
    let t = simulate(&cfg, None).unwrap().trajectory;
    for k in 3..t.steps() {
        assert_eq!(t.new_infections[k], t.new_exposures[k - 3]);
    }
}

#[test]
fn mean_field_gradient_matches_finite_difference() {
    let cfg = small(ExecutionMode::MeanField);
    let world = World::build(&cfg).unwrap();
    let f = |beta: f64, g0: f64| -> (f64, f64, f64) {
        let tape = Tape::new();
        let mut s = Structural::constants(&tape, &cfg, &world);
        let b = tape.leaf_scalar(beta);
        s.beta = vec![b; cfg.execution.horizon_steps];
        s.gamma0 = tape.leaf_scalar(g0);
        let (_, taped) = run_taped(&tape, &cfg, &world, None, &s).unwrap();
        let cases = taped
            .new_infections
            .iter()
            .copied()
            .reduce(|a, b| a + b)
            .unwrap();
        let loss = cases * 1e-3 + taped.unemployment_rate[0] * taped.unemployment_rate[1];
        let g = tape.backward(loss).unwrap();
        (
            loss.scalar(),
            g.wrt_scalar(b).unwrap(),
            g.wrt_scalar(s.gamma0).unwrap(),
        )
    };
    let beta = cfg.epi.beta();
    let (_, db, dg) = f(beta, -0.4);
    let h = 1e-5;
    let fd_b = (f(beta + h, -0.4).0 - f(beta - h, -0.4).0) / (2.0 * h);
    let fd_g = (f(beta, -0.4 + h).0 - f(beta, -0.4 - h).0) / (2.0 * h);
    assert!(
        (db - fd_b).abs() <= 1e-4 * fd_b.abs().max(1e-8),
        "{db} vs {fd_b}"
    );
    assert!(
        (dg - fd_g).abs() <= 1e-4 * fd_g.abs().max(1e-8),
        "{dg} vs {fd_g}"
    );
}

#[test]
fn stochastic_gradient_flows_to_contact_rate() {
    let cfg = small(ExecutionMode::Stochastic);
    let world = World::build(&cfg).unwrap();
    let tape = Tape::new();
    let mut s = Structural::constants(&tape, &cfg, &world);
    let b = tape.leaf_scalar(cfg.epi.beta());
    s.beta = vec![b; cfg.execution.horizon_steps];
    let (out, taped) = run_taped(&tape, &cfg, &world, None, &s).unwrap();
    let total = taped
        .new_infections
        .iter()
        .copied()
        .reduce(|a, b| a + b)
        .unwrap();
    assert_eq!(
        total.scalar(),
        out.trajectory.new_infections.iter().sum::<f64>()
    );
    assert!(tape.backward(total).unwrap().wrt_scalar(b).unwrap() > 0.0);
}

#[test]
fn relabeling_agents_does_not_change_counts() {
    let cfg = small(ExecutionMode::Stochastic);
    let world = World::build(&cfg).unwrap();
    let n = world.n_agents();
    let perm: Vec<usize> = (0..n).map(|i| (i * 7 + 3) % n).collect();
    let moved = World::from_parts(
        world.population.permuted(&perm),
        world.graph.permuted(&perm),
        &cfg,
    )
    .unwrap();
    let a = run(&cfg, &world, None).unwrap().trajectory;
    let b = run(&cfg, &moved, None).unwrap().trajectory;
    assert_eq!(a.new_exposures, b.new_exposures);
    assert_eq!(a.deaths, b.deaths);
    assert_eq!(a.unemployment_rate, b.unemployment_rate);
}

#[test]
fn archetype_mode_call_budget() {
    let mut cfg = small(ExecutionMode::Stochastic);
    cfg.behavior.mode = BehaviorMode::Archetype;
    cfg.behavior.archetype_attributes = vec![crate::popgen::Attribute::Gender];
    cfg.behavior.samples_per_entry = 3;
    cfg.execution.horizon_steps = 35;
    let world = World::build(&cfg).unwrap();
    let k = world.archetypes.as_ref().unwrap().len() as u64;
    let provider = ProviderHandle::new(Box::new(HeuristicProvider { p: 0.3, seed: 1 }));
    let t = run(&cfg, &world, Some(&provider)).unwrap().trajectory;
    for (step, &c) in t.provider_calls.iter().enumerate() {
        let actions = if step % 30 == 0 { 2 } else { 1 };
        assert_eq!(c, k * 3 * actions, "step {step}");
    }
    assert_eq!(provider.calls(), t.provider_calls.iter().sum::<u64>());
}

#[test]
fn provider_required_outside_heuristic_mode() {
    let mut cfg = small(ExecutionMode::Stochastic);
    cfg.behavior.mode = BehaviorMode::Archetype;
    assert!(matches!(
        simulate(&cfg, None),
        Err(EngineError::MissingProvider(_))
    ));
}

#[test]
fn provider_failure_keeps_partial_series() {
    let mut cfg = small(ExecutionMode::Stochastic);
    cfg.behavior.mode = BehaviorMode::Archetype;
    let provider = ProviderHandle::new(Box::new(MockTableProvider::new(vec![]).unwrap()));
    match simulate(&cfg, Some(&provider)) {
        Err(EngineError::Aborted { step, partial, .. }) => {
            assert_eq!(step, 0);
            assert_eq!(partial.steps(), 0);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn testing_lowers_transmission() {
    for mode in [ExecutionMode::Stochastic, ExecutionMode::MeanField] {
        let base = complete(300, mode);
        let mut tested = base.clone();
        tested.testing = crate::epi::TestProtocol {
            uptake: 1.0,
            sensitivity: 1.0,
            result_delay: 0,
            ..Default::default()
        };
        let a = simulate(&base, None).unwrap().trajectory;
        let b = simulate(&tested, None).unwrap().trajectory;
        assert!(b.new_exposures.iter().all(|&x| x == 0.0), "{mode:?}");
        assert!(a.new_exposures.iter().sum::<f64>() > 0.0);
    }
}

#[test]
fn vaccination_lowers_attack_rate() {
    let base = small(ExecutionMode::MeanField);
    let mut vax = base.clone();
    vax.vaccine.daily_supply = 40;
    vax.vaccine.first_dose_efficacy = 0.9;
    let a = simulate(&base, None).unwrap().trajectory;
    let b = simulate(&vax, None).unwrap().trajectory;
    assert!(b.cumulative_infections.last() < a.cumulative_infections.last());
}

#[test]
fn dead_agents_stop_working() {
    let mut cfg = complete(200, ExecutionMode::Stochastic);
    cfg.epi.default_mortality = 1.0;
    cfg.epi.latent_period = 0;
    cfg.epi.r0 = Some(8.0);
    cfg.behavior.work_prob = 1.0;
    cfg.execution.horizon_steps = 61;
    let out = simulate(&cfg, None).unwrap();
    let pop = out.final_population.unwrap();
    let dead = pop.disease_stage.iter().filter(|&&s| s == Stage::M).count();
    assert!(dead > 0);
    let w = &out.trajectory.mean_willingness;
    assert_eq!(w[0], 1.0);
    assert!(w[2] < 1.0);
    for i in 0..pop.len() {
        if pop.disease_stage[i] == Stage::M {
            assert_eq!(pop.willingness[i], 0.0);
        }
    }
}

#[test]
fn stimulus_is_paid() {
    let mut cfg = small(ExecutionMode::Stochastic);
    cfg.stimulus.events = vec![crate::epi::StimulusEvent {
        step: 5,
        adult_amount: 600.0,
        per_child_amount: 0.0,
        eligible_income_bands: None,
    }];
    let t = simulate(&cfg, None).unwrap().trajectory;
    assert!(t.stimulus_paid[5] > 0.0);
    assert_eq!(t.stimulus_paid[4], 0.0);
}

#[test]
fn agent_mode_scales_counts() {
    let mut cfg = small(ExecutionMode::MeanField);
    cfg.population.size = 50;
    cfg.execution.horizon_steps = 10;
    cfg.behavior.mode = BehaviorMode::Agent;
    cfg.behavior.samples_per_entry = 1;
    let provider = ProviderHandle::new(Box::new(HeuristicProvider { p: 0.0, seed: 0 }));
    let base = simulate(&cfg, Some(&provider)).unwrap().trajectory;
    cfg.behavior.population_scale = 10.0;
    let scaled = simulate(&cfg, Some(&provider)).unwrap().trajectory;
    assert!((scaled.new_exposures[3] - 10.0 * base.new_exposures[3]).abs() < 1e-9);
    assert_eq!(scaled.isolation_rate, base.isolation_rate);

    cfg.population.size = 2000;
    assert!(matches!(
        simulate(&cfg, Some(&provider)),
        Err(EngineError::Config(_))
    ));
}

#[test]
fn writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let t = simulate(&small(ExecutionMode::Stochastic), None)
        .unwrap()
        .trajectory;
    t.write(dir.path()).unwrap();
    let back = Trajectory::read_json(&dir.path().join("trajectory.json")).unwrap();
    assert_eq!(back, t);
    let csv = std::fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    assert_eq!(csv.lines().count(), 41);
}
