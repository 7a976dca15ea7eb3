use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use diffabm::analysis::{counterfactual, poll, prospective_sweep, PollQuery, Sweep};
use diffabm::behavior::{
    FatigueProvider, HeuristicProvider, MockTableProvider, ProviderHandle, RemoteProvider, Response,
};
use diffabm::calibrate::{
    calibrate, synthetic_covariates, CalibrationOptions, CovariateSeries, ObservedData,
};
use diffabm::engine::{
    apply_patch, build_population, run, BehaviorMode, ScenarioPatch, SimulationConfig, World,
};
use diffabm::epi::VaccineProtocol;
use diffabm::popgen::{read_marginals, write_population};

const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Differentiable agent-based epidemic and labor simulator.
#[derive(Parser, Debug)]
#[command(name = "diffabm", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize a population from marginals and write it as CSV.
    Popgen(PopgenArgs),
    /// Run one simulation and write its trajectory.
    Simulate(SimulateArgs),
    /// Fit the calibration network to observed weekly cases and monthly
    /// unemployment.
    Calibrate(CalibrateArgs),
    /// Retrospective, counterfactual, and prospective analyses.
    Analyze {
        #[command(subcommand)]
        kind: Analyze,
    },
    /// Check a configuration and print it with defaults filled in.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Seed of the run; overrides `execution.seed`.
    #[arg(long)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Decision provider: heuristic, mock:<path>, fatigue, or remote.
    #[arg(long, default_value = "heuristic")]
    provider: String,
    /// Agent table to use instead of synthesizing one.
    #[arg(long)]
    population: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PopgenArgs {
    #[arg(long)]
    config: PathBuf,
    /// Marginal tables (JSON list) replacing those of the config.
    #[arg(long)]
    marginals: Option<PathBuf>,
    /// Overrides `population.seed`.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    /// Scenario patch, e.g. '{"epi.R0": 5.5}'.
    #[arg(long)]
    patch: Option<String>,
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    #[command(flatten)]
    common: Common,
    /// CSV with columns `week,cases`.
    #[arg(long)]
    cases: PathBuf,
    /// CSV with columns `month,unemployment_rate`.
    #[arg(long)]
    unemployment: Option<PathBuf>,
    /// Daily covariates, one column per signal; synthesized from the case
    /// series when absent.
    #[arg(long)]
    covariates: Option<PathBuf>,
    /// Calibration options (JSON).
    #[arg(long)]
    options: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    hidden: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Analyze {
    /// Aggregate a metric over agent groups after a stochastic run.
    Poll {
        #[command(flatten)]
        common: Common,
        /// Query as JSON; the flags below are used when absent.
        #[arg(long)]
        query: Option<String>,
        #[arg(long, value_delimiter = ',')]
        group_by: Vec<String>,
        #[arg(long)]
        metric: Option<String>,
        /// `attribute=label1|label2`, repeatable.
        #[arg(long)]
        filter: Vec<String>,
        /// Step window `FROM:TO`.
        #[arg(long)]
        window: Option<String>,
    },
    /// Compare a patched scenario with the baseline on paired seeds.
    Counterfactual {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        patch: String,
        #[arg(long, default_value_t = 10)]
        n_seeds: usize,
    },
    /// Sweep a vaccine protocol field and compare deaths of two protocols.
    Prospective {
        #[command(flatten)]
        common: Common,
        /// First protocol (JSON file); the config's protocol when absent.
        #[arg(long)]
        protocol_a: Option<PathBuf>,
        /// Second protocol (JSON file).
        #[arg(long)]
        protocol_b: PathBuf,
        #[arg(long)]
        field: String,
        /// Comma-separated, strictly increasing values.
        #[arg(long, value_delimiter = ',', required = true)]
        grid: Vec<f64>,
        #[arg(long, default_value_t = 10)]
        n_seeds: usize,
    },
}

fn read_config(path: &Path) -> Result<SimulationConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(SimulationConfig::from_json(&text)?)
}

fn load(common: &Common) -> Result<(SimulationConfig, Option<ProviderHandle>)> {
    let mut cfg = read_config(&common.config)?;
    cfg.execution.seed = common.seed;
    if let Some(p) = &common.population {
        cfg.population.path = Some(p.clone());
    }
    cfg.validate()?;
    let provider = make_provider(&common.provider, &cfg)?;
    Ok((cfg, provider))
}

fn make_provider(spec: &str, cfg: &SimulationConfig) -> Result<Option<ProviderHandle>> {
    let seed = cfg.execution.seed;
    let inner: Box<dyn diffabm::behavior::DecisionProvider> = match spec {
        "heuristic" if cfg.behavior.mode == BehaviorMode::Heuristic => return Ok(None),
        "heuristic" => Box::new(HeuristicProvider {
            p: cfg.behavior.isolate_prob,
            seed,
        }),
        "fatigue" => Box::new(FatigueProvider {
            isolate: Response {
                base: 0.6,
                slope: 0.04,
            },
            work: Response {
                base: 0.95,
                slope: 0.0,
            },
            seed,
        }),
        "remote" => Box::new(RemoteProvider::from_env(Duration::from_secs(30), 3)?),
        s => match s.strip_prefix("mock:") {
            Some(path) => Box::new(MockTableProvider::load(Path::new(path))?),
            None => {
                bail!("unknown provider {s}; expected heuristic, mock:<path>, fatigue, or remote")
            }
        },
    };
    Ok(Some(
        ProviderHandle::new(inner).with_parallelism(cfg.behavior.parallelism),
    ))
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)?)
        .with_context(|| format!("writing {}", path.display()))
}

/// Writes the config echo and the run metadata next to the results.
fn write_metadata(out: &Path, cfg: &SimulationConfig, command: &str, extra: Value) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join("config.json"), &cfg.normalized_json())?;
    let mut meta = json!({
        "command": command,
        "config_hash": cfg.hash(),
        "seed": cfg.execution.seed,
        "version": VERSION,
    });
    if let (Value::Object(m), Value::Object(e)) = (&mut meta, extra) {
        m.extend(e);
    }
    write_json(&out.join("run.json"), &meta)
}

fn parse_patch(text: &str) -> Result<ScenarioPatch> {
    let v: BTreeMap<String, Value> =
        serde_json::from_str(text).context("patch must be a JSON object")?;
    Ok(v)
}

fn popgen(a: &PopgenArgs) -> Result<()> {
    let mut cfg = read_config(&a.config)?;
    if let Some(m) = &a.marginals {
        cfg.population.marginals = read_marginals(m)?;
    }
    if let Some(s) = a.seed {
        cfg.population.seed = s;
    }
    cfg.population.path = None;
    cfg.validate()?;
    let (pop, warnings) = build_population(&cfg.population)?;
    for w in &warnings {
        log::warn!("{w}");
    }
    write_metadata(
        &a.out,
        &cfg,
        "popgen",
        json!({ "agents": pop.len(), "warnings": warnings }),
    )?;
    write_population(&pop, &a.out.join("population.csv"))?;
    Ok(())
}

fn simulate(a: &SimulateArgs) -> Result<()> {
    let (mut cfg, provider) = load(&a.common)?;
    let mut extra = json!({ "provider": a.common.provider });
    if let Some(p) = &a.patch {
        let patch = parse_patch(p)?;
        cfg = apply_patch(&cfg, &patch)?;
        extra["patch"] = serde_json::to_value(&patch)?;
    }
    let world = World::build(&cfg)?;
    for w in &world.warnings {
        log::warn!("{w}");
    }
    write_metadata(&a.common.out, &cfg, "simulate", extra)?;
    let out = run(&cfg, &world, provider.as_ref())?;
    out.trajectory.write(&a.common.out)?;
    Ok(())
}

fn calibrate_cmd(a: &CalibrateArgs) -> Result<()> {
    let (cfg, provider) = load(&a.common)?;
    let observed = ObservedData::read_csv(&a.cases, a.unemployment.as_deref())?;
    let mut opts: CalibrationOptions = match &a.options {
        Some(p) => serde_json::from_str(
            &fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        )?,
        None => CalibrationOptions::default(),
    };
    opts.init_seed = cfg.execution.seed;
    if let Some(e) = a.epochs {
        opts.epochs = e;
    }
    if let Some(lr) = a.lr {
        opts.lr = lr;
    }
    if let Some(h) = a.hidden {
        opts.hidden = h;
    }
    if a.unemployment.is_none() {
        opts.unemployment_weight = 0.0;
    }
    let cov = match &a.covariates {
        Some(p) => CovariateSeries::read_csv(p)?,
        None => {
            let daily: Vec<f64> = observed
                .weekly_cases
                .iter()
                .flat_map(|&c| [c / 7.0; 7])
                .collect();
            synthetic_covariates(&daily, &[0, 7], 0.1, 0, cfg.execution.seed)?
        }
    };
    let world = World::build(&cfg)?;
    write_metadata(
        &a.common.out,
        &cfg,
        "calibrate",
        json!({ "provider": a.common.provider, "options": opts }),
    )?;
    let fit = calibrate(&cfg, &world, &observed, &cov, &opts, provider.as_ref())?;
    let out = &a.common.out;
    fit.save(&out.join("calibration.json"))?;
    let mut loss = String::from("epoch,cases_mse,unemployment_mse,total\n");
    for r in &fit.history {
        loss.push_str(&format!(
            "{},{},{},{}\n",
            r.epoch, r.cases_mse, r.unemployment_mse, r.total
        ));
    }
    fs::write(out.join("loss.csv"), loss)?;
    let mut r0 = String::from("step,r0\n");
    for (t, v) in fit.r0.iter().enumerate() {
        r0.push_str(&format!("{t},{v}\n"));
    }
    fs::write(out.join("r0.csv"), r0)?;
    let mut iur = String::from("month,iur\n");
    for (m, v) in fit.iur.iter().enumerate() {
        iur.push_str(&format!("{m},{v}\n"));
    }
    fs::write(out.join("iur.csv"), iur)?;
    println!(
        "best epoch {:?}: loss {:.6e}, mean R0 {:.4}, gamma0 {:.4}, gamma1 {:.4}",
        fit.best_epoch,
        fit.best_loss,
        fit.mean_r0(),
        fit.gamma0(),
        fit.gamma1()
    );
    Ok(())
}

fn poll_query(
    query: &Option<String>,
    group_by: &[String],
    metric: &Option<String>,
    filter: &[String],
    window: &Option<String>,
) -> Result<PollQuery> {
    if let Some(q) = query {
        return serde_json::from_str(q).context("query must be a JSON object");
    }
    let metric = metric
        .clone()
        .ok_or_else(|| anyhow!("either --query or --metric is required"))?;
    let mut q = PollQuery {
        group_by: group_by.to_vec(),
        metric,
        ..Default::default()
    };
    for f in filter {
        let (k, v) = f
            .split_once('=')
            .ok_or_else(|| anyhow!("filter {f:?} is not attribute=labels"))?;
        q.filter
            .insert(k.to_string(), v.split('|').map(str::to_string).collect());
    }
    if let Some(w) = window {
        let (a, b) = w
            .split_once(':')
            .ok_or_else(|| anyhow!("window {w:?} is not FROM:TO"))?;
        q.window = Some((
            a.parse().context("window start")?,
            b.parse().context("window end")?,
        ));
    }
    Ok(q)
}

fn analyze(kind: &Analyze) -> Result<()> {
    match kind {
        Analyze::Poll {
            common,
            query,
            group_by,
            metric,
            filter,
            window,
        } => {
            let q = poll_query(query, group_by, metric, filter, window)?;
            let (mut cfg, provider) = load(common)?;
            cfg.execution.mode = diffabm::engine::ExecutionMode::Stochastic;
            let world = World::build(&cfg)?;
            write_metadata(
                &common.out,
                &cfg,
                "analyze poll",
                json!({ "provider": common.provider, "query": q }),
            )?;
            let out = run(&cfg, &world, provider.as_ref())?;
            let pop = out.final_population.as_ref().unwrap_or(&world.population);
            let table = poll(pop, &out.trajectory, &q)?;
            out.trajectory.write(&common.out)?;
            table.write(&common.out)?;
            print!("{}", table.to_csv());
        }
        Analyze::Counterfactual {
            common,
            patch,
            n_seeds,
        } => {
            let (cfg, provider) = load(common)?;
            let patch = parse_patch(patch)?;
            write_metadata(
                &common.out,
                &cfg,
                "analyze counterfactual",
                json!({ "provider": common.provider, "patch": patch, "n_seeds": n_seeds }),
            )?;
            let report = counterfactual(&cfg, &patch, *n_seeds, provider.as_ref())?;
            report.write(&common.out)?;
            for p in &report.peaks {
                println!(
                    "seed {}: peak {} at step {} -> {} at step {}",
                    p.seed,
                    p.baseline_peak,
                    p.baseline_peak_step,
                    p.patched_peak,
                    p.patched_peak_step
                );
            }
        }
        Analyze::Prospective {
            common,
            protocol_a,
            protocol_b,
            field,
            grid,
            n_seeds,
        } => {
            let (cfg, provider) = load(common)?;
            let read = |p: &Path| -> Result<VaccineProtocol> {
                let text =
                    fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
            };
            let a = match protocol_a {
                Some(p) => read(p)?,
                None => cfg.vaccine.clone(),
            };
            let b = read(protocol_b)?;
            let sweep = Sweep {
                field: field.clone(),
                grid: grid.clone(),
            };
            write_metadata(
                &common.out,
                &cfg,
                "analyze prospective",
                json!({ "provider": common.provider, "protocol_a": a, "protocol_b": b, "sweep": sweep, "n_seeds": n_seeds }),
            )?;
            let curve = prospective_sweep(&cfg, &a, &b, &sweep, *n_seeds, provider.as_ref())?;
            curve.write(&common.out)?;
            print!("{}", curve.to_csv());
            match curve.threshold {
                Some(t) => println!("threshold: {t}"),
                None => println!("threshold: none"),
            }
        }
    }
    Ok(())
}

/// Prints the normalized config on stdout and every issue on stderr.
fn validate(path: &Path) -> Result<bool> {
    let cfg = read_config(path)?;
    println!("{}", serde_json::to_string_pretty(&cfg.normalized_json())?);
    let issues = cfg.issues();
    for i in &issues {
        eprintln!("{}: {}", i.pointer, i.message);
    }
    Ok(issues.is_empty())
}

fn dispatch(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Popgen(a) => popgen(a)?,
        Command::Simulate(a) => simulate(a)?,
        Command::Calibrate(a) => calibrate_cmd(a)?,
        Command::Analyze { kind } => analyze(kind)?,
        Command::Validate { config } => return validate(config),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprintln!("{}", e.render());
            if !matches!(
                e.kind(),
                ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand
            ) {
                use clap::CommandFactory;
                eprintln!("{}", Cli::command().render_help());
            }
            return ExitCode::from(2);
        }
    };
    match dispatch(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
