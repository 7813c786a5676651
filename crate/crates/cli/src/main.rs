use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use fogalloc::channel::generate_scenario;
use fogalloc::config::{Config, MethodSelection};
use fogalloc::experiments::{self, methods_for, solve_with};
use fogalloc::solver::SolverError;
use fogalloc::{validation, Error, Method, SolveReport};

/// Energy-optimal task partitioning, power and CPU-frequency allocation for
/// device-to-device fog computing.
///
/// Settings are resolved as: command-line flags, then the config file, then
/// built-in defaults.
#[derive(Debug, Parser)]
#[command(name = "fogalloc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON config file; omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed (overrides `experiment.seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output file (stdout when absent; overrides `output.csv` for sweeps).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads; 0 means one per logical core (overrides `jobs`).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Methods to run (overrides `method`). The local baseline always runs.
    #[arg(long, global = true, value_enum)]
    method: Option<MethodArg>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve one random scenario and print the reports as JSON.
    Solve,
    /// Monte Carlo sweep over deadlines; per-run CSV.
    SweepTmax,
    /// Monte Carlo sweep over CPU caps; per-run CSV.
    SweepFmax,
    /// Wall-time comparison of the two methods; JSON table.
    Runtime,
    /// Run the self-check suite and print a pass/fail table.
    Validate,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MethodArg {
    Local,
    Dc,
    TwoStep,
    Both,
}

impl From<MethodArg> for MethodSelection {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Local => MethodSelection::Local,
            MethodArg::Dc => MethodSelection::Dc,
            MethodArg::TwoStep => MethodSelection::TwoStep,
            MethodArg::Both => MethodSelection::Both,
        }
    }
}

/// Failure classes with their exit codes.
#[derive(Debug)]
enum Failure {
    Config(anyhow::Error),
    Infeasible(anyhow::Error),
    Other(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) | Failure::Other(_) => 1,
            Failure::Infeasible(_) => 2,
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

fn load_config(cli: &Cli) -> Result<Config, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))
                .map_err(Failure::Config)?;
            Config::from_json(&text)
                .with_context(|| format!("{}", path.display()))
                .map_err(Failure::Config)?
        }
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.experiment.seed = seed;
    }
    if let Some(jobs) = cli.jobs {
        cfg.jobs = jobs;
    }
    if let Some(m) = cli.method {
        cfg.method = m.into();
    }
    cfg.validate().map_err(|e| Failure::Config(e.into()))?;
    Ok(cfg)
}

fn is_infeasibility(e: &Error) -> bool {
    matches!(
        e,
        Error::ActiveCapExceeded { .. }
            | Error::UploadTooLong { .. }
            | Error::Solver(SolverError::Infeasible { .. })
    )
}

fn emit(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(path) => {
            std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            stdout.flush()?;
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct SolveOutput {
    seed: u64,
    reports: Vec<SolveReport>,
}

fn cmd_solve(cli: &Cli, cfg: &Config) -> Result<(), Failure> {
    let seed = cfg.experiment.seed;
    let s = generate_scenario(&cfg.system, &mut ChaCha8Rng::seed_from_u64(seed))
        .map_err(|e| Failure::Config(e.into()))?;
    log::info!("seed {seed}: {} offloading devices in range", s.offload_count());

    let mut reports = Vec::new();
    let mut infeasible = Vec::new();
    for m in methods_for(cfg.method) {
        match solve_with(m, &s, cfg) {
            Ok(r) => {
                if !r.is_feasible() {
                    infeasible.push(format!("{m}: worst violation {:.3e}", r.feasibility.worst_violation));
                }
                reports.push(r);
            }
            Err(e) if is_infeasibility(&e) => infeasible.push(format!("{m}: {e}")),
            Err(e) => return Err(Failure::Other(anyhow::Error::new(e).context(format!("{m}")))),
        }
    }
    let energy = |m: Method| reports.iter().find(|r| r.method == m).map(|r| r.expected_energy);
    if let (Some(dc), Some(ts)) = (energy(Method::Dc), energy(Method::TwoStep)) {
        if ts > dc {
            log::warn!("two-step energy {ts:.6} J exceeds DC energy {dc:.6} J on this scenario");
        }
    }

    let text = serde_json::to_string_pretty(&SolveOutput { seed, reports }).context("serializing")?;
    emit(cli.out.as_deref(), &(text + "\n"))?;
    if infeasible.is_empty() {
        Ok(())
    } else {
        Err(Failure::Infeasible(anyhow::anyhow!("infeasible: {}", infeasible.join("; "))))
    }
}

fn cmd_sweep(cli: &Cli, cfg: &Config, axis: Command) -> Result<(), Failure> {
    let (rows, summary) = match axis {
        Command::SweepTmax => experiments::sweep_tmax(cfg),
        _ => experiments::sweep_fmax(cfg),
    }
    .context("sweep")?;
    log::info!("{} rows", rows.len());

    let target = cli.out.clone().or_else(|| cfg.output.csv.clone());
    match target {
        Some(path) => experiments::write_csv_file(&rows, &path)
            .with_context(|| format!("writing {}", path.display()))?,
        None => {
            let mut stdout = std::io::stdout().lock();
            experiments::write_csv(&rows, &mut stdout).context("writing CSV")?;
        }
    }
    if let Some(path) = &cfg.output.summary {
        experiments::write_json(&summary, path).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn cmd_runtime(cli: &Cli, cfg: &Config) -> Result<(), Failure> {
    let (rows, table) = experiments::runtime_table(cfg).context("runtime table")?;
    for r in &table {
        log::info!(
            "F_max {:.3e} J {}: DC {:.4} s, two-step {:.4} s, ratio {:.1}",
            r.f_max,
            r.devices,
            r.dc_mean_time_s,
            r.two_step_mean_time_s,
            r.time_ratio
        );
    }
    if let Some(path) = &cfg.output.csv {
        experiments::write_csv_file(&rows, path).with_context(|| format!("writing {}", path.display()))?;
    }
    let text = serde_json::to_string_pretty(&table).context("serializing")?;
    emit(cli.out.as_deref(), &(text + "\n"))?;
    Ok(())
}

fn cmd_validate(cli: &Cli, cfg: &Config) -> Result<(), Failure> {
    let checks = validation::run_all(cfg);
    let table = validation::format_table(&checks);
    emit(cli.out.as_deref(), &table)?;
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(Failure::Other(anyhow::anyhow!("{failed} of {} checks failed", checks.len())));
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let cfg = load_config(cli)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build_global()
        .context("building the thread pool")?;
    match cli.command {
        Command::Solve => cmd_solve(cli, &cfg),
        Command::SweepTmax => cmd_sweep(cli, &cfg, Command::SweepTmax),
        Command::SweepFmax => cmd_sweep(cli, &cfg, Command::SweepFmax),
        Command::Runtime => cmd_runtime(cli, &cfg),
        Command::Validate => cmd_validate(cli, &cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FOGALLOC_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Config(e) | Failure::Infeasible(e) | Failure::Other(e)) = &f;
            eprintln!("error: {e:#}");
            ExitCode::from(f.code())
        }
    }
}
