//! Command-line harness: density propagation, closed-loop runs, Monte
//! Carlo studies, and the built-in validation suites.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numeric/solver error,
//! 4 validation-check failure.

use clap::{Args, Parser, Subcommand};
use fpmpc::config::{ExperimentConfig, FpSystem};
use fpmpc::error::Error;
use fpmpc::export;
use fpmpc::fp::{fp_propagate, CstrMeanFieldDrift, DensityField};
use fpmpc::metrics::hellinger;
use fpmpc::mpc::{run_monte_carlo, run_realization};
use fpmpc::validate;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "fpmpc", version, about = "Density-shaping stochastic MPC toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Propagate the state density under a fixed policy and write
    /// snapshot CSVs plus solver diagnostics.
    FpSolve(RunArgs),
    /// Run a single closed-loop realization and write its trajectory and
    /// per-update solver log.
    MpcRun(RunArgs),
    /// Run the Monte Carlo closed-loop study and write ensemble outputs
    /// and figure data.
    Montecarlo(RunArgs),
    /// Run the built-in property suites and report pass/fail.
    Validate,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configuration file (JSON); the built-in benchmark when
    /// omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured realization count.
    #[arg(long)]
    realizations: Option<usize>,
    /// Overrides the configured worker-thread count.
    #[arg(long)]
    workers: Option<usize>,
    /// Overrides the configured output directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

impl RunArgs {
    fn load(&self) -> Result<ExperimentConfig, Error> {
        let config = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => {
                let c = ExperimentConfig::default();
                c.validate()?;
                c
            }
        };
        Ok(config)
    }

    fn output_dir(&self, config: &ExperimentConfig) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| PathBuf::from(&config.output_dir))
    }

    fn seed(&self, config: &ExperimentConfig) -> u64 {
        self.seed.unwrap_or(config.closed_loop.seed)
    }

    fn workers(&self, config: &ExperimentConfig) -> usize {
        self.workers
            .or(config.closed_loop.workers)
            .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
            .max(1)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::FpSolve(args) => fp_solve(&args),
        Command::MpcRun(args) => mpc_run(&args),
        Command::Montecarlo(args) => montecarlo(&args),
        Command::Validate => return run_validate(),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}

fn fp_solve(args: &RunArgs) -> Result<(), Error> {
    let config = args.load()?;
    let dir = args.output_dir(&config);
    std::fs::create_dir_all(&dir)?;
    let grid = config.grid()?;
    let initial = config.initial_field(grid)?;
    let diffusion = config.fp_flux_diffusion();
    let mut snapshots = config.fp_run.snapshot_times.clone();
    snapshots.sort_by(|a, b| a.partial_cmp(b).unwrap());
    snapshots.retain(|&t| t <= config.fp_run.t_end + 1e-9);

    let trajectory = match &config.fp_run.system {
        FpSystem::Cstr => {
            let spec = config.build_ocp_spec()?;
            let policy = config.fp_run_policy(&spec)?;
            let mut drift =
                CstrMeanFieldDrift::new(spec.params.clone(), policy, config.initial.temperature);
            fp_propagate(
                &initial,
                |t, f: &DensityField, out: &mut [f64]| drift.fill(t, f, out),
                diffusion,
                config.fp_run.t_end,
                config.fp.dt_max,
                &snapshots,
            )?
        }
        FpSystem::Affine { constant, slope } => {
            let (c0, c1) = (*constant, *slope);
            fp_propagate(
                &initial,
                move |_, f: &DensityField, out: &mut [f64]| {
                    let g = *f.grid();
                    for (i, a) in out.iter_mut().enumerate() {
                        *a = c0 + c1 * g.face(i);
                    }
                },
                diffusion,
                config.fp_run.t_end,
                config.fp.dt_max,
                &snapshots,
            )?
        }
    };

    for (t, field) in &trajectory.snapshots {
        export::write_density_csv(&dir.join(export::snapshot_name("density", *t)), field)?;
    }
    let drift_vs_initial = match trajectory.snapshots.last() {
        Some((_, last)) => hellinger(last, &initial)?,
        None => 0.0,
    };
    export::write_fp_diagnostics(
        &dir.join("fp_diagnostics.json"),
        &trajectory.diagnostics,
        &[("hellinger_final_vs_initial", drift_vs_initial)],
    )?;
    let manifest = config.manifest("fp-solve", args.seed(&config), 1)?;
    export::write_json(&dir.join("manifest.json"), &manifest)?;
    println!(
        "fp-solve: {} steps, mass error {:.2e}, clipped {:.2e}, {} snapshots -> {}",
        trajectory.diagnostics.steps,
        trajectory.diagnostics.max_mass_error,
        trajectory.diagnostics.clipped_mass,
        trajectory.snapshots.len(),
        dir.display()
    );
    Ok(())
}

fn mpc_run(args: &RunArgs) -> Result<(), Error> {
    let config = args.load()?;
    let dir = args.output_dir(&config);
    std::fs::create_dir_all(&dir)?;
    let seed = args.seed(&config);
    let plant = config.build_plant()?;
    let closed_loop = config.build_closed_loop()?;
    let run = run_realization(&plant, &closed_loop, seed, 0, None)?;
    export::write_path_csv(&dir.join("trajectory.csv"), &run, config.ocp.chance_threshold)?;
    export::write_solver_log(&dir.join("solver_log.json"), &run.steps)?;
    let manifest = config.manifest("mpc-run", seed, 1)?;
    export::write_json(&dir.join("manifest.json"), &manifest)?;
    let alarms = run.steps.iter().filter(|s| s.alarm).count();
    println!(
        "mpc-run: {} updates, {} alarms, final state ({:.4}, {:.2}) -> {}",
        run.steps.len(),
        alarms,
        run.path.last_state()[0],
        run.path.last_state()[1],
        dir.display()
    );
    Ok(())
}

fn montecarlo(args: &RunArgs) -> Result<(), Error> {
    let config = args.load()?;
    let dir = args.output_dir(&config);
    std::fs::create_dir_all(&dir)?;
    let seed = args.seed(&config);
    let workers = args.workers(&config);
    let n_real = args.realizations.unwrap_or(config.closed_loop.n_realizations);
    let plant = config.build_plant()?;
    let closed_loop = config.build_closed_loop()?;
    let record = run_monte_carlo(&plant, &closed_loop, n_real, seed, workers)?;

    let cap = 1.0 - config.ocp.chance_confidence;
    export::write_ensemble_csv(&dir.join("ensemble.csv"), &record, config.ocp.chance_threshold)?;
    export::write_violation_csv(&dir.join("violations.csv"), &record.violation_series, cap)?;
    for (t, field) in &record.histograms {
        export::write_histogram_csv(
            &dir.join(export::snapshot_name("histogram", *t)),
            field,
            &closed_loop.ocp.reference,
        )?;
    }
    export::write_summary(&dir.join("summary.json"), &record, cap)?;
    let manifest = config.manifest("montecarlo", seed, workers)?;
    export::write_json(&dir.join("manifest.json"), &manifest)?;
    println!(
        "montecarlo: {} realizations, terminal mean {:.4}, variance {:.3e}, peak violation {:.3} -> {}",
        record.runs.len(),
        record.terminal_mean,
        record.terminal_variance,
        record
            .violation_series
            .iter()
            .map(|(_, f)| *f)
            .fold(0.0f64, f64::max),
        dir.display()
    );
    Ok(())
}

fn run_validate() -> ExitCode {
    let results = validate::run_all();
    let mut all_passed = true;
    for suite in &results {
        let tag = if suite.passed { "PASS" } else { "FAIL" };
        println!("{tag} {}: {}", suite.name, suite.details);
        all_passed &= suite.passed;
    }
    if all_passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(4)
    }
}
