//! Receding-horizon, sample-and-hold closed-loop execution.
//!
//! At each sampling instant the controller re-initializes its density from
//! the realization's measured state (a truncated normal centered at the
//! true concentration), solves the finite-horizon problem warm-started
//! from the previous solution shifted by one sample period, and applies
//! the first input segment to the Euler-Maruyama plant until the next
//! instant. An infeasible solve raises a feasibility alarm and holds the
//! previously applied input.

use crate::error::{Error, Result};
use crate::fp::{density_from_normal, DensityField};
use crate::lyapunov::lyapunov_value;
use crate::metrics::hellinger;
use crate::model::{Beta4Distribution, ControlAffineSde};
use crate::ocp::{solve_ocp, ControlPolicy, OcpSpec, OcpStatus};
use crate::sde::{empirical_histogram, EmIntegrator, PathRecord, WienerStream};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

/// Closed-loop experiment description.
pub struct ClosedLoopConfig {
    /// Controller sampling period, minutes.
    pub sample_period: f64,
    /// Total process run time, minutes.
    pub run_time: f64,
    /// Standard deviation of the truncated-normal density
    /// re-initialization at each sampling instant.
    pub measurement_std: f64,
    /// Plant integration step, minutes.
    pub plant_dt: f64,
    /// Instants at which ensemble histograms are collected.
    pub snapshot_times: Vec<f64>,
    pub initial: Beta4Distribution,
    pub initial_temperature: f64,
    pub ocp: OcpSpec,
}

impl ClosedLoopConfig {
    pub fn validate(&self) -> Result<()> {
        self.ocp.validate()?;
        if !(self.sample_period > 0.0) {
            return Err(Error::Config(format!(
                "closed_loop.sample_period: must be positive, got {}",
                self.sample_period
            )));
        }
        let ratio = self.run_time / self.sample_period;
        if !(self.run_time > 0.0) || (ratio - ratio.round()).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "closed_loop.run_time: sample period {} must divide run time {}",
                self.sample_period, self.run_time
            )));
        }
        if self.sample_period > self.ocp.control_horizon + 1e-12 {
            return Err(Error::Config(format!(
                "closed_loop.sample_period: {} exceeds the control horizon {}",
                self.sample_period, self.ocp.control_horizon
            )));
        }
        let steps = self.sample_period / self.plant_dt;
        if !(self.plant_dt > 0.0) || (steps - steps.round()).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "closed_loop.plant_dt: {} must divide the sample period {}",
                self.plant_dt, self.sample_period
            )));
        }
        if !(self.measurement_std > 0.0 && self.measurement_std.is_finite()) {
            return Err(Error::Config(format!(
                "closed_loop.measurement_std: must be positive, got {}",
                self.measurement_std
            )));
        }
        for &s in &self.snapshot_times {
            if !(0.0..=self.run_time + 1e-9).contains(&s) {
                return Err(Error::Config(format!(
                    "closed_loop.snapshot_times: {s} outside [0, {}]",
                    self.run_time
                )));
            }
        }
        self.initial.validate()?;
        Ok(())
    }

    /// Number of controller updates over the run.
    pub fn n_updates(&self) -> usize {
        (self.run_time / self.sample_period).round() as usize
    }
}

/// One controller update record.
#[derive(Debug, Clone)]
pub struct StepLog {
    pub t: f64,
    pub status: OcpStatus,
    /// Input actually applied over the following sample period.
    pub applied: Vec<f64>,
    /// First-interval inputs of the solved policy (flattened policy kept
    /// for warm-start auditing).
    pub policy_inputs: Vec<f64>,
    /// Warm-start inputs handed to the solver, if any.
    pub warm_inputs: Option<Vec<f64>>,
    pub objective: f64,
    pub evaluations: usize,
    /// Infeasible solve: the previous input was held.
    pub alarm: bool,
}

/// One closed-loop realization.
#[derive(Debug, Clone)]
pub struct ClosedLoopRun {
    pub path: PathRecord,
    pub steps: Vec<StepLog>,
}

/// Runs one realization from `x0` with the given Wiener stream.
pub fn run_closed_loop(
    sys: &ControlAffineSde,
    config: &ClosedLoopConfig,
    stream: WienerStream,
    x0: &[f64],
) -> Result<ClosedLoopRun> {
    config.validate()?;
    if (stream.dt - config.plant_dt).abs() > 1e-12 {
        return Err(Error::Config(format!(
            "closed_loop: stream dt {} differs from plant dt {}",
            stream.dt, config.plant_dt
        )));
    }
    let mut rng = stream.rng();
    run_closed_loop_with_rng(sys, config, &mut rng, x0, None)
}

/// Runs realization `id` of a Monte Carlo study: the initial concentration
/// is drawn from the configured distribution on stream `(seed, id)` and
/// the same stream then drives the plant noise. `first_warm` seeds the
/// first solve (later solves warm-start from the shifted predecessor).
pub fn run_realization(
    sys: &ControlAffineSde,
    config: &ClosedLoopConfig,
    seed: u64,
    id: u64,
    first_warm: Option<&ControlPolicy>,
) -> Result<ClosedLoopRun> {
    let stream = WienerStream::new(seed, id, config.plant_dt);
    let mut rng = stream.rng();
    let x0 = vec![config.initial.sample(&mut rng), config.initial_temperature];
    run_closed_loop_with_rng(sys, config, &mut rng, &x0, first_warm)
}

fn run_closed_loop_with_rng(
    sys: &ControlAffineSde,
    config: &ClosedLoopConfig,
    rng: &mut ChaCha12Rng,
    x0: &[f64],
    first_warm: Option<&ControlPolicy>,
) -> Result<ClosedLoopRun> {
    if x0.len() != sys.state_dim {
        return Err(Error::ModelDomain(format!(
            "initial state dimension {} does not match model dimension {}",
            x0.len(),
            sys.state_dim
        )));
    }
    let dt = config.plant_dt;
    let n_updates = config.n_updates();
    let steps_per_sample = (config.sample_period / dt).round() as usize;

    let mut integrator = EmIntegrator::new(sys);
    let mut x = x0.to_vec();
    let mut times = Vec::with_capacity(n_updates * steps_per_sample + 1);
    let mut states = Vec::new();
    let mut inputs = Vec::new();
    times.push(0.0);
    states.extend_from_slice(&x);

    let mut steps = Vec::with_capacity(n_updates);
    let mut previous_policy: Option<ControlPolicy> = None;
    let mut previous_applied: Option<Vec<f64>> = None;

    for k in 0..n_updates {
        let t_k = k as f64 * config.sample_period;
        // measured density: truncated normal at the true concentration
        let measured = density_from_normal(
            x[0],
            config.measurement_std * config.measurement_std,
            config.ocp.grid,
        )?
        .field;
        let measured_temperature = x[1];

        let warm = match &previous_policy {
            Some(p) => {
                let mut shifted = p.advanced(config.sample_period);
                shifted.project(&config.ocp.bounds);
                Some(shifted)
            }
            None => first_warm.cloned(),
        };
        let warm_inputs = warm.as_ref().map(flatten_policy);
        let solution = solve_ocp(&config.ocp, &measured, measured_temperature, warm.as_ref(), None)?;

        let alarm = solution.status == OcpStatus::Infeasible;
        let applied: Vec<f64> = if alarm {
            // hold the previously applied input; the first update has no
            // predecessor, so the least-violating solution is applied
            match &previous_applied {
                Some(u) => u.clone(),
                None => solution.policy.input_at(0.0).to_vec(),
            }
        } else {
            solution.policy.input_at(0.0).to_vec()
        };

        steps.push(StepLog {
            t: t_k,
            status: solution.status,
            applied: applied.clone(),
            policy_inputs: flatten_policy(&solution.policy),
            warm_inputs,
            objective: solution.objective,
            evaluations: solution.diagnostics.evaluations,
            alarm,
        });

        for s in 0..steps_per_sample {
            let t = t_k + s as f64 * dt;
            integrator.step(&mut x, &applied, dt, t, rng)?;
            inputs.extend_from_slice(&applied);
            times.push(t + dt);
            states.extend_from_slice(&x);
        }

        previous_policy = Some(solution.policy);
        previous_applied = Some(applied);
    }

    let path = PathRecord::from_parts(
        sys.state_dim,
        sys.input_dim,
        times,
        states,
        inputs,
        integrator.clip_events,
    );
    Ok(ClosedLoopRun { path, steps })
}

fn flatten_policy(p: &ControlPolicy) -> Vec<f64> {
    p.intervals().iter().flat_map(|(_, u)| u.iter().copied()).collect()
}

/// Aggregate solver counters over an ensemble.
#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct SolverStats {
    pub solves: usize,
    pub optimal: usize,
    pub feasible_suboptimal: usize,
    pub infeasible: usize,
    pub alarms: usize,
    pub total_evaluations: usize,
}

/// Monte Carlo closed-loop study output.
pub struct EnsembleRecord {
    pub runs: Vec<ClosedLoopRun>,
    /// Realizations that failed, with their error messages.
    pub failures: Vec<(u64, String)>,
    /// Per sampling instant: `(t, fraction of realizations with the true
    /// state at or below the constraint threshold)`.
    pub violation_series: Vec<(f64, f64)>,
    /// Ensemble histograms of the concentration at the snapshot times.
    pub histograms: Vec<(f64, DensityField)>,
    pub terminal_mean: f64,
    pub terminal_variance: f64,
    pub mean_v_initial: f64,
    pub mean_v_terminal: f64,
    /// Hellinger distance of the initial/terminal ensemble histogram to
    /// the reference density.
    pub hellinger_initial: f64,
    pub hellinger_terminal: f64,
    pub solver: SolverStats,
}

/// Runs `n_real` independent closed-loop realizations (stream ids
/// `0..n_real`) on `workers` threads and aggregates the ensemble.
/// Individual failures are recorded; more than 10% failed realizations is
/// an error. Deterministic given `(seed, n_real, config)`.
pub fn run_monte_carlo(
    sys: &ControlAffineSde,
    config: &ClosedLoopConfig,
    n_real: usize,
    seed: u64,
    workers: usize,
) -> Result<EnsembleRecord> {
    config.validate()?;
    if n_real == 0 {
        return Err(Error::Config("montecarlo: need at least one realization".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("montecarlo: thread pool: {e}")))?;
    // one shared cold solve from the configured initial density seeds the
    // first update of every realization
    let initial_field = crate::fp::density_from_beta(&config.initial, config.ocp.grid)?;
    let shared_warm = solve_ocp(&config.ocp, &initial_field, config.initial_temperature, None, None)
        .map(|s| s.policy)
        .ok();
    let results: Vec<(u64, Result<ClosedLoopRun>)> = pool.install(|| {
        (0..n_real as u64)
            .into_par_iter()
            .map(|id| (id, run_realization(sys, config, seed, id, shared_warm.as_ref())))
            .collect()
    });

    let mut runs = Vec::with_capacity(n_real);
    let mut failures = Vec::new();
    for (id, res) in results {
        match res {
            Ok(run) => runs.push(run),
            Err(e) => failures.push((id, e.to_string())),
        }
    }
    if failures.len() * 10 > n_real {
        return Err(Error::Ocp(format!(
            "montecarlo: {} of {n_real} realizations failed (first: {})",
            failures.len(),
            failures[0].1
        )));
    }
    if runs.is_empty() {
        return Err(Error::Ocp("montecarlo: no realization succeeded".into()));
    }

    let threshold = config
        .ocp
        .chance
        .as_scalar_below()
        .map(|(_, t)| t)
        .ok_or_else(|| Error::Ocp("montecarlo: scalar chance constraint required".into()))?;

    // per sampling instant violation fraction of the true state
    let mut violation_series = Vec::new();
    for k in 0..=config.n_updates() {
        let t = k as f64 * config.sample_period;
        let mut violations = 0usize;
        for run in &runs {
            let idx = run.path.index_of(t).ok_or_else(|| {
                Error::Ocp(format!("montecarlo: sampling instant {t} missing from a path"))
            })?;
            if run.path.state(idx)[0] <= threshold {
                violations += 1;
            }
        }
        violation_series.push((t, violations as f64 / runs.len() as f64));
    }

    let paths: Vec<&PathRecord> = runs.iter().map(|r| &r.path).collect();
    let mut histograms = Vec::new();
    for &t in &config.snapshot_times {
        let masses = empirical_histogram(&paths, 0, t, &config.ocp.grid)?;
        histograms.push((t, DensityField::from_masses(config.ocp.grid, masses)?));
    }

    let terminal: Vec<f64> = runs.iter().map(|r| r.path.last_state()[0]).collect();
    let terminal_mean = terminal.iter().sum::<f64>() / terminal.len() as f64;
    let terminal_variance = terminal
        .iter()
        .map(|x| (x - terminal_mean).powi(2))
        .sum::<f64>()
        / (terminal.len() as f64 - 1.0).max(1.0);

    let cert = &config.ocp.certificate;
    let mean_v_initial = runs
        .iter()
        .map(|r| lyapunov_value(cert, r.path.state(0)))
        .sum::<f64>()
        / runs.len() as f64;
    let mean_v_terminal = runs
        .iter()
        .map(|r| lyapunov_value(cert, r.path.last_state()))
        .sum::<f64>()
        / runs.len() as f64;

    let initial_hist =
        DensityField::from_masses(config.ocp.grid, empirical_histogram(&paths, 0, 0.0, &config.ocp.grid)?)?;
    let terminal_hist = DensityField::from_masses(
        config.ocp.grid,
        empirical_histogram(&paths, 0, config.run_time, &config.ocp.grid)?,
    )?;
    let hellinger_initial = hellinger(&initial_hist, &config.ocp.reference)?;
    let hellinger_terminal = hellinger(&terminal_hist, &config.ocp.reference)?;

    let mut solver = SolverStats::default();
    for run in &runs {
        for step in &run.steps {
            solver.solves += 1;
            solver.total_evaluations += step.evaluations;
            match step.status {
                OcpStatus::Optimal => solver.optimal += 1,
                OcpStatus::FeasibleSuboptimal => solver.feasible_suboptimal += 1,
                OcpStatus::Infeasible => solver.infeasible += 1,
            }
            if step.alarm {
                solver.alarms += 1;
            }
        }
    }

    Ok(EnsembleRecord {
        runs,
        failures,
        violation_series,
        histograms,
        terminal_mean,
        terminal_variance,
        mean_v_initial,
        mean_v_terminal,
        hellinger_initial,
        hellinger_terminal,
        solver,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fp::{density_from_normal, Grid1D};
    use crate::lyapunov::LyapunovCertificate;
    use crate::model::{build_cstr, CstrParameters, InputBounds, StateConstraint};
    use crate::ocp::{ObjectiveForm, SolverSettings};
    use nalgebra::DMatrix;

    fn small_config(sigma: f64, run_time: f64) -> (ControlAffineSde, ClosedLoopConfig) {
        let mut params = CstrParameters::default();
        params.sigma_ca = sigma;
        let plant = build_cstr(&params).unwrap();
        let sys = build_cstr(&params).unwrap();
        let grid = Grid1D::new(0.0, 2.0, 200).unwrap();
        let reference = density_from_normal(0.57, 4e-4, grid).unwrap().field;
        let ocp = OcpSpec {
            params,
            sys,
            prediction_horizon: 4.0,
            control_horizon: 4.0,
            n_intervals: 2,
            grid,
            fp_diffusion: 5e-4,
            dt_max: 0.05,
            reference,
            objective: ObjectiveForm::TemperatureTracking { setpoint: 317.0 },
            chance: StateConstraint::below_threshold(0, 0.53, 0.95).unwrap(),
            certificate: LyapunovCertificate::new(
                DMatrix::from_row_slice(2, 2, &[3.18, 0.93, 0.93, 0.58]),
                0.1,
                vec![0.57, 317.0],
                0.05,
            )
            .unwrap(),
            bounds: InputBounds::new(vec![0.0, -10.0], vec![2.0, 10.0]).unwrap(),
            eval_dt: 1.0,
            solver: SolverSettings { budget: 2500, ..SolverSettings::default() },
        };
        let config = ClosedLoopConfig {
            sample_period: 2.0,
            run_time,
            measurement_std: 0.02,
            plant_dt: 0.01,
            snapshot_times: vec![0.0, run_time],
            initial: Beta4Distribution::new(0.0, 2.0, 320.0, 320.0).unwrap(),
            initial_temperature: 315.0,
            ocp,
        };
        (plant, config)
    }

    #[test]
    fn update_count_matches_sampling() {
        let (_, mut config) = small_config(0.03, 30.0);
        assert_eq!(config.n_updates(), 15);
        config.run_time = 2.0;
        assert_eq!(config.n_updates(), 1);
    }

    #[test]
    fn degenerate_horizon_runs_a_single_solve() {
        let (plant, mut config) = small_config(0.03, 2.0);
        config.snapshot_times = vec![0.0, 2.0];
        let run = run_closed_loop(
            &plant,
            &config,
            WienerStream::new(5, 0, config.plant_dt),
            &[1.0, 315.0],
        )
        .unwrap();
        assert_eq!(run.steps.len(), 1);
        assert_eq!(run.path.len(), 201);
        // sample-and-hold: the applied input is constant over the period
        for i in 0..run.path.len() - 1 {
            assert_eq!(run.path.input(i), run.steps[0].applied.as_slice());
        }
    }

    #[test]
    fn noise_free_plant_stays_at_steady_state() {
        let (plant, mut config) = small_config(0.0, 4.0);
        config.snapshot_times = vec![0.0];
        let run = run_closed_loop(
            &plant,
            &config,
            WienerStream::new(5, 0, config.plant_dt),
            &[0.57, 317.0],
        )
        .unwrap();
        let end = run.path.last_state();
        assert!((end[0] - 0.57).abs() <= 0.02, "C_A drifted to {}", end[0]);
        assert!((end[1] - 317.0).abs() <= 1.0, "T drifted to {}", end[1]);
    }

    #[test]
    fn warm_start_is_previous_policy_advanced() {
        let (plant, mut config) = small_config(0.03, 6.0);
        config.snapshot_times = vec![0.0];
        let run = run_closed_loop(
            &plant,
            &config,
            WienerStream::new(11, 0, config.plant_dt),
            &[0.8, 316.0],
        )
        .unwrap();
        assert_eq!(run.steps.len(), 3);
        for k in 1..run.steps.len() {
            let prev = &run.steps[k - 1];
            let prev_policy = ControlPolicy::new(
                prev.policy_inputs
                    .chunks(2)
                    .map(|u| (2.0, u.to_vec()))
                    .collect(),
            )
            .unwrap();
            let mut expected = prev_policy.advanced(config.sample_period);
            expected.project(&config.ocp.bounds);
            let expected_flat = flatten_policy(&expected);
            assert_eq!(
                run.steps[k].warm_inputs.as_ref().unwrap(),
                &expected_flat,
                "update {k}"
            );
        }
    }

    #[test]
    fn monte_carlo_is_reproducible_across_worker_counts() {
        let (plant, mut config) = small_config(0.03, 4.0);
        config.snapshot_times = vec![0.0, 4.0];
        let a = run_monte_carlo(&plant, &config, 3, 99, 1).unwrap();
        let b = run_monte_carlo(&plant, &config, 3, 99, 2).unwrap();
        assert_eq!(a.runs.len(), b.runs.len());
        for (ra, rb) in a.runs.iter().zip(&b.runs) {
            assert_eq!(ra.path, rb.path);
            for (sa, sb) in ra.steps.iter().zip(&rb.steps) {
                assert_eq!(sa.applied, sb.applied);
                assert_eq!(sa.status, sb.status);
            }
        }
        assert_eq!(a.violation_series, b.violation_series);
        assert_eq!(a.terminal_mean, b.terminal_mean);
        // violation series has run_time / sample_period + 1 entries
        assert_eq!(a.violation_series.len(), 3);
        for (_, h) in &a.histograms {
            assert!((h.total_mass() - 1.0).abs() < 1e-9);
        }
    }
}
