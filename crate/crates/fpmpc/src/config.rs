//! Experiment configuration: a JSON key/value tree with every field
//! defaulted to the reactor benchmark scenario.
//!
//! Conventions worth spelling out once:
//!
//! * `fp.diffusion_d` is the diffusion-matrix entry `D = h h'` of the
//!   density equation. The finite-volume face flux is `a p - (D/2) dp/dx`,
//!   so the solver receives `D/2` as its flux coefficient.
//! * The plant noise intensity used in closed-loop studies defaults to
//!   `sqrt(fp.diffusion_d)` so the simulated paths and the propagated
//!   density describe the same process; set `closed_loop.plant_sigma` to
//!   decouple them (the tabulated `model.sigma_ca` is kept as model data
//!   but is not consistent with the benchmark's `D`).

use crate::error::{Error, Result};
use crate::fp::{density_from_beta, density_from_normal, DensityField, Grid1D};
use crate::lyapunov::LyapunovCertificate;
use crate::model::{
    build_cstr, Beta4Distribution, ControlAffineSde, CstrParameters, InputBounds, StateConstraint,
};
use crate::mpc::ClosedLoopConfig;
use crate::ocp::{ControlPolicy, ObjectiveForm, OcpSpec, SolverSettings};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Full experiment description.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: CstrParameters,
    pub initial: InitialConfig,
    pub fp: FpConfig,
    pub ocp: OcpConfig,
    pub closed_loop: LoopConfig,
    /// Settings for the standalone density-propagation command.
    pub fp_run: FpRunConfig,
    pub output_dir: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitialConfig {
    pub concentration: InitialDensity,
    pub temperature: f64,
}

impl Default for InitialConfig {
    fn default() -> Self {
        InitialConfig {
            concentration: InitialDensity::Beta(Beta4Distribution {
                lower: 0.0,
                upper: 2.0,
                alpha: 320.0,
                beta: 320.0,
            }),
            temperature: 315.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialDensity {
    Beta(Beta4Distribution),
    Normal { mean: f64, variance: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FpConfig {
    pub grid_lower: f64,
    pub grid_upper: f64,
    pub grid_cells: usize,
    /// Diffusion-matrix entry `D` of the density equation (see module docs).
    pub diffusion_d: f64,
    pub dt_max: f64,
}

impl Default for FpConfig {
    fn default() -> Self {
        FpConfig { grid_lower: 0.0, grid_upper: 2.0, grid_cells: 200, diffusion_d: 0.001, dt_max: 0.05 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OcpConfig {
    pub prediction_horizon: f64,
    pub control_horizon: f64,
    pub n_intervals: usize,
    pub gamma: f64,
    pub lyapunov_p: Vec<Vec<f64>>,
    /// Sublevel cutoff below which the decay constraint is not enforced.
    pub lyapunov_floor: f64,
    pub steady_state: Vec<f64>,
    pub chance_threshold: f64,
    pub chance_confidence: f64,
    pub input_lower: Vec<f64>,
    pub input_upper: Vec<f64>,
    pub reference_mean: f64,
    pub reference_variance: f64,
    pub eval_dt: f64,
    pub objective: ObjectiveConfig,
    pub penalty_initial: f64,
    pub penalty_factor: f64,
    pub penalty_rounds: usize,
    pub search_tol: f64,
    pub budget: usize,
    pub cold_step: f64,
    pub warm_step: f64,
    pub restart_step: f64,
}

impl Default for OcpConfig {
    fn default() -> Self {
        let solver = SolverSettings::default();
        OcpConfig {
            prediction_horizon: 30.0,
            control_horizon: 20.0,
            n_intervals: 5,
            gamma: 0.1,
            lyapunov_p: vec![vec![3.18, 0.93], vec![0.93, 0.58]],
            lyapunov_floor: 0.05,
            steady_state: vec![0.57, 317.0],
            chance_threshold: 0.53,
            chance_confidence: 0.95,
            input_lower: vec![0.0, -10.0],
            input_upper: vec![2.0, 10.0],
            reference_mean: 0.57,
            reference_variance: 4e-4,
            eval_dt: 1.0,
            objective: ObjectiveConfig::TemperatureTracking,
            penalty_initial: solver.penalty_initial,
            penalty_factor: solver.penalty_factor,
            penalty_rounds: solver.penalty_rounds,
            search_tol: solver.search_tol,
            budget: solver.budget,
            cold_step: solver.cold_step,
            warm_step: solver.warm_step,
            restart_step: solver.restart_step,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveConfig {
    /// Hellinger shaping plus `(E[T] - T_setpoint)^2` with the setpoint at
    /// the steady-state temperature.
    TemperatureTracking,
    /// Hellinger shaping plus `u' R u` (row-major weight matrix).
    InputWeighted { r: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoopConfig {
    pub sample_period: f64,
    pub run_time: f64,
    pub measurement_std: f64,
    pub plant_dt: f64,
    pub n_realizations: usize,
    pub seed: u64,
    /// Worker threads for Monte Carlo; defaults to the available
    /// parallelism.
    pub workers: Option<usize>,
    pub snapshot_times: Vec<f64>,
    /// Plant noise intensity; defaults to `sqrt(fp.diffusion_d)`.
    pub plant_sigma: Option<f64>,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            sample_period: 2.0,
            run_time: 30.0,
            measurement_std: 0.02,
            plant_dt: 0.01,
            n_realizations: 130,
            seed: 2026,
            workers: None,
            snapshot_times: vec![0.0, 6.0, 12.0, 18.0, 24.0, 30.0],
            plant_sigma: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FpRunConfig {
    pub system: FpSystem,
    pub t_end: f64,
    /// Piecewise-constant inputs (equal intervals over the control
    /// horizon); defaults to the steady inputs.
    pub policy: Option<Vec<Vec<f64>>>,
    pub snapshot_times: Vec<f64>,
}

impl Default for FpRunConfig {
    fn default() -> Self {
        FpRunConfig {
            system: FpSystem::Cstr,
            t_end: 30.0,
            policy: None,
            snapshot_times: vec![0.0, 6.0, 12.0, 18.0, 24.0, 30.0],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FpSystem {
    /// Reactor drift with the mean-field temperature closure.
    Cstr,
    /// Affine advection `a(x) = constant + slope * x` (zero drift,
    /// translation, and mean-reverting test profiles).
    Affine { constant: f64, slope: f64 },
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let config: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.fp.diffusion_d >= 0.0 && self.fp.diffusion_d.is_finite()) {
            return Err(Error::Config(format!(
                "fp.diffusion_d: must be finite and nonnegative, got {}",
                self.fp.diffusion_d
            )));
        }
        if !(self.fp.dt_max > 0.0) {
            return Err(Error::Config(format!(
                "fp.dt_max: must be positive, got {}",
                self.fp.dt_max
            )));
        }
        self.grid()?;
        if self.ocp.lyapunov_p.len() != 2 || self.ocp.lyapunov_p.iter().any(|r| r.len() != 2) {
            return Err(Error::Config("ocp.lyapunov_p: expected a 2x2 matrix".into()));
        }
        if self.ocp.steady_state.len() != 2 {
            return Err(Error::Config("ocp.steady_state: expected two coordinates".into()));
        }
        if !(self.ocp.chance_confidence > 0.0 && self.ocp.chance_confidence < 1.0) {
            return Err(Error::Config(format!(
                "ocp.chance_confidence: must lie in (0, 1), got {}",
                self.ocp.chance_confidence
            )));
        }
        if self.ocp.input_lower.len() != 2 || self.ocp.input_upper.len() != 2 {
            return Err(Error::Config("ocp.input_lower/input_upper: expected two inputs".into()));
        }
        if !(self.ocp.reference_variance > 0.0) {
            return Err(Error::Config(format!(
                "ocp.reference_variance: must be positive, got {}",
                self.ocp.reference_variance
            )));
        }
        if let Some(sigma) = self.closed_loop.plant_sigma {
            if !(sigma.is_finite() && sigma >= 0.0) {
                return Err(Error::Config(format!(
                    "closed_loop.plant_sigma: must be finite and nonnegative, got {sigma}"
                )));
            }
        }
        if let InitialDensity::Normal { variance, .. } = self.initial.concentration {
            if !(variance > 0.0) {
                return Err(Error::Config(format!(
                    "initial.concentration.normal.variance: must be positive, got {variance}"
                )));
            }
        }
        if !(self.fp_run.t_end >= 0.0) {
            return Err(Error::Config(format!(
                "fp_run.t_end: must be nonnegative, got {}",
                self.fp_run.t_end
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<Grid1D> {
        Grid1D::new(self.fp.grid_lower, self.fp.grid_upper, self.fp.grid_cells)
            .map_err(|e| Error::Config(format!("fp.grid: {e}")))
    }

    /// Plant noise intensity: explicit override or the density-consistent
    /// default `sqrt(D)`.
    pub fn effective_sigma(&self) -> f64 {
        self.closed_loop.plant_sigma.unwrap_or_else(|| self.fp.diffusion_d.sqrt())
    }

    /// Flux coefficient handed to the finite-volume solver (`D/2`).
    pub fn fp_flux_diffusion(&self) -> f64 {
        0.5 * self.fp.diffusion_d
    }

    /// Model parameters with the noise intensity the experiment actually
    /// uses.
    pub fn effective_params(&self) -> CstrParameters {
        let mut p = self.model.clone();
        p.sigma_ca = self.effective_sigma();
        p
    }

    pub fn build_plant(&self) -> Result<ControlAffineSde> {
        build_cstr(&self.effective_params())
    }

    pub fn initial_field(&self, grid: Grid1D) -> Result<DensityField> {
        match &self.initial.concentration {
            InitialDensity::Beta(b) => density_from_beta(b, grid),
            InitialDensity::Normal { mean, variance } => {
                Ok(density_from_normal(*mean, *variance, grid)?.field)
            }
        }
    }

    pub fn reference_field(&self, grid: Grid1D) -> Result<DensityField> {
        Ok(density_from_normal(self.ocp.reference_mean, self.ocp.reference_variance, grid)?.field)
    }

    pub fn build_ocp_spec(&self) -> Result<OcpSpec> {
        let grid = self.grid()?;
        let params = self.effective_params();
        let sys = build_cstr(&params)?;
        let p = DMatrix::from_fn(2, 2, |i, j| self.ocp.lyapunov_p[i][j]);
        let certificate = LyapunovCertificate::new(
            p,
            self.ocp.gamma,
            self.ocp.steady_state.clone(),
            self.ocp.lyapunov_floor,
        )?;
        let objective = match &self.ocp.objective {
            ObjectiveConfig::TemperatureTracking => {
                ObjectiveForm::TemperatureTracking { setpoint: self.ocp.steady_state[1] }
            }
            ObjectiveConfig::InputWeighted { r } => {
                let m = self.ocp.input_lower.len();
                if r.len() != m || r.iter().any(|row| row.len() != m) {
                    return Err(Error::Config(format!(
                        "ocp.objective.input_weighted.r: expected a {m}x{m} matrix"
                    )));
                }
                ObjectiveForm::InputWeighted { r: r.iter().flatten().copied().collect() }
            }
        };
        let spec = OcpSpec {
            params,
            sys,
            prediction_horizon: self.ocp.prediction_horizon,
            control_horizon: self.ocp.control_horizon,
            n_intervals: self.ocp.n_intervals,
            grid,
            fp_diffusion: self.fp_flux_diffusion(),
            dt_max: self.fp.dt_max,
            reference: self.reference_field(grid)?,
            objective,
            chance: StateConstraint::below_threshold(
                0,
                self.ocp.chance_threshold,
                self.ocp.chance_confidence,
            )?,
            certificate,
            bounds: InputBounds::new(self.ocp.input_lower.clone(), self.ocp.input_upper.clone())?,
            eval_dt: self.ocp.eval_dt,
            solver: SolverSettings {
                penalty_initial: self.ocp.penalty_initial,
                penalty_factor: self.ocp.penalty_factor,
                penalty_rounds: self.ocp.penalty_rounds,
                search_tol: self.ocp.search_tol,
                budget: self.ocp.budget,
                cold_step: self.ocp.cold_step,
                warm_step: self.ocp.warm_step,
                restart_step: self.ocp.restart_step,
            },
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn build_closed_loop(&self) -> Result<ClosedLoopConfig> {
        let initial = match &self.initial.concentration {
            InitialDensity::Beta(b) => *b,
            InitialDensity::Normal { .. } => {
                return Err(Error::Config(
                    "initial.concentration: closed-loop studies draw initial states from the beta form"
                        .into(),
                ))
            }
        };
        let config = ClosedLoopConfig {
            sample_period: self.closed_loop.sample_period,
            run_time: self.closed_loop.run_time,
            measurement_std: self.closed_loop.measurement_std,
            plant_dt: self.closed_loop.plant_dt,
            snapshot_times: self.closed_loop.snapshot_times.clone(),
            initial,
            initial_temperature: self.initial.temperature,
            ocp: self.build_ocp_spec()?,
        };
        config.validate()?;
        Ok(config)
    }

    /// Policy for the standalone density propagation: configured inputs or
    /// the steady policy.
    pub fn fp_run_policy(&self, spec: &OcpSpec) -> Result<ControlPolicy> {
        match &self.fp_run.policy {
            Some(inputs) => {
                if inputs.is_empty() {
                    return Err(Error::Config("fp_run.policy: empty input list".into()));
                }
                let duration = spec.control_horizon / inputs.len() as f64;
                ControlPolicy::new(inputs.iter().map(|u| (duration, u.clone())).collect())
            }
            None => spec.steady_policy(),
        }
    }

    /// Resolved-configuration manifest; reproduces the run together with
    /// the command line.
    pub fn manifest(&self, command: &str, seed: u64, workers: usize) -> Result<serde_json::Value> {
        let steady = match self.build_plant() {
            Ok(sys) => sys
                .steady_inputs(&self.ocp.steady_state, &[0.0, 0.0], 1e-9)
                .ok(),
            Err(_) => None,
        };
        Ok(serde_json::json!({
            "command": command,
            "code_version": env!("CARGO_PKG_VERSION"),
            "seed": seed,
            "workers": workers,
            "effective_sigma": self.effective_sigma(),
            "fp_flux_diffusion": self.fp_flux_diffusion(),
            "steady_inputs": steady,
            "config": serde_json::to_value(self).map_err(|e| Error::Config(e.to_string()))?,
        }))
    }
}
