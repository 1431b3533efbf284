//! Finite-horizon stochastic optimal control over a piecewise-constant
//! input parameterization.
//!
//! A candidate policy is scored by one rollout: the concentration density
//! is propagated through the finite-volume solver under the policy (with
//! the mean-field temperature closure), and at every sampling instant the
//! rollout records the Hellinger distance to the reference density, the
//! chance-constraint margin, and the Lyapunov decay residual along the
//! noise-free nominal trajectory started from the density mean. The
//! solver is an exterior quadratic penalty with escalating weights around
//! a derivative-free coordinate pattern search; input bounds are enforced
//! by projection, never by penalty.

use crate::error::{Error, Result};
use crate::fp::{propagate_segment, CstrMeanFieldDrift, DensityField, FpDiagnostics, Grid1D};
use crate::lyapunov::{lyapunov_value, stability_residual, LyapunovCertificate};
use crate::metrics::{hellinger, tail_probability, TailDirection};
use crate::model::{ControlAffineSde, CstrParameters, InputBounds, StateConstraint};
use std::collections::HashMap;

/// Constraint satisfaction tolerance: a solution is reported feasible only
/// if every chance margin is above `-FEASIBILITY_TOL` and every active
/// stability residual below `+FEASIBILITY_TOL`.
pub const FEASIBILITY_TOL: f64 = 1e-6;

/// Sufficient-decrease coefficient of the pattern search: a trial point is
/// accepted only if it improves the incumbent by at least `c * step^2`.
const FORCING_C: f64 = 0.1;

/// Piecewise-constant input trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlPolicy {
    /// `(duration, input)` pairs; durations are strictly positive.
    intervals: Vec<(f64, Vec<f64>)>,
}

impl ControlPolicy {
    pub fn new(intervals: Vec<(f64, Vec<f64>)>) -> Result<Self> {
        if intervals.is_empty() {
            return Err(Error::Config("policy: no intervals".into()));
        }
        let dim = intervals[0].1.len();
        if dim == 0 {
            return Err(Error::Config("policy: empty input vector".into()));
        }
        for (i, (d, u)) in intervals.iter().enumerate() {
            if !(d.is_finite() && *d > 0.0) {
                return Err(Error::Config(format!("policy: interval {i} has duration {d}")));
            }
            if u.len() != dim {
                return Err(Error::Config(format!(
                    "policy: interval {i} has input dimension {} (expected {dim})",
                    u.len()
                )));
            }
            if u.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("policy: interval {i} has non-finite input")));
            }
        }
        Ok(ControlPolicy { intervals })
    }

    /// `n` equal-length intervals all holding the same input.
    pub fn uniform(n: usize, interval_duration: f64, input: Vec<f64>) -> Result<Self> {
        Self::new((0..n.max(1)).map(|_| (interval_duration, input.clone())).collect())
    }

    pub fn intervals(&self) -> &[(f64, Vec<f64>)] {
        &self.intervals
    }

    pub fn input_dim(&self) -> usize {
        self.intervals[0].1.len()
    }

    /// Total covered duration (the control horizon).
    pub fn horizon(&self) -> f64 {
        self.intervals.iter().map(|(d, _)| d).sum()
    }

    /// Input active at time `t`; held at the last interval's value beyond
    /// the control horizon.
    pub fn input_at(&self, t: f64) -> &[f64] {
        let mut start = 0.0;
        for (d, u) in &self.intervals {
            if t < start + d {
                return u;
            }
            start += d;
        }
        &self.intervals[self.intervals.len() - 1].1
    }

    /// Policy advanced by `shift`: each interval takes the value the old
    /// policy held at the (shifted) interval start, with hold-last beyond
    /// the old horizon.
    pub fn advanced(&self, shift: f64) -> ControlPolicy {
        let mut start = 0.0;
        let intervals = self
            .intervals
            .iter()
            .map(|(d, _)| {
                let u = self.input_at(start + shift).to_vec();
                start += d;
                (*d, u)
            })
            .collect();
        ControlPolicy { intervals }
    }

    pub fn project(&mut self, bounds: &InputBounds) {
        for (_, u) in &mut self.intervals {
            bounds.project(u);
        }
    }

    fn flattened(&self) -> Vec<f64> {
        self.intervals.iter().flat_map(|(_, u)| u.iter().copied()).collect()
    }

    fn with_flat_inputs(&self, flat: &[f64]) -> ControlPolicy {
        let dim = self.input_dim();
        let intervals = self
            .intervals
            .iter()
            .enumerate()
            .map(|(i, (d, _))| (*d, flat[i * dim..(i + 1) * dim].to_vec()))
            .collect();
        ControlPolicy { intervals }
    }
}

/// Stage-cost form added to the Hellinger shaping term.
#[derive(Debug, Clone)]
pub enum ObjectiveForm {
    /// `(E[T] - setpoint)^2` with the closure temperature as `E[T]`.
    TemperatureTracking { setpoint: f64 },
    /// `u' R u` with a positive semidefinite weight (row-major).
    InputWeighted { r: Vec<f64> },
}

/// Solver schedule and tolerances.
#[derive(Debug, Clone)]
pub struct SolverSettings {
    pub penalty_initial: f64,
    pub penalty_factor: f64,
    pub penalty_rounds: usize,
    /// Pattern-search termination tolerance on the normalized step size.
    pub search_tol: f64,
    /// Rollout-evaluation budget per solve.
    pub budget: usize,
    /// Initial normalized step for a cold start.
    pub cold_step: f64,
    /// Initial normalized step when warm-started.
    pub warm_step: f64,
    /// Initial normalized step when a later penalty round restarts the
    /// search around the incumbent.
    pub restart_step: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            penalty_initial: 1e3,
            penalty_factor: 10.0,
            // escalation must continue until the boundary offset of the
            // penalized optimum falls inside the feasibility tolerance;
            // converged rounds exit early, so spare rounds are cheap
            penalty_rounds: 8,
            search_tol: 1e-4,
            budget: 20_000,
            cold_step: 0.25,
            warm_step: 0.01,
            restart_step: 2.5e-4,
        }
    }
}

/// Full problem description consumed by [`solve_ocp`].
pub struct OcpSpec {
    /// Controller model parameters (the noise intensity here is the one
    /// consistent with `fp_diffusion`).
    pub params: CstrParameters,
    /// Two-state model used for nominal trajectories and the Lyapunov
    /// generator.
    pub sys: ControlAffineSde,
    pub prediction_horizon: f64,
    pub control_horizon: f64,
    pub n_intervals: usize,
    pub grid: Grid1D,
    /// Diffusion coefficient of the density flux `a p - D dp/dx`.
    pub fp_diffusion: f64,
    pub dt_max: f64,
    pub reference: DensityField,
    pub objective: ObjectiveForm,
    pub chance: StateConstraint,
    pub certificate: LyapunovCertificate,
    pub bounds: InputBounds,
    /// Objective/constraint sampling interval over `[0, prediction_horizon]`.
    pub eval_dt: f64,
    pub solver: SolverSettings,
}

impl OcpSpec {
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.bounds.validate()?;
        if self.sys.state_dim != 2 || self.sys.input_dim != self.bounds.dim() {
            return Err(Error::Ocp(format!(
                "expected a 2-state model with {} inputs",
                self.bounds.dim()
            )));
        }
        if !(self.control_horizon > 0.0 && self.control_horizon <= self.prediction_horizon) {
            return Err(Error::Ocp(format!(
                "horizons must satisfy 0 < T_c <= T_p, got T_c = {}, T_p = {}",
                self.control_horizon, self.prediction_horizon
            )));
        }
        if self.n_intervals == 0 {
            return Err(Error::Ocp("need at least one control interval".into()));
        }
        if !(self.eval_dt > 0.0) {
            return Err(Error::Ocp(format!("eval_dt must be positive, got {}", self.eval_dt)));
        }
        let n_eval = self.prediction_horizon / self.eval_dt;
        if (n_eval - n_eval.round()).abs() > 1e-9 {
            return Err(Error::Ocp(format!(
                "eval_dt = {} does not divide the prediction horizon {}",
                self.eval_dt, self.prediction_horizon
            )));
        }
        if self.reference.grid() != &self.grid {
            return Err(Error::Ocp("reference density grid differs from the solver grid".into()));
        }
        match self.chance.as_scalar_below() {
            Some((0, threshold)) => {
                if !self.grid.contains(threshold) {
                    return Err(Error::Ocp(format!(
                        "chance threshold {threshold} lies outside the density grid"
                    )));
                }
            }
            Some((c, _)) => {
                return Err(Error::Ocp(format!(
                    "density-based chance evaluation needs the constraint on coordinate 0, got {c}"
                )));
            }
            None => {
                return Err(Error::Ocp(
                    "density-based chance evaluation needs a scalar threshold constraint".into(),
                ));
            }
        }
        if self.certificate.dim() != self.sys.state_dim {
            return Err(Error::Ocp("certificate dimension mismatch".into()));
        }
        if !(self.fp_diffusion >= 0.0 && self.fp_diffusion.is_finite()) {
            return Err(Error::Ocp(format!("invalid fp diffusion {}", self.fp_diffusion)));
        }
        if let ObjectiveForm::InputWeighted { r } = &self.objective {
            let m = self.bounds.dim();
            if r.len() != m * m {
                return Err(Error::Ocp(format!(
                    "input weight has {} entries, expected {}",
                    r.len(),
                    m * m
                )));
            }
        }
        Ok(())
    }

    /// Number of sampling instants, including both endpoints.
    fn n_instants(&self) -> usize {
        (self.prediction_horizon / self.eval_dt).round() as usize + 1
    }

    fn interval_duration(&self) -> f64 {
        self.control_horizon / self.n_intervals as f64
    }

    /// Policy holding the steady input of the certificate center state.
    pub fn steady_policy(&self) -> Result<ControlPolicy> {
        let guess = vec![0.0; self.bounds.dim()];
        let mut u = self.sys.steady_inputs(&self.certificate.x_ss, &guess, 1e-9)?;
        self.bounds.project(&mut u);
        ControlPolicy::uniform(self.n_intervals, self.interval_duration(), u)
    }
}

/// Per-instant constraint record.
#[derive(Debug, Clone)]
pub struct InstantReport {
    pub t: f64,
    /// `violation_cap - Pr{below threshold}`; satisfied when `>= 0`.
    pub chance_margin: f64,
    /// Lyapunov decay residual at the nominal state; satisfied when `<= 0`.
    pub stability_residual: f64,
    pub lyapunov_value: f64,
    /// Whether the residual counts toward feasibility (`V` above the
    /// certificate's level floor).
    pub stability_active: bool,
}

/// One rollout's scores.
#[derive(Debug, Clone)]
pub struct RolloutOutcome {
    pub objective: f64,
    pub reports: Vec<InstantReport>,
    pub fp_diagnostics: FpDiagnostics,
    /// Closure temperature at each sampling instant.
    pub temperatures: Vec<f64>,
}

impl RolloutOutcome {
    /// Squared-violation sum used by the exterior penalty.
    fn violation_sq(&self) -> f64 {
        self.reports
            .iter()
            .map(|r| {
                let chance = (-r.chance_margin).max(0.0);
                let stab = if r.stability_active { r.stability_residual.max(0.0) } else { 0.0 };
                chance * chance + stab * stab
            })
            .sum()
    }

    /// Largest constraint violation across instants.
    pub fn max_violation(&self) -> f64 {
        self.reports
            .iter()
            .map(|r| {
                let chance = (-r.chance_margin).max(0.0);
                let stab = if r.stability_active { r.stability_residual.max(0.0) } else { 0.0 };
                chance.max(stab)
            })
            .fold(0.0, f64::max)
    }

    pub fn feasible(&self) -> bool {
        self.max_violation() <= FEASIBILITY_TOL
    }
}

/// Resumable rollout state: density propagated to instant `instant` with
/// all earlier instants already scored into the running aggregates.
#[derive(Clone)]
struct SegState {
    instant: usize,
    field: DensityField,
    closure_temperature: f64,
    closure_prev_time: Option<f64>,
    closure_prev_mean: f64,
    x_nom: Vec<f64>,
    objective: f64,
    violation_sq: f64,
    max_violation: f64,
}

/// Scores of a completed walk.
struct WalkOutcome {
    objective: f64,
    violation_sq: f64,
    max_violation: f64,
}

/// Full per-instant records collected when a detailed rollout is wanted.
#[derive(Default)]
struct RolloutDetail {
    reports: Vec<InstantReport>,
    temperatures: Vec<f64>,
    diagnostics: FpDiagnostics,
}

fn initial_state(initial: &DensityField, initial_temperature: f64) -> SegState {
    SegState {
        instant: 0,
        field: initial.clone(),
        closure_temperature: initial_temperature,
        closure_prev_time: None,
        closure_prev_mean: 0.0,
        x_nom: vec![initial.mean(), initial_temperature],
        objective: 0.0,
        violation_sq: 0.0,
        max_violation: 0.0,
    }
}

/// Walks sampling instants `state.instant..n_instants`, accumulating the
/// objective and constraint scores. `capture` collects checkpoint states
/// at the listed instants (before they are observed) so later evaluations
/// can resume mid-horizon; the captured prefix is bit-identical to a full
/// walk because the arithmetic path is the same.
fn walk(
    spec: &OcpSpec,
    policy: &ControlPolicy,
    mut state: SegState,
    mut capture: Option<(&[usize], &mut Vec<std::rc::Rc<SegState>>)>,
    mut detail: Option<&mut RolloutDetail>,
) -> Result<WalkOutcome> {
    let (_, threshold) = spec
        .chance
        .as_scalar_below()
        .ok_or_else(|| Error::Ocp("chance constraint is not a scalar threshold".into()))?;
    let n_instants = spec.n_instants();
    let start = state.instant;
    let mut drift = CstrMeanFieldDrift::resume(
        spec.params.clone(),
        policy.clone(),
        state.closure_temperature,
        state.closure_prev_time,
        state.closure_prev_mean,
    );
    let mut nominal = NominalIntegrator::new(&spec.sys);
    let mut face_scratch = vec![0.0; spec.grid.n_cells + 1];
    let mut scratch_diag = FpDiagnostics::default();
    let mut t = start as f64 * spec.eval_dt;
    for j in start..n_instants {
        let target = j as f64 * spec.eval_dt;
        if j > start {
            let diag = match detail.as_deref_mut() {
                Some(d) => &mut d.diagnostics,
                None => &mut scratch_diag,
            };
            propagate_segment(
                &mut state.field,
                &mut |tt, f: &DensityField, mean: f64, out: &mut [f64]| {
                    drift.fill_with_mean(tt, mean, f.grid(), out)
                },
                spec.fp_diffusion,
                t,
                target,
                spec.dt_max,
                diag,
            )?;
            nominal.advance(&mut state.x_nom, policy, t, target)?;
            t = target;
        }
        if let Some((boundaries, out)) = capture.as_mut() {
            if j > start && boundaries.contains(&j) {
                let (temp, prev_time, prev_mean) = drift.state();
                out.push(std::rc::Rc::new(SegState {
                    instant: j,
                    field: state.field.clone(),
                    closure_temperature: temp,
                    closure_prev_time: prev_time,
                    closure_prev_mean: prev_mean,
                    x_nom: state.x_nom.clone(),
                    objective: state.objective,
                    violation_sq: state.violation_sq,
                    max_violation: state.max_violation,
                }));
            }
        }
        // settle the closure temperature exactly at the instant
        drift.fill(target, &state.field, &mut face_scratch);
        let temperature = drift.temperature();

        let u = policy.input_at(target);
        let h = hellinger(&state.field, &spec.reference)?;
        let stage = match &spec.objective {
            ObjectiveForm::TemperatureTracking { setpoint } => {
                let d = temperature - setpoint;
                h + d * d
            }
            ObjectiveForm::InputWeighted { r } => {
                let m = u.len();
                let mut quad = 0.0;
                for i in 0..m {
                    for l in 0..m {
                        quad += u[i] * r[i * m + l] * u[l];
                    }
                }
                h + quad
            }
        };
        // trapezoidal quadrature over the instant grid
        let weight = if n_instants == 1 {
            0.0
        } else if j == 0 || j + 1 == n_instants {
            0.5 * spec.eval_dt
        } else {
            spec.eval_dt
        };
        state.objective += weight * stage;

        let tail = tail_probability(&state.field, threshold, TailDirection::Below);
        let v = lyapunov_value(&spec.certificate, &state.x_nom);
        let resid = stability_residual(&spec.certificate, &spec.sys, &state.x_nom, u)?;
        let active = v > spec.certificate.level_floor;
        let chance_margin = spec.chance.violation_cap() - tail.probability;
        let chance_violation = (-chance_margin).max(0.0);
        let stability_violation = if active { resid.max(0.0) } else { 0.0 };
        state.violation_sq +=
            chance_violation * chance_violation + stability_violation * stability_violation;
        state.max_violation = state.max_violation.max(chance_violation).max(stability_violation);
        if let Some(d) = detail.as_deref_mut() {
            d.temperatures.push(temperature);
            d.reports.push(InstantReport {
                t: target,
                chance_margin,
                stability_residual: resid,
                lyapunov_value: v,
                stability_active: active,
            });
        }
        state.instant = j + 1;
    }
    if !state.objective.is_finite() {
        return Err(Error::Ocp(format!("non-finite objective {}", state.objective)));
    }
    Ok(WalkOutcome {
        objective: state.objective,
        violation_sq: state.violation_sq,
        max_violation: state.max_violation,
    })
}

/// Propagates the density under `policy` and scores objective and
/// constraints at every sampling instant.
pub fn rollout(
    spec: &OcpSpec,
    policy: &ControlPolicy,
    initial: &DensityField,
    initial_temperature: f64,
) -> Result<RolloutOutcome> {
    if initial.grid() != &spec.grid {
        return Err(Error::Ocp("initial density grid differs from the solver grid".into()));
    }
    let mut detail = RolloutDetail::default();
    let outcome = walk(
        spec,
        policy,
        initial_state(initial, initial_temperature),
        None,
        Some(&mut detail),
    )?;
    Ok(RolloutOutcome {
        objective: outcome.objective,
        reports: detail.reports,
        fp_diagnostics: detail.diagnostics,
        temperatures: detail.temperatures,
    })
}

/// RK4 integrator for the noise-free nominal dynamics.
struct NominalIntegrator<'a> {
    sys: &'a ControlAffineSde,
    g: Vec<f64>,
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
    dt: f64,
}

impl<'a> NominalIntegrator<'a> {
    fn new(sys: &'a ControlAffineSde) -> Self {
        let n = sys.state_dim;
        NominalIntegrator {
            sys,
            g: vec![0.0; n * sys.input_dim],
            k1: vec![0.0; n],
            k2: vec![0.0; n],
            k3: vec![0.0; n],
            k4: vec![0.0; n],
            tmp: vec![0.0; n],
            dt: 0.1,
        }
    }

    fn advance(&mut self, x: &mut [f64], policy: &ControlPolicy, t0: f64, t1: f64) -> Result<()> {
        let span = t1 - t0;
        if span <= 0.0 {
            return Ok(());
        }
        let n_steps = (span / self.dt).ceil().max(1.0) as usize;
        let dt = span / n_steps as f64;
        let n = self.sys.state_dim;
        for s in 0..n_steps {
            let t = t0 + s as f64 * dt;
            let u = policy.input_at(t);
            self.sys.full_drift_into(x, u, &mut self.g, &mut self.k1);
            for i in 0..n {
                self.tmp[i] = x[i] + 0.5 * dt * self.k1[i];
            }
            self.sys.full_drift_into(&self.tmp, u, &mut self.g, &mut self.k2);
            for i in 0..n {
                self.tmp[i] = x[i] + 0.5 * dt * self.k2[i];
            }
            self.sys.full_drift_into(&self.tmp, u, &mut self.g, &mut self.k3);
            for i in 0..n {
                self.tmp[i] = x[i] + dt * self.k3[i];
            }
            self.sys.full_drift_into(&self.tmp, u, &mut self.g, &mut self.k4);
            for i in 0..n {
                x[i] += dt / 6.0 * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
                if !x[i].is_finite() {
                    return Err(Error::Ocp(format!(
                        "nominal trajectory diverged at t = {t} in coordinate {i}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Density-shaping objective of a policy (constraints ignored).
pub fn evaluate_objective(
    spec: &OcpSpec,
    policy: &ControlPolicy,
    initial: &DensityField,
    initial_temperature: f64,
) -> Result<f64> {
    Ok(rollout(spec, policy, initial, initial_temperature)?.objective)
}

/// Per-instant constraint report of a policy.
pub fn evaluate_constraints(
    spec: &OcpSpec,
    policy: &ControlPolicy,
    initial: &DensityField,
    initial_temperature: f64,
) -> Result<Vec<InstantReport>> {
    Ok(rollout(spec, policy, initial, initial_temperature)?.reports)
}

/// Solution status.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum OcpStatus {
    Optimal,
    FeasibleSuboptimal,
    Infeasible,
}

/// Solver telemetry.
#[derive(Debug, Clone, Default)]
pub struct SolveDiagnostics {
    pub evaluations: usize,
    pub rounds_run: usize,
    /// Per penalty round: the incumbent penalized objective at the round
    /// start followed by the value after every accepted move
    /// (non-increasing within a round).
    pub incumbent_history: Vec<Vec<f64>>,
    /// First rollout failure message, if any candidate failed.
    pub first_failure: Option<String>,
}

#[derive(Debug, Clone)]
pub struct OcpSolution {
    pub policy: ControlPolicy,
    pub objective: f64,
    pub reports: Vec<InstantReport>,
    pub status: OcpStatus,
    pub diagnostics: SolveDiagnostics,
}

#[derive(Clone, Copy)]
struct CachedEval {
    objective: f64,
    violation_sq: f64,
    max_violation: f64,
}

/// Candidate scorer with memoization and prefix-checkpoint reuse.
struct Evaluator<'a> {
    spec: &'a OcpSpec,
    template: &'a ControlPolicy,
    initial: &'a DensityField,
    initial_temperature: f64,
    from_unit: &'a dyn Fn(&[f64]) -> Vec<f64>,
    input_dim: usize,
    cache: HashMap<Vec<u64>, CachedEval>,
    /// Sampling-instant index of each interval start, when aligned.
    boundary_instants: Option<Vec<usize>>,
    incumbent_z: Option<Vec<f64>>,
    /// Boundary states of the incumbent's rollout, one per interval.
    incumbent_ckpts: Vec<std::rc::Rc<SegState>>,
    /// Checkpoints of the most recent freshly walked candidate.
    last_fresh: Option<(Vec<f64>, Vec<std::rc::Rc<SegState>>)>,
    evaluations: usize,
    first_failure: Option<String>,
}

impl<'a> Evaluator<'a> {
    fn evaluate(&mut self, z: &[f64]) -> CachedEval {
        let key: Vec<u64> = z.iter().map(|v| v.to_bits()).collect();
        if let Some(hit) = self.cache.get(&key) {
            return *hit;
        }
        let entry = self.walk_candidate(z);
        self.cache.insert(key, entry);
        entry
    }

    /// Walks a candidate, resuming from the deepest shared-prefix
    /// checkpoint of the incumbent.
    fn walk_candidate(&mut self, z: &[f64]) -> CachedEval {
        let policy = self.template.with_flat_inputs(&(self.from_unit)(z));
        let (start, start_interval, prefix): (SegState, usize, Vec<std::rc::Rc<SegState>>) =
            match (&self.boundary_instants, &self.incumbent_z) {
                (Some(_), Some(inc)) if !self.incumbent_ckpts.is_empty() => {
                    let j = first_diff_interval(z, inc, self.input_dim)
                        .min(self.incumbent_ckpts.len() - 1);
                    (
                        (*self.incumbent_ckpts[j]).clone(),
                        j,
                        self.incumbent_ckpts[..=j].to_vec(),
                    )
                }
                (Some(_), _) => {
                    let root =
                        std::rc::Rc::new(initial_state(self.initial, self.initial_temperature));
                    ((*root).clone(), 0, vec![root])
                }
                _ => (initial_state(self.initial, self.initial_temperature), 0, Vec::new()),
            };
        self.evaluations += 1;
        let mut captured = Vec::new();
        let result = walk(
            self.spec,
            &policy,
            start,
            self.boundary_instants.as_ref().map(|b| (&b[..], &mut captured)),
            None,
        );
        match result {
            Ok(outcome) => {
                let _ = start_interval;
                if self.boundary_instants.is_some() {
                    let mut ckpts = prefix;
                    ckpts.extend(captured);
                    debug_assert_eq!(ckpts.len(), self.spec.n_intervals);
                    self.last_fresh = Some((z.to_vec(), ckpts));
                }
                CachedEval {
                    objective: outcome.objective,
                    violation_sq: outcome.violation_sq,
                    max_violation: outcome.max_violation,
                }
            }
            Err(e) => {
                if self.first_failure.is_none() {
                    self.first_failure = Some(e.to_string());
                }
                CachedEval {
                    objective: f64::INFINITY,
                    violation_sq: f64::INFINITY,
                    max_violation: f64::INFINITY,
                }
            }
        }
    }

    /// Declares `z` the incumbent, installing its checkpoints (re-walking
    /// once if the accepted value came from the memo table).
    fn promote(&mut self, z: &[f64]) {
        if self.boundary_instants.is_some() {
            let fresh = match self.last_fresh.take() {
                Some((fz, ckpts)) if fz == z => Some(ckpts),
                other => {
                    self.last_fresh = other;
                    None
                }
            };
            match fresh {
                Some(ckpts) => self.incumbent_ckpts = ckpts,
                None => {
                    self.walk_candidate(z);
                    if let Some((fz, ckpts)) = self.last_fresh.take() {
                        debug_assert_eq!(fz, z);
                        self.incumbent_ckpts = ckpts;
                    }
                }
            }
        }
        self.incumbent_z = Some(z.to_vec());
    }
}

/// First control interval whose inputs differ between two flattened
/// candidates.
fn first_diff_interval(a: &[f64], b: &[f64], input_dim: usize) -> usize {
    let n = a.len() / input_dim;
    for k in 0..n {
        let range = k * input_dim..(k + 1) * input_dim;
        if a[range.clone()] != b[range] {
            return k;
        }
    }
    n.saturating_sub(1)
}

/// Solves the finite-horizon problem by exterior quadratic penalty with
/// escalating weights around a projected coordinate pattern search.
/// Deterministic given identical inputs and budget.
pub fn solve_ocp(
    spec: &OcpSpec,
    initial: &DensityField,
    initial_temperature: f64,
    warm_start: Option<&ControlPolicy>,
    budget_override: Option<usize>,
) -> Result<OcpSolution> {
    spec.validate()?;
    let budget = budget_override.unwrap_or(spec.solver.budget);
    let m = spec.bounds.dim();
    let dims = spec.n_intervals * m;

    let template = match warm_start {
        Some(p) => {
            if p.intervals().len() != spec.n_intervals || p.input_dim() != m {
                return Err(Error::Ocp(format!(
                    "warm start has {} intervals of dimension {}, expected {} of {}",
                    p.intervals().len(),
                    p.input_dim(),
                    spec.n_intervals,
                    m
                )));
            }
            let mut p = p.clone();
            p.project(&spec.bounds);
            p
        }
        None => spec.steady_policy()?,
    };

    // decision variables normalized to [0, 1] by the input box
    let ranges: Vec<f64> = (0..dims)
        .map(|i| (spec.bounds.upper[i % m] - spec.bounds.lower[i % m]).max(1e-12))
        .collect();
    let to_unit = |flat: &[f64]| -> Vec<f64> {
        flat.iter()
            .enumerate()
            .map(|(i, v)| ((v - spec.bounds.lower[i % m]) / ranges[i]).clamp(0.0, 1.0))
            .collect()
    };
    let from_unit = |z: &[f64]| -> Vec<f64> {
        z.iter()
            .enumerate()
            .map(|(i, v)| spec.bounds.lower[i % m] + v * ranges[i])
            .collect()
    };

    // Checkpoint reuse: candidates that differ from the incumbent only in
    // later intervals resume from the stored boundary state of the shared
    // prefix, which is bit-identical to walking from scratch. Only usable
    // when interval boundaries land on sampling instants.
    let boundary_instants: Option<Vec<usize>> = {
        let per = spec.interval_duration() / spec.eval_dt;
        let n_instants = spec.n_instants();
        if (per - per.round()).abs() < 1e-9 && per.round() >= 1.0 {
            let idx: Vec<usize> =
                (0..spec.n_intervals).map(|k| (k as f64 * per).round() as usize).collect();
            if idx.iter().all(|&b| b < n_instants) {
                Some(idx)
            } else {
                None
            }
        } else {
            None
        }
    };

    let mut evaluator = Evaluator {
        spec,
        template: &template,
        initial,
        initial_temperature,
        from_unit: &from_unit,
        input_dim: m,
        cache: HashMap::new(),
        boundary_instants,
        incumbent_z: None,
        incumbent_ckpts: Vec::new(),
        last_fresh: None,
        evaluations: 0,
        first_failure: None,
    };

    let mut z = to_unit(&template.flattened());
    let start_eval = evaluator.evaluate(&z);
    if !start_eval.objective.is_finite() {
        return Err(Error::Ocp(format!(
            "initial candidate rollout failed: {}",
            evaluator.first_failure.unwrap_or_default()
        )));
    }
    evaluator.promote(&z);

    let mut incumbent = start_eval;
    let mut history: Vec<Vec<f64>> = Vec::new();
    let mut best_feasible: Option<(Vec<f64>, CachedEval)> = if incumbent.max_violation
        <= FEASIBILITY_TOL
    {
        Some((z.clone(), incumbent))
    } else {
        None
    };

    // success-promoted polling order: recently winning coordinates move to
    // the front with their winning direction tried first
    let mut order: Vec<(usize, f64)> = (0..dims).map(|i| (i, 1.0)).collect();

    let mut rounds_run = 0;
    let mut converged_last = false;
    let mut stagnant_rounds = 0usize;
    // a feasible warm start needs no gentle phase-in: the low-weight
    // rounds would first trade feasibility for objective and the
    // escalation would claw it back, so enter at the final weight
    let start_round = if warm_start.is_some() && incumbent.max_violation <= FEASIBILITY_TOL {
        spec.solver.penalty_rounds - 1
    } else {
        0
    };
    for round in start_round..spec.solver.penalty_rounds {
        if evaluator.evaluations >= budget {
            break;
        }
        let weight = spec.solver.penalty_initial * spec.solver.penalty_factor.powi(round as i32);
        let step0 = if round == start_round {
            if warm_start.is_none() { spec.solver.cold_step } else { spec.solver.warm_step }
        } else {
            spec.solver.restart_step.max(spec.solver.search_tol)
        };
        let step0 = if round == start_round { step0 } else { step0.min(spec.solver.restart_step.max(spec.solver.search_tol)) };
        let before = penalized(&incumbent, weight);
        let mut round_history = vec![before];
        let mut step = step0;
        let mut best = before;
        let mut converged = false;
        while evaluator.evaluations < budget {
            // one opportunistic sweep over the polling order
            let mut improved = false;
            let mut promote: Option<usize> = None;
            'coords: for slot in 0..order.len() {
                let (i, preferred) = order[slot];
                for dir in [preferred, -preferred] {
                    let mut trial = z.clone();
                    trial[i] = (trial[i] + dir * step).clamp(0.0, 1.0);
                    if trial[i] == z[i] {
                        continue;
                    }
                    if evaluator.evaluations >= budget {
                        break 'coords;
                    }
                    let eval = evaluator.evaluate(&trial);
                    let value = penalized(&eval, weight);
                    // sufficient decrease: micro-improvements below the
                    // forcing threshold do not count, so the step shrinks
                    // instead of crawling
                    if value < best - FORCING_C * step * step {
                        z = trial;
                        evaluator.promote(&z);
                        incumbent = eval;
                        best = value;
                        round_history.push(best);
                        improved = true;
                        order[slot].1 = dir;
                        promote = Some(slot);
                        if eval.max_violation <= FEASIBILITY_TOL {
                            let better = best_feasible
                                .as_ref()
                                .map(|(_, b)| eval.objective < b.objective)
                                .unwrap_or(true);
                            if better {
                                best_feasible = Some((z.clone(), eval));
                            }
                        }
                        break; // next coordinate
                    }
                }
            }
            if let Some(slot) = promote {
                let entry = order.remove(slot);
                order.insert(0, entry);
            }
            if !improved {
                step *= 0.5;
                if step < spec.solver.search_tol {
                    converged = true;
                    break;
                }
            }
        }
        rounds_run += 1;
        converged_last = converged;
        let accepted_any = round_history.len() > 1;
        history.push(round_history);
        // nothing to escalate once feasible and converged
        if converged
            && incumbent.max_violation <= FEASIBILITY_TOL
            && (before - penalized(&incumbent, weight)).abs() <= 1e-9 * (1.0 + before.abs())
        {
            break;
        }
        // two fully stagnant rounds in a row: the remaining violation is
        // not locally reducible, escalation cannot change the incumbent
        if converged && !accepted_any {
            stagnant_rounds += 1;
            if stagnant_rounds >= 2 {
                break;
            }
        } else {
            stagnant_rounds = 0;
        }
    }
    let evaluations = evaluator.evaluations;
    let first_failure = evaluator.first_failure.take();

    // prefer the best feasible candidate seen over an infeasible incumbent
    let mut swapped_to_feasible = false;
    if incumbent.max_violation > FEASIBILITY_TOL {
        if let Some((zf, ef)) = &best_feasible {
            z = zf.clone();
            incumbent = *ef;
            swapped_to_feasible = true;
        }
    }

    let policy = template.with_flat_inputs(&from_unit(&z));
    let outcome = rollout(spec, &policy, initial, initial_temperature)?;
    let status = if incumbent.max_violation <= FEASIBILITY_TOL {
        if converged_last && evaluations < budget && !swapped_to_feasible {
            OcpStatus::Optimal
        } else {
            OcpStatus::FeasibleSuboptimal
        }
    } else {
        OcpStatus::Infeasible
    };
    Ok(OcpSolution {
        policy,
        objective: outcome.objective,
        reports: outcome.reports,
        status,
        diagnostics: SolveDiagnostics {
            evaluations,
            rounds_run,
            incumbent_history: history,
            first_failure,
        },
    })
}

fn penalized(eval: &CachedEval, weight: f64) -> f64 {
    if eval.objective.is_finite() {
        eval.objective + weight * eval.violation_sq
    } else {
        f64::INFINITY
    }
}

/// Projected coordinate pattern search on a box (used standalone in tests;
/// [`solve_ocp`] embeds the same sweep with caching and penalty rounds).
pub struct SearchOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub evaluations: usize,
    pub converged: bool,
    /// Incumbent value after every accepted move (non-increasing).
    pub history: Vec<f64>,
}

pub fn pattern_search<F>(
    mut f: F,
    x0: &[f64],
    lower: &[f64],
    upper: &[f64],
    initial_step: f64,
    tol: f64,
    max_evals: usize,
) -> SearchOutcome
where
    F: FnMut(&[f64]) -> f64,
{
    let mut x: Vec<f64> = x0
        .iter()
        .zip(lower.iter().zip(upper))
        .map(|(v, (l, u))| v.clamp(*l, *u))
        .collect();
    let mut value = f(&x);
    let mut evaluations = 1;
    let mut history = vec![value];
    let mut step = initial_step;
    let mut converged = false;
    while evaluations < max_evals {
        let mut improved = false;
        'coords: for i in 0..x.len() {
            for dir in [1.0, -1.0] {
                let mut trial = x.clone();
                trial[i] = (trial[i] + dir * step).clamp(lower[i], upper[i]);
                if trial[i] == x[i] {
                    continue;
                }
                if evaluations >= max_evals {
                    break 'coords;
                }
                let v = f(&trial);
                evaluations += 1;
                if v < value - FORCING_C * step * step {
                    x = trial;
                    value = v;
                    history.push(value);
                    improved = true;
                    break;
                }
            }
        }
        if !improved {
            step *= 0.5;
            if step < tol {
                converged = true;
                break;
            }
        }
    }
    SearchOutcome { x, value, evaluations, converged, history }
}
