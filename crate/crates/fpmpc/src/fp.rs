//! Finite-volume propagation of a univariate probability density.
//!
//! The density is stored as per-cell probability masses on a uniform grid.
//! One step applies a conservative flux update: first-order upwind
//! interpolation for the advective face flux and a central difference for
//! the diffusive face flux, with zero total flux through both boundary
//! faces so probability cannot leave the grid. Time integration is
//! explicit forward Euler with the step size bounded by the combined
//! positivity condition `dt <= 0.9 / (max|a|/dx + 2 D / dx^2)`.
//!
//! The advection profile is supplied per step by a caller closure, which
//! may keep internal state. [`CstrMeanFieldDrift`] is the built-in profile
//! for the reactor benchmark: the concentration drift is evaluated with
//! the reactor temperature advanced as a deterministic side ODE driven by
//! the instantaneous mean of the concentration density.

use crate::error::{Error, Result};
use crate::model::{Beta4Distribution, CstrParameters};
use crate::ocp::ControlPolicy;
use statrs::distribution::{Beta, ContinuousCDF, Normal};

/// Safety factor applied to the explicit stability bound.
const STABILITY_SAFETY: f64 = 0.9;

/// Uniform cell-centered grid on `[lower, upper]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid1D {
    pub lower: f64,
    pub upper: f64,
    pub n_cells: usize,
    dx: f64,
}

impl Grid1D {
    pub fn new(lower: f64, upper: f64, n_cells: usize) -> Result<Self> {
        if !(lower.is_finite() && upper.is_finite()) || upper <= lower {
            return Err(Error::Config(format!(
                "grid: bounds must be finite with upper > lower, got [{lower}, {upper}]"
            )));
        }
        if n_cells < 2 {
            return Err(Error::Config(format!(
                "grid: n_cells must be at least 2, got {n_cells}"
            )));
        }
        let dx = (upper - lower) / n_cells as f64;
        Ok(Grid1D { lower, upper, n_cells, dx })
    }

    #[inline]
    pub fn dx(&self) -> f64 {
        self.dx
    }

    /// Center of cell `i`.
    #[inline]
    pub fn center(&self, i: usize) -> f64 {
        self.lower + (i as f64 + 0.5) * self.dx
    }

    /// Location of face `i` (face 0 is the lower boundary, face `n_cells`
    /// the upper one).
    #[inline]
    pub fn face(&self, i: usize) -> f64 {
        self.lower + i as f64 * self.dx
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.n_cells).map(|i| self.center(i)).collect()
    }

    pub fn faces(&self) -> Vec<f64> {
        (0..=self.n_cells).map(|i| self.face(i)).collect()
    }

    /// Index of the cell containing `x`, clamped to the grid.
    pub fn cell_containing(&self, x: f64) -> usize {
        if x <= self.lower {
            return 0;
        }
        let i = ((x - self.lower) / self.dx) as usize;
        i.min(self.n_cells - 1)
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lower && x <= self.upper
    }
}

/// Discretized probability density: per-cell masses summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityField {
    grid: Grid1D,
    masses: Vec<f64>,
}

impl DensityField {
    /// Builds a field from raw nonnegative masses and normalizes them.
    pub fn from_masses(grid: Grid1D, masses: Vec<f64>) -> Result<Self> {
        if masses.len() != grid.n_cells {
            return Err(Error::Config(format!(
                "density: {} masses for {} cells",
                masses.len(),
                grid.n_cells
            )));
        }
        let mut masses = masses;
        let mut total = 0.0;
        for (i, m) in masses.iter_mut().enumerate() {
            if !m.is_finite() || *m < -1e-12 {
                return Err(Error::Config(format!(
                    "density: invalid mass {m} in cell {i}"
                )));
            }
            if *m < 0.0 {
                *m = 0.0;
            }
            total += *m;
        }
        if total <= 0.0 {
            return Err(Error::Config("density: total mass is zero".into()));
        }
        for m in &mut masses {
            *m /= total;
        }
        Ok(DensityField { grid, masses })
    }

    #[inline]
    pub fn grid(&self) -> &Grid1D {
        &self.grid
    }

    #[inline]
    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    /// Cell-averaged density values (mass / dx).
    pub fn densities(&self) -> Vec<f64> {
        self.masses.iter().map(|m| m / self.grid.dx).collect()
    }

    pub fn total_mass(&self) -> f64 {
        self.masses.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.masses
            .iter()
            .enumerate()
            .map(|(i, m)| self.grid.center(i) * m)
            .sum()
    }

    pub fn variance(&self) -> f64 {
        let mean = self.mean();
        self.masses
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let d = self.grid.center(i) - mean;
                d * d * m
            })
            .sum()
    }
}

/// Discretizes a four-parameter beta distribution by exact CDF differences.
pub fn density_from_beta(dist: &Beta4Distribution, grid: Grid1D) -> Result<DensityField> {
    dist.validate()?;
    if dist.lower < grid.lower - 1e-12 || dist.upper > grid.upper + 1e-12 {
        return Err(Error::Config(format!(
            "initial density support [{}, {}] exceeds grid [{}, {}]",
            dist.lower, dist.upper, grid.lower, grid.upper
        )));
    }
    let beta = Beta::new(dist.alpha, dist.beta)
        .map_err(|e| Error::Config(format!("beta distribution: {e}")))?;
    let width = dist.upper - dist.lower;
    let to_unit = |x: f64| ((x - dist.lower) / width).clamp(0.0, 1.0);
    let mut masses = Vec::with_capacity(grid.n_cells);
    let mut prev = beta.cdf(to_unit(grid.face(0)));
    for i in 1..=grid.n_cells {
        let next = beta.cdf(to_unit(grid.face(i)));
        masses.push((next - prev).max(0.0));
        prev = next;
    }
    DensityField::from_masses(grid, masses)
}

/// Result of discretizing a normal density on a bounded grid.
#[derive(Debug, Clone)]
pub struct NormalDiscretization {
    pub field: DensityField,
    /// Probability mass that fell outside the grid and was folded back in
    /// by renormalization.
    pub truncated_mass: f64,
}

impl NormalDiscretization {
    /// More than 1% of the mass was truncated.
    pub fn truncation_warning(&self) -> bool {
        self.truncated_mass > 0.01
    }
}

/// Discretizes `N(mean, variance)` by CDF differences; mass outside the
/// grid is reported and folded back by renormalization.
pub fn density_from_normal(mean: f64, variance: f64, grid: Grid1D) -> Result<NormalDiscretization> {
    if !(variance.is_finite() && variance > 0.0) || !mean.is_finite() {
        return Err(Error::Config(format!(
            "normal density: need finite mean and variance > 0, got N({mean}, {variance})"
        )));
    }
    let normal = Normal::new(mean, variance.sqrt())
        .map_err(|e| Error::Config(format!("normal distribution: {e}")))?;
    let mut masses = Vec::with_capacity(grid.n_cells);
    let mut prev = normal.cdf(grid.face(0));
    let inside = normal.cdf(grid.face(grid.n_cells)) - prev;
    for i in 1..=grid.n_cells {
        let next = normal.cdf(grid.face(i));
        masses.push((next - prev).max(0.0));
        prev = next;
    }
    let field = DensityField::from_masses(grid, masses)?;
    Ok(NormalDiscretization { field, truncated_mass: (1.0 - inside).max(0.0) })
}

/// Frozen per-step coefficients: face-centered advection values and a
/// constant diffusion coefficient (the flux is `a p - D dp/dx`).
#[derive(Debug, Clone)]
pub struct FpCoefficients {
    /// Advection value at each of the `n_cells + 1` faces.
    pub face_velocity: Vec<f64>,
    /// Diffusion coefficient, `>= 0`.
    pub diffusion: f64,
}

impl FpCoefficients {
    pub fn validate(&self, grid: &Grid1D) -> Result<()> {
        if self.face_velocity.len() != grid.n_cells + 1 {
            return Err(Error::Config(format!(
                "fp coefficients: {} face velocities for {} faces",
                self.face_velocity.len(),
                grid.n_cells + 1
            )));
        }
        if self.face_velocity.iter().any(|a| !a.is_finite()) {
            return Err(Error::Config("fp coefficients: non-finite advection".into()));
        }
        if !self.diffusion.is_finite() || self.diffusion < 0.0 {
            return Err(Error::Config(format!(
                "fp coefficients: diffusion must be finite and >= 0, got {}",
                self.diffusion
            )));
        }
        Ok(())
    }

    /// Largest stable explicit time step for these coefficients.
    ///
    /// Combined advection-diffusion positivity condition
    /// `dt (max|a|/dx + 2 D/dx^2) <= 1`, scaled by a 0.9 safety factor.
    /// (Taking the plain minimum of the separate advective and diffusive
    /// bounds is not sufficient when both terms are active.)
    pub fn stability_bound(&self, grid: &Grid1D) -> f64 {
        let amax = self.face_velocity.iter().fold(0.0f64, |acc, a| acc.max(a.abs()));
        let denom = amax / grid.dx + 2.0 * self.diffusion / (grid.dx * grid.dx);
        if denom > 0.0 {
            STABILITY_SAFETY / denom
        } else {
            f64::INFINITY
        }
    }
}

/// Outcome of a single explicit step.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub field: DensityField,
    /// Negative mass removed by clipping (renormalized afterwards).
    pub clipped_mass: f64,
}

/// One conservative finite-volume step.
///
/// Errors if `dt` exceeds the stability bound; never sub-steps silently.
pub fn fp_step(field: &DensityField, coeffs: &FpCoefficients, dt: f64) -> Result<StepResult> {
    coeffs.validate(&field.grid)?;
    let bound = coeffs.stability_bound(&field.grid);
    if !(dt > 0.0) || dt > bound * (1.0 + 1e-9) {
        return Err(Error::StepSize { dt, bound });
    }
    let mut out = field.masses.clone();
    let mut flux = vec![0.0; field.grid.n_cells + 1];
    let stats = step_in_place(
        &field.masses,
        &mut out,
        &mut flux,
        &coeffs.face_velocity,
        coeffs.diffusion,
        &field.grid,
        dt,
    );
    Ok(StepResult { field: DensityField { grid: field.grid, masses: out }, clipped_mass: stats.clipped })
}

/// Per-step statistics collected while the update is written.
struct StepStats {
    clipped: f64,
    /// Field mass after the step (and after any clip repair).
    total_mass: f64,
    mean: f64,
}

/// Flux-form update `out = m + dt * div(flux)`.
/// Caller guarantees `dt` respects the stability bound; `flux` is a
/// scratch buffer of `n_cells + 1` entries with zero boundary sentinels.
fn step_in_place(
    masses: &[f64],
    out: &mut [f64],
    flux: &mut [f64],
    face_velocity: &[f64],
    diffusion: f64,
    grid: &Grid1D,
    dt: f64,
) -> StepStats {
    let n = grid.n_cells;
    let dx = grid.dx;
    let d_over_dx2 = diffusion / (dx * dx);
    let inv_dx = 1.0 / dx;
    // probability flux through each interior face; the boundary faces
    // carry zero total flux
    flux[0] = 0.0;
    flux[n] = 0.0;
    for i in 0..n - 1 {
        let a = face_velocity[i + 1];
        // branchless upwind: positive speed takes the left cell
        let advective = a.max(0.0) * masses[i] + a.min(0.0) * masses[i + 1];
        flux[i + 1] = advective * inv_dx - d_over_dx2 * (masses[i + 1] - masses[i]);
    }
    // divergence update with clipping folded in; upwinding preserves
    // positivity under the CFL bound, clipping guards the diffusion
    // stencil at steep gradients. Four accumulator lanes keep the
    // reductions off the critical path.
    let mut clipped = [0.0f64; 4];
    let mut total = [0.0f64; 4];
    let mut mean_acc = [0.0f64; 4];
    for i in 0..n {
        let raw = masses[i] + dt * (flux[i] - flux[i + 1]);
        let m = raw.max(0.0);
        let lane = i & 3;
        clipped[lane] += m - raw;
        out[i] = m;
        total[lane] += m;
        mean_acc[lane] += m * (i as f64 + 0.5);
    }
    let clipped = (clipped[0] + clipped[1]) + (clipped[2] + clipped[3]);
    let mut total = (total[0] + total[1]) + (total[2] + total[3]);
    let mean_acc = (mean_acc[0] + mean_acc[1]) + (mean_acc[2] + mean_acc[3]);
    let mean = grid.lower + dx * mean_acc / total.max(1e-300);
    if clipped > 0.0 && total > 0.0 {
        let inv = 1.0 / total;
        let mut renormed = 0.0;
        for m in out.iter_mut() {
            *m *= inv;
            renormed += *m;
        }
        total = renormed;
    }
    StepStats { clipped, total_mass: total, mean }
}

/// Diagnostics accumulated over a propagation run.
#[derive(Debug, Clone, Default)]
pub struct FpDiagnostics {
    pub steps: u64,
    /// Total negative mass removed by clipping.
    pub clipped_mass: f64,
    /// Largest `|sum(masses) - 1|` observed after any step.
    pub max_mass_error: f64,
    pub min_dt: f64,
}

impl FpDiagnostics {
    fn new() -> Self {
        FpDiagnostics { min_dt: f64::INFINITY, ..Self::default() }
    }

    pub fn merge(&mut self, other: &FpDiagnostics) {
        self.steps += other.steps;
        self.clipped_mass += other.clipped_mass;
        self.max_mass_error = self.max_mass_error.max(other.max_mass_error);
        self.min_dt = self.min_dt.min(other.min_dt);
    }
}

/// Density snapshots at requested instants plus run diagnostics.
#[derive(Debug, Clone)]
pub struct FpTrajectory {
    pub snapshots: Vec<(f64, DensityField)>,
    pub diagnostics: FpDiagnostics,
}

/// Propagates `field` over `[0, t_span]`, sampling snapshots at the
/// requested instants.
///
/// `drift` is called once per step at the step start time with the current
/// field and must fill one advection value per face; it may carry state
/// (see [`CstrMeanFieldDrift`]). The step size is
/// `min(dt_max, stability bound, time to next snapshot)`.
pub fn fp_propagate<F>(
    field: &DensityField,
    mut drift: F,
    diffusion: f64,
    t_span: f64,
    dt_max: f64,
    snapshot_times: &[f64],
) -> Result<FpTrajectory>
where
    F: FnMut(f64, &DensityField, &mut [f64]),
{
    if t_span < 0.0 || !t_span.is_finite() {
        return Err(Error::Config(format!("fp: invalid t_span {t_span}")));
    }
    for &s in snapshot_times {
        if !(0.0..=t_span + 1e-9).contains(&s) {
            return Err(Error::Config(format!(
                "fp: snapshot instant {s} outside [0, {t_span}]"
            )));
        }
    }
    let mut targets: Vec<f64> = snapshot_times.to_vec();
    targets.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let mut current = field.clone();
    let mut diagnostics = FpDiagnostics::new();
    let mut snapshots = Vec::with_capacity(targets.len());
    let mut adapted = |t: f64, f: &DensityField, _mean: f64, out: &mut [f64]| drift(t, f, out);
    let mut t = 0.0;
    for target in targets {
        propagate_segment(&mut current, &mut adapted, diffusion, t, target, dt_max, &mut diagnostics)?;
        t = target;
        snapshots.push((t, current.clone()));
    }
    propagate_segment(&mut current, &mut adapted, diffusion, t, t_span, dt_max, &mut diagnostics)?;
    if diagnostics.min_dt == f64::INFINITY {
        diagnostics.min_dt = 0.0;
    }
    Ok(FpTrajectory { snapshots, diagnostics })
}

/// Advances `field` in place from `t0` to `t1`. Shared by [`fp_propagate`]
/// and the optimizer rollouts, which interleave observations between
/// segments. The drift closure receives the current field together with
/// its mean, which the stepper tracks for free.
pub(crate) fn propagate_segment<F>(
    field: &mut DensityField,
    drift: &mut F,
    diffusion: f64,
    t0: f64,
    t1: f64,
    dt_max: f64,
    diagnostics: &mut FpDiagnostics,
) -> Result<()>
where
    F: FnMut(f64, &DensityField, f64, &mut [f64]),
{
    if !(diffusion.is_finite() && diffusion >= 0.0) {
        return Err(Error::Config(format!("fp: invalid diffusion {diffusion}")));
    }
    if !(dt_max > 0.0) {
        return Err(Error::Config(format!("fp: dt_max must be positive, got {dt_max}")));
    }
    let n = field.grid.n_cells;
    let dx = field.grid.dx;
    let mut velocities = vec![0.0; n + 1];
    let mut scratch = vec![0.0; n];
    let mut flux = vec![0.0; n + 1];
    let mut mean = field.mean();
    let mut t = t0;
    while t < t1 - 1e-12 {
        drift(t, field, mean, &mut velocities);
        let amax = velocities.iter().fold(0.0f64, |acc, a| acc.max(a.abs()));
        let denom = amax / dx + 2.0 * diffusion / (dx * dx);
        let bound = if denom > 0.0 { STABILITY_SAFETY / denom } else { f64::INFINITY };
        let dt = dt_max.min(bound).min(t1 - t);
        let stats =
            step_in_place(&field.masses, &mut scratch, &mut flux, &velocities, diffusion, &field.grid, dt);
        std::mem::swap(&mut field.masses, &mut scratch);
        mean = stats.mean;
        // non-finite advection or masses surface here: NaN poisons the sum
        if !stats.total_mass.is_finite() {
            return Err(Error::ModelDomain(format!("fp: non-finite density update at t = {t}")));
        }
        diagnostics.steps += 1;
        diagnostics.clipped_mass += stats.clipped;
        diagnostics.min_dt = diagnostics.min_dt.min(dt);
        diagnostics.max_mass_error = diagnostics.max_mass_error.max((stats.total_mass - 1.0).abs());
        t += dt;
    }
    Ok(())
}

/// Advection profile for the reactor benchmark concentration density.
///
/// The concentration drift `F/V (C_A0 - x) - k(T) x` needs the reactor
/// temperature, which is not part of the propagated density. It is closed
/// by advancing `T` with the deterministic temperature ODE driven by the
/// instantaneous mean of the concentration density, and freezing the
/// resulting `k(T)` into the per-step coefficients.
pub struct CstrMeanFieldDrift {
    params: CstrParameters,
    policy: ControlPolicy,
    temperature: f64,
    prev_time: Option<f64>,
    prev_mean: f64,
}

impl CstrMeanFieldDrift {
    pub fn new(params: CstrParameters, policy: ControlPolicy, initial_temperature: f64) -> Self {
        CstrMeanFieldDrift {
            params,
            policy,
            temperature: initial_temperature,
            prev_time: None,
            prev_mean: 0.0,
        }
    }

    /// Rebuilds the profile mid-trajectory from a captured state (used by
    /// rollout resumption; the captured state must come from a prefix with
    /// identical inputs).
    pub(crate) fn resume(
        params: CstrParameters,
        policy: ControlPolicy,
        temperature: f64,
        prev_time: Option<f64>,
        prev_mean: f64,
    ) -> Self {
        CstrMeanFieldDrift { params, policy, temperature, prev_time, prev_mean }
    }

    pub(crate) fn state(&self) -> (f64, Option<f64>, f64) {
        (self.temperature, self.prev_time, self.prev_mean)
    }

    /// Temperature of the deterministic side ODE at the last step time.
    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    /// Fills face velocities for time `t`; advances the temperature ODE
    /// from the previous call time using the previously observed mean.
    pub fn fill(&mut self, t: f64, field: &DensityField, out: &mut [f64]) {
        self.fill_with_mean(t, field.mean(), field.grid(), out);
    }

    /// Like [`Self::fill`] with the density mean supplied by the caller
    /// (the stepper tracks it without an extra pass).
    pub(crate) fn fill_with_mean(&mut self, t: f64, mean: f64, grid: &Grid1D, out: &mut [f64]) {
        if let Some(prev) = self.prev_time {
            if t > prev {
                let dt = t - prev;
                let p = &self.params;
                let u = self.policy.input_at(prev);
                let k = p.arrhenius(self.temperature);
                let dtemp = p.flow_per_volume() * (p.inlet_temperature - self.temperature)
                    + p.heat_rise() * k * self.prev_mean
                    + p.heat_input_gain() * u[1];
                self.temperature += dt * dtemp;
            }
        }
        self.prev_time = Some(t);
        self.prev_mean = mean;

        let u = self.policy.input_at(t);
        let p = &self.params;
        let theta = p.flow_per_volume() + p.arrhenius(self.temperature);
        let c0 = p.flow_per_volume() * u[0];
        let dx = grid.dx;
        let lower = grid.lower;
        for (i, a) in out.iter_mut().enumerate() {
            *a = c0 - theta * (lower + i as f64 * dx);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::hellinger;

    fn grid200() -> Grid1D {
        Grid1D::new(0.0, 2.0, 200).unwrap()
    }

    #[test]
    fn grid_geometry() {
        let g = Grid1D::new(0.0, 2.0, 200).unwrap();
        assert!((g.dx() - 0.01).abs() < 1e-15);
        assert!((g.center(0) - 0.005).abs() < 1e-15);
        assert!((g.face(200) - 2.0).abs() < 1e-12);
        assert_eq!(g.cell_containing(0.5349), 53);
        assert_eq!(g.cell_containing(-1.0), 0);
        assert_eq!(g.cell_containing(5.0), 199);
        assert!(Grid1D::new(0.0, 2.0, 1).is_err());
        assert!(Grid1D::new(1.0, 1.0, 10).is_err());
    }

    #[test]
    fn uniform_beta_gives_equal_masses() {
        let dist = Beta4Distribution::new(0.0, 2.0, 1.0, 1.0).unwrap();
        let field = density_from_beta(&dist, grid200()).unwrap();
        for &m in field.masses() {
            assert!((m - 1.0 / 200.0).abs() < 1e-12);
        }
        assert!((field.total_mass() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn paper_beta_mode_and_variance() {
        let dist = Beta4Distribution::new(0.0, 2.0, 320.0, 320.0).unwrap();
        let field = density_from_beta(&dist, grid200()).unwrap();
        let mode = field
            .masses()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        // mode cell at x ~ 1.0
        assert!((field.grid().center(mode) - 1.0).abs() < 0.011);
        // analytic four-parameter beta variance: (u-l)^2 ab / ((a+b)^2 (a+b+1))
        let analytic = 4.0 * 320.0 * 320.0 / (640.0_f64.powi(2) * 641.0);
        assert!((field.variance() - analytic).abs() < 1e-5);
        assert!((field.mean() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn beta_support_must_fit_grid() {
        let dist = Beta4Distribution::new(-0.5, 2.0, 2.0, 2.0).unwrap();
        assert!(density_from_beta(&dist, grid200()).is_err());
    }

    #[test]
    fn normal_discretization_peaks_at_mean() {
        let d = density_from_normal(0.57, 4e-4, grid200()).unwrap();
        assert!(!d.truncation_warning());
        let peak = d
            .field
            .masses()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(peak, d.field.grid().cell_containing(0.57));
        // determinism
        let d2 = density_from_normal(0.57, 4e-4, grid200()).unwrap();
        assert_eq!(d.field.masses(), d2.field.masses());
    }

    #[test]
    fn normal_mean_outside_grid_warns() {
        let d = density_from_normal(3.0, 1e-2, grid200()).unwrap();
        assert!(d.truncation_warning());
        assert!(d.truncated_mass > 0.5);
    }

    #[test]
    fn zero_coefficients_step_is_identity() {
        let field = density_from_normal(1.0, 0.01, grid200()).unwrap().field;
        let coeffs = FpCoefficients { face_velocity: vec![0.0; 201], diffusion: 0.0 };
        let out = fp_step(&field, &coeffs, 0.5).unwrap();
        assert_eq!(out.field.masses(), field.masses());
        assert_eq!(out.clipped_mass, 0.0);
    }

    #[test]
    fn step_size_above_bound_is_refused() {
        let field = density_from_normal(1.0, 0.01, grid200()).unwrap().field;
        let coeffs = FpCoefficients { face_velocity: vec![1.0; 201], diffusion: 0.0 };
        let bound = coeffs.stability_bound(field.grid());
        assert!((bound - 0.9 * 0.01).abs() < 1e-12);
        match fp_step(&field, &coeffs, bound * 1.5) {
            Err(Error::StepSize { .. }) => {}
            other => panic!("expected step-size error, got {other:?}"),
        }
    }

    #[test]
    fn diffusion_grows_variance_at_heat_rate() {
        // d(var)/dt = 2 D for the interior heat stencil
        let field = density_from_normal(1.0, 4e-4, grid200()).unwrap().field;
        let d = 0.002;
        let coeffs = FpCoefficients { face_velocity: vec![0.0; 201], diffusion: d };
        let dt = coeffs.stability_bound(field.grid());
        let mut f = field.clone();
        let mut elapsed = 0.0;
        for _ in 0..50 {
            f = fp_step(&f, &coeffs, dt).unwrap().field;
            elapsed += dt;
        }
        let growth = f.variance() - field.variance();
        assert!(
            (growth - 2.0 * d * elapsed).abs() < 0.05 * 2.0 * d * elapsed,
            "variance growth {growth} vs 2 D t = {}",
            2.0 * d * elapsed
        );
    }

    #[test]
    fn constant_advection_moves_mean_exactly() {
        let field = density_from_normal(0.8, 1e-3, grid200()).unwrap().field;
        let a = 0.5;
        let coeffs = FpCoefficients { face_velocity: vec![a; 201], diffusion: 0.0 };
        let dt = coeffs.stability_bound(field.grid());
        let stepped = fp_step(&field, &coeffs, dt).unwrap();
        let shift = stepped.field.mean() - field.mean();
        // the mean update telescopes exactly while mass stays interior
        assert!((shift - a * dt).abs() < 1e-12, "shift {shift} vs {}", a * dt);
        // first-order smearing: variance may only grow
        assert!(stepped.field.variance() >= field.variance());
    }

    #[test]
    fn propagate_zero_span_is_identity() {
        let field = density_from_normal(1.0, 0.01, grid200()).unwrap().field;
        let traj =
            fp_propagate(&field, |_, _, out| out.fill(0.0), 0.0, 0.0, 0.1, &[0.0]).unwrap();
        assert_eq!(traj.snapshots.len(), 1);
        assert_eq!(traj.snapshots[0].1.masses(), field.masses());
        assert_eq!(traj.diagnostics.steps, 0);
    }

    #[test]
    fn ou_stationary_density_is_preserved() {
        // dx = -(x - 1) dt + sqrt(2 D) dw has stationary N(1, D)
        let d = 0.01;
        let field = density_from_normal(1.0, d, grid200()).unwrap().field;
        let traj = fp_propagate(
            &field,
            |_, f, out| {
                let g = *f.grid();
                for (i, a) in out.iter_mut().enumerate() {
                    *a = 1.0 - g.face(i);
                }
            },
            d,
            5.0,
            f64::INFINITY,
            &[5.0],
        )
        .unwrap();
        let h = hellinger(&traj.snapshots[0].1, &field).unwrap();
        assert!(h <= 0.02, "stationary Hellinger drift {h}");
        assert!(traj.diagnostics.max_mass_error <= 1e-12);
    }

    #[test]
    fn conservation_under_random_coefficients() {
        let field = density_from_beta(
            &Beta4Distribution::new(0.0, 2.0, 320.0, 320.0).unwrap(),
            grid200(),
        )
        .unwrap();
        // deterministic pseudo-random velocities
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut vel = vec![0.0; 201];
        for v in vel.iter_mut() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            *v = ((state >> 11) as f64 / (1u64 << 53) as f64) * 4.0 - 2.0;
        }
        let coeffs = FpCoefficients { face_velocity: vel, diffusion: 5e-4 };
        let dt = coeffs.stability_bound(field.grid());
        let mut f = field;
        for _ in 0..200 {
            f = fp_step(&f, &coeffs, dt).unwrap().field;
        }
        assert!((f.total_mass() - 1.0).abs() < 1e-9);
        assert!(f.masses().iter().all(|&m| m >= 0.0));
    }
}
