//! Control-affine stochastic system class and the reactor benchmark.
//!
//! Systems are `dx = (f(x) + g(x) u) dt + h(x) dw` with `f`, `g`, `h`
//! supplied as slice-based callbacks so hot loops can evaluate them
//! without allocating. The built-in benchmark is a two-state exothermic
//! CSTR (concentration `C_A`, temperature `T`) with inputs
//! (inlet concentration `C_A0`, heat duty `Q`) and a Wiener disturbance
//! on the concentration equation.

use crate::error::{Error, Result};
use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ContinuousCDF};

type FieldFn = Box<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// Axis-aligned box the model is declared valid on.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl DomainBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(Error::Config("domain box: dimension mismatch".into()));
        }
        for (i, (l, u)) in lower.iter().zip(&upper).enumerate() {
            if !(l.is_finite() && u.is_finite() && l < u) {
                return Err(Error::Config(format!(
                    "domain box: coordinate {i} has invalid range [{l}, {u}]"
                )));
            }
        }
        Ok(DomainBox { lower, upper })
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(v, (l, u))| v >= l && v <= u)
    }

    /// Clamps `x` into the box; returns true if anything moved.
    pub fn clamp(&self, x: &mut [f64]) -> bool {
        let mut clipped = false;
        for (v, (l, u)) in x.iter_mut().zip(self.lower.iter().zip(&self.upper)) {
            let c = v.clamp(*l, *u);
            if c != *v {
                *v = c;
                clipped = true;
            }
        }
        clipped
    }
}

/// Control-affine Ito diffusion `dx = (f(x) + g(x) u) dt + h(x) dw`.
pub struct ControlAffineSde {
    pub state_dim: usize,
    pub input_dim: usize,
    pub noise_dim: usize,
    drift: FieldFn,
    /// Row-major `state_dim x input_dim`.
    input_map: FieldFn,
    /// Row-major `state_dim x noise_dim`.
    diffusion: FieldFn,
    pub domain: DomainBox,
}

impl ControlAffineSde {
    pub fn new(
        state_dim: usize,
        input_dim: usize,
        noise_dim: usize,
        drift: FieldFn,
        input_map: FieldFn,
        diffusion: FieldFn,
        domain: DomainBox,
    ) -> Result<Self> {
        if domain.lower.len() != state_dim {
            return Err(Error::Config(format!(
                "domain box dimension {} does not match state dimension {state_dim}",
                domain.lower.len()
            )));
        }
        Ok(ControlAffineSde { state_dim, input_dim, noise_dim, drift, input_map, diffusion, domain })
    }

    /// Unforced drift `f(x)`, written into `out` (no checks).
    #[inline]
    pub fn drift_into(&self, x: &[f64], out: &mut [f64]) {
        (self.drift)(x, out);
    }

    /// Input map `g(x)`, row-major, written into `out` (no checks).
    #[inline]
    pub fn input_map_into(&self, x: &[f64], out: &mut [f64]) {
        (self.input_map)(x, out);
    }

    /// Diffusion `h(x)`, row-major, written into `out` (no checks).
    #[inline]
    pub fn diffusion_into(&self, x: &[f64], out: &mut [f64]) {
        (self.diffusion)(x, out);
    }

    /// Full drift `f(x) + g(x) u` without allocation; `g_scratch` must hold
    /// `state_dim * input_dim` values.
    #[inline]
    pub fn full_drift_into(&self, x: &[f64], u: &[f64], g_scratch: &mut [f64], out: &mut [f64]) {
        (self.drift)(x, out);
        (self.input_map)(x, g_scratch);
        for i in 0..self.state_dim {
            let row = &g_scratch[i * self.input_dim..(i + 1) * self.input_dim];
            let mut acc = 0.0;
            for (gij, uj) in row.iter().zip(u) {
                acc += gij * uj;
            }
            out[i] += acc;
        }
    }

    /// Drift `f(x) + g(x) u` with dimension and finiteness checks.
    pub fn eval_drift(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        self.check_dims(x, Some(u))?;
        let mut g = vec![0.0; self.state_dim * self.input_dim];
        let mut out = vec![0.0; self.state_dim];
        self.full_drift_into(x, u, &mut g, &mut out);
        for (i, v) in out.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::ModelDomain(format!(
                    "drift is {v} in coordinate {i} at x = {x:?}"
                )));
            }
        }
        Ok(out)
    }

    /// Diffusion matrix `h(x)`, row-major, with finiteness checks.
    pub fn eval_diffusion(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dims(x, None)?;
        let mut out = vec![0.0; self.state_dim * self.noise_dim];
        (self.diffusion)(x, &mut out);
        for (idx, v) in out.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::ModelDomain(format!(
                    "diffusion entry ({}, {}) is {v} at x = {x:?}",
                    idx / self.noise_dim,
                    idx % self.noise_dim
                )));
            }
        }
        Ok(out)
    }

    /// Central finite-difference Jacobians of the full drift at
    /// `(x_ss, u_ss)`: `A` in the state and `B` in the input.
    pub fn linearize(
        &self,
        x_ss: &[f64],
        u_ss: &[f64],
        step: f64,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        self.check_dims(x_ss, Some(u_ss))?;
        if !(step > 0.0 && step.is_finite()) {
            return Err(Error::Linearization(format!("step must be positive, got {step}")));
        }
        let n = self.state_dim;
        let m = self.input_dim;
        let mut a = DMatrix::zeros(n, n);
        let mut b = DMatrix::zeros(n, m);
        let mut xp = x_ss.to_vec();
        let mut xm = x_ss.to_vec();
        for j in 0..n {
            let h = step * (1.0 + x_ss[j].abs());
            if h == 0.0 || x_ss[j] + h == x_ss[j] {
                return Err(Error::Linearization(format!("step underflow in state coordinate {j}")));
            }
            xp[j] = x_ss[j] + h;
            xm[j] = x_ss[j] - h;
            let fp = self.eval_drift(&xp, u_ss)?;
            let fm = self.eval_drift(&xm, u_ss)?;
            for i in 0..n {
                let d = (fp[i] - fm[i]) / (2.0 * h);
                if !d.is_finite() {
                    return Err(Error::Linearization(format!(
                        "non-finite difference in A[{i}, {j}]"
                    )));
                }
                a[(i, j)] = d;
            }
            xp[j] = x_ss[j];
            xm[j] = x_ss[j];
        }
        let mut up = u_ss.to_vec();
        let mut um = u_ss.to_vec();
        for j in 0..m {
            let h = step * (1.0 + u_ss[j].abs());
            if h == 0.0 || u_ss[j] + h == u_ss[j] {
                return Err(Error::Linearization(format!("step underflow in input coordinate {j}")));
            }
            up[j] = u_ss[j] + h;
            um[j] = u_ss[j] - h;
            let fp = self.eval_drift(x_ss, &up)?;
            let fm = self.eval_drift(x_ss, &um)?;
            for i in 0..n {
                let d = (fp[i] - fm[i]) / (2.0 * h);
                if !d.is_finite() {
                    return Err(Error::Linearization(format!(
                        "non-finite difference in B[{i}, {j}]"
                    )));
                }
                b[(i, j)] = d;
            }
            up[j] = u_ss[j];
            um[j] = u_ss[j];
        }
        Ok((a, b))
    }

    /// Solves `f(x_ss) + g(x_ss) u = 0` for the steady input by damped
    /// Newton iteration (exact in one step for control-affine dynamics).
    /// Requires as many inputs as states.
    pub fn steady_inputs(&self, x_ss: &[f64], u_guess: &[f64], tol: f64) -> Result<Vec<f64>> {
        self.check_dims(x_ss, Some(u_guess))?;
        if self.input_dim != self.state_dim {
            return Err(Error::ModelDomain(format!(
                "steady-input solve needs a square input map, got {}x{}",
                self.state_dim, self.input_dim
            )));
        }
        let n = self.state_dim;
        let mut u = u_guess.to_vec();
        let mut residual = self.eval_drift(x_ss, &u)?;
        let mut norm = norm2(&residual);
        for _ in 0..50 {
            if norm <= tol {
                return Ok(u);
            }
            let mut g = vec![0.0; n * n];
            self.input_map_into(x_ss, &mut g);
            let jac = DMatrix::from_row_slice(n, n, &g);
            let rhs = nalgebra::DVector::from_column_slice(&residual);
            let delta = jac
                .lu()
                .solve(&rhs)
                .ok_or_else(|| Error::ModelDomain("singular input map in steady-input solve".into()))?;
            // damped update: halve until the residual shrinks
            let mut lambda = 1.0;
            loop {
                let trial: Vec<f64> = u.iter().zip(delta.iter()).map(|(ui, d)| ui - lambda * d).collect();
                let r = self.eval_drift(x_ss, &trial)?;
                let rn = norm2(&r);
                if rn < norm || lambda < 1e-8 {
                    u = trial;
                    residual = r;
                    norm = rn;
                    break;
                }
                lambda *= 0.5;
            }
        }
        if norm <= tol {
            Ok(u)
        } else {
            Err(Error::ModelDomain(format!(
                "steady-input Newton stalled with residual {norm}"
            )))
        }
    }

    fn check_dims(&self, x: &[f64], u: Option<&[f64]>) -> Result<()> {
        if x.len() != self.state_dim {
            return Err(Error::ModelDomain(format!(
                "state dimension {} does not match model dimension {}",
                x.len(),
                self.state_dim
            )));
        }
        if let Some(u) = u {
            if u.len() != self.input_dim {
                return Err(Error::ModelDomain(format!(
                    "input dimension {} does not match model dimension {}",
                    u.len(),
                    self.input_dim
                )));
            }
        }
        Ok(())
    }
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Componentwise input box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputBounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl InputBounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let b = InputBounds { lower, upper };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lower.len() != self.upper.len() || self.lower.is_empty() {
            return Err(Error::Config("input bounds: dimension mismatch".into()));
        }
        for (i, (l, u)) in self.lower.iter().zip(&self.upper).enumerate() {
            if !(l.is_finite() && u.is_finite() && l <= u) {
                return Err(Error::Config(format!(
                    "input bounds: component {i} has empty range [{l}, {u}]"
                )));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn project(&self, u: &mut [f64]) {
        for (v, (l, up)) in u.iter_mut().zip(self.lower.iter().zip(&self.upper)) {
            *v = v.clamp(*l, *up);
        }
    }

    pub fn contains(&self, u: &[f64], tol: f64) -> bool {
        u.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(v, (l, up))| *v >= l - tol && *v <= up + tol)
    }
}

/// State constraint `k(x) <= 0` required with probability at least
/// `confidence`.
pub struct StateConstraint {
    confidence: f64,
    kind: ConstraintKind,
}

enum ConstraintKind {
    /// `k(x) = threshold - x[coordinate]`: satisfied when the coordinate
    /// stays at or above the threshold.
    BelowThreshold { coordinate: usize, threshold: f64 },
    General { residuals: FieldFn, dim: usize },
}

impl StateConstraint {
    /// `Pr{x[coordinate] <= threshold} <= 1 - confidence`.
    pub fn below_threshold(coordinate: usize, threshold: f64, confidence: f64) -> Result<Self> {
        Self::check_confidence(confidence)?;
        Ok(StateConstraint {
            confidence,
            kind: ConstraintKind::BelowThreshold { coordinate, threshold },
        })
    }

    pub fn general(residuals: FieldFn, dim: usize, confidence: f64) -> Result<Self> {
        Self::check_confidence(confidence)?;
        Ok(StateConstraint { confidence, kind: ConstraintKind::General { residuals, dim } })
    }

    fn check_confidence(confidence: f64) -> Result<()> {
        if !(confidence > 0.0 && confidence < 1.0) {
            return Err(Error::Config(format!(
                "state constraint: confidence must lie in (0, 1), got {confidence}"
            )));
        }
        Ok(())
    }

    pub fn confidence(&self) -> f64 {
        self.confidence
    }

    /// Largest admissible violation probability, `1 - confidence`.
    pub fn violation_cap(&self) -> f64 {
        1.0 - self.confidence
    }

    /// Constraint residuals `k(x)`; satisfied where every entry is `<= 0`.
    pub fn residuals(&self, x: &[f64]) -> Vec<f64> {
        match &self.kind {
            ConstraintKind::BelowThreshold { coordinate, threshold } => {
                vec![threshold - x[*coordinate]]
            }
            ConstraintKind::General { residuals, dim } => {
                let mut out = vec![0.0; *dim];
                residuals(x, &mut out);
                out
            }
        }
    }

    /// The `(coordinate, threshold)` pair when the constraint is a scalar
    /// lower-threshold constraint (the form the density-based chance
    /// evaluation supports).
    pub fn as_scalar_below(&self) -> Option<(usize, f64)> {
        match &self.kind {
            ConstraintKind::BelowThreshold { coordinate, threshold } => {
                Some((*coordinate, *threshold))
            }
            ConstraintKind::General { .. } => None,
        }
    }
}

/// Reactor model parameters (volumes in m^3, temperatures in K, energies
/// in kJ, times in minutes).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CstrParameters {
    /// Reactor volume V.
    pub volume: f64,
    /// Inlet flow rate F.
    pub flow_rate: f64,
    /// Inlet temperature T0.
    pub inlet_temperature: f64,
    /// Activation energy E.
    pub activation_energy: f64,
    /// Gas constant R.
    pub gas_constant: f64,
    /// Reaction heat per kmol.
    pub reaction_heat: f64,
    /// Pre-exponential rate factor k0.
    pub preexponential_factor: f64,
    /// Heat capacity c_p.
    pub heat_capacity: f64,
    /// Fluid density rho.
    pub fluid_density: f64,
    /// Wiener intensity on the concentration equation.
    pub sigma_ca: f64,
}

impl Default for CstrParameters {
    fn default() -> Self {
        CstrParameters {
            volume: 0.1,
            flow_rate: 100e-3,
            inlet_temperature: 315.0,
            activation_energy: 8.314e4,
            gas_constant: 8.314,
            reaction_heat: 4.78e5,
            preexponential_factor: 72e9,
            heat_capacity: 0.239,
            fluid_density: 1000.0,
            sigma_ca: 0.32,
        }
    }
}

impl CstrParameters {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("volume", self.volume),
            ("flow_rate", self.flow_rate),
            ("inlet_temperature", self.inlet_temperature),
            ("activation_energy", self.activation_energy),
            ("gas_constant", self.gas_constant),
            ("reaction_heat", self.reaction_heat),
            ("preexponential_factor", self.preexponential_factor),
            ("heat_capacity", self.heat_capacity),
            ("fluid_density", self.fluid_density),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!(
                    "model.{name}: must be strictly positive, got {v}"
                )));
            }
        }
        // zero is allowed so the noise-free plant can be simulated
        if !(self.sigma_ca.is_finite() && self.sigma_ca >= 0.0) {
            return Err(Error::Config(format!(
                "model.sigma_ca: must be finite and nonnegative, got {}",
                self.sigma_ca
            )));
        }
        Ok(())
    }

    /// Reaction rate `k0 exp(-E / (R T))`.
    #[inline]
    pub fn arrhenius(&self, temperature: f64) -> f64 {
        self.preexponential_factor
            * (-self.activation_energy / (self.gas_constant * temperature)).exp()
    }

    /// Residence rate F/V.
    #[inline]
    pub fn flow_per_volume(&self) -> f64 {
        self.flow_rate / self.volume
    }

    /// Adiabatic temperature-rise coefficient `dH / (rho c_p)`.
    #[inline]
    pub fn heat_rise(&self) -> f64 {
        self.reaction_heat / (self.fluid_density * self.heat_capacity)
    }

    /// Heat-input gain `1 / (rho c_p V)`.
    #[inline]
    pub fn heat_input_gain(&self) -> f64 {
        1.0 / (self.fluid_density * self.heat_capacity * self.volume)
    }
}

/// Builds the two-state reactor SDE with states `(C_A, T)` and inputs
/// `(C_A0, Q)`; the Wiener disturbance acts on the concentration only.
pub fn build_cstr(params: &CstrParameters) -> Result<ControlAffineSde> {
    params.validate()?;
    let p = params.clone();
    let drift = {
        let p = p.clone();
        Box::new(move |x: &[f64], out: &mut [f64]| {
            let k = p.arrhenius(x[1]);
            out[0] = -p.flow_per_volume() * x[0] - k * x[0];
            out[1] = p.flow_per_volume() * (p.inlet_temperature - x[1]) + p.heat_rise() * k * x[0];
        }) as FieldFn
    };
    let input_map = {
        let p = p.clone();
        Box::new(move |_x: &[f64], out: &mut [f64]| {
            out[0] = p.flow_per_volume();
            out[1] = 0.0;
            out[2] = 0.0;
            out[3] = p.heat_input_gain();
        }) as FieldFn
    };
    let diffusion = {
        let sigma = p.sigma_ca;
        Box::new(move |_x: &[f64], out: &mut [f64]| {
            out[0] = sigma;
            out[1] = 0.0;
        }) as FieldFn
    };
    ControlAffineSde::new(
        2,
        2,
        1,
        drift,
        input_map,
        diffusion,
        DomainBox::new(vec![0.0, 250.0], vec![2.0, 400.0])?,
    )
}

/// Beta distribution with explicit support `[lower, upper]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Beta4Distribution {
    pub lower: f64,
    pub upper: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Beta4Distribution {
    pub fn new(lower: f64, upper: f64, alpha: f64, beta: f64) -> Result<Self> {
        let d = Beta4Distribution { lower, upper, alpha, beta };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lower.is_finite() && self.upper.is_finite() && self.lower < self.upper) {
            return Err(Error::Config(format!(
                "beta distribution: support [{}, {}] is empty",
                self.lower, self.upper
            )));
        }
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return Err(Error::Config(format!(
                "beta distribution: shapes must be positive, got ({}, {})",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        self.lower + (self.upper - self.lower) * self.alpha / (self.alpha + self.beta)
    }

    pub fn variance(&self) -> f64 {
        let s = self.alpha + self.beta;
        (self.upper - self.lower).powi(2) * self.alpha * self.beta / (s * s * (s + 1.0))
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let unit = ((x - self.lower) / (self.upper - self.lower)).clamp(0.0, 1.0);
        Beta::new(self.alpha, self.beta)
            .expect("shapes validated")
            .cdf(unit)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let unit: f64 = rand_distr::Distribution::sample(
            &rand_distr::Beta::new(self.alpha, self.beta).expect("shapes validated"),
            rng,
        );
        self.lower + (self.upper - self.lower) * unit
    }
}
