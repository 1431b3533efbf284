//! Euler-Maruyama path simulation for ground-truth plant behavior and
//! Monte Carlo validation of the density propagation.
//!
//! Randomness comes from counter-based ChaCha streams: `(seed, stream_id)`
//! fully determines a path's Wiener increments, so ensembles are
//! reproducible bit-for-bit regardless of thread schedule.

use crate::error::{Error, Result};
use crate::fp::Grid1D;
use crate::model::ControlAffineSde;
use crate::ocp::ControlPolicy;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

/// Identifies one reproducible Wiener increment stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WienerStream {
    pub seed: u64,
    pub stream_id: u64,
    /// Step size of the generated increments, minutes.
    pub dt: f64,
}

impl WienerStream {
    pub fn new(seed: u64, stream_id: u64, dt: f64) -> Self {
        WienerStream { seed, stream_id, dt }
    }

    /// The generator positioned at the start of this stream.
    pub fn rng(&self) -> ChaCha12Rng {
        let mut rng = ChaCha12Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }
}

/// Sampled trajectory: states at `times`, inputs applied on each
/// inter-sample interval.
#[derive(Debug, Clone, PartialEq)]
pub struct PathRecord {
    pub state_dim: usize,
    pub input_dim: usize,
    times: Vec<f64>,
    states: Vec<f64>,
    inputs: Vec<f64>,
    /// Number of integration steps where the state was clamped to the
    /// domain box.
    pub clip_events: u64,
}

impl PathRecord {
    pub(crate) fn from_parts(
        state_dim: usize,
        input_dim: usize,
        times: Vec<f64>,
        states: Vec<f64>,
        inputs: Vec<f64>,
        clip_events: u64,
    ) -> Self {
        debug_assert_eq!(states.len(), times.len() * state_dim);
        debug_assert_eq!(inputs.len(), (times.len() - 1) * input_dim);
        PathRecord { state_dim, input_dim, times, states, inputs, clip_events }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.state_dim..(i + 1) * self.state_dim]
    }

    /// Input applied over `[times[i], times[i+1])`.
    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn last_state(&self) -> &[f64] {
        self.state(self.len() - 1)
    }

    /// Index of the sample at time `t`, if `t` lies on the record grid.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let i = self
            .times
            .binary_search_by(|v| v.partial_cmp(&t).unwrap())
            .unwrap_or_else(|e| e.min(self.times.len().saturating_sub(1)));
        for j in [i.saturating_sub(1), i, (i + 1).min(self.times.len() - 1)] {
            if (self.times[j] - t).abs() <= 1e-9 * t.abs().max(1.0) {
                return Some(j);
            }
        }
        None
    }
}

/// Raw Euler-Maruyama integration state, shared by the one-shot path
/// simulator and the closed-loop driver which stitches segments together.
pub(crate) struct EmIntegrator<'a> {
    sys: &'a ControlAffineSde,
    g_scratch: Vec<f64>,
    h_scratch: Vec<f64>,
    drift: Vec<f64>,
    pub clip_events: u64,
}

impl<'a> EmIntegrator<'a> {
    pub fn new(sys: &'a ControlAffineSde) -> Self {
        EmIntegrator {
            sys,
            g_scratch: vec![0.0; sys.state_dim * sys.input_dim],
            h_scratch: vec![0.0; sys.state_dim * sys.noise_dim],
            drift: vec![0.0; sys.state_dim],
            clip_events: 0,
        }
    }

    /// One step `x += (f + g u) dt + h dW`; clamps to the domain box.
    pub fn step(&mut self, x: &mut [f64], u: &[f64], dt: f64, t: f64, rng: &mut ChaCha12Rng) -> Result<()> {
        self.sys.full_drift_into(x, u, &mut self.g_scratch, &mut self.drift);
        self.sys.diffusion_into(x, &mut self.h_scratch);
        let sqrt_dt = dt.sqrt();
        let q = self.sys.noise_dim;
        // one increment per noise channel, shared across state rows
        for j in 0..q {
            let dw: f64 = sqrt_dt * rng.sample::<f64, _>(StandardNormal);
            for i in 0..self.sys.state_dim {
                self.drift[i] = self.drift[i] + self.h_scratch[i * q + j] * dw / dt;
            }
        }
        for (i, xi) in x.iter_mut().enumerate() {
            *xi += self.drift[i] * dt;
            if !xi.is_finite() {
                return Err(Error::Divergence {
                    t,
                    detail: format!("state coordinate {i} became {xi}"),
                });
            }
        }
        if self.sys.domain.clamp(x) {
            self.clip_events += 1;
        }
        Ok(())
    }
}

/// Simulates one path under a piecewise-constant policy.
///
/// `record_stride` controls output resolution: every `stride`-th step is
/// recorded (the initial and final states always are).
pub fn simulate_path(
    sys: &ControlAffineSde,
    x0: &[f64],
    policy: &ControlPolicy,
    stream: WienerStream,
    t_end: f64,
    record_stride: usize,
) -> Result<PathRecord> {
    let dt = stream.dt;
    if !(dt > 0.0 && t_end >= 0.0) {
        return Err(Error::Config(format!("simulate: invalid dt {dt} or t_end {t_end}")));
    }
    check_divides(t_end, dt, "t_end")?;
    for (i, interval) in policy.intervals().iter().enumerate() {
        check_divides(interval.0, dt, &format!("policy interval {i}"))?;
    }
    if x0.len() != sys.state_dim {
        return Err(Error::ModelDomain(format!(
            "initial state dimension {} does not match model dimension {}",
            x0.len(),
            sys.state_dim
        )));
    }
    let stride = record_stride.max(1);
    let n_steps = (t_end / dt).round() as usize;
    let mut rng = stream.rng();
    let mut integrator = EmIntegrator::new(sys);
    let mut x = x0.to_vec();

    let mut times = Vec::with_capacity(n_steps / stride + 2);
    let mut states = Vec::new();
    let mut inputs = Vec::new();
    times.push(0.0);
    states.extend_from_slice(&x);

    let mut u = vec![0.0; sys.input_dim];
    for k in 0..n_steps {
        let t = k as f64 * dt;
        u.copy_from_slice(policy.input_at(t));
        integrator.step(&mut x, &u, dt, t, &mut rng)?;
        if (k + 1) % stride == 0 || k + 1 == n_steps {
            inputs.extend_from_slice(&u);
            times.push((k + 1) as f64 * dt);
            states.extend_from_slice(&x);
        }
    }
    Ok(PathRecord {
        state_dim: sys.state_dim,
        input_dim: sys.input_dim,
        times,
        states,
        inputs,
        clip_events: integrator.clip_events,
    })
}

fn check_divides(span: f64, dt: f64, what: &str) -> Result<()> {
    let ratio = span / dt;
    if (ratio - ratio.round()).abs() > 1e-9 * ratio.abs().max(1.0) {
        return Err(Error::Config(format!(
            "simulate: dt = {dt} does not divide {what} = {span}"
        )));
    }
    Ok(())
}

/// Simulates `n_paths` independent realizations; realization `i` uses
/// stream id `i` and draws its initial state from `x0_sampler` before
/// consuming Wiener increments. Failed realizations are reported next to
/// their id rather than aborting the ensemble.
pub fn simulate_ensemble<S>(
    sys: &ControlAffineSde,
    x0_sampler: &S,
    policy: &ControlPolicy,
    n_paths: usize,
    seed: u64,
    dt: f64,
    t_end: f64,
    record_stride: usize,
) -> Vec<(u64, Result<PathRecord>)>
where
    S: Fn(&mut ChaCha12Rng) -> Vec<f64> + Sync,
{
    (0..n_paths as u64)
        .into_par_iter()
        .map(|id| {
            let stream = WienerStream::new(seed, id, dt);
            let mut rng = stream.rng();
            let x0 = x0_sampler(&mut rng);
            // continue the same stream for the Wiener increments
            let result = simulate_path_with_rng(sys, &x0, policy, &mut rng, dt, t_end, record_stride);
            (id, result)
        })
        .collect()
}

/// Like [`simulate_path`] but continues an already-positioned generator.
fn simulate_path_with_rng(
    sys: &ControlAffineSde,
    x0: &[f64],
    policy: &ControlPolicy,
    rng: &mut ChaCha12Rng,
    dt: f64,
    t_end: f64,
    record_stride: usize,
) -> Result<PathRecord> {
    check_divides(t_end, dt, "t_end")?;
    let stride = record_stride.max(1);
    let n_steps = (t_end / dt).round() as usize;
    let mut integrator = EmIntegrator::new(sys);
    let mut x = x0.to_vec();
    let mut times = Vec::with_capacity(n_steps / stride + 2);
    let mut states = Vec::new();
    let mut inputs = Vec::new();
    times.push(0.0);
    states.extend_from_slice(&x);
    let mut u = vec![0.0; sys.input_dim];
    for k in 0..n_steps {
        let t = k as f64 * dt;
        u.copy_from_slice(policy.input_at(t));
        integrator.step(&mut x, &u, dt, t, rng)?;
        if (k + 1) % stride == 0 || k + 1 == n_steps {
            inputs.extend_from_slice(&u);
            times.push((k + 1) as f64 * dt);
            states.extend_from_slice(&x);
        }
    }
    Ok(PathRecord {
        state_dim: sys.state_dim,
        input_dim: sys.input_dim,
        times,
        states,
        inputs,
        clip_events: integrator.clip_events,
    })
}

/// Normalized histogram of one state coordinate at time `t`, binned on the
/// provided grid. Values outside the grid fall into the end bins. Errors
/// if `t` is not a recorded sample instant of every path (no
/// interpolation).
pub fn empirical_histogram(
    records: &[&PathRecord],
    coordinate: usize,
    t: f64,
    grid: &Grid1D,
) -> Result<Vec<f64>> {
    if records.is_empty() {
        return Err(Error::Metric("empirical histogram of an empty ensemble".into()));
    }
    let mut masses = vec![0.0; grid.n_cells];
    for (i, rec) in records.iter().enumerate() {
        if coordinate >= rec.state_dim {
            return Err(Error::Metric(format!(
                "coordinate {coordinate} out of range for state dimension {}",
                rec.state_dim
            )));
        }
        let idx = rec.index_of(t).ok_or_else(|| {
            Error::Metric(format!(
                "instant {t} is not on the sample grid of realization {i}; refusing to interpolate"
            ))
        })?;
        let x = rec.state(idx)[coordinate];
        masses[grid.cell_containing(x)] += 1.0;
    }
    let total: f64 = masses.iter().sum();
    for m in &mut masses {
        *m /= total;
    }
    Ok(masses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ControlAffineSde, DomainBox};
    use crate::ocp::ControlPolicy;
    use statrs::distribution::{ContinuousCDF, Normal};

    fn frozen_system() -> ControlAffineSde {
        ControlAffineSde::new(
            1,
            1,
            1,
            Box::new(|_, out| out[0] = 0.0),
            Box::new(|_, out| out[0] = 0.0),
            Box::new(|_, out| out[0] = 0.0),
            DomainBox::new(vec![-10.0], vec![10.0]).unwrap(),
        )
        .unwrap()
    }

    fn scalar_drift(rate: f64, sigma: f64) -> ControlAffineSde {
        ControlAffineSde::new(
            1,
            1,
            1,
            Box::new(move |x, out| out[0] = rate * x[0]),
            Box::new(|_, out| out[0] = 0.0),
            Box::new(move |_, out| out[0] = sigma),
            DomainBox::new(vec![-1e6], vec![1e6]).unwrap(),
        )
        .unwrap()
    }

    fn zero_policy() -> ControlPolicy {
        ControlPolicy::uniform(1, 1e6, vec![0.0]).unwrap()
    }

    #[test]
    fn frozen_dynamics_give_constant_path() {
        let sys = frozen_system();
        let rec = simulate_path(
            &sys,
            &[0.7],
            &zero_policy(),
            WienerStream::new(1, 0, 0.01),
            1.0,
            1,
        )
        .unwrap();
        assert_eq!(rec.len(), 101);
        for i in 0..rec.len() {
            assert_eq!(rec.state(i)[0], 0.7);
        }
        assert_eq!(rec.clip_events, 0);
    }

    #[test]
    fn linear_decay_converges_to_exponential() {
        let sys = scalar_drift(-1.0, 0.0);
        let dt = 1e-3;
        let rec = simulate_path(&sys, &[1.0], &zero_policy(), WienerStream::new(1, 0, dt), 1.0, 1000)
            .unwrap();
        let x1 = rec.last_state()[0];
        assert!((x1 - (-1.0f64).exp()).abs() <= dt, "x(1) = {x1}");
    }

    #[test]
    fn dt_must_divide_horizon_and_intervals() {
        let sys = frozen_system();
        let err = simulate_path(&sys, &[0.0], &zero_policy(), WienerStream::new(1, 0, 0.3), 1.0, 1);
        assert!(err.is_err());
        let policy = ControlPolicy::uniform(3, 0.25, vec![0.0]).unwrap();
        let err = simulate_path(&sys, &[0.0], &policy, WienerStream::new(1, 0, 0.1), 3.0, 1);
        assert!(err.is_err());
    }

    #[test]
    fn pure_noise_variance_grows_linearly() {
        let sigma = 0.7;
        let sys = scalar_drift(0.0, sigma);
        let t_end = 1.0;
        let n = 10_000;
        let results = simulate_ensemble(
            &sys,
            &|_rng| vec![0.0],
            &zero_policy(),
            n,
            99,
            0.01,
            t_end,
            usize::MAX,
        );
        let finals: Vec<f64> = results
            .iter()
            .map(|(_, r)| r.as_ref().unwrap().last_state()[0])
            .collect();
        let mean = finals.iter().sum::<f64>() / n as f64;
        let var = finals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        let expected = sigma * sigma * t_end;
        let se = expected * (2.0 / (n as f64 - 1.0)).sqrt();
        assert!((var - expected).abs() <= 3.0 * se, "var {var} vs {expected} (se {se})");
    }

    #[test]
    fn ou_ensemble_matches_analytic_moments() {
        // dx = -x dt + sigma dw from x0 = 1: mean e^{-t}, var sigma^2 (1 - e^{-2t}) / 2
        let sigma = 0.5;
        let sys = scalar_drift(-1.0, sigma);
        let n = 10_000;
        let results = simulate_ensemble(
            &sys,
            &|_rng| vec![1.0],
            &zero_policy(),
            n,
            1234,
            0.01,
            1.0,
            usize::MAX,
        );
        let finals: Vec<f64> = results
            .iter()
            .map(|(_, r)| r.as_ref().unwrap().last_state()[0])
            .collect();
        let mean = finals.iter().sum::<f64>() / n as f64;
        let var = finals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        let mean_true = (-1.0f64).exp();
        let var_true = sigma * sigma * (1.0 - (-2.0f64).exp()) / 2.0;
        let se_mean = var_true.sqrt() / (n as f64).sqrt();
        let se_var = var_true * (2.0 / (n as f64 - 1.0)).sqrt();
        // 3 standard errors plus the O(dt) weak bias
        assert!((mean - mean_true).abs() <= 3.0 * se_mean + 0.01 * mean_true.abs());
        assert!((var - var_true).abs() <= 3.0 * se_var + 0.01 * var_true);
    }

    #[test]
    fn ensembles_are_deterministic_and_match_single_paths() {
        let sys = scalar_drift(-0.5, 0.3);
        let policy = zero_policy();
        let a = simulate_ensemble(&sys, &|_| vec![1.0], &policy, 8, 42, 0.01, 2.0, 1);
        let b = simulate_ensemble(&sys, &|_| vec![1.0], &policy, 8, 42, 0.01, 2.0, 1);
        for ((ia, ra), (ib, rb)) in a.iter().zip(&b) {
            assert_eq!(ia, ib);
            assert_eq!(ra.as_ref().unwrap(), rb.as_ref().unwrap());
        }
        // stream 0 of the ensemble equals the standalone path with stream 0
        let single =
            simulate_path(&sys, &[1.0], &policy, WienerStream::new(42, 0, 0.01), 2.0, 1).unwrap();
        assert_eq!(a[0].1.as_ref().unwrap(), &single);
        // distinct streams produce distinct noise
        assert_ne!(a[0].1.as_ref().unwrap(), a[1].1.as_ref().unwrap());
    }

    #[test]
    fn histogram_of_identical_paths_occupies_one_bin() {
        let sys = frozen_system();
        let grid = Grid1D::new(0.0, 2.0, 200).unwrap();
        let recs: Vec<PathRecord> = (0..5)
            .map(|i| {
                simulate_path(&sys, &[0.7], &zero_policy(), WienerStream::new(1, i, 0.01), 1.0, 1)
                    .unwrap()
            })
            .collect();
        let refs: Vec<&PathRecord> = recs.iter().collect();
        let masses = empirical_histogram(&refs, 0, 1.0, &grid).unwrap();
        let occupied: Vec<usize> =
            masses.iter().enumerate().filter(|(_, &m)| m > 0.0).map(|(i, _)| i).collect();
        assert_eq!(occupied, vec![grid.cell_containing(0.7)]);
        assert!((masses.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn histogram_of_uniform_samples_is_flat() {
        let sys = frozen_system();
        let grid = Grid1D::new(0.0, 2.0, 200).unwrap();
        let n = 20_000;
        let results = simulate_ensemble(
            &sys,
            &|rng| vec![rng.random::<f64>() * 2.0],
            &zero_policy(),
            n,
            7,
            0.5,
            0.5,
            1,
        );
        let recs: Vec<&PathRecord> = results.iter().map(|(_, r)| r.as_ref().unwrap()).collect();
        let masses = empirical_histogram(&recs, 0, 0.5, &grid).unwrap();
        for &m in &masses {
            assert!((m - 0.005).abs() < 0.002, "bin mass {m}");
        }
    }

    #[test]
    fn histogram_refuses_off_grid_instants() {
        let sys = frozen_system();
        let grid = Grid1D::new(0.0, 2.0, 200).unwrap();
        let rec =
            simulate_path(&sys, &[0.7], &zero_policy(), WienerStream::new(1, 0, 0.01), 1.0, 1).unwrap();
        let err = empirical_histogram(&[&rec], 0, 0.505, &grid).unwrap_err();
        assert!(err.to_string().contains("refusing to interpolate"), "{err}");
    }

    #[test]
    fn pure_diffusion_cdf_within_dkw_band() {
        // terminal law of dx = dw at t = 1 is N(0, 1); check the empirical
        // CDF against it at every grid face with the 99% DKW band
        let sys = scalar_drift(0.0, 1.0);
        let n = 10_000usize;
        let results = simulate_ensemble(
            &sys,
            &|_| vec![0.0],
            &zero_policy(),
            n,
            2718,
            0.01,
            1.0,
            usize::MAX,
        );
        let mut finals: Vec<f64> = results
            .iter()
            .map(|(_, r)| r.as_ref().unwrap().last_state()[0])
            .collect();
        finals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let normal = Normal::new(0.0, 1.0).unwrap();
        let band = ((2.0f64 / 0.01).ln() / (2.0 * n as f64)).sqrt();
        let grid = Grid1D::new(-4.0, 4.0, 160).unwrap();
        let mut worst: f64 = 0.0;
        for i in 0..=grid.n_cells {
            let x = grid.face(i);
            let emp = finals.partition_point(|&v| v <= x) as f64 / n as f64;
            worst = worst.max((emp - normal.cdf(x)).abs());
        }
        assert!(worst <= band, "sup deviation {worst} vs DKW band {band}");
    }
}
