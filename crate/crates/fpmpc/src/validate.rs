//! Built-in property suites: analytic density-propagation benchmarks,
//! closed-form overlap checks, Lyapunov-equation accuracy, and the
//! Monte-Carlo generator cross-check. The `validate` subcommand and the
//! acceptance tests both run these.

use crate::fp::{density_from_normal, fp_propagate, DensityField, Grid1D};
use crate::lyapunov::{generator, solve_lyapunov, LyapunovCertificate};
use crate::metrics::{bhattacharyya, hellinger};
use crate::model::{ControlAffineSde, DomainBox};
use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    pub details: String,
}

impl SuiteResult {
    fn new(name: &str, passed: bool, details: String) -> Self {
        SuiteResult { name: name.to_string(), passed, details }
    }
}

/// Runs every suite.
pub fn run_all() -> Vec<SuiteResult> {
    vec![
        fp_analytic_suite(),
        gaussian_overlap_suite(),
        lyapunov_equation_suite(),
        ou_generator_suite(),
    ]
}

/// Heat-kernel and mean-reverting stationary benchmarks on 50/100/200
/// cells: Hellinger error below 0.05 at 200 cells and monotone decrease
/// under refinement.
pub fn fp_analytic_suite() -> SuiteResult {
    let mut details = String::new();
    let mut passed = true;

    // pure diffusion: N(1, 0.0025) under D = 0.002 for t = 2 -> N(1, 0.0105)
    let mut heat = Vec::new();
    for n in [50usize, 100, 200] {
        let grid = Grid1D::new(0.0, 2.0, n).unwrap();
        let start = density_from_normal(1.0, 0.0025, grid).unwrap().field;
        let analytic = density_from_normal(1.0, 0.0025 + 2.0 * 0.002 * 2.0, grid).unwrap().field;
        match fp_propagate(&start, |_, _, out| out.fill(0.0), 0.002, 2.0, f64::INFINITY, &[2.0]) {
            Ok(traj) => {
                let h = hellinger(&traj.snapshots[0].1, &analytic).unwrap();
                heat.push(h);
            }
            Err(e) => {
                passed = false;
                details.push_str(&format!("heat kernel n={n} failed: {e}; "));
                heat.push(f64::NAN);
            }
        }
    }
    details.push_str(&format!(
        "heat kernel H(50/100/200) = {:.4}/{:.4}/{:.4}; ",
        heat[0], heat[1], heat[2]
    ));
    passed &= heat[2] <= 0.05 && heat.windows(2).all(|w| w[1] < w[0]);

    // mean-reverting profile dx = -(x - 1) dt + sqrt(2 D) dw started from
    // its stationary law N(1, D), D = 0.01
    let d = 0.01;
    let mut ou = Vec::new();
    for n in [50usize, 100, 200] {
        let grid = Grid1D::new(0.0, 2.0, n).unwrap();
        let stationary = density_from_normal(1.0, d, grid).unwrap().field;
        match fp_propagate(
            &stationary,
            |_, f: &DensityField, out: &mut [f64]| {
                let g = *f.grid();
                for (i, a) in out.iter_mut().enumerate() {
                    *a = 1.0 - g.face(i);
                }
            },
            d,
            5.0,
            f64::INFINITY,
            &[5.0],
        ) {
            Ok(traj) => ou.push(hellinger(&traj.snapshots[0].1, &stationary).unwrap()),
            Err(e) => {
                passed = false;
                details.push_str(&format!("stationary profile n={n} failed: {e}; "));
                ou.push(f64::NAN);
            }
        }
    }
    details.push_str(&format!(
        "stationary H(50/100/200) = {:.4}/{:.4}/{:.4}",
        ou[0], ou[1], ou[2]
    ));
    passed &= ou[2] <= 0.05 && ou.windows(2).all(|w| w[1] < w[0]);
    // the 200-cell stationary drift stays within the tight contract
    passed &= ou[2] <= 0.02;

    SuiteResult::new("fp-analytic", passed, details)
}

/// Quadrature overlap against the closed form
/// `B = exp(-(dmu)^2 / (8 s^2))` for equal-variance Gaussian pairs, plus
/// exact identity and disjoint cases.
pub fn gaussian_overlap_suite() -> SuiteResult {
    let grid = Grid1D::new(0.0, 2.0, 2000).unwrap();
    let pairs = [(0.1, 0.1), (0.05, 0.1), (0.2, 0.1), (0.1, 0.05), (0.3, 0.15)];
    let mut passed = true;
    let mut worst: f64 = 0.0;
    for (dmu, s) in pairs {
        let p = density_from_normal(1.0 - dmu / 2.0, s * s, grid).unwrap().field;
        let q = density_from_normal(1.0 + dmu / 2.0, s * s, grid).unwrap().field;
        let b = bhattacharyya(&p, &q).unwrap();
        let closed = (-(dmu * dmu) / (8.0 * s * s)).exp();
        let err = (b - closed).abs();
        worst = worst.max(err);
        passed &= err <= 1e-3;
    }
    let p = density_from_normal(0.8, 1e-2, grid).unwrap().field;
    let identity_err = (bhattacharyya(&p, &p).unwrap() - 1.0).abs();
    passed &= identity_err <= 1e-12;
    let mut left = vec![0.0; 2000];
    let mut right = vec![0.0; 2000];
    for i in 0..500 {
        left[i] = 1.0;
        right[1500 + i] = 1.0;
    }
    let pl = DensityField::from_masses(grid, left).unwrap();
    let pr = DensityField::from_masses(grid, right).unwrap();
    let disjoint = bhattacharyya(&pl, &pr).unwrap();
    passed &= disjoint <= 1e-12;
    SuiteResult::new(
        "gaussian-overlap",
        passed,
        format!(
            "worst closed-form error {worst:.2e}; identity defect {identity_err:.2e}; disjoint {disjoint:.2e}"
        ),
    )
}

/// Lyapunov-equation accuracy on 100 random stable systems, rejection of
/// unstable dynamics and invalid certificates, and regeneration of the
/// benchmark matrix.
pub fn lyapunov_equation_suite() -> SuiteResult {
    let mut passed = true;
    let mut details = String::new();
    let mut lcg = 0xdeadbeefcafef00du64;
    let mut next = move || {
        lcg = lcg.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((lcg >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    };
    let q = DMatrix::<f64>::identity(2, 2);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let raw = DMatrix::from_fn(2, 2, |_, _| next());
        let max_re = raw
            .clone()
            .complex_eigenvalues()
            .iter()
            .map(|e| e.re)
            .fold(f64::NEG_INFINITY, f64::max);
        let a = raw - DMatrix::identity(2, 2) * (max_re + 0.5);
        match solve_lyapunov(&a, &q) {
            Ok(p) => {
                let res = (a.transpose() * &p + &p * &a + &q).abs().max();
                worst = worst.max(res);
            }
            Err(e) => {
                passed = false;
                details.push_str(&format!("solve failed: {e}; "));
            }
        }
    }
    passed &= worst <= 1e-10;
    details.push_str(&format!("worst residual {worst:.2e}; "));

    let unstable = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, -1.0]);
    let rejects_unstable = solve_lyapunov(&unstable, &q).is_err();
    passed &= rejects_unstable;

    // a perturbed, non-symmetric matrix must be rejected as a certificate
    let tampered = DMatrix::from_row_slice(2, 2, &[3.18, 0.93, 0.80, 0.58]);
    let rejects_tampered =
        LyapunovCertificate::new(tampered, 0.1, vec![0.0, 0.0], 0.0).is_err();
    passed &= rejects_tampered;
    details.push_str(&format!(
        "rejects unstable: {rejects_unstable}; rejects tampered certificate: {rejects_tampered}; "
    ));

    // regeneration of the benchmark matrix from the linearized reactor
    let sys = crate::model::build_cstr(&crate::model::CstrParameters::default()).unwrap();
    let x_ss = [0.57, 317.0];
    match sys
        .steady_inputs(&x_ss, &[0.7, 0.0], 1e-10)
        .and_then(|u| sys.linearize(&x_ss, &u, 1e-6))
        .and_then(|(a, _)| solve_lyapunov(&a, &q))
    {
        Ok(p) => {
            let reported = DMatrix::from_row_slice(2, 2, &[3.18, 0.93, 0.93, 0.58]);
            let diff = (&p - reported).abs().max();
            passed &= diff <= 0.02;
            details.push_str(&format!("benchmark P regeneration deviation {diff:.4}"));
        }
        Err(e) => {
            passed = false;
            details.push_str(&format!("benchmark P regeneration failed: {e}"));
        }
    }
    SuiteResult::new("lyapunov-equation", passed, details)
}

/// Ito-generator cross-check: the quadratic-form generator against a
/// single-step Monte Carlo estimate `(E[V(x + dx)] - V(x)) / dt` on the
/// mean-reverting scalar system, within three standard errors.
pub fn ou_generator_suite() -> SuiteResult {
    let sigma = 0.5;
    let sys = ControlAffineSde::new(
        1,
        1,
        1,
        Box::new(|x, out| out[0] = -x[0]),
        Box::new(|_, out| out[0] = 0.0),
        Box::new(move |_, out| out[0] = sigma),
        DomainBox::new(vec![-1e9], vec![1e9]).unwrap(),
    )
    .unwrap();
    let cert =
        LyapunovCertificate::new(DMatrix::from_element(1, 1, 1.0), 1.0, vec![0.0], 0.0).unwrap();
    let x0 = 1.0;
    let exact = generator(&cert, &sys, &[x0], &[0.0]).unwrap();

    let dt: f64 = 1e-3;
    let n = 10_000usize;
    let mut rng = ChaCha12Rng::seed_from_u64(31415);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n {
        let dw = dt.sqrt() * rng.sample::<f64, _>(StandardNormal);
        let x1 = x0 + (-x0) * dt + sigma * dw;
        let increment = (x1 * x1 - x0 * x0) / dt;
        sum += increment;
        sum_sq += increment * increment;
    }
    let mean = sum / n as f64;
    let var = (sum_sq / n as f64 - mean * mean).max(0.0);
    let se = (var / n as f64).sqrt();
    // O(dt) weak bias of the one-step estimate
    let bias_allowance = dt * (4.0 * x0 * x0 + sigma * sigma);
    let err = (mean - exact).abs();
    let passed = err <= 3.0 * se + bias_allowance;
    SuiteResult::new(
        "ou-generator",
        passed,
        format!("estimate {mean:.4} vs generator {exact:.4} (3 se = {:.4})", 3.0 * se),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass_on_a_fresh_build() {
        for suite in run_all() {
            assert!(suite.passed, "{}: {}", suite.name, suite.details);
        }
    }
}
