//! Quadratic stochastic control Lyapunov machinery.
//!
//! `V(x) = (x - x_ss)' P (x - x_ss)` with decay rate `gamma`. The Ito
//! generator of `V` along the controlled diffusion is
//! `grad V . (f + g u) + Tr(h' P h)` (the Hessian of `V` is `2 P`), and the
//! decay constraint requires `generator + gamma V <= 0` on the validity
//! region. With additive noise the trace term is positive at the steady
//! state itself, so the constraint can only be demanded outside a small
//! sublevel set; `level_floor` is that cutoff (`V > level_floor` is where
//! the constraint is enforced).

use crate::error::{Error, Result};
use crate::model::ControlAffineSde;
use nalgebra::{DMatrix, DVector};

/// Quadratic certificate `(P, gamma, x_ss)` plus the enforcement floor.
#[derive(Debug, Clone)]
pub struct LyapunovCertificate {
    p: DMatrix<f64>,
    pub gamma: f64,
    pub x_ss: Vec<f64>,
    /// Sublevel cutoff of the validity region: the decay constraint is
    /// enforced where `V(x) > level_floor`.
    pub level_floor: f64,
}

impl LyapunovCertificate {
    pub fn new(p: DMatrix<f64>, gamma: f64, x_ss: Vec<f64>, level_floor: f64) -> Result<Self> {
        if !p.is_square() || p.nrows() != x_ss.len() {
            return Err(Error::Certificate(format!(
                "P is {}x{} for a state of dimension {}",
                p.nrows(),
                p.ncols(),
                x_ss.len()
            )));
        }
        let asym = (&p - p.transpose()).abs().max();
        if asym > 1e-9 * (1.0 + p.abs().max()) {
            return Err(Error::Certificate(format!(
                "P is not symmetric (asymmetry {asym})"
            )));
        }
        let p = (&p + p.transpose()) * 0.5;
        let eigs = p.clone().symmetric_eigen().eigenvalues;
        if eigs.iter().any(|&e| e <= 0.0) {
            return Err(Error::Certificate(format!(
                "P is not positive definite (eigenvalues {:?})",
                eigs.as_slice()
            )));
        }
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::Certificate(format!("gamma must be positive, got {gamma}")));
        }
        if !(level_floor >= 0.0 && level_floor.is_finite()) {
            return Err(Error::Certificate(format!(
                "level floor must be nonnegative, got {level_floor}"
            )));
        }
        Ok(LyapunovCertificate { p, gamma, x_ss, level_floor })
    }

    pub fn p(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn dim(&self) -> usize {
        self.x_ss.len()
    }

    fn shifted(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_iterator(x.len(), x.iter().zip(&self.x_ss).map(|(a, b)| a - b))
    }
}

/// `V(x) = (x - x_ss)' P (x - x_ss)`.
pub fn lyapunov_value(cert: &LyapunovCertificate, x: &[f64]) -> f64 {
    let dx = cert.shifted(x);
    (cert.p() * &dx).dot(&dx)
}

/// Ito generator of `V` at `(x, u)`:
/// `grad V . (f + g u) + (1/2) Tr(h' (2P) h)`.
pub fn generator(cert: &LyapunovCertificate, sys: &ControlAffineSde, x: &[f64], u: &[f64]) -> Result<f64> {
    if cert.dim() != sys.state_dim {
        return Err(Error::Certificate(format!(
            "certificate dimension {} does not match state dimension {}",
            cert.dim(),
            sys.state_dim
        )));
    }
    let drift = sys.eval_drift(x, u)?;
    let h = sys.eval_diffusion(x)?;
    let dx = cert.shifted(x);
    let p_dx = cert.p() * &dx;
    let mut value = 0.0;
    for (g, f) in p_dx.iter().zip(&drift) {
        value += 2.0 * g * f;
    }
    // Tr(h' P h) = sum over noise columns of h_j' P h_j
    let q = sys.noise_dim;
    let n = sys.state_dim;
    for j in 0..q {
        for i in 0..n {
            for l in 0..n {
                value += h[i * q + j] * cert.p()[(i, l)] * h[l * q + j];
            }
        }
    }
    Ok(value)
}

/// Decay-constraint residual `generator + gamma V`; the constraint holds
/// iff the residual is `<= 0`.
pub fn stability_residual(
    cert: &LyapunovCertificate,
    sys: &ControlAffineSde,
    x: &[f64],
    u: &[f64],
) -> Result<f64> {
    Ok(generator(cert, sys, x, u)? + cert.gamma * lyapunov_value(cert, x))
}

/// Solves `A' P + P A = -Q` for symmetric positive-definite `Q` and
/// Hurwitz `A` via the Kronecker-product linear system.
pub fn solve_lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if !a.is_square() || !q.is_square() || q.nrows() != n {
        return Err(Error::Certificate(format!(
            "shape mismatch: A is {}x{}, Q is {}x{}",
            a.nrows(),
            a.ncols(),
            q.nrows(),
            q.ncols()
        )));
    }
    if (q - q.transpose()).abs().max() > 1e-9 * (1.0 + q.abs().max()) {
        return Err(Error::Certificate("Q is not symmetric".into()));
    }
    let max_re = a
        .clone()
        .complex_eigenvalues()
        .iter()
        .map(|e| e.re)
        .fold(f64::NEG_INFINITY, f64::max);
    if max_re >= -1e-12 {
        return Err(Error::Certificate(format!(
            "A is not Hurwitz (max eigenvalue real part {max_re})"
        )));
    }
    let at = a.transpose();
    let eye = DMatrix::<f64>::identity(n, n);
    let m = eye.kronecker(&at) + at.kronecker(&eye);
    let rhs = DVector::from_iterator(n * n, q.iter().map(|v| -v));
    let sol = m
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Certificate("singular Lyapunov system".into()))?;
    let p = DMatrix::from_iterator(n, n, sol.iter().copied());
    let p = (&p + p.transpose()) * 0.5;
    let residual = (&at * &p + &p * a + q).abs().max();
    let scale = q.abs().max().max(1e-300);
    if residual > 1e-10 * scale {
        return Err(Error::Certificate(format!(
            "Lyapunov residual {residual} exceeds 1e-10 relative tolerance"
        )));
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_cstr, ControlAffineSde, CstrParameters, DomainBox};

    /// The matrix reported for the reactor benchmark.
    pub(crate) fn paper_p() -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[3.18, 0.93, 0.93, 0.58])
    }

    fn scalar_system(rate: f64, sigma: f64) -> ControlAffineSde {
        ControlAffineSde::new(
            1,
            1,
            1,
            Box::new(move |x, out| out[0] = rate * x[0]),
            Box::new(|_, out| out[0] = 0.0),
            Box::new(move |_, out| out[0] = sigma),
            DomainBox::new(vec![-100.0], vec![100.0]).unwrap(),
        )
        .unwrap()
    }

    fn scalar_cert(gamma: f64) -> LyapunovCertificate {
        LyapunovCertificate::new(DMatrix::from_element(1, 1, 1.0), gamma, vec![0.0], 0.0).unwrap()
    }

    #[test]
    fn value_vanishes_at_center() {
        let cert =
            LyapunovCertificate::new(paper_p(), 0.1, vec![0.57, 317.0], 0.0).unwrap();
        assert_eq!(lyapunov_value(&cert, &[0.57, 317.0]), 0.0);
    }

    #[test]
    fn value_matches_quadratic_form_arithmetic() {
        let cert = LyapunovCertificate::new(paper_p(), 0.1, vec![0.0, 0.0], 0.0).unwrap();
        assert!((lyapunov_value(&cert, &[1.0, 0.0]) - 3.18).abs() < 1e-12);
        // (1,1): 3.18 + 2*0.93 + 0.58 = 5.62
        assert!((lyapunov_value(&cert, &[1.0, 1.0]) - 5.62).abs() < 1e-12);
    }

    #[test]
    fn certificate_rejects_bad_inputs() {
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -0.5, 1.0]);
        assert!(LyapunovCertificate::new(asym, 0.1, vec![0.0, 0.0], 0.0).is_err());
        let indef = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(LyapunovCertificate::new(indef, 0.1, vec![0.0, 0.0], 0.0).is_err());
        assert!(LyapunovCertificate::new(paper_p(), 0.0, vec![0.0, 0.0], 0.0).is_err());
    }

    #[test]
    fn generator_of_scalar_ou() {
        // dx = -x dt + sigma dw, V = x^2: L V = -2 x^2 + sigma^2
        let sigma = 0.4;
        let sys = scalar_system(-1.0, sigma);
        let cert = scalar_cert(1.0);
        for &x in &[0.0, 0.3, -1.7, 2.5] {
            let lv = generator(&cert, &sys, &[x], &[0.0]).unwrap();
            assert!((lv - (-2.0 * x * x + sigma * sigma)).abs() < 1e-12, "x = {x}");
        }
    }

    #[test]
    fn generator_matches_matrix_identity_on_linear_systems() {
        // dx = A x dt + h dw, V = x' P x: L V = x'(A'P + PA)x + Tr(h' P h)
        let mut lcg = 0x2545f4914f6cdd1du64;
        let mut next = move || {
            lcg = lcg.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((lcg >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        for _ in 0..10 {
            let a = DMatrix::from_fn(2, 2, |_, _| next());
            let h = [next(), next()];
            let p = {
                let m = DMatrix::from_fn(2, 2, |_, _| next());
                &m * m.transpose() + DMatrix::identity(2, 2)
            };
            let cert = LyapunovCertificate::new(p.clone(), 0.5, vec![0.0, 0.0], 0.0).unwrap();
            let a_cl = a.clone();
            let sys = ControlAffineSde::new(
                2,
                1,
                1,
                Box::new(move |x, out| {
                    out[0] = a_cl[(0, 0)] * x[0] + a_cl[(0, 1)] * x[1];
                    out[1] = a_cl[(1, 0)] * x[0] + a_cl[(1, 1)] * x[1];
                }),
                Box::new(|_, out| {
                    out[0] = 0.0;
                    out[1] = 0.0;
                }),
                Box::new(move |_, out| {
                    out[0] = h[0];
                    out[1] = h[1];
                }),
                DomainBox::new(vec![-100.0, -100.0], vec![100.0, 100.0]).unwrap(),
            )
            .unwrap();
            let x = [next(), next()];
            let xv = DVector::from_row_slice(&x);
            let hv = DVector::from_row_slice(&h);
            let expected = ((a.transpose() * &p + &p * &a) * &xv).dot(&xv) + (&p * &hv).dot(&hv);
            let got = generator(&cert, &sys, &x, &[0.0]).unwrap();
            assert!((got - expected).abs() < 1e-10 * (1.0 + expected.abs()));
        }
    }

    #[test]
    fn residual_for_stable_and_unstable_scalar_dynamics() {
        let cert = scalar_cert(1.0);
        let stable = scalar_system(-1.0, 0.0);
        let unstable = scalar_system(1.0, 0.0);
        // boundary case: everything vanishes at the center
        assert_eq!(stability_residual(&cert, &stable, &[0.0], &[0.0]).unwrap(), 0.0);
        for &x in &[0.5, -2.0] {
            let r = stability_residual(&cert, &stable, &[x], &[0.0]).unwrap();
            assert!((r - (-x * x)).abs() < 1e-12);
            assert!(r <= 0.0);
            let r = stability_residual(&cert, &unstable, &[x], &[0.0]).unwrap();
            assert!((r - 3.0 * x * x).abs() < 1e-12);
            assert!(r > 0.0);
        }
    }

    #[test]
    fn residual_is_affine_in_the_input() {
        let sys = build_cstr(&CstrParameters::default()).unwrap();
        let cert =
            LyapunovCertificate::new(paper_p(), 0.1, vec![0.57, 317.0], 0.0).unwrap();
        let x = [0.8, 320.0];
        let u1 = [0.2, -5.0];
        let u2 = [1.6, 7.0];
        let mid = [(u1[0] + u2[0]) / 2.0, (u1[1] + u2[1]) / 2.0];
        let r1 = stability_residual(&cert, &sys, &x, &u1).unwrap();
        let r2 = stability_residual(&cert, &sys, &x, &u2).unwrap();
        let rm = stability_residual(&cert, &sys, &x, &mid).unwrap();
        assert!((rm - 0.5 * (r1 + r2)).abs() < 1e-9);
    }

    #[test]
    fn lyapunov_solve_identity_case() {
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, -1.0]);
        let q = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 2.0]);
        let p = solve_lyapunov(&a, &q).unwrap();
        assert!((&p - DMatrix::identity(2, 2)).abs().max() < 1e-12);
    }

    #[test]
    fn lyapunov_solve_diagonal_case() {
        // scalar equations p_i = q_i / (2 |a_i|)
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, -2.0]);
        let q = DMatrix::identity(2, 2);
        let p = solve_lyapunov(&a, &q).unwrap();
        assert!((p[(0, 0)] - 0.5).abs() < 1e-12);
        assert!((p[(1, 1)] - 0.25).abs() < 1e-12);
        assert!(p[(0, 1)].abs() < 1e-12);
    }

    #[test]
    fn lyapunov_solve_rejects_unstable_dynamics() {
        let a = DMatrix::from_row_slice(2, 2, &[0.1, 0.0, 0.0, -1.0]);
        assert!(solve_lyapunov(&a, &DMatrix::identity(2, 2)).is_err());
    }

    #[test]
    fn random_stable_systems_are_solved_to_tolerance() {
        let mut lcg = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            lcg = lcg.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((lcg >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        for _ in 0..100 {
            let raw = DMatrix::from_fn(2, 2, |_, _| next());
            let max_re = raw
                .clone()
                .complex_eigenvalues()
                .iter()
                .map(|e| e.re)
                .fold(f64::NEG_INFINITY, f64::max);
            let a = raw - DMatrix::identity(2, 2) * (max_re + 0.5);
            let q = DMatrix::identity(2, 2);
            let p = solve_lyapunov(&a, &q).unwrap();
            let res = (a.transpose() * &p + &p * &a + &q).abs().max();
            assert!(res <= 1e-10 * q.abs().max());
            // symmetric positive definite
            let eigs = p.clone().symmetric_eigen().eigenvalues;
            assert!(eigs.iter().all(|&e| e > 0.0));
        }
    }

    #[test]
    fn regenerated_certificate_matches_reported_matrix() {
        // linearize the reactor at its steady point and solve with Q = I;
        // the result should land on the reported 2-digit matrix
        let sys = build_cstr(&CstrParameters::default()).unwrap();
        let x_ss = [0.57, 317.0];
        let u_ss = sys.steady_inputs(&x_ss, &[0.7, 0.0], 1e-10).unwrap();
        let (a, _) = sys.linearize(&x_ss, &u_ss, 1e-6).unwrap();
        let p = solve_lyapunov(&a, &DMatrix::identity(2, 2)).unwrap();
        let diff = (&p - paper_p()).abs().max();
        assert!(diff <= 0.02, "regenerated P differs by {diff}: {p}");
    }
}
