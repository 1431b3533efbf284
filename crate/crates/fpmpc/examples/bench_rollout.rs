// quick debugging probe, not part of the crate
use fpmpc::fp::{density_from_normal, Grid1D};
use fpmpc::lyapunov::LyapunovCertificate;
use fpmpc::model::{build_cstr, CstrParameters, InputBounds, StateConstraint};
use fpmpc::ocp::*;
use nalgebra::DMatrix;

fn mini_spec() -> OcpSpec {
    let mut params = CstrParameters::default();
    params.sigma_ca = 0.001f64.sqrt();
    let sys = build_cstr(&params).unwrap();
    let grid = Grid1D::new(0.0, 2.0, 200).unwrap();
    let reference = density_from_normal(0.57, 4e-4, grid).unwrap().field;
    OcpSpec {
        params, sys,
        prediction_horizon: 4.0, control_horizon: 4.0, n_intervals: 2,
        grid, fp_diffusion: 5e-4, dt_max: 0.05, reference,
        objective: ObjectiveForm::TemperatureTracking { setpoint: 317.0 },
        chance: StateConstraint::below_threshold(0, 0.53, 0.95).unwrap(),
        certificate: LyapunovCertificate::new(
            DMatrix::from_row_slice(2, 2, &[3.18, 0.93, 0.93, 0.58]), 0.1, vec![0.57, 317.0], 0.05).unwrap(),
        bounds: InputBounds::new(vec![0.0, -10.0], vec![2.0, 10.0]).unwrap(),
        eval_dt: 1.0,
        solver: SolverSettings { budget: 4000, ..SolverSettings::default() },
    }
}

fn main() {
    let spec = mini_spec();
    let init = density_from_normal(0.58, 4e-4, spec.grid).unwrap().field;
    let steady = spec.steady_policy().unwrap();
    let out = rollout(&spec, &steady, &init, 317.0).unwrap();
    println!("steady rollout: objective {:.4}, max_viol {:.3e}", out.objective, out.max_violation());
    for r in &out.reports {
        println!("  t={:2.0} margin={:+.4} resid={:+.5} V={:.4} active={}", r.t, r.chance_margin, r.stability_residual, r.lyapunov_value, r.stability_active);
    }
    let sol = solve_ocp(&spec, &init, 317.0, None, None).unwrap();
    println!("solve: status {:?}, evals {}, rounds {}", sol.status, sol.diagnostics.evaluations, sol.diagnostics.rounds_run);
    for r in &sol.reports {
        println!("  t={:2.0} margin={:+.4} resid={:+.5} active={}", r.t, r.chance_margin, r.stability_residual, r.stability_active);
    }
}
