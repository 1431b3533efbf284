//! CSV and JSON emission for the command-line harness.
//!
//! All files are UTF-8, CSVs carry a header row, and floats are written
//! with the shortest round-trip representation.

use crate::error::Result;
use crate::fp::{DensityField, FpDiagnostics};
use crate::mpc::{ClosedLoopRun, EnsembleRecord, StepLog};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

/// `cell_center,mass,density` rows for one density snapshot.
pub fn write_density_csv(path: &Path, field: &DensityField) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "cell_center,mass,density")?;
    let dx = field.grid().dx();
    for (i, m) in field.masses().iter().enumerate() {
        writeln!(w, "{},{},{}", field.grid().center(i), m, m / dx)?;
    }
    Ok(())
}

/// Histogram snapshot with the reference density overlaid.
pub fn write_histogram_csv(path: &Path, field: &DensityField, reference: &DensityField) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "cell_center,mass,density,reference_mass,reference_density")?;
    let dx = field.grid().dx();
    for (i, (m, r)) in field.masses().iter().zip(reference.masses()).enumerate() {
        writeln!(w, "{},{},{},{},{}", field.grid().center(i), m, m / dx, r, r / dx)?;
    }
    Ok(())
}

/// Propagation diagnostics plus any extra scalar observations.
pub fn write_fp_diagnostics(
    path: &Path,
    diagnostics: &FpDiagnostics,
    extras: &[(&str, f64)],
) -> Result<()> {
    let mut value = serde_json::json!({
        "steps": diagnostics.steps,
        "clipped_mass": diagnostics.clipped_mass,
        "max_mass_error": diagnostics.max_mass_error,
        "min_dt": diagnostics.min_dt,
    });
    for (k, v) in extras {
        value[*k] = serde_json::json!(v);
    }
    write_json(path, &value)
}

/// Single-realization closed-loop trajectory.
pub fn write_path_csv(path: &Path, run: &ClosedLoopRun, threshold: f64) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "time,c_a,temperature,c_a0,q,violation")?;
    let p = &run.path;
    for i in 0..p.len() {
        let x = p.state(i);
        let u = if i + 1 < p.len() { p.input(i) } else { p.input(i.saturating_sub(1)) };
        writeln!(
            w,
            "{},{},{},{},{},{}",
            p.times()[i],
            x[0],
            x[1],
            u[0],
            u[1],
            u8::from(x[0] <= threshold)
        )?;
    }
    Ok(())
}

/// Full ensemble trajectories, one row per realization and sample.
pub fn write_ensemble_csv(path: &Path, record: &EnsembleRecord, threshold: f64) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "time,realization,c_a,temperature,c_a0,q,violation")?;
    for (id, run) in record.runs.iter().enumerate() {
        let p = &run.path;
        for i in 0..p.len() {
            let x = p.state(i);
            let u = if i + 1 < p.len() { p.input(i) } else { p.input(i.saturating_sub(1)) };
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                p.times()[i],
                id,
                x[0],
                x[1],
                u[0],
                u[1],
                u8::from(x[0] <= threshold)
            )?;
        }
    }
    Ok(())
}

/// Violation-fraction time series with the cap column.
pub fn write_violation_csv(path: &Path, series: &[(f64, f64)], cap: f64) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "time,violation_fraction,limit")?;
    for (t, frac) in series {
        writeln!(w, "{t},{frac},{cap}")?;
    }
    Ok(())
}

/// Per-update solver log of one realization.
pub fn write_solver_log(path: &Path, steps: &[StepLog]) -> Result<()> {
    let entries: Vec<serde_json::Value> = steps
        .iter()
        .map(|s| {
            serde_json::json!({
                "t": s.t,
                "status": s.status,
                "alarm": s.alarm,
                "applied": s.applied,
                "objective": s.objective,
                "evaluations": s.evaluations,
            })
        })
        .collect();
    write_json(path, &serde_json::json!({ "updates": entries }))
}

/// Ensemble summary: violation series, terminal moments, density-shaping
/// progress, and solver counters.
pub fn write_summary(path: &Path, record: &EnsembleRecord, cap: f64) -> Result<()> {
    let value = serde_json::json!({
        "realizations": record.runs.len(),
        "failed_realizations": record.failures.iter().map(|(id, e)| {
            serde_json::json!({ "realization": id, "error": e })
        }).collect::<Vec<_>>(),
        "violation_cap": cap,
        "violation_series": record.violation_series.iter().map(|(t, f)| {
            serde_json::json!({ "t": t, "fraction": f })
        }).collect::<Vec<_>>(),
        "terminal_mean": record.terminal_mean,
        "terminal_variance": record.terminal_variance,
        "mean_v_initial": record.mean_v_initial,
        "mean_v_terminal": record.mean_v_terminal,
        "hellinger_initial": record.hellinger_initial,
        "hellinger_terminal": record.hellinger_terminal,
        "solver": record.solver,
    });
    write_json(path, &value)
}

pub fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)
        .map_err(|e| crate::error::Error::Config(format!("{}: {e}", path.display())))?;
    writeln!(w)?;
    Ok(())
}

/// File name for a snapshot at time `t`, e.g. `density_t12.00.csv`.
pub fn snapshot_name(prefix: &str, t: f64) -> String {
    format!("{prefix}_t{t:.2}.csv")
}
