//! Stability classification and closed-form moments.
//!
//! The effective mean drift `M = A + B J` (with `J` the mean-mark
//! diagonal) governs the long-run behaviour: the process has stationary
//! moments exactly when the symmetrized spectrum of `M` is negative. The
//! example sweeps the excitation strength through the stability boundary,
//! then shows the first- and second-moment ODEs of a stable model
//! relaxing onto their closed-form limits and the stationary
//! autocovariance decaying along the drift semigroup.
//!
//! Usage: `cargo run --example stability_and_moments`

use exciter::moments::{autocovariance_stationary, stationary_second_moment};
use exciter::{
    moment_curve, stability_report, MarkModel, Matrix, ModelSpec, Vector,
};

fn spec_with_excitation(scale: f64) -> exciter::Result<ModelSpec> {
    Ok(ModelSpec::linear(
        Vector::from_slice(&[1.0, 0.8]),
        Matrix::from_rows(&[vec![-1.0, 0.0], vec![0.0, -0.8]])?,
        Matrix::from_rows(&[vec![0.3 * scale, 0.0], vec![0.2 * scale, 0.25 * scale]])?,
        vec![MarkModel::ConstantExponential { rate: 1.0 }; 2],
    ))
}

fn main() -> exciter::Result<()> {
    // Sweep the excitation matrix through the stability boundary.
    println!("{:<12} {:>10} {:>8} {:>24}", "excitation", "gamma_max", "stable", "stationary mean");
    for scale in [0.5, 1.0, 2.0, 2.8, 3.4] {
        let report = stability_report(&spec_with_excitation(scale)?)?;
        let mean = report
            .stationary_mean
            .as_ref()
            .map(|m| format!("[{:.4}, {:.4}]", m.get(0), m.get(1)))
            .unwrap_or_else(|| "-- (supercritical)".into());
        println!("{:<12.2} {:>10.4} {:>8} {:>24}", scale, report.gamma_max, report.stable, mean);
    }

    // Transient moments of the stable reference model, against the
    // stationary limits.
    let spec = spec_with_excitation(1.0)?;
    let report = stability_report(&spec)?;
    let stationary_mean = report.stationary_mean.clone().unwrap();
    let v_inf = stationary_second_moment(&spec)?;
    let grid = [0.0, 1.0, 2.0, 5.0, 10.0, 40.0];
    let curve = moment_curve(&spec, None, &grid, 160)?;

    println!("\nrelaxation of the moment ODEs (component 1):");
    println!("{:<8} {:>12} {:>12}", "t", "mean", "second mom.");
    for (i, t) in grid.iter().enumerate() {
        println!(
            "{:<8} {:>12.6} {:>12.6}",
            t,
            curve.mean[i].get(0),
            curve.second_moment[i].get(0, 0)
        );
    }
    println!(
        "{:<8} {:>12.6} {:>12.6}   (closed form)",
        "limit",
        stationary_mean.get(0),
        v_inf.get(0, 0)
    );
    let gap = (curve.second_moment[5].get(0, 0) - v_inf.get(0, 0)).abs();
    println!("|ODE(40) - Lyapunov| = {gap:.2e}");

    // Stationary autocovariance: C(h) = e^{hM} C(0) decays along the
    // drift semigroup.
    println!("\nstationary autocovariance C(h):");
    println!("{:<6} {:>12} {:>12} {:>12}", "h", "c11", "c12", "c22");
    for h in [0.0, 0.5, 1.0, 2.0, 4.0] {
        let c = autocovariance_stationary(&spec, h)?;
        println!(
            "{:<6} {:>12.6} {:>12.6} {:>12.6}",
            h,
            c.get(0, 0),
            c.get(0, 1),
            c.get(1, 1)
        );
    }
    Ok(())
}
