//! Stability, moment curves and autocovariances for the linear drift.
//!
//! With intensity-independent marks, write `J = diag(E[Y_k])` for the
//! first mark moments and `M = A + B J` for the effective drift of the
//! mean. The first moment `y(t) = E[lambda(t)]` solves
//!
//! ```text
//!   y'(t) = M y(t) - A lambda0,      y(0) = lambda(0)
//! ```
//!
//! which integrates to `y(t) = e^{tM} y(0) - (∫_0^t e^{Ms} ds) A lambda0`;
//! the integral form stays valid when `M` is singular (pure Poisson,
//! critical excitation). The process is asymptotically stationary exactly
//! when `gamma_max`, the largest eigenvalue of `M + M^T`, is negative; the
//! stationary mean is then `m = M^{-1} A lambda0`.
//!
//! The second moment `V(t) = E[lambda lambda^T]` obeys
//!
//! ```text
//!   V'(t) = V M^T + M V + F(t)
//!   F(t)  = -y(t) (A lambda0)^T - (A lambda0) y(t)^T + B Xi2(y(t)) B^T
//! ```
//!
//! with `Xi2(y) = diag(y_k E[Y_k^2])`. The jump term must be `B Xi2 B^T`:
//! an event of component k kicks the intensity along column k of `B`, so
//! component k's event rate `y_k` feeds the covariance through
//! `(B e_k)(B e_k)^T E[Y_k^2]`, which sums to `B Xi2 B^T`. (The transposed
//! variant would, for a strictly upper-triangular `B`, assign zero
//! variance to a component that demonstrably jumps; a test below pins the
//! orientation and the Monte Carlo acceptance suite confirms it.)
//!
//! Autocovariances follow from the semigroup: `C(t, h) = e^{hM} C(t, 0)`
//! with `C(t, 0) = V(t) - y(t) y(t)^T`, and in the stationary regime
//! `C(h) = e^{hM} (V_inf - m m^T)` where `V_inf` solves the Lyapunov
//! equation `M V + V M^T + F_inf = 0`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{DriftKind, ModelSpec};
use crate::numerics::{
    exp_and_int, mat_exp, rk4_fixed, solve_linear, solve_lyapunov, sym_eigenvalues, Matrix, Vector,
};

// ======================================================================
// Stability
// ======================================================================

/// Stability diagnostics at a model spec.
#[derive(Debug, Clone, Serialize)]
pub struct StabilityReport {
    /// Effective mean drift `M = A + B J`.
    pub m: Matrix,
    /// Eigenvalues of `M + M^T`, ascending.
    pub gamma: Vector,
    /// Largest eigenvalue of `M + M^T`; negative means stable.
    pub gamma_max: f64,
    pub stable: bool,
    /// `M^{-1} A lambda0`, present only when stable.
    pub stationary_mean: Option<Vector>,
    /// First mark moments (the diagonal of `J`).
    pub mark_means: Vector,
}

/// `M = A + B J(lambda_ref)`, the drift matrix of the mean equation with
/// mark means evaluated at a reference intensity. For constant marks the
/// reference is irrelevant; for intensity-scaled marks this is the
/// fixed-reference surrogate used by the fitting penalty.
pub fn effective_drift_matrix(spec: &ModelSpec, lambda_ref: &Vector) -> Result<Matrix> {
    spec.ensure_structural()?;
    let mut bj = spec.b.clone();
    for k in 0..spec.dim {
        let j_k = spec.marks[k].moment(1, lambda_ref);
        if !j_k.is_finite() {
            return Err(Error::Domain(format!(
                "first mark moment of component {} is not finite",
                k + 1
            )));
        }
        for i in 0..spec.dim {
            bj.set(i, k, bj.get(i, k) * j_k);
        }
    }
    Ok(spec.a.add(&bj))
}

/// Builds the stability report: `M = A + B J`, the spectrum of `M + M^T`
/// and, when stable, the stationary mean.
///
/// Marks must be intensity-independent (otherwise no single `J` exists;
/// use [`effective_drift_matrix`] at a chosen reference instead). For the
/// exponential-regime drift the report describes the tail dynamics: the
/// regime term `D e^{-c ||lambda||^2}` vanishes at large intensity, so
/// `A + B J` is the matrix that decides whether excursions return.
pub fn stability_report(spec: &ModelSpec) -> Result<StabilityReport> {
    spec.ensure_valid()?;
    if !spec.has_constant_marks() {
        return Err(Error::Unsupported(
            "stability_report requires intensity-independent marks; evaluate \
             effective_drift_matrix at a reference intensity instead"
                .into(),
        ));
    }
    let m = effective_drift_matrix(spec, &spec.lambda0)?;
    let gamma = sym_eigenvalues(&m.add(&m.transpose()))?;
    let gamma_max = gamma.get(gamma.dim() - 1);
    let stable = gamma_max < 0.0;
    let stationary_mean = if stable {
        Some(solve_linear(&m, &spec.a.matvec(&spec.lambda0))?)
    } else {
        None
    };
    let mark_means = Vector::from(
        (0..spec.dim).map(|k| spec.marks[k].moment(1, &spec.lambda0)).collect::<Vec<f64>>(),
    );
    Ok(StabilityReport { m, gamma, gamma_max, stable, stationary_mean, mark_means })
}

fn require_linear_constant_marks(spec: &ModelSpec, what: &str) -> Result<()> {
    spec.ensure_valid()?;
    if !matches!(spec.drift, DriftKind::Linear) {
        return Err(Error::Unsupported(format!(
            "{what} has closed form only for the linear drift"
        )));
    }
    if !spec.has_constant_marks() {
        return Err(Error::Unsupported(format!(
            "{what} requires intensity-independent marks"
        )));
    }
    Ok(())
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Domain("time grid must be non-empty".into()));
    }
    let mut prev = 0.0;
    for (i, &t) in grid.iter().enumerate() {
        if !t.is_finite() || t < 0.0 {
            return Err(Error::Domain(format!("grid point {i} must be finite and >= 0")));
        }
        if i > 0 && t < prev {
            return Err(Error::Domain("time grid must be non-decreasing".into()));
        }
        prev = t;
    }
    Ok(())
}

fn initial_intensity(spec: &ModelSpec, lambda_init: Option<&Vector>) -> Result<Vector> {
    match lambda_init {
        Some(v) => {
            if v.dim() != spec.dim {
                return Err(Error::Dimension(format!(
                    "initial intensity has dimension {}, model has {}",
                    v.dim(),
                    spec.dim
                )));
            }
            if !v.all_finite() {
                return Err(Error::Domain("initial intensity must be finite".into()));
            }
            Ok(v.clone())
        }
        None => Ok(spec.lambda0.clone()),
    }
}

// ======================================================================
// First moment
// ======================================================================

/// Mean intensity `y(t) = E[lambda(t)]` on a grid, in closed form via the
/// (singular-safe) integral representation.
pub fn mean_curve(
    spec: &ModelSpec,
    lambda_init: Option<&Vector>,
    grid: &[f64],
) -> Result<Vec<Vector>> {
    require_linear_constant_marks(spec, "mean_curve")?;
    check_grid(grid)?;
    let y0 = initial_intensity(spec, lambda_init)?;
    let m = effective_drift_matrix(spec, &spec.lambda0)?;
    let a_l0 = spec.a.matvec(&spec.lambda0);
    grid.iter()
        .map(|&t| {
            let (e, phi) = exp_and_int(&m, t)?;
            Ok(e.matvec(&y0).sub(&phi.matvec(&a_l0)))
        })
        .collect()
}

// ======================================================================
// Second moment
// ======================================================================

/// Mean, second moment and covariance of the intensity along a grid.
#[derive(Debug, Clone, Serialize)]
pub struct MomentCurve {
    pub grid: Vec<f64>,
    pub mean: Vec<Vector>,
    /// `V(t) = E[lambda(t) lambda(t)^T]`.
    pub second_moment: Vec<Matrix>,
    /// `C(t, 0) = V(t) - y(t) y(t)^T`.
    pub covariance: Vec<Matrix>,
}

/// The forcing term `F(y)` of the second-moment ODE.
fn forcing(spec: &ModelSpec, a_l0: &Vector, second_mark: &[f64], y: &[f64]) -> Matrix {
    let d = spec.dim;
    let mut f = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            let mut acc = -y[i] * a_l0.get(j) - a_l0.get(i) * y[j];
            // B Xi2(y) B^T with Xi2 = diag(y_k E[Y_k^2]).
            for k in 0..d {
                acc += spec.b.get(i, k) * y[k] * second_mark[k] * spec.b.get(j, k);
            }
            f.set(i, j, acc);
        }
    }
    f
}

/// Jointly integrates the first- and second-moment ODEs on a grid.
/// Requires a stable spec: without `gamma_max < 0` the second moment grows
/// without bound and the curve is refused up front.
pub fn moment_curve(
    spec: &ModelSpec,
    lambda_init: Option<&Vector>,
    grid: &[f64],
    steps_per_unit: usize,
) -> Result<MomentCurve> {
    require_linear_constant_marks(spec, "moment_curve")?;
    check_grid(grid)?;
    if steps_per_unit == 0 {
        return Err(Error::Domain("steps_per_unit must be >= 1".into()));
    }
    let report = stability_report(spec)?;
    if !report.stable {
        return Err(Error::Unstable(format!(
            "moment_curve requires a stable spec, got gamma_max = {:.6e}",
            report.gamma_max
        )));
    }
    let d = spec.dim;
    let y0 = initial_intensity(spec, lambda_init)?;
    let m = report.m.clone();
    let a_l0 = spec.a.matvec(&spec.lambda0);
    let second_mark: Vec<f64> =
        (0..d).map(|k| spec.marks[k].moment(2, &spec.lambda0)).collect();

    // Flattened state: [y(0..d), V row-major].
    let mut state = vec![0.0; d + d * d];
    state[..d].copy_from_slice(y0.as_slice());
    for i in 0..d {
        for j in 0..d {
            state[d + i * d + j] = y0.get(i) * y0.get(j);
        }
    }
    let f = |_t: f64, s: &[f64], ds: &mut [f64]| {
        let y = &s[..d];
        // y' = M y - A lambda0
        for i in 0..d {
            let mut acc = -a_l0.get(i);
            for j in 0..d {
                acc += m.get(i, j) * y[j];
            }
            ds[i] = acc;
        }
        // V' = V M^T + M V + F(y)
        let fmat = forcing(spec, &a_l0, &second_mark, y);
        for i in 0..d {
            for j in 0..d {
                let mut acc = fmat.get(i, j);
                for l in 0..d {
                    acc += m.get(i, l) * s[d + l * d + j] + s[d + i * d + l] * m.get(j, l);
                }
                ds[d + i * d + j] = acc;
            }
        }
    };

    let mut out = MomentCurve {
        grid: grid.to_vec(),
        mean: Vec::with_capacity(grid.len()),
        second_moment: Vec::with_capacity(grid.len()),
        covariance: Vec::with_capacity(grid.len()),
    };
    let mut t_now = 0.0;
    for &t in grid {
        if t > t_now {
            let steps = (((t - t_now) * steps_per_unit as f64).ceil() as usize).max(1);
            state = rk4_fixed(&f, &state, t_now, t, steps)?;
            t_now = t;
        }
        let y = Vector::from_slice(&state[..d]);
        let mut v = Matrix::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                v.set(i, j, state[d + i * d + j]);
            }
        }
        let mut c = v.clone();
        for i in 0..d {
            for j in 0..d {
                c.set(i, j, c.get(i, j) - y.get(i) * y.get(j));
            }
        }
        out.mean.push(y);
        out.second_moment.push(v);
        out.covariance.push(c);
    }
    Ok(out)
}

/// Second-moment matrices `V(t)` on a grid (see [`moment_curve`]).
pub fn second_moment_curve(
    spec: &ModelSpec,
    lambda_init: Option<&Vector>,
    grid: &[f64],
    steps_per_unit: usize,
) -> Result<Vec<Matrix>> {
    Ok(moment_curve(spec, lambda_init, grid, steps_per_unit)?.second_moment)
}

// ======================================================================
// Autocovariance
// ======================================================================

/// Transient autocovariance `C(t, h) = Cov(lambda(t+h), lambda(t))`,
/// computed as `e^{hM} C(t, 0)`.
pub fn autocovariance(
    spec: &ModelSpec,
    lambda_init: Option<&Vector>,
    t: f64,
    h: f64,
    steps_per_unit: usize,
) -> Result<Matrix> {
    if !t.is_finite() || t < 0.0 || !h.is_finite() || h < 0.0 {
        return Err(Error::Domain(format!(
            "autocovariance requires finite t >= 0 and h >= 0, got t={t}, h={h}"
        )));
    }
    let curve = moment_curve(spec, lambda_init, &[t], steps_per_unit)?;
    let m = effective_drift_matrix(spec, &spec.lambda0)?;
    Ok(mat_exp(&m, h)?.matmul(&curve.covariance[0]))
}

/// Stationary second moment `V_inf` from the Lyapunov equation
/// `M V + V M^T + F_inf = 0`.
pub fn stationary_second_moment(spec: &ModelSpec) -> Result<Matrix> {
    require_linear_constant_marks(spec, "stationary_second_moment")?;
    let report = stability_report(spec)?;
    let mean = report.stationary_mean.as_ref().ok_or_else(|| {
        Error::Unstable(format!(
            "stationary moments require gamma_max < 0, got {:.6e}",
            report.gamma_max
        ))
    })?;
    let a_l0 = spec.a.matvec(&spec.lambda0);
    let second_mark: Vec<f64> =
        (0..spec.dim).map(|k| spec.marks[k].moment(2, &spec.lambda0)).collect();
    let f_inf = forcing(spec, &a_l0, &second_mark, mean.as_slice());
    solve_lyapunov(&report.m, &f_inf)
}

/// Stationary autocovariance `C(h) = e^{hM} (V_inf - m m^T)`.
pub fn autocovariance_stationary(spec: &ModelSpec, h: f64) -> Result<Matrix> {
    if !h.is_finite() || h < 0.0 {
        return Err(Error::Domain(format!(
            "autocovariance_stationary requires finite h >= 0, got {h}"
        )));
    }
    let report = stability_report(spec)?;
    let mean = report.stationary_mean.as_ref().ok_or_else(|| {
        Error::Unstable(format!(
            "stationary autocovariance requires gamma_max < 0, got {:.6e}",
            report.gamma_max
        ))
    })?;
    let v_inf = stationary_second_moment(spec)?;
    let d = spec.dim;
    let mut c0 = v_inf;
    for i in 0..d {
        for j in 0..d {
            c0.set(i, j, c0.get(i, j) - mean.get(i) * mean.get(j));
        }
    }
    Ok(mat_exp(&report.m, h)?.matmul(&c0))
}

// ======================================================================
// Tests
// ======================================================================
