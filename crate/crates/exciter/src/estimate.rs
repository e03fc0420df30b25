//! Maximum-likelihood fitting.
//!
//! Fitting maximizes the event-history log-likelihood over the free
//! parameters of a model variant (see [`crate::model::VariantMask`]) by
//! Nelder–Mead search on a penalized objective
//!
//! ```text
//!   obj(theta) = -loglik(theta)
//!              + kappa * [ max(0, gamma_max)^2
//!                        + sum_k max(0, -lambda0_k)^2
//!                        + sum_jk max(0, -b_jk)^2
//!                        + max(0, c_floor - c)^2 ]      (nonlinear only)
//! ```
//!
//! where `gamma_max` is the largest eigenvalue of `M + M^T` with
//! `M = A + B J` evaluated at the candidate's baseline (the stability
//! surrogate). The soft penalty keeps the search evaluable everywhere:
//! the likelihood itself is defined for sign-violating candidates, and a
//! hard wall would starve the simplex of gradient information near the
//! admissible boundary.
//!
//! The search is deterministic: the first start is a data-driven
//! heuristic, optional warm starts embed a nested variant's optimum, and
//! the remaining restarts jitter the heuristic with a seeded generator.
//! Standard errors come from the observed information (central
//! finite-difference Hessian of the negative log-likelihood at the
//! optimum).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::likelihood::{log_likelihood, LikelihoodOptions};
use crate::model::{
    sample_standard_normal, DriftKind, MarkModel, MarkedPath, ModelSpec, ParamMap, ParamSlot,
    VariantId, VariantMask,
};
use crate::moments::effective_drift_matrix;
use crate::numerics::{inverse, sym_eigenvalues, Matrix, Vector};

/// Objective value used when a candidate cannot be evaluated at all
/// (non-finite parameters, integrator blow-up). Scaled by the parameter
/// norm so the plateau still slopes back toward the origin.
const BIG: f64 = 1e12;
/// Lower floor for the regime decay rate `c` in nonlinear variants.
const C_FLOOR: f64 = 1e-6;
/// Trailing negatives within this margin of zero are snapped to the
/// admissible boundary after the search.
const CLAMP_MARGIN: f64 = 1e-6;

// ======================================================================
// Options and results
// ======================================================================

#[derive(Debug, Clone)]
pub struct FitOptions {
    /// Seed for the jittered restarts.
    pub seed: u64,
    /// Number of Nelder–Mead starts: one heuristic plus `restarts - 1`
    /// jittered copies. A warm start, when supplied, runs in addition.
    pub restarts: usize,
    /// Iteration cap per Nelder–Mead run; `0` picks `500 + 200 * n_free`.
    pub max_iters: usize,
    /// Relative function-spread tolerance for simplex convergence.
    pub tol: f64,
    /// Penalty weight `kappa`.
    pub kappa: f64,
    pub likelihood: LikelihoodOptions,
    /// Compute finite-difference standard errors at the optimum.
    pub compute_stderr: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            seed: 7,
            restarts: 4,
            max_iters: 0,
            tol: 1e-8,
            kappa: 1e6,
            likelihood: LikelihoodOptions::default(),
            compute_stderr: true,
        }
    }
}

impl FitOptions {
    fn validate(&self) -> Result<()> {
        if self.restarts == 0 {
            return Err(Error::Domain("restarts must be >= 1".into()));
        }
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return Err(Error::Domain("tol must be finite and > 0".into()));
        }
        if !(self.kappa.is_finite() && self.kappa >= 0.0) {
            return Err(Error::Domain("kappa must be finite and >= 0".into()));
        }
        Ok(())
    }

    fn iters_for(&self, n_free: usize) -> usize {
        if self.max_iters > 0 {
            self.max_iters
        } else {
            500 + 200 * n_free
        }
    }
}

/// Outcome of a variant fit.
#[derive(Debug, Clone, Serialize)]
pub struct FitResult {
    pub variant: VariantId,
    /// Fitted free parameters in canonical order.
    pub params: Vec<f64>,
    pub param_names: Vec<String>,
    /// Standard errors per free parameter, when computable.
    pub stderr: Option<Vec<f64>>,
    /// Set when standard errors are missing or unreliable.
    pub stderr_note: Option<String>,
    /// The fitted model.
    pub spec: ModelSpec,
    pub loglik: f64,
    /// Residual penalty at the optimum (zero for an interior optimum).
    pub penalty: f64,
    /// Largest eigenvalue of `M + M^T` at the optimum.
    pub gamma_max: f64,
    pub stable: bool,
    /// Simplex tolerance reached, penalty negligible, and stable.
    pub converged: bool,
    pub nm_iterations: usize,
    pub nm_evals: usize,
    /// Index of the winning start (0 = heuristic, then jitters; a warm
    /// start, when present, comes last).
    pub best_restart: usize,
    /// Events whose pre-event intensity hit the likelihood clamp.
    pub clamped_events: usize,
}

// ======================================================================
// Nelder–Mead
// ======================================================================

#[derive(Debug, Clone)]
pub(crate) struct NmOutcome {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub evals: usize,
    pub converged: bool,
}

/// Standard Nelder–Mead with reflection 1, expansion 2, contraction 0.5
/// and shrink 0.5. `steps` sets the initial simplex edge per coordinate.
pub(crate) fn nelder_mead(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x0: &[f64],
    steps: &[f64],
    max_iters: usize,
    tol: f64,
) -> NmOutcome {
    let n = x0.len();
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| -> f64 {
        *evals += 1;
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };

    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    simplex.push(x0.to_vec());
    for i in 0..n {
        let mut p = x0.to_vec();
        p[i] += steps[i];
        simplex.push(p);
    }
    let mut fv: Vec<f64> = simplex.iter().map(|p| eval(p, &mut evals)).collect();

    let mut iterations = 0usize;
    let mut converged = false;
    while iterations < max_iters {
        iterations += 1;
        // Order best..worst.
        let mut idx: Vec<usize> = (0..=n).collect();
        idx.sort_by(|&a, &b| fv[a].partial_cmp(&fv[b]).unwrap());
        let reorder: Vec<Vec<f64>> = idx.iter().map(|&i| simplex[i].clone()).collect();
        let refv: Vec<f64> = idx.iter().map(|&i| fv[i]).collect();
        simplex = reorder;
        fv = refv;

        if (fv[n] - fv[0]).abs() <= tol * (1.0 + fv[0].abs()) {
            converged = true;
            break;
        }

        // Centroid of all but the worst.
        let mut centroid = vec![0.0; n];
        for p in simplex.iter().take(n) {
            for (c, &v) in centroid.iter_mut().zip(p) {
                *c += v;
            }
        }
        for c in centroid.iter_mut() {
            *c /= n as f64;
        }

        let worst = simplex[n].clone();
        let lerp = |a: &[f64], b: &[f64], t: f64| -> Vec<f64> {
            a.iter().zip(b).map(|(&x, &y)| x + t * (y - x)).collect()
        };

        let xr = lerp(&centroid, &worst, -1.0); // reflection
        let fr = eval(&xr, &mut evals);
        if fr < fv[0] {
            let xe = lerp(&centroid, &worst, -2.0); // expansion
            let fe = eval(&xe, &mut evals);
            if fe < fr {
                simplex[n] = xe;
                fv[n] = fe;
            } else {
                simplex[n] = xr;
                fv[n] = fr;
            }
        } else if fr < fv[n - 1] {
            simplex[n] = xr;
            fv[n] = fr;
        } else if fr < fv[n] {
            let xc = lerp(&centroid, &xr, 0.5); // outside contraction
            let fc = eval(&xc, &mut evals);
            if fc <= fr {
                simplex[n] = xc;
                fv[n] = fc;
            } else {
                shrink(&mut simplex, &mut fv, &mut eval, &mut evals);
            }
        } else {
            let xc = lerp(&centroid, &worst, 0.5); // inside contraction
            let fc = eval(&xc, &mut evals);
            if fc < fv[n] {
                simplex[n] = xc;
                fv[n] = fc;
            } else {
                shrink(&mut simplex, &mut fv, &mut eval, &mut evals);
            }
        }
    }

    let best = fv
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap();
    NmOutcome { x: simplex[best].clone(), f: fv[best], iterations, evals, converged }
}

fn shrink(
    simplex: &mut [Vec<f64>],
    fv: &mut [f64],
    eval: &mut impl FnMut(&[f64], &mut usize) -> f64,
    evals: &mut usize,
) {
    let best = simplex[0].clone();
    for i in 1..simplex.len() {
        for (x, &b) in simplex[i].iter_mut().zip(&best) {
            *x = b + 0.5 * (*x - b);
        }
        fv[i] = eval(&simplex[i], evals);
    }
}

// ======================================================================
// Objective
// ======================================================================

fn theta_norm2(theta: &[f64]) -> f64 {
    theta.iter().map(|x| x * x).sum()
}

/// Stability surrogate: largest eigenvalue of `M + M^T` with
/// `M = A + B J(lambda0)`. Returns `+inf` when the matrix cannot be
/// formed, which routes the candidate onto the penalty plateau.
fn surrogate_gamma_max(spec: &ModelSpec) -> f64 {
    let m = match effective_drift_matrix(spec, &spec.lambda0) {
        Ok(m) => m,
        Err(_) => return f64::INFINITY,
    };
    match sym_eigenvalues(&m.add(&m.transpose())) {
        Ok(g) => g.get(g.dim() - 1),
        Err(_) => f64::INFINITY,
    }
}

/// Penalty (already scaled by `kappa`) and the surrogate `gamma_max`.
fn penalty_terms(spec: &ModelSpec, kappa: f64) -> (f64, f64) {
    let gamma_max = surrogate_gamma_max(spec);
    if !gamma_max.is_finite() {
        return (BIG, gamma_max);
    }
    let mut p = gamma_max.max(0.0).powi(2);
    for k in 0..spec.dim {
        p += (-spec.lambda0.get(k)).max(0.0).powi(2);
    }
    for i in 0..spec.dim {
        for j in 0..spec.dim {
            p += (-spec.b.get(i, j)).max(0.0).powi(2);
        }
    }
    if let DriftKind::ExpRegime { c, .. } = &spec.drift {
        p += (C_FLOOR - c).max(0.0).powi(2);
    }
    (kappa * p, gamma_max)
}

/// Negative log-likelihood, penalty and surrogate gamma at `theta`.
/// Unevaluable candidates yield a sloped plateau instead of an error.
pub(crate) fn objective_parts(
    theta: &[f64],
    map: &ParamMap,
    template: &ModelSpec,
    path: &MarkedPath,
    kappa: f64,
    lopts: &LikelihoodOptions,
) -> (f64, f64, f64) {
    let spec = match map.unpack(theta, template) {
        Ok(s) => s,
        Err(_) => return (BIG * (1.0 + theta_norm2(theta)), 0.0, f64::INFINITY),
    };
    let (penalty, gamma_max) = penalty_terms(&spec, kappa);
    let neg_ll = match log_likelihood(&spec, path, None, lopts) {
        Ok(report) => -report.loglik,
        Err(_) => BIG * (1.0 + theta_norm2(theta)),
    };
    (neg_ll, penalty, gamma_max)
}

// ======================================================================
// Starts
// ======================================================================

/// Data-driven initial point: baselines from raw counts, mild decay, and
/// excitation scaled to the observed mark means so that the start is
/// stable regardless of the mark magnitude.
fn heuristic_start(map: &ParamMap, counts: &[usize], horizon: f64, marks: &[MarkModel]) -> Vec<f64> {
    let dim = map.dim;
    let lambda0_heur: Vec<f64> =
        (0..dim).map(|k| (counts[k] as f64 + 0.5) / (2.0 * horizon)).collect();
    let lref = Vector::from_slice(&lambda0_heur);
    let mark_mean: Vec<f64> =
        (0..dim).map(|k| marks[k].moment(1, &lref).max(1e-6)).collect();
    map.slots
        .iter()
        .map(|slot| match *slot {
            ParamSlot::Lambda0(k) => lambda0_heur[k],
            ParamSlot::A(i, j) if i == j => -0.5,
            ParamSlot::A(_, _) => 0.0,
            ParamSlot::B(i, j) if i == j => (0.25 / mark_mean[j]).clamp(1e-3, 50.0),
            ParamSlot::B(_, j) => (0.05 / mark_mean[j]).clamp(1e-3, 10.0),
            ParamSlot::RegimeC => 0.1,
            ParamSlot::RegimeD(_) => -0.1,
        })
        .collect()
}

/// Slot-aware jitter around a base point: multiplicative for scale
/// parameters (preserving sign), additive for the sign-free ones.
fn jittered(map: &ParamMap, base: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    map.slots
        .iter()
        .zip(base)
        .map(|(slot, &x)| {
            let z = sample_standard_normal(rng);
            match *slot {
                ParamSlot::Lambda0(_) | ParamSlot::B(_, _) => x.max(1e-4) * (0.5 * z).exp(),
                ParamSlot::RegimeC => x.max(1e-4) * (0.5 * z).exp(),
                ParamSlot::A(i, j) if i == j => -x.abs().max(1e-3) * (0.4 * z).exp(),
                ParamSlot::A(_, _) | ParamSlot::RegimeD(_) => x + 0.3 * (1.0 + x.abs()) * z,
            }
        })
        .collect()
}

/// Default value for a slot absent from a nested variant's optimum.
fn warm_default(slot: &ParamSlot) -> f64 {
    match slot {
        ParamSlot::A(_, _) | ParamSlot::B(_, _) | ParamSlot::Lambda0(_) => 0.0,
        ParamSlot::RegimeC => 0.1,
        ParamSlot::RegimeD(_) => -0.1,
    }
}

/// Embeds a fitted nested variant into `target`'s parameter vector:
/// shared names copy over, new slots take neutral defaults (zero
/// coupling), so the warm start reproduces the nested optimum exactly.
pub fn embed_warm_start(from: &FitResult, target: &VariantMask) -> Vec<f64> {
    let map = target.param_map();
    let names = map.names();
    names
        .iter()
        .zip(&map.slots)
        .map(|(name, slot)| {
            match from.param_names.iter().position(|n| n == name) {
                Some(i) => from.params[i],
                None => warm_default(slot),
            }
        })
        .collect()
}

// ======================================================================
// Standard errors
// ======================================================================

/// Central finite-difference Hessian with per-coordinate relative steps.
pub(crate) fn fd_hessian(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    rel_step: f64,
) -> Matrix {
    let n = x.len();
    let h: Vec<f64> = x.iter().map(|&xi| rel_step * (1.0 + xi.abs())).collect();
    let f0 = f(x);
    let mut hess = Matrix::zeros(n, n);
    let mut at = |shifts: &[(usize, f64)]| -> f64 {
        let mut p = x.to_vec();
        for &(i, s) in shifts {
            p[i] += s;
        }
        f(&p)
    };
    for i in 0..n {
        let fp = at(&[(i, h[i])]);
        let fm = at(&[(i, -h[i])]);
        hess.set(i, i, (fp - 2.0 * f0 + fm) / (h[i] * h[i]));
        for j in (i + 1)..n {
            let fpp = at(&[(i, h[i]), (j, h[j])]);
            let fpm = at(&[(i, h[i]), (j, -h[j])]);
            let fmp = at(&[(i, -h[i]), (j, h[j])]);
            let fmm = at(&[(i, -h[i]), (j, -h[j])]);
            let v = (fpp - fpm - fmp + fmm) / (4.0 * h[i] * h[j]);
            hess.set(i, j, v);
            hess.set(j, i, v);
        }
    }
    hess
}

/// Standard errors from the observed information at `theta`, with a note
/// when the information matrix is not positive definite.
fn stderr_from_information(
    theta: &[f64],
    map: &ParamMap,
    template: &ModelSpec,
    path: &MarkedPath,
    lopts: &LikelihoodOptions,
) -> (Option<Vec<f64>>, Option<String>) {
    let mut neg_ll = |t: &[f64]| -> f64 {
        match map.unpack(t, template) {
            Ok(spec) => match log_likelihood(&spec, path, None, lopts) {
                Ok(r) => -r.loglik,
                Err(_) => f64::NAN,
            },
            Err(_) => f64::NAN,
        }
    };
    let info = fd_hessian(&mut neg_ll, theta, 1e-4);
    if !info.all_finite() {
        return (
            None,
            Some("observed information could not be evaluated near the optimum".into()),
        );
    }
    let cov = match inverse(&info) {
        Ok(c) => c,
        Err(_) => {
            return (
                None,
                Some("observed information is singular; no standard errors".into()),
            )
        }
    };
    let mut note = None;
    let mut out = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let v = cov.get(i, i);
        if v <= 0.0 {
            note = Some(
                "observed information is not positive definite; standard errors use |diag| \
                 and are unreliable"
                    .to_string(),
            );
        }
        out.push(v.abs().sqrt());
    }
    (Some(out), note)
}

// ======================================================================
// Fitting
// ======================================================================

fn template_for(mask: &VariantMask, marks: &[MarkModel]) -> Result<ModelSpec> {
    if marks.len() != 2 {
        return Err(Error::Dimension(format!(
            "variant fitting is bivariate; got {} mark models",
            marks.len()
        )));
    }
    let drift = if mask.nonlinear {
        DriftKind::ExpRegime { d: Matrix::zeros(2, 2), c: 1.0 }
    } else {
        DriftKind::Linear
    };
    let template = ModelSpec {
        dim: 2,
        lambda0: Vector::zeros(2),
        a: Matrix::zeros(2, 2),
        b: Matrix::zeros(2, 2),
        drift,
        marks: marks.to_vec(),
    };
    template.ensure_structural()?;
    Ok(template)
}

/// Snaps barely-negative baseline and excitation entries (within
/// [`CLAMP_MARGIN`] of zero) onto the admissible boundary.
fn clamp_boundary(map: &ParamMap, theta: &mut [f64]) {
    for (slot, x) in map.slots.iter().zip(theta.iter_mut()) {
        if matches!(slot, ParamSlot::Lambda0(_) | ParamSlot::B(_, _))
            && *x < 0.0
            && *x > -CLAMP_MARGIN
        {
            *x = 0.0;
        }
    }
}

/// Fits one variant to an event path by penalized multistart Nelder–Mead.
///
/// `warm` is an optional extra start, packed in the variant's canonical
/// parameter order (see [`embed_warm_start`]). Mark models affect the fit
/// only through the stability surrogate and the reported diagnostics; the
/// likelihood itself conditions on the observed marks.
pub fn fit(
    path: &MarkedPath,
    mask: &VariantMask,
    marks: &[MarkModel],
    warm: Option<&[f64]>,
    opts: &FitOptions,
) -> Result<FitResult> {
    opts.validate()?;
    path.validate()?;
    if path.horizon <= 0.0 {
        return Err(Error::InsufficientData(
            "fitting requires a positive observation horizon".into(),
        ));
    }
    if path.is_empty() {
        return Err(Error::InsufficientData("fitting requires at least one event".into()));
    }
    let template = template_for(mask, marks)?;
    let counts = path.counts(template.dim)?;
    let map = mask.param_map();
    let n_free = map.len();
    if let Some(w) = warm {
        if w.len() != n_free {
            return Err(Error::Dimension(format!(
                "warm start has {} entries, variant {} has {} free parameters",
                w.len(),
                mask.variant,
                n_free
            )));
        }
    }

    let x_heur = heuristic_start(&map, &counts, path.horizon, marks);
    let mut starts: Vec<Vec<f64>> = vec![x_heur.clone()];
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(0x4553_5431);
    for _ in 1..opts.restarts {
        starts.push(jittered(&map, &x_heur, &mut rng));
    }
    if let Some(w) = warm {
        starts.push(w.to_vec());
    }

    // Exploration evaluates the nonlinear likelihood at a fixed RK4
    // density; step-doubling refinement is reserved for the final report
    // and the curvature estimate, where one evaluation buys a digit
    // instead of costing thousands.
    let explore_lopts = LikelihoodOptions { max_refinements: 0, ..opts.likelihood.clone() };
    let mut objective = |theta: &[f64]| -> f64 {
        let (neg_ll, penalty, _) =
            objective_parts(theta, &map, &template, path, opts.kappa, &explore_lopts);
        neg_ll + penalty
    };

    let max_iters = opts.iters_for(n_free);
    let mut best: Option<NmOutcome> = None;
    let mut best_restart = 0usize;
    let mut total_iters = 0usize;
    let mut total_evals = 0usize;
    for (i, start) in starts.iter().enumerate() {
        let steps: Vec<f64> = start.iter().map(|x| 0.25 * (0.1 + x.abs())).collect();
        let run = nelder_mead(&mut objective, start, &steps, max_iters, opts.tol);
        total_iters += run.iterations;
        total_evals += run.evals;
        if best.as_ref().map_or(true, |b| run.f < b.f) {
            best_restart = i;
            best = Some(run);
        }
    }
    let mut best = best.expect("at least one start");

    // Polish: a fresh, tighter simplex around the incumbent often buys
    // another digit after the simplex has collapsed anisotropically.
    let polish_steps: Vec<f64> = best.x.iter().map(|x| 0.02 * (0.1 + x.abs())).collect();
    let polish = nelder_mead(&mut objective, &best.x, &polish_steps, max_iters, opts.tol);
    total_iters += polish.iterations;
    total_evals += polish.evals;
    let nm_converged = polish.converged || best.converged;
    if polish.f < best.f {
        best.x = polish.x;
        best.f = polish.f;
    }

    // Active-set polish: when a sign constraint binds, the penalized
    // optimum sits slightly outside the admissible set (offset roughly
    // |gradient| / 2 kappa), which would surface as a spurious penalty
    // residual. Freeze the binding coordinates on their boundary and
    // rerun the simplex over the rest; that lands on the constrained
    // optimum. Iterated in case the rerun drives a new coordinate onto
    // its boundary.
    let bound_for = |slot: &ParamSlot| match slot {
        ParamSlot::RegimeC => C_FLOOR,
        _ => 0.0,
    };
    let is_binding = |slot: &ParamSlot, x: f64| match slot {
        ParamSlot::Lambda0(_) | ParamSlot::B(_, _) => x < 0.0,
        ParamSlot::RegimeC => x < C_FLOOR,
        _ => false,
    };
    let mut nm_converged = nm_converged;
    let unpolished = (best.x.clone(), nm_converged);
    for _ in 0..3 {
        let binding: Vec<usize> = map
            .slots
            .iter()
            .enumerate()
            .filter(|(j, slot)| is_binding(slot, best.x[*j]))
            .map(|(j, _)| j)
            .collect();
        if binding.is_empty() {
            break;
        }
        let mut frozen = best.x.clone();
        for &j in &binding {
            frozen[j] = bound_for(&map.slots[j]);
        }
        let free_idx: Vec<usize> =
            (0..n_free).filter(|j| !binding.contains(j)).collect();
        if free_idx.is_empty() {
            best.x = frozen;
            best.f = objective(&best.x);
            total_evals += 1;
            break;
        }
        let mut reduced = |xr: &[f64]| -> f64 {
            let mut full = frozen.clone();
            for (&j, &v) in free_idx.iter().zip(xr) {
                full[j] = v;
            }
            objective(&full)
        };
        // The projected incumbent plus, when available, the projected warm
        // start: descending from the warm point preserves the guarantee
        // that a richer variant never undercuts the nested optimum it was
        // seeded with.
        let mut reduced_starts: Vec<Vec<f64>> =
            vec![free_idx.iter().map(|&j| frozen[j]).collect()];
        if let Some(w) = warm {
            let mut wf = w.to_vec();
            for &j in &binding {
                wf[j] = bound_for(&map.slots[j]);
            }
            reduced_starts.push(free_idx.iter().map(|&j| wf[j]).collect());
        }
        let mut round_best: Option<NmOutcome> = None;
        for start in &reduced_starts {
            let steps: Vec<f64> = start.iter().map(|x| 0.02 * (0.1 + x.abs())).collect();
            let run = nelder_mead(&mut reduced, start, &steps, max_iters, opts.tol);
            total_iters += run.iterations;
            total_evals += run.evals;
            if round_best.as_ref().map_or(true, |b| run.f < b.f) {
                round_best = Some(run);
            }
        }
        let round = round_best.expect("at least one reduced start");
        for (&j, &v) in free_idx.iter().zip(&round.x) {
            frozen[j] = v;
        }
        best.x = frozen;
        best.f = round.f;
        nm_converged = round.converged;
    }

    // The exploration objective never refines the nonlinear likelihood,
    // so a polished point can land where the refined evaluation fails to
    // self-organize; fall back to the pre-polish optimum in that case.
    let mut candidates = vec![(best.x.clone(), nm_converged)];
    if unpolished.0 != best.x {
        candidates.push(unpolished);
    }
    let mut chosen = None;
    let mut last_error = String::new();
    for (x, flag) in candidates {
        let mut theta = x;
        clamp_boundary(&map, &mut theta);
        let spec = match map.unpack(&theta, &template) {
            Ok(s) => s,
            Err(e) => {
                last_error = e.to_string();
                continue;
            }
        };
        match log_likelihood(&spec, path, None, &opts.likelihood) {
            Ok(report) if report.loglik.is_finite() => {
                chosen = Some((theta, spec, report, flag));
                break;
            }
            Ok(_) => last_error = "non-finite log-likelihood".into(),
            Err(e) => last_error = e.to_string(),
        }
    }
    let Some((theta, spec, report, nm_converged)) = chosen else {
        return Err(Error::FitFailure(format!("optimum is not evaluable: {last_error}")));
    };
    let (penalty, gamma_max) = penalty_terms(&spec, opts.kappa);
    let stable = gamma_max < 0.0;
    let converged = nm_converged && penalty < 1e-8 && stable;

    // Curvature needs a *smooth* objective: adaptive refinement switches
    // resolution between nearby evaluations and the jitter is comparable
    // to the finite-difference second differences. A fixed elevated
    // density keeps the evaluations consistent.
    let hess_lopts = LikelihoodOptions {
        ode_steps_per_unit: opts.likelihood.ode_steps_per_unit * 4,
        max_refinements: 0,
        ..opts.likelihood.clone()
    };
    let (stderr, stderr_note) = if opts.compute_stderr {
        stderr_from_information(&theta, &map, &template, path, &hess_lopts)
    } else {
        (None, None)
    };

    Ok(FitResult {
        variant: mask.variant,
        params: theta,
        param_names: map.names(),
        stderr,
        stderr_note,
        spec,
        loglik: report.loglik,
        penalty,
        gamma_max,
        stable,
        converged,
        nm_iterations: total_iters,
        nm_evals: total_evals,
        best_restart,
        clamped_events: report.clamped_events,
    })
}

/// Fits all eight variants, warm-starting each richer variant from a
/// nested one (II–VI from I, VII from II, VIII from V) so that its
/// likelihood can only improve on the nested optimum. When a warm start
/// proves degenerate (the warm-started fit fails outright), the variant
/// is refitted cold and the ladder guarantee is waived for it.
pub fn fit_all_variants(
    path: &MarkedPath,
    marks: &[MarkModel],
    opts: &FitOptions,
) -> Result<Vec<FitResult>> {
    let mut results: Vec<FitResult> = Vec::with_capacity(VariantId::ALL.len());
    for &variant in VariantId::ALL.iter() {
        let mask = VariantMask::for_variant(variant);
        let warm_source = match variant {
            VariantId::I => None,
            VariantId::VII => results.iter().find(|r| r.variant == VariantId::II),
            VariantId::VIII => results.iter().find(|r| r.variant == VariantId::V),
            _ => results.iter().find(|r| r.variant == VariantId::I),
        };
        let warm = warm_source.map(|r| embed_warm_start(r, &mask));
        let result = match fit(path, &mask, marks, warm.as_deref(), opts) {
            Ok(r) => r,
            // A degenerate nested optimum can seed the richer variant
            // inside an infeasible region; dropping the warm start costs
            // the ladder guarantee for this variant but keeps the sweep
            // alive.
            Err(_) if warm.is_some() => fit(path, &mask, marks, None, opts)?,
            Err(e) => return Err(e),
        };
        results.push(result);
    }
    Ok(results)
}

/// Per-component empirical mark models from an observed path. Components
/// without any events fall back to the pooled marks.
pub fn empirical_marks(path: &MarkedPath, dim: usize) -> Result<Vec<MarkModel>> {
    path.validate()?;
    if path.is_empty() {
        return Err(Error::InsufficientData(
            "empirical mark models need at least one event".into(),
        ));
    }
    let mut by_component: Vec<Vec<f64>> = vec![Vec::new(); dim];
    let mut pooled = Vec::with_capacity(path.len());
    for ev in &path.events {
        if ev.component >= dim {
            return Err(Error::Dimension(format!(
                "event component {} out of range for dimension {dim}",
                ev.component + 1
            )));
        }
        by_component[ev.component].push(ev.mark);
        pooled.push(ev.mark);
    }
    Ok(by_component
        .into_iter()
        .map(|samples| {
            if samples.is_empty() {
                MarkModel::Empirical { samples: pooled.clone() }
            } else {
                MarkModel::Empirical { samples }
            }
        })
        .collect())
}

// ======================================================================
// Variant table
// ======================================================================

/// Fixed notation for ordinary magnitudes, scientific for the extreme
/// values a degenerate fit can produce — a runaway parameter must not
/// stretch its column across the screen.
fn format_number(x: f64) -> String {
    if x == 0.0 || (x.abs() >= 1e-4 && x.abs() < 1e6) {
        format!("{x:.4}")
    } else {
        format!("{x:.3e}")
    }
}

fn format_cell(value: f64, stderr: Option<f64>) -> String {
    match stderr {
        Some(s) if s.is_finite() => format!("{} ({})", format_number(value), format_number(s)),
        _ => format_number(value),
    }
}

/// Renders fitted variants side by side: one row per parameter in the
/// canonical order, `--` where a variant pins the entry to zero, then
/// log-likelihood and diagnostics rows. Parameters that no displayed
/// variant estimates are omitted, so a lone diagonal fit prints exactly
/// its own six rows.
pub fn render_variant_table(results: &[FitResult]) -> String {
    // The full 13-slot order comes from the richest mask.
    let full = VariantMask::for_variant(VariantId::VII).param_map().names();
    let mut rows: Vec<Vec<String>> = Vec::new();

    let mut header = vec!["param".to_string()];
    header.extend(results.iter().map(|r| r.variant.to_string()));
    rows.push(header);

    for name in &full {
        if !results.iter().any(|r| r.param_names.iter().any(|n| n == name)) {
            continue;
        }
        let mut row = vec![name.clone()];
        for r in results {
            match r.param_names.iter().position(|n| n == name) {
                Some(i) => {
                    let s = r.stderr.as_ref().map(|v| v[i]);
                    row.push(format_cell(r.params[i], s));
                }
                None => row.push("--".to_string()),
            }
        }
        rows.push(row);
    }

    let mut ll = vec!["log-lik".to_string()];
    ll.extend(results.iter().map(|r| format!("{:.4}", r.loglik)));
    rows.push(ll);
    let mut np = vec!["free params".to_string()];
    np.extend(results.iter().map(|r| r.params.len().to_string()));
    rows.push(np);
    let mut st = vec!["stable".to_string()];
    st.extend(results.iter().map(|r| if r.stable { "yes" } else { "no" }.to_string()));
    rows.push(st);
    let mut cv = vec!["converged".to_string()];
    cv.extend(results.iter().map(|r| if r.converged { "yes" } else { "no" }.to_string()));
    rows.push(cv);

    let cols = rows[0].len();
    let mut widths = vec![0usize; cols];
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    for (ri, row) in rows.iter().enumerate() {
        for (ci, cell) in row.iter().enumerate() {
            if ci == 0 {
                out.push_str(&format!("{:<width$}", cell, width = widths[0]));
            } else {
                out.push_str(&format!("  {:>width$}", cell, width = widths[ci]));
            }
        }
        out.push('\n');
        if ri == 0 {
            let total: usize = widths.iter().sum::<usize>() + 2 * (cols - 1);
            out.push_str(&"-".repeat(total));
            out.push('\n');
        }
    }
    out
}

// ======================================================================
// Tests
// ======================================================================

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::{simulate_path, SimConfig};

    // ---- optimizer ------------------------------------------------------

    #[test]
    fn nelder_mead_solves_rosenbrock() {
        let mut f = |x: &[f64]| -> f64 {
            (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2)
        };
        let out = nelder_mead(&mut f, &[-1.2, 1.0], &[0.5, 0.5], 5000, 1e-13);
        assert!(out.converged);
        assert!((out.x[0] - 1.0).abs() < 1e-4, "x = {:?}", out.x);
        assert!((out.x[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn nelder_mead_solves_separable_quadratic() {
        let mut f = |x: &[f64]| -> f64 {
            x.iter().enumerate().map(|(i, &v)| (v - i as f64).powi(2)).sum()
        };
        let out = nelder_mead(&mut f, &[5.0, 5.0, 5.0, 5.0], &[1.0; 4], 4000, 1e-14);
        for (i, &v) in out.x.iter().enumerate() {
            assert!((v - i as f64).abs() < 1e-5, "x = {:?}", out.x);
        }
    }

    #[test]
    fn fd_hessian_recovers_quadratic_curvature() {
        let h = [[2.0, 0.5], [0.5, 3.0]];
        let mut f = |x: &[f64]| -> f64 {
            0.5 * (h[0][0] * x[0] * x[0]
                + 2.0 * h[0][1] * x[0] * x[1]
                + h[1][1] * x[1] * x[1])
                + 0.3 * x[0]
                - 1.0
        };
        let hess = fd_hessian(&mut f, &[0.7, -0.4], 1e-4);
        for i in 0..2 {
            for j in 0..2 {
                assert!(
                    (hess.get(i, j) - h[i][j]).abs() < 1e-5,
                    "H[{i}][{j}] = {}",
                    hess.get(i, j)
                );
            }
        }
    }

    // ---- objective ------------------------------------------------------

    fn truth_spec() -> ModelSpec {
        ModelSpec::linear(
            Vector::from_slice(&[0.4, 0.3]),
            Matrix::from_diag(&[-1.0, -0.8]),
            Matrix::from_diag(&[0.5, 0.4]),
            vec![MarkModel::ConstantExponential { rate: 1.0 }; 2],
        )
    }

    fn simulated_path(horizon: f64, seed: u64) -> MarkedPath {
        let spec = truth_spec();
        let config = SimConfig { seed, ..SimConfig::default() };
        simulate_path(&spec, horizon, &config).unwrap().path
    }

    #[test]
    fn objective_matches_negative_loglik_inside_admissible_region() {
        let spec = truth_spec();
        let path = simulated_path(60.0, 5);
        let mask = VariantMask::for_variant(VariantId::I);
        let map = mask.param_map();
        let template = template_for(&mask, &spec.marks).unwrap();
        let theta = map.pack(&spec).unwrap();
        let (neg_ll, penalty, gamma) =
            objective_parts(&theta, &map, &template, &path, 1e6, &LikelihoodOptions::default());
        let direct = log_likelihood(&spec, &path, None, &LikelihoodOptions::default()).unwrap();
        assert!((neg_ll + direct.loglik).abs() < 1e-10);
        assert_eq!(penalty, 0.0);
        assert!(gamma < 0.0);
    }

    #[test]
    fn penalty_activates_on_each_violation_kind() {
        let path = simulated_path(40.0, 6);
        let mask = VariantMask::for_variant(VariantId::I);
        let map = mask.param_map();
        let template = template_for(&mask, &truth_spec().marks).unwrap();
        let base = map.pack(&truth_spec()).unwrap();
        let names = map.names();
        let kappa = 1e6;
        let lopts = LikelihoodOptions::default();

        let penalty_at = |edit: &dyn Fn(&mut Vec<f64>)| -> f64 {
            let mut theta = base.clone();
            edit(&mut theta);
            objective_parts(&theta, &map, &template, &path, kappa, &lopts).1
        };

        let idx = |n: &str| names.iter().position(|x| x == n).unwrap();
        // Negative baseline.
        assert!(penalty_at(&|t| t[idx("lambda01")] = -0.2) >= kappa * 0.04 * 0.999);
        // Negative excitation.
        assert!(penalty_at(&|t| t[idx("b22")] = -0.1) >= kappa * 0.01 * 0.999);
        // Supercritical excitation (unit mark mean): M11 = a11 + b11 > 0.
        assert!(penalty_at(&|t| t[idx("b11")] = 3.0) > 0.0);
        // Admissible point carries no penalty.
        assert_eq!(penalty_at(&|_| {}), 0.0);
    }

    #[test]
    fn heuristic_start_is_penalty_free() {
        let path = simulated_path(50.0, 9);
        let mask = VariantMask::for_variant(VariantId::II);
        let map = mask.param_map();
        let marks = truth_spec().marks;
        let template = template_for(&mask, &marks).unwrap();
        let counts = path.counts(2).unwrap();
        let x0 = heuristic_start(&map, &counts, path.horizon, &marks);
        let (neg_ll, penalty, gamma) =
            objective_parts(&x0, &map, &template, &path, 1e6, &LikelihoodOptions::default());
        assert!(neg_ll.is_finite() && neg_ll < BIG);
        assert_eq!(penalty, 0.0);
        assert!(gamma < 0.0);
    }

    // ---- fitting --------------------------------------------------------

    #[test]
    fn fit_recovers_diagonal_model_roughly() {
        let path = simulated_path(400.0, 11);
        let mask = VariantMask::for_variant(VariantId::I);
        let opts = FitOptions { restarts: 2, compute_stderr: true, ..FitOptions::default() };
        let result = fit(&path, &mask, &truth_spec().marks, None, &opts).unwrap();

        assert!(result.stable, "fitted model must be stable");
        assert!(result.penalty < 1e-8);
        assert_eq!(result.param_names, vec!["lambda01", "lambda02", "a11", "a22", "b11", "b22"]);

        // The search can only improve on its own start.
        let map = mask.param_map();
        let template = template_for(&mask, &truth_spec().marks).unwrap();
        let counts = path.counts(2).unwrap();
        let x0 = heuristic_start(&map, &counts, path.horizon, &truth_spec().marks);
        let (start_nll, start_pen, _) =
            objective_parts(&x0, &map, &template, &path, 1e6, &LikelihoodOptions::default());
        assert!(-result.loglik + result.penalty <= start_nll + start_pen + 1e-9);

        // Rough recovery at this sample size.
        let truth: [f64; 6] = [0.4, 0.3, -1.0, -0.8, 0.5, 0.4];
        for ((est, tr), name) in result.params.iter().zip(truth).zip(&result.param_names) {
            let tol = 0.25 + 0.5 * tr.abs();
            assert!(
                (est - tr).abs() < tol,
                "{name}: estimate {est:.3} too far from {tr:.3}"
            );
        }

        let se = result.stderr.expect("standard errors expected");
        assert!(se.iter().all(|s| s.is_finite() && *s > 0.0), "stderr = {se:?}");
    }

    #[test]
    fn warm_started_nesting_never_loses_likelihood() {
        let path = simulated_path(150.0, 13);
        let marks = truth_spec().marks;
        let opts =
            FitOptions { restarts: 2, max_iters: 400, compute_stderr: false, ..Default::default() };
        let fit_i = fit(&path, &VariantMask::for_variant(VariantId::I), &marks, None, &opts)
            .unwrap();
        let mask_ii = VariantMask::for_variant(VariantId::II);
        let warm = embed_warm_start(&fit_i, &mask_ii);
        let fit_ii = fit(&path, &mask_ii, &marks, Some(&warm), &opts).unwrap();
        assert!(
            fit_ii.loglik >= fit_i.loglik - 1e-6,
            "nested LL {:.6} must not exceed the richer fit {:.6}",
            fit_i.loglik,
            fit_ii.loglik
        );
    }

    #[test]
    fn embedding_preserves_shared_parameters() {
        let fit_i = FitResult {
            variant: VariantId::I,
            params: vec![0.1, 0.2, -1.0, -0.7, 0.4, 0.35],
            param_names: vec![
                "lambda01".into(),
                "lambda02".into(),
                "a11".into(),
                "a22".into(),
                "b11".into(),
                "b22".into(),
            ],
            stderr: None,
            stderr_note: None,
            spec: truth_spec(),
            loglik: -10.0,
            penalty: 0.0,
            gamma_max: -0.5,
            stable: true,
            converged: true,
            nm_iterations: 0,
            nm_evals: 0,
            best_restart: 0,
            clamped_events: 0,
        };
        let mask = VariantMask::for_variant(VariantId::VIII);
        let warm = embed_warm_start(&fit_i, &mask);
        let names = mask.param_map().names();
        let get = |n: &str| warm[names.iter().position(|x| x == n).unwrap()];
        assert_eq!(get("lambda01"), 0.1);
        assert_eq!(get("a21"), 0.0);
        assert_eq!(get("b21"), 0.0);
        assert_eq!(get("c"), 0.1);
        assert_eq!(get("d2"), -0.1);
    }

    #[test]
    fn fit_rejects_degenerate_inputs() {
        let marks = truth_spec().marks;
        let mask = VariantMask::for_variant(VariantId::I);
        let opts = FitOptions::default();
        let empty = MarkedPath::empty(10.0);
        assert!(matches!(
            fit(&empty, &mask, &marks, None, &opts),
            Err(Error::InsufficientData(_))
        ));
        let zero_t = MarkedPath::empty(0.0);
        assert!(matches!(
            fit(&zero_t, &mask, &marks, None, &opts),
            Err(Error::InsufficientData(_))
        ));
        let path = simulated_path(30.0, 3);
        assert!(matches!(
            fit(&path, &mask, &marks[..1], None, &opts),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn empirical_marks_group_by_component() {
        use crate::model::PathEvent;
        let path = MarkedPath::new(
            10.0,
            vec![
                PathEvent { time: 1.0, component: 0, mark: 0.5 },
                PathEvent { time: 2.0, component: 1, mark: 1.5 },
                PathEvent { time: 3.0, component: 0, mark: 0.7 },
            ],
        )
        .unwrap();
        let marks = empirical_marks(&path, 2).unwrap();
        match &marks[0] {
            MarkModel::Empirical { samples } => assert_eq!(samples, &vec![0.5, 0.7]),
            other => panic!("unexpected mark model {other:?}"),
        }
        match &marks[1] {
            MarkModel::Empirical { samples } => assert_eq!(samples, &vec![1.5]),
            other => panic!("unexpected mark model {other:?}"),
        }
    }

    fn canned_fit(variant: VariantId, names: &[&str], values: &[f64]) -> FitResult {
        FitResult {
            variant,
            params: values.to_vec(),
            param_names: names.iter().map(|s| s.to_string()).collect(),
            stderr: Some(vec![0.01; values.len()]),
            stderr_note: None,
            spec: truth_spec(),
            loglik: -123.456,
            penalty: 0.0,
            gamma_max: -0.5,
            stable: true,
            converged: true,
            nm_iterations: 10,
            nm_evals: 20,
            best_restart: 0,
            clamped_events: 0,
        }
    }

    #[test]
    fn lone_variant_table_prints_only_its_own_rows() {
        let names = ["lambda01", "lambda02", "a11", "a22", "b11", "b22"];
        let fit_i = canned_fit(VariantId::I, &names, &[0.1, 0.2, -1.0, -0.7, 0.4, 0.35]);
        let table = render_variant_table(&[fit_i]);
        assert!(!table.contains("a12"), "table:\n{table}");
        // No dash *cells* (the header separator line is all dashes).
        assert!(!table.contains("  --"), "table:\n{table}");
        let param_rows = table
            .lines()
            .filter(|l| names.iter().any(|n| l.starts_with(n)))
            .count();
        assert_eq!(param_rows, 6, "table:\n{table}");
        assert!(table.contains("log-lik"), "table:\n{table}");
        assert!(table.contains("-123.4560"), "table:\n{table}");
        assert!(table.contains("0.4000 (0.0100)"), "table:\n{table}");
    }

    #[test]
    fn side_by_side_table_dashes_entries_missing_from_a_variant() {
        let fit_i = canned_fit(
            VariantId::I,
            &["lambda01", "lambda02", "a11", "a22", "b11", "b22"],
            &[0.1, 0.2, -1.0, -0.7, 0.4, 0.35],
        );
        let fit_iv = canned_fit(
            VariantId::IV,
            &["lambda01", "lambda02", "a11", "a12", "a21", "a22", "b11", "b22"],
            &[0.1, 0.2, -1.0, 0.3, 0.2, -0.7, 0.4, 0.35],
        );
        let table = render_variant_table(&[fit_i, fit_iv]);
        let a12_row = table.lines().find(|l| l.starts_with("a12")).unwrap();
        assert!(a12_row.contains("--"), "table:\n{table}");
        assert!(a12_row.contains("0.3000"), "table:\n{table}");
        // Neither variant frees b12/b21 or the regime, so those rows vanish.
        assert!(!table.contains("b12"), "table:\n{table}");
        assert!(!table.contains("\nc "), "table:\n{table}");
    }
}
