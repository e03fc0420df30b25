//! Path simulation by thinning.
//!
//! Between events the intensity follows its deterministic drift. For the
//! linear drift the flow and the compensator increment are exact:
//!
//! ```text
//!   lambda(t) = lambda0 + e^{A (t-s)} (lambda(s) - lambda0)
//!   Lambda(t) - Lambda(s) = lambda0 (t-s) + (∫_0^{t-s} e^{Au} du)(lambda(s) - lambda0)
//! ```
//!
//! both obtained from one augmented-block matrix exponential. The
//! exponential-regime drift has no closed flow and is integrated with
//! fixed-step RK4 (the compensator rides along as extra state).
//!
//! Events are generated by Ogata-style thinning with a windowed majorant:
//! the deterministic flow over the next lookahead window is sampled, the
//! majorant is its largest total rate times a safety factor, candidate
//! times are exponential with that rate, and candidates are accepted with
//! probability (total rate)/(majorant). If a candidate ever sees the
//! majorant violated the window is halved and the window restarted, so a
//! too-optimistic sample sweep only costs time, not correctness. Negative
//! intensity excursions (possible under strongly negative couplings)
//! contribute zero event rate.
//!
//! Everything is deterministic given the seed: each path owns one stream
//! of a counter-based generator, so path `i` of a multi-path run is
//! bitwise identical to a single run with stream `i` regardless of thread
//! scheduling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{sample_unit_exp, DriftKind, MarkedPath, ModelSpec, PathEvent};
use crate::numerics::{exp_and_int, mat_exp, rk4_fixed, Vector};

/// Default RK4 resolution (steps per unit time) for the nonlinear drift.
pub const DEFAULT_ODE_STEPS_PER_UNIT: usize = 20;

/// Total rates below this are treated as "no events in this window".
const MIN_RATE: f64 = 1e-12;

/// Number of flow samples used to build one window majorant.
const MAJORANT_SAMPLES: usize = 16;

// ======================================================================
// State and configuration
// ======================================================================

/// Deterministic state carried between events: current time, intensity
/// vector and the accumulated compensator `∫_0^t lambda(s) ds` per
/// component.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityState {
    pub t: f64,
    pub lambda: Vector,
    pub compensator: Vector,
}

impl IntensityState {
    /// State at time zero. The intensity starts at `lambda_init` when
    /// given, otherwise at the baseline `lambda0`.
    pub fn initial(spec: &ModelSpec, lambda_init: Option<&Vector>) -> Result<Self> {
        let lambda = match lambda_init {
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
                v.clone()
            }
            None => spec.lambda0.clone(),
        };
        Ok(IntensityState { t: 0.0, lambda, compensator: Vector::zeros(spec.dim) })
    }
}

/// Simulation settings. `lookahead` is the majorant window length,
/// `safety_factor` the multiplicative headroom on the sampled flow
/// maximum, and `record_grid` an optional spacing at which intensity
/// checkpoints are recorded alongside the event path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub seed: u64,
    pub lookahead: f64,
    pub safety_factor: f64,
    pub ode_steps_per_unit: usize,
    pub record_grid: Option<f64>,
    pub lambda_init: Option<Vector>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 0,
            lookahead: 1.0,
            safety_factor: 1.05,
            ode_steps_per_unit: DEFAULT_ODE_STEPS_PER_UNIT,
            record_grid: None,
            lambda_init: None,
        }
    }
}

impl SimConfig {
    fn validate(&self) -> Result<()> {
        if !(self.lookahead.is_finite() && self.lookahead > 0.0) {
            return Err(Error::Domain("lookahead must be finite and > 0".into()));
        }
        if !(self.safety_factor.is_finite() && self.safety_factor >= 1.0) {
            return Err(Error::Domain("safety_factor must be >= 1".into()));
        }
        if self.ode_steps_per_unit == 0 {
            return Err(Error::Domain("ode_steps_per_unit must be >= 1".into()));
        }
        if let Some(g) = self.record_grid {
            if !(g.is_finite() && g > 0.0) {
                return Err(Error::Domain("record_grid must be finite and > 0".into()));
            }
        }
        Ok(())
    }
}

/// One recorded intensity checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub time: f64,
    pub lambda: Vector,
}

/// Result of one simulated path: the events plus any recorded checkpoints
/// (empty unless `record_grid` was set).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedPath {
    pub path: MarkedPath,
    pub checkpoints: Vec<Checkpoint>,
}

/// The RNG for one path: a fixed seed plus one counter stream per path
/// index, so multi-path runs are reproducible independent of scheduling.
pub fn path_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

// ======================================================================
// Deterministic propagation
// ======================================================================

/// Advances the deterministic flow (no events) from `state.t` to
/// `t_target`, updating intensity and compensator. Linear drift uses the
/// exact matrix-exponential form; the exponential regime integrates with
/// RK4 at `ode_steps_per_unit` steps per unit time.
pub fn propagate(
    spec: &ModelSpec,
    state: &IntensityState,
    t_target: f64,
    ode_steps_per_unit: usize,
) -> Result<IntensityState> {
    if state.lambda.dim() != spec.dim || state.compensator.dim() != spec.dim {
        return Err(Error::Dimension(format!(
            "state dimension {} does not match model dimension {}",
            state.lambda.dim(),
            spec.dim
        )));
    }
    if !t_target.is_finite() || t_target < state.t {
        return Err(Error::Domain(format!(
            "propagation target {t_target} lies before current time {}",
            state.t
        )));
    }
    let delta = t_target - state.t;
    if delta == 0.0 {
        return Ok(state.clone());
    }
    match &spec.drift {
        DriftKind::Linear => {
            let (e, phi) = exp_and_int(&spec.a, delta)?;
            let dev = state.lambda.sub(&spec.lambda0);
            let lambda = spec.lambda0.add(&e.matvec(&dev));
            let compensator =
                state.compensator.add(&spec.lambda0.scale(delta)).add(&phi.matvec(&dev));
            if !lambda.all_finite() || !compensator.all_finite() {
                return Err(Error::BlowUp {
                    time: t_target,
                    message: "linear flow produced non-finite intensity".into(),
                });
            }
            Ok(IntensityState { t: t_target, lambda, compensator })
        }
        DriftKind::ExpRegime { .. } => {
            if ode_steps_per_unit == 0 {
                return Err(Error::Domain("ode_steps_per_unit must be >= 1".into()));
            }
            let d = spec.dim;
            // Joint state [lambda; compensator]; the compensator integrates
            // the raw intensity, matching the linear closed form.
            let mut y0 = Vec::with_capacity(2 * d);
            y0.extend(state.lambda.iter());
            y0.extend(state.compensator.iter());
            let f = |_t: f64, y: &[f64], dy: &mut [f64]| {
                let (dlam, dcomp) = dy.split_at_mut(d);
                // Intermediate RK4 stages can overshoot to non-finite
                // intensities on explosive parameters; signal that as NaN
                // derivatives so the step check reports a blow-up instead
                // of panicking.
                match spec.drift_eval_into(&y[..d], dlam) {
                    Ok(()) => dcomp.copy_from_slice(&y[..d]),
                    Err(_) => {
                        dlam.fill(f64::NAN);
                        dcomp.fill(f64::NAN);
                    }
                }
            };
            let steps = ((delta * ode_steps_per_unit as f64).ceil() as usize).max(1);
            let y = rk4_fixed(&f, &y0, state.t, t_target, steps)?;
            Ok(IntensityState {
                t: t_target,
                lambda: Vector::from_slice(&y[..d]),
                compensator: Vector::from_slice(&y[d..]),
            })
        }
    }
}

/// Applies the jump of one event: an event of `component` k with mark `y`
/// shifts the intensity by column k of `B` scaled by `y`. Time and
/// compensator are untouched (the jump is instantaneous).
pub fn apply_jump(
    spec: &ModelSpec,
    state: &IntensityState,
    component: usize,
    mark: f64,
) -> Result<IntensityState> {
    if component >= spec.dim {
        return Err(Error::Dimension(format!(
            "component {} out of range for dimension {}",
            component + 1,
            spec.dim
        )));
    }
    if !mark.is_finite() || mark <= 0.0 {
        return Err(Error::Domain(format!("marks must be finite and > 0, got {mark}")));
    }
    let lambda = state.lambda.add(&spec.b.col(component).scale(mark));
    Ok(IntensityState { t: state.t, lambda, compensator: state.compensator.clone() })
}

/// Total event rate at an intensity vector; negative components carry no
/// rate.
fn total_rate(lambda: &Vector) -> f64 {
    lambda.iter().map(|x| x.max(0.0)).sum()
}

// ======================================================================
// Thinning
// ======================================================================

/// Majorant for the total rate over `[state.t, win_end]`: the largest
/// sampled total rate of the deterministic flow, times the safety factor.
fn window_majorant(
    spec: &ModelSpec,
    state: &IntensityState,
    win_end: f64,
    config: &SimConfig,
) -> Result<f64> {
    let delta = win_end - state.t;
    let mut best = total_rate(&state.lambda);
    match &spec.drift {
        DriftKind::Linear => {
            let h = delta / MAJORANT_SAMPLES as f64;
            let step = mat_exp(&spec.a, h)?;
            let mut dev = state.lambda.sub(&spec.lambda0);
            for _ in 0..MAJORANT_SAMPLES {
                dev = step.matvec(&dev);
                best = best.max(total_rate(&spec.lambda0.add(&dev)));
            }
        }
        DriftKind::ExpRegime { .. } => {
            let d = spec.dim;
            let steps = MAJORANT_SAMPLES
                .max((delta * config.ode_steps_per_unit as f64).ceil() as usize);
            let f = |_t: f64, y: &[f64], dy: &mut [f64]| {
                // Non-finite intermediate stages become NaN derivatives so
                // the step check reports a blow-up (see `propagate`).
                if spec.drift_eval_into(y, &mut dy[..d]).is_err() {
                    dy.fill(f64::NAN);
                }
            };
            let h = delta / steps as f64;
            let mut y: Vec<f64> = state.lambda.as_slice().to_vec();
            let mut t = state.t;
            for _ in 0..steps {
                y = rk4_fixed(&f, &y, t, t + h, 1)?;
                t += h;
                best = best.max(y.iter().map(|x| x.max(0.0)).sum());
            }
        }
    }
    Ok(best * config.safety_factor)
}

struct GridRecorder {
    grid: Option<f64>,
    next_index: usize,
    checkpoints: Vec<Checkpoint>,
}

impl GridRecorder {
    fn new(grid: Option<f64>, initial: &IntensityState) -> Self {
        let mut rec =
            GridRecorder { grid, next_index: 1, checkpoints: Vec::new() };
        if grid.is_some() {
            rec.checkpoints.push(Checkpoint { time: 0.0, lambda: initial.lambda.clone() });
        }
        rec
    }

    /// Records every grid time in `(state.t, t_new]` using side
    /// propagations from the current state, without disturbing it.
    fn record_up_to(
        &mut self,
        spec: &ModelSpec,
        state: &IntensityState,
        t_new: f64,
        config: &SimConfig,
    ) -> Result<()> {
        let Some(g) = self.grid else { return Ok(()) };
        loop {
            let tc = g * self.next_index as f64;
            if tc > t_new {
                return Ok(());
            }
            if tc > state.t {
                let s = propagate(spec, state, tc, config.ode_steps_per_unit)?;
                self.checkpoints.push(Checkpoint { time: tc, lambda: s.lambda });
            }
            self.next_index += 1;
        }
    }
}

fn simulate_one(
    spec: &ModelSpec,
    horizon: f64,
    config: &SimConfig,
    rng: &mut ChaCha8Rng,
) -> Result<SimulatedPath> {
    let mut state = IntensityState::initial(spec, config.lambda_init.as_ref())?;
    let mut recorder = GridRecorder::new(config.record_grid, &state);
    let mut events: Vec<PathEvent> = Vec::new();
    let mut window = config.lookahead;

    while state.t < horizon {
        let win_end = (state.t + window).min(horizon);
        let majorant = window_majorant(spec, &state, win_end, config)?;
        if majorant < MIN_RATE {
            // No mass in this window; jump to its end.
            recorder.record_up_to(spec, &state, win_end, config)?;
            state = propagate(spec, &state, win_end, config.ode_steps_per_unit)?;
            window = config.lookahead;
            continue;
        }
        let wait = sample_unit_exp(rng) / majorant;
        if state.t + wait >= win_end {
            recorder.record_up_to(spec, &state, win_end, config)?;
            state = propagate(spec, &state, win_end, config.ode_steps_per_unit)?;
            window = config.lookahead;
            continue;
        }
        let candidate = propagate(spec, &state, state.t + wait, config.ode_steps_per_unit)?;
        let total = total_rate(&candidate.lambda);
        if total > majorant * (1.0 + 1e-9) {
            // The sampled sweep under-estimated the flow; shrink and retry
            // from the same state.
            window *= 0.5;
            if window < 1e-9 * config.lookahead {
                return Err(Error::Domain(
                    "majorant window shrank to zero; the flow rises too fast to bound".into(),
                ));
            }
            continue;
        }
        let u: f64 = rng.gen();
        if u * majorant <= total {
            // Accepted: choose the component proportionally to its rate,
            // then draw the mark at the pre-event intensity.
            let mut pick = rng.gen::<f64>() * total;
            let mut component = spec.dim - 1;
            for k in 0..spec.dim {
                let rate = candidate.lambda.get(k).max(0.0);
                if pick < rate {
                    component = k;
                    break;
                }
                pick -= rate;
            }
            let mark = spec.marks[component].sample(&candidate.lambda, rng);
            recorder.record_up_to(spec, &state, candidate.t, config)?;
            events.push(PathEvent { time: candidate.t, component, mark });
            state = apply_jump(spec, &candidate, component, mark)?;
        } else {
            recorder.record_up_to(spec, &state, candidate.t, config)?;
            state = candidate;
        }
        window = config.lookahead;
    }

    Ok(SimulatedPath {
        path: MarkedPath { horizon, events },
        checkpoints: recorder.checkpoints,
    })
}

/// Simulates one path on `(0, horizon]` (RNG stream 0 of the seed).
pub fn simulate_path(spec: &ModelSpec, horizon: f64, config: &SimConfig) -> Result<SimulatedPath> {
    spec.ensure_valid()?;
    config.validate()?;
    if !horizon.is_finite() || horizon < 0.0 {
        return Err(Error::Domain(format!("horizon must be finite and >= 0, got {horizon}")));
    }
    let mut rng = path_rng(config.seed, 0);
    simulate_one(spec, horizon, config, &mut rng)
}

/// Simulates `n_paths` independent paths in parallel; path `i` uses RNG
/// stream `i`, so the output does not depend on thread scheduling.
pub fn simulate_paths(
    spec: &ModelSpec,
    horizon: f64,
    config: &SimConfig,
    n_paths: usize,
) -> Result<Vec<SimulatedPath>> {
    spec.ensure_valid()?;
    config.validate()?;
    if !horizon.is_finite() || horizon < 0.0 {
        return Err(Error::Domain(format!("horizon must be finite and >= 0, got {horizon}")));
    }
    (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = path_rng(config.seed, i as u64);
            simulate_one(spec, horizon, config, &mut rng)
        })
        .collect()
}

/// Replays a path and returns the intensity at time `t`, using the left
/// limit at event times (an event at exactly `t` has not yet kicked the
/// intensity).
pub fn intensity_at(
    spec: &ModelSpec,
    path: &MarkedPath,
    t: f64,
    lambda_init: Option<&Vector>,
    ode_steps_per_unit: usize,
) -> Result<Vector> {
    spec.ensure_valid()?;
    path.validate()?;
    path.counts(spec.dim)?;
    if !t.is_finite() || t < 0.0 || t > path.horizon {
        return Err(Error::Domain(format!(
            "query time {t} outside [0, {}]",
            path.horizon
        )));
    }
    let mut state = IntensityState::initial(spec, lambda_init)?;
    for ev in &path.events {
        if ev.time >= t {
            break;
        }
        state = propagate(spec, &state, ev.time, ode_steps_per_unit)?;
        state = apply_jump(spec, &state, ev.component, ev.mark)?;
    }
    state = propagate(spec, &state, t, ode_steps_per_unit)?;
    Ok(state.lambda)
}

// ======================================================================
// Tests
// ======================================================================

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MarkModel;
    use crate::numerics::Matrix;
    use rand::SeedableRng;

    fn exp_marks(dim: usize) -> Vec<MarkModel> {
        vec![MarkModel::ConstantExponential { rate: 1.0 }; dim]
    }

    fn spec_2d() -> ModelSpec {
        ModelSpec::linear(
            Vector::from_slice(&[1.0, 0.8]),
            Matrix::from_rows(&[vec![-1.0, 0.0], vec![0.0, -0.8]]).unwrap(),
            Matrix::from_rows(&[vec![0.3, 0.0], vec![0.2, 0.25]]).unwrap(),
            exp_marks(2),
        )
    }

    fn scalar_spec(a: f64, b: f64, lambda0: f64) -> ModelSpec {
        ModelSpec::linear(
            Vector::from_slice(&[lambda0]),
            Matrix::from_rows(&[vec![a]]).unwrap(),
            Matrix::from_rows(&[vec![b]]).unwrap(),
            exp_marks(1),
        )
    }

    // ---- propagation ----------------------------------------------------

    #[test]
    fn propagate_zero_length_is_identity() {
        let spec = spec_2d();
        let state = IntensityState::initial(&spec, None).unwrap();
        let moved = propagate(&spec, &state, 0.0, 20).unwrap();
        assert_eq!(moved, state);
    }

    #[test]
    fn propagate_scalar_matches_closed_form() {
        let spec = scalar_spec(-0.7, 0.5, 1.2);
        let init = Vector::from_slice(&[3.0]);
        let state = IntensityState::initial(&spec, Some(&init)).unwrap();
        let dt = 1.7;
        let moved = propagate(&spec, &state, dt, 20).unwrap();
        let dev = 3.0 - 1.2;
        let expected_lambda = 1.2 + (-0.7f64 * dt).exp() * dev;
        let expected_comp = 1.2 * dt + dev * (1.0 - (-0.7f64 * dt).exp()) / 0.7;
        assert!((moved.lambda.get(0) - expected_lambda).abs() < 1e-12);
        assert!((moved.compensator.get(0) - expected_comp).abs() < 1e-12);
    }

    #[test]
    fn propagate_rejects_backwards_target() {
        let spec = spec_2d();
        let mut state = IntensityState::initial(&spec, None).unwrap();
        state.t = 2.0;
        assert!(matches!(
            propagate(&spec, &state, 1.0, 20),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn explosive_nonlinear_flow_reports_a_blow_up_instead_of_panicking() {
        // A strongly positive drift diagonal makes the ODE overflow within
        // a few RK4 steps; intermediate stages then hand non-finite
        // intensities to the drift. That must surface as a blow-up error
        // (which the fitting objective treats as an infeasible candidate),
        // never a panic.
        let mut spec = scalar_spec(400.0, 0.5, 1.0);
        spec.drift = DriftKind::ExpRegime { d: Matrix::zeros(1, 1), c: 1.0 };
        let init = Vector::from_slice(&[2.0]);
        let state = IntensityState::initial(&spec, Some(&init)).unwrap();
        match propagate(&spec, &state, 5.0, 20) {
            Err(Error::BlowUp { .. }) => {}
            other => panic!("expected a blow-up, got {other:?}"),
        }
    }

    #[test]
    fn exp_regime_with_zero_d_matches_linear_flow() {
        let linear = spec_2d();
        let mut nonlinear = linear.clone();
        nonlinear.drift = DriftKind::ExpRegime { d: Matrix::zeros(2, 2), c: 1.0 };
        let init = Vector::from_slice(&[2.5, 0.1]);
        let s_lin = IntensityState::initial(&linear, Some(&init)).unwrap();
        let s_non = IntensityState::initial(&nonlinear, Some(&init)).unwrap();
        for &t in &[0.3, 1.0, 2.9] {
            let a = propagate(&linear, &s_lin, t, 200).unwrap();
            let b = propagate(&nonlinear, &s_non, t, 200).unwrap();
            assert!(
                a.lambda.sub(&b.lambda).max_abs() < 1e-9,
                "flow mismatch at t={t}: {:.3e}",
                a.lambda.sub(&b.lambda).max_abs()
            );
            assert!(a.compensator.sub(&b.compensator).max_abs() < 1e-9);
        }
    }

    #[test]
    fn apply_jump_adds_scaled_excitation_column() {
        let spec = spec_2d();
        let state = IntensityState::initial(&spec, None).unwrap();
        // Component 1 (index 0) kicks both components through column 0.
        let kicked = apply_jump(&spec, &state, 0, 2.0).unwrap();
        assert!((kicked.lambda.get(0) - (1.0 + 0.6)).abs() < 1e-15);
        assert!((kicked.lambda.get(1) - (0.8 + 0.4)).abs() < 1e-15);
        // Component 2 (index 1) feeds only itself under this B.
        let kicked2 = apply_jump(&spec, &state, 1, 2.0).unwrap();
        assert!((kicked2.lambda.get(0) - 1.0).abs() < 1e-15);
        assert!((kicked2.lambda.get(1) - (0.8 + 0.5)).abs() < 1e-15);
        assert!(matches!(apply_jump(&spec, &state, 2, 1.0), Err(Error::Dimension(_))));
        assert!(matches!(apply_jump(&spec, &state, 0, 0.0), Err(Error::Domain(_))));
    }

    // ---- simulation -------------------------------------------------------

    #[test]
    fn zero_horizon_gives_empty_path() {
        let out = simulate_path(&spec_2d(), 0.0, &SimConfig::default()).unwrap();
        assert!(out.path.is_empty());
        assert_eq!(out.path.horizon, 0.0);
    }

    #[test]
    fn simulation_is_reproducible_bitwise() {
        let spec = spec_2d();
        let config = SimConfig { seed: 7, record_grid: Some(5.0), ..SimConfig::default() };
        let a = simulate_path(&spec, 50.0, &config).unwrap();
        let b = simulate_path(&spec, 50.0, &config).unwrap();
        assert_eq!(a, b);
        assert!(!a.path.is_empty());
    }

    #[test]
    fn different_streams_give_different_paths() {
        let spec = spec_2d();
        let config = SimConfig { seed: 7, ..SimConfig::default() };
        let paths = simulate_paths(&spec, 50.0, &config, 2).unwrap();
        assert_ne!(paths[0].path, paths[1].path);
    }

    #[test]
    fn multi_path_streams_match_single_runs() {
        let spec = spec_2d();
        let config = SimConfig { seed: 3, ..SimConfig::default() };
        let batch = simulate_paths(&spec, 30.0, &config, 3).unwrap();
        for (i, out) in batch.iter().enumerate() {
            let mut rng = path_rng(3, i as u64);
            let single = simulate_one(&spec, 30.0, &config, &mut rng).unwrap();
            assert_eq!(&single, out, "stream {i} must not depend on batch context");
        }
    }

    #[test]
    fn constant_rate_degenerates_to_poisson_counts() {
        // A = 0, B = 0: events arrive at the constant baseline rate.
        let spec = ModelSpec::linear(
            Vector::from_slice(&[2.0]),
            Matrix::zeros(1, 1),
            Matrix::zeros(1, 1),
            exp_marks(1),
        );
        let config = SimConfig { seed: 11, ..SimConfig::default() };
        let horizon = 500.0;
        let n_paths = 40;
        let paths = simulate_paths(&spec, horizon, &config, n_paths).unwrap();
        let mean_count: f64 =
            paths.iter().map(|p| p.path.len() as f64).sum::<f64>() / n_paths as f64;
        let expected = 2.0 * horizon;
        // Mean of n_paths Poisson(1000) counts: std of the mean is 5.
        let tol = 4.0 * (expected / n_paths as f64).sqrt();
        assert!(
            (mean_count - expected).abs() < tol,
            "mean count {mean_count} vs expected {expected} (tol {tol})"
        );
    }

    #[test]
    fn events_lie_in_window_and_have_positive_marks() {
        let out = simulate_path(&spec_2d(), 80.0, &SimConfig { seed: 5, ..Default::default() })
            .unwrap();
        out.path.validate().unwrap();
        assert!(out.path.len() > 50, "expected a busy path, got {}", out.path.len());
        assert!(out.path.counts(2).unwrap().iter().all(|&c| c > 0));
    }

    // ---- replay -------------------------------------------------------------

    #[test]
    fn intensity_uses_left_limit_at_event_times() {
        let spec = scalar_spec(-1.0, 0.5, 1.0);
        let path = MarkedPath::new(
            5.0,
            vec![PathEvent { time: 1.0, component: 0, mark: 2.0 }],
        )
        .unwrap();
        let init = Vector::from_slice(&[3.0]);
        // At the event time: pure flow from 3.0 toward 1.0.
        let before = intensity_at(&spec, &path, 1.0, Some(&init), 20).unwrap();
        let expected = 1.0 + (3.0 - 1.0) * (-1.0f64).exp();
        assert!((before.get(0) - expected).abs() < 1e-12);
        // Just after: the jump b * y = 1.0 has been applied and decayed
        // for an instant.
        let after = intensity_at(&spec, &path, 1.0 + 1e-9, Some(&init), 20).unwrap();
        assert!((after.get(0) - (expected + 1.0)).abs() < 1e-6);
    }

    #[test]
    fn recorded_checkpoints_agree_with_replay() {
        let spec = spec_2d();
        let config = SimConfig { seed: 13, record_grid: Some(0.5), ..SimConfig::default() };
        let out = simulate_path(&spec, 50.0, &config).unwrap();
        assert_eq!(out.checkpoints.len(), 101);
        for cp in out.checkpoints.iter().step_by(7) {
            let replayed = intensity_at(&spec, &out.path, cp.time, None, 20).unwrap();
            assert!(
                replayed.sub(&cp.lambda).max_abs() <= 1e-9,
                "checkpoint at t={} differs by {:.3e}",
                cp.time,
                replayed.sub(&cp.lambda).max_abs()
            );
        }
    }

    #[test]
    fn added_event_never_lowers_later_intensity() {
        // With diagonal negative A and non-negative B, extra excitation can
        // only raise the intensity at later times.
        let spec = ModelSpec::linear(
            Vector::from_slice(&[0.8, 0.6]),
            Matrix::from_diag(&[-1.0, -0.7]),
            Matrix::from_rows(&[vec![0.3, 0.1], vec![0.2, 0.25]]).unwrap(),
            exp_marks(2),
        );
        let base = simulate_path(&spec, 20.0, &SimConfig { seed: 21, ..Default::default() })
            .unwrap()
            .path;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for scenario in 0..100 {
            let t_extra = 1.0 + 15.0 * rng.gen::<f64>();
            // Nudge off any existing event time.
            let t_extra = if base.events.iter().any(|e| (e.time - t_extra).abs() < 1e-9) {
                t_extra + 1e-6
            } else {
                t_extra
            };
            let component = usize::from(rng.gen::<f64>() < 0.5);
            let mark = 0.1 + rng.gen::<f64>();
            let mut events = base.events.clone();
            let pos = events.partition_point(|e| e.time < t_extra);
            events.insert(pos, PathEvent { time: t_extra, component, mark });
            let augmented = MarkedPath::new(20.0, events).unwrap();
            let t_query = t_extra + (20.0 - t_extra) * rng.gen::<f64>();
            let lam_base = intensity_at(&spec, &base, t_query, None, 20).unwrap();
            let lam_aug = intensity_at(&spec, &augmented, t_query, None, 20).unwrap();
            for k in 0..2 {
                assert!(
                    lam_aug.get(k) >= lam_base.get(k) - 1e-12,
                    "scenario {scenario}: component {k} dropped from {} to {}",
                    lam_base.get(k),
                    lam_aug.get(k)
                );
            }
        }
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let spec = spec_2d();
        let bad_look = SimConfig { lookahead: 0.0, ..SimConfig::default() };
        assert!(simulate_path(&spec, 1.0, &bad_look).is_err());
        let bad_safety = SimConfig { safety_factor: 0.9, ..SimConfig::default() };
        assert!(simulate_path(&spec, 1.0, &bad_safety).is_err());
        let bad_grid = SimConfig { record_grid: Some(-1.0), ..SimConfig::default() };
        assert!(simulate_path(&spec, 1.0, &bad_grid).is_err());
    }

    #[test]
    fn invalid_spec_is_rejected_before_simulation() {
        let mut spec = spec_2d();
        spec.b.set(0, 1, -0.5);
        assert!(matches!(
            simulate_path(&spec, 1.0, &SimConfig::default()),
            Err(Error::InvalidSpec(_))
        ));
    }
}
