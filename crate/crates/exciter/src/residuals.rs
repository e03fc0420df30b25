//! Goodness-of-fit diagnostics via the time change.
//!
//! If the model is correct, mapping each event time of component `j`
//! through its own compensator, `tau_i = Lambda_j(t_i)`, turns the
//! component's events into a unit-rate Poisson process: the transformed
//! interarrivals `tau_i - tau_{i-1}` are i.i.d. Exp(1) and
//! `1 - exp(-(tau_i - tau_{i-1}))` are i.i.d. uniform. Two checks probe
//! this:
//!
//! * a one-sample Kolmogorov–Smirnov test of the interarrivals against
//!   Exp(1), with a p-value from the Kolmogorov asymptotic series using
//!   the finite-sample argument `(sqrt(n) + 0.12 + 0.11/sqrt(n)) D`;
//! * a lag-1 Spearman rank correlation of consecutive interarrivals,
//!   which is sensitive to the serial dependence left behind when the
//!   intensity is mis-specified even though the marginals look right.
//!
//! The censored interval after the last event is not included in the
//! interarrival sample.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::likelihood::LikelihoodOptions;
use crate::model::{MarkedPath, ModelSpec};
use crate::numerics::Vector;
use crate::simulate::{apply_jump, IntensityState};

// ======================================================================
// Scalar helpers
// ======================================================================

/// Abramowitz–Stegun style rational approximation of `erf`, absolute
/// error below 1.5e-7 — ample for p-values.
fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    sign * (1.0 - poly * (-x * x).exp())
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

/// Tail of the Kolmogorov distribution, `P(K > lambda)`. The alternating
/// series converges fast for large arguments; below 1.18 the dual
/// theta-function expansion of the CDF is used instead (the alternating
/// form needs O(1/lambda) terms there).
fn kolmogorov_tail(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 1.18 {
        let q = (-std::f64::consts::PI.powi(2) / (8.0 * lambda * lambda)).exp();
        let cdf = (2.0 * std::f64::consts::PI).sqrt() / lambda
            * (q + q.powi(9) + q.powi(25) + q.powi(49));
        return (1.0 - cdf).clamp(0.0, 1.0);
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k as f64) * (k as f64) * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

// ======================================================================
// Kolmogorov–Smirnov
// ======================================================================

/// One-sample KS test result.
#[derive(Debug, Clone, Serialize)]
pub struct KsTest {
    pub n: usize,
    /// Sup-distance between the empirical CDF and the reference.
    pub statistic: f64,
    /// Asymptotic p-value with the finite-sample argument correction.
    pub p_value: f64,
    /// Statistic threshold that would put the p-value at 0.05.
    pub critical_5pct: f64,
}

fn ks_p_value(n: usize, d: f64) -> f64 {
    let sn = (n as f64).sqrt();
    kolmogorov_tail((sn + 0.12 + 0.11 / sn) * d)
}

/// KS statistic of `samples` against a CDF, evaluated the standard way on
/// the sorted sample.
fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    d
}

/// One-sample KS test against the unit exponential.
pub fn ks_test_unit_exponential(samples: &[f64]) -> Result<KsTest> {
    if samples.is_empty() {
        return Err(Error::InsufficientData("KS test needs at least one sample".into()));
    }
    if samples.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::Domain("KS samples must be finite and >= 0".into()));
    }
    let n = samples.len();
    let d = ks_statistic(samples, |x| 1.0 - (-x).exp());
    // The p-value is strictly decreasing in the statistic: bisect for the
    // 5% critical value.
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if ks_p_value(n, mid) > 0.05 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(KsTest { n, statistic: d, p_value: ks_p_value(n, d), critical_5pct: 0.5 * (lo + hi) })
}

// ======================================================================
// Spearman rank autocorrelation
// ======================================================================

fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// Lag-1 Spearman rank correlation with a normal-approximation two-sided
/// p-value (`z = rho * sqrt(m - 1)` over the `m` consecutive pairs).
pub(crate) fn spearman_lag1(xs: &[f64]) -> (f64, f64) {
    let m = xs.len().saturating_sub(1);
    if m < 2 {
        return (0.0, 1.0);
    }
    let head = &xs[..m];
    let tail = &xs[1..];
    let rho = pearson(&average_ranks(head), &average_ranks(tail));
    let z = rho * ((m - 1) as f64).sqrt();
    let p = 2.0 * (1.0 - normal_cdf(z.abs()));
    (rho, p.clamp(0.0, 1.0))
}

// ======================================================================
// Residual reports
// ======================================================================

/// Time-change diagnostics for one component.
#[derive(Debug, Clone, Serialize)]
pub struct ResidualReport {
    /// Component index, 0-based.
    pub component: usize,
    /// Number of events of this component.
    pub n_events: usize,
    /// Compensator values at this component's event times.
    pub transformed_times: Vec<f64>,
    /// Increments of the transformed times; Exp(1) under the model.
    pub interarrivals: Vec<f64>,
    /// `1 - exp(-interarrival)`; uniform under the model.
    pub uniforms: Vec<f64>,
    /// KS test of the interarrivals against Exp(1); absent when the
    /// component has no events.
    pub ks: Option<KsTest>,
    /// Lag-1 Spearman autocorrelation of the interarrivals.
    pub spearman_rho: f64,
    pub spearman_p: f64,
}

/// Computes per-component time-change residual reports by replaying the
/// path through the model's compensator.
pub fn residual_reports(
    spec: &ModelSpec,
    path: &MarkedPath,
    lambda_init: Option<&Vector>,
    opts: &LikelihoodOptions,
) -> Result<Vec<ResidualReport>> {
    spec.ensure_valid()?;
    path.validate()?;
    path.counts(spec.dim)?;
    if opts.ode_steps_per_unit == 0 {
        return Err(Error::Domain("ode_steps_per_unit must be >= 1".into()));
    }

    let mut state = IntensityState::initial(spec, lambda_init)?;
    let mut transformed: Vec<Vec<f64>> = vec![Vec::new(); spec.dim];
    for ev in &path.events {
        state = crate::simulate::propagate(spec, &state, ev.time, opts.ode_steps_per_unit)?;
        transformed[ev.component].push(state.compensator.get(ev.component));
        state = apply_jump(spec, &state, ev.component, ev.mark)?;
    }

    let mut out = Vec::with_capacity(spec.dim);
    for (k, taus) in transformed.into_iter().enumerate() {
        let mut inter = Vec::with_capacity(taus.len());
        let mut prev = 0.0;
        for &t in &taus {
            inter.push(t - prev);
            prev = t;
        }
        let ks = if inter.is_empty() {
            None
        } else {
            Some(ks_test_unit_exponential(&inter)?)
        };
        let (rho, p) = spearman_lag1(&inter);
        let uniforms = inter.iter().map(|&d| 1.0 - (-d).exp()).collect();
        out.push(ResidualReport {
            component: k,
            n_events: taus.len(),
            transformed_times: taus,
            interarrivals: inter,
            uniforms,
            ks,
            spearman_rho: rho,
            spearman_p: p,
        });
    }
    Ok(out)
}

// ======================================================================
// Tests
// ======================================================================

#[cfg(test)]
mod tests {
    use super::*;
    use crate::likelihood::compensator;
    use crate::model::{sample_unit_exp, MarkModel};
    use crate::numerics::Matrix;
    use crate::simulate::{path_rng, simulate_path, SimConfig};

    // ---- scalar helpers ------------------------------------------------

    #[test]
    fn normal_cdf_reference_points() {
        // The rational erf approximation is good to ~1.5e-7.
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-7);
        assert!((normal_cdf(1.959964) - 0.975).abs() < 1e-6);
        assert!((normal_cdf(-1.0) + normal_cdf(1.0) - 1.0).abs() < 1e-12);
        assert!(normal_cdf(8.0) > 1.0 - 1e-7);
    }

    #[test]
    fn ks_statistic_hand_computed_case() {
        // x = [0.1, 0.5, 2.0] against Exp(1): the largest deviation is
        // 2/3 - F(0.5).
        let test = ks_test_unit_exponential(&[0.5, 0.1, 2.0]).unwrap();
        let expect = 2.0 / 3.0 - (1.0 - (-0.5f64).exp());
        assert!((test.statistic - expect).abs() < 1e-12);
        assert_eq!(test.n, 3);
    }

    #[test]
    fn kolmogorov_p_is_monotone_with_sane_limits() {
        assert!((ks_p_value(100, 1e-9) - 1.0).abs() < 1e-9);
        assert!(ks_p_value(100, 0.9) < 1e-10);
        let mut prev = 1.0;
        for i in 1..60 {
            let p = ks_p_value(50, i as f64 * 0.015);
            assert!(p <= prev + 1e-15);
            prev = p;
        }
    }

    #[test]
    fn critical_value_round_trips_to_five_percent() {
        for n in [3usize, 10, 50, 400] {
            let samples = vec![0.7; n];
            let test = ks_test_unit_exponential(&samples).unwrap();
            assert!(
                (ks_p_value(n, test.critical_5pct) - 0.05).abs() < 1e-6,
                "n = {n}: threshold does not invert the p-value"
            );
        }
    }

    #[test]
    fn ks_accepts_genuine_exponential_draws() {
        let mut rng = path_rng(2024, 0);
        let draws: Vec<f64> = (0..600).map(|_| sample_unit_exp(&mut rng)).collect();
        let test = ks_test_unit_exponential(&draws).unwrap();
        assert!(
            test.p_value > 0.05,
            "seeded Exp(1) sample should pass, p = {:.4}",
            test.p_value
        );
        assert!(test.statistic < test.critical_5pct);
    }

    #[test]
    fn ks_rejects_scaled_exponential_draws() {
        let mut rng = path_rng(2024, 1);
        let draws: Vec<f64> = (0..600).map(|_| 2.0 * sample_unit_exp(&mut rng)).collect();
        let test = ks_test_unit_exponential(&draws).unwrap();
        assert!(test.p_value < 1e-6, "rate-1/2 sample must fail, p = {}", test.p_value);
    }

    #[test]
    fn spearman_flags_alternating_sequence() {
        let xs: Vec<f64> = (0..80).map(|i| if i % 2 == 0 { 0.1 } else { 2.0 }).collect();
        let (rho, p) = spearman_lag1(&xs);
        assert!(rho < -0.9, "rho = {rho}");
        assert!(p < 1e-6);
    }

    #[test]
    fn spearman_is_quiet_on_independent_draws() {
        // Majority vote across seeded streams: individual streams can land
        // in the tail (that is what a calibrated test does 5% of the time).
        let mut quiet = 0;
        for stream in 0..10 {
            let mut rng = path_rng(7, stream);
            let xs: Vec<f64> = (0..500).map(|_| sample_unit_exp(&mut rng)).collect();
            let (rho, p) = spearman_lag1(&xs);
            if rho.abs() < 0.1 && p > 0.01 {
                quiet += 1;
            }
        }
        assert!(quiet >= 8, "only {quiet}/10 independent streams looked independent");
    }

    // ---- residual reports ----------------------------------------------

    fn truth_spec() -> ModelSpec {
        ModelSpec::linear(
            Vector::from_slice(&[0.6, 0.5]),
            Matrix::from_diag(&[-1.0, -0.8]),
            Matrix::from_rows(&[vec![0.4, 0.0], vec![0.2, 0.3]]).unwrap(),
            vec![MarkModel::ConstantExponential { rate: 1.0 }; 2],
        )
    }

    #[test]
    fn residuals_of_the_true_model_look_poisson() {
        let spec = truth_spec();
        let config = SimConfig { seed: 41, ..SimConfig::default() };
        let sim = simulate_path(&spec, 500.0, &config).unwrap();
        let reports =
            residual_reports(&spec, &sim.path, None, &LikelihoodOptions::default()).unwrap();
        assert_eq!(reports.len(), 2);
        for r in &reports {
            assert!(r.n_events > 100, "want a meaningful sample, got {}", r.n_events);
            // The transformed clock should tick at unit rate on average.
            let mean: f64 =
                r.interarrivals.iter().sum::<f64>() / r.interarrivals.len() as f64;
            assert!((mean - 1.0).abs() < 0.12, "mean interarrival {mean:.3}");
            let ks = r.ks.as_ref().unwrap();
            assert!(
                ks.p_value > 0.05,
                "component {}: true model rejected, p = {:.4}",
                r.component + 1,
                ks.p_value
            );
            assert!(r.spearman_p > 0.01, "serial dependence flagged: {}", r.spearman_rho);
        }
    }

    #[test]
    fn residuals_reject_a_misspecified_model() {
        let spec = truth_spec();
        let config = SimConfig { seed: 42, ..SimConfig::default() };
        let sim = simulate_path(&spec, 500.0, &config).unwrap();
        // A homogeneous Poisson surrogate with roughly matched counts.
        let counts = sim.path.counts(2).unwrap();
        let poisson = ModelSpec::linear(
            Vector::from_slice(&[
                counts[0] as f64 / sim.path.horizon,
                counts[1] as f64 / sim.path.horizon,
            ]),
            Matrix::zeros(2, 2),
            Matrix::zeros(2, 2),
            spec.marks.clone(),
        );
        let reports =
            residual_reports(&poisson, &sim.path, None, &LikelihoodOptions::default()).unwrap();
        let rejected = reports
            .iter()
            .any(|r| r.ks.as_ref().map_or(false, |k| k.p_value < 0.01));
        assert!(rejected, "clustered data must reject the Poisson surrogate");
    }

    #[test]
    fn transformed_times_are_monotone_and_bounded_by_the_compensator() {
        let spec = truth_spec();
        let config = SimConfig { seed: 43, ..SimConfig::default() };
        let sim = simulate_path(&spec, 120.0, &config).unwrap();
        let reports =
            residual_reports(&spec, &sim.path, None, &LikelihoodOptions::default()).unwrap();
        let total = compensator(&spec, &sim.path, None, &LikelihoodOptions::default()).unwrap();
        for r in &reports {
            assert_eq!(r.transformed_times.len(), r.n_events);
            assert_eq!(r.interarrivals.len(), r.n_events);
            let mut prev = 0.0;
            for &t in &r.transformed_times {
                assert!(t > prev, "transformed times must increase");
                prev = t;
            }
            assert!(prev <= total.get(r.component) + 1e-9);
        }
    }

    #[test]
    fn poisson_residuals_scale_event_gaps_exactly() {
        // For a homogeneous Poisson model, tau_i = lambda0 * t_i.
        use crate::model::PathEvent;
        let lambda0 = 0.7;
        let spec = ModelSpec::linear(
            Vector::from_slice(&[lambda0]),
            Matrix::zeros(1, 1),
            Matrix::zeros(1, 1),
            vec![MarkModel::ConstantExponential { rate: 1.0 }],
        );
        let times = [1.0, 2.5, 6.0];
        let path = MarkedPath::new(
            10.0,
            times
                .iter()
                .map(|&t| PathEvent { time: t, component: 0, mark: 1.0 })
                .collect(),
        )
        .unwrap();
        let reports = residual_reports(&spec, &path, None, &LikelihoodOptions::default()).unwrap();
        for (tau, t) in reports[0].transformed_times.iter().zip(times) {
            assert!((tau - lambda0 * t).abs() < 1e-12);
        }
    }

    #[test]
    fn component_without_events_reports_empty_diagnostics() {
        use crate::model::PathEvent;
        let spec = truth_spec();
        let path = MarkedPath::new(
            50.0,
            vec![PathEvent { time: 10.0, component: 0, mark: 1.0 }],
        )
        .unwrap();
        let reports = residual_reports(&spec, &path, None, &LikelihoodOptions::default()).unwrap();
        assert_eq!(reports[1].n_events, 0);
        assert!(reports[1].ks.is_none());
        assert_eq!(reports[1].spearman_p, 1.0);
    }

    #[test]
    fn input_validation_matches_the_likelihood_rules() {
        let spec = truth_spec();
        let path = MarkedPath::empty(10.0);
        assert!(residual_reports(&spec, &path, None, &LikelihoodOptions::default()).is_ok());
        assert!(ks_test_unit_exponential(&[]).is_err());
        assert!(ks_test_unit_exponential(&[1.0, -0.5]).is_err());
    }
}
