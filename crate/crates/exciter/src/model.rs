//! Model specification and parameterisation.
//!
//! A model is a d-dimensional intensity process `lambda(t)` with baseline
//! `lambda0`, drift matrix `A`, excitation matrix `B` and one mark
//! distribution per component. Between events the intensity follows the
//! deterministic drift; an event of component `k` with mark `y > 0` kicks
//! the intensity by `B e_k y` (column `k` of `B` scaled by the mark).
//!
//! Two drift families are supported:
//!
//! * linear: `mu(lambda) = A (lambda - lambda0)`
//! * exponential regime: `mu(lambda) = (A + D e^{-c ||lambda||^2}) (lambda - lambda0)`
//!   with diagonal `D` and `c > 0`, so the effective mean-reversion matrix
//!   interpolates between `A + D` near zero intensity and `A` at high
//!   intensity.
//!
//! [`VariantMask`] and [`ParamMap`] define the masked parameterisations
//! used for maximum likelihood in two dimensions: eight named variants
//! that free or zero the off-diagonal entries of `A` and `B` and
//! optionally add the nonlinear drift parameters `(c, d1, d2)`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Vector};

/// Hard cap on the intensity dimension. Everything in the crate is tuned
/// for small systems; augmented matrices stay at most 16x16 under this cap.
pub const MAX_DIM: usize = 8;

// ======================================================================
// Drift
// ======================================================================

/// Drift family of the intensity SDE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DriftKind {
    /// `mu(lambda) = A (lambda - lambda0)`.
    Linear,
    /// `mu(lambda) = (A + D e^{-c ||lambda||^2}) (lambda - lambda0)` with
    /// diagonal `D` and `c > 0`.
    ExpRegime {
        #[serde(rename = "D")]
        d: Matrix,
        c: f64,
    },
}

// ======================================================================
// Marks
// ======================================================================

/// Mark distribution attached to one component. Marks are strictly
/// positive; `moment` exposes the first two raw moments used by the
/// stability criterion and the second-moment ODE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum MarkModel {
    /// Exponential with the given rate (mean `1/rate`).
    ConstantExponential { rate: f64 },
    /// Lognormal: `exp(mu + sigma Z)`.
    ConstantLognormal { mu: f64, sigma: f64 },
    /// Uniform draw from a fixed sample set, e.g. observed magnitudes.
    Empirical { samples: Vec<f64> },
    /// Lognormal whose log-mean shifts with the current intensity level:
    /// `log Y ~ N(m0 + m1 log(1 + ||lambda||), sigma^2)`. The only
    /// intensity-dependent family; it is excluded from closed-form
    /// stability and moment formulas.
    IntensityScaledLognormal { m0: f64, m1: f64, sigma: f64 },
}

impl MarkModel {
    /// True when the distribution does not depend on the running intensity,
    /// which is what the closed-form moment machinery requires.
    pub fn is_constant(&self) -> bool {
        !matches!(self, MarkModel::IntensityScaledLognormal { .. })
    }

    fn log_mean(m0: f64, m1: f64, lambda: &Vector) -> f64 {
        m0 + m1 * (1.0 + lambda.norm2()).ln()
    }

    /// Raw moment `E[Y^order]` for `order` in {1, 2}, evaluated at the
    /// given intensity (ignored by the constant families).
    pub fn moment(&self, order: u32, lambda: &Vector) -> f64 {
        assert!(order == 1 || order == 2, "only the first two moments are defined");
        let n = order as f64;
        match self {
            MarkModel::ConstantExponential { rate } => {
                if order == 1 {
                    1.0 / rate
                } else {
                    2.0 / (rate * rate)
                }
            }
            MarkModel::ConstantLognormal { mu, sigma } => {
                (n * mu + 0.5 * n * n * sigma * sigma).exp()
            }
            MarkModel::Empirical { samples } => {
                samples.iter().map(|y| y.powi(order as i32)).sum::<f64>() / samples.len() as f64
            }
            MarkModel::IntensityScaledLognormal { m0, m1, sigma } => {
                let mu = Self::log_mean(*m0, *m1, lambda);
                (n * mu + 0.5 * n * n * sigma * sigma).exp()
            }
        }
    }

    /// Draws one mark at the given pre-event intensity.
    pub fn sample<R: Rng>(&self, lambda: &Vector, rng: &mut R) -> f64 {
        match self {
            MarkModel::ConstantExponential { rate } => sample_unit_exp(rng) / rate,
            MarkModel::ConstantLognormal { mu, sigma } => {
                (mu + sigma * sample_standard_normal(rng)).exp()
            }
            MarkModel::Empirical { samples } => {
                let idx = ((rng.gen::<f64>() * samples.len() as f64) as usize)
                    .min(samples.len() - 1);
                samples[idx]
            }
            MarkModel::IntensityScaledLognormal { m0, m1, sigma } => {
                let mu = Self::log_mean(*m0, *m1, lambda);
                (mu + sigma * sample_standard_normal(rng)).exp()
            }
        }
    }

    fn validate(&self, field: &str, out: &mut Vec<Violation>) {
        match self {
            MarkModel::ConstantExponential { rate } => {
                if !(rate.is_finite() && *rate > 0.0) {
                    out.push(Violation::new(field, "exponential rate must be finite and > 0"));
                }
            }
            MarkModel::ConstantLognormal { mu, sigma } => {
                if !mu.is_finite() {
                    out.push(Violation::new(field, "lognormal mu must be finite"));
                }
                if !(sigma.is_finite() && *sigma > 0.0) {
                    out.push(Violation::new(field, "lognormal sigma must be finite and > 0"));
                }
            }
            MarkModel::Empirical { samples } => {
                if samples.is_empty() {
                    out.push(Violation::new(field, "empirical sample set must be non-empty"));
                } else if !samples.iter().all(|y| y.is_finite() && *y > 0.0) {
                    out.push(Violation::new(field, "empirical samples must be finite and > 0"));
                }
            }
            MarkModel::IntensityScaledLognormal { m0, m1, sigma } => {
                if !(m0.is_finite() && m1.is_finite()) {
                    out.push(Violation::new(field, "m0 and m1 must be finite"));
                }
                if !(sigma.is_finite() && *sigma > 0.0) {
                    out.push(Violation::new(field, "sigma must be finite and > 0"));
                }
            }
        }
    }
}

// ======================================================================
// Sampling helpers
// ======================================================================

/// Unit-rate exponential by inverse transform; `1 - u` keeps the argument
/// of `ln` strictly positive for `u` in `[0, 1)`.
pub(crate) fn sample_unit_exp<R: Rng>(rng: &mut R) -> f64 {
    let u: f64 = rng.gen();
    -(1.0 - u).ln()
}

/// Standard normal via Box-Muller (one draw per call keeps the stream
/// layout simple and reproducible).
pub(crate) fn sample_standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>(); // in (0, 1]
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

// ======================================================================
// Model spec
// ======================================================================

/// Complete specification of one model: dimension, baseline, drift and
/// excitation matrices, drift family and one mark model per component.
///
/// The struct is plain data; [`ModelSpec::validate`] reports every
/// violated constraint and the simulation/likelihood entry points insist
/// on a clean report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Number of components, between 1 and [`MAX_DIM`].
    #[serde(rename = "d")]
    pub dim: usize,
    /// Baseline (reversion-target) intensity, entrywise non-negative.
    pub lambda0: Vector,
    /// Drift matrix.
    #[serde(rename = "A")]
    pub a: Matrix,
    /// Excitation matrix, entrywise non-negative.
    #[serde(rename = "B")]
    pub b: Matrix,
    pub drift: DriftKind,
    /// One mark distribution per component.
    pub marks: Vec<MarkModel>,
}

/// One failed validation rule: the offending field plus a human-readable
/// statement of the rule.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

impl Violation {
    fn new(field: &str, rule: &str) -> Self {
        Violation { field: field.to_string(), rule: rule.to_string() }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

impl ModelSpec {
    /// Linear-drift spec; the dimension is taken from `lambda0`.
    pub fn linear(lambda0: Vector, a: Matrix, b: Matrix, marks: Vec<MarkModel>) -> Self {
        let dim = lambda0.dim();
        ModelSpec { dim, lambda0, a, b, drift: DriftKind::Linear, marks }
    }

    /// Exponential-regime spec with diagonal regime matrix `d_diag` and
    /// decay rate `c`.
    pub fn exp_regime(
        lambda0: Vector,
        a: Matrix,
        b: Matrix,
        d_diag: &[f64],
        c: f64,
        marks: Vec<MarkModel>,
    ) -> Self {
        let dim = lambda0.dim();
        ModelSpec {
            dim,
            lambda0,
            a,
            b,
            drift: DriftKind::ExpRegime { d: Matrix::from_diag(d_diag), c },
            marks,
        }
    }

    /// Checks every structural constraint and returns the full list of
    /// violations (empty when the spec is usable).
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.dim == 0 || self.dim > MAX_DIM {
            out.push(Violation::new("d", &format!("dimension must be in 1..={MAX_DIM}")));
        }
        if self.lambda0.dim() != self.dim {
            out.push(Violation::new("lambda0", "length must equal d"));
        }
        if !self.lambda0.all_finite() || self.lambda0.iter().any(|x| *x < 0.0) {
            out.push(Violation::new("lambda0", "entries must be finite and >= 0"));
        }
        if self.a.rows() != self.dim || self.a.cols() != self.dim {
            out.push(Violation::new("A", "must be a d x d matrix"));
        }
        if !self.a.all_finite() {
            out.push(Violation::new("A", "entries must be finite"));
        }
        if self.b.rows() != self.dim || self.b.cols() != self.dim {
            out.push(Violation::new("B", "must be a d x d matrix"));
        }
        if !self.b.all_finite() {
            out.push(Violation::new("B", "entries must be finite"));
        } else {
            let mut neg = false;
            for i in 0..self.b.rows() {
                for j in 0..self.b.cols() {
                    neg |= self.b.get(i, j) < 0.0;
                }
            }
            if neg {
                out.push(Violation::new("B", "entries must be >= 0 (excitation only)"));
            }
        }
        if let DriftKind::ExpRegime { d, c } = &self.drift {
            if d.rows() != self.dim || d.cols() != self.dim {
                out.push(Violation::new("drift.D", "must be a d x d matrix"));
            } else {
                let mut off = false;
                for i in 0..d.rows() {
                    for j in 0..d.cols() {
                        off |= i != j && d.get(i, j) != 0.0;
                    }
                }
                if off {
                    out.push(Violation::new("drift.D", "must be diagonal"));
                }
            }
            if !d.all_finite() {
                out.push(Violation::new("drift.D", "entries must be finite"));
            }
            if !(c.is_finite() && *c > 0.0) {
                out.push(Violation::new("drift.c", "must be finite and > 0"));
            }
        }
        if self.marks.len() != self.dim {
            out.push(Violation::new("marks", "must contain exactly one entry per component"));
        }
        for (k, mark) in self.marks.iter().enumerate() {
            mark.validate(&format!("marks[{k}]"), &mut out);
        }
        out
    }

    /// Shape-and-finiteness subset of [`ModelSpec::validate`]: enough for
    /// the likelihood machinery, which must stay evaluable at
    /// sign-violating parameters visited by the optimizer (the fit
    /// penalty, not a hard error, pushes those back into the admissible
    /// region).
    pub fn ensure_structural(&self) -> Result<()> {
        if self.dim == 0 || self.dim > MAX_DIM {
            return Err(Error::InvalidSpec(format!("d: dimension must be in 1..={MAX_DIM}")));
        }
        if self.lambda0.dim() != self.dim || !self.lambda0.all_finite() {
            return Err(Error::InvalidSpec(
                "lambda0: must have length d with finite entries".into(),
            ));
        }
        for (name, m) in [("A", &self.a), ("B", &self.b)] {
            if m.rows() != self.dim || m.cols() != self.dim || !m.all_finite() {
                return Err(Error::InvalidSpec(format!(
                    "{name}: must be a finite d x d matrix"
                )));
            }
        }
        if let DriftKind::ExpRegime { d, c } = &self.drift {
            if d.rows() != self.dim || d.cols() != self.dim || !d.all_finite() {
                return Err(Error::InvalidSpec("drift.D: must be a finite d x d matrix".into()));
            }
            if !c.is_finite() {
                return Err(Error::InvalidSpec("drift.c: must be finite".into()));
            }
        }
        if self.marks.len() != self.dim {
            return Err(Error::InvalidSpec(
                "marks: must contain exactly one entry per component".into(),
            ));
        }
        Ok(())
    }

    /// Like [`ModelSpec::validate`] but collapses violations into an error.
    pub fn ensure_valid(&self) -> Result<()> {
        let violations = self.validate();
        if violations.is_empty() {
            Ok(())
        } else {
            let text: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
            Err(Error::InvalidSpec(text.join("; ")))
        }
    }

    /// Deterministic drift `mu(lambda)` at the given intensity.
    pub fn drift_eval(&self, lambda: &Vector) -> Result<Vector> {
        let mut out = Vector::zeros(self.dim);
        self.drift_eval_into(lambda.as_slice(), out.as_mut_slice())?;
        Ok(out)
    }

    /// Allocation-free [`ModelSpec::drift_eval`] writing into `out`. This
    /// is the inner loop of ODE propagation, where per-call allocations
    /// dominate the runtime.
    pub fn drift_eval_into(&self, lambda: &[f64], out: &mut [f64]) -> Result<()> {
        let dim = self.dim;
        if lambda.len() != dim || out.len() != dim {
            return Err(Error::Dimension(format!(
                "drift_eval: intensity has dimension {}, model has {dim}",
                lambda.len()
            )));
        }
        if !lambda.iter().all(|x| x.is_finite()) {
            return Err(Error::Domain("drift_eval: intensity must be finite".into()));
        }
        let l0 = self.lambda0.as_slice();
        for i in 0..dim {
            let mut acc = 0.0;
            for j in 0..dim {
                acc += self.a.get(i, j) * (lambda[j] - l0[j]);
            }
            out[i] = acc;
        }
        if let DriftKind::ExpRegime { d, c } = &self.drift {
            let norm2: f64 = lambda.iter().map(|x| x * x).sum();
            let weight = (-c * norm2).exp();
            if weight > 0.0 {
                for i in 0..dim {
                    out[i] += weight * d.get(i, i) * (lambda[i] - l0[i]);
                }
            }
        }
        Ok(())
    }

    /// True when every mark distribution is intensity-independent, the
    /// prerequisite for the closed-form moment and stability formulas.
    pub fn has_constant_marks(&self) -> bool {
        self.marks.iter().all(MarkModel::is_constant)
    }
}

// ======================================================================
// Event paths
// ======================================================================

/// One event: time, component (0-based) and strictly positive mark.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathEvent {
    pub time: f64,
    pub component: usize,
    pub mark: f64,
}

/// A realisation of the marked point process on `(0, horizon]` with
/// strictly increasing event times. A zero horizon is the degenerate
/// empty path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkedPath {
    pub horizon: f64,
    pub events: Vec<PathEvent>,
}

impl MarkedPath {
    pub fn new(horizon: f64, events: Vec<PathEvent>) -> Result<Self> {
        let path = MarkedPath { horizon, events };
        path.validate()?;
        Ok(path)
    }

    pub fn empty(horizon: f64) -> Self {
        MarkedPath { horizon, events: Vec::new() }
    }

    /// Re-checks the container invariants (used by entry points that
    /// accept paths built elsewhere).
    pub fn validate(&self) -> Result<()> {
        if !self.horizon.is_finite() || self.horizon < 0.0 {
            return Err(Error::InvalidPath(format!(
                "horizon must be finite and >= 0, got {}",
                self.horizon
            )));
        }
        let mut prev = 0.0;
        for (i, ev) in self.events.iter().enumerate() {
            if !ev.time.is_finite() || ev.time <= prev {
                return Err(Error::InvalidPath(format!(
                    "event {i}: times must be strictly increasing in (0, horizon], got {} after {}",
                    ev.time, prev
                )));
            }
            if ev.time > self.horizon {
                return Err(Error::InvalidPath(format!(
                    "event {i}: time {} exceeds horizon {}",
                    ev.time, self.horizon
                )));
            }
            if !ev.mark.is_finite() || ev.mark <= 0.0 {
                return Err(Error::InvalidPath(format!(
                    "event {i}: marks must be finite and > 0, got {}",
                    ev.mark
                )));
            }
            if ev.component >= MAX_DIM {
                return Err(Error::InvalidPath(format!(
                    "event {i}: component {} exceeds the dimension cap {MAX_DIM}",
                    ev.component
                )));
            }
            prev = ev.time;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Event counts per component; errors if any event lies outside `0..dim`.
    pub fn counts(&self, dim: usize) -> Result<Vec<usize>> {
        let mut counts = vec![0usize; dim];
        for ev in &self.events {
            if ev.component >= dim {
                return Err(Error::Dimension(format!(
                    "path references component {} but the model has dimension {dim}",
                    ev.component + 1
                )));
            }
            counts[ev.component] += 1;
        }
        Ok(counts)
    }
}

// ======================================================================
// Fitting variants
// ======================================================================

/// The eight masked two-dimensional parameterisations used for maximum
/// likelihood. Roman numerals follow the usual presentation: I is fully
/// diagonal, II frees all couplings, III/IV free only `B`/`A` couplings,
/// V/VI keep one triangle, and VII/VIII add the nonlinear drift triple
/// `(c, d1, d2)` on top of II and V.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VariantId {
    I,
    II,
    III,
    IV,
    V,
    VI,
    VII,
    VIII,
}

impl VariantId {
    pub const ALL: [VariantId; 8] = [
        VariantId::I,
        VariantId::II,
        VariantId::III,
        VariantId::IV,
        VariantId::V,
        VariantId::VI,
        VariantId::VII,
        VariantId::VIII,
    ];
}

impl fmt::Display for VariantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            VariantId::I => "I",
            VariantId::II => "II",
            VariantId::III => "III",
            VariantId::IV => "IV",
            VariantId::V => "V",
            VariantId::VI => "VI",
            VariantId::VII => "VII",
            VariantId::VIII => "VIII",
        };
        f.write_str(s)
    }
}

impl FromStr for VariantId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "I" | "1" => Ok(VariantId::I),
            "II" | "2" => Ok(VariantId::II),
            "III" | "3" => Ok(VariantId::III),
            "IV" | "4" => Ok(VariantId::IV),
            "V" | "5" => Ok(VariantId::V),
            "VI" | "6" => Ok(VariantId::VI),
            "VII" | "7" => Ok(VariantId::VII),
            "VIII" | "8" => Ok(VariantId::VIII),
            other => Err(Error::Domain(format!(
                "unknown variant '{other}' (expected I..VIII)"
            ))),
        }
    }
}

/// Which entries of a two-dimensional model are free parameters. Masked
/// entries are pinned to zero; the diagonal of `A` and `B`, and both
/// baselines, are always free.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VariantMask {
    pub variant: VariantId,
    pub free_a12: bool,
    pub free_a21: bool,
    pub free_b12: bool,
    pub free_b21: bool,
    /// Adds `(c, d1, d2)` and switches the drift to the exponential regime.
    pub nonlinear: bool,
}

impl VariantMask {
    pub fn for_variant(variant: VariantId) -> Self {
        let (a12, a21, b12, b21, nl) = match variant {
            VariantId::I => (false, false, false, false, false),
            VariantId::II => (true, true, true, true, false),
            VariantId::III => (false, false, true, true, false),
            VariantId::IV => (true, true, false, false, false),
            VariantId::V => (false, true, false, true, false),
            VariantId::VI => (true, false, true, false, false),
            VariantId::VII => (true, true, true, true, true),
            VariantId::VIII => (false, true, false, true, true),
        };
        VariantMask {
            variant,
            free_a12: a12,
            free_a21: a21,
            free_b12: b12,
            free_b21: b21,
            nonlinear: nl,
        }
    }

    /// Number of free parameters.
    pub fn free_count(&self) -> usize {
        6 + usize::from(self.free_a12)
            + usize::from(self.free_a21)
            + usize::from(self.free_b12)
            + usize::from(self.free_b21)
            + if self.nonlinear { 3 } else { 0 }
    }

    pub fn param_map(&self) -> ParamMap {
        ParamMap::from_mask(self)
    }
}

/// One free parameter location inside a [`ModelSpec`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamSlot {
    Lambda0(usize),
    A(usize, usize),
    B(usize, usize),
    /// Decay rate of the exponential regime.
    RegimeC,
    /// Diagonal entry `k` of the regime matrix `D`.
    RegimeD(usize),
}

/// Ordered list of free-parameter slots. Packing reads the slots out of a
/// spec; unpacking writes them into a zero-initialised spec (so masked
/// entries are exactly zero). The canonical order for the two-dimensional
/// variants is `lambda01, lambda02, a11, [a12], [a21], a22, b11, [b12],
/// [b21], b22, [c, d1, d2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamMap {
    pub dim: usize,
    pub slots: Vec<ParamSlot>,
    pub nonlinear: bool,
}

impl ParamMap {
    pub fn from_mask(mask: &VariantMask) -> Self {
        let mut slots = vec![ParamSlot::Lambda0(0), ParamSlot::Lambda0(1), ParamSlot::A(0, 0)];
        if mask.free_a12 {
            slots.push(ParamSlot::A(0, 1));
        }
        if mask.free_a21 {
            slots.push(ParamSlot::A(1, 0));
        }
        slots.push(ParamSlot::A(1, 1));
        slots.push(ParamSlot::B(0, 0));
        if mask.free_b12 {
            slots.push(ParamSlot::B(0, 1));
        }
        if mask.free_b21 {
            slots.push(ParamSlot::B(1, 0));
        }
        slots.push(ParamSlot::B(1, 1));
        if mask.nonlinear {
            slots.push(ParamSlot::RegimeC);
            slots.push(ParamSlot::RegimeD(0));
            slots.push(ParamSlot::RegimeD(1));
        }
        ParamMap { dim: 2, slots, nonlinear: mask.nonlinear }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Human-readable parameter names in slot order.
    pub fn names(&self) -> Vec<String> {
        self.slots
            .iter()
            .map(|slot| match slot {
                ParamSlot::Lambda0(k) => format!("lambda0{}", k + 1),
                ParamSlot::A(i, j) => format!("a{}{}", i + 1, j + 1),
                ParamSlot::B(i, j) => format!("b{}{}", i + 1, j + 1),
                ParamSlot::RegimeC => "c".to_string(),
                ParamSlot::RegimeD(k) => format!("d{}", k + 1),
            })
            .collect()
    }

    fn slot_positions(&self) -> SlotIndex {
        let mut idx = SlotIndex::default();
        for slot in &self.slots {
            match slot {
                ParamSlot::Lambda0(k) => idx.lambda0.push(*k),
                ParamSlot::A(i, j) => idx.a.push((*i, *j)),
                ParamSlot::B(i, j) => idx.b.push((*i, *j)),
                ParamSlot::RegimeC => {}
                ParamSlot::RegimeD(k) => idx.d.push(*k),
            }
        }
        idx
    }

    /// Reads the free parameters out of `spec` in slot order. Fails if the
    /// spec's dimension or drift family disagrees with the map, or if any
    /// masked entry is non-zero (the spec then does not belong to this
    /// parameterisation).
    pub fn pack(&self, spec: &ModelSpec) -> Result<Vec<f64>> {
        if spec.dim != self.dim {
            return Err(Error::Dimension(format!(
                "pack: spec has dimension {}, parameter map expects {}",
                spec.dim, self.dim
            )));
        }
        let regime = match (&spec.drift, self.nonlinear) {
            (DriftKind::Linear, false) => None,
            (DriftKind::ExpRegime { d, c }, true) => Some((d, *c)),
            (DriftKind::Linear, true) => {
                return Err(Error::Domain(
                    "pack: map expects an exponential-regime drift, spec is linear".into(),
                ))
            }
            (DriftKind::ExpRegime { .. }, false) => {
                return Err(Error::Domain(
                    "pack: map expects a linear drift, spec has an exponential regime".into(),
                ))
            }
        };
        let idx = self.slot_positions();
        // Masked entries must be exactly zero.
        for i in 0..self.dim {
            for j in 0..self.dim {
                if !idx.a.contains(&(i, j)) && spec.a.get(i, j) != 0.0 {
                    return Err(Error::Domain(format!(
                        "pack: masked entry a{}{} is non-zero",
                        i + 1,
                        j + 1
                    )));
                }
                if !idx.b.contains(&(i, j)) && spec.b.get(i, j) != 0.0 {
                    return Err(Error::Domain(format!(
                        "pack: masked entry b{}{} is non-zero",
                        i + 1,
                        j + 1
                    )));
                }
            }
            if !idx.lambda0.contains(&i) && spec.lambda0.get(i) != 0.0 {
                return Err(Error::Domain(format!(
                    "pack: masked entry lambda0{} is non-zero",
                    i + 1
                )));
            }
        }
        if let Some((d, _)) = regime {
            for k in 0..self.dim {
                if !idx.d.contains(&k) && d.get(k, k) != 0.0 {
                    return Err(Error::Domain(format!("pack: masked entry d{} is non-zero", k + 1)));
                }
            }
        }
        Ok(self
            .slots
            .iter()
            .map(|slot| match slot {
                ParamSlot::Lambda0(k) => spec.lambda0.get(*k),
                ParamSlot::A(i, j) => spec.a.get(*i, *j),
                ParamSlot::B(i, j) => spec.b.get(*i, *j),
                ParamSlot::RegimeC => regime.expect("checked above").1,
                ParamSlot::RegimeD(k) => regime.expect("checked above").0.get(*k, *k),
            })
            .collect())
    }

    /// Builds a spec from a parameter vector: masked entries are zero,
    /// marks and dimension come from `template`.
    pub fn unpack(&self, theta: &[f64], template: &ModelSpec) -> Result<ModelSpec> {
        if theta.len() != self.slots.len() {
            return Err(Error::Dimension(format!(
                "unpack: got {} parameters, map has {} slots",
                theta.len(),
                self.slots.len()
            )));
        }
        if template.dim != self.dim {
            return Err(Error::Dimension(format!(
                "unpack: template has dimension {}, parameter map expects {}",
                template.dim, self.dim
            )));
        }
        if !theta.iter().all(|x| x.is_finite()) {
            return Err(Error::Domain("unpack: parameters must be finite".into()));
        }
        let mut lambda0 = Vector::zeros(self.dim);
        let mut a = Matrix::zeros(self.dim, self.dim);
        let mut b = Matrix::zeros(self.dim, self.dim);
        let mut d = Matrix::zeros(self.dim, self.dim);
        let mut c = 0.0;
        for (slot, &value) in self.slots.iter().zip(theta) {
            match slot {
                ParamSlot::Lambda0(k) => lambda0.set(*k, value),
                ParamSlot::A(i, j) => a.set(*i, *j, value),
                ParamSlot::B(i, j) => b.set(*i, *j, value),
                ParamSlot::RegimeC => c = value,
                ParamSlot::RegimeD(k) => d.set(*k, *k, value),
            }
        }
        let drift = if self.nonlinear { DriftKind::ExpRegime { d, c } } else { DriftKind::Linear };
        Ok(ModelSpec {
            dim: self.dim,
            lambda0,
            a,
            b,
            drift,
            marks: template.marks.clone(),
        })
    }
}

#[derive(Default)]
struct SlotIndex {
    lambda0: Vec<usize>,
    a: Vec<(usize, usize)>,
    b: Vec<(usize, usize)>,
    d: Vec<usize>,
}

/// Convenience wrappers with the two-dimensional variant masks.
pub fn pack_params(spec: &ModelSpec, mask: &VariantMask) -> Result<Vec<f64>> {
    mask.param_map().pack(spec)
}

pub fn unpack_params(theta: &[f64], mask: &VariantMask, template: &ModelSpec) -> Result<ModelSpec> {
    mask.param_map().unpack(theta, template)
}

// ======================================================================
// Tests
// ======================================================================
