//! Price-series ingestion and event extraction.
//!
//! Two daily close-price series become a bivariate marked event path in
//! three steps:
//!
//! 1. per-series log returns `r_i = ln(close_i / close_{i-1})`, dated at
//!    the later of the two days;
//! 2. a union calendar of all dates carrying a return in either series,
//!    indexed `1..n` in date order — days one series skips (holidays,
//!    missing data) still advance the other's clock;
//! 3. threshold exceedances become events: a day-`i` exceedance of the
//!    first series lands at `t = i`, one of the second series at
//!    `t = i + 0.5`. The half-day offset encodes "series one trades at
//!    the open, series two at the close" and guarantees the merged path
//!    has no simultaneous points. Marks are the absolute log returns.
//!
//! The observation horizon is `T = n`, extended to `n + 0.5` only when
//! the second series fires on the last calendar day (the path must cover
//! its final event). Sign filters restrict extraction to positive or
//! negative exceedances; by construction the two filtered paths
//! partition the unfiltered one.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MarkedPath, ModelSpec, PathEvent};
use crate::numerics::Vector;
use crate::simulate::{apply_jump, propagate, IntensityState};

// ======================================================================
// Loading
// ======================================================================

/// A cleaned daily close-price series.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceSeries {
    pub dates: Vec<NaiveDate>,
    pub closes: Vec<f64>,
    /// Rows discarded for missing, unparseable or non-positive closes.
    pub dropped_rows: usize,
}

/// Reads a `date,close` CSV with the default column names. See
/// [`load_price_csv_columns`].
pub fn load_price_csv(reader: impl Read) -> Result<PriceSeries> {
    load_price_csv_columns(reader, "Date", "Close")
}

/// Reads a price CSV with configurable column names (matched
/// case-insensitively). Dates must be ISO (`YYYY-MM-DD`) and strictly
/// increasing; violations are hard format errors naming the row.
/// Missing, unparseable or non-positive closes are soft problems: the row
/// is dropped and counted in [`PriceSeries::dropped_rows`].
pub fn load_price_csv_columns(
    reader: impl Read,
    date_column: &str,
    close_column: &str,
) -> Result<PriceSeries> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Format(format!("cannot read CSV header: {e}")))?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
    let date_col = col(date_column)
        .ok_or_else(|| Error::Format(format!("price CSV needs a '{date_column}' column")))?;
    let close_col = col(close_column)
        .ok_or_else(|| Error::Format(format!("price CSV needs a '{close_column}' column")))?;

    let mut dates = Vec::new();
    let mut closes = Vec::new();
    let mut dropped = 0usize;
    let mut prev_date: Option<NaiveDate> = None;
    for (i, record) in rdr.records().enumerate() {
        let row = i + 2; // 1-based, after the header line
        let record = record.map_err(|e| Error::Format(format!("row {row}: {e}")))?;
        let date_str = record.get(date_col).unwrap_or("");
        let date = NaiveDate::parse_from_str(date_str, "%Y-%m-%d").map_err(|_| {
            Error::Format(format!("row {row}: cannot parse date '{date_str}' as YYYY-MM-DD"))
        })?;
        if let Some(prev) = prev_date {
            if date <= prev {
                return Err(Error::Format(format!(
                    "row {row}: dates must be strictly increasing ({date} after {prev})"
                )));
            }
        }
        prev_date = Some(date);
        let close_str = record.get(close_col).unwrap_or("");
        match close_str.parse::<f64>() {
            Ok(c) if c.is_finite() && c > 0.0 => {
                dates.push(date);
                closes.push(c);
            }
            _ => dropped += 1, // missing, unparseable, or non-positive
        }
    }
    if dates.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "need at least 2 usable price rows to form returns, got {}",
            dates.len()
        )));
    }
    Ok(PriceSeries { dates, closes, dropped_rows: dropped })
}

/// [`load_price_csv`] from a filesystem path, wrapping the open error
/// with the offending path.
pub fn load_price_csv_path(path: impl AsRef<Path>) -> Result<PriceSeries> {
    load_price_csv_path_columns(path, "Date", "Close")
}

/// [`load_price_csv_columns`] from a filesystem path.
pub fn load_price_csv_path_columns(
    path: impl AsRef<Path>,
    date_column: &str,
    close_column: &str,
) -> Result<PriceSeries> {
    let path = path.as_ref();
    let file = File::open(path)
        .map_err(|e| Error::InvalidPath(format!("{}: {e}", path.display())))?;
    load_price_csv_columns(file, date_column, close_column)
}

// ======================================================================
// Returns and extraction
// ======================================================================

/// A log return dated at the later of its two price days.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DatedReturn {
    pub date: NaiveDate,
    pub value: f64,
}

/// Daily log returns of a price series.
pub fn log_returns(series: &PriceSeries) -> Vec<DatedReturn> {
    series
        .closes
        .windows(2)
        .zip(series.dates.iter().skip(1))
        .map(|(w, &date)| DatedReturn { date, value: (w[1] / w[0]).ln() })
        .collect()
}

/// Which exceedances to keep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignFilter {
    /// `|r| > threshold`.
    All,
    /// `r > threshold`.
    PositiveOnly,
    /// `r < -threshold`.
    NegativeOnly,
}

impl SignFilter {
    fn keeps(self, r: f64, threshold: f64) -> bool {
        match self {
            SignFilter::All => r.abs() > threshold,
            SignFilter::PositiveOnly => r > threshold,
            SignFilter::NegativeOnly => r < -threshold,
        }
    }
}

impl FromStr for SignFilter {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "all" => Ok(SignFilter::All),
            "pos" | "positive" => Ok(SignFilter::PositiveOnly),
            "neg" | "negative" => Ok(SignFilter::NegativeOnly),
            other => Err(Error::Format(format!(
                "unknown sign filter '{other}' (use all, pos or neg)"
            ))),
        }
    }
}

impl std::fmt::Display for SignFilter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SignFilter::All => "all",
            SignFilter::PositiveOnly => "pos",
            SignFilter::NegativeOnly => "neg",
        })
    }
}

/// What an extraction run did.
#[derive(Debug, Clone, Serialize)]
pub struct ExtractionSummary {
    /// Union calendar length `n`.
    pub days: usize,
    pub horizon: f64,
    pub threshold: f64,
    pub filter: SignFilter,
    /// Events per component.
    pub counts: Vec<usize>,
    /// True when a last-day event of the second series pushed the horizon
    /// to `n + 0.5`.
    pub extended_half_day: bool,
    /// Dropped price rows carried over from loading, per series.
    pub dropped_rows: [usize; 2],
}

/// Extracts the bivariate jump path from two price series (see the module
/// docs for the calendar and offset conventions). Fails with an
/// empty-extraction error when no return exceeds the threshold.
pub fn extract_jumps(
    first: &PriceSeries,
    second: &PriceSeries,
    threshold: f64,
    filter: SignFilter,
) -> Result<(MarkedPath, ExtractionSummary)> {
    if !(threshold.is_finite() && threshold > 0.0) {
        return Err(Error::Domain(format!(
            "threshold must be finite and > 0, got {threshold}"
        )));
    }
    let returns = [log_returns(first), log_returns(second)];
    if returns[0].is_empty() || returns[1].is_empty() {
        return Err(Error::InsufficientData(
            "both series must contribute at least one return".into(),
        ));
    }

    // Union calendar, indexed from 1 in date order.
    let mut day_index: BTreeMap<NaiveDate, usize> = BTreeMap::new();
    for r in returns.iter().flatten() {
        day_index.insert(r.date, 0);
    }
    for (i, (_, v)) in day_index.iter_mut().enumerate() {
        *v = i + 1;
    }
    let n = day_index.len();

    let mut events = Vec::new();
    for (component, rs) in returns.iter().enumerate() {
        let offset = if component == 0 { 0.0 } else { 0.5 };
        for r in rs {
            if filter.keeps(r.value, threshold) {
                let t = day_index[&r.date] as f64 + offset;
                events.push(PathEvent { time: t, component, mark: r.value.abs() });
            }
        }
    }
    if events.is_empty() {
        return Err(Error::EmptyExtraction(format!(
            "no {filter} log-return exceedances above {threshold} across {n} days"
        )));
    }
    events.sort_by(|a, b| a.time.partial_cmp(&b.time).unwrap());

    let mut horizon = n as f64;
    let extended = events.last().map_or(false, |e| e.time > horizon);
    if extended {
        horizon += 0.5;
    }
    let path = MarkedPath::new(horizon, events)?;
    let counts = path.counts(2)?;
    let summary = ExtractionSummary {
        days: n,
        horizon,
        threshold,
        filter,
        counts,
        extended_half_day: extended,
        dropped_rows: [first.dropped_rows, second.dropped_rows],
    };
    Ok((path, summary))
}

// ======================================================================
// Intensity–mark diagnostic
// ======================================================================

/// One event together with the pre-event intensity of its own component.
#[derive(Debug, Clone, Serialize)]
pub struct EventIntensityRecord {
    pub time: f64,
    /// Component index, 0-based.
    pub component: usize,
    /// λ_k(t−), clamped at zero.
    pub intensity: f64,
    pub mark: f64,
}

/// Replays a path under `spec` and records, for every event, the
/// intensity of the firing component just before the jump.
pub fn event_intensity_records(
    spec: &ModelSpec,
    path: &MarkedPath,
    lambda_init: Option<&Vector>,
    ode_steps_per_unit: usize,
) -> Result<Vec<EventIntensityRecord>> {
    spec.ensure_valid()?;
    path.validate()?;
    path.counts(spec.dim)?;
    if ode_steps_per_unit == 0 {
        return Err(Error::Domain("ode_steps_per_unit must be >= 1".into()));
    }

    let mut state = IntensityState::initial(spec, lambda_init)?;
    let mut records = Vec::with_capacity(path.len());
    for ev in &path.events {
        state = propagate(spec, &state, ev.time, ode_steps_per_unit)?;
        records.push(EventIntensityRecord {
            time: ev.time,
            component: ev.component,
            intensity: state.lambda.get(ev.component).max(0.0),
            mark: ev.mark,
        });
        state = apply_jump(spec, &state, ev.component, ev.mark)?;
    }
    Ok(records)
}

/// One equal-count bin of a component's intensity–mark scatter.
#[derive(Debug, Clone, Serialize)]
pub struct MarkBin {
    /// Component index, 0-based.
    pub component: usize,
    /// Smallest pre-event intensity in the bin.
    pub bin_lo: f64,
    /// Largest pre-event intensity in the bin.
    pub bin_hi: f64,
    pub mean_intensity: f64,
    /// Mean absolute mark in the bin.
    pub mean_abs_jump: f64,
    pub count: usize,
}

/// Bins each component's events by their pre-event own-component
/// intensity (equal-count bins, sorted by intensity) and reports the mean
/// absolute mark per bin. A rising profile is evidence that marks scale
/// with the intensity. Components without events contribute no bins.
pub fn intensity_mark_profile(
    spec: &ModelSpec,
    path: &MarkedPath,
    lambda_init: Option<&Vector>,
    ode_steps_per_unit: usize,
    bins: usize,
) -> Result<Vec<MarkBin>> {
    if bins == 0 {
        return Err(Error::Domain("bins must be >= 1".into()));
    }
    if path.is_empty() {
        return Err(Error::InsufficientData(
            "intensity-mark profile needs at least one event".into(),
        ));
    }
    let records = event_intensity_records(spec, path, lambda_init, ode_steps_per_unit)?;

    let mut out = Vec::new();
    for k in 0..spec.dim {
        let mut pairs: Vec<(f64, f64)> = records
            .iter()
            .filter(|r| r.component == k)
            .map(|r| (r.intensity, r.mark.abs()))
            .collect();
        if pairs.is_empty() {
            continue;
        }
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());

        let n = pairs.len();
        let nbins = bins.min(n);
        let base = n / nbins;
        let extra = n % nbins; // the first `extra` bins take one more element
        let mut start = 0;
        for b in 0..nbins {
            let len = base + usize::from(b < extra);
            let chunk = &pairs[start..start + len];
            start += len;
            let count = chunk.len();
            let mean_intensity = chunk.iter().map(|p| p.0).sum::<f64>() / count as f64;
            let mean_abs_jump = chunk.iter().map(|p| p.1).sum::<f64>() / count as f64;
            out.push(MarkBin {
                component: k,
                bin_lo: chunk[0].0,
                bin_hi: chunk[count - 1].0,
                mean_intensity,
                mean_abs_jump,
                count,
            });
        }
    }
    Ok(out)
}

// ======================================================================
// Tests
// ======================================================================
