//! Command-line front end.
//!
//! Six subcommands cover the pipeline from raw prices to diagnostics:
//!
//! * `extract`   — two price CSVs → bivariate jump-event path
//! * `simulate`  — model spec → event paths (and intensity checkpoints)
//! * `fit`       — event path → maximum-likelihood fits, table + JSON
//! * `stability` — model spec → spectral stability verdict
//! * `moments`   — model spec → mean/second-moment curves, autocovariance
//! * `diagnose`  — spec + path → per-event intensities, intensity–mark
//!   bins and time-change residual tests
//!
//! Every artifact-producing run writes a JSON manifest next to its
//! outputs recording the subcommand, argument vector, input and output
//! digests, seed, tool version and wall time, so results can be traced
//! back to exactly what produced them.
//!
//! Exit codes: `0` success, `2` malformed input or arguments, `3` empty
//! extraction, `4` fit failure, `5` unstable model where stability is
//! required.
//!
//! `EXCITER_THREADS` bounds the worker pool used for multi-path
//! simulation; unset, the pool matches the visible CPUs.

use std::fs::File;
use std::io::{BufReader, Write as IoWrite};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::data::{
    self, extract_jumps, intensity_mark_profile, load_price_csv_path_columns, SignFilter,
};
use crate::error::{Error, Result};
use crate::estimate::{
    empirical_marks, fit, fit_all_variants, render_variant_table, FitOptions, FitResult,
};
use crate::io::{
    create_file, read_path_csv, read_spec_json_path, write_checkpoints_csv,
    write_moment_curve_csv, write_path_csv, RunManifest,
};
use crate::likelihood::LikelihoodOptions;
use crate::model::{MarkedPath, VariantId, VariantMask};
use crate::moments::{autocovariance_stationary, moment_curve, stability_report};
use crate::residuals::residual_reports;
use crate::simulate::{simulate_paths, SimConfig, DEFAULT_ODE_STEPS_PER_UNIT};

// ======================================================================
// Argument definitions
// ======================================================================

#[derive(Debug, Parser)]
#[command(
    name = "exciter",
    version,
    about = "Mutually exciting marked point processes: extraction, simulation, fitting, diagnostics"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Extract a bivariate jump-event path from two daily price CSVs.
    Extract(ExtractArgs),
    /// Simulate event paths from a model spec.
    Simulate(SimulateArgs),
    /// Fit model variants to an observed event path.
    Fit(FitArgs),
    /// Report the spectral stability of a model spec.
    Stability(StabilityArgs),
    /// Compute mean and second-moment curves and autocovariances.
    Moments(MomentsArgs),
    /// Per-event intensities, intensity-mark bins and residual tests.
    Diagnose(DiagnoseArgs),
}

#[derive(Debug, Args)]
struct ExtractArgs {
    /// Price CSV for market 1.
    prices_1: PathBuf,
    /// Price CSV for market 2.
    prices_2: PathBuf,
    /// Absolute log-return threshold defining a jump event.
    #[arg(long, default_value_t = 0.025)]
    threshold: f64,
    /// Which exceedances to keep: all, pos or neg.
    #[arg(long, default_value = "all")]
    sign: String,
    /// Output event-path CSV.
    #[arg(long)]
    out: PathBuf,
    /// Name of the date column in the price CSVs.
    #[arg(long, default_value = "Date")]
    date_column: String,
    /// Name of the close column in the price CSVs.
    #[arg(long, default_value = "Close")]
    close_column: String,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Model spec JSON.
    spec: PathBuf,
    /// Simulation horizon.
    #[arg(long = "T")]
    horizon: f64,
    /// Number of independent paths.
    #[arg(long, default_value_t = 1)]
    paths: usize,
    /// RNG seed; path i uses stream i of this seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (created if absent).
    #[arg(long)]
    out_dir: PathBuf,
    /// Also record intensity checkpoints every GRID time units.
    #[arg(long, value_name = "GRID")]
    grid: Option<f64>,
}

#[derive(Debug, Args)]
struct FitArgs {
    /// Event-path CSV.
    events: PathBuf,
    /// Variant to fit: I..VIII, or `all` for the nested sweep.
    #[arg(long)]
    variant: String,
    /// Extra jittered restarts per fit.
    #[arg(long, default_value_t = 4)]
    restarts: usize,
    /// RNG seed for restart jitter.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Optimizer iteration cap per start; 0 picks a cap from the
    /// parameter count.
    #[arg(long, default_value_t = 0)]
    max_iters: usize,
    /// Output FitResult JSON (single variant) or JSON array (`all`).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct StabilityArgs {
    /// Model spec JSON.
    spec: PathBuf,
}

#[derive(Debug, Args)]
struct MomentsArgs {
    /// Model spec JSON.
    spec: PathBuf,
    /// Time grid `start:end:step`, inclusive of both ends.
    #[arg(long)]
    grid: String,
    /// Stationary autocovariance lag; repeat for several lags.
    #[arg(long = "h", value_name = "LAG")]
    lags: Vec<f64>,
    /// Output directory (created if absent).
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct DiagnoseArgs {
    /// Model spec JSON.
    spec: PathBuf,
    /// Event-path CSV.
    events: PathBuf,
    /// Number of equal-count intensity bins per component.
    #[arg(long, default_value_t = 10)]
    bins: usize,
    /// Output directory (created if absent).
    #[arg(long)]
    out_dir: PathBuf,
}

// ======================================================================
// Entry point and plumbing
// ======================================================================

/// Parses arguments from the environment, runs the requested subcommand
/// and returns the process exit code.
pub fn run() -> i32 {
    configure_threads();
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli, &argv) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

/// Maps an error to the documented process exit code.
pub fn exit_code_for(e: &Error) -> i32 {
    match e {
        Error::EmptyExtraction(_) => 3,
        Error::FitFailure(_) => 4,
        Error::Unstable(_) | Error::BlowUp { .. } => 5,
        _ => 2,
    }
}

fn dispatch(cli: &Cli, argv: &[String]) -> Result<i32> {
    match &cli.command {
        Command::Extract(args) => cmd_extract(args, argv),
        Command::Simulate(args) => cmd_simulate(args, argv),
        Command::Fit(args) => cmd_fit(args, argv),
        Command::Stability(args) => cmd_stability(args),
        Command::Moments(args) => cmd_moments(args, argv),
        Command::Diagnose(args) => cmd_diagnose(args, argv),
    }
}

fn configure_threads() {
    if let Ok(v) = std::env::var("EXCITER_THREADS") {
        match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => eprintln!("warning: ignoring invalid EXCITER_THREADS value '{v}'"),
        }
    }
}

fn open_input(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::InvalidPath(format!("{}: {e}", path.display())))
}

fn read_events(path: &Path) -> Result<MarkedPath> {
    read_path_csv(open_input(path)?)
        .map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
            other => other,
        })
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::InvalidPath(format!("{}: {e}", dir.display())))
}

/// `events.csv` → `events.manifest.json`.
fn manifest_sibling(out: &Path) -> PathBuf {
    out.with_extension("manifest.json")
}

fn write_manifest(manifest: &mut RunManifest, path: &Path) -> Result<()> {
    manifest.stamp_now();
    let mut w = create_file(path)?;
    manifest.write(&mut w)?;
    w.flush()?;
    Ok(())
}

/// Parses an inclusive `start:end:step` grid specification.
fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 3 {
        return Err(Error::Format(format!(
            "grid '{s}' must have the form start:end:step"
        )));
    }
    let nums: Vec<f64> = parts
        .iter()
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| Error::Format(format!("grid '{s}': cannot parse '{p}' as a number")))
        })
        .collect::<Result<_>>()?;
    let (start, end, step) = (nums[0], nums[1], nums[2]);
    if !start.is_finite() || !end.is_finite() || !step.is_finite() {
        return Err(Error::Domain(format!("grid '{s}' must be finite")));
    }
    if start < 0.0 {
        return Err(Error::Domain(format!("grid start must be >= 0, got {start}")));
    }
    if step <= 0.0 {
        return Err(Error::Domain(format!("grid step must be > 0, got {step}")));
    }
    if end < start {
        return Err(Error::Domain(format!(
            "grid end {end} must not precede start {start}"
        )));
    }
    if (end - start) / step > 1e6 {
        return Err(Error::Domain(format!(
            "grid '{s}' would produce more than a million points"
        )));
    }
    let mut grid = Vec::new();
    let mut i = 0usize;
    loop {
        let t = start + i as f64 * step;
        if t > end + step * 1e-9 {
            break;
        }
        grid.push(t);
        i += 1;
    }
    Ok(grid)
}

// ======================================================================
// extract
// ======================================================================

fn cmd_extract(args: &ExtractArgs, argv: &[String]) -> Result<i32> {
    let filter = SignFilter::from_str(&args.sign)?;
    if !(args.threshold.is_finite() && args.threshold > 0.0) {
        return Err(Error::Domain(format!(
            "--threshold must be finite and > 0, got {}",
            args.threshold
        )));
    }
    let first =
        load_price_csv_path_columns(&args.prices_1, &args.date_column, &args.close_column)?;
    let second =
        load_price_csv_path_columns(&args.prices_2, &args.date_column, &args.close_column)?;
    let (path, summary) = extract_jumps(&first, &second, args.threshold, filter)?;

    let mut w = create_file(&args.out)?;
    write_path_csv(&mut w, &path)?;
    w.flush()?;

    let mut manifest = RunManifest::new("extract", argv.to_vec());
    manifest.record_input(&args.prices_1)?;
    manifest.record_input(&args.prices_2)?;
    manifest.record_file(&args.out)?;
    write_manifest(&mut manifest, &manifest_sibling(&args.out))?;

    println!(
        "extracted {} events ({} market-1, {} market-2) from {} trading days",
        path.len(),
        summary.counts[0],
        summary.counts[1],
        summary.days
    );
    println!(
        "threshold {} filter {} horizon {}{}",
        summary.threshold,
        summary.filter,
        summary.horizon,
        if summary.extended_half_day { " (extended for a closing market-2 event)" } else { "" }
    );
    if summary.dropped_rows.iter().any(|&d| d > 0) {
        println!(
            "dropped unusable price rows: {} (market 1), {} (market 2)",
            summary.dropped_rows[0], summary.dropped_rows[1]
        );
    }
    println!("wrote {}", args.out.display());
    Ok(0)
}

// ======================================================================
// simulate
// ======================================================================

fn cmd_simulate(args: &SimulateArgs, argv: &[String]) -> Result<i32> {
    let spec = read_spec_json_path(&args.spec)?;
    let config = SimConfig { seed: args.seed, record_grid: args.grid, ..SimConfig::default() };
    let sims = simulate_paths(&spec, args.horizon, &config, args.paths)?;

    ensure_dir(&args.out_dir)?;
    let mut manifest = RunManifest::new("simulate", argv.to_vec());
    manifest.set_seed(args.seed);
    manifest.record_input(&args.spec)?;

    let mut total_events = 0usize;
    for (i, sim) in sims.iter().enumerate() {
        let path_file = args.out_dir.join(format!("path_{i:03}.csv"));
        let mut w = create_file(&path_file)?;
        write_path_csv(&mut w, &sim.path)?;
        w.flush()?;
        manifest.record_file(&path_file)?;
        total_events += sim.path.len();

        if args.grid.is_some() {
            let cp_file = args.out_dir.join(format!("intensity_{i:03}.csv"));
            let mut w = create_file(&cp_file)?;
            write_checkpoints_csv(&mut w, &sim.checkpoints)?;
            w.flush()?;
            manifest.record_file(&cp_file)?;
        }
    }
    write_manifest(&mut manifest, &args.out_dir.join("manifest.json"))?;

    println!(
        "simulated {} path(s) over [0, {}], {} events total; wrote {}",
        args.paths,
        args.horizon,
        total_events,
        args.out_dir.display()
    );
    Ok(0)
}

// ======================================================================
// fit
// ======================================================================

fn cmd_fit(args: &FitArgs, argv: &[String]) -> Result<i32> {
    let path = read_events(&args.events)?;
    let marks = empirical_marks(&path, 2)?;
    let opts = FitOptions {
        seed: args.seed,
        restarts: args.restarts,
        max_iters: args.max_iters,
        ..FitOptions::default()
    };

    let fit_all = args.variant.eq_ignore_ascii_case("all");
    let results: Vec<FitResult> = if fit_all {
        fit_all_variants(&path, &marks, &opts)?
    } else {
        let variant = VariantId::from_str(&args.variant)?;
        let mask = VariantMask::for_variant(variant);
        vec![fit(&path, &mask, &marks, None, &opts)?]
    };

    let table = render_variant_table(&results);
    print!("{table}");

    let mut w = create_file(&args.out)?;
    if fit_all {
        serde_json::to_writer_pretty(&mut w, &results)
            .map_err(|e| Error::Format(format!("cannot encode fit results: {e}")))?;
    } else {
        serde_json::to_writer_pretty(&mut w, &results[0])
            .map_err(|e| Error::Format(format!("cannot encode fit result: {e}")))?;
    }
    writeln!(w)?;
    w.flush()?;

    let table_file = args.out.with_extension("table.txt");
    let mut tw = create_file(&table_file)?;
    tw.write_all(table.as_bytes())?;
    tw.flush()?;

    let mut manifest = RunManifest::new("fit", argv.to_vec());
    manifest.set_seed(args.seed);
    manifest.record_input(&args.events)?;
    manifest.record_file(&args.out)?;
    manifest.record_file(&table_file)?;
    write_manifest(&mut manifest, &manifest_sibling(&args.out))?;

    for r in &results {
        println!(
            "variant {}: log-lik {:.4}, gamma_max {:.4}, {}{}",
            r.variant,
            r.loglik,
            r.gamma_max,
            if r.converged { "converged" } else { "did not converge" },
            r.stderr_note.as_deref().map(|n| format!(" ({n})")).unwrap_or_default(),
        );
    }
    println!("wrote {} and {}", args.out.display(), table_file.display());

    // A single requested variant that fails to converge is a fit failure;
    // in a sweep the table itself is the deliverable and per-variant
    // convergence lives in the JSON.
    if !fit_all && !results[0].converged {
        eprintln!("error: variant {} did not converge", results[0].variant);
        return Ok(4);
    }
    Ok(0)
}

// ======================================================================
// stability
// ======================================================================

fn join_numbers(values: impl IntoIterator<Item = f64>) -> String {
    values.into_iter().map(|v| v.to_string()).collect::<Vec<_>>().join(", ")
}

fn cmd_stability(args: &StabilityArgs) -> Result<i32> {
    let spec = read_spec_json_path(&args.spec)?;
    let report = stability_report(&spec)?;
    println!("gamma: {}", join_numbers(report.gamma.iter().copied()));
    println!("gamma_max: {}", report.gamma_max);
    println!("stable: {}", report.stable);
    match &report.stationary_mean {
        Some(mean) => println!("stationary_mean: {}", join_numbers(mean.iter().copied())),
        None => println!("stationary_mean: none (unstable)"),
    }
    Ok(0)
}

// ======================================================================
// moments
// ======================================================================

fn cmd_moments(args: &MomentsArgs, argv: &[String]) -> Result<i32> {
    let spec = read_spec_json_path(&args.spec)?;
    let grid = parse_grid(&args.grid)?;
    for &h in &args.lags {
        if !(h.is_finite() && h >= 0.0) {
            return Err(Error::Domain(format!("--h lag must be finite and >= 0, got {h}")));
        }
    }

    // Fails with the unstable-model error (exit 5) before anything is
    // written when the spectral bound is violated.
    let curve = moment_curve(&spec, None, &grid, DEFAULT_ODE_STEPS_PER_UNIT)?;

    ensure_dir(&args.out_dir)?;
    let mut manifest = RunManifest::new("moments", argv.to_vec());
    manifest.record_input(&args.spec)?;

    let moments_file = args.out_dir.join("moments.csv");
    let mut w = create_file(&moments_file)?;
    write_moment_curve_csv(&mut w, &curve)?;
    w.flush()?;
    manifest.record_file(&moments_file)?;
    println!("wrote {} ({} rows)", moments_file.display(), grid.len());

    if !args.lags.is_empty() {
        let autocov_file = args.out_dir.join("autocov.csv");
        let mut w = create_file(&autocov_file)?;
        let d = spec.dim;
        let mut header = String::from("h");
        for i in 1..=d {
            for j in 1..=d {
                header.push_str(&format!(",c{i}{j}"));
            }
        }
        writeln!(w, "{header}")?;
        for &h in &args.lags {
            let c = autocovariance_stationary(&spec, h)?;
            let mut row = h.to_string();
            for i in 0..d {
                for j in 0..d {
                    row.push_str(&format!(",{}", c.get(i, j)));
                }
            }
            writeln!(w, "{row}")?;
        }
        w.flush()?;
        manifest.record_file(&autocov_file)?;
        println!("wrote {} ({} lags)", autocov_file.display(), args.lags.len());
    }

    write_manifest(&mut manifest, &args.out_dir.join("manifest.json"))?;
    Ok(0)
}

// ======================================================================
// diagnose
// ======================================================================

fn cmd_diagnose(args: &DiagnoseArgs, argv: &[String]) -> Result<i32> {
    let spec = read_spec_json_path(&args.spec)?;
    let path = read_events(&args.events)?;

    let records =
        data::event_intensity_records(&spec, &path, None, DEFAULT_ODE_STEPS_PER_UNIT)?;
    let bins = intensity_mark_profile(&spec, &path, None, DEFAULT_ODE_STEPS_PER_UNIT, args.bins)?;
    let reports = residual_reports(&spec, &path, None, &LikelihoodOptions::default())?;

    ensure_dir(&args.out_dir)?;
    let mut manifest = RunManifest::new("diagnose", argv.to_vec());
    manifest.record_input(&args.spec)?;
    manifest.record_input(&args.events)?;

    let diag_file = args.out_dir.join("diagnostics.csv");
    let mut w = create_file(&diag_file)?;
    writeln!(w, "t,k,lambda,y")?;
    for r in &records {
        writeln!(w, "{},{},{},{}", r.time, r.component + 1, r.intensity, r.mark)?;
    }
    w.flush()?;
    manifest.record_file(&diag_file)?;

    let bins_file = args.out_dir.join("bins.csv");
    let mut w = create_file(&bins_file)?;
    writeln!(w, "component,bin_lo,bin_hi,mean_abs_jump,count")?;
    for b in &bins {
        writeln!(
            w,
            "{},{},{},{},{}",
            b.component + 1,
            b.bin_lo,
            b.bin_hi,
            b.mean_abs_jump,
            b.count
        )?;
    }
    w.flush()?;
    manifest.record_file(&bins_file)?;

    let residuals_file = args.out_dir.join("residuals.json");
    let mut w = create_file(&residuals_file)?;
    serde_json::to_writer_pretty(&mut w, &reports)
        .map_err(|e| Error::Format(format!("cannot encode residual reports: {e}")))?;
    writeln!(w)?;
    w.flush()?;
    manifest.record_file(&residuals_file)?;

    write_manifest(&mut manifest, &args.out_dir.join("manifest.json"))?;

    for r in &reports {
        match &r.ks {
            Some(ks) => println!(
                "component {}: {} events, KS p = {:.4}, lag-1 Spearman rho = {:.4} (p = {:.4})",
                r.component + 1,
                r.n_events,
                ks.p_value,
                r.spearman_rho,
                r.spearman_p
            ),
            None => println!("component {}: {} events", r.component + 1, r.n_events),
        }
    }
    println!(
        "wrote {}, {} and {}",
        diag_file.display(),
        bins_file.display(),
        residuals_file.display()
    );
    Ok(0)
}

// ======================================================================
// Tests
// ======================================================================
