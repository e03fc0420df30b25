//! End-to-end pipeline on the bundled sample data.
//!
//! Loads the two committed price series, extracts threshold exceedances
//! into a bivariate marked event path on the trading-day clock, fits the
//! whole nested variant ladder with per-component empirical marks, and
//! prints the comparison table. With a handful of events the estimates
//! are anecdotal; the point is the shape of the pipeline.
//!
//! Usage: `cargo run --release --example extract_and_fit [threshold]`

use exciter::data::{extract_jumps, load_price_csv_path, SignFilter};
use exciter::estimate::empirical_marks;
use exciter::{fit_all_variants, render_variant_table, FitOptions};

fn data(name: &str) -> String {
    format!("{}/tests/data/{name}", env!("CARGO_MANIFEST_DIR"))
}

fn main() -> exciter::Result<()> {
    let threshold: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0.025);

    let a = load_price_csv_path(data("series_a.csv"))?;
    let b = load_price_csv_path(data("series_b.csv"))?;
    let (path, summary) = extract_jumps(&a, &b, threshold, SignFilter::All)?;
    println!(
        "extracted {} + {} events above |log return| {} over {} trading days (horizon {})",
        summary.counts[0], summary.counts[1], threshold, summary.days, summary.horizon
    );
    for e in &path.events {
        println!("  t = {:>5.1}  component {}  mark {:.4}", e.time, e.component + 1, e.mark);
    }

    let marks = empirical_marks(&path, 2)?;
    let opts = FitOptions { restarts: 2, ..FitOptions::default() };
    println!("\nfitting the nested variant ladder ...");
    let results = fit_all_variants(&path, &marks, &opts)?;
    print!("{}", render_variant_table(&results));
    Ok(())
}
