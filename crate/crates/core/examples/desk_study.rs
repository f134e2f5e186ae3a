//! Runs a small scaling study end to end and prints the headline numbers.
//!
//! Usage: `cargo run --release --example desk_study -- [config.toml] [out_dir]`

use std::path::PathBuf;
use std::time::Instant;

use navscale::experiment::{generate_dataset, hour_report, run_study, ExperimentConfig, StudyOptions};

fn main() -> navscale::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let cfg = match args.get(1) {
        Some(p) => ExperimentConfig::load(p.as_ref())?,
        None => ExperimentConfig::default(),
    };
    let out = PathBuf::from(args.get(2).cloned().unwrap_or_else(|| "target/desk_study".into()));
    let t0 = Instant::now();
    let data = generate_dataset(&cfg)?;
    eprintln!("data in {:.1}s\n{}", t0.elapsed().as_secs_f64(), hour_report(&data.dataset));
    let t1 = Instant::now();
    let report = run_study(&cfg, &data.dataset, &out, &StudyOptions::default())?;
    eprintln!("study in {:.1}s, {} failed", t1.elapsed().as_secs_f64(), report.failed.len());
    for (k, e) in &report.failed {
        eprintln!("  {} {e}", k.label());
    }
    if let Some(s) = report.summary {
        for m in &s.medians {
            println!("n={:<3} h={:<8} median success {:.3}", m.n_locations, m.hours_per_location, m.median_success_rate);
        }
        for f in &s.fits {
            println!("{} {}: alpha {:.3} r {:?} points {}", f.view, f.fixed, f.alpha, f.r, f.n_points);
        }
    }
    Ok(())
}
