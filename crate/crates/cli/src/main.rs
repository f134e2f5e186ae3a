//! `navscale` command-line interface.
//!
//! Grids and all experiment parameters live in a TOML config; flags only
//! name paths, parallelism and resume limits.
//!
//! Exit codes: 0 success, 1 usage or runtime error, 2 infeasible config,
//! 3 partial failures.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use navscale::analysis::CellKey;
use navscale::curation::read_episodes_jsonl;
use navscale::exec::{configure_workers, WORKERS_ENV};
use navscale::experiment::{
    analyze_study, compare_policies, curate_raw, eval_checkpoint, generate_dataset, hour_report, load_dataset_for,
    plot_study, run_study, save_dataset, train_cell, ExperimentConfig, StudyOptions,
};
use navscale::Error;

#[derive(Parser)]
#[command(name = "navscale", version, about = "Data-diversity scaling lab for map-free point-goal navigation")]
struct Cli {
    /// Worker threads for the data-parallel pool.
    #[arg(long, global = true, env = WORKERS_ENV)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate worlds, drive expert episodes, curate them and write the dataset.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Curate a raw episode log into demonstrations and a manifest.
    Curate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        raw: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the policy of one grid cell (defaults to the first cell and seed).
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Grid cell as `locations:hours_per_location`.
        #[arg(long, value_parser = parse_cell)]
        cell: Option<(usize, f64)>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on the held-out test routes.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Outcome CSV to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate every (cell, seed) job, then analyze. Resumable.
    ScalingStudy {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Stop after this many new jobs; rerun to resume.
        #[arg(long)]
        max_jobs: Option<usize>,
    },
    /// Zero-shot vs scale + in-domain vs in-domain-only comparison.
    ComparePolicies {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate a completed study into tables and power-law fits.
    Analyze {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        results: PathBuf,
    },
    /// Render log-log failure-rate plots for an analyzed study.
    Plot {
        #[arg(long)]
        results: PathBuf,
    },
}

fn parse_cell(s: &str) -> Result<(usize, f64), String> {
    let (n, h) = s.split_once(':').ok_or("expected locations:hours")?;
    let n = n.trim().parse().map_err(|e| format!("locations: {e}"))?;
    let h = h.trim().parse().map_err(|e| format!("hours: {e}"))?;
    Ok((n, h))
}

enum Outcome {
    Done,
    Partial,
}

fn run(cli: Cli) -> navscale::Result<Outcome> {
    configure_workers(cli.workers);
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let data = generate_dataset(&cfg)?;
            save_dataset(&data, &cfg, &out)?;
            print!("{}", hour_report(&data.dataset));
            println!("data digest {}", data.dataset.data_digest);
        }
        Command::Curate { config, raw, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let episodes = read_episodes_jsonl(&raw)?;
            let (demos, manifest) = curate_raw(&cfg, &episodes, &out)?;
            println!("{} episodes -> {} demonstrations", episodes.len(), demos.len());
            for c in &manifest.clusters {
                println!(
                    "cluster {:>3} {:<8} {:>4} demos {:>8.3} h",
                    c.cluster.id,
                    format!("{:?}", c.split).to_lowercase(),
                    c.demos.len(),
                    c.hours
                );
            }
        }
        Command::Train {
            config,
            data,
            out,
            cell,
            seed,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let dataset = load_dataset_for(&cfg, &data)?;
            let (n, h) = match cell {
                Some(c) => c,
                None => *cfg.cells().first().ok_or_else(|| Error::Config("config has no grid cells".into()))?,
            };
            let key = CellKey {
                n_locations: n,
                hours_per_location: h,
                seed: seed.unwrap_or(cfg.seeds[0]),
            };
            let policy = train_cell(&cfg, &dataset, &key, &out)?;
            println!("trained {} ({} parameters) into {}", key.label(), policy.num_params(), out.display());
        }
        Command::Eval {
            config,
            data,
            checkpoint,
            out,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let dataset = load_dataset_for(&cfg, &data)?;
            let id = checkpoint
                .parent()
                .and_then(|p| p.file_name())
                .map_or("policy".to_string(), |s| s.to_string_lossy().into_owned());
            let rows = eval_checkpoint(&cfg, &dataset, &checkpoint, &out, &id)?;
            let ok = rows.iter().filter(|r| r.success).count();
            println!("{ok}/{} segments succeeded", rows.len());
        }
        Command::ScalingStudy {
            config,
            data,
            out,
            max_jobs,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let dataset = load_dataset_for(&cfg, &data)?;
            let report = run_study(&cfg, &dataset, &out, &StudyOptions { max_jobs })?;
            println!(
                "{} trained, {} reused, {} failed, {} pending",
                report.completed.len(),
                report.skipped.len(),
                report.failed.len(),
                report.pending.len()
            );
            for (k, e) in &report.failed {
                eprintln!("{}: {e}", k.label());
            }
            if let Some(s) = &report.summary {
                for m in &s.medians {
                    println!(
                        "n={:<3} h={:<8} median success {:.3}",
                        m.n_locations, m.hours_per_location, m.median_success_rate
                    );
                }
            }
            if !report.failed.is_empty() {
                return Ok(Outcome::Partial);
            }
        }
        Command::ComparePolicies { config, data, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let dataset = load_dataset_for(&cfg, &data)?;
            let report = compare_policies(&cfg, &dataset, &out)?;
            println!("exclusion audit passed: {}", report.audit.passed);
            println!("{:<16} {:>7} {:>7} {:>15} {:>7} {:>7} {:>8}", "variant", "hours", "success", "95% ci", "nir", "nps", "dist");
            let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.2}"));
            for r in &report.rows {
                println!(
                    "{:<16} {:>7.3} {:>7.3} {:>7.3}-{:<7.3} {:>7} {:>7} {:>8}",
                    r.variant,
                    r.train_hours,
                    r.success_rate,
                    r.ci_low,
                    r.ci_high,
                    opt(r.nir),
                    opt(r.nps),
                    opt(r.dist_m)
                );
            }
        }
        Command::Analyze { config, results } => {
            let cfg = ExperimentConfig::load(&config)?;
            let s = analyze_study(&cfg, &results)?;
            for f in &s.fits {
                println!(
                    "{} {}: alpha {:.3}, r {}, doubling reduction {:.3}",
                    f.view,
                    f.fixed,
                    f.alpha,
                    f.r.map_or("-".into(), |r| format!("{r:.3}")),
                    f.doubling_reduction
                );
            }
        }
        Command::Plot { results } => {
            for p in plot_study(&results)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(Outcome::Done)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::Partial) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Infeasible(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
