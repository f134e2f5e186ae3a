use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use navscale::analysis::CellKey;
use navscale::experiment::{cell_dir, load_dataset, read_study_summary, sha256_file, MANIFEST_FILE};

const TINY: &str = r#"
seeds = [0]
location_counts = [2]
total_hours = 0.1
extra_cells = []
hidden = [16, 16]

[data]
train_locations = 4
hours_per_location = 0.05
in_domain_hours = 0.02

[train]
epochs = 1
batch_size = 64

[eval]
test_locations = 1
reps = 1

[eval.route]
segments = 2
"#;

fn navscale(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_navscale"))
        .args(args)
        .env("NAVSCALE_WORKERS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = navscale(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Lab {
    _tmp: tempfile::TempDir,
    root: PathBuf,
}

impl Lab {
    fn new(config: &str) -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        fs::write(root.join("config.toml"), config).unwrap();
        Self { _tmp: tmp, root }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn gen(&self) {
        ok(&["gen-data", "--config", s(&self.path("config.toml")), "--out", s(&self.path("data"))]);
    }

    fn study(&self, out: &str, extra: &[&str]) -> Output {
        let (c, d, o) = (self.path("config.toml"), self.path("data"), self.path(out));
        let mut args = vec!["scaling-study", "--config", s(&c), "--data", s(&d), "--out", s(&o)];
        args.extend(extra);
        navscale(&args)
    }
}

fn files_named(dir: &Path, name: &str) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files_named(&p, name));
        } else if p.file_name().is_some_and(|f| f == name) {
            out.push(p);
        }
    }
    out.sort();
    out
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(navscale(&[]).status.code(), Some(1));
    assert_eq!(navscale(&["train"]).status.code(), Some(1));
    assert_eq!(navscale(&["train", "--config", "a", "--data", "b", "--out", "c", "--cell", "x"]).status.code(), Some(1));
    assert_eq!(navscale(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_config_is_a_runtime_error() {
    let out = navscale(&["plot", "--results", "/nonexistent/navscale"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn infeasible_grid_exits_two() {
    let lab = Lab::new(TINY);
    lab.gen();
    // One location cannot supply a full hour.
    let big = TINY.replace("total_hours = 0.1", "total_hours = 1.0");
    fs::write(lab.path("config.toml"), &big).unwrap();
    let out = lab.study("study", &[]);
    // The data digest is unchanged, so only feasibility can fail.
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

fn header_line(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

#[test]
fn single_cell_study_end_to_end() {
    let lab = Lab::new(TINY);
    lab.gen();
    let out = lab.study("study", &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let study = lab.path("study");
    assert_eq!(files_named(&study, "policy.ckpt").len(), 1);
    let outcomes = files_named(&study, "outcomes.csv");
    assert_eq!(outcomes.len(), 1);
    let h = header_line(&outcomes[0]);
    assert!(h.starts_with("# navscale kind=outcomes config_digest="), "{h}");
    assert!(h.contains(" seed=0"), "{h}");
    let summary = read_study_summary(&study).unwrap();
    assert_eq!(summary.checkpoints.len(), 1);
    assert!(study.join(&summary.outcome_files[0]).exists());

    // Analysis is idempotent; plots land next to it.
    let cfg = lab.path("config.toml");
    ok(&["analyze", "--config", s(&cfg), "--results", s(&study)]);
    let plots = String::from_utf8(ok(&["plot", "--results", s(&study)]).stdout).unwrap();
    assert!(plots.lines().all(|p| p.ends_with(".svg") && Path::new(p).exists()));
}

const GRID: &str = r#"
seeds = [0, 1]
location_counts = [1, 2, 4]
total_hours = 0.05
extra_cells = [[1, 0.025], [2, 0.0125], [4, 0.025]]
hidden = [16, 16]

[data]
train_locations = 4
hours_per_location = 0.05
in_domain_hours = 0.0

[train]
epochs = 1
batch_size = 64

[eval]
test_locations = 1
reps = 1

[eval.route]
segments = 2
"#;

#[test]
fn grid_study_resumes_to_identical_outputs() {
    let lab = Lab::new(GRID);
    lab.gen();
    assert!(lab.study("full", &[]).status.success());
    let full = lab.path("full");
    let ckpts = files_named(&full, "policy.ckpt");
    assert_eq!(ckpts.len(), 12);
    let summary = read_study_summary(&full).unwrap();
    let mut listed: Vec<PathBuf> = summary.checkpoints.iter().map(|c| full.join(c)).collect();
    listed.sort();
    assert_eq!(listed, ckpts);

    // Interrupted after five jobs, then resumed.
    let first = lab.study("resumed", &["--max-jobs", "5"]);
    assert!(first.status.success());
    let resumed = lab.path("resumed");
    assert_eq!(files_named(&resumed, "outcomes.csv").len(), 5);
    assert!(!resumed.join("analysis").exists());
    let second = lab.study("resumed", &[]);
    assert!(second.status.success());
    assert!(String::from_utf8_lossy(&second.stdout).contains("7 trained, 5 reused"));

    for name in ["policy.ckpt", "outcomes.csv", "loss.csv", "summary.json"] {
        let a: Vec<String> = files_named(&full, name).iter().map(|p| sha256_file(p).unwrap()).collect();
        let b: Vec<String> = files_named(&resumed, name).iter().map(|p| sha256_file(p).unwrap()).collect();
        assert!(!a.is_empty());
        assert_eq!(a, b, "{name} differs after resume");
    }
    // A third run has nothing to do.
    let third = lab.study("resumed", &[]);
    assert!(String::from_utf8_lossy(&third.stdout).contains("0 trained, 12 reused"));
}

#[test]
fn gen_data_is_reproducible_and_hours_add_up() {
    let lab = Lab::new(TINY);
    lab.gen();
    // Rerunning into the same directory is a no-op.
    lab.gen();
    let cfg = lab.path("config.toml");
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&lab.path("again"))]);
    assert_eq!(
        sha256_file(&lab.path("data").join(MANIFEST_FILE)).unwrap(),
        sha256_file(&lab.path("again").join(MANIFEST_FILE)).unwrap()
    );

    let data = load_dataset(&lab.path("data")).unwrap();
    for loc in &data.locations {
        let prefix = format!("{}-", loc.name);
        let secs: f64 = data
            .demos
            .iter()
            .filter(|d| d.episode_id.starts_with(&prefix))
            .map(|d| d.duration_s())
            .sum();
        assert!((loc.hours - secs / 3600.0).abs() < 1e-9, "{}", loc.name);
    }
    let listed: f64 = data.manifest.clusters.iter().map(|c| c.hours).sum();
    let total: f64 = data.demos.iter().map(|d| d.duration_s()).sum::<f64>() / 3600.0;
    assert!((listed - total).abs() < 1e-9);
}

#[test]
fn train_then_eval_single_checkpoint() {
    let lab = Lab::new(TINY);
    lab.gen();
    let (cfg, data) = (lab.path("config.toml"), lab.path("data"));
    let run = lab.path("run");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run), "--cell", "2:0.05", "--seed", "4"]);
    let ckpt = run.join("policy.ckpt");
    let csv = lab.path("outcomes.csv");
    let out = ok(&["eval", "--config", s(&cfg), "--data", s(&data), "--checkpoint", s(&ckpt), "--out", s(&csv)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("/2 segments succeeded"));
    assert!(header_line(&csv).contains(" seed=4"));
    // Retraining the same cell reuses the checkpoint; a different cell
    // cannot overwrite it.
    let before = sha256_file(&ckpt).unwrap();
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run), "--cell", "2:0.05", "--seed", "4"]);
    assert_eq!(sha256_file(&ckpt).unwrap(), before);
    let clash = navscale(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run), "--cell", "2:0.05", "--seed", "5"]);
    assert_eq!(clash.status.code(), Some(1));
    assert_eq!(sha256_file(&ckpt).unwrap(), before);
}

#[test]
fn curate_raw_log() {
    let lab = Lab::new(&TINY.replace("in_domain_hours = 0.02", "in_domain_hours = 0.02\nkeep_raw = true"));
    lab.gen();
    let (cfg, raw) = (lab.path("config.toml"), lab.path("data").join("raw_episodes.jsonl"));
    let out = ok(&["curate", "--config", s(&cfg), "--raw", s(&raw), "--out", s(&lab.path("curated"))]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("demonstrations"));
    // Curating the generator's own raw logs reproduces its demonstrations.
    assert_eq!(
        sha256_file(&lab.path("curated").join("demos.jsonl")).unwrap(),
        sha256_file(&lab.path("data").join("demos.jsonl")).unwrap()
    );
}

#[test]
fn corrupt_cell_is_a_partial_failure() {
    let lab = Lab::new(GRID.replace("seeds = [0, 1]", "seeds = [0]").as_str());
    lab.gen();
    let key = CellKey {
        n_locations: 2,
        hours_per_location: 0.025,
        seed: 0,
    };
    let dir = cell_dir(&lab.path("study"), &key);
    fs::create_dir_all(&dir).unwrap();
    fs::write(dir.join("policy.ckpt"), b"not a checkpoint").unwrap();
    let out = lab.study("study", &[]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains(&key.label()));
    assert_eq!(files_named(&lab.path("study"), "outcomes.csv").len(), 5);
    let log = fs::read_to_string(lab.path("study").join("study_log.csv")).unwrap();
    assert_eq!(log.lines().filter(|l| l.ends_with(",done")).count(), 5);
    assert_eq!(log.lines().filter(|l| l.contains(",failed: ")).count(), 1);
}

fn data_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn compare_policies_table_matches_outcome_files() {
    let lab = Lab::new(&TINY.replace("seeds = [0]", "seeds = [0, 1]"));
    lab.gen();
    let (cfg, data, out) = (lab.path("config.toml"), lab.path("data"), lab.path("compare"));
    ok(&["compare-policies", "--config", s(&cfg), "--data", s(&data), "--out", s(&out)]);
    let audit: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("audit.json")).unwrap()).unwrap();
    assert_eq!(audit["passed"], serde_json::Value::Bool(true));

    let table = data_rows(&out.join("table.csv"));
    assert_eq!(table.len(), 3);
    for row in &table {
        let (mut successes, mut trials) = (0, 0);
        for seed in ["s0", "s1"] {
            for r in data_rows(&out.join(&row[0]).join(seed).join("outcomes.csv")) {
                trials += 1;
                successes += (r[4] == "true") as usize;
            }
        }
        assert_eq!(row[2], successes.to_string(), "{}", row[0]);
        assert_eq!(row[3], trials.to_string(), "{}", row[0]);
    }
    // A rerun reuses every outcome file and reproduces the table.
    let before = sha256_file(&out.join("table.csv")).unwrap();
    ok(&["compare-policies", "--config", s(&cfg), "--data", s(&data), "--out", s(&out)]);
    assert_eq!(sha256_file(&out.join("table.csv")).unwrap(), before);
}

#[test]
fn compare_without_in_domain_data_is_infeasible() {
    let lab = Lab::new(&TINY.replace("in_domain_hours = 0.02", "in_domain_hours = 0.0"));
    lab.gen();
    let (cfg, data, out) = (lab.path("config.toml"), lab.path("data"), lab.path("compare"));
    let r = navscale(&["compare-policies", "--config", s(&cfg), "--data", s(&data), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));
}
