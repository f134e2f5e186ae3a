//! End-to-end pipeline: synthetic crowd data, nested scaling subsets,
//! training, closed-loop evaluation and aggregation.
//!
//! Artifacts are written once. Text files start with a `#` provenance line
//! carrying the config digest and seed, JSON files carry a `header` object
//! and checkpoints embed the same header, so every result can be traced
//! back to the config that produced it. Re-running a command with the same
//! config finds its own outputs by digest and skips them.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{
    aggregate, doubling_reduction, fit_failure_rates, loglog_svg, median, write_csv, CellKey, FitSummary, PlotSeries,
    Tables, ViewRow,
};
use crate::curation::{
    curate_episode, geo_exclusion_split, subset_cells, ActionLimits, CurationConfig, DatasetManifest, DemoDataset,
    Demonstration, RawEpisode, RawSample, Split, SubsetManifest, EXCLUSION_RADIUS_M,
};
use crate::error::{Error, Result};
use crate::evalharness::{
    evaluate, generate_route, mean_dist_to_first_failure, nir, nps, read_outcomes_csv, success_rate,
    write_outcomes_csv, MlpNav, OutcomeRow, RouteParams, RouteSpec, SimConfig,
};
use crate::exec::{self, seed_mix};
use crate::expert::{drive, plan_route, polyline_length, walk_points, DriveConfig, OperatorProfile};
use crate::geokit::{haversine_m, min_distance_to_sites, ClusterParams, GeoPoint};
use crate::policy::{train, write_loss_csv, MlpPolicy, PolicyArch, TrainConfig, TrainOutput, Variant};
use crate::simworld::{generate_location_with, GenParams, World, CONTROL_DT};

/// Held-out test sites: name, latitude, longitude.
pub const TEST_SITES: [(&str, f64, f64); 4] = [
    ("wuhan", 30.48244, 114.30264),
    ("kisumu", -0.11052, 34.75131),
    ("port-louis", -20.17148, 57.49782),
    ("selebi-phikwe", -21.98324, 27.83091),
];

/// Training anchors keep at least this distance from every test site.
pub const ANCHOR_CLEARANCE_M: f64 = 200_000.0;

const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_locations: usize,
    /// Curated hours generated at every training location.
    pub hours_per_location: f64,
    /// Curated hours generated at each test location for in-domain variants.
    pub in_domain_hours: f64,
    pub world_seed: u64,
    /// Shortest planned route driven as one episode.
    pub episode_min_m: f64,
    /// Per-episode operator speed factor is drawn from this range.
    pub speed_factor_range: (f64, f64),
    pub profile: OperatorProfile,
    pub drive: DriveConfig,
    pub curation: CurationConfig,
    pub world: GenParams,
    /// Keep full raw logs (with observations) for `raw_episodes.jsonl`.
    pub keep_raw: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_locations: 16,
            hours_per_location: 2.0,
            in_domain_hours: 0.25,
            world_seed: 1,
            episode_min_m: 40.0,
            speed_factor_range: (0.6, 1.0),
            profile: OperatorProfile::default(),
            drive: DriveConfig::default(),
            curation: CurationConfig::default(),
            world: GenParams::default(),
            keep_raw: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// The first four are the named test sites; more are generated.
    pub test_locations: usize,
    pub routes_per_location: usize,
    pub route: RouteParams,
    pub reps: usize,
    pub sim: SimConfig,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            test_locations: 4,
            routes_per_location: 1,
            route: RouteParams::default(),
            reps: 3,
            sim: SimConfig::default(),
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub location_counts: Vec<usize>,
    /// Adds the fixed-total cells `(n, total / n)` for every count.
    pub total_hours: Option<f64>,
    /// Adds the full grid `location_counts × hours_per_location`.
    pub hours_per_location: Vec<f64>,
    pub extra_cells: Vec<(usize, f64)>,
    pub variant: Variant,
    pub hidden: Vec<usize>,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Training cell for the zero-shot comparison; defaults to the largest
    /// location count of the fixed-total view.
    pub compare_cell: Option<(usize, f64)>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            location_counts: vec![1, 2, 4, 8, 16],
            total_hours: Some(2.0),
            hours_per_location: vec![],
            extra_cells: vec![(4, 2.0)],
            variant: Variant::MlpBc,
            hidden: vec![128, 128, 64],
            data: DataConfig::default(),
            train: TrainConfig {
                lr: 1e-3,
                epochs: 30,
                ..TrainConfig::default()
            },
            eval: EvalConfig::default(),
            compare_cell: None,
        }
    }
}

fn sha_hex(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0u8]);
    }
    hex::encode(h.finalize())[..16].to_string()
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.seeds.is_empty() {
            return bad("at least one seed is required");
        }
        if self.location_counts.contains(&0) || self.extra_cells.iter().any(|c| c.0 == 0) {
            return bad("location counts must be positive");
        }
        let hours_ok = |h: f64| h.is_finite() && h > 0.0;
        if !self.hours_per_location.iter().all(|&h| hours_ok(h))
            || !self.extra_cells.iter().all(|c| hours_ok(c.1))
            || !self.total_hours.is_none_or(hours_ok)
            || !hours_ok(self.data.hours_per_location)
        {
            return bad("hour values must be positive and finite");
        }
        if !(self.data.in_domain_hours >= 0.0) {
            return bad("in_domain_hours must be non-negative");
        }
        let (lo, hi) = self.data.speed_factor_range;
        if !(0.5 <= lo && lo <= hi && hi <= 1.0) {
            return bad("speed_factor_range must lie within [0.5, 1]");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden widths must be non-empty and positive");
        }
        if self.eval.test_locations == 0 || self.eval.routes_per_location == 0 || self.eval.reps == 0 {
            return bad("evaluation needs test locations, routes and repetitions");
        }
        if self.data.train_locations == 0 {
            return bad("train_locations must be positive");
        }
        self.data.profile.validate()?;
        self.train.validate()
    }

    /// Digest of the whole config and the code version.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        sha_hex(&[&json, CODE_VERSION])
    }

    /// Digest of the parts that determine the dataset.
    pub fn data_digest(&self) -> String {
        let data = serde_json::to_string(&self.data).expect("config serializes");
        let eval = serde_json::to_string(&(
            self.eval.test_locations,
            self.eval.routes_per_location,
            self.eval.route,
        ))
        .expect("config serializes");
        sha_hex(&[&data, &eval, CODE_VERSION])
    }

    pub fn arch(&self) -> PolicyArch {
        PolicyArch {
            history: self.variant.history(),
            hidden: self.hidden.clone(),
        }
    }

    /// Grid cells in a fixed order, duplicates removed.
    pub fn cells(&self) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64)> = Vec::new();
        let mut push = |c: (usize, f64)| {
            if !out.iter().any(|o| o.0 == c.0 && (o.1 - c.1).abs() < 1e-12) {
                out.push(c);
            }
        };
        if let Some(t) = self.total_hours {
            for &n in &self.location_counts {
                push((n, t / n as f64));
            }
        }
        for &n in &self.location_counts {
            for &h in &self.hours_per_location {
                push((n, h));
            }
        }
        for &c in &self.extra_cells {
            push(c);
        }
        out
    }

    pub fn cell_keys(&self) -> Vec<CellKey> {
        let cells = self.cells();
        self.seeds
            .iter()
            .flat_map(|&seed| {
                cells.iter().map(move |&(n, h)| CellKey {
                    n_locations: n,
                    hours_per_location: h,
                    seed,
                })
            })
            .collect()
    }

    fn compare_cell(&self) -> Option<(usize, f64)> {
        self.compare_cell.or_else(|| {
            let n = *self.location_counts.iter().max()?;
            Some((n, self.total_hours? / n as f64))
        })
    }

    /// Training config for one cell: the subset seed also drives init and
    /// shuffling, decorrelated per cell.
    pub fn train_config(&self, key: &CellKey) -> TrainConfig {
        TrainConfig {
            seed: seed_mix(seed_mix(key.seed, key.n_locations as u64), key.hours_per_location.to_bits()),
            ..self.train.clone()
        }
    }
}

/// Provenance carried by every artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Header {
    pub kind: String,
    pub config_digest: String,
    pub seed: u64,
    pub version: String,
}

impl Header {
    pub fn new(kind: &str, config_digest: &str, seed: u64) -> Self {
        Self {
            kind: kind.to_string(),
            config_digest: config_digest.to_string(),
            seed,
            version: CODE_VERSION.to_string(),
        }
    }

    pub fn comment_line(&self) -> String {
        format!(
            "# navscale kind={} config_digest={} seed={} version={}\n",
            self.kind, self.config_digest, self.seed, self.version
        )
    }

    /// Parses the leading comment line of a text artifact.
    pub fn parse_comment(line: &str) -> Option<Self> {
        let rest = line.trim().strip_prefix("# navscale ")?;
        let mut fields = BTreeMap::new();
        for kv in rest.split_whitespace() {
            let (k, v) = kv.split_once('=')?;
            fields.insert(k, v);
        }
        Some(Self {
            kind: fields.get("kind")?.to_string(),
            config_digest: fields.get("config_digest")?.to_string(),
            seed: fields.get("seed")?.parse().ok()?,
            version: fields.get("version")?.to_string(),
        })
    }

    pub fn read_from_text(path: &Path) -> Result<Option<Self>> {
        let mut first = String::new();
        std::io::BufReader::new(fs::File::open(path)?).read_line(&mut first)?;
        Ok(Self::parse_comment(&first))
    }
}

/// Writes `bytes` unless the file already exists. An existing file with
/// identical content is accepted; different content is an error, never an
/// overwrite. Returns whether anything was written.
pub fn write_once(path: &Path, bytes: &[u8]) -> Result<bool> {
    if path.exists() {
        if fs::read(path)? == bytes {
            return Ok(false);
        }
        return Err(Error::Config(format!(
            "{} exists with different content; use a fresh output directory",
            path.display()
        )));
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(true)
}

fn text_artifact(header: &Header, body: &[u8]) -> Vec<u8> {
    let mut out = header.comment_line().into_bytes();
    out.extend_from_slice(body);
    out
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_csv(rows, &mut buf)?;
    Ok(buf)
}

fn outcomes_bytes(rows: &[OutcomeRow]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_outcomes_csv(rows, &mut buf)?;
    Ok(buf)
}

#[derive(Serialize, Deserialize)]
struct JsonArtifact<T> {
    header: Header,
    #[serde(flatten)]
    body: T,
}

fn json_bytes<T: Serialize>(header: &Header, body: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(&JsonArtifact {
        header: header.clone(),
        body,
    })?;
    s.push('\n');
    Ok(s.into_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<(Header, T)> {
    let a: JsonArtifact<T> = serde_json::from_str(&fs::read_to_string(path)?)?;
    Ok((a.header, a.body))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

// ---------------------------------------------------------------------------
// Data generation

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationRecord {
    pub name: String,
    pub role: Role,
    pub world_seed: u64,
    pub anchor: GeoPoint,
    pub episodes: usize,
    /// Sum of curated demonstration durations.
    pub hours: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestRoute {
    pub location: String,
    pub world_seed: u64,
    pub route: RouteSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub data_digest: String,
    pub locations: Vec<LocationRecord>,
    pub demos: Vec<Demonstration>,
    pub manifest: DatasetManifest,
    pub routes: Vec<TestRoute>,
}

#[derive(Debug, Clone)]
pub struct GeneratedData {
    pub dataset: Dataset,
    /// Raw logs; observations are dropped unless `keep_raw` is set.
    pub raw: Vec<RawEpisode>,
}

pub fn test_sites() -> Vec<GeoPoint> {
    TEST_SITES
        .iter()
        .map(|&(_, lat, lon)| GeoPoint::new(lat, lon).expect("valid site"))
        .collect()
}

fn random_anchor(seed: u64, avoid: &[GeoPoint]) -> Result<GeoPoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let p = GeoPoint::new(rng.random_range(-55.0..60.0), rng.random_range(-180.0..180.0))?;
        if avoid.iter().all(|&s| haversine_m(p, s) > ANCHOR_CLEARANCE_M) {
            return Ok(p);
        }
    }
}

struct LocationPlan {
    name: String,
    role: Role,
    world_seed: u64,
    anchor: GeoPoint,
    hours: f64,
}

fn location_plans(cfg: &ExperimentConfig) -> Result<Vec<LocationPlan>> {
    let base = cfg.data.world_seed;
    let mut test_anchors = test_sites();
    let mut plans = Vec::new();
    for j in 0..cfg.eval.test_locations {
        let (name, anchor) = match TEST_SITES.get(j) {
            Some(site) => (site.0.to_string(), test_anchors[j]),
            None => {
                let a = random_anchor(seed_mix(base, 20_000 + j as u64), &test_anchors)?;
                test_anchors.push(a);
                (format!("test{j:02}"), a)
            }
        };
        plans.push(LocationPlan {
            name,
            role: Role::Test,
            world_seed: seed_mix(base ^ 0x7e57, j as u64),
            anchor,
            hours: cfg.data.in_domain_hours,
        });
    }
    let test_anchors: Vec<GeoPoint> = plans.iter().map(|p| p.anchor).collect();
    for i in 0..cfg.data.train_locations {
        plans.push(LocationPlan {
            name: format!("train{i:03}"),
            role: Role::Train,
            world_seed: seed_mix(base, i as u64),
            anchor: random_anchor(seed_mix(base, 10_000 + i as u64), &test_anchors)?,
            hours: cfg.data.hours_per_location,
        });
    }
    Ok(plans)
}

fn strip_observations(e: RawEpisode) -> RawEpisode {
    RawEpisode {
        samples: e
            .samples
            .into_iter()
            .map(|s| RawSample {
                t: s.t,
                gps: s.gps,
                ..RawSample::default()
            })
            .collect(),
        ..e
    }
}

/// Drives random planned routes until the curated hours reach `hours`.
pub fn collect_location(
    world: &World,
    anchor: GeoPoint,
    hours: f64,
    cfg: &DataConfig,
    prefix: &str,
    seed: u64,
) -> Result<(Vec<RawEpisode>, Vec<Demonstration>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = world.route_graph.nodes.len();
    let target_s = hours * 3600.0;
    // Generous bound: an episode that survives curation adds tens of seconds.
    let max_attempts = 200 + (target_s / 5.0) as usize;
    let (mut episodes, mut demos, mut secs) = (Vec::new(), Vec::new(), 0.0);
    let mut k = 0;
    while secs < target_s {
        if k >= max_attempts {
            return Err(Error::Infeasible(format!(
                "{prefix}: only {:.3} h curated after {k} attempts",
                secs / 3600.0
            )));
        }
        k += 1;
        let (s, t) = (rng.random_range(0..n), rng.random_range(0..n));
        let walk = plan_route(world, s, t, &mut rng, cfg.profile.detour_prob)?;
        let pts = walk_points(world, &walk);
        if polyline_length(&pts) < cfg.episode_min_m {
            continue;
        }
        let profile = OperatorProfile {
            speed_factor: rng.random_range(cfg.speed_factor_range.0..=cfg.speed_factor_range.1),
            ..cfg.profile
        };
        let out = drive(world, &pts, &profile, &cfg.drive, anchor, &format!("{prefix}-e{k:05}"), &mut rng)?;
        if let Ok(d) = curate_episode(&out.episode, &cfg.curation) {
            secs += d.iter().map(|x| x.duration_s()).sum::<f64>();
            demos.extend(d);
        }
        episodes.push(if cfg.keep_raw {
            out.episode
        } else {
            strip_observations(out.episode)
        });
    }
    Ok((episodes, demos))
}

/// Generates every world, drives and curates the expert data, builds the
/// manifest with test-site exclusion and samples the test routes.
pub fn generate_dataset(cfg: &ExperimentConfig) -> Result<GeneratedData> {
    cfg.validate()?;
    let plans = location_plans(cfg)?;
    let results = exec::map(&plans, |p| -> Result<_> {
        let world = World::new(generate_location_with(p.world_seed, &cfg.data.world)?);
        let (eps, demos) = if p.hours > 0.0 {
            collect_location(&world, p.anchor, p.hours, &cfg.data, &p.name, seed_mix(p.world_seed, 1))?
        } else {
            (vec![], vec![])
        };
        let mut routes = Vec::new();
        if p.role == Role::Test {
            let mut rng = ChaCha8Rng::seed_from_u64(seed_mix(p.world_seed, 2));
            for r in 0..cfg.eval.routes_per_location {
                routes.push(TestRoute {
                    location: p.name.clone(),
                    world_seed: p.world_seed,
                    route: generate_route(&world, &format!("{}-r{r}", p.name), &cfg.eval.route, &mut rng)?,
                });
            }
        }
        Ok((eps, demos, routes))
    });

    let (mut raw, mut demos, mut routes, mut locations) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (p, r) in plans.iter().zip(results) {
        let (eps, d, rs) = r?;
        locations.push(LocationRecord {
            name: p.name.clone(),
            role: p.role,
            world_seed: p.world_seed,
            anchor: p.anchor,
            episodes: eps.len(),
            hours: d.iter().map(|x| x.duration_s()).sum::<f64>() / 3600.0 + 0.0,
        });
        raw.extend(eps);
        demos.extend(d);
        routes.extend(rs);
    }
    let sites: Vec<GeoPoint> = locations.iter().filter(|l| l.role == Role::Test).map(|l| l.anchor).collect();
    let manifest = DatasetManifest::build(&raw, &demos, ClusterParams::default());
    let manifest = geo_exclusion_split(&manifest, &sites, EXCLUSION_RADIUS_M)?;
    Ok(GeneratedData {
        dataset: Dataset {
            data_digest: cfg.data_digest(),
            locations,
            demos,
            manifest,
            routes,
        },
        raw,
    })
}

#[derive(Serialize, Deserialize)]
struct LocationsBody {
    locations: Vec<LocationRecord>,
}

#[derive(Serialize, Deserialize)]
struct ManifestBody {
    manifest: DatasetManifest,
}

#[derive(Serialize, Deserialize)]
struct RoutesBody {
    routes: Vec<TestRoute>,
}

fn jsonl_bytes<T: Serialize>(header: &Header, items: &[T]) -> Result<Vec<u8>> {
    let mut buf = header.comment_line().into_bytes();
    for it in items {
        serde_json::to_writer(&mut buf, it)?;
        buf.push(b'\n');
    }
    Ok(buf)
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = std::io::BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DEMOS_FILE: &str = "demos.jsonl";
pub const LOCATIONS_FILE: &str = "locations.json";
pub const ROUTES_FILE: &str = "routes.json";
pub const RAW_FILE: &str = "raw_episodes.jsonl";

pub fn save_dataset(data: &GeneratedData, cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    let d = &data.dataset;
    let h = |kind: &str| Header::new(kind, &d.data_digest, cfg.data.world_seed);
    write_once(
        &dir.join(LOCATIONS_FILE),
        &json_bytes(&h("locations"), &LocationsBody {
            locations: d.locations.clone(),
        })?,
    )?;
    write_once(
        &dir.join(MANIFEST_FILE),
        &json_bytes(&h("manifest"), &ManifestBody {
            manifest: d.manifest.clone(),
        })?,
    )?;
    write_once(
        &dir.join(ROUTES_FILE),
        &json_bytes(&h("routes"), &RoutesBody { routes: d.routes.clone() })?,
    )?;
    write_once(&dir.join(DEMOS_FILE), &jsonl_bytes(&h("demos"), &d.demos)?)?;
    if cfg.data.keep_raw {
        write_once(&dir.join(RAW_FILE), &jsonl_bytes(&h("raw-episodes"), &data.raw)?)?;
    }
    write_once(&dir.join("config.toml"), cfg.to_toml()?.as_bytes())?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let (h, locs): (Header, LocationsBody) = read_json(&dir.join(LOCATIONS_FILE))?;
    let (hm, man): (Header, ManifestBody) = read_json(&dir.join(MANIFEST_FILE))?;
    let (hr, routes): (Header, RoutesBody) = read_json(&dir.join(ROUTES_FILE))?;
    let hd = Header::read_from_text(&dir.join(DEMOS_FILE))?;
    let digests = [Some(&hm), Some(&hr), hd.as_ref()];
    if digests.iter().any(|x| x.map(|x| &x.config_digest) != Some(&h.config_digest)) {
        return Err(Error::Config(format!("{} mixes artifacts from different configs", dir.display())));
    }
    Ok(Dataset {
        data_digest: h.config_digest,
        locations: locs.locations,
        demos: read_jsonl(&dir.join(DEMOS_FILE))?,
        manifest: man.manifest,
        routes: routes.routes,
    })
}

/// Loads the dataset and checks it was generated from `cfg`'s data section.
pub fn load_dataset_for(cfg: &ExperimentConfig, dir: &Path) -> Result<Dataset> {
    let d = load_dataset(dir)?;
    if d.data_digest != cfg.data_digest() {
        return Err(Error::Config(format!(
            "dataset {} has digest {}, config expects {}",
            dir.display(),
            d.data_digest,
            cfg.data_digest()
        )));
    }
    Ok(d)
}

/// Rebuilds the test worlds and pairs them with their routes.
pub fn test_suite(dataset: &Dataset, gen: &GenParams) -> Result<Vec<(World, RouteSpec)>> {
    let mut worlds: BTreeMap<u64, World> = BTreeMap::new();
    let mut out = Vec::new();
    for r in &dataset.routes {
        if !worlds.contains_key(&r.world_seed) {
            worlds.insert(r.world_seed, World::new(generate_location_with(r.world_seed, gen)?));
        }
        out.push((worlds[&r.world_seed].clone(), r.route.clone()));
    }
    Ok(out)
}

/// Per-location hour totals for reporting.
pub fn hour_report(dataset: &Dataset) -> String {
    let mut s = String::new();
    for l in &dataset.locations {
        s.push_str(&format!(
            "{:<16} {:<5} {:>5} episodes {:>8.3} h\n",
            l.name,
            format!("{:?}", l.role).to_lowercase(),
            l.episodes,
            l.hours
        ));
    }
    s
}

/// Test clusters become the only train clusters, for in-domain subsets.
fn in_domain_view(manifest: &DatasetManifest) -> DatasetManifest {
    let mut m = manifest.clone();
    for c in &mut m.clusters {
        c.split = match c.split {
            Split::Train => Split::Excluded,
            Split::Excluded => Split::Train,
        };
    }
    m
}

/// Validates every requested subset before any training starts.
pub fn check_feasible(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<()> {
    let cells = cfg.cells();
    for &seed in &cfg.seeds {
        subset_cells(&dataset.manifest, &cells, seed)?;
    }
    Ok(())
}

fn demos_for(dataset: &Dataset, ids: &[String]) -> Result<Vec<Demonstration>> {
    let index: BTreeMap<String, &Demonstration> = dataset.demos.iter().map(|d| (d.id(), d)).collect();
    ids.iter()
        .map(|id| {
            index
                .get(id)
                .map(|d| (*d).clone())
                .ok_or_else(|| Error::Config(format!("manifest names unknown demonstration {id}")))
        })
        .collect()
}

pub fn train_on(cfg: &ExperimentConfig, dataset: &Dataset, ids: &[String], train_cfg: &TrainConfig) -> Result<TrainOutput> {
    let data = DemoDataset::new(demos_for(dataset, ids)?, cfg.variant.history(), ActionLimits::default())?;
    train(&data, &cfg.arch(), train_cfg)
}

pub fn write_checkpoint_file(path: &Path, policy: &MlpPolicy, header: &Header) -> Result<()> {
    let mut buf = Vec::new();
    policy.write_checkpoint_with_meta(&mut buf, &serde_json::to_string(header)?)?;
    write_once(path, &buf)?;
    Ok(())
}

pub fn read_checkpoint_file(path: &Path) -> Result<(MlpPolicy, Option<Header>)> {
    let (p, meta) = MlpPolicy::read_checkpoint_with_meta(fs::File::open(path)?)?;
    Ok((p, serde_json::from_str(&meta).ok()))
}

pub fn evaluate_policy(
    cfg: &ExperimentConfig,
    suite: &[(World, RouteSpec)],
    policy: &MlpPolicy,
    policy_id: &str,
) -> Result<Vec<OutcomeRow>> {
    let nav = MlpNav {
        id: policy_id.to_string(),
        policy: policy.clone(),
        limits: ActionLimits::default(),
        lead_s: cfg.eval.sim.latency_steps as f64 * CONTROL_DT,
    };
    evaluate(&nav, suite, cfg.eval.reps, &cfg.eval.sim, cfg.eval.seed)
}

// ---------------------------------------------------------------------------
// Scaling study

#[derive(Debug, Clone, Default)]
pub struct StudyOptions {
    /// Stop after this many new jobs, leaving the rest for a resumed run.
    pub max_jobs: Option<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct StudyReport {
    pub completed: Vec<CellKey>,
    pub skipped: Vec<CellKey>,
    pub failed: Vec<(CellKey, String)>,
    pub pending: Vec<CellKey>,
    pub summary: Option<StudySummary>,
}

impl StudyReport {
    pub fn is_complete(&self) -> bool {
        self.failed.is_empty() && self.pending.is_empty()
    }
}

pub fn cell_dir(out: &Path, key: &CellKey) -> PathBuf {
    out.join("cells").join(key.label())
}

/// Whether the cell's outcomes exist for this config digest.
fn cell_done(out: &Path, key: &CellKey, digest: &str) -> Result<bool> {
    let path = cell_dir(out, key).join("outcomes.csv");
    if !path.exists() {
        return Ok(false);
    }
    match Header::read_from_text(&path)? {
        Some(h) if h.config_digest == digest => Ok(true),
        _ => Err(Error::Config(format!(
            "{} belongs to a different config; use a fresh results directory",
            path.display()
        ))),
    }
}

/// Serializes writes to the append-only study log.
struct Appender {
    file: Mutex<fs::File>,
}

impl Appender {
    fn open(path: &Path) -> Result<Self> {
        if let Some(d) = path.parent() {
            fs::create_dir_all(d)?;
        }
        let file = fs::OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { file: Mutex::new(file) })
    }

    fn line(&self, s: &str) -> Result<()> {
        let mut f = self.file.lock().expect("appender lock");
        writeln!(f, "{s}")?;
        f.flush()?;
        Ok(())
    }
}

/// Trains one (cell, seed) job into `dir`: subset, loss curve and
/// checkpoint. A checkpoint already written under this config is reused.
pub fn train_cell(cfg: &ExperimentConfig, dataset: &Dataset, key: &CellKey, dir: &Path) -> Result<MlpPolicy> {
    let digest = cfg.digest();
    let header = |kind: &str| Header::new(kind, &digest, key.seed);
    let ckpt = dir.join("policy.ckpt");
    if ckpt.exists() {
        if let (p, Some(h)) = read_checkpoint_file(&ckpt)? {
            if h.config_digest == digest && h.seed == key.seed {
                return Ok(p);
            }
        }
        return Err(Error::Config(format!(
            "{} belongs to a different config or seed",
            ckpt.display()
        )));
    }
    let subset = subset_cells(&dataset.manifest, &[(key.n_locations, key.hours_per_location)], key.seed)?.remove(0);
    write_once(&dir.join("subset.json"), &json_bytes(&header("subset"), &subset)?)?;
    let trained = train_on(cfg, dataset, &subset.demo_ids(), &cfg.train_config(key))?;
    let mut loss = Vec::new();
    write_loss_csv(&trained.curve, &mut loss)?;
    write_once(&dir.join("loss.csv"), &text_artifact(&header("loss"), &loss))?;
    write_checkpoint_file(&ckpt, &trained.policy, &header("checkpoint"))?;
    Ok(trained.policy)
}

/// Evaluates a checkpoint on the dataset's test routes and writes the
/// outcome CSV under the checkpoint's own provenance.
pub fn eval_checkpoint(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    checkpoint: &Path,
    out_csv: &Path,
    policy_id: &str,
) -> Result<Vec<OutcomeRow>> {
    let (policy, header) = read_checkpoint_file(checkpoint)?;
    if policy.history != cfg.variant.history() {
        return Err(Error::HistoryLength {
            expected: cfg.variant.history(),
            got: policy.history,
        });
    }
    let seed = header.as_ref().map_or(0, |h| h.seed);
    let suite = test_suite(dataset, &cfg.data.world)?;
    let rows = evaluate_policy(cfg, &suite, &policy, policy_id)?;
    let h = Header::new("outcomes", &cfg.digest(), seed);
    write_once(out_csv, &text_artifact(&h, &outcomes_bytes(&rows)?))?;
    Ok(rows)
}

fn run_cell(cfg: &ExperimentConfig, dataset: &Dataset, suite: &[(World, RouteSpec)], key: &CellKey, out: &Path) -> Result<()> {
    let dir = cell_dir(out, key);
    let policy = train_cell(cfg, dataset, key, &dir)?;
    let rows = evaluate_policy(cfg, suite, &policy, &key.label())?;
    // Outcomes last: their presence marks the cell complete.
    let h = Header::new("outcomes", &cfg.digest(), key.seed);
    write_once(&dir.join("outcomes.csv"), &text_artifact(&h, &outcomes_bytes(&rows)?))?;
    Ok(())
}

/// Curates raw logs into demonstrations and a manifest with test-site
/// exclusion; writes both into `dir`.
pub fn curate_raw(cfg: &ExperimentConfig, raw: &[RawEpisode], dir: &Path) -> Result<(Vec<Demonstration>, DatasetManifest)> {
    let per = exec::map(raw, |e| curate_episode(e, &cfg.data.curation));
    let mut demos = Vec::new();
    for (e, r) in raw.iter().zip(per) {
        match r {
            Ok(d) => demos.extend(d),
            Err(err) => eprintln!("skipping episode {}: {err}", e.id),
        }
    }
    let plans = location_plans(cfg)?;
    let sites: Vec<GeoPoint> = plans.iter().filter(|p| p.role == Role::Test).map(|p| p.anchor).collect();
    let manifest = DatasetManifest::build(raw, &demos, ClusterParams::default());
    let manifest = geo_exclusion_split(&manifest, &sites, EXCLUSION_RADIUS_M)?;
    let h = |kind: &str| Header::new(kind, &cfg.data_digest(), cfg.data.world_seed);
    write_once(&dir.join(DEMOS_FILE), &jsonl_bytes(&h("demos"), &demos)?)?;
    write_once(
        &dir.join(MANIFEST_FILE),
        &json_bytes(&h("manifest"), &ManifestBody {
            manifest: manifest.clone(),
        })?,
    )?;
    Ok((demos, manifest))
}

/// Trains and evaluates every pending (cell, seed) job, then aggregates
/// once the grid is complete.
pub fn run_study(cfg: &ExperimentConfig, dataset: &Dataset, out: &Path, opts: &StudyOptions) -> Result<StudyReport> {
    cfg.validate()?;
    check_feasible(cfg, dataset)?;
    let digest = cfg.digest();
    fs::create_dir_all(out)?;
    write_once(&out.join("config.toml"), cfg.to_toml()?.as_bytes())?;
    let suite = test_suite(dataset, &cfg.data.world)?;

    let mut report = StudyReport::default();
    let mut jobs: Vec<CellKey> = Vec::new();
    for key in cfg.cell_keys() {
        if cell_done(out, &key, &digest)? {
            report.skipped.push(key);
        } else {
            jobs.push(key);
        }
    }
    if let Some(k) = opts.max_jobs {
        report.pending = jobs.split_off(k.min(jobs.len()));
    }

    let log = Appender::open(&out.join("study_log.csv"))?;
    let results = exec::map(&jobs, |key| {
        let r = run_cell(cfg, dataset, &suite, key, out);
        let status = match &r {
            Ok(()) => "done".to_string(),
            Err(e) => format!("failed: {}", e.to_string().replace(['\n', ','], " ")),
        };
        log.line(&format!("{},{},{}", key.label(), digest, status)).and(r)
    });
    for (key, r) in jobs.iter().zip(results) {
        match r {
            Ok(()) => report.completed.push(*key),
            Err(e) => report.failed.push((*key, e.to_string())),
        }
    }
    if report.is_complete() {
        report.summary = Some(analyze_study(cfg, out)?);
    }
    Ok(report)
}

/// Reads every cell's outcomes in config order.
pub fn load_study_outcomes(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<(CellKey, Vec<OutcomeRow>)>> {
    let digest = cfg.digest();
    let mut results = Vec::new();
    for key in cfg.cell_keys() {
        if cell_done(out, &key, &digest)? {
            let rows = read_outcomes_csv(fs::File::open(cell_dir(out, &key).join("outcomes.csv"))?)?;
            results.push((key, rows));
        }
    }
    Ok(results)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedianRow {
    pub n_locations: usize,
    pub hours_per_location: f64,
    pub median_success_rate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudySummary {
    pub fits: Vec<FitSummary>,
    pub medians: Vec<MedianRow>,
    pub checkpoints: Vec<String>,
    pub outcome_files: Vec<String>,
}

fn fits_for(rows: &[ViewRow]) -> Vec<FitSummary> {
    let mut groups: Vec<f64> = rows.iter().map(|r| r.fixed).collect();
    groups.dedup();
    groups
        .into_iter()
        .filter_map(|g| {
            let members: Vec<ViewRow> = rows.iter().filter(|r| r.fixed == g).cloned().collect();
            let (fit, zero) = fit_failure_rates(&members);
            let fit = fit.ok()?;
            Some(FitSummary {
                view: members[0].view.clone(),
                fixed: g,
                alpha: fit.alpha,
                beta: fit.beta,
                r: fit.r,
                doubling_reduction: doubling_reduction(fit.alpha),
                n_points: fit.n_points,
                excluded_zero_failure: zero.len(),
            })
        })
        .collect()
}

/// Aggregates outcomes into tables, fits and the summary. All cells of the
/// grid must be present.
pub fn analyze_study(cfg: &ExperimentConfig, out: &Path) -> Result<StudySummary> {
    let digest = cfg.digest();
    let results = load_study_outcomes(cfg, out)?;
    let tables = aggregate(&results, &cfg.cell_keys())?;
    let dir = out.join("analysis");
    let header = |kind: &str| Header::new(kind, &digest, cfg.seeds[0]);
    write_tables(&tables, &dir, &header)?;

    let fits: Vec<FitSummary> = [&tables.fixed_total, &tables.fixed_per_location]
        .into_iter()
        .flat_map(|rows| fits_for(rows))
        .collect();
    let medians = cfg
        .cells()
        .into_iter()
        .map(|(n, h)| {
            let mut rates: Vec<f64> = tables
                .seeds
                .iter()
                .filter(|s| s.n_locations == n && s.hours_per_location == h)
                .map(|s| s.success_rate)
                .collect();
            MedianRow {
                n_locations: n,
                hours_per_location: h,
                median_success_rate: median(&mut rates).unwrap_or(f64::NAN),
            }
        })
        .collect();
    let rel = |key: &CellKey, f: &str| format!("cells/{}/{f}", key.label());
    let summary = StudySummary {
        fits,
        medians,
        checkpoints: results.iter().map(|(k, _)| rel(k, "policy.ckpt")).collect(),
        outcome_files: results.iter().map(|(k, _)| rel(k, "outcomes.csv")).collect(),
    };
    write_once(&dir.join("summary.json"), &json_bytes(&header("summary"), &summary)?)?;
    Ok(summary)
}

fn write_tables(tables: &Tables, dir: &Path, header: &dyn Fn(&str) -> Header) -> Result<()> {
    let files: [(&str, Vec<u8>); 6] = [
        ("cells", csv_bytes(&tables.cells)?),
        ("seeds", csv_bytes(&tables.seeds)?),
        ("environments", csv_bytes(&tables.environments)?),
        ("fixed_total", csv_bytes(&tables.fixed_total)?),
        ("fixed_per_location", csv_bytes(&tables.fixed_per_location)?),
        ("fixed_locations", csv_bytes(&tables.fixed_locations)?),
    ];
    for (name, body) in files {
        write_once(&dir.join(format!("{name}.csv")), &text_artifact(&header(name), &body))?;
    }
    Ok(())
}

pub fn read_study_summary(out: &Path) -> Result<StudySummary> {
    Ok(read_json(&out.join("analysis").join("summary.json"))?.1)
}

fn read_view(path: &Path) -> Result<Vec<ViewRow>> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    r.deserialize().map(|x| x.map_err(Error::from)).collect()
}

/// Log-log failure-rate plots for the fixed-total and fixed-per-location
/// views, with the fitted power law where one exists.
pub fn plot_study(out: &Path) -> Result<Vec<PathBuf>> {
    let dir = out.join("analysis");
    let summary = read_study_summary(out)?;
    let mut written = Vec::new();
    for (view, file, x_label) in [
        ("fixed-total", "fixed_total", "training locations"),
        ("fixed-per-location", "fixed_per_location", "training locations"),
    ] {
        let rows = read_view(&dir.join(format!("{file}.csv")))?;
        let mut groups: Vec<f64> = rows.iter().map(|r| r.fixed).collect();
        groups.dedup();
        for g in groups {
            let members: Vec<&ViewRow> = rows.iter().filter(|r| r.fixed == g).collect();
            let series = PlotSeries {
                label: format!("{view} {g}"),
                points: members.iter().map(|r| (r.n_locations as f64, r.failure_rate)).collect(),
                errors: members.iter().map(|r| (1.0 - r.ci_high, 1.0 - r.ci_low)).collect(),
            };
            let fit = summary
                .fits
                .iter()
                .find(|f| f.view == view && f.fixed == g)
                .map(|f| crate::analysis::PowerLawFit {
                    alpha: f.alpha,
                    beta: f.beta,
                    r: f.r,
                    alpha_se: None,
                    n_points: f.n_points,
                });
            let svg = loglog_svg(
                &format!("failure rate, {view} = {g}"),
                x_label,
                "failure rate",
                &[series],
                fit.as_ref(),
            );
            let path = out.join("plots").join(format!("{file}_{g}.svg"));
            write_once(&path, svg.as_bytes())?;
            written.push(path);
        }
    }
    Ok(written)
}

// ---------------------------------------------------------------------------
// Policy comparison

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub variant: String,
    pub train_hours: f64,
    pub successes: usize,
    pub trials: usize,
    pub success_rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Interventions per 100 m.
    pub nir: Option<f64>,
    /// Seconds per 100 m on successful segments.
    pub nps: Option<f64>,
    /// Mean along-route progress before the first failure.
    pub dist_m: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExclusionAudit {
    /// Clusters used by the zero-shot subsets.
    pub clusters: Vec<usize>,
    pub all_train_split: bool,
    /// Smallest distance from any used footprint to a test site.
    pub min_distance_m: f64,
    pub radius_m: f64,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct CompareReport {
    pub rows: Vec<CompareRow>,
    pub audit: ExclusionAudit,
}

pub fn summarize_rows(variant: &str, train_hours: f64, rows: &[OutcomeRow]) -> Result<CompareRow> {
    let sr = success_rate(rows)?;
    Ok(CompareRow {
        variant: variant.to_string(),
        train_hours,
        successes: sr.successes,
        trials: sr.trials,
        success_rate: sr.rate,
        ci_low: sr.ci_low,
        ci_high: sr.ci_high,
        nir: nir(rows),
        nps: nps(rows),
        dist_m: mean_dist_to_first_failure(rows),
    })
}

/// Checks that zero-shot subsets use only train-split clusters whose
/// footprints stay outside the exclusion radius of every test site.
pub fn audit_exclusion(dataset: &Dataset, subsets: &[SubsetManifest]) -> Result<ExclusionAudit> {
    let sites: Vec<GeoPoint> = dataset
        .locations
        .iter()
        .filter(|l| l.role == Role::Test)
        .map(|l| l.anchor)
        .collect();
    let mut clusters: Vec<usize> = subsets
        .iter()
        .flat_map(|s| s.members.iter().map(|m| m.cluster_id))
        .collect();
    clusters.sort_unstable();
    clusters.dedup();
    let mut all_train = true;
    let mut min_d = f64::INFINITY;
    for id in &clusters {
        let c = dataset
            .manifest
            .clusters
            .iter()
            .find(|c| c.cluster.id == *id)
            .ok_or_else(|| Error::Config(format!("subset names unknown cluster {id}")))?;
        all_train &= c.split == Split::Train;
        min_d = min_d.min(min_distance_to_sites(&c.footprint, &sites)?);
    }
    Ok(ExclusionAudit {
        clusters,
        all_train_split: all_train,
        min_distance_m: min_d,
        radius_m: EXCLUSION_RADIUS_M,
        passed: all_train && min_d >= EXCLUSION_RADIUS_M,
    })
}

/// Trains the zero-shot, scale + in-domain and in-domain-only variants on
/// every seed and tabulates their pooled closed-loop metrics.
pub fn compare_policies(cfg: &ExperimentConfig, dataset: &Dataset, out: &Path) -> Result<CompareReport> {
    cfg.validate()?;
    let (n, h) = cfg
        .compare_cell()
        .ok_or_else(|| Error::Config("compare_cell or total_hours is required".into()))?;
    if !(cfg.data.in_domain_hours > 0.0) {
        return Err(Error::Infeasible("in-domain comparison needs in_domain_hours > 0".into()));
    }
    let digest = cfg.digest();
    let suite = test_suite(dataset, &cfg.data.world)?;
    let n_test = dataset.locations.iter().filter(|l| l.role == Role::Test).count();
    let in_domain = in_domain_view(&dataset.manifest);

    let mut plans: Vec<(&str, u64, Vec<String>, f64)> = Vec::new();
    let mut zero_shot = Vec::new();
    for &seed in &cfg.seeds {
        let zs = subset_cells(&dataset.manifest, &[(n, h)], seed)?.remove(0);
        let id = subset_cells(&in_domain, &[(n_test, cfg.data.in_domain_hours)], seed)?.remove(0);
        let (zs_ids, id_ids) = (zs.demo_ids(), id.demo_ids());
        let mut both = zs_ids.clone();
        both.extend(id_ids.iter().cloned());
        plans.push(("zero-shot", seed, zs_ids, zs.total_hours()));
        plans.push(("scale+in-domain", seed, both, zs.total_hours() + id.total_hours()));
        plans.push(("in-domain-only", seed, id_ids, id.total_hours()));
        zero_shot.push(zs);
    }
    let audit = audit_exclusion(dataset, &zero_shot)?;
    let header = |kind: &str, seed: u64| Header::new(kind, &digest, seed);
    write_once(&out.join("audit.json"), &json_bytes(&header("audit", cfg.seeds[0]), &audit)?)?;
    if !audit.passed {
        return Err(Error::Config(format!("zero-shot data overlaps the test sites: {audit:?}")));
    }

    let results = exec::map(&plans, |(variant, seed, ids, _)| -> Result<Vec<OutcomeRow>> {
        let dir = out.join(variant).join(format!("s{seed}"));
        let outcomes = dir.join("outcomes.csv");
        if outcomes.exists() {
            if Header::read_from_text(&outcomes)?.is_some_and(|h| h.config_digest == digest) {
                return read_outcomes_csv(fs::File::open(&outcomes)?);
            }
            return Err(Error::Config(format!("{} belongs to a different config", outcomes.display())));
        }
        let key = CellKey {
            n_locations: n,
            hours_per_location: h,
            seed: *seed,
        };
        let trained = train_on(cfg, dataset, ids, &cfg.train_config(&key))?;
        write_checkpoint_file(&dir.join("policy.ckpt"), &trained.policy, &header("checkpoint", *seed))?;
        let rows = evaluate_policy(cfg, &suite, &trained.policy, &format!("{variant}-s{seed}"))?;
        write_once(
            &outcomes,
            &text_artifact(&header("outcomes", *seed), &outcomes_bytes(&rows)?),
        )?;
        Ok(rows)
    });

    let mut pooled: BTreeMap<&str, (f64, Vec<OutcomeRow>)> = BTreeMap::new();
    for ((variant, _, _, hours), r) in plans.iter().zip(results) {
        let e = pooled.entry(variant).or_default();
        e.0 += hours / cfg.seeds.len() as f64;
        e.1.extend(r?);
    }
    let mut rows = Vec::new();
    for variant in ["zero-shot", "scale+in-domain", "in-domain-only"] {
        let (hours, r) = &pooled[variant];
        rows.push(summarize_rows(variant, *hours, r)?);
    }
    write_once(
        &out.join("table.csv"),
        &text_artifact(&header("compare-table", cfg.seeds[0]), &csv_bytes(&rows)?),
    )?;
    Ok(CompareReport { rows, audit })
}
