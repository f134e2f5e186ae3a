//! Turning raw teleoperation logs into training-ready demonstrations.
//!
//! The stages run in order: [`filter_episode`] drops stationary stretches
//! and samples with missing sensors, [`resample_4hz`] aligns everything to
//! the control grid, pose fusion smooths the trajectory, [`build_action_chunks`]
//! attaches the next second of commands to each step and [`segment_goals`]
//! cuts the trajectory into goal-reaching demonstrations. Manifests group
//! demonstrations by location and carry the split tags and hour accounting
//! used to build nested scaling subsets.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use base64::Engine;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::exec::seed_mix;
use crate::error::{Error, Result};
use crate::geokit::{
    cluster_by_proximity, min_distance_to_sites, subsample_fixes, ClusterParams, GeoPoint,
    LocationCluster,
};
use crate::posegraph::{self, wrap_angle, FusionNoise, PoseSE2, SolverOptions, WheelGeometry};

/// Control and alignment rate.
pub const GRID_HZ: f64 = 4.0;
pub const GRID_DT: f64 = 0.25;
/// Actions per chunk.
pub const CHUNK_LEN: usize = 10;
/// Spacing of actions inside a chunk.
pub const CHUNK_DT: f64 = 0.1;
/// Goals are drawn within this much future travel.
pub const GOAL_HORIZON_M: f64 = 150.0;
/// Demonstrations within this distance of a test site are excluded.
pub const EXCLUSION_RADIUS_M: f64 = 95_000.0;

const TIME_EPS: f64 = 1e-9;

/// One `(v, omega)` command per 0.1 s over the next second.
pub type ActionChunk = [[f64; 2]; CHUNK_LEN];

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RawSample {
    pub t: f64,
    #[serde(default)]
    pub gps: Option<GeoPoint>,
    #[serde(default)]
    pub heading: Option<f64>,
    /// `(left, right)` wheel speeds in rev/min, averaged over the interval
    /// ending at `t`.
    #[serde(default)]
    pub wheel_rpm: Option<(f64, f64)>,
    /// Operator command `(v m/s, omega rad/s)` in force from `t`.
    #[serde(default)]
    pub command: Option<(f64, f64)>,
    /// Opaque observation reference.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub obs: Option<String>,
}

impl RawSample {
    fn sensors_present(&self) -> bool {
        self.gps.is_some()
            && self.heading.is_some()
            && self.wheel_rpm.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawEpisode {
    pub id: String,
    pub samples: Vec<RawSample>,
    pub native_rate_hz: f64,
}

impl RawEpisode {
    pub fn duration_s(&self) -> f64 {
        match (self.samples.first(), self.samples.last()) {
            (Some(a), Some(b)) => b.t - a.t,
            _ => 0.0,
        }
    }

    pub fn fixes(&self) -> Vec<GeoPoint> {
        self.samples.iter().filter_map(|s| s.gps).collect()
    }
}

pub fn read_episodes_jsonl(path: &Path) -> Result<Vec<RawEpisode>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
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

pub fn write_episodes_jsonl(path: &Path, episodes: &[RawEpisode]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for e in episodes {
        serde_json::to_writer(&mut f, e)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    /// Moving-average ground speed below this is stationary.
    pub min_speed: f64,
    /// Sample spacing above this counts as missing data.
    pub max_gap: f64,
    /// Width of the centered moving-average window.
    pub window_s: f64,
    /// Shorter sub-episodes are dropped.
    pub min_duration_s: f64,
    pub geometry: WheelGeometry,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            min_speed: 0.05,
            max_gap: 0.5,
            window_s: 2.0,
            min_duration_s: 5.0,
            geometry: WheelGeometry::default(),
        }
    }
}

/// Centered moving average of wheel ground speed; samples without wheel data
/// contribute nothing and read as zero when their window is empty.
fn moving_average_speed(e: &RawEpisode, geometry: WheelGeometry, window_s: f64) -> Vec<f64> {
    let n = e.samples.len();
    let mut prefix = vec![(0.0, 0usize); n + 1];
    for (i, s) in e.samples.iter().enumerate() {
        let (sum, cnt) = prefix[i];
        prefix[i + 1] = match s.wheel_rpm {
            Some((l, r)) => (sum + geometry.body_velocity(l, r).0.abs(), cnt + 1),
            None => (sum, cnt),
        };
    }
    let half = window_s / 2.0;
    let (mut lo, mut hi) = (0, 0);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let t = e.samples[i].t;
        while e.samples[lo].t < t - half - TIME_EPS {
            lo += 1;
        }
        while hi < n && e.samples[hi].t <= t + half + TIME_EPS {
            hi += 1;
        }
        let (sum, cnt) = (prefix[hi].0 - prefix[lo].0, prefix[hi].1 - prefix[lo].1);
        out.push(if cnt == 0 { 0.0 } else { sum / cnt as f64 });
    }
    out
}

/// Splits an episode into maximal moving stretches with complete sensors.
pub fn filter_episode(e: &RawEpisode, cfg: &FilterConfig) -> Vec<RawEpisode> {
    let speed = moving_average_speed(e, cfg.geometry, cfg.window_s);
    let ok: Vec<bool> = e
        .samples
        .iter()
        .zip(&speed)
        .map(|(s, &v)| s.sensors_present() && v >= cfg.min_speed)
        .collect();

    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut start: Option<usize> = None;
    for i in 0..e.samples.len() {
        let gap = i > 0 && e.samples[i].t - e.samples[i - 1].t > cfg.max_gap;
        if gap {
            if let Some(s) = start.take() {
                runs.push((s, i));
            }
        }
        match (ok[i], start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                runs.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        runs.push((s, e.samples.len()));
    }
    runs.retain(|&(s, end)| e.samples[end - 1].t - e.samples[s].t >= cfg.min_duration_s);

    if runs.len() == 1 && runs[0] == (0, e.samples.len()) {
        return vec![e.clone()];
    }
    runs.iter()
        .enumerate()
        .map(|(k, &(s, end))| RawEpisode {
            id: format!("{}/{}", e.id, k),
            samples: e.samples[s..end].to_vec(),
            native_rate_hz: e.native_rate_hz,
        })
        .collect()
}

/// Sensors aligned to the 4 Hz grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedSeries {
    pub t: Vec<f64>,
    pub gps: Vec<GeoPoint>,
    pub heading: Vec<f64>,
    /// Mean wheel speeds over `(t[i], t[i + 1]]`; the last entry holds the
    /// final raw value.
    pub wheel_rpm: Vec<(f64, f64)>,
    pub command: Vec<(f64, f64)>,
    pub obs: Vec<Option<String>>,
}

impl AlignedSeries {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// Index of the last sample at or before `t` (zero-order hold).
fn hold_index(times: &[f64], t: f64) -> Option<usize> {
    let k = times.partition_point(|&s| s <= t + TIME_EPS);
    k.checked_sub(1)
}

fn lerp(a: f64, b: f64, u: f64) -> f64 {
    a + (b - a) * u
}

/// Aligns a sensor-complete episode to a uniform 0.25 s grid.
pub fn resample_4hz(e: &RawEpisode) -> Result<AlignedSeries> {
    if e.native_rate_hz < GRID_HZ {
        return Err(Error::InsufficientRate {
            rate_hz: e.native_rate_hz,
        });
    }
    if e.samples.iter().any(|s| !s.sensors_present()) {
        return Err(Error::MissingSensor(e.id.clone()));
    }
    let times: Vec<f64> = e.samples.iter().map(|s| s.t).collect();
    let commands = command_stream(e);
    if commands.is_empty() {
        return Err(Error::MissingSensor(e.id.clone()));
    }
    let cmd_t: Vec<f64> = commands.iter().map(|c| c.0).collect();
    let mut out = AlignedSeries {
        t: vec![],
        gps: vec![],
        heading: vec![],
        wheel_rpm: vec![],
        command: vec![],
        obs: vec![],
    };
    let Some((&t_first, &t_end)) = times.first().zip(times.last()) else {
        return Ok(out);
    };
    let obs_times: Vec<(f64, &String)> = e
        .samples
        .iter()
        .filter_map(|s| s.obs.as_ref().map(|o| (s.t, o)))
        .collect();
    // The grid starts at the first observation so every step has one.
    let t0 = obs_times.first().map_or(t_first, |o| o.0);
    let n_grid = ((t_end - t0) / GRID_DT + TIME_EPS).floor() as usize + 1;
    let obs_t: Vec<f64> = obs_times.iter().map(|o| o.0).collect();

    for k in 0..n_grid {
        let t = t0 + k as f64 * GRID_DT;
        let i = hold_index(&times, t).unwrap_or(0);
        let a = &e.samples[i];
        let (gps, heading) = if (a.t - t).abs() <= TIME_EPS || i + 1 >= e.samples.len() {
            (a.gps.unwrap(), a.heading.unwrap())
        } else {
            let b = &e.samples[i + 1];
            let u = (t - a.t) / (b.t - a.t);
            let (ga, gb) = (a.gps.unwrap(), b.gps.unwrap());
            let mut dlon = gb.lon_deg() - ga.lon_deg();
            if dlon > 180.0 {
                dlon -= 360.0;
            } else if dlon < -180.0 {
                dlon += 360.0;
            }
            let mut lon = ga.lon_deg() + dlon * u;
            if lon > 180.0 {
                lon -= 360.0;
            } else if lon < -180.0 {
                lon += 360.0;
            }
            let gps = GeoPoint::new(lerp(ga.lat_deg(), gb.lat_deg(), u), lon)?;
            let (ha, hb) = (a.heading.unwrap(), b.heading.unwrap());
            (gps, wrap_angle(ha + wrap_angle(hb - ha) * u))
        };
        out.t.push(t);
        out.gps.push(gps);
        out.heading.push(heading);
        out.command.push(commands[hold_index(&cmd_t, t).unwrap_or(0)].1);
        out.obs.push(hold_index(&obs_t, t).map(|j| obs_times[j].1.clone()));
    }

    // Raw wheel speeds are interval means over (t[k-1], t[k]].
    for k in 0..n_grid {
        let (ta, tb) = (out.t[k], out.t[k] + GRID_DT);
        if k + 1 == n_grid {
            out.wheel_rpm.push(e.samples.last().unwrap().wheel_rpm.unwrap());
            continue;
        }
        let (mut sl, mut sr, mut w) = (0.0, 0.0, 0.0);
        for j in 1..e.samples.len() {
            let (lo, hi) = (e.samples[j - 1].t.max(ta), e.samples[j].t.min(tb));
            if hi > lo {
                let (l, r) = e.samples[j].wheel_rpm.unwrap();
                sl += l * (hi - lo);
                sr += r * (hi - lo);
                w += hi - lo;
            }
            if e.samples[j - 1].t >= tb {
                break;
            }
        }
        out.wheel_rpm.push(if w > 0.0 {
            (sl / w, sr / w)
        } else {
            e.samples[hold_index(&times, ta).unwrap_or(0)].wheel_rpm.unwrap()
        });
    }
    Ok(out)
}

/// Timestamped commands; they may be logged more sparsely than the sensors.
pub fn command_stream(e: &RawEpisode) -> Vec<(f64, (f64, f64))> {
    e.samples.iter().filter_map(|s| s.command.map(|c| (s.t, c))).collect()
}

/// Attaches to each grid time the commands at `t + {0.0, 0.1, ..., 0.9}`.
///
/// Returns `(grid index, chunk)` for every grid time whose whole horizon is
/// covered by recorded commands; later grid times are dropped.
pub fn build_action_chunks(commands: &[(f64, (f64, f64))], grid: &[f64]) -> Vec<(usize, ActionChunk)> {
    let times: Vec<f64> = commands.iter().map(|c| c.0).collect();
    let Some(&t_last) = times.last() else {
        return vec![];
    };
    let mut out = Vec::new();
    for (i, &t) in grid.iter().enumerate() {
        if t + (CHUNK_LEN - 1) as f64 * CHUNK_DT > t_last + TIME_EPS || t < times[0] - TIME_EPS {
            continue;
        }
        let mut chunk = [[0.0; 2]; CHUNK_LEN];
        for (k, slot) in chunk.iter_mut().enumerate() {
            let q = t + k as f64 * CHUNK_DT;
            let j = hold_index(&times, q).unwrap_or(0);
            *slot = [commands[j].1 .0, commands[j].1 .1];
        }
        out.push((i, chunk));
    }
    out
}

/// Cumulative path length along a pose sequence.
pub fn cumulative_length(poses: &[PoseSE2]) -> Vec<f64> {
    let mut acc = Vec::with_capacity(poses.len());
    let mut s = 0.0;
    for (i, p) in poses.iter().enumerate() {
        if i > 0 {
            s += (p.x - poses[i - 1].x).hypot(p.y - poses[i - 1].y);
        }
        acc.push(s);
    }
    acc
}

fn path_length(poses: &[PoseSE2]) -> f64 {
    cumulative_length(poses).last().copied().unwrap_or(0.0)
}

/// Cuts a trajectory into goal-reaching segments `[start, end)`.
///
/// From each segment start the distance-from-start curve is scanned; the
/// segment ends at the first local maximum whose prominence reaches
/// `min_prominence_m`. Since the curve starts at zero, that peak is the
/// running maximum at the moment the curve first falls `min_prominence_m`
/// below it. The trailing partial segment is kept if it is at least
/// `min_length_m` long.
pub fn segment_goals(poses: &[PoseSE2], min_prominence_m: f64, min_length_m: f64) -> Vec<(usize, usize)> {
    let n = poses.len();
    let mut out = Vec::new();
    let mut s = 0;
    while s + 1 < n {
        let origin = poses[s];
        let mut peak = (s, 0.0_f64);
        let mut split = None;
        for (i, p) in poses.iter().enumerate().skip(s + 1) {
            let f = (p.x - origin.x).hypot(p.y - origin.y);
            if f > peak.1 {
                peak = (i, f);
            } else if peak.1 - f >= min_prominence_m {
                split = Some(peak.0);
                break;
            }
        }
        match split {
            Some(k) => {
                out.push((s, k + 1));
                s = k + 1;
            }
            None => {
                if path_length(&poses[s..]) >= min_length_m {
                    out.push((s, n));
                }
                break;
            }
        }
    }
    out
}

/// A curated goal-reaching segment on the 4 Hz grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub episode_id: String,
    /// Grid indices into the parent (filtered) episode, `[start, end)`.
    pub start_index: usize,
    pub end_index: usize,
    pub times: Vec<f64>,
    pub poses: Vec<PoseSE2>,
    pub obs: Vec<Option<String>>,
    pub actions_gt: Vec<ActionChunk>,
}

impl Demonstration {
    pub fn id(&self) -> String {
        format!("{}:{}-{}", self.episode_id, self.start_index, self.end_index)
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Wall-clock duration at 4 Hz.
    pub fn duration_s(&self) -> f64 {
        self.poses.len() as f64 * GRID_DT
    }

    pub fn path_length_m(&self) -> f64 {
        path_length(&self.poses)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurationConfig {
    pub filter: FilterConfig,
    pub fusion: FusionNoise,
    pub min_prominence_m: f64,
    pub min_length_m: f64,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self {
            filter: FilterConfig::default(),
            fusion: FusionNoise::default(),
            min_prominence_m: 10.0,
            min_length_m: 20.0,
        }
    }
}

/// Fuses one filtered episode and cuts it into demonstrations.
pub fn demonstrations_from_filtered(e: &RawEpisode, cfg: &CurationConfig) -> Result<Vec<Demonstration>> {
    let series = resample_4hz(e)?;
    if series.len() < 2 {
        return Ok(vec![]);
    }
    let problem = posegraph::build_problem(&series, series.gps[0], cfg.filter.geometry, &cfg.fusion)?;
    let fused = posegraph::optimize(&problem, &SolverOptions::default());
    let commands = command_stream(e);
    let chunks = build_action_chunks(&commands, &series.t);
    // Chunked grid points form a prefix of the grid.
    let m = chunks.len();
    let poses = &fused.poses[..m];
    let mut demos = Vec::new();
    for (s, end) in segment_goals(poses, cfg.min_prominence_m, cfg.min_length_m) {
        if path_length(&poses[s..end]) <= cfg.min_length_m {
            continue;
        }
        demos.push(Demonstration {
            episode_id: e.id.clone(),
            start_index: s,
            end_index: end,
            times: series.t[s..end].to_vec(),
            poses: poses[s..end].to_vec(),
            obs: series.obs[s..end].to_vec(),
            actions_gt: chunks[s..end].iter().map(|c| c.1).collect(),
        });
    }
    Ok(demos)
}

/// Full per-episode curation: filter, align, fuse, chunk and segment.
pub fn curate_episode(e: &RawEpisode, cfg: &CurationConfig) -> Result<Vec<Demonstration>> {
    let mut out = Vec::new();
    for sub in filter_episode(e, &cfg.filter) {
        out.extend(demonstrations_from_filtered(&sub, cfg)?);
    }
    Ok(out)
}

/// Normalization limits for the action space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionLimits {
    pub v_max: f64,
    pub omega_max: f64,
}

impl Default for ActionLimits {
    fn default() -> Self {
        Self {
            v_max: 1.0,
            omega_max: 1.5,
        }
    }
}

impl ActionLimits {
    pub fn normalize(&self, (v, w): (f64, f64)) -> [f64; 2] {
        [(v / self.v_max).clamp(-1.0, 1.0), (w / self.omega_max).clamp(-1.0, 1.0)]
    }

    pub fn denormalize(&self, a: [f64; 2]) -> (f64, f64) {
        (a[0].clamp(-1.0, 1.0) * self.v_max, a[1].clamp(-1.0, 1.0) * self.omega_max)
    }
}

/// Goal input `(distance km clipped to [0, 1], bearing / pi)` from `pose` to `goal`.
pub fn goal_vector(pose: &PoseSE2, goal: [f64; 2]) -> [f64; 2] {
    let (dx, dy) = (goal[0] - pose.x, goal[1] - pose.y);
    let d = (dx.hypot(dy) / 1000.0).clamp(0.0, 1.0);
    let bearing = wrap_angle(dy.atan2(dx) - pose.theta);
    [d, bearing / std::f64::consts::PI]
}

#[derive(Debug, Clone, PartialEq)]
pub struct GoalDraw {
    pub goal: [f64; 2],
    pub goal_index: usize,
    /// One goal vector per history step, oldest first.
    pub history: Vec<[f64; 2]>,
}

/// History indices `t - P + 1 ..= t`, clamped at the demonstration start.
pub fn history_indices(t_index: usize, history: usize) -> Vec<usize> {
    (0..history)
        .map(|k| (t_index + k + 1).saturating_sub(history))
        .collect()
}

/// Draws a goal uniformly among future poses within 150 m of travel.
pub fn sample_goal<R: Rng + ?Sized>(demo: &Demonstration, t_index: usize, history: usize, rng: &mut R) -> GoalDraw {
    let cum = cumulative_length(&demo.poses);
    let base = cum[t_index];
    let last = (t_index + 1..demo.poses.len())
        .take_while(|&j| cum[j] - base <= GOAL_HORIZON_M)
        .last()
        .unwrap_or(t_index + 1);
    let j = rng.random_range(t_index + 1..=last);
    let goal = demo.poses[j].xy();
    GoalDraw {
        goal,
        goal_index: j,
        history: history_indices(t_index, history)
            .into_iter()
            .map(|h| goal_vector(&demo.poses[h], goal))
            .collect(),
    }
}

/// Number of rays in the observation fan.
pub const RANGE_RAYS: usize = 64;

/// Packs normalized ranges into an observation reference string.
pub fn encode_ranges(ranges: &[f64]) -> String {
    let bytes: Vec<u8> = ranges
        .iter()
        .map(|r| (r.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    format!("r8:{}", base64::engine::general_purpose::STANDARD.encode(bytes))
}

/// Unpacks an observation produced by [`encode_ranges`].
pub fn decode_ranges(obs: &str) -> Option<Vec<f64>> {
    let payload = obs.strip_prefix("r8:")?;
    let bytes = base64::engine::general_purpose::STANDARD.decode(payload).ok()?;
    Some(bytes.into_iter().map(|b| b as f64 / 255.0).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub obs_history: Vec<Vec<f64>>,
    pub goal_history: Vec<[f64; 2]>,
    pub target_chunk: ActionChunk,
    pub mirror_flag: bool,
}

/// Left-right mirror: reversed fan, negated bearings and angular velocities.
pub fn mirror_augment(sample: &TrainingSample) -> TrainingSample {
    TrainingSample {
        obs_history: sample
            .obs_history
            .iter()
            .map(|r| r.iter().rev().copied().collect())
            .collect(),
        goal_history: sample.goal_history.iter().map(|g| [g[0], -g[1]]).collect(),
        target_chunk: sample.target_chunk.map(|a| [a[0], -a[1]]),
        mirror_flag: !sample.mirror_flag,
    }
}

/// Demonstrations with decoded observations, ready to emit samples.
#[derive(Debug, Clone)]
pub struct DemoDataset {
    demos: Vec<Demonstration>,
    ranges: Vec<Vec<Vec<f64>>>,
    pub history: usize,
    pub limits: ActionLimits,
}

impl DemoDataset {
    pub fn new(demos: Vec<Demonstration>, history: usize, limits: ActionLimits) -> Result<Self> {
        let mut ranges = Vec::with_capacity(demos.len());
        for d in &demos {
            let mut per = Vec::with_capacity(d.len());
            for o in &d.obs {
                let r = o
                    .as_deref()
                    .and_then(decode_ranges)
                    .ok_or_else(|| Error::MissingSensor(d.id()))?;
                per.push(r);
            }
            ranges.push(per);
        }
        Ok(Self {
            demos,
            ranges,
            history: history.max(1),
            limits,
        })
    }

    pub fn demos(&self) -> &[Demonstration] {
        &self.demos
    }

    /// Samples per epoch: every step with at least one future pose.
    pub fn len(&self) -> usize {
        self.demos.iter().map(|d| d.len().saturating_sub(1)).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_at<R: Rng + ?Sized>(&self, demo: usize, t: usize, rng: &mut R) -> TrainingSample {
        let d = &self.demos[demo];
        let goal = sample_goal(d, t, self.history, rng);
        TrainingSample {
            obs_history: history_indices(t, self.history)
                .into_iter()
                .map(|h| self.ranges[demo][h].clone())
                .collect(),
            goal_history: goal.history,
            target_chunk: d.actions_gt[t].map(|a| self.limits.normalize((a[0], a[1]))),
            mirror_flag: false,
        }
    }

    /// One sample per step, with goals freshly drawn from `rng`.
    pub fn draw_epoch<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<TrainingSample> {
        let mut out = Vec::with_capacity(self.len());
        for (k, d) in self.demos.iter().enumerate() {
            for t in 0..d.len().saturating_sub(1) {
                out.push(self.sample_at(k, t, rng));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Excluded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoRecord {
    pub demo_id: String,
    pub episode_id: String,
    pub steps: usize,
    pub duration_s: f64,
    pub path_length_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestCluster {
    pub cluster: LocationCluster,
    pub split: Split,
    pub hours: f64,
    pub demos: Vec<DemoRecord>,
    /// Subsampled fixes of all member episodes.
    pub footprint: Vec<GeoPoint>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub clusters: Vec<ManifestCluster>,
}

/// Stride for the fixes kept in a cluster footprint.
pub const FOOTPRINT_STRIDE: usize = 50;

impl DatasetManifest {
    /// Clusters raw episodes and files each demonstration under its
    /// episode's cluster. Sub-episode ids `parent/k` map to `parent`.
    pub fn build(episodes: &[RawEpisode], demos: &[Demonstration], params: ClusterParams) -> Self {
        let fixes: Vec<(String, Vec<GeoPoint>)> = episodes.iter().map(|e| (e.id.clone(), e.fixes())).collect();
        let clusters = cluster_by_proximity(&fixes, params);
        let mut owner: BTreeMap<String, usize> = BTreeMap::new();
        for (k, c) in clusters.iter().enumerate() {
            for id in &c.episode_ids {
                owner.insert(id.clone(), k);
            }
        }
        let fix_map: BTreeMap<&str, &Vec<GeoPoint>> = fixes.iter().map(|(id, f)| (id.as_str(), f)).collect();
        let mut out: Vec<ManifestCluster> = clusters
            .into_iter()
            .map(|c| {
                let footprint = c
                    .episode_ids
                    .iter()
                    .flat_map(|id| subsample_fixes(fix_map[id.as_str()], FOOTPRINT_STRIDE))
                    .collect();
                ManifestCluster {
                    cluster: c,
                    split: Split::Train,
                    hours: 0.0,
                    demos: vec![],
                    footprint,
                }
            })
            .collect();
        for d in demos {
            let parent = root_episode_id(&d.episode_id);
            if let Some(&k) = owner.get(parent) {
                out[k].demos.push(DemoRecord {
                    demo_id: d.id(),
                    episode_id: d.episode_id.clone(),
                    steps: d.len(),
                    duration_s: d.duration_s(),
                    path_length_m: d.path_length_m(),
                });
            }
        }
        for c in &mut out {
            c.demos.sort_by(|a, b| a.demo_id.cmp(&b.demo_id));
            c.hours = c.demos.iter().map(|d| d.duration_s).sum::<f64>() / 3600.0;
        }
        DatasetManifest { clusters: out }
    }

    pub fn train_clusters(&self) -> impl Iterator<Item = &ManifestCluster> {
        self.clusters.iter().filter(|c| c.split == Split::Train)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Strips filter suffixes: `ep/0/1` belongs to `ep`.
pub fn root_episode_id(id: &str) -> &str {
    id.split('/').next().unwrap_or(id)
}

/// Tags clusters within `radius_m` of any site as excluded.
pub fn geo_exclusion_split(manifest: &DatasetManifest, sites: &[GeoPoint], radius_m: f64) -> Result<DatasetManifest> {
    let mut out = manifest.clone();
    for c in &mut out.clusters {
        let d = min_distance_to_sites(&c.footprint, sites)?;
        c.split = if d < radius_m { Split::Excluded } else { Split::Train };
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetMember {
    pub cluster_id: usize,
    pub demo_ids: Vec<String>,
    pub hours: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetManifest {
    pub n_locations: usize,
    pub hours_per_location: f64,
    pub members: Vec<SubsetMember>,
}

impl SubsetManifest {
    pub fn total_hours(&self) -> f64 {
        self.members.iter().map(|m| m.hours).sum()
    }

    pub fn demo_ids(&self) -> Vec<String> {
        self.members.iter().flat_map(|m| m.demo_ids.iter().cloned()).collect()
    }
}

/// Builds one subset per requested `(locations, hours per location)` cell.
///
/// A seeded permutation of train clusters fixes the location order and a
/// seeded permutation of each cluster's demonstrations fixes the hour order,
/// so cells are nested in both directions.
pub fn subset_cells(manifest: &DatasetManifest, cells: &[(usize, f64)], seed: u64) -> Result<Vec<SubsetManifest>> {
    let mut clusters: Vec<&ManifestCluster> = manifest.train_clusters().collect();
    clusters.sort_by_key(|c| c.cluster.id);
    clusters.shuffle(&mut ChaCha8Rng::seed_from_u64(seed_mix(seed, 1)));
    let orders: Vec<Vec<&DemoRecord>> = clusters
        .iter()
        .map(|c| {
            let mut d: Vec<&DemoRecord> = c.demos.iter().collect();
            d.shuffle(&mut ChaCha8Rng::seed_from_u64(seed_mix(seed, 1000 + c.cluster.id as u64)));
            d
        })
        .collect();

    let mut shortfall = Vec::new();
    for &(n, h) in cells {
        if n > clusters.len() {
            shortfall.push(format!("{n} locations requested, {} available", clusters.len()));
            continue;
        }
        for c in &clusters[..n] {
            if c.hours + 1e-12 < h {
                shortfall.push(format!(
                    "cluster {} has {:.3} h, {h} h requested",
                    c.cluster.id, c.hours
                ));
            }
        }
    }
    if !shortfall.is_empty() {
        shortfall.dedup();
        return Err(Error::Infeasible(shortfall.join("; ")));
    }

    Ok(cells
        .iter()
        .map(|&(n, h)| {
            let target_s = h * 3600.0;
            let members = clusters[..n]
                .iter()
                .zip(&orders)
                .map(|(c, order)| {
                    let mut acc = 0.0;
                    let mut ids = Vec::new();
                    for d in order {
                        if acc >= target_s - 1e-9 {
                            break;
                        }
                        acc += d.duration_s;
                        ids.push(d.demo_id.clone());
                    }
                    SubsetMember {
                        cluster_id: c.cluster.id,
                        demo_ids: ids,
                        hours: acc / 3600.0,
                    }
                })
                .collect();
            SubsetManifest {
                n_locations: n,
                hours_per_location: h,
                members,
            }
        })
        .collect())
}

/// Full grid of nested subsets over `location_counts × hours_per_location`.
pub fn nested_subsets(
    manifest: &DatasetManifest,
    location_counts: &[usize],
    hours_per_location: &[f64],
    seed: u64,
) -> Result<Vec<SubsetManifest>> {
    let cells: Vec<(usize, f64)> = location_counts
        .iter()
        .flat_map(|&n| hours_per_location.iter().map(move |&h| (n, h)))
        .collect();
    subset_cells(manifest, &cells, seed)
}
