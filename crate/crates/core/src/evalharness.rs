//! Closed-loop, segment-based evaluation and its metrics.

use std::collections::VecDeque;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::curation::ActionLimits;
use crate::error::{Error, Result};
use crate::exec::{self, seed_mix};
use crate::expert::{plan_route, polyline_length, pursuit_command, walk_points, PathTracker};
use crate::policy::{chunk_window, encode_inputs, MlpPolicy};
use crate::posegraph::PoseSE2;
use crate::simworld::{sense, step, LatencyQueue, RobotLimits, RobotState, SenseNoise, World, CONTROL_DT};

pub const SUCCESS_RADIUS_M: f64 = 10.0;
pub const WILSON_Z: f64 = 1.959964;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteSpec {
    pub route_id: String,
    /// Checkpoint 0 is the route start.
    pub checkpoints: Vec<[f64; 2]>,
    /// Route-graph polyline of each segment.
    pub paths: Vec<Vec<[f64; 2]>>,
    pub start_poses: Vec<PoseSE2>,
    pub success_radius_m: f64,
    pub time_limits_s: Vec<f64>,
}

impl RouteSpec {
    pub fn num_segments(&self) -> usize {
        self.paths.len()
    }

    pub fn segment_length(&self, i: usize) -> f64 {
        polyline_length(&self.paths[i])
    }

    pub fn length(&self) -> f64 {
        (0..self.num_segments()).map(|i| self.segment_length(i)).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RouteParams {
    pub segments: usize,
    pub min_spacing_m: f64,
    pub max_spacing_m: f64,
    /// Segment time limit is `time_factor × length / nominal_speed`.
    pub time_factor: f64,
    pub nominal_speed: f64,
}

impl Default for RouteParams {
    fn default() -> Self {
        Self {
            segments: 8,
            min_spacing_m: 30.0,
            max_spacing_m: 90.0,
            time_factor: 4.0,
            nominal_speed: 0.5,
        }
    }
}

/// Random chain of checkpoints on the route graph with straight-line spacing
/// inside the configured band.
pub fn generate_route<R: Rng + ?Sized>(
    world: &World,
    route_id: &str,
    params: &RouteParams,
    rng: &mut R,
) -> Result<RouteSpec> {
    let g = &world.route_graph;
    let n = g.nodes.len();
    let dist = |a: usize, b: usize| g.edge_length(a, b);
    let mut node = rng.random_range(0..n);
    let mut prev: Option<usize> = None;
    let mut route = RouteSpec {
        route_id: route_id.to_string(),
        checkpoints: vec![g.nodes[node]],
        paths: vec![],
        start_poses: vec![],
        success_radius_m: SUCCESS_RADIUS_M,
        time_limits_s: vec![],
    };
    for _ in 0..params.segments {
        let mut options: Vec<usize> = (0..n)
            .filter(|&m| (params.min_spacing_m..=params.max_spacing_m).contains(&dist(node, m)))
            .collect();
        // Avoid immediately returning to the previous checkpoint when possible.
        if options.len() > 1 {
            if let Some(p) = prev {
                options.retain(|&m| m != p);
            }
        }
        if options.is_empty() {
            return Err(Error::Infeasible(format!(
                "no checkpoint {}-{} m from node {node} in {route_id}",
                params.min_spacing_m, params.max_spacing_m
            )));
        }
        let next = options[rng.random_range(0..options.len())];
        let walk = plan_route(world, node, next, rng, 0.0)?;
        let pts = walk_points(world, &walk);
        let heading = (pts[1][1] - pts[0][1]).atan2(pts[1][0] - pts[0][0]);
        route.start_poses.push(PoseSE2::new(pts[0][0], pts[0][1], heading));
        route
            .time_limits_s
            .push(params.time_factor * polyline_length(&pts) / params.nominal_speed);
        route.paths.push(pts);
        route.checkpoints.push(g.nodes[next]);
        prev = Some(node);
        node = next;
    }
    Ok(route)
}

/// Inputs available to a policy at one control step.
pub struct StepInput<'a> {
    pub obs_history: &'a [Vec<f64>],
    pub goal_history: &'a [[f64; 2]],
    /// Privileged ground truth, used only by scripted baselines.
    pub state: &'a RobotState,
    pub path: &'a PathTracker,
}

pub trait NavPolicy: Sync {
    fn id(&self) -> String;
    fn history(&self) -> usize;
    /// Command `(v m/s, omega rad/s)` for this control period.
    fn act(&self, input: &StepInput) -> (f64, f64);
}

/// A trained regression policy deployed at 4 Hz.
///
/// Each control period executes the slice of the predicted chunk that
/// starts `lead_s` ahead, so a known actuation delay is skipped over.
#[derive(Debug, Clone)]
pub struct MlpNav {
    pub id: String,
    pub policy: MlpPolicy,
    pub limits: ActionLimits,
    pub lead_s: f64,
}

impl NavPolicy for MlpNav {
    fn id(&self) -> String {
        self.id.clone()
    }
    fn history(&self) -> usize {
        self.policy.history
    }
    fn act(&self, input: &StepInput) -> (f64, f64) {
        let x = encode_inputs(input.obs_history, input.goal_history, self.policy.history)
            .expect("harness keeps full histories");
        let chunk = self.policy.forward(&x).expect("input width fixed by history");
        self.limits.denormalize(chunk_window(&chunk, self.lead_s, CONTROL_DT))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConstantPolicy(pub f64, pub f64);

impl NavPolicy for ConstantPolicy {
    fn id(&self) -> String {
        format!("constant({},{})", self.0, self.1)
    }
    fn history(&self) -> usize {
        1
    }
    fn act(&self, _: &StepInput) -> (f64, f64) {
        (self.0, self.1)
    }
}

/// Noise-free pure pursuit on the ground-truth route.
#[derive(Debug, Clone, Copy)]
pub struct ScriptedExpert {
    pub lookahead_m: f64,
    pub speed: f64,
    pub limits: RobotLimits,
}

impl Default for ScriptedExpert {
    fn default() -> Self {
        Self {
            lookahead_m: 2.0,
            speed: 1.0,
            limits: RobotLimits::default(),
        }
    }
}

impl NavPolicy for ScriptedExpert {
    fn id(&self) -> String {
        "scripted-expert".into()
    }
    fn history(&self) -> usize {
        1
    }
    fn act(&self, input: &StepInput) -> (f64, f64) {
        let (s, _) = input.path.project(input.state.pose.xy());
        let target = input.path.point_at(s + self.lookahead_m);
        pursuit_command(&input.state.pose, target, self.speed, &self.limits)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub noise: SenseNoise,
    /// Standard deviation of the per-episode bearing bias.
    pub heading_bias_sigma: f64,
    pub latency_steps: usize,
    pub limits: RobotLimits,
    pub stuck_window_s: f64,
    pub stuck_progress_m: f64,
    pub off_route_m: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            noise: SenseNoise {
                sigma_d: 0.05,
                sigma_theta: 0.05,
                heading_bias: 0.0,
            },
            heading_bias_sigma: 0.05,
            latency_steps: 1,
            limits: RobotLimits::default(),
            stuck_window_s: 15.0,
            stuck_progress_m: 0.5,
            off_route_m: 25.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailureCause {
    CollisionStuck,
    OffRoute,
    Timeout,
}

impl fmt::Display for FailureCause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FailureCause::CollisionStuck => "collision-stuck",
            FailureCause::OffRoute => "off-route",
            FailureCause::Timeout => "timeout",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentOutcome {
    pub segment: usize,
    pub success: bool,
    pub cause: Option<FailureCause>,
    pub elapsed_s: f64,
    pub progress_m: f64,
    /// Robot state at the end, carried into the next segment on success.
    #[serde(skip)]
    pub final_state: RobotState,
}

/// Runs one segment in closed loop from `start` (or the segment start pose).
pub fn run_segment(
    policy: &dyn NavPolicy,
    world: &World,
    route: &RouteSpec,
    index: usize,
    sim: &SimConfig,
    seed: u64,
    start: Option<RobotState>,
) -> Result<SegmentOutcome> {
    if index >= route.num_segments() {
        return Err(Error::SegmentIndex {
            index,
            count: route.num_segments(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noise = sim.noise;
    if sim.heading_bias_sigma > 0.0 {
        noise.heading_bias += Normal::new(0.0, sim.heading_bias_sigma)
            .expect("finite sigma")
            .sample(&mut rng);
    }
    let path = PathTracker::new(route.paths[index].clone());
    let goal = route.checkpoints[index + 1];
    let limit = route.time_limits_s[index];
    let history = policy.history().max(1);
    let mut state = start.unwrap_or_else(|| RobotState::at_rest(route.start_poses[index]));
    let mut queue = LatencyQueue::new(sim.latency_steps);
    let mut obs_hist: VecDeque<Vec<f64>> = VecDeque::with_capacity(history);
    let mut goal_hist: VecDeque<[f64; 2]> = VecDeque::with_capacity(history);
    let window = (sim.stuck_window_s / CONTROL_DT).round() as usize;
    let mut positions: VecDeque<([f64; 2], bool)> = VecDeque::with_capacity(window + 1);
    positions.push_back((state.pose.xy(), false));

    let mut t = 0.0;
    let outcome = |success, cause, t, state: RobotState| {
        let progress = if success {
            path.length()
        } else {
            path.project(state.pose.xy()).0
        };
        SegmentOutcome {
            segment: index,
            success,
            cause,
            elapsed_s: t,
            progress_m: progress,
            final_state: state,
        }
    };
    loop {
        let p = state.pose.xy();
        if (p[0] - goal[0]).hypot(p[1] - goal[1]) <= route.success_radius_m {
            return Ok(outcome(true, None, t, state));
        }
        if path.project(p).1 > sim.off_route_m {
            return Ok(outcome(false, Some(FailureCause::OffRoute), t, state));
        }
        if positions.len() > window {
            let (old, _) = positions[0];
            let hit = positions.iter().skip(1).any(|&(_, c)| c);
            if hit && (p[0] - old[0]).hypot(p[1] - old[1]) <= sim.stuck_progress_m {
                return Ok(outcome(false, Some(FailureCause::CollisionStuck), t, state));
            }
        }
        if t >= limit {
            return Ok(outcome(false, Some(FailureCause::Timeout), t, state));
        }

        let obs = sense(&state, world, goal, &noise, &mut rng);
        if obs_hist.is_empty() {
            // Histories start padded with the first observation.
            for _ in 0..history {
                obs_hist.push_back(obs.ranges.clone());
                goal_hist.push_back(obs.goal);
            }
        } else {
            obs_hist.pop_front();
            goal_hist.pop_front();
            obs_hist.push_back(obs.ranges);
            goal_hist.push_back(obs.goal);
        }
        let cmd = policy.act(&StepInput {
            obs_history: obs_hist.make_contiguous(),
            goal_history: goal_hist.make_contiguous(),
            state: &state,
            path: &path,
        });
        let applied = queue.push(cmd);
        let r = step(&state, applied, CONTROL_DT, world, &sim.limits);
        state = r.state;
        t += CONTROL_DT;
        positions.push_back((state.pose.xy(), r.collided));
        if positions.len() > window + 1 {
            positions.pop_front();
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouteOutcome {
    pub route_id: String,
    pub rep: usize,
    pub segments: Vec<SegmentOutcome>,
}

/// Runs all segments in order: successes carry the robot state forward,
/// failures teleport it to the next segment start.
pub fn run_route(
    policy: &dyn NavPolicy,
    world: &World,
    route: &RouteSpec,
    rep: usize,
    sim: &SimConfig,
    seed: u64,
) -> Result<RouteOutcome> {
    let mut segments = Vec::with_capacity(route.num_segments());
    let mut carry = None;
    for i in 0..route.num_segments() {
        let s = run_segment(policy, world, route, i, sim, seed_mix(seed, i as u64), carry)?;
        carry = s.success.then(|| RobotState {
            v: 0.0,
            omega: 0.0,
            ..s.final_state
        });
        segments.push(s);
    }
    Ok(RouteOutcome {
        route_id: route.route_id.clone(),
        rep,
        segments,
    })
}

/// One row of the outcome CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRow {
    pub policy_id: String,
    pub route_id: String,
    pub rep: usize,
    pub segment: usize,
    pub success: bool,
    pub cause: String,
    pub elapsed_s: f64,
    pub progress_m: f64,
}

impl OutcomeRow {
    pub fn failure_cause(&self) -> Option<&str> {
        (!self.cause.is_empty()).then_some(self.cause.as_str())
    }
}

pub fn outcome_rows(policy_id: &str, route: &RouteOutcome) -> Vec<OutcomeRow> {
    route
        .segments
        .iter()
        .map(|s| OutcomeRow {
            policy_id: policy_id.to_string(),
            route_id: route.route_id.clone(),
            rep: route.rep,
            segment: s.segment,
            success: s.success,
            cause: s.cause.map(|c| c.to_string()).unwrap_or_default(),
            elapsed_s: s.elapsed_s,
            progress_m: s.progress_m,
        })
        .collect()
}

/// Evaluates `policy` on every route `reps` times; jobs run in parallel and
/// rows come back in (route, rep, segment) order.
pub fn evaluate(
    policy: &dyn NavPolicy,
    routes: &[(World, RouteSpec)],
    reps: usize,
    sim: &SimConfig,
    seed: u64,
) -> Result<Vec<OutcomeRow>> {
    let jobs: Vec<(usize, usize)> = (0..routes.len())
        .flat_map(|r| (0..reps).map(move |k| (r, k)))
        .collect();
    let id = policy.id();
    let results = exec::map(&jobs, |&(r, k)| {
        let (world, route) = &routes[r];
        let job_seed = seed_mix(seed_mix(seed, r as u64), k as u64);
        run_route(policy, world, route, k, sim, job_seed).map(|o| outcome_rows(&id, &o))
    });
    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }
    Ok(rows)
}

pub fn write_outcomes_csv<W: std::io::Write>(rows: &[OutcomeRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_outcomes_csv<R: std::io::Read>(input: R) -> Result<Vec<OutcomeRow>> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        rows.push(rec?);
    }
    Ok(rows)
}

/// Continuity-corrected Wilson score interval for `k` successes in `n`.
pub fn wilson_cc(k: usize, n: usize, z: f64) -> Result<(f64, f64)> {
    if n == 0 {
        return Err(Error::NoTrials);
    }
    let k = k.min(n);
    let nf = n as f64;
    let p = k as f64 / nf;
    let z2 = z * z;
    let denom = 2.0 * (nf + z2);
    let lower = if k == 0 {
        0.0
    } else {
        let root = (z2 - 1.0 / nf + 4.0 * nf * p * (1.0 - p) + (4.0 * p - 2.0)).max(0.0).sqrt();
        ((2.0 * nf * p + z2 - (z * root + 1.0)) / denom).max(0.0)
    };
    let upper = if k == n {
        1.0
    } else {
        let root = (z2 - 1.0 / nf + 4.0 * nf * p * (1.0 - p) - (4.0 * p - 2.0)).max(0.0).sqrt();
        ((2.0 * nf * p + z2 + (z * root + 1.0)) / denom).min(1.0)
    };
    Ok((lower, upper))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuccessRate {
    pub successes: usize,
    pub trials: usize,
    pub rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl SuccessRate {
    pub fn from_counts(k: usize, n: usize) -> Result<Self> {
        let (lo, hi) = wilson_cc(k, n, WILSON_Z)?;
        Ok(Self {
            successes: k,
            trials: n,
            rate: k as f64 / n as f64,
            ci_low: lo,
            ci_high: hi,
        })
    }

    pub fn failure_rate(&self) -> f64 {
        1.0 - self.rate
    }
}

pub fn success_rate(rows: &[OutcomeRow]) -> Result<SuccessRate> {
    SuccessRate::from_counts(rows.iter().filter(|r| r.success).count(), rows.len())
}

/// Interventions per 100 m of route progress.
pub fn nir(rows: &[OutcomeRow]) -> Option<f64> {
    let progress: f64 = rows.iter().map(|r| r.progress_m).sum();
    let failures = rows.iter().filter(|r| !r.success).count();
    (progress > 0.0).then(|| 100.0 * failures as f64 / progress)
}

/// Seconds per 100 m over successful segments.
pub fn nps(rows: &[OutcomeRow]) -> Option<f64> {
    let ok = rows.iter().filter(|r| r.success);
    let (t, d) = ok.fold((0.0, 0.0), |(t, d), r| (t + r.elapsed_s, d + r.progress_m));
    (d > 0.0).then(|| 100.0 * t / d)
}

/// Along-route progress until the first failed segment, inclusive of the
/// progress made on it. Rows must be one route run in segment order.
pub fn dist_to_first_failure(rows: &[OutcomeRow]) -> f64 {
    let mut total = 0.0;
    for r in rows {
        total += r.progress_m;
        if !r.success {
            break;
        }
    }
    total
}

/// Mean of [`dist_to_first_failure`] over each (route, rep) run.
pub fn mean_dist_to_first_failure(rows: &[OutcomeRow]) -> Option<f64> {
    let mut runs: std::collections::BTreeMap<(&str, &str, usize), Vec<&OutcomeRow>> = Default::default();
    for r in rows {
        runs.entry((&r.policy_id, &r.route_id, r.rep)).or_default().push(r);
    }
    if runs.is_empty() {
        return None;
    }
    let n = runs.len() as f64;
    let total: f64 = runs
        .into_values()
        .map(|mut v| {
            v.sort_by_key(|r| r.segment);
            let owned: Vec<OutcomeRow> = v.into_iter().cloned().collect();
            dist_to_first_failure(&owned)
        })
        .sum();
    Some(total / n)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(success: bool, elapsed: f64, progress: f64) -> OutcomeRow {
        OutcomeRow {
            policy_id: "p".into(),
            route_id: "r".into(),
            rep: 0,
            segment: 0,
            success,
            cause: if success { String::new() } else { "timeout".into() },
            elapsed_s: elapsed,
            progress_m: progress,
        }
    }

    #[test]
    fn wilson_degenerate_rules() {
        assert_eq!(wilson_cc(0, 10, WILSON_Z).unwrap().0, 0.0);
        assert_eq!(wilson_cc(10, 10, WILSON_Z).unwrap().1, 1.0);
        assert!(matches!(wilson_cc(0, 0, WILSON_Z), Err(Error::NoTrials)));
        let (lo, hi) = wilson_cc(81, 263, WILSON_Z).unwrap();
        assert!((lo - 0.253_508_681_907_059_4).abs() < 1e-9);
        assert!((hi - 0.368_176_201_518_496_4).abs() < 1e-9);
    }

    #[test]
    fn nir_and_nps() {
        assert_eq!(nir(&[row(true, 10.0, 50.0)]), Some(0.0));
        let r = [row(false, 5.0, 100.0), row(false, 5.0, 200.0)];
        assert!((nir(&r).unwrap() - 0.666_666_666_666_666_6).abs() < 1e-12);
        assert_eq!(nir(&[row(false, 5.0, 0.0)]), None);
        assert_eq!(nps(&[row(true, 100.0, 50.0)]), Some(200.0));
        assert_eq!(nps(&[row(true, 100.0, 50.0), row(false, 900.0, 5.0)]), Some(200.0));
        assert_eq!(nps(&[row(false, 100.0, 50.0)]), None);
    }

    #[test]
    fn dist_cases() {
        assert_eq!(dist_to_first_failure(&[row(false, 1.0, 0.0), row(true, 1.0, 40.0)]), 0.0);
        assert_eq!(dist_to_first_failure(&[row(true, 1.0, 40.0), row(true, 1.0, 60.0)]), 100.0);
        assert_eq!(
            dist_to_first_failure(&[row(true, 1.0, 40.0), row(false, 1.0, 12.5), row(true, 1.0, 60.0)]),
            52.5
        );
    }
}
