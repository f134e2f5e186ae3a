//! Scripted noisy teleoperator producing crowd-sourced-style logs.

use petgraph::algo::astar;
use petgraph::graph::{NodeIndex, UnGraph};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::curation::{encode_ranges, RawEpisode, RawSample};
use crate::error::{Error, Result};
use crate::geokit::GeoPoint;
use crate::posegraph::{from_local_frame, wrap_angle, PoseSE2, WheelGeometry};
use crate::simworld::{step, LocationSpec, RobotLimits, RobotState, TraceRow, World};

pub const LOG_HZ: f64 = 20.0;
pub const COMMAND_HZ: f64 = 10.0;
const TICK_S: f64 = 1.0 / LOG_HZ;
/// Log ticks between consecutive commands and between range scans.
const COMMAND_EVERY: usize = 2;
const OBS_EVERY: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OperatorProfile {
    /// Standard deviations of additive (v, omega) command noise.
    pub action_noise: (f64, f64),
    /// Chance per command tick of starting a pause.
    pub pause_prob: f64,
    pub detour_prob: f64,
    pub speed_factor: f64,
    pub heading_bias: f64,
    /// Standard deviation of the slowly drifting lateral offset from the
    /// route centerline that the operator steers toward.
    pub wander_m: f64,
}

/// Correlation time of the lateral wander.
const WANDER_TAU_S: f64 = 4.0;

impl Default for OperatorProfile {
    fn default() -> Self {
        Self {
            action_noise: (0.05, 0.1),
            pause_prob: 0.002,
            detour_prob: 0.05,
            speed_factor: 0.8,
            heading_bias: 0.0,
            wander_m: 0.5,
        }
    }
}

impl OperatorProfile {
    pub fn noiseless() -> Self {
        Self {
            action_noise: (0.0, 0.0),
            pause_prob: 0.0,
            detour_prob: 0.0,
            speed_factor: 1.0,
            heading_bias: 0.0,
            wander_m: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.pause_prob)
            && (0.0..=1.0).contains(&self.detour_prob)
            && (0.5..=1.0).contains(&self.speed_factor)
            && self.action_noise.0 >= 0.0
            && self.action_noise.1 >= 0.0
            && self.heading_bias.is_finite()
            && self.wander_m >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid operator profile {self:?}")))
        }
    }
}

/// Shortest walk over the route graph, with random out-and-back detours.
pub fn plan_route<R: Rng + ?Sized>(
    world: &LocationSpec,
    start: usize,
    goal: usize,
    rng: &mut R,
    detour_prob: f64,
) -> Result<Vec<usize>> {
    let g = &world.route_graph;
    for n in [start, goal] {
        if n >= g.nodes.len() {
            return Err(Error::UnknownNode(n));
        }
    }
    let mut graph = UnGraph::<(), f64>::with_capacity(g.nodes.len(), g.edges.len());
    for _ in &g.nodes {
        graph.add_node(());
    }
    for &(a, b) in &g.edges {
        graph.add_edge(NodeIndex::new(a), NodeIndex::new(b), g.edge_length(a, b));
    }
    let (_, path) = astar(
        &graph,
        NodeIndex::new(start),
        |n| n.index() == goal,
        |e| *e.weight(),
        |_| 0.0,
    )
    .ok_or(Error::Unreachable { from: start, to: goal })?;
    let path: Vec<usize> = path.into_iter().map(|n| n.index()).collect();

    let mut walk = vec![path[0]];
    for i in 1..path.len() {
        let n = path[i];
        walk.push(n);
        if i + 1 < path.len() && detour_prob > 0.0 && rng.random_bool(detour_prob) {
            let side: Vec<usize> = g
                .neighbors(n)
                .into_iter()
                .filter(|&m| m != path[i - 1] && m != path[i + 1])
                .collect();
            if !side.is_empty() {
                walk.push(side[rng.random_range(0..side.len())]);
                walk.push(n);
            }
        }
    }
    Ok(walk)
}

/// Length of a waypoint polyline.
pub fn polyline_length(points: &[[f64; 2]]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]))
        .sum()
}

/// Arc-length parameterized polyline with forward-only projection.
#[derive(Debug, Clone)]
pub struct PathTracker {
    points: Vec<[f64; 2]>,
    cum: Vec<f64>,
    progress: f64,
}

impl PathTracker {
    pub fn new(points: Vec<[f64; 2]>) -> Self {
        let mut cum = vec![0.0];
        for w in points.windows(2) {
            let last = *cum.last().unwrap();
            cum.push(last + (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]));
        }
        Self {
            points,
            cum,
            progress: 0.0,
        }
    }

    pub fn length(&self) -> f64 {
        *self.cum.last().unwrap_or(&0.0)
    }

    pub fn progress(&self) -> f64 {
        self.progress
    }

    pub fn point_at(&self, s: f64) -> [f64; 2] {
        let s = s.clamp(0.0, self.length());
        let k = self.cum.partition_point(|&c| c <= s).clamp(1, self.points.len().max(2) - 1);
        if self.points.len() < 2 {
            return self.points[0];
        }
        let (a, b) = (self.points[k - 1], self.points[k]);
        let seg = self.cum[k] - self.cum[k - 1];
        let u = if seg > 0.0 { (s - self.cum[k - 1]) / seg } else { 0.0 };
        [a[0] + (b[0] - a[0]) * u, a[1] + (b[1] - a[1]) * u]
    }

    /// Arc length of the closest point to `p` among all segments, and its distance.
    pub fn project(&self, p: [f64; 2]) -> (f64, f64) {
        self.project_range(p, 0.0, f64::INFINITY)
    }

    fn project_range(&self, p: [f64; 2], lo: f64, hi: f64) -> (f64, f64) {
        let mut best = (0.0, f64::INFINITY);
        if self.points.len() == 1 {
            let a = self.points[0];
            return (0.0, (p[0] - a[0]).hypot(p[1] - a[1]));
        }
        for k in 1..self.points.len() {
            if self.cum[k] < lo || self.cum[k - 1] > hi {
                continue;
            }
            let (a, b) = (self.points[k - 1], self.points[k]);
            let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
            let len2 = dx * dx + dy * dy;
            let mut u = if len2 > 0.0 {
                (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let s0 = self.cum[k - 1];
            let seg = self.cum[k] - s0;
            if seg > 0.0 {
                u = u.clamp(((lo - s0) / seg).max(0.0), ((hi - s0) / seg).min(1.0));
            }
            let d = (p[0] - a[0] - u * dx).hypot(p[1] - a[1] - u * dy);
            if d < best.1 {
                best = (s0 + u * seg, d);
            }
        }
        best
    }

    /// Advances the progress marker within a short window ahead, which keeps
    /// out-and-back walks from skipping their return leg.
    pub fn update(&mut self, p: [f64; 2], window: f64) -> f64 {
        let (s, _) = self.project_range(p, self.progress, self.progress + window);
        self.progress = self.progress.max(s);
        self.progress
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DriveConfig {
    pub lookahead_m: f64,
    pub goal_tolerance_m: f64,
    /// Defaults to a bound derived from the path length.
    pub timeout_s: Option<f64>,
    pub sigma_gps_m: f64,
    pub sigma_heading_rad: f64,
    pub limits: RobotLimits,
    pub geometry: WheelGeometry,
}

impl Default for DriveConfig {
    fn default() -> Self {
        Self {
            lookahead_m: 2.0,
            goal_tolerance_m: 2.0,
            timeout_s: None,
            sigma_gps_m: 3.0,
            sigma_heading_rad: 0.05,
            limits: RobotLimits::default(),
            geometry: WheelGeometry::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DriveOutcome {
    pub episode: RawEpisode,
    pub timed_out: bool,
    pub collisions: usize,
    /// Ground-truth trajectory at the log rate.
    pub trace: Vec<TraceRow>,
}

/// Pure-pursuit command toward the lookahead point, before noise.
pub fn pursuit_command(pose: &PoseSE2, target: [f64; 2], v_cap: f64, limits: &RobotLimits) -> (f64, f64) {
    let (dx, dy) = (target[0] - pose.x, target[1] - pose.y);
    let dist = dx.hypot(dy).max(1e-6);
    let alpha = wrap_angle(dy.atan2(dx) - pose.theta);
    if alpha.abs() > 1.0 {
        // Sharp turn: pivot nearly in place.
        return (0.1 * v_cap, alpha.signum() * 0.8 * limits.omega_max);
    }
    let v = v_cap * (1.0 - 0.6 * alpha.abs());
    let omega = (2.0 * v * alpha.sin() / dist).clamp(-limits.omega_max, limits.omega_max);
    (v, omega)
}

fn gauss<R: Rng + ?Sized>(rng: &mut R, sigma: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    sigma * z
}

/// Drives the waypoint polyline and logs a raw episode.
pub fn drive<R: Rng + ?Sized>(
    world: &World,
    waypoints: &[[f64; 2]],
    profile: &OperatorProfile,
    cfg: &DriveConfig,
    anchor: GeoPoint,
    episode_id: &str,
    rng: &mut R,
) -> Result<DriveOutcome> {
    profile.validate()?;
    if waypoints.is_empty() {
        return Err(Error::Config("empty waypoint list".into()));
    }
    let goal = *waypoints.last().unwrap();
    let heading0 = if waypoints.len() > 1 {
        (waypoints[1][1] - waypoints[0][1]).atan2(waypoints[1][0] - waypoints[0][0])
    } else {
        0.0
    };
    let mut tracker = PathTracker::new(waypoints.to_vec());
    let v_cap = profile.speed_factor * cfg.limits.v_max;
    let timeout = cfg
        .timeout_s
        .unwrap_or(60.0 + 3.0 * tracker.length() / v_cap);
    let mut state = RobotState::at_rest(PoseSE2::new(waypoints[0][0], waypoints[0][1], heading0));

    let mut samples = Vec::new();
    let mut trace = Vec::new();
    let mut cmd = (0.0, 0.0);
    let mut pause_left = 0.0;
    let mut recover_left = 0.0;
    let mut collisions = 0;
    let mut last_motion = (0.0, 0.0);
    let mut collided = false;
    let mut tick = 0usize;
    let mut timed_out = false;
    let wander_decay = (-1.0 / (COMMAND_HZ * WANDER_TAU_S)).exp();
    let mut wander = gauss(rng, profile.wander_m);
    loop {
        let t = tick as f64 * TICK_S;
        let p = state.pose.xy();
        let done = (p[0] - goal[0]).hypot(p[1] - goal[1]) <= cfg.goal_tolerance_m
            && tracker.progress() >= tracker.length() - cfg.lookahead_m - cfg.goal_tolerance_m;
        if !done && t >= timeout {
            timed_out = true;
        }
        let is_cmd_tick = tick % COMMAND_EVERY == 0;
        if is_cmd_tick {
            cmd = if done || timed_out {
                (0.0, 0.0)
            } else if recover_left > 0.0 {
                recover_left -= 1.0 / COMMAND_HZ;
                (-0.3, 0.0)
            } else if pause_left > 0.0 {
                pause_left -= 1.0 / COMMAND_HZ;
                (0.0, 0.0)
            } else if profile.pause_prob > 0.0 && rng.random_bool(profile.pause_prob) {
                pause_left = rng.random_range(2.0..6.0) - 1.0 / COMMAND_HZ;
                (0.0, 0.0)
            } else {
                let s = tracker.update(p, 3.0 * cfg.lookahead_m);
                let mut target = tracker.point_at(s + cfg.lookahead_m);
                if profile.wander_m > 0.0 {
                    wander = wander_decay * wander + (1.0 - wander_decay * wander_decay).sqrt() * gauss(rng, profile.wander_m);
                    let offset = wander.clamp(-2.0 * profile.wander_m, 2.0 * profile.wander_m);
                    let (a, b) = (tracker.point_at(s + cfg.lookahead_m - 0.5), tracker.point_at(s + cfg.lookahead_m + 0.5));
                    let (tx, ty) = (b[0] - a[0], b[1] - a[1]);
                    let norm = tx.hypot(ty);
                    if norm > 1e-9 {
                        target = [target[0] - offset * ty / norm, target[1] + offset * tx / norm];
                    }
                }
                let (v, w) = pursuit_command(&state.pose, target, v_cap, &cfg.limits);
                (
                    (v + gauss(rng, profile.action_noise.0)).clamp(-cfg.limits.v_max, cfg.limits.v_max),
                    (w + gauss(rng, profile.action_noise.1)).clamp(-cfg.limits.omega_max, cfg.limits.omega_max),
                )
            };
        }
        let (ex, ey) = (gauss(rng, cfg.sigma_gps_m), gauss(rng, cfg.sigma_gps_m));
        let gps = from_local_frame(anchor, state.pose.x + ex, state.pose.y + ey)?;
        let heading = wrap_angle(state.pose.theta + profile.heading_bias + gauss(rng, cfg.sigma_heading_rad));
        let rpm = cfg.geometry.wheel_rpm(last_motion.0 / TICK_S, last_motion.1 / TICK_S);
        samples.push(RawSample {
            t,
            gps: Some(gps),
            heading: Some(heading),
            wheel_rpm: Some(rpm),
            command: is_cmd_tick.then_some(cmd),
            obs: (tick % OBS_EVERY == 0).then(|| encode_ranges(&world.range_fan(&state.pose))),
        });
        trace.push(TraceRow {
            t,
            x: state.pose.x,
            y: state.pose.y,
            theta: state.pose.theta,
            v: state.v,
            omega: state.omega,
            collided,
        });
        if done || timed_out {
            break;
        }
        let r = step(&state, cmd, TICK_S, world, &cfg.limits);
        collided = r.collided;
        if r.collided {
            collisions += 1;
            if recover_left <= 0.0 && cmd.0 > 0.0 {
                recover_left = 1.0;
            }
        }
        last_motion = (r.distance, r.rotation);
        state = r.state;
        tick += 1;
    }
    Ok(DriveOutcome {
        episode: RawEpisode {
            id: episode_id.to_string(),
            samples,
            native_rate_hz: LOG_HZ,
        },
        timed_out,
        collisions,
        trace,
    })
}

/// Waypoint positions of a node walk.
pub fn walk_points(world: &LocationSpec, walk: &[usize]) -> Vec<[f64; 2]> {
    walk.iter().map(|&n| world.route_graph.nodes[n]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simworld::{Obstacle, ObstacleKind, RouteGraph, Shape, WorldStyle};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec_with(graph: RouteGraph, obstacles: Vec<Obstacle>) -> LocationSpec {
        LocationSpec {
            seed: 0,
            extent: [200.0, 200.0],
            style: WorldStyle {
                street_width_m: 4.0,
                block_size_m: 0.0,
                block_jitter: 0.0,
                clutter_density: 0.0,
                clutter_scale_m: 0.0,
                loop_fraction: 0.0,
                grid_n: 0,
            },
            obstacles,
            route_graph: graph,
            spawn_poses: vec![],
        }
    }

    fn line_graph(n: usize) -> RouteGraph {
        RouteGraph {
            nodes: (0..n).map(|i| [10.0 * i as f64, 0.0]).collect(),
            edges: (1..n).map(|i| (i - 1, i)).collect(),
        }
    }

    #[test]
    fn plan_trivial_cases() {
        let w = spec_with(line_graph(5), vec![]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(plan_route(&w, 2, 2, &mut rng, 0.0).unwrap(), vec![2]);
        assert_eq!(plan_route(&w, 0, 4, &mut rng, 0.0).unwrap(), vec![0, 1, 2, 3, 4]);
        assert!(matches!(plan_route(&w, 0, 9, &mut rng, 0.0), Err(Error::UnknownNode(9))));
        let mut g = line_graph(4);
        g.edges.pop();
        let w = spec_with(g, vec![]);
        assert!(matches!(plan_route(&w, 0, 3, &mut rng, 0.0), Err(Error::Unreachable { .. })));
    }

    #[test]
    fn detours_form_connected_walk() {
        let w = generate();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let last = w.route_graph.nodes.len() - 1;
        let walk = plan_route(&w, 0, last, &mut rng, 0.8).unwrap();
        assert_eq!(walk[0], 0);
        assert_eq!(*walk.last().unwrap(), last);
        for p in walk.windows(2) {
            assert!(w.route_graph.neighbors(p[0]).contains(&p[1]));
        }
    }

    fn generate() -> LocationSpec {
        crate::simworld::generate_location(11).unwrap()
    }

    fn corridor() -> World {
        let wall = |y0: f64, y1: f64| Obstacle {
            kind: ObstacleKind::Wall,
            shape: Shape::Rect {
                min: [-5.0, y0],
                max: [60.0, y1],
            },
        };
        World::new(spec_with(line_graph(6), vec![wall(-3.0, -2.0), wall(2.0, 3.0)]))
    }

    #[test]
    fn noiseless_straight_corridor_reaches_goal() {
        let w = corridor();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = DriveConfig {
            sigma_gps_m: 0.0,
            sigma_heading_rad: 0.0,
            ..Default::default()
        };
        let pts = walk_points(&w, &[0, 1, 2, 3, 4, 5]);
        let anchor = GeoPoint::new(-0.11052, 34.75131).unwrap();
        let out = drive(&w, &pts, &OperatorProfile::noiseless(), &cfg, anchor, "c", &mut rng).unwrap();
        assert!(!out.timed_out);
        assert_eq!(out.collisions, 0);
        let end = out.trace.last().unwrap();
        assert!((end.x - 50.0).hypot(end.y) <= 2.0);
    }

    #[test]
    fn always_paused_is_stationary() {
        let w = corridor();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let profile = OperatorProfile {
            pause_prob: 1.0,
            ..OperatorProfile::noiseless()
        };
        let cfg = DriveConfig {
            timeout_s: Some(30.0),
            ..Default::default()
        };
        let pts = walk_points(&w, &[0, 1, 2]);
        let anchor = GeoPoint::new(0.0, 0.0).unwrap();
        let out = drive(&w, &pts, &profile, &cfg, anchor, "p", &mut rng).unwrap();
        assert!(out.timed_out);
        assert!(out.trace.iter().all(|r| r.x == 0.0 && r.y == 0.0));
    }
}
