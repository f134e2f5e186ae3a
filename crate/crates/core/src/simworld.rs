//! Deterministic 2D differential-drive simulator over procedurally generated
//! street-grid locations.

use std::collections::VecDeque;
use std::f64::consts::PI;

use petgraph::unionfind::UnionFind;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::curation::RANGE_RAYS;
use crate::error::{Error, Result};
use crate::posegraph::{wrap_angle, PoseSE2};

pub const ROBOT_RADIUS_M: f64 = 0.25;
pub const CONTROL_DT: f64 = 0.25;
pub const SUBSTEPS: usize = 10;
pub const VELOCITY_TAU_S: f64 = 0.3;
pub const MAX_RANGE_M: f64 = 10.0;
pub const FOV_RAD: f64 = 110.0 * PI / 180.0;

/// Minimum free space kept around carved street centerlines.
const ROUTE_CLEARANCE_M: f64 = ROBOT_RADIUS_M + 0.35;
const CLUTTER_REROLLS: usize = 10;
const INDEX_CELL_M: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase")]
pub enum Shape {
    Rect { min: [f64; 2], max: [f64; 2] },
    Circle { center: [f64; 2], radius: f64 },
}

impl Shape {
    fn aabb(&self) -> ([f64; 2], [f64; 2]) {
        match *self {
            Shape::Rect { min, max } => (min, max),
            Shape::Circle { center: c, radius: r } => ([c[0] - r, c[1] - r], [c[0] + r, c[1] + r]),
        }
    }

    /// Distance from `p` to the shape surface; zero inside.
    pub fn distance(&self, p: [f64; 2]) -> f64 {
        match *self {
            Shape::Rect { min, max } => {
                let dx = (min[0] - p[0]).max(0.0).max(p[0] - max[0]);
                let dy = (min[1] - p[1]).max(0.0).max(p[1] - max[1]);
                dx.hypot(dy)
            }
            Shape::Circle { center, radius } => {
                ((p[0] - center[0]).hypot(p[1] - center[1]) - radius).max(0.0)
            }
        }
    }

    /// Entry distance of the ray `o + t·d` (unit `d`), if it hits.
    pub fn ray_hit(&self, o: [f64; 2], d: [f64; 2]) -> Option<f64> {
        match *self {
            Shape::Rect { min, max } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                for k in 0..2 {
                    if d[k].abs() < 1e-15 {
                        if o[k] < min[k] || o[k] > max[k] {
                            return None;
                        }
                    } else {
                        let (a, b) = ((min[k] - o[k]) / d[k], (max[k] - o[k]) / d[k]);
                        let (a, b) = if a < b { (a, b) } else { (b, a) };
                        t0 = t0.max(a);
                        t1 = t1.min(b);
                    }
                }
                (t1 >= t0.max(0.0)).then_some(t0.max(0.0))
            }
            Shape::Circle { center, radius } => {
                let (fx, fy) = (o[0] - center[0], o[1] - center[1]);
                let b = fx * d[0] + fy * d[1];
                let c = fx * fx + fy * fy - radius * radius;
                if c <= 0.0 {
                    return Some(0.0);
                }
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let t = -b - disc.sqrt();
                (t >= 0.0).then_some(t)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObstacleKind {
    Wall,
    Clutter,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub kind: ObstacleKind,
    #[serde(flatten)]
    pub shape: Shape,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RouteGraph {
    pub nodes: Vec<[f64; 2]>,
    pub edges: Vec<(usize, usize)>,
}

impl RouteGraph {
    pub fn neighbors(&self, n: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .edges
            .iter()
            .filter_map(|&(a, b)| {
                if a == n {
                    Some(b)
                } else if b == n {
                    Some(a)
                } else {
                    None
                }
            })
            .collect();
        out.sort_unstable();
        out
    }

    pub fn edge_length(&self, a: usize, b: usize) -> f64 {
        let (p, q) = (self.nodes[a], self.nodes[b]);
        (p[0] - q[0]).hypot(p[1] - q[1])
    }

    /// Breadth-first connectivity check.
    pub fn is_connected(&self) -> bool {
        if self.nodes.is_empty() {
            return true;
        }
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        let mut seen = vec![false; self.nodes.len()];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        while let Some(n) = queue.pop_front() {
            for &m in &adj[n] {
                if !seen[m] {
                    seen[m] = true;
                    queue.push_back(m);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

/// Appearance parameters drawn from the location seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldStyle {
    pub street_width_m: f64,
    pub block_size_m: f64,
    pub block_jitter: f64,
    /// Expected clutter items per 10 m of open street.
    pub clutter_density: f64,
    /// Typical clutter item radius.
    pub clutter_scale_m: f64,
    /// Fraction of non-tree street segments opened as loops.
    pub loop_fraction: f64,
    pub grid_n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenParams {
    pub target_extent_m: f64,
    pub street_width_m: (f64, f64),
    pub block_size_m: (f64, f64),
    pub block_jitter: (f64, f64),
    pub clutter_density: (f64, f64),
    pub clutter_scale_m: (f64, f64),
    pub loop_fraction: (f64, f64),
    /// Forces the clutter density when set.
    pub clutter_override: Option<f64>,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            target_extent_m: 170.0,
            street_width_m: (3.5, 9.0),
            block_size_m: (8.0, 26.0),
            block_jitter: (0.0, 0.35),
            clutter_density: (0.0, 1.5),
            clutter_scale_m: (0.2, 0.9),
            loop_fraction: (0.1, 0.7),
            clutter_override: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationSpec {
    pub seed: u64,
    pub extent: [f64; 2],
    pub style: WorldStyle,
    pub obstacles: Vec<Obstacle>,
    pub route_graph: RouteGraph,
    pub spawn_poses: Vec<PoseSE2>,
}

/// Uniform-grid bucket index over obstacle bounding boxes.
#[derive(Debug, Clone)]
struct SpatialIndex {
    origin: [f64; 2],
    nx: usize,
    ny: usize,
    cells: Vec<Vec<u32>>,
}

impl SpatialIndex {
    fn build(obstacles: &[Obstacle]) -> Self {
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for o in obstacles {
            let (a, b) = o.shape.aabb();
            for k in 0..2 {
                lo[k] = lo[k].min(a[k]);
                hi[k] = hi[k].max(b[k]);
            }
        }
        if obstacles.is_empty() {
            lo = [0.0, 0.0];
            hi = [1.0, 1.0];
        }
        let nx = ((hi[0] - lo[0]) / INDEX_CELL_M).ceil().max(1.0) as usize;
        let ny = ((hi[1] - lo[1]) / INDEX_CELL_M).ceil().max(1.0) as usize;
        let mut idx = SpatialIndex {
            origin: lo,
            nx,
            ny,
            cells: vec![Vec::new(); nx * ny],
        };
        for (i, o) in obstacles.iter().enumerate() {
            let (a, b) = o.shape.aabb();
            let (x0, y0, x1, y1) = idx.cell_range(a, b);
            for cy in y0..=y1 {
                for cx in x0..=x1 {
                    idx.cells[cy * nx + cx].push(i as u32);
                }
            }
        }
        idx
    }

    fn cell_range(&self, a: [f64; 2], b: [f64; 2]) -> (usize, usize, usize, usize) {
        let c = |v: f64, o: f64, n: usize| (((v - o) / INDEX_CELL_M).floor().max(0.0) as usize).min(n - 1);
        (
            c(a[0], self.origin[0], self.nx),
            c(a[1], self.origin[1], self.ny),
            c(b[0], self.origin[0], self.nx),
            c(b[1], self.origin[1], self.ny),
        )
    }

    /// Sorted, deduplicated obstacle indices whose cells overlap the box.
    fn query(&self, a: [f64; 2], b: [f64; 2], out: &mut Vec<u32>) {
        out.clear();
        let (x0, y0, x1, y1) = self.cell_range(a, b);
        for cy in y0..=y1 {
            for cx in x0..=x1 {
                out.extend_from_slice(&self.cells[cy * self.nx + cx]);
            }
        }
        out.sort_unstable();
        out.dedup();
    }
}

/// A location with its collision index. Immutable and shareable.
#[derive(Debug, Clone)]
pub struct World {
    spec: LocationSpec,
    index: SpatialIndex,
}

impl std::ops::Deref for World {
    type Target = LocationSpec;
    fn deref(&self) -> &LocationSpec {
        &self.spec
    }
}

impl World {
    pub fn new(spec: LocationSpec) -> Self {
        let index = SpatialIndex::build(&spec.obstacles);
        Self { spec, index }
    }

    pub fn spec(&self) -> &LocationSpec {
        &self.spec
    }

    fn candidates(&self, p: [f64; 2], reach: f64, out: &mut Vec<u32>) {
        self.index
            .query([p[0] - reach, p[1] - reach], [p[0] + reach, p[1] + reach], out);
    }

    /// Distance from `p` to the nearest obstacle surface, searched up to `reach`.
    pub fn clearance(&self, p: [f64; 2], reach: f64) -> f64 {
        let mut buf = Vec::new();
        self.candidates(p, reach, &mut buf);
        buf.iter()
            .map(|&i| self.spec.obstacles[i as usize].shape.distance(p))
            .fold(reach, f64::min)
    }

    pub fn collides(&self, p: [f64; 2], radius: f64) -> bool {
        self.clearance(p, radius + 0.5) < radius
    }

    /// Range along `angle` from `p`, clipped to `max_range`.
    pub fn raycast(&self, p: [f64; 2], angle: f64, max_range: f64) -> f64 {
        let mut buf = Vec::new();
        self.candidates(p, max_range, &mut buf);
        self.raycast_among(&buf, p, angle, max_range)
    }

    fn raycast_among(&self, cands: &[u32], p: [f64; 2], angle: f64, max_range: f64) -> f64 {
        let d = [angle.cos(), angle.sin()];
        cands
            .iter()
            .filter_map(|&i| self.spec.obstacles[i as usize].shape.ray_hit(p, d))
            .fold(max_range, f64::min)
    }

    /// Normalized ranges over the forward fan, ordered right to left.
    pub fn range_fan(&self, pose: &PoseSE2) -> Vec<f64> {
        let mut buf = Vec::new();
        let p = pose.xy();
        self.candidates(p, MAX_RANGE_M, &mut buf);
        (0..RANGE_RAYS)
            .map(|k| {
                let a = pose.theta + fan_angle(k);
                self.raycast_among(&buf, p, a, MAX_RANGE_M) / MAX_RANGE_M
            })
            .collect()
    }
}

/// Ray `k` angle relative to the heading; ray 0 points furthest right.
pub fn fan_angle(k: usize) -> f64 {
    -FOV_RAD / 2.0 + FOV_RAD * k as f64 / (RANGE_RAYS - 1) as f64
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let u = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    };
    (p[0] - a[0] - u * dx).hypot(p[1] - a[1] - u * dy)
}

/// Generates the location for `seed` with default parameters.
pub fn generate_location(seed: u64) -> Result<LocationSpec> {
    generate_location_with(seed, &GenParams::default())
}

/// Seeded procedural street grid: blocks, carved connected streets and
/// off-route clutter.
pub fn generate_location_with(seed: u64, params: &GenParams) -> Result<LocationSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let street = uniform(&mut rng, params.street_width_m);
    let block = uniform(&mut rng, params.block_size_m);
    let jitter = uniform(&mut rng, params.block_jitter);
    let density = params
        .clutter_override
        .unwrap_or_else(|| uniform(&mut rng, params.clutter_density));
    let scale = uniform(&mut rng, params.clutter_scale_m);
    let loops = uniform(&mut rng, params.loop_fraction);
    let grid_n = ((params.target_extent_m / (block + street)).round() as usize + 1).clamp(4, 10);
    let style = WorldStyle {
        street_width_m: street,
        block_size_m: block,
        block_jitter: jitter,
        clutter_density: density,
        clutter_scale_m: scale,
        loop_fraction: loops,
        grid_n,
    };

    let wall = 2.0;
    let axis = |rng: &mut ChaCha8Rng| {
        let mut c = vec![wall + street / 2.0];
        for _ in 1..grid_n {
            let b = block * (1.0 + jitter * rng.random_range(-1.0..1.0));
            let last = *c.last().unwrap();
            c.push(last + street + b);
        }
        c
    };
    let xs = axis(&mut rng);
    let ys = axis(&mut rng);
    let extent = [
        xs[grid_n - 1] + street / 2.0 + wall,
        ys[grid_n - 1] + street / 2.0 + wall,
    ];
    let hw = street / 2.0;
    let node = |i: usize, j: usize| j * grid_n + i;

    // Spanning tree over the intersection lattice plus a share of loops.
    let mut candidates: Vec<(usize, usize)> = Vec::new();
    for j in 0..grid_n {
        for i in 0..grid_n {
            if i + 1 < grid_n {
                candidates.push((node(i, j), node(i + 1, j)));
            }
            if j + 1 < grid_n {
                candidates.push((node(i, j), node(i, j + 1)));
            }
        }
    }
    candidates.shuffle(&mut rng);
    let mut uf = UnionFind::<usize>::new(grid_n * grid_n);
    let mut open = Vec::new();
    let mut spare = Vec::new();
    for e in candidates {
        if uf.union(e.0, e.1) {
            open.push(e);
        } else {
            spare.push(e);
        }
    }
    let extra = (loops * spare.len() as f64).round() as usize;
    open.extend(spare.drain(..extra.min(spare.len())));
    open.sort_unstable();
    let closed: Vec<(usize, usize)> = spare;

    let nodes: Vec<[f64; 2]> = (0..grid_n * grid_n)
        .map(|k| [xs[k % grid_n], ys[k / grid_n]])
        .collect();
    let mut walls = Vec::new();
    let rect = |min: [f64; 2], max: [f64; 2]| Obstacle {
        kind: ObstacleKind::Wall,
        shape: Shape::Rect { min, max },
    };
    walls.push(rect([0.0, 0.0], [extent[0], wall]));
    walls.push(rect([0.0, extent[1] - wall], [extent[0], extent[1]]));
    walls.push(rect([0.0, wall], [wall, extent[1] - wall]));
    walls.push(rect([extent[0] - wall, wall], [extent[0], extent[1] - wall]));
    for j in 0..grid_n - 1 {
        for i in 0..grid_n - 1 {
            walls.push(rect([xs[i] + hw, ys[j] + hw], [xs[i + 1] - hw, ys[j + 1] - hw]));
        }
    }
    for &(a, b) in &closed {
        let (pa, pb) = (nodes[a], nodes[b]);
        if pa[1] == pb[1] {
            walls.push(rect([pa[0] + hw, pa[1] - hw], [pb[0] - hw, pa[1] + hw]));
        } else {
            walls.push(rect([pa[0] - hw, pa[1] + hw], [pa[0] + hw, pb[1] - hw]));
        }
    }
    let graph = RouteGraph { nodes, edges: open };
    if !graph.is_connected() {
        return Err(Error::Generation { seed, attempts: 0 });
    }

    for _ in 0..CLUTTER_REROLLS {
        let mut obstacles = walls.clone();
        scatter_clutter(&mut rng, &graph, street, density, scale, &mut obstacles);
        let world = World::new(LocationSpec {
            seed,
            extent,
            style,
            obstacles,
            route_graph: graph.clone(),
            spawn_poses: vec![],
        });
        if !routes_clear(&world) {
            continue;
        }
        let spawn_poses: Vec<PoseSE2> = (0..graph.nodes.len())
            .map(|n| {
                let m = graph.neighbors(n)[0];
                let (p, q) = (graph.nodes[n], graph.nodes[m]);
                PoseSE2::new(p[0], p[1], (q[1] - p[1]).atan2(q[0] - p[0]))
            })
            .collect();
        if spawn_poses.iter().any(|s| world.collides(s.xy(), ROBOT_RADIUS_M)) {
            continue;
        }
        let mut spec = world.spec;
        spec.spawn_poses = spawn_poses;
        return Ok(spec);
    }
    Err(Error::Generation {
        seed,
        attempts: CLUTTER_REROLLS,
    })
}

fn scatter_clutter(
    rng: &mut ChaCha8Rng,
    graph: &RouteGraph,
    street: f64,
    density: f64,
    scale: f64,
    out: &mut Vec<Obstacle>,
) {
    let hw = street / 2.0;
    for &(a, b) in &graph.edges {
        let (pa, pb) = (graph.nodes[a], graph.nodes[b]);
        let len = graph.edge_length(a, b) - street;
        if len <= 1.0 || density <= 0.0 {
            continue;
        }
        let count = Poisson::new(density * len / 10.0)
            .map(|p| p.sample(rng) as usize)
            .unwrap_or(0);
        let dir = [(pb[0] - pa[0]) / (len + street), (pb[1] - pa[1]) / (len + street)];
        let normal = [-dir[1], dir[0]];
        for _ in 0..count {
            let along = hw + rng.random_range(0.1..0.9) * len;
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let size = scale * rng.random_range(0.5..1.5);
            // Near edge of the item stays clear of the centerline.
            let room = hw - ROUTE_CLEARANCE_M;
            let inner = ROUTE_CLEARANCE_M + rng.random_range(0.0..room.max(0.0) + 1e-9);
            let lateral = side * (inner + size);
            let c = [
                pa[0] + dir[0] * along + normal[0] * lateral,
                pa[1] + dir[1] * along + normal[1] * lateral,
            ];
            let shape = if rng.random_bool(0.6) {
                Shape::Circle { center: c, radius: size }
            } else {
                let half_along = size * rng.random_range(0.8..2.5);
                let (hx, hy) = if dir[0].abs() > 0.5 { (half_along, size) } else { (size, half_along) };
                Shape::Rect {
                    min: [c[0] - hx, c[1] - hy],
                    max: [c[0] + hx, c[1] + hy],
                }
            };
            out.push(Obstacle {
                kind: ObstacleKind::Clutter,
                shape,
            });
        }
    }
}

/// Every carved street centerline keeps [`ROUTE_CLEARANCE_M`] of free space.
fn routes_clear(world: &World) -> bool {
    let g = &world.route_graph;
    g.edges.iter().all(|&(a, b)| {
        let (pa, pb) = (g.nodes[a], g.nodes[b]);
        world.obstacles.iter().all(|o| {
            let (lo, hi) = o.shape.aabb();
            let far = lo[0] > pa[0].max(pb[0]) + 1.0
                || hi[0] < pa[0].min(pb[0]) - 1.0
                || lo[1] > pa[1].max(pb[1]) + 1.0
                || hi[1] < pa[1].min(pb[1]) - 1.0;
            far || segment_clearance(&o.shape, pa, pb) >= ROUTE_CLEARANCE_M - 1e-9
        })
    })
}

fn segment_clearance(shape: &Shape, a: [f64; 2], b: [f64; 2]) -> f64 {
    match *shape {
        Shape::Circle { center, radius } => (point_segment_distance(center, a, b) - radius).max(0.0),
        Shape::Rect { min, max } => {
            // Streets are axis-aligned, so sampling the segment densely is exact
            // enough at centimetre resolution.
            let n = ((a[0] - b[0]).abs() + (a[1] - b[1]).abs()).ceil() as usize * 20 + 1;
            (0..=n)
                .map(|k| {
                    let u = k as f64 / n as f64;
                    shape.distance([a[0] + (b[0] - a[0]) * u, a[1] + (b[1] - a[1]) * u])
                })
                .fold(f64::INFINITY, f64::min)
                .min(if min[0] <= max[0] { f64::INFINITY } else { 0.0 })
        }
    }
}

/// Actuator limits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotLimits {
    pub v_max: f64,
    pub omega_max: f64,
}

impl Default for RobotLimits {
    fn default() -> Self {
        Self {
            v_max: 1.0,
            omega_max: 1.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RobotState {
    pub pose: PoseSE2,
    pub v: f64,
    pub omega: f64,
}

impl RobotState {
    pub fn at_rest(pose: PoseSE2) -> Self {
        Self {
            pose,
            v: 0.0,
            omega: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepResult {
    pub state: RobotState,
    pub collided: bool,
    /// Signed distance travelled along the heading.
    pub distance: f64,
    pub rotation: f64,
}

/// Advances the robot by `dt` under command `cmd`.
///
/// Velocities follow a first-order lag toward the clipped command; each of
/// the substeps integrates the lag exactly and moves along the resulting arc.
/// A substep that would overlap an obstacle is undone and ends the step.
pub fn step(state: &RobotState, cmd: (f64, f64), dt: f64, world: &World, limits: &RobotLimits) -> StepResult {
    let cv = cmd.0.clamp(-limits.v_max, limits.v_max);
    let cw = cmd.1.clamp(-limits.omega_max, limits.omega_max);
    let h = dt / SUBSTEPS as f64;
    let decay = (-h / VELOCITY_TAU_S).exp();
    let gain = VELOCITY_TAU_S * (1.0 - decay);
    let mut s = *state;
    let (mut dist, mut rot) = (0.0, 0.0);
    let mut collided = false;
    for _ in 0..SUBSTEPS {
        let ds = cv * h + (s.v - cv) * gain;
        let dth = cw * h + (s.omega - cw) * gain;
        let th = s.pose.theta;
        let (x, y) = if dth.abs() < 1e-12 {
            (s.pose.x + ds * th.cos(), s.pose.y + ds * th.sin())
        } else {
            let r = ds / dth;
            (
                s.pose.x + r * ((th + dth).sin() - th.sin()),
                s.pose.y - r * ((th + dth).cos() - th.cos()),
            )
        };
        let moved = x != s.pose.x || y != s.pose.y;
        if moved && world.collides([x, y], ROBOT_RADIUS_M) {
            collided = true;
            s.v = 0.0;
            s.omega = cw + (s.omega - cw) * decay;
            break;
        }
        s.pose = PoseSE2::new(x, y, th + dth);
        s.v = cv + (s.v - cv) * decay;
        s.omega = cw + (s.omega - cw) * decay;
        dist += ds;
        rot += dth;
    }
    StepResult {
        state: s,
        collided,
        distance: dist,
        rotation: rot,
    }
}

/// Goal-sensing noise.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SenseNoise {
    /// Multiplicative distance noise (relative standard deviation).
    pub sigma_d: f64,
    /// Additive bearing noise in radians.
    pub sigma_theta: f64,
    /// Constant per-episode bearing bias in radians.
    pub heading_bias: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub ranges: Vec<f64>,
    pub goal: [f64; 2],
}

/// Range fan plus noisy goal vector.
pub fn sense<R: Rng + ?Sized>(
    state: &RobotState,
    world: &World,
    goal: [f64; 2],
    noise: &SenseNoise,
    rng: &mut R,
) -> Observation {
    let p = &state.pose;
    let (dx, dy) = (goal[0] - p.x, goal[1] - p.y);
    let mut d = dx.hypot(dy);
    let mut bearing = dy.atan2(dx) - p.theta + noise.heading_bias;
    if noise.sigma_d > 0.0 {
        let n = Normal::new(0.0, noise.sigma_d).expect("finite sigma");
        d *= (1.0 + n.sample(rng)).max(0.0);
    }
    if noise.sigma_theta > 0.0 {
        let n = Normal::new(0.0, noise.sigma_theta).expect("finite sigma");
        bearing += n.sample(rng);
    }
    Observation {
        ranges: world.range_fan(p),
        goal: [(d / 1000.0).clamp(0.0, 1.0), wrap_angle(bearing) / PI],
    }
}

/// Fixed-delay command queue, pre-filled with stops.
#[derive(Debug, Clone)]
pub struct LatencyQueue {
    buf: VecDeque<(f64, f64)>,
}

impl LatencyQueue {
    pub const MAX_DELAY: usize = 4;

    pub fn new(delay_steps: usize) -> Self {
        let d = delay_steps.min(Self::MAX_DELAY);
        Self {
            buf: std::iter::repeat_n((0.0, 0.0), d).collect(),
        }
    }

    /// Issues `cmd` and returns the command applied this step.
    pub fn push(&mut self, cmd: (f64, f64)) -> (f64, f64) {
        self.buf.push_back(cmd);
        self.buf.pop_front().expect("queue holds the pushed command")
    }
}

/// Applied command stream for `cmds` under a fixed delay.
pub fn latency_queue(cmds: &[(f64, f64)], delay_steps: usize) -> Vec<(f64, f64)> {
    let mut q = LatencyQueue::new(delay_steps);
    cmds.iter().map(|&c| q.push(c)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub v: f64,
    pub omega: f64,
    pub collided: bool,
}

pub fn write_trace_csv<W: std::io::Write>(rows: &[TraceRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn open_world() -> World {
        World::new(LocationSpec {
            seed: 0,
            extent: [100.0, 100.0],
            style: WorldStyle {
                street_width_m: 0.0,
                block_size_m: 0.0,
                block_jitter: 0.0,
                clutter_density: 0.0,
                clutter_scale_m: 0.0,
                loop_fraction: 0.0,
                grid_n: 0,
            },
            obstacles: vec![],
            route_graph: RouteGraph::default(),
            spawn_poses: vec![],
        })
    }

    fn walled(x_wall: f64) -> World {
        let mut w = open_world().spec;
        w.obstacles.push(Obstacle {
            kind: ObstacleKind::Wall,
            shape: Shape::Rect {
                min: [x_wall, -50.0],
                max: [x_wall + 1.0, 50.0],
            },
        });
        World::new(w)
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_location(42).unwrap();
        let b = generate_location(42).unwrap();
        assert_eq!(a, b);
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let back: LocationSpec = serde_json::from_str(&serde_json::to_string(&a).unwrap()).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn zero_clutter_only_walls() {
        let p = GenParams {
            clutter_override: Some(0.0),
            ..Default::default()
        };
        let w = generate_location_with(7, &p).unwrap();
        assert!(w.obstacles.iter().all(|o| o.kind == ObstacleKind::Wall));
    }

    #[test]
    fn hundred_seeds_connected() {
        for seed in 0..100 {
            let w = generate_location(seed).unwrap();
            assert!(w.route_graph.is_connected(), "seed {seed}");
            let world = World::new(w);
            for s in &world.spawn_poses {
                assert!(!world.collides(s.xy(), ROBOT_RADIUS_M));
            }
        }
    }

    #[test]
    fn step_at_rest_with_zero_command() {
        let w = open_world();
        let s = RobotState::at_rest(PoseSE2::new(3.0, 4.0, 0.5));
        let r = step(&s, (0.0, 0.0), CONTROL_DT, &w, &RobotLimits::default());
        assert_eq!(r.state.pose, s.pose);
        assert!(!r.collided);
    }

    #[test]
    fn step_matches_first_order_lag() {
        let w = open_world();
        let s = RobotState::at_rest(PoseSE2::new(0.0, 0.0, 0.0));
        let r = step(&s, (1.0, 0.0), CONTROL_DT, &w, &RobotLimits::default());
        let tau = VELOCITY_TAU_S;
        let expect = CONTROL_DT - tau * (1.0 - (-CONTROL_DT / tau).exp());
        assert!((r.state.pose.x - expect).abs() < 1e-9);
        assert!((r.state.v - (1.0 - (-CONTROL_DT / tau).exp())).abs() < 1e-12);
    }

    #[test]
    fn wall_contact_is_blocked() {
        // 0.2 m gap between robot surface and wall.
        let w = walled(10.0);
        let s = RobotState {
            pose: PoseSE2::new(10.0 - ROBOT_RADIUS_M - 0.2, 0.0, 0.0),
            v: 1.0,
            omega: 0.0,
        };
        let r = step(&s, (1.0, 0.0), CONTROL_DT, &w, &RobotLimits::default());
        assert!(r.collided);
        assert!(!w.collides(r.state.pose.xy(), ROBOT_RADIUS_M));
    }

    #[test]
    fn ranges_open_and_wall() {
        let w = open_world();
        let s = RobotState::at_rest(PoseSE2::new(50.0, 50.0, 0.3));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let o = sense(&s, &w, [60.0, 50.0 + 10.0 * 0.3_f64.tan()], &SenseNoise::default(), &mut rng);
        assert!(o.ranges.iter().all(|&r| r == 1.0));
        assert!(o.goal[1].abs() < 1e-12);

        let w = walled(3.0);
        let s = RobotState::at_rest(PoseSE2::new(0.0, 0.0, 0.0));
        let o = sense(&s, &w, [1.0, 0.0], &SenseNoise::default(), &mut rng);
        for k in [RANGE_RAYS / 2 - 1, RANGE_RAYS / 2] {
            let expect = 3.0 / fan_angle(k).cos() / MAX_RANGE_M;
            assert!((o.ranges[k] - expect).abs() < 1e-12);
        }
        assert!((o.ranges[RANGE_RAYS / 2] - 0.3).abs() < 1e-3);
    }

    #[test]
    fn latency_cases() {
        let cmds: Vec<(f64, f64)> = (0..6).map(|i| (i as f64, -(i as f64))).collect();
        assert_eq!(latency_queue(&cmds, 0), cmds);
        let mut impulse = vec![(0.0, 0.0); 5];
        impulse[0] = (1.0, 1.0);
        let out = latency_queue(&impulse, 2);
        assert_eq!(out[2], (1.0, 1.0));
        assert_eq!(out.iter().filter(|c| **c == (1.0, 1.0)).count(), 1);
    }

    #[test]
    fn fan_is_symmetric() {
        for k in 0..RANGE_RAYS {
            assert!((fan_angle(k) + fan_angle(RANGE_RAYS - 1 - k)).abs() < 1e-12);
        }
        assert!((fan_angle(RANGE_RAYS - 1) - FOV_RAD / 2.0).abs() < 1e-12);
    }
}
