//! Sliding-window nonlinear least-squares fusion of GPS, heading and wheel
//! odometry into SE(2) trajectories.
//!
//! The factor graph is a chain: unary GPS and heading factors on every node
//! and binary odometry factors between consecutive nodes. The normal
//! equations are block tridiagonal and are solved with a block Cholesky
//! sweep, so one Gauss-Newton iteration is linear in the node count.

use std::f64::consts::PI;

use nalgebra::{Matrix3, RowVector3, Vector3};
use serde::{Deserialize, Serialize};

use crate::curation::AlignedSeries;
use crate::error::{Error, Result};
use crate::geokit::{haversine_m, GeoPoint, EARTH_RADIUS_M};

/// Wraps an angle into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PoseSE2 {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl PoseSE2 {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }

    pub fn xy(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    /// `self ⊕ delta`, with `delta` expressed in this pose's frame.
    pub fn compose(&self, delta: &PoseSE2) -> PoseSE2 {
        let (s, c) = self.theta.sin_cos();
        PoseSE2::new(
            self.x + c * delta.x - s * delta.y,
            self.y + s * delta.x + c * delta.y,
            self.theta + delta.theta,
        )
    }

    /// `self⁻¹ ⊕ other`: `other` expressed in this pose's frame.
    pub fn between(&self, other: &PoseSE2) -> PoseSE2 {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (other.x - self.x, other.y - self.y);
        PoseSE2::new(c * dx + s * dy, -s * dx + c * dy, other.theta - self.theta)
    }
}

/// Maximum separation accepted by [`local_frame`].
pub const LOCAL_FRAME_RANGE_M: f64 = 10_000.0;

/// Equirectangular projection of `p` around `origin`, in metres east/north.
pub fn local_frame(origin: GeoPoint, p: GeoPoint) -> Result<(f64, f64)> {
    let d = haversine_m(origin, p);
    if d >= LOCAL_FRAME_RANGE_M {
        return Err(Error::ProjectionRange { distance_m: d });
    }
    let dlat = (p.lat_deg() - origin.lat_deg()).to_radians();
    let mut dlon = p.lon_deg() - origin.lon_deg();
    if dlon > 180.0 {
        dlon -= 360.0;
    } else if dlon < -180.0 {
        dlon += 360.0;
    }
    let x = EARTH_RADIUS_M * dlon.to_radians() * origin.lat_deg().to_radians().cos();
    Ok((x, EARTH_RADIUS_M * dlat))
}

/// Inverse of [`local_frame`].
pub fn from_local_frame(origin: GeoPoint, x: f64, y: f64) -> Result<GeoPoint> {
    let lat = origin.lat_deg() + (y / EARTH_RADIUS_M).to_degrees();
    let mut lon = origin.lon_deg()
        + (x / (EARTH_RADIUS_M * origin.lat_deg().to_radians().cos())).to_degrees();
    if lon > 180.0 {
        lon -= 360.0;
    } else if lon < -180.0 {
        lon += 360.0;
    }
    GeoPoint::new(lat, lon)
}

/// Differential-drive wheel geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WheelGeometry {
    pub radius_m: f64,
    pub track_m: f64,
}

impl Default for WheelGeometry {
    fn default() -> Self {
        Self {
            radius_m: 0.1,
            track_m: 0.4,
        }
    }
}

impl WheelGeometry {
    /// Body velocities `(v, omega)` for the given wheel speeds.
    pub fn body_velocity(&self, rpm_l: f64, rpm_r: f64) -> (f64, f64) {
        let r = self.radius_m;
        let v = r * PI * (rpm_l + rpm_r) / 60.0;
        let w = r * PI * (rpm_r - rpm_l) / (30.0 * self.track_m);
        (v, w)
    }

    /// Wheel speeds `(rpm_l, rpm_r)` producing body velocities `(v, omega)`.
    pub fn wheel_rpm(&self, v: f64, omega: f64) -> (f64, f64) {
        let r = self.radius_m;
        let sum = 60.0 * v / (PI * r);
        let diff = 30.0 * omega * self.track_m / (PI * r);
        ((sum - diff) / 2.0, (sum + diff) / 2.0)
    }
}

/// Pose increment of a unicycle moving at constant `(v, omega)` for `dt`.
pub fn unicycle_delta(v: f64, omega: f64, dt: f64) -> PoseSE2 {
    let dth = omega * dt;
    let (dx, dy) = if dth.abs() < 1e-9 {
        // Second-order series of the arc for tiny turns.
        let d = v * dt;
        (d * (1.0 - dth * dth / 6.0), d * dth / 2.0)
    } else {
        (v / omega * dth.sin(), v / omega * (1.0 - dth.cos()))
    };
    PoseSE2::new(dx, dy, dth)
}

/// Pose increment predicted from wheel speeds held for `dt` seconds.
pub fn wheel_odometry(rpm_l: f64, rpm_r: f64, geometry: WheelGeometry, dt: f64) -> PoseSE2 {
    let (v, w) = geometry.body_velocity(rpm_l, rpm_r);
    unicycle_delta(v, w, dt)
}

/// Measurement noise for the fusion factors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionNoise {
    pub sigma_gps_m: f64,
    pub sigma_heading_rad: f64,
    pub sigma_odom_m: f64,
    pub sigma_odom_rad: f64,
    /// Information multiplier on heading factors; 0 drops them.
    pub heading_weight: f64,
}

impl Default for FusionNoise {
    fn default() -> Self {
        Self {
            sigma_gps_m: 3.0,
            sigma_heading_rad: 0.3,
            sigma_odom_m: 0.05,
            sigma_odom_rad: 0.02,
            heading_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpsFactor {
    pub node: usize,
    pub xy: [f64; 2],
    pub sigma_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadingFactor {
    pub node: usize,
    pub theta: f64,
    pub sigma_rad: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdomFactor {
    /// Connects `node` to `node + 1`.
    pub node: usize,
    pub delta: PoseSE2,
    pub sigma_m: f64,
    pub sigma_rad: f64,
}

/// Full-pose prior, used to anchor overlapping windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorFactor {
    pub node: usize,
    pub pose: PoseSE2,
    pub sigma_m: f64,
    pub sigma_rad: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FusionProblem {
    pub times: Vec<f64>,
    pub initial: Vec<PoseSE2>,
    pub gps: Vec<GpsFactor>,
    pub heading: Vec<HeadingFactor>,
    pub odom: Vec<OdomFactor>,
    pub priors: Vec<PriorFactor>,
}

impl FusionProblem {
    pub fn len(&self) -> usize {
        self.initial.len()
    }

    pub fn is_empty(&self) -> bool {
        self.initial.is_empty()
    }

    /// Sub-problem over nodes `[start, end)`, re-indexed from zero.
    fn window(&self, start: usize, end: usize) -> FusionProblem {
        let inside = |n: usize| n >= start && n < end;
        FusionProblem {
            times: self.times[start..end].to_vec(),
            initial: self.initial[start..end].to_vec(),
            gps: self
                .gps
                .iter()
                .filter(|f| inside(f.node))
                .map(|f| GpsFactor {
                    node: f.node - start,
                    ..f.clone()
                })
                .collect(),
            heading: self
                .heading
                .iter()
                .filter(|f| inside(f.node))
                .map(|f| HeadingFactor {
                    node: f.node - start,
                    ..f.clone()
                })
                .collect(),
            odom: self
                .odom
                .iter()
                .filter(|f| inside(f.node) && inside(f.node + 1))
                .map(|f| OdomFactor {
                    node: f.node - start,
                    ..f.clone()
                })
                .collect(),
            priors: self
                .priors
                .iter()
                .filter(|f| inside(f.node))
                .map(|f| PriorFactor {
                    node: f.node - start,
                    ..f.clone()
                })
                .collect(),
        }
    }
}

/// Builds the chain problem for a 4 Hz aligned series.
///
/// Positions are projected around `origin`; the initial estimate is the
/// GPS positions with the raw headings.
pub fn build_problem(
    series: &AlignedSeries,
    origin: GeoPoint,
    geometry: WheelGeometry,
    noise: &FusionNoise,
) -> Result<FusionProblem> {
    let n = series.len();
    if n < 2 {
        return Err(Error::TooFewNodes(n));
    }
    let mut problem = FusionProblem {
        times: series.t.clone(),
        ..Default::default()
    };
    for i in 0..n {
        let (x, y) = local_frame(origin, series.gps[i])?;
        problem.initial.push(PoseSE2::new(x, y, series.heading[i]));
        problem.gps.push(GpsFactor {
            node: i,
            xy: [x, y],
            sigma_m: noise.sigma_gps_m,
        });
        if noise.heading_weight > 0.0 {
            problem.heading.push(HeadingFactor {
                node: i,
                theta: wrap_angle(series.heading[i]),
                sigma_rad: noise.sigma_heading_rad / noise.heading_weight.sqrt(),
            });
        }
    }
    for i in 0..n - 1 {
        let dt = series.t[i + 1] - series.t[i];
        let (l, r) = series.wheel_rpm[i];
        problem.odom.push(OdomFactor {
            node: i,
            delta: wheel_odometry(l, r, geometry, dt),
            sigma_m: noise.sigma_odom_m,
            sigma_rad: noise.sigma_odom_rad,
        });
    }
    Ok(problem)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub max_iters: usize,
    pub tol: f64,
    pub window: usize,
    pub overlap: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iters: 50,
            tol: 1e-9,
            window: 512,
            overlap: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionResult {
    pub poses: Vec<PoseSE2>,
    pub converged: bool,
    pub iterations: usize,
    /// Accepted-iterate costs, one list per window.
    pub window_costs: Vec<Vec<f64>>,
}

impl FusionResult {
    /// Per-iteration costs as CSV rows `window,iteration,cost`.
    pub fn cost_trace_csv(&self) -> String {
        let mut s = String::from("window,iteration,cost\n");
        for (w, costs) in self.window_costs.iter().enumerate() {
            for (i, c) in costs.iter().enumerate() {
                s.push_str(&format!("{w},{i},{c:e}\n"));
            }
        }
        s
    }
}

/// One whitened residual row block with its Jacobian blocks.
pub(crate) enum Linearized {
    Unary {
        node: usize,
        r: Vec<f64>,
        j: Vec<RowVector3<f64>>,
    },
    Binary {
        node: usize,
        r: Vector3<f64>,
        ji: Matrix3<f64>,
        jj: Matrix3<f64>,
    },
}

/// Whitened odometry residual and Jacobians w.r.t. `(pose_i, pose_j)`.
pub(crate) fn odom_residual(
    pi: &PoseSE2,
    pj: &PoseSE2,
    f: &OdomFactor,
) -> (Vector3<f64>, Matrix3<f64>, Matrix3<f64>) {
    let (s, c) = pi.theta.sin_cos();
    let (dx, dy) = (pj.x - pi.x, pj.y - pi.y);
    let ex = c * dx + s * dy - f.delta.x;
    let ey = -s * dx + c * dy - f.delta.y;
    let et = wrap_angle(pj.theta - pi.theta - f.delta.theta);
    let (wp, wt) = (1.0 / f.sigma_m, 1.0 / f.sigma_rad);
    let r = Vector3::new(ex * wp, ey * wp, et * wt);
    let ji = Matrix3::new(
        -c * wp,
        -s * wp,
        (-s * dx + c * dy) * wp,
        s * wp,
        -c * wp,
        (-c * dx - s * dy) * wp,
        0.0,
        0.0,
        -wt,
    );
    let jj = Matrix3::new(c * wp, s * wp, 0.0, -s * wp, c * wp, 0.0, 0.0, 0.0, wt);
    (r, ji, jj)
}

pub(crate) fn linearize(problem: &FusionProblem, poses: &[PoseSE2]) -> Vec<Linearized> {
    let mut out = Vec::with_capacity(problem.gps.len() + problem.heading.len() + problem.odom.len());
    for f in &problem.gps {
        let p = &poses[f.node];
        let w = 1.0 / f.sigma_m;
        out.push(Linearized::Unary {
            node: f.node,
            r: vec![(p.x - f.xy[0]) * w, (p.y - f.xy[1]) * w],
            j: vec![RowVector3::new(w, 0.0, 0.0), RowVector3::new(0.0, w, 0.0)],
        });
    }
    for f in &problem.heading {
        let w = 1.0 / f.sigma_rad;
        out.push(Linearized::Unary {
            node: f.node,
            r: vec![wrap_angle(poses[f.node].theta - f.theta) * w],
            j: vec![RowVector3::new(0.0, 0.0, w)],
        });
    }
    for f in &problem.priors {
        let p = &poses[f.node];
        let (wp, wt) = (1.0 / f.sigma_m, 1.0 / f.sigma_rad);
        out.push(Linearized::Unary {
            node: f.node,
            r: vec![
                (p.x - f.pose.x) * wp,
                (p.y - f.pose.y) * wp,
                wrap_angle(p.theta - f.pose.theta) * wt,
            ],
            j: vec![
                RowVector3::new(wp, 0.0, 0.0),
                RowVector3::new(0.0, wp, 0.0),
                RowVector3::new(0.0, 0.0, wt),
            ],
        });
    }
    for f in &problem.odom {
        let (r, ji, jj) = odom_residual(&poses[f.node], &poses[f.node + 1], f);
        out.push(Linearized::Binary {
            node: f.node,
            r,
            ji,
            jj,
        });
    }
    out
}

/// Total cost `Σ rᵀ Σ⁻¹ r` at `poses`.
pub fn total_cost(problem: &FusionProblem, poses: &[PoseSE2]) -> f64 {
    let mut cost = 0.0;
    for f in &problem.gps {
        let p = &poses[f.node];
        cost += ((p.x - f.xy[0]).powi(2) + (p.y - f.xy[1]).powi(2)) / f.sigma_m.powi(2);
    }
    for f in &problem.heading {
        cost += (wrap_angle(poses[f.node].theta - f.theta) / f.sigma_rad).powi(2);
    }
    for f in &problem.priors {
        let p = &poses[f.node];
        cost += ((p.x - f.pose.x).powi(2) + (p.y - f.pose.y).powi(2)) / f.sigma_m.powi(2)
            + (wrap_angle(p.theta - f.pose.theta) / f.sigma_rad).powi(2);
    }
    for f in &problem.odom {
        let (r, _, _) = odom_residual(&poses[f.node], &poses[f.node + 1], f);
        cost += r.norm_squared();
    }
    cost
}

/// Normal equations in block-tridiagonal form.
struct NormalEquations {
    diag: Vec<Matrix3<f64>>,
    /// `upper[i]` couples node `i` to node `i + 1`.
    upper: Vec<Matrix3<f64>>,
    /// `Jᵀ r`.
    grad: Vec<Vector3<f64>>,
}

impl NormalEquations {
    fn assemble(n: usize, rows: &[Linearized]) -> Self {
        let mut eq = NormalEquations {
            diag: vec![Matrix3::zeros(); n],
            upper: vec![Matrix3::zeros(); n.saturating_sub(1)],
            grad: vec![Vector3::zeros(); n],
        };
        for row in rows {
            match row {
                Linearized::Unary { node, r, j } => {
                    for (ri, ji) in r.iter().zip(j) {
                        eq.diag[*node] += ji.transpose() * ji;
                        eq.grad[*node] += ji.transpose() * *ri;
                    }
                }
                Linearized::Binary { node, r, ji, jj } => {
                    let i = *node;
                    eq.diag[i] += ji.transpose() * ji;
                    eq.diag[i + 1] += jj.transpose() * jj;
                    eq.upper[i] += ji.transpose() * jj;
                    eq.grad[i] += ji.transpose() * r;
                    eq.grad[i + 1] += jj.transpose() * r;
                }
            }
        }
        eq
    }

    /// Solves `(H + λI) δ = -g` by block Cholesky; `None` if not positive definite.
    fn solve(&self, lambda: f64) -> Option<Vec<Vector3<f64>>> {
        let n = self.diag.len();
        let mut factors = Vec::with_capacity(n);
        let mut y: Vec<Vector3<f64>> = Vec::with_capacity(n);
        for i in 0..n {
            let mut s = self.diag[i] + Matrix3::identity() * lambda;
            let mut rhs = -self.grad[i];
            if i > 0 {
                let b = &self.upper[i - 1];
                let chol: &nalgebra::Cholesky<f64, nalgebra::U3> = &factors[i - 1];
                s -= b.transpose() * chol.solve(b);
                rhs -= b.transpose() * chol.solve(&y[i - 1]);
            }
            factors.push(s.cholesky()?);
            y.push(rhs);
        }
        let mut delta = vec![Vector3::zeros(); n];
        for i in (0..n).rev() {
            let mut rhs = y[i];
            if i + 1 < n {
                rhs -= self.upper[i] * delta[i + 1];
            }
            delta[i] = factors[i].solve(&rhs);
            if !delta[i].iter().all(|v| v.is_finite()) {
                return None;
            }
        }
        Some(delta)
    }
}

fn apply(poses: &[PoseSE2], delta: &[Vector3<f64>]) -> Vec<PoseSE2> {
    poses
        .iter()
        .zip(delta)
        .map(|(p, d)| PoseSE2::new(p.x + d[0], p.y + d[1], p.theta + d[2]))
        .collect()
}

/// Gauss-Newton with Levenberg damping on a single window.
fn solve_window(
    problem: &FusionProblem,
    max_iters: usize,
    tol: f64,
) -> (Vec<PoseSE2>, bool, usize, Vec<f64>) {
    let n = problem.len();
    let mut poses: Vec<PoseSE2> = problem
        .initial
        .iter()
        .map(|p| PoseSE2::new(p.x, p.y, p.theta))
        .collect();
    let mut cost = total_cost(problem, &poses);
    let mut costs = vec![cost];
    if n == 0 || cost == 0.0 {
        return (poses, true, 0, costs);
    }
    let mut lambda = 0.0_f64;
    let mut iters = 0;
    while iters < max_iters {
        iters += 1;
        let rows = linearize(problem, &poses);
        let eq = NormalEquations::assemble(n, &rows);
        let scale = eq
            .diag
            .iter()
            .map(|d| d.diagonal().max())
            .fold(0.0_f64, f64::max)
            .max(1e-12);
        let mut accepted = None;
        for _ in 0..30 {
            if let Some(delta) = eq.solve(lambda) {
                let cand = apply(&poses, &delta);
                let c = total_cost(problem, &cand);
                if c.is_finite() && c <= cost {
                    accepted = Some((cand, c));
                    break;
                }
            }
            lambda = if lambda == 0.0 { 1e-6 * scale } else { lambda * 10.0 };
        }
        let Some((cand, c)) = accepted else {
            // No descent step exists at any damping: stationary point.
            return (poses, true, iters, costs);
        };
        let rel = (cost - c) / cost.max(f64::MIN_POSITIVE);
        poses = cand;
        cost = c;
        costs.push(cost);
        lambda = if lambda < 1e-6 * scale { 0.0 } else { lambda / 10.0 };
        if rel < tol || cost == 0.0 {
            return (poses, true, iters, costs);
        }
    }
    (poses, false, iters, costs)
}

/// Optimizes the problem, splitting long chains into anchored windows.
pub fn optimize(problem: &FusionProblem, opts: &SolverOptions) -> FusionResult {
    let n = problem.len();
    let window = opts.window.max(2);
    if n <= window {
        let (poses, converged, iterations, costs) = solve_window(problem, opts.max_iters, opts.tol);
        return FusionResult {
            poses,
            converged,
            iterations,
            window_costs: vec![costs],
        };
    }
    let overlap = opts.overlap.min(window - 1);
    let stride = window - overlap;
    let mut result = FusionResult {
        poses: Vec::with_capacity(n),
        converged: true,
        iterations: 0,
        window_costs: Vec::new(),
    };
    let mut start = 0;
    loop {
        let end = (start + window).min(n);
        let mut sub = problem.window(start, end);
        if start > 0 {
            // Overlap nodes start from the previous window's estimate and the
            // first one is pinned to it.
            for (k, p) in result.poses[start..].iter().enumerate() {
                sub.initial[k] = *p;
            }
            sub.priors.push(PriorFactor {
                node: 0,
                pose: result.poses[start],
                sigma_m: 1e-3,
                sigma_rad: 1e-4,
            });
        }
        let (poses, converged, iters, costs) = solve_window(&sub, opts.max_iters, opts.tol);
        result.converged &= converged;
        result.iterations += iters;
        result.window_costs.push(costs);
        if start == 0 {
            result.poses.extend(poses);
        } else {
            result.poses.truncate(start + 1);
            result.poses.extend(poses.into_iter().skip(1));
        }
        if end == n {
            break;
        }
        start += stride;
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn wrap_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert_eq!(wrap_angle(0.0), 0.0);
    }

    #[test]
    fn local_frame_cases() {
        let o = GeoPoint::new(0.0, 10.0).unwrap();
        assert_eq!(local_frame(o, o).unwrap(), (0.0, 0.0));
        let p = GeoPoint::new(1e-5_f64.to_degrees(), 10.0).unwrap();
        let (x, y) = local_frame(o, p).unwrap();
        assert!(x.abs() < 1e-12);
        assert!((y - 63.71).abs() < 1e-9);
        let far = GeoPoint::new(0.2, 10.0).unwrap();
        assert!(matches!(local_frame(o, far), Err(Error::ProjectionRange { .. })));
    }

    #[test]
    fn local_frame_matches_haversine_nearby() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let o = GeoPoint::new(rng.random_range(-60.0..60.0), rng.random_range(-170.0..170.0))
                .unwrap();
            let (bx, by): (f64, f64) = (rng.random_range(-6000.0..6000.0), rng.random_range(-6000.0..6000.0));
            let p = from_local_frame(o, bx, by).unwrap();
            let (x, y) = local_frame(o, p).unwrap();
            assert!((x - bx).abs() < 1e-6 && (y - by).abs() < 1e-6);
            let h = haversine_m(o, p);
            assert!(((x * x + y * y).sqrt() - h).abs() / h < 1e-3);
        }
    }

    #[test]
    fn wheel_odometry_cases() {
        let g = WheelGeometry {
            radius_m: 0.1,
            track_m: 0.4,
        };
        let d = wheel_odometry(60.0, 60.0, g, 1.0);
        assert!((d.x - 0.2 * PI).abs() < 1e-12 && d.y == 0.0 && d.theta == 0.0);
        let spin = wheel_odometry(-30.0, 30.0, g, 0.7);
        assert!(spin.x.abs() < 1e-12 && spin.y.abs() < 1e-12 && spin.theta > 0.0);
        let (l, r) = g.wheel_rpm(0.7, -0.4);
        let (v, w) = g.body_velocity(l, r);
        assert!((v - 0.7).abs() < 1e-12 && (w + 0.4).abs() < 1e-12);
    }

    #[test]
    fn wheel_odometry_matches_fine_integration() {
        let g = WheelGeometry::default();
        let (l, r) = (45.0, 80.0);
        let (v, w) = g.body_velocity(l, r);
        let dt = 0.8;
        let h = 1e-4;
        let steps = (dt / h) as usize;
        // Midpoint-heading integrator.
        let (mut x, mut y, mut th) = (0.0_f64, 0.0_f64, 0.0_f64);
        for _ in 0..steps {
            let mid = th + 0.5 * w * h;
            x += v * h * mid.cos();
            y += v * h * mid.sin();
            th += w * h;
        }
        let d = wheel_odometry(l, r, g, dt);
        assert!((d.x - x).abs() < 1e-6 && (d.y - y).abs() < 1e-6 && (d.theta - th).abs() < 1e-9);
    }

    fn synthetic_problem(n: usize, noise: f64, seed: u64) -> (FusionProblem, Vec<PoseSE2>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Normal::new(0.0, 1.0).unwrap();
        let mut truth = vec![PoseSE2::new(0.0, 0.0, 0.3)];
        let mut odom = Vec::new();
        for i in 0..n - 1 {
            let d = unicycle_delta(0.8, 0.3 * (i as f64 * 0.05).sin(), 0.25);
            truth.push(truth[i].compose(&d));
            odom.push(OdomFactor {
                node: i,
                delta: d,
                sigma_m: 0.05,
                sigma_rad: 0.02,
            });
        }
        let gps = truth
            .iter()
            .enumerate()
            .map(|(i, p)| GpsFactor {
                node: i,
                xy: [p.x + noise * g.sample(&mut rng), p.y + noise * g.sample(&mut rng)],
                sigma_m: 3.0,
            })
            .collect::<Vec<_>>();
        let heading = truth
            .iter()
            .enumerate()
            .map(|(i, p)| HeadingFactor {
                node: i,
                theta: wrap_angle(p.theta + 0.1 * noise * g.sample(&mut rng)),
                sigma_rad: 0.3,
            })
            .collect::<Vec<_>>();
        let initial = gps
            .iter()
            .zip(&heading)
            .map(|(g, h)| PoseSE2::new(g.xy[0], g.xy[1], h.theta))
            .collect();
        (
            FusionProblem {
                times: (0..n).map(|i| i as f64 * 0.25).collect(),
                initial,
                gps,
                heading,
                odom,
                priors: vec![],
            },
            truth,
        )
    }

    #[test]
    fn zero_noise_recovers_truth() {
        let (p, truth) = synthetic_problem(80, 0.0, 1);
        let res = optimize(&p, &SolverOptions::default());
        assert!(res.converged);
        for (a, b) in res.poses.iter().zip(&truth) {
            assert!((a.x - b.x).abs() < 1e-6 && (a.y - b.y).abs() < 1e-6);
        }
    }

    #[test]
    fn single_gps_node() {
        let p = FusionProblem {
            times: vec![0.0],
            initial: vec![PoseSE2::new(1.0, 1.0, 0.2)],
            gps: vec![GpsFactor {
                node: 0,
                xy: [4.0, -2.0],
                sigma_m: 3.0,
            }],
            ..Default::default()
        };
        let res = optimize(&p, &SolverOptions::default());
        assert!((res.poses[0].x - 4.0).abs() < 1e-9 && (res.poses[0].y + 2.0).abs() < 1e-9);
    }

    #[test]
    fn costs_never_increase() {
        let (p, _) = synthetic_problem(120, 3.0, 9);
        let res = optimize(&p, &SolverOptions::default());
        for w in &res.window_costs {
            for pair in w.windows(2) {
                assert!(pair[1] <= pair[0]);
            }
        }
        assert!(res.cost_trace_csv().starts_with("window,iteration,cost\n0,0,"));
    }

    #[test]
    fn odom_jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let pi = PoseSE2::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-3.0..3.0));
            let pj = PoseSE2::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-3.0..3.0));
            let f = OdomFactor {
                node: 0,
                delta: PoseSE2::new(0.2, 0.01, 0.05),
                sigma_m: 0.05,
                sigma_rad: 0.02,
            };
            let (_, ji, jj) = odom_residual(&pi, &pj, &f);
            let h = 1e-6;
            for k in 0..3 {
                for (which, jac) in [(0, ji), (1, jj)] {
                    let bump = |p: &PoseSE2, s: f64| {
                        let mut v = [p.x, p.y, p.theta];
                        v[k] += s;
                        PoseSE2 { x: v[0], y: v[1], theta: v[2] }
                    };
                    let (a, b) = if which == 0 {
                        (odom_residual(&bump(&pi, h), &pj, &f).0, odom_residual(&bump(&pi, -h), &pj, &f).0)
                    } else {
                        (odom_residual(&pi, &bump(&pj, h), &f).0, odom_residual(&pi, &bump(&pj, -h), &f).0)
                    };
                    let fd = (a - b) / (2.0 * h);
                    // Angle residual may wrap across the bump.
                    if fd[2].abs() > 1e3 {
                        continue;
                    }
                    let col: Vector3<f64> = jac.column(k).into();
                    let err = (fd - col).norm() / col.norm().max(1.0);
                    assert!(err < 1e-5, "k={k} which={which} err={err}");
                }
            }
        }
    }

    #[test]
    fn translation_equivariance() {
        let (p, _) = synthetic_problem(60, 3.0, 5);
        let mut q = p.clone();
        for g in &mut q.gps {
            g.xy[0] += 120.0;
            g.xy[1] -= 45.0;
        }
        for s in &mut q.initial {
            s.x += 120.0;
            s.y -= 45.0;
        }
        let a = optimize(&p, &SolverOptions::default());
        let b = optimize(&q, &SolverOptions::default());
        for (u, v) in a.poses.iter().zip(&b.poses) {
            assert!((v.x - u.x - 120.0).abs() < 1e-6 && (v.y - u.y + 45.0).abs() < 1e-6);
            assert!(wrap_angle(v.theta - u.theta).abs() < 1e-8);
        }
    }

    #[test]
    fn windowed_solution_matches_full_solve() {
        let (p, truth) = synthetic_problem(1300, 3.0, 2);
        let windowed = optimize(&p, &SolverOptions::default());
        let full = optimize(
            &p,
            &SolverOptions {
                window: 5000,
                ..Default::default()
            },
        );
        assert_eq!(windowed.poses.len(), 1300);
        assert_eq!(windowed.window_costs.len(), 3);
        let rmse = |ps: &[PoseSE2]| {
            (ps.iter()
                .zip(&truth)
                .map(|(a, b)| (a.x - b.x).powi(2) + (a.y - b.y).powi(2))
                .sum::<f64>()
                / ps.len() as f64)
                .sqrt()
        };
        assert!(rmse(&windowed.poses) < 1.5 * rmse(&full.poses) + 0.05);
        assert!(windowed.poses.iter().all(|p| p.theta > -PI && p.theta <= PI));
    }
}
