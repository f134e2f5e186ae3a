//! Geodesic primitives and geographic clustering of episodes.

use std::collections::BTreeSet;

use petgraph::unionfind::UnionFind;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean earth radius of the spherical model.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Default linking distance between episodes of one location.
pub const CLUSTER_THRESHOLD_M: f64 = 100.0;

/// Default stride when subsampling fixes for pairwise episode distances.
pub const FIX_STRIDE: usize = 10;

/// A WGS84 coordinate in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGeoPoint", into = "RawGeoPoint")]
pub struct GeoPoint {
    lat_deg: f64,
    lon_deg: f64,
}

#[derive(Serialize, Deserialize)]
struct RawGeoPoint {
    lat_deg: f64,
    lon_deg: f64,
}

impl TryFrom<RawGeoPoint> for GeoPoint {
    type Error = Error;
    fn try_from(r: RawGeoPoint) -> Result<Self> {
        GeoPoint::new(r.lat_deg, r.lon_deg)
    }
}

impl From<GeoPoint> for RawGeoPoint {
    fn from(p: GeoPoint) -> Self {
        RawGeoPoint {
            lat_deg: p.lat_deg,
            lon_deg: p.lon_deg,
        }
    }
}

impl GeoPoint {
    pub fn new(lat_deg: f64, lon_deg: f64) -> Result<Self> {
        if !(-90.0..=90.0).contains(&lat_deg) || !(-180.0..=180.0).contains(&lon_deg) {
            return Err(Error::InvalidGeoPoint { lat_deg, lon_deg });
        }
        Ok(Self { lat_deg, lon_deg })
    }

    pub fn lat_deg(&self) -> f64 {
        self.lat_deg
    }

    pub fn lon_deg(&self) -> f64 {
        self.lon_deg
    }
}

/// Great-circle distance on the sphere of radius [`EARTH_RADIUS_M`].
pub fn haversine_m(a: GeoPoint, b: GeoPoint) -> f64 {
    let (lat1, lat2) = (a.lat_deg.to_radians(), b.lat_deg.to_radians());
    let dlat = lat2 - lat1;
    let dlon = (b.lon_deg - a.lon_deg).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Minimum distance from any fix of `episode` to any of `sites`.
pub fn min_distance_to_sites(episode: &[GeoPoint], sites: &[GeoPoint]) -> Result<f64> {
    if sites.is_empty() {
        return Err(Error::NoSites);
    }
    Ok(episode
        .iter()
        .flat_map(|&p| sites.iter().map(move |&s| haversine_m(p, s)))
        .fold(f64::INFINITY, f64::min))
}

/// A connected set of episodes: a distinct training location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationCluster {
    pub id: usize,
    pub episode_ids: BTreeSet<String>,
    pub centroid: GeoPoint,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterParams {
    pub threshold_m: f64,
    pub fix_stride: usize,
}

impl Default for ClusterParams {
    fn default() -> Self {
        Self {
            threshold_m: CLUSTER_THRESHOLD_M,
            fix_stride: FIX_STRIDE,
        }
    }
}

/// Fixes used for pairwise comparisons: every `stride`-th fix plus the last.
pub fn subsample_fixes(fixes: &[GeoPoint], stride: usize) -> Vec<GeoPoint> {
    let stride = stride.max(1);
    let mut out: Vec<GeoPoint> = fixes.iter().step_by(stride).copied().collect();
    if let Some(&last) = fixes.last() {
        if (fixes.len() - 1) % stride != 0 {
            out.push(last);
        }
    }
    out
}

/// Minimum fix-to-fix distance between two episodes.
pub fn episode_distance_m(a: &[GeoPoint], b: &[GeoPoint]) -> f64 {
    a.iter()
        .flat_map(|&p| b.iter().map(move |&q| haversine_m(p, q)))
        .fold(f64::INFINITY, f64::min)
}

/// Spherical mean of a set of points.
pub fn centroid(points: &[GeoPoint]) -> Option<GeoPoint> {
    if points.is_empty() {
        return None;
    }
    let (mut x, mut y, mut z) = (0.0, 0.0, 0.0);
    for p in points {
        let (lat, lon) = (p.lat_deg.to_radians(), p.lon_deg.to_radians());
        x += lat.cos() * lon.cos();
        y += lat.cos() * lon.sin();
        z += lat.sin();
    }
    let lat = z.atan2((x * x + y * y).sqrt()).to_degrees();
    let lon = if x == 0.0 && y == 0.0 {
        points[0].lon_deg
    } else {
        y.atan2(x).to_degrees()
    };
    GeoPoint::new(lat.clamp(-90.0, 90.0), lon.clamp(-180.0, 180.0)).ok()
}

/// Groups episodes whose fixes chain within `params.threshold_m`.
///
/// Clusters are ordered by their smallest episode id and numbered in that
/// order. Episodes without fixes are ignored.
pub fn cluster_by_proximity(
    episodes: &[(String, Vec<GeoPoint>)],
    params: ClusterParams,
) -> Vec<LocationCluster> {
    let sampled: Vec<Vec<GeoPoint>> = episodes
        .iter()
        .map(|(_, fixes)| subsample_fixes(fixes, params.fix_stride))
        .collect();
    // Bounding circles let most far-apart pairs skip the point comparison.
    let bounds: Vec<Option<(GeoPoint, f64)>> = sampled
        .iter()
        .map(|pts| {
            centroid(pts).map(|c| {
                let r = pts.iter().map(|&p| haversine_m(c, p)).fold(0.0, f64::max);
                (c, r)
            })
        })
        .collect();

    let n = episodes.len();
    let mut uf = UnionFind::<usize>::new(n);
    for i in 0..n {
        let Some((ci, ri)) = bounds[i] else { continue };
        for j in (i + 1)..n {
            let Some((cj, rj)) = bounds[j] else { continue };
            if haversine_m(ci, cj) - ri - rj >= params.threshold_m {
                continue;
            }
            if uf.equiv(i, j) {
                continue;
            }
            if episode_distance_m(&sampled[i], &sampled[j]) < params.threshold_m {
                uf.union(i, j);
            }
        }
    }

    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for i in 0..n {
        if bounds[i].is_some() {
            groups.entry(uf.find(i)).or_default().push(i);
        }
    }
    let mut clusters: Vec<(BTreeSet<String>, GeoPoint)> = groups
        .into_values()
        .map(|members| {
            let ids: BTreeSet<String> = members.iter().map(|&m| episodes[m].0.clone()).collect();
            let pts: Vec<GeoPoint> = members
                .iter()
                .flat_map(|&m| sampled[m].iter().copied())
                .collect();
            (ids, centroid(&pts).expect("cluster has fixes"))
        })
        .collect();
    clusters.sort_by(|a, b| a.0.iter().next().cmp(&b.0.iter().next()));
    clusters
        .into_iter()
        .enumerate()
        .map(|(id, (episode_ids, centroid))| LocationCluster {
            id,
            episode_ids,
            centroid,
        })
        .collect()
}
