//! Scaling-law fits and aggregation of experiment outcomes.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalharness::{OutcomeRow, SuccessRate};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub alpha: f64,
    pub beta: f64,
    /// Pearson correlation of `(ln x, ln y)`; undefined for constant `y`.
    pub r: Option<f64>,
    /// OLS standard error of `alpha`; undefined with only two points.
    pub alpha_se: Option<f64>,
    pub n_points: usize,
}

impl PowerLawFit {
    pub fn correlation(&self) -> Result<f64> {
        self.r
            .ok_or_else(|| Error::Fit("correlation undefined for constant y".into()))
    }

    pub fn predict(&self, x: f64) -> f64 {
        self.beta * x.powf(self.alpha)
    }
}

/// Ordinary least squares of `ln y` on `ln x`.
///
/// Points with non-positive `x` or `y` are skipped; at least three valid
/// points with distinct `x` are required.
pub fn fit_power_law(points: &[(f64, f64)]) -> Result<PowerLawFit> {
    let logs: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0 && x.is_finite() && y.is_finite())
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    let n = logs.len();
    if n < 3 {
        return Err(Error::Fit(format!("need at least 3 positive points, got {n}")));
    }
    let nf = n as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / nf;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (x, y) in &logs {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    if sxx <= 0.0 {
        return Err(Error::Fit("zero variance in x".into()));
    }
    let alpha = sxy / sxx;
    let intercept = my - alpha * mx;
    let r = (syy > 0.0).then(|| (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0));
    let ssr: f64 = logs
        .iter()
        .map(|(x, y)| (y - intercept - alpha * x).powi(2))
        .sum();
    let alpha_se = (n > 2).then(|| (ssr / (nf - 2.0) / sxx).sqrt());
    Ok(PowerLawFit {
        alpha,
        beta: intercept.exp(),
        r,
        alpha_se,
        n_points: n,
    })
}

/// Relative failure reduction from doubling `x`: `1 − 2^α`.
pub fn doubling_reduction(alpha: f64) -> f64 {
    1.0 - 2f64.powf(alpha)
}

/// One trained policy in the experiment grid.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct CellKey {
    pub n_locations: usize,
    pub hours_per_location: f64,
    pub seed: u64,
}

impl CellKey {
    pub fn label(&self) -> String {
        format!("n{}_h{}_s{}", self.n_locations, self.hours_per_location, self.seed)
    }

    pub fn total_hours(&self) -> f64 {
        self.n_locations as f64 * self.hours_per_location
    }

    fn cell(&self) -> (usize, u64) {
        (self.n_locations, self.hours_per_location.to_bits())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub n_locations: usize,
    pub hours_per_location: f64,
    pub total_hours: f64,
    pub seeds: usize,
    pub successes: usize,
    pub trials: usize,
    pub success_rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub failure_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub n_locations: usize,
    pub hours_per_location: f64,
    pub seed: u64,
    pub successes: usize,
    pub trials: usize,
    pub success_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSummary {
    pub n_locations: usize,
    pub hours_per_location: f64,
    pub route_id: String,
    pub successes: usize,
    pub trials: usize,
    pub success_rate: f64,
    pub failure_rate: f64,
}

/// One row of a tidy view table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewRow {
    pub view: String,
    /// Value of the quantity held fixed in this group.
    pub fixed: f64,
    pub n_locations: usize,
    pub hours_per_location: f64,
    pub total_hours: f64,
    pub successes: usize,
    pub trials: usize,
    pub success_rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub failure_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Tables {
    pub cells: Vec<CellSummary>,
    pub seeds: Vec<SeedSummary>,
    pub environments: Vec<EnvSummary>,
    pub fixed_total: Vec<ViewRow>,
    pub fixed_per_location: Vec<ViewRow>,
    pub fixed_locations: Vec<ViewRow>,
}

fn same(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

/// Pools outcomes per grid cell (over routes, repetitions and seeds) and
/// emits the per-seed, per-environment and three fixed-quantity views.
///
/// Every key in `expected` must have outcomes.
pub fn aggregate(results: &[(CellKey, Vec<OutcomeRow>)], expected: &[CellKey]) -> Result<Tables> {
    let missing: Vec<String> = expected
        .iter()
        .filter(|k| !results.iter().any(|(r, rows)| r == *k && !rows.is_empty()))
        .map(|k| k.label())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingCells(missing));
    }

    let mut cells: BTreeMap<(usize, u64), (f64, usize, usize, usize)> = BTreeMap::new();
    let mut seeds: BTreeMap<(usize, u64, u64), (usize, usize)> = BTreeMap::new();
    let mut envs: BTreeMap<(usize, u64, String), (usize, usize)> = BTreeMap::new();
    for (key, rows) in results {
        let k = rows.iter().filter(|r| r.success).count();
        let c = cells.entry(key.cell()).or_insert((key.hours_per_location, 0, 0, 0));
        c.1 += 1;
        c.2 += k;
        c.3 += rows.len();
        let s = seeds.entry((key.n_locations, key.hours_per_location.to_bits(), key.seed)).or_default();
        s.0 += k;
        s.1 += rows.len();
        for r in rows {
            let e = envs
                .entry((key.n_locations, key.hours_per_location.to_bits(), r.route_id.clone()))
                .or_default();
            e.0 += r.success as usize;
            e.1 += 1;
        }
    }

    let mut out = Tables::default();
    for ((n, _), (h, n_seeds, k, trials)) in &cells {
        if *trials == 0 {
            continue;
        }
        let sr = SuccessRate::from_counts(*k, *trials)?;
        out.cells.push(CellSummary {
            n_locations: *n,
            hours_per_location: *h,
            total_hours: *n as f64 * h,
            seeds: *n_seeds,
            successes: *k,
            trials: *trials,
            success_rate: sr.rate,
            ci_low: sr.ci_low,
            ci_high: sr.ci_high,
            failure_rate: sr.failure_rate(),
        });
    }
    for ((n, h, seed), (k, trials)) in seeds {
        out.seeds.push(SeedSummary {
            n_locations: n,
            hours_per_location: f64::from_bits(h),
            seed,
            successes: k,
            trials,
            success_rate: if trials > 0 { k as f64 / trials as f64 } else { 0.0 },
        });
    }
    for ((n, h, route_id), (k, trials)) in envs {
        let rate = k as f64 / trials as f64;
        out.environments.push(EnvSummary {
            n_locations: n,
            hours_per_location: f64::from_bits(h),
            route_id,
            successes: k,
            trials,
            success_rate: rate,
            failure_rate: 1.0 - rate,
        });
    }

    let view = |name: &str, fixed: &dyn Fn(&CellSummary) -> f64| -> Vec<ViewRow> {
        let mut groups: Vec<f64> = Vec::new();
        for c in &out.cells {
            let v = fixed(c);
            if !groups.iter().any(|g| same(*g, v)) {
                groups.push(v);
            }
        }
        groups.sort_by(f64::total_cmp);
        let mut rows = Vec::new();
        for g in groups {
            let members: Vec<&CellSummary> = out.cells.iter().filter(|c| same(fixed(c), g)).collect();
            if members.len() < 2 {
                continue;
            }
            for c in members {
                rows.push(ViewRow {
                    view: name.to_string(),
                    fixed: g,
                    n_locations: c.n_locations,
                    hours_per_location: c.hours_per_location,
                    total_hours: c.total_hours,
                    successes: c.successes,
                    trials: c.trials,
                    success_rate: c.success_rate,
                    ci_low: c.ci_low,
                    ci_high: c.ci_high,
                    failure_rate: c.failure_rate,
                });
            }
        }
        rows
    };
    out.fixed_total = view("fixed-total", &|c| c.total_hours);
    out.fixed_per_location = view("fixed-per-location", &|c| c.hours_per_location);
    out.fixed_locations = view("fixed-locations", &|c| c.n_locations as f64);
    Ok(out)
}

/// Power-law fit of failure rate on location count for one view group.
///
/// Cells without failures cannot enter the log fit; they are returned
/// separately.
pub fn fit_failure_rates(rows: &[ViewRow]) -> (Result<PowerLawFit>, Vec<ViewRow>) {
    let (zero, used): (Vec<&ViewRow>, Vec<&ViewRow>) = rows.iter().partition(|r| r.failure_rate <= 0.0);
    let points: Vec<(f64, f64)> = used.iter().map(|r| (r.n_locations as f64, r.failure_rate)).collect();
    (fit_power_law(&points), zero.into_iter().cloned().collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitSummary {
    pub view: String,
    pub fixed: f64,
    pub alpha: f64,
    pub beta: f64,
    pub r: Option<f64>,
    pub doubling_reduction: f64,
    pub n_points: usize,
    pub excluded_zero_failure: usize,
}

pub fn write_csv<T: Serialize, W: std::io::Write>(rows: &[T], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let m = values.len() / 2;
    Some(if values.len() % 2 == 1 {
        values[m]
    } else {
        0.5 * (values[m - 1] + values[m])
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotSeries {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    /// Optional vertical error bars `(low, high)` per point.
    pub errors: Vec<(f64, f64)>,
}

/// Log-log scatter chart with optional power-law line, as SVG text.
pub fn loglog_svg(title: &str, x_label: &str, y_label: &str, series: &[PlotSeries], fit: Option<&PowerLawFit>) -> String {
    const W: f64 = 480.0;
    const H: f64 = 360.0;
    const M: f64 = 56.0;
    let pts: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|s| s.points.iter().copied())
        .filter(|(x, y)| *x > 0.0 && *y > 0.0)
        .collect();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in &pts {
        x0 = x0.min(x.log10());
        x1 = x1.max(x.log10());
        y0 = y0.min(y.log10());
        y1 = y1.max(y.log10());
    }
    if pts.is_empty() {
        (x0, x1, y0, y1) = (0.0, 1.0, -1.0, 0.0);
    }
    let pad = |a: f64, b: f64| if b - a < 1e-9 { (a - 0.5, b + 0.5) } else { (a - 0.05 * (b - a), b + 0.05 * (b - a)) };
    let (x0, x1) = pad(x0, x1);
    let (y0, y1) = pad(y0, y1);
    let sx = |x: f64| M + (x.log10() - x0) / (x1 - x0) * (W - 2.0 * M);
    let sy = |y: f64| H - M - (y.log10() - y0) / (y1 - y0) * (H - 2.0 * M);
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{}</text>"#, W / 2.0, xml_escape(title));
    let _ = writeln!(
        s,
        r#"<path d="M{M},{} V{} H{}" stroke="black" fill="none"/>"#,
        M,
        H - M,
        W - M
    );
    for e in (x0.ceil() as i32)..=(x1.floor() as i32) {
        let x = sx(10f64.powi(e));
        let _ = writeln!(s, r#"<text x="{x:.1}" y="{}" text-anchor="middle">1e{e}</text>"#, H - M + 16.0);
    }
    for e in (y0.ceil() as i32)..=(y1.floor() as i32) {
        let y = sy(10f64.powi(e));
        let _ = writeln!(s, r#"<text x="{}" y="{y:.1}" text-anchor="end">1e{e}</text>"#, M - 4.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 12.0, xml_escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        xml_escape(y_label)
    );
    for (i, ser) in series.iter().enumerate() {
        let c = colors[i % colors.len()];
        for (j, &(x, y)) in ser.points.iter().enumerate() {
            if x <= 0.0 || y <= 0.0 {
                continue;
            }
            if let Some(&(lo, hi)) = ser.errors.get(j) {
                if lo > 0.0 && hi > 0.0 {
                    let _ = writeln!(
                        s,
                        r#"<line x1="{0:.1}" x2="{0:.1}" y1="{1:.1}" y2="{2:.1}" stroke="{c}"/>"#,
                        sx(x),
                        sy(lo),
                        sy(hi)
                    );
                }
            }
            let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3.5" fill="{c}"/>"#, sx(x), sy(y));
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{c}">{}</text>"#,
            W - M - 120.0,
            M + 14.0 * i as f64,
            xml_escape(&ser.label)
        );
    }
    if let Some(f) = fit {
        let (a, b) = (10f64.powf(x0), 10f64.powf(x1));
        let _ = writeln!(
            s,
            r#"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="gray" stroke-dasharray="4 3"/>"#,
            sx(a),
            sy(f.predict(a)),
            sx(b),
            sy(f.predict(b))
        );
        let r = f.r.map_or("n/a".to_string(), |r| format!("{r:.3}"));
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="gray">y = {:.3} x^{:.3}, r = {}</text>"#,
            M + 8.0,
            M + 2.0,
            f.beta,
            f.alpha,
            r
        );
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
