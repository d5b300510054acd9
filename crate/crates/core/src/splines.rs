//! Minimal cubic B-spline fitting of pen trajectories.
//!
//! Strokes are fitted with clamped, uniform-knot cubic B-splines. Data points
//! are assigned uniformly spaced parameters by sample index, and control
//! points are the linear least-squares solution. The number of control points
//! is the smallest count whose RMS residual meets the threshold.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 2];

pub const MIN_CONTROL_POINTS: usize = 4;
pub const DEFAULT_MAX_CONTROL_POINTS: usize = 30;
pub const DEFAULT_RESIDUAL_THRESHOLD: f64 = 1.5;

/// A raw pen trajectory in source-frame pixel coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct RawStroke {
    pub points: Vec<Point>,
    /// Per-point timestamps in milliseconds, when recorded.
    pub times: Option<Vec<f64>>,
}

impl RawStroke {
    pub fn new(points: Vec<Point>) -> Self {
        RawStroke {
            points,
            times: None,
        }
    }
}

/// A spline stroke: first control point plus deltas between consecutive
/// control points.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplineStroke {
    pub start: Point,
    pub offsets: Vec<Point>,
}

impl SplineStroke {
    pub fn from_control_points(cps: &[Point]) -> Self {
        let start = cps.first().copied().unwrap_or([0.0, 0.0]);
        let offsets = cps
            .windows(2)
            .map(|w| [w[1][0] - w[0][0], w[1][1] - w[0][1]])
            .collect();
        SplineStroke { start, offsets }
    }

    pub fn control_points(&self) -> Vec<Point> {
        let mut cps = Vec::with_capacity(self.offsets.len() + 1);
        let mut p = self.start;
        cps.push(p);
        for d in &self.offsets {
            p = [p[0] + d[0], p[1] + d[1]];
            cps.push(p);
        }
        cps
    }

    pub fn num_control_points(&self) -> usize {
        self.offsets.len() + 1
    }

    pub fn is_finite(&self) -> bool {
        self.control_points()
            .iter()
            .all(|p| p[0].is_finite() && p[1].is_finite())
    }
}

/// Outcome of the minimal-count search.
#[derive(Clone, Debug, PartialEq)]
pub struct SplineFit {
    pub spline: SplineStroke,
    /// RMS Euclidean residual of the returned fit, in input units.
    pub residual: f64,
    /// False when no count up to the cap met the threshold.
    pub converged: bool,
}

/// Clamped uniform knot vector for `count` control points (degree 3).
fn knots(count: usize) -> Vec<f64> {
    let interior = count - MIN_CONTROL_POINTS;
    let spans = (count - 3) as f64;
    let mut k = vec![0.0; 4];
    k.extend((1..=interior).map(|i| i as f64 / spans));
    k.extend([1.0; 4]);
    k
}

/// Values of all `count` cubic basis functions at parameter `t` in [0, 1].
pub fn basis(count: usize, t: f64) -> Vec<f64> {
    assert!(count >= MIN_CONTROL_POINTS);
    let k = knots(count);
    let t = t.clamp(0.0, 1.0);
    // knot span index with k[span] <= t < k[span + 1], last span closed at 1
    let span = if t >= 1.0 {
        count - 1
    } else {
        let mut s = 3;
        while s < count - 1 && t >= k[s + 1] {
            s += 1;
        }
        s
    };
    // Cox-de Boor triangle (The NURBS Book, A2.2)
    let mut n = [0.0f64; 4];
    let mut left = [0.0f64; 4];
    let mut right = [0.0f64; 4];
    n[0] = 1.0;
    for j in 1..=3 {
        left[j] = t - k[span + 1 - j];
        right[j] = k[span + j] - t;
        let mut saved = 0.0;
        for r in 0..j {
            let denom = right[r + 1] + left[j - r];
            let temp = if denom == 0.0 { 0.0 } else { n[r] / denom };
            n[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        n[j] = saved;
    }
    let mut out = vec![0.0; count];
    for (j, v) in n.iter().enumerate() {
        out[span - 3 + j] = *v;
    }
    out
}

/// Evaluated relative to the first control point (the basis sums to one),
/// so coincident control points reproduce themselves exactly.
fn eval_control_points(cps: &[Point], t: f64) -> Point {
    let b = basis(cps.len(), t);
    let origin = cps[0];
    let mut d = [0.0, 0.0];
    for (w, c) in b.iter().zip(cps) {
        d[0] += w * (c[0] - origin[0]);
        d[1] += w * (c[1] - origin[1]);
    }
    [origin[0] + d[0], origin[1] + d[1]]
}

/// Pads a control polygon below four points by repeating the last one.
fn padded(mut cps: Vec<Point>) -> Vec<Point> {
    let last = *cps.last().expect("at least one control point");
    while cps.len() < MIN_CONTROL_POINTS {
        cps.push(last);
    }
    cps
}

/// Dense trajectory along the spline, uniform in curve parameter.
///
/// There are `samples_per_segment` samples per knot span plus the final
/// endpoint; the first and last samples equal the end control points.
pub fn eval_spline(spline: &SplineStroke, samples_per_segment: usize) -> Vec<Point> {
    let cps = padded(spline.control_points());
    let spans = cps.len() - 3;
    let total = samples_per_segment.max(1) * spans + 1;
    (0..total)
        .map(|i| eval_control_points(&cps, i as f64 / (total - 1) as f64))
        .collect()
}

/// Summed Euclidean length of consecutive segments.
pub fn trajectory_length(points: &[Point]) -> f64 {
    points
        .windows(2)
        .map(|w| ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt())
        .sum()
}

fn count_distinct(points: &[Point]) -> usize {
    let mut distinct: Vec<Point> = Vec::new();
    for p in points {
        if !distinct.iter().any(|q| q == p) {
            distinct.push(*p);
            if distinct.len() > 2 {
                break;
            }
        }
    }
    distinct.len()
}

/// Resamples a polyline to `n` points evenly spaced by arc length.
fn resample_linear(points: &[Point], n: usize) -> Vec<Point> {
    let total = trajectory_length(points);
    let mut cum = vec![0.0];
    for w in points.windows(2) {
        let d = ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt();
        cum.push(cum.last().unwrap() + d);
    }
    (0..n)
        .map(|i| {
            let target = total * i as f64 / (n - 1) as f64;
            let seg = cum
                .windows(2)
                .position(|c| target <= c[1])
                .unwrap_or(points.len() - 2);
            let len = cum[seg + 1] - cum[seg];
            let a = if len > 0.0 { (target - cum[seg]) / len } else { 0.0 };
            let (p, q) = (points[seg], points[seg + 1]);
            [p[0] + a * (q[0] - p[0]), p[1] + a * (q[1] - p[1])]
        })
        .collect()
}

/// Least-squares control points for a fixed count. Returns the control
/// points and the RMS residual.
pub fn fit_spline(points: &[Point], count: usize) -> Result<(Vec<Point>, f64)> {
    if count < MIN_CONTROL_POINTS {
        return Err(Error::InvalidArgument(format!(
            "cubic spline needs at least {MIN_CONTROL_POINTS} control points, got {count}"
        )));
    }
    let t_count = points.len();
    if t_count < 2 {
        return Err(Error::DegenerateStroke(format!("{t_count} points")));
    }
    let mut design = DMatrix::<f64>::zeros(t_count, count);
    for (i, _) in points.iter().enumerate() {
        let t = i as f64 / (t_count - 1) as f64;
        for (j, v) in basis(count, t).into_iter().enumerate() {
            design[(i, j)] = v;
        }
    }
    let targets = DMatrix::<f64>::from_fn(t_count, 2, |i, j| points[i][j]);
    let svd = design.clone().svd(true, true);
    let solution = svd
        .solve(&targets, 1e-12)
        .map_err(|e| Error::DegenerateStroke(e.to_string()))?;
    let cps: Vec<Point> = (0..count)
        .map(|j| [solution[(j, 0)], solution[(j, 1)]])
        .collect();
    let fitted = design * &solution;
    let sq: f64 = (0..t_count)
        .map(|i| (fitted[(i, 0)] - points[i][0]).powi(2) + (fitted[(i, 1)] - points[i][1]).powi(2))
        .sum();
    Ok((cps, (sq / t_count as f64).sqrt()))
}

/// Smallest-count spline whose RMS residual is at most `residual_threshold`.
///
/// Counts 4, 5, ... up to `min(points, max_control_points)` are tried in
/// order. Strokes with fewer than four points are first resampled to four
/// points along the polyline.
pub fn fit_minimal_spline(
    stroke: &RawStroke,
    residual_threshold: f64,
    max_control_points: usize,
) -> Result<SplineFit> {
    let pts = &stroke.points;
    if pts.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
        return Err(Error::DegenerateStroke("non-finite coordinate".into()));
    }
    if count_distinct(pts) < 2 {
        return Err(Error::DegenerateStroke(format!(
            "needs at least 2 distinct points, got {}",
            count_distinct(pts)
        )));
    }
    let owned;
    let pts: &[Point] = if pts.len() < MIN_CONTROL_POINTS {
        owned = resample_linear(pts, MIN_CONTROL_POINTS);
        &owned
    } else {
        pts
    };
    let cap = pts.len().min(max_control_points).max(MIN_CONTROL_POINTS);
    let mut last = None;
    for count in MIN_CONTROL_POINTS..=cap {
        let (cps, residual) = fit_spline(pts, count)?;
        if residual <= residual_threshold {
            return Ok(SplineFit {
                spline: SplineStroke::from_control_points(&cps),
                residual,
                converged: true,
            });
        }
        last = Some((cps, residual));
    }
    let (cps, residual) = last.expect("at least one candidate count");
    Ok(SplineFit {
        spline: SplineStroke::from_control_points(&cps),
        residual,
        converged: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basis_partition_of_unity() {
        for count in 4..12 {
            for i in 0..=50 {
                let s: f64 = basis(count, i as f64 / 50.0).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn clamped_endpoints() {
        let s = SplineStroke::from_control_points(&[[1.0, 2.0], [5.0, 9.0], [3.0, -4.0], [8.0, 8.0], [10.0, 0.5]]);
        let traj = eval_spline(&s, 10);
        assert_eq!(traj.len(), 21);
        assert!((traj[0][0] - 1.0).abs() < 1e-12 && (traj[0][1] - 2.0).abs() < 1e-12);
        let last = traj.last().unwrap();
        assert!((last[0] - 10.0).abs() < 1e-12 && (last[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn identical_control_points_give_constant_trajectory() {
        let s = SplineStroke::from_control_points(&[[4.0, 4.0]; 6]);
        assert!(eval_spline(&s, 7).iter().all(|p| *p == [4.0, 4.0]));
        let single = SplineStroke {
            start: [3.0, 1.0],
            offsets: vec![],
        };
        assert!(eval_spline(&single, 5).iter().all(|p| *p == [3.0, 1.0]));
    }

    #[test]
    fn collinear_control_points_give_collinear_trajectory() {
        let cps: Vec<Point> = [0.0, 1.5, 2.0, 4.0, 7.0].iter().map(|&a| [a, 2.0 * a + 1.0]).collect();
        let s = SplineStroke::from_control_points(&cps);
        for p in eval_spline(&s, 9) {
            assert!((p[1] - (2.0 * p[0] + 1.0)).abs() < 1e-9);
        }
    }

    #[test]
    fn trajectory_length_cases() {
        assert_eq!(trajectory_length(&[[1.0, 1.0]]), 0.0);
        assert_eq!(trajectory_length(&[[0.0, 0.0], [3.0, 4.0]]), 5.0);
        let square = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0], [0.0, 0.0]];
        assert_eq!(trajectory_length(&square), 4.0);
    }

    #[test]
    fn straight_line_needs_four_points() {
        let pts: Vec<Point> = (0..100).map(|i| [i as f64 * 0.5, 10.0 + i as f64 * 0.25]).collect();
        let fit = fit_minimal_spline(&RawStroke::new(pts), 1e-9, 30).unwrap();
        assert_eq!(fit.spline.num_control_points(), 4);
        assert!(fit.residual < 1e-9);
    }

    #[test]
    fn infinite_threshold_returns_four() {
        let pts: Vec<Point> = (0..40)
            .map(|i| {
                let t = i as f64;
                [t + (t * 1.7).sin() * 3.0, (t * 0.9).cos() * 5.0]
            })
            .collect();
        let fit = fit_minimal_spline(&RawStroke::new(pts), f64::INFINITY, 30).unwrap();
        assert_eq!(fit.spline.num_control_points(), 4);
        assert!(fit.converged);
    }

    #[test]
    fn degenerate_strokes_rejected() {
        let err = fit_minimal_spline(&RawStroke::new(vec![[1.0, 1.0]; 5]), 1.0, 30);
        assert!(matches!(err, Err(Error::DegenerateStroke(_))));
        assert!(fit_minimal_spline(&RawStroke::new(vec![[1.0, 1.0]]), 1.0, 30).is_err());
    }

    #[test]
    fn short_strokes_are_padded() {
        let fit = fit_minimal_spline(&RawStroke::new(vec![[0.0, 0.0], [6.0, 8.0]]), 1e-9, 30).unwrap();
        assert_eq!(fit.spline.num_control_points(), 4);
        let traj = eval_spline(&fit.spline, 4);
        assert!((traj[0][0]).abs() < 1e-9 && (traj.last().unwrap()[1] - 8.0).abs() < 1e-9);
    }

    #[test]
    fn exhaustion_reports_cap() {
        // zig-zag noise that no smooth spline with <= 6 control points fits at 1e-6
        let pts: Vec<Point> = (0..20).map(|i| [i as f64, if i % 2 == 0 { 0.0 } else { 5.0 }]).collect();
        let fit = fit_minimal_spline(&RawStroke::new(pts), 1e-6, 6).unwrap();
        assert!(!fit.converged);
        assert_eq!(fit.spline.num_control_points(), 6);
        assert!(fit.residual > 1e-6);
    }
}
