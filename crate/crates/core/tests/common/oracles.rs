//! Independent reference computations shared by the integration tests.

use super::rng;
use glyphgen::mdn::GmmParams;
use glyphgen::splines::*;
use rand::Rng;

/// Random head output with moderate scales so a fixed grid resolves it.
pub fn random_raw(k: usize, r: &mut impl Rng) -> Vec<f64> {
    let mut raw = Vec::with_capacity(6 * k);
    raw.extend((0..k).map(|_| r.random_range(-2.0..2.0)));
    raw.extend((0..2 * k).map(|_| r.random_range(-3.0..3.0)));
    raw.extend((0..2 * k).map(|_| r.random_range(-1.0..0.5)));
    raw.extend((0..k).map(|_| r.random_range(-1.5..1.5)));
    raw
}

/// Midpoint-rule integral of the density over the union of +-8 sigma boxes.
pub fn integrate(g: &GmmParams, cells: usize) -> f64 {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for k in 0..g.components() {
        for a in 0..2 {
            lo[a] = lo[a].min(g.mu[k][a] - 8.0 * g.sigma[k][a]);
            hi[a] = hi[a].max(g.mu[k][a] + 8.0 * g.sigma[k][a]);
        }
    }
    let (dx, dy) = ((hi[0] - lo[0]) / cells as f64, (hi[1] - lo[1]) / cells as f64);
    let mut total = 0.0;
    for i in 0..cells {
        let x = lo[0] + (i as f64 + 0.5) * dx;
        for j in 0..cells {
            let y = lo[1] + (j as f64 + 0.5) * dy;
            total += g.log_prob([x, y]).exp();
        }
    }
    total * dx * dy
}

/// Sample variances of both coordinates and their covariance.
pub fn sample_moments(g: &GmmParams, t: f64, n: usize, seed: u64) -> [f64; 3] {
    let mut s = rng(seed);
    let xs: Vec<[f64; 2]> = (0..n).map(|_| g.sample(t, &mut s).unwrap()).collect();
    let m = [
        xs.iter().map(|x| x[0]).sum::<f64>() / n as f64,
        xs.iter().map(|x| x[1]).sum::<f64>() / n as f64,
    ];
    let c = |a: usize, b: usize| xs.iter().map(|x| (x[a] - m[a]) * (x[b] - m[b])).sum::<f64>() / (n - 1) as f64;
    [c(0, 0), c(1, 1), c(0, 1)]
}

/// Frozen paired samples for the t-test oracle, drawn once.
pub const T_FIXTURE_A: [f64; 10] = [14.2, 13.9, 15.1, 12.8, 14.7, 13.3, 16.0, 14.4, 13.6, 15.2];
pub const T_FIXTURE_B: [f64; 10] = [14.9, 14.1, 15.0, 13.9, 15.3, 13.2, 16.8, 15.1, 14.5, 15.4];

/// Unnormalised Student-t density.
pub fn t_kernel(x: f64, df: f64) -> f64 {
    (1.0 + x * x / df).powf(-(df + 1.0) / 2.0)
}

/// Composite Simpson integral of the kernel over [a, inf) via x = a + u/(1-u).
pub fn tail_integral(a: f64, df: f64) -> f64 {
    let n = 400_000;
    let h = 1.0 / n as f64;
    let f = |u: f64| {
        if u >= 1.0 {
            return 0.0;
        }
        let x = a + u / (1.0 - u);
        t_kernel(x, df) / ((1.0 - u) * (1.0 - u))
    };
    let mut s = f(0.0) + f(1.0);
    for i in 1..n {
        s += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

/// Oracle: t from the textbook formula, p from direct quadrature of the
/// density, normalised by quadrature of the full half line.
pub fn t_test_oracle(d: &[f64]) -> (f64, f64) {
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let sd = (d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt();
    let t = mean / (sd / n.sqrt());
    let df = n - 1.0;
    (t, tail_integral(t.abs(), df) / tail_integral(0.0, df))
}

pub fn seg_dist(p: Point, a: Point, b: Point) -> f64 {
    let (vx, vy) = (b[0] - a[0], b[1] - a[1]);
    let l2 = vx * vx + vy * vy;
    let t = if l2 > 0.0 { (((p[0] - a[0]) * vx + (p[1] - a[1]) * vy) / l2).clamp(0.0, 1.0) } else { 0.0 };
    (p[0] - a[0] - t * vx).hypot(p[1] - a[1] - t * vy)
}

/// Oracle: a hard pen one pixel wide, sampled 16x16 times per pixel.
pub fn supersampled(strokes: &[SplineStroke]) -> Vec<f64> {
    let s = 28.0 / 105.0;
    let polys: Vec<Vec<Point>> = strokes
        .iter()
        .map(|st| eval_spline(st, 40).iter().map(|p| [p[0] * s, p[1] * s]).collect())
        .collect();
    let sub = 16;
    let mut out = vec![0.0; 28 * 28];
    for row in 0..28 {
        for col in 0..28 {
            let mut hits = 0;
            for i in 0..sub {
                for j in 0..sub {
                    let p = [col as f64 + (j as f64 + 0.5) / sub as f64, row as f64 + (i as f64 + 0.5) / sub as f64];
                    if polys.iter().any(|poly| poly.windows(2).any(|w| seg_dist(p, w[0], w[1]) <= 0.5)) {
                        hits += 1;
                    }
                }
            }
            out[row * 28 + col] = hits as f64 / (sub * sub) as f64;
        }
    }
    out
}

pub fn rms(a: &[Point], b: &[Point]) -> f64 {
    let sq: f64 = a.iter().zip(b).map(|(p, q)| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sum();
    (sq / a.len() as f64).sqrt()
}

/// Checks recovery and minimality for `cps`; returns the max control-point error.
pub fn recovery_error(cps: &[Point], threshold: f64) -> f64 {
    let traj = eval_spline(&SplineStroke::from_control_points(cps), 8);
    let fit = fit_minimal_spline(&RawStroke::new(traj.clone()), threshold, 30).unwrap();
    assert!(fit.converged);
    assert_eq!(fit.spline.num_control_points(), cps.len());
    if cps.len() > MIN_CONTROL_POINTS {
        let (_, fewer) = fit_spline(&traj, cps.len() - 1).unwrap();
        assert!(fewer > threshold, "count - 1 also fits: {fewer}");
    }
    let refit = eval_spline(&fit.spline, 8);
    assert!(rms(&refit, &traj) < 1e-6);
    fit.spline
        .control_points()
        .iter()
        .zip(cps)
        .map(|(p, q)| (p[0] - q[0]).abs().max((p[1] - q[1]).abs()))
        .fold(0.0, f64::max)
}

