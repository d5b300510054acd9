//! Mixture-density output heads.
//!
//! A head with `K` components emits `6K` unconstrained values laid out as
//! six contiguous blocks of `K`: mixture logits, `mu_x`, `mu_y`,
//! `log sigma_x`, `log sigma_y` and the pre-`tanh` correlation.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::splines::Point;
use crate::tensor::{Graph, Var};

pub const DEFAULT_COMPONENTS: usize = 20;
pub const SIGMA_MIN: f64 = 1e-4;
pub const RHO_MAX: f64 = 1.0 - 1e-6;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Bivariate Gaussian mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmParams {
    pub pi: Vec<f64>,
    pub mu: Vec<Point>,
    pub sigma: Vec<Point>,
    pub rho: Vec<f64>,
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let z = log_sum_exp(logits);
    logits.iter().map(|l| l - z).collect()
}

fn softplus(a: f64) -> f64 {
    a.max(0.0) + (-a.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("temperature must be > 0, got {t}")))
    }
}

/// Mixture size encoded by a raw head of the given width.
pub fn components_for(raw_len: usize) -> Result<usize> {
    if raw_len == 0 || raw_len % 6 != 0 {
        return Err(Error::InvalidParams(format!(
            "raw head width {raw_len} is not a positive multiple of 6"
        )));
    }
    Ok(raw_len / 6)
}

struct Unpacked {
    log_pi: Vec<f64>,
    sigma: Vec<Point>,
    sigma_clamped: Vec<[bool; 2]>,
    rho: Vec<f64>,
    rho_clamped: Vec<bool>,
}

fn unpack(raw: &[f64]) -> Result<Unpacked> {
    let k = components_for(raw.len())?;
    if let Some(i) = raw.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidParams(format!("non-finite raw value at index {i}")));
    }
    let log_pi = log_softmax(&raw[..k]);
    let mut sigma = Vec::with_capacity(k);
    let mut sigma_clamped = Vec::with_capacity(k);
    for j in 0..k {
        let (sx, sy) = (raw[3 * k + j].exp(), raw[4 * k + j].exp());
        sigma.push([sx.max(SIGMA_MIN), sy.max(SIGMA_MIN)]);
        sigma_clamped.push([sx < SIGMA_MIN, sy < SIGMA_MIN]);
    }
    let mut rho = Vec::with_capacity(k);
    let mut rho_clamped = Vec::with_capacity(k);
    for j in 0..k {
        let r = raw[5 * k + j].tanh();
        rho.push(r.clamp(-RHO_MAX, RHO_MAX));
        rho_clamped.push(r.abs() > RHO_MAX);
    }
    Ok(Unpacked {
        log_pi,
        sigma,
        sigma_clamped,
        rho,
        rho_clamped,
    })
}

impl GmmParams {
    /// Maps raw head outputs to mixture parameters: softmax weights,
    /// exponentiated scales (floored at `SIGMA_MIN`), `tanh` correlations.
    pub fn from_raw(raw: &[f64]) -> Result<Self> {
        let u = unpack(raw)?;
        let k = u.log_pi.len();
        Ok(GmmParams {
            pi: u.log_pi.iter().map(|l| l.exp()).collect(),
            mu: (0..k).map(|j| [raw[k + j], raw[2 * k + j]]).collect(),
            sigma: u.sigma,
            rho: u.rho,
        })
    }

    pub fn components(&self) -> usize {
        self.pi.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.pi.len();
        if k == 0 || self.mu.len() != k || self.sigma.len() != k || self.rho.len() != k {
            return Err(Error::InvalidParams("component arrays disagree in length".into()));
        }
        let total: f64 = self.pi.iter().sum();
        if (total - 1.0).abs() > 1e-6 || self.pi.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::InvalidParams(format!("mixture weights sum to {total}")));
        }
        if self.sigma.iter().flatten().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidParams("non-positive scale".into()));
        }
        if self.rho.iter().any(|r| !(r.abs() < 1.0)) {
            return Err(Error::InvalidParams("correlation outside (-1, 1)".into()));
        }
        if self.mu.iter().flatten().any(|m| !m.is_finite()) {
            return Err(Error::InvalidParams("non-finite mean".into()));
        }
        Ok(())
    }

    /// `log N_k(x)` for one component.
    pub fn component_log_density(&self, k: usize, x: Point) -> f64 {
        let [sx, sy] = self.sigma[k];
        let r = self.rho[k];
        let zx = (x[0] - self.mu[k][0]) / sx;
        let zy = (x[1] - self.mu[k][1]) / sy;
        let om = 1.0 - r * r;
        let z = zx * zx + zy * zy - 2.0 * r * zx * zy;
        -LN_2PI - sx.ln() - sy.ln() - 0.5 * om.ln() - z / (2.0 * om)
    }

    /// Log-density of the mixture, via log-sum-exp over components.
    pub fn log_prob(&self, x: Point) -> f64 {
        let terms: Vec<f64> = (0..self.components())
            .map(|k| self.pi[k].ln() + self.component_log_density(k, x))
            .collect();
        log_sum_exp(&terms)
    }

    /// Mixture weights after dividing log-weights by `temperature`.
    pub fn tempered_weights(&self, temperature: f64) -> Result<Vec<f64>> {
        check_temperature(temperature)?;
        let logits: Vec<f64> = self.pi.iter().map(|p| p.ln() / temperature).collect();
        Ok(log_softmax(&logits).into_iter().map(f64::exp).collect())
    }

    pub fn argmax_component(&self) -> usize {
        argmax(&self.pi)
    }

    /// Draws a point: the component from the tempered weights, the point
    /// from that component with covariance scaled by `temperature`
    /// (`sigma^2 -> T sigma^2`, correlation and mean unchanged).
    pub fn sample<R: Rng + ?Sized>(&self, temperature: f64, rng: &mut R) -> Result<Point> {
        let w = self.tempered_weights(temperature)?;
        let k = sample_index(&w, rng);
        let scale = temperature.sqrt();
        let (sx, sy) = (self.sigma[k][0] * scale, self.sigma[k][1] * scale);
        let r = self.rho[k];
        let n1: f64 = StandardNormal.sample(rng);
        let n2: f64 = StandardNormal.sample(rng);
        Ok([
            self.mu[k][0] + sx * n1,
            self.mu[k][1] + sy * (r * n1 + (1.0 - r * r).sqrt() * n2),
        ])
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn sample_index<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    // rounding left a sliver above the cumulative sum
    weights
        .iter()
        .rposition(|w| *w > 0.0)
        .unwrap_or(weights.len() - 1)
}

/// Mixture log-density and its gradient with respect to the raw head outputs.
pub fn gmm_log_prob_with_grad(raw: &[f64], x: Point) -> Result<(f64, Vec<f64>)> {
    let u = unpack(raw)?;
    let k = u.log_pi.len();
    let mut terms = Vec::with_capacity(k);
    let mut parts = Vec::with_capacity(k);
    for j in 0..k {
        let [sx, sy] = u.sigma[j];
        let r = u.rho[j];
        let zx = (x[0] - raw[k + j]) / sx;
        let zy = (x[1] - raw[2 * k + j]) / sy;
        let om = 1.0 - r * r;
        let z = zx * zx + zy * zy - 2.0 * r * zx * zy;
        let log_n = -LN_2PI - sx.ln() - sy.ln() - 0.5 * om.ln() - z / (2.0 * om);
        terms.push(u.log_pi[j] + log_n);
        parts.push((zx, zy, om, z, sx, sy, r));
    }
    let lp = log_sum_exp(&terms);
    let mut grad = vec![0.0; 6 * k];
    for j in 0..k {
        let gamma = (terms[j] - lp).exp();
        let pi = u.log_pi[j].exp();
        let (zx, zy, om, z, sx, sy, r) = parts[j];
        grad[j] = gamma - pi;
        grad[k + j] = gamma * (zx - r * zy) / (om * sx);
        grad[2 * k + j] = gamma * (zy - r * zx) / (om * sy);
        if !u.sigma_clamped[j][0] {
            grad[3 * k + j] = gamma * (-1.0 + (zx * zx - r * zx * zy) / om);
        }
        if !u.sigma_clamped[j][1] {
            grad[4 * k + j] = gamma * (-1.0 + (zy * zy - r * zx * zy) / om);
        }
        if !u.rho_clamped[j] {
            grad[5 * k + j] = gamma * (r + zx * zy - r * z / om);
        }
    }
    Ok((lp, grad))
}

/// Records `log p(x)` of the mixture encoded by `raw` (one row of `6K`).
pub fn gmm_log_prob_op(g: &mut Graph, raw: Var, x: Point) -> Result<Var> {
    let (lp, grad) = gmm_log_prob_with_grad(g.value(raw), x)?;
    Ok(g.custom(
        &[raw],
        vec![1],
        vec![lp],
        Box::new(move |up| vec![grad.iter().map(|d| d * up[0]).collect()]),
    ))
}

/// Log-mass of a Bernoulli outcome given its logit.
pub fn bernoulli_log_prob(logit: f64, outcome: bool) -> f64 {
    if outcome {
        -softplus(-logit)
    } else {
        -softplus(logit)
    }
}

/// Log-mass of a Bernoulli outcome given its probability. A zero-probability
/// observed outcome is an error.
pub fn bernoulli_log_mass(p: f64, outcome: bool) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidParams(format!("probability {p} outside [0, 1]")));
    }
    let q = if outcome { p } else { 1.0 - p };
    if q == 0.0 {
        return Err(Error::ZeroProbability(format!("bernoulli outcome {outcome} with p = {p}")));
    }
    Ok(q.ln())
}

pub fn bernoulli_log_prob_op(g: &mut Graph, logit: Var, outcome: bool) -> Var {
    let z = g.scalar(logit);
    let lp = bernoulli_log_prob(z, outcome);
    let d = if outcome { 1.0 - sigmoid(z) } else { -sigmoid(z) };
    g.custom(&[logit], vec![1], vec![lp], Box::new(move |up| vec![vec![d * up[0]]]))
}

/// Samples a Bernoulli outcome with the logit divided by `temperature`.
pub fn sample_bernoulli<R: Rng + ?Sized>(logit: f64, temperature: f64, rng: &mut R) -> Result<bool> {
    check_temperature(temperature)?;
    let p = sigmoid(logit / temperature);
    Ok(rng.random::<f64>() < p)
}

pub fn categorical_log_probs(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits)
}

pub fn categorical_log_prob(logits: &[f64], class: usize) -> f64 {
    log_softmax(logits)[class]
}

pub fn categorical_log_prob_op(g: &mut Graph, logits: Var, class: usize) -> Var {
    let lp = log_softmax(g.value(logits));
    let value = lp[class];
    let probs: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
    g.custom(
        &[logits],
        vec![1],
        vec![value],
        Box::new(move |up| {
            vec![probs
                .iter()
                .enumerate()
                .map(|(i, p)| up[0] * (if i == class { 1.0 } else { 0.0 } - p))
                .collect()]
        }),
    )
}

/// Samples a class with logits divided by `temperature`.
pub fn sample_categorical<R: Rng + ?Sized>(logits: &[f64], temperature: f64, rng: &mut R) -> Result<usize> {
    check_temperature(temperature)?;
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    let w: Vec<f64> = log_softmax(&scaled).into_iter().map(f64::exp).collect();
    Ok(sample_index(&w, rng))
}

/// Pen state of the flat sequence model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum PenState {
    Continue = 0,
    EndStroke = 1,
    EndDrawing = 2,
}

impl PenState {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(PenState::Continue),
            1 => Ok(PenState::EndStroke),
            2 => Ok(PenState::EndDrawing),
            other => Err(Error::InvalidArgument(format!("pen state {other} not in {{0,1,2}}"))),
        }
    }

    pub fn one_hot(self) -> [f64; 3] {
        let mut v = [0.0; 3];
        v[self.index()] = 1.0;
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use std::f64::consts::PI;
    use rand_chacha::ChaCha8Rng;

    fn single(mu: Point, sigma: Point, rho: f64) -> GmmParams {
        GmmParams {
            pi: vec![1.0],
            mu: vec![mu],
            sigma: vec![sigma],
            rho: vec![rho],
        }
    }

    #[test]
    fn zero_raw_gives_standard_components() {
        let g = GmmParams::from_raw(&[0.0; 12]).unwrap();
        assert_eq!(g.pi, vec![0.5, 0.5]);
        assert_eq!(g.mu, vec![[0.0, 0.0]; 2]);
        assert_eq!(g.sigma, vec![[1.0, 1.0]; 2]);
        assert_eq!(g.rho, vec![0.0; 2]);
    }

    #[test]
    fn logit_shift_invariance() {
        let raw: Vec<f64> = (0..18).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut shifted = raw.clone();
        shifted[..3].iter_mut().for_each(|v| *v += 11.0);
        let a = GmmParams::from_raw(&raw).unwrap();
        let b = GmmParams::from_raw(&shifted).unwrap();
        for (x, y) in a.pi.iter().zip(&b.pi) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_raw_rejected() {
        let mut raw = vec![0.0; 6];
        raw[2] = f64::NAN;
        assert!(matches!(GmmParams::from_raw(&raw), Err(Error::InvalidParams(_))));
        assert!(GmmParams::from_raw(&[0.0; 7]).is_err());
    }

    #[test]
    fn standard_normal_density_values() {
        let g = single([0.0, 0.0], [1.0, 1.0], 0.0);
        assert!((g.log_prob([0.0, 0.0]) + (2.0 * PI).ln()).abs() < 1e-12);
        assert!((g.log_prob([1.0, 0.0]) + (2.0 * PI).ln() + 0.5).abs() < 1e-12);
        assert!((g.log_prob([0.0, 0.0]) + 1.837877).abs() < 1e-6);
        assert!((g.log_prob([1.0, 0.0]) + 2.337877).abs() < 1e-6);
    }

    #[test]
    fn temperature_one_keeps_weights() {
        let g = GmmParams::from_raw(&[0.3, -1.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let w = g.tempered_weights(1.0).unwrap();
        for (a, b) in w.iter().zip(&g.pi) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(g.tempered_weights(0.0).is_err());
        assert!(g.sample(-1.0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn bernoulli_and_categorical_anchors() {
        assert!((bernoulli_log_prob(0.0, true) - 0.5f64.ln()).abs() < 1e-15);
        assert!((bernoulli_log_prob(0.0, false) - 0.5f64.ln()).abs() < 1e-15);
        for c in 0..3 {
            assert!((categorical_log_prob(&[0.0; 3], c) - (1.0f64 / 3.0).ln()).abs() < 1e-15);
        }
        assert!(matches!(bernoulli_log_mass(0.0, true), Err(Error::ZeroProbability(_))));
        assert!((bernoulli_log_mass(0.25, false).unwrap() - 0.75f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn extreme_logits_stay_finite() {
        assert!(bernoulli_log_prob(-800.0, true).is_finite());
        assert!(categorical_log_prob(&[900.0, -900.0, 0.0], 1).is_finite());
    }

    #[test]
    fn pen_state_round_trip() {
        for i in 0..3 {
            assert_eq!(PenState::from_index(i).unwrap().index(), i);
        }
        assert!(PenState::from_index(3).is_err());
    }
}
