//! Brute-force oracles for the selective-inference numerics.
#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::Rng;

use shiftdiag_core::decomp::{COVARIATE, OBSERVED};
use shiftdiag_core::inference::{SELECTION_Z, THETA_ORIGINAL};
use shiftdiag_core::normal;
use shiftdiag_core::selectadj::{invert_ci, selective_mle, truncated_prob};
use shiftdiag_core::{EstimatorVector, JackknifeCovariance, SelectionModel};

use super::{normal as draw_normal, rng};

#[derive(Debug, Clone, Copy)]
pub struct TruncSet {
    pub t: f64,
    pub c: f64,
    pub theta1: f64,
    pub tau: f64,
    pub sigma: [[f64; 2]; 2],
}

/// Parameter set `index` of a pinned family. The selection statistic sits
/// near the threshold so that truncation bites.
pub fn trunc_set(index: u64) -> TruncSet {
    let mut r = rng(0x5e1e_c7ed ^ index);
    let s11: f64 = r.random_range(0.2..2.0);
    let s22: f64 = r.random_range(0.5..1.5);
    let rho: f64 = r.random_range(-0.9..0.9);
    let s12 = rho * (s11 * s22).sqrt();
    let tau = 1.959_963_984_540_054;
    let theta1 = if r.random::<bool>() { 1.0 } else { -1.0 } * (tau + r.random_range(0.02..1.5));
    let c = r.random_range(-1.0..1.0);
    let t = c + s11.sqrt() * r.random_range(-2.0..2.0);
    TruncSet { t, c, theta1, tau, sigma: [[s11, s12], [s12, s22]] }
}

/// Monte Carlo estimate of the truncated probability and its standard error.
pub fn mc_truncated_prob(p: &TruncSet, draws: usize, seed: u64) -> (f64, f64) {
    let mut r = rng(seed);
    let s = p.sigma[0][0].sqrt();
    let a = p.sigma[0][1] / p.sigma[0][0];
    let (mut kept, mut below) = (0usize, 0usize);
    for _ in 0..draws {
        let z = p.t + s * draw_normal(&mut r);
        if (a * (z - p.c) + p.theta1).abs() > p.tau {
            kept += 1;
            if z <= p.c {
                below += 1;
            }
        }
    }
    let est = below as f64 / kept as f64;
    (est, (est * (1.0 - est) / kept as f64).sqrt())
}

/// Interval endpoints located on a grid of `t` with spacing `step`.
pub fn grid_ci(p: &TruncSet, alpha: f64, step: f64) -> (f64, f64) {
    let s = p.sigma[0][0].sqrt();
    let prob = |t: f64| truncated_prob(t, p.c, p.theta1, p.tau, p.sigma).expect("inside support");
    let (mut lo, mut hi) = (f64::NAN, f64::NAN);
    let start = p.c - 15.0 * s;
    let steps = (30.0 * s / step).ceil() as usize;
    let mut prev = prob(start);
    for k in 1..=steps {
        let t = start + k as f64 * step;
        let v = prob(t);
        if lo.is_nan() && prev > 1.0 - alpha / 2.0 && v <= 1.0 - alpha / 2.0 {
            lo = t - 0.5 * step;
        }
        if hi.is_nan() && prev > alpha / 2.0 && v <= alpha / 2.0 {
            hi = t - 0.5 * step;
        }
        prev = v;
    }
    (lo, hi)
}

pub fn engine_ci(p: &TruncSet, alpha: f64) -> (f64, f64) {
    invert_ci(p.c, p.theta1, p.tau, p.sigma, alpha).expect("interval inverts")
}

/// One free component: covariate shift has zero variance and stays fixed.
pub fn one_dim_problem(index: u64) -> (EstimatorVector, JackknifeCovariance, SelectionModel) {
    let mut r = rng(0x0e1d ^ index);
    let s_obs: f64 = r.random_range(0.3..1.5);
    let s_th: f64 = r.random_range(0.3..1.5);
    let rho: f64 = r.random_range(0.3..0.95);
    let rho_z: f64 = r.random_range(0.5..0.95);
    // Order: selection_z, observed, covariate_shift, theta_original.
    let mut sigma = DMatrix::zeros(4, 4);
    sigma[(0, 0)] = 1.0;
    sigma[(1, 1)] = s_obs * s_obs;
    sigma[(3, 3)] = s_th * s_th;
    sigma[(0, 1)] = rho * s_obs;
    sigma[(0, 3)] = rho_z * s_th;
    sigma[(1, 3)] = rho * rho_z * s_obs * s_th;
    for a in 0..4 {
        for b in 0..a {
            sigma[(a, b)] = sigma[(b, a)];
        }
    }
    let tau = 1.959_963_984_540_054;
    let z = if r.random::<bool>() { 1.0 } else { -1.0 } * (tau + r.random_range(0.01..0.8));
    let values = vec![z, draw_normal(&mut r), r.random_range(-1.0..1.0), draw_normal(&mut r)];
    let labels = [SELECTION_Z, OBSERVED, COVARIATE, THETA_ORIGINAL].iter().map(|s| s.to_string()).collect();
    let cov = JackknifeCovariance {
        sigma,
        original_part: DMatrix::zeros(4, 4),
        replication_part: DMatrix::zeros(4, 4),
        failures: 0,
        replicates: 0,
    };
    (EstimatorVector { labels, values }, cov, SelectionModel::new(0.05, z).expect("selected"))
}

/// Negative log truncated likelihood of the observed component at `x`,
/// written out from the conditional model.
fn neg_log_lik(vec: &EstimatorVector, cov: &JackknifeCovariance, tau: f64, x: f64) -> f64 {
    let v_hat = vec.values[1];
    let z_obs = vec.values[0];
    let s22 = cov.sigma[(1, 1)];
    let s21 = cov.sigma[(1, 0)];
    let coef = s21 / s22;
    let mean = z_obs - coef * (v_hat - x);
    let sd = s21.abs() / s22.sqrt();
    let mass = normal::cdf((-tau - mean) / sd) + normal::sf((tau - mean) / sd);
    0.5 * (v_hat - x).powi(2) / s22 + mass.ln()
}

/// Grid minimizer of the one-dimensional selective likelihood.
pub fn grid_mle(vec: &EstimatorVector, cov: &JackknifeCovariance, tau: f64) -> f64 {
    let sd = cov.sigma[(1, 1)].sqrt();
    let f = |x: f64| neg_log_lik(vec, cov, tau, x);
    let mut center = vec.values[1];
    let mut half = 10.0 * sd;
    for _ in 0..6 {
        let n = 2000;
        let mut best = (f64::INFINITY, center);
        for k in 0..=n {
            let x = center - half + 2.0 * half * k as f64 / n as f64;
            let v = f(x);
            if v < best.0 {
                best = (v, x);
            }
        }
        center = best.1;
        half *= 0.01;
    }
    center
}

pub fn engine_mle(vec: &EstimatorVector, cov: &JackknifeCovariance, model: &SelectionModel) -> f64 {
    selective_mle(vec, cov, model).expect("optimizer converges").estimates[0]
}
