//! Inference conditional on the original study having been selected for
//! significance, `|tau/sigma| > z_{1 - alpha0/2}`.
//!
//! The estimator vector is treated as jointly Gaussian; conditioning on the
//! selection event truncates it. Intervals invert the conditional CDF of one
//! component with the rest of the selection statistic held at its residual
//! value, and point estimates maximize the profiled truncated likelihood.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::decomp::{COVARIATE, MEDIATION, OBSERVED, RESIDUAL, SAMPLING};
use crate::error::{Error, Result};
use crate::inference::{EstimatorVector, JackknifeCovariance, SELECTION_Z};
use crate::neldermead::NelderMead;
use crate::normal;

/// Log-mass below which the truncation set is treated as empty.
const LOG_MIN_MASS: f64 = -690.775_527_898_213_7; // ln(1e-300)

/// Label of the population discrepancy `theta(P) - theta(Q)`.
pub const DISCREPANCY: &str = "discrepancy";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionModel {
    pub alpha0: f64,
    pub z_threshold: f64,
    pub statistic_label: String,
    pub observed_z: f64,
}

impl SelectionModel {
    /// Refuses construction when the selection event did not occur.
    pub fn new(alpha0: f64, observed_z: f64) -> Result<Self> {
        if !(alpha0 > 0.0 && alpha0 < 1.0) {
            return Err(Error::InvalidArgument(format!("alpha0 = {alpha0} outside (0, 1)")));
        }
        let z_threshold = normal::quantile(1.0 - alpha0 / 2.0);
        if !(observed_z.abs() > z_threshold) {
            return Err(Error::SelectionEventAbsent { z: observed_z.abs(), threshold: z_threshold });
        }
        Ok(Self { alpha0, z_threshold, statistic_label: SELECTION_Z.into(), observed_z })
    }
}

/// `P(Z <= c | tau < |a (Z - c) + theta1|)` for `Z ~ N(t, sigma[0][0])`,
/// `a = sigma[0][1] / sigma[0][0]`.
pub fn truncated_prob(t: f64, c: f64, theta1: f64, tau: f64, sigma: [[f64; 2]; 2]) -> Result<f64> {
    let var = sigma[0][0];
    if !(var > 0.0) || !(tau >= 0.0) {
        return Err(Error::InvalidArgument("truncated_prob needs sigma11 > 0 and tau >= 0".into()));
    }
    let s = var.sqrt();
    let a = sigma[0][1] / var;
    let q = (c - t) / s;
    if a == 0.0 {
        return if theta1.abs() > tau { Ok(normal::cdf(q)) } else { Err(Error::SelectionIncompatible) };
    }
    // Complement of the truncation set is the interval (lower, upper) in Z.
    let (r1, r2) = (c + (-tau - theta1) / a, c + (tau - theta1) / a);
    let (lower, upper) = if a > 0.0 { (r1, r2) } else { (r2, r1) };
    let l = (lower - t) / s;
    let u = (upper - t) / s;
    let log_den = normal::log_add(normal::log_cdf(l), normal::log_sf(u));
    if !(log_den > LOG_MIN_MASS) {
        return Err(Error::SelectionIncompatible);
    }
    let log_num = normal::log_add(normal::log_cdf(q.min(l)), normal::log_interval(u, q));
    Ok((log_num - log_den).exp().clamp(0.0, 1.0))
}

/// `{t : truncated_prob(t) in [alpha/2, 1 - alpha/2]}`.
pub fn invert_ci(c: f64, theta1: f64, tau: f64, sigma: [[f64; 2]; 2], alpha: f64) -> Result<(f64, f64)> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha = {alpha} outside (0, 1)")));
    }
    if sigma[0][0] == 0.0 {
        return Ok((c, c));
    }
    let s = sigma[0][0].sqrt();
    let p = |t: f64| truncated_prob(t, c, theta1, tau, sigma);

    let mut prev = f64::INFINITY;
    for k in -16..=16 {
        let v = p(c + 0.5 * k as f64 * s)?;
        if v > prev + 1e-10 {
            return Err(Error::NonMonotone);
        }
        prev = v;
    }
    let lo = solve_level(&p, c, s, 1.0 - alpha / 2.0)?;
    let hi = solve_level(&p, c, s, alpha / 2.0)?;
    Ok((lo, hi))
}

/// Root of the non-increasing `p(t) = target`, bracketed outward from `c`.
fn solve_level(p: &impl Fn(f64) -> Result<f64>, c: f64, s: f64, target: f64) -> Result<f64> {
    let at_c = p(c)?;
    let dir = if at_c > target { 1.0 } else { -1.0 };
    let mut near = c;
    let mut step = s;
    let mut far = c + dir * step;
    let mut doublings = 0;
    while (p(far)? - target) * dir > 0.0 {
        near = far;
        step *= 2.0;
        far = c + dir * step;
        doublings += 1;
        if doublings > 60 {
            return Err(Error::NonMonotone);
        }
    }
    let (mut lo, mut hi) = if dir > 0.0 { (near, far) } else { (far, near) };
    while hi - lo > 1e-8 * s {
        let mid = 0.5 * (lo + hi);
        if p(mid)? > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerReport {
    pub evaluations: usize,
    pub iterations: usize,
    pub converged: bool,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub component: String,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjustedDecomposition {
    pub observed: f64,
    pub discrepancy: f64,
    pub sampling_variability: f64,
    pub covariate_shift: f64,
    pub mediation_shift: Option<f64>,
    pub residual: f64,
    pub intervals: Vec<Interval>,
    pub optimizer: OptimizerReport,
}

impl AdjustedDecomposition {
    pub fn components(&self) -> Vec<(&'static str, f64)> {
        let mut out = vec![(SAMPLING, self.sampling_variability), (COVARIATE, self.covariate_shift)];
        if let Some(m) = self.mediation_shift {
            out.push((MEDIATION, m));
        }
        out.push((RESIDUAL, self.residual));
        out
    }

    pub fn additivity_gap(&self) -> f64 {
        self.components().iter().map(|(_, v)| v).sum::<f64>() - self.observed
    }

    pub fn interval(&self, component: &str) -> Option<(f64, f64)> {
        self.intervals.iter().find(|i| i.component == component).map(|i| (i.lo, i.hi))
    }
}

/// Point estimates from the profiled selective likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectiveMle {
    /// Estimates of (discrepancy, covariate shift, mediation shift if present).
    pub estimates: Vec<f64>,
    pub optimizer: OptimizerReport,
}

struct Blocks {
    z: usize,
    comps: Vec<usize>,
}

fn blocks(vec: &EstimatorVector) -> Result<Blocks> {
    let z = vec
        .index(SELECTION_Z)
        .ok_or_else(|| Error::InvalidArgument("estimator vector lacks the selection statistic".into()))?;
    let mut comps = vec![
        vec.index(OBSERVED).expect("observed is always present"),
        vec.index(COVARIATE).expect("covariate shift is always present"),
    ];
    if let Some(m) = vec.index(MEDIATION) {
        comps.push(m);
    }
    Ok(Blocks { z, comps })
}

/// `ln P(|W| > tau)` for `W ~ N(mean, sd^2)`.
fn log_two_sided_tail(mean: f64, sd: f64, tau: f64) -> f64 {
    if sd <= 0.0 {
        return if mean.abs() > tau { 0.0 } else { f64::NEG_INFINITY };
    }
    normal::log_add(normal::log_cdf((-tau - mean) / sd), normal::log_sf((tau - mean) / sd))
}

pub fn selective_mle(vec: &EstimatorVector, cov: &JackknifeCovariance, model: &SelectionModel) -> Result<SelectiveMle> {
    let b = blocks(vec)?;
    let hat: Vec<f64> = b.comps.iter().map(|&i| vec.values[i]).collect();
    let max_diag = b.comps.iter().map(|&i| cov.sigma[(i, i)]).fold(0.0, f64::max);
    // Components with no sampling variance are known exactly and held fixed.
    let free: Vec<usize> =
        (0..b.comps.len()).filter(|&k| cov.sigma[(b.comps[k], b.comps[k])] > 1e-14 * max_diag.max(1e-300)).collect();
    if free.is_empty() {
        return Ok(SelectiveMle {
            estimates: hat,
            optimizer: OptimizerReport { evaluations: 0, iterations: 0, converged: true, objective: 0.0 },
        });
    }
    let m = free.len();
    let s22 = DMatrix::from_fn(m, m, |r, c| cov.sigma[(b.comps[free[r]], b.comps[free[c]])]);
    let s21 = DVector::from_fn(m, |r, _| cov.sigma[(b.comps[free[r]], b.z)]);
    let chol = s22.clone().cholesky().ok_or(Error::CovarianceNotPositive)?;
    let s22_inv = chol.inverse();
    let coef = chol.solve(&s21);
    let w_sd = s21.dot(&coef).max(0.0).sqrt();
    let z_obs = vec.values[b.z];
    let tau = model.z_threshold;
    let free_hat = DVector::from_fn(m, |r, _| hat[free[r]]);

    let objective = |x: &[f64]| -> f64 {
        let r = &free_hat - DVector::from_column_slice(x);
        let quad = (r.transpose() * &s22_inv * &r)[(0, 0)];
        0.5 * quad + log_two_sided_tail(z_obs - coef.dot(&r), w_sd, tau)
    };
    let step: Vec<f64> = free.iter().map(|&k| (0.1 * cov.sigma[(b.comps[k], b.comps[k])].sqrt()).max(1e-3)).collect();
    let nm = NelderMead::new(step);
    let min = nm.minimize(objective, free_hat.as_slice())?;
    let mut estimates = hat;
    for (r, &k) in free.iter().enumerate() {
        estimates[k] = min.point[r];
    }
    Ok(SelectiveMle {
        estimates,
        optimizer: OptimizerReport {
            evaluations: min.evaluations,
            iterations: min.iterations,
            converged: min.converged,
            objective: min.value,
        },
    })
}

/// Selective MLE plus conditional intervals for every component.
pub fn adjust(
    vec: &EstimatorVector,
    cov: &JackknifeCovariance,
    model: &SelectionModel,
    level: f64,
) -> Result<AdjustedDecomposition> {
    let b = blocks(vec)?;
    let mle = selective_mle(vec, cov, model)?;
    let observed = vec.values[b.comps[0]];
    let discrepancy = mle.estimates[0];
    let covariate_shift = mle.estimates[1];
    let mediation_shift = mle.estimates.get(2).copied();
    let sampling_variability = observed - discrepancy;
    let mut parts = vec![sampling_variability, covariate_shift];
    parts.extend(mediation_shift);
    let residual = crate::decomp::closing_term(observed, &parts);

    let alpha = 1.0 - level;
    let z_obs = vec.values[b.z];
    let tau = model.z_threshold;
    let k = vec.dim();
    let unit = |i: usize| {
        let mut a = vec![0.0; k];
        a[i] = 1.0;
        a
    };
    let interval_for = |a: &[f64]| -> Result<(f64, f64)> {
        let c: f64 = a.iter().zip(&vec.values).map(|(a, v)| a * v).sum();
        let var = cov.combination_variance(a);
        let cz = cov.combination_covariance(a, &unit(b.z));
        let zz = cov.sigma[(b.z, b.z)];
        invert_ci(c, z_obs, tau, [[var.max(0.0), cz], [cz, zz]], alpha)
    };

    let mut intervals = Vec::new();
    let disc = interval_for(&unit(b.comps[0]))?;
    intervals.push(Interval { component: SAMPLING.into(), lo: observed - disc.1, hi: observed - disc.0 });
    let c = interval_for(&unit(b.comps[1]))?;
    intervals.push(Interval { component: COVARIATE.into(), lo: c.0, hi: c.1 });
    let mut resid = unit(b.comps[0]);
    resid[b.comps[1]] -= 1.0;
    if let Some(&mi) = b.comps.get(2) {
        let m = interval_for(&unit(mi))?;
        intervals.push(Interval { component: MEDIATION.into(), lo: m.0, hi: m.1 });
        resid[mi] -= 1.0;
    }
    let r = interval_for(&resid)?;
    intervals.push(Interval { component: RESIDUAL.into(), lo: r.0, hi: r.1 });
    intervals.push(Interval { component: DISCREPANCY.into(), lo: disc.0, hi: disc.1 });

    Ok(AdjustedDecomposition {
        observed,
        discrepancy,
        sampling_variability,
        covariate_shift,
        mediation_shift,
        residual,
        intervals,
        optimizer: mle.optimizer,
    })
}
