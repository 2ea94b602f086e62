//! Observed discrepancy and its components.
//!
//! With `theta_w` the replication effect reweighted to the original covariate
//! distribution and `theta_omega` reweighted to covariates and mediators:
//!
//! ```text
//! covariate_shift = theta_w - theta(D2)
//! mediation_shift = theta_omega - theta_w
//! residual        = theta(D1) - theta_omega
//! ```
//!
//! Sampling variability is estimated by zero unless selection adjustment is
//! requested (see [`crate::selectadj`]).

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::balance::{
    build_covariate_constraints, build_mediator_constraints, solve_entropy_weights, MomentConstraintSet, WeightSolution,
};
use crate::data::StudyDataset;
use crate::error::{Error, Result};
use crate::regress::{build_design, fit_wls};
use crate::spec::{AnalysisSpec, RegressionTemplate};

pub const SAMPLING: &str = "sampling_variability";
pub const COVARIATE: &str = "covariate_shift";
pub const MEDIATION: &str = "mediation_shift";
pub const RESIDUAL: &str = "residual";
pub const OBSERVED: &str = "observed";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub observed: f64,
    pub sampling_variability: f64,
    pub covariate_shift: f64,
    pub mediation_shift: Option<f64>,
    pub residual: f64,
    pub theta_original: f64,
    pub theta_replication: f64,
    pub theta_w: f64,
    pub theta_omega: f64,
    #[serde(skip)]
    pub covariate_weights: Option<WeightSolution>,
    #[serde(skip)]
    pub mediator_weights: Option<WeightSolution>,
    pub adjusted: bool,
    pub warnings: Vec<String>,
}

impl Decomposition {
    /// Components in display order: sampling, covariate, mediation, residual.
    pub fn components(&self) -> Vec<(&'static str, f64)> {
        let mut out = vec![(SAMPLING, self.sampling_variability), (COVARIATE, self.covariate_shift)];
        if let Some(m) = self.mediation_shift {
            out.push((MEDIATION, m));
        }
        out.push((RESIDUAL, self.residual));
        out
    }

    /// Components sum minus observed; zero up to rounding.
    pub fn additivity_gap(&self) -> f64 {
        self.components().iter().map(|(_, v)| v).sum::<f64>() - self.observed
    }
}

/// `r` with `parts[0] + parts[1] + ... + r == total` in floating point when
/// such an `r` exists near `total - sum(parts)`.
pub(crate) fn closing_term(total: f64, parts: &[f64]) -> f64 {
    let head: f64 = parts.iter().sum();
    let mut r = total - head;
    for _ in 0..64 {
        let got = head + r;
        if got == total || !got.is_finite() {
            break;
        }
        r = if got < total { next_toward(r, f64::INFINITY) } else { next_toward(r, f64::NEG_INFINITY) };
    }
    r
}

fn next_toward(x: f64, dir: f64) -> f64 {
    if x == 0.0 {
        let tiny = f64::from_bits(1);
        return if dir > 0.0 { tiny } else { -tiny };
    }
    let bits = x.to_bits();
    let up = (dir > x) == (x > 0.0);
    f64::from_bits(if up { bits + 1 } else { bits - 1 })
}

/// Treatment coefficient of the analysis regression, optionally weighted.
pub fn effect(d: &StudyDataset, spec: &AnalysisSpec, weights: Option<&[f64]>) -> Result<f64> {
    if spec.regression_template == RegressionTemplate::Ttest && spec.p() == 1 {
        return difference_in_means(d, weights);
    }
    fit_wls(&build_design(d, spec)?, weights).map(|f| f.theta)
}

/// Closed form of the t-test template: weighted treated mean minus weighted
/// control mean.
fn difference_in_means(d: &StudyDataset, weights: Option<&[f64]>) -> Result<f64> {
    if let Some(w) = weights {
        if w.len() != d.n() {
            return Err(Error::InvalidWeights(format!("{} weights for {} units", w.len(), d.n())));
        }
        if let Some(i) = w.iter().position(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidWeights(format!("weight {} of unit {i} is negative or non-finite", w[i])));
        }
    }
    let y = d.outcome(0);
    let mut sum = [0.0; 2];
    let mut mass = [0.0; 2];
    for (i, &t) in d.treatment().iter().enumerate() {
        let w = weights.map_or(1.0, |w| w[i]);
        sum[t as usize] += w * y[i];
        mass[t as usize] += w;
    }
    if !(mass[0] > 0.0 && mass[1] > 0.0) {
        return Err(Error::Singular { columns: vec!["T*1".into(), "1".into()] });
    }
    Ok(sum[1] / mass[1] - sum[0] / mass[0])
}

pub fn reweighted_effect(d2: &StudyDataset, spec: &AnalysisSpec, w: &WeightSolution) -> Result<f64> {
    effect(d2, spec, Some(&w.weights))
}

/// Balancing problems and full-sample results, kept for leave-one-out reuse.
#[derive(Debug, Clone)]
pub(crate) struct Prepared {
    pub covariate: MomentConstraintSet,
    pub mediator: Option<MomentConstraintSet>,
    pub d1_covariate_features: DMatrix<f64>,
    pub d1_mediator_features: Option<DMatrix<f64>>,
    pub decomposition: Decomposition,
}

pub(crate) fn prepare(d1: &StudyDataset, d2: &StudyDataset, spec: &AnalysisSpec) -> Result<Prepared> {
    let mut warnings = Vec::new();
    let covariate = build_covariate_constraints(d1, d2, spec)?;
    let w = solve_entropy_weights(&covariate)?;
    let mut mediator = None;
    let mut omega = None;
    if !spec.mediator_moments.is_empty() {
        let attempt = build_mediator_constraints(d1, d2, spec).and_then(|c| solve_entropy_weights(&c).map(|s| (c, s)));
        match attempt {
            Ok((c, s)) => {
                mediator = Some(c);
                omega = Some(s);
            }
            Err(e @ (Error::Infeasible { .. } | Error::Collinear { .. })) => {
                warnings.push(format!("mediator balancing failed ({e}); mediation shift omitted"));
            }
            Err(e) => return Err(e),
        }
    }
    let theta1 = effect(d1, spec, None)?;
    let theta2 = effect(d2, spec, None)?;
    let theta_w = effect(d2, spec, Some(&w.weights))?;
    let theta_omega = match &omega {
        Some(o) => effect(d2, spec, Some(&o.weights))?,
        None => theta_w,
    };
    let decomposition =
        assemble(theta1, theta2, theta_w, omega.as_ref().map(|_| theta_omega), Some(w), omega, warnings);
    let d1_covariate_features = covariate.feature_map().expect("built from spec").matrix(d1)?;
    let d1_mediator_features = match &mediator {
        Some(c) => Some(c.feature_map().expect("built from spec").matrix(d1)?),
        None => None,
    };
    Ok(Prepared { covariate, mediator, d1_covariate_features, d1_mediator_features, decomposition })
}

pub(crate) fn assemble(
    theta1: f64,
    theta2: f64,
    theta_w: f64,
    theta_omega: Option<f64>,
    covariate_weights: Option<WeightSolution>,
    mediator_weights: Option<WeightSolution>,
    warnings: Vec<String>,
) -> Decomposition {
    let omega = theta_omega.unwrap_or(theta_w);
    Decomposition {
        observed: theta1 - theta2,
        sampling_variability: 0.0,
        covariate_shift: theta_w - theta2,
        mediation_shift: theta_omega.map(|t| t - theta_w),
        residual: theta1 - omega,
        theta_original: theta1,
        theta_replication: theta2,
        theta_w,
        theta_omega: omega,
        covariate_weights,
        mediator_weights,
        adjusted: false,
        warnings,
    }
}

pub fn estimate_components(d1: &StudyDataset, d2: &StudyDataset, spec: &AnalysisSpec) -> Result<Decomposition> {
    prepare(d1, d2, spec).map(|p| p.decomposition)
}
