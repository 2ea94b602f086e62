//! Two-sample delete-one-unit jackknife for the joint estimator vector.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::balance::{
    solve_entropy_weights, solve_entropy_weights_from, ArmFactors, MomentConstraintSet, WeightSolution,
};
use crate::data::StudyDataset;
use crate::decomp::{self, effect, Decomposition, Prepared};
use crate::error::{Error, ErrorKind, Result};
use crate::normal;
use crate::regress::{build_design_with, fit_wls, jackknife_se, model_se};
use crate::spec::{AnalysisSpec, SelectionSe};

pub const SELECTION_Z: &str = "selection_z";
pub const THETA_ORIGINAL: &str = "theta_original";

/// Largest tolerated share of failed leave-one-out replicates.
pub const MAX_FAILURE_RATE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorVector {
    pub labels: Vec<String>,
    pub values: Vec<f64>,
}

impl EstimatorVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn get(&self, label: &str) -> Option<f64> {
        self.index(label).map(|i| self.values[i])
    }

    fn from_parts(z: Option<f64>, dec: &Decomposition) -> Self {
        let mut labels = Vec::new();
        let mut values = Vec::new();
        let mut push = |l: &str, v: f64| {
            labels.push(l.to_string());
            values.push(v);
        };
        if let Some(z) = z {
            push(SELECTION_Z, z);
        }
        push(decomp::OBSERVED, dec.observed);
        push(decomp::COVARIATE, dec.covariate_shift);
        if let Some(m) = dec.mediation_shift {
            push(decomp::MEDIATION, m);
        }
        push(THETA_ORIGINAL, dec.theta_original);
        Self { labels, values }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JackknifeCovariance {
    pub sigma: DMatrix<f64>,
    pub original_part: DMatrix<f64>,
    pub replication_part: DMatrix<f64>,
    pub failures: usize,
    pub replicates: usize,
}

impl JackknifeCovariance {
    pub fn se(&self, i: usize) -> f64 {
        self.sigma[(i, i)].max(0.0).sqrt()
    }

    /// Variance of `a' V`.
    pub fn combination_variance(&self, a: &[f64]) -> f64 {
        let a = DVector::from_column_slice(a);
        (a.transpose() * &self.sigma * &a)[(0, 0)]
    }

    /// Covariance of `a' V` and `b' V`.
    pub fn combination_covariance(&self, a: &[f64], b: &[f64]) -> f64 {
        let a = DVector::from_column_slice(a);
        let b = DVector::from_column_slice(b);
        (a.transpose() * &self.sigma * &b)[(0, 0)]
    }
}

#[derive(Debug, Clone)]
pub struct JackknifeResult {
    pub estimates: EstimatorVector,
    pub covariance: JackknifeCovariance,
    pub decomposition: Decomposition,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JackknifeOptions {
    /// Start each leave-one-out balancing solve at the full-sample dual.
    pub warm_start: bool,
}

impl Default for JackknifeOptions {
    fn default() -> Self {
        Self { warm_start: true }
    }
}

/// Standardized selection statistic `tau / sigma` on the original study.
pub fn selection_statistic(d1: &StudyDataset, spec: &AnalysisSpec) -> Result<Option<f64>> {
    let Some(sel) = &spec.selection else { return Ok(None) };
    let template = sel.template.as_ref().unwrap_or(&spec.regression_template);
    let design = build_design_with(d1, spec, template)?;
    let tau = fit_wls(&design, None)?.theta;
    let sigma = match sel.se {
        SelectionSe::Jackknife => jackknife_se(&design)?,
        SelectionSe::Model => model_se(&design)?,
    };
    if !(sigma > 0.0) {
        return Err(Error::Singular { columns: vec!["T*1".into()] });
    }
    Ok(Some(tau / sigma))
}

pub fn jackknife_covariance(d1: &StudyDataset, d2: &StudyDataset, spec: &AnalysisSpec) -> Result<JackknifeResult> {
    jackknife_covariance_with(d1, d2, spec, JackknifeOptions::default())
}

pub fn jackknife_covariance_with(
    d1: &StudyDataset,
    d2: &StudyDataset,
    spec: &AnalysisSpec,
    options: JackknifeOptions,
) -> Result<JackknifeResult> {
    let prepared = decomp::prepare(d1, d2, spec)?;
    let with_mediator = prepared.mediator.is_some();
    match run(d1, d2, spec, prepared, options) {
        // Mediator balancing that is feasible on the full data but not on
        // its leave-one-out samples degrades like outright infeasibility.
        Err(Error::JackknifeFailures { failed, total }) if with_mediator => {
            let mut reduced = spec.clone();
            reduced.mediator_moments.clear();
            let prepared = decomp::prepare(d1, d2, &reduced)?;
            let mut res = run(d1, d2, &reduced, prepared, options)?;
            res.decomposition.warnings.push(format!(
                "{failed} of {total} leave-one-out replicates failed with mediator balancing; mediation shift omitted"
            ));
            Ok(res)
        }
        other => other,
    }
}

fn run(
    d1: &StudyDataset,
    d2: &StudyDataset,
    spec: &AnalysisSpec,
    prepared: Prepared,
    options: JackknifeOptions,
) -> Result<JackknifeResult> {
    let z = selection_statistic(d1, spec)?;
    let estimates = EstimatorVector::from_parts(z, &prepared.decomposition);
    let ctx = Context::new(d1, d2, spec, &prepared, z, options)?;

    let original: Vec<Result<Vec<f64>>> = (0..d1.n()).into_par_iter().map(|i| ctx.original_replicate(i)).collect();
    let replication: Vec<Result<Vec<f64>>> =
        (0..d2.n()).into_par_iter().map(|j| ctx.replication_replicate(j)).collect();

    let total = original.len() + replication.len();
    let (original, f1) = keep_successes(original)?;
    let (replication, f2) = keep_successes(replication)?;
    let failures = f1 + f2;
    if failures as f64 > MAX_FAILURE_RATE * total as f64 {
        return Err(Error::JackknifeFailures { failed: failures, total });
    }
    let k = estimates.dim();
    let original_part = spread(&original, k);
    let replication_part = spread(&replication, k);
    let mut sigma = &original_part + &replication_part;
    // Exact symmetry regardless of summation order.
    for a in 0..k {
        for b in 0..a {
            let v = 0.5 * (sigma[(a, b)] + sigma[(b, a)]);
            sigma[(a, b)] = v;
            sigma[(b, a)] = v;
        }
    }
    let covariance = JackknifeCovariance { sigma, original_part, replication_part, failures, replicates: total };
    Ok(JackknifeResult { estimates, covariance, decomposition: prepared.decomposition })
}

fn keep_successes(reps: Vec<Result<Vec<f64>>>) -> Result<(Vec<Vec<f64>>, usize)> {
    let mut ok = Vec::with_capacity(reps.len());
    let mut failed = 0;
    for r in reps {
        match r {
            Ok(v) => ok.push(v),
            Err(e) if e.kind() == ErrorKind::Numerical => failed += 1,
            Err(e) => return Err(e),
        }
    }
    Ok((ok, failed))
}

/// `(m - 1)/m * sum (v_i - mean)(v_i - mean)'` in replicate order.
fn spread(reps: &[Vec<f64>], k: usize) -> DMatrix<f64> {
    let m = reps.len();
    if m < 2 {
        return DMatrix::zeros(k, k);
    }
    let mut mean = vec![0.0; k];
    for r in reps {
        for (a, v) in r.iter().enumerate() {
            mean[a] += v;
        }
    }
    for v in &mut mean {
        *v /= m as f64;
    }
    let mut out = DMatrix::zeros(k, k);
    for r in reps {
        for a in 0..k {
            let da = r[a] - mean[a];
            for b in 0..=a {
                out[(a, b)] += da * (r[b] - mean[b]);
            }
        }
    }
    let f = (m as f64 - 1.0) / m as f64;
    for a in 0..k {
        for b in 0..=a {
            out[(a, b)] *= f;
            out[(b, a)] = out[(a, b)];
        }
    }
    out
}

struct Context<'a> {
    d1: &'a StudyDataset,
    d2: &'a StudyDataset,
    spec: &'a AnalysisSpec,
    prepared: &'a Prepared,
    full_z: Option<f64>,
    options: JackknifeOptions,
    covariate: Option<Warm>,
    mediator: Option<Warm>,
}

/// Reusable state for warm leave-one-out solves of one constraint set.
struct Warm {
    factors: Option<ArmFactors>,
    /// Column sums of the original study's features.
    sums: DVector<f64>,
}

impl Warm {
    fn new(c: &MomentConstraintSet, d1_features: &DMatrix<f64>) -> Result<Self> {
        let factors = ArmFactors::new(c).transpose()?;
        let sums = DVector::from_iterator(d1_features.ncols(), d1_features.column_iter().map(|c| c.sum()));
        Ok(Self { factors, sums })
    }

    fn without_original(
        &self,
        c: &MomentConstraintSet,
        d1_features: &DMatrix<f64>,
        full: &WeightSolution,
        i: usize,
    ) -> Result<Vec<f64>> {
        let n = d1_features.nrows() as f64;
        let targets = DVector::from_iterator(
            self.sums.len(),
            (0..self.sums.len()).map(|j| (self.sums[j] - d1_features[(i, j)]) / (n - 1.0)),
        );
        match &self.factors {
            Some(f) => f.solve_targets(&targets),
            None => Ok(solve_entropy_weights_from(&c.with_targets(targets), &full.dual)?.weights),
        }
    }

    fn without_replication(&self, c: &MomentConstraintSet, full: &WeightSolution, j: usize) -> Result<Vec<f64>> {
        match &self.factors {
            Some(f) => f.solve_without(j),
            None => Ok(solve_entropy_weights_from(&c.without_unit(j), &full.dual)?.weights),
        }
    }
}

impl<'a> Context<'a> {
    fn new(
        d1: &'a StudyDataset,
        d2: &'a StudyDataset,
        spec: &'a AnalysisSpec,
        prepared: &'a Prepared,
        full_z: Option<f64>,
        options: JackknifeOptions,
    ) -> Result<Self> {
        let (mut covariate, mut mediator) = (None, None);
        if options.warm_start {
            covariate = Some(Warm::new(&prepared.covariate, &prepared.d1_covariate_features)?);
            if let (Some(c), Some(f)) = (&prepared.mediator, &prepared.d1_mediator_features) {
                mediator = Some(Warm::new(c, f)?);
            }
        }
        Ok(Self { d1, d2, spec, prepared, full_z, options, covariate, mediator })
    }

    fn vector(&self, z: Option<f64>, theta1: f64, theta2: f64, theta_w: f64, theta_omega: Option<f64>) -> Vec<f64> {
        let dec = decomp::assemble(theta1, theta2, theta_w, theta_omega, None, None, Vec::new());
        EstimatorVector::from_parts(z, &dec).values
    }

    fn full_weights(&self) -> (&WeightSolution, Option<&WeightSolution>) {
        let full = &self.prepared.decomposition;
        (full.covariate_weights.as_ref().expect("covariate weights"), full.mediator_weights.as_ref())
    }

    fn original_replicate(&self, i: usize) -> Result<Vec<f64>> {
        let p = self.prepared;
        let full = &p.decomposition;
        let d1 = self.d1.without(i);
        let theta1 = effect(&d1, self.spec, None)?;
        let z = if self.full_z.is_some() { selection_statistic(&d1, self.spec)? } else { None };
        let (w, omega) = if self.options.warm_start {
            let (fw, fo) = self.full_weights();
            let warm = self.covariate.as_ref().expect("warm state");
            let w = warm.without_original(&p.covariate, &p.d1_covariate_features, fw, i)?;
            let omega = match (&self.mediator, &p.mediator, &p.d1_mediator_features, fo) {
                (Some(m), Some(c), Some(f), Some(fo)) => Some(m.without_original(c, f, fo, i)?),
                _ => None,
            };
            (w, omega)
        } else {
            cold(&d1, self.d2, self.spec, p.mediator.is_some())?
        };
        let theta_w = effect(self.d2, self.spec, Some(&w))?;
        let theta_omega = omega.map(|o| effect(self.d2, self.spec, Some(&o))).transpose()?;
        Ok(self.vector(z, theta1, full.theta_replication, theta_w, theta_omega))
    }

    fn replication_replicate(&self, j: usize) -> Result<Vec<f64>> {
        let p = self.prepared;
        let full = &p.decomposition;
        let d2 = self.d2.without(j);
        let theta2 = effect(&d2, self.spec, None)?;
        let (w, omega) = if self.options.warm_start {
            let (fw, fo) = self.full_weights();
            let w = self.covariate.as_ref().expect("warm state").without_replication(&p.covariate, fw, j)?;
            let omega = match (&self.mediator, &p.mediator, fo) {
                (Some(m), Some(c), Some(fo)) => Some(m.without_replication(c, fo, j)?),
                _ => None,
            };
            (w, omega)
        } else {
            cold(self.d1, &d2, self.spec, p.mediator.is_some())?
        };
        let theta_w = effect(&d2, self.spec, Some(&w))?;
        let theta_omega = omega.map(|o| effect(&d2, self.spec, Some(&o))).transpose()?;
        Ok(self.vector(self.full_z, full.theta_original, theta2, theta_w, theta_omega))
    }
}

/// Weights from constraints rebuilt on the reduced data, solved from scratch.
fn cold(
    d1: &StudyDataset,
    d2: &StudyDataset,
    spec: &AnalysisSpec,
    mediators: bool,
) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
    let (cov, med) = rebuild(d1, d2, spec, mediators)?;
    let w = solve_entropy_weights(&cov)?.weights;
    let omega = med.map(|c| solve_entropy_weights(&c).map(|s| s.weights)).transpose()?;
    Ok((w, omega))
}

fn rebuild(
    d1: &StudyDataset,
    d2: &StudyDataset,
    spec: &AnalysisSpec,
    mediators: bool,
) -> Result<(MomentConstraintSet, Option<MomentConstraintSet>)> {
    let cov = crate::balance::build_covariate_constraints(d1, d2, spec)?;
    let med = if mediators { Some(crate::balance::build_mediator_constraints(d1, d2, spec)?) } else { None };
    Ok((cov, med))
}

/// `estimate +- z_{(1+level)/2} * se` for every entry.
pub fn normal_cis(vec: &EstimatorVector, cov: &JackknifeCovariance, level: f64) -> Vec<(f64, f64)> {
    (0..vec.dim()).map(|i| normal_ci(vec.values[i], cov.sigma[(i, i)], level)).collect()
}

pub fn normal_ci(estimate: f64, variance: f64, level: f64) -> (f64, f64) {
    let half = normal::two_sided_critical(level) * variance.max(0.0).sqrt();
    (estimate - half, estimate + half)
}
