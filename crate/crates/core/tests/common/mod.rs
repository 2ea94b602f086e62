//! Random instance generators shared by the integration tests.
#![allow(dead_code)]

pub mod checks;
pub mod selection;

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use shiftdiag_core::{AnalysisSpec, Column, ColumnSpec, Moment, RegressionTemplate, Role, StudyDataset};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Treatment vector with at least two units per arm.
pub fn treatment(rng: &mut impl Rng, n: usize) -> Vec<u8> {
    let mut t: Vec<u8> = (0..n).map(|_| u8::from(rng.random::<bool>())).collect();
    t[0] = 0;
    t[1] = 0;
    t[2] = 1;
    t[3] = 1;
    t
}

/// Study with numeric covariates `x1..xk`, numeric mediators `m1..mj` and
/// `p` outcome slots. `shift` moves covariate and mediator means.
pub fn study(rng: &mut impl Rng, role: Role, n: usize, k: usize, j: usize, p: usize, shift: f64) -> StudyDataset {
    let t = treatment(rng, n);
    let mut cov = BTreeMap::new();
    let mut xs = Vec::new();
    for c in 0..k {
        let v: Vec<f64> = (0..n).map(|_| normal(rng) + shift).collect();
        xs.push(v.clone());
        cov.insert(format!("x{}", c + 1), Column::Numeric(v));
    }
    let mut med = BTreeMap::new();
    let mut ms = Vec::new();
    for c in 0..j {
        let v: Vec<f64> =
            (0..n).map(|i| normal(rng) + shift * f64::from(t[i]) + 0.3 * xs.first().map_or(0.0, |x| x[i])).collect();
        ms.push(v.clone());
        med.insert(format!("m{}", c + 1), Column::Numeric(v));
    }
    let outcomes = (0..p)
        .map(|l| {
            (0..n)
                .map(|i| {
                    let signal: f64 = xs.iter().chain(&ms).map(|c| c[i]).sum::<f64>();
                    f64::from(t[i]) * (1.0 + 0.5 * signal) + 0.2 * l as f64 + normal(rng)
                })
                .collect()
        })
        .collect();
    StudyDataset::new(role, t, outcomes, cov, med).expect("generated study is valid")
}

/// Spec balancing means of every covariate and mediator of `study`.
pub fn spec_for(k: usize, j: usize, p: usize, template: RegressionTemplate) -> AnalysisSpec {
    let mut spec = AnalysisSpec::ttest("y1", "t");
    spec.outcome_columns = (1..=p).map(|l| format!("y{l}")).collect();
    spec.regression_template = template;
    if spec.regression_template.needs_regressors() {
        spec.regressors = (1..=k).map(|c| format!("x{c}")).collect();
    }
    spec.covariate_moments = (1..=k).map(|c| ColumnSpec::numeric(format!("x{c}"), Moment::Mean)).collect();
    spec.mediator_moments = (1..=j).map(|c| ColumnSpec::numeric(format!("m{c}"), Moment::Mean)).collect();
    spec
}

/// Random original/replication pair with a modest shift and its spec.
pub fn pair(seed: u64) -> (StudyDataset, StudyDataset, AnalysisSpec) {
    let mut r = rng(seed);
    let k = r.random_range(1..=2);
    let j = r.random_range(0..=2);
    let n1 = r.random_range(30..=80);
    let n2 = r.random_range(40..=90);
    let shift = r.random_range(0.0..0.4);
    let d1 = study(&mut r, Role::Original, n1, k, j, 1, shift);
    let d2 = study(&mut r, Role::Replication, n2, k, j, 1, 0.0);
    let template = if r.random::<bool>() { RegressionTemplate::Ttest } else { RegressionTemplate::Ancova };
    (d1, d2, spec_for(k, j, 1, template))
}

/// Random simplex point with all entries at least `floor / n`.
pub fn simplex(rng: &mut impl Rng, n: usize, floor: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| -rng.random::<f64>().max(1e-12).ln()).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| (1.0 - floor) * v / s + floor / n as f64).collect()
}

/// Columns of `features' w`.
pub fn moments(features: &DMatrix<f64>, w: &[f64]) -> DVector<f64> {
    features.tr_mul(&DVector::from_column_slice(w))
}

pub fn neg_entropy(w: &[f64]) -> f64 {
    w.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum()
}

/// Random symmetric positive definite matrix with entries of order `scale`.
pub fn spd(rng: &mut impl Rng, k: usize, scale: f64) -> DMatrix<f64> {
    let a = DMatrix::from_fn(k, k, |_, _| normal(rng));
    let mut s = &a * a.transpose() / k as f64 + DMatrix::identity(k, k) * 0.05;
    s *= scale;
    for r in 0..k {
        for c in 0..r {
            let v = 0.5 * (s[(r, c)] + s[(c, r)]);
            s[(r, c)] = v;
            s[(c, r)] = v;
        }
    }
    s
}
