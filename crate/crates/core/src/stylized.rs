//! Two stylized replication pairs with known decompositions.
//!
//! A single covariate `age` and a binary mediator `m` (extra reading).
//!
//! * Example 1: the populations differ in age and in how strongly treatment
//!   moves the mediator; `Y ~ N(age + 2 m (22 - age), 1)` in both. The
//!   discrepancy is explained by covariate and mediation shift.
//! * Example 2: `Y ~ N(10 + m (1 + 5 u), 1)` with a hidden moderator `u` that
//!   is always 1 in the original population and age dependent in the
//!   replication population. Most of the discrepancy is residual.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Column, Role, StudyDataset};
use crate::error::Result;
use crate::regress::{build_design, fit_wls};
use crate::simulate::oracle::Truth;
use crate::spec::{AnalysisSpec, ColumnSpec, Moment, RegressionTemplate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Example {
    ObservedShift,
    HiddenModerator,
}

/// Source population of each conditional distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Coupling {
    pub x_from_original: bool,
    pub m_from_original: bool,
    pub y_from_original: bool,
}

impl Coupling {
    pub const ORIGINAL: Coupling = Coupling { x_from_original: true, m_from_original: true, y_from_original: true };
    pub const REPLICATION: Coupling =
        Coupling { x_from_original: false, m_from_original: false, y_from_original: false };
    /// Original covariates, everything else from the replication population.
    pub const COVARIATES: Coupling = Coupling { x_from_original: true, m_from_original: false, y_from_original: false };
    /// Original covariates and mediators, replication outcome model.
    pub const MEDIATORS: Coupling = Coupling { x_from_original: true, m_from_original: true, y_from_original: false };
}

/// Analysis used for both examples: ANCOVA on age, balancing age mean and
/// variance per arm and the full `(T, m)` joint.
pub fn example_spec() -> AnalysisSpec {
    let mut spec = AnalysisSpec::ttest("y", "t");
    spec.regression_template = RegressionTemplate::Ancova;
    spec.regressors = vec!["age".into()];
    spec.covariate_moments = vec![ColumnSpec::numeric("age", Moment::MeanAndSecondMoment)];
    spec.mediator_moments = vec![ColumnSpec::categorical("m", &["0", "1"])];
    spec
}

fn logistic(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// `n` units from a coupled population.
pub fn draw<R: Rng + ?Sized>(example: Example, coupling: Coupling, n: usize, rng: &mut R) -> Result<StudyDataset> {
    let mut age = Vec::with_capacity(n);
    let mut t = Vec::with_capacity(n);
    let mut m = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let z: f64 = rng.sample(StandardNormal);
        let x = if coupling.x_from_original { 19.0 + 0.5 * z } else { 21.0 + 1.5 * z };
        let ti = u8::from(rng.random::<bool>());
        let lift = if coupling.m_from_original { 0.5 } else { 0.25 };
        let mi = u8::from(rng.random::<f64>() < 0.1 + lift * f64::from(ti));
        let v: f64 = rng.random();
        let u = if coupling.y_from_original { 1.0 } else { f64::from(u8::from(v < logistic(x - 21.0))) };
        let eps: f64 = rng.sample(StandardNormal);
        let mf = f64::from(mi);
        let yi = match example {
            Example::ObservedShift => x + 2.0 * mf * (22.0 - x) + eps,
            Example::HiddenModerator => 10.0 + mf * (1.0 + 5.0 * u) + eps,
        };
        age.push(x);
        t.push(ti);
        m.push(u32::from(mi));
        y.push(yi);
    }
    let mut cov = BTreeMap::new();
    cov.insert("age".to_string(), Column::Numeric(age));
    let mut med = BTreeMap::new();
    med.insert("m".to_string(), Column::Categorical { levels: vec!["0".into(), "1".into()], codes: m });
    let role = if coupling == Coupling::ORIGINAL { Role::Original } else { Role::Replication };
    StudyDataset::new(role, t, vec![y], cov, med)
}

/// Original and replication studies of size `n` each from `seed`.
pub fn example_pair(example: Example, n: usize, seed: u64) -> Result<(StudyDataset, StudyDataset)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d1 = draw(example, Coupling::ORIGINAL, n, &mut rng)?;
    let d2 = draw(example, Coupling::REPLICATION, n, &mut rng)?;
    Ok((d1, d2))
}

/// Template coefficient on each coupled population, from `n` draws apiece.
/// Every coupling reuses the same stream, so shared conditionals cancel.
pub fn example_oracle(example: Example, n: usize, seed: u64) -> Result<Truth> {
    let spec = example_spec();
    let theta = |c: Coupling| -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = draw(example, c, n, &mut rng)?;
        Ok(fit_wls(&build_design(&d, &spec)?, None)?.theta)
    };
    let p = theta(Coupling::ORIGINAL)?;
    let cov = theta(Coupling::COVARIATES)?;
    let med = theta(Coupling::MEDIATORS)?;
    let q = theta(Coupling::REPLICATION)?;
    Ok(Truth { observed: p - q, covariate_shift: cov - q, mediation_shift: med - cov, residual: p - med })
}
