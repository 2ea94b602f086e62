//! Minimum-entropy balancing weights.
//!
//! Given replication-study features `c_i` and original-study targets `b`,
//! find simplex weights `w` minimizing `sum w_i ln w_i` subject to
//! `sum w_i c_i = b`. The solution has the exponential-family form
//! `w_i = exp(gamma' c_i) / sum_j exp(gamma' c_j)`, where `gamma` minimizes the
//! smooth convex dual `G(gamma) = ln sum_j exp(gamma' c_j) - gamma' b`.
//!
//! Constraint sets built from an [`AnalysisSpec`] always contain the treatment
//! indicator together with every base feature and its treatment interaction.
//! Such sets are equivalent to matching base-feature means separately within
//! each arm with arm masses pinned, so the solver works arm by arm on
//! problems a third of the size and assembles the joint dual afterwards.

use nalgebra::{DMatrix, DVector};

use crate::data::{Column, StudyDataset};
use crate::error::{Error, Result};
use crate::spec::{AnalysisSpec, ColumnSpec, Moment};

#[derive(Debug, Clone, PartialEq)]
enum BaseFeature {
    Power { column: String, power: i32 },
    Level { column: String, code: u32 },
}

impl BaseFeature {
    fn label(&self, levels: Option<&[String]>) -> String {
        match self {
            BaseFeature::Power { column, power: 1 } => column.clone(),
            BaseFeature::Power { column, power } => format!("{column}^{power}"),
            BaseFeature::Level { column, code } => {
                let level = levels.map(|l| l[*code as usize].clone()).unwrap_or_else(|| code.to_string());
                format!("{column}=={level}")
            }
        }
    }

    fn eval(&self, d: &StudyDataset, unit: usize) -> Result<f64> {
        match self {
            BaseFeature::Power { column, power } => match d.column(column) {
                Some(Column::Numeric(v)) => Ok(v[unit].powi(*power)),
                _ => Err(Error::MissingColumn { column: column.clone() }),
            },
            BaseFeature::Level { column, code } => match d.column(column) {
                Some(Column::Categorical { codes, .. }) => Ok(f64::from(u8::from(codes[unit] == *code))),
                _ => Err(Error::MissingColumn { column: column.clone() }),
            },
        }
    }
}

fn base_features(cs: &ColumnSpec) -> Vec<BaseFeature> {
    let column = cs.column.clone();
    match cs.moment {
        Moment::Mean => vec![BaseFeature::Power { column, power: 1 }],
        Moment::MeanAndSecondMoment => {
            vec![BaseFeature::Power { column: column.clone(), power: 1 }, BaseFeature::Power { column, power: 2 }]
        }
        // The first declared level is the reference and gets no indicator.
        Moment::OneHot => {
            let n = cs.levels.as_ref().map_or(0, Vec::len) as u32;
            (1..n).map(|code| BaseFeature::Level { column: column.clone(), code }).collect()
        }
    }
}

/// Feature map `c(unit) = (T, phi, T*phi, psi, T*psi)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    blocks: Vec<Vec<BaseFeature>>,
    labels: Vec<String>,
    /// `(base column, interaction column)` for every base feature.
    pairs: Vec<(usize, usize)>,
}

impl FeatureMap {
    fn new(spec: &AnalysisSpec, blocks: Vec<Vec<ColumnSpec>>) -> Self {
        let mut labels = vec!["T".to_string()];
        let mut pairs = Vec::new();
        let mut feature_blocks = Vec::new();
        for block in blocks {
            let base: Vec<BaseFeature> = block.iter().flat_map(base_features).collect();
            let start = labels.len();
            for f in &base {
                let col = match f {
                    BaseFeature::Power { column, .. } | BaseFeature::Level { column, .. } => column,
                };
                labels.push(f.label(spec.levels_of(col)));
            }
            for (j, _) in base.iter().enumerate() {
                labels.push(format!("T*{}", labels[start + j]));
                pairs.push((start + j, start + base.len() + j));
            }
            feature_blocks.push(base);
        }
        Self { blocks: feature_blocks, labels, pairs }
    }

    pub fn dim(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Features of every unit of `d`, one row per unit.
    pub fn matrix(&self, d: &StudyDataset) -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(d.n(), self.dim());
        let t = d.treatment();
        for i in 0..d.n() {
            let ti = f64::from(t[i]);
            m[(i, 0)] = ti;
            let mut col = 1;
            for block in &self.blocks {
                let k = block.len();
                for (j, f) in block.iter().enumerate() {
                    let v = f.eval(d, i)?;
                    m[(i, col + j)] = v;
                    m[(i, col + k + j)] = ti * v;
                }
                col += 2 * k;
            }
        }
        Ok(m)
    }

    /// Column means of the features over `d`.
    pub fn targets(&self, d: &StudyDataset) -> Result<DVector<f64>> {
        let m = self.matrix(d)?;
        Ok(column_means(&m))
    }
}

fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows() as f64;
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum() / n))
}

#[derive(Debug, Clone)]
struct ArmLayout {
    treatment: Vec<u8>,
    pairs: Vec<(usize, usize)>,
}

/// Linear moment constraints `E_w[c] = b` on the replication study.
#[derive(Debug, Clone)]
pub struct MomentConstraintSet {
    pub labels: Vec<String>,
    /// One row of features per replication unit.
    pub features: DMatrix<f64>,
    pub targets: DVector<f64>,
    map: Option<FeatureMap>,
    arms: Option<ArmLayout>,
}

impl MomentConstraintSet {
    /// Arbitrary constraints; normalization `sum w = 1` is implicit.
    pub fn new(labels: Vec<String>, features: DMatrix<f64>, targets: DVector<f64>) -> Result<Self> {
        if labels.is_empty() || labels.len() != features.ncols() || targets.len() != features.ncols() {
            return Err(Error::InvalidArgument("constraint dimensions disagree".into()));
        }
        if features.nrows() == 0 {
            return Err(Error::TooFewUnits { n: 0, min: 1 });
        }
        if targets.iter().any(|v| !v.is_finite()) || features.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite constraint entries".into()));
        }
        Ok(Self { labels, features, targets, map: None, arms: None })
    }

    fn from_map(map: FeatureMap, d1: &StudyDataset, d2: &StudyDataset) -> Result<Self> {
        let features = map.matrix(d2)?;
        let targets = map.targets(d1)?;
        let arms = ArmLayout { treatment: d2.treatment().to_vec(), pairs: map.pairs.clone() };
        Ok(Self { labels: map.labels.clone(), features, targets, map: Some(map), arms: Some(arms) })
    }

    pub fn dim(&self) -> usize {
        self.labels.len()
    }

    pub fn feature_map(&self) -> Option<&FeatureMap> {
        self.map.as_ref()
    }

    /// Same features, new targets (e.g. recomputed on a resampled original study).
    pub fn with_targets(&self, targets: DVector<f64>) -> Self {
        assert_eq!(targets.len(), self.dim());
        Self { targets, ..self.clone() }
    }

    /// Drop one replication unit; targets are unchanged.
    pub fn without_unit(&self, unit: usize) -> Self {
        let arms = self.arms.as_ref().map(|a| {
            let mut treatment = a.treatment.clone();
            treatment.remove(unit);
            ArmLayout { treatment, pairs: a.pairs.clone() }
        });
        Self {
            labels: self.labels.clone(),
            features: self.features.clone().remove_row(unit),
            targets: self.targets.clone(),
            map: self.map.clone(),
            arms,
        }
    }
}

fn check_levels(d1: &StudyDataset, d2: &StudyDataset, cols: &[ColumnSpec]) -> Result<()> {
    for cs in cols.iter().filter(|c| c.moment == Moment::OneHot) {
        if let (Some(Column::Categorical { levels, codes: c1 }), Some(Column::Categorical { codes: c2, .. })) =
            (d1.column(&cs.column), d2.column(&cs.column))
        {
            for (code, level) in levels.iter().enumerate() {
                let code = code as u32;
                if c1.contains(&code) && !c2.contains(&code) {
                    return Err(Error::Infeasible { label: format!("{}=={level}", cs.column) });
                }
            }
        }
    }
    Ok(())
}

/// Constraints matching `(T, phi, T*phi)` of the replication study to the
/// original study.
pub fn build_covariate_constraints(
    d1: &StudyDataset,
    d2: &StudyDataset,
    spec: &AnalysisSpec,
) -> Result<MomentConstraintSet> {
    check_levels(d1, d2, &spec.covariate_moments)?;
    let map = FeatureMap::new(spec, vec![spec.covariate_moments.clone()]);
    MomentConstraintSet::from_map(map, d1, d2)
}

/// Covariate constraints with mediator features `(psi, T*psi)` appended.
pub fn build_mediator_constraints(
    d1: &StudyDataset,
    d2: &StudyDataset,
    spec: &AnalysisSpec,
) -> Result<MomentConstraintSet> {
    check_levels(d1, d2, &spec.covariate_moments)?;
    check_levels(d1, d2, &spec.mediator_moments)?;
    let mut blocks = vec![spec.covariate_moments.clone()];
    if !spec.mediator_moments.is_empty() {
        blocks.push(spec.mediator_moments.clone());
    }
    let map = FeatureMap::new(spec, blocks);
    MomentConstraintSet::from_map(map, d1, d2)
}

/// Newton solver controls.
#[derive(Debug, Clone, Copy)]
pub struct SolverSettings {
    pub max_iterations: usize,
    pub max_halvings: usize,
    /// Stop when the dual gradient (standardized scale) is this small.
    pub gradient_tol: f64,
    pub ridge: f64,
    /// Certified bound on the standardized balance residual.
    pub balance_tol: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self { max_iterations: 200, max_halvings: 30, gradient_tol: 1e-10, ridge: 1e-12, balance_tol: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightSolution {
    /// Nonnegative, summing to one.
    pub weights: Vec<f64>,
    /// Dual coefficients on the original feature scale.
    pub dual: Vec<f64>,
    pub entropy: f64,
    /// Max absolute standardized balance residual.
    pub balance_residual: f64,
    pub effective_sample_size: f64,
    pub iterations: usize,
    /// Dual objective after each accepted Newton step (per arm, concatenated,
    /// when the problem was split by arm).
    pub objective_trace: Vec<f64>,
    pub labels: Vec<String>,
}

pub fn solve_entropy_weights(constraints: &MomentConstraintSet) -> Result<WeightSolution> {
    solve_with(constraints, None, &SolverSettings::default())
}

/// Warm-started solve; `dual` is a previous solution's `dual` vector.
pub fn solve_entropy_weights_from(constraints: &MomentConstraintSet, dual: &[f64]) -> Result<WeightSolution> {
    solve_with(constraints, Some(dual), &SolverSettings::default())
}

pub fn solve_with(
    constraints: &MomentConstraintSet,
    warm: Option<&[f64]>,
    settings: &SolverSettings,
) -> Result<WeightSolution> {
    if let Some(w) = warm {
        if w.len() != constraints.dim() {
            return Err(Error::InvalidArgument("warm start has wrong dimension".into()));
        }
    }
    let (weights, dual, iterations, trace) = match &constraints.arms {
        Some(arms) => solve_by_arm(constraints, arms, warm, settings)?,
        None => solve_joint(constraints, warm, settings)?,
    };
    let standardizer = Standardizer::new(&constraints.features);
    let balance_residual = standardizer.residual(&constraints.features, &weights, &constraints.targets);
    if !(balance_residual <= settings.balance_tol) {
        let label = standardizer.worst(&constraints.features, &weights, &constraints.targets);
        return Err(Error::Infeasible { label: constraints.labels[label].clone() });
    }
    let entropy = weights.iter().filter(|&&w| w > 0.0).map(|&w| w * w.ln()).sum();
    let effective_sample_size = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
    Ok(WeightSolution {
        weights,
        dual,
        entropy,
        balance_residual,
        effective_sample_size,
        iterations,
        objective_trace: trace,
        labels: constraints.labels.clone(),
    })
}

/// Column centering and scaling on the replication sample.
struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    fn new(x: &DMatrix<f64>) -> Self {
        let n = x.nrows() as f64;
        let mut mean = Vec::with_capacity(x.ncols());
        let mut scale = Vec::with_capacity(x.ncols());
        for c in x.column_iter() {
            let m = c.sum() / n;
            let v = c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
            mean.push(m);
            scale.push(v.sqrt());
        }
        Self { mean, scale }
    }

    fn is_constant(&self, j: usize) -> bool {
        self.scale[j] <= 1e-12 * self.mean[j].abs().max(1.0)
    }

    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = x.clone();
        for (j, mut c) in z.column_iter_mut().enumerate() {
            let (m, s) = (self.mean[j], self.scale[j]);
            c.apply(|v| *v = (*v - m) / s);
        }
        z
    }

    fn apply_target(&self, b: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(b.len(), b.iter().enumerate().map(|(j, v)| (v - self.mean[j]) / self.scale[j]))
    }

    fn violations(&self, x: &DMatrix<f64>, w: &[f64], b: &DVector<f64>) -> Vec<f64> {
        let wv = DVector::from_column_slice(w);
        let achieved = x.tr_mul(&wv);
        (0..b.len())
            .map(|j| {
                let s = if self.scale[j] > 0.0 { self.scale[j] } else { 1.0 };
                ((achieved[j] - b[j]) / s).abs()
            })
            .collect()
    }

    fn residual(&self, x: &DMatrix<f64>, w: &[f64], b: &DVector<f64>) -> f64 {
        self.violations(x, w, b).into_iter().fold(0.0, |m, v| if v.is_nan() { f64::INFINITY } else { m.max(v) })
    }

    fn worst(&self, x: &DMatrix<f64>, w: &[f64], b: &DVector<f64>) -> usize {
        let v = self.violations(x, w, b);
        (0..v.len()).max_by(|&a, &c| v[a].total_cmp(&v[c])).unwrap_or(0)
    }
}

type Solved = (Vec<f64>, Vec<f64>, usize, Vec<f64>);

fn solve_joint(c: &MomentConstraintSet, warm: Option<&[f64]>, settings: &SolverSettings) -> Result<Solved> {
    let st = Standardizer::new(&c.features);
    for j in 0..c.dim() {
        if st.is_constant(j) {
            let attainable = (c.targets[j] - st.mean[j]).abs() <= 1e-12 * st.mean[j].abs().max(1.0);
            return Err(if attainable {
                Error::Collinear { label: c.labels[j].clone() }
            } else {
                Error::Infeasible { label: c.labels[j].clone() }
            });
        }
    }
    let z = st.apply(&c.features);
    let zb = st.apply_target(&c.targets);
    check_hull(&z, &zb, |j| c.labels[j].clone())?;
    let start = match warm {
        Some(g) => DVector::from_iterator(g.len(), g.iter().zip(&st.scale).map(|(g, s)| g * s)),
        None => DVector::zeros(c.dim()),
    };
    let out = newton(&z, &zb, start, settings, |j| c.labels[j].clone())?;
    let dual: Vec<f64> = out.lambda.iter().zip(&st.scale).map(|(l, s)| l / s).collect();
    Ok((out.weights, dual, out.iterations, out.trace))
}

/// Every standardized target must lie strictly inside the observed range of
/// its feature; otherwise positive weights cannot reach it.
fn check_hull(z: &DMatrix<f64>, zb: &DVector<f64>, label: impl Fn(usize) -> String) -> Result<()> {
    for (j, col) in z.column_iter().enumerate() {
        let lo = col.min();
        let hi = col.max();
        if !(zb[j] > lo && zb[j] < hi) {
            return Err(Error::Infeasible { label: label(j) });
        }
    }
    Ok(())
}

fn solve_by_arm(
    c: &MomentConstraintSet,
    arms: &ArmLayout,
    warm: Option<&[f64]>,
    settings: &SolverSettings,
) -> Result<Solved> {
    let treated_mass = c.targets[0];
    if !(treated_mass > 0.0 && treated_mass < 1.0) {
        return Err(Error::Infeasible { label: c.labels[0].clone() });
    }
    let systems = [ArmSystem::new(c, arms, 0)?, ArmSystem::new(c, arms, 1)?];
    let mut iterations = 0;
    let mut trace = Vec::new();
    let mut solved = Vec::with_capacity(2);
    for sys in &systems {
        let targets = sys.targets(&c.targets);
        let start = warm.map(|g| sys.start_from_dual(g));
        let out = sys.solve(&targets, start, true, settings)?;
        iterations += out.iterations;
        trace.extend(out.trace.iter().copied());
        solved.push(out);
    }
    let weights = assemble_weights(&systems, &solved, treated_mass, c.features.nrows());
    let dual = joint_dual(c.dim(), &arms.pairs, &solved, treated_mass);
    Ok((weights, dual, iterations, trace))
}

fn assemble_weights(systems: &[ArmSystem; 2], solved: &[ArmSolve], treated_mass: f64, n: usize) -> Vec<f64> {
    let mut weights = vec![0.0; n];
    for (sys, out) in systems.iter().zip(solved) {
        let mass = if sys.arm == 1 { treated_mass } else { 1.0 - treated_mass };
        for (r, &i) in sys.rows.iter().enumerate() {
            weights[i] = mass * out.weights[r];
        }
    }
    weights
}

/// Joint dual from the per-arm duals: base coefficients come from the control
/// arm, interactions are the treated-minus-control differences, and the
/// treatment coefficient pins the arm masses.
fn joint_dual(dim: usize, pairs: &[(usize, usize)], solved: &[ArmSolve], treated_mass: f64) -> Vec<f64> {
    let mut dual = vec![0.0; dim];
    for (k, &(base, inter)) in pairs.iter().enumerate() {
        dual[base] = solved[0].lambda[k];
        dual[inter] = solved[1].lambda[k] - solved[0].lambda[k];
    }
    dual[0] = (treated_mass / (1.0 - treated_mass)).ln() + solved[0].log_partition - solved[1].log_partition;
    dual
}

/// One arm of an arm-separable problem: standardized, whitened base features
/// of the arm's units.
#[derive(Debug, Clone)]
struct ArmSystem {
    arm: u8,
    rows: Vec<usize>,
    /// Base features of the arm's units on the original scale.
    raw: DMatrix<f64>,
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// Base features that vary within the arm.
    active: Vec<usize>,
    /// Cholesky factor of the standardized active features' second moments.
    whitener: Option<DMatrix<f64>>,
    /// Features passed to Newton: standardized, then whitened.
    z: DMatrix<f64>,
    labels: Vec<String>,
    pairs: Vec<(usize, usize)>,
}

struct ArmSolve {
    /// Dual per base feature on the original scale (0 for inactive ones).
    lambda: Vec<f64>,
    /// Dual in solver coordinates, for warm starts.
    lambda_solver: DVector<f64>,
    /// Within-arm weights summing to one.
    weights: Vec<f64>,
    log_partition: f64,
    iterations: usize,
    trace: Vec<f64>,
}

impl ArmSystem {
    fn new(c: &MomentConstraintSet, arms: &ArmLayout, arm: u8) -> Result<Self> {
        let n = c.features.nrows();
        let rows: Vec<usize> = (0..n).filter(|&i| arms.treatment[i] == arm).collect();
        if rows.is_empty() {
            return Err(Error::Infeasible { label: c.labels[0].clone() });
        }
        let labels =
            arms.pairs.iter().map(|&(base, inter)| c.labels[if arm == 1 { inter } else { base }].clone()).collect();
        let raw = DMatrix::from_fn(rows.len(), arms.pairs.len(), |r, k| c.features[(rows[r], arms.pairs[k].0)]);
        let st = Standardizer::new(&raw);
        let active: Vec<usize> = (0..arms.pairs.len()).filter(|&k| !st.is_constant(k)).collect();
        let standardized = DMatrix::from_fn(rows.len(), active.len(), |r, a| {
            let k = active[a];
            (raw[(r, k)] - st.mean[k]) / st.scale[k]
        });
        let (whitener, z) = match whiten(&standardized) {
            Some((l, z)) => (Some(l), z),
            None => (None, standardized),
        };
        Ok(Self {
            arm,
            rows,
            raw,
            mean: st.mean,
            scale: st.scale,
            active,
            whitener,
            z,
            labels,
            pairs: arms.pairs.clone(),
        })
    }

    /// Arm-conditional base-feature targets from joint targets.
    fn targets(&self, joint: &DVector<f64>) -> Vec<f64> {
        let mass = joint[0];
        self.pairs
            .iter()
            .map(
                |&(base, inter)| {
                    if self.arm == 1 {
                        joint[inter] / mass
                    } else {
                        (joint[base] - joint[inter]) / (1.0 - mass)
                    }
                },
            )
            .collect()
    }

    /// Solver-coordinate start from a joint dual on the original scale.
    fn start_from_dual(&self, g: &[f64]) -> DVector<f64> {
        let std = DVector::from_iterator(
            self.active.len(),
            self.active.iter().map(|&k| {
                let (base, inter) = self.pairs[k];
                let orig = if self.arm == 1 { g[base] + g[inter] } else { g[base] };
                orig * self.scale[k]
            }),
        );
        match &self.whitener {
            Some(l) => l.tr_mul(&std),
            None => std,
        }
    }

    fn solver_targets(&self, targets: &[f64]) -> Result<DVector<f64>> {
        for (k, &t) in targets.iter().enumerate() {
            if !self.active.contains(&k) && (t - self.mean[k]).abs() > 1e-12 * self.mean[k].abs().max(1.0) {
                return Err(Error::Infeasible { label: self.labels[k].clone() });
            }
        }
        let zb = DVector::from_iterator(
            self.active.len(),
            self.active.iter().map(|&k| (targets[k] - self.mean[k]) / self.scale[k]),
        );
        Ok(match &self.whitener {
            Some(l) => l.solve_lower_triangular(&zb).expect("triangular factor is nonsingular"),
            None => zb,
        })
    }

    fn check_hull(&self, targets: &[f64]) -> Result<()> {
        for &k in &self.active {
            let col = self.raw.column(k);
            if !(targets[k] > col.min() && targets[k] < col.max()) {
                return Err(Error::Infeasible { label: self.labels[k].clone() });
            }
        }
        Ok(())
    }

    fn solve(
        &self,
        targets: &[f64],
        start: Option<DVector<f64>>,
        hull: bool,
        settings: &SolverSettings,
    ) -> Result<ArmSolve> {
        let zb = self.solver_targets(targets)?;
        if hull {
            self.check_hull(targets)?;
        }
        let m = self.rows.len();
        if self.active.is_empty() {
            return Ok(ArmSolve {
                lambda: vec![0.0; self.labels.len()],
                lambda_solver: DVector::zeros(0),
                weights: vec![1.0 / m as f64; m],
                log_partition: (m as f64).ln(),
                iterations: 0,
                trace: Vec::new(),
            });
        }
        let start = start.unwrap_or_else(|| DVector::zeros(self.active.len()));
        let out = self.newton(&self.z, &zb, start, settings)?;
        Ok(self.finish(out))
    }

    fn newton(
        &self,
        z: &DMatrix<f64>,
        zb: &DVector<f64>,
        start: DVector<f64>,
        settings: &SolverSettings,
    ) -> Result<NewtonOutput> {
        let label = |a: usize| self.labels[self.active[a]].clone();
        match &self.whitener {
            Some(l) => damped_newton(z, zb, start, settings, |g| label((l * g).iamax())),
            None => damped_newton(z, zb, start, settings, |g| label(g.iamax())),
        }
    }

    fn finish(&self, out: NewtonOutput) -> ArmSolve {
        let std = match &self.whitener {
            Some(l) => l.tr_solve_lower_triangular(&out.lambda).expect("triangular factor is nonsingular"),
            None => out.lambda.clone(),
        };
        let mut lambda = vec![0.0; self.labels.len()];
        for (a, &k) in self.active.iter().enumerate() {
            lambda[k] = std[a] / self.scale[k];
        }
        // ln sum_{i in arm} exp(lambda' c_i) on the original scale.
        let scores = &self.raw * DVector::from_column_slice(&lambda);
        let m = scores.max();
        let log_partition = m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln();
        ArmSolve {
            lambda,
            lambda_solver: out.lambda,
            weights: out.weights,
            log_partition,
            iterations: out.iterations,
            trace: out.trace,
        }
    }
}

/// Factorized arm systems of a solved arm-separable problem, reused by
/// leave-one-out re-solves.
#[derive(Debug, Clone)]
pub(crate) struct ArmFactors {
    n: usize,
    treated_mass: f64,
    systems: [ArmSystem; 2],
    targets: [Vec<f64>; 2],
    starts: [DVector<f64>; 2],
    weights: [Vec<f64>; 2],
    settings: SolverSettings,
}

impl ArmFactors {
    /// `None` for sets that are not arm separable.
    pub(crate) fn new(c: &MomentConstraintSet) -> Option<Result<Self>> {
        let arms = c.arms.as_ref()?;
        Some(Self::build(c, arms))
    }

    fn build(c: &MomentConstraintSet, arms: &ArmLayout) -> Result<Self> {
        let settings = SolverSettings::default();
        let systems = [ArmSystem::new(c, arms, 0)?, ArmSystem::new(c, arms, 1)?];
        let targets = [systems[0].targets(&c.targets), systems[1].targets(&c.targets)];
        let s0 = systems[0].solve(&targets[0], None, true, &settings)?;
        let s1 = systems[1].solve(&targets[1], None, true, &settings)?;
        Ok(Self {
            n: c.features.nrows(),
            treated_mass: c.targets[0],
            starts: [s0.lambda_solver, s1.lambda_solver],
            weights: [s0.weights, s1.weights],
            systems,
            targets,
            settings,
        })
    }

    /// Weights for new joint targets on the same replication units.
    pub(crate) fn solve_targets(&self, joint: &DVector<f64>) -> Result<Vec<f64>> {
        let mass = joint[0];
        if !(mass > 0.0 && mass < 1.0) {
            return Err(Error::Infeasible { label: "T".into() });
        }
        let mut weights = vec![0.0; self.n];
        for (a, sys) in self.systems.iter().enumerate() {
            let targets = sys.targets(joint);
            let within = if targets == self.targets[a] {
                self.weights[a].clone()
            } else {
                sys.solve(&targets, Some(self.starts[a].clone()), false, &self.settings)?.weights
            };
            let arm_mass = if sys.arm == 1 { mass } else { 1.0 - mass };
            for (r, &i) in sys.rows.iter().enumerate() {
                weights[i] = arm_mass * within[r];
            }
        }
        Ok(weights)
    }

    /// Weights on the replication units other than `unit`, original targets.
    pub(crate) fn solve_without(&self, unit: usize) -> Result<Vec<f64>> {
        let mut weights = vec![0.0; self.n];
        for (a, sys) in self.systems.iter().enumerate() {
            let arm_mass = if sys.arm == 1 { self.treated_mass } else { 1.0 - self.treated_mass };
            match sys.rows.binary_search(&unit) {
                Err(_) => {
                    for (r, &i) in sys.rows.iter().enumerate() {
                        weights[i] = arm_mass * self.weights[a][r];
                    }
                }
                Ok(pos) => {
                    if sys.rows.len() == 1 {
                        return Err(Error::Infeasible {
                            label: sys.labels.first().cloned().unwrap_or_else(|| "T".into()),
                        });
                    }
                    let within = if sys.active.is_empty() {
                        vec![1.0 / (sys.rows.len() - 1) as f64; sys.rows.len() - 1]
                    } else {
                        let z = sys.z.clone().remove_row(pos);
                        let zb = sys.solver_targets(&self.targets[a])?;
                        sys.newton(&z, &zb, self.starts[a].clone(), &self.settings)?.weights
                    };
                    let mut r = 0;
                    for &i in &sys.rows {
                        if i != unit {
                            weights[i] = arm_mass * within[r];
                            r += 1;
                        }
                    }
                }
            }
        }
        weights.remove(unit);
        Ok(weights)
    }
}

/// Cholesky whitening `z L^{-T}` with `L L' = z'z / n`; `None` when the
/// columns are (numerically) collinear.
fn whiten(z: &DMatrix<f64>) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
    if z.ncols() == 0 {
        return None;
    }
    let gram = z.tr_mul(z) / z.nrows() as f64;
    let l = gram.cholesky()?.unpack();
    let zw_t = l.solve_lower_triangular(&z.transpose())?;
    Some((l, zw_t.transpose()))
}

struct NewtonOutput {
    lambda: DVector<f64>,
    weights: Vec<f64>,
    iterations: usize,
    trace: Vec<f64>,
}

/// Softmax weights and dual objective at `lambda`.
fn evaluate(z: &DMatrix<f64>, zb: &DVector<f64>, lambda: &DVector<f64>) -> (f64, DVector<f64>) {
    let s = z * lambda;
    let m = s.max();
    let mut w = s.map(|v| (v - m).exp());
    let total = w.sum();
    w /= total;
    (m + total.ln() - lambda.dot(zb), w)
}

/// Newton on whitened features; see [`whiten`].
fn newton(
    z: &DMatrix<f64>,
    zb: &DVector<f64>,
    lambda: DVector<f64>,
    settings: &SolverSettings,
    label: impl Fn(usize) -> String,
) -> Result<NewtonOutput> {
    let Some((l, zw)) = whiten(z) else {
        return damped_newton(z, zb, lambda, settings, |g| label(g.iamax()));
    };
    let zbw = l.solve_lower_triangular(zb).expect("triangular factor is nonsingular");
    let start = l.tr_mul(&lambda);
    let mut out = damped_newton(&zw, &zbw, start, settings, |g| label((&l * g).iamax()))?;
    out.lambda = l.tr_solve_lower_triangular(&out.lambda).expect("triangular factor is nonsingular");
    Ok(out)
}

/// `sum_i w_i z_i z_i' - mean mean'`.
fn weighted_covariance(z: &DMatrix<f64>, w: &DVector<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    let d = z.ncols();
    let mut out = DMatrix::zeros(d, d);
    let mut scaled = DVector::zeros(z.nrows());
    for a in 0..d {
        scaled.zip_zip_apply(&z.column(a), w, |s, x, wi| *s = x * wi);
        for b in 0..=a {
            let v = scaled.dot(&z.column(b)) - mean[a] * mean[b];
            out[(a, b)] = v;
            out[(b, a)] = v;
        }
    }
    out
}

/// Damped Newton on the dual `G(lambda) = ln sum exp(z_i' lambda) - lambda' zb`.
fn damped_newton(
    z: &DMatrix<f64>,
    zb: &DVector<f64>,
    mut lambda: DVector<f64>,
    settings: &SolverSettings,
    worst: impl Fn(&DVector<f64>) -> String,
) -> Result<NewtonOutput> {
    let d = z.ncols();
    let (mut g_val, mut w) = evaluate(z, zb, &lambda);
    let mut trace = vec![g_val];
    for it in 0..settings.max_iterations {
        let mean = z.tr_mul(&w);
        let grad = &mean - zb;
        if grad.amax() <= settings.gradient_tol {
            return Ok(NewtonOutput { lambda, weights: w.as_slice().to_vec(), iterations: it, trace });
        }
        let mut hess = weighted_covariance(z, &w, &mean);
        let chol = match hess.clone().cholesky() {
            Some(c) => c,
            None => {
                for j in 0..d {
                    hess[(j, j)] += settings.ridge;
                }
                hess.cholesky().ok_or_else(|| Error::Collinear { label: worst(&grad) })?
            }
        };
        let step = -chol.solve(&grad);
        let slope = grad.dot(&step);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=settings.max_halvings {
            let trial = &lambda + t * &step;
            let (val, wt) = evaluate(z, zb, &trial);
            // Allow for roundoff in the objective once decreases fall below it.
            if val.is_finite() && val <= g_val + 1e-4 * t * slope + 8.0 * f64::EPSILON * g_val.abs() {
                accepted = Some((trial, val, wt));
                break;
            }
            t *= 0.5;
        }
        match accepted {
            Some((l, val, wt)) => {
                lambda = l;
                g_val = val;
                w = wt;
                trace.push(val);
            }
            None => {
                // No descent possible: either already at the numerical optimum
                // or the dual is unbounded below (infeasible targets).
                if grad.amax() <= settings.balance_tol * 1e-2 {
                    return Ok(NewtonOutput { lambda, weights: w.as_slice().to_vec(), iterations: it, trace });
                }
                return Err(Error::Infeasible { label: worst(&grad) });
            }
        }
    }
    let grad = z.tr_mul(&w) - zb;
    if grad.amax() <= settings.gradient_tol {
        return Ok(NewtonOutput { lambda, weights: w.as_slice().to_vec(), iterations: settings.max_iterations, trace });
    }
    Err(Error::Infeasible { label: worst(&grad) })
}
