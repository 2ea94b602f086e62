//! Stacked least-squares regression over `p` outcome measurements per unit.
//!
//! Each unit contributes `p` rows; row `(i, l)` has response `Y_il`, a
//! treatment block `T_i * f_l(x_i)` and a baseline block `g_l(x_i)`. The target
//! coefficient `theta` multiplies `T * 1` (the intercept of `f`).

use nalgebra::{DMatrix, DVector};

use crate::data::{Column, StudyDataset};
use crate::error::{Error, Result};
use crate::spec::{AnalysisSpec, RegressionTemplate, Term};

/// Relative singular-value cutoff below which the design is rank deficient.
pub const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct StackedDesign {
    /// `n * p` rows, unit-major: rows `i*p .. (i+1)*p` belong to unit `i`.
    pub matrix: DMatrix<f64>,
    pub response: DVector<f64>,
    pub unit_index: Vec<usize>,
    pub labels: Vec<String>,
    /// Width of the treatment block; it occupies the first columns.
    pub treatment_dim: usize,
    /// Column holding `T * 1`.
    pub theta_column: usize,
    pub units: usize,
    pub p: usize,
}

impl StackedDesign {
    pub fn rows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn baseline_dim(&self) -> usize {
        self.matrix.ncols() - self.treatment_dim
    }

    pub fn treatment_block(&self) -> DMatrix<f64> {
        self.matrix.columns(0, self.treatment_dim).into_owned()
    }

    pub fn baseline_block(&self) -> DMatrix<f64> {
        self.matrix.columns(self.treatment_dim, self.baseline_dim()).into_owned()
    }
}

/// Features evaluated for one unit and outcome slot.
enum Feature {
    Intercept,
    Numeric(Vec<f64>),
    Slots(Vec<bool>),
    Custom(Term),
}

type NamedFeatures = Vec<(String, Feature)>;

fn template_features(
    d: &StudyDataset,
    spec: &AnalysisSpec,
    template: &RegressionTemplate,
) -> Result<(NamedFeatures, NamedFeatures)> {
    let regressor = |name: &str, center: bool| -> Result<Vec<f64>> {
        let col = d
            .covariate(name)
            .and_then(Column::as_numeric)
            .ok_or_else(|| Error::MissingColumn { column: name.to_string() })?;
        if center {
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            Ok(col.iter().map(|x| x - mean).collect())
        } else {
            Ok(col.to_vec())
        }
    };
    let one = || ("1".to_string(), Feature::Intercept);
    Ok(match template {
        RegressionTemplate::Ttest => (vec![one()], vec![one()]),
        RegressionTemplate::Anova2 => {
            let mut g = vec![one()];
            // Slot 1 is the reference level; a full set of indicators next to
            // the intercept would be collinear.
            for l in 2..=spec.p() {
                let mut mask = vec![false; spec.p()];
                mask[l - 1] = true;
                g.push((format!("slot=={l}"), Feature::Slots(mask)));
            }
            (vec![one()], g)
        }
        RegressionTemplate::Ancova => {
            let mut g = vec![one()];
            for r in &spec.regressors {
                g.push((r.clone(), Feature::Numeric(regressor(r, false)?)));
            }
            (vec![one()], g)
        }
        RegressionTemplate::Adjusted => {
            let mut f = vec![one()];
            let mut g = vec![one()];
            for r in &spec.regressors {
                let x = regressor(r, true)?;
                f.push((r.clone(), Feature::Numeric(x.clone())));
                g.push((r.clone(), Feature::Numeric(x)));
            }
            (f, g)
        }
        RegressionTemplate::Custom(t) => {
            let map = |terms: &[Term]| -> Vec<(String, Feature)> {
                terms
                    .iter()
                    .map(|term| match term {
                        Term::Intercept => one(),
                        other => (other.label(), Feature::Custom(other.clone())),
                    })
                    .collect()
            };
            (map(&t.treatment_features), map(&t.baseline_features))
        }
    })
}

fn eval_term(d: &StudyDataset, term: &Term, unit: usize, slot: usize) -> Result<f64> {
    Ok(match term {
        Term::Intercept => 1.0,
        Term::Column(c) => match d.covariate(c) {
            Some(Column::Numeric(v)) => v[unit],
            _ => return Err(Error::MissingColumn { column: c.clone() }),
        },
        Term::Level { column, level } => match d.covariate(column) {
            Some(Column::Categorical { levels, codes }) => f64::from(u8::from(levels[codes[unit] as usize] == *level)),
            _ => return Err(Error::MissingColumn { column: column.clone() }),
        },
        Term::Slots(s) => f64::from(u8::from(s.contains(&(slot + 1)))),
        Term::Product(a, b) => eval_term(d, a, unit, slot)? * eval_term(d, b, unit, slot)?,
    })
}

fn eval_feature(d: &StudyDataset, f: &Feature, unit: usize, slot: usize) -> Result<f64> {
    Ok(match f {
        Feature::Intercept => 1.0,
        Feature::Numeric(v) => v[unit],
        Feature::Slots(mask) => f64::from(u8::from(mask[slot])),
        Feature::Custom(term) => eval_term(d, term, unit, slot)?,
    })
}

/// Expand the analysis template over `d`.
pub fn build_design(d: &StudyDataset, spec: &AnalysisSpec) -> Result<StackedDesign> {
    build_design_with(d, spec, &spec.regression_template)
}

/// Expand an explicit template (used for the selection statistic).
pub fn build_design_with(
    d: &StudyDataset,
    spec: &AnalysisSpec,
    template: &RegressionTemplate,
) -> Result<StackedDesign> {
    if d.p() != spec.p() {
        return Err(Error::InvalidSpec(format!("dataset has {} outcomes, spec declares {}", d.p(), spec.p())));
    }
    let (f, g) = template_features(d, spec, template)?;
    let theta_column = f
        .iter()
        .position(|(_, feat)| matches!(feat, Feature::Intercept))
        .ok_or_else(|| Error::InvalidSpec("treatment features lack an intercept".into()))?;
    let (n, p) = (d.n(), d.p());
    let k = f.len() + g.len();
    let rows = n * p;
    let mut matrix = DMatrix::zeros(rows, k);
    let mut response = DVector::zeros(rows);
    let mut unit_index = Vec::with_capacity(rows);
    let t = d.treatment();
    for (i, &ti) in t.iter().enumerate() {
        for l in 0..p {
            let r = i * p + l;
            response[r] = d.outcome(l)[i];
            unit_index.push(i);
            let ti = f64::from(ti);
            for (j, (_, feat)) in f.iter().enumerate() {
                matrix[(r, j)] = ti * eval_feature(d, feat, i, l)?;
            }
            for (j, (_, feat)) in g.iter().enumerate() {
                matrix[(r, f.len() + j)] = eval_feature(d, feat, i, l)?;
            }
        }
    }
    let labels = f.iter().map(|(name, _)| format!("T*{name}")).chain(g.iter().map(|(name, _)| name.clone())).collect();
    Ok(StackedDesign { matrix, response, unit_index, labels, treatment_dim: f.len(), theta_column, units: n, p })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub theta: f64,
    /// Treatment-block coefficients (`theta` is one of them).
    pub treatment_coefs: Vec<f64>,
    pub beta: Vec<f64>,
    /// Squared ratio of extreme singular values of the weighted design.
    pub gram_condition: f64,
    pub weighted: bool,
    /// Weighted residual sum of squares.
    pub rss: f64,
}

impl FitResult {
    pub fn coefficients(&self) -> Vec<f64> {
        self.treatment_coefs.iter().chain(&self.beta).copied().collect()
    }
}

/// QR-based solution plus what is needed for standard errors.
pub(crate) struct Solved {
    pub fit: FitResult,
    /// Upper-triangular factor of the weighted design.
    pub r: DMatrix<f64>,
    pub residuals: DVector<f64>,
}

fn check_weights(design: &StackedDesign, weights: &[f64]) -> Result<()> {
    if weights.len() != design.units {
        return Err(Error::InvalidWeights(format!("{} weights for {} units", weights.len(), design.units)));
    }
    if let Some(i) = weights.iter().position(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::InvalidWeights(format!("weight {} of unit {i} is negative or non-finite", weights[i])));
    }
    if weights.iter().sum::<f64>() <= 0.0 {
        return Err(Error::InvalidWeights("weights sum to zero".into()));
    }
    Ok(())
}

/// Weighted least squares with per-unit weights (`None` means uniform).
pub fn fit_wls(design: &StackedDesign, weights: Option<&[f64]>) -> Result<FitResult> {
    solve(design, weights).map(|s| s.fit)
}

pub(crate) fn solve(design: &StackedDesign, weights: Option<&[f64]>) -> Result<Solved> {
    let k = design.matrix.ncols();
    let mut x = design.matrix.clone();
    let mut y = design.response.clone();
    if let Some(w) = weights {
        check_weights(design, w)?;
        for r in 0..design.rows() {
            let s = w[design.unit_index[r]].sqrt();
            x.row_mut(r).scale_mut(s);
            y[r] *= s;
        }
    }
    if x.nrows() < k {
        return Err(Error::Singular { columns: design.labels.clone() });
    }
    let qr = x.clone().qr();
    let r = qr.r();
    let sv = r.clone().svd(false, true);
    let smax = sv.singular_values.max();
    let smin = sv.singular_values.min();
    if !(smax > 0.0) || smin < RANK_TOLERANCE * smax {
        return Err(Error::Singular { columns: collinear_columns(&sv, &design.labels) });
    }
    let mut qty = y.clone();
    qr.q_tr_mul(&mut qty);
    let rhs = qty.rows(0, k).into_owned();
    let coef = r.solve_upper_triangular(&rhs).ok_or_else(|| Error::Singular { columns: design.labels.clone() })?;
    let residuals = &y - &x * &coef;
    let td = design.treatment_dim;
    let fit = FitResult {
        theta: coef[design.theta_column],
        treatment_coefs: coef.rows(0, td).iter().copied().collect(),
        beta: coef.rows(td, k - td).iter().copied().collect(),
        gram_condition: (smax / smin).powi(2),
        weighted: weights.is_some(),
        rss: residuals.norm_squared(),
    };
    Ok(Solved { fit, r, residuals })
}

fn collinear_columns(svd: &nalgebra::SVD<f64, nalgebra::Dyn, nalgebra::Dyn>, labels: &[String]) -> Vec<String> {
    let Some(v_t) = &svd.v_t else { return labels.to_vec() };
    let (idx, _) =
        svd.singular_values
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |(bi, bv), (i, &v)| if v < bv { (i, v) } else { (bi, bv) });
    let null = v_t.row(idx);
    let big = null.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    labels.iter().zip(null.iter()).filter(|(_, v)| v.abs() > 0.1 * big).map(|(l, _)| l.clone()).collect()
}

/// Inverse Gram matrix `(X'WX)^{-1}` from the R factor.
pub(crate) fn gram_inverse(r: &DMatrix<f64>) -> DMatrix<f64> {
    let k = r.ncols();
    let r_inv =
        r.clone().solve_upper_triangular(&DMatrix::identity(k, k)).expect("R is nonsingular after the rank check");
    &r_inv * r_inv.transpose()
}

/// Classical homoskedastic standard error of `theta` (unweighted fit).
pub fn model_se(design: &StackedDesign) -> Result<f64> {
    let s = solve(design, None)?;
    let dof = design.rows().saturating_sub(design.matrix.ncols());
    if dof == 0 {
        return Err(Error::TooFewUnits { n: design.units, min: design.matrix.ncols() + 1 });
    }
    let sigma2 = s.fit.rss / dof as f64;
    let ginv = gram_inverse(&s.r);
    let j = design.theta_column;
    Ok((sigma2 * ginv[(j, j)]).sqrt())
}

/// Delete-one-unit jackknife standard error of `theta` (unweighted fit),
/// using the exact block-deletion update of OLS instead of `n` refits.
pub fn jackknife_se(design: &StackedDesign) -> Result<f64> {
    let s = solve(design, None)?;
    let ginv = gram_inverse(&s.r);
    let (n, p) = (design.units, design.p);
    let k = design.matrix.ncols();
    let j = design.theta_column;
    let mut reps = Vec::with_capacity(n);
    for i in 0..n {
        let xi = design.matrix.rows(i * p, p);
        let ei = s.residuals.rows(i * p, p);
        let gx = &ginv * xi.transpose(); // k x p
        let h = xi * &gx; // p x p
        let m = DMatrix::identity(p, p) - h;
        let Some(m_inv) = m.try_inverse() else {
            return Err(Error::Singular { columns: design.labels.clone() });
        };
        let delta = &gx * (m_inv * ei); // k x 1
        debug_assert_eq!(delta.nrows(), k);
        reps.push(s.fit.coefficients()[j] - delta[j]);
    }
    let mean = reps.iter().sum::<f64>() / n as f64;
    let ss: f64 = reps.iter().map(|v| (v - mean).powi(2)).sum();
    Ok(((n as f64 - 1.0) / n as f64 * ss).sqrt())
}
