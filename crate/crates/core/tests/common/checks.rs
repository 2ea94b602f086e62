//! Per-instance checks. Each returns `Ok(true)` when the instance was solved
//! and satisfied the property, `Ok(false)` when it was skipped (for example
//! an infeasible balancing problem), and `Err` with a description otherwise.
#![allow(dead_code, clippy::neg_cmp_op_on_partial_ord, clippy::redundant_guards)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use shiftdiag_core::balance::solve_entropy_weights;
use shiftdiag_core::decomp::{effect, COVARIATE, MEDIATION, OBSERVED};
use shiftdiag_core::inference::{SELECTION_Z, THETA_ORIGINAL};
use shiftdiag_core::{
    adjust, build_covariate_constraints, build_design, build_mediator_constraints, estimate_components, fit_wls,
    AnalysisSpec, Error, EstimatorVector, JackknifeCovariance, MomentConstraintSet, RegressionTemplate, Role,
    SelectionModel, StudyDataset, WeightSolution,
};

use super::{moments, neg_entropy, normal, pair, rng, simplex, spd, spec_for, study};

pub type Outcome = Result<bool, String>;

pub const ADDITIVITY_TOL: f64 = 1e-10;
pub const BALANCE_TOL: f64 = 1e-8;
pub const ENTROPY_SLACK: f64 = 1e-6;
pub const DUAL_TOL: f64 = 1e-10;
pub const REGRESSION_TOL: f64 = 1e-8;

fn numerical_skip(e: &Error) -> bool {
    matches!(e, Error::Infeasible { .. } | Error::Collinear { .. } | Error::Singular { .. })
}

/// Unadjusted components sum to the observed discrepancy.
pub fn additivity(seed: u64) -> Outcome {
    let (d1, d2, spec) = pair(seed);
    let dec = match estimate_components(&d1, &d2, &spec) {
        Ok(d) => d,
        Err(e) if numerical_skip(&e) => return Ok(false),
        Err(e) => return Err(format!("seed {seed}: {e}")),
    };
    let sum: f64 = dec.components().iter().map(|(_, v)| v).sum();
    let gap = (sum - dec.observed).abs();
    if gap <= ADDITIVITY_TOL {
        Ok(true)
    } else {
        Err(format!("seed {seed}: components sum to {sum}, observed {}", dec.observed))
    }
}

/// Estimator vector `(z, observed, covariate, [mediation,] theta_original)`
/// with a random positive definite covariance and a selected `z`.
pub fn selected_vector(
    seed: u64,
    mediation: bool,
    alpha0: f64,
) -> (EstimatorVector, JackknifeCovariance, SelectionModel) {
    let mut r = rng(seed);
    let mut labels = vec![SELECTION_Z, OBSERVED, COVARIATE];
    if mediation {
        labels.push(MEDIATION);
    }
    labels.push(THETA_ORIGINAL);
    let k = labels.len();
    let scale = r.random_range(0.01..1.0);
    let sigma = spd(&mut r, k, scale);
    let threshold = shiftdiag_core::normal::quantile(1.0 - alpha0 / 2.0);
    let mut values: Vec<f64> = (0..k).map(|_| 2.0 * normal(&mut r)).collect();
    let sign = if r.random::<bool>() { 1.0 } else { -1.0 };
    values[0] = sign * (threshold + r.random_range(0.01..3.0));
    let vec = EstimatorVector { labels: labels.iter().map(|s| s.to_string()).collect(), values };
    let cov = JackknifeCovariance {
        sigma,
        original_part: DMatrix::zeros(k, k),
        replication_part: DMatrix::zeros(k, k),
        failures: 0,
        replicates: 0,
    };
    let model = SelectionModel::new(alpha0, vec.values[0]).expect("z beyond threshold");
    (vec, cov, model)
}

/// Selection-adjusted components sum to the observed discrepancy exactly:
/// the floating-point sum in component order equals it whenever some double
/// residual makes that possible, and otherwise no neighbouring residual gets
/// closer.
pub fn adjusted_additivity(seed: u64) -> Outcome {
    let mediation = seed % 2 == 0;
    let (vec, cov, model) = selected_vector(seed, mediation, 0.05);
    let adj = match adjust(&vec, &cov, &model, 0.9) {
        Ok(a) => a,
        Err(e) => return Err(format!("seed {seed}: {e}")),
    };
    if adj.additivity_gap() == 0.0 {
        return Ok(true);
    }
    let parts = adj.components();
    let head: f64 = parts[..parts.len() - 1].iter().map(|(_, v)| v).sum();
    let gap = |r: f64| (head + r - adj.observed).abs();
    let best = gap(adj.residual);
    if gap(adj.residual.next_up()) < best
        || gap(adj.residual.next_down()) < best
        || best > 4.0 * f64::EPSILON * head.abs().max(adj.observed.abs())
    {
        return Err(format!("seed {seed}: adjusted gap {:e} is not the closest attainable", adj.additivity_gap()));
    }
    Ok(true)
}

/// Exact-sum status of an adjusted decomposition: `Some(true)` when the sum
/// is bit-exact, `Some(false)` when representability prevents it.
pub fn adjusted_bit_exact(seed: u64) -> Option<bool> {
    let (vec, cov, model) = selected_vector(seed, seed % 2 == 0, 0.05);
    adjust(&vec, &cov, &model, 0.9).ok().map(|a| a.additivity_gap() == 0.0)
}

/// Largest `|X'w - b| / sd(X_j)` over constraints, recomputed from scratch.
pub fn standardized_residual(c: &MomentConstraintSet, w: &[f64]) -> f64 {
    let n = c.features.nrows() as f64;
    let achieved = moments(&c.features, w);
    let mut worst = 0.0f64;
    for j in 0..c.dim() {
        let col = c.features.column(j);
        let mean = col.sum() / n;
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let s = if sd > 0.0 { sd } else { 1.0 };
        worst = worst.max((achieved[j] - c.targets[j]).abs() / s);
    }
    worst
}

/// `max_i |w_i - softmax(X gamma)_i| / max_i w_i`.
pub fn dual_gap(c: &MomentConstraintSet, sol: &WeightSolution) -> f64 {
    let gamma = DVector::from_column_slice(&sol.dual);
    let eta = &c.features * gamma;
    let top = eta.max();
    let e: Vec<f64> = eta.iter().map(|v| (v - top).exp()).collect();
    let z: f64 = e.iter().sum();
    let wmax = sol.weights.iter().fold(0.0f64, |m, &v| m.max(v));
    sol.weights.iter().zip(&e).map(|(w, e)| (w - e / z).abs()).fold(0.0, f64::max) / wmax
}

fn check_solution(seed: u64, what: &str, c: &MomentConstraintSet, sol: &WeightSolution) -> Result<(), String> {
    let sum: f64 = sol.weights.iter().sum();
    if (sum - 1.0).abs() > 1e-12 || sol.weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(format!("seed {seed} {what}: weights not on the simplex (sum {sum})"));
    }
    let res = standardized_residual(c, &sol.weights);
    if !(res <= BALANCE_TOL) || !(sol.balance_residual <= BALANCE_TOL) {
        return Err(format!("seed {seed} {what}: balance residual {res:e} (reported {:e})", sol.balance_residual));
    }
    let gap = dual_gap(c, sol);
    if !(gap <= DUAL_TOL) {
        return Err(format!("seed {seed} {what}: dual-primal gap {gap:e}"));
    }
    Ok(())
}

/// Balance certificate and dual form on the covariate and mediator problems
/// of a random pair.
pub fn balancing(seed: u64) -> Outcome {
    let (d1, d2, spec) = pair(seed);
    let mut solved = false;
    for (what, c) in [
        ("covariate", build_covariate_constraints(&d1, &d2, &spec)),
        ("mediator", build_mediator_constraints(&d1, &d2, &spec)),
    ] {
        let c = c.map_err(|e| format!("seed {seed}: {e}"))?;
        match solve_entropy_weights(&c) {
            Ok(sol) => {
                check_solution(seed, what, &c, &sol)?;
                solved = true;
            }
            Err(e) if numerical_skip(&e) => {}
            Err(e) => return Err(format!("seed {seed} {what}: {e}")),
        }
    }
    Ok(solved)
}

/// Orthonormal basis of `{v : 1'v = 0, X'v = 0}`.
fn null_space(x: &DMatrix<f64>) -> Vec<DVector<f64>> {
    let n = x.nrows();
    let mut a = DMatrix::zeros(x.ncols() + 1, n);
    for i in 0..n {
        a[(0, i)] = 1.0;
        for j in 0..x.ncols() {
            a[(j + 1, i)] = x[(i, j)];
        }
    }
    // Right singular vectors for zero singular values, via the square system.
    let svd = (a.transpose() * &a).symmetric_eigen();
    let top = svd.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    (0..n)
        .filter(|&k| svd.eigenvalues[k].abs() <= 1e-10 * top)
        .map(|k| svd.eigenvectors.column(k).into_owned())
        .collect()
}

/// Feasible points other than `w0`: moves along the null space that stay
/// strictly positive.
fn feasible_points(rng: &mut impl Rng, x: &DMatrix<f64>, w0: &[f64], count: usize) -> Vec<Vec<f64>> {
    let basis = null_space(x);
    let mut out = vec![w0.to_vec()];
    if basis.is_empty() {
        return out;
    }
    for _ in 0..count {
        let mut v = DVector::zeros(w0.len());
        for b in &basis {
            v += b * normal(rng);
        }
        // Largest step keeping every weight positive, then a random fraction.
        let mut step = f64::INFINITY;
        for (wi, vi) in w0.iter().zip(v.iter()) {
            if *vi < 0.0 {
                step = step.min(-wi / vi);
            }
        }
        if !step.is_finite() {
            continue;
        }
        let t = rng.random_range(0.0..0.95) * step;
        out.push(w0.iter().zip(v.iter()).map(|(w, v)| w + t * v).collect());
    }
    out
}

/// On `n2 <= 12` instances with targets `X'w0`, the solution's negative
/// entropy is no larger than that of `w0` or other feasible points.
pub fn entropy_oracle(seed: u64) -> Outcome {
    let mut r = rng(seed);
    let n2 = r.random_range(6..=12);
    let c = if r.random::<bool>() {
        // Generic constraints.
        let k = r.random_range(1..=3).min(n2 - 2);
        let x = DMatrix::from_fn(n2, k, |_, _| normal(&mut r));
        let labels = (0..k).map(|j| format!("c{j}")).collect();
        MomentConstraintSet::new(labels, x, DVector::zeros(k)).map_err(|e| e.to_string())?
    } else {
        // Arm-separable constraints from a spec.
        let d1 = study(&mut r, Role::Original, 20, 1, 0, 1, 0.2);
        let d2 = study(&mut r, Role::Replication, n2, 1, 0, 1, 0.0);
        let spec = spec_for(1, 0, 1, RegressionTemplate::Ttest);
        build_covariate_constraints(&d1, &d2, &spec).map_err(|e| e.to_string())?
    };
    let w0 = simplex(&mut r, n2, 0.2);
    let c = c.with_targets(moments(&c.features, &w0));
    let sol = match solve_entropy_weights(&c) {
        Ok(s) => s,
        Err(e) if matches!(e, Error::Collinear { .. }) => return Ok(false),
        Err(e) => return Err(format!("seed {seed}: feasible instance failed: {e}")),
    };
    check_solution(seed, "oracle", &c, &sol)?;
    let ours = neg_entropy(&sol.weights);
    for p in feasible_points(&mut r, &c.features, &w0, 20) {
        let theirs = neg_entropy(&p);
        if ours > theirs + ENTROPY_SLACK {
            return Err(format!("seed {seed}: entropy {ours} above feasible point {theirs}"));
        }
    }
    Ok(true)
}

/// Gaussian elimination with partial pivoting.
pub fn gauss_solve(mut a: DMatrix<f64>, mut b: DVector<f64>) -> Option<DVector<f64>> {
    let n = a.nrows();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[(i, col)].abs().total_cmp(&a[(j, col)].abs()))?;
        if a[(piv, col)] == 0.0 {
            return None;
        }
        a.swap_rows(col, piv);
        b.swap_rows(col, piv);
        for row in col + 1..n {
            let f = a[(row, col)] / a[(col, col)];
            for k in col..n {
                a[(row, k)] -= f * a[(col, k)];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = DVector::zeros(n);
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[(row, k)] * x[k]).sum();
        x[row] = (b[row] - s) / a[(row, row)];
    }
    Some(x)
}

/// Weighted least-squares coefficients from the normal equations.
pub fn normal_equations(x: &DMatrix<f64>, y: &DVector<f64>, row_weights: &[f64]) -> Option<DVector<f64>> {
    let k = x.ncols();
    let mut xtx = DMatrix::zeros(k, k);
    let mut xty = DVector::zeros(k);
    for r in 0..x.nrows() {
        let w = row_weights[r];
        for a in 0..k {
            xty[a] += w * x[(r, a)] * y[r];
            for b in 0..k {
                xtx[(a, b)] += w * x[(r, a)] * x[(r, b)];
            }
        }
    }
    gauss_solve(xtx, xty)
}

/// Regression coefficients match the normal-equations oracle.
pub fn regression(seed: u64) -> Outcome {
    let mut r = rng(seed);
    let n = r.random_range(12..=50);
    let p = r.random_range(1..=5);
    let k = r.random_range(1..=3);
    let template = match r.random_range(0..4) {
        0 => RegressionTemplate::Ttest,
        1 => RegressionTemplate::Anova2,
        2 => RegressionTemplate::Ancova,
        _ => RegressionTemplate::Adjusted,
    };
    let d = study(&mut r, Role::Original, n, k, 0, p, 0.0);
    let spec = spec_for(k, 0, p, template.clone());
    let weights: Option<Vec<f64>> =
        if r.random::<bool>() { Some((0..n).map(|_| r.random_range(0.1..2.0)).collect()) } else { None };
    let design = build_design(&d, &spec).map_err(|e| format!("seed {seed}: {e}"))?;
    let fit = match fit_wls(&design, weights.as_deref()) {
        Ok(f) => f,
        Err(e) if numerical_skip(&e) => return Ok(false),
        Err(e) => return Err(format!("seed {seed}: {e}")),
    };
    let rw: Vec<f64> = design.unit_index.iter().map(|&i| weights.as_ref().map_or(1.0, |w| w[i])).collect();
    let oracle = normal_equations(&design.matrix, &design.response, &rw)
        .ok_or_else(|| format!("seed {seed}: oracle singular"))?;
    let ours = fit.coefficients();
    for (j, (a, b)) in ours.iter().zip(oracle.iter()).enumerate() {
        if (a - b).abs() > REGRESSION_TOL * b.abs().max(1.0) {
            return Err(format!("seed {seed}: {template:?} coefficient {} is {a}, oracle {b}", design.labels[j]));
        }
    }
    if (fit.theta - oracle[design.theta_column]).abs() > REGRESSION_TOL * oracle[design.theta_column].abs().max(1.0) {
        return Err(format!("seed {seed}: theta {} vs {}", fit.theta, oracle[design.theta_column]));
    }
    Ok(true)
}

/// The t-test effect is the weighted difference of arm means, bit for bit.
pub fn ttest_exact(seed: u64) -> Outcome {
    let mut r = rng(seed);
    let n = r.random_range(4..=60);
    let d: StudyDataset = study(&mut r, Role::Replication, n, 1, 0, 1, 0.0);
    let spec = AnalysisSpec::ttest("y1", "t");
    let w: Vec<f64> = simplex(&mut r, n, 0.0);
    let weights = if r.random::<bool>() { Some(w.as_slice()) } else { None };
    let ours = effect(&d, &spec, weights).map_err(|e| format!("seed {seed}: {e}"))?;
    let (mut s1, mut m1, mut s0, mut m0) = (0.0, 0.0, 0.0, 0.0);
    for (i, (&t, &y)) in d.treatment().iter().zip(d.outcome(0)).enumerate() {
        let wi = weights.map_or(1.0, |w| w[i]);
        if t == 1 {
            s1 += wi * y;
            m1 += wi;
        } else {
            s0 += wi * y;
            m0 += wi;
        }
    }
    let expected = s1 / m1 - s0 / m0;
    if ours != expected {
        return Err(format!("seed {seed}: {ours} != {expected}"));
    }
    let fitted =
        fit_wls(&build_design(&d, &spec).map_err(|e| e.to_string())?, weights).map_err(|e| e.to_string())?.theta;
    if (fitted - expected).abs() > REGRESSION_TOL * expected.abs().max(1.0) {
        return Err(format!("seed {seed}: least squares {fitted} vs difference of means {expected}"));
    }
    Ok(true)
}
