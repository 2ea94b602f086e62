//! Empirical coverage of the decomposition intervals.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dgp::{analysis_spec, DgpConfig, Family, Sampling};
use super::{generate_pair, Truth};
use crate::decomp::{COVARIATE, MEDIATION, OBSERVED};
use crate::error::{Error, Result};
use crate::inference::{jackknife_covariance, normal_ci, JackknifeResult};
use crate::selectadj::{adjust, SelectionModel, DISCREPANCY};

/// Largest tolerated share of failed simulation replicates.
pub const MAX_FAILURE_RATE: f64 = 0.02;

/// Components whose coverage is reported, in report order.
pub const COMPONENTS: [&str; 4] = ["covariate", "mediator", "residual", "observed"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Standard,
    PowerCalculated,
    SelectedUnadjusted,
    SelectedAdjusted,
}

impl Method {
    /// Sampling scheme the method implies for `config`.
    pub fn configure(self, config: &DgpConfig) -> Result<DgpConfig> {
        let mut c = *config;
        match self {
            Method::Standard => {
                if let Sampling::PowerCalculated { .. } = c.sampling {
                    c.sampling = Sampling::FixedN2 { n2: c.n1 };
                }
            }
            Method::PowerCalculated => {
                if let Sampling::FixedN2 { .. } = c.sampling {
                    c.sampling = Sampling::PowerCalculated { shrink: 0.9, power: 0.9, alpha: 0.05 };
                }
            }
            Method::SelectedUnadjusted | Method::SelectedAdjusted => {
                if c.setting.family != Family::Sel {
                    return Err(Error::InvalidArgument(format!("method {self} needs a sel_* setting")));
                }
            }
        }
        Ok(c)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Standard => "standard",
            Method::PowerCalculated => "power_calculated",
            Method::SelectedUnadjusted => "selected_unadjusted",
            Method::SelectedAdjusted => "selected_adjusted",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "standard" => Ok(Method::Standard),
            "power" | "power_calculated" => Ok(Method::PowerCalculated),
            "selected_unadjusted" | "unadjusted" => Ok(Method::SelectedUnadjusted),
            "selected_adjusted" | "adjusted" => Ok(Method::SelectedAdjusted),
            _ => Err(Error::InvalidArgument(format!("unknown method `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentCoverage {
    pub component: String,
    pub coverage: f64,
    /// Binomial standard deviation of the coverage estimate.
    pub sd: f64,
    pub replicates: usize,
    pub mean_width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub config: DgpConfig,
    pub method: Method,
    pub level: f64,
    pub requested: usize,
    pub failures: usize,
    /// Replicates whose mediator balancing was infeasible; their residual
    /// interval is scored against mediation plus residual truth.
    #[serde(default)]
    pub without_mediator: usize,
    pub mean_n2: f64,
    pub components: Vec<ComponentCoverage>,
}

impl CoverageReport {
    pub fn coverage(&self, component: &str) -> Option<f64> {
        self.components.iter().find(|c| c.component == component).map(|c| c.coverage)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub const CSV_HEADER: &'static str = "setting,sigma,nu,method,component,coverage,sd,mean_n2";

    pub fn csv_rows(&self) -> Vec<String> {
        self.components
            .iter()
            .map(|c| {
                format!(
                    "{},{},{},{},{},{},{},{}",
                    self.config.setting,
                    self.config.sigma,
                    self.config.nu,
                    self.method,
                    c.component,
                    c.coverage,
                    c.sd,
                    self.mean_n2
                )
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for row in self.csv_rows() {
            out.push_str(&row);
            out.push('\n');
        }
        out
    }
}

/// Per-replicate intervals for each reported component.
type Intervals = [(f64, f64); 4];

struct Replicate {
    n2: usize,
    truth: Truth,
    has_mediator: bool,
    intervals: Vec<Intervals>,
}

fn unadjusted_intervals(res: &JackknifeResult, level: f64) -> Intervals {
    let v = &res.estimates;
    let cov = &res.covariance;
    let k = v.dim();
    let ci = |label: &str| {
        let i = v.index(label).expect("component present");
        normal_ci(v.values[i], cov.sigma[(i, i)], level)
    };
    let mut resid = vec![0.0; k];
    resid[v.index(OBSERVED).expect("observed")] = 1.0;
    resid[v.index(COVARIATE).expect("covariate")] -= 1.0;
    if let Some(m) = v.index(MEDIATION) {
        resid[m] -= 1.0;
    }
    let r_est: f64 = resid.iter().zip(&v.values).map(|(a, b)| a * b).sum();
    let mediator = if v.index(MEDIATION).is_some() { ci(MEDIATION) } else { (f64::NAN, f64::NAN) };
    [ci(COVARIATE), mediator, normal_ci(r_est, cov.combination_variance(&resid), level), ci(OBSERVED)]
}

fn adjusted_intervals(res: &JackknifeResult, alpha0: f64, level: f64) -> Result<Intervals> {
    let z = res
        .estimates
        .get(crate::inference::SELECTION_Z)
        .ok_or_else(|| Error::InvalidArgument("no selection statistic".into()))?;
    let model = SelectionModel::new(alpha0, z)?;
    let adj = adjust(&res.estimates, &res.covariance, &model, level)?;
    let get = |c: &str| adj.interval(c).unwrap_or((f64::NAN, f64::NAN));
    Ok([get(COVARIATE), get(MEDIATION), get(crate::decomp::RESIDUAL), get(DISCREPANCY)])
}

fn run_replicate(config: &DgpConfig, methods: &[Method], rep: u64, level: f64) -> Result<Replicate> {
    let pair = generate_pair(config, rep)?;
    let spec = analysis_spec(config.setting);
    let res = jackknife_covariance(&pair.original, &pair.replication, &spec)?;
    let mut intervals = Vec::with_capacity(methods.len());
    for m in methods {
        intervals.push(match m {
            Method::SelectedAdjusted => {
                let alpha0 = spec.selection.as_ref().map_or(0.05, |s| s.alpha0);
                adjusted_intervals(&res, alpha0, level)?
            }
            _ => unadjusted_intervals(&res, level),
        });
    }
    let has_mediator = res.decomposition.mediation_shift.is_some();
    Ok(Replicate { n2: pair.n2, truth: pair.truth, has_mediator, intervals })
}

/// Coverage of every method in `methods` on shared replicates; all methods
/// must imply the same sampling scheme.
pub fn run_coverage_methods(
    config: &DgpConfig,
    methods: &[Method],
    reps: usize,
    level: f64,
) -> Result<Vec<CoverageReport>> {
    if reps == 0 {
        return Err(Error::InvalidArgument("reps must be at least 1".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(format!("level = {level} outside (0, 1)")));
    }
    let first = methods.first().ok_or_else(|| Error::InvalidArgument("no methods".into()))?;
    let config = first.configure(config)?;
    for m in methods {
        if m.configure(&config)? != config {
            return Err(Error::InvalidArgument("methods imply different sampling schemes".into()));
        }
    }
    let results: Vec<Result<Replicate>> =
        (0..reps as u64).into_par_iter().map(|rep| run_replicate(&config, methods, rep, level)).collect();
    let failures = results.iter().filter(|r| r.is_err()).count();
    if failures as f64 > MAX_FAILURE_RATE * reps as f64 {
        return Err(Error::ReplicateFailures { failed: failures, total: reps });
    }
    let ok: Vec<Replicate> = results.into_iter().filter_map(|r| r.ok()).collect();
    let mean_n2 = ok.iter().map(|r| r.n2 as f64).sum::<f64>() / ok.len().max(1) as f64;
    let without_mediator = ok.iter().filter(|r| !r.has_mediator).count();
    let mut reports = Vec::with_capacity(methods.len());
    for (mi, &method) in methods.iter().enumerate() {
        let mut components = Vec::new();
        for (ci, name) in COMPONENTS.iter().enumerate() {
            let mut covered = 0usize;
            let mut count = 0usize;
            let mut width = 0.0;
            for r in &ok {
                let (lo, hi) = r.intervals[mi][ci];
                if lo.is_nan() || hi.is_nan() {
                    continue;
                }
                let target = match ci {
                    0 => r.truth.covariate_shift,
                    1 => r.truth.mediation_shift,
                    2 if r.has_mediator => r.truth.residual,
                    2 => r.truth.residual + r.truth.mediation_shift,
                    _ => r.truth.observed,
                };
                count += 1;
                width += hi - lo;
                if lo <= target && target <= hi {
                    covered += 1;
                }
            }
            if count == 0 {
                continue;
            }
            let coverage = covered as f64 / count as f64;
            components.push(ComponentCoverage {
                component: name.to_string(),
                coverage,
                sd: (coverage * (1.0 - coverage) / count as f64).sqrt(),
                replicates: count,
                mean_width: width / count as f64,
            });
        }
        reports.push(CoverageReport {
            config,
            method,
            level,
            requested: reps,
            failures,
            without_mediator,
            mean_n2,
            components,
        });
    }
    Ok(reports)
}

pub fn run_coverage(config: &DgpConfig, method: Method, reps: usize, level: f64) -> Result<CoverageReport> {
    Ok(run_coverage_methods(config, &[method], reps, level)?.remove(0))
}
