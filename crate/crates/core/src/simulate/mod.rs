//! Simulation harness: data-generating processes, replication sizing and
//! coverage experiments.

pub mod coverage;
pub mod dgp;
pub mod oracle;

use rand::Rng;

pub use coverage::{run_coverage, ComponentCoverage, CoverageReport, Method};
pub use dgp::{analysis_spec, DgpConfig, Family, Population, Sampling, Setting, Variant};
pub use oracle::{truth, Truth};

use crate::data::StudyDataset;
use crate::error::{Error, Result};
use crate::normal;
use crate::regress::{build_design, fit_wls, model_se};
use crate::spec::AnalysisSpec;

/// Rejection-sampling budget for selected original studies.
pub const ATTEMPT_CAP: usize = 100_000;

/// Smallest replication size with the requested power against
/// `shrink * |theta_hat|`, treating `se_hat * sqrt(n1)` as the per-unit
/// dispersion.
pub fn power_n2(theta_hat: f64, se_hat: f64, n1: usize, shrink: f64, power: f64, alpha: f64) -> Result<usize> {
    if theta_hat == 0.0 || !theta_hat.is_finite() {
        return Err(Error::ZeroEffect);
    }
    if !(se_hat > 0.0) || !(shrink > 0.0) || !(power > 0.0 && power < 1.0) || !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument("power_n2 needs se > 0, shrink > 0, power and alpha in (0, 1)".into()));
    }
    let kappa = se_hat * (n1 as f64).sqrt();
    let z = normal::quantile(1.0 - alpha / 2.0) + normal::quantile(power);
    let n = (kappa * z / (shrink * theta_hat.abs())).powi(2).ceil();
    if !n.is_finite() || n > usize::MAX as f64 {
        return Ok(usize::MAX);
    }
    Ok((n as usize).max(2))
}

/// Treatment coefficient and its classical standard error.
pub fn effect_and_se(d: &StudyDataset, spec: &AnalysisSpec) -> Result<(f64, f64)> {
    let design = build_design(d, spec)?;
    Ok((fit_wls(&design, None)?.theta, model_se(&design)?))
}

/// One simulated original/replication pair.
#[derive(Debug, Clone)]
pub struct SimulatedPair {
    pub original: StudyDataset,
    pub replication: StudyDataset,
    pub truth: Truth,
    pub n2: usize,
    /// Original studies drawn before one was accepted (1 without selection).
    pub attempts: usize,
}

fn replication_size(config: &DgpConfig, d1: &StudyDataset, spec: &AnalysisSpec) -> Result<usize> {
    match config.sampling {
        Sampling::FixedN2 { n2 } => Ok(n2),
        Sampling::PowerCalculated { shrink, power, alpha } => {
            let (theta, se) = effect_and_se(d1, spec)?;
            power_n2(theta, se, config.n1, shrink, power, alpha)
        }
    }
}

/// Draw the original study, size and draw the replication, for replicate `rep`.
pub fn generate_pair(config: &DgpConfig, rep: u64) -> Result<SimulatedPair> {
    config.validate()?;
    let spec = analysis_spec(config.setting);
    let mut rng = config.rng(rep);
    let (original, attempts) = if config.setting.family == Family::Sel {
        draw_selected(config, &spec, &mut rng)?
    } else {
        (dgp::draw_study(config, Population::Original, config.n1, &mut rng)?, 1)
    };
    let n2 = replication_size(config, &original, &spec)?;
    let replication = dgp::draw_study(config, Population::Replication, n2, &mut rng)?;
    let truth = truth(config.setting, config.nu)?;
    Ok(SimulatedPair { original, replication, truth, n2, attempts })
}

/// Original study and its power-calculated replication size, without drawing
/// the replication.
pub fn original_and_n2(config: &DgpConfig, rep: u64) -> Result<(StudyDataset, usize)> {
    config.validate()?;
    let spec = analysis_spec(config.setting);
    let mut rng = config.rng(rep);
    let original = if config.setting.family == Family::Sel {
        draw_selected(config, &spec, &mut rng)?.0
    } else {
        dgp::draw_study(config, Population::Original, config.n1, &mut rng)?
    };
    let n2 = replication_size(config, &original, &spec)?;
    Ok((original, n2))
}

/// Is `|tau / se|` beyond the two-sided 5% critical value?
pub fn is_significant(d: &StudyDataset, spec: &AnalysisSpec, alpha0: f64) -> Result<bool> {
    let (theta, se) = effect_and_se(d, spec)?;
    Ok((theta / se).abs() > normal::quantile(1.0 - alpha0 / 2.0))
}

fn draw_selected<R: Rng + ?Sized>(
    config: &DgpConfig,
    spec: &AnalysisSpec,
    rng: &mut R,
) -> Result<(StudyDataset, usize)> {
    let alpha0 = spec.selection.as_ref().map_or(0.05, |s| s.alpha0);
    for attempt in 1..=ATTEMPT_CAP {
        let d = dgp::draw_study(config, Population::Original, config.n1, rng)?;
        if is_significant(&d, spec, alpha0)? {
            return Ok((d, attempt));
        }
    }
    Err(Error::AttemptCap { attempts: ATTEMPT_CAP })
}

/// Rejection-sample a significant original study for a `Sel` setting and
/// size its replication. Returns the study, `n2` and the attempt count.
pub fn generate_selected_original(config: &DgpConfig, rep: u64) -> Result<(StudyDataset, usize, usize)> {
    if config.setting.family != Family::Sel {
        return Err(Error::InvalidArgument("selection sampling needs a sel_* setting".into()));
    }
    config.validate()?;
    let spec = analysis_spec(config.setting);
    let mut rng = config.rng(rep);
    let (d1, attempts) = draw_selected(config, &spec, &mut rng)?;
    let n2 = replication_size(config, &d1, &spec)?;
    Ok((d1, n2, attempts))
}
