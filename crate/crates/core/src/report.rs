//! End-to-end analysis of one original/replication pair and its JSON
//! result document.

use serde::{Deserialize, Serialize};

use crate::balance::WeightSolution;
use crate::data::{check_overlap, StudyDataset};
use crate::decomp::{COVARIATE, MEDIATION, OBSERVED, RESIDUAL, SAMPLING};
use crate::error::{Error, Result};
use crate::inference::{jackknife_covariance, normal_ci, JackknifeResult, SELECTION_Z};
use crate::selectadj::{adjust, AdjustedDecomposition, OptimizerReport, SelectionModel, DISCREPANCY};
use crate::spec::AnalysisSpec;

pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub spec_hash: String,
    pub engine_version: String,
    pub seed: Option<u64>,
    pub level: f64,
    pub n_original: usize,
    pub n_replication: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection_alpha0: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentRow {
    pub name: String,
    pub estimate: f64,
    /// Absent for selection-adjusted rows, whose intervals are not Wald.
    pub se: Option<f64>,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightDiagnostics {
    pub labels: Vec<String>,
    pub balance_residual: f64,
    pub effective_sample_size: f64,
    pub entropy: f64,
    pub iterations: usize,
}

impl From<&WeightSolution> for WeightDiagnostics {
    fn from(w: &WeightSolution) -> Self {
        Self {
            labels: w.labels.clone(),
            balance_residual: w.balance_residual,
            effective_sample_size: w.effective_sample_size,
            entropy: w.entropy,
            iterations: w.iterations,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceDiagnostics {
    pub covariate: Option<WeightDiagnostics>,
    pub mediator: Option<WeightDiagnostics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Effects {
    pub theta_original: f64,
    pub theta_replication: f64,
    pub theta_w: f64,
    pub theta_omega: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjustedSection {
    pub selection_z: f64,
    pub z_threshold: f64,
    pub discrepancy: ComponentRow,
    pub decomposition: Vec<ComponentRow>,
    pub optimizer: OptimizerReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultDocument {
    pub metadata: Metadata,
    pub observed: ComponentRow,
    pub effects: Effects,
    pub decomposition: Vec<ComponentRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adjusted: Option<AdjustedSection>,
    pub balance: BalanceDiagnostics,
    pub warnings: Vec<String>,
}

impl ResultDocument {
    /// Pretty JSON; floats use the shortest representation that parses back
    /// to the same value.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("document serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidArgument(format!("malformed result document: {e}")))
    }

    pub const PLOT_HEADER: &'static str = "component,estimate,ci_lo,ci_hi,adjusted";

    /// Bar-chart rows: unadjusted components, then adjusted ones.
    pub fn plot_csv(&self) -> String {
        let mut out = String::from(Self::PLOT_HEADER);
        out.push('\n');
        let mut emit = |rows: &[ComponentRow], adjusted: bool| {
            for r in rows {
                out.push_str(&format!("{},{},{},{},{}\n", r.name, r.estimate, r.ci_lo, r.ci_hi, adjusted));
            }
        };
        emit(&self.decomposition, false);
        if let Some(a) = &self.adjusted {
            emit(&a.decomposition, true);
        }
        out
    }

    pub fn component(&self, name: &str) -> Option<&ComponentRow> {
        self.decomposition.iter().find(|r| r.name == name)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnalyzeOptions {
    /// Overrides `spec.ci_level`.
    pub level: Option<f64>,
    /// Overrides (or adds) the selection threshold of `spec.selection`.
    pub selection_alpha0: Option<f64>,
    /// Recorded in the metadata; the pipeline itself is deterministic.
    pub seed: Option<u64>,
}

/// Spec after applying the command-line style overrides.
pub fn effective_spec(spec: &AnalysisSpec, options: &AnalyzeOptions) -> Result<AnalysisSpec> {
    let mut spec = spec.clone();
    if let Some(level) = options.level {
        spec.ci_level = level;
    }
    if let Some(alpha0) = options.selection_alpha0 {
        match &mut spec.selection {
            Some(sel) => sel.alpha0 = alpha0,
            None => {
                spec.selection = Some(crate::spec::SelectionSpec { alpha0, template: None, se: Default::default() })
            }
        }
    }
    spec.validate()?;
    Ok(spec)
}

fn wald_rows(res: &JackknifeResult, level: f64) -> (ComponentRow, Vec<ComponentRow>) {
    let v = &res.estimates;
    let cov = &res.covariance;
    let row = |name: &str, estimate: f64, variance: f64| {
        let (ci_lo, ci_hi) = normal_ci(estimate, variance, level);
        ComponentRow { name: name.to_string(), estimate, se: Some(variance.max(0.0).sqrt()), ci_lo, ci_hi }
    };
    let var = |label: &str| {
        let i = v.index(label).expect("component present");
        cov.sigma[(i, i)]
    };
    let observed = row(OBSERVED, v.get(OBSERVED).expect("observed"), var(OBSERVED));
    let mut rows =
        vec![row(SAMPLING, 0.0, var(OBSERVED)), row(COVARIATE, v.get(COVARIATE).expect("covariate"), var(COVARIATE))];
    let mut resid = vec![0.0; v.dim()];
    resid[v.index(OBSERVED).expect("observed")] = 1.0;
    resid[v.index(COVARIATE).expect("covariate")] = -1.0;
    if let Some(m) = v.index(MEDIATION) {
        rows.push(row(MEDIATION, v.values[m], cov.sigma[(m, m)]));
        resid[m] = -1.0;
    }
    rows.push(row(RESIDUAL, res.decomposition.residual, cov.combination_variance(&resid)));
    (observed, rows)
}

fn adjusted_rows(adj: &AdjustedDecomposition) -> (ComponentRow, Vec<ComponentRow>) {
    let row = |name: &str, estimate: f64| {
        let (ci_lo, ci_hi) = adj.interval(name).expect("interval present");
        ComponentRow { name: name.to_string(), estimate, se: None, ci_lo, ci_hi }
    };
    let discrepancy = row(DISCREPANCY, adj.discrepancy);
    let mut rows = vec![row(SAMPLING, adj.sampling_variability), row(COVARIATE, adj.covariate_shift)];
    if let Some(m) = adj.mediation_shift {
        rows.push(row(MEDIATION, m));
    }
    rows.push(row(RESIDUAL, adj.residual));
    (discrepancy, rows)
}

/// Decompose, estimate the jackknife covariance, and selection-adjust when
/// the spec asks for it.
pub fn analyze(
    d1: &StudyDataset,
    d2: &StudyDataset,
    spec: &AnalysisSpec,
    options: &AnalyzeOptions,
) -> Result<ResultDocument> {
    let spec = effective_spec(spec, options)?;
    let level = spec.ci_level;
    let overlap = check_overlap(d1, d2, &spec);
    let res = jackknife_covariance(d1, d2, &spec)?;
    let (observed, decomposition) = wald_rows(&res, level);

    let adjusted = match &spec.selection {
        None => None,
        Some(sel) => {
            let z = res.estimates.get(SELECTION_Z).expect("selection statistic present");
            let model = SelectionModel::new(sel.alpha0, z)?;
            let adj = adjust(&res.estimates, &res.covariance, &model, level)?;
            let (discrepancy, rows) = adjusted_rows(&adj);
            Some(AdjustedSection {
                selection_z: z,
                z_threshold: model.z_threshold,
                discrepancy,
                decomposition: rows,
                optimizer: adj.optimizer.clone(),
            })
        }
    };

    let dec = &res.decomposition;
    let mut warnings = overlap.warnings.clone();
    warnings.extend(dec.warnings.iter().cloned());
    if res.covariance.failures > 0 {
        warnings.push(format!(
            "{} of {} leave-one-out replicates failed and were dropped",
            res.covariance.failures, res.covariance.replicates
        ));
    }
    Ok(ResultDocument {
        metadata: Metadata {
            spec_hash: spec.hash(),
            engine_version: ENGINE_VERSION.to_string(),
            seed: options.seed,
            level,
            n_original: d1.n(),
            n_replication: d2.n(),
            selection_alpha0: spec.selection.as_ref().map(|s| s.alpha0),
        },
        observed,
        effects: Effects {
            theta_original: dec.theta_original,
            theta_replication: dec.theta_replication,
            theta_w: dec.theta_w,
            theta_omega: dec.theta_omega,
        },
        decomposition,
        adjusted,
        balance: BalanceDiagnostics {
            covariate: dec.covariate_weights.as_ref().map(WeightDiagnostics::from),
            mediator: dec.mediator_weights.as_ref().map(WeightDiagnostics::from),
        },
        warnings,
    })
}

/// Per-unit weights on the replication study as CSV.
pub fn weights_csv(d1: &StudyDataset, d2: &StudyDataset, spec: &AnalysisSpec) -> Result<String> {
    let dec = crate::decomp::estimate_components(d1, d2, spec)?;
    let n = d2.n();
    let col = |w: &Option<WeightSolution>| w.as_ref().map(|w| w.weights.clone());
    let cw = col(&dec.covariate_weights);
    let mw = col(&dec.mediator_weights);
    let mut out = String::from("unit,covariate_weight,mediator_weight\n");
    for i in 0..n {
        let cell = |w: &Option<Vec<f64>>| w.as_ref().map_or(String::new(), |w| w[i].to_string());
        out.push_str(&format!("{i},{},{}\n", cell(&cw), cell(&mw)));
    }
    Ok(out)
}
