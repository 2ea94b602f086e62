//! Analysis specification: which columns play which role, the regression
//! template, the balancing moments and the optional selection model.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Balancing moment requested for a covariate or mediator column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Moment {
    Mean,
    MeanAndSecondMoment,
    OneHot,
}

/// A covariate or mediator column and the moment to balance on it.
///
/// A column is categorical exactly when `levels` is present; the levels are
/// the declared finite set its values must be drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub column: String,
    pub moment: Moment,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levels: Option<Vec<String>>,
}

impl ColumnSpec {
    pub fn numeric(column: impl Into<String>, moment: Moment) -> Self {
        Self { column: column.into(), moment, levels: None }
    }

    pub fn categorical(column: impl Into<String>, levels: &[&str]) -> Self {
        Self {
            column: column.into(),
            moment: Moment::OneHot,
            levels: Some(levels.iter().map(|s| s.to_string()).collect()),
        }
    }

    pub fn is_categorical(&self) -> bool {
        self.levels.is_some()
    }
}

/// One feature of a custom regression template, evaluated for unit `i` and
/// outcome slot `l` (1-based).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    Intercept,
    /// Value of a numeric covariate.
    Column(String),
    /// Indicator that a categorical covariate equals a level.
    Level {
        column: String,
        level: String,
    },
    /// Indicator that the outcome slot is one of the listed (1-based) slots.
    Slots(Vec<usize>),
    Product(Box<Term>, Box<Term>),
}

impl Term {
    fn collect_columns(&self, out: &mut BTreeSet<String>) {
        match self {
            Term::Intercept | Term::Slots(_) => {}
            Term::Column(c) => {
                out.insert(c.clone());
            }
            Term::Level { column, .. } => {
                out.insert(column.clone());
            }
            Term::Product(a, b) => {
                a.collect_columns(out);
                b.collect_columns(out);
            }
        }
    }

    pub fn label(&self) -> String {
        match self {
            Term::Intercept => "1".to_string(),
            Term::Column(c) => c.clone(),
            Term::Level { column, level } => format!("{column}=={level}"),
            Term::Slots(s) => format!("slot in {{{}}}", s.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")),
            Term::Product(a, b) => format!("{}*{}", a.label(), b.label()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CustomTemplate {
    /// `f_l`: features multiplied by the treatment indicator.
    pub treatment_features: Vec<Term>,
    /// `g_l`: baseline features; must contain every treatment feature.
    pub baseline_features: Vec<Term>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegressionTemplate {
    Ttest,
    Anova2,
    Ancova,
    Adjusted,
    Custom(CustomTemplate),
}

impl RegressionTemplate {
    pub fn needs_regressors(&self) -> bool {
        matches!(self, RegressionTemplate::Ancova | RegressionTemplate::Adjusted)
    }
}

/// Standard error used to standardize the selection statistic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionSe {
    /// Delete-one-unit jackknife standard error of the coefficient.
    #[default]
    Jackknife,
    /// Classical homoskedastic OLS standard error.
    Model,
}

/// Selection model: the original study was published and replicated because
/// its statistic `tau/sigma` was significant at level `alpha0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionSpec {
    pub alpha0: f64,
    /// Regression whose treatment coefficient is the selection statistic.
    /// Defaults to the analysis template.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<RegressionTemplate>,
    #[serde(default)]
    pub se: SelectionSe,
}

fn default_level() -> f64 {
    0.90
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSpec {
    pub outcome_columns: Vec<String>,
    pub treatment_column: String,
    pub regression_template: RegressionTemplate,
    /// Numeric covariates entering the `ancova` and `adjusted` templates.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub regressors: Vec<String>,
    #[serde(default)]
    pub covariate_moments: Vec<ColumnSpec>,
    #[serde(default)]
    pub mediator_moments: Vec<ColumnSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection: Option<SelectionSpec>,
    #[serde(default = "default_level")]
    pub ci_level: f64,
}

impl AnalysisSpec {
    /// Minimal spec: single outcome, difference in means, nothing balanced.
    pub fn ttest(outcome: &str, treatment: &str) -> Self {
        Self {
            outcome_columns: vec![outcome.to_string()],
            treatment_column: treatment.to_string(),
            regression_template: RegressionTemplate::Ttest,
            regressors: Vec::new(),
            covariate_moments: Vec::new(),
            mediator_moments: Vec::new(),
            selection: None,
            ci_level: default_level(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: AnalysisSpec = serde_json::from_str(text).map_err(|e| Error::InvalidSpec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("spec serializes")
    }

    /// Hex SHA-256 of the compact JSON serialization.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn p(&self) -> usize {
        self.outcome_columns.len()
    }

    /// Categorical levels declared for `column`, searching covariates,
    /// mediators and custom-template terms in that order.
    pub fn levels_of(&self, column: &str) -> Option<&[String]> {
        self.covariate_moments
            .iter()
            .chain(&self.mediator_moments)
            .find(|c| c.column == column)
            .and_then(|c| c.levels.as_deref())
    }

    /// Names of all covariate (X) columns the dataset must carry, in order of
    /// first mention.
    pub fn covariate_columns(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        let mut push = |c: &str| {
            if seen.insert(c.to_string()) {
                out.push(c.to_string());
            }
        };
        for c in &self.covariate_moments {
            push(&c.column);
        }
        for r in &self.regressors {
            push(r);
        }
        if let RegressionTemplate::Custom(t) = &self.regression_template {
            let mut cols = BTreeSet::new();
            for term in t.treatment_features.iter().chain(&t.baseline_features) {
                term.collect_columns(&mut cols);
            }
            for c in &cols {
                push(c);
            }
        }
        if let Some(RegressionTemplate::Custom(t)) = self.selection.as_ref().and_then(|s| s.template.as_ref()) {
            let mut cols = BTreeSet::new();
            for term in t.treatment_features.iter().chain(&t.baseline_features) {
                term.collect_columns(&mut cols);
            }
            for c in &cols {
                push(c);
            }
        }
        out
    }

    pub fn mediator_columns(&self) -> Vec<String> {
        self.mediator_moments.iter().map(|c| c.column.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.outcome_columns.is_empty() {
            return bad("at least one outcome column is required".into());
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return bad(format!("ci_level {} outside (0, 1)", self.ci_level));
        }
        let mut names = BTreeSet::new();
        for o in &self.outcome_columns {
            if !names.insert(o.as_str()) {
                return bad(format!("outcome column `{o}` listed twice"));
            }
        }
        if names.contains(self.treatment_column.as_str()) {
            return bad("treatment column is also an outcome".into());
        }
        let covs = self.covariate_columns();
        let meds = self.mediator_columns();
        for m in &meds {
            if covs.contains(m) {
                return bad(format!("column `{m}` is both a covariate and a mediator"));
            }
            if names.contains(m.as_str()) || *m == self.treatment_column {
                return bad(format!("mediator `{m}` collides with outcome or treatment"));
            }
        }
        for c in &covs {
            if names.contains(c.as_str()) || *c == self.treatment_column {
                return bad(format!("covariate `{c}` collides with outcome or treatment"));
            }
        }
        let mut seen = BTreeSet::new();
        for c in self.covariate_moments.iter().chain(&self.mediator_moments) {
            if !seen.insert(c.column.as_str()) {
                return bad(format!("column `{}` has two moment entries", c.column));
            }
            match (&c.levels, c.moment) {
                (Some(levels), Moment::OneHot) => {
                    if levels.len() < 2 {
                        return bad(format!("categorical `{}` needs at least two levels", c.column));
                    }
                    let distinct: BTreeSet<_> = levels.iter().collect();
                    if distinct.len() != levels.len() {
                        return bad(format!("categorical `{}` repeats a level", c.column));
                    }
                }
                (Some(_), m) => {
                    return bad(format!("moment {m:?} requires a numeric column, `{}` is categorical", c.column));
                }
                (None, Moment::OneHot) => {
                    return bad(format!("one_hot requires declared levels on `{}`", c.column));
                }
                (None, _) => {}
            }
        }
        for r in &self.regressors {
            if self.levels_of(r).is_some() {
                return bad(format!("regressor `{r}` must be numeric"));
            }
        }
        validate_template(self, &self.regression_template)?;
        if let Some(sel) = &self.selection {
            if !(sel.alpha0 > 0.0 && sel.alpha0 < 1.0) {
                return bad(format!("alpha0 {} outside (0, 1)", sel.alpha0));
            }
            if let Some(t) = &sel.template {
                validate_template(self, t)?;
            }
        }
        Ok(())
    }
}

fn validate_template(spec: &AnalysisSpec, template: &RegressionTemplate) -> Result<()> {
    let bad = |m: String| Err(Error::InvalidSpec(m));
    match template {
        RegressionTemplate::Ttest | RegressionTemplate::Ancova | RegressionTemplate::Adjusted if spec.p() != 1 => {
            bad(format!("template {template:?} requires exactly one outcome, got {}", spec.p()))
        }
        t if t.needs_regressors() && spec.regressors.is_empty() => {
            bad("ancova/adjusted templates need at least one regressor".into())
        }
        RegressionTemplate::Custom(c) => {
            if !c.treatment_features.contains(&Term::Intercept) {
                return bad("custom template: treatment features must include an intercept".into());
            }
            for f in &c.treatment_features {
                if !c.baseline_features.contains(f) {
                    return bad(format!(
                        "custom template: treatment feature `{}` missing from baseline features",
                        f.label()
                    ));
                }
            }
            for term in c.treatment_features.iter().chain(&c.baseline_features) {
                check_term(spec, term)?;
            }
            Ok(())
        }
        _ => Ok(()),
    }
}

fn check_term(spec: &AnalysisSpec, term: &Term) -> Result<()> {
    match term {
        Term::Column(c) if spec.levels_of(c).is_some() => {
            Err(Error::InvalidSpec(format!("term uses categorical `{c}` as numeric")))
        }
        Term::Level { column, level } => match spec.levels_of(column) {
            Some(levels) if levels.contains(level) => Ok(()),
            _ => Err(Error::InvalidSpec(format!("term level `{level}` is not a declared level of `{column}`"))),
        },
        Term::Slots(s) if s.iter().any(|&l| l == 0 || l > spec.p()) => {
            Err(Error::InvalidSpec(format!("slot indicator outside 1..={}", spec.p())))
        }
        Term::Product(a, b) => {
            check_term(spec, a)?;
            check_term(spec, b)
        }
        _ => Ok(()),
    }
}
