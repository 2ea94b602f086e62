//! Unit-level experimental datasets and their CSV ingestion.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spec::AnalysisSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Original,
    Replication,
}

/// A covariate or mediator column, stored column-major.
#[derive(Debug, Clone, PartialEq)]
pub enum Column {
    Numeric(Vec<f64>),
    Categorical { levels: Vec<String>, codes: Vec<u32> },
}

impl Column {
    pub fn len(&self) -> usize {
        match self {
            Column::Numeric(v) => v.len(),
            Column::Categorical { codes, .. } => codes.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_numeric(&self) -> Option<&[f64]> {
        match self {
            Column::Numeric(v) => Some(v),
            Column::Categorical { .. } => None,
        }
    }

    fn select(&self, idx: &[usize]) -> Column {
        match self {
            Column::Numeric(v) => Column::Numeric(idx.iter().map(|&i| v[i]).collect()),
            Column::Categorical { levels, codes } => {
                Column::Categorical { levels: levels.clone(), codes: idx.iter().map(|&i| codes[i]).collect() }
            }
        }
    }
}

/// A validated experimental dataset. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyDataset {
    role: Role,
    treatment: Vec<u8>,
    /// `outcomes[l][i]`: outcome slot `l` of unit `i`.
    outcomes: Vec<Vec<f64>>,
    covariates: BTreeMap<String, Column>,
    mediators: BTreeMap<String, Column>,
}

impl StudyDataset {
    /// Build a dataset from in-memory columns, enforcing the same invariants as
    /// CSV ingestion.
    pub fn new(
        role: Role,
        treatment: Vec<u8>,
        outcomes: Vec<Vec<f64>>,
        covariates: BTreeMap<String, Column>,
        mediators: BTreeMap<String, Column>,
    ) -> Result<Self> {
        let n = treatment.len();
        if outcomes.is_empty() {
            return Err(Error::InvalidSpec("at least one outcome is required".into()));
        }
        for (row, &t) in treatment.iter().enumerate() {
            if t > 1 {
                return Err(Error::NonBinaryTreatment {
                    row: row + 1,
                    column: "treatment".into(),
                    value: t.to_string(),
                });
            }
        }
        if !treatment.contains(&0) || !treatment.contains(&1) {
            return Err(Error::SingleArm { column: "treatment".into() });
        }
        for (l, col) in outcomes.iter().enumerate() {
            if col.len() != n {
                return Err(Error::OutcomeCount { row: col.len().min(n) + 1, expected: n, found: col.len() });
            }
            if let Some(row) = col.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    row: row + 1,
                    column: format!("outcome[{}]", l + 1),
                    value: col[row].to_string(),
                });
            }
        }
        for (name, col) in covariates.iter().chain(&mediators) {
            if col.len() != n {
                return Err(Error::InvalidArgument(format!("column `{name}` has {} entries, expected {n}", col.len())));
            }
            match col {
                Column::Numeric(v) => {
                    if let Some(row) = v.iter().position(|x| !x.is_finite()) {
                        return Err(Error::NonFinite { row: row + 1, column: name.clone(), value: v[row].to_string() });
                    }
                }
                Column::Categorical { levels, codes } => {
                    if let Some(row) = codes.iter().position(|&c| c as usize >= levels.len()) {
                        return Err(Error::UnknownLevel {
                            row: row + 1,
                            column: name.clone(),
                            value: codes[row].to_string(),
                        });
                    }
                }
            }
        }
        if mediators.keys().any(|k| covariates.contains_key(k)) {
            return Err(Error::InvalidSpec("mediator and covariate columns overlap".into()));
        }
        Ok(Self { role, treatment, outcomes, covariates, mediators })
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn n(&self) -> usize {
        self.treatment.len()
    }

    pub fn p(&self) -> usize {
        self.outcomes.len()
    }

    pub fn treatment(&self) -> &[u8] {
        &self.treatment
    }

    pub fn outcome(&self, slot: usize) -> &[f64] {
        &self.outcomes[slot]
    }

    pub fn covariate(&self, name: &str) -> Option<&Column> {
        self.covariates.get(name)
    }

    pub fn mediator(&self, name: &str) -> Option<&Column> {
        self.mediators.get(name)
    }

    /// Covariate or mediator column by name.
    pub fn column(&self, name: &str) -> Option<&Column> {
        self.covariates.get(name).or_else(|| self.mediators.get(name))
    }

    pub fn covariates(&self) -> &BTreeMap<String, Column> {
        &self.covariates
    }

    pub fn mediators(&self) -> &BTreeMap<String, Column> {
        &self.mediators
    }

    pub fn treated_fraction(&self) -> f64 {
        self.treatment.iter().filter(|&&t| t == 1).count() as f64 / self.n() as f64
    }

    /// Units at `idx`, in that order. The result may contain a single arm,
    /// so it bypasses the two-arm check; callers use it for resampling.
    pub fn select(&self, idx: &[usize]) -> StudyDataset {
        StudyDataset {
            role: self.role,
            treatment: idx.iter().map(|&i| self.treatment[i]).collect(),
            outcomes: self.outcomes.iter().map(|o| idx.iter().map(|&i| o[i]).collect()).collect(),
            covariates: self.covariates.iter().map(|(k, c)| (k.clone(), c.select(idx))).collect(),
            mediators: self.mediators.iter().map(|(k, c)| (k.clone(), c.select(idx))).collect(),
        }
    }

    /// The dataset with unit `unit` removed.
    pub fn without(&self, unit: usize) -> StudyDataset {
        let idx: Vec<usize> = (0..self.n()).filter(|&i| i != unit).collect();
        self.select(&idx)
    }

    /// The same units with mediators dropped.
    pub fn without_mediators(&self) -> StudyDataset {
        StudyDataset { mediators: BTreeMap::new(), ..self.clone() }
    }

    /// Serialize back to CSV with columns: outcomes, treatment, covariates,
    /// mediators. Numbers use the shortest round-trip representation.
    pub fn to_csv(&self, spec: &AnalysisSpec) -> String {
        let mut header: Vec<String> = spec.outcome_columns.clone();
        header.push(spec.treatment_column.clone());
        header.extend(self.covariates.keys().cloned());
        header.extend(self.mediators.keys().cloned());
        let mut out = header.join(",");
        out.push('\n');
        for i in 0..self.n() {
            let mut row: Vec<String> = self.outcomes.iter().map(|o| format_f64(o[i])).collect();
            row.push(self.treatment[i].to_string());
            for col in self.covariates.values().chain(self.mediators.values()) {
                row.push(match col {
                    Column::Numeric(v) => format_f64(v[i]),
                    Column::Categorical { levels, codes } => levels[codes[i] as usize].clone(),
                });
            }
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

fn format_f64(v: f64) -> String {
    let s = format!("{v:?}");
    s.strip_suffix(".0").map(str::to_string).unwrap_or(s)
}

/// Load and validate a CSV dataset against `spec`.
pub fn load_dataset(path: impl AsRef<Path>, spec: &AnalysisSpec, role: Role) -> Result<StudyDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    read_dataset(file, spec, role)
}

/// Parse CSV text; row numbers in errors count data rows from 1.
pub fn read_dataset<R: Read>(reader: R, spec: &AnalysisSpec, role: Role) -> Result<StudyDataset> {
    spec.validate()?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::Csv { row: 0, message: e.to_string() })?.clone();
    let find = |name: &str| -> Result<usize> {
        headers.iter().position(|h| h.trim() == name).ok_or_else(|| Error::MissingColumn { column: name.to_string() })
    };

    let outcome_idx: Vec<usize> = spec.outcome_columns.iter().map(|c| find(c)).collect::<Result<_>>()?;
    let treat_idx = find(&spec.treatment_column)?;
    let cov_names = spec.covariate_columns();
    let med_names = spec.mediator_columns();
    let cov_idx: Vec<usize> = cov_names.iter().map(|c| find(c)).collect::<Result<_>>()?;
    let med_idx: Vec<usize> = med_names.iter().map(|c| find(c)).collect::<Result<_>>()?;

    let mut treatment = Vec::new();
    let mut outcomes: Vec<Vec<f64>> = vec![Vec::new(); outcome_idx.len()];
    let mut builders: Vec<ColumnBuilder> =
        cov_names.iter().chain(&med_names).map(|name| ColumnBuilder::new(name, spec.levels_of(name))).collect();
    let col_idx: Vec<usize> = cov_idx.iter().chain(&med_idx).copied().collect();

    for (r, record) in rdr.records().enumerate() {
        let row = r + 1;
        let record = record.map_err(|e| Error::Csv { row, message: e.to_string() })?;
        if record.len() != headers.len() {
            let missing_outcome = outcome_idx.iter().any(|&j| j >= record.len());
            if missing_outcome {
                let found = outcome_idx.iter().filter(|&&j| j < record.len()).count();
                return Err(Error::OutcomeCount { row, expected: outcome_idx.len(), found });
            }
            return Err(Error::Csv {
                row,
                message: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        let t = record[treat_idx].trim();
        match t.parse::<f64>() {
            Ok(v) if v == 0.0 => treatment.push(0),
            Ok(v) if v == 1.0 => treatment.push(1),
            _ => {
                return Err(Error::NonBinaryTreatment {
                    row,
                    column: spec.treatment_column.clone(),
                    value: t.to_string(),
                })
            }
        }
        for (slot, &j) in outcome_idx.iter().enumerate() {
            let raw = record[j].trim();
            if raw.is_empty() {
                let found = outcome_idx.iter().filter(|&&k| !record[k].trim().is_empty()).count();
                return Err(Error::OutcomeCount { row, expected: outcome_idx.len(), found });
            }
            outcomes[slot].push(parse_finite(raw, row, &spec.outcome_columns[slot])?);
        }
        for (b, &j) in builders.iter_mut().zip(&col_idx) {
            b.push(record[j].trim(), row)?;
        }
    }
    if treatment.is_empty() {
        return Err(Error::TooFewUnits { n: 0, min: 2 });
    }
    if !treatment.contains(&0) || !treatment.contains(&1) {
        return Err(Error::SingleArm { column: spec.treatment_column.clone() });
    }
    let mut columns = builders.into_iter().map(|b| (b.name, b.column));
    let covariates: BTreeMap<_, _> = columns.by_ref().take(cov_names.len()).collect();
    let mediators: BTreeMap<_, _> = columns.collect();
    StudyDataset::new(role, treatment, outcomes, covariates, mediators)
}

fn parse_finite(raw: &str, row: usize, column: &str) -> Result<f64> {
    match raw.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::NonFinite { row, column: column.to_string(), value: raw.to_string() }),
    }
}

struct ColumnBuilder {
    name: String,
    column: Column,
}

impl ColumnBuilder {
    fn new(name: &str, levels: Option<&[String]>) -> Self {
        let column = match levels {
            Some(levels) => Column::Categorical { levels: levels.to_vec(), codes: Vec::new() },
            None => Column::Numeric(Vec::new()),
        };
        Self { name: name.to_string(), column }
    }

    fn push(&mut self, raw: &str, row: usize) -> Result<()> {
        match &mut self.column {
            Column::Numeric(v) => v.push(parse_finite(raw, row, &self.name)?),
            Column::Categorical { levels, codes } => {
                let code = levels.iter().position(|l| l == raw).ok_or_else(|| Error::UnknownLevel {
                    row,
                    column: self.name.clone(),
                    value: raw.to_string(),
                })?;
                codes.push(code as u32);
            }
        }
        Ok(())
    }
}

/// Support comparison of one balanced column between the two studies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnOverlap {
    pub column: String,
    /// Categorical levels observed in the original study but not in the replication.
    pub missing_levels: Vec<String>,
    /// Numeric ranges `(min, max)` of the original and replication samples.
    pub original_range: Option<(f64, f64)>,
    pub replication_range: Option<(f64, f64)>,
    /// Largest ratio of original to replication histogram mass over a shared
    /// 10-bin grid (or over levels, for categorical columns). Infinite when
    /// the original puts mass where the replication has none.
    pub density_ratio_proxy: f64,
    pub supported: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OverlapDiagnostics {
    pub columns: Vec<ColumnOverlap>,
    pub warnings: Vec<String>,
}

const OVERLAP_BINS: usize = 10;

/// Report, for every balanced column, whether the original study's support is
/// covered by the replication's observed support.
pub fn check_overlap(d1: &StudyDataset, d2: &StudyDataset, spec: &AnalysisSpec) -> OverlapDiagnostics {
    let mut diag = OverlapDiagnostics::default();
    for cs in spec.covariate_moments.iter().chain(&spec.mediator_moments) {
        let (Some(c1), Some(c2)) = (d1.column(&cs.column), d2.column(&cs.column)) else {
            continue;
        };
        let entry = match (c1, c2) {
            (Column::Numeric(a), Column::Numeric(b)) => numeric_overlap(&cs.column, a, b),
            (Column::Categorical { levels, codes: a }, Column::Categorical { codes: b, .. }) => {
                categorical_overlap(&cs.column, levels, a, b)
            }
            _ => continue,
        };
        if !entry.supported {
            let msg = if entry.missing_levels.is_empty() {
                let (lo1, hi1) = entry.original_range.unwrap_or_default();
                let (lo2, hi2) = entry.replication_range.unwrap_or_default();
                format!(
                    "column `{}`: original range [{lo1}, {hi1}] extends beyond replication range [{lo2}, {hi2}]",
                    cs.column
                )
            } else {
                format!(
                    "column `{}`: levels {:?} appear in the original study but not in the replication",
                    cs.column, entry.missing_levels
                )
            };
            diag.warnings.push(msg);
        }
        diag.columns.push(entry);
    }
    diag
}

fn range(v: &[f64]) -> (f64, f64) {
    v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

fn numeric_overlap(name: &str, a: &[f64], b: &[f64]) -> ColumnOverlap {
    let r1 = range(a);
    let r2 = range(b);
    let lo = r1.0.min(r2.0);
    let hi = r1.1.max(r2.1);
    let h1 = histogram(a, lo, hi);
    let h2 = histogram(b, lo, hi);
    ColumnOverlap {
        column: name.to_string(),
        missing_levels: Vec::new(),
        original_range: Some(r1),
        replication_range: Some(r2),
        density_ratio_proxy: max_ratio(&h1, &h2),
        supported: r1.0 >= r2.0 && r1.1 <= r2.1,
    }
}

fn histogram(v: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    let mut counts = vec![0.0; OVERLAP_BINS];
    let width = (hi - lo) / OVERLAP_BINS as f64;
    for &x in v {
        let bin = if width > 0.0 { ((x - lo) / width).floor() as usize } else { 0 };
        counts[bin.min(OVERLAP_BINS - 1)] += 1.0;
    }
    let n = v.len() as f64;
    counts.iter_mut().for_each(|c| *c /= n);
    counts
}

fn max_ratio(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| if b > 0.0 { a / b } else { f64::INFINITY })
        .fold(0.0, f64::max)
}

fn categorical_overlap(name: &str, levels: &[String], a: &[u32], b: &[u32]) -> ColumnOverlap {
    let freq = |codes: &[u32]| {
        let mut f = vec![0.0; levels.len()];
        for &c in codes {
            f[c as usize] += 1.0;
        }
        let n = codes.len() as f64;
        f.iter_mut().for_each(|x| *x /= n);
        f
    };
    let f1 = freq(a);
    let f2 = freq(b);
    let missing_levels: Vec<String> =
        levels.iter().enumerate().filter(|&(k, _)| f1[k] > 0.0 && f2[k] == 0.0).map(|(_, l)| l.clone()).collect();
    ColumnOverlap {
        column: name.to_string(),
        supported: missing_levels.is_empty(),
        missing_levels,
        original_range: None,
        replication_range: None,
        density_ratio_proxy: max_ratio(&f1, &f2),
    }
}
