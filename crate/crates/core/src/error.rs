use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the decomposition pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid analysis spec: {0}")]
    InvalidSpec(String),

    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed CSV at row {row}: {message}")]
    Csv { row: usize, message: String },

    #[error("missing column `{column}`")]
    MissingColumn { column: String },

    #[error("treatment not coded 0/1: row {row}, column `{column}` has value `{value}`")]
    NonBinaryTreatment { row: usize, column: String, value: String },

    #[error("treatment column `{column}` contains only one arm")]
    SingleArm { column: String },

    #[error("non-finite or unparsable value `{value}` at row {row}, column `{column}`")]
    NonFinite { row: usize, column: String, value: String },

    #[error("value `{value}` at row {row}, column `{column}` is not a declared level")]
    UnknownLevel { row: usize, column: String, value: String },

    #[error("outcome count mismatch at row {row}: expected {expected} outcome values, found {found}")]
    OutcomeCount { row: usize, expected: usize, found: usize },

    #[error("dataset has {n} units; at least {min} are required")]
    TooFewUnits { n: usize, min: usize },

    #[error("design matrix is rank deficient; collinear columns: {}", columns.join(", "))]
    Singular { columns: Vec<String> },

    #[error("invalid weights: {0}")]
    InvalidWeights(String),

    #[error("balancing constraints are infeasible; worst violated constraint `{label}`")]
    Infeasible { label: String },

    #[error("balancing features are collinear or degenerate at `{label}`")]
    Collinear { label: String },

    #[error("{failed} of {total} leave-one-out replicates failed (limit 1%)")]
    JackknifeFailures { failed: usize, total: usize },

    #[error("selection event did not occur: |z| = {z:.4} does not exceed {threshold:.4}")]
    SelectionEventAbsent { z: f64, threshold: f64 },

    #[error("selection event incompatible with candidate mean: truncation set has zero mass")]
    SelectionIncompatible,

    #[error("truncated-normal tail probability is not monotone in the candidate mean")]
    NonMonotone,

    #[error("Nelder-Mead did not converge after {evaluations} evaluations (best objective {best_value})")]
    NotConverged { evaluations: usize, best_point: Vec<f64>, best_value: f64 },

    #[error("covariance block is not positive definite")]
    CovarianceNotPositive,

    #[error("zero effect estimate: replication size would be infinite")]
    ZeroEffect,

    #[error("rejection sampling exceeded {attempts} attempts")]
    AttemptCap { attempts: usize },

    #[error("{failed} of {total} simulation replicates failed (limit 2%)")]
    ReplicateFailures { failed: usize, total: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    /// Coarse classification used by front ends to pick exit or status codes.
    pub fn kind(&self) -> ErrorKind {
        use Error::*;
        match self {
            InvalidSpec(_)
            | Io { .. }
            | Csv { .. }
            | MissingColumn { .. }
            | NonBinaryTreatment { .. }
            | SingleArm { .. }
            | NonFinite { .. }
            | UnknownLevel { .. }
            | OutcomeCount { .. }
            | TooFewUnits { .. }
            | InvalidWeights(_)
            | InvalidArgument(_) => ErrorKind::Validation,
            Singular { .. } | Infeasible { .. } | Collinear { .. } | JackknifeFailures { .. } => ErrorKind::Numerical,
            SelectionEventAbsent { .. } => ErrorKind::SelectionAbsent,
            SelectionIncompatible | NonMonotone | NotConverged { .. } | CovarianceNotPositive => ErrorKind::Adjustment,
            ZeroEffect | AttemptCap { .. } | ReplicateFailures { .. } => ErrorKind::Simulation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Numerical,
    SelectionAbsent,
    Adjustment,
    Simulation,
}

pub type Result<T> = std::result::Result<T, Error>;
