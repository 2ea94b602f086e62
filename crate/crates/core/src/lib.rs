//! Decomposition of the discrepancy between an original experiment's effect
//! estimate and its replication's into sampling variability, covariate shift,
//! mediation shift and an unexplained residual.
//!
//! The pipeline: [`data`] loads and validates studies, [`balance`] solves
//! entropy-balancing weights, [`decomp`] computes point estimates,
//! [`inference`] the jackknife covariance, and [`selectadj`] corrects for
//! selection of significant originals. [`simulate`] hosts the coverage
//! experiments and [`report`] the end-to-end result document.

// `!(x > y)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::redundant_guards)]

pub mod balance;
pub mod data;
pub mod decomp;
pub mod error;
pub mod inference;
pub mod neldermead;
pub mod normal;
pub mod parallel;
pub mod regress;
pub mod report;
pub mod selectadj;
pub mod simulate;
pub mod spec;
pub mod stylized;

pub use balance::{
    build_covariate_constraints, build_mediator_constraints, solve_entropy_weights, MomentConstraintSet,
    SolverSettings, WeightSolution,
};
pub use data::{check_overlap, load_dataset, read_dataset, Column, OverlapDiagnostics, Role, StudyDataset};
pub use decomp::{estimate_components, Decomposition};
pub use error::{Error, ErrorKind, Result};
pub use inference::{jackknife_covariance, EstimatorVector, JackknifeCovariance, JackknifeResult};
pub use regress::{build_design, fit_wls, FitResult, StackedDesign};
pub use report::{analyze, AnalyzeOptions, ResultDocument};
pub use selectadj::{adjust, AdjustedDecomposition, SelectionModel};
pub use spec::{AnalysisSpec, ColumnSpec, Moment, RegressionTemplate, SelectionSe, SelectionSpec, Term};
