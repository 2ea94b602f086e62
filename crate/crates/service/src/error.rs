//! JSON error bodies: `{code, message, detail}`.

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Serialize;
use serde_json::{json, Value};

use shiftdiag_core::{Error, ErrorKind};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    pub detail: Value,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self { status, body: ErrorBody { code: code.into(), message: message.into(), detail: Value::Null } }
    }

    pub fn with_detail(mut self, detail: Value) -> Self {
        self.body.detail = detail;
        self
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    pub fn unknown_dataset(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "unknown_dataset", format!("no dataset with id `{id}`"))
            .with_detail(json!({ "id": id }))
    }
}

fn code_and_detail(e: &Error) -> (&'static str, Value) {
    match e {
        Error::InvalidSpec(_) => ("invalid_spec", Value::Null),
        Error::Io { .. } => ("io", Value::Null),
        Error::Csv { row, .. } => ("malformed_csv", json!({ "row": row })),
        Error::MissingColumn { column } => ("missing_column", json!({ "column": column })),
        Error::NonBinaryTreatment { row, column, value } => {
            ("non_binary_treatment", json!({ "row": row, "column": column, "value": value }))
        }
        Error::SingleArm { column } => ("single_arm", json!({ "column": column })),
        Error::NonFinite { row, column, value } => {
            ("non_finite", json!({ "row": row, "column": column, "value": value }))
        }
        Error::UnknownLevel { row, column, value } => {
            ("unknown_level", json!({ "row": row, "column": column, "value": value }))
        }
        Error::OutcomeCount { row, expected, found } => {
            ("outcome_count", json!({ "row": row, "expected": expected, "found": found }))
        }
        Error::TooFewUnits { n, min } => ("too_few_units", json!({ "n": n, "min": min })),
        Error::Singular { columns } => ("singular", json!({ "columns": columns })),
        Error::InvalidWeights(_) => ("invalid_weights", Value::Null),
        Error::Infeasible { label } => ("infeasible", json!({ "constraint": label })),
        Error::Collinear { label } => ("collinear", json!({ "constraint": label })),
        Error::JackknifeFailures { failed, total } => {
            ("jackknife_failures", json!({ "failed": failed, "total": total }))
        }
        Error::SelectionEventAbsent { z, threshold } => ("selection_absent", json!({ "z": z, "threshold": threshold })),
        Error::SelectionIncompatible => ("selection_incompatible", Value::Null),
        Error::NonMonotone => ("non_monotone", Value::Null),
        Error::NotConverged { evaluations, .. } => ("not_converged", json!({ "evaluations": evaluations })),
        Error::CovarianceNotPositive => ("covariance_not_positive", Value::Null),
        Error::ZeroEffect => ("zero_effect", Value::Null),
        Error::AttemptCap { attempts } => ("attempt_cap", json!({ "attempts": attempts })),
        Error::ReplicateFailures { failed, total } => {
            ("replicate_failures", json!({ "failed": failed, "total": total }))
        }
        Error::InvalidArgument(_) => ("invalid_argument", Value::Null),
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e.kind() {
            ErrorKind::Validation => StatusCode::BAD_REQUEST,
            ErrorKind::SelectionAbsent => StatusCode::CONFLICT,
            ErrorKind::Numerical | ErrorKind::Adjustment | ErrorKind::Simulation => StatusCode::UNPROCESSABLE_ENTITY,
        };
        let (code, detail) = code_and_detail(&e);
        ApiError::new(status, code, e.to_string()).with_detail(detail)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}
