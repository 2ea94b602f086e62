use std::fs;
use std::path::{Path, PathBuf};

use axum::body::{to_bytes, Body};
use axum::http::{header, Request, StatusCode};
use axum::Router;
use serde_json::{json, Value};
use tower::ServiceExt;

use shiftdiag_core::stylized::{example_pair, example_spec, Example};
use shiftdiag_core::{analyze, read_dataset, AnalyzeOptions, Role};
use shiftdiag_service::{router, AppState, ServiceConfig};

const BOUNDARY: &str = "shiftdiag-test-boundary";

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn app() -> Router {
    router(AppState::new(ServiceConfig::default()))
}

fn multipart(csv: &[u8], spec: Option<&str>) -> Body {
    let mut body = Vec::new();
    body.extend_from_slice(
        format!(
            "--{BOUNDARY}\r\nContent-Disposition: form-data; name=\"file\"; filename=\"data.csv\"\r\nContent-Type: text/csv\r\n\r\n"
        )
        .as_bytes(),
    );
    body.extend_from_slice(csv);
    body.extend_from_slice(b"\r\n");
    if let Some(s) = spec {
        body.extend_from_slice(
            format!("--{BOUNDARY}\r\nContent-Disposition: form-data; name=\"spec\"\r\n\r\n{s}\r\n").as_bytes(),
        );
    }
    body.extend_from_slice(format!("--{BOUNDARY}--\r\n").as_bytes());
    Body::from(body)
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    (status, to_bytes(res.into_body(), usize::MAX).await.unwrap().to_vec())
}

async fn upload(app: &Router, csv: &[u8], spec: Option<&str>) -> (StatusCode, Value) {
    let req = Request::post("/api/datasets")
        .header(header::CONTENT_TYPE, format!("multipart/form-data; boundary={BOUNDARY}"))
        .body(multipart(csv, spec))
        .unwrap();
    let (status, body) = send(app, req).await;
    (status, serde_json::from_slice(&body).unwrap())
}

async fn upload_id(app: &Router, csv: &[u8]) -> String {
    let (status, v) = upload(app, csv, None).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    v["id"].as_str().unwrap().to_string()
}

async fn decompose(app: &Router, body: Value) -> (StatusCode, Vec<u8>) {
    let req = Request::post("/api/decompose")
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    send(app, req).await
}

fn request(original: &str, replication: &str) -> Value {
    json!({ "original_id": original, "replication_id": replication, "spec": example_spec() })
}

const SMALL: &str = "y,t,age,m\n1.5,0,19,0\n2.5,1,20,1\n0.5,0,21,1\n3.0,1,18.5,0\n";

#[tokio::test]
async fn health_and_version() {
    let app = app();
    let (status, body) = send(&app, Request::get("/api/health").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(serde_json::from_slice::<Value>(&body).unwrap()["status"], "ok");
    let (status, body) = send(&app, Request::get("/api/version").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(serde_json::from_slice::<Value>(&body).unwrap()["version"], env!("CARGO_PKG_VERSION"));
}

#[tokio::test]
async fn upload_returns_id_and_summary() {
    let app = app();
    let (status, v) =
        upload(&app, SMALL.as_bytes(), Some(r#"{"treatment_column": "t", "outcome_columns": ["y"]}"#)).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    assert_eq!(v["id"].as_str().unwrap().len(), 32);
    assert_eq!(v["summary"]["rows"], 4);
    let kinds: Vec<&str> =
        v["summary"]["columns"].as_array().unwrap().iter().map(|c| c["kind"].as_str().unwrap()).collect();
    assert_eq!(kinds, ["numeric", "binary", "numeric", "binary"]);
}

#[tokio::test]
async fn repeated_uploads_get_distinct_ids() {
    let app = app();
    let (_, a) = upload(&app, SMALL.as_bytes(), None).await;
    let (_, b) = upload(&app, SMALL.as_bytes(), None).await;
    assert_ne!(a["id"], b["id"]);
    assert_eq!(a["summary"], b["summary"]);
}

#[tokio::test]
async fn categorical_columns_list_levels() {
    let app = app();
    let (status, v) = upload(&app, b"t,g\n0,a\n1,b\n1,a\n", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["summary"]["columns"][1], json!({ "name": "g", "kind": "categorical", "levels": ["a", "b"] }));
}

#[tokio::test]
async fn non_binary_treatment_is_rejected() {
    let app = app();
    let csv = SMALL.replace("2.5,1,20", "2.5,2,20");
    let (status, v) = upload(&app, csv.as_bytes(), Some(r#"{"treatment_column": "t"}"#)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(v["code"], "non_binary_treatment");
    assert!(v["message"].as_str().unwrap().contains("treatment not coded 0/1"), "{v}");
    assert_eq!(v["detail"]["row"], 2);
}

#[tokio::test]
async fn malformed_uploads_are_rejected() {
    let app = app();
    let (status, v) = upload(&app, b"y,t\n1,0\n2\n", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(v["code"], "malformed_csv");
    let (status, v) = upload(&app, SMALL.as_bytes(), Some(r#"{"treatment_column": "treat"}"#)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(v["detail"]["column"], "treat");
    let req = Request::post("/api/datasets")
        .header(header::CONTENT_TYPE, format!("multipart/form-data; boundary={BOUNDARY}"))
        .body(Body::from(format!("--{BOUNDARY}--\r\n")))
        .unwrap();
    let (status, _) = send(&app, req).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn oversized_upload_is_413() {
    let config = ServiceConfig { max_upload_bytes: 1024, ..ServiceConfig::default() };
    let app = router(AppState::new(config));
    let big = format!("y,t\n{}", "1.0,0\n".repeat(400));
    let (status, v) = upload(&app, big.as_bytes(), None).await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE, "{v}");
    assert_eq!(v["code"], "payload_too_large");
}

#[tokio::test]
async fn fixture_decomposition_matches_cli_golden_file() {
    let app = app();
    let d1 = upload_id(&app, &fs::read(fixtures().join("example1_original.csv")).unwrap()).await;
    let d2 = upload_id(&app, &fs::read(fixtures().join("example1_replication.csv")).unwrap()).await;
    let spec: Value = serde_json::from_str(&fs::read_to_string(fixtures().join("example_spec.json")).unwrap()).unwrap();
    let (status, body) = decompose(&app, json!({ "original_id": d1, "replication_id": d2, "spec": spec })).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    assert_eq!(body, fs::read(fixtures().join("example1_result.json")).unwrap());
}

#[tokio::test]
async fn identical_datasets_give_zero_components() {
    let app = app();
    let (d, _) = example_pair(Example::ObservedShift, 150, 3).unwrap();
    let id = upload_id(&app, d.to_csv(&example_spec()).as_bytes()).await;
    let (status, body) = decompose(&app, request(&id, &id)).await;
    assert_eq!(status, StatusCode::OK);
    let doc: Value = serde_json::from_slice(&body).unwrap();
    for row in doc["decomposition"].as_array().unwrap() {
        assert!(row["estimate"].as_f64().unwrap().abs() < 1e-9, "{row}");
    }
}

#[tokio::test]
async fn unknown_dataset_is_404() {
    let app = app();
    let id = upload_id(&app, SMALL.as_bytes()).await;
    let (status, body) = decompose(&app, request(&id, "0123456789abcdef0123456789abcdef")).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["code"], "unknown_dataset");
}

#[tokio::test]
async fn infeasible_level_is_422_naming_it() {
    let app = app();
    let mut original = String::from("y,t,g\n");
    let mut replication = String::from("y,t,g\n");
    for i in 0..40 {
        original.push_str(&format!("{},{},{}\n", i % 7, i % 2, if i % 3 == 0 { "b" } else { "a" }));
        replication.push_str(&format!("{},{},a\n", i % 5, i % 2));
    }
    let d1 = upload_id(&app, original.as_bytes()).await;
    let d2 = upload_id(&app, replication.as_bytes()).await;
    let spec = json!({
        "outcome_columns": ["y"],
        "treatment_column": "t",
        "regression_template": "ttest",
        "covariate_moments": [{ "column": "g", "moment": "one_hot", "levels": ["a", "b"] }],
    });
    let (status, body) = decompose(&app, json!({ "original_id": d1, "replication_id": d2, "spec": spec })).await;
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{v}");
    assert!(v["detail"]["constraint"].as_str().unwrap().contains('b'), "{v}");
}

#[tokio::test]
async fn absent_selection_event_is_409() {
    let app = app();
    let (d1, d2) = example_pair(Example::ObservedShift, 150, 5).unwrap();
    let spec = example_spec();
    let null = d1.to_csv(&spec);
    // Scramble the outcome so the original effect is insignificant.
    let mut lines: Vec<String> = null.lines().map(str::to_string).collect();
    for (i, line) in lines.iter_mut().enumerate().skip(1) {
        let rest = line.split_once(',').unwrap().1.to_string();
        *line = format!("{},{rest}", (i * 37 % 101) as f64 / 50.0);
    }
    let id1 = upload_id(&app, (lines.join("\n") + "\n").as_bytes()).await;
    let id2 = upload_id(&app, d2.to_csv(&spec).as_bytes()).await;
    let mut body = request(&id1, &id2);
    body["selection_alpha0"] = json!(0.05);
    let (status, body) = decompose(&app, body).await;
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(status, StatusCode::CONFLICT, "{v}");
    assert_eq!(v["code"], "selection_absent");
}

#[tokio::test]
async fn malformed_request_is_400() {
    let app = app();
    let (status, body) = decompose(&app, json!({ "original_id": 3 })).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["code"], "malformed_request");
    assert!(v.get("message").is_some() && v.get("detail").is_some());
}

#[tokio::test]
async fn static_files_are_served() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("index.html"), "<html>console</html>").unwrap();
    let config = ServiceConfig { static_dir: Some(dir.path().to_path_buf()), ..ServiceConfig::default() };
    let app = router(AppState::new(config));
    let (status, body) = send(&app, Request::get("/").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, b"<html>console</html>");
    let (status, _) = send(&app, Request::get("/api/health").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn parallel_decompositions_match_serial_results() {
    let app = app();
    let spec = example_spec();
    let mut jobs = Vec::new();
    for seed in 0..16u64 {
        let example = if seed % 2 == 0 { Example::ObservedShift } else { Example::HiddenModerator };
        let (d1, d2) = example_pair(example, 120, 100 + seed).unwrap();
        let (c1, c2) = (d1.to_csv(&spec), d2.to_csv(&spec));
        let r1 = read_dataset(c1.as_bytes(), &spec, Role::Original).unwrap();
        let r2 = read_dataset(c2.as_bytes(), &spec, Role::Replication).unwrap();
        let serial = analyze(&r1, &r2, &spec, &AnalyzeOptions::default()).map(|d| d.to_json());
        let id1 = upload_id(&app, c1.as_bytes()).await;
        let id2 = upload_id(&app, c2.as_bytes()).await;
        jobs.push((id1, id2, serial));
    }
    let handles: Vec<_> = jobs
        .iter()
        .map(|(a, b, _)| {
            let app = app.clone();
            let body = request(a, b);
            tokio::spawn(async move { decompose(&app, body).await })
        })
        .collect();
    for (handle, (_, _, serial)) in handles.into_iter().zip(jobs) {
        let (status, body) = handle.await.unwrap();
        match serial {
            Ok(doc) => {
                assert_eq!(status, StatusCode::OK);
                assert_eq!(String::from_utf8(body).unwrap(), doc);
            }
            Err(_) => assert_ne!(status, StatusCode::OK),
        }
    }
}
