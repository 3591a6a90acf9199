//! Replays recorded request/response pairs against the demo models and
//! compares response bodies byte for byte. Regenerate with
//! `PATHO_UPDATE_FIXTURES=1 cargo test -p patho-service --test contract`.

mod common;

use std::fs;
use std::path::PathBuf;

use axum::http::StatusCode;
use common::*;
use patho_core::api::ExtractResponse;
use serde::{Deserialize, Serialize};
use serde_json::json;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Case {
    name: String,
    method: String,
    path: String,
    status: u16,
}

fn dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

/// Build and record every case by running it against the live router.
async fn record() {
    let app = demo_app();
    let out = dir();
    fs::create_dir_all(&out).unwrap();
    let mut cases = Vec::new();
    let run = |name: &str, method: &str, path: &str, body: Option<serde_json::Value>| {
        let req = body.map(|b| serde_json::to_vec_pretty(&b).unwrap());
        let (name, method, path) = (name.to_string(), method.to_string(), path.to_string());
        let app = app.clone();
        async move {
            let (status, resp) = match &req {
                Some(b) => send(&app, &method, &path, Some("application/json"), b.clone()).await,
                None => send(&app, &method, &path, None, vec![]).await,
            };
            if let Some(b) = &req {
                fs::write(dir().join(format!("{name}.request.json")), b).unwrap();
            }
            fs::write(dir().join(format!("{name}.response.json")), &resp).unwrap();
            (
                Case {
                    name,
                    method,
                    path,
                    status: status.as_u16(),
                },
                resp,
            )
        }
    };
    let (image, vessel) = fixture_pngs(4, 11);
    let (c, _) = run("models", "GET", "/models", None).await;
    cases.push(c);
    let (c, extracted) = run(
        "extract",
        "POST",
        "/extract",
        Some(json!({"detector": "detector-demo", "image_id": "fixture-11", "image": image})),
    )
    .await;
    cases.push(c);
    let ex: ExtractResponse = serde_json::from_slice(&extracted).unwrap();
    let (c, _) = run(
        "generate",
        "POST",
        "/generate",
        Some(json!({"generator": "generator-demo", "vessel": vessel, "descriptors": ex.descriptors, "seed": 7})),
    )
    .await;
    cases.push(c);
    let (c, _) = run(
        "generate_empty",
        "POST",
        "/generate",
        Some(json!({"generator": "generator-demo", "vessel": vessel, "descriptors": empty_descriptors(), "seed": 7})),
    )
    .await;
    cases.push(c);
    let (c, _) = run(
        "severity",
        "POST",
        "/severity",
        Some(json!({"detector": "detector-demo", "image": image})),
    )
    .await;
    cases.push(c);
    let first = ex.descriptors.document.descriptors.first().map(|d| d.id).unwrap_or(0);
    let (c, _) = run(
        "manipulate",
        "POST",
        "/manipulate",
        Some(json!({"descriptors": ex.descriptors, "ops": [
            {"op": "clone", "id": first, "left": 0, "top": 0},
            {"op": "move", "id": first, "left": 1, "top": 2},
            {"op": "remove", "id": first}
        ]})),
    )
    .await;
    cases.push(c);
    let (c, _) = run(
        "unknown_model",
        "POST",
        "/severity",
        Some(json!({"detector": "missing", "image": image})),
    )
    .await;
    cases.push(c);
    let (c, _) = run("malformed", "POST", "/extract", Some(json!({"detector": "detector-demo"}))).await;
    cases.push(c);
    fs::write(out.join("cases.json"), serde_json::to_vec_pretty(&cases).unwrap()).unwrap();
}

#[tokio::test]
async fn recorded_fixtures_replay_bit_exactly() {
    if std::env::var_os("PATHO_UPDATE_FIXTURES").is_some() || !dir().join("cases.json").exists() {
        record().await;
    }
    let cases: Vec<Case> = serde_json::from_slice(&fs::read(dir().join("cases.json")).unwrap()).unwrap();
    assert!(cases.len() >= 8);
    let app = demo_app();
    for case in &cases {
        let req = dir().join(format!("{}.request.json", case.name));
        let (status, body) = if req.exists() {
            send(&app, &case.method, &case.path, Some("application/json"), fs::read(req).unwrap()).await
        } else {
            send(&app, &case.method, &case.path, None, vec![]).await
        };
        assert_eq!(status, StatusCode::from_u16(case.status).unwrap(), "case {}", case.name);
        let expected = fs::read(dir().join(format!("{}.response.json", case.name))).unwrap();
        assert!(body.as_ref() == expected.as_slice(), "case {}: response body differs from fixture", case.name);
    }
    let status = |n: &str| cases.iter().find(|c| c.name == n).unwrap().status;
    assert_eq!(status("generate_empty"), 200);
    assert_eq!(status("unknown_model"), 409);
    assert_eq!(status("malformed"), 400);
}
