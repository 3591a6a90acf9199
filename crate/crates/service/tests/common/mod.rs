#![allow(dead_code)]

use std::sync::Arc;

use axum::body::{to_bytes, Body, Bytes};
use axum::http::{Request, StatusCode};
use axum::Router;
use patho_core::api::{encode_b64, DescriptorPayload};
use patho_core::synthetic::synthetic_fundus;
use patho_service::{router, AppState, ModelRegistry};
use tower::ServiceExt;

pub fn demo_app() -> Router {
    app_with(ModelRegistry::demo(0).unwrap())
}

pub fn app_with(registry: ModelRegistry) -> Router {
    router(AppState {
        registry: Arc::new(registry),
    })
}

pub async fn send(app: &Router, method: &str, path: &str, content_type: Option<&str>, body: Vec<u8>) -> (StatusCode, Bytes) {
    let mut req = Request::builder().method(method).uri(path);
    if let Some(ct) = content_type {
        req = req.header("content-type", ct);
    }
    let resp = app.clone().oneshot(req.body(Body::from(body)).unwrap()).await.unwrap();
    let status = resp.status();
    (status, to_bytes(resp.into_body(), usize::MAX).await.unwrap())
}

pub async fn post_json(app: &Router, path: &str, body: &serde_json::Value) -> (StatusCode, Bytes) {
    send(app, "POST", path, Some("application/json"), serde_json::to_vec(body).unwrap()).await
}

pub fn json(bytes: &Bytes) -> serde_json::Value {
    serde_json::from_slice(bytes).unwrap()
}

/// A 64 x 64 fixture fundus as base64 PNGs `(image, vessel)`.
pub fn fixture_pngs(grade: u8, seed: u64) -> (String, String) {
    let f = synthetic_fundus("fixture", 64, grade, seed);
    (
        encode_b64(&f.image.to_png_bytes().unwrap()),
        encode_b64(&f.vessel.to_png_bytes().unwrap()),
    )
}

pub fn empty_descriptors() -> DescriptorPayload {
    DescriptorPayload::from_set(&patho_core::descriptor::DescriptorSet::empty((64, 64)), "blank").unwrap()
}

pub enum Part<'a> {
    Text(&'a str, &'a str),
    File(&'a str, &'a str, &'a [u8]),
}

pub fn multipart(parts: &[Part<'_>]) -> (String, Vec<u8>) {
    let boundary = "patho-test-boundary";
    let mut body = Vec::new();
    for p in parts {
        body.extend_from_slice(format!("--{boundary}\r\n").as_bytes());
        match p {
            Part::Text(name, value) => {
                body.extend_from_slice(format!("Content-Disposition: form-data; name=\"{name}\"\r\n\r\n").as_bytes());
                body.extend_from_slice(value.as_bytes());
            }
            Part::File(name, filename, bytes) => {
                body.extend_from_slice(
                    format!(
                        "Content-Disposition: form-data; name=\"{name}\"; filename=\"{filename}\"\r\nContent-Type: application/octet-stream\r\n\r\n"
                    )
                    .as_bytes(),
                );
                body.extend_from_slice(bytes);
            }
        }
        body.extend_from_slice(b"\r\n");
    }
    body.extend_from_slice(format!("--{boundary}--\r\n").as_bytes());
    (format!("multipart/form-data; boundary={boundary}"), body)
}
