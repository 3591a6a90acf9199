mod common;

use axum::http::StatusCode;
use base64::Engine;
use common::*;
use patho_core::api::{ErrorBody, ErrorCode, ExtractResponse, GenerateResponse, ModelsResponse, SeverityResponse};
use patho_core::detector::{Detector, DetectorConfig};
use patho_core::imaging::RetinalImage;
use patho_core::pathogan::{Generator, GeneratorConfig};
use patho_service::ModelRegistry;
use serde_json::json;

fn error_code(body: &axum::body::Bytes) -> ErrorBody {
    serde_json::from_slice(body).unwrap()
}

#[tokio::test]
async fn lists_demo_models() {
    let app = demo_app();
    let (status, body) = send(&app, "GET", "/models", None, vec![]).await;
    assert_eq!(status, StatusCode::OK);
    let models: ModelsResponse = serde_json::from_slice(&body).unwrap();
    let ids: Vec<_> = models.models.iter().map(|m| m.id.as_str()).collect();
    assert_eq!(ids, ["detector-demo", "generator-demo"]);
    assert!(models.models.iter().all(|m| m.image_size == 64));
}

#[tokio::test]
async fn empty_descriptors_generate_a_lesion_free_image_deterministically() {
    let app = demo_app();
    let (_, vessel) = fixture_pngs(0, 1);
    let req = json!({"generator": "generator-demo", "vessel": vessel, "descriptors": empty_descriptors(), "seed": 7});
    let (status, a) = post_json(&app, "/generate", &req).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&a));
    let (_, b) = post_json(&app, "/generate", &req).await;
    assert_eq!(a, b);
    let resp: GenerateResponse = serde_json::from_slice(&a).unwrap();
    assert_eq!((resp.height, resp.width, resp.seed), (64, 64, 7));
    let png = base64::engine::general_purpose::STANDARD.decode(&resp.image).unwrap();
    assert_eq!(RetinalImage::from_png_bytes(&png).unwrap().hw(), (64, 64));
    let other = json!({"generator": "generator-demo", "vessel": vessel, "descriptors": empty_descriptors(), "seed": 8});
    let (_, c) = post_json(&app, "/generate", &other).await;
    assert_ne!(a, c);
}

#[tokio::test]
async fn extract_then_generate_roundtrip_keeps_target_size() {
    let app = demo_app();
    let (image, vessel) = fixture_pngs(4, 3);
    let (status, body) =
        post_json(&app, "/extract", &json!({"detector": "detector-demo", "image_id": "fx", "image": image})).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    let ex: ExtractResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(ex.descriptors.document.image_size, [64, 64]);
    assert_eq!(ex.descriptors.document.image_id, "fx");
    let (status, body) = post_json(
        &app,
        "/generate",
        &json!({"generator": "generator-demo", "vessel": vessel, "descriptors": ex.descriptors, "seed": 1}),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    let g: GenerateResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!((g.height, g.width), (64, 64));
}

#[tokio::test]
async fn severity_scores_and_grades() {
    let app = demo_app();
    let (image, _) = fixture_pngs(2, 5);
    let (status, body) = post_json(&app, "/severity", &json!({"detector": "detector-demo", "image": image})).await;
    assert_eq!(status, StatusCode::OK);
    let s: SeverityResponse = serde_json::from_slice(&body).unwrap();
    assert!(s.score.is_finite() && s.grade <= 4);
}

#[tokio::test]
async fn unknown_or_wrong_kind_model_is_409() {
    let app = demo_app();
    let (image, _) = fixture_pngs(1, 0);
    let (status, body) = post_json(&app, "/severity", &json!({"detector": "nope", "image": image})).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(error_code(&body).error, ErrorCode::ModelNotLoaded);
    let (status, _) = post_json(&app, "/severity", &json!({"detector": "generator-demo", "image": image})).await;
    assert_eq!(status, StatusCode::CONFLICT);
}

#[tokio::test]
async fn malformed_payloads_are_400() {
    let app = demo_app();
    let (status, body) = send(&app, "POST", "/extract", Some("application/json"), b"{".to_vec()).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(error_code(&body).error, ErrorCode::BadRequest);
    let (status, _) = post_json(&app, "/severity", &json!({"detector": "detector-demo", "image": "%%%"})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = post_json(&app, "/severity", &json!({"detector": "detector-demo"})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = send(&app, "POST", "/severity", Some("text/plain"), b"x".to_vec()).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    // A vessel mask of the wrong size.
    let small = patho_core::api::encode_b64(
        &patho_core::imaging::VesselMask::new(ndarray::Array2::zeros((32, 32))).unwrap().to_png_bytes().unwrap(),
    );
    let req = json!({"generator": "generator-demo", "vessel": small, "descriptors": empty_descriptors(), "seed": 0});
    let (status, _) = post_json(&app, "/generate", &req).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn numeric_failure_is_500_with_trace_id() {
    let detector = Detector::new(DetectorConfig::desk_64(), 0).unwrap();
    let mut generator = Generator::new(GeneratorConfig::desk_64().with_detector_taps(&detector), 1).unwrap();
    for (_, t) in generator.params_mut().params.iter_mut() {
        t.fill(f64::NAN);
    }
    let mut registry = ModelRegistry::new();
    registry.insert_generator("broken", generator);
    let app = app_with(registry);
    let (_, vessel) = fixture_pngs(0, 0);
    let req = json!({"generator": "broken", "vessel": vessel, "descriptors": empty_descriptors(), "seed": 0});
    let (status, body) = post_json(&app, "/generate", &req).await;
    assert_eq!(status, StatusCode::INTERNAL_SERVER_ERROR);
    let err = error_code(&body);
    assert_eq!(err.error, ErrorCode::NumericFailure);
    assert!(err.trace_id.is_some_and(|t| t.len() == 36));
}

#[tokio::test]
async fn multipart_matches_json() {
    let app = demo_app();
    let f = patho_core::synthetic::synthetic_fundus("mp", 64, 3, 2);
    let png = f.image.to_png_bytes().unwrap();
    let (ct, body) = multipart(&[
        Part::Text("detector", "detector-demo"),
        Part::Text("image_id", "mp"),
        Part::File("image", "mp.png", &png),
    ]);
    let (s1, via_mp) = send(&app, "POST", "/extract", Some(&ct), body).await;
    assert_eq!(s1, StatusCode::OK, "{}", String::from_utf8_lossy(&via_mp));
    let req = json!({"detector": "detector-demo", "image_id": "mp", "image": patho_core::api::encode_b64(&png)});
    let (_, via_json) = post_json(&app, "/extract", &req).await;
    assert_eq!(via_mp, via_json);

    // Descriptors as a document part plus an archive file.
    let ex: ExtractResponse = serde_json::from_slice(&via_json).unwrap();
    let archive = base64::engine::general_purpose::STANDARD.decode(&ex.descriptors.archive).unwrap();
    let doc = serde_json::to_string(&ex.descriptors.document).unwrap();
    let vessel = f.vessel.to_png_bytes().unwrap();
    let (ct, body) = multipart(&[
        Part::Text("generator", "generator-demo"),
        Part::Text("seed", "3"),
        Part::File("vessel", "v.png", &vessel),
        Part::Text("document", &doc),
        Part::File("archive", "d.safetensors", &archive),
    ]);
    let (s2, via_mp) = send(&app, "POST", "/generate", Some(&ct), body).await;
    assert_eq!(s2, StatusCode::OK, "{}", String::from_utf8_lossy(&via_mp));
    let req = json!({"generator": "generator-demo", "vessel": patho_core::api::encode_b64(&vessel), "descriptors": ex.descriptors, "seed": 3});
    let (_, via_json) = post_json(&app, "/generate", &req).await;
    assert_eq!(via_mp, via_json);
}

#[tokio::test]
async fn manipulate_applies_edits_in_order() {
    let app = demo_app();
    let (image, _) = fixture_pngs(4, 3);
    let (_, body) =
        post_json(&app, "/extract", &json!({"detector": "detector-demo", "image_id": "fx", "image": image})).await;
    let ex: ExtractResponse = serde_json::from_slice(&body).unwrap();
    let (status, body) = post_json(
        &app,
        "/manipulate",
        &json!({"descriptors": ex.descriptors, "ops": [{"op": "remove-all"}]}),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(json(&body)["descriptors"]["document"]["descriptors"], json!([]));
    let (status, _) = post_json(
        &app,
        "/manipulate",
        &json!({"descriptors": ex.descriptors, "ops": [{"op": "remove", "id": 999}]}),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_requests_agree() {
    let app = demo_app();
    let (_, vessel) = fixture_pngs(0, 9);
    let req = json!({"generator": "generator-demo", "vessel": vessel, "descriptors": empty_descriptors(), "seed": 4});
    let handles: Vec<_> = (0..4)
        .map(|_| {
            let app = app.clone();
            let req = req.clone();
            tokio::spawn(async move { post_json(&app, "/generate", &req).await })
        })
        .collect();
    let mut bodies = Vec::new();
    for h in handles {
        let (status, body) = h.await.unwrap();
        assert_eq!(status, StatusCode::OK);
        bodies.push(body);
    }
    assert!(bodies.windows(2).all(|w| w[0] == w[1]));
}
