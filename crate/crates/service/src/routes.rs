//! Handlers. Every POST accepts `application/json` or `multipart/form-data`.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Request, State};
use axum::http::header::CONTENT_TYPE;
use axum::routing::{get, post};
use axum::{Json, Router};
use patho_core::api::{
    decode_image, decode_vessel, encode_b64, sha256_hex, DescriptorPayload, ExtractRequest, ExtractResponse,
    GenerateRequest, GenerateResponse, ManipulateRequest, ManipulateResponse, ModelsResponse, SeverityRequest,
    SeverityResponse, API_VERSION,
};
use patho_core::checkpoint::ModelKind;
use patho_core::descriptor::{apply_edits, describe_image, LocateParams};
use patho_core::pathogan::NoiseCode;
use patho_core::preprocess::crop_to_fov;
use serde::de::DeserializeOwned;
use serde_json::{Map, Value};
use tower_http::cors::CorsLayer;

use crate::error::ApiError;
use crate::registry::{LoadedModel, ModelRegistry};

/// Request bodies up to 64 MiB (512 x 512 PNGs plus crop archives).
pub const BODY_LIMIT: usize = 64 << 20;

#[derive(Clone)]
pub struct AppState {
    pub registry: Arc<ModelRegistry>,
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/models", get(models))
        .route("/extract", post(extract))
        .route("/generate", post(generate))
        .route("/severity", post(severity))
        .route("/manipulate", post(manipulate))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

/// Multipart form fields whose text is parsed as JSON rather than taken as
/// a string. File parts become base64 strings.
pub trait MultipartSchema {
    const JSON_FIELDS: &'static [&'static str];
}

impl MultipartSchema for ExtractRequest {
    const JSON_FIELDS: &'static [&'static str] = &["locate"];
}

impl MultipartSchema for GenerateRequest {
    const JSON_FIELDS: &'static [&'static str] = &["seed", "descriptors", "document"];
}

impl MultipartSchema for SeverityRequest {
    const JSON_FIELDS: &'static [&'static str] = &[];
}

impl MultipartSchema for ManipulateRequest {
    const JSON_FIELDS: &'static [&'static str] = &["ops", "descriptors", "document"];
}

/// A JSON or multipart body decoded into `T`; failures are 400s.
pub struct Payload<T>(pub T);

impl<S, T> FromRequest<S> for Payload<T>
where
    S: Send + Sync,
    T: DeserializeOwned + MultipartSchema,
{
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        let ct = req
            .headers()
            .get(CONTENT_TYPE)
            .and_then(|v| v.to_str().ok())
            .unwrap_or("application/json")
            .to_ascii_lowercase();
        let value = if ct.starts_with("multipart/form-data") {
            let mp = Multipart::from_request(req, state)
                .await
                .map_err(|e| ApiError::bad_request(e.body_text()))?;
            multipart_to_json::<T>(mp).await?
        } else if ct.starts_with("application/json") {
            let body = Bytes::from_request(req, state)
                .await
                .map_err(|e| ApiError::bad_request(e.body_text()))?;
            serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("malformed JSON body: {e}")))?
        } else {
            return Err(ApiError::bad_request(format!("unsupported content type `{ct}`")));
        };
        serde_json::from_value(value)
            .map(Payload)
            .map_err(|e| ApiError::bad_request(format!("request does not match schema: {e}")))
    }
}

async fn multipart_to_json<T: MultipartSchema>(mut mp: Multipart) -> Result<Value, ApiError> {
    let bad = |e: axum::extract::multipart::MultipartError| ApiError::bad_request(e.body_text());
    let mut map = Map::new();
    while let Some(field) = mp.next_field().await.map_err(bad)? {
        let name = field.name().unwrap_or_default().to_string();
        let is_file = field.file_name().is_some();
        let json = T::JSON_FIELDS.contains(&name.as_str());
        let bytes = field.bytes().await.map_err(bad)?;
        let value = if json {
            serde_json::from_slice(&bytes).map_err(|e| ApiError::bad_request(format!("field `{name}`: {e}")))?
        } else if is_file {
            Value::String(encode_b64(&bytes))
        } else {
            Value::String(
                String::from_utf8(bytes.to_vec())
                    .map_err(|_| ApiError::bad_request(format!("field `{name}` is not UTF-8 text")))?,
            )
        };
        map.insert(name, value);
    }
    // Descriptors may come as a `document` JSON part plus an `archive` file.
    if !map.contains_key("descriptors") && map.contains_key("document") && map.contains_key("archive") {
        let document = map.remove("document").expect("checked");
        let archive = map.remove("archive").expect("checked");
        map.insert("descriptors".into(), serde_json::json!({ "document": document, "archive": archive }));
    }
    Ok(Value::Object(map))
}

async fn models(State(st): State<AppState>) -> Json<ModelsResponse> {
    Json(ModelsResponse {
        api_version: API_VERSION.into(),
        models: st.registry.infos(),
    })
}

async fn extract(
    State(st): State<AppState>,
    Payload(req): Payload<ExtractRequest>,
) -> Result<Json<ExtractResponse>, ApiError> {
    let image = decode_image("image", &req.image)?;
    let ExtractRequest {
        detector: id,
        image_id,
        locate,
        ..
    } = req;
    let (descriptors, warnings) = st
        .registry
        .run(&id, ModelKind::Detector, move |m| {
            let LoadedModel::Detector { detector, net } = m else {
                unreachable!("kind checked by the registry")
            };
            let params = locate.unwrap_or_else(|| LocateParams::for_size(detector.config().input_size));
            let ex = describe_image(detector, net, &image, &params)?;
            Ok((DescriptorPayload::from_set(&ex.set, &image_id)?, ex.warnings))
        })
        .await?;
    Ok(Json(ExtractResponse {
        api_version: API_VERSION.into(),
        descriptors,
        warnings,
    }))
}

async fn generate(
    State(st): State<AppState>,
    Payload(req): Payload<GenerateRequest>,
) -> Result<Json<GenerateResponse>, ApiError> {
    let vessel = decode_vessel("vessel", &req.vessel)?;
    let set = req.descriptors.to_set()?;
    let fov = match &req.fov {
        Some(f) => Some(decode_vessel("fov", f)?.data().mapv(|v| v > 0.5)),
        None => None,
    };
    let seed = req.seed;
    let (png, height, width) = st
        .registry
        .run(&req.generator, ModelKind::Generator, move |m| {
            let LoadedModel::Generator(g) = m else {
                unreachable!("kind checked by the registry")
            };
            let mut image = g.generate(&vessel, &set, &NoiseCode::for_seed(g.config().noise_dim, seed))?;
            if let Some(f) = &fov {
                image = crop_to_fov(&image, f)?;
            }
            Ok((image.to_png_bytes()?, image.height(), image.width()))
        })
        .await?;
    Ok(Json(GenerateResponse {
        api_version: API_VERSION.into(),
        image_sha256: sha256_hex(&png),
        image: encode_b64(&png),
        height,
        width,
        seed,
    }))
}

async fn severity(
    State(st): State<AppState>,
    Payload(req): Payload<SeverityRequest>,
) -> Result<Json<SeverityResponse>, ApiError> {
    let image = decode_image("image", &req.image)?;
    let score = st
        .registry
        .run(&req.detector, ModelKind::Detector, move |m| {
            let LoadedModel::Detector { detector, .. } = m else {
                unreachable!("kind checked by the registry")
            };
            let s = detector.config().input_size;
            detector.predict_severity(&image.resized(s, s))
        })
        .await?;
    Ok(Json(SeverityResponse {
        api_version: API_VERSION.into(),
        score: score.0,
        grade: score.grade(),
    }))
}

async fn manipulate(Payload(req): Payload<ManipulateRequest>) -> Result<Json<ManipulateResponse>, ApiError> {
    let set = req.descriptors.to_set()?;
    let edited = apply_edits(&set, &req.ops)?;
    Ok(Json(ManipulateResponse {
        api_version: API_VERSION.into(),
        descriptors: DescriptorPayload::from_set(&edited, &req.descriptors.document.image_id)?,
    }))
}
