//! Thin async client for the patho HTTP API.

use patho_core::api::{
    decode_image, encode_b64, DescriptorPayload, ErrorBody, ExtractRequest, ExtractResponse, GenerateRequest,
    GenerateResponse, ManipulateRequest, ManipulateResponse, ModelsResponse, SeverityRequest, SeverityResponse,
};
use patho_core::descriptor::{DescriptorSet, EditOp};
use patho_core::imaging::{RetinalImage, VesselMask};
use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("request failed: {0}")]
    Http(#[from] reqwest::Error),
    #[error("server answered {status}: {}", body.message)]
    Api { status: u16, body: ErrorBody },
    #[error("server answered {status} with an unexpected body: {text}")]
    Unexpected { status: u16, text: String },
    #[error(transparent)]
    Core(#[from] patho_core::Error),
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Debug, Clone)]
pub struct PathoClient {
    base: String,
    http: reqwest::Client,
}

impl PathoClient {
    /// `base_url` like `http://127.0.0.1:8080`.
    pub fn new(base_url: &str) -> Self {
        Self {
            base: base_url.trim_end_matches('/').to_string(),
            http: reqwest::Client::new(),
        }
    }

    async fn decode<T: DeserializeOwned>(resp: reqwest::Response) -> Result<T> {
        let status = resp.status().as_u16();
        let text = resp.text().await?;
        if (200..300).contains(&status) {
            return serde_json::from_str(&text).map_err(|_| ClientError::Unexpected { status, text });
        }
        match serde_json::from_str::<ErrorBody>(&text) {
            Ok(body) => Err(ClientError::Api { status, body }),
            Err(_) => Err(ClientError::Unexpected { status, text }),
        }
    }

    async fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T> {
        let resp = self.http.post(format!("{}{path}", self.base)).json(body).send().await?;
        Self::decode(resp).await
    }

    pub async fn models(&self) -> Result<ModelsResponse> {
        Self::decode(self.http.get(format!("{}/models", self.base)).send().await?).await
    }

    pub async fn extract(&self, req: &ExtractRequest) -> Result<ExtractResponse> {
        self.post("/extract", req).await
    }

    pub async fn generate(&self, req: &GenerateRequest) -> Result<GenerateResponse> {
        self.post("/generate", req).await
    }

    pub async fn severity(&self, req: &SeverityRequest) -> Result<SeverityResponse> {
        self.post("/severity", req).await
    }

    pub async fn manipulate(&self, req: &ManipulateRequest) -> Result<ManipulateResponse> {
        self.post("/manipulate", req).await
    }

    /// Extract descriptors from an image; returns the set and any warnings.
    pub async fn extract_image(
        &self,
        detector: &str,
        image_id: &str,
        image: &RetinalImage,
    ) -> Result<(DescriptorSet, Vec<String>)> {
        let resp = self
            .extract(&ExtractRequest {
                detector: detector.into(),
                image_id: image_id.into(),
                image: encode_b64(&image.to_png_bytes()?),
                locate: None,
            })
            .await?;
        Ok((resp.descriptors.to_set()?, resp.warnings))
    }

    pub async fn generate_image(
        &self,
        generator: &str,
        vessel: &VesselMask,
        set: &DescriptorSet,
        seed: u64,
    ) -> Result<RetinalImage> {
        let resp = self
            .generate(&GenerateRequest {
                generator: generator.into(),
                vessel: encode_b64(&vessel.to_png_bytes()?),
                descriptors: DescriptorPayload::from_set(set, "request")?,
                seed,
                fov: None,
            })
            .await?;
        Ok(decode_image("image", &resp.image)?)
    }

    pub async fn severity_image(&self, detector: &str, image: &RetinalImage) -> Result<SeverityResponse> {
        self.severity(&SeverityRequest {
            detector: detector.into(),
            image: encode_b64(&image.to_png_bytes()?),
        })
        .await
    }

    pub async fn manipulate_set(&self, set: &DescriptorSet, image_id: &str, ops: &[EditOp]) -> Result<DescriptorSet> {
        let resp = self
            .manipulate(&ManipulateRequest {
                descriptors: DescriptorPayload::from_set(set, image_id)?,
                ops: ops.to_vec(),
            })
            .await?;
        Ok(resp.descriptors.to_set()?)
    }
}
