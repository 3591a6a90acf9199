//! HTTP/JSON schema shared by the service, the client and the UI. Images
//! travel as base64 PNG; descriptor crops as a base64 safetensors archive.
//! See `docs/api.md`.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::archive::TensorArchive;
use crate::checkpoint::ModelKind;
use crate::descriptor::{DescriptorDocument, DescriptorSet, EditOp, LocateParams};
use crate::error::{Error, Result};
use crate::imaging::{RetinalImage, VesselMask};

pub const API_VERSION: &str = "patho-api/1";

pub fn encode_b64(bytes: &[u8]) -> String {
    B64.encode(bytes)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

pub fn decode_b64(field: &str, text: &str) -> Result<Vec<u8>> {
    B64.decode(text.trim())
        .map_err(|e| Error::Invalid(format!("field `{field}` is not valid base64: {e}")))
}

pub fn decode_image(field: &str, text: &str) -> Result<RetinalImage> {
    RetinalImage::from_png_bytes(&decode_b64(field, text)?)
}

pub fn decode_vessel(field: &str, text: &str) -> Result<VesselMask> {
    VesselMask::from_png_bytes(&decode_b64(field, text)?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelInfo {
    pub id: String,
    pub kind: ModelKind,
    pub image_size: usize,
    /// SHA-256 over the parameters.
    pub fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelsResponse {
    pub api_version: String,
    pub models: Vec<ModelInfo>,
}

/// A descriptor document with its crops inlined.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DescriptorPayload {
    pub document: DescriptorDocument,
    /// Base64 safetensors archive holding the crops named in `document`.
    pub archive: String,
}

impl DescriptorPayload {
    pub fn from_set(set: &DescriptorSet, image_id: &str) -> Result<Self> {
        let (document, archive) = DescriptorDocument::from_set(set, image_id)?;
        Ok(Self {
            document,
            archive: encode_b64(&archive.to_bytes()?),
        })
    }

    pub fn to_set(&self) -> Result<DescriptorSet> {
        let archive = TensorArchive::from_bytes(&decode_b64("archive", &self.archive)?)?;
        self.document.to_set(&archive)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractRequest {
    pub detector: String,
    pub image_id: String,
    /// Base64 PNG.
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub locate: Option<LocateParams>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractResponse {
    pub api_version: String,
    pub descriptors: DescriptorPayload,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    pub generator: String,
    /// Base64 PNG vessel mask, values `{0, 255}`.
    pub vessel: String,
    pub descriptors: DescriptorPayload,
    pub seed: u64,
    /// Optional base64 PNG field-of-view mask to crop the output with.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fov: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateResponse {
    pub api_version: String,
    /// Base64 PNG.
    pub image: String,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// SHA-256 of the decoded PNG bytes.
    pub image_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeverityRequest {
    pub detector: String,
    pub image: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeverityResponse {
    pub api_version: String,
    pub score: f64,
    pub grade: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManipulateRequest {
    pub descriptors: DescriptorPayload,
    pub ops: Vec<EditOp>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManipulateResponse {
    pub api_version: String,
    pub descriptors: DescriptorPayload,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    BadRequest,
    ModelNotLoaded,
    NumericFailure,
    Internal,
}

impl ErrorCode {
    pub fn status(self) -> u16 {
        match self {
            Self::BadRequest => 400,
            Self::ModelNotLoaded => 409,
            Self::NumericFailure | Self::Internal => 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorBody {
    pub error: ErrorCode,
    pub message: String,
    /// Present on 500s; matches the server log line.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_id: Option<String>,
}

/// Which code a library error maps to.
pub fn classify(err: &Error) -> ErrorCode {
    match err {
        Error::NonFinite { .. } | Error::NotPsd(_) | Error::Diverged { .. } => ErrorCode::NumericFailure,
        Error::Io(_) | Error::WeightsUnavailable { .. } => ErrorCode::Internal,
        _ => ErrorCode::BadRequest,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptor::{LesionBox, PathologicalDescriptor};
    use crate::nn::Tensor;

    #[test]
    fn payload_roundtrip() {
        let set = DescriptorSet {
            descriptors: vec![PathologicalDescriptor {
                id: 3,
                bbox: LesionBox::new(1, 2, 3, 4).unwrap(),
                crops: vec![Tensor::from_elem((1, 2, 2, 2), 0.5)],
            }],
            image_size: (16, 16),
        };
        let p = DescriptorPayload::from_set(&set, "img").unwrap();
        let json = serde_json::to_string(&p).unwrap();
        let back: DescriptorPayload = serde_json::from_str(&json).unwrap();
        assert_eq!(back.to_set().unwrap(), set);
    }

    #[test]
    fn edit_ops_wire_format() {
        let ops: Vec<EditOp> = serde_json::from_str(
            r#"[{"op":"move","id":1,"left":2,"top":3},{"op":"clone","id":1,"left":0,"top":0},{"op":"remove","id":0},{"op":"remove-all"}]"#,
        )
        .unwrap();
        assert_eq!(ops.len(), 4);
        assert_eq!(ops[3], EditOp::RemoveAll);
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(serde_json::from_str::<SeverityRequest>(r#"{"detector":"d","image":"","x":1}"#).is_err());
        assert_eq!(ErrorCode::ModelNotLoaded.status(), 409);
        assert_eq!(serde_json::to_string(&ErrorCode::ModelNotLoaded).unwrap(), "\"model_not_loaded\"");
    }
}
