use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use patho_core::api::{classify, ErrorBody, ErrorCode};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub code: ErrorCode,
    pub message: String,
}

impl ApiError {
    pub fn bad_request(message: impl Into<String>) -> Self {
        Self {
            code: ErrorCode::BadRequest,
            message: message.into(),
        }
    }

    pub fn model_not_loaded(message: impl Into<String>) -> Self {
        Self {
            code: ErrorCode::ModelNotLoaded,
            message: message.into(),
        }
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self {
            code: ErrorCode::Internal,
            message: message.into(),
        }
    }
}

impl From<patho_core::Error> for ApiError {
    fn from(e: patho_core::Error) -> Self {
        Self {
            code: classify(&e),
            message: e.to_string(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.code.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        let trace_id = status.is_server_error().then(|| {
            let id = uuid::Uuid::new_v4().to_string();
            log::error!("trace {id}: {:?}: {}", self.code, self.message);
            id
        });
        let body = ErrorBody {
            error: self.code,
            message: self.message,
            trace_id,
        };
        (status, Json(body)).into_response()
    }
}
