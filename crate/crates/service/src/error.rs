use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;

use crate::api::ErrorBody;

#[derive(Debug)]
pub enum ApiError {
    BadRequest { kind: String, message: String },
    NotFound(String),
    Stale { current: u64, given: u64 },
    Internal(String),
}

impl ApiError {
    pub fn bad(kind: &str, message: impl Into<String>) -> Self {
        ApiError::BadRequest {
            kind: kind.into(),
            message: message.into(),
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::BadRequest { .. } => StatusCode::BAD_REQUEST,
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::Stale { .. } => StatusCode::CONFLICT,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

/// Variant name of a core error, e.g. `OverLength`.
fn kind(e: &stori_core::Error) -> String {
    let debug = format!("{e:?}");
    debug
        .split(|c: char| !c.is_alphanumeric())
        .next()
        .unwrap_or("Error")
        .to_string()
}

impl From<stori_core::Error> for ApiError {
    fn from(e: stori_core::Error) -> Self {
        if e.is_validation() {
            ApiError::BadRequest {
                kind: kind(&e),
                message: e.to_string(),
            }
        } else {
            ApiError::Internal(e.to_string())
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = self.status();
        let body = match self {
            ApiError::BadRequest { kind, message } => ErrorBody {
                error: kind,
                message,
                revision: None,
            },
            ApiError::NotFound(message) => ErrorBody {
                error: "NotFound".into(),
                message,
                revision: None,
            },
            ApiError::Stale { current, given } => ErrorBody {
                error: "StaleRevision".into(),
                message: format!("update based on revision {given}, session is at {current}"),
                revision: Some(current),
            },
            ApiError::Internal(message) => {
                log::error!("{message}");
                ErrorBody {
                    error: "Internal".into(),
                    message,
                    revision: None,
                }
            }
        };
        (status, Json(body)).into_response()
    }
}
