use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use vstpr_core::Error;
use vstpr_protocol::ApiError;

/// An error reply: status plus [`ApiError`] body.
#[derive(Debug, Clone)]
pub struct Failure {
    pub status: StatusCode,
    pub body: ApiError,
}

impl Failure {
    pub fn new(status: StatusCode, error: impl Into<String>) -> Self {
        Failure {
            status,
            body: ApiError {
                error: error.into(),
                field: None,
            },
        }
    }

    pub fn bad_request(error: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, error)
    }

    pub fn not_found(error: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, error)
    }

    pub fn conflict(error: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, error)
    }

    pub fn internal(error: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, error)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::InvalidConfig { .. }
            | Error::Parse { .. }
            | Error::Input(_)
            | Error::BadBand { .. }
            | Error::GeometryMismatch(_) => StatusCode::BAD_REQUEST,
            Error::FitFailed { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let field = match &e {
            Error::InvalidConfig { field, .. } => Some(field.clone()),
            _ => None,
        };
        Failure {
            status,
            body: ApiError {
                error: e.to_string(),
                field,
            },
        }
    }
}

impl IntoResponse for Failure {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.status, self.body.error)
    }
}
