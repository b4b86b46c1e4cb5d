use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use casegraph_core::diagnosis::DiagnosisError;
use casegraph_core::evidence::EvidenceError;
use casegraph_core::evolution::EvolutionError;
use casegraph_core::gateway::GatewayError;
use casegraph_core::history::HistoryError;
use casegraph_core::kg::KgError;
use casegraph_core::layout::LayoutError;
use serde_json::json;

/// Error body: `{"error": {"code", "message"}}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    pub fn unauthorized(m: impl Into<String>) -> Self {
        Self::new(StatusCode::UNAUTHORIZED, "unauthorized", m)
    }

    pub fn forbidden(m: impl Into<String>) -> Self {
        Self::new(StatusCode::FORBIDDEN, "forbidden", m)
    }

    pub fn not_found(m: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", m)
    }

    pub fn conflict(m: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, "conflict", m)
    }

    pub fn invalid(m: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid", m)
    }

    pub fn internal(m: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", m)
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {}: {}",
            self.status.as_u16(),
            self.code,
            self.message
        )
    }
}

impl std::error::Error for ApiError {}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({"error": {"code": self.code, "message": self.message}});
        (self.status, Json(body)).into_response()
    }
}

impl From<GatewayError> for ApiError {
    fn from(e: GatewayError) -> Self {
        Self::new(StatusCode::BAD_GATEWAY, "llm", e.to_string())
    }
}

impl From<KgError> for ApiError {
    fn from(e: KgError) -> Self {
        match e {
            KgError::NotFound(_) | KgError::TripleNotFound(_) => Self::not_found(e.to_string()),
            KgError::Io(_) | KgError::Journal { .. } => Self::internal(e.to_string()),
            _ => Self::invalid(e.to_string()),
        }
    }
}

impl From<HistoryError> for ApiError {
    fn from(e: HistoryError) -> Self {
        match e {
            HistoryError::Gateway(g) => g.into(),
            HistoryError::InvalidState(m) => Self::conflict(m),
            HistoryError::Config(m) => Self::invalid(m),
        }
    }
}

impl From<DiagnosisError> for ApiError {
    fn from(e: DiagnosisError) -> Self {
        match e {
            DiagnosisError::Gateway(g) => g.into(),
            DiagnosisError::Kg(k) => k.into(),
            other => Self::invalid(other.to_string()),
        }
    }
}

impl From<EvidenceError> for ApiError {
    fn from(e: EvidenceError) -> Self {
        match e {
            EvidenceError::Gateway(g) => g.into(),
            EvidenceError::Kg(k) => k.into(),
            EvidenceError::Finalized => Self::conflict(e.to_string()),
            other => Self::invalid(other.to_string()),
        }
    }
}

impl From<EvolutionError> for ApiError {
    fn from(e: EvolutionError) -> Self {
        match e {
            EvolutionError::NotFound(_) => Self::not_found(e.to_string()),
            EvolutionError::VersionConflict { .. }
            | EvolutionError::InvalidState { .. }
            | EvolutionError::MergeConflict(_) => Self::conflict(e.to_string()),
            EvolutionError::Gateway(g) => g.into(),
            EvolutionError::Io(m) => Self::internal(m),
            other => Self::invalid(other.to_string()),
        }
    }
}

impl From<LayoutError> for ApiError {
    fn from(e: LayoutError) -> Self {
        match e {
            LayoutError::UnknownDiagnosis(_) | LayoutError::UnknownNode(_) => {
                Self::not_found(e.to_string())
            }
            other => Self::invalid(other.to_string()),
        }
    }
}
