//! Wire envelope and the mapping from library errors to HTTP statuses.

use axum::http::{HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Json;
use netcomb_core::combined::SimError;
use netcomb_core::csi::CsiError;
use netcomb_core::rl::EnvError;
use netcomb_core::scenario::{load_scenario, ScenarioError};
use netcomb_core::store::StoreError;
use netcomb_core::traffic::TrafficError;
use netcomb_core::users::UserError;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub const API_VERSION: &str = concat!("netcomb/", env!("CARGO_PKG_VERSION"));
pub const REQUEST_ID_HEADER: &str = "x-request-id";
pub const RUN_ID_HEADER: &str = "x-run-id";
pub const CHECKSUM_HEADER: &str = "x-netcomb-checksum";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiEnvelope<T> {
    pub request_id: String,
    pub version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub body: Option<T>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorBody>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    /// Dotted path into the request body, when one field is to blame.
    #[serde(default)]
    pub field: Option<String>,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub details: Value,
}

#[derive(Debug, Clone)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            body: ErrorBody {
                code: code.into(),
                message: message.into(),
                field: None,
                details: Value::Null,
            },
        }
    }

    pub fn field(mut self, field: impl Into<String>) -> Self {
        self.body.field = Some(field.into());
        self
    }

    pub fn details(mut self, details: Value) -> Self {
        self.body.details = details;
        self
    }

    pub fn invalid(field: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid_request", message).field(field)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    pub fn conflict(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, "conflict", message)
    }

    pub fn guard(what: &str, requested: u64, limit: u64) -> Self {
        Self::new(
            StatusCode::TOO_MANY_REQUESTS,
            "resource_guard",
            format!("{what}: requested {requested} exceeds limit {limit}"),
        )
        .details(json!({ "what": what, "requested": requested, "limit": limit }))
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

fn prefixed(prefix: &str, field: &str) -> String {
    if field.is_empty() {
        prefix.to_string()
    } else {
        format!("{prefix}.{field}")
    }
}

impl From<ScenarioError> for ApiError {
    fn from(e: ScenarioError) -> Self {
        let field = prefixed("scenario", e.field().unwrap_or(""));
        ApiError::invalid(&field, e.to_string())
    }
}

impl From<UserError> for ApiError {
    fn from(e: UserError) -> Self {
        match &e {
            UserError::TooManyUsers { requested, max } => {
                ApiError::guard("users", *requested as u64, *max as u64)
            }
            UserError::InvalidMobility { field, .. } => {
                ApiError::invalid(&prefixed("mobility", field), e.to_string())
            }
        }
    }
}

impl From<SimError> for ApiError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Scenario(e) => e.into(),
            SimError::Users(e) => e.into(),
            SimError::InvalidRequest { ref field, .. } => ApiError::invalid(field, e.to_string()),
            SimError::ResourceGuard {
                ref what,
                requested,
                limit,
            } => ApiError::guard(what, requested, limit),
            SimError::Cancelled => {
                ApiError::new(StatusCode::CONFLICT, "cancelled", "run cancelled")
            }
            SimError::Channel(e) => ApiError::internal(e.to_string()),
        }
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound(_) => ApiError::not_found(e.to_string()),
            StoreError::Conflict(_) => ApiError::conflict(e.to_string()),
            StoreError::InvalidKey(_) => ApiError::invalid("key", e.to_string()),
            other => ApiError::internal(other.to_string()),
        }
    }
}

impl From<CsiError> for ApiError {
    fn from(e: CsiError) -> Self {
        match e {
            CsiError::Sim(e) => e.into(),
            CsiError::Store(e) => e.into(),
            CsiError::Invalid { ref field, .. } => ApiError::invalid(field, e.to_string()),
            CsiError::Shape { index, .. } => {
                ApiError::new(StatusCode::BAD_REQUEST, "shape_mismatch", e.to_string())
                    .field(format!("restored[{index}]"))
            }
            CsiError::Codec { index, .. } => {
                ApiError::new(StatusCode::BAD_REQUEST, "codec_error", e.to_string())
                    .field(format!("restored[{index}]"))
            }
            CsiError::Empty => {
                ApiError::new(StatusCode::BAD_REQUEST, "empty", e.to_string()).field("restored")
            }
            CsiError::Malformed(_) => ApiError::internal(e.to_string()),
        }
    }
}

impl From<TrafficError> for ApiError {
    fn from(e: TrafficError) -> Self {
        match e {
            TrafficError::Invalid { ref field, .. } => ApiError::invalid(field, e.to_string()),
            TrafficError::VenueOutside => ApiError::invalid("venue_center", e.to_string()),
            TrafficError::NoCells { .. } => ApiError::invalid("radius", e.to_string()),
            TrafficError::Mismatch(_) => {
                ApiError::new(StatusCode::BAD_REQUEST, "mismatch", e.to_string())
            }
            TrafficError::EmptyHistory => ApiError::invalid("history", e.to_string()),
            TrafficError::Format { line, .. } => {
                ApiError::new(StatusCode::BAD_REQUEST, "series_format", e.to_string())
                    .details(json!({ "line": line }))
            }
            TrafficError::Users(e) => e.into(),
        }
    }
}

impl From<EnvError> for ApiError {
    fn from(e: EnvError) -> Self {
        match e {
            EnvError::Sim(e) => e.into(),
            EnvError::EpisodeLength => ApiError::invalid("episode_len", e.to_string()),
            EnvError::TickNotOneSecond(_) => ApiError::invalid("scenario.tick", e.to_string()),
            EnvError::OffGrid { cell_id, ref error } => {
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "off_grid", e.to_string())
                    .details(json!({ "cell_id": cell_id, "offending": error.offending }))
            }
            EnvError::ActionCells {
                ref missing,
                ref unexpected,
            } => ApiError::invalid("cells", e.to_string())
                .details(json!({ "missing": missing, "unexpected": unexpected })),
            EnvError::EpisodeDone => {
                ApiError::new(StatusCode::CONFLICT, "episode_done", e.to_string())
            }
            EnvError::NotReset => ApiError::new(StatusCode::CONFLICT, "not_reset", e.to_string()),
        }
    }
}

/// Parses a JSON body, reporting the path of the first offending field. A
/// top-level `scenario` object goes through the scenario loader so that wire
/// documents get the same defaults as scenario files.
pub fn parse_body<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, ApiError> {
    let mut value: Value = serde_json::from_slice(bytes)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "malformed_body", e.to_string()))?;
    if let Some(s) = value.get_mut("scenario").filter(|s| s.is_object()) {
        let scenario = load_scenario(&s.to_string())?;
        *s = serde_json::to_value(scenario).map_err(|e| ApiError::internal(e.to_string()))?;
    }
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        ApiError::new(
            StatusCode::BAD_REQUEST,
            "malformed_body",
            e.inner().to_string(),
        )
        .field(if path == "." { String::new() } else { path })
    })
}

fn with_request_id(mut response: Response, request_id: &str) -> Response {
    if let Ok(v) = HeaderValue::from_str(request_id) {
        response.headers_mut().insert(REQUEST_ID_HEADER, v);
    }
    response
}

/// Wraps a handler outcome in the envelope.
pub fn respond<T: Serialize>(request_id: &str, result: Result<T, ApiError>) -> Response {
    let (status, envelope) = match result {
        Ok(body) => (
            StatusCode::OK,
            ApiEnvelope {
                request_id: request_id.to_string(),
                version: API_VERSION.into(),
                body: Some(body),
                error: None,
            },
        ),
        Err(e) => (
            e.status,
            ApiEnvelope {
                request_id: request_id.to_string(),
                version: API_VERSION.into(),
                body: None,
                error: Some(e.body),
            },
        ),
    };
    with_request_id((status, Json(envelope)).into_response(), request_id)
}

/// Raw bytes on success, the usual envelope on failure.
pub fn respond_bytes(request_id: &str, result: Result<(Vec<u8>, HeaderMap), ApiError>) -> Response {
    match result {
        Ok((bytes, headers)) => {
            let mut r = (
                StatusCode::OK,
                [(axum::http::header::CONTENT_TYPE, "application/octet-stream")],
                bytes,
            )
                .into_response();
            r.headers_mut().extend(headers);
            with_request_id(r, request_id)
        }
        Err(e) => respond::<()>(request_id, Err(e)),
    }
}

/// Echoes the caller's request id, or makes one up.
pub fn request_id(headers: &HeaderMap) -> String {
    headers
        .get(REQUEST_ID_HEADER)
        .and_then(|v| v.to_str().ok())
        .filter(|s| !s.is_empty() && s.len() <= 128)
        .map(str::to_string)
        .unwrap_or_else(|| uuid::Uuid::new_v4().to_string())
}
