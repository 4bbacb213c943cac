use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde_json::json;
use tilescope_core::{Error, ErrorCode};

/// An error rendered as `{"error": {"code", "message", ...}}`.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: ErrorCode,
    pub message: String,
    pub detail: Option<serde_json::Value>,
}

pub fn status_for(code: ErrorCode) -> StatusCode {
    match code {
        ErrorCode::InvalidRequest => StatusCode::BAD_REQUEST,
        ErrorCode::LevelOutOfRange
        | ErrorCode::TileOutOfRange
        | ErrorCode::RegionOutOfBounds
        | ErrorCode::SlideNotFound
        | ErrorCode::SessionNotFound
        | ErrorCode::RouteNotFound => StatusCode::NOT_FOUND,
        ErrorCode::RegionTooLarge => StatusCode::PAYLOAD_TOO_LARGE,
        ErrorCode::Unsupported => StatusCode::UNPROCESSABLE_ENTITY,
        ErrorCode::SlideExists | ErrorCode::IndexRequired => StatusCode::CONFLICT,
        ErrorCode::StoreCorrupt | ErrorCode::IoError | ErrorCode::CodecError | ErrorCode::ConfigError => {
            StatusCode::INTERNAL_SERVER_ERROR
        }
        ErrorCode::UpstreamError => StatusCode::BAD_GATEWAY,
        ErrorCode::UpstreamTimeout => StatusCode::GATEWAY_TIMEOUT,
    }
}

impl ApiError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        ApiError {
            status: status_for(code),
            code,
            message: message.into(),
            detail: None,
        }
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        ApiError::new(ErrorCode::InvalidRequest, message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let detail = match &e {
            Error::RegionTooLarge { area, limit } => Some(json!({ "area": area, "limit": limit })),
            Error::LevelOutOfRange { level, max_level } => Some(json!({ "level": level, "valid": [0, max_level] })),
            Error::TileOutOfRange {
                level,
                col,
                row,
                cols,
                rows,
            } => Some(json!({
                "level": level, "col": col, "row": row, "cols": cols, "rows": rows
            })),
            Error::Upstream { status: Some(s), .. } => Some(json!({ "upstream_status": s })),
            _ => None,
        };
        let code = e.code();
        if status_for(code).is_server_error() {
            tracing::error!(code = %code, error = %e, "request failed");
        }
        ApiError {
            status: status_for(code),
            code,
            message: e.to_string(),
            detail,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut err = json!({ "code": self.code, "message": self.message });
        if let Some(d) = self.detail {
            err["detail"] = d;
        }
        (self.status, Json(json!({ "error": err }))).into_response()
    }
}

pub type ApiResult<T> = std::result::Result<T, ApiError>;
