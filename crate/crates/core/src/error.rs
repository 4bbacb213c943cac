use std::fmt;
use std::path::PathBuf;

use serde::Serialize;

pub type Result<T> = std::result::Result<T, Error>;

/// Stable machine-readable error codes shared by the HTTP API and the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErrorCode {
    InvalidRequest,
    LevelOutOfRange,
    TileOutOfRange,
    RegionOutOfBounds,
    RegionTooLarge,
    Unsupported,
    SlideNotFound,
    SlideExists,
    StoreCorrupt,
    IoError,
    CodecError,
    IndexRequired,
    SessionNotFound,
    UpstreamTimeout,
    UpstreamError,
    ConfigError,
    RouteNotFound,
}

impl ErrorCode {
    pub const ALL: [ErrorCode; 17] = [
        ErrorCode::InvalidRequest,
        ErrorCode::LevelOutOfRange,
        ErrorCode::TileOutOfRange,
        ErrorCode::RegionOutOfBounds,
        ErrorCode::RegionTooLarge,
        ErrorCode::Unsupported,
        ErrorCode::SlideNotFound,
        ErrorCode::SlideExists,
        ErrorCode::StoreCorrupt,
        ErrorCode::IoError,
        ErrorCode::CodecError,
        ErrorCode::IndexRequired,
        ErrorCode::SessionNotFound,
        ErrorCode::UpstreamTimeout,
        ErrorCode::UpstreamError,
        ErrorCode::ConfigError,
        ErrorCode::RouteNotFound,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::InvalidRequest => "INVALID_REQUEST",
            ErrorCode::LevelOutOfRange => "LEVEL_OUT_OF_RANGE",
            ErrorCode::TileOutOfRange => "TILE_OUT_OF_RANGE",
            ErrorCode::RegionOutOfBounds => "REGION_OUT_OF_BOUNDS",
            ErrorCode::RegionTooLarge => "REGION_TOO_LARGE",
            ErrorCode::Unsupported => "UNSUPPORTED",
            ErrorCode::SlideNotFound => "SLIDE_NOT_FOUND",
            ErrorCode::SlideExists => "SLIDE_EXISTS",
            ErrorCode::StoreCorrupt => "STORE_CORRUPT",
            ErrorCode::IoError => "IO_ERROR",
            ErrorCode::CodecError => "CODEC_ERROR",
            ErrorCode::IndexRequired => "INDEX_REQUIRED",
            ErrorCode::SessionNotFound => "SESSION_NOT_FOUND",
            ErrorCode::UpstreamTimeout => "UPSTREAM_TIMEOUT",
            ErrorCode::UpstreamError => "UPSTREAM_ERROR",
            ErrorCode::ConfigError => "CONFIG_ERROR",
            ErrorCode::RouteNotFound => "ROUTE_NOT_FOUND",
        }
    }
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("level {level} out of range; valid levels are [0, {max_level}]")]
    LevelOutOfRange { level: u32, max_level: u32 },

    #[error("tile ({col}, {row}) out of range at level {level}; grid is {cols}x{rows}")]
    TileOutOfRange {
        level: u32,
        col: u64,
        row: u64,
        cols: u64,
        rows: u64,
    },

    #[error("rectangle {0} lies outside the level bounds")]
    OutOfBounds(String),

    #[error("region of {area} pixels exceeds the limit of {limit} pixels")]
    RegionTooLarge { area: u64, limit: u64 },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("slide '{0}' not found")]
    SlideNotFound(String),

    #[error("slide '{0}' already exists")]
    SlideExists(String),

    #[error("store corrupt for slide '{slide_id}': {detail}")]
    Corrupt { slide_id: String, detail: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("codec error: {0}")]
    Codec(String),

    #[error("similarity index required: {0}")]
    IndexRequired(String),

    #[error("session '{0}' not found")]
    SessionNotFound(String),

    #[error("assistant backend timed out after {after_ms} ms")]
    UpstreamTimeout { after_ms: u64 },

    #[error("assistant backend error{}: {message}", status.map(|s| format!(" (status {s})")).unwrap_or_default())]
    Upstream { status: Option<u16>, message: String },

    #[error("configuration error: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn corrupt(slide_id: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Corrupt {
            slide_id: slide_id.into(),
            detail: detail.into(),
        }
    }

    pub fn code(&self) -> ErrorCode {
        match self {
            Error::Invalid(_) => ErrorCode::InvalidRequest,
            Error::LevelOutOfRange { .. } => ErrorCode::LevelOutOfRange,
            Error::TileOutOfRange { .. } => ErrorCode::TileOutOfRange,
            Error::OutOfBounds(_) => ErrorCode::RegionOutOfBounds,
            Error::RegionTooLarge { .. } => ErrorCode::RegionTooLarge,
            Error::Unsupported(_) => ErrorCode::Unsupported,
            Error::SlideNotFound(_) => ErrorCode::SlideNotFound,
            Error::SlideExists(_) => ErrorCode::SlideExists,
            Error::Corrupt { .. } => ErrorCode::StoreCorrupt,
            Error::Io { .. } => ErrorCode::IoError,
            Error::Codec(_) => ErrorCode::CodecError,
            Error::IndexRequired(_) => ErrorCode::IndexRequired,
            Error::SessionNotFound(_) => ErrorCode::SessionNotFound,
            Error::UpstreamTimeout { .. } => ErrorCode::UpstreamTimeout,
            Error::Upstream { .. } => ErrorCode::UpstreamError,
            Error::Config(_) => ErrorCode::ConfigError,
        }
    }

    /// Whether retrying the same request may succeed.
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            Error::UpstreamTimeout { .. } | Error::Upstream { status: None, .. }
        ) || matches!(self, Error::Upstream { status: Some(s), .. } if *s >= 500 || *s == 429)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn codes_are_unique_and_screaming_snake() {
        let names: HashSet<_> = ErrorCode::ALL.iter().map(|c| c.as_str()).collect();
        assert_eq!(names.len(), ErrorCode::ALL.len());
        for n in names {
            assert!(n.chars().all(|c| c.is_ascii_uppercase() || c == '_'), "{n}");
        }
    }

    #[test]
    fn serde_name_matches_as_str() {
        for code in ErrorCode::ALL {
            let json = serde_json::to_string(&code).unwrap();
            assert_eq!(json, format!("\"{}\"", code.as_str()));
        }
    }

    #[test]
    fn level_error_names_valid_interval() {
        let e = Error::LevelOutOfRange {
            level: 20,
            max_level: 17,
        };
        assert!(e.to_string().contains("[0, 17]"));
        assert_eq!(e.code(), ErrorCode::LevelOutOfRange);
    }
}
