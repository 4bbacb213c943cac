//! Error reporting and the documented exit codes.

use std::fmt;

use tilescope_core::{Error, ErrorCode};

/// Process exit codes. `2` is also what argument parsing uses for usage
/// errors.
pub mod exit {
    pub const OK: u8 = 0;
    pub const OTHER: u8 = 1;
    pub const USAGE: u8 = 2;
    pub const VALIDATION: u8 = 3;
    pub const NOT_FOUND: u8 = 4;
    pub const CONFLICT: u8 = 5;
    pub const IO: u8 = 6;
    pub const CORRUPT: u8 = 7;
    pub const CONNECTION: u8 = 8;
    pub const CONFIG: u8 = 9;
    pub const INDEX_REQUIRED: u8 = 10;
}

/// Code name used when the server could not be reached at all.
pub const CONNECTION_ERROR: &str = "CONNECTION_ERROR";

#[derive(Debug)]
pub struct Failure {
    /// Machine-readable name, printed as `error[CODE]`.
    pub code: String,
    pub message: String,
}

impl Failure {
    pub fn new(code: impl Into<String>, message: impl Into<String>) -> Self {
        Failure {
            code: code.into(),
            message: message.into(),
        }
    }

    pub fn connection(message: impl Into<String>) -> Self {
        Failure::new(CONNECTION_ERROR, message)
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        Failure::new(ErrorCode::InvalidRequest.as_str(), message)
    }

    /// Prefixes the message with the file it concerns.
    pub fn with_prefix(mut self, path: &std::path::Path) -> Self {
        self.message = format!("{}: {}", path.display(), self.message);
        self
    }

    pub fn exit_code(&self) -> u8 {
        exit_code_for(&self.code)
    }
}

pub fn exit_code_for(code: &str) -> u8 {
    match code {
        "INVALID_REQUEST"
        | "LEVEL_OUT_OF_RANGE"
        | "TILE_OUT_OF_RANGE"
        | "REGION_OUT_OF_BOUNDS"
        | "REGION_TOO_LARGE"
        | "UNSUPPORTED" => exit::VALIDATION,
        "SLIDE_NOT_FOUND" | "SESSION_NOT_FOUND" | "ROUTE_NOT_FOUND" => exit::NOT_FOUND,
        "SLIDE_EXISTS" => exit::CONFLICT,
        "IO_ERROR" | "CODEC_ERROR" => exit::IO,
        "STORE_CORRUPT" => exit::CORRUPT,
        CONNECTION_ERROR | "UPSTREAM_TIMEOUT" | "UPSTREAM_ERROR" => exit::CONNECTION,
        "CONFIG_ERROR" => exit::CONFIG,
        "INDEX_REQUIRED" => exit::INDEX_REQUIRED,
        _ => exit::OTHER,
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::new(e.code().as_str(), e.to_string())
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error[{}]: {}", self.code, self.message)
    }
}

pub type CliResult<T> = std::result::Result<T, Failure>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_error_code_has_a_specific_exit_code() {
        for code in ErrorCode::ALL {
            let exit = exit_code_for(code.as_str());
            assert!(exit >= exit::VALIDATION, "{code} falls through to {exit}");
        }
        assert_eq!(exit_code_for(CONNECTION_ERROR), exit::CONNECTION);
        assert_eq!(exit_code_for("SOMETHING_NEW"), exit::OTHER);
    }

    #[test]
    fn display_names_the_code() {
        let f = Failure::from(Error::SlideExists("a".into()));
        assert_eq!(f.to_string(), "error[SLIDE_EXISTS]: slide 'a' already exists");
        assert_eq!(f.exit_code(), exit::CONFLICT);
    }
}
