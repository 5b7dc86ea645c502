//! Command-line front end for the cross-layer KV-cache compression engine.
//!
//! The library half of this crate holds everything the `kvfold` binary
//! does, so each piece is unit-testable without spawning a process:
//!
//! - [`dump_io`]: the `KVD1` binary format for raw K/V dumps,
//! - [`archive`]: the `KVA1` binary format for compressed caches,
//! - [`run_config`]: flat key-value settings files plus flag precedence,
//! - [`commands`]: the five report-producing commands (analyze, compress,
//!   simulate, ablate, memory) as pure functions from inputs to CSV/JSON.
//!
//! Failures split into two exit classes: malformed input or configuration
//! (exit code 2) and numeric kernel failures such as a zero-norm vector
//! (exit code 3). [`CliError::exit_code`] encodes that mapping.

use std::path::PathBuf;

pub mod archive;
pub mod commands;
pub mod dump_io;
pub mod run_config;

/// Everything that can go wrong between the shell and the engine.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// The file does not start with the expected format tag.
    #[error("bad magic: expected \"{expected}\", found \"{found}\"")]
    BadMagic { expected: String, found: String },

    /// The format version is newer (or older) than this build understands.
    #[error("unsupported format version {found}; this build reads version {supported}")]
    UnsupportedVersion { found: u16, supported: u16 },

    /// The dtype code in a dump header is not one of the defined codes.
    #[error("unsupported dtype code {0} (0 = f32, 1 = f16)")]
    UnsupportedDtype(u8),

    /// The file ends before the declared content does.
    #[error("truncated {context}: expected {expected} bytes, found {actual}")]
    TruncatedPayload { context: &'static str, expected: u64, actual: u64 },

    /// The file continues past the declared content.
    #[error("{extra} trailing bytes after the declared payload")]
    TrailingBytes { extra: u64 },

    /// A settings file or flag value could not be understood.
    #[error("config error: {0}")]
    Config(String),

    /// Filesystem failure, tagged with the path involved.
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },

    /// Report serialization failure.
    #[error("report serialization failed: {0}")]
    Json(#[from] serde_json::Error),

    /// Engine-level failure: validation or numeric.
    #[error(transparent)]
    Engine(#[from] kvfold::Error),
}

impl CliError {
    /// Process exit code for this failure: 2 for validation and I/O
    /// problems, 3 for numeric kernel failures.
    #[must_use]
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Engine(e) if e.is_numeric() => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

/// Narrows a size to the u32 header fields both binary formats use.
pub(crate) fn u32_field(value: usize, name: &str) -> Result<u32> {
    u32::try_from(value)
        .map_err(|_| CliError::Config(format!("{name} = {value} does not fit the u32 header field")))
}
