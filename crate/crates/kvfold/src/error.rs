//! Error taxonomy shared by every module in the crate.
//!
//! Errors split into two families: malformed input (shape, configuration,
//! or protocol misuse) and numeric failure (states for which no stable
//! merge direction exists). Callers that need to map errors onto process
//! exit codes can use [`Error::is_numeric`] to tell the families apart.

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong while building, merging, or restoring a
/// layered KV cache.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum Error {
    /// A matrix arrived with dimensions other than the ones the operation
    /// requires.
    #[error("shape mismatch in {context}: expected {expected_rows}x{expected_cols}, got {actual_rows}x{actual_cols}")]
    ShapeMismatch {
        context: String,
        expected_rows: usize,
        expected_cols: usize,
        actual_rows: usize,
        actual_cols: usize,
    },

    /// A dump declared one layer count in its dims but holds another.
    #[error("layer count mismatch: dims declare {expected} layers, dump holds {actual}")]
    LayerCountMismatch { expected: usize, actual: usize },

    /// A NaN or infinity was found on ingestion.
    #[error("non-finite value in {context} at token row {row}")]
    NonFiniteValue { context: String, row: usize },

    /// An angular operation received a vector with zero norm; its direction
    /// is undefined.
    #[error("zero-norm vector has no direction; angular operation is undefined")]
    ZeroVector,

    /// The two vectors point in opposite directions within tolerance, so no
    /// stable shared direction exists.
    #[error("vectors are antipodal within tolerance; no stable merge direction exists")]
    DegenerateAntipodal,

    /// An operation that needs at least one element received none.
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    /// A token index points past the end of the matrix it indexes into.
    #[error("token index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },

    /// A configuration value is outside its legal range.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// Two structures that must agree on dimensions do not.
    #[error("dimension mismatch: {0}")]
    DimsMismatch(String),

    /// The requested layer slot holds no restorable state.
    #[error("layer {layer} holds no restorable cache state")]
    EmptySlot { layer: usize },

    /// The odd-layer decode round ran without the even-layer round that must
    /// precede it, so there is no pending partner token to merge with.
    #[error("decode round at layer {layer} found no pending token from layer {}", layer.wrapping_sub(1))]
    MissingPending { layer: usize },

    /// The even-layer decode round found a pending token that the odd-layer
    /// round never consumed.
    #[error("decode round at layer {layer} found an unconsumed pending token")]
    UnexpectedPending { layer: usize },
}

impl Error {
    /// True when the error reports a numeric failure rather than malformed
    /// input. Useful for exit-code mapping: validation problems and numeric
    /// problems conventionally carry different codes.
    #[must_use]
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::ZeroVector | Error::DegenerateAntipodal)
    }
}
