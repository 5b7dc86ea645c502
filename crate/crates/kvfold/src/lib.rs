//! Cross-layer KV-cache compression engine.
//!
//! Adjacent decoder layers produce key/value states that point in nearly
//! the same directions. This crate exploits that: each layer pair's token
//! states are folded into one shared direction per token (spherical
//! interpolation between the two unit vectors) plus two magnitudes, and
//! restored on demand by rescaling. Token pairs too dissimilar to share a
//! direction are kept verbatim in a retention set.
//!
//! Module map:
//!
//! * [`tensor`] — dump and matrix containers, validation, norms.
//! * [`merge`] — pairwise merge kernels and restoration.
//! * [`retention`] — unmergeable-token selection, extraction, reinjection.
//! * [`quant`] — round-to-nearest integer codes for direction matrices.
//! * [`engine`] — the layered cache: prefill compression, per-layer
//!   restoration, the two-round decode protocol, storage accounting.
//! * [`sim`] — a synthetic attention decoder for end-to-end divergence
//!   measurements between full and compressed caches.
//! * [`memory`] — the closed-form storage model and its reconciliation
//!   against live caches.

pub mod error;
pub mod tensor;
pub mod merge;
pub mod retention;
pub mod quant;
pub mod memory;
pub mod engine;
pub mod sim;

pub use error::{Error, Result};
pub use tensor::{Dims, KvDump, LayerKv, Role, TokenMatrix};
pub use merge::{
    angle, angular_distance, max_norm_merge, mean_merge, restore_pair, slerp_merge, MergeParams,
    PairMergeOutput,
};
pub use retention::{
    extract, reinject, retain_decision, select_retention, RetentionConfig, RetentionMode,
    RetentionSet,
};
pub use quant::{dequantize, quantize, QuantConfig, QuantizedMatrix};
pub use memory::{
    analytic_memory, reconcile, MemoryInputs, MemoryReport, ReconcileItem, ReconcileReport,
    StorageProfile,
};
pub use engine::{
    per_layer_restoration_error, EngineConfig, LayerSlot, LayeredKvCache, MergeStrategy,
    MergedPairCache,
};
pub use sim::{adjacent_similarity, DivergenceReport, FullCache, PairSimilarity, SimCache, SimModel};
