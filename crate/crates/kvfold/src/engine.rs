//! The layered KV cache: standard caching below a start layer, cross-layer
//! merged storage from there upward.
//!
//! Layer pairing follows one rule everywhere: every odd layer index `l`
//! with `l >= start_layer` becomes the home of a merged pair covering
//! layers `(l - 1, l)`. The lower (always even) layer keeps only a
//! reference to its partner. When the start layer is even it therefore
//! pairs upward at `start_layer + 1`; when it is odd, the first pair dips
//! one layer below the start. A leftover top layer with no odd partner
//! stays standard, and `start_layer == num_layers` disables merging
//! entirely.
//!
//! Prefill compresses a complete dump in one pass: each pair's token rows
//! are merged into shared directions plus per-layer magnitudes, angular
//! distances are measured, and hard-to-merge tokens are retained verbatim.
//! Decode runs a two-round protocol per layer pair: the lower layer
//! restores its side, attends, and stashes its new token as pending; the
//! upper layer restores, attends, then folds the pending token and its own
//! new token into the pair cache.
//!
//! Attention here is plain softmax attention — no scaling, no positional
//! encoding; positions are implicit in token order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::StorageProfile;
use crate::merge::{
    lenient_distance, max_norm_merge, mean_merge, norm_f64, slerp_merge, MergeParams,
    PairMergeOutput,
};
use crate::merge::{angle, dot_f64};
use crate::quant::{quantize, QuantizedMatrix};
use crate::retention::{retain_decision, select_retention, RetentionConfig, RetentionSet};
use crate::retention::extract;
use crate::tensor::{KvDump, LayerKv, Role, TokenMatrix};
use crate::QuantConfig;

// ── Configuration ───────────────────────────────────────────────────────────

/// Which merge kernel the engine applies to each token pair.
///
/// `Slerp` stores one true magnitude per layer so restoration rescales each
/// side back to its own length. `Mean` and `MaxNorm` are shared-state
/// baselines: both layers restore to the single merged vector verbatim, so
/// the stored "magnitude" for both sides is that vector's own norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MergeStrategy {
    /// Spherical interpolation of the two unit directions.
    Slerp,
    /// Elementwise average, shared by both layers as-is.
    Mean,
    /// Average direction rescaled to the larger norm, shared by both layers.
    MaxNorm,
}

impl MergeStrategy {
    #[must_use]
    pub fn as_str(&self) -> &'static str {
        match self {
            MergeStrategy::Slerp => "slerp",
            MergeStrategy::Mean => "mean",
            MergeStrategy::MaxNorm => "maxnorm",
        }
    }
}

/// Everything the engine needs to know to compress and serve one sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EngineConfig {
    /// Total layer count `L`.
    pub num_layers: usize,
    /// First layer index eligible for merging, `0 ..= L`. `L` disables
    /// merging; the canonical choice is the midpoint `L / 2`.
    pub start_layer: usize,
    pub merge_params: MergeParams,
    pub retention: RetentionConfig,
    pub strategy: MergeStrategy,
    /// When set, direction matrices are stored as integer codes.
    pub quant: Option<QuantConfig>,
}

impl EngineConfig {
    /// Default configuration: merging from the midpoint `L / 2` upward,
    /// spherical merging, default retention, no quantization.
    #[must_use]
    pub fn new(num_layers: usize) -> Self {
        EngineConfig {
            num_layers,
            start_layer: num_layers / 2,
            merge_params: MergeParams::default(),
            retention: RetentionConfig::default(),
            strategy: MergeStrategy::Slerp,
            quant: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::InvalidConfig("engine needs at least one layer".to_string()));
        }
        if self.start_layer > self.num_layers {
            return Err(Error::InvalidConfig(format!(
                "start layer {} exceeds layer count {} (equality disables merging)",
                self.start_layer, self.num_layers
            )));
        }
        self.merge_params.validate()?;
        self.retention.validate()?;
        if let Some(q) = &self.quant {
            q.validate()?;
        }
        Ok(())
    }

    /// True when layer `l` is the odd home of a merged pair under this
    /// configuration.
    #[must_use]
    pub fn is_pair_home(&self, l: usize) -> bool {
        l % 2 == 1 && l >= self.start_layer && l < self.num_layers
    }
}

// ── Pair cache ──────────────────────────────────────────────────────────────

/// Direction matrix storage: plain `f32` rows or integer codes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DirectionStore {
    Plain(TokenMatrix),
    Quantized(QuantizedMatrix),
}

impl DirectionStore {
    #[must_use]
    pub fn tokens(&self) -> usize {
        match self {
            DirectionStore::Plain(m) => m.tokens(),
            DirectionStore::Quantized(q) => q.tokens(),
        }
    }

    #[must_use]
    pub fn hidden(&self) -> usize {
        match self {
            DirectionStore::Plain(m) => m.hidden(),
            DirectionStore::Quantized(q) => q.hidden(),
        }
    }

    #[must_use]
    pub fn role(&self) -> Role {
        match self {
            DirectionStore::Plain(m) => m.role(),
            DirectionStore::Quantized(q) => q.role(),
        }
    }

    /// One direction row in `f32`, decoding when quantized.
    #[must_use]
    pub fn row_f32(&self, i: usize) -> Vec<f32> {
        match self {
            DirectionStore::Plain(m) => m.row(i).to_vec(),
            DirectionStore::Quantized(q) => q.row_f32(i),
        }
    }

    pub fn push_row(&mut self, row: &[f32]) -> Result<()> {
        match self {
            DirectionStore::Plain(m) => m.push_row(row),
            DirectionStore::Quantized(q) => q.push_row(row),
        }
    }

    /// Stored scalar values (codes and scales each count one).
    #[must_use]
    pub fn value_count(&self) -> usize {
        match self {
            DirectionStore::Plain(m) => m.tokens() * m.hidden(),
            DirectionStore::Quantized(q) => q.codes().len() + q.scales().len(),
        }
    }
}

/// A decoded token stashed by the lower layer of a pair, awaiting the upper
/// layer's token so the two can be merged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingToken {
    pub key: Vec<f32>,
    pub value: Vec<f32>,
}

/// The shared cache for one layer pair `(lower, upper)`: per-token shared
/// directions for keys and values, each side's magnitudes, the source
/// angles, verbatim retained rows, and the frozen prefill distance ranges
/// that decide retention for streamed decode tokens.
///
/// "lower"/"upper" refer to the two layers; the merge kernels call the
/// lower layer's row `prev` and the upper's `cur`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergedPairCache {
    pub lower_layer: usize,
    pub upper_layer: usize,
    pub dir_key: DirectionStore,
    pub dir_value: DirectionStore,
    pub mag_key_lower: Vec<f32>,
    pub mag_key_upper: Vec<f32>,
    pub mag_value_lower: Vec<f32>,
    pub mag_value_upper: Vec<f32>,
    pub omega_key: Vec<f32>,
    pub omega_value: Vec<f32>,
    pub retention_key: RetentionSet,
    pub retention_value: RetentionSet,
    /// `(d_min, d_max)` of key angular distances observed at prefill.
    pub key_distance_range: (f32, f32),
    /// `(d_min, d_max)` of value angular distances observed at prefill.
    pub value_distance_range: (f32, f32),
    /// Present only between the lower-layer and upper-layer decode rounds.
    pub pending: Option<PendingToken>,
}

impl MergedPairCache {
    /// Token rows currently merged into the pair (pending excluded).
    #[must_use]
    pub fn tokens(&self) -> usize {
        self.dir_key.tokens()
    }

    /// Checks internal consistency against the cache's hidden width:
    /// matching token counts everywhere, finite non-negative magnitudes,
    /// retained rows inside range, adjacent layer indices.
    pub fn validate(&self, hidden: usize) -> Result<()> {
        if self.lower_layer + 1 != self.upper_layer || self.upper_layer % 2 != 1 {
            return Err(Error::InvalidConfig(format!(
                "merged pair must sit at (even, odd) adjacent layers, got ({}, {})",
                self.lower_layer, self.upper_layer
            )));
        }
        let n = self.tokens();
        if self.dir_key.hidden() != hidden || self.dir_value.hidden() != hidden {
            return Err(Error::DimsMismatch(format!(
                "pair at layer {} stores width {}/{} directions in a width-{} cache",
                self.upper_layer,
                self.dir_key.hidden(),
                self.dir_value.hidden(),
                hidden
            )));
        }
        if self.dir_key.role() != Role::Key || self.dir_value.role() != Role::Value {
            return Err(Error::InvalidConfig(
                "pair direction matrices carry swapped roles".to_string(),
            ));
        }
        if self.dir_value.tokens() != n {
            return Err(Error::DimsMismatch(format!(
                "pair at layer {} has {} key rows but {} value rows",
                self.upper_layer,
                n,
                self.dir_value.tokens()
            )));
        }
        for (name, mags) in [
            ("key lower", &self.mag_key_lower),
            ("key upper", &self.mag_key_upper),
            ("value lower", &self.mag_value_lower),
            ("value upper", &self.mag_value_upper),
        ] {
            if mags.len() != n {
                return Err(Error::DimsMismatch(format!(
                    "pair at layer {} has {} tokens but {} {name} magnitudes",
                    self.upper_layer,
                    n,
                    mags.len()
                )));
            }
            if let Some(row) = mags.iter().position(|m| !m.is_finite() || *m < 0.0) {
                return Err(Error::NonFiniteValue {
                    context: format!("{name} magnitudes"),
                    row,
                });
            }
        }
        for (name, omegas) in [("key", &self.omega_key), ("value", &self.omega_value)] {
            if omegas.len() != n {
                return Err(Error::DimsMismatch(format!(
                    "pair at layer {} has {} tokens but {} {name} angles",
                    self.upper_layer,
                    n,
                    omegas.len()
                )));
            }
            if let Some(row) = omegas.iter().position(|w| !w.is_finite()) {
                return Err(Error::NonFiniteValue { context: format!("{name} angles"), row });
            }
        }
        for set in [&self.retention_key, &self.retention_value] {
            if set.kept_cur().hidden() != hidden {
                return Err(Error::DimsMismatch(format!(
                    "retention rows are width {}, cache is width {hidden}",
                    set.kept_cur().hidden()
                )));
            }
            if let Some(&last) = set.indices().last() {
                if last >= n {
                    return Err(Error::IndexOutOfRange { index: last, len: n });
                }
            }
        }
        for range in [self.key_distance_range, self.value_distance_range] {
            if !range.0.is_finite() || !range.1.is_finite() || range.0 > range.1 {
                return Err(Error::InvalidConfig(format!(
                    "pair at layer {} has a malformed distance range {range:?}",
                    self.upper_layer
                )));
            }
        }
        if let Some(p) = &self.pending {
            if p.key.len() != hidden || p.value.len() != hidden {
                return Err(Error::DimsMismatch(format!(
                    "pending token is width {}/{}, cache is width {hidden}",
                    p.key.len(),
                    p.value.len()
                )));
            }
        }
        Ok(())
    }

    /// Rebuilds one layer's K and V matrices: each direction row is
    /// rescaled to that side's magnitude (`x_hat = e * (mag / ||e||)`),
    /// retained originals are spliced back verbatim, and — on the lower
    /// side — a pending mid-protocol token is appended as its final row.
    fn restore_side(&self, upper: bool) -> Result<(TokenMatrix, TokenMatrix)> {
        let n = self.tokens();
        let h = self.dir_key.hidden();
        let build = |dir: &DirectionStore, mags: &[f32], role: Role| -> TokenMatrix {
            let mut data = Vec::with_capacity(n * h);
            for (i, &mag) in mags.iter().enumerate() {
                let row = dir.row_f32(i);
                let mag = f64::from(mag);
                let nrm = norm_f64(&row);
                if mag == 0.0 || nrm == 0.0 {
                    data.resize(data.len() + h, 0.0);
                } else {
                    let s = mag / nrm;
                    data.extend(row.iter().map(|&e| (f64::from(e) * s) as f32));
                }
            }
            TokenMatrix::from_parts(data, n, h, role)
        };
        let mut key = build(
            &self.dir_key,
            if upper { &self.mag_key_upper } else { &self.mag_key_lower },
            Role::Key,
        );
        let mut value = build(
            &self.dir_value,
            if upper { &self.mag_value_upper } else { &self.mag_value_lower },
            Role::Value,
        );
        for (matrix, set) in [(&mut key, &self.retention_key), (&mut value, &self.retention_value)]
        {
            let kept = if upper { set.kept_cur() } else { set.kept_prev() };
            for (slot, &idx) in set.indices().iter().enumerate() {
                matrix.set_row(idx, kept.row(slot))?;
            }
        }
        if !upper {
            if let Some(p) = &self.pending {
                key.push_row(&p.key)?;
                value.push_row(&p.value)?;
            }
        }
        Ok((key, value))
    }
}

// ── Merge dispatch ──────────────────────────────────────────────────────────

fn unit(row: &[f32], norm: f64) -> Vec<f32> {
    row.iter().map(|&v| (f64::from(v) / norm) as f32).collect()
}

/// Merges one token pair under the configured strategy, returning the
/// record plus a flag forcing the token into retention.
///
/// Degenerate rows never abort a cache build:
/// * a zero row on either side stores the nonzero side's direction (or
///   zeros) with the true magnitudes — restoration is exact, nothing to
///   retain;
/// * antipodal pairs, where spherical and max-norm merging have no stable
///   shared direction, store a placeholder record (the lower row's unit
///   direction, true magnitudes, the real angle) and force retention, so
///   restoration splices the originals back instead.
fn merge_token(
    prev: &[f32],
    cur: &[f32],
    strategy: MergeStrategy,
    params: &MergeParams,
) -> Result<(PairMergeOutput, bool)> {
    let n_prev = norm_f64(prev);
    let n_cur = norm_f64(cur);
    if n_prev == 0.0 || n_cur == 0.0 {
        let direction = if n_cur > 0.0 {
            unit(cur, n_cur)
        } else if n_prev > 0.0 {
            unit(prev, n_prev)
        } else {
            vec![0.0; prev.len()]
        };
        let record = PairMergeOutput {
            direction,
            mag_prev: n_prev as f32,
            mag_cur: n_cur as f32,
            omega: 0.0,
        };
        return Ok((record, false));
    }
    let retained_placeholder = || -> Result<(PairMergeOutput, bool)> {
        let record = PairMergeOutput {
            direction: unit(prev, n_prev),
            mag_prev: n_prev as f32,
            mag_cur: n_cur as f32,
            omega: angle(cur, prev)?,
        };
        Ok((record, true))
    };
    match strategy {
        MergeStrategy::Slerp => match slerp_merge(cur, prev, params) {
            Ok(record) => Ok((record, false)),
            Err(Error::DegenerateAntipodal) => retained_placeholder(),
            Err(e) => Err(e),
        },
        MergeStrategy::Mean => {
            // Shared-state baseline: both layers restore to the average
            // itself, so both magnitudes record the average's norm. An
            // antipodal pair averages to (near) zero and restores to zero —
            // the baseline's honest failure mode, not an error.
            let merged = mean_merge(cur, prev);
            let n_m = norm_f64(&merged) as f32;
            let record = PairMergeOutput {
                direction: merged,
                mag_prev: n_m,
                mag_cur: n_m,
                omega: angle(cur, prev)?,
            };
            Ok((record, false))
        }
        MergeStrategy::MaxNorm => match max_norm_merge(cur, prev, params) {
            Ok(merged) => {
                let n_m = norm_f64(&merged) as f32;
                let record = PairMergeOutput {
                    direction: merged,
                    mag_prev: n_m,
                    mag_cur: n_m,
                    omega: angle(cur, prev)?,
                };
                Ok((record, false))
            }
            Err(Error::DegenerateAntipodal) => retained_placeholder(),
            Err(e) => Err(e),
        },
    }
}

/// Per-role merge pass over a full layer pair.
struct RoleMerge {
    directions: TokenMatrix,
    mag_lower: Vec<f32>,
    mag_upper: Vec<f32>,
    omegas: Vec<f32>,
    distances: Vec<f32>,
    forced: Vec<usize>,
}

fn merge_role(
    prev: &TokenMatrix,
    cur: &TokenMatrix,
    strategy: MergeStrategy,
    params: &MergeParams,
) -> Result<RoleMerge> {
    let n = cur.tokens();
    let h = cur.hidden();
    let mut data = Vec::with_capacity(n * h);
    let mut mag_lower = Vec::with_capacity(n);
    let mut mag_upper = Vec::with_capacity(n);
    let mut omegas = Vec::with_capacity(n);
    let mut distances = Vec::with_capacity(n);
    let mut forced = Vec::new();
    for i in 0..n {
        let p = prev.row(i);
        let c = cur.row(i);
        distances.push(lenient_distance(c, p));
        let (record, was_forced) = merge_token(p, c, strategy, params)?;
        data.extend_from_slice(&record.direction);
        mag_lower.push(record.mag_prev);
        mag_upper.push(record.mag_cur);
        omegas.push(record.omega);
        if was_forced {
            forced.push(i);
        }
    }
    Ok(RoleMerge {
        directions: TokenMatrix::from_parts(data, n, h, cur.role()),
        mag_lower,
        mag_upper,
        omegas,
        distances,
        forced,
    })
}

fn distance_range(distances: &[f32]) -> (f32, f32) {
    distances.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &d| {
        (lo.min(d), hi.max(d))
    })
}

fn build_pair(
    prev: &LayerKv,
    cur: &LayerKv,
    upper_layer: usize,
    config: &EngineConfig,
) -> Result<MergedPairCache> {
    let key = merge_role(&prev.key, &cur.key, config.strategy, &config.merge_params)?;
    let value = merge_role(&prev.value, &cur.value, config.strategy, &config.merge_params)?;
    let n = key.directions.tokens();

    // Retention: tokens selected by either role's distances, plus every
    // forced (antipodal) token, applied to both roles so the pair stays
    // rectangular.
    let mut indices = std::collections::BTreeSet::new();
    if n > 0 {
        indices.extend(select_retention(&key.distances, &config.retention)?);
        indices.extend(select_retention(&value.distances, &config.retention)?);
    }
    indices.extend(key.forced.iter().copied());
    indices.extend(value.forced.iter().copied());
    let indices: Vec<usize> = indices.into_iter().collect();
    let retention_key = extract(&cur.key, &prev.key, &indices)?;
    let retention_value = extract(&cur.value, &prev.value, &indices)?;

    let key_distance_range =
        if n == 0 { (0.0, 0.0) } else { distance_range(&key.distances) };
    let value_distance_range =
        if n == 0 { (0.0, 0.0) } else { distance_range(&value.distances) };

    let store = |m: TokenMatrix| -> Result<DirectionStore> {
        Ok(match &config.quant {
            Some(q) => DirectionStore::Quantized(quantize(&m, q)?),
            None => DirectionStore::Plain(m),
        })
    };
    Ok(MergedPairCache {
        lower_layer: upper_layer - 1,
        upper_layer,
        dir_key: store(key.directions)?,
        dir_value: store(value.directions)?,
        mag_key_lower: key.mag_lower,
        mag_key_upper: key.mag_upper,
        mag_value_lower: value.mag_lower,
        mag_value_upper: value.mag_upper,
        omega_key: key.omegas,
        omega_value: value.omegas,
        retention_key,
        retention_value,
        key_distance_range,
        value_distance_range,
        pending: None,
    })
}

// ── Attention ───────────────────────────────────────────────────────────────

/// Plain softmax attention over a K/V matrix pair: `softmax(q·Kᵀ)·V`, no
/// scaling, scores reduced in `f64` with max-subtraction.
pub fn softmax_attention(
    query: &[f32],
    keys: &TokenMatrix,
    values: &TokenMatrix,
) -> Result<Vec<f32>> {
    if keys.hidden() != query.len() || values.hidden() != query.len() {
        return Err(Error::ShapeMismatch {
            context: "attention query width".to_string(),
            expected_rows: 1,
            expected_cols: keys.hidden(),
            actual_rows: 1,
            actual_cols: query.len(),
        });
    }
    if keys.tokens() != values.tokens() {
        return Err(Error::ShapeMismatch {
            context: "attention K/V row counts".to_string(),
            expected_rows: keys.tokens(),
            expected_cols: keys.hidden(),
            actual_rows: values.tokens(),
            actual_cols: values.hidden(),
        });
    }
    let n = keys.tokens();
    if n == 0 {
        return Err(Error::EmptyInput("attention over an empty cache"));
    }
    let scores: Vec<f64> = (0..n).map(|i| dot_f64(query, keys.row(i))).collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = weights.iter().sum();
    let h = values.hidden();
    let mut context = vec![0.0f64; h];
    for (i, w) in weights.iter().enumerate() {
        for (acc, &v) in context.iter_mut().zip(values.row(i)) {
            *acc += w * f64::from(v);
        }
    }
    Ok(context.into_iter().map(|c| (c / z) as f32).collect())
}

// ── The layered cache ───────────────────────────────────────────────────────

/// One layer's storage.
///
/// The variants differ greatly in inline size, but a cache holds one slot
/// per layer — a few dozen at most — so boxing the large variant would buy
/// nothing and cost an indirection on every access.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[allow(clippy::large_enum_variant)]
pub enum LayerSlot {
    /// Ordinary dense K/V storage.
    Standard { key: TokenMatrix, value: TokenMatrix },
    /// This layer's states live in its odd partner layer's merged pair.
    SharedRef { partner: usize },
    /// Home of a merged pair covering this layer and the one below.
    Merged(MergedPairCache),
    /// No storage; restoring it is an error.
    Empty,
}

impl LayerSlot {
    fn kind(&self) -> &'static str {
        match self {
            LayerSlot::Standard { .. } => "standard",
            LayerSlot::SharedRef { .. } => "shared",
            LayerSlot::Merged(_) => "merged",
            LayerSlot::Empty => "empty",
        }
    }
}

/// The full per-sequence cache: one slot per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayeredKvCache {
    config: EngineConfig,
    hidden: usize,
    slots: Vec<LayerSlot>,
}

impl LayeredKvCache {
    /// Compresses a complete prefill dump into a layered cache.
    pub fn prefill(dump: &KvDump, config: EngineConfig) -> Result<Self> {
        config.validate()?;
        dump.validate()?;
        let dims = dump.dims();
        if dims.layers != config.num_layers {
            return Err(Error::LayerCountMismatch {
                expected: config.num_layers,
                actual: dims.layers,
            });
        }
        if dims.batch != 1 {
            return Err(Error::InvalidConfig(format!(
                "the cache engine tracks one sequence; got batch {}",
                dims.batch
            )));
        }
        let mut slots = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            if config.is_pair_home(l) {
                slots.push(LayerSlot::Merged(build_pair(
                    dump.layer(l - 1),
                    dump.layer(l),
                    l,
                    &config,
                )?));
            } else if config.is_pair_home(l + 1) {
                slots.push(LayerSlot::SharedRef { partner: l + 1 });
            } else {
                let layer = dump.layer(l);
                slots.push(LayerSlot::Standard {
                    key: layer.key.clone(),
                    value: layer.value.clone(),
                });
            }
        }
        Ok(LayeredKvCache { config, hidden: dims.hidden, slots })
    }

    /// Reassembles a cache from externally stored slots (the archive
    /// reader's entry point), revalidating the slot pattern against the
    /// configuration and every pair's internal consistency.
    pub fn from_slots(
        config: EngineConfig,
        hidden: usize,
        slots: Vec<LayerSlot>,
    ) -> Result<Self> {
        config.validate()?;
        if hidden == 0 {
            return Err(Error::InvalidConfig("hidden width must be positive".to_string()));
        }
        if slots.len() != config.num_layers {
            return Err(Error::LayerCountMismatch {
                expected: config.num_layers,
                actual: slots.len(),
            });
        }
        for (l, slot) in slots.iter().enumerate() {
            let expected = if config.is_pair_home(l) {
                "merged"
            } else if config.is_pair_home(l + 1) {
                "shared"
            } else {
                "standard"
            };
            if !matches!(slot, LayerSlot::Empty) && slot.kind() != expected {
                return Err(Error::InvalidConfig(format!(
                    "layer {l} holds a {} slot where the pairing rule needs {expected}",
                    slot.kind()
                )));
            }
            match slot {
                LayerSlot::Standard { key, value } => {
                    for m in [key, value] {
                        if m.hidden() != hidden {
                            return Err(Error::DimsMismatch(format!(
                                "layer {l} stores width {} in a width-{hidden} cache",
                                m.hidden()
                            )));
                        }
                    }
                    if key.tokens() != value.tokens()
                        || key.role() != Role::Key
                        || value.role() != Role::Value
                    {
                        return Err(Error::InvalidConfig(format!(
                            "layer {l} standard slot is not a matching K/V pair"
                        )));
                    }
                }
                LayerSlot::SharedRef { partner } => {
                    if *partner != l + 1 {
                        return Err(Error::InvalidConfig(format!(
                            "layer {l} shares with {partner}, but pairs are adjacent"
                        )));
                    }
                    match slots.get(l + 1) {
                        Some(LayerSlot::Merged(pair))
                            if pair.lower_layer == l && pair.upper_layer == l + 1 => {}
                        _ => {
                            return Err(Error::InvalidConfig(format!(
                                "layer {l} shares with {partner}, which holds no matching pair"
                            )))
                        }
                    }
                }
                LayerSlot::Merged(pair) => {
                    pair.validate(hidden)?;
                    if pair.upper_layer != l {
                        return Err(Error::InvalidConfig(format!(
                            "pair labelled ({}, {}) stored at layer {l}",
                            pair.lower_layer, pair.upper_layer
                        )));
                    }
                    let quantized = matches!(pair.dir_key, DirectionStore::Quantized(_));
                    if quantized != config.quant.is_some() {
                        return Err(Error::InvalidConfig(format!(
                            "layer {l} direction storage disagrees with the quantization config"
                        )));
                    }
                }
                LayerSlot::Empty => {}
            }
        }
        Ok(LayeredKvCache { config, hidden, slots })
    }

    #[must_use]
    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    #[must_use]
    pub fn num_layers(&self) -> usize {
        self.slots.len()
    }

    #[must_use]
    pub fn hidden(&self) -> usize {
        self.hidden
    }

    #[must_use]
    pub fn slots(&self) -> &[LayerSlot] {
        &self.slots
    }

    /// Direct slot access (panics out of range, like indexing).
    #[must_use]
    pub fn slot(&self, l: usize) -> &LayerSlot {
        &self.slots[l]
    }

    fn pair_at(&self, l: usize) -> Result<&MergedPairCache> {
        match self.slots.get(l) {
            Some(LayerSlot::Merged(pair)) => Ok(pair),
            Some(_) | None => Err(Error::InvalidConfig(format!(
                "layer {l} was expected to hold a merged pair"
            ))),
        }
    }

    /// Rebuilds one layer's full K and V matrices. Standard slots pass
    /// through bit-exactly; pair members are rescaled from the shared
    /// directions, with retained rows spliced back verbatim and a pending
    /// mid-protocol token appended on the lower side.
    pub fn restore_layer(&self, l: usize) -> Result<(TokenMatrix, TokenMatrix)> {
        let slot = self
            .slots
            .get(l)
            .ok_or(Error::IndexOutOfRange { index: l, len: self.slots.len() })?;
        match slot {
            LayerSlot::Standard { key, value } => Ok((key.clone(), value.clone())),
            LayerSlot::SharedRef { partner } => self.pair_at(*partner)?.restore_side(false),
            LayerSlot::Merged(pair) => pair.restore_side(true),
            LayerSlot::Empty => Err(Error::EmptySlot { layer: l }),
        }
    }

    /// Appends one decoded token at layer `l` and returns the attention
    /// context for `query` over that layer's (restored) cache.
    ///
    /// Layers below the start layer append normally. A pair's lower layer
    /// restores its side, attends, and stashes the new K/V as pending; the
    /// pair's upper layer restores, attends, then merges the pending token
    /// with its own new token into the pair — retaining the raw rows
    /// instead when the pair's frozen prefill distance range says so (or
    /// when merging degenerates). Calling the upper layer without its lower
    /// round is [`Error::MissingPending`]; repeating the lower round is
    /// [`Error::UnexpectedPending`].
    pub fn decode_step(
        &mut self,
        l: usize,
        new_key: &[f32],
        new_value: &[f32],
        query: &[f32],
    ) -> Result<Vec<f32>> {
        if l >= self.slots.len() {
            return Err(Error::IndexOutOfRange { index: l, len: self.slots.len() });
        }
        for (buf, what) in
            [(new_key, "decode key"), (new_value, "decode value"), (query, "decode query")]
        {
            if buf.len() != self.hidden {
                return Err(Error::ShapeMismatch {
                    context: what.to_string(),
                    expected_rows: 1,
                    expected_cols: self.hidden,
                    actual_rows: 1,
                    actual_cols: buf.len(),
                });
            }
            if let Some(row) = buf.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteValue { context: what.to_string(), row });
            }
        }
        enum Kind {
            Standard,
            Lower(usize),
            Upper,
        }
        let kind = match &self.slots[l] {
            LayerSlot::Standard { .. } => Kind::Standard,
            LayerSlot::SharedRef { partner } => Kind::Lower(*partner),
            LayerSlot::Merged(_) => Kind::Upper,
            LayerSlot::Empty => return Err(Error::EmptySlot { layer: l }),
        };
        match kind {
            Kind::Standard => {
                let LayerSlot::Standard { key, value } = &mut self.slots[l] else {
                    unreachable!("kind checked above")
                };
                key.push_row(new_key)?;
                value.push_row(new_value)?;
                softmax_attention(query, key, value)
            }
            Kind::Lower(partner) => {
                if self.pair_at(partner)?.pending.is_some() {
                    return Err(Error::UnexpectedPending { layer: l });
                }
                let (mut key, mut value) = self.restore_layer(l)?;
                key.push_row(new_key)?;
                value.push_row(new_value)?;
                let context = softmax_attention(query, &key, &value)?;
                let LayerSlot::Merged(pair) = &mut self.slots[partner] else {
                    unreachable!("pair_at checked above")
                };
                pair.pending =
                    Some(PendingToken { key: new_key.to_vec(), value: new_value.to_vec() });
                Ok(context)
            }
            Kind::Upper => {
                if self.pair_at(l)?.pending.is_none() {
                    return Err(Error::MissingPending { layer: l });
                }
                let (mut key, mut value) = self.restore_layer(l)?;
                key.push_row(new_key)?;
                value.push_row(new_value)?;
                let context = softmax_attention(query, &key, &value)?;
                let (strategy, params, retention_cfg) =
                    (self.config.strategy, self.config.merge_params, self.config.retention);
                let LayerSlot::Merged(pair) = &mut self.slots[l] else {
                    unreachable!("pair_at checked above")
                };
                let pending = pair.pending.take().expect("presence checked above");
                let index = pair.tokens();
                let d_key = lenient_distance(new_key, &pending.key);
                let d_value = lenient_distance(new_value, &pending.value);
                let (rec_key, forced_key) =
                    merge_token(&pending.key, new_key, strategy, &params)?;
                let (rec_value, forced_value) =
                    merge_token(&pending.value, new_value, strategy, &params)?;
                let retain = forced_key
                    || forced_value
                    || retain_decision(
                        d_key,
                        pair.key_distance_range.0,
                        pair.key_distance_range.1,
                        &retention_cfg,
                    )
                    || retain_decision(
                        d_value,
                        pair.value_distance_range.0,
                        pair.value_distance_range.1,
                        &retention_cfg,
                    );
                pair.dir_key.push_row(&rec_key.direction)?;
                pair.dir_value.push_row(&rec_value.direction)?;
                pair.mag_key_lower.push(rec_key.mag_prev);
                pair.mag_key_upper.push(rec_key.mag_cur);
                pair.mag_value_lower.push(rec_value.mag_prev);
                pair.mag_value_upper.push(rec_value.mag_cur);
                pair.omega_key.push(rec_key.omega);
                pair.omega_value.push(rec_value.omega);
                if retain {
                    pair.retention_key.push(index, new_key, &pending.key)?;
                    pair.retention_value.push(index, new_value, &pending.value)?;
                }
                Ok(context)
            }
        }
    }

    /// Category-by-category census of everything this cache stores.
    #[must_use]
    pub fn storage_profile(&self) -> StorageProfile {
        let mut p = StorageProfile {
            quant_bits: self.config.quant.map(|q| q.bits),
            ..StorageProfile::default()
        };
        for slot in &self.slots {
            match slot {
                LayerSlot::Standard { key, value } => {
                    p.standard_scalars +=
                        key.tokens() * key.hidden() + value.tokens() * value.hidden();
                }
                LayerSlot::SharedRef { .. } | LayerSlot::Empty => {}
                LayerSlot::Merged(pair) => {
                    p.merged_pairs += 1;
                    for dir in [&pair.dir_key, &pair.dir_value] {
                        match dir {
                            DirectionStore::Plain(m) => {
                                p.direction_scalars += m.tokens() * m.hidden();
                            }
                            DirectionStore::Quantized(q) => {
                                p.direction_code_scalars += q.codes().len();
                                p.quant_scale_scalars += q.scales().len();
                            }
                        }
                    }
                    p.magnitude_scalars += pair.mag_key_lower.len()
                        + pair.mag_key_upper.len()
                        + pair.mag_value_lower.len()
                        + pair.mag_value_upper.len();
                    p.omega_scalars += pair.omega_key.len() + pair.omega_value.len();
                    for set in [&pair.retention_key, &pair.retention_value] {
                        p.retention_scalars += set.kept_cur().tokens() * set.kept_cur().hidden()
                            + set.kept_prev().tokens() * set.kept_prev().hidden();
                        p.retention_index_count += set.len();
                    }
                    if let Some(pending) = &pair.pending {
                        p.pending_scalars += pending.key.len() + pending.value.len();
                    }
                }
            }
        }
        p
    }

    /// Exact count of stored scalar values across all slots: directions
    /// (codes count one each), quantizer scales, magnitudes, angles,
    /// retention rows, standard layers, and pending tokens.
    #[must_use]
    pub fn stored_element_count(&self) -> usize {
        self.storage_profile().stored_value_count()
    }
}

/// Frobenius distance between each layer of `dump` and the same layer
/// restored from `cache` (K and V together, accumulated in `f64`).
pub fn per_layer_restoration_error(cache: &LayeredKvCache, dump: &KvDump) -> Result<Vec<f64>> {
    let dims = dump.dims();
    if dims.layers != cache.num_layers() {
        return Err(Error::LayerCountMismatch {
            expected: cache.num_layers(),
            actual: dims.layers,
        });
    }
    let mut out = Vec::with_capacity(dims.layers);
    for l in 0..dims.layers {
        let (key, value) = cache.restore_layer(l)?;
        let layer = dump.layer(l);
        if key.tokens() != layer.key.tokens() {
            return Err(Error::ShapeMismatch {
                context: format!("restored layer {l}"),
                expected_rows: layer.key.tokens(),
                expected_cols: layer.key.hidden(),
                actual_rows: key.tokens(),
                actual_cols: key.hidden(),
            });
        }
        let mut sumsq = 0.0f64;
        for (restored, original) in [(&key, &layer.key), (&value, &layer.value)] {
            for (&a, &b) in restored.data().iter().zip(original.data()) {
                let d = f64::from(a) - f64::from(b);
                sumsq += d * d;
            }
        }
        out.push(sumsq.sqrt());
    }
    Ok(out)
}
