//! Unmergeable-token retention: picks out the token pairs whose raw states
//! should be kept verbatim instead of merged, and splices them back in
//! after restoration.
//!
//! Selection is driven by per-token angular distances and a fraction
//! `gamma` of the observed distance range. Two selection rules are
//! provided because "which end of the range deserves retention" admits two
//! readings:
//!
//! * [`RetentionMode::Nearest`] keeps tokens *below* the low threshold
//!   `d_min + (d_max - d_min) * gamma` — nearest-first selection.
//! * [`RetentionMode::Distant`] keeps tokens *above* the mirrored high
//!   threshold `d_max - (d_max - d_min) * gamma` — the pairs most different
//!   from each other, i.e. the ones merging hurts most.
//!
//! Both rules are strict inequalities, so `gamma = 0` always selects
//! nothing and equal distances select nothing below `gamma = 1`. With
//! [`RetentionConfig::inclusive_at_gamma_one`] set, `gamma = 1` switches to
//! an inclusive comparison and selects every token, which makes full
//! retention an exact-identity configuration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::TokenMatrix;

/// Which end of the distance range to retain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RetentionMode {
    /// Keep the lowest-distance token pairs (nearest-first selection).
    Nearest,
    /// Keep the highest-distance token pairs (the hard-to-merge ones).
    Distant,
}

/// Retention policy: fraction of the distance range, selection rule, and
/// the `gamma = 1` inclusivity switch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetentionConfig {
    /// Fraction of the observed distance range, in `[0, 1]`.
    pub gamma: f32,
    pub mode: RetentionMode,
    /// When set, `gamma = 1` uses an inclusive comparison so every token is
    /// retained; full retention then reproduces the source exactly.
    pub inclusive_at_gamma_one: bool,
}

impl RetentionConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.gamma.is_finite() || !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::InvalidConfig(format!(
                "retention gamma must lie in [0, 1], got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

impl Default for RetentionConfig {
    /// `gamma = 0.05`, nearest-first selection, inclusive at `gamma = 1`.
    fn default() -> Self {
        RetentionConfig { gamma: 0.05, mode: RetentionMode::Nearest, inclusive_at_gamma_one: true }
    }
}

/// Single-token retention decision against a frozen distance range.
///
/// This is the streaming form of [`select_retention`]: the cache engine
/// freezes `d_min`/`d_max` at prefill time and tests each decoded token
/// pair against the same thresholds. The `gamma = 0` and inclusive
/// `gamma = 1` endpoints are pinned to "never" and "always" so their exact
/// semantics survive distances outside the frozen range.
#[must_use]
pub fn retain_decision(d: f32, d_min: f32, d_max: f32, cfg: &RetentionConfig) -> bool {
    if cfg.gamma == 0.0 {
        return false;
    }
    if cfg.gamma == 1.0 && cfg.inclusive_at_gamma_one {
        return true;
    }
    let range = d_max - d_min;
    match cfg.mode {
        RetentionMode::Nearest => d < d_min + range * cfg.gamma,
        RetentionMode::Distant => d > d_max - range * cfg.gamma,
    }
}

/// Selects the retention set for one batch of per-token distances.
/// Returns strictly increasing indices. Errors on an empty batch or an
/// out-of-range `gamma`.
pub fn select_retention(distances: &[f32], cfg: &RetentionConfig) -> Result<Vec<usize>> {
    cfg.validate()?;
    if distances.is_empty() {
        return Err(Error::EmptyInput("retention distances"));
    }
    debug_assert!(
        distances.iter().all(|d| (0.0..=1.0).contains(d)),
        "angular distances must lie in [0, 1]"
    );
    let d_min = distances.iter().copied().fold(f32::INFINITY, f32::min);
    let d_max = distances.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    Ok(distances
        .iter()
        .enumerate()
        .filter(|(_, &d)| retain_decision(d, d_min, d_max, cfg))
        .map(|(i, _)| i)
        .collect())
}

/// Raw token rows lifted out of a layer pair before merging, plus where
/// they belong. Reinjection replaces restored rows with these bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetentionSet {
    indices: Vec<usize>,
    kept_cur: TokenMatrix,
    kept_prev: TokenMatrix,
}

impl RetentionSet {
    /// Reassembles a set from stored parts, revalidating the invariants
    /// (strictly increasing indices, matching row counts and widths).
    pub fn from_parts(
        indices: Vec<usize>,
        kept_cur: TokenMatrix,
        kept_prev: TokenMatrix,
    ) -> Result<Self> {
        if !indices.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidConfig(
                "retention indices must be strictly increasing".to_string(),
            ));
        }
        if kept_cur.tokens() != indices.len()
            || kept_prev.tokens() != indices.len()
            || kept_cur.hidden() != kept_prev.hidden()
        {
            return Err(Error::DimsMismatch(format!(
                "retention set holds {} indices but {}x{} / {}x{} kept rows",
                indices.len(),
                kept_cur.tokens(),
                kept_cur.hidden(),
                kept_prev.tokens(),
                kept_prev.hidden()
            )));
        }
        Ok(RetentionSet { indices, kept_cur, kept_prev })
    }

    #[must_use]
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    #[must_use]
    pub fn kept_cur(&self) -> &TokenMatrix {
        &self.kept_cur
    }

    #[must_use]
    pub fn kept_prev(&self) -> &TokenMatrix {
        &self.kept_prev
    }

    #[must_use]
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Appends one retained token pair at `index`. Indices must keep
    /// arriving in increasing order (decode appends at the tail).
    pub(crate) fn push(&mut self, index: usize, cur_row: &[f32], prev_row: &[f32]) -> Result<()> {
        if let Some(&last) = self.indices.last() {
            if index <= last {
                return Err(Error::InvalidConfig(format!(
                    "retention index {index} arrived after {last}"
                )));
            }
        }
        self.kept_cur.push_row(cur_row)?;
        self.kept_prev.push_row(prev_row)?;
        self.indices.push(index);
        Ok(())
    }
}

/// Copies the rows at `indices` out of both layers of a pair. Rows are
/// copied verbatim; restoration splices them back with [`reinject`].
pub fn extract(cur: &TokenMatrix, prev: &TokenMatrix, indices: &[usize]) -> Result<RetentionSet> {
    if cur.tokens() != prev.tokens() || cur.hidden() != prev.hidden() {
        return Err(Error::DimsMismatch(format!(
            "retention extraction needs matching layers, got {}x{} and {}x{}",
            cur.tokens(),
            cur.hidden(),
            prev.tokens(),
            prev.hidden()
        )));
    }
    let mut kept_cur = TokenMatrix::zeros(0, cur.hidden(), cur.role());
    let mut kept_prev = TokenMatrix::zeros(0, prev.hidden(), prev.role());
    for &i in indices {
        if i >= cur.tokens() {
            return Err(Error::IndexOutOfRange { index: i, len: cur.tokens() });
        }
        kept_cur.push_row(cur.row(i))?;
        kept_prev.push_row(prev.row(i))?;
    }
    RetentionSet::from_parts(indices.to_vec(), kept_cur, kept_prev)
}

/// Replaces rows of the two restored layers with the retained originals,
/// bit-exactly. The restored matrices must be at least as tall as the
/// largest retained index.
pub fn reinject(
    restored_cur: &mut TokenMatrix,
    restored_prev: &mut TokenMatrix,
    set: &RetentionSet,
) -> Result<()> {
    if restored_cur.hidden() != set.kept_cur.hidden()
        || restored_prev.hidden() != set.kept_prev.hidden()
    {
        return Err(Error::ShapeMismatch {
            context: "retention reinjection".to_string(),
            expected_rows: restored_cur.tokens(),
            expected_cols: set.kept_cur.hidden(),
            actual_rows: restored_cur.tokens(),
            actual_cols: restored_cur.hidden(),
        });
    }
    for (slot, &i) in set.indices.iter().enumerate() {
        restored_cur.set_row(i, set.kept_cur.row(slot))?;
        restored_prev.set_row(i, set.kept_prev.row(slot))?;
    }
    Ok(())
}
