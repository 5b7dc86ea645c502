//! Closed-form storage model for the compressed cache, and reconciliation
//! of that model against a live cache's actual storage.
//!
//! The model assumes the canonical deployment: merging starts at the
//! midpoint (`S = r/2`) and every upper layer is paired. With batch `b`,
//! layers `r`, hidden width `h`, prompt length `s`, generated length `n`,
//! and retention fraction `gamma`, storage comes out to
//!
//! ```text
//! full cache:  4 * b * r * h * (s + n)
//! merged:      3 * b * r * h * (s + n)              (unmerged half + shared directions)
//! overhead:    2 * b * r * (s + n) * (1 + gamma*h)  (magnitudes + retained rows)
//! total:       b * r * (s + n) * ((3 + 2*gamma) * h + 2)
//! ```
//!
//! in the two-byte-per-scalar convention that the reference constants use;
//! [`MemoryInputs::bytes_per_scalar`] rescales to other widths. All
//! arithmetic is `f64`, and `total` is evaluated in the factored form above
//! so the canonical instances reproduce it to the last bit.
//!
//! [`reconcile`] compares the model against a [`StorageProfile`] measured
//! from a real cache and itemizes every deviation: stored angles, quantizer
//! scales, actual-vs-assumed retention counts, unpaired tails, pending
//! decode tokens. A complete accounting leaves zero unexplained scalars:
//! the residue is evaluated with error-free expansion arithmetic over the
//! category terms, so it is exactly `0.0` for any `gamma` — never a few
//! ulps of regrouping noise — and a category missing from the itemization
//! would surface at its exact size.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

// ── Analytical model ────────────────────────────────────────────────────────

/// Inputs to the closed-form model.
///
/// `gamma` and `bytes_per_scalar` are `f64` so that canonical constants
/// like 0.05 enter the arithmetic at full precision; the exactness
/// guarantees below depend on it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryInputs {
    /// Batch size `b`.
    pub batch: usize,
    /// Layer count `r`.
    pub layers: usize,
    /// Hidden width `h`.
    pub hidden: usize,
    /// Prompt length `s`.
    pub input_len: usize,
    /// Generated length `n`.
    pub output_len: usize,
    /// Retention fraction in `[0, 1]`.
    pub gamma: f64,
    /// Bytes per stored scalar: 2 reproduces the reference half-precision
    /// constants, 4 matches this crate's in-memory `f32` layout.
    pub bytes_per_scalar: f64,
}

impl MemoryInputs {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.layers == 0 || self.hidden == 0 {
            return Err(Error::InvalidConfig(
                "memory model needs positive batch, layers, and hidden".to_string(),
            ));
        }
        if self.input_len + self.output_len == 0 {
            return Err(Error::InvalidConfig(
                "memory model needs at least one token (s + n > 0)".to_string(),
            ));
        }
        if !self.gamma.is_finite() || !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::InvalidConfig(format!(
                "memory model gamma must lie in [0, 1], got {}",
                self.gamma
            )));
        }
        if !self.bytes_per_scalar.is_finite() || self.bytes_per_scalar <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "bytes_per_scalar must be positive, got {}",
                self.bytes_per_scalar
            )));
        }
        Ok(())
    }

    fn tokens(&self) -> f64 {
        (self.input_len + self.output_len) as f64
    }
}

/// Closed-form storage figures, in bytes under the chosen
/// `bytes_per_scalar` convention.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    /// Uncompressed cache: two matrices per layer.
    pub full_cache: f64,
    /// Unmerged lower half plus one shared direction matrix per pair.
    pub merged_only: f64,
    /// Restoration bookkeeping: magnitude vectors plus retained raw rows.
    pub restoration_overhead: f64,
    /// `merged_only + restoration_overhead`, evaluated in factored form.
    pub total: f64,
    /// `full_cache / total`.
    pub compression_ratio: f64,
}

/// Evaluates the closed-form model.
pub fn analytic_memory(mi: &MemoryInputs) -> Result<MemoryReport> {
    mi.validate()?;
    let b = mi.batch as f64;
    let r = mi.layers as f64;
    let h = mi.hidden as f64;
    let tokens = mi.tokens();
    let brt = b * r * tokens;
    // The reference constants assume two bytes per scalar; `half_scale`
    // carries any other width through every term uniformly.
    let half_scale = mi.bytes_per_scalar / 2.0;
    let full_cache = 4.0 * brt * h * half_scale;
    let merged_only = 3.0 * brt * h * half_scale;
    let restoration_overhead = (2.0 + 2.0 * mi.gamma * h) * brt * half_scale;
    // Factored form, not merged_only + restoration_overhead: the canonical
    // instances must reproduce ((3 + 2*gamma)*h + 2) * b*r*(s+n) bit-for-bit.
    let total = ((3.0 + 2.0 * mi.gamma) * h + 2.0) * brt * half_scale;
    Ok(MemoryReport {
        full_cache,
        merged_only,
        restoration_overhead,
        total,
        compression_ratio: full_cache / total,
    })
}

// ── Measured storage ────────────────────────────────────────────────────────

/// Category-by-category census of everything a live cache stores. Produced
/// by the cache engine; consumed by [`reconcile`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StorageProfile {
    /// Raw K/V scalars in standard (unmerged) layer slots.
    pub standard_scalars: usize,
    /// Direction-matrix scalars stored as `f32`.
    pub direction_scalars: usize,
    /// Direction-matrix entries stored as integer codes.
    pub direction_code_scalars: usize,
    /// Quantizer scales attached to coded directions.
    pub quant_scale_scalars: usize,
    /// Per-token magnitude scalars (two per role per merged token).
    pub magnitude_scalars: usize,
    /// Per-token source angles (one per role per merged token).
    pub omega_scalars: usize,
    /// Retained raw rows, all four matrices.
    pub retention_scalars: usize,
    /// Mid-decode pending tokens awaiting their pair partner.
    pub pending_scalars: usize,
    /// Retention indices: integers, tracked but not counted as scalars.
    pub retention_index_count: usize,
    /// Merged pair count.
    pub merged_pairs: usize,
    /// Code width when directions are quantized.
    pub quant_bits: Option<u8>,
}

impl StorageProfile {
    /// Every stored scalar value, counted once regardless of width. This is
    /// the integer the engine reports as its stored element count.
    #[must_use]
    pub fn stored_value_count(&self) -> usize {
        self.standard_scalars
            + self.direction_scalars
            + self.direction_code_scalars
            + self.quant_scale_scalars
            + self.magnitude_scalars
            + self.omega_scalars
            + self.retention_scalars
            + self.pending_scalars
    }

    /// Storage in `f32`-equivalents: integer codes count `bits/32` each, so
    /// a 4-bit coded direction matrix weighs an eighth of its plain form.
    #[must_use]
    pub fn f32_equivalent(&self) -> f64 {
        let code_weight = match self.quant_bits {
            Some(bits) => f64::from(bits) / 32.0,
            None => 1.0,
        };
        self.standard_scalars as f64
            + self.direction_scalars as f64
            + self.direction_code_scalars as f64 * code_weight
            + self.quant_scale_scalars as f64
            + self.magnitude_scalars as f64
            + self.omega_scalars as f64
            + self.retention_scalars as f64
            + self.pending_scalars as f64
    }
}

/// One line of the reconciliation: a named deviation from the model and
/// its signed size in `f32`-equivalent scalars.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconcileItem {
    pub label: String,
    pub scalars: f64,
}

/// Measured-versus-model accounting. `unexplained` is the residue after
/// every itemized deviation is subtracted from the raw delta; a correct
/// census leaves it at zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconcileReport {
    /// Live cache storage in `f32`-equivalent scalars.
    pub measured_scalars: f64,
    /// Model prediction in scalars (bytes_per_scalar plays no role here).
    pub analytic_scalars: f64,
    /// `measured - analytic`.
    pub delta: f64,
    /// Named deviations, fixed order, zero-valued entries included.
    pub items: Vec<ReconcileItem>,
    /// `delta - sum(items)`, evaluated without rounding over the category
    /// terms: exactly `0.0` when every stored category is itemized.
    pub unexplained: f64,
    /// Retention indices stored alongside the scalars (integers; listed for
    /// completeness, never counted).
    pub retention_index_count: usize,
}

/// Error-free sum: returns `(s, e)` with `s = fl(a + b)` and `a + b = s + e`
/// exactly (Knuth two-sum; exact for all finite, non-overflowing inputs).
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let b_virtual = s - a;
    let a_virtual = s - b_virtual;
    (s, (a - a_virtual) + (b - b_virtual))
}

/// Error-free product: returns `(p, e)` with `p = fl(a * b)` and
/// `a * b = p + e` exactly, via the fused multiply-add.
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

/// Exact running sum of `f64` terms, kept as a non-overlapping expansion
/// (grow-expansion over [`two_sum`]). The represented value is the exact
/// real sum of everything added; [`ExactSum::value`] collapses it to one
/// `f64`, which is exact whenever the true sum is zero.
#[derive(Debug, Default)]
struct ExactSum {
    parts: Vec<f64>,
}

impl ExactSum {
    fn add(&mut self, x: f64) {
        let mut carry = x;
        let mut grown = Vec::with_capacity(self.parts.len() + 1);
        for &part in &self.parts {
            let (sum, err) = two_sum(carry, part);
            grown.push(err);
            carry = sum;
        }
        grown.push(carry);
        grown.retain(|&p| p != 0.0);
        self.parts = grown;
    }

    fn sub(&mut self, x: f64) {
        self.add(-x);
    }

    fn value(&self) -> f64 {
        // Fold from +0.0 rather than `Iterator::sum`, whose -0.0 identity
        // would stamp a minus sign on the fully-cancelled empty expansion.
        self.parts.iter().fold(0.0, |acc, &p| acc + p)
    }
}

/// Compares a measured [`StorageProfile`] against the closed-form model at
/// matching dimensions. The model describes one sequence, so `batch` must
/// be 1. Works in scalar counts: `bytes_per_scalar` is irrelevant here.
pub fn reconcile(mi: &MemoryInputs, profile: &StorageProfile) -> Result<ReconcileReport> {
    mi.validate()?;
    if mi.batch != 1 {
        return Err(Error::DimsMismatch(
            "reconciliation compares a single-sequence cache; batch must be 1".to_string(),
        ));
    }
    let r = mi.layers as f64;
    let h = mi.hidden as f64;
    let tokens = mi.tokens();
    let rht = r * h * tokens;

    // Model categories under the canonical S = r/2, all-paired assumption.
    // The retention assumption gamma*rht is the one product an arbitrary
    // gamma can make inexact, so it is carried as an error-free (hi, lo)
    // pair: reported numbers use the rounded hi + lo, while the residue
    // below consumes both halves and cancels them exactly.
    let a_standard = rht; // r/2 layers * 2 matrices * h * tokens
    let a_directions = rht / 2.0; // r/4 pairs * 2 roles * h * tokens
    let a_magnitudes = r * tokens; // r/4 pairs * 4 vectors * tokens
    let (a_retention_hi, a_retention_lo) = two_prod(mi.gamma, rht); // gamma * 4 matrices / pair
    let analytic_scalars =
        a_standard + a_directions + a_magnitudes + a_retention_hi + a_retention_lo;

    // Measured categories in f32-equivalents. The code weight is a dyadic
    // fraction (bits/32), so every measured term is exact.
    let code_weight = match profile.quant_bits {
        Some(bits) => f64::from(bits) / 32.0,
        None => 1.0,
    };
    let m_standard = profile.standard_scalars as f64;
    let m_direction_rows = profile.direction_scalars as f64;
    let m_direction_codes = profile.direction_code_scalars as f64 * code_weight;
    let m_directions = m_direction_rows + m_direction_codes;
    let m_scales = profile.quant_scale_scalars as f64;
    let m_magnitudes = profile.magnitude_scalars as f64;
    let m_omegas = profile.omega_scalars as f64;
    let m_retention = profile.retention_scalars as f64;
    let m_pending = profile.pending_scalars as f64;
    let measured_scalars =
        m_standard + m_directions + m_scales + m_magnitudes + m_omegas + m_retention + m_pending;

    let items = vec![
        ReconcileItem {
            label: "standard slots vs assumed unmerged half".to_string(),
            scalars: m_standard - a_standard,
        },
        ReconcileItem {
            label: "direction rows vs assumed pair coverage".to_string(),
            scalars: m_directions - a_directions,
        },
        ReconcileItem {
            label: "magnitude vectors vs assumed pair coverage".to_string(),
            scalars: m_magnitudes - a_magnitudes,
        },
        ReconcileItem {
            label: "retention rows vs gamma-fraction assumption".to_string(),
            scalars: m_retention - a_retention_hi - a_retention_lo,
        },
        ReconcileItem { label: "source angles (stored, not modelled)".to_string(), scalars: m_omegas },
        ReconcileItem { label: "quantizer scales (not modelled)".to_string(), scalars: m_scales },
        ReconcileItem { label: "pending decode tokens (not modelled)".to_string(), scalars: m_pending },
    ];

    // The residue is computed over the category terms themselves, not the
    // rounded sums above, so complete itemization yields exactly zero and
    // an unitemized category would appear at its exact size.
    let mut residue = ExactSum::default();
    for measured in
        [m_standard, m_directions, m_scales, m_magnitudes, m_omegas, m_retention, m_pending]
    {
        residue.add(measured);
    }
    for analytic in [a_standard, a_directions, a_magnitudes, a_retention_hi, a_retention_lo] {
        residue.sub(analytic);
    }
    for (item_measured, item_analytic_hi, item_analytic_lo) in [
        (m_standard, a_standard, 0.0),
        (m_directions, a_directions, 0.0),
        (m_magnitudes, a_magnitudes, 0.0),
        (m_retention, a_retention_hi, a_retention_lo),
        (m_omegas, 0.0, 0.0),
        (m_scales, 0.0, 0.0),
        (m_pending, 0.0, 0.0),
    ] {
        residue.sub(item_measured);
        residue.add(item_analytic_hi);
        residue.add(item_analytic_lo);
    }

    let delta = measured_scalars - analytic_scalars;
    Ok(ReconcileReport {
        measured_scalars,
        analytic_scalars,
        delta,
        items,
        unexplained: residue.value(),
        retention_index_count: profile.retention_index_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn canonical() -> MemoryInputs {
        MemoryInputs {
            batch: 1,
            layers: 32,
            hidden: 4096,
            input_len: 128,
            output_len: 128,
            gamma: 0.05,
            bytes_per_scalar: 2.0,
        }
    }

    // ── Closed forms ────────────────────────────────────────────────────

    #[test]
    fn canonical_instance_reproduces_the_reference_figures() {
        let report = analytic_memory(&canonical()).unwrap();
        assert_eq!(report.full_cache, 134_217_728.0);
        assert_eq!(report.merged_only, 100_663_296.0);
        // Factored form matches the literal expression bit-for-bit.
        let brt = (32 * 256) as f64;
        assert_eq!(report.total, (3.1 * 4096.0 + 2.0) * brt);
        assert_eq!(report.total / brt, 3.1 * 4096.0 + 2.0);
        // Direct evaluation of full/total at this instance.
        let want_ratio = 134_217_728.0 / ((3.1 * 4096.0 + 2.0) * brt);
        assert_eq!(report.compression_ratio, want_ratio);
        assert!((report.compression_ratio - 1.290_119_4).abs() < 1e-6);
    }

    #[test]
    fn wide_hidden_limit_approaches_four_over_three_point_one() {
        // ratio = 4h / ((3 + 2*gamma)h + 2) rises toward 4 / (3 + 2*gamma).
        let limit = 4.0 / 3.1;
        let mut last = 0.0;
        for hidden in [4096usize, 65_536, 1_000_000] {
            let mi = MemoryInputs { hidden, ..canonical() };
            let ratio = analytic_memory(&mi).unwrap().compression_ratio;
            assert!(ratio > last, "ratio should rise with h");
            assert!(ratio < limit);
            last = ratio;
        }
        assert!((last - limit).abs() < 1e-4);
        assert!((limit - 1.2903).abs() < 1e-4);
    }

    #[test]
    fn components_sum_to_total_within_rounding() {
        for gamma in [0.0, 0.05, 0.3, 1.0] {
            let mi = MemoryInputs { gamma, layers: 12, hidden: 96, ..canonical() };
            let report = analytic_memory(&mi).unwrap();
            let sum = report.merged_only + report.restoration_overhead;
            assert!((sum - report.total).abs() / report.total < 1e-12);
        }
    }

    #[test]
    fn gamma_zero_leaves_only_magnitude_overhead() {
        let mi = MemoryInputs { gamma: 0.0, ..canonical() };
        let report = analytic_memory(&mi).unwrap();
        assert_eq!(report.restoration_overhead, 2.0 * (32 * 256) as f64);
    }

    #[test]
    fn byte_width_scales_every_term_linearly() {
        let narrow = analytic_memory(&canonical()).unwrap();
        let wide =
            analytic_memory(&MemoryInputs { bytes_per_scalar: 4.0, ..canonical() }).unwrap();
        assert_eq!(wide.full_cache, 2.0 * narrow.full_cache);
        assert_eq!(wide.total, 2.0 * narrow.total);
        assert_eq!(wide.compression_ratio, narrow.compression_ratio);
    }

    #[test]
    fn compression_beats_full_cache_at_realistic_widths() {
        for (hidden, gamma) in [(64usize, 0.05f64), (4096, 0.05), (1024, 0.0)] {
            let mi = MemoryInputs { hidden, gamma, ..canonical() };
            let report = analytic_memory(&mi).unwrap();
            assert!(report.total < report.full_cache, "h={hidden} gamma={gamma}");
            assert!(report.compression_ratio > 1.0);
        }
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        assert!(analytic_memory(&MemoryInputs { batch: 0, ..canonical() }).is_err());
        assert!(analytic_memory(&MemoryInputs { gamma: 1.5, ..canonical() }).is_err());
        assert!(analytic_memory(&MemoryInputs { bytes_per_scalar: 0.0, ..canonical() }).is_err());
        assert!(analytic_memory(&MemoryInputs {
            input_len: 0,
            output_len: 0,
            ..canonical()
        })
        .is_err());
    }

    // ── Reconciliation ──────────────────────────────────────────────────

    /// Hand-tallied profile of a cache with r=4, S=2, n_tok=8, h=16,
    /// gamma=0, no quantization: two standard layers plus one merged pair.
    fn small_profile() -> StorageProfile {
        StorageProfile {
            standard_scalars: 2 * 2 * 8 * 16,
            direction_scalars: 2 * 8 * 16,
            magnitude_scalars: 4 * 8,
            omega_scalars: 2 * 8,
            merged_pairs: 1,
            ..StorageProfile::default()
        }
    }

    fn small_inputs(gamma: f64) -> MemoryInputs {
        MemoryInputs {
            batch: 1,
            layers: 4,
            hidden: 16,
            input_len: 8,
            output_len: 0,
            gamma,
            bytes_per_scalar: 2.0,
        }
    }

    #[test]
    fn angle_storage_is_the_only_deviation_for_the_canonical_shape() {
        let report = reconcile(&small_inputs(0.0), &small_profile()).unwrap();
        assert_eq!(report.analytic_scalars, 800.0);
        assert_eq!(report.measured_scalars, 816.0);
        assert_eq!(report.delta, 16.0);
        assert_eq!(report.unexplained, 0.0);
        let omega_item =
            report.items.iter().find(|i| i.label.contains("angles")).unwrap();
        assert_eq!(omega_item.scalars, 16.0);
        // All other items cancel exactly.
        let other: f64 = report
            .items
            .iter()
            .filter(|i| !i.label.contains("angles"))
            .map(|i| i.scalars)
            .sum();
        assert_eq!(other, 0.0);
    }

    #[test]
    fn unmerged_cache_reconciles_exactly() {
        // S = r: every layer standard, nothing merged.
        let profile = StorageProfile {
            standard_scalars: 2 * 4 * 8 * 16,
            ..StorageProfile::default()
        };
        let report = reconcile(&small_inputs(0.0), &profile).unwrap();
        assert_eq!(report.measured_scalars, 1024.0);
        assert_eq!(report.delta, 224.0);
        assert_eq!(report.unexplained, 0.0);
    }

    #[test]
    fn full_retention_reconciles_exactly() {
        // gamma = 1 retains all four matrices of the pair in full.
        let mut profile = small_profile();
        profile.retention_scalars = 4 * 8 * 16;
        profile.retention_index_count = 8;
        let report = reconcile(&small_inputs(1.0), &profile).unwrap();
        // Retained rows exactly match the gamma-fraction assumption.
        let retention_item =
            report.items.iter().find(|i| i.label.contains("retention")).unwrap();
        assert_eq!(retention_item.scalars, 0.0);
        assert_eq!(report.unexplained, 0.0);
        assert_eq!(report.retention_index_count, 8);
    }

    #[test]
    fn quantized_directions_reduce_by_the_bit_factor() {
        // Directions stored as 4-bit codes weigh an eighth of f32.
        let mut profile = small_profile();
        profile.direction_code_scalars = profile.direction_scalars;
        profile.direction_scalars = 0;
        profile.quant_scale_scalars = 2 * 8 * 2; // two roles, 8 rows, 2 groups
        profile.quant_bits = Some(4);
        let report = reconcile(&small_inputs(0.0), &profile).unwrap();
        let dir_item = report.items.iter().find(|i| i.label.contains("direction")).unwrap();
        // 256 f32 scalars assumed, 256 codes at 4/32 weight = 32 equivalents.
        assert_eq!(dir_item.scalars, 32.0 - 256.0);
        assert_eq!(report.unexplained, 0.0);
        assert_eq!(profile.f32_equivalent(), 512.0 + 32.0 + 32.0 + 32.0 + 16.0);
    }

    #[test]
    fn reconcile_requires_single_sequence() {
        let err =
            reconcile(&MemoryInputs { batch: 2, ..small_inputs(0.0) }, &small_profile())
                .unwrap_err();
        assert!(matches!(err, Error::DimsMismatch(_)));
    }

    #[test]
    fn value_count_and_equivalents_agree_without_quantization() {
        let profile = small_profile();
        assert_eq!(profile.stored_value_count() as f64, profile.f32_equivalent());
        assert_eq!(profile.stored_value_count(), 816);
    }

    // ── Error-free accumulation ─────────────────────────────────────────

    #[test]
    fn two_sum_recovers_the_bits_ordinary_addition_drops() {
        let (sum, err) = two_sum(1.0, 2f64.powi(-60));
        assert_eq!(sum, 1.0);
        assert_eq!(err, 2f64.powi(-60));
        let (sum, err) = two_sum(0.1, 0.2);
        assert_eq!(sum, 0.1 + 0.2);
        assert_ne!(err, 0.0); // 0.1 + 0.2 rounds, and the error is captured
    }

    #[test]
    fn two_prod_splits_a_product_exactly() {
        let a = 1.0 + 2f64.powi(-30);
        let (prod, err) = two_prod(a, a);
        // True square is 1 + 2^-29 + 2^-60; the tail lands in the error.
        assert_eq!(prod, 1.0 + 2f64.powi(-29));
        assert_eq!(err, 2f64.powi(-60));
        let (_, exact_err) = two_prod(3.0, 0.5);
        assert_eq!(exact_err, 0.0);
    }

    #[test]
    fn exact_sum_survives_catastrophic_cancellation() {
        let mut acc = ExactSum::default();
        acc.add(1e16);
        acc.add(1.0);
        acc.sub(1e16);
        // Naive f64 loses the 1.0: (1e16 + 1.0) - 1e16 == 0.0.
        assert_eq!((1e16_f64 + 1.0) - 1e16, 0.0);
        assert_eq!(acc.value(), 1.0);
        acc.sub(1.0);
        assert_eq!(acc.value(), 0.0);
    }

    #[test]
    fn reconciliation_is_exact_for_awkward_gammas() {
        // Gammas with full 53-bit mantissas make the naive delta and the
        // naive item sum round differently; the residue must still be
        // exactly zero for every one of them.
        let gammas = [
            0.05,
            f64::from(0.05_f32),
            1.0 / 3.0,
            0.234_567_891_234,
            0.999_999_999_999,
            1e-9,
        ];
        for &gamma in &gammas {
            for retained_tokens in [0usize, 1, 3, 8] {
                let mut profile = small_profile();
                profile.retention_scalars = 4 * retained_tokens * 16;
                profile.retention_index_count = retained_tokens;
                let report = reconcile(&small_inputs(gamma), &profile).unwrap();
                // Bit equality: the fully-cancelled residue is +0.0, not -0.0.
                assert_eq!(
                    report.unexplained.to_bits(),
                    0.0f64.to_bits(),
                    "gamma={gamma} retained={retained_tokens}"
                );
            }
        }
    }

    #[test]
    fn reconciliation_is_exact_across_random_shapes_and_gammas() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(41);
        for _ in 0..200 {
            let layers = rng.gen_range(2usize..40) * 2;
            let hidden = rng.gen_range(1usize..300);
            let tokens = rng.gen_range(1usize..500);
            let gamma: f64 = rng.gen_range(0.0..=1.0);
            let profile = StorageProfile {
                standard_scalars: rng.gen_range(0..1_000_000),
                direction_scalars: rng.gen_range(0..1_000_000),
                direction_code_scalars: rng.gen_range(0..1_000_000),
                quant_scale_scalars: rng.gen_range(0..10_000),
                magnitude_scalars: rng.gen_range(0..10_000),
                omega_scalars: rng.gen_range(0..10_000),
                retention_scalars: rng.gen_range(0..100_000),
                pending_scalars: rng.gen_range(0..1_000),
                retention_index_count: rng.gen_range(0..100),
                merged_pairs: rng.gen_range(0..20),
                quant_bits: Some(if rng.gen() { 4 } else { 8 }),
            };
            let mi = MemoryInputs {
                batch: 1,
                layers,
                hidden,
                input_len: tokens,
                output_len: 0,
                gamma,
                bytes_per_scalar: 2.0,
            };
            let report = reconcile(&mi, &profile).unwrap();
            assert_eq!(report.unexplained.to_bits(), 0.0f64.to_bits(), "gamma={gamma} layers={layers}");
            // The naive reading of the same report stays within rounding
            // noise of zero, which is all plain f64 can promise.
            let naive: f64 = report.items.iter().map(|i| i.scalars).sum();
            assert!((report.delta - naive).abs() < 1e-6);
        }
    }
}
