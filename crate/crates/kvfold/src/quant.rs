//! Symmetric round-to-nearest quantizer for merged direction matrices.
//!
//! Each token row is split into groups of `group_size` consecutive hidden
//! channels; every group gets one scale, `max|x| / (2^(bits-1) - 1)`, and
//! its entries become signed integer codes `round(x / scale)`. Directions
//! are bounded (unit-norm up to the merge function's convention), which is
//! what makes this cheap scheme workable; magnitudes and retained raw rows
//! stay in `f32`.
//!
//! Codes are stored one per `i8` regardless of bit width. The storage win
//! of 4-bit packing is an accounting concern, handled by the memory model's
//! `bits/32` factor, not a byte-layout concern of this desk-scale engine.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Role, TokenMatrix};

/// Bit width and grouping for the quantizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantConfig {
    /// Code width in bits; 4 and 8 are supported.
    pub bits: u8,
    /// Hidden channels per scale group. The last group of a row may be
    /// ragged when `group_size` does not divide the hidden width.
    pub group_size: usize,
}

impl QuantConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bits != 4 && self.bits != 8 {
            return Err(Error::InvalidConfig(format!(
                "quantizer supports 4 or 8 bits, got {}",
                self.bits
            )));
        }
        if self.group_size == 0 {
            return Err(Error::InvalidConfig("quantizer group_size must be positive".to_string()));
        }
        Ok(())
    }

    /// Largest representable code magnitude: `2^(bits-1) - 1`.
    #[must_use]
    pub fn q_max(&self) -> i32 {
        (1 << (self.bits - 1)) - 1
    }

    /// Scale groups per row of width `hidden`.
    #[must_use]
    pub fn groups_per_row(&self, hidden: usize) -> usize {
        hidden.div_ceil(self.group_size)
    }
}

/// A quantized `[tokens, hidden]` matrix: integer codes plus one `f32`
/// scale per `(row, group)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedMatrix {
    codes: Vec<i8>,
    scales: Vec<f32>,
    tokens: usize,
    hidden: usize,
    config: QuantConfig,
    role: Role,
}

impl QuantizedMatrix {
    /// Reassembles a quantized matrix from stored parts, revalidating
    /// shapes and code range.
    pub fn from_parts(
        codes: Vec<i8>,
        scales: Vec<f32>,
        tokens: usize,
        hidden: usize,
        config: QuantConfig,
        role: Role,
    ) -> Result<Self> {
        config.validate()?;
        let groups = config.groups_per_row(hidden);
        if codes.len() != tokens * hidden || scales.len() != tokens * groups {
            return Err(Error::DimsMismatch(format!(
                "quantized matrix for {tokens}x{hidden} needs {} codes and {} scales, got {} and {}",
                tokens * hidden,
                tokens * groups,
                codes.len(),
                scales.len()
            )));
        }
        let q_max = config.q_max();
        if codes.iter().any(|&c| i32::from(c) > q_max || i32::from(c) < -q_max) {
            return Err(Error::InvalidConfig(format!(
                "quantized codes exceed the {}-bit range [-{q_max}, {q_max}]",
                config.bits
            )));
        }
        Ok(QuantizedMatrix { codes, scales, tokens, hidden, config, role })
    }

    #[must_use]
    pub fn tokens(&self) -> usize {
        self.tokens
    }

    #[must_use]
    pub fn hidden(&self) -> usize {
        self.hidden
    }

    #[must_use]
    pub fn config(&self) -> QuantConfig {
        self.config
    }

    #[must_use]
    pub fn role(&self) -> Role {
        self.role
    }

    #[must_use]
    pub fn codes(&self) -> &[i8] {
        &self.codes
    }

    #[must_use]
    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    /// Dequantizes one token row.
    #[must_use]
    pub fn row_f32(&self, i: usize) -> Vec<f32> {
        let groups = self.config.groups_per_row(self.hidden);
        let codes = &self.codes[i * self.hidden..(i + 1) * self.hidden];
        let scales = &self.scales[i * groups..(i + 1) * groups];
        codes
            .iter()
            .enumerate()
            .map(|(j, &c)| f32::from(c) * scales[j / self.config.group_size])
            .collect()
    }

    /// Quantizes and appends one token row (decode-time growth).
    pub fn push_row(&mut self, row: &[f32]) -> Result<()> {
        if row.len() != self.hidden {
            return Err(Error::ShapeMismatch {
                context: "quantized row append".to_string(),
                expected_rows: 1,
                expected_cols: self.hidden,
                actual_rows: 1,
                actual_cols: row.len(),
            });
        }
        let (codes, scales) = quantize_row(row, &self.config);
        self.codes.extend_from_slice(&codes);
        self.scales.extend_from_slice(&scales);
        self.tokens += 1;
        Ok(())
    }
}

fn quantize_row(row: &[f32], cfg: &QuantConfig) -> (Vec<i8>, Vec<f32>) {
    let q_max = cfg.q_max();
    let mut codes = Vec::with_capacity(row.len());
    let mut scales = Vec::with_capacity(cfg.groups_per_row(row.len()));
    for group in row.chunks(cfg.group_size) {
        let amax = group.iter().fold(0.0f32, |m, &v| m.max(v.abs()));
        // An all-zero group has nothing to scale; store scale 1 so the
        // zero codes dequantize to exact zeros without a special case.
        let scale = if amax == 0.0 { 1.0 } else { amax / q_max as f32 };
        scales.push(scale);
        for &v in group {
            let q = (f64::from(v) / f64::from(scale)).round();
            codes.push(q.clamp(f64::from(-q_max), f64::from(q_max)) as i8);
        }
    }
    (codes, scales)
}

/// Quantizes a full matrix, row by row, group by group.
pub fn quantize(m: &TokenMatrix, cfg: &QuantConfig) -> Result<QuantizedMatrix> {
    cfg.validate()?;
    let groups = cfg.groups_per_row(m.hidden());
    let mut codes = Vec::with_capacity(m.tokens() * m.hidden());
    let mut scales = Vec::with_capacity(m.tokens() * groups);
    for i in 0..m.tokens() {
        let (c, s) = quantize_row(m.row(i), cfg);
        codes.extend_from_slice(&c);
        scales.extend_from_slice(&s);
    }
    Ok(QuantizedMatrix {
        codes,
        scales,
        tokens: m.tokens(),
        hidden: m.hidden(),
        config: *cfg,
        role: m.role(),
    })
}

/// Expands a quantized matrix back to `f32`: `code * scale` per entry.
#[must_use]
pub fn dequantize(q: &QuantizedMatrix) -> TokenMatrix {
    let mut data = Vec::with_capacity(q.tokens * q.hidden);
    for i in 0..q.tokens {
        data.extend_from_slice(&q.row_f32(i));
    }
    TokenMatrix::from_parts(data, q.tokens, q.hidden, q.role)
}
