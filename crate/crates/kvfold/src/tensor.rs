//! Dense token-state containers: per-layer key/value matrices and the
//! multi-layer dumps that feed the compression pipeline.
//!
//! Everything downstream operates on one sequence at a time. A [`KvDump`]
//! holds, for each decoder layer, one key matrix and one value matrix of
//! shape `[tokens, hidden]`, stored row-major in `f32`. The hidden axis is
//! the flattened head axis (heads x head_dim); nothing in the pipeline needs
//! the head structure, so it is not modelled. Batches are handled by looping
//! over independent dumps, which keeps every kernel a plain loop over token
//! rows.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

// ── Dimensions ──────────────────────────────────────────────────────────────

/// Logical dimensions of a KV dump.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    /// Number of independent sequences the capture describes. The payload of
    /// a dump always holds a single sequence; `batch` is carried as metadata
    /// for the analytical memory model.
    pub batch: usize,
    /// Decoder layer count.
    pub layers: usize,
    /// Token rows per layer matrix. May be zero for an empty prompt.
    pub tokens: usize,
    /// Hidden width (attention heads flattened into one axis).
    pub hidden: usize,
}

impl Dims {
    /// Builds a dimension record, rejecting zero batch, layer, or hidden
    /// sizes. A zero token count is legal: it describes an empty prompt.
    pub fn new(batch: usize, layers: usize, tokens: usize, hidden: usize) -> Result<Self> {
        if batch == 0 || layers == 0 || hidden == 0 {
            return Err(Error::InvalidConfig(format!(
                "batch, layers, and hidden must be positive (got {batch}, {layers}, {hidden})"
            )));
        }
        Ok(Dims { batch, layers, tokens, hidden })
    }

    /// Total `f32` scalars a full (uncompressed) dump of these dimensions
    /// stores: two matrices per layer.
    #[must_use]
    pub fn element_count(&self) -> usize {
        2 * self.layers * self.tokens * self.hidden
    }
}

/// Which half of the KV cache a matrix belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Key,
    Value,
}

impl Role {
    /// Lower-case label used in CSV output and error contexts.
    #[must_use]
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::Key => "key",
            Role::Value => "value",
        }
    }
}

// ── Token matrices ──────────────────────────────────────────────────────────

/// A role-tagged `[tokens, hidden]` matrix of token states, row-major.
///
/// Construction validates shape and rejects NaN/infinity so that every
/// matrix in the pipeline is known finite; kernels downstream never re-scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenMatrix {
    data: Vec<f32>,
    tokens: usize,
    hidden: usize,
    role: Role,
}

impl TokenMatrix {
    /// Builds a matrix from a row-major buffer, validating length and
    /// finiteness. The error names the first offending token row.
    pub fn new(data: Vec<f32>, tokens: usize, hidden: usize, role: Role) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::InvalidConfig("hidden width must be positive".to_string()));
        }
        if data.len() != tokens * hidden {
            return Err(Error::ShapeMismatch {
                context: format!("{} matrix buffer", role.as_str()),
                expected_rows: tokens,
                expected_cols: hidden,
                actual_rows: data.len() / hidden.max(1),
                actual_cols: hidden,
            });
        }
        let m = TokenMatrix { data, tokens, hidden, role };
        m.validate_finite("token matrix")?;
        Ok(m)
    }

    /// Builds a matrix from individual rows.
    pub fn from_rows(rows: &[Vec<f32>], hidden: usize, role: Role) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * hidden);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != hidden {
                return Err(Error::ShapeMismatch {
                    context: format!("{} row {i}", role.as_str()),
                    expected_rows: 1,
                    expected_cols: hidden,
                    actual_rows: 1,
                    actual_cols: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        TokenMatrix::new(data, rows.len(), hidden, role)
    }

    /// An all-zero matrix.
    #[must_use]
    pub fn zeros(tokens: usize, hidden: usize, role: Role) -> Self {
        TokenMatrix { data: vec![0.0; tokens * hidden], tokens, hidden, role }
    }

    /// Internal constructor for values produced by the pipeline itself,
    /// where shape is correct by construction. Debug builds still check.
    pub(crate) fn from_parts(data: Vec<f32>, tokens: usize, hidden: usize, role: Role) -> Self {
        debug_assert_eq!(data.len(), tokens * hidden);
        TokenMatrix { data, tokens, hidden, role }
    }

    /// Scans for NaN/infinity; the error carries `context` plus the first
    /// offending row index.
    pub fn validate_finite(&self, context: &str) -> Result<()> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFiniteValue {
                    context: context.to_string(),
                    row: i / self.hidden,
                });
            }
        }
        Ok(())
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
    pub fn role(&self) -> Role {
        self.role
    }

    /// The whole row-major buffer.
    #[must_use]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// One token row.
    #[must_use]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.hidden..(i + 1) * self.hidden]
    }

    /// Replaces one token row. Errors if the index or width disagrees.
    pub fn set_row(&mut self, i: usize, row: &[f32]) -> Result<()> {
        if i >= self.tokens {
            return Err(Error::IndexOutOfRange { index: i, len: self.tokens });
        }
        if row.len() != self.hidden {
            return Err(Error::ShapeMismatch {
                context: format!("{} row {i}", self.role.as_str()),
                expected_rows: 1,
                expected_cols: self.hidden,
                actual_rows: 1,
                actual_cols: row.len(),
            });
        }
        self.data[i * self.hidden..(i + 1) * self.hidden].copy_from_slice(row);
        Ok(())
    }

    /// Appends one token row. Errors if the width disagrees.
    pub fn push_row(&mut self, row: &[f32]) -> Result<()> {
        if row.len() != self.hidden {
            return Err(Error::ShapeMismatch {
                context: format!("appended {} row", self.role.as_str()),
                expected_rows: 1,
                expected_cols: self.hidden,
                actual_rows: 1,
                actual_cols: row.len(),
            });
        }
        self.data.extend_from_slice(row);
        self.tokens += 1;
        Ok(())
    }

    /// Per-row Euclidean norms, accumulated in `f64` and rounded once at the
    /// end, so the result is insensitive to row width at `f32` scale.
    #[must_use]
    pub fn row_norms(&self) -> Vec<f32> {
        (0..self.tokens)
            .map(|i| {
                let sum: f64 = self.row(i).iter().map(|&v| f64::from(v) * f64::from(v)).sum();
                sum.sqrt() as f32
            })
            .collect()
    }
}

/// Per-row Euclidean norms of a token matrix.
#[must_use]
pub fn row_norm(m: &TokenMatrix) -> Vec<f32> {
    m.row_norms()
}

// ── Dumps ───────────────────────────────────────────────────────────────────

/// One layer's key and value matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerKv {
    pub key: TokenMatrix,
    pub value: TokenMatrix,
}

/// A full multi-layer KV capture for a single sequence: the input to
/// compression and the reference that restoration is judged against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KvDump {
    dims: Dims,
    layers: Vec<LayerKv>,
}

impl KvDump {
    /// Assembles a dump and validates it in one step.
    pub fn new(dims: Dims, layers: Vec<LayerKv>) -> Result<Self> {
        let dump = KvDump { dims, layers };
        dump.validate()?;
        Ok(dump)
    }

    #[must_use]
    pub fn dims(&self) -> Dims {
        self.dims
    }

    #[must_use]
    pub fn layers(&self) -> &[LayerKv] {
        &self.layers
    }

    #[must_use]
    pub fn layer(&self, l: usize) -> &LayerKv {
        &self.layers[l]
    }

    /// Checks layer count, per-matrix shape and role, and finiteness.
    /// Errors name the offending layer and row.
    pub fn validate(&self) -> Result<()> {
        if self.layers.len() != self.dims.layers {
            return Err(Error::LayerCountMismatch {
                expected: self.dims.layers,
                actual: self.layers.len(),
            });
        }
        for (l, pair) in self.layers.iter().enumerate() {
            for (m, role) in [(&pair.key, Role::Key), (&pair.value, Role::Value)] {
                if m.role() != role {
                    return Err(Error::InvalidConfig(format!(
                        "layer {l}: matrix in the {} slot is tagged {}",
                        role.as_str(),
                        m.role().as_str()
                    )));
                }
                if m.tokens() != self.dims.tokens || m.hidden() != self.dims.hidden {
                    return Err(Error::ShapeMismatch {
                        context: format!("layer {l} {}", role.as_str()),
                        expected_rows: self.dims.tokens,
                        expected_cols: self.dims.hidden,
                        actual_rows: m.tokens(),
                        actual_cols: m.hidden(),
                    });
                }
                m.validate_finite(&format!("layer {l} {}", role.as_str()))?;
            }
        }
        Ok(())
    }

    /// Deterministic synthetic dump: every entry is an independent standard
    /// normal draw from a counter-based stream, so the same `(dims, seed)`
    /// always reproduces the same bits. Used by benchmarks and as a fixture
    /// generator; real captures arrive through the dump file format.
    #[must_use]
    pub fn seeded_gaussian(dims: Dims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.tokens * dims.hidden;
        let mut draw = |role: Role| {
            let data: Vec<f32> =
                (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            TokenMatrix::from_parts(data, dims.tokens, dims.hidden, role)
        };
        let layers = (0..dims.layers)
            .map(|_| LayerKv { key: draw(Role::Key), value: draw(Role::Value) })
            .collect();
        KvDump { dims, layers }
    }
}

/// Validates a dump: layer count, shapes, roles, finiteness.
pub fn validate_dump(dump: &KvDump) -> Result<()> {
    dump.validate()
}
