//! Deterministic synthetic multi-layer attention decoder.
//!
//! A [`SimModel`] is a stack of attention-only layers with seeded random
//! projection matrices — no layer norm, no MLP, no positional encoding.
//! It exists to generate realistic key/value dumps and to measure, end to
//! end, how far decoding over a compressed [`LayeredKvCache`] drifts from
//! decoding over an uncompressed [`FullCache`] built from the same prefill.
//!
//! Everything is reproducible: the same seed yields bit-identical weights,
//! prompts, and decode trajectories.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::engine::{softmax_attention, EngineConfig, LayeredKvCache};
use crate::error::{Error, Result};
use crate::merge::{dot_f64, lenient_distance, norm_f64};
use crate::tensor::{Dims, KvDump, LayerKv, Role, TokenMatrix};

/// Seed salts deriving the prompt and decode-start streams from the model
/// seed, so weights, prompt, and decode inputs are independent streams.
const PROMPT_STREAM: u64 = 0xA076_1D64_78BD_642F;
const DECODE_STREAM: u64 = 0x9E37_79B9_7F4A_7C15;

// ── Model ───────────────────────────────────────────────────────────────────

/// Attention-only transformer stand-in: per-layer query/key/value/output
/// projections, each `h × h`, drawn from a seeded standard normal scaled
/// by `1/sqrt(h)` so activations stay `O(1)` at prefill scale.
#[derive(Debug, Clone)]
pub struct SimModel {
    layers: usize,
    hidden: usize,
    seed: u64,
    w_q: Vec<Vec<f32>>,
    w_k: Vec<Vec<f32>>,
    w_v: Vec<Vec<f32>>,
    w_o: Vec<Vec<f32>>,
}

impl SimModel {
    pub fn new(layers: usize, hidden: usize, seed: u64) -> Result<Self> {
        if layers == 0 || hidden == 0 {
            return Err(Error::InvalidConfig(
                "simulator needs positive layer count and hidden width".to_string(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (hidden as f64).sqrt();
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f32> {
            (0..hidden * hidden)
                .map(|_| {
                    let g: f64 = StandardNormal.sample(rng);
                    (g * scale) as f32
                })
                .collect()
        };
        let mut w_q = Vec::with_capacity(layers);
        let mut w_k = Vec::with_capacity(layers);
        let mut w_v = Vec::with_capacity(layers);
        let mut w_o = Vec::with_capacity(layers);
        for _ in 0..layers {
            w_q.push(draw(&mut rng));
            w_k.push(draw(&mut rng));
            w_v.push(draw(&mut rng));
            w_o.push(draw(&mut rng));
        }
        Ok(SimModel { layers, hidden, seed, w_q, w_k, w_v, w_o })
    }

    #[must_use]
    pub fn layers(&self) -> usize {
        self.layers
    }

    #[must_use]
    pub fn hidden(&self) -> usize {
        self.hidden
    }

    #[must_use]
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Row-vector × matrix product `x · W`, accumulated in `f64`.
    fn project(&self, x: &[f32], w: &[f32]) -> Vec<f32> {
        let h = self.hidden;
        debug_assert_eq!(x.len(), h);
        let mut out = vec![0.0f64; h];
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let xi = f64::from(xi);
            for (acc, &wij) in out.iter_mut().zip(&w[i * h..(i + 1) * h]) {
                *acc += xi * f64::from(wij);
            }
        }
        out.into_iter().map(|v| v as f32).collect()
    }

    /// Deterministic standard-normal prompt rows derived from the model
    /// seed (a separate stream from the weights).
    #[must_use]
    pub fn seeded_prompt(&self, tokens: usize) -> Vec<Vec<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ PROMPT_STREAM);
        (0..tokens)
            .map(|_| {
                (0..self.hidden)
                    .map(|_| {
                        let g: f64 = StandardNormal.sample(&mut rng);
                        g as f32
                    })
                    .collect()
            })
            .collect()
    }

    /// Deterministic decode-start hidden state (its own seed stream).
    #[must_use]
    pub fn start_state(&self) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ DECODE_STREAM);
        (0..self.hidden)
            .map(|_| {
                let g: f64 = StandardNormal.sample(&mut rng);
                g as f32
            })
            .collect()
    }

    /// Runs the prompt through the stack and captures each layer's K and V
    /// matrices — computed from the layer's *input* states, before that
    /// layer's attention writes into the residual stream. Attention within
    /// the prefill is causal plain softmax; each token's context feeds back
    /// through the output projection with a residual connection.
    pub fn run_prefill(&self, prompt: &[Vec<f32>]) -> Result<KvDump> {
        if prompt.is_empty() {
            return Err(Error::EmptyInput("prefill prompt"));
        }
        for (i, row) in prompt.iter().enumerate() {
            if row.len() != self.hidden {
                return Err(Error::ShapeMismatch {
                    context: format!("prompt row {i}"),
                    expected_rows: 1,
                    expected_cols: self.hidden,
                    actual_rows: 1,
                    actual_cols: row.len(),
                });
            }
        }
        let tokens = prompt.len();
        let mut x: Vec<Vec<f32>> = prompt.to_vec();
        let mut layers = Vec::with_capacity(self.layers);
        for l in 0..self.layers {
            let keys: Vec<Vec<f32>> =
                x.iter().map(|xi| self.project(xi, &self.w_k[l])).collect();
            let values: Vec<Vec<f32>> =
                x.iter().map(|xi| self.project(xi, &self.w_v[l])).collect();
            layers.push(LayerKv {
                key: TokenMatrix::from_rows(&keys, self.hidden, Role::Key)?,
                value: TokenMatrix::from_rows(&values, self.hidden, Role::Value)?,
            });
            for (i, xi) in x.iter_mut().enumerate() {
                let q = self.project(xi, &self.w_q[l]);
                let ctx = context_over(&q, &keys[..=i], &values[..=i]);
                let o = self.project(&ctx, &self.w_o[l]);
                for (xij, oj) in xi.iter_mut().zip(&o) {
                    *xij += oj;
                }
            }
        }
        KvDump::new(Dims::new(1, self.layers, tokens, self.hidden)?, layers)
    }

    /// Greedy deterministic unrolling: each step projects the running
    /// hidden state into one new K/V/query per layer, attends over the
    /// cache, and feeds the context back through the output projection
    /// with a residual. Returns the hidden state after every step.
    pub fn run_decode(&self, cache: &mut SimCache, steps: usize) -> Result<Vec<Vec<f32>>> {
        if cache.num_layers() != self.layers {
            return Err(Error::LayerCountMismatch {
                expected: self.layers,
                actual: cache.num_layers(),
            });
        }
        let mut x = self.start_state();
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            for l in 0..self.layers {
                let k = self.project(&x, &self.w_k[l]);
                let v = self.project(&x, &self.w_v[l]);
                let q = self.project(&x, &self.w_q[l]);
                let ctx = cache.decode_step(l, &k, &v, &q)?;
                let o = self.project(&ctx, &self.w_o[l]);
                for (xj, oj) in x.iter_mut().zip(&o) {
                    *xj += oj;
                }
            }
            out.push(x.clone());
        }
        Ok(out)
    }

    /// Decodes `steps` tokens twice from the same dump — once over a dense
    /// full cache, once over a compressed cache built with `config` — and
    /// reports the per-step drift plus the dump's adjacent-layer
    /// similarity profile.
    pub fn divergence_report(
        &self,
        dump: &KvDump,
        config: EngineConfig,
        steps: usize,
    ) -> Result<DivergenceReport> {
        let dims = dump.dims();
        if dims.layers != self.layers {
            return Err(Error::LayerCountMismatch {
                expected: self.layers,
                actual: dims.layers,
            });
        }
        if dims.hidden != self.hidden {
            return Err(Error::DimsMismatch(format!(
                "dump hidden width {} does not match the model's {}",
                dims.hidden, self.hidden
            )));
        }
        let mut full = SimCache::Full(FullCache::from_dump(dump)?);
        let mut merged = SimCache::Engine(LayeredKvCache::prefill(dump, config)?);
        let reference = self.run_decode(&mut full, steps)?;
        let compressed = self.run_decode(&mut merged, steps)?;
        let mut max_abs_diff = Vec::with_capacity(steps);
        let mut cosine_similarity = Vec::with_capacity(steps);
        for (a, b) in reference.iter().zip(&compressed) {
            let diff = a
                .iter()
                .zip(b)
                .map(|(&x, &y)| (f64::from(x) - f64::from(y)).abs())
                .fold(0.0, f64::max);
            max_abs_diff.push(diff);
            cosine_similarity.push(cosine(a, b));
        }
        Ok(DivergenceReport {
            max_abs_diff,
            cosine_similarity,
            adjacent: adjacent_similarity(dump),
        })
    }
}

/// Plain softmax attention over row slices (the prefill's causal window).
fn context_over(query: &[f32], keys: &[Vec<f32>], values: &[Vec<f32>]) -> Vec<f32> {
    let scores: Vec<f64> = keys.iter().map(|k| dot_f64(query, k)).collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = weights.iter().sum();
    let h = query.len();
    let mut ctx = vec![0.0f64; h];
    for (w, v) in weights.iter().zip(values) {
        for (acc, &vj) in ctx.iter_mut().zip(v) {
            *acc += w * f64::from(vj);
        }
    }
    ctx.into_iter().map(|c| (c / z) as f32).collect()
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let na = norm_f64(a);
    let nb = norm_f64(b);
    if na == 0.0 || nb == 0.0 {
        return if na == nb { 1.0 } else { 0.0 };
    }
    (dot_f64(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

// ── Caches under test ───────────────────────────────────────────────────────

/// Uncompressed per-layer K/V storage: the reference the engine is
/// measured against. Appends and attends exactly like a standard slot.
#[derive(Debug, Clone, PartialEq)]
pub struct FullCache {
    hidden: usize,
    layers: Vec<LayerKv>,
}

impl FullCache {
    pub fn from_dump(dump: &KvDump) -> Result<Self> {
        dump.validate()?;
        let dims = dump.dims();
        if dims.batch != 1 {
            return Err(Error::InvalidConfig(format!(
                "the full cache tracks one sequence; got batch {}",
                dims.batch
            )));
        }
        Ok(FullCache { hidden: dims.hidden, layers: dump.layers().to_vec() })
    }

    #[must_use]
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    #[must_use]
    pub fn layer(&self, l: usize) -> &LayerKv {
        &self.layers[l]
    }

    pub fn decode_step(
        &mut self,
        l: usize,
        new_key: &[f32],
        new_value: &[f32],
        query: &[f32],
    ) -> Result<Vec<f32>> {
        let len = self.layers.len();
        let layer =
            self.layers.get_mut(l).ok_or(Error::IndexOutOfRange { index: l, len })?;
        layer.key.push_row(new_key)?;
        layer.value.push_row(new_value)?;
        softmax_attention(query, &layer.key, &layer.value)
    }
}

/// Either cache variant, behind one decode interface.
#[derive(Debug, Clone, PartialEq)]
pub enum SimCache {
    Full(FullCache),
    Engine(LayeredKvCache),
}

impl SimCache {
    #[must_use]
    pub fn num_layers(&self) -> usize {
        match self {
            SimCache::Full(c) => c.num_layers(),
            SimCache::Engine(c) => c.num_layers(),
        }
    }

    pub fn decode_step(
        &mut self,
        l: usize,
        new_key: &[f32],
        new_value: &[f32],
        query: &[f32],
    ) -> Result<Vec<f32>> {
        match self {
            SimCache::Full(c) => c.decode_step(l, new_key, new_value, query),
            SimCache::Engine(c) => c.decode_step(l, new_key, new_value, query),
        }
    }
}

// ── Divergence measurement ──────────────────────────────────────────────────

/// Mean angular distance between one adjacent layer pair's caches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairSimilarity {
    /// The pair covers layers `(pair_index, pair_index + 1)`.
    pub pair_index: usize,
    pub key_mean_distance: f64,
    pub value_mean_distance: f64,
}

/// End-to-end drift between full-cache and compressed-cache decoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    /// Per step: largest absolute difference in the final hidden state.
    pub max_abs_diff: Vec<f64>,
    /// Per step: cosine similarity of the final hidden states, in `[-1, 1]`.
    pub cosine_similarity: Vec<f64>,
    /// Adjacent-layer similarity profile of the prefill dump.
    pub adjacent: Vec<PairSimilarity>,
}

/// Per-token angular distances between layers `l` and `l + 1` of a dump,
/// for one role. Degenerate rows (zero norm) measure as distance 0.
pub fn token_distances(dump: &KvDump, l: usize, role: Role) -> Result<Vec<f32>> {
    let layers = dump.dims().layers;
    if l + 1 >= layers {
        return Err(Error::IndexOutOfRange { index: l, len: layers.saturating_sub(1) });
    }
    let pick = |kv: &LayerKv| match role {
        Role::Key => kv.key.clone(),
        Role::Value => kv.value.clone(),
    };
    let prev = pick(dump.layer(l));
    let cur = pick(dump.layer(l + 1));
    Ok((0..prev.tokens()).map(|i| lenient_distance(cur.row(i), prev.row(i))).collect())
}

/// Mean angular distance between every adjacent layer pair, keys and
/// values separately. A dump with fewer than two layers yields no pairs;
/// a zero-token dump reports distance 0.
#[must_use]
pub fn adjacent_similarity(dump: &KvDump) -> Vec<PairSimilarity> {
    let layers = dump.dims().layers;
    let tokens = dump.dims().tokens;
    let mean = |l: usize, role: Role| -> f64 {
        if tokens == 0 {
            return 0.0;
        }
        let ds = token_distances(dump, l, role).expect("pair index in range");
        ds.iter().map(|&d| f64::from(d)).sum::<f64>() / tokens as f64
    };
    (0..layers.saturating_sub(1))
        .map(|l| PairSimilarity {
            pair_index: l,
            key_mean_distance: mean(l, Role::Key),
            value_mean_distance: mean(l, Role::Value),
        })
        .collect()
}
