//! The report-producing commands, as pure functions from parsed inputs to
//! CSV/JSON strings. The binary's `main` only does argument plumbing and
//! file I/O around these.
//!
//! Output stability: CSV columns are fixed-order; JSON is emitted through
//! a sorted-key value tree, so identical inputs give byte-identical
//! reports, which makes diff-based testing possible.

use std::fmt::Write as _;

use serde::Serialize;
use serde_json::Value;

use kvfold::engine::per_layer_restoration_error;
use kvfold::sim::token_distances;
use kvfold::{
    adjacent_similarity, analytic_memory, reconcile, Dims, KvDump, LayeredKvCache, MemoryInputs,
    MemoryReport, MergeStrategy, ReconcileReport, Role, SimModel,
};

use crate::run_config::RunSettings;
use crate::Result;

/// Default interpolation-position sweep for the ablation grid.
pub const DEFAULT_T_GRID: [f32; 6] = [0.0, 0.25, 0.5, 0.6, 0.75, 1.0];
/// Default retention-fraction sweep for the ablation grid.
pub const DEFAULT_GAMMA_GRID: [f32; 6] = [0.0, 0.01, 0.02, 0.05, 0.1, 1.0];

/// Serializes through a `serde_json::Value`, whose object representation
/// keeps keys sorted; the result is stable across runs and field
/// reorderings.
pub fn to_sorted_json<T: Serialize>(value: &T) -> Result<String> {
    let tree = serde_json::to_value(value)?;
    let mut text = serde_json::to_string_pretty(&tree)?;
    text.push('\n');
    Ok(text)
}

/// Nearest-rank 95th percentile: the smallest value with at least 95% of
/// the sample at or below it. An empty sample reports 0.
#[must_use]
pub fn percentile_95(values: &[f32]) -> f32 {
    if values.is_empty() {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f32::total_cmp);
    let rank = (19 * sorted.len()).div_ceil(20); // ceil(0.95 * n)
    sorted[rank - 1]
}

/// Root of the summed squares of per-layer errors: the whole-cache
/// restoration error as one number.
#[must_use]
pub fn total_frobenius(per_layer: &[f64]) -> f64 {
    per_layer.iter().map(|e| e * e).sum::<f64>().sqrt()
}

/// Maps the `--bits` knob to the memory model's uniform scalar width:
/// 0 keeps the half-precision storage convention the closed-form
/// constants assume, 4 and 8 price every scalar at the code width.
#[must_use]
pub fn bits_to_bytes_per_scalar(bits: u8) -> f64 {
    match bits {
        0 => 2.0,
        b => f64::from(b) / 8.0,
    }
}

/// Widens the single-precision `--gamma` knob for the double-precision
/// memory model through its shortest decimal form, so a typed `0.05`
/// enters the model as the f64 `0.05` rather than the f32 rounding
/// artifact `0.0500000007…` that `f64::from` would produce.
#[must_use]
pub fn widen_gamma(gamma: f32) -> f64 {
    gamma.to_string().parse().expect("shortest decimal form of a finite f32 parses as f64")
}

// ── analyze ─────────────────────────────────────────────────────────────────

/// Adjacent-layer similarity profile as CSV: for every layer pair
/// `(l, l+1)` and each role, the mean and 95th-percentile per-token
/// angular distance.
pub fn analyze_csv(dump: &KvDump) -> Result<String> {
    let mut out = String::from("pair_index,role,mean_distance,p95_distance\n");
    for sim in adjacent_similarity(dump) {
        for role in [Role::Key, Role::Value] {
            let distances = token_distances(dump, sim.pair_index, role)?;
            let mean = match role {
                Role::Key => sim.key_mean_distance,
                Role::Value => sim.value_mean_distance,
            };
            writeln!(
                out,
                "{},{},{},{}",
                sim.pair_index,
                role.as_str(),
                mean,
                percentile_95(&distances)
            )
            .expect("string writes cannot fail");
        }
    }
    Ok(out)
}

// ── compress ────────────────────────────────────────────────────────────────

/// Storage accounting and restoration quality for one compressed dump.
#[derive(Debug, Serialize)]
pub struct CompressStats {
    pub dims: Dims,
    /// Count of stored scalar values, codes and scales included.
    pub stored_element_count: usize,
    /// Stored volume with integer codes weighted by their bit width.
    pub stored_f32_equivalent: f64,
    /// Scalar count of the uncompressed dump.
    pub full_cache_element_count: usize,
    /// `full_cache_element_count / stored_f32_equivalent`; absent for an
    /// empty cache.
    pub measured_compression_ratio: Option<f64>,
    /// Closed-form model at these dimensions; absent for zero tokens.
    pub analytic: Option<MemoryReport>,
    /// Item-by-item explanation of measured-vs-model deltas; absent for
    /// zero tokens.
    pub reconcile: Option<ReconcileReport>,
    /// Frobenius error between each restored layer and the source dump.
    pub per_layer_restoration_error: Vec<f64>,
}

/// Builds the compressed cache and its stats report.
pub fn compress(dump: &KvDump, settings: &RunSettings) -> Result<(LayeredKvCache, String)> {
    let dims = dump.dims();
    let config = settings.engine_config(dims.layers);
    let cache = LayeredKvCache::prefill(dump, config)?;

    let profile = cache.storage_profile();
    let stored_element_count = profile.stored_value_count();
    let stored_f32_equivalent = profile.f32_equivalent();
    let full_cache_element_count = dims.element_count();

    let (analytic, reconciled) = if dims.tokens == 0 {
        (None, None)
    } else {
        let inputs = MemoryInputs {
            batch: dims.batch,
            layers: dims.layers,
            hidden: dims.hidden,
            input_len: dims.tokens,
            output_len: 0,
            gamma: widen_gamma(settings.gamma),
            bytes_per_scalar: bits_to_bytes_per_scalar(settings.bits),
        };
        (Some(analytic_memory(&inputs)?), Some(reconcile(&inputs, &profile)?))
    };

    let stats = CompressStats {
        dims,
        stored_element_count,
        stored_f32_equivalent,
        full_cache_element_count,
        measured_compression_ratio: (stored_f32_equivalent > 0.0)
            .then(|| full_cache_element_count as f64 / stored_f32_equivalent),
        analytic,
        reconcile: reconciled,
        per_layer_restoration_error: per_layer_restoration_error(&cache, dump)?,
    };
    Ok((cache, to_sorted_json(&stats)?))
}

// ── simulate ────────────────────────────────────────────────────────────────

/// Decodes from one seeded model four times — over the full cache and
/// over compressed caches built with each merge function — and reports
/// the per-step drift of each against the full-cache baseline. The
/// `full` entry runs the engine with merging disabled, so it doubles as
/// a self-check: its drift is zero.
pub fn simulate_json(settings: &RunSettings) -> Result<String> {
    let model = SimModel::new(settings.layers, settings.hidden, settings.seed)?;
    let prompt = model.seeded_prompt(settings.prompt_len);
    let dump = model.run_prefill(&prompt)?;

    let mut reports = serde_json::Map::new();
    let mut full_config = settings.engine_config(settings.layers);
    full_config.start_layer = settings.layers; // no layer is merged
    reports.insert(
        "full".to_string(),
        serde_json::to_value(model.divergence_report(&dump, full_config, settings.steps)?)?,
    );
    for (name, strategy) in [
        ("minicache-slerp", MergeStrategy::Slerp),
        ("minicache-mean", MergeStrategy::Mean),
        ("minicache-maxnorm", MergeStrategy::MaxNorm),
    ] {
        let mut config = settings.engine_config(settings.layers);
        config.strategy = strategy;
        reports.insert(
            name.to_string(),
            serde_json::to_value(model.divergence_report(&dump, config, settings.steps)?)?,
        );
    }
    let mut text = serde_json::to_string_pretty(&Value::Object(reports))?;
    text.push('\n');
    Ok(text)
}

// ── ablate ──────────────────────────────────────────────────────────────────

/// Parses a comma-separated grid like `0,0.25,1`.
pub fn parse_grid(s: &str) -> Result<Vec<f32>> {
    let values = s
        .split(',')
        .map(|part| {
            part.trim().parse::<f32>().map_err(|_| {
                crate::CliError::Config(format!("cannot parse `{}` as a grid value", part.trim()))
            })
        })
        .collect::<Result<Vec<f32>>>()?;
    if values.is_empty() {
        return Err(crate::CliError::Config("grid must hold at least one value".to_string()));
    }
    Ok(values)
}

/// Whole-cache restoration error for every `(t, gamma)` grid point, as
/// CSV. Rows iterate `t` in the outer loop and `gamma` ascending in the
/// inner loop, so each fixed-`t` block shows the error shrinking as
/// retention grows.
pub fn ablate_csv(
    dump: &KvDump,
    settings: &RunSettings,
    t_grid: &[f32],
    gamma_grid: &[f32],
) -> Result<String> {
    let mut out = String::from("t,gamma,restoration_error\n");
    for &t in t_grid {
        for &gamma in gamma_grid {
            let mut config = settings.engine_config(dump.dims().layers);
            config.merge_params.t = t;
            config.retention.gamma = gamma;
            let cache = LayeredKvCache::prefill(dump, config)?;
            let error = total_frobenius(&per_layer_restoration_error(&cache, dump)?);
            writeln!(out, "{t},{gamma},{error}").expect("string writes cannot fail");
        }
    }
    Ok(out)
}

// ── memory ──────────────────────────────────────────────────────────────────

/// Closed-form storage model as JSON.
pub fn memory_json(inputs: &MemoryInputs) -> Result<String> {
    to_sorted_json(&analytic_memory(inputs)?)
}
