//! Run settings: defaults, a flat key-value settings file, and flag
//! overrides, merged in that order (defaults < file < flags).
//!
//! The file format is one `key = value` pair per line. `#` starts a
//! comment, blank lines are ignored, keys use the same kebab-case
//! spelling as the command-line flags. Unknown and duplicate keys are
//! rejected so a typo cannot silently fall back to a default.
//!
//! ```text
//! # example settings file
//! seed = 11
//! t = 0.6
//! gamma = 0.05
//! mode = paper        # paper | distant
//! merge = slerp       # slerp | mean | maxnorm
//! start-layer = 3
//! bits = 4            # 0 | 4 | 8
//! group-size = 32
//! ```

use std::fs;
use std::path::Path;

use kvfold::merge::MergeParams;
use kvfold::retention::RetentionMode;
use kvfold::{EngineConfig, MergeStrategy, QuantConfig, RetentionConfig};

use crate::{CliError, Result};

/// Parses the `--mode` spelling: `paper` keeps the lowest-distance token
/// pairs (nearest-first selection), `distant` keeps the highest-distance
/// pairs.
pub fn parse_mode(s: &str) -> Result<RetentionMode> {
    match s {
        "paper" => Ok(RetentionMode::Nearest),
        "distant" => Ok(RetentionMode::Distant),
        other => Err(CliError::Config(format!(
            "mode must be `paper` or `distant`, got `{other}`"
        ))),
    }
}

/// Parses the `--merge` spelling.
pub fn parse_merge(s: &str) -> Result<MergeStrategy> {
    match s {
        "slerp" => Ok(MergeStrategy::Slerp),
        "mean" => Ok(MergeStrategy::Mean),
        "maxnorm" => Ok(MergeStrategy::MaxNorm),
        other => Err(CliError::Config(format!(
            "merge must be `slerp`, `mean`, or `maxnorm`, got `{other}`"
        ))),
    }
}

/// Parses the `--bits` spelling: 0 disables quantization.
pub fn parse_bits(s: &str) -> Result<u8> {
    match s {
        "0" => Ok(0),
        "4" => Ok(4),
        "8" => Ok(8),
        other => Err(CliError::Config(format!("bits must be 0, 4, or 8, got `{other}`"))),
    }
}

/// A partial settings layer: every field optional, later layers override
/// earlier ones. Both the settings file and the command-line flags parse
/// into this shape.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub t: Option<f32>,
    pub eps_parallel: Option<f32>,
    pub gamma: Option<f32>,
    pub mode: Option<RetentionMode>,
    pub inclusive_at_gamma_one: Option<bool>,
    pub merge: Option<MergeStrategy>,
    pub start_layer: Option<usize>,
    pub bits: Option<u8>,
    pub group_size: Option<usize>,
    pub layers: Option<usize>,
    pub hidden: Option<usize>,
    pub prompt_len: Option<usize>,
    pub steps: Option<usize>,
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value.parse().map_err(|_| {
        CliError::Config(format!("line {line}: cannot parse `{value}` as a value for `{key}`"))
    })
}

/// Parses the settings-file text. Unknown keys, duplicate keys, and
/// malformed values are errors naming the offending line.
pub fn parse_config_text(text: &str) -> Result<Overrides> {
    let mut out = Overrides::default();
    let mut seen: Vec<String> = Vec::new();
    for (index, raw) in text.lines().enumerate() {
        let line = index + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(CliError::Config(format!(
                "line {line}: expected `key = value`, got `{content}`"
            )));
        };
        let key = key.trim();
        let value = value.trim();
        if seen.iter().any(|k| k == key) {
            return Err(CliError::Config(format!("line {line}: duplicate key `{key}`")));
        }
        seen.push(key.to_string());
        match key {
            "seed" => out.seed = Some(parse_value(key, value, line)?),
            "t" => out.t = Some(parse_value(key, value, line)?),
            "eps-parallel" => out.eps_parallel = Some(parse_value(key, value, line)?),
            "gamma" => out.gamma = Some(parse_value(key, value, line)?),
            "mode" => out.mode = Some(parse_mode(value)?),
            "inclusive-at-gamma-one" => {
                out.inclusive_at_gamma_one = Some(parse_value(key, value, line)?);
            }
            "merge" => out.merge = Some(parse_merge(value)?),
            "start-layer" => out.start_layer = Some(parse_value(key, value, line)?),
            "bits" => out.bits = Some(parse_bits(value)?),
            "group-size" => out.group_size = Some(parse_value(key, value, line)?),
            "layers" => out.layers = Some(parse_value(key, value, line)?),
            "hidden" => out.hidden = Some(parse_value(key, value, line)?),
            "prompt-len" => out.prompt_len = Some(parse_value(key, value, line)?),
            "steps" => out.steps = Some(parse_value(key, value, line)?),
            other => {
                return Err(CliError::Config(format!("line {line}: unknown key `{other}`")));
            }
        }
    }
    Ok(out)
}

/// Loads and parses a settings file.
pub fn load_config_file(path: &Path) -> Result<Overrides> {
    let text = fs::read_to_string(path)
        .map_err(|source| CliError::Io { path: path.to_path_buf(), source })?;
    parse_config_text(&text)
}

/// Fully resolved settings for one command invocation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSettings {
    pub seed: u64,
    pub t: f32,
    pub eps_parallel: f32,
    pub gamma: f32,
    pub mode: RetentionMode,
    pub inclusive_at_gamma_one: bool,
    pub merge: MergeStrategy,
    /// First layer eligible for merging; `None` defers to the engine's
    /// midpoint default for whatever layer count the input has.
    pub start_layer: Option<usize>,
    /// 0 disables quantization.
    pub bits: u8,
    pub group_size: usize,
    /// Synthetic-decoder geometry (simulate command).
    pub layers: usize,
    pub hidden: usize,
    pub prompt_len: usize,
    pub steps: usize,
}

impl Default for RunSettings {
    fn default() -> Self {
        RunSettings {
            seed: 7,
            t: MergeParams::default().t,
            eps_parallel: MergeParams::default().eps_parallel,
            gamma: RetentionConfig::default().gamma,
            mode: RetentionConfig::default().mode,
            inclusive_at_gamma_one: RetentionConfig::default().inclusive_at_gamma_one,
            merge: MergeStrategy::Slerp,
            start_layer: None,
            bits: 0,
            group_size: 32,
            layers: 6,
            hidden: 48,
            prompt_len: 12,
            steps: 8,
        }
    }
}

impl RunSettings {
    /// Applies one override layer on top of these settings.
    pub fn apply(&mut self, o: &Overrides) {
        macro_rules! take {
            ($field:ident) => {
                if let Some(v) = o.$field {
                    self.$field = v;
                }
            };
        }
        take!(seed);
        take!(t);
        take!(eps_parallel);
        take!(gamma);
        take!(mode);
        take!(inclusive_at_gamma_one);
        take!(merge);
        take!(bits);
        take!(group_size);
        take!(layers);
        take!(hidden);
        take!(prompt_len);
        take!(steps);
        if o.start_layer.is_some() {
            self.start_layer = o.start_layer;
        }
    }

    /// Defaults, then the settings file, then the flags.
    #[must_use]
    pub fn resolve(file: Option<&Overrides>, flags: &Overrides) -> RunSettings {
        let mut settings = RunSettings::default();
        if let Some(f) = file {
            settings.apply(f);
        }
        settings.apply(flags);
        settings
    }

    /// The quantizer these settings ask for, if any.
    #[must_use]
    pub fn quant(&self) -> Option<QuantConfig> {
        if self.bits == 0 {
            None
        } else {
            Some(QuantConfig { bits: self.bits, group_size: self.group_size })
        }
    }

    /// Builds the engine configuration for an input with `num_layers`
    /// layers. Validation happens when the engine consumes it.
    #[must_use]
    pub fn engine_config(&self, num_layers: usize) -> EngineConfig {
        let mut config = EngineConfig::new(num_layers);
        if let Some(start) = self.start_layer {
            config.start_layer = start;
        }
        config.merge_params = MergeParams { t: self.t, eps_parallel: self.eps_parallel };
        config.retention = RetentionConfig {
            gamma: self.gamma,
            mode: self.mode,
            inclusive_at_gamma_one: self.inclusive_at_gamma_one,
        };
        config.strategy = self.merge;
        config.quant = self.quant();
        config
    }
}
