//! `kvfold` — command-line surface for the cross-layer KV-cache
//! compression engine.
//!
//! Exit codes: 0 on success, 2 for validation/configuration/I/O problems,
//! 3 for numeric kernel failures (zero-norm or antipodal inputs).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use kvfold::retention::RetentionMode;
use kvfold::{Dims, KvDump, MemoryInputs, MergeStrategy, SimModel};

use kvfold_cli::archive::write_archive;
use kvfold_cli::commands::{
    ablate_csv, analyze_csv, bits_to_bytes_per_scalar, compress, memory_json, parse_grid,
    simulate_json, widen_gamma, DEFAULT_GAMMA_GRID, DEFAULT_T_GRID,
};
use kvfold_cli::dump_io::{read_dump, write_dump, Dtype};
use kvfold_cli::run_config::{
    load_config_file, parse_bits, parse_merge, parse_mode, Overrides, RunSettings,
};
use kvfold_cli::{CliError, Result};

#[derive(Parser)]
#[command(
    name = "kvfold",
    version,
    about = "Cross-layer KV-cache compression: shared directions, per-layer magnitudes",
    after_help = "Settings precedence: built-in defaults, then --config file, then flags."
)]
struct Cli {
    /// Flat `key = value` settings file; flags override its entries.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Seed for every pseudo-random draw (model weights, prompts, dumps).
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,

    /// Interpolation position in [0, 1]; larger values draw the shared
    /// direction toward the later layer.
    #[arg(long, global = true, value_name = "F32")]
    t: Option<f32>,

    /// Fraction of the token-pair distance range kept unmerged, in [0, 1].
    #[arg(long, global = true, value_name = "F32")]
    gamma: Option<f32>,

    /// Which end of the distance range to retain.
    #[arg(long, global = true, value_name = "paper|distant", value_parser = parse_mode)]
    mode: Option<RetentionMode>,

    /// Merge function for paired layers.
    #[arg(long, global = true, value_name = "slerp|mean|maxnorm", value_parser = parse_merge)]
    merge: Option<MergeStrategy>,

    /// First layer eligible for merging; defaults to half the layer count.
    #[arg(long, global = true, value_name = "INT")]
    start_layer: Option<usize>,

    /// Quantization width for stored directions; 0 disables.
    #[arg(long, global = true, value_name = "0|4|8", value_parser = parse_bits)]
    bits: Option<u8>,

    /// Hidden channels per quantizer scale group.
    #[arg(long, global = true, value_name = "INT")]
    group_size: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-layer-pair angular distance profile of a dump, as CSV.
    Analyze {
        /// Input dump (KVD1).
        dump: PathBuf,
        /// Write the CSV here instead of stdout.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Compress a dump into an archive and report storage statistics.
    Compress {
        /// Input dump (KVD1).
        dump: PathBuf,
        /// Write the compressed cache here (KVA1).
        #[arg(long, value_name = "PATH")]
        archive_out: Option<PathBuf>,
        /// Write the JSON stats here instead of stdout.
        #[arg(long, value_name = "PATH")]
        stats_out: Option<PathBuf>,
    },
    /// Decode with full and compressed caches from one seeded model and
    /// report their divergence, as JSON.
    Simulate {
        /// Layer count of the synthetic model.
        #[arg(long, value_name = "INT")]
        layers: Option<usize>,
        /// Hidden width of the synthetic model.
        #[arg(long, value_name = "INT")]
        hidden: Option<usize>,
        /// Prompt length fed to the prefill pass.
        #[arg(long, value_name = "INT")]
        prompt_len: Option<usize>,
        /// Decode steps to unroll.
        #[arg(long, value_name = "INT")]
        steps: Option<usize>,
        /// Write the JSON here instead of stdout.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Sweep the interpolation position and retention fraction on one
    /// dump; restoration error per grid point, as CSV.
    Ablate {
        /// Input dump (KVD1).
        dump: PathBuf,
        /// Comma-separated t values (default 0,0.25,0.5,0.6,0.75,1).
        #[arg(long, value_name = "LIST")]
        t_grid: Option<String>,
        /// Comma-separated gamma values (default 0,0.01,0.02,0.05,0.1,1).
        #[arg(long, value_name = "LIST")]
        gamma_grid: Option<String>,
        /// Write the CSV here instead of stdout.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Closed-form storage model for given dimensions, as JSON.
    Memory {
        #[arg(long, value_name = "INT", default_value_t = 1)]
        batch: usize,
        #[arg(long, value_name = "INT", default_value_t = 32)]
        layers: usize,
        #[arg(long, value_name = "INT", default_value_t = 4096)]
        hidden: usize,
        /// Prompt length s.
        #[arg(long, value_name = "INT", default_value_t = 128)]
        input_len: usize,
        /// Generated length n.
        #[arg(long, value_name = "INT", default_value_t = 128)]
        output_len: usize,
        /// Write the JSON here instead of stdout.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Produce a seeded dump file, for feeding the other commands.
    Generate {
        /// Output dump path (KVD1).
        out: PathBuf,
        /// Layer count.
        #[arg(long, value_name = "INT", default_value_t = 6)]
        layers: usize,
        /// Hidden width.
        #[arg(long, value_name = "INT", default_value_t = 48)]
        hidden: usize,
        /// Token count.
        #[arg(long, value_name = "INT", default_value_t = 12)]
        tokens: usize,
        /// `sim` runs the synthetic decoder's prefill; `gaussian` draws
        /// independent unit normals.
        #[arg(long, value_name = "sim|gaussian", default_value = "sim")]
        source: String,
        /// Payload scalar encoding.
        #[arg(long, value_name = "f32|f16", default_value = "f32")]
        dtype: String,
    },
}

/// Writes to the path when given, stdout otherwise.
fn emit(target: Option<&Path>, content: &str) -> Result<()> {
    match target {
        Some(path) => fs::write(path, content)
            .map_err(|source| CliError::Io { path: path.to_path_buf(), source }),
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let file = cli.config.as_deref().map(load_config_file).transpose()?;
    let flags = Overrides {
        seed: cli.seed,
        t: cli.t,
        gamma: cli.gamma,
        mode: cli.mode,
        merge: cli.merge,
        start_layer: cli.start_layer,
        bits: cli.bits,
        group_size: cli.group_size,
        ..Overrides::default()
    };

    match cli.command {
        Command::Analyze { dump, out } => {
            let d = read_dump(&dump)?;
            emit(out.as_deref(), &analyze_csv(&d)?)
        }
        Command::Compress { dump, archive_out, stats_out } => {
            let settings = RunSettings::resolve(file.as_ref(), &flags);
            let d = read_dump(&dump)?;
            let (cache, stats) = compress(&d, &settings)?;
            if let Some(path) = archive_out {
                write_archive(&cache, &path)?;
            }
            emit(stats_out.as_deref(), &stats)
        }
        Command::Simulate { layers, hidden, prompt_len, steps, out } => {
            let mut flags = flags;
            flags.layers = layers;
            flags.hidden = hidden;
            flags.prompt_len = prompt_len;
            flags.steps = steps;
            let settings = RunSettings::resolve(file.as_ref(), &flags);
            emit(out.as_deref(), &simulate_json(&settings)?)
        }
        Command::Ablate { dump, t_grid, gamma_grid, out } => {
            let settings = RunSettings::resolve(file.as_ref(), &flags);
            let d = read_dump(&dump)?;
            let ts = match t_grid {
                Some(raw) => parse_grid(&raw)?,
                None => DEFAULT_T_GRID.to_vec(),
            };
            let gammas = match gamma_grid {
                Some(raw) => parse_grid(&raw)?,
                None => DEFAULT_GAMMA_GRID.to_vec(),
            };
            emit(out.as_deref(), &ablate_csv(&d, &settings, &ts, &gammas)?)
        }
        Command::Memory { batch, layers, hidden, input_len, output_len, out } => {
            let settings = RunSettings::resolve(file.as_ref(), &flags);
            let inputs = MemoryInputs {
                batch,
                layers,
                hidden,
                input_len,
                output_len,
                gamma: widen_gamma(settings.gamma),
                bytes_per_scalar: bits_to_bytes_per_scalar(settings.bits),
            };
            emit(out.as_deref(), &memory_json(&inputs)?)
        }
        Command::Generate { out, layers, hidden, tokens, source, dtype } => {
            let settings = RunSettings::resolve(file.as_ref(), &flags);
            let dump = match source.as_str() {
                "gaussian" => {
                    KvDump::seeded_gaussian(Dims::new(1, layers, tokens, hidden)?, settings.seed)
                }
                "sim" => {
                    let model = SimModel::new(layers, hidden, settings.seed)?;
                    model.run_prefill(&model.seeded_prompt(tokens))?
                }
                other => {
                    return Err(CliError::Config(format!(
                        "source must be `sim` or `gaussian`, got `{other}`"
                    )))
                }
            };
            let dtype = match dtype.as_str() {
                "f32" => Dtype::F32,
                "f16" => Dtype::F16,
                other => {
                    return Err(CliError::Config(format!(
                        "dtype must be `f32` or `f16`, got `{other}`"
                    )))
                }
            };
            write_dump(&dump, &out, dtype)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(error) => {
            eprintln!("error: {error}");
            ExitCode::from(error.exit_code())
        }
    }
}
