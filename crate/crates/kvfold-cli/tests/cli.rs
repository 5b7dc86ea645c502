//! End-to-end tests of the `kvfold` binary: every subcommand through the
//! real executable, plus exit-code and settings-precedence behavior.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

use kvfold::sim::token_distances;
use kvfold::{adjacent_similarity, analytic_memory, Dims, KvDump, LayerKv, MemoryInputs, Role};
use kvfold_cli::commands::percentile_95;
use kvfold_cli::dump_io::{read_dump, write_dump, Dtype, DUMP_HEADER_LEN};

fn kvfold(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kvfold")).args(args).output().expect("binary runs")
}

fn stdout_of(output: &Output) -> String {
    assert!(
        output.status.success(),
        "expected success, got {:?}\nstderr: {}",
        output.status.code(),
        String::from_utf8_lossy(&output.stderr)
    );
    String::from_utf8(output.stdout.clone()).expect("utf-8 stdout")
}

fn exit_code(output: &Output) -> i32 {
    output.status.code().expect("process exited")
}

fn write_fixture(dir: &Path, name: &str, dump: &KvDump) -> PathBuf {
    let path = dir.join(name);
    write_dump(dump, &path, Dtype::F32).unwrap();
    path
}

fn gaussian(layers: usize, tokens: usize, hidden: usize, seed: u64) -> KvDump {
    KvDump::seeded_gaussian(Dims::new(1, layers, tokens, hidden).unwrap(), seed)
}

/// Layer `2k+1` duplicates layer `2k`, so pairing from layer 0 is lossless.
fn duplicated_pairs(layers: usize, tokens: usize, hidden: usize, seed: u64) -> KvDump {
    let base = gaussian(layers, tokens, hidden, seed);
    let copies: Vec<LayerKv> = (0..layers).map(|l| base.layer(l - l % 2).clone()).collect();
    KvDump::new(base.dims(), copies).unwrap()
}

// ── generate ────────────────────────────────────────────────────────────────

#[test]
fn generate_writes_a_readable_dump_with_the_requested_shape() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("made.kvd");
    let out = kvfold(&[
        "generate",
        path.to_str().unwrap(),
        "--layers",
        "4",
        "--hidden",
        "16",
        "--tokens",
        "6",
        "--seed",
        "3",
    ]);
    stdout_of(&out);
    let dump = read_dump(&path).unwrap();
    assert_eq!(dump.dims(), Dims::new(1, 4, 6, 16).unwrap());

    // Same seed, same bytes; different seed, different bytes.
    let again = dir.path().join("again.kvd");
    kvfold(&["generate", again.to_str().unwrap(), "--layers", "4", "--hidden", "16", "--tokens", "6", "--seed", "3"]);
    assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
    let other = dir.path().join("other.kvd");
    kvfold(&["generate", other.to_str().unwrap(), "--layers", "4", "--hidden", "16", "--tokens", "6", "--seed", "4"]);
    assert_ne!(fs::read(&path).unwrap(), fs::read(&other).unwrap());
}

#[test]
fn generate_supports_gaussian_source_and_f16_dtype() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.kvd");
    let out = kvfold(&[
        "generate",
        path.to_str().unwrap(),
        "--source",
        "gaussian",
        "--dtype",
        "f16",
        "--layers",
        "2",
        "--hidden",
        "8",
        "--tokens",
        "4",
    ]);
    stdout_of(&out);
    let dump = read_dump(&path).unwrap();
    assert_eq!(dump.dims().layers, 2);
    // A narrowed payload is smaller than the f32 one.
    assert_eq!(fs::metadata(&path).unwrap().len() as usize, DUMP_HEADER_LEN + 2 * 2 * 4 * 8 * 2);
}

// ── analyze ─────────────────────────────────────────────────────────────────

#[test]
fn analyze_matches_the_in_process_computation_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let dump = gaussian(4, 7, 8, 11);
    let path = write_fixture(dir.path(), "a.kvd", &dump);
    let csv = stdout_of(&kvfold(&["analyze", path.to_str().unwrap()]));

    let sims = adjacent_similarity(&dump);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "pair_index,role,mean_distance,p95_distance");
    assert_eq!(lines.len(), 1 + sims.len() * 2);
    for (row, line) in lines[1..].iter().enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        let pair: usize = fields[0].parse().unwrap();
        assert_eq!(pair, row / 2);
        let role = if row % 2 == 0 { Role::Key } else { Role::Value };
        assert_eq!(fields[1], role.as_str());
        let mean: f64 = fields[2].parse().unwrap();
        let want = match role {
            Role::Key => sims[pair].key_mean_distance,
            Role::Value => sims[pair].value_mean_distance,
        };
        assert_eq!(mean.to_bits(), want.to_bits());
        let p95: f32 = fields[3].parse().unwrap();
        let oracle = percentile_95(&token_distances(&dump, pair, role).unwrap());
        assert_eq!(p95.to_bits(), oracle.to_bits());
    }
}

#[test]
fn analyze_writes_to_a_file_when_asked() {
    let dir = tempfile::tempdir().unwrap();
    let dump_path = write_fixture(dir.path(), "a.kvd", &gaussian(2, 3, 8, 5));
    let csv_path = dir.path().join("report.csv");
    let out = kvfold(&[
        "analyze",
        dump_path.to_str().unwrap(),
        "--out",
        csv_path.to_str().unwrap(),
    ]);
    assert!(stdout_of(&out).is_empty());
    let text = fs::read_to_string(&csv_path).unwrap();
    assert!(text.starts_with("pair_index,role,"));
}

// ── compress ────────────────────────────────────────────────────────────────

#[test]
fn compress_with_full_retention_reports_zero_restoration_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_fixture(dir.path(), "c.kvd", &gaussian(6, 8, 8, 21));
    let stats = stdout_of(&kvfold(&["compress", path.to_str().unwrap(), "--gamma", "1"]));
    let v: Value = serde_json::from_str(&stats).unwrap();
    for err in v["per_layer_restoration_error"].as_array().unwrap() {
        assert!(err.as_f64().unwrap() <= 1e-5);
    }
}

#[test]
fn compress_with_merging_disabled_stores_the_dump_payload_verbatim() {
    let dir = tempfile::tempdir().unwrap();
    let dump = gaussian(4, 6, 8, 33);
    let dump_path = write_fixture(dir.path(), "d.kvd", &dump);
    let archive_path = dir.path().join("d.kva");
    let out = kvfold(&[
        "compress",
        dump_path.to_str().unwrap(),
        "--start-layer",
        "4",
        "--archive-out",
        archive_path.to_str().unwrap(),
        "--stats-out",
        dir.path().join("stats.json").to_str().unwrap(),
    ]);
    stdout_of(&out);

    let dump_bytes = fs::read(&dump_path).unwrap();
    let archive_bytes = fs::read(&archive_path).unwrap();
    let offset = kvfold_cli::archive::payload_offset(4);
    assert_eq!(archive_bytes[offset..], dump_bytes[DUMP_HEADER_LEN..]);

    // The archive reloads into a cache holding exactly the dump's data.
    let cache = kvfold_cli::archive::read_archive(&archive_path).unwrap();
    assert_eq!(cache.stored_element_count(), dump.dims().element_count());
}

#[test]
fn compress_stored_count_matches_the_tally_oracle_on_lossless_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_fixture(dir.path(), "p.kvd", &duplicated_pairs(2, 4, 8, 13));
    let stats = stdout_of(&kvfold(&[
        "compress",
        path.to_str().unwrap(),
        "--start-layer",
        "0",
        "--gamma",
        "0",
    ]));
    let v: Value = serde_json::from_str(&stats).unwrap();
    // 2 direction matrices + 4 magnitude vectors + 2 angle vectors.
    assert_eq!(v["stored_element_count"].as_u64().unwrap(), 2 * 4 * 8 + 4 * 4 + 2 * 4);
    for err in v["per_layer_restoration_error"].as_array().unwrap() {
        assert!(err.as_f64().unwrap() <= 1e-5);
    }
    assert_eq!(v["reconcile"]["unexplained"].as_f64().unwrap(), 0.0);
}

// ── simulate ────────────────────────────────────────────────────────────────

#[test]
fn simulate_emits_four_reports_and_the_full_baseline_never_drifts() {
    let args = [
        "simulate", "--layers", "4", "--hidden", "24", "--prompt-len", "6", "--steps", "4",
        "--seed", "9",
    ];
    let text = stdout_of(&kvfold(&args));
    let v: Value = serde_json::from_str(&text).unwrap();
    let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
    assert_eq!(keys, ["full", "minicache-maxnorm", "minicache-mean", "minicache-slerp"]);
    for name in ["full", "minicache-slerp", "minicache-mean", "minicache-maxnorm"] {
        let report = &v[name];
        assert_eq!(report["max_abs_diff"].as_array().unwrap().len(), 4);
        assert_eq!(report["cosine_similarity"].as_array().unwrap().len(), 4);
        assert_eq!(report["adjacent"].as_array().unwrap().len(), 3);
        for c in report["cosine_similarity"].as_array().unwrap() {
            let c = c.as_f64().unwrap();
            assert!((-1.0..=1.0).contains(&c));
        }
    }
    for step in v["full"]["max_abs_diff"].as_array().unwrap() {
        assert_eq!(step.as_f64().unwrap(), 0.0);
    }
    // Determinism: identical invocation, identical bytes.
    assert_eq!(stdout_of(&kvfold(&args)), text);
}

// ── ablate ──────────────────────────────────────────────────────────────────

#[test]
fn ablate_sweeps_the_grid_with_exact_full_retention_rows() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_fixture(dir.path(), "s.kvd", &gaussian(4, 10, 8, 55));
    let csv = stdout_of(&kvfold(&[
        "ablate",
        path.to_str().unwrap(),
        "--t-grid",
        "0,0.6,1",
        "--gamma-grid",
        "0,0.5,1",
    ]));
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 9);
    for block in rows.chunks(3) {
        let errs: Vec<f64> =
            block.iter().map(|r| r.split(',').nth(2).unwrap().parse().unwrap()).collect();
        assert!(errs[0] >= errs[1] && errs[1] >= errs[2], "gamma column not monotone: {errs:?}");
        assert!(errs[2] <= 1e-5, "gamma = 1 row must restore exactly");
    }
}

#[test]
fn ablate_uses_the_default_grids_when_none_are_given() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_fixture(dir.path(), "s.kvd", &gaussian(2, 4, 8, 5));
    let csv = stdout_of(&kvfold(&["ablate", path.to_str().unwrap()]));
    assert_eq!(csv.lines().count(), 1 + 6 * 6);
}

// ── memory ──────────────────────────────────────────────────────────────────

#[test]
fn memory_defaults_reproduce_the_reference_instance() {
    let text = stdout_of(&kvfold(&["memory"]));
    let v: Value = serde_json::from_str(&text).unwrap();
    let want = analytic_memory(&MemoryInputs {
        batch: 1,
        layers: 32,
        hidden: 4096,
        input_len: 128,
        output_len: 128,
        gamma: 0.05,
        bytes_per_scalar: 2.0,
    })
    .unwrap();
    assert_eq!(v["full_cache"].as_f64().unwrap(), want.full_cache);
    assert_eq!(v["full_cache"].as_f64().unwrap(), 134_217_728.0);
    assert_eq!(v["total"].as_f64().unwrap(), want.total);
    assert_eq!(v["compression_ratio"].as_f64().unwrap(), want.compression_ratio);
    assert!((v["compression_ratio"].as_f64().unwrap() - 1.290_119_4).abs() < 1e-6);
}

#[test]
fn memory_respects_dimension_and_gamma_flags() {
    let text = stdout_of(&kvfold(&[
        "memory", "--batch", "2", "--layers", "8", "--hidden", "64", "--input-len", "16",
        "--output-len", "0", "--gamma", "0",
    ]));
    let v: Value = serde_json::from_str(&text).unwrap();
    let want = analytic_memory(&MemoryInputs {
        batch: 2,
        layers: 8,
        hidden: 64,
        input_len: 16,
        output_len: 0,
        gamma: 0.0,
        bytes_per_scalar: 2.0,
    })
    .unwrap();
    assert_eq!(v["total"].as_f64().unwrap(), want.total);
}

// ── settings precedence ─────────────────────────────────────────────────────

#[test]
fn config_file_applies_and_flags_override_it() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("run.conf");
    fs::write(&config_path, "gamma = 0\n").unwrap();

    let from_file = stdout_of(&kvfold(&["memory", "--config", config_path.to_str().unwrap()]));
    let v: Value = serde_json::from_str(&from_file).unwrap();
    let gamma_zero = analytic_memory(&MemoryInputs {
        batch: 1,
        layers: 32,
        hidden: 4096,
        input_len: 128,
        output_len: 128,
        gamma: 0.0,
        bytes_per_scalar: 2.0,
    })
    .unwrap();
    assert_eq!(v["total"].as_f64().unwrap(), gamma_zero.total);

    let overridden = stdout_of(&kvfold(&[
        "memory",
        "--config",
        config_path.to_str().unwrap(),
        "--gamma",
        "0.05",
    ]));
    let v: Value = serde_json::from_str(&overridden).unwrap();
    assert_ne!(v["total"].as_f64().unwrap(), gamma_zero.total);
}

#[test]
fn unknown_config_keys_are_rejected_with_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("bad.conf");
    fs::write(&config_path, "gamma = 0.1\nspeed = 9\n").unwrap();
    let out = kvfold(&["memory", "--config", config_path.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 2);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("line 2") && stderr.contains("speed"), "{stderr}");
}

// ── exit codes ──────────────────────────────────────────────────────────────

#[test]
fn missing_input_file_exits_two() {
    let out = kvfold(&["analyze", "/nonexistent/missing.kvd"]);
    assert_eq!(exit_code(&out), 2);
}

#[test]
fn corrupt_magic_exits_two_and_names_the_problem() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_fixture(dir.path(), "m.kvd", &gaussian(2, 2, 4, 1));
    let mut bytes = fs::read(&path).unwrap();
    bytes[3] = b'9';
    fs::write(&path, bytes).unwrap();
    let out = kvfold(&["analyze", path.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad magic"));
}

#[test]
fn truncated_payload_exits_two_with_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_fixture(dir.path(), "t.kvd", &gaussian(2, 2, 4, 1));
    let mut bytes = fs::read(&path).unwrap();
    bytes.pop();
    fs::write(&path, bytes).unwrap();
    let out = kvfold(&["analyze", path.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("truncated"));
}

#[test]
fn out_of_range_settings_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_fixture(dir.path(), "r.kvd", &gaussian(2, 2, 4, 1));
    for args in [
        vec!["compress", path.to_str().unwrap(), "--t", "1.5"],
        vec!["compress", path.to_str().unwrap(), "--gamma=-0.1"],
        vec!["compress", path.to_str().unwrap(), "--start-layer", "9"],
        vec!["memory", "--gamma", "2"],
    ] {
        let out = kvfold(&args);
        assert_eq!(exit_code(&out), 2, "args {args:?}");
    }
}

#[test]
fn bad_flag_values_exit_two() {
    for args in [
        vec!["memory", "--bits", "5"],
        vec!["compress", "x.kvd", "--merge", "average"],
        vec!["compress", "x.kvd", "--mode", "nearest"],
        vec!["no-such-command"],
    ] {
        let out = kvfold(&args);
        assert_eq!(exit_code(&out), 2, "args {args:?}");
    }
}

#[test]
fn bits_flag_changes_stored_direction_encoding() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_fixture(dir.path(), "q.kvd", &gaussian(4, 6, 8, 70));
    let plain = stdout_of(&kvfold(&["compress", path.to_str().unwrap(), "--start-layer", "0"]));
    let quant = stdout_of(&kvfold(&[
        "compress", path.to_str().unwrap(), "--start-layer", "0", "--bits", "4",
        "--group-size", "8",
    ]));
    let p: Value = serde_json::from_str(&plain).unwrap();
    let q: Value = serde_json::from_str(&quant).unwrap();
    // Same stored value count, smaller f32-equivalent volume.
    assert_eq!(
        p["stored_element_count"].as_u64().unwrap() + 2 * 2 * 6, // plus per-row scales
        q["stored_element_count"].as_u64().unwrap()
    );
    assert!(
        q["stored_f32_equivalent"].as_f64().unwrap()
            < p["stored_f32_equivalent"].as_f64().unwrap()
    );
}
