//! The `KVA1` binary file format for compressed caches.
//!
//! Layout, all little-endian:
//!
//! ```text
//! header (38 bytes):
//!   magic "KVA1" (4) | version u16 | hidden u32 | num_layers u32 |
//!   start_layer u32 | strategy u8 (0 slerp, 1 mean, 2 maxnorm) |
//!   t f32 | eps_parallel f32 | gamma f32 | mode u8 (0 nearest, 1 distant) |
//!   inclusive_at_gamma_one u8 | quant bits u8 (0 = off) | group_size u32
//! slot table (5 bytes per layer):
//!   tag u8 (0 standard, 1 shared, 2 merged, 3 empty) | aux u32
//!   aux is the token count for standard/merged slots, the partner layer
//!   for shared slots, and 0 for empty slots
//! payload blocks, one per slot in layer order:
//!   standard: K matrix then V matrix, row-major f32
//!   shared:   nothing
//!   merged:   direction block for keys then values (tag u8: 0 plain ->
//!             n*h f32; 1 quantized -> n*h i8 codes + n*groups f32 scales),
//!             four magnitude vectors (key lower/upper, value lower/upper,
//!             n f32 each), two angle vectors (n f32 each), two retention
//!             blocks (count u32 | indices u32 each | kept upper rows |
//!             kept lower rows, count*h f32 each), two distance ranges
//!             (2 f32 each), pending flag u8 (1 -> key then value, h f32)
//!   empty:    nothing
//! ```
//!
//! A standard slot's payload is exactly the bytes the `KVD1` dump format
//! uses for that layer, so an archive built with merging disabled carries
//! a payload byte-identical to its source dump's payload.
//!
//! Reading reassembles the cache through its validating constructor, so a
//! tampered file fails with a structural error instead of producing an
//! inconsistent cache.

use std::fs;
use std::path::Path;

use kvfold::engine::{DirectionStore, PendingToken};
use kvfold::merge::MergeParams;
use kvfold::retention::{RetentionMode, RetentionSet};
use kvfold::{
    EngineConfig, LayerSlot, LayeredKvCache, MergeStrategy, MergedPairCache, QuantConfig,
    QuantizedMatrix, RetentionConfig, Role, TokenMatrix,
};

use crate::{u32_field, CliError, Result};

/// Format tag at the start of every archive file.
pub const ARCHIVE_MAGIC: [u8; 4] = *b"KVA1";
/// The one version this build reads and writes.
pub const ARCHIVE_VERSION: u16 = 1;
/// Fixed header size in bytes; the slot table starts here.
pub const ARCHIVE_HEADER_LEN: usize = 38;

/// Offset of the first payload byte: header plus one 5-byte slot-table
/// entry per layer.
#[must_use]
pub fn payload_offset(num_layers: usize) -> usize {
    ARCHIVE_HEADER_LEN + 5 * num_layers
}

fn strategy_code(strategy: MergeStrategy) -> u8 {
    match strategy {
        MergeStrategy::Slerp => 0,
        MergeStrategy::Mean => 1,
        MergeStrategy::MaxNorm => 2,
    }
}

fn strategy_from_code(code: u8) -> Result<MergeStrategy> {
    match code {
        0 => Ok(MergeStrategy::Slerp),
        1 => Ok(MergeStrategy::Mean),
        2 => Ok(MergeStrategy::MaxNorm),
        other => Err(CliError::Config(format!("unknown merge strategy code {other}"))),
    }
}

fn mode_code(mode: RetentionMode) -> u8 {
    match mode {
        RetentionMode::Nearest => 0,
        RetentionMode::Distant => 1,
    }
}

fn mode_from_code(code: u8) -> Result<RetentionMode> {
    match code {
        0 => Ok(RetentionMode::Nearest),
        1 => Ok(RetentionMode::Distant),
        other => Err(CliError::Config(format!("unknown retention mode code {other}"))),
    }
}

// ── Writing ─────────────────────────────────────────────────────────────────

fn push_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for &v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn push_direction(out: &mut Vec<u8>, dir: &DirectionStore) {
    match dir {
        DirectionStore::Plain(m) => {
            out.push(0);
            push_f32s(out, m.data());
        }
        DirectionStore::Quantized(q) => {
            out.push(1);
            out.extend_from_slice(&q.codes().iter().map(|&c| c as u8).collect::<Vec<u8>>());
            push_f32s(out, q.scales());
        }
    }
}

fn push_retention(out: &mut Vec<u8>, set: &RetentionSet) -> Result<()> {
    out.extend_from_slice(&u32_field(set.len(), "retention count")?.to_le_bytes());
    for &index in set.indices() {
        out.extend_from_slice(&u32_field(index, "retention index")?.to_le_bytes());
    }
    push_f32s(out, set.kept_cur().data());
    push_f32s(out, set.kept_prev().data());
    Ok(())
}

fn push_merged(out: &mut Vec<u8>, pair: &MergedPairCache, hidden: usize) -> Result<()> {
    push_direction(out, &pair.dir_key);
    push_direction(out, &pair.dir_value);
    push_f32s(out, &pair.mag_key_lower);
    push_f32s(out, &pair.mag_key_upper);
    push_f32s(out, &pair.mag_value_lower);
    push_f32s(out, &pair.mag_value_upper);
    push_f32s(out, &pair.omega_key);
    push_f32s(out, &pair.omega_value);
    push_retention(out, &pair.retention_key)?;
    push_retention(out, &pair.retention_value)?;
    push_f32s(out, &[pair.key_distance_range.0, pair.key_distance_range.1]);
    push_f32s(out, &[pair.value_distance_range.0, pair.value_distance_range.1]);
    match &pair.pending {
        None => out.push(0),
        Some(p) => {
            out.push(1);
            debug_assert_eq!(p.key.len(), hidden);
            push_f32s(out, &p.key);
            push_f32s(out, &p.value);
        }
    }
    Ok(())
}

/// Serializes a cache to `KVA1` bytes.
pub fn encode_archive(cache: &LayeredKvCache) -> Result<Vec<u8>> {
    let config = cache.config();
    let mut out = Vec::new();
    out.extend_from_slice(&ARCHIVE_MAGIC);
    out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
    out.extend_from_slice(&u32_field(cache.hidden(), "hidden")?.to_le_bytes());
    out.extend_from_slice(&u32_field(config.num_layers, "num_layers")?.to_le_bytes());
    out.extend_from_slice(&u32_field(config.start_layer, "start_layer")?.to_le_bytes());
    out.push(strategy_code(config.strategy));
    out.extend_from_slice(&config.merge_params.t.to_le_bytes());
    out.extend_from_slice(&config.merge_params.eps_parallel.to_le_bytes());
    out.extend_from_slice(&config.retention.gamma.to_le_bytes());
    out.push(mode_code(config.retention.mode));
    out.push(u8::from(config.retention.inclusive_at_gamma_one));
    let (bits, group_size) = match config.quant {
        Some(q) => (q.bits, q.group_size),
        None => (0, 0),
    };
    out.push(bits);
    out.extend_from_slice(&u32_field(group_size, "group_size")?.to_le_bytes());
    debug_assert_eq!(out.len(), ARCHIVE_HEADER_LEN);

    // Slot table.
    for slot in cache.slots() {
        let (tag, aux) = match slot {
            LayerSlot::Standard { key, .. } => (0u8, key.tokens()),
            LayerSlot::SharedRef { partner } => (1, *partner),
            LayerSlot::Merged(pair) => (2, pair.tokens()),
            LayerSlot::Empty => (3, 0),
        };
        out.push(tag);
        out.extend_from_slice(&u32_field(aux, "slot table entry")?.to_le_bytes());
    }

    // Payload blocks.
    for slot in cache.slots() {
        match slot {
            LayerSlot::Standard { key, value } => {
                push_f32s(&mut out, key.data());
                push_f32s(&mut out, value.data());
            }
            LayerSlot::SharedRef { .. } | LayerSlot::Empty => {}
            LayerSlot::Merged(pair) => push_merged(&mut out, pair, cache.hidden())?,
        }
    }
    Ok(out)
}

// ── Reading ─────────────────────────────────────────────────────────────────

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).ok_or(CliError::TruncatedPayload {
            context: "archive",
            expected: u64::MAX,
            actual: self.bytes.len() as u64,
        })?;
        if end > self.bytes.len() {
            return Err(CliError::TruncatedPayload {
                context: "archive",
                expected: end as u64,
                actual: self.bytes.len() as u64,
            });
        }
        let slice = &self.bytes[self.at..end];
        self.at = end;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32_vec(&mut self, count: usize) -> Result<Vec<f32>> {
        let len = count.checked_mul(4).ok_or(CliError::TruncatedPayload {
            context: "archive",
            expected: u64::MAX,
            actual: self.bytes.len() as u64,
        })?;
        let bytes = self.take(len)?;
        Ok((0..count)
            .map(|i| f32::from_le_bytes(bytes[i * 4..i * 4 + 4].try_into().expect("4 bytes")))
            .collect())
    }

    fn i8_vec(&mut self, count: usize) -> Result<Vec<i8>> {
        Ok(self.take(count)?.iter().map(|&b| b as i8).collect())
    }
}

fn read_direction(
    r: &mut Reader,
    tokens: usize,
    hidden: usize,
    quant: Option<QuantConfig>,
    role: Role,
) -> Result<DirectionStore> {
    match r.u8()? {
        0 => {
            let data = r.f32_vec(tokens * hidden)?;
            Ok(DirectionStore::Plain(TokenMatrix::new(data, tokens, hidden, role)?))
        }
        1 => {
            let cfg = quant.ok_or_else(|| {
                CliError::Config(
                    "archive stores quantized directions but its header declares no quantizer"
                        .to_string(),
                )
            })?;
            let codes = r.i8_vec(tokens * hidden)?;
            let scales = r.f32_vec(tokens * cfg.groups_per_row(hidden))?;
            Ok(DirectionStore::Quantized(QuantizedMatrix::from_parts(
                codes, scales, tokens, hidden, cfg, role,
            )?))
        }
        other => Err(CliError::Config(format!("unknown direction storage tag {other}"))),
    }
}

fn read_retention(r: &mut Reader, hidden: usize, role: Role) -> Result<RetentionSet> {
    let count = r.u32()?;
    let indices = (0..count).map(|_| r.u32()).collect::<Result<Vec<usize>>>()?;
    let kept_cur = TokenMatrix::new(r.f32_vec(count * hidden)?, count, hidden, role)?;
    let kept_prev = TokenMatrix::new(r.f32_vec(count * hidden)?, count, hidden, role)?;
    Ok(RetentionSet::from_parts(indices, kept_cur, kept_prev)?)
}

fn read_merged(
    r: &mut Reader,
    layer: usize,
    tokens: usize,
    hidden: usize,
    quant: Option<QuantConfig>,
) -> Result<MergedPairCache> {
    let dir_key = read_direction(r, tokens, hidden, quant, Role::Key)?;
    let dir_value = read_direction(r, tokens, hidden, quant, Role::Value)?;
    let mag_key_lower = r.f32_vec(tokens)?;
    let mag_key_upper = r.f32_vec(tokens)?;
    let mag_value_lower = r.f32_vec(tokens)?;
    let mag_value_upper = r.f32_vec(tokens)?;
    let omega_key = r.f32_vec(tokens)?;
    let omega_value = r.f32_vec(tokens)?;
    let retention_key = read_retention(r, hidden, Role::Key)?;
    let retention_value = read_retention(r, hidden, Role::Value)?;
    let key_distance_range = (r.f32()?, r.f32()?);
    let value_distance_range = (r.f32()?, r.f32()?);
    let pending = match r.u8()? {
        0 => None,
        1 => Some(PendingToken { key: r.f32_vec(hidden)?, value: r.f32_vec(hidden)? }),
        other => return Err(CliError::Config(format!("unknown pending-token flag {other}"))),
    };
    Ok(MergedPairCache {
        lower_layer: layer - 1,
        upper_layer: layer,
        dir_key,
        dir_value,
        mag_key_lower,
        mag_key_upper,
        mag_value_lower,
        mag_value_upper,
        omega_key,
        omega_value,
        retention_key,
        retention_value,
        key_distance_range,
        value_distance_range,
        pending,
    })
}

/// Parses `KVA1` bytes back into a cache, revalidating every structural
/// invariant through the cache's own constructor.
pub fn decode_archive(bytes: &[u8]) -> Result<LayeredKvCache> {
    if bytes.len() >= 4 && bytes[0..4] != ARCHIVE_MAGIC {
        return Err(CliError::BadMagic {
            expected: String::from_utf8_lossy(&ARCHIVE_MAGIC).into_owned(),
            found: String::from_utf8_lossy(&bytes[0..4]).into_owned(),
        });
    }
    let mut r = Reader { bytes, at: 0 };
    r.take(4)?; // magic, checked above; too-short files land here
    let version = r.u16()?;
    if version != ARCHIVE_VERSION {
        return Err(CliError::UnsupportedVersion { found: version, supported: ARCHIVE_VERSION });
    }
    let hidden = r.u32()?;
    let num_layers = r.u32()?;
    let start_layer = r.u32()?;
    let strategy = strategy_from_code(r.u8()?)?;
    let t = r.f32()?;
    let eps_parallel = r.f32()?;
    let gamma = r.f32()?;
    let mode = mode_from_code(r.u8()?)?;
    let inclusive_at_gamma_one = r.u8()? != 0;
    let bits = r.u8()?;
    let group_size = r.u32()?;
    let quant = if bits == 0 { None } else { Some(QuantConfig { bits, group_size }) };

    let table = (0..num_layers)
        .map(|_| Ok((r.u8()?, r.u32()?)))
        .collect::<Result<Vec<(u8, usize)>>>()?;

    let mut slots = Vec::with_capacity(num_layers);
    for (layer, &(tag, aux)) in table.iter().enumerate() {
        let slot = match tag {
            0 => {
                let key = TokenMatrix::new(r.f32_vec(aux * hidden)?, aux, hidden, Role::Key)?;
                let value = TokenMatrix::new(r.f32_vec(aux * hidden)?, aux, hidden, Role::Value)?;
                LayerSlot::Standard { key, value }
            }
            1 => LayerSlot::SharedRef { partner: aux },
            2 => {
                if layer == 0 {
                    return Err(CliError::Config(
                        "merged slot at layer 0 has no lower partner".to_string(),
                    ));
                }
                LayerSlot::Merged(read_merged(&mut r, layer, aux, hidden, quant)?)
            }
            3 => LayerSlot::Empty,
            other => {
                return Err(CliError::Config(format!(
                    "unknown slot tag {other} for layer {layer}"
                )))
            }
        };
        slots.push(slot);
    }
    if r.at != bytes.len() {
        return Err(CliError::TrailingBytes { extra: (bytes.len() - r.at) as u64 });
    }

    let config = EngineConfig {
        num_layers,
        start_layer,
        merge_params: MergeParams { t, eps_parallel },
        retention: RetentionConfig { gamma, mode, inclusive_at_gamma_one },
        strategy,
        quant,
    };
    Ok(LayeredKvCache::from_slots(config, hidden, slots)?)
}

/// Writes a cache archive.
pub fn write_archive(cache: &LayeredKvCache, path: &Path) -> Result<()> {
    let bytes = encode_archive(cache)?;
    fs::write(path, bytes).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

/// Reads and validates a cache archive.
pub fn read_archive(path: &Path) -> Result<LayeredKvCache> {
    let bytes =
        fs::read(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })?;
    decode_archive(&bytes)
}
