//! The `KVD1` binary file format for raw K/V dumps.
//!
//! Layout, all little-endian:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "KVD1"
//! 4       2     version (u16, currently 1)
//! 6       1     dtype code (u8: 0 = f32, 1 = f16)
//! 7       4     batch        (u32)
//! 11      4     layers       (u32)
//! 15      4     tokens       (u32)
//! 19      4     hidden       (u32)
//! 23      ...   payload: for each layer 0..layers, the K matrix then the
//!               V matrix, row-major, tokens x hidden scalars each
//! ```
//!
//! The payload holds exactly `2 * layers * tokens * hidden` scalars of the
//! declared dtype — batch is carried as metadata, the payload is one
//! sequence. A short payload is [`CliError::TruncatedPayload`]; extra
//! bytes are [`CliError::TrailingBytes`].
//!
//! f32 round trips are bit-exact. f16 payloads exist for fixture
//! compactness: values are narrowed with round-to-nearest-even on write
//! (rejecting values outside the f16 range) and widened back on load, so
//! everything downstream computes in f32.

use std::fs;
use std::path::Path;

use half::f16;
use kvfold::{Dims, KvDump, LayerKv, Role, TokenMatrix};

use crate::{CliError, Result};

/// Format tag at the start of every dump file.
pub const DUMP_MAGIC: [u8; 4] = *b"KVD1";
/// The one version this build reads and writes.
pub const DUMP_VERSION: u16 = 1;
/// Fixed header size in bytes; the payload starts here.
pub const DUMP_HEADER_LEN: usize = 23;

/// Scalar encoding of the payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F16,
}

impl Dtype {
    /// Wire code stored in the header.
    #[must_use]
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F16 => 1,
        }
    }

    /// Bytes per scalar on the wire.
    #[must_use]
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F16 => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F16),
            other => Err(CliError::UnsupportedDtype(other)),
        }
    }
}

fn push_matrix(out: &mut Vec<u8>, m: &TokenMatrix, dtype: Dtype) -> Result<()> {
    match dtype {
        Dtype::F32 => {
            for &v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Dtype::F16 => {
            for &v in m.data() {
                let narrowed = f16::from_f32(v);
                if !narrowed.is_finite() {
                    return Err(CliError::Config(format!(
                        "value {v} in the {} matrix overflows the f16 range; write f32 instead",
                        m.role().as_str()
                    )));
                }
                out.extend_from_slice(&narrowed.to_le_bytes());
            }
        }
    }
    Ok(())
}

/// Serializes a dump to `KVD1` bytes.
pub fn encode_dump(dump: &KvDump, dtype: Dtype) -> Result<Vec<u8>> {
    let dims = dump.dims();
    let scalars = 2 * dims.layers * dims.tokens * dims.hidden;
    let mut out = Vec::with_capacity(DUMP_HEADER_LEN + scalars * dtype.size());
    out.extend_from_slice(&DUMP_MAGIC);
    out.extend_from_slice(&DUMP_VERSION.to_le_bytes());
    out.push(dtype.code());
    for (value, name) in [
        (dims.batch, "batch"),
        (dims.layers, "layers"),
        (dims.tokens, "tokens"),
        (dims.hidden, "hidden"),
    ] {
        out.extend_from_slice(&crate::u32_field(value, name)?.to_le_bytes());
    }
    for layer in dump.layers() {
        push_matrix(&mut out, &layer.key, dtype)?;
        push_matrix(&mut out, &layer.value, dtype)?;
    }
    Ok(out)
}

fn read_scalars(bytes: &[u8], count: usize, dtype: Dtype) -> Vec<f32> {
    match dtype {
        Dtype::F32 => (0..count)
            .map(|i| f32::from_le_bytes(bytes[i * 4..i * 4 + 4].try_into().expect("4 bytes")))
            .collect(),
        Dtype::F16 => (0..count)
            .map(|i| {
                f16::from_le_bytes(bytes[i * 2..i * 2 + 2].try_into().expect("2 bytes")).to_f32()
            })
            .collect(),
    }
}

/// Parses `KVD1` bytes back into a dump, validating the header, the exact
/// payload length, and (via dump construction) finiteness of every value.
pub fn decode_dump(bytes: &[u8]) -> Result<KvDump> {
    if bytes.len() < DUMP_HEADER_LEN {
        return Err(CliError::TruncatedPayload {
            context: "header",
            expected: DUMP_HEADER_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    if bytes[0..4] != DUMP_MAGIC {
        return Err(CliError::BadMagic {
            expected: String::from_utf8_lossy(&DUMP_MAGIC).into_owned(),
            found: String::from_utf8_lossy(&bytes[0..4]).into_owned(),
        });
    }
    let version = u16::from_le_bytes(bytes[4..6].try_into().expect("2 bytes"));
    if version != DUMP_VERSION {
        return Err(CliError::UnsupportedVersion { found: version, supported: DUMP_VERSION });
    }
    let dtype = Dtype::from_code(bytes[6])?;
    let field = |at: usize| -> usize {
        u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize
    };
    let (batch, layers, tokens, hidden) = (field(7), field(11), field(15), field(19));

    // Length check before any allocation, in u128 so no dim combination
    // can overflow the arithmetic.
    let expected =
        2u128 * layers as u128 * tokens as u128 * hidden as u128 * dtype.size() as u128;
    let actual = (bytes.len() - DUMP_HEADER_LEN) as u128;
    if actual < expected {
        return Err(CliError::TruncatedPayload {
            context: "payload",
            expected: expected as u64,
            actual: actual as u64,
        });
    }
    if actual > expected {
        return Err(CliError::TrailingBytes { extra: (actual - expected) as u64 });
    }

    let dims = Dims::new(batch, layers, tokens, hidden)?;
    let matrix_scalars = tokens * hidden;
    let matrix_bytes = matrix_scalars * dtype.size();
    let mut at = DUMP_HEADER_LEN;
    let mut parsed = Vec::with_capacity(layers);
    for _ in 0..layers {
        let key = read_scalars(&bytes[at..at + matrix_bytes], matrix_scalars, dtype);
        at += matrix_bytes;
        let value = read_scalars(&bytes[at..at + matrix_bytes], matrix_scalars, dtype);
        at += matrix_bytes;
        parsed.push(LayerKv {
            key: TokenMatrix::new(key, tokens, hidden, Role::Key)?,
            value: TokenMatrix::new(value, tokens, hidden, Role::Value)?,
        });
    }
    Ok(KvDump::new(dims, parsed)?)
}

/// Writes a dump file; f32 payloads round-trip bit-exactly.
pub fn write_dump(dump: &KvDump, path: &Path, dtype: Dtype) -> Result<()> {
    let bytes = encode_dump(dump, dtype)?;
    fs::write(path, bytes).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

/// Reads and validates a dump file.
pub fn read_dump(path: &Path) -> Result<KvDump> {
    let bytes =
        fs::read(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })?;
    decode_dump(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dump(layers: usize, tokens: usize, hidden: usize, seed: u64) -> KvDump {
        KvDump::seeded_gaussian(Dims::new(1, layers, tokens, hidden).unwrap(), seed)
    }

    fn bits_of(dump: &KvDump) -> Vec<u32> {
        dump.layers()
            .iter()
            .flat_map(|l| l.key.data().iter().chain(l.value.data()).map(|v| v.to_bits()))
            .collect()
    }

    #[test]
    fn header_is_twenty_three_bytes_and_payload_follows_immediately() {
        let d = dump(2, 3, 4, 9);
        let bytes = encode_dump(&d, Dtype::F32).unwrap();
        assert_eq!(bytes.len(), DUMP_HEADER_LEN + 2 * 2 * 3 * 4 * 4);
        assert_eq!(&bytes[0..4], b"KVD1");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(bytes[6], 0);
        // First payload scalar is layer 0's key row 0 element 0.
        let first = f32::from_le_bytes(bytes[23..27].try_into().unwrap());
        assert_eq!(first.to_bits(), d.layer(0).key.data()[0].to_bits());
    }

    #[test]
    fn f32_round_trip_is_bit_exact() {
        let d = dump(3, 5, 8, 42);
        let back = decode_dump(&encode_dump(&d, Dtype::F32).unwrap()).unwrap();
        assert_eq!(back.dims(), d.dims());
        assert_eq!(bits_of(&back), bits_of(&d));
    }

    #[test]
    fn zero_token_dump_round_trips() {
        let d = dump(2, 0, 4, 1);
        let back = decode_dump(&encode_dump(&d, Dtype::F32).unwrap()).unwrap();
        assert_eq!(back.dims(), d.dims());
    }

    #[test]
    fn batch_metadata_survives_the_round_trip() {
        let d = KvDump::seeded_gaussian(Dims::new(3, 2, 2, 4).unwrap(), 5);
        let back = decode_dump(&encode_dump(&d, Dtype::F32).unwrap()).unwrap();
        assert_eq!(back.dims().batch, 3);
    }

    #[test]
    fn f16_round_trip_applies_round_to_nearest_even_once() {
        let d = dump(2, 3, 4, 77);
        let back = decode_dump(&encode_dump(&d, Dtype::F16).unwrap()).unwrap();
        for (layer, original) in back.layers().iter().zip(d.layers()) {
            for (a, b) in layer.key.data().iter().zip(original.key.data()) {
                assert_eq!(a.to_bits(), f16::from_f32(*b).to_f32().to_bits());
            }
        }
        // Encoding the widened dump again is a fixed point.
        let twice = decode_dump(&encode_dump(&back, Dtype::F16).unwrap()).unwrap();
        assert_eq!(bits_of(&twice), bits_of(&back));
    }

    #[test]
    fn f16_write_rejects_values_outside_the_f16_range() {
        let dims = Dims::new(1, 1, 1, 2).unwrap();
        let layer = LayerKv {
            key: TokenMatrix::new(vec![1.0e6, 0.0], 1, 2, Role::Key).unwrap(),
            value: TokenMatrix::new(vec![0.0, 0.0], 1, 2, Role::Value).unwrap(),
        };
        let d = KvDump::new(dims, vec![layer]).unwrap();
        let err = encode_dump(&d, Dtype::F16).unwrap_err();
        assert!(matches!(err, CliError::Config(_)), "{err}");
        assert!(encode_dump(&d, Dtype::F32).is_ok());
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let mut bytes = encode_dump(&dump(1, 1, 2, 3), Dtype::F32).unwrap();
        bytes[3] = b'0'; // "KVD1" -> "KVD0"
        let err = decode_dump(&bytes).unwrap_err();
        match err {
            CliError::BadMagic { found, .. } => assert_eq!(found, "KVD0"),
            other => panic!("expected BadMagic, got {other}"),
        }
    }

    #[test]
    fn unsupported_version_is_rejected() {
        let mut bytes = encode_dump(&dump(1, 1, 2, 3), Dtype::F32).unwrap();
        bytes[4] = 2;
        let err = decode_dump(&bytes).unwrap_err();
        assert!(matches!(err, CliError::UnsupportedVersion { found: 2, supported: 1 }), "{err}");
    }

    #[test]
    fn unsupported_dtype_code_is_rejected() {
        let mut bytes = encode_dump(&dump(1, 1, 2, 3), Dtype::F32).unwrap();
        bytes[6] = 9;
        assert!(matches!(decode_dump(&bytes).unwrap_err(), CliError::UnsupportedDtype(9)));
    }

    #[test]
    fn short_payload_reports_expected_and_actual_sizes() {
        let mut bytes = encode_dump(&dump(1, 2, 4, 42), Dtype::F32).unwrap();
        bytes.pop();
        let err = decode_dump(&bytes).unwrap_err();
        match err {
            CliError::TruncatedPayload { context, expected, actual } => {
                assert_eq!(context, "payload");
                assert_eq!(expected, 2 * 2 * 4 * 4);
                assert_eq!(actual, expected - 1);
            }
            other => panic!("expected TruncatedPayload, got {other}"),
        }
    }

    #[test]
    fn truncated_header_is_reported() {
        let bytes = encode_dump(&dump(1, 1, 1, 2), Dtype::F32).unwrap();
        let err = decode_dump(&bytes[..10]).unwrap_err();
        assert!(matches!(
            err,
            CliError::TruncatedPayload { context: "header", expected: 23, actual: 10 }
        ));
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut bytes = encode_dump(&dump(1, 1, 2, 3), Dtype::F32).unwrap();
        bytes.extend_from_slice(&[0u8; 7]);
        assert!(matches!(decode_dump(&bytes).unwrap_err(), CliError::TrailingBytes { extra: 7 }));
    }

    #[test]
    fn zero_layer_header_is_a_validation_error() {
        // A header declaring zero layers fails dump validation, not parsing.
        let d = dump(1, 1, 2, 3);
        let mut bytes = encode_dump(&d, Dtype::F32).unwrap();
        bytes[11..15].copy_from_slice(&0u32.to_le_bytes());
        bytes.truncate(DUMP_HEADER_LEN);
        let err = decode_dump(&bytes).unwrap_err();
        assert!(matches!(err, CliError::Engine(kvfold::Error::InvalidConfig(_))), "{err}");
    }

    #[test]
    fn file_round_trip_matches_in_memory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fixture.kvd");
        let d = dump(2, 6, 8, 2024);
        write_dump(&d, &path, Dtype::F32).unwrap();
        let back = read_dump(&path).unwrap();
        assert_eq!(bits_of(&back), bits_of(&d));
    }

    #[test]
    fn missing_file_reports_the_path() {
        let err = read_dump(Path::new("/nonexistent/no.kvd")).unwrap_err();
        match err {
            CliError::Io { path, .. } => assert!(path.to_string_lossy().contains("no.kvd")),
            other => panic!("expected Io, got {other}"),
        }
    }
}
