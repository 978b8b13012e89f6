//! File formats shared by checkpoints, Jacobians and result tables.
//!
//! Binary float blocks are laid out as:
//!
//! ```text
//! offset  size      field
//! 0       4         magic (b"IFLB" for checkpoints, b"JACB" for ε-Jacobians)
//! 4       4         format version, u32 little-endian (currently 1)
//! 8       8         count of floats, u64 little-endian
//! 16      8·count   f64 values, little-endian IEEE-754
//! …       rest      UTF-8 JSON metadata object
//! ```
//!
//! CSV tables use `,` delimiters, `\n` line endings, a header row and
//! 17-significant-digit floats. All writes go through a temporary file and a
//! rename so readers never observe partial output.

use crate::error::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::fs;
use std::path::Path;

pub const FORMAT_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"IFLB";
pub const JACOBIAN_MAGIC: [u8; 4] = *b"JACB";

/// 17 significant digits in scientific notation; parses back bit-exactly.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Writes `bytes` to `path` via a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::BadInput(format!("{} has no file name", path.display())))?
        .to_string_lossy();
    let tmp = path.with_file_name(format!(".{file_name}.tmp"));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_csv<I, R, S>(path: &Path, header: &[S], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
    S: AsRef<str>,
{
    let mut writer = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    writer.write_record(header.iter().map(AsRef::as_ref))?;
    for row in rows {
        writer.write_record(row)?;
    }
    let bytes = writer.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(path, &bytes)
}

pub fn encode_float_block<M: Serialize>(magic: [u8; 4], values: &[f64], metadata: &M) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(metadata)?;
    let mut out = Vec::with_capacity(16 + 8 * values.len() + meta.len());
    out.extend_from_slice(&magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&meta);
    Ok(out)
}

pub fn decode_float_block<M: DeserializeOwned>(magic: [u8; 4], bytes: &[u8]) -> Result<(Vec<f64>, M)> {
    if bytes.len() < 16 {
        return Err(Error::Format("float block shorter than its 16-byte header".into()));
    }
    if bytes[..4] != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&bytes[..4]),
            String::from_utf8_lossy(&magic)
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = count
        .checked_mul(8)
        .and_then(|n| n.checked_add(16))
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::Format(format!("float block declares {count} values but is truncated")))?;
    let values = bytes[16..end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let meta = serde_json::from_slice(&bytes[end..])?;
    Ok((values, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn float_format_round_trips_extremes() {
        for v in [0.0, -0.0, 1.0 / 3.0, f64::MIN_POSITIVE, f64::MAX, -1e-300, 5e-324] {
            let s = fmt_f64(v);
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), v.to_bits(), "{s}");
        }
    }

    #[test]
    fn block_rejects_wrong_magic_and_truncation() {
        let bytes = encode_float_block(CHECKPOINT_MAGIC, &[1.0, 2.0], &serde_json::json!({})).unwrap();
        assert!(decode_float_block::<serde_json::Value>(JACOBIAN_MAGIC, &bytes).is_err());
        assert!(decode_float_block::<serde_json::Value>(CHECKPOINT_MAGIC, &bytes[..20]).is_err());
    }

    #[test]
    fn block_layout_is_documented_one() {
        let bytes = encode_float_block(CHECKPOINT_MAGIC, &[1.5], &serde_json::json!({"a": 1})).unwrap();
        assert_eq!(&bytes[..4], b"IFLB");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..16], &1u64.to_le_bytes());
        assert_eq!(&bytes[16..24], &1.5f64.to_le_bytes());
        assert_eq!(&bytes[24..], br#"{"a":1}"#);
    }

    proptest! {
        #[test]
        fn float_text_and_blocks_round_trip(values in proptest::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 0..40)) {
            for &v in &values {
                prop_assert_eq!(fmt_f64(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
            }
            let bytes = encode_float_block(JACOBIAN_MAGIC, &values, &serde_json::json!({"n": values.len()})).unwrap();
            let (back, _meta): (Vec<f64>, serde_json::Value) = decode_float_block(JACOBIAN_MAGIC, &bytes).unwrap();
            prop_assert_eq!(back.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), values.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }
}
