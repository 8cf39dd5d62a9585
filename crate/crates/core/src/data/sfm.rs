//! The `.sfm` sequence file: magic "SFM1", u32 version, u64 L, u64 N,
//! u8 has_labels, u8 has_relevance, optional L label bytes, optional L
//! relevance bytes (0/1), then L·N little-endian f32 in row-major order.
//!
//! Features are stored as f32, so a round trip is bit-exact for values that
//! are already f32-representable (everything the generator emits).

use std::fs;
use std::path::Path;

use super::FeatureSequence;
use crate::codec::{byte_len, ByteReader};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const SFM_MAGIC: &[u8; 4] = b"SFM1";
pub const SFM_VERSION: u32 = 1;

pub fn encode_sequence(seq: &FeatureSequence) -> Result<Vec<u8>> {
    seq.validate()?;
    let (l, n) = (seq.len(), seq.width());
    let mut out = Vec::with_capacity(26 + 2 * l + 4 * l * n);
    out.extend_from_slice(SFM_MAGIC);
    out.extend_from_slice(&SFM_VERSION.to_le_bytes());
    out.extend_from_slice(&(l as u64).to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.push(seq.labels.is_some() as u8);
    out.push(seq.relevance.is_some() as u8);
    if let Some(labels) = &seq.labels {
        out.extend(labels.iter().map(|&y| y as u8));
    }
    if let Some(rel) = &seq.relevance {
        out.extend(rel.iter().map(|&r| r as u8));
    }
    for &v in seq.features.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_sequence(bytes: &[u8], id: &str) -> Result<FeatureSequence> {
    let mut r = ByteReader::new(bytes);
    r.magic(SFM_MAGIC)?;
    r.version(SFM_VERSION)?;
    let l = r.len_u64("L")?;
    let n = r.len_u64("N")?;
    if l == 0 || n == 0 {
        return Err(Error::Malformed(format!("empty sequence {l}×{n}")));
    }
    let flag = |r: &mut ByteReader, what: &str| -> Result<bool> {
        match r.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(Error::Malformed(format!("{what} flag is {v}, expected 0 or 1"))),
        }
    };
    let has_labels = flag(&mut r, "has_labels")?;
    let has_relevance = flag(&mut r, "has_relevance")?;

    // Validate the declared size against what is present before allocating.
    let feature_bytes = byte_len(byte_len(l, n)?, 4)?;
    let needed = [has_labels, has_relevance]
        .iter()
        .filter(|&&b| b)
        .try_fold(feature_bytes, |acc, _| acc.checked_add(l))
        .ok_or_else(|| Error::Malformed("payload size overflows".into()))?;
    if needed > r.remaining() {
        return Err(Error::Truncated {
            needed,
            available: r.remaining(),
        });
    }

    let labels = if has_labels {
        Some(r.take(l)?.iter().map(|&b| b as usize).collect())
    } else {
        None
    };
    let relevance = if has_relevance {
        let raw = r.take(l)?;
        if let Some(bad) = raw.iter().find(|&&b| b > 1) {
            return Err(Error::Malformed(format!("relevance byte {bad}, expected 0 or 1")));
        }
        Some(raw.iter().map(|&b| b == 1).collect())
    } else {
        None
    };
    let data = r
        .take(feature_bytes)?
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    r.finish()?;
    let seq = FeatureSequence {
        id: id.to_string(),
        features: Tensor::new(vec![l, n], data)?,
        labels,
        relevance,
    };
    seq.validate().map_err(|e| match e {
        Error::LabelOutOfRange { .. } => Error::Malformed(e.to_string()),
        e => e,
    })?;
    Ok(seq)
}

pub fn write_sequence(path: &Path, seq: &FeatureSequence) -> Result<()> {
    let bytes = encode_sequence(seq)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a sequence; its id is the file stem.
pub fn read_sequence(path: &Path) -> Result<FeatureSequence> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    decode_sequence(&bytes, id)
}
