//! Binary dataset files written by `gen-data`.
//!
//! ```text
//! offset  size     field
//! 0       4        magic "WDDS"
//! 4       4        format version, u32 LE (currently 1)
//! 8       8        n, instance count, u64 LE
//! 16      8        d, values per instance, u64 LE
//! 24      4        K, class count, u32 LE
//! 28      4        flags, u32 LE: bit 0 = labels present, bit 1 = provenance present
//! 32      8·n·d    instance values, f64 LE, row-major
//! ...     n        labels, one u8 each (only if bit 0)
//! ...     n        provenance codes, one u8 each (only if bit 1):
//!                  0 in-distribution, 1 style-shifted, 2 open-set
//! ```
//! No trailing bytes are allowed.

use std::fs;
use std::path::Path;

use crate::datagen::{LabeledSet, Provenance};
use crate::error::{Error, Result};
use crate::numerics::DenseArray;

pub const MAGIC: &[u8; 4] = b"WDDS";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 32;
const FLAG_LABELS: u32 = 1;
const FLAG_PROVENANCE: u32 = 2;

pub fn encode(set: &LabeledSet) -> Result<Vec<u8>> {
    if set.num_classes() > 256 {
        return Err(Error::InvalidArgument(format!(
            "class count {} does not fit the byte label layout",
            set.num_classes()
        )));
    }
    let (n, d) = (set.len(), set.dim());
    let mut flags = 0;
    if set.labels().is_some() {
        flags |= FLAG_LABELS;
    }
    if set.provenance().is_some() {
        flags |= FLAG_PROVENANCE;
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * n * d + 2 * n);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(d as u64).to_le_bytes());
    out.extend_from_slice(&(set.num_classes() as u32).to_le_bytes());
    out.extend_from_slice(&flags.to_le_bytes());
    for v in set.instances().values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(labels) = set.labels() {
        out.extend(labels.iter().map(|&l| l as u8));
    }
    if let Some(tags) = set.provenance() {
        out.extend(tags.iter().map(|t| t.code()));
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<LabeledSet> {
    let err = |m: String| Error::format(path, m);
    if bytes.len() < HEADER_LEN {
        return Err(err(format!(
            "truncated header: {} bytes, need {HEADER_LEN}",
            bytes.len()
        )));
    }
    if &bytes[0..4] != MAGIC {
        return Err(err(format!("bad magic {:?} at byte offset 0", &bytes[0..4])));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let version = u32_at(4);
    if version != VERSION {
        return Err(err(format!(
            "unsupported format version {version} at byte offset 4, expected {VERSION}"
        )));
    }
    let n = u64_at(8) as usize;
    let d = u64_at(16) as usize;
    let k = u32_at(24) as usize;
    let flags = u32_at(28);
    if flags & !(FLAG_LABELS | FLAG_PROVENANCE) != 0 {
        return Err(err(format!("unknown flag bits 0x{flags:x} at byte offset 28")));
    }
    let values_end = HEADER_LEN + 8 * n * d;
    let mut end = values_end;
    if flags & FLAG_LABELS != 0 {
        end += n;
    }
    if flags & FLAG_PROVENANCE != 0 {
        end += n;
    }
    if bytes.len() != end {
        return Err(err(format!(
            "payload size mismatch: header implies {end} bytes, file has {}",
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes[HEADER_LEN..values_end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(err(format!(
            "non-finite value at byte offset {}",
            HEADER_LEN + 8 * i
        )));
    }
    let mut cursor = values_end;
    let labels = if flags & FLAG_LABELS != 0 {
        let raw = &bytes[cursor..cursor + n];
        if let Some(i) = raw.iter().position(|&l| l as usize >= k) {
            return Err(err(format!(
                "label {} at byte offset {} outside 0..{k}",
                raw[i],
                cursor + i
            )));
        }
        cursor += n;
        Some(raw.iter().map(|&l| l as usize).collect())
    } else {
        None
    };
    let provenance = if flags & FLAG_PROVENANCE != 0 {
        let raw = &bytes[cursor..cursor + n];
        let tags = raw
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                Provenance::from_code(c).ok_or_else(|| {
                    err(format!("unknown provenance code {c} at byte offset {}", cursor + i))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Some(tags)
    } else {
        None
    };
    LabeledSet::new(DenseArray::matrix(n, d, values)?, labels, k, provenance)
}

pub fn write(set: &LabeledSet, path: &Path) -> Result<()> {
    fs::write(path, encode(set)?).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<LabeledSet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
