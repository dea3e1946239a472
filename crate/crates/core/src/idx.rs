//! IDX (MNIST-style) reader and writer.
//!
//! Layout: big-endian `u32` magic (`0x00000803` for images, `0x00000801` for
//! labels), one big-endian `u32` per dimension, then the unsigned-byte
//! payload in row-major order.

use std::fs;
use std::path::Path;

use crate::datagen::LabeledSet;
use crate::error::{Error, Result};
use crate::numerics::DenseArray;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Number of label classes assumed for IDX label files.
pub const IDX_CLASSES: usize = 10;

fn read_u32(bytes: &[u8], offset: usize, path: &Path, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| {
            Error::format(
                path,
                format!(
                    "truncated header: {what} expected at byte offset {offset}, file has {} bytes",
                    bytes.len()
                ),
            )
        })
}

struct Images {
    count: usize,
    rows: usize,
    cols: usize,
    pixels: Vec<f64>,
}

fn parse_images(bytes: &[u8], path: &Path) -> Result<Images> {
    let magic = read_u32(bytes, 0, path, "magic")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::format(
            path,
            format!("bad magic 0x{magic:08x} at byte offset 0, expected 0x{IMAGES_MAGIC:08x}"),
        ));
    }
    let count = read_u32(bytes, 4, path, "item count")? as usize;
    let rows = read_u32(bytes, 8, path, "row count")? as usize;
    let cols = read_u32(bytes, 12, path, "column count")? as usize;
    let need = count * rows * cols;
    let payload = &bytes[16..];
    if payload.len() < need {
        return Err(Error::format(
            path,
            format!(
                "truncated payload: {need} pixel bytes expected from byte offset 16, found {} (data ends at offset {})",
                payload.len(),
                bytes.len()
            ),
        ));
    }
    let pixels = payload[..need].iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Images {
        count,
        rows,
        cols,
        pixels,
    })
}

fn parse_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let magic = read_u32(bytes, 0, path, "magic")?;
    if magic != LABELS_MAGIC {
        return Err(Error::format(
            path,
            format!("bad magic 0x{magic:08x} at byte offset 0, expected 0x{LABELS_MAGIC:08x}"),
        ));
    }
    let count = read_u32(bytes, 4, path, "item count")? as usize;
    let payload = &bytes[8..];
    if payload.len() < count {
        return Err(Error::format(
            path,
            format!(
                "truncated payload: {count} label bytes expected from byte offset 8, found {}",
                payload.len()
            ),
        ));
    }
    if let Some(i) = payload[..count].iter().position(|&b| b as usize >= IDX_CLASSES) {
        return Err(Error::format(
            path,
            format!("label {} at byte offset {} is not a digit class", payload[i], 8 + i),
        ));
    }
    Ok(payload[..count].iter().map(|&b| b as usize).collect())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads an IDX image file (and optionally its label file) with pixels
/// scaled to `[0, 1]` and each image flattened to `rows · cols` values.
pub fn load_idx(images_path: &Path, labels_path: Option<&Path>) -> Result<LabeledSet> {
    let images = parse_images(&read(images_path)?, images_path)?;
    let labels = match labels_path {
        Some(p) => {
            let labels = parse_labels(&read(p)?, p)?;
            if labels.len() != images.count {
                return Err(Error::format(
                    p,
                    format!(
                        "label count {} does not match image count {} in {}",
                        labels.len(),
                        images.count,
                        images_path.display()
                    ),
                ));
            }
            Some(labels)
        }
        None => None,
    };
    let dim = images.rows * images.cols;
    LabeledSet::new(
        DenseArray::matrix(images.count, dim, images.pixels)?,
        labels,
        IDX_CLASSES,
        None,
    )
}

/// Encodes images (values in `[0, 1]`, rounded to bytes) as an IDX image file.
pub fn encode_images(count: usize, rows: usize, cols: usize, pixels: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, count as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(pixels.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn encode_labels(labels: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend(labels.iter().map(|&l| l as u8));
    out
}
