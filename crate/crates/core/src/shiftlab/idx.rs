//! IDX files (MNIST layout): big-endian header, `u8` payload.

use std::path::Path;

use crate::error::{Error, Result};
use crate::shiftlab::dataset::Dataset;
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn format_err<T>(file: &str, offset: usize, msg: impl Into<String>) -> Result<T> {
    Err(Error::Format {
        file: file.to_string(),
        offset,
        msg: msg.into(),
    })
}

fn be_u32(bytes: &[u8], offset: usize, file: &str) -> Result<u32> {
    match bytes.get(offset..offset + 4) {
        Some(b) => Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]])),
        None => format_err(file, offset, "header truncated"),
    }
}

/// Returns `(count, rows, cols, payload)`.
pub fn parse_images(bytes: &[u8], file: &str) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0, file)?;
    if magic != IMAGES_MAGIC {
        return format_err(file, 0, format!("bad magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}"));
    }
    let n = be_u32(bytes, 4, file)? as usize;
    let rows = be_u32(bytes, 8, file)? as usize;
    let cols = be_u32(bytes, 12, file)? as usize;
    let expected = n * rows * cols;
    let payload = &bytes[16..];
    if payload.len() != expected {
        return format_err(
            file,
            16 + payload.len().min(expected),
            format!(
                "header promises {n}x{rows}x{cols} = {expected} pixel bytes, payload has {}",
                payload.len()
            ),
        );
    }
    Ok((n, rows, cols, payload.to_vec()))
}

pub fn parse_labels(bytes: &[u8], file: &str) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, file)?;
    if magic != LABELS_MAGIC {
        return format_err(file, 0, format!("bad magic {magic:#010x}, expected {LABELS_MAGIC:#010x}"));
    }
    let n = be_u32(bytes, 4, file)? as usize;
    let payload = &bytes[8..];
    if payload.len() != n {
        return format_err(
            file,
            8 + payload.len().min(n),
            format!("header promises {n} labels, payload has {}", payload.len()),
        );
    }
    Ok(payload.to_vec())
}

/// Loads an image/label IDX pair; pixels are scaled by 1/255.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let ifile = ip.display().to_string();
    let lfile = lp.display().to_string();
    let (n, rows, cols, pixels) = parse_images(&std::fs::read(ip)?, &ifile)?;
    let labels = parse_labels(&std::fs::read(lp)?, &lfile)?;
    if labels.len() != n {
        return format_err(
            &lfile,
            4,
            format!("{} labels but {} has {} images", labels.len(), ifile, n),
        );
    }
    let images = Tensor::new(
        [n, 1, rows, cols],
        pixels.iter().map(|&b| b as f64 / 255.0).collect(),
    )?;
    let name = ip
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into());
    Dataset::new(images, labels.iter().map(|&l| l as usize).collect(), name)
}

pub fn encode_images(n: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        buf.extend_from_slice(&v.to_be_bytes());
    }
    buf.extend_from_slice(pixels);
    buf
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(8 + labels.len());
    buf.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    buf.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    buf.extend_from_slice(labels);
    buf
}

/// Writes a single-channel dataset as an IDX pair, quantizing to `u8`.
pub fn write_idx(ds: &Dataset, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
    if ds.images.c() != 1 {
        return Err(Error::Dimension(format!(
            "IDX images are single-channel, dataset has {} channels",
            ds.images.c()
        )));
    }
    let pixels: Vec<u8> = ds
        .images
        .data()
        .iter()
        .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let labels: Vec<u8> = ds.labels.iter().map(|&l| l as u8).collect();
    std::fs::write(
        images_path,
        encode_images(ds.len(), ds.images.h(), ds.images.w(), &pixels),
    )?;
    std::fs::write(labels_path, encode_labels(&labels))?;
    Ok(())
}
