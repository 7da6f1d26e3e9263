//! Middlebury `.flo` optical-flow files: magic float 202021.25, two
//! little-endian i32 dims (width, height), then row-major interleaved
//! (u, v) f32 pairs.

use std::fs;
use std::path::Path;

use crate::error::{FlowError, Result};
use crate::tensor::Tensor;

pub const FLO_MAGIC: f32 = 202021.25;

fn format_err(path: &Path, detail: impl Into<String>) -> FlowError {
    FlowError::Format {
        path: path.display().to_string(),
        detail: detail.into(),
    }
}

pub fn flo_write(path: &Path, flow: &Tensor<f32>) -> Result<()> {
    let s = flow.shape();
    if s.len() != 3 || s[0] != 2 {
        return Err(FlowError::Shape {
            op: "flo_write",
            detail: format!("expected [2,H,W], got {:?}", s),
        });
    }
    let (h, w) = (s[1], s[2]);
    if h > i32::MAX as usize || w > i32::MAX as usize {
        return Err(format_err(path, "dimension overflows i32"));
    }
    let data = flow.to_vec();
    let n = h * w;
    let mut bytes = Vec::with_capacity(12 + 8 * n);
    bytes.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    bytes.extend_from_slice(&(w as i32).to_le_bytes());
    bytes.extend_from_slice(&(h as i32).to_le_bytes());
    for i in 0..n {
        bytes.extend_from_slice(&data[i].to_le_bytes());
        bytes.extend_from_slice(&data[n + i].to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn flo_read(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path)?;
    if bytes.len() < 12 {
        return Err(format_err(path, format!("header truncated: {} bytes", bytes.len())));
    }
    let magic = f32::from_le_bytes(bytes[0..4].try_into().unwrap());
    if magic.to_bits() != FLO_MAGIC.to_bits() {
        return Err(format_err(path, format!("bad magic {magic} (expected {FLO_MAGIC})")));
    }
    let w = i32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let h = i32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if w <= 0 || h <= 0 {
        return Err(format_err(path, format!("invalid dims {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let n = h
        .checked_mul(w)
        .ok_or_else(|| format_err(path, "dimension overflow"))?;
    let expect = 12 + 8 * n;
    if bytes.len() != expect {
        return Err(format_err(
            path,
            format!("payload truncated: {} bytes, expected {}", bytes.len(), expect),
        ));
    }
    let mut data = vec![0f32; 2 * n];
    for i in 0..n {
        let o = 12 + 8 * i;
        data[i] = f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        data[n + i] = f32::from_le_bytes(bytes[o + 4..o + 8].try_into().unwrap());
    }
    Tensor::new(&[2, h, w], data)
}
