//! Checkpoints: a flat container of named f32 tensors.
//!
//! Layout: 1 version byte, u32 tensor count, then per tensor a
//! length-prefixed UTF-8 name, u32 rank, u32 dims, and little-endian f32
//! data. Architecture settings ride along as a `meta.*` pseudo-tensor so a
//! checkpoint is self-describing.

use std::fs;
use std::path::Path;

use crate::error::{FlowError, Result};
use crate::tensor::Tensor;

const VERSION: u8 = 1;

fn format_err(path: &Path, detail: impl Into<String>) -> FlowError {
    FlowError::Format {
        path: path.display().to_string(),
        detail: detail.into(),
    }
}

pub fn save_tensors(path: &Path, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
    let mut bytes = vec![VERSION];
    bytes.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        bytes.extend_from_slice(&(name.len() as u32).to_le_bytes());
        bytes.extend_from_slice(name.as_bytes());
        let shape = t.shape();
        bytes.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for d in shape {
            bytes.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in t.to_vec() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_tensors(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let bytes = fs::read(path)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(format_err(path, "checkpoint truncated"));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let u32_at = |pos: &mut usize| -> Result<u32> {
        Ok(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()))
    };
    if *take(&mut pos, 1)?.first().unwrap() != VERSION {
        return Err(format_err(path, "unsupported checkpoint version"));
    }
    let count = u32_at(&mut pos)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u32_at(&mut pos)? as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| format_err(path, "invalid tensor name"))?;
        let rank = u32_at(&mut pos)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32_at(&mut pos)? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = take(&mut pos, 4 * numel)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    if pos != bytes.len() {
        return Err(format_err(path, "trailing bytes in checkpoint"));
    }
    Ok(out)
}

/// Copy loaded values into a live parameter set, matching by name. Every
/// parameter must be present with an identical shape.
pub fn restore_into(
    loaded: &[(String, Tensor<f32>)],
    params: &[(String, Tensor<f32>)],
) -> Result<()> {
    for (name, p) in params {
        let found = loaded
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| FlowError::Config(format!("checkpoint missing tensor '{name}'")))?;
        if found.1.shape() != p.shape() {
            return Err(FlowError::Config(format!(
                "shape mismatch for '{name}': {:?} vs {:?}",
                found.1.shape(),
                p.shape()
            )));
        }
        p.set_data(&found.1.to_vec())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.bin");
        let ts = vec![
            ("a.weight".to_string(), Tensor::new(&[2, 3], vec![1.5, -2.0, 0.0, 3.25, f32::MIN_POSITIVE, 1e30]).unwrap()),
            ("meta.config".to_string(), Tensor::new(&[4], vec![2.0, 9.0, 7.0, 5.0]).unwrap()),
        ];
        save_tensors(&p, &ts).unwrap();
        let back = load_tensors(&p).unwrap();
        assert_eq!(back.len(), 2);
        for ((n0, t0), (n1, t1)) in ts.iter().zip(&back) {
            assert_eq!(n0, n1);
            assert_eq!(t0.shape(), t1.shape());
            let (a, b) = (t0.to_vec(), t1.to_vec());
            for (x, y) in a.iter().zip(&b) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn restore_rejects_missing_and_mismatched() {
        let loaded = vec![("w".to_string(), Tensor::new(&[2], vec![1.0, 2.0]).unwrap())];
        let params = vec![("w2".to_string(), Tensor::new(&[2], vec![0.0, 0.0]).unwrap())];
        assert!(restore_into(&loaded, &params).is_err());
        let params = vec![("w".to_string(), Tensor::new(&[3], vec![0.0; 3]).unwrap())];
        assert!(restore_into(&loaded, &params).is_err());
    }

    #[test]
    fn truncation_detected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.bin");
        save_tensors(&p, &[("x".into(), Tensor::new(&[4], vec![0.0; 4]).unwrap())]).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 2);
        std::fs::write(&p, &bytes).unwrap();
        assert!(load_tensors(&p).is_err());
    }
}
