//! Binary PPM (P6) images, 8-bit, mapped to/from [0,1] float channels.

use std::fs;
use std::path::Path;

use crate::error::{FlowError, Result};
use crate::tensor::Tensor;

fn format_err(path: &Path, detail: impl Into<String>) -> FlowError {
    FlowError::Format {
        path: path.display().to_string(),
        detail: detail.into(),
    }
}

pub fn ppm_write(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(FlowError::Shape {
            op: "ppm_write",
            detail: format!("expected [3,H,W], got {:?}", s),
        });
    }
    let (h, w) = (s[1], s[2]);
    let data = image.to_vec();
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    for i in 0..h * w {
        for c in 0..3 {
            let v = (data[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8;
            bytes.push(v);
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn ppm_read(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path)?;
    // header: three whitespace-separated tokens after "P6", '#' comments allowed
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String> {
        while pos < bytes.len() {
            match bytes[pos] {
                b'#' => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(path, "header truncated"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token(&bytes)? != "P6" {
        return Err(format_err(path, "not a P6 PPM"));
    }
    let w: usize = token(&bytes)?.parse().map_err(|_| format_err(path, "bad width"))?;
    let h: usize = token(&bytes)?.parse().map_err(|_| format_err(path, "bad height"))?;
    let maxval: usize = token(&bytes)?.parse().map_err(|_| format_err(path, "bad maxval"))?;
    if maxval != 255 {
        return Err(format_err(path, format!("unsupported maxval {maxval}")));
    }
    pos += 1; // single whitespace after maxval
    if bytes.len() < pos + 3 * h * w {
        return Err(format_err(path, "pixel data truncated"));
    }
    let mut data = vec![0f32; 3 * h * w];
    for i in 0..h * w {
        for c in 0..3 {
            data[c * h * w + i] = bytes[pos + 3 * i + c] as f32 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f32> = (0..3 * 4 * 5).map(|i| (i as f32 * 0.013) % 1.0).collect();
        let img = Tensor::new(&[3, 4, 5], data.clone()).unwrap();
        let p = dir.path().join("t.ppm");
        ppm_write(&p, &img).unwrap();
        let back = ppm_read(&p).unwrap();
        assert_eq!(back.shape(), &[3, 4, 5]);
        for (a, b) in data.iter().zip(back.to_vec()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
        // second round trip is bit-exact (already quantized)
        let p2 = dir.path().join("t2.ppm");
        ppm_write(&p2, &back).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn rejects_non_p6() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ppm");
        std::fs::write(&p, b"P3\n1 1\n255\n0 0 0\n").unwrap();
        assert!(ppm_read(&p).is_err());
    }
}
