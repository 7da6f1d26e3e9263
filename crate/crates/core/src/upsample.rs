//! Baseline convex upsampler: a two-layer conv head predicts f^2*m^2 mask
//! logits per low-resolution pixel; softmax over the window axis turns them
//! into convex masks, and aggregation writes each sub-pixel as a dot product
//! with its m x m flow neighborhood.

use rand::Rng;

use crate::error::{FlowError, Result};
use crate::init;
use crate::tensor::{Elem, PaddingPolicy, Tape, Tensor};

/// Stack of softmax-normalized convex masks, one m x m window per head (or
/// sub-pixel) and position: weights shape [heads, m, m, h, w]. When the stack
/// drives an upsampling aggregation, `heads` must equal f^2 and `factor()`
/// reports f.
pub struct LocalAttentionMaps<E> {
    pub weights: Tensor<E>,
    pub heads: usize,
    pub m: usize,
    pub padding_policy: PaddingPolicy,
}

impl<E: Elem> LocalAttentionMaps<E> {
    pub fn new(weights: Tensor<E>, padding_policy: PaddingPolicy) -> Result<Self> {
        let s = weights.shape();
        if s.len() != 5 || s[1] != s[2] {
            return Err(FlowError::Config(format!(
                "mask stack must be [heads,m,m,h,w], got {:?}",
                s
            )));
        }
        Ok(LocalAttentionMaps {
            heads: s[0],
            m: s[1],
            weights,
            padding_policy,
        })
    }

    /// Upsampling factor when the head count is a square sub-pixel count.
    pub fn factor(&self) -> Option<usize> {
        let f = (self.heads as f64).sqrt() as usize;
        (f * f == self.heads).then_some(f)
    }

    pub fn spatial(&self) -> (usize, usize) {
        let s = self.weights.shape();
        (s[3], s[4])
    }
}

/// RAFT-style mask head: Conv3x3 (hidden 256) -> ReLU -> Conv1x1 to f^2*m^2
/// logit channels.
pub struct MaskPredictor<E> {
    pub w_hidden: Tensor<E>,
    pub b_hidden: Tensor<E>,
    pub w_mask: Tensor<E>,
    pub b_mask: Tensor<E>,
    pub f: usize,
    pub m: usize,
    in_channels: usize,
}

pub const MASK_HIDDEN: usize = 256;

impl<E: Elem> MaskPredictor<E> {
    pub fn new(in_channels: usize, f: usize, m: usize, rng: &mut impl Rng) -> Result<Self> {
        if m % 2 == 0 {
            return Err(FlowError::Config(format!("mask size must be odd, got {}", m)));
        }
        let out = f * f * m * m;
        Ok(MaskPredictor {
            w_hidden: init::conv_weight(MASK_HIDDEN, in_channels, 3, rng),
            b_hidden: init::conv_bias(MASK_HIDDEN, in_channels, 3, rng),
            w_mask: init::conv_weight(out, MASK_HIDDEN, 1, rng),
            b_mask: init::conv_bias(out, MASK_HIDDEN, 1, rng),
            f,
            m,
            in_channels,
        })
    }

    /// Zero logits everywhere; predicts uniform masks. Used by tests.
    pub fn zero_init(in_channels: usize, f: usize, m: usize) -> Result<Self> {
        if m % 2 == 0 {
            return Err(FlowError::Config(format!("mask size must be odd, got {}", m)));
        }
        let out = f * f * m * m;
        Ok(MaskPredictor {
            w_hidden: init::zeros_param(&[MASK_HIDDEN, in_channels, 3, 3]),
            b_hidden: init::zeros_param(&[MASK_HIDDEN]),
            w_mask: init::zeros_param(&[out, MASK_HIDDEN, 1, 1]),
            b_mask: init::zeros_param(&[out]),
            f,
            m,
            in_channels,
        })
    }

    /// Predict the convex mask stack for a [C,h,w] feature map.
    /// Softmax is applied over the m*m window axis after reshaping.
    pub fn predict_masks(
        &self,
        tape: &Tape<E>,
        h_j: &Tensor<E>,
        policy: PaddingPolicy,
    ) -> Result<LocalAttentionMaps<E>> {
        let s = h_j.shape();
        if s.len() != 3 || s[0] != self.in_channels {
            return Err(FlowError::Shape {
                op: "predict_masks",
                detail: format!("expected [{},h,w], got {:?}", self.in_channels, s),
            });
        }
        let (h, w) = (s[1], s[2]);
        let hidden = tape.conv2d(h_j, &self.w_hidden, Some(&self.b_hidden), 1, 1)?;
        let act = tape.relu(&hidden);
        let logits = tape.conv2d(&act, &self.w_mask, Some(&self.b_mask), 1, 0)?;
        let (f2, m2) = (self.f * self.f, self.m * self.m);
        let flat = tape.reshape(&logits, &[f2, m2, h, w])?;
        let soft = tape.softmax(&flat, 1)?;
        let weights = tape.reshape(&soft, &[f2, self.m, self.m, h, w])?;
        LocalAttentionMaps::new(weights, policy)
    }

    /// Upsample a [C,h,w] field to [C,f*h,f*w] with predicted masks.
    pub fn upsample(
        &self,
        tape: &Tape<E>,
        h_j: &Tensor<E>,
        field: &Tensor<E>,
        policy: PaddingPolicy,
    ) -> Result<Tensor<E>> {
        let masks = self.predict_masks(tape, h_j, policy)?;
        tape.convex_aggregate(&masks.weights, field, policy)
    }

    pub fn parameters(&self, prefix: &str) -> Vec<(String, Tensor<E>)> {
        vec![
            (format!("{prefix}.hidden.weight"), self.w_hidden.clone()),
            (format!("{prefix}.hidden.bias"), self.b_hidden.clone()),
            (format!("{prefix}.mask.weight"), self.w_mask.clone()),
            (format!("{prefix}.mask.bias"), self.b_mask.clone()),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::smooth_random;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
        let n: usize = shape.iter().product();
        let data = smooth_random(n, seed).iter().map(|v| *v as f32).collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn zero_logits_give_uniform_masks() {
        let tape = Tape::<f32>::no_grad();
        let mp = MaskPredictor::zero_init(8, 2, 3).unwrap();
        let h = rand_tensor(&[8, 4, 4], 1);
        let maps = mp.predict_masks(&tape, &h, PaddingPolicy::Clamp).unwrap();
        for v in maps.weights.to_vec() {
            assert!((v - 1.0 / 9.0).abs() < 1e-6);
        }
    }

    #[test]
    fn raft_head_channel_count() {
        // f=8, m=3 -> 576 logit channels reshaped to (64,3,3,h,w)
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tape = Tape::<f32>::no_grad();
        let mp = MaskPredictor::new(128, 8, 3, &mut rng).unwrap();
        assert_eq!(mp.w_mask.shape(), &[576, 256, 1, 1]);
        let h = rand_tensor(&[128, 3, 4], 2);
        let maps = mp.predict_masks(&tape, &h, PaddingPolicy::Clamp).unwrap();
        assert_eq!(maps.weights.shape(), &[64, 3, 3, 3, 4]);
    }

    #[test]
    fn predicted_masks_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let tape = Tape::<f32>::no_grad();
        let mp = MaskPredictor::new(16, 2, 3, &mut rng).unwrap();
        let h = rand_tensor(&[16, 5, 6], 3);
        let maps = mp.predict_masks(&tape, &h, PaddingPolicy::Clamp).unwrap();
        let v = maps.weights.to_vec();
        let sp = 5 * 6;
        for i in 0..4 {
            for j in 0..sp {
                let mut s = 0.0f32;
                for t in 0..9 {
                    let w = v[(i * 9 + t) * sp + j];
                    assert!(w >= 0.0);
                    s += w;
                }
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn even_mask_size_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(MaskPredictor::<f32>::new(8, 2, 4, &mut rng).is_err());
    }

    #[test]
    fn constant_field_reproduced_under_clamp() {
        let tape = Tape::<f32>::no_grad();
        let mp = MaskPredictor::zero_init(8, 2, 3).unwrap();
        let h = rand_tensor(&[8, 4, 4], 4);
        let maps = mp.predict_masks(&tape, &h, PaddingPolicy::Clamp).unwrap();
        let mut field_data = vec![3.5f32; 16];
        field_data.extend(vec![-2.0f32; 16]);
        let field = Tensor::new(&[2, 4, 4], field_data).unwrap();
        let out = tape
            .convex_aggregate(&maps.weights, &field, PaddingPolicy::Clamp)
            .unwrap();
        assert_eq!(out.shape(), &[2, 8, 8]);
        let v = out.to_vec();
        for j in 0..64 {
            assert!((v[j] - 3.5).abs() < 1e-5);
            assert!((v[64 + j] + 2.0).abs() < 1e-5);
        }
    }

    #[test]
    fn one_hot_center_masks_are_nearest_neighbor() {
        let tape = Tape::<f32>::no_grad();
        let (f, m, h, w) = (2usize, 3usize, 3usize, 4usize);
        let sp = h * w;
        let mut wdata = vec![0.0f32; f * f * m * m * sp];
        for i in 0..f * f {
            for j in 0..sp {
                // center tap (1,1)
                wdata[((i * m + 1) * m + 1) * sp + j] = 1.0;
            }
        }
        let masks = Tensor::new(&[4, 3, 3, h, w], wdata).unwrap();
        let field = rand_tensor(&[2, h, w], 5);
        let out = tape
            .convex_aggregate(&masks, &field, PaddingPolicy::Clamp)
            .unwrap();
        let fv = field.to_vec();
        let ov = out.to_vec();
        for c in 0..2 {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    let expect = fv[c * sp + (y / 2) * w + x / 2];
                    assert_eq!(ov[c * 2 * h * 2 * w + y * 2 * w + x], expect);
                }
            }
        }
    }

    #[test]
    fn clamp_padding_on_tiny_field_hand_checked() {
        // uniform 3x3 masks over a 2x2 field; taps are coordinate-clamped so
        // e.g. position (0,0) sees value a four times, b and c twice, d once
        let tape = Tape::<f32>::no_grad();
        let (a, b, c, d) = (1.0f32, 5.0f32, -3.0f32, 10.0f32);
        let field = Tensor::new(&[1, 2, 2], vec![a, b, c, d]).unwrap();
        let masks = Tensor::new(&[1, 3, 3, 2, 2], vec![1.0 / 9.0; 9 * 4]).unwrap();
        let out = tape
            .convex_aggregate(&masks, &field, PaddingPolicy::Clamp)
            .unwrap();
        let v = out.to_vec();
        let expect = [
            (4.0 * a + 2.0 * b + 2.0 * c + d) / 9.0,
            (4.0 * b + 2.0 * a + 2.0 * d + c) / 9.0,
            (4.0 * c + 2.0 * a + 2.0 * d + b) / 9.0,
            (4.0 * d + 2.0 * b + 2.0 * c + a) / 9.0,
        ];
        for (got, want) in v.iter().zip(&expect) {
            assert!((got - want).abs() < 1e-6, "{} vs {}", got, want);
        }
    }

    #[test]
    fn convexity_bound_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let tape = Tape::<f32>::no_grad();
        let mp = MaskPredictor::new(16, 2, 3, &mut rng).unwrap();
        let h = rand_tensor(&[16, 6, 6], 6);
        let field = rand_tensor(&[2, 6, 6], 7);
        let maps = mp.predict_masks(&tape, &h, PaddingPolicy::Clamp).unwrap();
        let out = tape
            .convex_aggregate(&maps.weights, &field, PaddingPolicy::Clamp)
            .unwrap();
        let fv = field.to_vec();
        let ov = out.to_vec();
        let (hh, ww) = (6usize, 6usize);
        for c in 0..2 {
            for y in 0..2 * hh {
                for x in 0..2 * ww {
                    let (py, px) = (y / 2, x / 2);
                    let mut lo = f32::INFINITY;
                    let mut hi = f32::NEG_INFINITY;
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let ty = (py as i64 + dy).clamp(0, hh as i64 - 1) as usize;
                            let tx = (px as i64 + dx).clamp(0, ww as i64 - 1) as usize;
                            let v = fv[c * hh * ww + ty * ww + tx];
                            lo = lo.min(v);
                            hi = hi.max(v);
                        }
                    }
                    let v = ov[c * 4 * hh * ww + y * 2 * ww + x];
                    assert!(v >= lo - 1e-5 && v <= hi + 1e-5);
                }
            }
        }
    }
}
