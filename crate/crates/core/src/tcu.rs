//! Transformer Convex Upsampler: a 3-scale context encoder, per-step
//! embedding with optional image-feature injection, 2 NAT context blocks,
//! and attention-based upsampling of both flow and features across a
//! hierarchy of factor-2 steps.

use rand::Rng;

use crate::error::{FlowError, Result};
use crate::init;
use crate::na::{effective_window, na_maps, NatBlock};
use crate::tensor::{Elem, PaddingPolicy, Tape, Tensor};

/// Encoder stage channel widths at scales 1/2, 1/4, 1/8.
pub const ENCODER_CHANNELS: [usize; 3] = [64, 96, 128];

/// Residual bottleneck width divisor (slim encoder).
const BOTTLENECK_DIV: usize = 4;

/// Instance-norm epsilon. Deliberately large: near-constant channels with a
/// tiny eps make the normalization so sharply curved that central-difference
/// gradient verification breaks down, and normalization quality is
/// insensitive at this scale.
const NORM_EPS: f64 = 1e-3;

struct ResidualBlock<E> {
    w_in: Tensor<E>,
    b_in: Tensor<E>,
    in_g1: Tensor<E>,
    in_b1: Tensor<E>,
    w_mid: Tensor<E>,
    b_mid: Tensor<E>,
    in_g2: Tensor<E>,
    in_b2: Tensor<E>,
    w_out: Tensor<E>,
    b_out: Tensor<E>,
    in_g3: Tensor<E>,
    in_b3: Tensor<E>,
}

impl<E: Elem> ResidualBlock<E> {
    fn new(dim: usize, rng: &mut impl Rng) -> Self {
        let mid = (dim / BOTTLENECK_DIV).max(4);
        ResidualBlock {
            w_in: init::conv_weight(mid, dim, 1, rng),
            b_in: init::conv_bias(mid, dim, 1, rng),
            in_g1: init::ones_param(&[mid]),
            in_b1: init::zeros_param(&[mid]),
            w_mid: init::conv_weight(mid, mid, 3, rng),
            b_mid: init::conv_bias(mid, mid, 3, rng),
            in_g2: init::ones_param(&[mid]),
            in_b2: init::zeros_param(&[mid]),
            w_out: init::conv_weight(dim, mid, 1, rng),
            b_out: init::conv_bias(dim, mid, 1, rng),
            in_g3: init::ones_param(&[dim]),
            in_b3: init::zeros_param(&[dim]),
        }
    }

    fn forward(&self, tape: &Tape<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
        let a = tape.conv2d(x, &self.w_in, Some(&self.b_in), 1, 0)?;
        let a = tape.instance_norm(&a, &self.in_g1, &self.in_b1, NORM_EPS)?;
        let a = tape.relu(&a);
        let b = tape.conv2d(&a, &self.w_mid, Some(&self.b_mid), 1, 1)?;
        let b = tape.instance_norm(&b, &self.in_g2, &self.in_b2, NORM_EPS)?;
        let b = tape.relu(&b);
        let c = tape.conv2d(&b, &self.w_out, Some(&self.b_out), 1, 0)?;
        let c = tape.instance_norm(&c, &self.in_g3, &self.in_b3, NORM_EPS)?;
        let sum = tape.add(x, &c)?;
        Ok(tape.relu(&sum))
    }

    fn parameters(&self, prefix: &str) -> Vec<(String, Tensor<E>)> {
        vec![
            (format!("{prefix}.in.weight"), self.w_in.clone()),
            (format!("{prefix}.in.bias"), self.b_in.clone()),
            (format!("{prefix}.in.norm.gamma"), self.in_g1.clone()),
            (format!("{prefix}.in.norm.beta"), self.in_b1.clone()),
            (format!("{prefix}.mid.weight"), self.w_mid.clone()),
            (format!("{prefix}.mid.bias"), self.b_mid.clone()),
            (format!("{prefix}.mid.norm.gamma"), self.in_g2.clone()),
            (format!("{prefix}.mid.norm.beta"), self.in_b2.clone()),
            (format!("{prefix}.out.weight"), self.w_out.clone()),
            (format!("{prefix}.out.bias"), self.b_out.clone()),
            (format!("{prefix}.out.norm.gamma"), self.in_g3.clone()),
            (format!("{prefix}.out.norm.beta"), self.in_b3.clone()),
        ]
    }
}

struct EncoderStage<E> {
    w_down: Tensor<E>,
    b_down: Tensor<E>,
    norm_g: Tensor<E>,
    norm_b: Tensor<E>,
    blocks: [ResidualBlock<E>; 2],
}

impl<E: Elem> EncoderStage<E> {
    fn new(in_c: usize, out_c: usize, rng: &mut impl Rng) -> Self {
        EncoderStage {
            w_down: init::conv_weight(out_c, in_c, 3, rng),
            b_down: init::conv_bias(out_c, in_c, 3, rng),
            norm_g: init::ones_param(&[out_c]),
            norm_b: init::zeros_param(&[out_c]),
            blocks: [ResidualBlock::new(out_c, rng), ResidualBlock::new(out_c, rng)],
        }
    }

    fn forward(&self, tape: &Tape<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
        let d = tape.conv2d(x, &self.w_down, Some(&self.b_down), 2, 1)?;
        let d = tape.instance_norm(&d, &self.norm_g, &self.norm_b, NORM_EPS)?;
        let mut y = tape.relu(&d);
        for b in &self.blocks {
            y = b.forward(tape, &y)?;
        }
        Ok(y)
    }

    fn parameters(&self, prefix: &str) -> Vec<(String, Tensor<E>)> {
        let mut ps = vec![
            (format!("{prefix}.down.weight"), self.w_down.clone()),
            (format!("{prefix}.down.bias"), self.b_down.clone()),
            (format!("{prefix}.down.norm.gamma"), self.norm_g.clone()),
            (format!("{prefix}.down.norm.beta"), self.norm_b.clone()),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            ps.extend(b.parameters(&format!("{prefix}.block{i}")));
        }
        ps
    }
}

/// Three-stage residual encoder producing image features at scales
/// 1/2 (64ch), 1/4 (96ch) and 1/8 (128ch).
pub struct ContextEncoder<E> {
    stages: [EncoderStage<E>; 3],
}

impl<E: Elem> ContextEncoder<E> {
    pub fn new(rng: &mut impl Rng) -> Self {
        ContextEncoder {
            stages: [
                EncoderStage::new(3, ENCODER_CHANNELS[0], rng),
                EncoderStage::new(ENCODER_CHANNELS[0], ENCODER_CHANNELS[1], rng),
                EncoderStage::new(ENCODER_CHANNELS[1], ENCODER_CHANNELS[2], rng),
            ],
        }
    }

    /// image [3,H,W] with H,W divisible by 8 -> features at 1/2, 1/4, 1/8.
    pub fn encode(
        &self,
        tape: &Tape<E>,
        image: &Tensor<E>,
    ) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(FlowError::Shape {
                op: "context_encode",
                detail: format!("expected [3,H,W], got {:?}", s),
            });
        }
        if s[1] % 8 != 0 || s[2] % 8 != 0 {
            return Err(FlowError::Config(format!(
                "image dims {}x{} must be divisible by 8",
                s[1], s[2]
            )));
        }
        let f2 = self.stages[0].forward(tape, image)?;
        let f4 = self.stages[1].forward(tape, &f2)?;
        let f8 = self.stages[2].forward(tape, &f4)?;
        Ok((f2, f4, f8))
    }

    pub fn parameters(&self, prefix: &str) -> Vec<(String, Tensor<E>)> {
        let mut ps = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            ps.extend(s.parameters(&format!("{prefix}.stage{i}")));
        }
        ps
    }
}

/// Hyper-parameters of the hierarchical upsampler.
#[derive(Debug, Clone)]
pub struct UpsamplerConfig {
    /// Number of factor-2 steps (M).
    pub steps: usize,
    /// Mask size per step, low- to high-resolution.
    pub mask_sizes: Vec<usize>,
    /// Embedding dimensionality per step; halves per step.
    pub dims: Vec<usize>,
    /// NAT context-block head dimensionality.
    pub head_dim: usize,
    /// Concatenate the matching-scale image features into each embedding (+FT).
    pub inject_features: bool,
    /// Learnable relative-position bias in attention logits.
    pub use_rel_bias: bool,
    pub padding_policy: PaddingPolicy,
}

impl Default for UpsamplerConfig {
    fn default() -> Self {
        UpsamplerConfig {
            steps: 3,
            mask_sizes: vec![9, 7, 5],
            dims: vec![128, 64, 32],
            head_dim: 32,
            inject_features: true,
            use_rel_bias: true,
            padding_policy: PaddingPolicy::Clamp,
        }
    }
}

impl UpsamplerConfig {
    /// Narrow configuration with the same topology; used for fast 64-bit
    /// gradient checks.
    pub fn reduced() -> Self {
        UpsamplerConfig {
            steps: 3,
            mask_sizes: vec![9, 7, 5],
            dims: vec![16, 8, 4],
            head_dim: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mask_sizes.len() != self.steps || self.dims.len() != self.steps {
            return Err(FlowError::Config(format!(
                "{} steps but {} mask sizes / {} dims",
                self.steps,
                self.mask_sizes.len(),
                self.dims.len()
            )));
        }
        for m in &self.mask_sizes {
            if m % 2 == 0 {
                return Err(FlowError::Config(format!("mask size {} must be odd", m)));
            }
        }
        for w in self.dims.windows(2) {
            if w[1] * 2 != w[0] {
                return Err(FlowError::Config(format!(
                    "dims must halve per step, got {:?}",
                    self.dims
                )));
            }
        }
        Ok(())
    }

    /// Total upsampling factor (2^steps).
    pub fn factor(&self) -> usize {
        1 << self.steps
    }
}

const STEP_FACTOR: usize = 2;
const STEP_HEADS: usize = STEP_FACTOR * STEP_FACTOR;

/// One factor-2 attention upsampling step.
/// Initial logit advantage of the zero-offset tap in each attention window.
/// With this peak the untrained upsampler starts close to nearest-neighbor
/// upsampling (a sharp, sensible operator) instead of a random local blur,
/// which a short training budget cannot afford to unlearn first.
const CENTER_BIAS_INIT: f64 = 6.0;

/// Relative-position bias table [heads, 2m-1, 2m-1], zero except for a peak
/// at the zero-offset entry.
fn center_peaked_bias<E: Elem>(heads: usize, mask_size: usize) -> Tensor<E> {
    let b = 2 * mask_size - 1;
    let c = mask_size - 1;
    let mut data = vec![E::ZERO; heads * b * b];
    for h in 0..heads {
        data[(h * b + c) * b + c] = E::from_f64(CENTER_BIAS_INIT);
    }
    Tensor::param(&[heads, b, b], data).expect("consistent shape")
}

pub struct TcuStep<E> {
    w_embed: Tensor<E>,
    b_embed: Tensor<E>,
    nat: [NatBlock<E>; 2],
    w_q: Tensor<E>,
    w_k: Tensor<E>,
    w_v: Tensor<E>,
    lam_bias: Option<Tensor<E>>,
    /// Channels expected in the concatenated embedding input.
    pub in_channels: usize,
    pub dim: usize,
    pub mask_size: usize,
}

impl<E: Elem> TcuStep<E> {
    fn new(
        in_channels: usize,
        dim: usize,
        mask_size: usize,
        head_dim: usize,
        use_rel_bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        // QKV dimensionality is f^2 * D/2 = 2D for f=2
        let qkv = STEP_HEADS * dim / 2;
        Ok(TcuStep {
            w_embed: init::conv_weight(dim, in_channels, 1, rng),
            b_embed: init::conv_bias(dim, in_channels, 1, rng),
            nat: [
                NatBlock::new(dim, head_dim.min(dim), mask_size, use_rel_bias, rng)?,
                NatBlock::new(dim, head_dim.min(dim), mask_size, use_rel_bias, rng)?,
            ],
            w_q: init::conv_weight(qkv, dim, 1, rng),
            w_k: init::conv_weight(qkv, dim, 1, rng),
            w_v: init::conv_weight(qkv, dim, 1, rng),
            lam_bias: use_rel_bias.then(|| center_peaked_bias(STEP_HEADS, mask_size)),
            in_channels,
            dim,
            mask_size,
        })
    }

    /// Upsample flow and features by factor 2.
    ///
    /// Embedding: e = Conv1x1(Cat(feat_in, image_feat?, flow_in)); context
    /// e_ctx = two NAT blocks; 4 attention heads of dim D/2 form the LAM;
    /// head i writes sub-pixel i of each 2x2 block for both flow and V.
    pub fn forward(
        &self,
        tape: &Tape<E>,
        flow_in: &Tensor<E>,
        feat_in: &Tensor<E>,
        image_feat: Option<&Tensor<E>>,
    ) -> Result<(Tensor<E>, Tensor<E>)> {
        let fs = flow_in.shape();
        if fs.len() != 3 || fs[0] != 2 {
            return Err(FlowError::Shape {
                op: "tcu_step",
                detail: format!("flow must be [2,h,w], got {:?}", fs),
            });
        }
        let (h, w) = (fs[1], fs[2]);
        let mut parts: Vec<&Tensor<E>> = vec![feat_in];
        if let Some(im) = image_feat {
            parts.push(im);
        }
        parts.push(flow_in);
        let cat = tape.concat(&parts, 0)?;
        if cat.shape()[0] != self.in_channels {
            return Err(FlowError::Shape {
                op: "tcu_step",
                detail: format!(
                    "embedding expects {} channels, got {}",
                    self.in_channels,
                    cat.shape()[0]
                ),
            });
        }
        let e = tape.conv2d(&cat, &self.w_embed, Some(&self.b_embed), 1, 0)?;
        let mut ctx = e;
        for block in &self.nat {
            ctx = block.forward(tape, &ctx)?;
        }

        let half = self.dim / 2;
        let m = effective_window(self.mask_size, h, w)?;
        let q = tape.conv2d(&ctx, &self.w_q, None, 1, 0)?;
        let k = tape.conv2d(&ctx, &self.w_k, None, 1, 0)?;
        let v = tape.conv2d(&ctx, &self.w_v, None, 1, 0)?;
        let qh = tape.reshape(&q, &[STEP_HEADS, half, h, w])?;
        let kh = tape.reshape(&k, &[STEP_HEADS, half, h, w])?;
        let vh = tape.reshape(&v, &[STEP_HEADS, half, h, w])?;
        let lam = na_maps(tape, m, &qh, &kh, self.lam_bias.as_ref())?;
        let flow_up = tape.na_upsample(&lam.weights, flow_in)?;
        let feat_up = tape.na_upsample_per_head(&lam.weights, &vh)?;
        Ok((flow_up, feat_up))
    }

    fn parameters(&self, prefix: &str) -> Vec<(String, Tensor<E>)> {
        let mut ps = vec![
            (format!("{prefix}.embed.weight"), self.w_embed.clone()),
            (format!("{prefix}.embed.bias"), self.b_embed.clone()),
            (format!("{prefix}.q.weight"), self.w_q.clone()),
            (format!("{prefix}.k.weight"), self.w_k.clone()),
            (format!("{prefix}.v.weight"), self.w_v.clone()),
        ];
        for (i, b) in self.nat.iter().enumerate() {
            ps.extend(b.parameters(&format!("{prefix}.nat{i}")));
        }
        if let Some(b) = &self.lam_bias {
            ps.push((format!("{prefix}.lam_bias"), b.clone()));
        }
        ps
    }
}

/// The full hierarchical upsampler (default: 3 steps, masks 9/7/5,
/// dims 128/64/32).
pub struct TcuUpsampler<E> {
    pub steps: Vec<TcuStep<E>>,
    pub config: UpsamplerConfig,
}

impl<E: Elem> TcuUpsampler<E> {
    /// `feat_channels` is the channel count of the hidden state entering
    /// step 0 (128 in the full pipeline).
    pub fn new(config: UpsamplerConfig, feat_channels: usize, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut steps = Vec::with_capacity(config.steps);
        let mut feat_in = feat_channels;
        for j in 0..config.steps {
            // image features are injected coarse-to-fine: 1/8, 1/4, 1/2
            let image_ch = if config.inject_features {
                ENCODER_CHANNELS[2 - j.min(2)]
            } else {
                0
            };
            let in_channels = feat_in + image_ch + 2;
            steps.push(TcuStep::new(
                in_channels,
                config.dims[j],
                config.mask_sizes[j],
                config.head_dim,
                config.use_rel_bias,
                rng,
            )?);
            feat_in = config.dims[j] / 2;
        }
        Ok(TcuUpsampler { steps, config })
    }

    /// Chain the steps from scale 1/8 to full resolution.
    ///
    /// `image_feats` are the encoder outputs (1/2, 1/4, 1/8); step j consumes
    /// the scale matching its input resolution when feature injection is on.
    pub fn upsample(
        &self,
        tape: &Tape<E>,
        flow_lr: &Tensor<E>,
        h_final: &Tensor<E>,
        image_feats: Option<(&Tensor<E>, &Tensor<E>, &Tensor<E>)>,
    ) -> Result<Tensor<E>> {
        if self.config.inject_features && image_feats.is_none() {
            return Err(FlowError::Config(
                "feature injection enabled but no image features supplied".into(),
            ));
        }
        let mut flow = flow_lr.clone();
        let mut feat = h_final.clone();
        for (j, step) in self.steps.iter().enumerate() {
            let inject = if self.config.inject_features {
                image_feats.map(|(f2, f4, f8)| match j {
                    0 => f8,
                    1 => f4,
                    _ => f2,
                })
            } else {
                None
            };
            let (f_up, h_up) = step.forward(tape, &flow, &feat, inject)?;
            flow = f_up;
            feat = h_up;
        }
        Ok(flow)
    }

    pub fn parameters(&self, prefix: &str) -> Vec<(String, Tensor<E>)> {
        let mut ps = Vec::new();
        for (j, s) in self.steps.iter().enumerate() {
            ps.extend(s.parameters(&format!("{prefix}.step{j}")));
        }
        ps
    }

    /// (weight parameters, relative-bias parameters). The former is
    /// independent of the mask sizes; only the bias tables grow with m.
    pub fn parameter_counts(&self) -> (usize, usize) {
        let mut main = 0usize;
        let mut bias = 0usize;
        for (name, t) in self.parameters("tcu") {
            if name.ends_with("rel_bias") || name.ends_with("lam_bias") {
                bias += t.numel();
            } else {
                main += t.numel();
            }
        }
        (main, bias)
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
    fn encoder_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tape = Tape::<f32>::no_grad();
        let enc = ContextEncoder::new(&mut rng);
        let img = rand_tensor(&[3, 64, 64], 1);
        let (f2, f4, f8) = enc.encode(&tape, &img).unwrap();
        assert_eq!(f2.shape(), &[64, 32, 32]);
        assert_eq!(f4.shape(), &[96, 16, 16]);
        assert_eq!(f8.shape(), &[128, 8, 8]);
    }

    #[test]
    fn encoder_rejects_indivisible_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tape = Tape::<f32>::no_grad();
        let enc = ContextEncoder::<f32>::new(&mut rng);
        let img = Tensor::zeros(&[3, 60, 64]);
        assert!(enc.encode(&tape, &img).is_err());
    }

    #[test]
    fn encoder_zero_image_is_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tape = Tape::<f32>::no_grad();
        let enc = ContextEncoder::new(&mut rng);
        let img = Tensor::zeros(&[3, 16, 16]);
        let (f2, f4, f8) = enc.encode(&tape, &img).unwrap();
        for t in [f2, f4, f8] {
            for v in t.to_vec() {
                assert!(v.is_finite());
            }
        }
    }

    #[test]
    fn step_shapes_and_constant_flow() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tape = Tape::<f32>::no_grad();
        let cfg = UpsamplerConfig {
            inject_features: false,
            ..UpsamplerConfig::default()
        };
        let ups = TcuUpsampler::new(cfg, 128, &mut rng).unwrap();
        let mut flow_data = vec![1.0f32; 64];
        flow_data.extend(vec![-4.0f32; 64]);
        let flow = Tensor::new(&[2, 8, 8], flow_data).unwrap();
        let feat = rand_tensor(&[128, 8, 8], 3);
        let (f_up, h_up) = ups.steps[0].forward(&tape, &flow, &feat, None).unwrap();
        assert_eq!(f_up.shape(), &[2, 16, 16]);
        assert_eq!(h_up.shape(), &[64, 16, 16]);
        let v = f_up.to_vec();
        for j in 0..256 {
            assert!((v[j] - 1.0).abs() < 1e-5);
            assert!((v[256 + j] + 4.0).abs() < 1e-5);
        }
    }

    #[test]
    fn step_convexity_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tape = Tape::<f32>::no_grad();
        let cfg = UpsamplerConfig {
            inject_features: false,
            ..UpsamplerConfig::default()
        };
        let ups = TcuUpsampler::new(cfg, 128, &mut rng).unwrap();
        let flow = rand_tensor(&[2, 10, 10], 4);
        let feat = rand_tensor(&[128, 10, 10], 5);
        let (f_up, _) = ups.steps[0].forward(&tape, &flow, &feat, None).unwrap();
        // window min/max scan (m=9, NA shifted windows)
        let fv = flow.to_vec();
        let ov = f_up.to_vec();
        let (h, w, m) = (10usize, 10usize, 9usize);
        for c in 0..2 {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    let (py, px) = (y / 2, x / 2);
                    let ys = py.saturating_sub(m / 2).min(h - m);
                    let xs = px.saturating_sub(m / 2).min(w - m);
                    let mut lo = f32::INFINITY;
                    let mut hi = f32::NEG_INFINITY;
                    for wy in 0..m {
                        for wx in 0..m {
                            let v = fv[c * h * w + (ys + wy) * w + xs + wx];
                            lo = lo.min(v);
                            hi = hi.max(v);
                        }
                    }
                    let v = ov[c * 4 * h * w + y * 2 * w + x];
                    assert!(v >= lo - 1e-5 && v <= hi + 1e-5);
                }
            }
        }
    }

    #[test]
    fn full_chain_shapes_and_concat_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tape = Tape::<f32>::no_grad();
        let cfg = UpsamplerConfig::default();
        let ups = TcuUpsampler::new(cfg, 128, &mut rng).unwrap();
        // step 0 embeds hidden + injected image features + flow: 128 + 128 + 2
        assert_eq!(ups.steps[0].in_channels, 258);
        assert_eq!(ups.steps[1].in_channels, 64 + 96 + 2);
        assert_eq!(ups.steps[2].in_channels, 32 + 64 + 2);

        let enc = ContextEncoder::new(&mut rng);
        let img = rand_tensor(&[3, 64, 64], 6);
        let (f2, f4, f8) = enc.encode(&tape, &img).unwrap();
        let flow = rand_tensor(&[2, 8, 8], 7);
        let feat = rand_tensor(&[128, 8, 8], 8);
        let out = ups
            .upsample(&tape, &flow, &feat, Some((&f2, &f4, &f8)))
            .unwrap();
        assert_eq!(out.shape(), &[2, 64, 64]);
    }

    #[test]
    fn full_chain_preserves_constant_flow() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let tape = Tape::<f32>::no_grad();
        let cfg = UpsamplerConfig {
            inject_features: false,
            ..UpsamplerConfig::default()
        };
        let ups = TcuUpsampler::new(cfg, 16, &mut rng).unwrap();
        let mut flow_data = vec![2.0f32; 144];
        flow_data.extend(vec![-1.5f32; 144]);
        let flow = Tensor::new(&[2, 12, 12], flow_data).unwrap();
        let feat = rand_tensor(&[16, 12, 12], 9);
        let out = ups.upsample(&tape, &flow, &feat, None).unwrap();
        assert_eq!(out.shape(), &[2, 96, 96]);
        let v = out.to_vec();
        for j in 0..96 * 96 {
            assert!((v[j] - 2.0).abs() < 1e-5);
            assert!((v[96 * 96 + j] + 1.5).abs() < 1e-5);
        }
    }

    #[test]
    fn parameter_count_independent_of_mask_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let small = TcuUpsampler::<f32>::new(
            UpsamplerConfig {
                mask_sizes: vec![3, 3, 3],
                ..UpsamplerConfig::default()
            },
            128,
            &mut rng,
        )
        .unwrap();
        let large = TcuUpsampler::<f32>::new(UpsamplerConfig::default(), 128, &mut rng).unwrap();
        let (main_s, bias_s) = small.parameter_counts();
        let (main_l, bias_l) = large.parameter_counts();
        assert_eq!(main_s, main_l);
        assert!(bias_l > bias_s);
    }
}
