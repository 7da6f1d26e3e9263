//! Synthetic image/flow scene generator and the augmentation pipeline.
//!
//! Scenes are band-limited noise textures: a global background motion plus
//! textured rectangles/ellipses with independent constant motions, composited
//! by depth. Motion boundaries coincide with texture boundaries, so edge
//! alignment is a meaningful training signal. Augmentation optionally applies
//! bilinear rescaling (with flow magnitude scaling); the interpolation can be
//! switched off to leave only crops and flips.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{FlowError, Result};
use crate::tensor::Tensor;

/// Largest object/background motion magnitude, px/frame.
pub const MOTION_RANGE: f64 = 8.0;

#[derive(Clone)]
pub struct SyntheticSample {
    /// [3,H,W] in [0,1].
    pub image: Tensor<f32>,
    /// [2,H,W], px/frame.
    pub flow: Tensor<f32>,
    pub n_shapes: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct AugmentConfig {
    pub scale_min: f64,
    pub scale_max: f64,
    pub crop_h: usize,
    pub crop_w: usize,
    pub hflip_p: f64,
    pub vflip_p: f64,
    pub interpolation_enabled: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            scale_min: 0.8,
            scale_max: 1.5,
            crop_h: 96,
            crop_w: 96,
            hflip_p: 0.5,
            vflip_p: 0.1,
            interpolation_enabled: true,
        }
    }
}

static RESIZE_CALLS: AtomicUsize = AtomicUsize::new(0);

/// Number of bilinear resample invocations since process start. Used to
/// assert that interpolation-free augmentation really never resamples.
pub fn resize_invocations() -> usize {
    RESIZE_CALLS.load(Ordering::Relaxed)
}

/// Plain bilinear resample of a [C,H,W] buffer (half-pixel centers, edge
/// clamp). Counts into `resize_invocations`.
fn bilinear(src: &[f32], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    RESIZE_CALLS.fetch_add(1, Ordering::Relaxed);
    let mut out = vec![0f32; c * oh * ow];
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    for y in 0..oh {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = (fy - y0 as f64) as f32;
        for x in 0..ow {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = (fx - x0 as f64) as f32;
            for ch in 0..c {
                let p = &src[ch * h * w..];
                let a = p[y0 * w + x0] * (1.0 - tx) + p[y0 * w + x1] * tx;
                let b = p[y1 * w + x0] * (1.0 - tx) + p[y1 * w + x1] * tx;
                out[ch * oh * ow + y * ow + x] = a * (1.0 - ty) + b * ty;
            }
        }
    }
    out
}

/// Band-limited noise: coarse uniform noise upsampled to full resolution,
/// centered on `base` with amplitude `amp`.
fn texture(rng: &mut ChaCha8Rng, h: usize, w: usize, base: [f32; 3], amp: f32) -> Vec<f32> {
    let (ch, cw) = ((h / 8).max(2), (w / 8).max(2));
    let coarse: Vec<f32> = (0..3 * ch * cw).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut up = bilinear(&coarse, 3, ch, cw, h, w);
    // a touch of per-pixel grain so full-resolution gradients are nonzero
    for (i, v) in up.iter_mut().enumerate() {
        let c = i / (h * w);
        *v = (base[c] + amp * *v + 0.05 * rng.gen_range(-1.0..1.0f32)).clamp(0.0, 1.0);
    }
    up
}

/// Generate one scene. Deterministic in (seed, H, W, n_shapes).
pub fn gen_sample(seed: u64, h: usize, w: usize, n_shapes: usize) -> Result<SyntheticSample> {
    if h % 8 != 0 || w % 8 != 0 {
        return Err(FlowError::Config(format!(
            "sample dims {}x{} must be divisible by 8",
            h, w
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = [rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8)];
    let mut image = texture(&mut rng, h, w, base, 0.2);
    let gu = rng.gen_range(-MOTION_RANGE..MOTION_RANGE) as f32;
    let gv = rng.gen_range(-MOTION_RANGE..MOTION_RANGE) as f32;
    let mut flow = vec![0f32; 2 * h * w];
    flow[..h * w].fill(gu);
    flow[h * w..].fill(gv);

    for _ in 0..n_shapes {
        let cy = rng.gen_range(0.0..h as f64);
        let cx = rng.gen_range(0.0..w as f64);
        let ry = rng.gen_range(0.06..0.3) * h as f64;
        let rx = rng.gen_range(0.06..0.3) * w as f64;
        let ellipse = rng.gen_bool(0.5);
        let u = rng.gen_range(-MOTION_RANGE..MOTION_RANGE) as f32;
        let v = rng.gen_range(-MOTION_RANGE..MOTION_RANGE) as f32;
        let sb = [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)];
        let tex = texture(&mut rng, h, w, sb, 0.2);
        for y in 0..h {
            for x in 0..w {
                let dy = (y as f64 - cy) / ry;
                let dx = (x as f64 - cx) / rx;
                let inside = if ellipse {
                    dy * dy + dx * dx <= 1.0
                } else {
                    dy.abs() <= 1.0 && dx.abs() <= 1.0
                };
                if inside {
                    let i = y * w + x;
                    for c in 0..3 {
                        image[c * h * w + i] = tex[c * h * w + i];
                    }
                    flow[i] = u;
                    flow[h * w + i] = v;
                }
            }
        }
    }

    Ok(SyntheticSample {
        image: Tensor::new(&[3, h, w], image)?,
        flow: Tensor::new(&[2, h, w], flow)?,
        n_shapes,
        seed,
    })
}

/// Apply scale / crop / flip augmentation. With interpolation disabled the
/// resize stage is skipped entirely and only crop + flips run.
pub fn augment(sample: &SyntheticSample, cfg: &AugmentConfig, seed: u64) -> Result<SyntheticSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = sample.image.shape();
    let (mut h, mut w) = (s[1], s[2]);
    let mut image = sample.image.to_vec();
    let mut flow = sample.flow.to_vec();

    if cfg.interpolation_enabled {
        let scale = rng.gen_range(cfg.scale_min..=cfg.scale_max);
        let nh = ((h as f64 * scale).round() as usize).max(cfg.crop_h);
        let nw = ((w as f64 * scale).round() as usize).max(cfg.crop_w);
        if (nh, nw) != (h, w) {
            let sy = nh as f32 / h as f32;
            let sx = nw as f32 / w as f32;
            image = bilinear(&image, 3, h, w, nh, nw);
            flow = bilinear(&flow, 2, h, w, nh, nw);
            for v in flow[..nh * nw].iter_mut() {
                *v *= sx;
            }
            for v in flow[nh * nw..].iter_mut() {
                *v *= sy;
            }
            h = nh;
            w = nw;
        }
    }

    if cfg.crop_h > h || cfg.crop_w > w {
        return Err(FlowError::Config(format!(
            "crop {}x{} exceeds extent {}x{}",
            cfg.crop_h, cfg.crop_w, h, w
        )));
    }
    let oy = rng.gen_range(0..=h - cfg.crop_h);
    let ox = rng.gen_range(0..=w - cfg.crop_w);
    let (ch, cw) = (cfg.crop_h, cfg.crop_w);
    let crop = |buf: &[f32], nc: usize| {
        let mut out = vec![0f32; nc * ch * cw];
        for c in 0..nc {
            for y in 0..ch {
                let src = c * h * w + (oy + y) * w + ox;
                out[c * ch * cw + y * cw..c * ch * cw + (y + 1) * cw]
                    .copy_from_slice(&buf[src..src + cw]);
            }
        }
        out
    };
    let mut image = crop(&image, 3);
    let mut flow = crop(&flow, 2);

    let mirror_x = |buf: &mut [f32], nc: usize| {
        for c in 0..nc {
            for y in 0..ch {
                buf[c * ch * cw + y * cw..c * ch * cw + (y + 1) * cw].reverse();
            }
        }
    };
    let mirror_y = |buf: &mut Vec<f32>, nc: usize| {
        for c in 0..nc {
            for y in 0..ch / 2 {
                for x in 0..cw {
                    buf.swap(c * ch * cw + y * cw + x, c * ch * cw + (ch - 1 - y) * cw + x);
                }
            }
        }
    };
    if rng.gen_bool(cfg.hflip_p) {
        mirror_x(&mut image, 3);
        mirror_x(&mut flow, 2);
        for v in flow[..ch * cw].iter_mut() {
            *v = -*v;
        }
    }
    if rng.gen_bool(cfg.vflip_p) {
        mirror_y(&mut image, 3);
        mirror_y(&mut flow, 2);
        for v in flow[ch * cw..].iter_mut() {
            *v = -*v;
        }
    }

    Ok(SyntheticSample {
        image: Tensor::new(&[3, ch, cw], image)?,
        flow: Tensor::new(&[2, ch, cw], flow)?,
        n_shapes: sample.n_shapes,
        seed: sample.seed,
    })
}
