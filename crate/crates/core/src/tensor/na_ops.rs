//! Window-local attention kernels: logit construction, window aggregation,
//! and the pixel-shuffle upsampling aggregations used by the convex
//! upsamplers. All of these carry hand-written backward passes.

use super::{Elem, Tape, Tensor};
use crate::error::{shape_err, FlowError, Result};

/// Border handling for convex aggregation windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PaddingPolicy {
    /// Out-of-bounds taps read zero (RAFT's unfold).
    ZeroPad,
    /// Tap coordinates are clamped into the field (border replicate); the
    /// window therefore only ever sees real field values.
    Clamp,
}

/// Start of an m-wide window centered at `y`, shifted inward at borders so the
/// window always lies fully inside `[0, extent)`.
#[inline]
pub(crate) fn na_window_start(y: usize, m: usize, extent: usize) -> usize {
    let r = (m - 1) / 2;
    (y.saturating_sub(r)).min(extent - m)
}

fn check_odd_window(op: &'static str, m: usize) -> Result<()> {
    if m == 0 || m % 2 == 0 {
        return Err(FlowError::Config(format!("{}: window size must be odd, got {}", op, m)));
    }
    Ok(())
}

fn check_window_fits(op: &'static str, m: usize, h: usize, w: usize) -> Result<()> {
    if m > h || m > w {
        return Err(FlowError::Config(format!(
            "{}: window {} exceeds spatial extent {}x{}",
            op, m, h, w
        )));
    }
    Ok(())
}

impl<E: Elem> Tape<E> {
    /// Raw neighborhood-attention logits for window size `m`.
    ///
    /// `q`,`k`: [heads, d, h, w]. Optional relative-position bias
    /// [heads, 2m-1, 2m-1] indexed by key offset relative to the query.
    /// Output: [heads, m*m, h, w] with entries scaled by 1/sqrt(d); windows
    /// are query-centered and shifted inward at borders.
    pub fn na_logits(
        &self,
        q: &Tensor<E>,
        k: &Tensor<E>,
        rel_bias: Option<&Tensor<E>>,
        m: usize,
    ) -> Result<Tensor<E>> {
        check_odd_window("na_logits", m)?;
        let s = q.shape();
        if s.len() != 4 || k.shape() != s {
            return Err(shape_err(
                "na_logits",
                format!("q {:?} vs k {:?}, want matching [heads,d,h,w]", s, k.shape()),
            ));
        }
        let (g, d, h, w) = (s[0], s[1], s[2], s[3]);
        check_window_fits("na_logits", m, h, w)?;
        // bias table may be sized for a larger window; offsets index its center
        let bias_extent = match rel_bias {
            Some(b) => {
                let bs = b.shape();
                if bs.len() != 3 || bs[0] != g || bs[1] != bs[2] || bs[1] % 2 == 0 || bs[1] < 2 * m - 1
                {
                    return Err(shape_err(
                        "na_logits",
                        format!(
                            "rel_bias {:?}, want [{},B,B] with odd B >= {}",
                            bs,
                            g,
                            2 * m - 1
                        ),
                    ));
                }
                bs[1]
            }
            None => 0,
        };
        let bhalf = bias_extent / 2;
        let scale = E::from_f64(1.0 / (d as f64).sqrt());
        let m2 = m * m;
        let sp = h * w;

        // token-major copies so the dot products are contiguous in d
        let to_token_major = |t: &Tensor<E>| -> Vec<E> {
            let v = t.to_vec();
            let mut out = vec![E::ZERO; v.len()];
            for gi in 0..g {
                for di in 0..d {
                    for j in 0..sp {
                        out[(gi * sp + j) * d + di] = v[(gi * d + di) * sp + j];
                    }
                }
            }
            out
        };
        let qt = to_token_major(q);
        let kt = to_token_major(k);
        let bv = rel_bias.map(|b| b.to_vec());

        let mut out_data = vec![E::ZERO; g * m2 * sp];
        for gi in 0..g {
            for y in 0..h {
                let ys = na_window_start(y, m, h);
                for x in 0..w {
                    let xs = na_window_start(x, m, w);
                    let qv = &qt[(gi * sp + y * w + x) * d..][..d];
                    for wy in 0..m {
                        for wx in 0..m {
                            let (yy, xx) = (ys + wy, xs + wx);
                            let kv = &kt[(gi * sp + yy * w + xx) * d..][..d];
                            let mut dot = E::ZERO;
                            for di in 0..d {
                                dot = dot + qv[di] * kv[di];
                            }
                            let mut v = dot * scale;
                            if let Some(bv) = &bv {
                                let by = yy + bhalf - y;
                                let bx = xx + bhalf - x;
                                v = v + bv[(gi * bias_extent + by) * bias_extent + bx];
                            }
                            out_data[((gi * m2) + wy * m + wx) * sp + y * w + x] = v;
                        }
                    }
                }
            }
        }

        let needs =
            q.needs_grad() || k.needs_grad() || rel_bias.map_or(false, |b| b.needs_grad());
        let out = Tensor::result(vec![g, m2, h, w], out_data, self.enabled && needs);
        let (q2, k2, o2) = (q.clone(), k.clone(), out.clone());
        let b2 = rel_bias.cloned();
        self.record_if(needs, move || {
            o2.with_grad(|gr| {
                let mut dq = vec![E::ZERO; g * d * sp];
                let mut dk = vec![E::ZERO; g * d * sp];
                let mut db = vec![E::ZERO; g * bias_extent * bias_extent];
                for gi in 0..g {
                    for y in 0..h {
                        let ys = na_window_start(y, m, h);
                        for x in 0..w {
                            let xs = na_window_start(x, m, w);
                            let qv = &qt[(gi * sp + y * w + x) * d..][..d];
                            for wy in 0..m {
                                for wx in 0..m {
                                    let (yy, xx) = (ys + wy, xs + wx);
                                    let gg = gr[((gi * m2) + wy * m + wx) * sp + y * w + x];
                                    if gg == E::ZERO {
                                        continue;
                                    }
                                    let gs = gg * scale;
                                    let kv = &kt[(gi * sp + yy * w + xx) * d..][..d];
                                    let dqv = &mut dq[(gi * sp + y * w + x) * d..][..d];
                                    for di in 0..d {
                                        dqv[di] = dqv[di] + gs * kv[di];
                                    }
                                    let dkv = &mut dk[(gi * sp + yy * w + xx) * d..][..d];
                                    for di in 0..d {
                                        dkv[di] = dkv[di] + gs * qv[di];
                                    }
                                    if bias_extent > 0 {
                                        let by = yy + bhalf - y;
                                        let bx = xx + bhalf - x;
                                        db[(gi * bias_extent + by) * bias_extent + bx] =
                                            db[(gi * bias_extent + by) * bias_extent + bx] + gg;
                                    }
                                }
                            }
                        }
                    }
                }
                // back from token-major to channel-major
                let from_token_major = |src: &[E]| -> Vec<E> {
                    let mut out = vec![E::ZERO; src.len()];
                    for gi in 0..g {
                        for di in 0..d {
                            for j in 0..sp {
                                out[(gi * d + di) * sp + j] = src[(gi * sp + j) * d + di];
                            }
                        }
                    }
                    out
                };
                if q2.needs_grad() {
                    q2.accumulate_grad(&from_token_major(&dq));
                }
                if k2.needs_grad() {
                    k2.accumulate_grad(&from_token_major(&dk));
                }
                if let Some(b) = &b2 {
                    if b.needs_grad() {
                        b.accumulate_grad(&db);
                    }
                }
            });
        });
        Ok(out)
    }

    /// Window-weighted sum at the source resolution (attention aggregation).
    ///
    /// `lam`: [heads, m, m, h, w], `v`: [heads, d, h, w] -> [heads, d, h, w].
    /// Uses the same shifted windows as [`Tape::na_logits`].
    pub fn na_aggregate(&self, lam: &Tensor<E>, v: &Tensor<E>) -> Result<Tensor<E>> {
        let ls = lam.shape();
        let vs = v.shape();
        if ls.len() != 5 || vs.len() != 4 || ls[1] != ls[2] {
            return Err(shape_err(
                "na_aggregate",
                format!("lam {:?} (want [g,m,m,h,w]), v {:?} (want [g,d,h,w])", ls, vs),
            ));
        }
        let (g, m, h, w) = (ls[0], ls[1], ls[3], ls[4]);
        let d = vs[1];
        if vs != [g, d, h, w] {
            return Err(shape_err(
                "na_aggregate",
                format!("lam {:?} misaligned with v {:?}", ls, vs),
            ));
        }
        check_odd_window("na_aggregate", m)?;
        check_window_fits("na_aggregate", m, h, w)?;
        let sp = h * w;
        let m2 = m * m;

        let lv = lam.to_vec();
        let vv = v.to_vec();
        let mut out_data = vec![E::ZERO; g * d * sp];
        for gi in 0..g {
            for y in 0..h {
                let ys = na_window_start(y, m, h);
                for x in 0..w {
                    let xs = na_window_start(x, m, w);
                    for wy in 0..m {
                        for wx in 0..m {
                            let wt = lv[((gi * m + wy) * m + wx) * sp + y * w + x];
                            let (yy, xx) = (ys + wy, xs + wx);
                            for di in 0..d {
                                let idx = (gi * d + di) * sp + y * w + x;
                                out_data[idx] =
                                    out_data[idx] + wt * vv[(gi * d + di) * sp + yy * w + xx];
                            }
                        }
                    }
                }
            }
        }

        let needs = lam.needs_grad() || v.needs_grad();
        let out = Tensor::result(vec![g, d, h, w], out_data, self.enabled && needs);
        let (l2, v2, o2) = (lam.clone(), v.clone(), out.clone());
        self.record_if(needs, move || {
            o2.with_grad(|gr| {
                let mut dlam = vec![E::ZERO; g * m2 * sp];
                let mut dv = vec![E::ZERO; g * d * sp];
                for gi in 0..g {
                    for y in 0..h {
                        let ys = na_window_start(y, m, h);
                        for x in 0..w {
                            let xs = na_window_start(x, m, w);
                            for wy in 0..m {
                                for wx in 0..m {
                                    let (yy, xx) = (ys + wy, xs + wx);
                                    let wt = lv[((gi * m + wy) * m + wx) * sp + y * w + x];
                                    let mut dot = E::ZERO;
                                    for di in 0..d {
                                        let go = gr[(gi * d + di) * sp + y * w + x];
                                        dot = dot + go * vv[(gi * d + di) * sp + yy * w + xx];
                                        let idx = (gi * d + di) * sp + yy * w + xx;
                                        dv[idx] = dv[idx] + wt * go;
                                    }
                                    let lidx = ((gi * m + wy) * m + wx) * sp + y * w + x;
                                    dlam[lidx] = dlam[lidx] + dot;
                                }
                            }
                        }
                    }
                }
                if l2.needs_grad() {
                    l2.accumulate_grad(&dlam);
                }
                if v2.needs_grad() {
                    v2.accumulate_grad(&dv);
                }
            });
        });
        Ok(out)
    }

    /// Convex upsampling: each of the f*f masks aggregates the `field` window
    /// around its parent pixel and writes one sub-pixel of the f x f block.
    ///
    /// `masks`: [f*f, m, m, h, w], `field`: [C, h, w] -> [C, f*h, f*w].
    /// Sub-pixel i lands at row-major offset (i / f, i % f).
    pub fn convex_aggregate(
        &self,
        masks: &Tensor<E>,
        field: &Tensor<E>,
        policy: PaddingPolicy,
    ) -> Result<Tensor<E>> {
        let ms = masks.shape();
        let fs = field.shape();
        if ms.len() != 5 || fs.len() != 3 || ms[1] != ms[2] {
            return Err(shape_err(
                "convex_aggregate",
                format!("masks {:?} (want [f2,m,m,h,w]), field {:?} (want [C,h,w])", ms, fs),
            ));
        }
        let (f2, m, h, w) = (ms[0], ms[1], ms[3], ms[4]);
        let f = (f2 as f64).sqrt() as usize;
        if f * f != f2 {
            return Err(FlowError::Config(format!(
                "convex_aggregate: {} masks is not a square sub-pixel count",
                f2
            )));
        }
        if fs[1] != h || fs[2] != w {
            return Err(shape_err(
                "convex_aggregate",
                format!("masks {:?} misaligned with field {:?}", ms, fs),
            ));
        }
        check_odd_window("convex_aggregate", m)?;
        let c = fs[0];
        let sp = h * w;
        let r = (m as isize - 1) / 2;

        let mv = masks.to_vec();
        let fv = field.to_vec();
        let mut out_data = vec![E::ZERO; c * f2 * sp];
        let (oh, ow) = (f * h, f * w);
        for i in 0..f2 {
            let (sy, sx) = (i / f, i % f);
            for y in 0..h {
                for x in 0..w {
                    for wy in 0..m {
                        for wx in 0..m {
                            let yy = y as isize + wy as isize - r;
                            let xx = x as isize + wx as isize - r;
                            let tap = match policy {
                                PaddingPolicy::ZeroPad => {
                                    if yy < 0 || yy >= h as isize || xx < 0 || xx >= w as isize {
                                        continue;
                                    }
                                    (yy as usize, xx as usize)
                                }
                                PaddingPolicy::Clamp => (
                                    yy.clamp(0, h as isize - 1) as usize,
                                    xx.clamp(0, w as isize - 1) as usize,
                                ),
                            };
                            let wt = mv[((i * m + wy) * m + wx) * sp + y * w + x];
                            for ch in 0..c {
                                let oidx = ch * oh * ow + (f * y + sy) * ow + f * x + sx;
                                out_data[oidx] =
                                    out_data[oidx] + wt * fv[ch * sp + tap.0 * w + tap.1];
                            }
                        }
                    }
                }
            }
        }

        let needs = masks.needs_grad() || field.needs_grad();
        let out = Tensor::result(vec![c, oh, ow], out_data, self.enabled && needs);
        let (m2t, f2t, o2) = (masks.clone(), field.clone(), out.clone());
        self.record_if(needs, move || {
            o2.with_grad(|gr| {
                let mut dmask = vec![E::ZERO; f2 * m * m * sp];
                let mut dfield = vec![E::ZERO; c * sp];
                for i in 0..f2 {
                    let (sy, sx) = (i / f, i % f);
                    for y in 0..h {
                        for x in 0..w {
                            for wy in 0..m {
                                for wx in 0..m {
                                    let yy = y as isize + wy as isize - r;
                                    let xx = x as isize + wx as isize - r;
                                    let tap = match policy {
                                        PaddingPolicy::ZeroPad => {
                                            if yy < 0
                                                || yy >= h as isize
                                                || xx < 0
                                                || xx >= w as isize
                                            {
                                                continue;
                                            }
                                            (yy as usize, xx as usize)
                                        }
                                        PaddingPolicy::Clamp => (
                                            yy.clamp(0, h as isize - 1) as usize,
                                            xx.clamp(0, w as isize - 1) as usize,
                                        ),
                                    };
                                    let wt = mv[((i * m + wy) * m + wx) * sp + y * w + x];
                                    let mut dot = E::ZERO;
                                    for ch in 0..c {
                                        let go =
                                            gr[ch * oh * ow + (f * y + sy) * ow + f * x + sx];
                                        dot = dot + go * fv[ch * sp + tap.0 * w + tap.1];
                                        let fidx = ch * sp + tap.0 * w + tap.1;
                                        dfield[fidx] = dfield[fidx] + wt * go;
                                    }
                                    let midx = ((i * m + wy) * m + wx) * sp + y * w + x;
                                    dmask[midx] = dmask[midx] + dot;
                                }
                            }
                        }
                    }
                }
                if m2t.needs_grad() {
                    m2t.accumulate_grad(&dmask);
                }
                if f2t.needs_grad() {
                    f2t.accumulate_grad(&dfield);
                }
            });
        });
        Ok(out)
    }

    /// Pixel-shuffle aggregation with per-head values and NA shifted windows:
    /// head i aggregates its own value slice and writes sub-pixel i.
    ///
    /// `lam`: [f*f, m, m, h, w], `v`: [f*f, d, h, w] -> [d, f*h, f*w].
    pub fn na_upsample_per_head(&self, lam: &Tensor<E>, v: &Tensor<E>) -> Result<Tensor<E>> {
        let ls = lam.shape();
        let vs = v.shape();
        if ls.len() != 5 || vs.len() != 4 || ls[1] != ls[2] {
            return Err(shape_err(
                "na_upsample_per_head",
                format!("lam {:?} (want [f2,m,m,h,w]), v {:?} (want [f2,d,h,w])", ls, vs),
            ));
        }
        let (f2, m, h, w) = (ls[0], ls[1], ls[3], ls[4]);
        let f = (f2 as f64).sqrt() as usize;
        if f * f != f2 {
            return Err(FlowError::Config(format!(
                "na_upsample_per_head: {} heads is not a square sub-pixel count",
                f2
            )));
        }
        let d = vs[1];
        if vs != [f2, d, h, w] {
            return Err(shape_err(
                "na_upsample_per_head",
                format!("lam {:?} misaligned with v {:?}", ls, vs),
            ));
        }
        check_odd_window("na_upsample_per_head", m)?;
        check_window_fits("na_upsample_per_head", m, h, w)?;
        let sp = h * w;
        let (oh, ow) = (f * h, f * w);

        let lv = lam.to_vec();
        let vv = v.to_vec();
        let mut out_data = vec![E::ZERO; d * oh * ow];
        for i in 0..f2 {
            let (sy, sx) = (i / f, i % f);
            for y in 0..h {
                let ys = na_window_start(y, m, h);
                for x in 0..w {
                    let xs = na_window_start(x, m, w);
                    for wy in 0..m {
                        for wx in 0..m {
                            let wt = lv[((i * m + wy) * m + wx) * sp + y * w + x];
                            let (yy, xx) = (ys + wy, xs + wx);
                            for di in 0..d {
                                let oidx = di * oh * ow + (f * y + sy) * ow + f * x + sx;
                                out_data[oidx] =
                                    out_data[oidx] + wt * vv[(i * d + di) * sp + yy * w + xx];
                            }
                        }
                    }
                }
            }
        }

        let needs = lam.needs_grad() || v.needs_grad();
        let out = Tensor::result(vec![d, oh, ow], out_data, self.enabled && needs);
        let (l2, v2, o2) = (lam.clone(), v.clone(), out.clone());
        self.record_if(needs, move || {
            o2.with_grad(|gr| {
                let mut dlam = vec![E::ZERO; f2 * m * m * sp];
                let mut dv = vec![E::ZERO; f2 * d * sp];
                for i in 0..f2 {
                    let (sy, sx) = (i / f, i % f);
                    for y in 0..h {
                        let ys = na_window_start(y, m, h);
                        for x in 0..w {
                            let xs = na_window_start(x, m, w);
                            for wy in 0..m {
                                for wx in 0..m {
                                    let (yy, xx) = (ys + wy, xs + wx);
                                    let wt = lv[((i * m + wy) * m + wx) * sp + y * w + x];
                                    let mut dot = E::ZERO;
                                    for di in 0..d {
                                        let go =
                                            gr[di * oh * ow + (f * y + sy) * ow + f * x + sx];
                                        dot = dot + go * vv[(i * d + di) * sp + yy * w + xx];
                                        let vidx = (i * d + di) * sp + yy * w + xx;
                                        dv[vidx] = dv[vidx] + wt * go;
                                    }
                                    let lidx = ((i * m + wy) * m + wx) * sp + y * w + x;
                                    dlam[lidx] = dlam[lidx] + dot;
                                }
                            }
                        }
                    }
                }
                if l2.needs_grad() {
                    l2.accumulate_grad(&dlam);
                }
                if v2.needs_grad() {
                    v2.accumulate_grad(&dv);
                }
            });
        });
        Ok(out)
    }

    /// Pixel-shuffle aggregation of a shared field with NA shifted windows:
    /// every head aggregates the same [C,h,w] field (the flow map) and writes
    /// its sub-pixel. `lam`: [f*f, m, m, h, w] -> [C, f*h, f*w].
    pub fn na_upsample(&self, lam: &Tensor<E>, field: &Tensor<E>) -> Result<Tensor<E>> {
        let fs = field.shape();
        if fs.len() != 3 {
            return Err(shape_err(
                "na_upsample",
                format!("field {:?}, want [C,h,w]", fs),
            ));
        }
        let f2 = lam.shape()[0];
        let c = fs[0];
        // broadcast the field across heads and reuse the per-head kernel
        let (h, w) = (fs[1], fs[2]);
        let fv = field.to_vec();
        let mut vdata = vec![E::ZERO; f2 * c * h * w];
        for i in 0..f2 {
            vdata[i * c * h * w..(i + 1) * c * h * w].copy_from_slice(&fv);
        }
        let vb = Tensor::result(vec![f2, c, h, w], vdata, self.enabled && field.needs_grad());
        let (f2t, v2) = (field.clone(), vb.clone());
        self.record_if(field.needs_grad(), move || {
            v2.with_grad(|g| {
                let n = f2t.numel();
                let mut df = vec![E::ZERO; n];
                for i in 0..f2 {
                    for j in 0..n {
                        df[j] = df[j] + g[i * n + j];
                    }
                }
                f2t.accumulate_grad(&df);
            });
        });
        self.na_upsample_per_head(lam, &vb)
    }
}
