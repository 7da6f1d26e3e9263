//! Recorded tensor operations: arithmetic, reductions, activations,
//! normalization, shape manipulation, convolution and resampling.

use super::kernels::{col2im_add, gemm_nn, gemm_nt, gemm_tn, im2col};
use super::{Elem, Tape, Tensor};
use crate::error::{shape_err, FlowError, Result};

fn same_shape<E: Elem>(op: &'static str, a: &Tensor<E>, b: &Tensor<E>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(
            op,
            format!("operands {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

/// Shape [pre, axis, post] factorization around one axis.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

impl<E: Elem> Tape<E> {
    pub fn add(&self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        same_shape("add", a, b)?;
        let data = a.with_data(|x| {
            b.with_data(|y| x.iter().zip(y).map(|(p, q)| *p + *q).collect::<Vec<_>>())
        });
        let needs = a.needs_grad() || b.needs_grad();
        let out = Tensor::result(a.shape().to_vec(), data, self.enabled && needs);
        let (a2, b2, o2) = (a.clone(), b.clone(), out.clone());
        self.record_if(needs, move || {
            o2.with_grad(|g| {
                if a2.needs_grad() {
                    a2.accumulate_grad(g);
                }
                if b2.needs_grad() {
                    b2.accumulate_grad(g);
                }
            });
        });
        Ok(out)
    }

    pub fn sub(&self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        same_shape("sub", a, b)?;
        let data = a.with_data(|x| {
            b.with_data(|y| x.iter().zip(y).map(|(p, q)| *p - *q).collect::<Vec<_>>())
        });
        let needs = a.needs_grad() || b.needs_grad();
        let out = Tensor::result(a.shape().to_vec(), data, self.enabled && needs);
        let (a2, b2, o2) = (a.clone(), b.clone(), out.clone());
        self.record_if(needs, move || {
            o2.with_grad(|g| {
                if a2.needs_grad() {
                    a2.accumulate_grad(g);
                }
                if b2.needs_grad() {
                    let neg: Vec<E> = g.iter().map(|v| -*v).collect();
                    b2.accumulate_grad(&neg);
                }
            });
        });
        Ok(out)
    }

    pub fn mul(&self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        same_shape("mul", a, b)?;
        let data = a.with_data(|x| {
            b.with_data(|y| x.iter().zip(y).map(|(p, q)| *p * *q).collect::<Vec<_>>())
        });
        let needs = a.needs_grad() || b.needs_grad();
        let out = Tensor::result(a.shape().to_vec(), data, self.enabled && needs);
        let (a2, b2, o2) = (a.clone(), b.clone(), out.clone());
        self.record_if(needs, move || {
            o2.with_grad(|g| {
                if a2.needs_grad() {
                    let c: Vec<E> = b2.with_data(|y| g.iter().zip(y).map(|(p, q)| *p * *q).collect());
                    a2.accumulate_grad(&c);
                }
                if b2.needs_grad() {
                    let c: Vec<E> = a2.with_data(|x| g.iter().zip(x).map(|(p, q)| *p * *q).collect());
                    b2.accumulate_grad(&c);
                }
            });
        });
        Ok(out)
    }

    pub fn scale(&self, a: &Tensor<E>, factor: E) -> Tensor<E> {
        let data = a.with_data(|x| x.iter().map(|v| *v * factor).collect::<Vec<_>>());
        let needs = a.needs_grad();
        let out = Tensor::result(a.shape().to_vec(), data, self.enabled && needs);
        let (a2, o2) = (a.clone(), out.clone());
        self.record_if(needs, move || {
            o2.with_grad(|g| {
                let c: Vec<E> = g.iter().map(|v| *v * factor).collect();
                a2.accumulate_grad(&c);
            });
        });
        out
    }

    pub fn relu(&self, a: &Tensor<E>) -> Tensor<E> {
        let data = a.with_data(|x| x.iter().map(|v| v.maximum(E::ZERO)).collect::<Vec<_>>());
        let needs = a.needs_grad();
        let out = Tensor::result(a.shape().to_vec(), data, self.enabled && needs);
        let (a2, o2) = (a.clone(), out.clone());
        self.record_if(needs, move || {
            o2.with_grad(|g| {
                let c: Vec<E> = a2.with_data(|x| {
                    g.iter()
                        .zip(x)
                        .map(|(gv, xv)| if *xv > E::ZERO { *gv } else { E::ZERO })
                        .collect()
                });
                a2.accumulate_grad(&c);
            });
        });
        out
    }

    pub fn abs(&self, a: &Tensor<E>) -> Tensor<E> {
        let data = a.with_data(|x| x.iter().map(|v| v.abs()).collect::<Vec<_>>());
        let needs = a.needs_grad();
        let out = Tensor::result(a.shape().to_vec(), data, self.enabled && needs);
        let (a2, o2) = (a.clone(), out.clone());
        self.record_if(needs, move || {
            o2.with_grad(|g| {
                let c: Vec<E> = a2.with_data(|x| {
                    g.iter()
                        .zip(x)
                        .map(|(gv, xv)| {
                            if *xv > E::ZERO {
                                *gv
                            } else if *xv < E::ZERO {
                                -*gv
                            } else {
                                E::ZERO
                            }
                        })
                        .collect()
                });
                a2.accumulate_grad(&c);
            });
        });
        out
    }

    pub fn sum_all(&self, a: &Tensor<E>) -> Tensor<E> {
        let s = a.with_data(|x| x.iter().fold(E::ZERO, |acc, v| acc + *v));
        let needs = a.needs_grad();
        let out = Tensor::result(vec![], vec![s], self.enabled && needs);
        let (a2, o2) = (a.clone(), out.clone());
        self.record_if(needs, move || {
            o2.with_grad(|g| {
                let c = vec![g[0]; a2.numel()];
                a2.accumulate_grad(&c);
            });
        });
        out
    }

    pub fn mean_all(&self, a: &Tensor<E>) -> Tensor<E> {
        let n = E::from_f64(a.numel() as f64);
        let s = self.sum_all(a);
        self.scale(&s, E::ONE / n)
    }

    /// Numerically safe softmax over one axis (max subtraction).
    pub fn softmax(&self, a: &Tensor<E>, axis: usize) -> Result<Tensor<E>> {
        if axis >= a.shape().len() {
            return Err(shape_err(
                "softmax",
                format!("axis {} out of range for shape {:?}", axis, a.shape()),
            ));
        }
        let (outer, len, inner) = axis_split(a.shape(), axis);
        let mut data = a.to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = data[base];
                for l in 1..len {
                    mx = mx.maximum(data[base + l * inner]);
                }
                let mut sum = E::ZERO;
                for l in 0..len {
                    let e = (data[base + l * inner] - mx).exp();
                    data[base + l * inner] = e;
                    sum = sum + e;
                }
                for l in 0..len {
                    data[base + l * inner] = data[base + l * inner] / sum;
                }
            }
        }
        let needs = a.needs_grad();
        let out = Tensor::result(a.shape().to_vec(), data, self.enabled && needs);
        let (a2, o2) = (a.clone(), out.clone());
        self.record_if(needs, move || {
            o2.with_grad(|g| {
                let y = o2.to_vec();
                let mut dx = vec![E::ZERO; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = E::ZERO;
                        for l in 0..len {
                            let idx = base + l * inner;
                            dot = dot + g[idx] * y[idx];
                        }
                        for l in 0..len {
                            let idx = base + l * inner;
                            dx[idx] = y[idx] * (g[idx] - dot);
                        }
                    }
                }
                a2.accumulate_grad(&dx);
            });
        });
        Ok(out)
    }

    /// Normalize over the leading (channel) axis at every trailing position.
    /// `gamma`/`beta` have the channel extent.
    pub fn layer_norm(
        &self,
        x: &Tensor<E>,
        gamma: &Tensor<E>,
        beta: &Tensor<E>,
        eps: f64,
    ) -> Result<Tensor<E>> {
        let c = *x
            .shape()
            .first()
            .ok_or_else(|| shape_err("layer_norm", "input must have a channel axis".to_string()))?;
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "gamma {:?} / beta {:?} must be [{}]",
                    gamma.shape(),
                    beta.shape(),
                    c
                ),
            ));
        }
        let inner: usize = x.shape()[1..].iter().product();
        let eps = E::from_f64(eps);
        let nf = E::from_f64(c as f64);

        let xv = x.to_vec();
        let gv = gamma.to_vec();
        let bv = beta.to_vec();
        let mut out_data = vec![E::ZERO; xv.len()];
        let mut xhat = vec![E::ZERO; xv.len()];
        let mut inv_std = vec![E::ZERO; inner];
        for j in 0..inner {
            let mut mean = E::ZERO;
            for ch in 0..c {
                mean = mean + xv[ch * inner + j];
            }
            mean = mean / nf;
            let mut var = E::ZERO;
            for ch in 0..c {
                let d = xv[ch * inner + j] - mean;
                var = var + d * d;
            }
            var = var / nf;
            let istd = E::ONE / (var + eps).sqrt();
            inv_std[j] = istd;
            for ch in 0..c {
                let h = (xv[ch * inner + j] - mean) * istd;
                xhat[ch * inner + j] = h;
                out_data[ch * inner + j] = gv[ch] * h + bv[ch];
            }
        }

        let needs = x.needs_grad() || gamma.needs_grad() || beta.needs_grad();
        let out = Tensor::result(x.shape().to_vec(), out_data, self.enabled && needs);
        let (x2, g2, b2, o2) = (x.clone(), gamma.clone(), beta.clone(), out.clone());
        self.record_if(needs, move || {
            o2.with_grad(|g| {
                if b2.needs_grad() {
                    let mut db = vec![E::ZERO; c];
                    for ch in 0..c {
                        for j in 0..inner {
                            db[ch] = db[ch] + g[ch * inner + j];
                        }
                    }
                    b2.accumulate_grad(&db);
                }
                if g2.needs_grad() {
                    let mut dg = vec![E::ZERO; c];
                    for ch in 0..c {
                        for j in 0..inner {
                            dg[ch] = dg[ch] + g[ch * inner + j] * xhat[ch * inner + j];
                        }
                    }
                    g2.accumulate_grad(&dg);
                }
                if x2.needs_grad() {
                    let mut dx = vec![E::ZERO; g.len()];
                    for j in 0..inner {
                        let mut sum_dh = E::ZERO;
                        let mut sum_dh_h = E::ZERO;
                        for ch in 0..c {
                            let dh = g[ch * inner + j] * gv[ch];
                            sum_dh = sum_dh + dh;
                            sum_dh_h = sum_dh_h + dh * xhat[ch * inner + j];
                        }
                        let istd = inv_std[j];
                        for ch in 0..c {
                            let dh = g[ch * inner + j] * gv[ch];
                            dx[ch * inner + j] = istd
                                * (dh - sum_dh / nf - xhat[ch * inner + j] * sum_dh_h / nf);
                        }
                    }
                    x2.accumulate_grad(&dx);
                }
            });
        });
        Ok(out)
    }

    /// Per-channel normalization over the spatial extent of a [C,H,W] map.
    pub fn instance_norm(
        &self,
        x: &Tensor<E>,
        gamma: &Tensor<E>,
        beta: &Tensor<E>,
        eps: f64,
    ) -> Result<Tensor<E>> {
        if x.shape().len() != 3 {
            return Err(shape_err(
                "instance_norm",
                format!("expected [C,H,W], got {:?}", x.shape()),
            ));
        }
        let c = x.shape()[0];
        let sp = x.shape()[1] * x.shape()[2];
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(shape_err(
                "instance_norm",
                format!("gamma/beta must be [{}]", c),
            ));
        }
        let eps = E::from_f64(eps);
        let nf = E::from_f64(sp as f64);

        let xv = x.to_vec();
        let gv = gamma.to_vec();
        let bv = beta.to_vec();
        let mut out_data = vec![E::ZERO; xv.len()];
        let mut xhat = vec![E::ZERO; xv.len()];
        let mut inv_std = vec![E::ZERO; c];
        for ch in 0..c {
            let plane = &xv[ch * sp..(ch + 1) * sp];
            let mut mean = E::ZERO;
            for v in plane {
                mean = mean + *v;
            }
            mean = mean / nf;
            let mut var = E::ZERO;
            for v in plane {
                let d = *v - mean;
                var = var + d * d;
            }
            var = var / nf;
            let istd = E::ONE / (var + eps).sqrt();
            inv_std[ch] = istd;
            for j in 0..sp {
                let h = (plane[j] - mean) * istd;
                xhat[ch * sp + j] = h;
                out_data[ch * sp + j] = gv[ch] * h + bv[ch];
            }
        }

        let needs = x.needs_grad() || gamma.needs_grad() || beta.needs_grad();
        let out = Tensor::result(x.shape().to_vec(), out_data, self.enabled && needs);
        let (x2, g2, b2, o2) = (x.clone(), gamma.clone(), beta.clone(), out.clone());
        self.record_if(needs, move || {
            o2.with_grad(|g| {
                if b2.needs_grad() {
                    let mut db = vec![E::ZERO; c];
                    for ch in 0..c {
                        for j in 0..sp {
                            db[ch] = db[ch] + g[ch * sp + j];
                        }
                    }
                    b2.accumulate_grad(&db);
                }
                if g2.needs_grad() {
                    let mut dg = vec![E::ZERO; c];
                    for ch in 0..c {
                        for j in 0..sp {
                            dg[ch] = dg[ch] + g[ch * sp + j] * xhat[ch * sp + j];
                        }
                    }
                    g2.accumulate_grad(&dg);
                }
                if x2.needs_grad() {
                    let mut dx = vec![E::ZERO; g.len()];
                    for ch in 0..c {
                        let mut sum_dh = E::ZERO;
                        let mut sum_dh_h = E::ZERO;
                        for j in 0..sp {
                            let dh = g[ch * sp + j] * gv[ch];
                            sum_dh = sum_dh + dh;
                            sum_dh_h = sum_dh_h + dh * xhat[ch * sp + j];
                        }
                        let istd = inv_std[ch];
                        for j in 0..sp {
                            let dh = g[ch * sp + j] * gv[ch];
                            dx[ch * sp + j] =
                                istd * (dh - sum_dh / nf - xhat[ch * sp + j] * sum_dh_h / nf);
                        }
                    }
                    x2.accumulate_grad(&dx);
                }
            });
        });
        Ok(out)
    }

    pub fn concat(&self, parts: &[&Tensor<E>], axis: usize) -> Result<Tensor<E>> {
        if parts.is_empty() {
            return Err(shape_err("concat", "no operands".to_string()));
        }
        let rank = parts[0].shape().len();
        if axis >= rank {
            return Err(shape_err(
                "concat",
                format!("axis {} out of range for rank {}", axis, rank),
            ));
        }
        for p in parts.iter().skip(1) {
            if p.shape().len() != rank
                || p.shape()[..axis] != parts[0].shape()[..axis]
                || p.shape()[axis + 1..] != parts[0].shape()[axis + 1..]
            {
                return Err(shape_err(
                    "concat",
                    format!(
                        "incompatible shapes {:?} vs {:?} on axis {}",
                        parts[0].shape(),
                        p.shape(),
                        axis
                    ),
                ));
            }
        }
        let (outer, _, inner) = axis_split(parts[0].shape(), axis);
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut shape = parts[0].shape().to_vec();
        shape[axis] = total;

        let mut data = vec![E::ZERO; outer * total * inner];
        for o in 0..outer {
            let mut off = 0;
            for (p, len) in parts.iter().zip(&lens) {
                p.with_data(|src| {
                    let blk = len * inner;
                    data[(o * total + off) * inner..(o * total + off) * inner + blk]
                        .copy_from_slice(&src[o * blk..(o + 1) * blk]);
                });
                off += len;
            }
        }

        let needs = parts.iter().any(|p| p.needs_grad());
        let out = Tensor::result(shape, data, self.enabled && needs);
        let parts2: Vec<Tensor<E>> = parts.iter().map(|p| (*p).clone()).collect();
        let o2 = out.clone();
        self.record_if(needs, move || {
            o2.with_grad(|g| {
                let mut off = 0;
                for (p, len) in parts2.iter().zip(&lens) {
                    if p.needs_grad() {
                        let blk = len * inner;
                        let mut gp = vec![E::ZERO; outer * blk];
                        for o in 0..outer {
                            gp[o * blk..(o + 1) * blk].copy_from_slice(
                                &g[(o * total + off) * inner..(o * total + off) * inner + blk],
                            );
                        }
                        p.accumulate_grad(&gp);
                    }
                    off += len;
                }
            });
        });
        Ok(out)
    }

    pub fn reshape(&self, a: &Tensor<E>, shape: &[usize]) -> Result<Tensor<E>> {
        let numel: usize = shape.iter().product();
        if numel != a.numel() {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {:?} changes element count", a.shape(), shape),
            ));
        }
        let needs = a.needs_grad();
        let out = Tensor::result(shape.to_vec(), a.to_vec(), self.enabled && needs);
        let (a2, o2) = (a.clone(), out.clone());
        self.record_if(needs, move || {
            o2.with_grad(|g| a2.accumulate_grad(g));
        });
        Ok(out)
    }

    /// Cross-correlation with zero padding. input [C,H,W], weight [O,C,k,k].
    pub fn conv2d(
        &self,
        input: &Tensor<E>,
        weight: &Tensor<E>,
        bias: Option<&Tensor<E>>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<E>> {
        let ishape = input.shape();
        let wshape = weight.shape();
        if ishape.len() != 3 || wshape.len() != 4 {
            return Err(shape_err(
                "conv2d",
                format!("input {:?} (want [C,H,W]), weight {:?} (want [O,C,k,k])", ishape, wshape),
            ));
        }
        let (c, h, w) = (ishape[0], ishape[1], ishape[2]);
        let (o, wc, k, k2) = (wshape[0], wshape[1], wshape[2], wshape[3]);
        if k != k2 || k % 2 == 0 {
            return Err(FlowError::Config(format!("conv2d kernel must be square and odd, got {}x{}", k, k2)));
        }
        if wc != c {
            return Err(shape_err(
                "conv2d",
                format!("input channels {} vs weight channels {}", c, wc),
            ));
        }
        if let Some(b) = bias {
            if b.shape() != [o] {
                return Err(shape_err(
                    "conv2d",
                    format!("bias {:?} must be [{}]", b.shape(), o),
                ));
            }
        }
        if stride == 0 {
            return Err(FlowError::Config("conv2d stride must be >= 1".into()));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(shape_err(
                "conv2d",
                format!("kernel {} larger than padded input {}x{}", k, h + 2 * pad, w + 2 * pad),
            ));
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let n = oh * ow;
        let ckk = c * k * k;
        let pointwise = k == 1 && stride == 1 && pad == 0;

        let wv = weight.to_vec();
        let mut out_data = match bias {
            Some(b) => {
                let bv = b.to_vec();
                let mut d = vec![E::ZERO; o * n];
                for (oc, bo) in bv.iter().enumerate() {
                    d[oc * n..(oc + 1) * n].fill(*bo);
                }
                d
            }
            None => vec![E::ZERO; o * n],
        };
        // col is only materialized for spatial kernels; 1x1 uses input directly
        let col: Vec<E> = if pointwise {
            Vec::new()
        } else {
            input.with_data(|iv| im2col(iv, c, h, w, k, stride, pad, oh, ow))
        };
        if pointwise {
            input.with_data(|iv| gemm_nn(&wv, iv, &mut out_data, o, ckk, n));
        } else {
            gemm_nn(&wv, &col, &mut out_data, o, ckk, n);
        }

        let needs =
            input.needs_grad() || weight.needs_grad() || bias.map_or(false, |b| b.needs_grad());
        let out = Tensor::result(vec![o, oh, ow], out_data, self.enabled && needs);
        let (in2, w2, o2) = (input.clone(), weight.clone(), out.clone());
        let b2 = bias.cloned();
        self.record_if(needs, move || {
            o2.with_grad(|g| {
                if let Some(b) = &b2 {
                    if b.needs_grad() {
                        let mut db = vec![E::ZERO; o];
                        for oc in 0..o {
                            for j in 0..n {
                                db[oc] = db[oc] + g[oc * n + j];
                            }
                        }
                        b.accumulate_grad(&db);
                    }
                }
                if w2.needs_grad() {
                    let mut dw = vec![E::ZERO; o * ckk];
                    if pointwise {
                        in2.with_data(|iv| gemm_nt(g, iv, &mut dw, o, n, ckk));
                    } else {
                        gemm_nt(g, &col, &mut dw, o, n, ckk);
                    }
                    w2.accumulate_grad(&dw);
                }
                if in2.needs_grad() {
                    let wv = w2.to_vec();
                    let mut dcol = vec![E::ZERO; ckk * n];
                    gemm_tn(&wv, g, &mut dcol, ckk, o, n);
                    if pointwise {
                        in2.accumulate_grad(&dcol);
                    } else {
                        let mut dinput = vec![E::ZERO; c * h * w];
                        col2im_add(&dcol, &mut dinput, c, h, w, k, stride, pad, oh, ow);
                        in2.accumulate_grad(&dinput);
                    }
                }
            });
        });
        Ok(out)
    }

    /// Bilinear resampling of a [C,H,W] map to `oh` x `ow` (half-pixel centers,
    /// edge clamped). Flow-value rescaling is the caller's responsibility.
    pub fn bilinear_resize(&self, a: &Tensor<E>, oh: usize, ow: usize) -> Result<Tensor<E>> {
        let s = a.shape();
        if s.len() != 3 {
            return Err(shape_err(
                "bilinear_resize",
                format!("expected [C,H,W], got {:?}", s),
            ));
        }
        if oh == 0 || ow == 0 {
            return Err(FlowError::Config("bilinear_resize target must be non-empty".into()));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        // tap = (src_lo, src_hi, weight_hi)
        let taps_1d = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
            (0..n_out)
                .map(|d| {
                    let src = ((d as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5)
                        .clamp(0.0, (n_in - 1) as f64);
                    let lo = src.floor() as usize;
                    let hi = (lo + 1).min(n_in - 1);
                    (lo, hi, src - lo as f64)
                })
                .collect()
        };
        let ty = taps_1d(h, oh);
        let tx = taps_1d(w, ow);

        let av = a.to_vec();
        let mut out_data = vec![E::ZERO; c * oh * ow];
        for ch in 0..c {
            let plane = &av[ch * h * w..(ch + 1) * h * w];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let v00 = plane[y0 * w + x0].to_f64();
                    let v01 = plane[y0 * w + x1].to_f64();
                    let v10 = plane[y1 * w + x0].to_f64();
                    let v11 = plane[y1 * w + x1].to_f64();
                    let v = v00 * (1.0 - fy) * (1.0 - fx)
                        + v01 * (1.0 - fy) * fx
                        + v10 * fy * (1.0 - fx)
                        + v11 * fy * fx;
                    out_data[ch * oh * ow + oy * ow + ox] = E::from_f64(v);
                }
            }
        }

        let needs = a.needs_grad();
        let out = Tensor::result(vec![c, oh, ow], out_data, self.enabled && needs);
        let (a2, o2) = (a.clone(), out.clone());
        self.record_if(needs, move || {
            o2.with_grad(|g| {
                let mut dx = vec![E::ZERO; c * h * w];
                for ch in 0..c {
                    let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
                    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                            let gv = g[ch * oh * ow + oy * ow + ox].to_f64();
                            plane[y0 * w + x0] = plane[y0 * w + x0]
                                + E::from_f64(gv * (1.0 - fy) * (1.0 - fx));
                            plane[y0 * w + x1] =
                                plane[y0 * w + x1] + E::from_f64(gv * (1.0 - fy) * fx);
                            plane[y1 * w + x0] =
                                plane[y1 * w + x0] + E::from_f64(gv * fy * (1.0 - fx));
                            plane[y1 * w + x1] = plane[y1 * w + x1] + E::from_f64(gv * fy * fx);
                        }
                    }
                }
                a2.accumulate_grad(&dx);
            });
        });
        Ok(out)
    }

    /// Non-overlapping k x k mean pooling of a [C,H,W] map.
    pub fn avg_downsample(&self, a: &Tensor<E>, k: usize) -> Result<Tensor<E>> {
        let s = a.shape();
        if s.len() != 3 {
            return Err(shape_err(
                "avg_downsample",
                format!("expected [C,H,W], got {:?}", s),
            ));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(FlowError::Config(format!(
                "avg_downsample: {}x{} not divisible by factor {}",
                h, w, k
            )));
        }
        let (oh, ow) = (h / k, w / k);
        let inv = E::ONE / E::from_f64((k * k) as f64);
        let av = a.to_vec();
        let mut out_data = vec![E::ZERO; c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = E::ZERO;
                    for dy in 0..k {
                        for dxx in 0..k {
                            acc = acc + av[ch * h * w + (oy * k + dy) * w + ox * k + dxx];
                        }
                    }
                    out_data[ch * oh * ow + oy * ow + ox] = acc * inv;
                }
            }
        }
        let needs = a.needs_grad();
        let out = Tensor::result(vec![c, oh, ow], out_data, self.enabled && needs);
        let (a2, o2) = (a.clone(), out.clone());
        self.record_if(needs, move || {
            o2.with_grad(|g| {
                let mut dx = vec![E::ZERO; c * h * w];
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g[ch * oh * ow + oy * ow + ox] * inv;
                            for dy in 0..k {
                                for dxx in 0..k {
                                    let idx = ch * h * w + (oy * k + dy) * w + ox * k + dxx;
                                    dx[idx] = dx[idx] + gv;
                                }
                            }
                        }
                    }
                }
                a2.accumulate_grad(&dx);
            });
        });
        Ok(out)
    }

    /// Mean L1 distance between two same-shape tensors, as a scalar.
    pub fn l1_loss(&self, pred: &Tensor<E>, target: &Tensor<E>) -> Result<Tensor<E>> {
        let d = self.sub(pred, target)?;
        let a = self.abs(&d);
        Ok(self.mean_all(&a))
    }
}
