//! Flat-buffer compute kernels. Loop orders are chosen so the innermost loop
//! runs over contiguous memory and autovectorizes.

use super::Elem;

/// C[m,n] += A[m,k] * B[k,n]
pub fn gemm_nn<E: Elem>(a: &[E], b: &[E], c: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let ci = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let br = &b[p * n..(p + 1) * n];
            for j in 0..n {
                ci[j] = ci[j] + av * br[j];
            }
        }
    }
}

/// C[m,n] += A[m,k] * B[n,k]^T  (row-dot-row; contiguous in k)
pub fn gemm_nt<E: Elem>(a: &[E], b: &[E], c: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let br = &b[j * k..(j + 1) * k];
            let mut s = E::ZERO;
            for p in 0..k {
                s = s + ar[p] * br[p];
            }
            c[i * n + j] = c[i * n + j] + s;
        }
    }
}

/// C[m,n] += A[k,m]^T * B[k,n]
pub fn gemm_tn<E: Elem>(a: &[E], b: &[E], c: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let ci = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[p * m + i];
            let br = &b[p * n..(p + 1) * n];
            for j in 0..n {
                ci[j] = ci[j] + av * br[j];
            }
        }
    }
}

/// Unfold input[C,H,W] into col[C*k*k, OH*OW] for cross-correlation with
/// zero padding. Column (oy,ow) holds the receptive field of output (oy,ox).
#[allow(clippy::too_many_arguments)]
pub fn im2col<E: Elem>(
    input: &[E],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<E> {
    let mut col = vec![E::ZERO; c * k * k * oh * ow];
    for ch in 0..c {
        let plane = &input[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ch * k + ky) * k + kx) * oh * ow..][..oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add a col buffer back onto the input layout (conv2d backward).
#[allow(clippy::too_many_arguments)]
pub fn col2im_add<E: Elem>(
    col: &[E],
    grad_input: &mut [E],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    for ch in 0..c {
        let plane = &mut grad_input[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ch * k + ky) * k + kx) * oh * ow..][..oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            let idx = iy as usize * w + ix as usize;
                            plane[idx] = plane[idx] + row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.3 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| i as f64 * 0.1 + 0.5).collect();
        let mut c0 = vec![0.0; m * n];
        gemm_nn(&a, &b, &mut c0, m, k, n);

        // transpose b to [n,k] and use nt
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c1 = vec![0.0; m * n];
        gemm_nt(&a, &bt, &mut c1, m, k, n);

        // transpose a to [k,m] and use tn
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut c2 = vec![0.0; m * n];
        gemm_tn(&at, &b, &mut c2, m, k, n);

        for i in 0..m * n {
            assert!((c0[i] - c1[i]).abs() < 1e-12);
            assert!((c0[i] - c2[i]).abs() < 1e-12);
        }
    }
}
