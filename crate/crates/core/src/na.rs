//! Neighborhood attention: query-centered local attention maps, their
//! aggregation, and the 2-block NAT context transformer used by TCU.
//!
//! Windows stay centered on the query whenever possible and are shifted
//! inward at the borders; keys are never zero-filled.

use rand::Rng;

use crate::error::{FlowError, Result};
use crate::init;
use crate::tensor::{Elem, PaddingPolicy, Tape, Tensor};
use crate::upsample::LocalAttentionMaps;

/// Softmax-normalized local attention maps from multi-head Q/K.
///
/// `q`,`k`: [heads, d, h, w]; optional relative-position bias
/// [heads, B, B] with odd B >= 2m-1. Output masks are [heads, m, m, h, w].
pub fn na_maps<E: Elem>(
    tape: &Tape<E>,
    m: usize,
    q: &Tensor<E>,
    k: &Tensor<E>,
    rel_bias: Option<&Tensor<E>>,
) -> Result<LocalAttentionMaps<E>> {
    let logits = tape.na_logits(q, k, rel_bias, m)?;
    let soft = tape.softmax(&logits, 1)?;
    let s = q.shape();
    let weights = tape.reshape(&soft, &[s[0], m, m, s[2], s[3]])?;
    LocalAttentionMaps::new(weights, PaddingPolicy::Clamp)
}

/// One pre-norm transformer block with neighborhood attention:
/// x + Attn(LN(x)) followed by + MLP(LN(.)), shapes preserved.
pub struct NatBlock<E> {
    pub ln1_gamma: Tensor<E>,
    pub ln1_beta: Tensor<E>,
    pub w_q: Tensor<E>,
    pub w_k: Tensor<E>,
    pub w_v: Tensor<E>,
    pub rel_bias: Option<Tensor<E>>,
    pub w_out: Tensor<E>,
    pub b_out: Tensor<E>,
    pub ln2_gamma: Tensor<E>,
    pub ln2_beta: Tensor<E>,
    pub w_mlp1: Tensor<E>,
    pub b_mlp1: Tensor<E>,
    pub w_mlp2: Tensor<E>,
    pub b_mlp2: Tensor<E>,
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
}

pub const MLP_EXPANSION: usize = 4;

impl<E: Elem> NatBlock<E> {
    /// `head_dim` divides `dim`; `window` is odd. The attention and MLP
    /// output projections start at zero so a fresh block is the identity.
    pub fn new(
        dim: usize,
        head_dim: usize,
        window: usize,
        use_rel_bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if head_dim == 0 || dim % head_dim != 0 {
            return Err(FlowError::Config(format!(
                "dim {} not divisible by head dim {}",
                dim, head_dim
            )));
        }
        if window % 2 == 0 {
            return Err(FlowError::Config(format!("window must be odd, got {}", window)));
        }
        let heads = dim / head_dim;
        let hidden = MLP_EXPANSION * dim;
        Ok(NatBlock {
            ln1_gamma: init::ones_param(&[dim]),
            ln1_beta: init::zeros_param(&[dim]),
            w_q: init::conv_weight(dim, dim, 1, rng),
            w_k: init::conv_weight(dim, dim, 1, rng),
            w_v: init::conv_weight(dim, dim, 1, rng),
            rel_bias: use_rel_bias
                .then(|| init::zeros_param(&[heads, 2 * window - 1, 2 * window - 1])),
            w_out: init::zeros_param(&[dim, dim, 1, 1]),
            b_out: init::zeros_param(&[dim]),
            ln2_gamma: init::ones_param(&[dim]),
            ln2_beta: init::zeros_param(&[dim]),
            w_mlp1: init::conv_weight(hidden, dim, 1, rng),
            b_mlp1: init::conv_bias(hidden, dim, 1, rng),
            w_mlp2: init::zeros_param(&[dim, hidden, 1, 1]),
            b_mlp2: init::zeros_param(&[dim]),
            dim,
            heads,
            window,
        })
    }

    pub fn forward(&self, tape: &Tape<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
        let s = x.shape();
        if s.len() != 3 || s[0] != self.dim {
            return Err(FlowError::Shape {
                op: "nat_block",
                detail: format!("expected [{},h,w], got {:?}", self.dim, s),
            });
        }
        let (h, w) = (s[1], s[2]);
        let head_dim = self.dim / self.heads;
        // shrink the window on maps smaller than the configured size
        let m = effective_window(self.window, h, w)?;

        let n1 = tape.layer_norm(x, &self.ln1_gamma, &self.ln1_beta, 1e-5)?;
        let q = tape.conv2d(&n1, &self.w_q, None, 1, 0)?;
        let k = tape.conv2d(&n1, &self.w_k, None, 1, 0)?;
        let v = tape.conv2d(&n1, &self.w_v, None, 1, 0)?;
        let qh = tape.reshape(&q, &[self.heads, head_dim, h, w])?;
        let kh = tape.reshape(&k, &[self.heads, head_dim, h, w])?;
        let vh = tape.reshape(&v, &[self.heads, head_dim, h, w])?;
        let maps = na_maps(tape, m, &qh, &kh, self.rel_bias.as_ref())?;
        let agg = tape.na_aggregate(&maps.weights, &vh)?;
        let merged = tape.reshape(&agg, &[self.dim, h, w])?;
        let proj = tape.conv2d(&merged, &self.w_out, Some(&self.b_out), 1, 0)?;
        let x1 = tape.add(x, &proj)?;

        let n2 = tape.layer_norm(&x1, &self.ln2_gamma, &self.ln2_beta, 1e-5)?;
        let m1 = tape.conv2d(&n2, &self.w_mlp1, Some(&self.b_mlp1), 1, 0)?;
        let act = tape.relu(&m1);
        let m2 = tape.conv2d(&act, &self.w_mlp2, Some(&self.b_mlp2), 1, 0)?;
        tape.add(&x1, &m2)
    }

    pub fn parameters(&self, prefix: &str) -> Vec<(String, Tensor<E>)> {
        let mut ps = vec![
            (format!("{prefix}.ln1.gamma"), self.ln1_gamma.clone()),
            (format!("{prefix}.ln1.beta"), self.ln1_beta.clone()),
            (format!("{prefix}.q.weight"), self.w_q.clone()),
            (format!("{prefix}.k.weight"), self.w_k.clone()),
            (format!("{prefix}.v.weight"), self.w_v.clone()),
            (format!("{prefix}.out.weight"), self.w_out.clone()),
            (format!("{prefix}.out.bias"), self.b_out.clone()),
            (format!("{prefix}.ln2.gamma"), self.ln2_gamma.clone()),
            (format!("{prefix}.ln2.beta"), self.ln2_beta.clone()),
            (format!("{prefix}.mlp1.weight"), self.w_mlp1.clone()),
            (format!("{prefix}.mlp1.bias"), self.b_mlp1.clone()),
            (format!("{prefix}.mlp2.weight"), self.w_mlp2.clone()),
            (format!("{prefix}.mlp2.bias"), self.b_mlp2.clone()),
        ];
        if let Some(rb) = &self.rel_bias {
            ps.push((format!("{prefix}.rel_bias"), rb.clone()));
        }
        ps
    }
}

/// Largest odd window <= the configured size that fits the map.
pub fn effective_window(m: usize, h: usize, w: usize) -> Result<usize> {
    let cap = h.min(w);
    if cap == 0 {
        return Err(FlowError::Config("empty spatial extent".into()));
    }
    let mut eff = m.min(cap);
    if eff % 2 == 0 {
        eff -= 1;
    }
    Ok(eff)
}
