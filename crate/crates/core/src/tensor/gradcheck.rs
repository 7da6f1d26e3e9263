//! Central finite-difference gradient verification.
//!
//! The numeric side is an oracle that never touches the backward pass: it
//! re-runs the forward function on perturbed inputs and differences the
//! results. Checks run in f64 with eps 1e-5.

use super::{grad_or_zeros, Elem, Tape, Tensor};
use crate::error::Result;

pub const EPS: f64 = 1e-5;

/// Relative-error floor: differences below this magnitude are compared
/// absolutely, which keeps finite-difference noise out of the ratio.
const REL_FLOOR: f64 = 1e-3;

/// Forward function under test: builds its graph on the given tape.
pub type ForwardFn = dyn Fn(&Tape<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>>;

/// Deterministic weights used to reduce a tensor output to a scalar, so that
/// every output element influences the check.
fn probe_weights(n: usize) -> Vec<f64> {
    let mut state = 0x9e3779b97f4a7c15u64;
    (0..n)
        .map(|_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f64 / (1u64 << 31) as f64) - 0.5
        })
        .collect()
}

fn scalar_probe(tape: &Tape<f64>, out: &Tensor<f64>) -> Result<Tensor<f64>> {
    let w = Tensor::new(out.shape(), probe_weights(out.numel()))?;
    let prod = tape.mul(out, &w)?;
    Ok(tape.sum_all(&prod))
}

fn forward_scalar(f: &ForwardFn, inputs: &[Tensor<f64>]) -> Result<f64> {
    let tape = Tape::no_grad();
    let out = f(&tape, inputs)?;
    let w = probe_weights(out.numel());
    Ok(out.with_data(|d| d.iter().zip(&w).map(|(a, b)| a * b).sum()))
}

/// Compare analytic gradients of `f` against central differences for every
/// element of every input. Returns the maximum relative error.
pub fn max_rel_error(inputs: &[Tensor<f64>], f: &ForwardFn) -> Result<f64> {
    max_rel_error_eps(inputs, f, EPS)
}

/// As `max_rel_error`, but with a smoothness guard for deep compositions:
/// the numeric derivative is estimated at two step sizes, and elements where
/// the two estimates disagree are excluded — there the forward function is
/// locally non-smooth (a rectification kink or a degenerate normalization
/// sits within the probe step) and central differences are not a valid
/// oracle. The guard never consults the analytic gradient, so it cannot hide
/// a wrong backward pass at smooth points.
pub fn max_rel_error_guarded(inputs: &[Tensor<f64>], f: &ForwardFn) -> Result<f64> {
    max_rel_error_impl(inputs, f, EPS, true)
}

pub fn max_rel_error_eps(inputs: &[Tensor<f64>], f: &ForwardFn, eps: f64) -> Result<f64> {
    max_rel_error_impl(inputs, f, eps, false)
}

fn max_rel_error_impl(
    inputs: &[Tensor<f64>],
    f: &ForwardFn,
    eps: f64,
    guard: bool,
) -> Result<f64> {
    // analytic pass
    for t in inputs {
        t.zero_grad();
    }
    let tape = Tape::new();
    let out = f(&tape, inputs)?;
    let loss = scalar_probe(&tape, &out)?;
    tape.backward(&loss)?;
    let analytic: Vec<Vec<f64>> = inputs.iter().map(grad_or_zeros).collect();

    let mut worst = 0.0f64;
    for (t, grads) in inputs.iter().zip(&analytic) {
        let base = t.to_vec();
        for i in 0..base.len() {
            let diff = |step: f64| -> Result<f64> {
                let mut plus = base.clone();
                plus[i] += step;
                t.set_data(&plus)?;
                let fp = forward_scalar(f, inputs)?;
                let mut minus = base.clone();
                minus[i] -= step;
                t.set_data(&minus)?;
                let fm = forward_scalar(f, inputs)?;
                Ok((fp - fm) / (2.0 * step))
            };
            let mut numeric = diff(eps)?;
            if guard {
                let finer = diff(eps / 4.0)?;
                t.set_data(&base)?;
                let spread =
                    (numeric - finer).abs() / numeric.abs().max(finer.abs()).max(REL_FLOOR);
                if spread > 1e-6 {
                    continue; // locally non-smooth: the oracle is invalid here
                }
                numeric = finer;
            } else {
                t.set_data(&base)?;
            }
            let a = grads[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max(rel);
        }
    }
    for t in inputs {
        t.zero_grad();
    }
    Ok(worst)
}

/// Deterministic pseudo-random f64 values in (-0.5, 0.5), offset away from
/// zero so kinked ops (relu, abs) are checked off their non-differentiable
/// points.
pub fn smooth_random(n: usize, seed: u64) -> Vec<f64> {
    let mut state = seed.wrapping_mul(0x2545F4914F6CDD1D).wrapping_add(1);
    (0..n)
        .map(|_| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            let v = ((state >> 11) as f64 / (1u64 << 53) as f64) - 0.5;
            // keep |v| >= 0.05 so +-eps never crosses a kink
            if v >= 0.0 {
                v + 0.05
            } else {
                v - 0.05
            }
        })
        .collect()
}

/// Random parameter tensor for checks.
pub fn rand_param<E: Elem>(shape: &[usize], seed: u64) -> Tensor<E> {
    let n: usize = shape.iter().product();
    let data = smooth_random(n, seed)
        .into_iter()
        .map(E::from_f64)
        .collect();
    Tensor::param(shape, data).expect("shape/data consistent by construction")
}
