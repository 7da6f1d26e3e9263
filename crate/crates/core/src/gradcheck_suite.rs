//! Named 64-bit finite-difference checks for every differentiable op plus
//! the composite blocks (mask predictor, NAT block, reduced attention
//! upsampling step, context encoder). Shared by the CLI `gradcheck`
//! subcommand and the acceptance tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::na::NatBlock;
use crate::tcu::{ContextEncoder, TcuUpsampler, UpsamplerConfig};
use crate::tensor::gradcheck::{max_rel_error, max_rel_error_guarded, rand_param};
use crate::tensor::{PaddingPolicy, Tensor};
use crate::upsample::MaskPredictor;

pub const TOLERANCE: f64 = 1e-5;

type CheckFn = Box<dyn Fn() -> Result<f64>>;

pub struct Check {
    pub name: &'static str,
    pub run: CheckFn,
}

fn check(name: &'static str, run: impl Fn() -> Result<f64> + 'static) -> Check {
    Check {
        name,
        run: Box::new(run),
    }
}

/// The full registry. Each entry returns its max relative error.
pub fn all_checks() -> Vec<Check> {
    vec![
        check("add", || {
            let a = rand_param::<f64>(&[3, 4], 1);
            let b = rand_param::<f64>(&[3, 4], 2);
            max_rel_error(&[a.clone(), b.clone()], &move |t, i| t.add(&i[0], &i[1]))
        }),
        check("sub", || {
            let a = rand_param::<f64>(&[3, 4], 3);
            let b = rand_param::<f64>(&[3, 4], 4);
            max_rel_error(&[a, b], &|t, i| t.sub(&i[0], &i[1]))
        }),
        check("mul", || {
            let a = rand_param::<f64>(&[2, 5], 5);
            let b = rand_param::<f64>(&[2, 5], 6);
            max_rel_error(&[a, b], &|t, i| t.mul(&i[0], &i[1]))
        }),
        check("scale", || {
            let a = rand_param::<f64>(&[7], 7);
            max_rel_error(&[a], &|t, i| Ok(t.scale(&i[0], -1.75)))
        }),
        check("relu", || {
            let a = rand_param::<f64>(&[4, 4], 8);
            max_rel_error(&[a], &|t, i| Ok(t.relu(&i[0])))
        }),
        check("abs", || {
            let a = rand_param::<f64>(&[4, 4], 9);
            max_rel_error(&[a], &|t, i| Ok(t.abs(&i[0])))
        }),
        check("sum_mean", || {
            let a = rand_param::<f64>(&[3, 3], 10);
            let e1 = max_rel_error(&[a.clone()], &|t, i| Ok(t.sum_all(&i[0])))?;
            let e2 = max_rel_error(&[a], &|t, i| Ok(t.mean_all(&i[0])))?;
            Ok(e1.max(e2))
        }),
        check("softmax", || {
            let a = rand_param::<f64>(&[3, 5, 2, 2], 11);
            max_rel_error(&[a], &|t, i| t.softmax(&i[0], 1))
        }),
        check("layer_norm", || {
            let x = rand_param::<f64>(&[6, 3, 3], 12);
            let g = rand_param::<f64>(&[6], 13);
            let b = rand_param::<f64>(&[6], 14);
            max_rel_error(&[x, g, b], &|t, i| t.layer_norm(&i[0], &i[1], &i[2], 1e-5))
        }),
        check("instance_norm", || {
            let x = rand_param::<f64>(&[4, 4, 4], 15);
            let g = rand_param::<f64>(&[4], 16);
            let b = rand_param::<f64>(&[4], 17);
            max_rel_error(&[x, g, b], &|t, i| t.instance_norm(&i[0], &i[1], &i[2], 1e-5))
        }),
        check("concat", || {
            let a = rand_param::<f64>(&[2, 3, 3], 18);
            let b = rand_param::<f64>(&[4, 3, 3], 19);
            max_rel_error(&[a, b], &|t, i| t.concat(&[&i[0], &i[1]], 0))
        }),
        check("reshape", || {
            let a = rand_param::<f64>(&[2, 6], 20);
            max_rel_error(&[a], &|t, i| t.reshape(&i[0], &[3, 4]))
        }),
        check("conv2d_3x3_s2", || {
            let x = rand_param::<f64>(&[3, 6, 6], 21);
            let w = rand_param::<f64>(&[4, 3, 3, 3], 22);
            let b = rand_param::<f64>(&[4], 23);
            max_rel_error(&[x, w, b], &|t, i| t.conv2d(&i[0], &i[1], Some(&i[2]), 2, 1))
        }),
        check("conv2d_1x1", || {
            let x = rand_param::<f64>(&[5, 4, 4], 24);
            let w = rand_param::<f64>(&[3, 5, 1, 1], 25);
            let b = rand_param::<f64>(&[3], 26);
            max_rel_error(&[x, w, b], &|t, i| t.conv2d(&i[0], &i[1], Some(&i[2]), 1, 0))
        }),
        check("bilinear_resize", || {
            let x = rand_param::<f64>(&[2, 4, 4], 27);
            max_rel_error(&[x], &|t, i| t.bilinear_resize(&i[0], 7, 6))
        }),
        check("avg_downsample", || {
            let x = rand_param::<f64>(&[2, 6, 6], 28);
            max_rel_error(&[x], &|t, i| t.avg_downsample(&i[0], 2))
        }),
        check("l1_loss", || {
            let a = rand_param::<f64>(&[2, 4, 4], 29);
            let b = rand_param::<f64>(&[2, 4, 4], 30);
            max_rel_error(&[a, b], &|t, i| t.l1_loss(&i[0], &i[1]))
        }),
        check("na_logits", || {
            let q = rand_param::<f64>(&[2, 3, 5, 5], 31);
            let k = rand_param::<f64>(&[2, 3, 5, 5], 32);
            max_rel_error(&[q, k], &|t, i| t.na_logits(&i[0], &i[1], None, 3))
        }),
        check("na_logits_bias", || {
            let q = rand_param::<f64>(&[2, 3, 5, 5], 33);
            let k = rand_param::<f64>(&[2, 3, 5, 5], 34);
            let b = rand_param::<f64>(&[2, 5, 5], 35);
            max_rel_error(&[q, k, b], &|t, i| t.na_logits(&i[0], &i[1], Some(&i[2]), 3))
        }),
        check("na_aggregate", || {
            let lam = rand_param::<f64>(&[2, 3, 3, 5, 5], 36);
            let v = rand_param::<f64>(&[2, 4, 5, 5], 37);
            max_rel_error(&[lam, v], &|t, i| t.na_aggregate(&i[0], &i[1]))
        }),
        check("convex_aggregate_zeropad", || {
            let masks = rand_param::<f64>(&[4, 3, 3, 3, 3], 38);
            let f = rand_param::<f64>(&[2, 3, 3], 39);
            max_rel_error(&[masks, f], &|t, i| {
                t.convex_aggregate(&i[0], &i[1], PaddingPolicy::ZeroPad)
            })
        }),
        check("convex_aggregate_clamp", || {
            let masks = rand_param::<f64>(&[4, 3, 3, 3, 3], 40);
            let f = rand_param::<f64>(&[2, 3, 3], 41);
            max_rel_error(&[masks, f], &|t, i| {
                t.convex_aggregate(&i[0], &i[1], PaddingPolicy::Clamp)
            })
        }),
        check("na_upsample", || {
            let lam = rand_param::<f64>(&[4, 3, 3, 4, 4], 42);
            let f = rand_param::<f64>(&[2, 4, 4], 43);
            max_rel_error(&[lam, f], &|t, i| t.na_upsample(&i[0], &i[1]))
        }),
        check("na_upsample_per_head", || {
            let lam = rand_param::<f64>(&[4, 3, 3, 4, 4], 44);
            let v = rand_param::<f64>(&[4, 3, 4, 4], 45);
            max_rel_error(&[lam, v], &|t, i| t.na_upsample_per_head(&i[0], &i[1]))
        }),
        check("mask_predictor", || {
            let mut rng = ChaCha8Rng::seed_from_u64(46);
            let mp = MaskPredictor::<f64>::new(8, 2, 3, &mut rng)?;
            let h = rand_param::<f64>(&[8, 4, 4], 47);
            let flow = rand_param::<f64>(&[2, 4, 4], 48);
            let params = mp.parameters("mp");
            // conv weights are covered by the op-level checks; perturb the
            // input, the flow, and both biases here
            let biases: Vec<Tensor<f64>> = params
                .iter()
                .filter(|(n, _)| n.ends_with(".bias"))
                .map(|(_, t)| t.clone())
                .collect();
            let mut inputs = vec![h.clone(), flow.clone()];
            inputs.extend(biases);
            max_rel_error(&inputs, &move |t, i| {
                mp.upsample(t, &i[0], &i[1], PaddingPolicy::Clamp)
            })
        }),
        check("nat_block", || {
            let mut rng = ChaCha8Rng::seed_from_u64(49);
            let block = NatBlock::<f64>::new(8, 4, 3, true, &mut rng)?;
            let x = rand_param::<f64>(&[8, 5, 5], 50);
            let mut inputs = vec![x.clone()];
            inputs.extend(block.parameters("b").into_iter().map(|(_, t)| t));
            max_rel_error(&inputs, &move |t, i| block.forward(t, &i[0]))
        }),
        check("tcu_step_reduced", || {
            let mut rng = ChaCha8Rng::seed_from_u64(51);
            let cfg = UpsamplerConfig {
                inject_features: false,
                ..UpsamplerConfig::reduced()
            };
            let ups = TcuUpsampler::<f64>::new(cfg, 16, &mut rng)?;
            let flow = rand_param::<f64>(&[2, 4, 4], 52);
            let feat = rand_param::<f64>(&[16, 4, 4], 53);
            let mut inputs = vec![flow.clone(), feat.clone()];
            inputs.extend(
                ups.parameters("t")
                    .into_iter()
                    .filter(|(n, _)| n.starts_with("t.step0"))
                    .map(|(_, t)| t),
            );
            max_rel_error(&inputs, &move |t, i| {
                // probe both outputs so flow and feature paths are checked
                let (f_up, h_up) = ups.steps[0].forward(t, &i[0], &i[1], None)?;
                let fu = t.reshape(&f_up, &[2 * 8 * 8])?;
                let hu = t.reshape(&h_up, &[8 * 8 * 8])?;
                t.concat(&[&fu, &hu], 0)
            })
        }),
        check("context_encoder", || {
            let mut rng = ChaCha8Rng::seed_from_u64(54);
            let enc = ContextEncoder::<f64>::new(&mut rng);
            let img = rand_param::<f64>(&[3, 16, 16], 55);
            // input plus a representative parameter sample; the conv/norm
            // kernels themselves are covered op-level
            let wanted = [
                "e.stage0.down.bias",
                "e.stage0.block0.mid.norm.gamma",
                "e.stage1.block1.out.norm.beta",
                "e.stage2.down.bias",
            ];
            let mut inputs = vec![img.clone()];
            inputs.extend(
                enc.parameters("e")
                    .into_iter()
                    .filter(|(n, _)| wanted.contains(&n.as_str()))
                    .map(|(_, t)| t),
            );
            assert_eq!(inputs.len(), 1 + wanted.len());
            max_rel_error_guarded(&inputs, &move |t, i| {
                let (f2, f4, f8) = enc.encode(t, &i[0])?;
                let a = t.reshape(&f2, &[64 * 64])?;
                let b = t.reshape(&f4, &[96 * 16])?;
                let c = t.reshape(&f8, &[128 * 4])?;
                t.concat(&[&a, &b, &c], 0)
            })
        }),
    ]
}

/// Run every check; returns (name, max relative error) pairs.
pub fn run_all() -> Result<Vec<(&'static str, f64)>> {
    all_checks()
        .into_iter()
        .map(|c| (c.run)().map(|e| (c.name, e)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn elementwise_and_reduction_ops_pass() {
        for c in all_checks() {
            if matches!(
                c.name,
                "add" | "sub" | "mul" | "scale" | "relu" | "abs" | "sum_mean" | "softmax"
                    | "reshape" | "concat" | "l1_loss"
            ) {
                let e = (c.run)().unwrap();
                assert!(e <= TOLERANCE, "{}: {e}", c.name);
            }
        }
    }

    #[test]
    fn norm_and_conv_ops_pass() {
        for c in all_checks() {
            if matches!(
                c.name,
                "layer_norm" | "instance_norm" | "conv2d_3x3_s2" | "conv2d_1x1"
                    | "bilinear_resize" | "avg_downsample"
            ) {
                let e = (c.run)().unwrap();
                assert!(e <= TOLERANCE, "{}: {e}", c.name);
            }
        }
    }

    #[test]
    fn attention_ops_pass() {
        for c in all_checks() {
            if c.name.starts_with("na_") || c.name.starts_with("convex_") {
                let e = (c.run)().unwrap();
                assert!(e <= TOLERANCE, "{}: {e}", c.name);
            }
        }
    }

    #[test]
    fn composite_blocks_pass() {
        for c in all_checks() {
            if matches!(c.name, "mask_predictor" | "nat_block") {
                let e = (c.run)().unwrap();
                assert!(e <= TOLERANCE, "{}: {e}", c.name);
            }
        }
    }
}
