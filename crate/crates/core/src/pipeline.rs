//! Refinement-loop stand-in and upsampler wiring.
//!
//! A real recurrent flow estimator is out of scope; the emulator produces a
//! sequence of progressively less noisy low-resolution flows around the
//! downsampled ground truth. A small conv net maps (context features, flow)
//! to the hidden state the upsamplers consume. The wiring selects which
//! upsampler serves the final iteration: the shared baseline itself, a
//! decoupled copy, or the attention upsampler.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{FlowError, Result};
use crate::init;
use crate::tcu::{ContextEncoder, TcuUpsampler, UpsamplerConfig};
use crate::tensor::{PaddingPolicy, Tape, Tensor};
use crate::upsample::MaskPredictor;

/// Hidden-state width fed to the upsamplers.
pub const HIDDEN_CHANNELS: usize = 128;
/// Baseline upsampling factor and mask size.
pub const BASE_FACTOR: usize = 8;
pub const BASE_MASK: usize = 3;

/// Emits `I` noisy low-resolution flows; noise shrinks iteration over
/// iteration, ending exactly on the downsampled ground truth when the last
/// sigma is 0.
#[derive(Debug, Clone)]
pub struct RefinementEmulator {
    pub sigmas: Vec<f64>,
    pub seed: u64,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; one value per draw keeps the stream simple
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

impl RefinementEmulator {
    pub fn new(sigmas: Vec<f64>, seed: u64) -> Result<Self> {
        if sigmas.is_empty() {
            return Err(FlowError::Config("empty noise schedule".into()));
        }
        for w in sigmas.windows(2) {
            if w[1] > w[0] {
                return Err(FlowError::Config(format!(
                    "noise schedule must be non-increasing, got {:?}",
                    sigmas
                )));
            }
        }
        Ok(RefinementEmulator { sigmas, seed })
    }

    /// Default 4-iteration schedule ending noise-free.
    pub fn default_schedule(seed: u64) -> Self {
        RefinementEmulator {
            sigmas: vec![2.0, 1.0, 0.5, 0.0],
            seed,
        }
    }

    pub fn iterations(&self) -> usize {
        self.sigmas.len()
    }

    /// Noisy low-res flows around avg-downsampled ground truth,
    /// deterministic in (seed, sample_key).
    pub fn flows(&self, flow_gt_hr: &Tensor<f32>, sample_key: u64) -> Result<Vec<Tensor<f32>>> {
        let s = flow_gt_hr.shape();
        if s.len() != 3 || s[0] != 2 || s[1] % BASE_FACTOR != 0 || s[2] % BASE_FACTOR != 0 {
            return Err(FlowError::Shape {
                op: "emulate_refinement",
                detail: format!("flow must be [2,8k,8k'], got {:?}", s),
            });
        }
        let lr = Tape::no_grad().avg_downsample(flow_gt_hr, BASE_FACTOR)?;
        let base = lr.to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ sample_key.wrapping_mul(0x9E3779B97F4A7C15));
        let mut out = Vec::with_capacity(self.sigmas.len());
        for &sigma in &self.sigmas {
            let data: Vec<f32> = base
                .iter()
                .map(|v| {
                    if sigma == 0.0 {
                        *v
                    } else {
                        v + (sigma * gaussian(&mut rng)) as f32
                    }
                })
                .collect();
            out.push(Tensor::new(lr.shape(), data)?);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WiringMode {
    /// One convex upsampler serves every iteration.
    Shared,
    /// Last iteration gets its own convex upsampler (+DC).
    DecoupledBaseline,
    /// Last iteration gets the attention upsampler (+DC, TCU).
    DecoupledTcu,
}

impl WiringMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "shared" => Ok(WiringMode::Shared),
            "dc" => Ok(WiringMode::DecoupledBaseline),
            "dc-tcu" => Ok(WiringMode::DecoupledTcu),
            other => Err(FlowError::Config(format!(
                "unknown mode '{other}' (expected shared|dc|dc-tcu)"
            ))),
        }
    }
}

enum LastUpsampler {
    Shared,
    Baseline(MaskPredictor<f32>),
    Tcu(TcuUpsampler<f32>),
}

/// Context encoder + hidden-state net + upsampler wiring.
pub struct FlowModel {
    pub encoder: ContextEncoder<f32>,
    w_h1: Tensor<f32>,
    b_h1: Tensor<f32>,
    w_h2: Tensor<f32>,
    b_h2: Tensor<f32>,
    pub shared: MaskPredictor<f32>,
    last: LastUpsampler,
    pub mode: WiringMode,
}

impl FlowModel {
    pub fn new(mode: WiringMode, tcu_config: UpsamplerConfig, rng: &mut impl Rng) -> Result<Self> {
        let encoder = ContextEncoder::new(rng);
        let hc = HIDDEN_CHANNELS;
        let w_h1 = init::conv_weight(hc, hc + 2, 3, rng);
        let b_h1 = init::conv_bias(hc, hc + 2, 3, rng);
        let w_h2 = init::conv_weight(hc, hc, 1, rng);
        let b_h2 = init::conv_bias(hc, hc, 1, rng);
        let shared = MaskPredictor::new(hc, BASE_FACTOR, BASE_MASK, rng)?;
        let last = match mode {
            WiringMode::Shared => LastUpsampler::Shared,
            WiringMode::DecoupledBaseline => {
                LastUpsampler::Baseline(MaskPredictor::new(hc, BASE_FACTOR, BASE_MASK, rng)?)
            }
            WiringMode::DecoupledTcu => {
                LastUpsampler::Tcu(TcuUpsampler::new(tcu_config, hc, rng)?)
            }
        };
        Ok(FlowModel {
            encoder,
            w_h1,
            b_h1,
            w_h2,
            b_h2,
            shared,
            last,
            mode,
        })
    }

    pub fn tcu(&self) -> Option<&TcuUpsampler<f32>> {
        match &self.last {
            LastUpsampler::Tcu(t) => Some(t),
            _ => None,
        }
    }

    /// Hidden state from 1/8-scale context features and a low-res flow.
    fn hidden(&self, tape: &Tape<f32>, f8: &Tensor<f32>, flow: &Tensor<f32>) -> Result<Tensor<f32>> {
        let cat = tape.concat(&[f8, flow], 0)?;
        let a = tape.conv2d(&cat, &self.w_h1, Some(&self.b_h1), 1, 1)?;
        let a = tape.relu(&a);
        tape.conv2d(&a, &self.w_h2, Some(&self.b_h2), 1, 0)
    }

    /// Upsample every iteration's flow: the shared upsampler serves
    /// iterations 0..I-2, the wired last upsampler serves iteration I-1.
    pub fn forward_all_iterations(
        &self,
        tape: &Tape<f32>,
        image: &Tensor<f32>,
        flows_lr: &[Tensor<f32>],
    ) -> Result<Vec<Tensor<f32>>> {
        if flows_lr.is_empty() {
            return Err(FlowError::Config("no iterations to upsample".into()));
        }
        let (f2, f4, f8) = self.encoder.encode(tape, image)?;
        let mut out = Vec::with_capacity(flows_lr.len());
        let last_i = flows_lr.len() - 1;
        for (i, flow) in flows_lr.iter().enumerate() {
            let h = self.hidden(tape, &f8, flow)?;
            let up = if i < last_i {
                self.shared.upsample(tape, &h, flow, PaddingPolicy::Clamp)?
            } else {
                match &self.last {
                    LastUpsampler::Shared => {
                        self.shared.upsample(tape, &h, flow, PaddingPolicy::Clamp)?
                    }
                    LastUpsampler::Baseline(b) => {
                        b.upsample(tape, &h, flow, PaddingPolicy::Clamp)?
                    }
                    LastUpsampler::Tcu(t) => {
                        t.upsample(tape, flow, &h, Some((&f2, &f4, &f8)))?
                    }
                }
            };
            out.push(up);
        }
        Ok(out)
    }

    /// Test-time path: only the final iteration is upsampled.
    pub fn forward_last(
        &self,
        tape: &Tape<f32>,
        image: &Tensor<f32>,
        flow_lr: &Tensor<f32>,
    ) -> Result<Tensor<f32>> {
        let (f2, f4, f8) = self.encoder.encode(tape, image)?;
        let h = self.hidden(tape, &f8, flow_lr)?;
        match &self.last {
            LastUpsampler::Shared => self.shared.upsample(tape, &h, flow_lr, PaddingPolicy::Clamp),
            LastUpsampler::Baseline(b) => b.upsample(tape, &h, flow_lr, PaddingPolicy::Clamp),
            LastUpsampler::Tcu(t) => t.upsample(tape, flow_lr, &h, Some((&f2, &f4, &f8))),
        }
    }

    /// Parameters shared across iterations (encoder, hidden net, shared
    /// upsampler). These take the "pre-trained" learning rate.
    pub fn shared_parameters(&self) -> Vec<(String, Tensor<f32>)> {
        let mut ps = self.encoder.parameters("encoder");
        ps.push(("hnet.conv1.weight".into(), self.w_h1.clone()));
        ps.push(("hnet.conv1.bias".into(), self.b_h1.clone()));
        ps.push(("hnet.conv2.weight".into(), self.w_h2.clone()));
        ps.push(("hnet.conv2.bias".into(), self.b_h2.clone()));
        ps.extend(self.shared.parameters("shared"));
        ps
    }

    /// Parameters exclusive to the final-iteration upsampler ("fresh"
    /// learning-rate group). Empty in shared mode.
    pub fn last_parameters(&self) -> Vec<(String, Tensor<f32>)> {
        match &self.last {
            LastUpsampler::Shared => Vec::new(),
            LastUpsampler::Baseline(b) => b.parameters("last"),
            LastUpsampler::Tcu(t) => t.parameters("last"),
        }
    }

    pub fn parameters(&self) -> Vec<(String, Tensor<f32>)> {
        let mut ps = self.shared_parameters();
        ps.extend(self.last_parameters());
        ps
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::gen_sample;
    use crate::tensor::grad_or_zeros;

    fn gt(seed: u64, h: usize, w: usize) -> Tensor<f32> {
        gen_sample(seed, h, w, 2).unwrap().flow
    }

    #[test]
    fn zero_sigma_reproduces_downsampled_gt() {
        let g = gt(1, 32, 32);
        let em = RefinementEmulator::new(vec![0.0, 0.0], 7).unwrap();
        let flows = em.flows(&g, 0).unwrap();
        let exact = Tape::no_grad().avg_downsample(&g, 8).unwrap().to_vec();
        for f in flows {
            assert_eq!(f.to_vec(), exact);
        }
    }

    #[test]
    fn emulator_is_deterministic() {
        let g = gt(2, 32, 32);
        let em = RefinementEmulator::default_schedule(42);
        let a = em.flows(&g, 5).unwrap();
        let b = em.flows(&g, 5).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_vec(), y.to_vec());
        }
        let c = em.flows(&g, 6).unwrap();
        assert_ne!(a[0].to_vec(), c[0].to_vec());
    }

    #[test]
    fn noise_magnitude_follows_schedule() {
        let g = gt(3, 32, 32);
        let em = RefinementEmulator::default_schedule(11);
        let clean = Tape::no_grad().avg_downsample(&g, 8).unwrap().to_vec();
        let mut mean_abs = vec![0f64; em.iterations()];
        for k in 0..100 {
            let flows = em.flows(&g, k).unwrap();
            for (i, f) in flows.iter().enumerate() {
                let v = f.to_vec();
                mean_abs[i] += v
                    .iter()
                    .zip(&clean)
                    .map(|(a, b)| (a - b).abs() as f64)
                    .sum::<f64>()
                    / v.len() as f64;
            }
        }
        for pair in mean_abs.windows(2) {
            assert!(pair[1] < pair[0], "{mean_abs:?}");
        }
        assert_eq!(mean_abs[3], 0.0);
    }

    #[test]
    fn increasing_schedule_rejected() {
        assert!(RefinementEmulator::new(vec![1.0, 2.0], 0).is_err());
        assert!(RefinementEmulator::new(vec![], 0).is_err());
    }

    #[test]
    fn shared_mode_has_no_fresh_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = FlowModel::new(WiringMode::Shared, UpsamplerConfig::default(), &mut rng).unwrap();
        assert!(m.last_parameters().is_empty());
    }

    #[test]
    fn decoupled_tcu_wiring_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m =
            FlowModel::new(WiringMode::DecoupledTcu, UpsamplerConfig::default(), &mut rng).unwrap();
        let sample = gen_sample(9, 32, 32, 2).unwrap();
        let em = RefinementEmulator::default_schedule(3);
        let flows = em.flows(&sample.flow, 0).unwrap();
        let tape = Tape::no_grad();
        let outs = m.forward_all_iterations(&tape, &sample.image, &flows).unwrap();
        assert_eq!(outs.len(), 4);
        for o in &outs {
            assert_eq!(o.shape(), &[2, 32, 32]);
        }
        // test-time path matches the full pass's last iteration
        let last = m.forward_last(&tape, &sample.image, &flows[3]).unwrap();
        assert_eq!(last.to_vec(), outs[3].to_vec());
    }

    #[test]
    fn early_iteration_loss_never_reaches_last_upsampler() {
        for mode in [WiringMode::DecoupledBaseline, WiringMode::DecoupledTcu] {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let m = FlowModel::new(mode, UpsamplerConfig::default(), &mut rng).unwrap();
            let sample = gen_sample(10, 32, 32, 2).unwrap();
            let em = RefinementEmulator::default_schedule(5);
            let flows = em.flows(&sample.flow, 0).unwrap();
            let tape = Tape::new();
            let outs = m.forward_all_iterations(&tape, &sample.image, &flows).unwrap();
            // loss restricted to iterations before the last
            let d0 = tape.sub(&outs[0], &sample.flow).unwrap();
            let d1 = tape.sub(&outs[1], &sample.flow).unwrap();
            let l = tape
                .add(&tape.mean_all(&tape.abs(&d0)), &tape.mean_all(&tape.abs(&d1)))
                .unwrap();
            tape.backward(&l).unwrap();
            for (name, p) in m.last_parameters() {
                let g = grad_or_zeros(&p);
                assert!(g.iter().all(|v| *v == 0.0), "{name} got nonzero grad");
            }
            // sanity: the shared path did receive gradient
            let any = m
                .shared_parameters()
                .iter()
                .any(|(_, p)| grad_or_zeros(p).iter().any(|v| *v != 0.0));
            assert!(any);
        }
    }
}
