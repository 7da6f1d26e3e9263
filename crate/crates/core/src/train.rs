//! Toy-scale trainer: iteration-weighted sequence loss, AdamW with two
//! learning-rate groups (pre-trained vs freshly added upsampler), linear
//! warmup + one-cycle cosine decay, and the interpolation-free continuation
//! scheme.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{FlowError, Result};
use crate::eval;
use crate::io::checkpoint;
use crate::pipeline::{FlowModel, RefinementEmulator, WiringMode};
use crate::synth::{augment, AugmentConfig, SyntheticSample};
use crate::tcu::UpsamplerConfig;
use crate::tensor::{grad_or_zeros, Tape, Tensor};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    /// Samples per optimizer step. Desk default 1: the full model at 96x96
    /// is heavy for a single CPU core, and the acceptance-direction runs
    /// only fix seed/steps, not batch size.
    pub batch: usize,
    /// Learning rate for pre-trained (shared) parameters.
    pub base_lr: f64,
    /// Learning rate for the fresh last-iteration upsampler.
    pub fresh_lr: f64,
    pub gamma: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub seed: u64,
    pub aug: AugmentConfig,
    pub mode: WiringMode,
    pub tcu: UpsamplerConfig,
    pub sigmas: Vec<f64>,
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch: 1,
            base_lr: 1e-4,
            fresh_lr: 2e-4,
            gamma: 0.8,
            weight_decay: 1e-5,
            warmup_frac: 0.05,
            seed: 0,
            aug: AugmentConfig::default(),
            mode: WiringMode::Shared,
            tcu: UpsamplerConfig::default(),
            sigmas: vec![2.0, 1.0, 0.5, 0.0],
            eval_every: 100,
        }
    }
}

/// sum_i gamma^(I-1-i) * mean L1(pred_i, gt): later iterations weigh more.
pub fn sequence_loss(
    tape: &Tape<f32>,
    preds: &[Tensor<f32>],
    gt: &Tensor<f32>,
    gamma: f64,
) -> Result<Tensor<f32>> {
    if preds.is_empty() {
        return Err(FlowError::Config("no predictions".into()));
    }
    let last = preds.len() - 1;
    let mut total: Option<Tensor<f32>> = None;
    for (i, p) in preds.iter().enumerate() {
        let l1 = tape.mean_all(&tape.abs(&tape.sub(p, gt)?));
        let weighted = tape.scale(&l1, gamma.powi((last - i) as i32) as f32);
        total = Some(match total {
            Some(t) => tape.add(&t, &weighted)?,
            None => weighted,
        });
    }
    Ok(total.unwrap())
}

struct AdamState {
    m: Vec<f32>,
    v: Vec<f32>,
}

/// AdamW with decoupled weight decay, one state slot per parameter.
struct Optimizer {
    states: Vec<AdamState>,
    t: usize,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
/// One-cycle decay floor (fraction of peak).
const LR_FLOOR: f64 = 0.05;

/// Learning rate for steps past the schedule (fraction of peak). The
/// interpolation-free continuation has to adapt to the sharper target
/// distribution; at the decay floor it only drifts.
const CONTINUATION_LR_FRAC: f64 = 0.2;

impl Optimizer {
    fn new(params: &[(String, Tensor<f32>)]) -> Self {
        Optimizer {
            states: params
                .iter()
                .map(|(_, p)| AdamState {
                    m: vec![0.0; p.numel()],
                    v: vec![0.0; p.numel()],
                })
                .collect(),
            t: 0,
        }
    }

    fn step(&mut self, params: &[(String, Tensor<f32>)], lrs: &[f64], wd: f64) {
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for ((st, (_, p)), &lr) in self.states.iter_mut().zip(params).zip(lrs) {
            let g = grad_or_zeros(p);
            p.apply_update(|i, v| {
                let gi = g[i] as f64;
                st.m[i] = (BETA1 * st.m[i] as f64 + (1.0 - BETA1) * gi) as f32;
                st.v[i] = (BETA2 * st.v[i] as f64 + (1.0 - BETA2) * gi * gi) as f32;
                let mh = st.m[i] as f64 / bc1;
                let vh = st.v[i] as f64 / bc2;
                let x = *v as f64;
                *v = (x - lr * wd * x - lr * mh / (vh.sqrt() + ADAM_EPS)) as f32;
            });
            p.zero_grad();
        }
    }
}

pub struct Trainer {
    pub model: FlowModel,
    pub cfg: TrainConfig,
    params: Vec<(String, Tensor<f32>)>,
    /// true => fresh (last-upsampler) learning-rate group
    group_fresh: Vec<bool>,
    opt: Optimizer,
    pub step: usize,
    /// Steps the one-cycle schedule was planned over.
    schedule_steps: usize,
    rng: ChaCha8Rng,
    pub metrics_csv: String,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = FlowModel::new(cfg.mode, cfg.tcu.clone(), &mut rng)?;
        Self::from_model(model, cfg, rng)
    }

    fn from_model(model: FlowModel, cfg: TrainConfig, rng: ChaCha8Rng) -> Result<Self> {
        let shared = model.shared_parameters();
        let fresh = model.last_parameters();
        let fresh_names: Vec<&String> = fresh.iter().map(|(n, _)| n).collect();
        let mut params = shared;
        let mut group_fresh = vec![false; params.len()];
        params.extend(fresh.iter().cloned());
        group_fresh.extend(std::iter::repeat(true).take(fresh.len()));
        // every parameter in exactly one group, fresh group == last upsampler
        let mut seen = std::collections::HashSet::new();
        for (n, _) in &params {
            if !seen.insert(n.clone()) {
                return Err(FlowError::Train(format!("parameter '{n}' in two groups")));
            }
        }
        debug_assert_eq!(
            params.iter().zip(&group_fresh).filter(|(_, f)| **f).count(),
            fresh_names.len()
        );
        let opt = Optimizer::new(&params);
        let schedule_steps = cfg.steps;
        Ok(Trainer {
            model,
            cfg,
            params,
            group_fresh,
            opt,
            step: 0,
            schedule_steps,
            rng,
            metrics_csv: String::from("step,loss,epe_val,lr_group0,lr_group1\n"),
        })
    }

    /// (base, fresh) learning rates at a given step: linear warmup to peak,
    /// then cosine decay to a floor.
    pub fn lrs_at(&self, step: usize) -> (f64, f64) {
        let warm = ((self.schedule_steps as f64 * self.cfg.warmup_frac).ceil() as usize).max(1);
        let factor = if step <= warm {
            step as f64 / warm as f64
        } else if step > self.schedule_steps {
            CONTINUATION_LR_FRAC
        } else if step == self.schedule_steps {
            LR_FLOOR
        } else {
            let p = (step - warm) as f64 / (self.schedule_steps - warm) as f64;
            LR_FLOOR + (1.0 - LR_FLOOR) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
        };
        (self.cfg.base_lr * factor, self.cfg.fresh_lr * factor)
    }

    /// Run `n` optimizer steps. `interpolation` toggles the resize stage of
    /// the augmentation pipeline.
    pub fn run(&mut self, data: &[SyntheticSample], n: usize, interpolation: bool) -> Result<()> {
        if data.is_empty() {
            return Err(FlowError::Train("empty dataset".into()));
        }
        let (train_set, val_set) = split(data);
        let mut aug_cfg = self.cfg.aug.clone();
        aug_cfg.interpolation_enabled = interpolation;
        for _ in 0..n {
            self.step += 1;
            let (lr_base, lr_fresh) = self.lrs_at(self.step);
            let mut loss_sum = 0f64;
            for _ in 0..self.cfg.batch {
                let sample = &train_set[self.rng.gen_range(0..train_set.len())];
                let aug_seed: u64 = self.rng.gen();
                let s = augment(sample, &aug_cfg, aug_seed)?;
                let em = RefinementEmulator::new(self.cfg.sigmas.clone(), self.cfg.seed)?;
                let flows = em.flows(&s.flow, self.step as u64)?;
                let tape = Tape::new();
                let preds = self.model.forward_all_iterations(&tape, &s.image, &flows)?;
                let loss = sequence_loss(&tape, &preds, &s.flow, self.cfg.gamma)?;
                let lv = loss.item() as f64;
                if !lv.is_finite() {
                    return Err(FlowError::Train(format!(
                        "non-finite loss {lv} at step {} (lr {lr_base:.2e}/{lr_fresh:.2e}, grad norm {:.3e})",
                        self.step,
                        self.grad_norm()
                    )));
                }
                loss_sum += lv;
                tape.backward(&loss)?;
            }
            if self.cfg.batch > 1 {
                let inv = 1.0 / self.cfg.batch as f32;
                for (_, p) in &self.params {
                    p.scale_grad(inv);
                }
            }
            let lrs: Vec<f64> = self
                .group_fresh
                .iter()
                .map(|f| if *f { lr_fresh } else { lr_base })
                .collect();
            self.opt.step(&self.params, &lrs, self.cfg.weight_decay);
            let loss = loss_sum / self.cfg.batch as f64;
            if self.step % self.cfg.eval_every == 0 || self.step == 1 {
                let epe_val = self.validate(val_set)?;
                let _ = writeln!(
                    self.metrics_csv,
                    "{},{:.6},{:.6},{:.6e},{:.6e}",
                    self.step, loss, epe_val, lr_base, lr_fresh
                );
            }
        }
        Ok(())
    }

    /// Mean EPE of the test-time path (last iteration only, noise-free
    /// low-res input) over the held-out split.
    pub fn validate(&self, val_set: &[SyntheticSample]) -> Result<f64> {
        let tape = Tape::no_grad();
        let mut total = 0f64;
        for s in val_set {
            let lr = tape.avg_downsample(&s.flow, 8)?;
            let pred = self.model.forward_last(&tape, &s.image, &lr)?;
            total += eval::epe(&pred, &s.flow)?.0;
        }
        Ok(total / val_set.len() as f64)
    }

    fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .map(|(_, p)| {
                grad_or_zeros(p)
                    .iter()
                    .map(|g| (*g as f64).powi(2))
                    .sum::<f64>()
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn parameters(&self) -> &[(String, Tensor<f32>)] {
        &self.params
    }

    /// Names in the fresh learning-rate group.
    pub fn fresh_group(&self) -> Vec<&str> {
        self.params
            .iter()
            .zip(&self.group_fresh)
            .filter(|(_, f)| **f)
            .map(|((n, _), _)| n.as_str())
            .collect()
    }
}

/// Held-out split: last 1/8 of the dataset (at least one sample) validates.
pub fn split(data: &[SyntheticSample]) -> (&[SyntheticSample], &[SyntheticSample]) {
    let n_val = (data.len() / 8).max(1).min(data.len() - 1).max(1);
    if data.len() == 1 {
        return (data, data);
    }
    data.split_at(data.len() - n_val)
}

/// Build a trainer and run the configured number of steps.
pub fn train(cfg: TrainConfig, data: &[SyntheticSample]) -> Result<Trainer> {
    let steps = cfg.steps;
    let mut t = Trainer::new(cfg)?;
    t.run(data, steps, t.cfg.aug.interpolation_enabled)?;
    Ok(t)
}

/// The -AUG continuation: extra steps (a fraction of the original count)
/// with every interpolation-based augmentation disabled.
pub fn continue_without_interpolation(
    trainer: &mut Trainer,
    data: &[SyntheticSample],
    fraction: f64,
) -> Result<usize> {
    let extra = ((trainer.schedule_steps as f64 * fraction).round() as usize).max(1);
    trainer.run(data, extra, false)?;
    Ok(extra)
}

// --- checkpointing (self-describing via a meta pseudo-tensor) ---

fn mode_id(mode: WiringMode) -> f32 {
    match mode {
        WiringMode::Shared => 0.0,
        WiringMode::DecoupledBaseline => 1.0,
        WiringMode::DecoupledTcu => 2.0,
    }
}

pub fn save_model(path: &Path, model: &FlowModel, tcu: &UpsamplerConfig) -> Result<()> {
    let mut meta = vec![
        mode_id(model.mode),
        tcu.steps as f32,
        tcu.head_dim as f32,
        if tcu.inject_features { 1.0 } else { 0.0 },
        if tcu.use_rel_bias { 1.0 } else { 0.0 },
    ];
    meta.extend(tcu.mask_sizes.iter().map(|m| *m as f32));
    meta.extend(tcu.dims.iter().map(|d| *d as f32));
    let mut tensors = vec![(
        "meta.config".to_string(),
        Tensor::new(&[meta.len()], meta)?,
    )];
    tensors.extend(model.parameters());
    checkpoint::save_tensors(path, &tensors)
}

pub fn load_model(path: &Path) -> Result<(FlowModel, UpsamplerConfig)> {
    let tensors = checkpoint::load_tensors(path)?;
    let meta = tensors
        .iter()
        .find(|(n, _)| n == "meta.config")
        .ok_or_else(|| FlowError::Config("checkpoint lacks meta.config".into()))?
        .1
        .to_vec();
    if meta.len() < 5 {
        return Err(FlowError::Config("meta.config too short".into()));
    }
    let steps = meta[1] as usize;
    if meta.len() != 5 + 2 * steps {
        return Err(FlowError::Config("meta.config length mismatch".into()));
    }
    let cfg = UpsamplerConfig {
        steps,
        head_dim: meta[2] as usize,
        inject_features: meta[3] != 0.0,
        use_rel_bias: meta[4] != 0.0,
        mask_sizes: meta[5..5 + steps].iter().map(|v| *v as usize).collect(),
        dims: meta[5 + steps..].iter().map(|v| *v as usize).collect(),
        ..UpsamplerConfig::default()
    };
    let mode = match meta[0] as i64 {
        0 => WiringMode::Shared,
        1 => WiringMode::DecoupledBaseline,
        2 => WiringMode::DecoupledTcu,
        other => return Err(FlowError::Config(format!("unknown mode id {other}"))),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = FlowModel::new(mode, cfg.clone(), &mut rng)?;
    checkpoint::restore_into(&tensors, &model.parameters())?;
    Ok((model, cfg))
}

/// Resume a trainer from a saved model (optimizer state starts fresh).
pub fn trainer_from_checkpoint(path: &Path, mut cfg: TrainConfig) -> Result<Trainer> {
    let (model, tcu) = load_model(path)?;
    cfg.mode = model.mode;
    cfg.tcu = tcu;
    let rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5EED));
    Trainer::from_model(model, cfg, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::gen_sample;

    fn tiny_cfg(mode: WiringMode) -> TrainConfig {
        TrainConfig {
            steps: 4,
            batch: 1,
            mode,
            aug: AugmentConfig {
                crop_h: 32,
                crop_w: 32,
                ..AugmentConfig::default()
            },
            sigmas: vec![1.0, 0.0],
            ..TrainConfig::default()
        }
    }

    fn tiny_data(n: usize) -> Vec<SyntheticSample> {
        (0..n as u64).map(|s| gen_sample(s, 32, 32, 2).unwrap()).collect()
    }

    #[test]
    fn sequence_loss_closed_forms() {
        let tape = Tape::new();
        let gt = Tensor::zeros(&[2, 4, 4]);
        let ones = Tensor::full(&[2, 4, 4], 1.0f32);
        let halves = Tensor::full(&[2, 4, 4], 0.5f32);
        // I=1: plain mean L1
        let l = sequence_loss(&tape, &[ones.clone()], &gt, 0.8).unwrap();
        assert!((l.item() - 1.0).abs() < 1e-7);
        // preds == gt -> 0
        let l = sequence_loss(&tape, &[gt.clone(), gt.clone()], &gt, 0.8).unwrap();
        assert_eq!(l.item(), 0.0);
        // I=2, gamma 0.8, per-iter errors (1.0, 0.5) -> 1.3
        let l = sequence_loss(&tape, &[ones, halves], &gt, 0.8).unwrap();
        assert!((l.item() - 1.3).abs() < 1e-6, "{}", l.item());
    }

    #[test]
    fn zero_lr_keeps_parameters_bit_identical() {
        let mut cfg = tiny_cfg(WiringMode::Shared);
        cfg.base_lr = 0.0;
        cfg.fresh_lr = 0.0;
        cfg.weight_decay = 1e-5; // decoupled decay is also lr-scaled
        let data = tiny_data(4);
        let t = Trainer::new(cfg).unwrap();
        let before: Vec<Vec<u32>> = t
            .parameters()
            .iter()
            .map(|(_, p)| p.to_vec().iter().map(|v| v.to_bits()).collect())
            .collect();
        let mut t = t;
        t.run(&data, 3, true).unwrap();
        for ((_, p), b) in t.parameters().iter().zip(&before) {
            let now: Vec<u32> = p.to_vec().iter().map(|v| v.to_bits()).collect();
            assert_eq!(&now, b);
        }
    }

    #[test]
    fn fresh_group_matches_last_upsampler() {
        for mode in [WiringMode::Shared, WiringMode::DecoupledBaseline, WiringMode::DecoupledTcu] {
            let t = Trainer::new(tiny_cfg(mode)).unwrap();
            let fresh: Vec<String> = t.fresh_group().iter().map(|s| s.to_string()).collect();
            let expect: Vec<String> =
                t.model.last_parameters().iter().map(|(n, _)| n.clone()).collect();
            assert_eq!(fresh, expect);
        }
    }

    #[test]
    fn short_run_reduces_loss() {
        let mut cfg = tiny_cfg(WiringMode::Shared);
        cfg.steps = 60;
        cfg.base_lr = 1e-3;
        cfg.eval_every = 1000;
        let data = tiny_data(8);
        let mut t = Trainer::new(cfg).unwrap();
        let first = t.validate(&data).unwrap();
        t.run(&data, 60, true).unwrap();
        let last = t.validate(&data).unwrap();
        assert!(last < first, "validation EPE {first} -> {last}");
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = tiny_cfg(WiringMode::DecoupledBaseline);
        let data = tiny_data(4);
        let a = train(cfg.clone(), &data).unwrap();
        let b = train(cfg, &data).unwrap();
        assert_eq!(a.metrics_csv, b.metrics_csv);
        for ((_, pa), (_, pb)) in a.parameters().iter().zip(b.parameters()) {
            assert_eq!(pa.to_vec(), pb.to_vec());
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_forward() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let data = tiny_data(4);
        let mut cfg = tiny_cfg(WiringMode::DecoupledTcu);
        cfg.steps = 2;
        let t = train(cfg.clone(), &data).unwrap();
        save_model(&p, &t.model, &cfg.tcu).unwrap();
        let (loaded, _) = load_model(&p).unwrap();
        let tape = Tape::no_grad();
        let lr = tape.avg_downsample(&data[0].flow, 8).unwrap();
        let a = t.model.forward_last(&tape, &data[0].image, &lr).unwrap();
        let b = loaded.forward_last(&tape, &data[0].image, &lr).unwrap();
        let (av, bv) = (a.to_vec(), b.to_vec());
        for (x, y) in av.iter().zip(&bv) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn continuation_disables_resampling() {
        let data = tiny_data(4);
        let mut cfg = tiny_cfg(WiringMode::Shared);
        cfg.steps = 2;
        let mut t = train(cfg, &data).unwrap();
        let before = crate::synth::resize_invocations();
        continue_without_interpolation(&mut t, &data, 0.5).unwrap();
        assert_eq!(crate::synth::resize_invocations(), before);
        assert_eq!(t.step, 3);
    }
}
