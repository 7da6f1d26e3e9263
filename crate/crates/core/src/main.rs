use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use flowup::error::Result;
use flowup::eval;
use flowup::gradcheck_suite;
use flowup::hull;
use flowup::io::{dataset, flo, ppm};
use flowup::pipeline::WiringMode;
use flowup::synth;
use flowup::tcu::UpsamplerConfig;
use flowup::tensor::Tape;
use flowup::train::{self, TrainConfig};
use flowup::util;
use flowup::FlowError;

#[derive(Parser)]
#[command(name = "flowup", about = "Convex and attention-based optical-flow upsampling toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic image/flow dataset
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        /// HxW, both divisible by 8
        #[arg(long, default_value = "96x96")]
        size: String,
        #[arg(long, default_value_t = 4)]
        shapes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train an upsampler configuration
    Train {
        #[arg(long)]
        data: PathBuf,
        /// shared | dc | dc-tcu
        #[arg(long, default_value = "shared")]
        mode: String,
        #[arg(long, default_value = "9,7,5")]
        mask_sizes: String,
        #[arg(long, default_value_t = false)]
        inject_features: bool,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Disable interpolation-based augmentation from the start
        #[arg(long, default_value_t = false)]
        no_interp_aug: bool,
    },
    /// Continue training from a checkpoint with interpolation augmentation off
    ContinueNoaug {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output checkpoint (defaults to overwriting --ckpt)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Upsample a low-resolution flow with a trained checkpoint
    Upsample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        flow_lr: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Detail-bucket EPE report over prediction/ground-truth directories
    EvalDetail {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convex-hull representability study over a dataset
    HullStudy {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "3,5,7,9")]
        masks: String,
        #[arg(long, default_value_t = 8)]
        factor: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks
    Gradcheck {
        /// Check a single op by name
        #[arg(long)]
        op: Option<String>,
    },
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let (h, w) = s
        .split_once('x')
        .ok_or_else(|| FlowError::Config(format!("size '{s}' is not HxW")))?;
    let h = h.parse().map_err(|_| FlowError::Config(format!("bad height in '{s}'")))?;
    let w = w.parse().map_err(|_| FlowError::Config(format!("bad width in '{s}'")))?;
    Ok((h, w))
}

fn parse_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| FlowError::Config(format!("bad list entry '{p}'")))
        })
        .collect()
}

fn load_samples(dir: &PathBuf) -> Result<Vec<synth::SyntheticSample>> {
    let entries = dataset::list_dataset(dir)?;
    let mut out = Vec::with_capacity(entries.len());
    for e in &entries {
        let (image, flow) = dataset::load_entry(e)?;
        out.push(synth::SyntheticSample {
            image,
            flow,
            n_shapes: 0,
            seed: 0,
        });
    }
    Ok(out)
}

fn run(cmd: Cmd) -> Result<ExitCode> {
    match cmd {
        Cmd::GenData {
            out,
            count,
            size,
            shapes,
            seed,
        } => {
            let (h, w) = parse_size(&size)?;
            let samples: Vec<_> = (0..count)
                .map(|i| synth::gen_sample(seed.wrapping_add(i as u64), h, w, shapes))
                .collect::<Result<_>>()?;
            dataset::write_dataset(&out, &samples)?;
            println!("wrote {count} samples ({h}x{w}, {shapes} shapes) to {}", out.display());
        }
        Cmd::Train {
            data,
            mode,
            mask_sizes,
            inject_features,
            steps,
            batch,
            seed,
            out,
            no_interp_aug,
        } => {
            let samples = load_samples(&data)?;
            let mode = WiringMode::parse(&mode)?;
            let masks = parse_list(&mask_sizes)?;
            let tcu = UpsamplerConfig {
                mask_sizes: masks,
                inject_features,
                ..UpsamplerConfig::default()
            };
            let crop = samples[0].flow.shape()[1].min(samples[0].flow.shape()[2]).min(96);
            let cfg = TrainConfig {
                steps,
                batch,
                seed,
                mode,
                tcu: tcu.clone(),
                aug: synth::AugmentConfig {
                    crop_h: crop,
                    crop_w: crop,
                    interpolation_enabled: !no_interp_aug,
                    ..synth::AugmentConfig::default()
                },
                ..TrainConfig::default()
            };
            let trainer = train::train(cfg, &samples)?;
            train::save_model(&out, &trainer.model, &tcu)?;
            let metrics = out.with_extension("metrics.csv");
            std::fs::write(&metrics, &trainer.metrics_csv)?;
            println!(
                "trained {steps} steps (mode {mode:?}); checkpoint {}, metrics {}",
                out.display(),
                metrics.display()
            );
        }
        Cmd::ContinueNoaug {
            ckpt,
            data,
            steps,
            seed,
            out,
        } => {
            let samples = load_samples(&data)?;
            let crop = samples[0].flow.shape()[1].min(samples[0].flow.shape()[2]).min(96);
            let cfg = TrainConfig {
                steps,
                seed,
                aug: synth::AugmentConfig {
                    crop_h: crop,
                    crop_w: crop,
                    ..synth::AugmentConfig::default()
                },
                ..TrainConfig::default()
            };
            let mut trainer = train::trainer_from_checkpoint(&ckpt, cfg)?;
            trainer.run(&samples, steps, false)?;
            let out = out.unwrap_or(ckpt);
            train::save_model(&out, &trainer.model, &trainer.cfg.tcu)?;
            println!("continued {steps} interpolation-free steps; checkpoint {}", out.display());
        }
        Cmd::Upsample {
            ckpt,
            flow_lr,
            image,
            out,
        } => {
            let (model, _) = train::load_model(&ckpt)?;
            let flow = flo::flo_read(&flow_lr)?;
            let img = ppm::ppm_read(&image)?;
            let tape = Tape::no_grad();
            let up = model.forward_last(&tape, &img, &flow)?;
            flo::flo_write(&out, &up)?;
            println!("upsampled {:?} -> {:?} into {}", flow.shape(), up.shape(), out.display());
        }
        Cmd::EvalDetail { pred, gt, out } => {
            let gt_entries = dataset::list_dataset(&gt)?;
            let mut pairs = Vec::new();
            for e in &gt_entries {
                let g = flo::flo_read(&e.flow_path)?;
                let p = flo::flo_read(&pred.join(format!("{}.flo", e.id)))?;
                pairs.push((p, g));
            }
            let refs: Vec<(&_, &_)> = pairs.iter().map(|(p, g)| (p, g)).collect();
            let report = eval::bucket_report(&refs)?;
            report.check_consistency()?;
            std::fs::write(&out, report.to_csv())?;
            print!("{}", report.to_table());
        }
        Cmd::HullStudy {
            data,
            masks,
            factor,
            out,
        } => {
            let masks = parse_list(&masks)?;
            let samples = load_samples(&data)?;
            // tensors are not Sync; ship raw buffers to the workers
            let raw: Vec<(Vec<f32>, Vec<usize>)> = samples
                .iter()
                .map(|s| (s.flow.to_vec(), s.flow.shape().to_vec()))
                .collect();
            let per_sample = util::parallel_map(&raw, |(data, shape)| {
                let flow = flowup::tensor::Tensor::new(shape, data.clone())?;
                hull::representability_study(&flow, factor, &masks)
            });
            let mut sums = vec![0f64; masks.len()];
            let mut n = 0usize;
            for r in per_sample {
                let fr = r?;
                for (a, b) in sums.iter_mut().zip(&fr) {
                    *a += b;
                }
                n += 1;
            }
            let mut csv = String::from("mask_size,representable_fraction\n");
            for (m, s) in masks.iter().zip(&sums) {
                let frac = s / n as f64;
                csv.push_str(&format!("{m},{frac:.6}\n"));
                println!("m={m}: {frac:.4} representable");
            }
            std::fs::write(&out, csv)?;
        }
        Cmd::Gradcheck { op } => {
            let checks = gradcheck_suite::all_checks();
            let mut failed = false;
            let mut matched = false;
            for c in checks {
                if let Some(ref name) = op {
                    if c.name != name {
                        continue;
                    }
                }
                matched = true;
                let err = (c.run)()?;
                let ok = err <= gradcheck_suite::TOLERANCE;
                failed |= !ok;
                println!("{:<28} max rel err {err:.3e}  {}", c.name, if ok { "ok" } else { "FAIL" });
            }
            if let Some(name) = op {
                if !matched {
                    return Err(FlowError::Config(format!("unknown op '{name}'")));
                }
            }
            if failed {
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
