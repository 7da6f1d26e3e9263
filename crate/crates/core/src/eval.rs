//! End-point-error metrics and detail-stratified reporting: Sobel edge maps
//! of the ground-truth flow, 32x32 patch detail scores, 0.02-wide detail
//! buckets, and per-bucket EPE statistics.

use std::fmt::Write as _;

use crate::error::{FlowError, Result};
use crate::tensor::Tensor;

pub const PATCH: usize = 32;
pub const BUCKET_WIDTH: f64 = 0.02;
pub const NUM_BUCKETS: usize = 19;
pub const DEFAULT_EDGE_THRESHOLD: f64 = 8.0;

/// Mean EPE plus the per-pixel error map [H,W].
pub fn epe(pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<(f64, Vec<f64>)> {
    let s = pred.shape();
    if s != gt.shape() || s.len() != 3 || s[0] != 2 {
        return Err(FlowError::Shape {
            op: "epe",
            detail: format!("pred {:?} vs gt {:?}", s, gt.shape()),
        });
    }
    let n = s[1] * s[2];
    let p = pred.to_vec();
    let g = gt.to_vec();
    let mut map = Vec::with_capacity(n);
    let mut total = 0f64;
    for i in 0..n {
        let du = (p[i] - g[i]) as f64;
        let dv = (p[n + i] - g[n + i]) as f64;
        let e = (du * du + dv * dv).sqrt();
        total += e;
        map.push(e);
    }
    Ok((total / n as f64, map))
}

/// Binary edge map of a flow field: 3x3 Sobel gradients (replicate border)
/// for both channels, L2 norm of the 4-vector, thresholded.
pub fn detail_map(flow_gt: &Tensor<f32>, threshold: f64) -> Result<Vec<u8>> {
    let s = flow_gt.shape();
    if s.len() != 3 || s[0] != 2 || s[1] < 3 || s[2] < 3 {
        return Err(FlowError::Shape {
            op: "detail_map",
            detail: format!("need [2,H>=3,W>=3], got {:?}", s),
        });
    }
    let (h, w) = (s[1], s[2]);
    let f = flow_gt.to_vec();
    let at = |c: usize, y: isize, x: isize| -> f64 {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        f[c * h * w + y * w + x] as f64
    };
    let mut out = vec![0u8; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut norm2 = 0f64;
            for c in 0..2 {
                let tl = at(c, y - 1, x - 1);
                let tc = at(c, y - 1, x);
                let tr = at(c, y - 1, x + 1);
                let ml = at(c, y, x - 1);
                let mr = at(c, y, x + 1);
                let bl = at(c, y + 1, x - 1);
                let bc = at(c, y + 1, x);
                let br = at(c, y + 1, x + 1);
                let gx = (tr + 2.0 * mr + br) - (tl + 2.0 * ml + bl);
                let gy = (bl + 2.0 * bc + br) - (tl + 2.0 * tc + tr);
                norm2 += gx * gx + gy * gy;
            }
            if norm2.sqrt() >= threshold {
                out[(y * w as isize + x) as usize] = 1;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct BucketRow {
    pub count: usize,
    pub percentage: f64,
    pub rev_cum_percentage: f64,
    pub mean_epe: f64,
    pub contribution: f64,
    pub rev_cum_contribution: f64,
}

/// Per-detail-bucket EPE statistics over non-overlapping 32x32 patches.
#[derive(Debug, Clone)]
pub struct DetailBucketReport {
    pub buckets: Vec<BucketRow>,
    pub total_patches: usize,
    /// Mean of patch-mean EPEs (patches weighted equally).
    pub global_epe: f64,
}

/// Accumulate one or more prediction/GT pairs into a single report.
pub fn bucket_report(pairs: &[(&Tensor<f32>, &Tensor<f32>)]) -> Result<DetailBucketReport> {
    let mut counts = vec![0usize; NUM_BUCKETS];
    let mut err_sums = vec![0f64; NUM_BUCKETS];
    let mut total_patches = 0usize;
    for (pred, gt) in pairs {
        let s = gt.shape();
        if s[1] < PATCH || s[2] < PATCH {
            return Err(FlowError::Shape {
                op: "bucket_report",
                detail: format!("fields must be at least {PATCH}x{PATCH}, got {:?}", s),
            });
        }
        let (_, err) = epe(pred, gt)?;
        let edges = detail_map(gt, DEFAULT_EDGE_THRESHOLD)?;
        let (h, w) = (s[1], s[2]);
        for py in 0..h / PATCH {
            for px in 0..w / PATCH {
                let mut edge_sum = 0usize;
                let mut err_sum = 0f64;
                for y in 0..PATCH {
                    for x in 0..PATCH {
                        let i = (py * PATCH + y) * w + px * PATCH + x;
                        edge_sum += edges[i] as usize;
                        err_sum += err[i];
                    }
                }
                let detail = edge_sum as f64 / (PATCH * PATCH) as f64;
                let b = ((detail / BUCKET_WIDTH) as usize).min(NUM_BUCKETS - 1);
                counts[b] += 1;
                err_sums[b] += err_sum / (PATCH * PATCH) as f64;
                total_patches += 1;
            }
        }
    }
    if total_patches == 0 {
        return Err(FlowError::Config("no complete patches".into()));
    }
    let total_err: f64 = err_sums.iter().sum();
    let mut buckets = vec![BucketRow::default(); NUM_BUCKETS];
    for b in 0..NUM_BUCKETS {
        buckets[b].count = counts[b];
        buckets[b].percentage = 100.0 * counts[b] as f64 / total_patches as f64;
        buckets[b].mean_epe = if counts[b] > 0 {
            err_sums[b] / counts[b] as f64
        } else {
            0.0
        };
        buckets[b].contribution = if total_err > 0.0 {
            100.0 * err_sums[b] / total_err
        } else {
            0.0
        };
    }
    let mut cum_p = 0.0;
    let mut cum_c = 0.0;
    for b in (0..NUM_BUCKETS).rev() {
        cum_p += buckets[b].percentage;
        cum_c += buckets[b].contribution;
        buckets[b].rev_cum_percentage = cum_p;
        buckets[b].rev_cum_contribution = cum_c;
    }
    Ok(DetailBucketReport {
        buckets,
        total_patches,
        global_epe: total_err / total_patches as f64,
    })
}

impl DetailBucketReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "bucket,count,percentage,rev_cum_percentage,mean_epe,contribution,rev_cum_contribution\n",
        );
        for (b, row) in self.buckets.iter().enumerate() {
            let _ = writeln!(
                s,
                "{},{},{:.4},{:.4},{:.6},{:.4},{:.4}",
                b,
                row.count,
                row.percentage,
                row.rev_cum_percentage,
                row.mean_epe,
                row.contribution,
                row.rev_cum_contribution
            );
        }
        let _ = writeln!(s, "total,{},100.0,,{:.6},100.0,", self.total_patches, self.global_epe);
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:>6} {:>8} {:>8} {:>8} {:>10} {:>8} {:>8}\n",
            "bucket", "count", "pct", "cum>=", "mean_epe", "contrib", "cum>="
        );
        for (b, row) in self.buckets.iter().enumerate() {
            let _ = writeln!(
                s,
                "{:>6} {:>8} {:>8.2} {:>8.2} {:>10.4} {:>8.2} {:>8.2}",
                b,
                row.count,
                row.percentage,
                row.rev_cum_percentage,
                row.mean_epe,
                row.contribution,
                row.rev_cum_contribution
            );
        }
        let _ = writeln!(
            s,
            "patches: {}  global patch-mean EPE: {:.4}",
            self.total_patches, self.global_epe
        );
        s
    }

    /// Internal-consistency checks; max absolute violation per invariant.
    pub fn check_consistency(&self) -> Result<()> {
        let pct_sum: f64 = self.buckets.iter().map(|b| b.percentage).sum();
        if (pct_sum - 100.0).abs() > 0.1 {
            return Err(FlowError::Config(format!("percentages sum to {pct_sum}")));
        }
        let count_sum: usize = self.buckets.iter().map(|b| b.count).sum();
        if count_sum != self.total_patches {
            return Err(FlowError::Config("counts do not sum to total".into()));
        }
        if (self.buckets[0].rev_cum_percentage - 100.0).abs() > 0.1 {
            return Err(FlowError::Config("reverse cumulative does not start at 100".into()));
        }
        for pair in self.buckets.windows(2) {
            if pair[1].rev_cum_percentage > pair[0].rev_cum_percentage + 1e-9
                || pair[1].rev_cum_contribution > pair[0].rev_cum_contribution + 1e-9
            {
                return Err(FlowError::Config("reverse cumulative not monotone".into()));
            }
        }
        let weighted: f64 = self
            .buckets
            .iter()
            .map(|b| b.count as f64 * b.mean_epe)
            .sum::<f64>()
            / self.total_patches as f64;
        if (weighted - self.global_epe).abs() > 1e-6 {
            return Err(FlowError::Config(format!(
                "EPE decomposition off: {weighted} vs {}",
                self.global_epe
            )));
        }
        Ok(())
    }
}

/// Mean EPE restricted to pixels flagged by the ground-truth edge map.
pub fn edge_epe(pred: &Tensor<f32>, gt: &Tensor<f32>, threshold: f64) -> Result<f64> {
    let (_, err) = epe(pred, gt)?;
    let edges = detail_map(gt, threshold)?;
    let mut total = 0f64;
    let mut n = 0usize;
    for (e, m) in err.iter().zip(&edges) {
        if *m == 1 {
            total += e;
            n += 1;
        }
    }
    if n == 0 {
        return Err(FlowError::Config("no edge pixels in ground truth".into()));
    }
    Ok(total / n as f64)
}
