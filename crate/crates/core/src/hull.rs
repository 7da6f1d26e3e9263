//! Representability of high-resolution flow under convex upsampling: a value
//! can only be reproduced exactly if it lies in the 2-D convex hull of its
//! low-resolution neighborhood. Larger windows give supersets of neighbors
//! and therefore monotonically non-decreasing representable fractions.

use crate::error::{FlowError, Result};
use crate::tensor::Tensor;

const TOL: f64 = 1e-9;

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Monotone-chain convex hull, counter-clockwise, collinear points dropped.
/// Degenerate inputs come back as fewer than 3 vertices.
fn convex_hull(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut pts: Vec<[f64; 2]> = points.to_vec();
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup_by(|a, b| (a[0] - b[0]).abs() <= TOL && (a[1] - b[1]).abs() <= TOL);
    if pts.len() < 3 {
        return pts;
    }
    let mut lower: Vec<[f64; 2]> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= TOL {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<[f64; 2]> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= TOL {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    if lower.len() < 3 {
        // all points (effectively) collinear: keep the extremes
        return vec![pts[0], pts[pts.len() - 1]];
    }
    lower
}

fn dist2_point_segment(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let dx = p[0] - (a[0] + t * ab[0]);
    let dy = p[1] - (a[1] + t * ab[1]);
    dx * dx + dy * dy
}

fn hull_contains(hull: &[[f64; 2]], p: [f64; 2]) -> bool {
    match hull.len() {
        0 => false,
        1 => dist2_point_segment(p, hull[0], hull[0]) <= TOL * TOL,
        2 => dist2_point_segment(p, hull[0], hull[1]) <= TOL * TOL,
        n => (0..n).all(|i| cross(hull[i], hull[(i + 1) % n], p) >= -TOL),
    }
}

/// True iff `target` lies inside (boundary counts) the convex hull of the
/// neighbor flow vectors.
pub fn hull_representable(target: [f64; 2], neighbors: &[[f64; 2]]) -> bool {
    assert!(!neighbors.is_empty(), "need at least one neighbor");
    hull_contains(&convex_hull(neighbors), target)
}

/// Per mask size: the fraction of high-resolution pixels whose ground-truth
/// value is representable from the m x m low-resolution window around the
/// parent pixel.
///
/// Windows are centered and truncated at borders (no shifting), so the m1
/// window is a subset of the m2 window whenever m1 < m2, which makes the
/// fractions provably monotone in m.
pub fn representability_study(
    flow_hr: &Tensor<f32>,
    factor: usize,
    mask_sizes: &[usize],
) -> Result<Vec<f64>> {
    let s = flow_hr.shape();
    if s.len() != 3 || s[0] != 2 {
        return Err(FlowError::Shape {
            op: "representability_study",
            detail: format!("expected [2,H,W], got {:?}", s),
        });
    }
    let (hh, hw) = (s[1], s[2]);
    if factor == 0 || hh % factor != 0 || hw % factor != 0 {
        return Err(FlowError::Config(format!(
            "dims {}x{} not divisible by factor {}",
            hh, hw, factor
        )));
    }
    let (lh, lw) = (hh / factor, hw / factor);
    let hr = flow_hr.to_vec();

    // block-average downsample
    let mut lr = vec![[0f64; 2]; lh * lw];
    for py in 0..lh {
        for px in 0..lw {
            let mut acc = [0f64; 2];
            for dy in 0..factor {
                for dx in 0..factor {
                    let idx = (py * factor + dy) * hw + px * factor + dx;
                    acc[0] += hr[idx] as f64;
                    acc[1] += hr[hh * hw + idx] as f64;
                }
            }
            let n = (factor * factor) as f64;
            lr[py * lw + px] = [acc[0] / n, acc[1] / n];
        }
    }

    let mut fractions = Vec::with_capacity(mask_sizes.len());
    for &m in mask_sizes {
        if m == 0 || m % 2 == 0 {
            return Err(FlowError::Config(format!("mask size {} must be odd", m)));
        }
        let r = (m / 2) as isize;
        let mut representable = 0usize;
        let mut neighbors: Vec<[f64; 2]> = Vec::with_capacity(m * m);
        for py in 0..lh {
            for px in 0..lw {
                neighbors.clear();
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (ny, nx) = (py as isize + dy, px as isize + dx);
                        if ny >= 0 && ny < lh as isize && nx >= 0 && nx < lw as isize {
                            neighbors.push(lr[ny as usize * lw + nx as usize]);
                        }
                    }
                }
                // hull is shared by the whole factor x factor cell
                let hull = convex_hull(&neighbors);
                for dy in 0..factor {
                    for dx in 0..factor {
                        let idx = (py * factor + dy) * hw + px * factor + dx;
                        let t = [hr[idx] as f64, hr[hh * hw + idx] as f64];
                        if hull_contains(&hull, t) {
                            representable += 1;
                        }
                    }
                }
            }
        }
        fractions.push(representable as f64 / (hh * hw) as f64);
    }
    Ok(fractions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn target_equals_a_neighbor() {
        let ns = [[0.0, 0.0], [3.0, 1.0], [1.0, 4.0]];
        for n in ns {
            assert!(hull_representable(n, &ns));
        }
    }

    #[test]
    fn target_is_mean_of_neighbors() {
        let ns = [[0.0, 0.0], [3.0, 0.0], [0.0, 3.0]];
        assert!(hull_representable([1.0, 1.0], &ns));
    }

    #[test]
    fn target_outside_bounding_box() {
        let ns = [[0.0, 0.0], [1.0, 0.0], [0.5, 1.0]];
        assert!(!hull_representable([2.0, 0.5], &ns));
        assert!(!hull_representable([0.5, -0.1], &ns));
    }

    #[test]
    fn outside_hull_inside_bounding_box() {
        // triangle (0,0)-(2,0)-(0,2); (1.5,1.5) is in the bbox but not the hull
        let ns = [[0.0, 0.0], [2.0, 0.0], [0.0, 2.0]];
        assert!(!hull_representable([1.5, 1.5], &ns));
        assert!(hull_representable([1.0, 1.0], &ns)); // hypotenuse boundary
    }

    #[test]
    fn degenerate_collinear_and_single() {
        let line = [[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]];
        assert!(hull_representable([1.5, 1.5], &line));
        assert!(!hull_representable([1.5, 1.6], &line));
        assert!(hull_representable([5.0, -2.0], &[[5.0, -2.0]]));
        assert!(!hull_representable([5.0, -2.1], &[[5.0, -2.0]]));
    }

    #[test]
    fn constant_flow_fully_representable() {
        let mut data = vec![0.7f32; 32 * 32];
        data.extend(vec![-2.0f32; 32 * 32]);
        let flow = Tensor::new(&[2, 32, 32], data).unwrap();
        let fr = representability_study(&flow, 8, &[1, 3, 5]).unwrap();
        for f in fr {
            assert_eq!(f, 1.0);
        }
    }

    #[test]
    fn m1_needs_exact_parent_match() {
        // left half moves (1,0), right half (0,0): cells on the boundary
        // average to something no pixel holds, interior cells are constant.
        let (h, w, f) = (16usize, 16usize, 4usize);
        let mut data = vec![0f32; 2 * h * w];
        for y in 0..h {
            for x in 0..w {
                if x < 6 {
                    data[y * w + x] = 1.0;
                }
            }
        }
        let flow = Tensor::new(&[2, h, w], data).unwrap();
        let fr = representability_study(&flow, f, &[1]).unwrap();
        // parent column 1 spans x 4..8, mixing values 1 and 0
        let mixed_cells = (h / f) as f64;
        let total_cells = ((h / f) * (w / f)) as f64;
        let expected = (total_cells - mixed_cells) / total_cells;
        assert!((fr[0] - expected).abs() < 1e-12, "{fr:?} vs {expected}");
    }

    #[test]
    fn thin_structure_monotone_and_strict() {
        // Background motion A everywhere, motion B as one solid 8x8 cell at
        // cell (2,2) plus 2x2 flecks at cells (2,4) and (2,5). The fleck
        // pixels need a pure-B cell in their window to be representable:
        // out of reach for m=3, in reach for m=9.
        let (h, w, f) = (64usize, 64usize, 8usize);
        let mut data = vec![0f32; 2 * h * w];
        let mut set = |y: usize, x: usize, u: f32, v: f32| {
            data[y * w + x] = u;
            data[h * w + y * w + x] = v;
        };
        for y in 0..h {
            for x in 0..w {
                set(y, x, 3.0, -1.0);
            }
        }
        let mut set_b = |ys: std::ops::Range<usize>, xs: std::ops::Range<usize>| {
            for y in ys {
                for x in xs.clone() {
                    data[y * w + x] = -2.0;
                    data[h * w + y * w + x] = 2.0;
                }
            }
        };
        set_b(16..24, 16..24);
        set_b(19..21, 35..37);
        set_b(19..21, 43..45);
        let flow = Tensor::new(&[2, h, w], data).unwrap();
        let fr = representability_study(&flow, f, &[3, 5, 9]).unwrap();
        assert!(fr[2] >= fr[1] && fr[1] >= fr[0], "{fr:?}");
        assert!(fr[2] > fr[0], "{fr:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn monotone_in_mask_size(seed in 0u64..1000) {
            let mut s = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
            let mut next = move || {
                s ^= s << 13; s ^= s >> 7; s ^= s << 17;
                (s as f64 / u64::MAX as f64) as f32 * 16.0 - 8.0
            };
            let (h, w) = (32usize, 32usize);
            let data: Vec<f32> = (0..2 * h * w).map(|_| next()).collect();
            let flow = Tensor::new(&[2, h, w], data).unwrap();
            let fr = representability_study(&flow, 8, &[1, 3, 5, 7, 9]).unwrap();
            for pair in fr.windows(2) {
                prop_assert!(pair[1] >= pair[0], "{fr:?}");
            }
        }

        #[test]
        fn convex_combination_is_representable(
            pts in prop::collection::vec((-8.0f64..8.0, -8.0f64..8.0), 3..12),
            ws in prop::collection::vec(0.01f64..1.0, 12),
        ) {
            let ns: Vec<[f64;2]> = pts.iter().map(|&(a, b)| [a, b]).collect();
            let total: f64 = ws[..ns.len()].iter().sum();
            let mut t = [0f64; 2];
            for (p, w) in ns.iter().zip(&ws) {
                t[0] += p[0] * w / total;
                t[1] += p[1] * w / total;
            }
            prop_assert!(hull_representable(t, &ns));
        }
    }
}
