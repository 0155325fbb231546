//! Brute-force references shared by several test targets.
#![allow(dead_code)]

use occlift::geometry::VoxelGridSpec;
use occlift::io::EMPTY;
use occlift::metrics::{ConfusionCounts, Ray};
use rand::Rng;
use rand_distr::UnitSphere;

/// Occupied voxel containing `p`, if any.
pub fn occupied_at(grid: &VoxelGridSpec, labels: &[u8], p: [f64; 3]) -> Option<usize> {
    let mut c = [0usize; 3];
    for a in 0..3 {
        let x = ((p[a] - grid.origin[a]) / grid.cell_size).floor();
        if x < 0.0 || x >= grid.dims[a] as f64 {
            return None;
        }
        c[a] = x as usize;
    }
    let v = grid.flat(c[0], c[1], c[2]);
    (labels[v] != EMPTY).then_some(v)
}

fn at(o: [f64; 3], d: [f64; 3], t: f64) -> [f64; 3] {
    [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]]
}

/// First occupied voxel along a unit ray, found by marching in steps of
/// `cell / 2000` and bisecting the last free/occupied bracket.
/// Returns `(voxel, t, class)`, with `(None, inf, EMPTY)` on a miss.
pub fn march(grid: &VoxelGridSpec, labels: &[u8], origin: [f64; 3], dir: [f64; 3]) -> (Option<usize>, f64, u8) {
    let step = grid.cell_size / 2000.0;
    let center: Vec<f64> = (0..3)
        .map(|a| grid.origin[a] + 0.5 * grid.cell_size * grid.dims[a] as f64)
        .collect();
    let diag = grid.cell_size * grid.dims.iter().map(|&n| (n * n) as f64).sum::<f64>().sqrt();
    let dist = (0..3).map(|a| (origin[a] - center[a]).powi(2)).sum::<f64>().sqrt();
    let t_max = dist + diag;
    if let Some(v) = occupied_at(grid, labels, origin) {
        return (Some(v), 0.0, labels[v]);
    }
    let mut lo = 0.0;
    let mut k = 1usize;
    loop {
        let t = k as f64 * step;
        if t > t_max {
            return (None, f64::INFINITY, EMPTY);
        }
        if occupied_at(grid, labels, at(origin, dir, t)).is_some() {
            let mut hi = t;
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                if occupied_at(grid, labels, at(origin, dir, mid)).is_some() {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            // identify the voxel just past the boundary, where the ray continues
            let v = occupied_at(grid, labels, at(origin, dir, hi + step * 1e-3))
                .or_else(|| occupied_at(grid, labels, at(origin, dir, hi)))
                .expect("bracket end is occupied");
            return (Some(v), hi, labels[v]);
        }
        lo = t;
        k += 1;
    }
}

/// Ray classification written out case by case.
pub fn oracle_counts(pred: &[(Option<usize>, f64, u8)], gt: &[(Option<usize>, f64, u8)], tau: f64, classes: &[u8]) -> Vec<ConfusionCounts> {
    let mut out = vec![ConfusionCounts::default(); classes.len()];
    let slot = |c: u8| classes.iter().position(|&k| k == c);
    for (p, g) in pred.iter().zip(gt) {
        let gt_hit = g.2 != EMPTY;
        let pred_hit = p.2 != EMPTY;
        if gt_hit && pred_hit && p.2 == g.2 && (p.1 - g.1).abs() <= tau {
            if let Some(i) = slot(g.2) {
                out[i].tp += 1;
            }
        } else {
            if gt_hit {
                if let Some(i) = slot(g.2) {
                    out[i].fn_ += 1;
                }
            }
            if pred_hit {
                if let Some(i) = slot(p.2) {
                    out[i].fp += 1;
                }
            }
        }
    }
    out
}

/// Rays from random origins in the box `[lo, hi]³`, uniform directions.
pub fn random_rays(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<Ray> {
    (0..n)
        .map(|_| Ray {
            origin: [rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)],
            dir: rng.sample(UnitSphere),
        })
        .collect()
}
