#![allow(clippy::needless_range_loop)]

use std::collections::BTreeMap;

use occlift::geometry::{uniform_depth_bins, CameraModel, DepthBinSpec, VoxelGridSpec};
use occlift::lifting::{
    apply_lift, build_transfer_matrix, conditional_matrix, depth_to_occluded, depth_to_occluded_var,
    DenoiseSchedule, DepthDistribution, InterObjectTransfer, OcclusionKernel, SparseTransferMatrix,
};
use occlift::numgrad::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_depth(p: usize, d: usize, rng: &mut ChaCha8Rng) -> DepthDistribution {
    let mut data = Vec::with_capacity(p * d);
    for _ in 0..p {
        let row: Vec<f64> = (0..d).map(|_| rng.gen_range(0.0..1.0)).collect();
        let s: f64 = row.iter().sum();
        data.extend(row.iter().map(|v| v / s));
    }
    DepthDistribution::depth(Tensor::new(vec![p, d], data).unwrap()).unwrap()
}

fn random_kernel(p: usize, d: usize, rng: &mut ChaCha8Rng) -> OcclusionKernel {
    let data = (0..p * (d - 1)).map(|_| rng.gen_range(0.0..=1.0)).collect();
    OcclusionKernel::new(Tensor::new(vec![p, d - 1], data).unwrap()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn occlusion_matches_explicit_matrix_product(p in 1usize..5, d in 2usize..33, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let depth = random_depth(p, d, &mut rng);
        let kernel = random_kernel(p, d, &mut rng);
        let out = depth_to_occluded(&depth, &kernel).unwrap();
        for px in 0..p {
            let g = &kernel.tensor().data()[px * (d - 1)..(px + 1) * (d - 1)];
            let c = conditional_matrix(g);
            for j in 0..d {
                let expect: f64 = (0..d).map(|i| c[i][j] * depth.row(px)[i]).sum();
                prop_assert!((out.row(px)[j] - expect).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn conditional_matrix_structure(d in 2usize..33, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g: Vec<f64> = (0..d - 1).map(|_| rng.gen_range(0.0..=1.0)).collect();
        let c = conditional_matrix(&g);
        for i in 0..d {
            prop_assert_eq!(c[i][i], 1.0);
            for j in 0..i {
                prop_assert_eq!(c[i][j], 0.0);
            }
        }
    }

    #[test]
    fn zero_kernel_is_identity(p in 1usize..5, d in 2usize..33, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let depth = random_depth(p, d, &mut rng);
        let out = depth_to_occluded(&depth, &OcclusionKernel::zeros(p, d)).unwrap();
        prop_assert_eq!(out.tensor().data(), depth.tensor().data());
    }

    #[test]
    fn tape_occlusion_matches_values(p in 1usize..4, d in 2usize..12, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let depth = random_depth(p, d, &mut rng);
        let kernel = random_kernel(p, d, &mut rng);
        let expect = depth_to_occluded(&depth, &kernel).unwrap();
        let mut tape = Tape::new();
        let dv = tape.constant(depth.tensor().clone());
        let kv = tape.constant(kernel.tensor().clone());
        let out = depth_to_occluded_var(&mut tape, dv, kv).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(expect.tensor().data()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn occluded_mass_never_below_depth_mass(p in 1usize..4, d in 2usize..20, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let depth = random_depth(p, d, &mut rng);
        let out = depth_to_occluded(&depth, &random_kernel(p, d, &mut rng)).unwrap();
        for (o, x) in out.tensor().data().iter().zip(depth.tensor().data()) {
            prop_assert!(*o >= *x);
        }
    }
}

#[test]
fn denoise_weight_endpoints_and_monotone() {
    let e = 60;
    let s = DenoiseSchedule::at(e, 0);
    assert_eq!(s.gt_weight(), 1.0);
    assert_eq!(DenoiseSchedule::at(e, e).gt_weight(), 0.0);
    assert!((DenoiseSchedule::at(e, e / 2).gt_weight() - 0.5).abs() < 1e-15);
    assert_eq!(DenoiseSchedule::at(e, e + 1).gt_weight(), 0.0);
    assert_eq!(DenoiseSchedule::inference().gt_weight(), 0.0);
    assert_eq!(DenoiseSchedule::at(0, 0).gt_weight(), 0.0);
    let mut prev = f64::INFINITY;
    for k in 0..1000 {
        let w = s.weight_at(Some(e as f64 * k as f64 / 999.0));
        assert!(w <= prev);
        prev = w;
    }
}

fn test_camera() -> CameraModel {
    CameraModel::looking(3.0, 4, 5, [-0.9, 0.85, 0.7], [1.0, 0.1, 0.0], [0.0, 0.0, -1.0]).unwrap()
}

fn test_setup() -> (CameraModel, DepthBinSpec, VoxelGridSpec) {
    let bins = uniform_depth_bins(0.3, 2.7, 6).unwrap();
    let grid = VoxelGridSpec::new([0.0, 0.0, 0.0], 0.4, [5, 4, 4]).unwrap();
    (test_camera(), bins, grid)
}

/// Pinhole point from first principles: `R · d K⁻¹ [u, v, 1] + t`.
fn pinhole(cam: &CameraModel, u: f64, v: f64, d: f64) -> [f64; 3] {
    let k = cam.intrinsics;
    let c = [(u - k[0][2]) / k[0][0] * d, (v - k[1][2]) / k[1][1] * d, d];
    let e = cam.extrinsic;
    let mut p = [0.0; 3];
    for (r, out) in p.iter_mut().enumerate() {
        *out = e[r][0] * c[0] + e[r][1] * c[1] + e[r][2] * c[2] + e[r][3];
    }
    p
}

fn splat(grid: &VoxelGridSpec, p: [f64; 3], scale: f64, col: usize, keep_zero: bool, acc: &mut BTreeMap<(usize, usize), f64>) {
    let c: Vec<f64> = (0..3).map(|a| (p[a] - grid.origin[a]) / grid.cell_size).collect();
    for dh in 0..2 {
        for dw in 0..2 {
            for dz in 0..2 {
                let corner = [c[0].floor() + dh as f64, c[1].floor() + dw as f64, c[2].floor() + dz as f64];
                let w: f64 = (0..3).map(|a| 1.0 - (c[a] - corner[a]).abs()).product();
                let inside = (0..3).all(|a| corner[a] >= 0.0 && corner[a] < grid.dims[a] as f64);
                if inside && (keep_zero || w > 0.0) {
                    let idx = (corner[0] as usize * grid.dims[1] + corner[1] as usize) * grid.dims[2] + corner[2] as usize;
                    *acc.entry((idx, col)).or_insert(0.0) += w * scale;
                }
            }
        }
    }
}

fn oracle_matrix(
    cam: &CameraModel,
    bins: &DepthBinSpec,
    grid: &VoxelGridSpec,
    occ: &DepthDistribution,
    inter: Option<&InterObjectTransfer>,
) -> BTreeMap<(usize, usize), f64> {
    let mut acc = BTreeMap::new();
    for row in 0..cam.rows {
        for col in 0..cam.cols {
            let px = row * cam.cols + col;
            let (u, v) = (col as f64 + 0.5, row as f64 + 0.5);
            for (b, &d) in bins.centers.iter().enumerate() {
                splat(grid, pinhole(cam, u, v, d), occ.row(px)[b], px, false, &mut acc);
            }
            if let Some(t) = inter {
                for s in px * t.m..(px + 1) * t.m {
                    let b = t.selected[s];
                    let [du, dv] = t.offsets[s];
                    let p = pinhole(cam, u + du, v + dv, bins.centers[b]);
                    splat(grid, p, occ.row(px)[b] * t.weights[s], px, true, &mut acc);
                }
            }
        }
    }
    acc.retain(|_, w| *w != 0.0);
    acc
}

fn assert_same(m: &SparseTransferMatrix, oracle: &BTreeMap<(usize, usize), f64>) {
    let got: BTreeMap<(usize, usize), f64> = m.triplets().into_iter().map(|(r, c, w)| ((r, c), w)).collect();
    assert_eq!(got.len(), oracle.len(), "sparsity pattern differs");
    for (k, w) in oracle {
        let g = got.get(k).unwrap_or_else(|| panic!("missing entry {k:?}"));
        assert!((g - w).abs() <= 1e-12 * w.abs().max(1.0), "{k:?}: {g} vs {w}");
    }
}

#[test]
fn transfer_matrix_matches_brute_force_splat() {
    let (cam, bins, grid) = test_setup();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let occ = random_depth(cam.num_pixels(), bins.len(), &mut rng);
    let m = build_transfer_matrix(&occ, std::slice::from_ref(&cam), &bins, &grid, None).unwrap();
    assert_same(&m, &oracle_matrix(&cam, &bins, &grid, &occ, None));
}

#[test]
fn inter_object_points_match_shifted_pixels() {
    let (cam, bins, grid) = test_setup();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let p = cam.num_pixels();
    let occ = random_depth(p, bins.len(), &mut rng);
    let m = 2;
    let inter = InterObjectTransfer {
        m,
        selected: (0..p * m).map(|_| rng.gen_range(0..bins.len())).collect(),
        offsets: (0..p * m).map(|_| [rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8)]).collect(),
        weights: (0..p * m).map(|_| rng.gen_range(0.0..1.0)).collect(),
    };
    let got = build_transfer_matrix(&occ, std::slice::from_ref(&cam), &bins, &grid, Some(&inter)).unwrap();
    assert_same(&got, &oracle_matrix(&cam, &bins, &grid, &occ, Some(&inter)));
}

#[test]
fn lift_matches_dense_product() {
    let (cam, bins, grid) = test_setup();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let p = cam.num_pixels();
    let occ = random_depth(p, bins.len(), &mut rng);
    let m = build_transfer_matrix(&occ, &[cam], &bins, &grid, None).unwrap();
    let f = 3;
    let feats = Tensor::new(vec![p, f], (0..p * f).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let lifted = apply_lift(&m, &feats).unwrap();
    let v = grid.num_voxels();
    let mut dense = vec![vec![0.0; p]; v];
    for (r, c, w) in m.triplets() {
        dense[r][c] += w;
    }
    for r in 0..v {
        for ch in 0..f {
            let expect: f64 = (0..p).map(|c| dense[r][c] * feats.data()[c * f + ch]).sum();
            assert!((lifted.data()[r * f + ch] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn interior_columns_conserve_mass() {
    // a camera deep inside a large grid keeps every splat corner in bounds
    let cam = CameraModel::looking(2.0, 3, 3, [4.0, 4.0, 4.0], [1.0, 0.0, 0.0], [0.0, 0.0, -1.0]).unwrap();
    let bins = uniform_depth_bins(0.5, 2.5, 5).unwrap();
    let grid = VoxelGridSpec::new([0.0, 0.0, 0.0], 0.4, [20, 20, 20]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let occ = random_depth(9, 5, &mut rng);
    let m = build_transfer_matrix(&occ, &[cam], &bins, &grid, None).unwrap();
    for s in m.column_sums() {
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn triplet_codec_round_trips() {
    let (cam, bins, grid) = test_setup();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let occ = random_depth(cam.num_pixels(), bins.len(), &mut rng);
    let m = build_transfer_matrix(&occ, &[cam], &bins, &grid, None).unwrap();
    let back = SparseTransferMatrix::decode(&m.encode(), m.shape).unwrap();
    assert_eq!(back, m);
}
