//! Cameras, voxel grids, depth bins and ego-motion warping of BEV maps.
//!
//! Coordinate conventions:
//! * pixel `(u, v)`: `u` runs along image columns, `v` along rows; the
//!   center of pixel `(row, col)` is `(col + 0.5, row + 0.5)`.
//! * depth `d` is the camera-frame `z`, so `world = E · (d · K⁻¹ · (u, v, 1))`.
//! * voxel coordinates are `(world - origin) / cell_size`; voxel `(h, w, z)`
//!   covers `[h, h + 1) × [w, w + 1) × [z, z + 1)` and `h`, `w`, `z` follow the
//!   world `x`, `y`, `z` axes.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numgrad::{forward_op, Op, Tape, Tensor, Var};

pub type Mat3 = [[f64; 3]; 3];
pub type Mat4 = [[f64; 4]; 4];

const ORTHO_TOL: f64 = 1e-9;

pub fn mat3_mul_vec(m: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

fn mat3_det(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

pub fn mat3_inverse(m: &Mat3) -> Option<Mat3> {
    let det = mat3_det(m);
    if det.abs() < 1e-300 || !det.is_finite() {
        return None;
    }
    let mut inv = [[0.0; 3]; 3];
    for (i, row) in inv.iter_mut().enumerate() {
        for (j, out) in row.iter_mut().enumerate() {
            // cofactor of (j, i)
            let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
            let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
            *out = (m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]) / det;
        }
    }
    Some(inv)
}

fn rotation_block(m: &Mat4) -> Mat3 {
    [
        [m[0][0], m[0][1], m[0][2]],
        [m[1][0], m[1][1], m[1][2]],
        [m[2][0], m[2][1], m[2][2]],
    ]
}

fn check_rigid(m: &Mat4, what: &str) -> Result<()> {
    if m.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(what.to_string()));
    }
    let r = rotation_block(m);
    for i in 0..3 {
        for j in 0..3 {
            let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
            let want = if i == j { 1.0 } else { 0.0 };
            if (dot - want).abs() > ORTHO_TOL {
                return Err(Error::invalid(format!(
                    "{what}: rotation block is not orthonormal"
                )));
            }
        }
    }
    if m[3] != [0.0, 0.0, 0.0, 1.0] {
        return Err(Error::invalid(format!("{what}: last row must be 0 0 0 1")));
    }
    Ok(())
}

fn rigid_apply(m: &Mat4, p: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2] + m[0][3],
        m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2] + m[1][3],
        m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2] + m[2][3],
    ]
}

/// Inverse of a rigid transform, `[Rᵀ | -Rᵀt]`.
pub fn rigid_inverse(m: &Mat4) -> Mat4 {
    let mut inv = [[0.0; 4]; 4];
    for i in 0..3 {
        for j in 0..3 {
            inv[i][j] = m[j][i];
        }
        inv[i][3] = -(0..3).map(|k| m[k][i] * m[k][3]).sum::<f64>();
    }
    inv[3][3] = 1.0;
    inv
}

pub fn identity4() -> Mat4 {
    let mut m = [[0.0; 4]; 4];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    m
}

/// Pinhole camera with a rigid camera-to-world pose.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub intrinsics: Mat3,
    pub extrinsic: Mat4,
    /// Image rows (`X`).
    pub rows: usize,
    /// Image columns (`Y`).
    pub cols: usize,
}

impl CameraModel {
    pub fn new(intrinsics: Mat3, extrinsic: Mat4, rows: usize, cols: usize) -> Result<Self> {
        let cam = CameraModel {
            intrinsics,
            extrinsic,
            rows,
            cols,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera with focal length `focal` (pixels), principal point at the
    /// image center, placed at `center` and looking along `forward`.
    /// Image rows grow along `down`, which must be orthogonal to `forward`.
    pub fn looking(
        focal: f64,
        rows: usize,
        cols: usize,
        center: [f64; 3],
        forward: [f64; 3],
        down: [f64; 3],
    ) -> Result<Self> {
        let f = normalize(forward)?;
        let d = normalize(down)?;
        if dot(f, d).abs() > 1e-9 {
            return Err(Error::invalid("camera forward and down are not orthogonal"));
        }
        // camera axes in world: x = right = down × forward, y = down, z = forward
        let r = cross(d, f);
        let mut e = identity4();
        for k in 0..3 {
            e[k][0] = r[k];
            e[k][1] = d[k];
            e[k][2] = f[k];
            e[k][3] = center[k];
        }
        let k = [
            [focal, 0.0, cols as f64 / 2.0],
            [0.0, focal, rows as f64 / 2.0],
            [0.0, 0.0, 1.0],
        ];
        CameraModel::new(k, e, rows, cols)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::invalid("camera image size must be positive"));
        }
        if mat3_inverse(&self.intrinsics).is_none() {
            return Err(Error::invalid("camera intrinsics are singular"));
        }
        check_rigid(&self.extrinsic, "camera extrinsic")
    }

    pub fn num_pixels(&self) -> usize {
        self.rows * self.cols
    }

    pub fn center(&self) -> [f64; 3] {
        [self.extrinsic[0][3], self.extrinsic[1][3], self.extrinsic[2][3]]
    }

    /// Continuous `(u, v)` of a pixel center.
    pub fn pixel_center(&self, row: usize, col: usize) -> (f64, f64) {
        (col as f64 + 0.5, row as f64 + 0.5)
    }

    fn k_inv(&self) -> Mat3 {
        mat3_inverse(&self.intrinsics).expect("validated intrinsics")
    }

    /// World-frame direction whose camera-frame `z` component is 1, so
    /// the ray parameter along it equals depth.
    pub fn ray_direction(&self, u: f64, v: f64) -> [f64; 3] {
        let c = mat3_mul_vec(&self.k_inv(), [u, v, 1.0]);
        mat3_mul_vec(&rotation_block(&self.extrinsic), c)
    }

    pub fn unproject(&self, u: f64, v: f64, d: f64) -> [f64; 3] {
        let c = mat3_mul_vec(&self.k_inv(), [u, v, 1.0]);
        rigid_apply(&self.extrinsic, [c[0] * d, c[1] * d, c[2] * d])
    }

    /// `(u, v, d)` of a world point; `d` may be non-positive behind the camera.
    pub fn project(&self, p: [f64; 3]) -> (f64, f64, f64) {
        let c = rigid_apply(&rigid_inverse(&self.extrinsic), p);
        let q = mat3_mul_vec(&self.intrinsics, c);
        (q[0] / q[2], q[1] / q[2], c[2])
    }

    /// Partial derivatives of the world point with respect to `u` and `v`
    /// at fixed depth `d`.
    pub fn unproject_jacobian(&self, d: f64) -> [[f64; 3]; 2] {
        let rot = rotation_block(&self.extrinsic);
        let k_inv = self.k_inv();
        let du = mat3_mul_vec(&rot, mat3_mul_vec(&k_inv, [d, 0.0, 0.0]));
        let dv = mat3_mul_vec(&rot, mat3_mul_vec(&k_inv, [0.0, d, 0.0]));
        [du, dv]
    }
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn normalize(v: [f64; 3]) -> Result<[f64; 3]> {
    let n = dot(v, v).sqrt();
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::invalid("zero-length direction"));
    }
    Ok([v[0] / n, v[1] / n, v[2] / n])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoxelGridSpec {
    pub origin: [f64; 3],
    #[serde(default = "default_cell")]
    pub cell_size: f64,
    /// `(H, W, Z)`.
    pub dims: [usize; 3],
}

fn default_cell() -> f64 {
    0.4
}

impl VoxelGridSpec {
    pub fn new(origin: [f64; 3], cell_size: f64, dims: [usize; 3]) -> Result<Self> {
        let g = VoxelGridSpec {
            origin,
            cell_size,
            dims,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cell_size > 0.0 && self.cell_size.is_finite()) {
            return Err(Error::invalid("voxel cell size must be positive"));
        }
        if self.dims.contains(&0) {
            return Err(Error::invalid("voxel grid dims must be positive"));
        }
        Ok(())
    }

    pub fn num_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn flat(&self, h: usize, w: usize, z: usize) -> usize {
        (h * self.dims[1] + w) * self.dims[2] + z
    }

    pub fn unflat(&self, idx: usize) -> [usize; 3] {
        let z = idx % self.dims[2];
        let w = (idx / self.dims[2]) % self.dims[1];
        let h = idx / (self.dims[1] * self.dims[2]);
        [h, w, z]
    }

    /// Flat index of integer voxel coordinates, `None` outside the grid.
    pub fn flat_checked(&self, c: [i64; 3]) -> Option<usize> {
        for (k, &v) in c.iter().enumerate() {
            if v < 0 || v as usize >= self.dims[k] {
                return None;
            }
        }
        Some(self.flat(c[0] as usize, c[1] as usize, c[2] as usize))
    }

    pub fn world_to_vcs(&self, p: [f64; 3]) -> [f64; 3] {
        [
            (p[0] - self.origin[0]) / self.cell_size,
            (p[1] - self.origin[1]) / self.cell_size,
            (p[2] - self.origin[2]) / self.cell_size,
        ]
    }

    pub fn vcs_to_world(&self, c: [f64; 3]) -> [f64; 3] {
        [
            self.origin[0] + c[0] * self.cell_size,
            self.origin[1] + c[1] * self.cell_size,
            self.origin[2] + c[2] * self.cell_size,
        ]
    }

    pub fn voxel_center(&self, h: usize, w: usize, z: usize) -> [f64; 3] {
        self.vcs_to_world([h as f64 + 0.5, w as f64 + 0.5, z as f64 + 0.5])
    }
}

/// Image coordinates to continuous voxel coordinates.
pub fn ics_to_vcs(cam: &CameraModel, grid: &VoxelGridSpec, u: f64, v: f64, d: f64) -> [f64; 3] {
    grid.world_to_vcs(cam.unproject(u, v, d))
}

/// Inverse of [`ics_to_vcs`]: `(u, v, d)` of a continuous voxel coordinate.
pub fn vcs_to_ics(cam: &CameraModel, grid: &VoxelGridSpec, c: [f64; 3]) -> (f64, f64, f64) {
    cam.project(grid.vcs_to_world(c))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthBinSpec {
    pub d_min: f64,
    pub d_max: f64,
    pub centers: Vec<f64>,
}

/// `D` equal-width bins over `[d_min, d_max]`, centers at bin midpoints.
pub fn uniform_depth_bins(d_min: f64, d_max: f64, count: usize) -> Result<DepthBinSpec> {
    if count < 2 {
        return Err(Error::invalid(format!("need at least 2 depth bins, got {count}")));
    }
    if !(d_min < d_max) || !d_min.is_finite() || !d_max.is_finite() {
        return Err(Error::invalid(format!(
            "depth range [{d_min}, {d_max}] is empty"
        )));
    }
    let width = (d_max - d_min) / count as f64;
    let centers = (0..count)
        .map(|k| d_min + (k as f64 + 0.5) * width)
        .collect();
    let spec = DepthBinSpec {
        d_min,
        d_max,
        centers,
    };
    spec.validate()?;
    Ok(spec)
}

impl DepthBinSpec {
    pub fn validate(&self) -> Result<()> {
        if self.centers.len() < 2 || !(self.d_min < self.d_max) {
            return Err(Error::invalid("depth bins need D >= 2 and d_min < d_max"));
        }
        if self.centers.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::invalid("depth bin centers must increase strictly"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    /// Probability vector for an observed depth: linear split between the
    /// two neighboring centers, one-hot at the ends of the range.
    pub fn soft_one_hot(&self, depth: f64) -> Vec<f64> {
        let n = self.centers.len();
        let mut p = vec![0.0; n];
        if !depth.is_finite() || depth >= self.centers[n - 1] {
            p[n - 1] = 1.0;
            return p;
        }
        if depth <= self.centers[0] {
            p[0] = 1.0;
            return p;
        }
        let hi = self.centers.partition_point(|&c| c <= depth);
        let lo = hi - 1;
        let t = (depth - self.centers[lo]) / (self.centers[hi] - self.centers[lo]);
        p[lo] = 1.0 - t;
        p[hi] = t;
        p
    }
}

/// Rigid transform taking frame `t-1` ego coordinates into frame `t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EgoMotion {
    pub matrix: Mat4,
}

impl Default for EgoMotion {
    fn default() -> Self {
        EgoMotion::identity()
    }
}

impl EgoMotion {
    pub fn new(matrix: Mat4) -> Result<Self> {
        check_rigid(&matrix, "ego motion")?;
        Ok(EgoMotion { matrix })
    }

    pub fn identity() -> Self {
        EgoMotion {
            matrix: identity4(),
        }
    }

    /// Rotation by `yaw` about `z` followed by a translation.
    pub fn planar(yaw: f64, tx: f64, ty: f64) -> Self {
        let (s, c) = yaw.sin_cos();
        let mut m = identity4();
        m[0][0] = c;
        m[0][1] = -s;
        m[1][0] = s;
        m[1][1] = c;
        m[0][3] = tx;
        m[1][3] = ty;
        EgoMotion { matrix: m }
    }

    pub fn validate(&self) -> Result<()> {
        check_rigid(&self.matrix, "ego motion")
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        rigid_apply(&self.matrix, p)
    }

    pub fn inverse(&self) -> EgoMotion {
        EgoMotion {
            matrix: rigid_inverse(&self.matrix),
        }
    }
}

/// Geometry of the downsampled BEV plane of a voxel grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BevPlane {
    pub rows: usize,
    pub cols: usize,
    /// Edge length of one BEV cell in meters.
    pub cell: f64,
    pub origin: [f64; 2],
}

impl BevPlane {
    pub fn new(grid: &VoxelGridSpec, factor: usize) -> Result<Self> {
        if factor == 0 || !grid.dims[0].is_multiple_of(factor) || !grid.dims[1].is_multiple_of(factor) {
            return Err(Error::invalid(format!(
                "downsample factor {factor} does not divide grid {:?}",
                grid.dims
            )));
        }
        Ok(BevPlane {
            rows: grid.dims[0] / factor,
            cols: grid.dims[1] / factor,
            cell: grid.cell_size * factor as f64,
            origin: [grid.origin[0], grid.origin[1]],
        })
    }

    pub fn num_cells(&self) -> usize {
        self.rows * self.cols
    }

    /// For every current-frame cell, the cell-index position in the previous
    /// frame's map that lands on its center after ego motion. Integer
    /// positions are cell centers.
    pub fn warp_positions(&self, motion: &EgoMotion) -> Vec<Option<[f64; 2]>> {
        let inv = motion.inverse().matrix;
        // In index units: q_prev = R⁻¹ q + (R⁻¹ (o - t) - o) / s, with the
        // inverse already holding R⁻¹ and -R⁻¹ t.
        let o = self.origin;
        let shift = [
            (inv[0][0] * o[0] + inv[0][1] * o[1] + inv[0][3] - o[0]) / self.cell,
            (inv[1][0] * o[0] + inv[1][1] * o[1] + inv[1][3] - o[1]) / self.cell,
        ];
        let mut out = Vec::with_capacity(self.num_cells());
        for i in 0..self.rows {
            for j in 0..self.cols {
                let q = [i as f64 + 0.5, j as f64 + 0.5];
                let p0 = inv[0][0] * q[0] + inv[0][1] * q[1] + shift[0];
                let p1 = inv[1][0] * q[0] + inv[1][1] * q[1] + shift[1];
                out.push(Some([p0 - 0.5, p1 - 0.5]));
            }
        }
        out
    }
}

fn bev_plane_for(prev: &[usize], grid: &VoxelGridSpec) -> Result<(BevPlane, usize)> {
    if prev.len() != 3 || prev[0] == 0 || prev[1] == 0 {
        return Err(Error::shape("warp_bev", format!("expected [H', W', C], got {prev:?}")));
    }
    let factor = grid.dims[0] / prev[0];
    let plane = BevPlane::new(grid, factor)?;
    if plane.rows != prev[0] || plane.cols != prev[1] {
        return Err(Error::shape(
            "warp_bev",
            format!("map {prev:?} does not tile grid {:?}", grid.dims),
        ));
    }
    Ok((plane, prev[2]))
}

/// Resamples the previous frame's `[H', W', C]` BEV map into the current
/// frame. Samples falling outside the previous map read zero.
pub fn warp_bev(prev: &Tensor, motion: &EgoMotion, grid: &VoxelGridSpec) -> Result<Tensor> {
    let (plane, c) = bev_plane_for(prev.shape(), grid)?;
    let op = Op::BilinearSample2d {
        coords: Arc::new(plane.warp_positions(motion)),
    };
    forward_op(&op, &[prev])?.reshaped(vec![plane.rows, plane.cols, c])
}

/// Differentiable [`warp_bev`] over a tape variable.
pub fn warp_bev_var(
    tape: &mut Tape,
    prev: Var,
    motion: &EgoMotion,
    grid: &VoxelGridSpec,
) -> Result<Var> {
    let (plane, c) = bev_plane_for(tape.value(prev).shape(), grid)?;
    let s = tape.bilinear_sample_2d(prev, Arc::new(plane.warp_positions(motion)))?;
    tape.reshape(s, vec![plane.rows, plane.cols, c])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn axis_camera() -> CameraModel {
        CameraModel::looking(2.0, 4, 4, [0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, -1.0])
            .unwrap()
    }

    #[test]
    fn origin_point_voxel_coordinates() {
        let grid = VoxelGridSpec::new([-40.0, -40.0, -1.0], 0.4, [200, 200, 16]).unwrap();
        let c = grid.world_to_vcs([0.0, 0.0, 0.0]);
        assert!((c[0] - 100.0).abs() < 1e-12);
        assert!((c[1] - 100.0).abs() < 1e-12);
        assert!((c[2] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn optical_axis_maps_along_h() {
        let cam = axis_camera();
        let grid = VoxelGridSpec::new([-1.0, -2.0, -2.0], 0.5, [8, 8, 8]).unwrap();
        let d_min = 1.0;
        let p = ics_to_vcs(&cam, &grid, 2.0, 2.0, d_min);
        assert!((p[0] - (d_min - grid.origin[0]) / 0.5).abs() < 1e-12);
        assert!((p[1] - 4.0).abs() < 1e-12);
        assert!((p[2] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_bins() {
        assert_eq!(uniform_depth_bins(0.0, 4.0, 4).unwrap().centers, vec![0.5, 1.5, 2.5, 3.5]);
        let b = uniform_depth_bins(2.0, 52.0, 50).unwrap();
        for w in b.centers.windows(2) {
            assert!((w[1] - w[0] - 1.0).abs() < 1e-12);
        }
        assert!(uniform_depth_bins(3.0, 3.0, 4).is_err());
        assert!(uniform_depth_bins(0.0, 1.0, 1).is_err());
    }

    #[test]
    fn soft_one_hot_splits_between_centers() {
        let b = uniform_depth_bins(0.0, 4.0, 4).unwrap();
        assert_eq!(b.soft_one_hot(1.5), vec![0.0, 1.0, 0.0, 0.0]);
        assert_eq!(b.soft_one_hot(1.75), vec![0.0, 0.75, 0.25, 0.0]);
        assert_eq!(b.soft_one_hot(0.1), vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(b.soft_one_hot(f64::INFINITY), vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn camera_rejects_non_orthonormal_pose() {
        let mut e = identity4();
        e[0][0] = 2.0;
        let k = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(CameraModel::new(k, e, 2, 2).is_err());
        let singular = [[0.0; 3]; 3];
        assert!(CameraModel::new(singular, identity4(), 2, 2).is_err());
    }

    fn bev_grid() -> VoxelGridSpec {
        VoxelGridSpec::new([-2.0, -2.0, 0.0], 0.5, [8, 8, 2]).unwrap()
    }

    #[test]
    fn identity_warp_is_exact() {
        let grid = bev_grid();
        let data: Vec<f64> = (0..4 * 4 * 3).map(|i| (i as f64 * 0.37).sin()).collect();
        let prev = Tensor::new(vec![4, 4, 3], data).unwrap();
        let out = warp_bev(&prev, &EgoMotion::identity(), &grid).unwrap();
        assert_eq!(out, prev);
    }

    #[test]
    fn one_cell_translation_shifts_map() {
        let grid = bev_grid();
        let data: Vec<f64> = (0..16).map(|i| i as f64 + 1.0).collect();
        let prev = Tensor::new(vec![4, 4, 1], data.clone()).unwrap();
        // BEV cell is 1.0 m (factor 2 × 0.5 m); move +1 m along x (rows).
        let out = warp_bev(&prev, &EgoMotion::planar(0.0, 1.0, 0.0), &grid).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == 0 { 0.0 } else { data[(i - 1) * 4 + j] };
                assert!((out.data()[i * 4 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn half_cell_translation_splits_one_hot() {
        let grid = bev_grid();
        let mut data = vec![0.0; 16];
        data[5] = 1.0;
        let prev = Tensor::new(vec![4, 4, 1], data).unwrap();
        let out = warp_bev(&prev, &EgoMotion::planar(0.0, 0.0, 0.5), &grid).unwrap();
        let mut expect = vec![0.0; 16];
        expect[5] = 0.5;
        expect[6] = 0.5;
        for (a, b) in out.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
