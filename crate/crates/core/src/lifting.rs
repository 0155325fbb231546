//! Occlusion-aware adaptive lifting of pixel features into the voxel grid.
//!
//! A pixel's depth distribution is first spread behind each candidate
//! surface bin by a per-pixel occlusion kernel ([`depth_to_occluded`]),
//! then every `(pixel, bin)` point is soft-filled into its eight
//! surrounding lattice voxels. Optionally, the `m` most likely bins of each
//! pixel also emit a displaced copy of themselves (inter-object transfer).
//! All emissions are merged into one canonical [`SparseTransferMatrix`],
//! and [`apply_lift`] multiplies it with the flattened image features.
//!
//! Every operation exists twice: on plain values and on a [`Tape`], where
//! gradients flow into depth logits, kernels, offsets, weights and features.

use std::f64::consts::PI;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::{ics_to_vcs, CameraModel, DepthBinSpec, VoxelGridSpec};
use crate::numgrad::{trilinear_corner_weights, corner_bits, Tape, Tensor, Var};

const SUM_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DepthForm {
    /// Rows are probability vectors.
    Depth,
    /// Rows are voxel weights after occlusion transfer, not normalized.
    OccludedLength,
}

/// Per-pixel vectors over `D` depth bins, stored as a `[pixels, D]` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthDistribution {
    probs: Tensor,
    form: DepthForm,
}

impl DepthDistribution {
    pub fn new(probs: Tensor, form: DepthForm) -> Result<Self> {
        if probs.rank() != 2 || probs.shape()[1] < 2 {
            return Err(Error::shape(
                "depth distribution",
                format!("expected [pixels, D >= 2], got {:?}", probs.shape()),
            ));
        }
        if probs.data().iter().any(|&v| v < 0.0) {
            return Err(Error::invalid("depth distribution has negative entries"));
        }
        if form == DepthForm::Depth {
            for (p, row) in probs.data().chunks(probs.shape()[1]).enumerate() {
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > SUM_TOL {
                    return Err(Error::invalid(format!(
                        "depth distribution of pixel {p} sums to {s}"
                    )));
                }
            }
        }
        Ok(DepthDistribution { probs, form })
    }

    pub fn depth(probs: Tensor) -> Result<Self> {
        DepthDistribution::new(probs, DepthForm::Depth)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.probs
    }

    pub fn form(&self) -> DepthForm {
        self.form
    }

    pub fn pixels(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn bins(&self) -> usize {
        self.probs.shape()[1]
    }

    pub fn row(&self, pixel: usize) -> &[f64] {
        let d = self.bins();
        &self.probs.data()[pixel * d..(pixel + 1) * d]
    }
}

/// Per-pixel likelihoods `g[Δ - 1] = f_ol(x, Δ)` that bin `i + Δ` is still
/// inside the object whose surface is at bin `i`. Shape `[pixels, D - 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct OcclusionKernel {
    values: Tensor,
}

impl OcclusionKernel {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 2 {
            return Err(Error::shape("occlusion kernel", "expected [pixels, D - 1]"));
        }
        if values.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("occlusion kernel entries must lie in [0, 1]"));
        }
        Ok(OcclusionKernel { values })
    }

    pub fn zeros(pixels: usize, bins: usize) -> Self {
        OcclusionKernel {
            values: Tensor::zeros(vec![pixels, bins.saturating_sub(1)]),
        }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.values
    }
}

/// Conditional matrix `C[i][j] = P(occupied at bin j | surface at bin i)`:
/// zero for `j < i`, one on the diagonal, `g[j - i - 1]` above it.
pub fn conditional_matrix(g: &[f64]) -> Vec<Vec<f64>> {
    let d = g.len() + 1;
    let mut c = vec![vec![0.0; d]; d];
    for (i, row) in c.iter_mut().enumerate() {
        row[i] = 1.0;
        for j in i + 1..d {
            row[j] = g[j - i - 1];
        }
    }
    c
}

/// Transfers depth probabilities to occluded-length weights:
/// `out[j] = Σ_{i <= j} C[i][j] · depth[i]`, a per-pixel product with the
/// upper-triangular Toeplitz matrix of [`conditional_matrix`].
pub fn depth_to_occluded(
    depth: &DepthDistribution,
    kernel: &OcclusionKernel,
) -> Result<DepthDistribution> {
    let (p, d) = (depth.pixels(), depth.bins());
    if kernel.values.shape() != [p, d - 1] {
        return Err(Error::shape(
            "depth_to_occluded",
            format!("kernel {:?} for depth [{p}, {d}]", kernel.values.shape()),
        ));
    }
    let mut out = Vec::with_capacity(p * d);
    for px in 0..p {
        let row = depth.row(px);
        let g = &kernel.values.data()[px * (d - 1)..(px + 1) * (d - 1)];
        for j in 0..d {
            let mut acc = row[j];
            for i in 0..j {
                acc += g[j - i - 1] * row[i];
            }
            out.push(acc);
        }
    }
    DepthDistribution::new(Tensor::new(vec![p, d], out)?, DepthForm::OccludedLength)
}

/// Differentiable [`depth_to_occluded`] over `[P, D]` depth and `[P, D-1]`
/// kernel variables.
pub fn depth_to_occluded_var(tape: &mut Tape, depth: Var, kernel: Var) -> Result<Var> {
    let shape = tape.value(depth).shape().to_vec();
    if shape.len() != 2 || tape.value(kernel).shape() != [shape[0], shape[1].saturating_sub(1)] {
        return Err(Error::shape(
            "depth_to_occluded",
            format!("kernel {:?} for depth {shape:?}", tape.value(kernel).shape()),
        ));
    }
    let (p, d) = (shape[0], shape[1]);
    let pairs = p * d * (d - 1) / 2;
    let mut src = Vec::with_capacity(pairs);
    let mut ker = Vec::with_capacity(pairs);
    let mut dst = Vec::with_capacity(pairs);
    for px in 0..p {
        for j in 0..d {
            for i in 0..j {
                src.push(px * d + i);
                ker.push(px * (d - 1) + j - i - 1);
                dst.push(px * d + j);
            }
        }
    }
    let depth_flat = tape.reshape(depth, vec![p * d])?;
    let kernel_flat = tape.reshape(kernel, vec![p * (d - 1)])?;
    let a = tape.gather(depth_flat, Arc::new(src))?;
    let b = tape.gather(kernel_flat, Arc::new(ker))?;
    let prod = tape.mul(a, b)?;
    let spread = tape.scatter_add(prod, Arc::new(dst), p * d)?;
    let out = tape.add(depth_flat, spread)?;
    tape.reshape(out, vec![p, d])
}

/// Cosine-annealed ground-truth weight for depth denoising.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DenoiseSchedule {
    /// Total annealing steps `E`.
    pub total_steps: u64,
    /// Current step `e`; `None` at inference.
    pub step: Option<u64>,
}

impl DenoiseSchedule {
    pub fn at(total_steps: u64, step: u64) -> Self {
        DenoiseSchedule {
            total_steps,
            step: Some(step),
        }
    }

    pub fn inference() -> Self {
        DenoiseSchedule {
            total_steps: 0,
            step: None,
        }
    }

    /// `(1 + cos(π e / E)) / 2` for `e <= E`, zero afterwards and at inference.
    /// `E = 0` disables denoising.
    pub fn gt_weight(&self) -> f64 {
        self.weight_at(self.step.map(|e| e as f64))
    }

    /// [`gt_weight`](Self::gt_weight) at a fractional step.
    pub fn weight_at(&self, step: Option<f64>) -> f64 {
        match step {
            Some(e) if self.total_steps > 0 && e <= self.total_steps as f64 => {
                (1.0 + (PI * e / self.total_steps as f64).cos()) / 2.0
            }
            _ => 0.0,
        }
    }
}

/// `w · gt + (1 - w) · pred` with `w` from the schedule.
pub fn blend_denoise(
    pred: &DepthDistribution,
    gt: &DepthDistribution,
    sched: DenoiseSchedule,
) -> Result<DepthDistribution> {
    if pred.tensor().shape() != gt.tensor().shape() {
        return Err(Error::shape(
            "blend_denoise",
            format!("{:?} vs {:?}", pred.tensor().shape(), gt.tensor().shape()),
        ));
    }
    let w = sched.gt_weight();
    if w == 0.0 {
        return Ok(pred.clone());
    }
    let data = pred
        .tensor()
        .data()
        .iter()
        .zip(gt.tensor().data())
        .map(|(p, g)| w * g + (1.0 - w) * p)
        .collect();
    DepthDistribution::depth(Tensor::new(pred.tensor().shape().to_vec(), data)?)
}

/// Differentiable [`blend_denoise`]; `gt` is treated as a constant.
pub fn blend_denoise_var(tape: &mut Tape, pred: Var, gt: &Tensor, sched: DenoiseSchedule) -> Result<Var> {
    if tape.value(pred).shape() != gt.shape() {
        return Err(Error::shape("blend_denoise", "pred and gt shapes differ"));
    }
    let w = sched.gt_weight();
    if w == 0.0 {
        return Ok(pred);
    }
    let g = tape.constant(gt.clone());
    let g = tape.scale(g, w)?;
    let p = tape.scale(pred, 1.0 - w)?;
    tape.add(g, p)
}

/// Ground-truth depth distributions from rendered depths: linear split
/// between neighboring bin centers; misses (`+∞`) go to the last bin.
pub fn gt_depth_distribution(depths: &[f64], bins: &DepthBinSpec) -> Result<Tensor> {
    let mut data = Vec::with_capacity(depths.len() * bins.len());
    for &d in depths {
        data.extend(bins.soft_one_hot(d));
    }
    Tensor::new(vec![depths.len(), bins.len()], data)
}

/// Indices of the `m` most probable bins of each row, most probable
/// first; ties go to the lower bin.
pub fn select_top_bins(probs: &Tensor, m: usize) -> Result<Vec<usize>> {
    if probs.rank() != 2 || m > probs.shape()[1] {
        return Err(Error::shape(
            "select_top_bins",
            format!("m = {m} for {:?}", probs.shape()),
        ));
    }
    let d = probs.shape()[1];
    let mut out = Vec::with_capacity(probs.shape()[0] * m);
    for row in probs.data().chunks(d) {
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        out.extend_from_slice(&order[..m]);
    }
    Ok(out)
}

/// Displaced copies of the `m` top bins of every pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct InterObjectTransfer {
    pub m: usize,
    /// `pixels * m` bin indices.
    pub selected: Vec<usize>,
    /// `(Δu, Δv)` in pixels per selected point.
    pub offsets: Vec<[f64; 2]>,
    /// `ω ∈ [0, 1]` per selected point.
    pub weights: Vec<f64>,
}

impl InterObjectTransfer {
    pub fn validate(&self, pixels: usize, bins: usize) -> Result<()> {
        let n = pixels * self.m;
        if self.selected.len() != n || self.offsets.len() != n || self.weights.len() != n {
            return Err(Error::shape(
                "inter-object transfer",
                format!("expected {n} selections for {pixels} pixels and m = {}", self.m),
            ));
        }
        if self.selected.iter().any(|&i| i >= bins) {
            return Err(Error::invalid("selected bin out of range"));
        }
        if self.weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(Error::invalid("inter-object weights must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Tape-side inter-object parameters.
#[derive(Clone, Debug)]
pub struct InterObjectVars {
    pub m: usize,
    pub selected: Vec<usize>,
    /// `[pixels * m, 2]`.
    pub offsets: Var,
    /// `[pixels * m]`, values in `[0, 1]`.
    pub weights: Var,
}

impl InterObjectVars {
    pub fn constants(tape: &mut Tape, inter: &InterObjectTransfer) -> Result<Self> {
        let n = inter.selected.len();
        let offsets = tape.constant(Tensor::new(
            vec![n, 2],
            inter.offsets.iter().flat_map(|o| o.iter().copied()).collect(),
        )?);
        let weights = tape.constant(Tensor::vector(inter.weights.clone())?);
        Ok(InterObjectVars {
            m: inter.m,
            selected: inter.selected.clone(),
            offsets,
            weights,
        })
    }
}

/// In-grid trilinear neighbors of a continuous voxel coordinate.
///
/// Returns `(flat voxel index, weight)` for each of the 8 lattice corners
/// that lies inside the grid; the mass of the others is dropped.
pub fn trilinear_weights(grid: &VoxelGridSpec, p: [f64; 3]) -> Vec<(usize, f64)> {
    let base = [p[0].floor(), p[1].floor(), p[2].floor()];
    trilinear_corner_weights(p)
        .iter()
        .enumerate()
        .filter_map(|(k, &w)| corner_voxel(grid, base, k).map(|v| (v, w)))
        .collect()
}

fn corner_voxel(grid: &VoxelGridSpec, base: [f64; 3], k: usize) -> Option<usize> {
    let b = corner_bits(k);
    let mut c = [0i64; 3];
    for a in 0..3 {
        let v = base[a] + b[a] as f64;
        if !(v >= 0.0 && v < grid.dims[a] as f64) {
            return None;
        }
        c[a] = v as i64;
    }
    grid.flat_checked(c)
}

/// Canonical sparse `voxels × pixels` operator.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseTransferMatrix {
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    pub weights: Vec<f64>,
    /// `(H·W·Z, pixels)`.
    pub shape: (usize, usize),
}

impl SparseTransferMatrix {
    /// Sorts triplets by `(row, col)` and sums duplicates. Duplicates are
    /// added in ascending weight order so the result is independent of the
    /// emission order.
    pub fn from_triplets(mut triplets: Vec<(usize, usize, f64)>, shape: (usize, usize)) -> Result<Self> {
        for &(r, c, w) in &triplets {
            if r >= shape.0 || c >= shape.1 {
                return Err(Error::shape(
                    "transfer matrix",
                    format!("triplet ({r}, {c}) outside {shape:?}"),
                ));
            }
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::invalid(format!("triplet weight {w}")));
            }
        }
        triplets.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)).then(a.2.total_cmp(&b.2)));
        let mut m = SparseTransferMatrix {
            rows: Vec::new(),
            cols: Vec::new(),
            weights: Vec::new(),
            shape,
        };
        for (r, c, w) in triplets {
            if m.rows.last() == Some(&r) && m.cols.last() == Some(&c) {
                *m.weights.last_mut().unwrap() += w;
            } else {
                m.rows.push(r);
                m.cols.push(c);
                m.weights.push(w);
            }
        }
        Ok(m)
    }

    pub fn nnz(&self) -> usize {
        self.rows.len()
    }

    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        (0..self.nnz())
            .map(|k| (self.rows[k], self.cols[k], self.weights[k]))
            .collect()
    }

    /// Sum of weights in each column.
    pub fn column_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.shape.1];
        for (c, w) in self.cols.iter().zip(&self.weights) {
            s[*c] += w;
        }
        s
    }

    pub fn encode(&self) -> Vec<u8> {
        crate::io::encode_triplets(&self.triplets())
    }

    pub fn decode(bytes: &[u8], shape: (usize, usize)) -> Result<Self> {
        let triplets = crate::io::decode_triplets(bytes)?;
        let m = SparseTransferMatrix::from_triplets(triplets.clone(), shape)?;
        if m.triplets() != triplets {
            return Err(Error::Format("transfer matrix triplets are not canonical".into()));
        }
        Ok(m)
    }
}

/// Transfer matrix whose weights live on a tape.
#[derive(Clone, Debug)]
pub struct SparseTransferVar {
    pub rows: Arc<Vec<usize>>,
    pub cols: Arc<Vec<usize>>,
    /// `[nnz]`.
    pub weights: Var,
    pub shape: (usize, usize),
}

impl SparseTransferVar {
    /// Snapshot of the current values, dropping exactly-zero triplets.
    pub fn to_matrix(&self, tape: &Tape) -> SparseTransferMatrix {
        let w = tape.value(self.weights).data();
        let mut m = SparseTransferMatrix {
            rows: Vec::new(),
            cols: Vec::new(),
            weights: Vec::new(),
            shape: self.shape,
        };
        for (k, &wk) in w.iter().enumerate() {
            if wk != 0.0 {
                m.rows.push(self.rows[k]);
                m.cols.push(self.cols[k]);
                m.weights.push(wk);
            }
        }
        m
    }
}

/// Pixel and bin geometry shared by every transfer-matrix build.
///
/// Pixels are ordered camera-major, then row, then column.
#[derive(Clone, Debug)]
pub struct LiftGeometry {
    pub grid: VoxelGridSpec,
    pub bins: usize,
    pub pixels: usize,
    /// Voxel coordinate of every `(pixel, bin)` point, `pixels * bins` entries.
    coords: Vec<[f64; 3]>,
    /// Voxel-coordinate change per pixel of `u` and `v`, per `(pixel, bin)`.
    jacobians: Vec<[[f64; 3]; 2]>,
    /// Base emissions: `(voxel, pixel, source (pixel, bin), trilinear weight)`.
    base: Vec<(usize, usize, usize, f64)>,
}

impl LiftGeometry {
    pub fn new(cams: &[CameraModel], bins: &DepthBinSpec, grid: &VoxelGridSpec) -> Result<Self> {
        bins.validate()?;
        grid.validate()?;
        if cams.is_empty() {
            return Err(Error::invalid("lifting needs at least one camera"));
        }
        let d = bins.len();
        let pixels: usize = cams.iter().map(CameraModel::num_pixels).sum();
        let mut coords = Vec::with_capacity(pixels * d);
        let mut jacobians = Vec::with_capacity(pixels * d);
        let mut base = Vec::new();
        let mut pixel = 0;
        for cam in cams {
            cam.validate()?;
            for row in 0..cam.rows {
                for col in 0..cam.cols {
                    let (u, v) = cam.pixel_center(row, col);
                    for (i, &depth) in bins.centers.iter().enumerate() {
                        let p = ics_to_vcs(cam, grid, u, v, depth);
                        let j = cam.unproject_jacobian(depth);
                        let s = grid.cell_size;
                        jacobians.push([
                            [j[0][0] / s, j[0][1] / s, j[0][2] / s],
                            [j[1][0] / s, j[1][1] / s, j[1][2] / s],
                        ]);
                        coords.push(p);
                        for (voxel, w) in trilinear_weights(grid, p) {
                            if w != 0.0 {
                                base.push((voxel, pixel, pixel * d + i, w));
                            }
                        }
                    }
                    pixel += 1;
                }
            }
        }
        Ok(LiftGeometry {
            grid: grid.clone(),
            bins: d,
            pixels,
            coords,
            jacobians,
            base,
        })
    }

    pub fn num_voxels(&self) -> usize {
        self.grid.num_voxels()
    }

    pub fn point(&self, pixel: usize, bin: usize) -> [f64; 3] {
        self.coords[pixel * self.bins + bin]
    }
}

/// Builds the transfer matrix from occluded-length weights (`[P, D]`).
pub fn build_transfer_var(
    tape: &mut Tape,
    geom: &LiftGeometry,
    occ: Var,
    inter: Option<&InterObjectVars>,
) -> Result<SparseTransferVar> {
    let (p, d) = (geom.pixels, geom.bins);
    if tape.value(occ).shape() != [p, d] {
        return Err(Error::shape(
            "build_transfer_matrix",
            format!(
                "weights {:?} for {p} pixels and {d} bins",
                tape.value(occ).shape()
            ),
        ));
    }
    let occ_flat = tape.reshape(occ, vec![p * d])?;

    let mut keys: Vec<(usize, usize)> = geom.base.iter().map(|e| (e.0, e.1)).collect();
    let src: Vec<usize> = geom.base.iter().map(|e| e.2).collect();
    let tri = Tensor::vector(geom.base.iter().map(|e| e.3).collect())?;
    let occ_sel = tape.gather(occ_flat, Arc::new(src))?;
    let tri = tape.constant(tri);
    let mut emitted = tape.mul(occ_sel, tri)?;

    if let Some(inter) = inter {
        let n = p * inter.m;
        if inter.selected.len() != n
            || tape.value(inter.offsets).shape() != [n, 2]
            || tape.value(inter.weights).shape() != [n]
        {
            return Err(Error::shape(
                "build_transfer_matrix",
                format!("inter-object parameters do not match {p} pixels, m = {}", inter.m),
            ));
        }
        if inter.selected.iter().any(|&i| i >= d) {
            return Err(Error::invalid("selected bin out of range"));
        }
        let mut base_coords = Vec::with_capacity(n * 3);
        let mut ju = Vec::with_capacity(n * 3);
        let mut jv = Vec::with_capacity(n * 3);
        let mut sources = Vec::with_capacity(n);
        for (r, &bin) in inter.selected.iter().enumerate() {
            let px = r / inter.m;
            let k = px * d + bin;
            base_coords.extend_from_slice(&geom.coords[k]);
            ju.extend_from_slice(&geom.jacobians[k][0]);
            jv.extend_from_slice(&geom.jacobians[k][1]);
            sources.push(k);
        }
        // coords = base + Δu · ∂p/∂u + Δv · ∂p/∂v
        let sel_u = tape.constant(Tensor::new(vec![2, 1], vec![1.0, 0.0])?);
        let sel_v = tape.constant(Tensor::new(vec![2, 1], vec![0.0, 1.0])?);
        let du = tape.matmul(inter.offsets, sel_u)?;
        let dv = tape.matmul(inter.offsets, sel_v)?;
        let ju = tape.constant(Tensor::new(vec![n, 3], ju)?);
        let jv = tape.constant(Tensor::new(vec![n, 3], jv)?);
        let base_c = tape.constant(Tensor::new(vec![n, 3], base_coords)?);
        let su = tape.mul(du, ju)?;
        let sv = tape.mul(dv, jv)?;
        let shifted = tape.add(su, sv)?;
        let coords = tape.add(base_c, shifted)?;
        let tri = tape.trilinear_scatter_weights(coords)?;

        let coord_vals = tape.value(coords).data().to_vec();
        let mut tri_idx = Vec::new();
        let mut src_idx = Vec::new();
        let mut point_idx = Vec::new();
        for r in 0..n {
            let c = &coord_vals[r * 3..r * 3 + 3];
            let base = [c[0].floor(), c[1].floor(), c[2].floor()];
            for k in 0..8 {
                if let Some(voxel) = corner_voxel(&geom.grid, base, k) {
                    keys.push((voxel, r / inter.m));
                    tri_idx.push(r * 8 + k);
                    src_idx.push(sources[r]);
                    point_idx.push(r);
                }
            }
        }
        let tri_flat = tape.reshape(tri, vec![n * 8])?;
        let tri_sel = tape.gather(tri_flat, Arc::new(tri_idx))?;
        let occ_sel = tape.gather(occ_flat, Arc::new(src_idx))?;
        let om_sel = tape.gather(inter.weights, Arc::new(point_idx))?;
        let w = tape.mul(occ_sel, om_sel)?;
        let w = tape.mul(w, tri_sel)?;
        emitted = tape.concat_lastdim(&[emitted, w])?;
    }

    // Canonical merge: sort emissions by (row, col) and sum duplicates.
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_by_key(|&e| (keys[e], e));
    let mut slot = vec![0usize; keys.len()];
    let mut rows = Vec::new();
    let mut cols = Vec::new();
    for &e in &order {
        let (r, c) = keys[e];
        if rows.last() != Some(&r) || cols.last() != Some(&c) {
            rows.push(r);
            cols.push(c);
        }
        slot[e] = rows.len() - 1;
    }
    let nnz = rows.len();
    let weights = tape.scatter_add(emitted, Arc::new(slot), nnz)?;
    Ok(SparseTransferVar {
        rows: Arc::new(rows),
        cols: Arc::new(cols),
        weights,
        shape: (geom.num_voxels(), p),
    })
}

/// Value-level transfer-matrix build.
pub fn build_transfer_matrix(
    occ: &DepthDistribution,
    cams: &[CameraModel],
    bins: &DepthBinSpec,
    grid: &VoxelGridSpec,
    inter: Option<&InterObjectTransfer>,
) -> Result<SparseTransferMatrix> {
    let geom = LiftGeometry::new(cams, bins, grid)?;
    if occ.pixels() != geom.pixels || occ.bins() != geom.bins {
        return Err(Error::shape(
            "build_transfer_matrix",
            format!(
                "distribution [{}, {}] for {} pixels and {} bins",
                occ.pixels(),
                occ.bins(),
                geom.pixels,
                geom.bins
            ),
        ));
    }
    let mut tape = Tape::new();
    let occ_var = tape.constant(occ.tensor().clone());
    let inter_vars = match inter {
        Some(t) => {
            t.validate(geom.pixels, geom.bins)?;
            Some(InterObjectVars::constants(&mut tape, t)?)
        }
        None => None,
    };
    let m = build_transfer_var(&mut tape, &geom, occ_var, inter_vars.as_ref())?;
    Ok(m.to_matrix(&tape))
}

/// `f_lift[row] = Σ_col M[row, col] · f_image[col]` on a tape.
pub fn apply_lift_var(tape: &mut Tape, m: &SparseTransferVar, features: Var) -> Result<Var> {
    let shape = tape.value(features).shape().to_vec();
    if shape.len() != 2 || shape[0] != m.shape.1 {
        return Err(Error::shape(
            "apply_lift",
            format!("features {shape:?} for a matrix with {} columns", m.shape.1),
        ));
    }
    let nnz = m.rows.len();
    let picked = tape.gather(features, m.cols.clone())?;
    let w = tape.reshape(m.weights, vec![nnz, 1])?;
    let scaled = tape.mul(picked, w)?;
    tape.scatter_add(scaled, m.rows.clone(), m.shape.0)
}

/// Value-level [`apply_lift_var`].
pub fn apply_lift(m: &SparseTransferMatrix, features: &Tensor) -> Result<Tensor> {
    if features.rank() != 2 || features.shape()[0] != m.shape.1 {
        return Err(Error::shape(
            "apply_lift",
            format!("features {:?} for a matrix with {} columns", features.shape(), m.shape.1),
        ));
    }
    let f = features.shape()[1];
    let mut out = vec![0.0; m.shape.0 * f];
    for k in 0..m.nnz() {
        let (r, c, w) = (m.rows[k], m.cols[k], m.weights[k]);
        for ch in 0..f {
            out[r * f + ch] += w * features.data()[c * f + ch];
        }
    }
    Tensor::new(vec![m.shape.0, f], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::uniform_depth_bins;

    #[test]
    fn delta_distribution_reads_kernel() {
        let d = 5;
        let g = vec![0.9, 0.6, 0.3, 0.1];
        for i in 0..d {
            let mut row = vec![0.0; d];
            row[i] = 1.0;
            let dist = DepthDistribution::depth(Tensor::new(vec![1, d], row).unwrap()).unwrap();
            let k = OcclusionKernel::new(Tensor::new(vec![1, d - 1], g.clone()).unwrap()).unwrap();
            let out = depth_to_occluded(&dist, &k).unwrap();
            for j in 0..d {
                let want = match j.cmp(&i) {
                    std::cmp::Ordering::Less => 0.0,
                    std::cmp::Ordering::Equal => 1.0,
                    std::cmp::Ordering::Greater => g[j - i - 1],
                };
                assert_eq!(out.row(0)[j], want);
            }
        }
    }

    #[test]
    fn hand_worked_transfer() {
        let dist = DepthDistribution::depth(Tensor::new(vec![1, 4], vec![0.5, 0.5, 0.0, 0.0]).unwrap())
            .unwrap();
        let k = OcclusionKernel::new(Tensor::full(vec![1, 3], 0.2).unwrap()).unwrap();
        let out = depth_to_occluded(&dist, &k).unwrap();
        let want = [0.5, 0.6, 0.2, 0.2];
        for (a, b) in out.row(0).iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(out.form(), DepthForm::OccludedLength);
    }

    #[test]
    fn zero_kernel_is_plain_lss() {
        let dist = DepthDistribution::depth(Tensor::new(vec![1, 3], vec![0.2, 0.3, 0.5]).unwrap()).unwrap();
        let out = depth_to_occluded(&dist, &OcclusionKernel::zeros(1, 3)).unwrap();
        assert_eq!(out.tensor(), dist.tensor());
    }

    #[test]
    fn depth_rows_must_sum_to_one() {
        assert!(DepthDistribution::depth(Tensor::new(vec![1, 2], vec![0.5, 0.6]).unwrap()).is_err());
        assert!(DepthDistribution::new(
            Tensor::new(vec![1, 2], vec![0.5, 0.6]).unwrap(),
            DepthForm::OccludedLength
        )
        .is_ok());
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(DenoiseSchedule::at(10, 0).gt_weight(), 1.0);
        assert_eq!(DenoiseSchedule::at(10, 10).gt_weight(), 0.0);
        assert_eq!(DenoiseSchedule::at(10, 5).gt_weight(), 0.5);
        assert_eq!(DenoiseSchedule::at(10, 11).gt_weight(), 0.0);
        assert_eq!(DenoiseSchedule::inference().gt_weight(), 0.0);
    }

    #[test]
    fn blend_endpoints() {
        let pred = DepthDistribution::depth(Tensor::new(vec![1, 2], vec![0.2, 0.8]).unwrap()).unwrap();
        let gt = DepthDistribution::depth(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap()).unwrap();
        assert_eq!(blend_denoise(&pred, &gt, DenoiseSchedule::at(4, 0)).unwrap(), gt);
        assert_eq!(blend_denoise(&pred, &gt, DenoiseSchedule::at(4, 4)).unwrap(), pred);
        let mid = blend_denoise(&pred, &gt, DenoiseSchedule::at(4, 2)).unwrap();
        assert_eq!(mid.row(0), &[0.6, 0.4]);
        assert_eq!(blend_denoise(&pred, &gt, DenoiseSchedule::inference()).unwrap(), pred);
    }

    #[test]
    fn trilinear_drops_out_of_grid_corners() {
        let grid = VoxelGridSpec::new([0.0; 3], 1.0, [2, 2, 2]).unwrap();
        let w = trilinear_weights(&grid, [1.5, 0.5, 0.5]);
        assert_eq!(w.len(), 4);
        let total: f64 = w.iter().map(|x| x.1).sum();
        assert!((total - 0.5).abs() < 1e-15);
    }

    fn one_pixel_camera() -> CameraModel {
        // one pixel whose center sits on the optical axis, looking along +x
        CameraModel::looking(1.0, 1, 1, [0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, -1.0]).unwrap()
    }

    fn delta(bins: usize, at: usize) -> DepthDistribution {
        let mut row = vec![0.0; bins];
        row[at] = 1.0;
        DepthDistribution::new(Tensor::new(vec![1, bins], row).unwrap(), DepthForm::OccludedLength)
            .unwrap()
    }

    #[test]
    fn lattice_point_yields_single_triplet() {
        let cam = one_pixel_camera();
        let bins = uniform_depth_bins(0.0, 4.0, 4).unwrap(); // centers 0.5 .. 3.5
        // bin 1 (1.5 m) lands on x = 1.5; origin shifted so that is lattice 2
        let grid = VoxelGridSpec::new([-0.5, -2.0, -2.0], 0.5, [8, 8, 8]).unwrap();
        let m = build_transfer_matrix(&delta(4, 1), &[cam], &bins, &grid, None).unwrap();
        assert_eq!(m.nnz(), 1);
        assert_eq!(m.weights[0], 1.0);
        assert_eq!(m.rows[0], grid.flat(4, 4, 4));
    }

    #[test]
    fn cell_center_yields_eight_triplets() {
        let cam = one_pixel_camera();
        let bins = uniform_depth_bins(0.0, 4.0, 4).unwrap();
        let grid = VoxelGridSpec::new([-0.25, -2.25, -2.25], 0.5, [8, 8, 8]).unwrap();
        let m = build_transfer_matrix(&delta(4, 1), &[cam], &bins, &grid, None).unwrap();
        assert_eq!(m.nnz(), 8);
        assert!(m.weights.iter().all(|&w| w == 0.125));
    }

    #[test]
    fn matrix_is_canonical_under_permutation() {
        let t = vec![(3, 1, 0.5), (0, 2, 0.25), (3, 1, 0.125), (1, 0, 1.0)];
        let mut rev = t.clone();
        rev.reverse();
        let a = SparseTransferMatrix::from_triplets(t, (4, 3)).unwrap();
        let b = SparseTransferMatrix::from_triplets(rev, (4, 3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.triplets(), vec![(0, 2, 0.25), (1, 0, 1.0), (3, 1, 0.625)]);
        assert_eq!(SparseTransferMatrix::decode(&a.encode(), (4, 3)).unwrap(), a);
    }

    #[test]
    fn lift_single_and_averaged() {
        let f = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        let one = SparseTransferMatrix::from_triplets(vec![(0, 1, 1.0)], (2, 2)).unwrap();
        assert_eq!(apply_lift(&one, &f).unwrap().data(), &[3.0, 6.0, 0.0, 0.0]);
        let avg = SparseTransferMatrix::from_triplets(vec![(1, 0, 0.5), (1, 1, 0.5)], (2, 2)).unwrap();
        assert_eq!(apply_lift(&avg, &f).unwrap().data(), &[0.0, 0.0, 2.0, 4.0]);
        assert!(apply_lift(&avg, &Tensor::zeros(vec![3, 2])).is_err());
    }

    #[test]
    fn top_bins_break_ties_low() {
        let p = Tensor::new(vec![1, 4], vec![0.25, 0.25, 0.4, 0.1]).unwrap();
        assert_eq!(select_top_bins(&p, 3).unwrap(), vec![2, 0, 1]);
    }
}
