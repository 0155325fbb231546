//! BEV cost-volume flow head.
//!
//! The volume is collapsed over a height slab into a downsampled BEV map.
//! The previous frame's map is warped into the current frame and compared
//! with the current one by cosine similarity over a small window of cell
//! offsets. A two-layer decoder reads each voxel's feature together with
//! the cost volume of its BEV cell and predicts, per axis, a distribution
//! over velocity bins; the flow is its expectation over the bin centers.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BevPlane, EgoMotion, VoxelGridSpec};
use crate::io::{GridDump, GridPayload};
use crate::numgrad::{Tape, Tensor, Var, COSINE_EPS};
use crate::semhead::gaussian;

/// Norm below which a flow vector has no direction.
pub const FLOW_COSINE_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BevSpec {
    pub factor: usize,
    pub z_lo: f64,
    pub z_hi: f64,
}

impl Default for BevSpec {
    fn default() -> Self {
        BevSpec {
            factor: 2,
            z_lo: 0.0,
            z_hi: 4.0,
        }
    }
}

/// Constant averaging operator from voxels to BEV cells.
#[derive(Clone, Debug)]
pub struct BevCollapse {
    pub plane: BevPlane,
    voxels: Arc<Vec<usize>>,
    cells: Arc<Vec<usize>>,
    weights: Tensor,
    /// BEV cell of every voxel, used to broadcast the cost volume back.
    voxel_cell: Arc<Vec<usize>>,
}

impl BevCollapse {
    pub fn new(spec: &BevSpec, grid: &VoxelGridSpec) -> Result<Self> {
        if spec.factor == 0 {
            return Err(Error::invalid("BEV factor must be at least 1"));
        }
        if !(spec.z_lo < spec.z_hi) {
            return Err(Error::invalid(format!(
                "height slab [{}, {}) is empty",
                spec.z_lo, spec.z_hi
            )));
        }
        let [h, w, z] = grid.dims;
        if h % spec.factor != 0 || w % spec.factor != 0 {
            return Err(Error::invalid(format!(
                "grid {h}x{w} is not divisible by BEV factor {}",
                spec.factor
            )));
        }
        let plane = BevPlane::new(grid, spec.factor)?;
        let layers: Vec<usize> = (0..z)
            .filter(|&k| {
                let c = grid.voxel_center(0, 0, k)[2];
                c >= spec.z_lo && c < spec.z_hi
            })
            .collect();
        if layers.is_empty() {
            return Err(Error::invalid(format!(
                "no voxel layer centered in [{}, {})",
                spec.z_lo, spec.z_hi
            )));
        }
        let wt = 1.0 / (layers.len() * spec.factor * spec.factor) as f64;
        let mut voxels = Vec::new();
        let mut cells = Vec::new();
        for hh in 0..h {
            for ww in 0..w {
                let cell = (hh / spec.factor) * plane.cols + ww / spec.factor;
                for &k in &layers {
                    voxels.push(grid.flat(hh, ww, k));
                    cells.push(cell);
                }
            }
        }
        let voxel_cell = (0..grid.num_voxels())
            .map(|v| {
                let [hh, ww, _] = grid.unflat(v);
                (hh / spec.factor) * plane.cols + ww / spec.factor
            })
            .collect();
        let weights = Tensor::full(vec![voxels.len(), 1], wt)?;
        Ok(BevCollapse {
            plane,
            voxels: Arc::new(voxels),
            cells: Arc::new(cells),
            weights,
            voxel_cell: Arc::new(voxel_cell),
        })
    }

    /// `[V, C]` volume features to a `[H', W', C]` BEV map.
    pub fn apply_var(&self, tape: &mut Tape, volume: Var) -> Result<Var> {
        let shape = tape.value(volume).shape().to_vec();
        if shape.len() != 2 || shape[0] != self.voxel_cell.len() {
            return Err(Error::shape(
                "collapse_bev",
                format!("volume {shape:?} for {} voxels", self.voxel_cell.len()),
            ));
        }
        let picked = tape.gather(volume, self.voxels.clone())?;
        let w = tape.constant(self.weights.clone());
        let scaled = tape.mul(picked, w)?;
        let bev = tape.scatter_add(scaled, self.cells.clone(), self.plane.num_cells())?;
        tape.reshape(bev, vec![self.plane.rows, self.plane.cols, shape[1]])
    }

    pub fn apply(&self, volume: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let v = tape.constant(volume.clone());
        let out = self.apply_var(&mut tape, v)?;
        Ok(tape.value(out).clone())
    }

    /// Repeats `[cells, K]` rows for every voxel of the cell.
    pub fn broadcast_var(&self, tape: &mut Tape, per_cell: Var) -> Result<Var> {
        tape.gather(per_cell, self.voxel_cell.clone())
    }
}

pub fn collapse_bev(volume: &Tensor, spec: &BevSpec, grid: &VoxelGridSpec) -> Result<Tensor> {
    BevCollapse::new(spec, grid)?.apply(volume)
}

/// Square window of cell offsets `(Δrow, Δcol)` with the given radius.
pub fn square_window(radius: usize) -> Vec<[i64; 2]> {
    let r = radius as i64;
    let mut out = Vec::new();
    for dr in -r..=r {
        for dc in -r..=r {
            out.push([dr, dc]);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostVolume {
    pub offsets: Vec<[i64; 2]>,
    /// `[cells, offsets]`.
    pub values: Tensor,
}

impl CostVolume {
    /// Index of the best offset per cell; ties go to the earlier offset.
    pub fn argmax(&self) -> Vec<usize> {
        let k = self.offsets.len();
        self.values
            .data()
            .chunks(k)
            .map(|row| {
                let mut best = 0;
                for i in 1..k {
                    if row[i] > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }
}

fn check_window(window: &[[i64; 2]]) -> Result<()> {
    if !window.contains(&[0, 0]) {
        return Err(Error::invalid("cost-volume window must contain the zero offset"));
    }
    Ok(())
}

/// Cosine similarity of `cur[cell]` with the warped previous map at
/// `cell + Δ` for every window offset. Returns `[cells, offsets]`.
pub fn cost_volume_var(
    tape: &mut Tape,
    cur: Var,
    prev: Var,
    motion: &EgoMotion,
    grid: &VoxelGridSpec,
    window: &[[i64; 2]],
) -> Result<Var> {
    check_window(window)?;
    let shape = tape.value(cur).shape().to_vec();
    if shape.len() != 3 || tape.value(prev).shape() != shape.as_slice() {
        return Err(Error::shape(
            "cost_volume",
            format!("{:?} vs {:?}", shape, tape.value(prev).shape()),
        ));
    }
    let (rows, cols, c) = (shape[0], shape[1], shape[2]);
    if !grid.dims[0].is_multiple_of(rows) || grid.dims[0] / rows * cols != grid.dims[1] {
        return Err(Error::shape(
            "cost_volume",
            format!("BEV map {rows}x{cols} does not tile grid {:?}", grid.dims),
        ));
    }
    let plane = BevPlane::new(grid, grid.dims[0] / rows)?;
    let warped = plane.warp_positions(motion);
    let cur_flat = tape.reshape(cur, vec![rows * cols, c])?;
    let mut columns = Vec::with_capacity(window.len());
    for d in window {
        let coords: Vec<Option<[f64; 2]>> = (0..rows * cols)
            .map(|cell| {
                let r = (cell / cols) as i64 + d[0];
                let q = (cell % cols) as i64 + d[1];
                if r < 0 || q < 0 || r >= rows as i64 || q >= cols as i64 {
                    None
                } else {
                    warped[r as usize * cols + q as usize]
                }
            })
            .collect();
        let sampled = tape.bilinear_sample_2d(prev, Arc::new(coords))?;
        let cos = tape.cosine_sim_lastdim_eps(cur_flat, sampled, COSINE_EPS)?;
        columns.push(tape.reshape(cos, vec![rows * cols, 1])?);
    }
    tape.concat_lastdim(&columns)
}

pub fn cost_volume(
    cur: &Tensor,
    prev: &Tensor,
    motion: &EgoMotion,
    grid: &VoxelGridSpec,
    window: &[[i64; 2]],
) -> Result<CostVolume> {
    let mut tape = Tape::new();
    let c = tape.constant(cur.clone());
    let p = tape.constant(prev.clone());
    let cv = cost_volume_var(&mut tape, c, p, motion, grid, window)?;
    Ok(CostVolume {
        offsets: window.to_vec(),
        values: tape.value(cv).clone(),
    })
}

/// Velocity bin centers shared by both axes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowBinSpec {
    pub centers: Vec<f64>,
}

impl FlowBinSpec {
    /// `n` bins of equal width over `[lo, hi]`, centered in each bin.
    pub fn uniform(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if n == 0 || !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::invalid(format!("flow bins [{lo}, {hi}] x {n}")));
        }
        let w = (hi - lo) / n as f64;
        Ok(FlowBinSpec {
            centers: (0..n).map(|i| lo + (i as f64 + 0.5) * w).collect(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.centers.is_empty() || self.centers.windows(2).any(|p| !(p[0] < p[1])) {
            return Err(Error::invalid("flow bin centers must be strictly increasing"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    /// Nearest center; a value midway between two centers takes the lower.
    pub fn nearest(&self, v: f64) -> usize {
        let mut best = 0;
        for (i, c) in self.centers.iter().enumerate() {
            if (v - c).abs() < (v - self.centers[best]).abs() {
                best = i;
            }
        }
        best
    }
}

/// Per-voxel `(v_x, v_y)` in m/s.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowGrid {
    pub dims: [usize; 3],
    pub data: Vec<[f64; 2]>,
}

impl FlowGrid {
    pub fn zeros(dims: [usize; 3]) -> Self {
        FlowGrid {
            dims,
            data: vec![[0.0; 2]; dims.iter().product()],
        }
    }

    pub fn new(dims: [usize; 3], data: Vec<[f64; 2]>) -> Result<Self> {
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::shape("flow grid", "vector count does not match dims"));
        }
        if data.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("flow grid".into()));
        }
        Ok(FlowGrid { dims, data })
    }

    pub fn from_tensor(dims: [usize; 3], t: &Tensor) -> Result<Self> {
        FlowGrid::new(dims, t.data().chunks(2).map(|c| [c[0], c[1]]).collect())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.data.len(), 2],
            self.data.iter().flatten().copied().collect(),
        )
        .expect("flow grid values are finite")
    }

    pub fn to_dump(&self) -> GridDump {
        GridDump {
            dims: vec![self.dims[0], self.dims[1], self.dims[2], 2],
            payload: GridPayload::Values(self.data.iter().flatten().copied().collect()),
        }
    }

    pub fn from_dump(d: &GridDump) -> Result<Self> {
        match (&d.payload, d.dims.as_slice()) {
            (GridPayload::Values(v), &[h, w, z, 2]) => {
                FlowGrid::new([h, w, z], v.chunks(2).map(|c| [c[0], c[1]]).collect())
            }
            _ => Err(Error::Format(format!(
                "expected a [H, W, Z, 2] value grid, got dims {:?}",
                d.dims
            ))),
        }
    }
}

/// Learnable decoder: `tanh([f, cv] W1 + b1) W2 + b2`, giving `2 · N_b`
/// logits per voxel (x bins then y bins).
#[derive(Clone, Debug, PartialEq)]
pub struct FlowDecoder {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl FlowDecoder {
    pub fn random(inputs: usize, hidden: usize, bins: usize, rng: &mut impl Rng) -> Result<Self> {
        let s1 = 1.0 / (inputs as f64).sqrt();
        let s2 = 1.0 / (hidden as f64).sqrt();
        Ok(FlowDecoder {
            w1: Tensor::new(vec![inputs, hidden], (0..inputs * hidden).map(|_| gaussian(rng) * s1).collect())?,
            b1: Tensor::zeros(vec![hidden]),
            w2: Tensor::new(
                vec![hidden, 2 * bins],
                (0..hidden * 2 * bins).map(|_| gaussian(rng) * s2 * 0.1).collect(),
            )?,
            b2: Tensor::zeros(vec![2 * bins]),
        })
    }

    pub fn inputs(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn bins(&self) -> usize {
        self.b2.numel() / 2
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl DecoderVars {
    pub fn leaves(tape: &mut Tape, d: &FlowDecoder) -> Self {
        DecoderVars {
            w1: tape.leaf(d.w1.clone()),
            b1: tape.leaf(d.b1.clone()),
            w2: tape.leaf(d.w2.clone()),
            b2: tape.leaf(d.b2.clone()),
        }
    }

    pub fn constants(tape: &mut Tape, d: &FlowDecoder) -> Self {
        DecoderVars {
            w1: tape.constant(d.w1.clone()),
            b1: tape.constant(d.b1.clone()),
            w2: tape.constant(d.w2.clone()),
            b2: tape.constant(d.b2.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FlowPrediction {
    /// `[V, 2, N_b]`.
    pub probs: Var,
    /// `[V, 2]`.
    pub flow: Var,
}

/// `[V, 2]` expectation of `[V, 2, N_b]` bin probabilities.
pub fn expected_flow_var(tape: &mut Tape, probs: Var, bins: &FlowBinSpec) -> Result<Var> {
    let shape = tape.value(probs).shape().to_vec();
    if shape.len() != 3 || shape[1] != 2 || shape[2] != bins.len() {
        return Err(Error::shape(
            "decode_flow",
            format!("probabilities {shape:?} for {} bins", bins.len()),
        ));
    }
    let flat = tape.reshape(probs, vec![shape[0] * 2, bins.len()])?;
    let centers = tape.constant(Tensor::new(vec![bins.len(), 1], bins.centers.clone())?);
    let e = tape.matmul(flat, centers)?;
    tape.reshape(e, vec![shape[0], 2])
}

pub fn expected_flow(probs: &Tensor, bins: &FlowBinSpec) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = tape.constant(probs.clone());
    let e = expected_flow_var(&mut tape, p, bins)?;
    Ok(tape.value(e).clone())
}

/// Decodes per-voxel flow from `[V, F]` features and `[V, K]` broadcast
/// cost-volume rows.
pub fn decode_flow_var(
    tape: &mut Tape,
    features: Var,
    cv: Var,
    bins: &FlowBinSpec,
    dec: &DecoderVars,
) -> Result<FlowPrediction> {
    let x = tape.concat_lastdim(&[features, cv])?;
    if tape.value(x).shape()[1] != tape.value(dec.w1).shape()[0] {
        return Err(Error::shape(
            "decode_flow",
            format!(
                "decoder expects {} inputs, got {}",
                tape.value(dec.w1).shape()[0],
                tape.value(x).shape()[1]
            ),
        ));
    }
    let v = tape.value(x).shape()[0];
    let h = tape.matmul(x, dec.w1)?;
    let h = tape.add(h, dec.b1)?;
    let h = tape.tanh(h)?;
    let l = tape.matmul(h, dec.w2)?;
    let l = tape.add(l, dec.b2)?;
    let l = tape.reshape(l, vec![v, 2, bins.len()])?;
    let probs = tape.softmax_lastdim(l)?;
    let flow = expected_flow_var(tape, probs, bins)?;
    Ok(FlowPrediction { probs, flow })
}

/// Voxels entering the flow losses: every voxel with nonzero ground truth
/// plus an equally sized seeded sample of zero-flow voxels. Ascending.
pub fn flow_loss_voxels(gt: &[[f64; 2]], seed: u64) -> Vec<usize> {
    let (mut moving, mut still): (Vec<usize>, Vec<usize>) =
        (0..gt.len()).partition(|&i| gt[i] != [0.0, 0.0]);
    still.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    moving.extend(still.into_iter().take(moving.len()));
    moving.sort_unstable();
    moving
}

/// Mean over `voxels` of `||pred - gt||² - cos(pred, gt)`.
pub fn flow_reg_loss_var(tape: &mut Tape, pred: Var, gt: &[[f64; 2]], voxels: &[usize]) -> Result<Var> {
    if tape.value(pred).shape() != [gt.len(), 2] {
        return Err(Error::shape(
            "flow_reg_loss",
            format!("prediction {:?} for {} voxels", tape.value(pred).shape(), gt.len()),
        ));
    }
    if voxels.is_empty() {
        return tape.scalar(0.0);
    }
    let p = tape.gather(pred, Arc::new(voxels.to_vec()))?;
    let g = tape.constant(Tensor::new(
        vec![voxels.len(), 2],
        voxels.iter().flat_map(|&v| gt[v]).collect(),
    )?);
    let d = tape.sub(p, g)?;
    let d2 = tape.square(d)?;
    let sq = tape.row_sums(d2)?;
    let sq = tape.reshape(sq, vec![voxels.len()])?;
    let cos = tape.cosine_sim_lastdim_eps(p, g, FLOW_COSINE_EPS)?;
    let per = tape.sub(sq, cos)?;
    tape.mean(per)
}

/// Mean cross-entropy of `[V, 2, N_b]` probabilities against the nearest
/// bin of each ground-truth component, over `voxels` and both axes.
pub fn flow_cls_loss_var(
    tape: &mut Tape,
    probs: Var,
    gt: &[[f64; 2]],
    bins: &FlowBinSpec,
    voxels: &[usize],
) -> Result<Var> {
    let nb = bins.len();
    if tape.value(probs).shape() != [gt.len(), 2, nb] {
        return Err(Error::shape(
            "flow_cls_loss",
            format!("probabilities {:?} for {} voxels", tape.value(probs).shape(), gt.len()),
        ));
    }
    if voxels.is_empty() {
        return tape.scalar(0.0);
    }
    let idx: Vec<usize> = voxels
        .iter()
        .flat_map(|&v| (0..2).map(move |a| (v * 2 + a) * nb + bins.nearest(gt[v][a])))
        .collect();
    let flat = tape.reshape(probs, vec![gt.len() * 2 * nb])?;
    let p = tape.gather(flat, Arc::new(idx))?;
    let lp = tape.log(p)?;
    let m = tape.mean(lp)?;
    tape.scale(m, -1.0)
}

/// Value-level regression loss over [`flow_loss_voxels`].
pub fn flow_reg_loss(pred: &FlowGrid, gt: &FlowGrid, seed: u64) -> Result<f64> {
    if pred.dims != gt.dims {
        return Err(Error::shape("flow_reg_loss", "grid dims differ"));
    }
    let mut tape = Tape::new();
    let p = tape.constant(pred.to_tensor());
    let l = flow_reg_loss_var(&mut tape, p, &gt.data, &flow_loss_voxels(&gt.data, seed))?;
    tape.value(l).item()
}

/// Value-level classification loss over [`flow_loss_voxels`].
pub fn flow_cls_loss(probs: &Tensor, gt: &FlowGrid, bins: &FlowBinSpec, seed: u64) -> Result<f64> {
    let rows = probs.data().chunks(bins.len().max(1));
    if rows.into_iter().any(|r| (r.iter().sum::<f64>() - 1.0).abs() > 1e-9) {
        return Err(Error::invalid("bin probabilities must sum to 1"));
    }
    let mut tape = Tape::new();
    let p = tape.constant(probs.clone());
    let l = flow_cls_loss_var(&mut tape, p, &gt.data, bins, &flow_loss_voxels(&gt.data, seed))?;
    tape.value(l).item()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(dims: [usize; 3]) -> VoxelGridSpec {
        VoxelGridSpec::new([0.0, 0.0, 0.0], 1.0, dims).unwrap()
    }

    #[test]
    fn constant_volume_collapses_to_constant() {
        let g = grid([4, 4, 4]);
        let v = Tensor::full(vec![64, 2], 3.5).unwrap();
        let spec = BevSpec { factor: 2, z_lo: 0.0, z_hi: 4.0 };
        let b = collapse_bev(&v, &spec, &g).unwrap();
        assert_eq!(b.shape(), &[2, 2, 2]);
        assert!(b.data().iter().all(|&x| (x - 3.5).abs() < 1e-15));
    }

    #[test]
    fn single_layer_factor_one_is_verbatim() {
        let g = grid([2, 3, 4]);
        let v = Tensor::new(vec![24, 1], (0..24).map(|i| i as f64).collect()).unwrap();
        let spec = BevSpec { factor: 1, z_lo: 2.0, z_hi: 3.0 };
        let b = collapse_bev(&v, &spec, &g).unwrap();
        let want: Vec<f64> = (0..6).map(|c| (c * 4 + 2) as f64).collect();
        assert_eq!(b.data(), want.as_slice());
        let empty = BevSpec { factor: 1, z_lo: 10.0, z_hi: 11.0 };
        assert!(collapse_bev(&v, &empty, &g).is_err());
    }

    #[test]
    fn identical_frames_peak_at_zero_offset() {
        let g = grid([4, 4, 1]);
        let m = Tensor::new(vec![2, 2, 2], vec![1., 0., 0., 1., 1., 1., 2., -1.]).unwrap();
        let w = square_window(1);
        let cv = cost_volume(&m, &m, &EgoMotion::identity(), &g, &w).unwrap();
        let zero = w.iter().position(|d| *d == [0, 0]).unwrap();
        for cell in 0..4 {
            assert!((cv.values.data()[cell * 9 + zero] - 1.0).abs() < 1e-12);
        }
        assert!(cost_volume(&m, &m, &EgoMotion::identity(), &g, &[[1, 0]]).is_err());
    }

    #[test]
    fn decode_one_hot_and_uniform() {
        let bins = FlowBinSpec::uniform(-10.0, 10.0, 16).unwrap();
        let mut p = vec![0.0; 32];
        p[3] = 1.0;
        p[16 + 12] = 1.0;
        let e = expected_flow(&Tensor::new(vec![1, 2, 16], p).unwrap(), &bins).unwrap();
        assert_eq!(e.data(), &[bins.centers[3], bins.centers[12]]);
        let u = expected_flow(&Tensor::full(vec![1, 2, 16], 1.0 / 16.0).unwrap(), &bins).unwrap();
        assert!(u.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn reg_loss_cases() {
        let gt = FlowGrid::new([1, 1, 2], vec![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert!((flow_reg_loss(&gt, &gt, 0).unwrap() + 1.0).abs() < 1e-15);
        let anti = FlowGrid::new([1, 1, 2], vec![[-1.0, 0.0], [0.0, -1.0]]).unwrap();
        assert!((flow_reg_loss(&anti, &gt, 0).unwrap() - 5.0).abs() < 1e-15);
    }

    #[test]
    fn cls_loss_cases() {
        let bins = FlowBinSpec::uniform(-10.0, 10.0, 16).unwrap();
        let gt = FlowGrid::new([1, 1, 1], vec![[bins.centers[5], bins.centers[9]]]).unwrap();
        let mut p = vec![0.0; 32];
        p[5] = 1.0;
        p[16 + 9] = 1.0;
        assert_eq!(flow_cls_loss(&Tensor::new(vec![1, 2, 16], p).unwrap(), &gt, &bins, 0).unwrap(), 0.0);
        let u = Tensor::full(vec![1, 2, 16], 1.0 / 16.0).unwrap();
        assert!((flow_cls_loss(&u, &gt, &bins, 0).unwrap() - 16f64.ln()).abs() < 1e-12);
        assert_eq!(bins.nearest(0.0), 7);
    }

    #[test]
    fn loss_voxels_balance_static_and_moving() {
        let mut gt = vec![[0.0; 2]; 10];
        gt[2] = [1.0, 0.0];
        gt[7] = [0.0, -2.0];
        let v = flow_loss_voxels(&gt, 11);
        assert_eq!(v.len(), 4);
        assert!(v.contains(&2) && v.contains(&7));
        assert_eq!(v, flow_loss_voxels(&gt, 11));
    }

    #[test]
    fn flow_grid_dump_round_trip() {
        let g = FlowGrid::new([1, 2, 1], vec![[0.5, -1.0], [2.0, 0.0]]).unwrap();
        assert_eq!(FlowGrid::from_dump(&g.to_dump()).unwrap(), g);
    }
}
