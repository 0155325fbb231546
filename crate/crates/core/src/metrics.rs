//! Evaluation suite: voxel mIoU, ray-cast RayIoU, velocity errors and the
//! composite Occ Score.
//!
//! All scores are fractions in `[0, 1]` except [`occ_score`], which takes
//! and returns percent.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::flowhead::FlowGrid;
use crate::geometry::{normalize, CameraModel, VoxelGridSpec};
use crate::io::EMPTY;
use crate::scenes::{cast_ray, RayHit, VoxelLabelGrid};

/// RayIoU depth thresholds in meters.
pub const RAY_THRESHOLDS: [f64; 3] = [1.0, 2.0, 4.0];
/// Threshold selecting the voxels of mAVE_TP.
pub const TP_THRESHOLD: f64 = 2.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    /// `None` when the class never appears in prediction or ground truth.
    pub fn iou(&self) -> Option<f64> {
        let d = self.tp + self.fp + self.fn_;
        (d > 0).then(|| self.tp as f64 / d as f64)
    }
}

/// Mean over the defined entries; `None` if none is defined.
pub fn mean_over_classes(per_class: &[Option<f64>]) -> Option<f64> {
    let vals: Vec<f64> = per_class.iter().flatten().copied().collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct IouReport {
    /// Indexed like the requested class list.
    pub per_class: Vec<Option<f64>>,
    pub mean: Option<f64>,
}

/// Voxel IoU per class; classes absent from both grids are excluded from
/// the mean.
pub fn miou(pred: &VoxelLabelGrid, gt: &VoxelLabelGrid, classes: &[u8]) -> Result<IouReport> {
    if pred.dims != gt.dims {
        return Err(Error::shape(
            "miou",
            format!("{:?} vs {:?}", pred.dims, gt.dims),
        ));
    }
    let mut counts = vec![ConfusionCounts::default(); classes.len()];
    for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
        for (i, &c) in classes.iter().enumerate() {
            match (p == c, g == c) {
                (true, true) => counts[i].tp += 1,
                (true, false) => counts[i].fp += 1,
                (false, true) => counts[i].fn_ += 1,
                _ => {}
            }
        }
    }
    let per_class: Vec<_> = counts.iter().map(ConfusionCounts::iou).collect();
    let mean = mean_over_classes(&per_class);
    Ok(IouReport { per_class, mean })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: [f64; 3],
    /// Unit direction.
    pub dir: [f64; 3],
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RayQuerySet {
    pub rays: Vec<Ray>,
}

impl RayQuerySet {
    pub fn new(rays: Vec<Ray>) -> Result<Self> {
        for r in &rays {
            let n = (r.dir[0] * r.dir[0] + r.dir[1] * r.dir[1] + r.dir[2] * r.dir[2]).sqrt();
            if (n - 1.0).abs() > 1e-9 {
                return Err(Error::invalid("query ray directions must be unit length"));
            }
        }
        Ok(RayQuerySet { rays })
    }

    /// One ray through every pixel center, camera-major.
    pub fn from_cameras(cameras: &[CameraModel]) -> Result<Self> {
        let mut rays = Vec::new();
        for cam in cameras {
            for r in 0..cam.rows {
                for c in 0..cam.cols {
                    let (u, v) = cam.pixel_center(r, c);
                    rays.push(Ray {
                        origin: cam.center(),
                        dir: normalize(cam.ray_direction(u, v))?,
                    });
                }
            }
        }
        Ok(RayQuerySet { rays })
    }

    /// `count` horizontal rays evenly spread over 360° from `origin`.
    pub fn fan(origin: [f64; 3], count: usize) -> Self {
        let rays = (0..count)
            .map(|i| {
                let a = 2.0 * std::f64::consts::PI * i as f64 / count as f64;
                Ray {
                    origin,
                    dir: [a.cos(), a.sin(), 0.0],
                }
            })
            .collect();
        RayQuerySet { rays }
    }

    pub fn extend(&mut self, other: RayQuerySet) {
        self.rays.extend(other.rays);
    }

    pub fn cast(&self, grid: &VoxelGridSpec, labels: &VoxelLabelGrid) -> Result<Vec<RayHit>> {
        if labels.dims != grid.dims {
            return Err(Error::shape("ray casting", "label grid does not match the grid spec"));
        }
        self.rays
            .iter()
            .map(|r| cast_ray(grid, &labels.labels, r.origin, r.dir))
            .collect()
    }
}

/// Per-class ray confusion at one depth threshold.
///
/// A ray with a ground-truth hit is a TP of its class when the predicted
/// hit has the same class and lies within `tau`; otherwise it is a FN of
/// the ground-truth class and, if the prediction hit anything, a FP of
/// the predicted class. Rays missing in ground truth but hitting in the
/// prediction are FPs.
pub fn classify_rays(pred: &[RayHit], gt: &[RayHit], tau: f64, classes: &[u8]) -> Vec<ConfusionCounts> {
    let slot: BTreeMap<u8, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let mut counts = vec![ConfusionCounts::default(); classes.len()];
    for (p, g) in pred.iter().zip(gt) {
        let pc = slot.get(&p.class).copied();
        let gc = slot.get(&g.class).copied();
        if g.class != EMPTY && p.class == g.class && (p.t - g.t).abs() <= tau {
            if let Some(i) = gc {
                counts[i].tp += 1;
            }
            continue;
        }
        if let Some(i) = gc {
            counts[i].fn_ += 1;
        }
        if let Some(i) = pc {
            counts[i].fp += 1;
        }
    }
    counts
}

#[derive(Clone, Debug, PartialEq)]
pub struct RayIouReport {
    pub thresholds: Vec<f64>,
    /// Class-mean RayIoU per threshold.
    pub per_threshold: Vec<f64>,
    pub mean: f64,
    /// `[threshold][class]`.
    pub counts: Vec<Vec<ConfusionCounts>>,
}

/// RayIoU of `pred` against `gt` over a query set.
pub fn ray_iou(
    pred: &VoxelLabelGrid,
    gt: &VoxelLabelGrid,
    grid: &VoxelGridSpec,
    rays: &RayQuerySet,
    thresholds: &[f64],
    classes: &[u8],
) -> Result<RayIouReport> {
    if rays.rays.is_empty() {
        return Err(Error::invalid("RayIoU needs at least one query ray"));
    }
    if thresholds.is_empty() {
        return Err(Error::invalid("RayIoU needs at least one threshold"));
    }
    if pred.dims != gt.dims {
        return Err(Error::shape("ray_iou", format!("{:?} vs {:?}", pred.dims, gt.dims)));
    }
    let ph = rays.cast(grid, pred)?;
    let gh = rays.cast(grid, gt)?;
    let counts: Vec<_> = thresholds
        .iter()
        .map(|&t| classify_rays(&ph, &gh, t, classes))
        .collect();
    let per_threshold: Vec<f64> = counts
        .iter()
        .map(|c| {
            let ious: Vec<_> = c.iter().map(ConfusionCounts::iou).collect();
            mean_over_classes(&ious).unwrap_or(1.0)
        })
        .collect();
    let mean = per_threshold.iter().sum::<f64>() / per_threshold.len() as f64;
    Ok(RayIouReport {
        thresholds: thresholds.to_vec(),
        per_threshold,
        mean,
        counts,
    })
}

/// Ground-truth hit voxels of rays that are true positives at `tau`.
pub fn ray_tp_mask(
    pred: &VoxelLabelGrid,
    gt: &VoxelLabelGrid,
    grid: &VoxelGridSpec,
    rays: &RayQuerySet,
    tau: f64,
) -> Result<Vec<bool>> {
    let ph = rays.cast(grid, pred)?;
    let gh = rays.cast(grid, gt)?;
    let mut mask = vec![false; grid.num_voxels()];
    for (p, g) in ph.iter().zip(&gh) {
        if let Some(v) = g.voxel {
            if p.class == g.class && (p.t - g.t).abs() <= tau {
                mask[v] = true;
            }
        }
    }
    Ok(mask)
}

/// Mean velocity error: per dynamic class the mean L2 error over its
/// ground-truth voxels (restricted to `tp_mask` if given), then the mean
/// over classes with at least one voxel.
pub fn mave(
    pred: &FlowGrid,
    gt: &FlowGrid,
    labels: &VoxelLabelGrid,
    dynamic: &[u8],
    tp_mask: Option<&[bool]>,
) -> Result<f64> {
    if pred.dims != gt.dims || labels.dims != gt.dims {
        return Err(Error::shape("mave", "flow and label grids differ in dims"));
    }
    if tp_mask.is_some_and(|m| m.len() != labels.labels.len()) {
        return Err(Error::shape("mave", "mask length does not match the grid"));
    }
    let mut per_class = Vec::new();
    for &c in dynamic {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (v, &l) in labels.labels.iter().enumerate() {
            if l != c || tp_mask.is_some_and(|m| !m[v]) {
                continue;
            }
            let dx = pred.data[v][0] - gt.data[v][0];
            let dy = pred.data[v][1] - gt.data[v][1];
            sum += (dx * dx + dy * dy).sqrt();
            n += 1;
        }
        if n > 0 {
            per_class.push(sum / n as f64);
        }
    }
    if per_class.is_empty() {
        return Err(Error::invalid("no dynamic voxels to evaluate velocity on"));
    }
    Ok(per_class.iter().sum::<f64>() / per_class.len() as f64)
}

/// `0.9 · RayIoU + 0.1 · 100 · max(1 - mAVE_TP, 0)`, RayIoU in percent.
pub fn occ_score(ray_iou_pct: f64, mave_tp: f64) -> f64 {
    ray_iou_pct * 0.9 + (1.0 - mave_tp).max(0.0) * 100.0 * 0.1
}

/// Everything `eval` prints.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub classes: Vec<u8>,
    pub iou: IouReport,
    pub miou_dynamic: Option<f64>,
    pub ray: RayIouReport,
    pub mave: Option<f64>,
    pub mave_tp: Option<f64>,
    pub occ_score: f64,
}

/// Inputs of a full evaluation.
pub struct EvalInputs<'a> {
    pub grid: &'a VoxelGridSpec,
    pub num_classes: usize,
    pub dynamic: &'a [u8],
    pub rays: &'a RayQuerySet,
}

pub fn evaluate(
    pred: &VoxelLabelGrid,
    pred_flow: &FlowGrid,
    gt: &VoxelLabelGrid,
    gt_flow: &FlowGrid,
    inputs: &EvalInputs,
) -> Result<MetricReport> {
    let classes: Vec<u8> = (0..inputs.num_classes as u8).collect();
    let iou = miou(pred, gt, &classes)?;
    let dyn_ious: Vec<Option<f64>> = inputs
        .dynamic
        .iter()
        .filter_map(|c| classes.iter().position(|x| x == c))
        .map(|i| iou.per_class[i])
        .collect();
    let ray = ray_iou(pred, gt, inputs.grid, inputs.rays, &RAY_THRESHOLDS, &classes)?;
    let mask = ray_tp_mask(pred, gt, inputs.grid, inputs.rays, TP_THRESHOLD)?;
    let mave_all = mave(pred_flow, gt_flow, gt, inputs.dynamic, None).ok();
    let mave_tp = mave(pred_flow, gt_flow, gt, inputs.dynamic, Some(&mask)).ok();
    // without any true-positive dynamic voxel the velocity term is zero
    let score = occ_score(ray.mean * 100.0, mave_tp.unwrap_or(f64::INFINITY));
    Ok(MetricReport {
        classes,
        iou,
        miou_dynamic: mean_over_classes(&dyn_ious),
        ray,
        mave: mave_all,
        mave_tp,
        occ_score: score,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.6}"))
}

impl MetricReport {
    /// `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (c, v) in self.classes.iter().zip(&self.iou.per_class) {
            let _ = writeln!(s, "iou.class{c} = {}", opt(*v));
        }
        let _ = writeln!(s, "miou = {}", opt(self.iou.mean));
        let _ = writeln!(s, "miou_dynamic = {}", opt(self.miou_dynamic));
        for (t, v) in self.ray.thresholds.iter().zip(&self.ray.per_threshold) {
            let _ = writeln!(s, "rayiou@{t}m = {v:.6}");
        }
        let _ = writeln!(s, "rayiou = {:.6}", self.ray.mean);
        let _ = writeln!(s, "mave = {}", opt(self.mave));
        let _ = writeln!(s, "mave_tp = {}", opt(self.mave_tp));
        let _ = writeln!(s, "occ_score = {:.6}", self.occ_score);
        s
    }
}
