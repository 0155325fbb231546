//! Synthetic two-frame scenes and their ground truth.
//!
//! A scene is a voxel grid, a few cameras and a list of boxes and spheres,
//! some of them moving. [`generate`] voxelizes the objects at both
//! timestamps and records per-voxel flow; [`render`] casts one ray per
//! pixel through the label grid to produce depth and semantic maps.

mod traverse;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowhead::FlowGrid;
use crate::geometry::{CameraModel, EgoMotion, VoxelGridSpec};
use crate::io::{read_file, GridDump, GridPayload, EMPTY};

pub use traverse::{cast_ray, run_length, RayHit, Traversal, VoxelStep};

fn default_dt() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase")]
pub enum Shape {
    /// Box with full extents `size` (meters), rotated by `yaw` about `z`.
    Box {
        center: [f64; 3],
        size: [f64; 3],
        #[serde(default)]
        yaw: f64,
    },
    Sphere { center: [f64; 3], radius: f64 },
}

impl Shape {
    pub fn center(&self) -> [f64; 3] {
        match self {
            Shape::Box { center, .. } | Shape::Sphere { center, .. } => *center,
        }
    }

    /// Whether `p` lies inside the shape translated by `shift`.
    pub fn contains(&self, p: [f64; 3], shift: [f64; 3]) -> bool {
        let c = self.center();
        let q = [p[0] - c[0] - shift[0], p[1] - c[1] - shift[1], p[2] - c[2] - shift[2]];
        match self {
            Shape::Box { size, yaw, .. } => {
                let (s, co) = yaw.sin_cos();
                let x = co * q[0] + s * q[1];
                let y = -s * q[0] + co * q[1];
                x.abs() <= size[0] / 2.0 && y.abs() <= size[1] / 2.0 && q[2].abs() <= size[2] / 2.0
            }
            Shape::Sphere { radius, .. } => q[0] * q[0] + q[1] * q[1] + q[2] * q[2] <= radius * radius,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            Shape::Box { size, yaw, .. } => size.iter().all(|&s| s > 0.0 && s.is_finite()) && yaw.is_finite(),
            Shape::Sphere { radius, .. } => *radius > 0.0 && radius.is_finite(),
        };
        if !ok {
            return Err(Error::invalid(format!("degenerate shape {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    #[serde(flatten)]
    pub shape: Shape,
    pub class: u8,
    /// `(v_x, v_y)` in m/s.
    #[serde(default)]
    pub velocity: [f64; 2],
}

/// Everything below `height` (by voxel center) gets `class`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ground {
    pub class: u8,
    pub height: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub grid: VoxelGridSpec,
    pub num_classes: usize,
    #[serde(default)]
    pub dynamic_classes: Vec<u8>,
    #[serde(default)]
    pub ground: Option<Ground>,
    pub cameras: Vec<CameraModel>,
    #[serde(default)]
    pub objects: Vec<SceneObject>,
    /// Maps frame `t-1` ego coordinates to frame `t`.
    #[serde(default)]
    pub ego_motion: EgoMotion,
    #[serde(default = "default_dt")]
    pub frame_dt: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SceneSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: SceneSpec =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("scene file: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::Format(format!("{} is not UTF-8", path.display())))?;
        SceneSpec::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.num_classes == 0 || self.num_classes >= EMPTY as usize {
            return Err(Error::invalid(format!("{} classes", self.num_classes)));
        }
        let class_ok = |c: u8| (c as usize) < self.num_classes;
        if let Some(bad) = self.dynamic_classes.iter().find(|&&c| !class_ok(c)) {
            return Err(Error::invalid(format!("dynamic class {bad} out of range")));
        }
        if let Some(g) = &self.ground {
            if !class_ok(g.class) {
                return Err(Error::invalid(format!("ground class {} out of range", g.class)));
            }
        }
        for cam in &self.cameras {
            cam.validate()?;
        }
        self.ego_motion.validate()?;
        if !(self.frame_dt > 0.0 && self.frame_dt.is_finite()) {
            return Err(Error::invalid("frame_dt must be positive"));
        }
        for (i, o) in self.objects.iter().enumerate() {
            o.shape.validate()?;
            if !class_ok(o.class) {
                return Err(Error::invalid(format!("object {i} has class {} out of range", o.class)));
            }
            let c = self.grid.world_to_vcs(o.shape.center());
            if (0..3).any(|a| !(c[a] >= 0.0 && c[a] <= self.grid.dims[a] as f64)) {
                return Err(Error::invalid(format!("object {i} is centered outside the grid")));
            }
            if o.velocity != [0.0, 0.0] && !self.dynamic_classes.contains(&o.class) {
                return Err(Error::invalid(format!(
                    "object {i} moves but class {} is not dynamic",
                    o.class
                )));
            }
            if o.velocity.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("velocity of object {i}")));
            }
        }
        Ok(())
    }

    pub fn num_pixels(&self) -> usize {
        self.cameras.iter().map(CameraModel::num_pixels).sum()
    }
}

/// Per-voxel class ids, [`EMPTY`] for unoccupied voxels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VoxelLabelGrid {
    pub dims: [usize; 3],
    pub labels: Vec<u8>,
}

impl VoxelLabelGrid {
    pub fn empty(dims: [usize; 3]) -> Self {
        VoxelLabelGrid {
            dims,
            labels: vec![EMPTY; dims.iter().product()],
        }
    }

    pub fn occupied(&self) -> usize {
        self.labels.iter().filter(|&&l| l != EMPTY).count()
    }

    pub fn to_dump(&self) -> GridDump {
        GridDump {
            dims: self.dims.to_vec(),
            payload: GridPayload::Labels(self.labels.clone()),
        }
    }

    pub fn from_dump(d: &GridDump) -> Result<Self> {
        match (&d.payload, d.dims.as_slice()) {
            (GridPayload::Labels(l), &[h, w, z]) => Ok(VoxelLabelGrid {
                dims: [h, w, z],
                labels: l.clone(),
            }),
            _ => Err(Error::Format(format!(
                "expected a [H, W, Z] label grid, got dims {:?}",
                d.dims
            ))),
        }
    }
}

/// Both frames of a generated scene, each in its own ego frame.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedScene {
    pub prev: VoxelLabelGrid,
    pub cur: VoxelLabelGrid,
    /// Flow at frame `t`.
    pub flow: FlowGrid,
}

fn voxelize(spec: &SceneSpec, frame_to_cur: Option<&EgoMotion>, back_dt: f64) -> (Vec<u8>, Vec<[f64; 2]>) {
    let g = &spec.grid;
    let n = g.num_voxels();
    let mut labels = vec![EMPTY; n];
    let mut flow = vec![[0.0; 2]; n];
    for v in 0..n {
        let [h, w, z] = g.unflat(v);
        let local = g.voxel_center(h, w, z);
        if let Some(gr) = &spec.ground {
            if local[2] < gr.height {
                labels[v] = gr.class;
            }
        }
        let p = frame_to_cur.map_or(local, |m| m.apply(local));
        for o in &spec.objects {
            let shift = [-o.velocity[0] * back_dt, -o.velocity[1] * back_dt, 0.0];
            if o.shape.contains(p, shift) {
                labels[v] = o.class;
                flow[v] = o.velocity;
            }
        }
    }
    (labels, flow)
}

/// Voxelizes the scene at `t-1` and `t`.
///
/// A voxel belongs to an object when its center lies inside the shape;
/// later objects win on overlap. At `t-1` every object sits at
/// `center - velocity · dt`, expressed in the `t-1` ego frame.
pub fn generate(spec: &SceneSpec) -> Result<GeneratedScene> {
    spec.validate()?;
    let (cur, flow) = voxelize(spec, None, 0.0);
    let (prev, _) = voxelize(spec, Some(&spec.ego_motion), spec.frame_dt);
    Ok(GeneratedScene {
        prev: VoxelLabelGrid {
            dims: spec.grid.dims,
            labels: prev,
        },
        cur: VoxelLabelGrid {
            dims: spec.grid.dims,
            labels: cur,
        },
        flow: FlowGrid::new(spec.grid.dims, flow)?,
    })
}

/// Depth and semantic maps of all cameras, pixels camera-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedView {
    /// Camera depth (`z` in the camera frame) of the first occupied voxel
    /// boundary; `+∞` on a miss.
    pub depth: Vec<f64>,
    pub semantic: Vec<u8>,
    pub hit_voxel: Vec<Option<usize>>,
}

impl RenderedView {
    pub fn len(&self) -> usize {
        self.depth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depth.is_empty()
    }
}

fn pixel_rays(cameras: &[CameraModel]) -> impl Iterator<Item = ([f64; 3], [f64; 3])> + '_ {
    cameras.iter().flat_map(|cam| {
        (0..cam.rows).flat_map(move |r| {
            (0..cam.cols).map(move |c| {
                let (u, v) = cam.pixel_center(r, c);
                (cam.center(), cam.ray_direction(u, v))
            })
        })
    })
}

/// Casts one ray per pixel through `labels`.
pub fn render(spec: &SceneSpec, labels: &VoxelLabelGrid) -> Result<RenderedView> {
    if labels.dims != spec.grid.dims {
        return Err(Error::shape("render", "label grid does not match the scene grid"));
    }
    let mut view = RenderedView {
        depth: Vec::with_capacity(spec.num_pixels()),
        semantic: Vec::with_capacity(spec.num_pixels()),
        hit_voxel: Vec::with_capacity(spec.num_pixels()),
    };
    for (origin, dir) in pixel_rays(&spec.cameras) {
        let hit = cast_ray(&spec.grid, &labels.labels, origin, dir)?;
        if hit.t == 0.0 {
            return Err(Error::invalid("a camera sits inside an occupied voxel"));
        }
        view.depth.push(hit.t);
        view.semantic.push(hit.class);
        view.hit_voxel.push(hit.voxel);
    }
    Ok(view)
}

/// Per-pixel occluded length: how far the first-hit class continues
/// behind the visible surface, in the same depth units as the view.
/// `None` for pixels that miss.
pub fn occluded_length_gt(view: &RenderedView, spec: &SceneSpec, labels: &VoxelLabelGrid) -> Result<Vec<Option<f64>>> {
    if view.len() != spec.num_pixels() {
        return Err(Error::shape("occluded_length_gt", "view does not match the cameras"));
    }
    pixel_rays(&spec.cameras)
        .zip(&view.depth)
        .map(|((o, d), depth)| {
            if depth.is_finite() {
                run_length(&spec.grid, &labels.labels, o, d)
            } else {
                Ok(None)
            }
        })
        .collect()
}

/// Random label grid: each voxel is occupied with probability `fill`
/// and then takes a uniform class.
pub fn random_label_grid(dims: [usize; 3], classes: usize, fill: f64, seed: u64) -> VoxelLabelGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = (0..dims.iter().product::<usize>())
        .map(|_| {
            if rng.gen::<f64>() < fill {
                rng.gen_range(0..classes) as u8
            } else {
                EMPTY
            }
        })
        .collect();
    VoxelLabelGrid { dims, labels }
}
