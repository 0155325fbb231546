use crate::error::{Error, Result};
use crate::geometry::VoxelGridSpec;
use crate::io::EMPTY;

/// One voxel crossed by a ray, with the ray parameters at which the ray
/// enters and leaves it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VoxelStep {
    pub voxel: [usize; 3],
    pub t_enter: f64,
    pub t_exit: f64,
}

/// Integer grid traversal of `origin + t · dir`, `t >= 0`.
///
/// Voxels are visited in order of increasing `t`. When the ray crosses
/// an edge or corner exactly, all tied axes step together, so voxels
/// touched in a single point are skipped.
#[derive(Clone, Debug)]
pub struct Traversal {
    dims: [usize; 3],
    cell: [i64; 3],
    step: [i64; 3],
    t_max: [f64; 3],
    t_delta: [f64; 3],
    t: f64,
    t_end: f64,
    done: bool,
}

impl Traversal {
    /// `origin` is a world point, `dir` a world direction; `t` is measured
    /// in multiples of `dir`.
    pub fn new(grid: &VoxelGridSpec, origin: [f64; 3], dir: [f64; 3]) -> Result<Self> {
        if dir.iter().any(|v| !v.is_finite()) || origin.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("ray".into()));
        }
        if dir == [0.0; 3] {
            return Err(Error::invalid("degenerate ray with zero direction"));
        }
        let o = grid.world_to_vcs(origin);
        let d = [
            dir[0] / grid.cell_size,
            dir[1] / grid.cell_size,
            dir[2] / grid.cell_size,
        ];
        let mut t0 = 0.0f64;
        let mut t1 = f64::INFINITY;
        let mut done = false;
        for a in 0..3 {
            let hi = grid.dims[a] as f64;
            if d[a] == 0.0 {
                if !(o[a] >= 0.0 && o[a] < hi) {
                    done = true;
                }
            } else {
                let (ta, tb) = ((0.0 - o[a]) / d[a], (hi - o[a]) / d[a]);
                t0 = t0.max(ta.min(tb));
                t1 = t1.min(ta.max(tb));
            }
        }
        if !(t0 < t1) {
            done = true;
        }
        let mut cell = [0i64; 3];
        let mut step = [0i64; 3];
        let mut t_max = [f64::INFINITY; 3];
        let mut t_delta = [f64::INFINITY; 3];
        if !done {
            for a in 0..3 {
                let p = o[a] + t0 * d[a];
                let c = if d[a] < 0.0 { p.ceil() - 1.0 } else { p.floor() };
                cell[a] = (c as i64).clamp(0, grid.dims[a] as i64 - 1);
                if d[a] > 0.0 {
                    step[a] = 1;
                    t_max[a] = (cell[a] as f64 + 1.0 - o[a]) / d[a];
                    t_delta[a] = 1.0 / d[a];
                } else if d[a] < 0.0 {
                    step[a] = -1;
                    t_max[a] = (cell[a] as f64 - o[a]) / d[a];
                    t_delta[a] = -1.0 / d[a];
                }
            }
        }
        Ok(Traversal {
            dims: grid.dims,
            cell,
            step,
            t_max,
            t_delta,
            t: t0,
            t_end: t1,
            done,
        })
    }
}

impl Iterator for Traversal {
    type Item = VoxelStep;

    fn next(&mut self) -> Option<VoxelStep> {
        if self.done || self.t >= self.t_end {
            return None;
        }
        let next_t = self.t_max.iter().cloned().fold(f64::INFINITY, f64::min);
        let out = VoxelStep {
            voxel: [
                self.cell[0] as usize,
                self.cell[1] as usize,
                self.cell[2] as usize,
            ],
            t_enter: self.t,
            t_exit: next_t.min(self.t_end),
        };
        for a in 0..3 {
            if self.t_max[a] == next_t {
                self.cell[a] += self.step[a];
                self.t_max[a] += self.t_delta[a];
                if self.cell[a] < 0 || self.cell[a] >= self.dims[a] as i64 {
                    self.done = true;
                }
            }
        }
        self.t = next_t;
        Some(out)
    }
}

/// First occupied voxel along a ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayHit {
    /// Flat index of the hit voxel, `None` on a miss.
    pub voxel: Option<usize>,
    /// Ray parameter where the hit voxel is entered; `+∞` on a miss.
    pub t: f64,
    /// Class of the hit voxel, [`EMPTY`] on a miss.
    pub class: u8,
}

impl RayHit {
    pub const MISS: RayHit = RayHit {
        voxel: None,
        t: f64::INFINITY,
        class: EMPTY,
    };
}

pub fn cast_ray(grid: &VoxelGridSpec, labels: &[u8], origin: [f64; 3], dir: [f64; 3]) -> Result<RayHit> {
    for s in Traversal::new(grid, origin, dir)? {
        let v = grid.flat(s.voxel[0], s.voxel[1], s.voxel[2]);
        if labels[v] != EMPTY {
            return Ok(RayHit {
                voxel: Some(v),
                t: s.t_enter,
                class: labels[v],
            });
        }
    }
    Ok(RayHit::MISS)
}

/// Length of the same-class run starting at the first hit.
pub fn run_length(grid: &VoxelGridSpec, labels: &[u8], origin: [f64; 3], dir: [f64; 3]) -> Result<Option<f64>> {
    let mut start: Option<(f64, u8)> = None;
    let mut end = 0.0;
    for s in Traversal::new(grid, origin, dir)? {
        let c = labels[grid.flat(s.voxel[0], s.voxel[1], s.voxel[2])];
        match start {
            None if c != EMPTY => {
                start = Some((s.t_enter, c));
                end = s.t_exit;
            }
            Some((_, class)) if c == class => end = s.t_exit,
            Some(_) => break,
            None => {}
        }
    }
    Ok(start.map(|(t0, _)| end - t0))
}
