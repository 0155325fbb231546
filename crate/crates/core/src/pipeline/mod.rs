//! Toy end-to-end model and the `gen` / `fit` / `eval` commands.
//!
//! The model treats per-pixel depth logits, occlusion kernels,
//! inter-object parameters and pixel features as free parameters (there is
//! no image backbone) and trains them, together with the prototype bank
//! and the flow decoder, by plain full-batch gradient descent.

mod config;
mod model;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub use config::{BinRange, Optimizer, RunConfig};
pub use model::{LossValues, ModelParams, Objective, ParamId, Prediction, Problem};

use crate::error::{Error, Result};
use crate::flowhead::{cost_volume, BevCollapse, FlowGrid};
use crate::io::{load_grid, save_grid, save_tensor, write_file, GridDump, GridPayload, EMPTY};
use crate::metrics::{evaluate, EvalInputs, MetricReport, RayQuerySet};
use crate::numgrad::Tensor;
use crate::scenes::{SceneSpec, VoxelLabelGrid};
use crate::svg;

pub const LABELS_FILE: &str = "labels.ocgr";
pub const PREV_LABELS_FILE: &str = "labels_prev.ocgr";
pub const FLOW_FILE: &str = "flow.ocgr";

#[derive(Clone, Debug)]
pub struct FitReport {
    /// Losses before each update.
    pub trace: Vec<LossValues>,
    /// Losses after the last update.
    pub last: LossValues,
    pub params: ModelParams,
}

impl FitReport {
    pub fn initial(&self) -> LossValues {
        self.trace.first().copied().unwrap_or(self.last)
    }
}

fn diverged(step: usize, e: Error) -> Error {
    if e.is_numeric() {
        Error::Diverged { step }
    } else {
        e
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Full-batch fit for `steps` steps with the problem's optimizer. `lr = 0`
/// leaves the parameters untouched.
pub fn fit(
    problem: &Problem,
    mut params: ModelParams,
    steps: usize,
    lr: f64,
    objective: Objective,
    mut on_step: impl FnMut(usize, &LossValues),
) -> Result<FitReport> {
    let mut trace = Vec::with_capacity(steps);
    let mut moments: BTreeMap<ParamId, (Vec<f64>, Vec<f64>)> = params
        .tensors
        .iter()
        .map(|(&id, t)| (id, (vec![0.0; t.data().len()], vec![0.0; t.data().len()])))
        .collect();
    for step in 0..steps {
        let (losses, grads) = problem
            .gradients(&params, Some(step), objective)
            .map_err(|e| diverged(step, e))?;
        if !losses.total.is_finite() {
            return Err(Error::Diverged { step });
        }
        on_step(step, &losses);
        trace.push(losses);
        if lr == 0.0 {
            continue;
        }
        let adam = problem.config.optimizer == Optimizer::Adam;
        let t = (step + 1) as i32;
        let (c1, c2) = (1.0 - ADAM_BETA1.powi(t), 1.0 - ADAM_BETA2.powi(t));
        for (id, g) in grads {
            let (m, v) = moments.get_mut(&id).expect("moments cover every parameter");
            let p = params.get(id);
            let mut data = p.data().to_vec();
            for (i, &gi) in g.data().iter().enumerate() {
                if adam {
                    m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
                    v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
                    data[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
                } else {
                    data[i] -= lr * gi;
                }
            }
            let next = Tensor::new(p.shape().to_vec(), data).map_err(|e| diverged(step, e))?;
            params.set(id, next)?;
        }
    }
    let last = problem
        .losses(&params, Some(steps))
        .map_err(|e| diverged(steps, e))?;
    Ok(FitReport {
        trace,
        last,
        params,
    })
}

fn load_scene(cfg: &RunConfig) -> Result<SceneSpec> {
    if cfg.scene.as_os_str().is_empty() {
        return Err(Error::invalid("config does not name a scene file"));
    }
    SceneSpec::load(&cfg.scene)
}

/// Writes the scene, its label grids, flow and rendered maps to `out`.
pub fn cmd_gen(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let mut spec = load_scene(cfg)?;
    spec.seed = cfg.seed;
    let scene = crate::scenes::generate(&spec)?;
    let view = crate::scenes::render(&spec, &scene.cur)?;
    let mut written = Vec::new();
    let mut put = |name: &str, bytes: Vec<u8>| -> Result<()> {
        let p = out.join(name);
        write_file(&p, &bytes)?;
        written.push(p);
        Ok(())
    };
    put("scene.json", spec.to_json().into_bytes())?;
    put(LABELS_FILE, crate::io::encode_grid(&scene.cur.to_dump())?)?;
    put(PREV_LABELS_FILE, crate::io::encode_grid(&scene.prev.to_dump())?)?;
    put(FLOW_FILE, crate::io::encode_grid(&scene.flow.to_dump())?)?;
    // misses are stored as depth 0
    let depth: Vec<f64> = view.depth.iter().map(|d| if d.is_finite() { *d } else { 0.0 }).collect();
    put("depth.oclt", crate::io::encode_tensor(&Tensor::vector(depth)?)?)?;
    put(
        "semantic.ocgr",
        crate::io::encode_grid(&GridDump {
            dims: vec![view.semantic.len()],
            payload: GridPayload::Labels(view.semantic.clone()),
        })?,
    )?;
    Ok(written)
}

fn trace_csv(report: &FitReport) -> String {
    let mut s = String::from("step,l3d,l2d,depth,sem,flow_reg,flow_cls,flow,total\n");
    let rows = report.trace.iter().chain(std::iter::once(&report.last));
    for (i, l) in rows.enumerate() {
        let _ = writeln!(
            s,
            "{i},{},{},{},{},{},{},{},{}",
            l.l3d, l.l2d, l.depth, l.sem, l.flow_reg, l.flow_cls, l.flow, l.total
        );
    }
    s
}

/// Ray queries for a scene: one per camera pixel.
pub fn scene_rays(spec: &SceneSpec) -> Result<RayQuerySet> {
    RayQuerySet::from_cameras(&spec.cameras)
}

pub fn scene_metrics(spec: &SceneSpec, pred: &VoxelLabelGrid, pred_flow: &FlowGrid, gt: &VoxelLabelGrid, gt_flow: &FlowGrid) -> Result<MetricReport> {
    let rays = scene_rays(spec)?;
    evaluate(
        pred,
        pred_flow,
        gt,
        gt_flow,
        &EvalInputs {
            grid: &spec.grid,
            num_classes: spec.num_classes,
            dynamic: &spec.dynamic_classes,
            rays: &rays,
        },
    )
}

/// Output of [`cmd_fit`].
pub struct FitOutcome {
    pub report: FitReport,
    pub metrics: MetricReport,
}

/// Trains the toy model and writes the loss trace, parameters, predicted
/// grids, transfer matrix and metrics to `out`.
pub fn cmd_fit(cfg: &RunConfig, out: &Path, mut on_step: impl FnMut(usize, &LossValues)) -> Result<FitOutcome> {
    let spec = load_scene(cfg)?;
    let problem = Problem::new(spec, cfg.clone())?;
    let params = problem.init_params()?;
    let report = fit(&problem, params, cfg.steps, cfg.lr, Objective::SemFlow, &mut on_step)?;
    let pred = problem.predict(&report.params)?;
    let metrics = scene_metrics(&problem.spec, &pred.labels, &pred.flow, &problem.scene.cur, &problem.scene.flow)?;

    write_file(&out.join("loss_trace.csv"), trace_csv(&report).as_bytes())?;
    for (id, t) in &report.params.tensors {
        save_tensor(&out.join("params").join(format!("{}.oclt", id.name())), t)?;
    }
    save_grid(&out.join(LABELS_FILE), &pred.labels.to_dump())?;
    save_grid(&out.join(FLOW_FILE), &pred.flow.to_dump())?;
    write_file(&out.join("transfer.ocmt"), &pred.transfer.encode())?;
    write_file(&out.join("metrics.txt"), metrics.to_text().as_bytes())?;
    let totals: Vec<f64> = report.trace.iter().map(|l| l.total).collect();
    write_file(&out.join("loss.svg"), svg::line_plot(&totals, "total loss").as_bytes())?;
    Ok(FitOutcome { report, metrics })
}

fn load_labels(dir: &Path, name: &str) -> Result<VoxelLabelGrid> {
    VoxelLabelGrid::from_dump(&load_grid(&dir.join(name))?)
}

fn load_flow(dir: &Path) -> Result<FlowGrid> {
    FlowGrid::from_dump(&load_grid(&dir.join(FLOW_FILE))?)
}

/// Compares the grids in `pred_dir` against those in `gt_dir`. With
/// `svg_dir`, also writes BEV heatmaps.
pub fn cmd_eval(cfg: &RunConfig, pred_dir: &Path, gt_dir: &Path, svg_dir: Option<&Path>) -> Result<MetricReport> {
    let spec = load_scene(cfg)?;
    let pred = load_labels(pred_dir, LABELS_FILE)?;
    let gt = load_labels(gt_dir, LABELS_FILE)?;
    let pred_flow = load_flow(pred_dir)?;
    let gt_flow = load_flow(gt_dir)?;
    for (what, dims) in [("prediction", pred.dims), ("ground truth", gt.dims), ("predicted flow", pred_flow.dims), ("flow", gt_flow.dims)] {
        if dims != spec.grid.dims {
            return Err(Error::shape(
                "eval",
                format!("{what} grid {dims:?} does not match scene grid {:?}", spec.grid.dims),
            ));
        }
    }
    let report = scene_metrics(&spec, &pred, &pred_flow, &gt, &gt_flow)?;
    if let Some(dir) = svg_dir {
        write_file(&dir.join("labels_pred.svg"), svg::label_heatmap(&pred).as_bytes())?;
        write_file(&dir.join("labels_gt.svg"), svg::label_heatmap(&gt).as_bytes())?;
        write_file(&dir.join("flow_pred.svg"), svg::flow_heatmap(&pred_flow).as_bytes())?;
        write_file(&dir.join("flow_gt.svg"), svg::flow_heatmap(&gt_flow).as_bytes())?;
        if let Ok(prev) = load_labels(gt_dir, PREV_LABELS_FILE) {
            let collapse = BevCollapse::new(&cfg.bev, &spec.grid)?;
            let one_hot = |g: &VoxelLabelGrid| -> Result<Tensor> {
                let c = spec.num_classes;
                let mut data = vec![0.0; g.labels.len() * c];
                for (v, &l) in g.labels.iter().enumerate() {
                    if l != EMPTY {
                        data[v * c + l as usize] = 1.0;
                    }
                }
                collapse.apply(&Tensor::new(vec![g.labels.len(), c], data)?)
            };
            let window = crate::flowhead::square_window(cfg.window_radius);
            let cv = cost_volume(&one_hot(&pred)?, &one_hot(&prev)?, &spec.ego_motion, &spec.grid, &window)?;
            write_file(
                &dir.join("cost_volume.svg"),
                svg::cost_volume_heatmap(&cv, collapse.plane.rows, collapse.plane.cols).as_bytes(),
            )?;
        }
    }
    Ok(report)
}
