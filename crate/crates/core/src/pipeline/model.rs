use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flowhead::{
    cost_volume_var, decode_flow_var, flow_cls_loss_var, flow_loss_voxels, flow_reg_loss_var,
    square_window, BevCollapse, DecoderVars, FlowBinSpec, FlowDecoder, FlowGrid,
};
use crate::geometry::{DepthBinSpec, EgoMotion};
use crate::lifting::{
    apply_lift_var, blend_denoise_var, build_transfer_var, depth_to_occluded_var,
    gt_depth_distribution, select_top_bins, DenoiseSchedule, InterObjectVars, LiftGeometry,
    SparseTransferMatrix, SparseTransferVar,
};
use crate::numgrad::{Gradients, Tape, Tensor, Var};
use crate::scenes::{generate, render, GeneratedScene, RenderedView, SceneSpec, VoxelLabelGrid};
use crate::semhead::{argmax_labels, class_logits_var, gaussian, sampled_semantic_loss, BankVars, PrototypeBank};

use super::config::RunConfig;

/// Learnable tensors of the toy model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamId {
    DepthLogits,
    KernelLogits,
    InterObject,
    PixelFeatures,
    PrevPixelFeatures,
    VolumeBias,
    Prototypes,
    ProtoW1,
    ProtoB1,
    ProtoW2,
    DecoderW1,
    DecoderB1,
    DecoderW2,
    DecoderB2,
}

impl ParamId {
    pub const ALL: [ParamId; 14] = [
        ParamId::DepthLogits,
        ParamId::KernelLogits,
        ParamId::InterObject,
        ParamId::PixelFeatures,
        ParamId::PrevPixelFeatures,
        ParamId::VolumeBias,
        ParamId::Prototypes,
        ParamId::ProtoW1,
        ParamId::ProtoB1,
        ParamId::ProtoW2,
        ParamId::DecoderW1,
        ParamId::DecoderB1,
        ParamId::DecoderW2,
        ParamId::DecoderB2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamId::DepthLogits => "depth_logits",
            ParamId::KernelLogits => "kernel_logits",
            ParamId::InterObject => "inter_object",
            ParamId::PixelFeatures => "pixel_features",
            ParamId::PrevPixelFeatures => "prev_pixel_features",
            ParamId::VolumeBias => "volume_bias",
            ParamId::Prototypes => "prototypes",
            ParamId::ProtoW1 => "proto_w1",
            ParamId::ProtoB1 => "proto_b1",
            ParamId::ProtoW2 => "proto_w2",
            ParamId::DecoderW1 => "decoder_w1",
            ParamId::DecoderB1 => "decoder_b1",
            ParamId::DecoderW2 => "decoder_w2",
            ParamId::DecoderB2 => "decoder_b2",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub tensors: BTreeMap<ParamId, Tensor>,
}

impl ModelParams {
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[&id]
    }

    pub fn set(&mut self, id: ParamId, t: Tensor) -> Result<()> {
        if t.shape() != self.get(id).shape() {
            return Err(Error::shape(
                "model parameter",
                format!("{} expects {:?}, got {:?}", id.name(), self.get(id).shape(), t.shape()),
            ));
        }
        self.tensors.insert(id, t);
        Ok(())
    }
}

/// Loss values of one forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub l3d: f64,
    pub l2d: f64,
    pub depth: f64,
    pub sem: f64,
    pub flow_reg: f64,
    pub flow_cls: f64,
    pub flow: f64,
    pub total: f64,
}

struct LossVars {
    l3d: Var,
    l2d: Var,
    depth: Var,
    sem: Var,
    flow_reg: Var,
    flow_cls: Var,
    flow: Var,
    total: Var,
}

struct Forward {
    leaves: BTreeMap<ParamId, Var>,
    volume: Var,
    logits: Var,
    flow: Var,
    transfer: SparseTransferVar,
    losses: LossVars,
}

/// A scene with its rendered ground truth and the fixed parts of the model.
pub struct Problem {
    pub config: RunConfig,
    pub spec: SceneSpec,
    pub scene: GeneratedScene,
    pub view: RenderedView,
    pub prev_view: RenderedView,
    pub bins: DepthBinSpec,
    pub flow_bins: FlowBinSpec,
    pub geometry: LiftGeometry,
    gt_depth: Tensor,
    prev_transfer: SparseTransferMatrix,
    collapse: BevCollapse,
    window: Vec<[i64; 2]>,
    loss_voxels: Vec<usize>,
}

impl Problem {
    pub fn new(spec: SceneSpec, config: RunConfig) -> Result<Self> {
        config.validate()?;
        let scene = generate(&spec)?;
        let view = render(&spec, &scene.cur)?;
        let prev_view = render(&spec, &scene.prev)?;
        let bins = config.depth_spec()?;
        let flow_bins = config.flow_spec()?;
        let geometry = LiftGeometry::new(&spec.cameras, &bins, &spec.grid)?;
        let gt_depth = gt_depth_distribution(&view.depth, &bins)?;

        let prev_depth = gt_depth_distribution(&prev_view.depth, &bins)?;
        let mut tape = Tape::new();
        let pd = tape.constant(prev_depth);
        let pt = build_transfer_var(&mut tape, &geometry, pd, None)?;
        let prev_transfer = pt.to_matrix(&tape);

        let collapse = BevCollapse::new(&config.bev, &spec.grid)?;
        let loss_voxels = flow_loss_voxels(&scene.flow.data, config.seed);
        Ok(Problem {
            window: square_window(config.window_radius),
            config,
            spec,
            scene,
            view,
            prev_view,
            bins,
            flow_bins,
            geometry,
            gt_depth,
            prev_transfer,
            collapse,
            loss_voxels,
        })
    }

    pub fn pixels(&self) -> usize {
        self.geometry.pixels
    }

    pub fn voxels(&self) -> usize {
        self.geometry.num_voxels()
    }

    fn decoder_inputs(&self) -> usize {
        self.config.feature_dim + self.window.len()
    }

    /// Seeded initial parameters.
    pub fn init_params(&self) -> Result<ModelParams> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let (p, d, f) = (self.pixels(), self.bins.len(), self.config.feature_dim);
        let normal = |shape: Vec<usize>, scale: f64, rng: &mut ChaCha8Rng| -> Result<Tensor> {
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| gaussian(rng) * scale).collect())
        };
        let mut t = BTreeMap::new();
        t.insert(ParamId::DepthLogits, normal(vec![p, d], 0.1, &mut rng)?);
        t.insert(ParamId::KernelLogits, Tensor::full(vec![p, d - 1], -2.0)?);
        let mut inter = vec![0.0; p * d * 3];
        for i in 0..p * d {
            inter[i * 3 + 2] = -2.0;
        }
        t.insert(ParamId::InterObject, Tensor::new(vec![p, d, 3], inter)?);
        t.insert(ParamId::PixelFeatures, normal(vec![p, f], 0.5, &mut rng)?);
        t.insert(ParamId::PrevPixelFeatures, normal(vec![p, f], 0.5, &mut rng)?);
        t.insert(ParamId::VolumeBias, Tensor::zeros(vec![f]));
        let bank = PrototypeBank::random(self.spec.num_classes, f, &mut rng)?;
        t.insert(ParamId::Prototypes, bank.prototypes);
        t.insert(ParamId::ProtoW1, bank.w1);
        t.insert(ParamId::ProtoB1, bank.b1);
        t.insert(ParamId::ProtoW2, bank.w2);
        let dec = FlowDecoder::random(self.decoder_inputs(), self.config.decoder_hidden, self.flow_bins.len(), &mut rng)?;
        t.insert(ParamId::DecoderW1, dec.w1);
        t.insert(ParamId::DecoderB1, dec.b1);
        t.insert(ParamId::DecoderW2, dec.w2);
        t.insert(ParamId::DecoderB2, dec.b2);
        Ok(ModelParams { tensors: t })
    }

    /// Denoising schedule at a training step, `None` for inference.
    pub fn schedule(&self, step: Option<usize>) -> DenoiseSchedule {
        match step {
            Some(s) => DenoiseSchedule {
                total_steps: self.config.denoise_steps(),
                step: Some(s as u64),
            },
            None => DenoiseSchedule::inference(),
        }
    }

    fn forward(&self, tape: &mut Tape, params: &ModelParams, step: Option<usize>) -> Result<Forward> {
        let cfg = &self.config;
        let leaves: BTreeMap<ParamId, Var> = params
            .tensors
            .iter()
            .map(|(&id, t)| (id, tape.leaf(t.clone())))
            .collect();
        let (p, d) = (self.pixels(), self.bins.len());

        // depth, denoising and occlusion transfer
        let depth = tape.softmax_lastdim(leaves[&ParamId::DepthLogits])?;
        let blended = blend_denoise_var(tape, depth, &self.gt_depth, self.schedule(step))?;
        let occ = if cfg.occlusion_kernel {
            let kernel = tape.sigmoid(leaves[&ParamId::KernelLogits])?;
            depth_to_occluded_var(tape, blended, kernel)?
        } else {
            blended
        };

        let inter = if cfg.inter_object {
            let selected = select_top_bins(tape.value(blended), cfg.m)?;
            let rows: Vec<usize> = selected
                .iter()
                .enumerate()
                .map(|(r, &bin)| (r / cfg.m) * d + bin)
                .collect();
            let raw = tape.reshape(leaves[&ParamId::InterObject], vec![p * d, 3])?;
            let g = tape.gather(raw, Arc::new(rows))?;
            let pick_uv = tape.constant(Tensor::new(vec![3, 2], vec![1., 0., 0., 1., 0., 0.])?);
            let pick_w = tape.constant(Tensor::new(vec![3, 1], vec![0., 0., 1.])?);
            let offsets = tape.matmul(g, pick_uv)?;
            let w = tape.matmul(g, pick_w)?;
            let w = tape.sigmoid(w)?;
            let weights = tape.reshape(w, vec![p * cfg.m])?;
            Some(InterObjectVars {
                m: cfg.m,
                selected,
                offsets,
                weights,
            })
        } else {
            None
        };

        let transfer = build_transfer_var(tape, &self.geometry, occ, inter.as_ref())?;
        let lifted = apply_lift_var(tape, &transfer, leaves[&ParamId::PixelFeatures])?;
        let volume = tape.add(lifted, leaves[&ParamId::VolumeBias])?;

        // semantic losses
        let bank = BankVars {
            prototypes: leaves[&ParamId::Prototypes],
            w1: leaves[&ParamId::ProtoW1],
            b1: leaves[&ParamId::ProtoB1],
            w2: leaves[&ParamId::ProtoW2],
        };
        let protos = bank.transformed(tape)?;
        let logits = class_logits_var(tape, volume, protos)?;
        let (l3d, _) = sampled_semantic_loss(
            tape,
            volume,
            protos,
            &self.scene.cur.labels,
            cfg.k_samples.min(self.voxels()),
            cfg.seed,
            cfg.alpha,
            cfg.beta,
        )?;
        let (l2d, _) = sampled_semantic_loss(
            tape,
            leaves[&ParamId::PixelFeatures],
            protos,
            &self.view.semantic,
            cfg.k_samples.min(p),
            cfg.seed,
            cfg.alpha,
            cfg.beta,
        )?;
        let log_depth = tape.log(depth)?;
        let gt = tape.constant(self.gt_depth.clone());
        let ll = tape.mul(log_depth, gt)?;
        let ll = tape.sum(ll)?;
        let ldepth = tape.scale(ll, -1.0 / p as f64)?;
        let sem = tape.add(l3d.total, l2d.total)?;
        let sem = tape.add(sem, ldepth)?;

        // flow
        let prev_w = tape.constant(Tensor::vector(self.prev_transfer.weights.clone())?);
        let prev_m = SparseTransferVar {
            rows: Arc::new(self.prev_transfer.rows.clone()),
            cols: Arc::new(self.prev_transfer.cols.clone()),
            weights: prev_w,
            shape: self.prev_transfer.shape,
        };
        let prev_lift = apply_lift_var(tape, &prev_m, leaves[&ParamId::PrevPixelFeatures])?;
        let prev_volume = tape.add(prev_lift, leaves[&ParamId::VolumeBias])?;
        let cv = if cfg.cost_volume {
            let cur_bev = self.collapse.apply_var(tape, volume)?;
            let prev_bev = self.collapse.apply_var(tape, prev_volume)?;
            let cv = cost_volume_var(tape, cur_bev, prev_bev, &self.spec.ego_motion, &self.spec.grid, &self.window)?;
            self.collapse.broadcast_var(tape, cv)?
        } else {
            tape.constant(Tensor::zeros(vec![self.voxels(), self.window.len()]))
        };
        let dec = DecoderVars {
            w1: leaves[&ParamId::DecoderW1],
            b1: leaves[&ParamId::DecoderB1],
            w2: leaves[&ParamId::DecoderW2],
            b2: leaves[&ParamId::DecoderB2],
        };
        let pred = decode_flow_var(tape, volume, cv, &self.flow_bins, &dec)?;
        let flow_reg = flow_reg_loss_var(tape, pred.flow, &self.scene.flow.data, &self.loss_voxels)?;
        let flow_cls = flow_cls_loss_var(tape, pred.probs, &self.scene.flow.data, &self.flow_bins, &self.loss_voxels)?;
        let flow = tape.add(flow_reg, flow_cls)?;
        let total = tape.add(sem, flow)?;

        Ok(Forward {
            leaves,
            volume,
            logits,
            flow: pred.flow,
            transfer,
            losses: LossVars {
                l3d: l3d.total,
                l2d: l2d.total,
                depth: ldepth,
                sem,
                flow_reg,
                flow_cls,
                flow,
                total,
            },
        })
    }

    fn values(tape: &Tape, l: &LossVars) -> Result<LossValues> {
        let v = |x: Var| tape.value(x).item();
        Ok(LossValues {
            l3d: v(l.l3d)?,
            l2d: v(l.l2d)?,
            depth: v(l.depth)?,
            sem: v(l.sem)?,
            flow_reg: v(l.flow_reg)?,
            flow_cls: v(l.flow_cls)?,
            flow: v(l.flow)?,
            total: v(l.total)?,
        })
    }

    pub fn losses(&self, params: &ModelParams, step: Option<usize>) -> Result<LossValues> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, params, step)?;
        Problem::values(&tape, &f.losses)
    }

    /// Losses and gradients of `objective` with respect to every parameter.
    pub fn gradients(
        &self,
        params: &ModelParams,
        step: Option<usize>,
        objective: Objective,
    ) -> Result<(LossValues, BTreeMap<ParamId, Tensor>)> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, params, step)?;
        let values = Problem::values(&tape, &f.losses)?;
        let root = match objective {
            Objective::Sem => f.losses.sem,
            Objective::SemFlow => f.losses.total,
        };
        let grads: Gradients = tape.backward(root)?;
        let out = f
            .leaves
            .iter()
            .map(|(&id, &v)| {
                let g = match grads.get(v) {
                    Some(g) => g.clone(),
                    // off the objective's path
                    None => Tensor::zeros(params.get(id).shape().to_vec()),
                };
                (id, g)
            })
            .collect();
        Ok((values, out))
    }

    /// Inference-time labels, flow, lifted features and transfer matrix.
    pub fn predict(&self, params: &ModelParams) -> Result<Prediction> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, params, None)?;
        let labels = VoxelLabelGrid {
            dims: self.spec.grid.dims,
            labels: argmax_labels(tape.value(f.logits)),
        };
        Ok(Prediction {
            labels,
            flow: FlowGrid::from_tensor(self.spec.grid.dims, tape.value(f.flow))?,
            volume: tape.value(f.volume).clone(),
            transfer: f.transfer.to_matrix(&tape),
        })
    }

    pub fn ego_motion(&self) -> &EgoMotion {
        &self.spec.ego_motion
    }
}

/// Which loss a gradient step minimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// `L_3D + L_2D + L_depth`.
    Sem,
    /// The semantic loss plus the flow loss.
    SemFlow,
}

pub struct Prediction {
    pub labels: VoxelLabelGrid,
    pub flow: FlowGrid,
    pub volume: Tensor,
    pub transfer: SparseTransferMatrix,
}
