//! Prototype occupancy head.
//!
//! Every class (plus the empty class, stored last) owns a prototype
//! vector. A small residual MLP encodes the prototypes before they are
//! dotted with voxel or pixel features, so logits are
//! `logit[x, c] = T(P_c) · f_x` with `T(P) = P + tanh(P W1 + b1) W2`.
//!
//! Losses are evaluated only on a [`SamplingPlan`] of hard points and only
//! for classes present in the ground truth (the empty class always takes
//! part).

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::io::EMPTY;
use crate::numgrad::{Tape, Tensor, Var};

/// Default number of sampled points.
pub const DEFAULT_K: usize = 25088;
pub const DEFAULT_ALPHA: f64 = 5.0;
pub const DEFAULT_BETA: f64 = 20.0;

const DICE_SMOOTH: f64 = 1.0;
const PRIOR_MIN: f64 = 1.0;
const PRIOR_MAX: f64 = 100.0;

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    /// `[C + 1, F]`; row `C` is the empty-class embedding.
    pub prototypes: Tensor,
    /// `[F, F]`.
    pub w1: Tensor,
    /// `[F]`.
    pub b1: Tensor,
    /// `[F, F]`.
    pub w2: Tensor,
}

impl PrototypeBank {
    pub fn new(prototypes: Tensor, w1: Tensor, b1: Tensor, w2: Tensor) -> Result<Self> {
        let bank = PrototypeBank {
            prototypes,
            w1,
            b1,
            w2,
        };
        bank.validate()?;
        Ok(bank)
    }

    /// Bank with an identity transform (`W2 = 0`).
    pub fn plain(prototypes: Tensor) -> Result<Self> {
        if prototypes.rank() != 2 {
            return Err(Error::shape("prototype bank", "expected [C + 1, F]"));
        }
        let f = prototypes.shape()[1];
        PrototypeBank::new(
            prototypes,
            Tensor::zeros(vec![f, f]),
            Tensor::zeros(vec![f]),
            Tensor::zeros(vec![f, f]),
        )
    }

    /// Gaussian-initialized bank.
    pub fn random(classes: usize, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut normal = |n: usize, scale: f64| -> Vec<f64> {
            (0..n).map(|_| gaussian(rng) * scale).collect()
        };
        let s = 1.0 / (dim as f64).sqrt();
        PrototypeBank::new(
            Tensor::new(vec![classes + 1, dim], normal((classes + 1) * dim, s))?,
            Tensor::new(vec![dim, dim], normal(dim * dim, s))?,
            Tensor::zeros(vec![dim]),
            Tensor::new(vec![dim, dim], normal(dim * dim, 0.1 * s))?,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.prototypes.shape();
        if p.len() != 2 || p[0] < 2 {
            return Err(Error::shape(
                "prototype bank",
                format!("expected [C + 1 >= 2, F], got {p:?}"),
            ));
        }
        let f = p[1];
        if self.w1.shape() != [f, f] || self.b1.shape() != [f] || self.w2.shape() != [f, f] {
            return Err(Error::shape("prototype bank", "transform does not match F"));
        }
        Ok(())
    }

    /// Number of semantic classes `C`, excluding empty.
    pub fn num_classes(&self) -> usize {
        self.prototypes.shape()[0] - 1
    }

    pub fn dim(&self) -> usize {
        self.prototypes.shape()[1]
    }

    /// `T(P)` for every row, `[C + 1, F]`.
    pub fn transformed(&self) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = BankVars::constants(&mut tape, self);
        let t = vars.transformed(&mut tape)?;
        Ok(tape.value(t).clone())
    }
}

pub(crate) fn gaussian(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// A [`PrototypeBank`] recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BankVars {
    pub prototypes: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
}

impl BankVars {
    pub fn leaves(tape: &mut Tape, bank: &PrototypeBank) -> Self {
        BankVars {
            prototypes: tape.leaf(bank.prototypes.clone()),
            w1: tape.leaf(bank.w1.clone()),
            b1: tape.leaf(bank.b1.clone()),
            w2: tape.leaf(bank.w2.clone()),
        }
    }

    pub fn constants(tape: &mut Tape, bank: &PrototypeBank) -> Self {
        BankVars {
            prototypes: tape.constant(bank.prototypes.clone()),
            w1: tape.constant(bank.w1.clone()),
            b1: tape.constant(bank.b1.clone()),
            w2: tape.constant(bank.w2.clone()),
        }
    }

    pub fn transformed(&self, tape: &mut Tape) -> Result<Var> {
        let h = tape.matmul(self.prototypes, self.w1)?;
        let h = tape.add(h, self.b1)?;
        let h = tape.tanh(h)?;
        let r = tape.matmul(h, self.w2)?;
        tape.add(self.prototypes, r)
    }
}

/// `[N, C + 1]` logits of `[N, F]` features against transformed prototypes.
pub fn class_logits_var(tape: &mut Tape, features: Var, transformed: Var) -> Result<Var> {
    let f = tape.value(features).shape().to_vec();
    let p = tape.value(transformed).shape().to_vec();
    if f.len() != 2 || p.len() != 2 || f[1] != p[1] {
        return Err(Error::shape(
            "class_logits",
            format!("features {f:?} against prototypes {p:?}"),
        ));
    }
    let pt = tape.transpose(transformed)?;
    tape.matmul(features, pt)
}

/// Logits `[N, classes.len()]`; `classes = None` means all `C + 1` rows.
pub fn class_logits(features: &Tensor, bank: &PrototypeBank, classes: Option<&[usize]>) -> Result<Tensor> {
    if features.rank() != 2 || features.shape()[1] != bank.dim() {
        return Err(Error::shape(
            "class_logits",
            format!("features {:?} for prototype dim {}", features.shape(), bank.dim()),
        ));
    }
    let mut tape = Tape::new();
    let vars = BankVars::constants(&mut tape, bank);
    let mut t = vars.transformed(&mut tape)?;
    if let Some(cs) = classes {
        if let Some(&bad) = cs.iter().find(|&&c| c > bank.num_classes()) {
            return Err(Error::invalid(format!("class {bad} out of range")));
        }
        t = tape.gather(t, Arc::new(cs.to_vec()))?;
    }
    let f = tape.constant(features.clone());
    let l = class_logits_var(&mut tape, f, t)?;
    Ok(tape.value(l).clone())
}

/// Maps a stored label (`EMPTY` for unoccupied) to its logit column.
pub fn label_index(label: u8, classes: usize) -> Result<usize> {
    if label == EMPTY {
        Ok(classes)
    } else if (label as usize) < classes {
        Ok(label as usize)
    } else {
        Err(Error::invalid(format!("label {label} with {classes} classes")))
    }
}

/// Inverse of [`label_index`].
pub fn index_label(index: usize, classes: usize) -> u8 {
    if index >= classes {
        EMPTY
    } else {
        index as u8
    }
}

/// Which semantic classes occur in a ground-truth sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassPresenceMask {
    pub present: Vec<bool>,
}

impl ClassPresenceMask {
    pub fn from_labels(labels: &[u8], classes: usize) -> Result<Self> {
        let mut present = vec![false; classes];
        for &l in labels {
            let i = label_index(l, classes)?;
            if i < classes {
                present[i] = true;
            }
        }
        Ok(ClassPresenceMask { present })
    }

    /// Present classes followed by the empty class.
    pub fn active(&self) -> Vec<usize> {
        let mut a: Vec<usize> = (0..self.present.len()).filter(|&c| self.present[c]).collect();
        a.push(self.present.len());
        a
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplingPlan {
    pub k: usize,
    /// Per-candidate score.
    pub scores: Vec<f64>,
    /// Selected candidate ids, ascending.
    pub selected: Vec<usize>,
}

/// Picks the `k` hardest points.
///
/// Uncertainty is `-min_c |logit[x, c]|`, turned into a rank in `(0, 1]`
/// and multiplied by `clamp(1 / freq(label), 1, 100)` where `freq` is the
/// label's share of the candidates. Equal uncertainties are ordered by a
/// seeded permutation, so freshly initialized models still spread their
/// samples; equal final scores go to the lower index.
pub fn uncertainty_sample(logits: &Tensor, labels: &[u8], k: usize, seed: u64) -> Result<SamplingPlan> {
    if k == 0 {
        return Err(Error::invalid("sample count K must be at least 1"));
    }
    if logits.rank() != 2 || logits.shape()[0] != labels.len() {
        return Err(Error::shape(
            "uncertainty_sample",
            format!("logits {:?} for {} labels", logits.shape(), labels.len()),
        ));
    }
    let n = labels.len();
    let classes = logits.shape()[1] - 1;
    let c = logits.shape()[1];
    let uncertainty: Vec<f64> = logits
        .data()
        .chunks(c.max(1))
        .map(|row| -row.iter().fold(f64::INFINITY, |m, v| m.min(v.abs())))
        .collect();

    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut tie = vec![0usize; n];
    for (pos, &x) in perm.iter().enumerate() {
        tie[x] = pos;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| uncertainty[a].total_cmp(&uncertainty[b]).then(tie[a].cmp(&tie[b])));

    let mut counts = vec![0usize; classes + 1];
    let mut idx = Vec::with_capacity(n);
    for &l in labels {
        let i = label_index(l, classes)?;
        counts[i] += 1;
        idx.push(i);
    }
    let mut scores = vec![0.0; n];
    for (r, &x) in order.iter().enumerate() {
        let freq = counts[idx[x]] as f64 / n as f64;
        let prior = (1.0 / freq).clamp(PRIOR_MIN, PRIOR_MAX);
        scores[x] = (r + 1) as f64 / n as f64 * prior;
    }
    let mut by_score: Vec<usize> = (0..n).collect();
    by_score.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut selected: Vec<usize> = by_score.into_iter().take(k).collect();
    selected.sort_unstable();
    Ok(SamplingPlan { k, scores, selected })
}

/// Loss terms of one Dice + BCE evaluation.
#[derive(Clone, Copy, Debug)]
pub struct SemLoss {
    pub total: Var,
    pub dice: Var,
    pub bce: Var,
}

/// `α · Dice + β · BCE` over `[K, C + 1]` sampled logits.
///
/// `targets` are logit columns (empty = `C`). Only the columns of
/// `present.active()` enter either term.
pub fn dice_bce_loss(
    tape: &mut Tape,
    logits: Var,
    targets: &[usize],
    present: &ClassPresenceMask,
    alpha: f64,
    beta: f64,
) -> Result<SemLoss> {
    let shape = tape.value(logits).shape().to_vec();
    if shape.len() != 2 || shape[1] != present.present.len() + 1 {
        return Err(Error::shape(
            "dice_bce_loss",
            format!("logits {shape:?} for {} classes", present.present.len()),
        ));
    }
    if shape[0] == 0 {
        return Err(Error::invalid("no sampled points"));
    }
    if targets.len() != shape[0] {
        return Err(Error::shape("dice_bce_loss", "one target per sampled point"));
    }
    if !(alpha >= 0.0 && beta >= 0.0) {
        return Err(Error::invalid("loss weights must be nonnegative"));
    }
    let (k, c) = (shape[0], shape[1]);
    if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
        return Err(Error::invalid(format!("target {bad} out of range")));
    }
    let active = present.active();
    let a = active.len();
    let mut q = vec![0.0; a * k];
    for (row, &cls) in active.iter().enumerate() {
        for (x, &t) in targets.iter().enumerate() {
            if t == cls {
                q[row * k + x] = 1.0;
            }
        }
    }
    let q_sum: Vec<f64> = q.chunks(k).map(|r| r.iter().sum()).collect();
    let q_t = Tensor::new(vec![a, k], q)?;
    let one_minus_q = Tensor::new(vec![a, k], q_t.data().iter().map(|v| 1.0 - v).collect())?;

    let lt = tape.transpose(logits)?;
    let x = tape.gather(lt, Arc::new(active))?;
    let p = tape.sigmoid(x)?;
    let q = tape.constant(q_t);

    // Dice per active class, then averaged.
    let pq = tape.mul(p, q)?;
    let inter = tape.row_sums(pq)?;
    let num = tape.scale(inter, 2.0)?;
    let num = tape.add_scalar(num, DICE_SMOOTH)?;
    let p_sum = tape.row_sums(p)?;
    let qs = tape.constant(Tensor::new(vec![a, 1], q_sum)?);
    let den = tape.add(p_sum, qs)?;
    let den = tape.add_scalar(den, DICE_SMOOTH)?;
    let ratio = tape.div(num, den)?;
    let ratio = tape.mean(ratio)?;
    let neg = tape.scale(ratio, -1.0)?;
    let dice = tape.add_scalar(neg, 1.0)?;

    // Binary cross-entropy with log σ(x) and log σ(-x) for stability.
    let log_p = tape.log(p)?;
    let nx = tape.scale(x, -1.0)?;
    let np = tape.sigmoid(nx)?;
    let log_np = tape.log(np)?;
    let pos = tape.mul(log_p, q)?;
    let omq = tape.constant(one_minus_q);
    let negs = tape.mul(log_np, omq)?;
    let ll = tape.add(pos, negs)?;
    let ll = tape.mean(ll)?;
    let bce = tape.scale(ll, -1.0)?;

    let da = tape.scale(dice, alpha)?;
    let bb = tape.scale(bce, beta)?;
    let total = tape.add(da, bb)?;
    Ok(SemLoss { total, dice, bce })
}

/// Sampled semantic loss over any point set (voxels or pixels).
///
/// Scores the current logits, selects `k` points, and evaluates
/// [`dice_bce_loss`] on those points only.
#[allow(clippy::too_many_arguments)]
pub fn sampled_semantic_loss(
    tape: &mut Tape,
    features: Var,
    transformed: Var,
    labels: &[u8],
    k: usize,
    seed: u64,
    alpha: f64,
    beta: f64,
) -> Result<(SemLoss, SamplingPlan)> {
    let classes = tape.value(transformed).shape()[0] - 1;
    let present = ClassPresenceMask::from_labels(labels, classes)?;
    let logits = class_logits_var(tape, features, transformed)?;
    let plan = uncertainty_sample(tape.value(logits), labels, k, seed)?;
    let sampled = tape.gather(logits, Arc::new(plan.selected.clone()))?;
    let targets = plan
        .selected
        .iter()
        .map(|&x| label_index(labels[x], classes))
        .collect::<Result<Vec<_>>>()?;
    let loss = dice_bce_loss(tape, sampled, &targets, &present, alpha, beta)?;
    Ok((loss, plan))
}

/// Auxiliary image-plane loss against rendered semantic masks.
#[allow(clippy::too_many_arguments)]
pub fn aux_2d_loss(
    tape: &mut Tape,
    pixel_features: Var,
    bank: &BankVars,
    masks: &[u8],
    k: usize,
    seed: u64,
    alpha: f64,
    beta: f64,
) -> Result<SemLoss> {
    let t = bank.transformed(tape)?;
    sampled_semantic_loss(tape, pixel_features, t, masks, k, seed, alpha, beta).map(|r| r.0)
}

/// Per-voxel argmax over `C + 1` logits; ties go to the lower class and
/// the empty class maps to [`EMPTY`].
pub fn infer_labels(features: &Tensor, bank: &PrototypeBank) -> Result<Vec<u8>> {
    let logits = class_logits(features, bank, None)?;
    Ok(argmax_labels(&logits))
}

/// Row-wise argmax of `[N, C + 1]` logits as stored labels.
pub fn argmax_labels(logits: &Tensor) -> Vec<u8> {
    let c = logits.last_dim();
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            index_label(best, c - 1)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orthonormal_prototypes() {
        let bank = PrototypeBank::plain(
            Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap(),
        )
        .unwrap();
        let f = Tensor::new(vec![1, 3], vec![0., 1., 0.]).unwrap();
        assert_eq!(class_logits(&f, &bank, None).unwrap().data(), &[0., 1., 0.]);
        let z = Tensor::zeros(vec![2, 3]);
        assert!(class_logits(&z, &bank, None).unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(class_logits(&f, &bank, Some(&[1])).unwrap().data(), &[1.0]);
        assert!(class_logits(&Tensor::zeros(vec![1, 2]), &bank, None).is_err());
    }

    #[test]
    fn infer_ties_and_empty() {
        let bank = PrototypeBank::plain(
            Tensor::new(vec![3, 2], vec![1., 0., 2., 0., 0., 1.]).unwrap(),
        )
        .unwrap();
        let f = Tensor::new(vec![2, 2], vec![0., 0., 0., 3.]).unwrap();
        assert_eq!(infer_labels(&f, &bank).unwrap(), vec![0, EMPTY]);
    }

    #[test]
    fn boundary_proximity_wins() {
        let logits = Tensor::new(vec![2, 2], vec![0.1, -0.3, 5.0, -6.0]).unwrap();
        let plan = uncertainty_sample(&logits, &[0, 0], 1, 7).unwrap();
        assert_eq!(plan.selected, vec![0]);
        let all = uncertainty_sample(&logits, &[0, 0], 10, 7).unwrap();
        assert_eq!(all.selected, vec![0, 1]);
        assert!(uncertainty_sample(&logits, &[0, 0], 0, 7).is_err());
    }

    #[test]
    fn rare_class_is_oversampled() {
        let n = 1000;
        let labels: Vec<u8> = (0..n).map(|i| if i % 100 == 0 { 1 } else { 0 }).collect();
        let logits = Tensor::zeros(vec![n, 3]);
        let plan = uncertainty_sample(&logits, &labels, n / 10, 3).unwrap();
        let rare = plan.selected.iter().filter(|&&x| labels[x] == 1).count();
        assert!(rare as f64 / plan.selected.len() as f64 > 0.01);
    }

    fn loss_value(logits: Tensor, targets: &[usize], present: &[bool], a: f64, b: f64) -> (f64, f64, f64) {
        let mut tape = Tape::new();
        let l = tape.constant(logits);
        let mask = ClassPresenceMask { present: present.to_vec() };
        let s = dice_bce_loss(&mut tape, l, targets, &mask, a, b).unwrap();
        (
            tape.value(s.total).item().unwrap(),
            tape.value(s.dice).item().unwrap(),
            tape.value(s.bce).item().unwrap(),
        )
    }

    #[test]
    fn zero_logits_give_ln2() {
        let (_, _, bce) = loss_value(Tensor::zeros(vec![4, 3]), &[0, 1, 2, 2], &[true, true], 5.0, 20.0);
        assert!((bce - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn saturated_prediction_is_nearly_free() {
        let targets = [0, 2, 1];
        let mut d = vec![-20.0; 9];
        for (x, &t) in targets.iter().enumerate() {
            d[x * 3 + t] = 20.0;
        }
        let (_, dice, bce) = loss_value(Tensor::new(vec![3, 3], d).unwrap(), &targets, &[true, true], 5.0, 20.0);
        assert!(dice <= 1e-6 && bce <= 1e-6);
    }

    #[test]
    fn no_points_is_an_error() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::zeros(vec![0, 2]));
        let mask = ClassPresenceMask { present: vec![true] };
        assert!(dice_bce_loss(&mut tape, l, &[], &mask, 1.0, 1.0).is_err());
    }
}
