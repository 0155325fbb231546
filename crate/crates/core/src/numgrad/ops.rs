//! The closed set of primitives understood by the tape.
//!
//! Every op has a forward rule over [`Tensor`] values and a vector-Jacobian
//! product used by [`Tape::backward`](super::Tape::backward). Index-carrying
//! ops keep their indices behind an `Arc` so recording them on the tape is
//! cheap.

use std::fmt;
use std::sync::Arc;

use super::Tensor;
use crate::error::{Error, Result};

/// Norm below which cosine similarity is defined as zero.
pub const COSINE_EPS: f64 = 1e-12;

#[derive(Clone, Debug)]
pub enum Op {
    /// Elementwise sum with numpy-style broadcasting.
    Add,
    /// Elementwise product with numpy-style broadcasting.
    Mul,
    /// Elementwise quotient with numpy-style broadcasting.
    Div,
    /// `[m, k] x [k, n] -> [m, n]`.
    MatMul,
    /// Swaps the two axes of a matrix.
    Transpose,
    Reshape(Vec<usize>),
    /// Concatenates inputs that agree on all but the last axis.
    ConcatLastDim,
    /// `out[index[i]] += x[i]` over rows; `rows` is the output row count.
    ScatterAdd { index: Arc<Vec<usize>>, rows: usize },
    /// `out[i] = x[index[i]]` over rows.
    Gather { index: Arc<Vec<usize>> },
    SoftmaxLastDim,
    Sigmoid,
    Tanh,
    Log,
    Square,
    /// Sum of all elements, returns a scalar.
    Sum,
    /// Mean of all elements, returns a scalar.
    Mean,
    L2NormLastDim,
    /// Cosine similarity along the last axis, zero when either norm is below `eps`.
    CosineSimLastDim { eps: f64 },
    /// Samples an `[H, W, C]` map at continuous cell-index positions.
    /// Integer positions hit cell centers exactly; `None` and out-of-map
    /// corners read zeros.
    BilinearSample2d { coords: Arc<Vec<Option<[f64; 2]>>> },
    /// Maps `[n, 3]` continuous voxel coordinates to the `[n, 8]` trilinear
    /// corner weights. Corner `k` sits at `floor(p) + (k>>2 & 1, k>>1 & 1, k & 1)`.
    TrilinearScatterWeights,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Reshape(_) => "reshape",
            Op::ConcatLastDim => "concat_lastdim",
            Op::ScatterAdd { .. } => "scatter_add",
            Op::Gather { .. } => "gather",
            Op::SoftmaxLastDim => "softmax_lastdim",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Log => "log",
            Op::Square => "square",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::L2NormLastDim => "l2norm_lastdim",
            Op::CosineSimLastDim { .. } => "cosine_sim_lastdim",
            Op::BilinearSample2d { .. } => "bilinear_sample_2d",
            Op::TrilinearScatterWeights => "trilinear_scatter_weights",
        }
    }

    /// Looks up an op that carries no attributes by its name.
    pub fn from_name(name: &str) -> Result<Op> {
        Ok(match name {
            "add" => Op::Add,
            "mul" => Op::Mul,
            "div" => Op::Div,
            "matmul" => Op::MatMul,
            "transpose" => Op::Transpose,
            "concat_lastdim" => Op::ConcatLastDim,
            "softmax_lastdim" => Op::SoftmaxLastDim,
            "sigmoid" => Op::Sigmoid,
            "tanh" => Op::Tanh,
            "log" => Op::Log,
            "square" => Op::Square,
            "sum" => Op::Sum,
            "mean" => Op::Mean,
            "l2norm_lastdim" => Op::L2NormLastDim,
            "cosine_sim_lastdim" => Op::CosineSimLastDim { eps: COSINE_EPS },
            "trilinear_scatter_weights" => Op::TrilinearScatterWeights,
            other => {
                return Err(Error::invalid(format!(
                    "unknown op or op needs attributes: {other}"
                )))
            }
        })
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Op::Add | Op::Mul | Op::Div | Op::MatMul | Op::CosineSimLastDim { .. } => Some(2),
            Op::ConcatLastDim => None,
            _ => Some(1),
        }
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Evaluates `op` on plain values.
pub fn forward_op(op: &Op, inputs: &[&Tensor]) -> Result<Tensor> {
    match op.arity() {
        Some(n) if n != inputs.len() => {
            return Err(Error::shape(
                op.name(),
                format!("expected {n} inputs, got {}", inputs.len()),
            ))
        }
        None if inputs.is_empty() => return Err(Error::shape(op.name(), "no inputs")),
        _ => {}
    }
    match op {
        Op::Add => binary(op.name(), inputs[0], inputs[1], |a, b| a + b),
        Op::Mul => binary(op.name(), inputs[0], inputs[1], |a, b| a * b),
        Op::Div => binary(op.name(), inputs[0], inputs[1], |a, b| a / b),
        Op::MatMul => matmul_fwd(inputs[0], inputs[1]),
        Op::Transpose => transpose_fwd(inputs[0]),
        Op::Reshape(shape) => inputs[0].reshaped(shape.clone()),
        Op::ConcatLastDim => concat_fwd(inputs),
        Op::ScatterAdd { index, rows } => scatter_fwd(inputs[0], index, *rows),
        Op::Gather { index } => gather_fwd(inputs[0], index),
        Op::SoftmaxLastDim => softmax_fwd(inputs[0]),
        Op::Sigmoid => Ok(unary(inputs[0], sigmoid)),
        Op::Tanh => Ok(unary(inputs[0], f64::tanh)),
        Op::Log => {
            let t = unary(inputs[0], f64::ln);
            Tensor::from_op("log", t.shape().to_vec(), t.into_data())
        }
        Op::Square => {
            let t = unary(inputs[0], |v| v * v);
            Tensor::from_op("square", t.shape().to_vec(), t.into_data())
        }
        Op::Sum => Tensor::from_op("sum", vec![], vec![inputs[0].data().iter().sum()]),
        Op::Mean => {
            let x = inputs[0];
            if x.numel() == 0 {
                return Err(Error::shape("mean", "empty tensor"));
            }
            let s: f64 = x.data().iter().sum();
            Ok(Tensor::from_parts_unchecked(vec![], vec![s / x.numel() as f64]))
        }
        Op::L2NormLastDim => l2norm_fwd(inputs[0]),
        Op::CosineSimLastDim { eps } => cosine_fwd(inputs[0], inputs[1], *eps),
        Op::BilinearSample2d { coords } => bilinear_fwd(inputs[0], coords),
        Op::TrilinearScatterWeights => trilinear_fwd(inputs[0]),
    }
}

/// Gradients of `op`'s inputs given the output gradient `gout`.
/// Entries for inputs with `need[i] == false` are `None`.
pub(crate) fn backward_op(
    op: &Op,
    inputs: &[&Tensor],
    out: &Tensor,
    gout: &[f64],
    need: &[bool],
) -> Vec<Option<Vec<f64>>> {
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; inputs.len()];
    match op {
        Op::Add => {
            for (k, g) in grads.iter_mut().enumerate() {
                if need[k] {
                    *g = Some(reduce_to(gout, out.shape(), inputs[k].shape()));
                }
            }
        }
        Op::Mul | Op::Div => {
            let (a, b) = (inputs[0], inputs[1]);
            let ia = broadcast_map(out.shape(), a.shape());
            let ib = broadcast_map(out.shape(), b.shape());
            if need[0] {
                let mut ga = vec![0.0; a.numel()];
                for (o, g) in gout.iter().enumerate() {
                    let bv = b.data()[ib[o]];
                    ga[ia[o]] += match op {
                        Op::Mul => g * bv,
                        _ => g / bv,
                    };
                }
                grads[0] = Some(ga);
            }
            if need[1] {
                let mut gb = vec![0.0; b.numel()];
                for (o, g) in gout.iter().enumerate() {
                    let av = a.data()[ia[o]];
                    let bv = b.data()[ib[o]];
                    gb[ib[o]] += match op {
                        Op::Mul => g * av,
                        _ => -g * av / (bv * bv),
                    };
                }
                grads[1] = Some(gb);
            }
        }
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            if need[0] {
                // dA = dC · Bᵀ
                let mut ga = vec![0.0; m * k];
                for i in 0..m {
                    for j in 0..n {
                        let g = gout[i * n + j];
                        if g == 0.0 {
                            continue;
                        }
                        for p in 0..k {
                            ga[i * k + p] += g * b.data()[p * n + j];
                        }
                    }
                }
                grads[0] = Some(ga);
            }
            if need[1] {
                // dB = Aᵀ · dC
                let mut gb = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let av = a.data()[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        let row = &gout[i * n..(i + 1) * n];
                        for (j, g) in row.iter().enumerate() {
                            gb[p * n + j] += av * g;
                        }
                    }
                }
                grads[1] = Some(gb);
            }
        }
        Op::Transpose => {
            let (r, c) = (out.shape()[0], out.shape()[1]);
            let mut g = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    g[j * r + i] = gout[i * c + j];
                }
            }
            grads[0] = Some(g);
        }
        Op::Reshape(_) => grads[0] = Some(gout.to_vec()),
        Op::ConcatLastDim => {
            let total = out.last_dim();
            let rows = out.numel() / total.max(1);
            let mut offset = 0;
            for (k, x) in inputs.iter().enumerate() {
                let w = x.last_dim();
                if need[k] {
                    let mut g = vec![0.0; x.numel()];
                    for r in 0..rows {
                        g[r * w..(r + 1) * w]
                            .copy_from_slice(&gout[r * total + offset..r * total + offset + w]);
                    }
                    grads[k] = Some(g);
                }
                offset += w;
            }
        }
        Op::ScatterAdd { index, .. } => {
            let width = row_width(inputs[0]);
            let mut g = vec![0.0; inputs[0].numel()];
            for (i, &dst) in index.iter().enumerate() {
                g[i * width..(i + 1) * width]
                    .copy_from_slice(&gout[dst * width..(dst + 1) * width]);
            }
            grads[0] = Some(g);
        }
        Op::Gather { index } => {
            let width = row_width(inputs[0]);
            grads[0] = Some(scatter_rows(gout, index, width, inputs[0].shape()[0]));
        }
        Op::SoftmaxLastDim => {
            let l = out.last_dim();
            let mut g = vec![0.0; out.numel()];
            for (r, (y, dy)) in out.data().chunks(l).zip(gout.chunks(l)).enumerate() {
                let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
                for j in 0..l {
                    g[r * l + j] = y[j] * (dy[j] - dot);
                }
            }
            grads[0] = Some(g);
        }
        Op::Sigmoid => {
            grads[0] = Some(
                out.data()
                    .iter()
                    .zip(gout)
                    .map(|(y, g)| g * y * (1.0 - y))
                    .collect(),
            )
        }
        Op::Tanh => {
            grads[0] = Some(
                out.data()
                    .iter()
                    .zip(gout)
                    .map(|(y, g)| g * (1.0 - y * y))
                    .collect(),
            )
        }
        Op::Log => {
            grads[0] = Some(
                inputs[0]
                    .data()
                    .iter()
                    .zip(gout)
                    .map(|(x, g)| g / x)
                    .collect(),
            )
        }
        Op::Square => {
            grads[0] = Some(
                inputs[0]
                    .data()
                    .iter()
                    .zip(gout)
                    .map(|(x, g)| 2.0 * x * g)
                    .collect(),
            )
        }
        Op::Sum => grads[0] = Some(vec![gout[0]; inputs[0].numel()]),
        Op::Mean => {
            let n = inputs[0].numel() as f64;
            grads[0] = Some(vec![gout[0] / n; inputs[0].numel()]);
        }
        Op::L2NormLastDim => {
            let x = inputs[0];
            let l = x.last_dim();
            let mut g = vec![0.0; x.numel()];
            for (r, row) in x.data().chunks(l).enumerate() {
                let norm = out.data()[r];
                if norm == 0.0 {
                    continue;
                }
                for j in 0..l {
                    g[r * l + j] = gout[r] * row[j] / norm;
                }
            }
            grads[0] = Some(g);
        }
        Op::CosineSimLastDim { eps } => {
            let (a, b) = (inputs[0], inputs[1]);
            let l = a.last_dim();
            let mut ga = vec![0.0; a.numel()];
            let mut gb = vec![0.0; b.numel()];
            for (r, (ra, rb)) in a.data().chunks(l).zip(b.data().chunks(l)).enumerate() {
                let na = norm(ra);
                let nb = norm(rb);
                if na < *eps || nb < *eps {
                    continue;
                }
                let c = out.data()[r];
                let g = gout[r];
                for j in 0..l {
                    ga[r * l + j] = g * (rb[j] / (na * nb) - c * ra[j] / (na * na));
                    gb[r * l + j] = g * (ra[j] / (na * nb) - c * rb[j] / (nb * nb));
                }
            }
            if need[0] {
                grads[0] = Some(ga);
            }
            if need[1] {
                grads[1] = Some(gb);
            }
        }
        Op::BilinearSample2d { coords } => {
            let map = inputs[0];
            let (h, w, c) = (map.shape()[0], map.shape()[1], map.shape()[2]);
            let mut g = vec![0.0; map.numel()];
            for (i, pos) in coords.iter().enumerate() {
                let Some(pos) = pos else { continue };
                for (cell, wt) in bilinear_taps(*pos, h, w) {
                    for ch in 0..c {
                        g[cell * c + ch] += wt * gout[i * c + ch];
                    }
                }
            }
            grads[0] = Some(g);
        }
        Op::TrilinearScatterWeights => {
            let x = inputs[0];
            let n = x.shape()[0];
            let mut g = vec![0.0; x.numel()];
            for i in 0..n {
                let p = &x.data()[i * 3..i * 3 + 3];
                let f = [p[0] - p[0].floor(), p[1] - p[1].floor(), p[2] - p[2].floor()];
                for k in 0..8 {
                    let bits = corner_bits(k);
                    let go = gout[i * 8 + k];
                    if go == 0.0 {
                        continue;
                    }
                    for axis in 0..3 {
                        let mut d = if bits[axis] == 1 { 1.0 } else { -1.0 };
                        for other in 0..3 {
                            if other != axis {
                                d *= axis_weight(f[other], bits[other]);
                            }
                        }
                        g[i * 3 + axis] += go * d;
                    }
                }
            }
            grads[0] = Some(g);
        }
    }
    grads
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn unary(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts_unchecked(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
}

fn row_width(x: &Tensor) -> usize {
    x.shape()[1..].iter().product()
}

/// Output shape of broadcasting `a` against `b`.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each flat output index, the flat index into an input of `shape`
/// broadcast to `out`.
fn broadcast_map(out: &[usize], shape: &[usize]) -> Vec<usize> {
    let numel: usize = out.iter().product();
    if out == shape {
        return (0..numel).collect();
    }
    let rank = out.len();
    let offset = rank - shape.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i + offset] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..numel {
        map.push(flat);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            flat += strides[ax];
            if idx[ax] < out[ax] {
                break;
            }
            flat -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

fn reduce_to(g: &[f64], out: &[usize], shape: &[usize]) -> Vec<f64> {
    if out == shape {
        return g.to_vec();
    }
    let map = broadcast_map(out, shape);
    let mut r = vec![0.0; shape.iter().product()];
    for (o, &i) in map.iter().enumerate() {
        r[i] += g[o];
    }
    r
}

fn binary(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| {
        Error::shape(op, format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape()))
    })?;
    let data: Vec<f64> = if a.shape() == b.shape() {
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
    } else if b.numel() == 1 && shape == a.shape() {
        let y = b.data()[0];
        a.data().iter().map(|&x| f(x, y)).collect()
    } else {
        let ia = broadcast_map(&shape, a.shape());
        let ib = broadcast_map(&shape, b.shape());
        ia.iter()
            .zip(&ib)
            .map(|(&i, &j)| f(a.data()[i], b.data()[j]))
            .collect()
    };
    Tensor::from_op(op, shape, data)
}

fn matmul_fwd(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::shape(
            "matmul",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data()[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data()[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::from_op("matmul", vec![m, n], out)
}

fn transpose_fwd(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 {
        return Err(Error::shape("transpose", format!("rank {}", x.rank())));
    }
    let (r, c) = (x.shape()[0], x.shape()[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x.data()[i * c + j];
        }
    }
    Ok(Tensor::from_parts_unchecked(vec![c, r], out))
}

fn concat_fwd(inputs: &[&Tensor]) -> Result<Tensor> {
    let lead = &inputs[0].shape()[..inputs[0].rank().saturating_sub(1)];
    if inputs[0].rank() == 0 {
        return Err(Error::shape("concat_lastdim", "scalar input"));
    }
    for x in inputs {
        if x.rank() != inputs[0].rank() || &x.shape()[..x.rank() - 1] != lead {
            return Err(Error::shape(
                "concat_lastdim",
                format!("{:?} vs {:?}", x.shape(), inputs[0].shape()),
            ));
        }
    }
    let rows: usize = lead.iter().product();
    let total: usize = inputs.iter().map(|x| x.last_dim()).sum();
    let mut out = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for x in inputs {
            let w = x.last_dim();
            out.extend_from_slice(&x.data()[r * w..(r + 1) * w]);
        }
    }
    let mut shape = lead.to_vec();
    shape.push(total);
    Ok(Tensor::from_parts_unchecked(shape, out))
}

/// Accumulates rows in ascending source order, so each destination sums its
/// contributions in a fixed order regardless of how the index was produced.
fn scatter_rows(src: &[f64], index: &[usize], width: usize, rows: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * width];
    for (i, &dst) in index.iter().enumerate() {
        let s = &src[i * width..(i + 1) * width];
        for (o, v) in out[dst * width..(dst + 1) * width].iter_mut().zip(s) {
            *o += v;
        }
    }
    out
}

fn scatter_fwd(x: &Tensor, index: &[usize], rows: usize) -> Result<Tensor> {
    let (n, width) = x.rows()?;
    if index.len() != n {
        return Err(Error::shape(
            "scatter_add",
            format!("{} indices for {n} rows", index.len()),
        ));
    }
    if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
        return Err(Error::shape(
            "scatter_add",
            format!("index {bad} out of range for {rows} rows"),
        ));
    }
    let mut shape = x.shape().to_vec();
    shape[0] = rows;
    Tensor::from_op("scatter_add", shape, scatter_rows(x.data(), index, width, rows))
}

fn gather_fwd(x: &Tensor, index: &[usize]) -> Result<Tensor> {
    let (n, width) = x.rows()?;
    if let Some(&bad) = index.iter().find(|&&i| i >= n) {
        return Err(Error::shape(
            "gather",
            format!("index {bad} out of range for {n} rows"),
        ));
    }
    let mut out = Vec::with_capacity(index.len() * width);
    for &i in index {
        out.extend_from_slice(&x.data()[i * width..(i + 1) * width]);
    }
    let mut shape = x.shape().to_vec();
    shape[0] = index.len();
    Ok(Tensor::from_parts_unchecked(shape, out))
}

fn softmax_fwd(x: &Tensor) -> Result<Tensor> {
    if x.rank() == 0 || x.last_dim() == 0 {
        return Err(Error::shape("softmax_lastdim", "empty last axis"));
    }
    let l = x.last_dim();
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks(l) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / z));
    }
    Ok(Tensor::from_parts_unchecked(x.shape().to_vec(), out))
}

fn l2norm_fwd(x: &Tensor) -> Result<Tensor> {
    if x.rank() == 0 {
        return Err(Error::shape("l2norm_lastdim", "scalar input"));
    }
    let l = x.last_dim();
    let out = if l == 0 {
        vec![0.0; x.shape()[..x.rank() - 1].iter().product()]
    } else {
        x.data().chunks(l).map(norm).collect()
    };
    Ok(Tensor::from_parts_unchecked(x.shape()[..x.rank() - 1].to_vec(), out))
}

fn cosine_fwd(a: &Tensor, b: &Tensor, eps: f64) -> Result<Tensor> {
    if a.shape() != b.shape() || a.rank() == 0 {
        return Err(Error::shape(
            "cosine_sim_lastdim",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let l = a.last_dim();
    let rows = a.numel() / l.max(1);
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let ra = &a.data()[r * l..(r + 1) * l];
        let rb = &b.data()[r * l..(r + 1) * l];
        let (na, nb) = (norm(ra), norm(rb));
        if na < eps || nb < eps {
            out.push(0.0);
        } else {
            let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
            out.push((dot / (na * nb)).clamp(-1.0, 1.0));
        }
    }
    Ok(Tensor::from_parts_unchecked(a.shape()[..a.rank() - 1].to_vec(), out))
}

/// In-map bilinear taps `(flat cell, weight)` for a position in cell-index units.
pub(crate) fn bilinear_taps(pos: [f64; 2], h: usize, w: usize) -> Vec<(usize, f64)> {
    let (r0, c0) = (pos[0].floor(), pos[1].floor());
    let (fr, fc) = (pos[0] - r0, pos[1] - c0);
    let mut taps = Vec::with_capacity(4);
    for (dr, wr) in [(0.0, 1.0 - fr), (1.0, fr)] {
        for (dc, wc) in [(0.0, 1.0 - fc), (1.0, fc)] {
            let (r, c) = (r0 + dr, c0 + dc);
            let wt = wr * wc;
            if wt == 0.0 || r < 0.0 || c < 0.0 || r >= h as f64 || c >= w as f64 {
                continue;
            }
            taps.push((r as usize * w + c as usize, wt));
        }
    }
    taps
}

fn bilinear_fwd(map: &Tensor, coords: &[Option<[f64; 2]>]) -> Result<Tensor> {
    if map.rank() != 3 {
        return Err(Error::shape(
            "bilinear_sample_2d",
            format!("expected [H, W, C], got {:?}", map.shape()),
        ));
    }
    let (h, w, c) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let mut out = vec![0.0; coords.len() * c];
    for (i, pos) in coords.iter().enumerate() {
        let Some(pos) = pos else { continue };
        if !(pos[0].is_finite() && pos[1].is_finite()) {
            return Err(Error::NonFinite("bilinear sample position".into()));
        }
        for (cell, wt) in bilinear_taps(*pos, h, w) {
            for ch in 0..c {
                out[i * c + ch] += wt * map.data()[cell * c + ch];
            }
        }
    }
    Ok(Tensor::from_parts_unchecked(vec![coords.len(), c], out))
}

/// `(dh, dw, dz)` offsets of trilinear corner `k`.
pub fn corner_bits(k: usize) -> [usize; 3] {
    [(k >> 2) & 1, (k >> 1) & 1, k & 1]
}

fn axis_weight(frac: f64, bit: usize) -> f64 {
    if bit == 1 {
        frac
    } else {
        1.0 - frac
    }
}

/// The eight trilinear weights of a point, in corner order.
pub fn trilinear_corner_weights(p: [f64; 3]) -> [f64; 8] {
    let f = [p[0] - p[0].floor(), p[1] - p[1].floor(), p[2] - p[2].floor()];
    let mut w = [0.0; 8];
    for (k, wk) in w.iter_mut().enumerate() {
        let b = corner_bits(k);
        *wk = axis_weight(f[0], b[0]) * axis_weight(f[1], b[1]) * axis_weight(f[2], b[2]);
    }
    w
}

fn trilinear_fwd(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 || x.shape()[1] != 3 {
        return Err(Error::shape(
            "trilinear_scatter_weights",
            format!("expected [n, 3], got {:?}", x.shape()),
        ));
    }
    let n = x.shape()[0];
    let mut out = Vec::with_capacity(n * 8);
    for p in x.data().chunks(3) {
        out.extend_from_slice(&trilinear_corner_weights([p[0], p[1], p[2]]));
    }
    Ok(Tensor::from_parts_unchecked(vec![n, 8], out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn add_elementwise() {
        let out = forward_op(&Op::Add, &[&t(&[2], &[1.0, 2.0]), &t(&[2], &[3.0, 4.0])]).unwrap();
        assert_eq!(out.data(), &[4.0, 6.0]);
    }

    #[test]
    fn add_broadcasts_columns() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(&[2, 1], &[10.0, 20.0]);
        let out = forward_op(&Op::Add, &[&a, &b]).unwrap();
        assert_eq!(out.data(), &[11.0, 12.0, 13.0, 24.0, 25.0, 26.0]);
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let err = forward_op(&Op::Add, &[&t(&[2], &[1.0, 2.0]), &t(&[3], &[1.0; 3])]);
        assert!(matches!(err, Err(Error::Shape { .. })));
        let err = forward_op(&Op::MatMul, &[&t(&[2, 2], &[0.0; 4]), &t(&[3, 1], &[0.0; 3])]);
        assert!(matches!(err, Err(Error::Shape { .. })));
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let out = forward_op(&Op::SoftmaxLastDim, &[&t(&[2], &[0.0, 0.0])]).unwrap();
        assert_eq!(out.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_over_empty_axis_is_an_error() {
        let x = Tensor::zeros(vec![3, 0]);
        assert!(forward_op(&Op::SoftmaxLastDim, &[&x]).is_err());
    }

    #[test]
    fn cosine_of_vector_with_itself_is_one() {
        let v = t(&[3], &[0.3, -1.2, 2.5]);
        let out = forward_op(&Op::from_name("cosine_sim_lastdim").unwrap(), &[&v, &v]).unwrap();
        assert!((out.item().unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_with_zero_vector_is_zero() {
        let v = t(&[2], &[1.0, 0.0]);
        let z = t(&[2], &[0.0, 0.0]);
        let op = Op::CosineSimLastDim { eps: COSINE_EPS };
        assert_eq!(forward_op(&op, &[&v, &z]).unwrap().item().unwrap(), 0.0);
    }

    #[test]
    fn trilinear_hand_values() {
        let w = trilinear_corner_weights([1.25, 2.0, 3.5]);
        // corners: (1,2,3) (1,2,4) (1,3,3) (1,3,4) (2,2,3) (2,2,4) (2,3,3) (2,3,4)
        assert_eq!(w, [0.375, 0.375, 0.0, 0.0, 0.125, 0.125, 0.0, 0.0]);
    }

    #[test]
    fn trilinear_lattice_point_and_center() {
        let w = trilinear_corner_weights([2.0, 0.0, 5.0]);
        assert_eq!(w[0], 1.0);
        assert!(w[1..].iter().all(|&v| v == 0.0));
        let w = trilinear_corner_weights([0.5, 1.5, 2.5]);
        assert!(w.iter().all(|&v| v == 0.125));
    }

    #[test]
    fn bilinear_half_cell_splits_mass() {
        let mut data = vec![0.0; 9];
        data[4] = 1.0;
        let map = t(&[3, 3, 1], &data);
        let op = Op::BilinearSample2d {
            coords: Arc::new(vec![Some([1.0, 0.5]), Some([1.0, 1.5]), None]),
        };
        let out = forward_op(&op, &[&map]).unwrap();
        assert_eq!(out.data(), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn scatter_then_gather_disjoint_is_identity() {
        let x = t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let idx = Arc::new(vec![4, 0, 2]);
        let s = forward_op(&Op::ScatterAdd { index: idx.clone(), rows: 5 }, &[&x]).unwrap();
        let g = forward_op(&Op::Gather { index: idx }, &[&s]).unwrap();
        assert_eq!(g, x);
    }

    #[test]
    fn unknown_name_is_rejected() {
        assert!(Op::from_name("conv3d").is_err());
        assert_eq!(Op::from_name("sigmoid").unwrap().name(), "sigmoid");
    }
}
