use std::collections::BTreeMap;
use std::sync::Arc;

use super::ops::{backward_op, forward_op, Op, COSINE_EPS};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

struct Node {
    value: Tensor,
    op: Option<Op>,
    inputs: Vec<usize>,
    leaf: bool,
}

/// Append-only record of primitive applications.
///
/// Nodes are pushed in evaluation order, so every input id precedes its
/// consumer and the reverse sweep in [`Tape::backward`] needs no sort.
/// Nodes none of whose inputs require gradients are stored as constants.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients keyed by leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    map: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, leaf: Var) -> Option<&Tensor> {
        self.map.get(&leaf)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Var, &Tensor)> {
        self.map.iter()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a trainable tensor.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push_leaf(t.with_grad())
    }

    /// Records a tensor that never receives gradients.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.push_leaf(t)
    }

    fn push_leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: None,
            inputs: Vec::new(),
            leaf: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, v: f64) -> Result<Var> {
        Ok(self.constant(Tensor::scalar(v)?))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        if let Some(bad) = inputs.iter().find(|v| v.0 >= self.nodes.len()) {
            return Err(Error::invalid(format!("var {} is not on this tape", bad.0)));
        }
        let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let mut out = forward_op(&op, &values)?;
        let track = values.iter().any(|t| t.requires_grad());
        out.set_requires_grad(track);
        self.nodes.push(Node {
            value: out,
            op: track.then_some(op),
            inputs: inputs.iter().map(|v| v.0).collect(),
            leaf: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse sweep from a scalar `root`.
    ///
    /// Returns one gradient per differentiable leaf, zero-filled for leaves
    /// that `root` does not depend on.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = &self
            .nodes
            .get(root.0)
            .ok_or_else(|| Error::invalid("root is not on this tape"))?
            .value;
        if root_value.rank() != 0 {
            return Err(Error::shape(
                "backward",
                format!("root must be a scalar, got shape {:?}", root_value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            let Some(op) = &node.op else { continue };
            let Some(gout) = grads[id].take() else { continue };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
            let need: Vec<bool> = inputs.iter().map(|t| t.requires_grad()).collect();
            let input_grads = backward_op(op, &inputs, &node.value, &gout, &need);
            for ((&src, g), needed) in node.inputs.iter().zip(input_grads).zip(need) {
                let (Some(g), true) = (g, needed) else { continue };
                match &mut grads[src] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        let mut map = BTreeMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if !(node.leaf && node.value.requires_grad()) {
                continue;
            }
            let shape = node.value.shape().to_vec();
            let g = match grads.get_mut(id).and_then(Option::take) {
                Some(g) => Tensor::from_op("gradient", shape, g)?,
                None => Tensor::zeros(shape),
            };
            map.insert(Var(id), g);
        }
        Ok(Gradients { map })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Div, &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = self.scalar(c)?;
        self.mul(a, c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = self.scalar(c)?;
        self.add(a, c)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul, &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Transpose, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        self.apply(Op::Reshape(shape), &[a])
    }

    pub fn concat_lastdim(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(Op::ConcatLastDim, parts)
    }

    pub fn scatter_add(&mut self, a: Var, index: Arc<Vec<usize>>, rows: usize) -> Result<Var> {
        self.apply(Op::ScatterAdd { index, rows }, &[a])
    }

    pub fn gather(&mut self, a: Var, index: Arc<Vec<usize>>) -> Result<Var> {
        self.apply(Op::Gather { index }, &[a])
    }

    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::SoftmaxLastDim, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sigmoid, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Tanh, &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Log, &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Square, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sum, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Mean, &[a])
    }

    pub fn l2norm_lastdim(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::L2NormLastDim, &[a])
    }

    pub fn cosine_sim_lastdim(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::CosineSimLastDim { eps: COSINE_EPS }, &[a, b])
    }

    pub fn cosine_sim_lastdim_eps(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        self.apply(Op::CosineSimLastDim { eps }, &[a, b])
    }

    pub fn bilinear_sample_2d(
        &mut self,
        map: Var,
        coords: Arc<Vec<Option<[f64; 2]>>>,
    ) -> Result<Var> {
        self.apply(Op::BilinearSample2d { coords }, &[map])
    }

    pub fn trilinear_scatter_weights(&mut self, coords: Var) -> Result<Var> {
        self.apply(Op::TrilinearScatterWeights, &[coords])
    }

    /// Row sums of a matrix as an `[rows, 1]` column.
    pub fn row_sums(&mut self, a: Var) -> Result<Var> {
        let cols = self.value(a).last_dim();
        let ones = self.constant(Tensor::full(vec![cols, 1], 1.0)?);
        self.matmul(a, ones)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_of_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap().with_grad());
        let sq = tape.square(x).unwrap();
        let root = tape.sum(sq).unwrap();
        let g = tape.backward(root).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn grad_of_mean() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![3.0, -1.0, 0.5, 7.0]).unwrap().with_grad());
        let root = tape.mean(x).unwrap();
        let g = tape.backward(root).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn non_scalar_root_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap().with_grad());
        let y = tape.square(x).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Shape { .. })));
    }

    #[test]
    fn constants_are_absent_and_unused_leaves_are_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0]).unwrap().with_grad());
        let unused = tape.leaf(Tensor::vector(vec![5.0, 6.0]).unwrap().with_grad());
        let c = tape.constant(Tensor::vector(vec![2.0]).unwrap());
        let p = tape.mul(x, c).unwrap();
        let root = tape.sum(p).unwrap();
        let g = tape.backward(root).unwrap();
        assert_eq!(g.len(), 2);
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[2.0]);
        assert_eq!(g.get(unused).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn untracked_ops_are_not_recorded_as_differentiable() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let y = tape.square(c).unwrap();
        assert!(!tape.requires_grad(y));
    }

    #[test]
    fn shared_input_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0).unwrap().with_grad());
        let y = tape.mul(x, x).unwrap();
        let z = tape.add(y, x).unwrap();
        let g = tape.backward(z).unwrap();
        assert_eq!(g.get(x).unwrap().item().unwrap(), 7.0);
    }
}
