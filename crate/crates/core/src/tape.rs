//! Reverse-mode differentiation as a tape of differentiable operations.
//!
//! Every operation implements [`DiffOp`]: an eager forward plus a vjp that
//! pulls an output cotangent back to input cotangents. The tape records the
//! graph as it is built (inputs always precede consumers, so insertion order
//! is a topological order) and `backward` replays it in reverse.
//!
//! Gradients flow only into nodes created with [`Tape::input`]; constants
//! terminate the sweep.

use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{sigmoid, Element, Tensor};

pub type NodeId = usize;

/// A differentiable operation: forward map plus vector-Jacobian product.
///
/// `vjp` receives the original inputs, the saved forward output, and the
/// upstream cotangent (same shape as the output); it must return one
/// cotangent per input with matching shapes.
pub trait DiffOp<T: Element>: fmt::Debug {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>>;
    fn vjp(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        upstream: &Tensor<T>,
    ) -> Result<Vec<Tensor<T>>>;
}

struct Node<T: Element> {
    op: Option<Box<dyn DiffOp<T>>>,
    inputs: Vec<NodeId>,
    value: Tensor<T>,
    needs_grad: bool,
}

/// Single-threaded evaluation tape. Parallelism is achieved by running
/// independent tapes concurrently, never by sharing one.
pub struct Tape<T: Element> {
    nodes: Vec<Node<T>>,
}

/// Cotangents produced by a backward sweep, keyed by node id.
pub struct Gradients<T: Element> {
    grads: HashMap<NodeId, Tensor<T>>,
}

impl<T: Element> Gradients<T> {
    /// Cotangent of a node, or None if no gradient reached it.
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(&id)
    }

    /// Cotangent of a node, zeros of the given shape when none reached it.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor<T> {
        self.grads
            .get(&id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape))
    }
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Leaf that receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(None, Vec::new(), value, true)
    }

    /// Leaf that terminates the backward sweep.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(None, Vec::new(), value, false)
    }

    fn push(
        &mut self,
        op: Option<Box<dyn DiffOp<T>>>,
        inputs: Vec<NodeId>,
        value: Tensor<T>,
        needs_grad: bool,
    ) -> NodeId {
        self.nodes.push(Node {
            op,
            inputs,
            value,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    /// Apply an operation, evaluating its forward immediately.
    pub fn apply(&mut self, op: Box<dyn DiffOp<T>>, inputs: &[NodeId]) -> Result<NodeId> {
        let tensors: Vec<&Tensor<T>> = inputs.iter().map(|&i| &self.nodes[i].value).collect();
        let value = op.forward(&tensors)?;
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        Ok(self.push(Some(op), inputs.to_vec(), value, needs_grad))
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Backward from a single scalar node, seeded with 1.
    pub fn backward(&self, root: NodeId) -> Result<Gradients<T>> {
        if self.nodes[root].value.numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root].value.shape()
            )));
        }
        self.backward_seeded(vec![(root, Tensor::scalar(T::one()))])
    }

    /// Backward from explicit cotangent seeds; multiple seeds accumulate.
    pub fn backward_seeded(&self, seeds: Vec<(NodeId, Tensor<T>)>) -> Result<Gradients<T>> {
        let mut cotangents: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (id, seed) in seeds {
            if seed.shape() != self.nodes[id].value.shape() {
                return Err(Error::shape(
                    "backward seed",
                    seed.shape(),
                    self.nodes[id].value.shape(),
                ));
            }
            match &mut cotangents[id] {
                Some(acc) => *acc = acc.add(&seed)?,
                slot => *slot = Some(seed),
            }
        }

        for id in (0..self.nodes.len()).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(upstream) = cotangents[id].clone() else {
                continue;
            };
            let Some(op) = &node.op else {
                continue; // leaf: cotangent stays put for the caller
            };
            let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
            let pulled = op.vjp(&inputs, &node.value, &upstream)?;
            debug_assert_eq!(pulled.len(), node.inputs.len(), "{} vjp arity", op.name());
            for (&src, grad) in node.inputs.iter().zip(pulled.into_iter()) {
                if !self.nodes[src].needs_grad {
                    continue;
                }
                if grad.shape() != self.nodes[src].value.shape() {
                    return Err(Error::shape(
                        "vjp output",
                        grad.shape(),
                        self.nodes[src].value.shape(),
                    ));
                }
                match &mut cotangents[src] {
                    Some(acc) => *acc = acc.add(&grad)?,
                    slot => *slot = Some(grad),
                }
            }
        }

        let grads = cotangents
            .into_iter()
            .enumerate()
            .filter_map(|(i, g)| g.map(|g| (i, g)))
            .collect();
        Ok(Gradients { grads })
    }

    // Convenience builders.

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Box::new(ops::Add), &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Box::new(ops::Sub), &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Box::new(ops::Mul), &[a, b])
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.apply(Box::new(ops::Scale { factor: c }), &[a])
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Box::new(ops::Tanh), &[a])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Box::new(ops::Sigmoid), &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Box::new(ops::Relu), &[a])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Box::new(ops::MatMul), &[a, b])
    }

    pub fn add_row(&mut self, m: NodeId, row: NodeId) -> Result<NodeId> {
        self.apply(Box::new(ops::AddRow), &[m, row])
    }

    pub fn mul_row(&mut self, m: NodeId, row: NodeId) -> Result<NodeId> {
        self.apply(Box::new(ops::MulRow), &[m, row])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Box::new(ops::Sum), &[a])
    }

    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Box::new(ops::SumRows), &[a])
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Box::new(ops::Dot), &[a, b])
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.apply(
            Box::new(ops::Reshape {
                to: shape.to_vec(),
            }),
            &[a],
        )
    }

    pub fn grid_slice(&mut self, a: NodeId, axis: usize, index: usize) -> Result<NodeId> {
        self.apply(Box::new(ops::GridSlice { axis, index }), &[a])
    }
}

/// The registered differentiable operations.
pub mod ops {
    use super::*;

    fn one<T: Element>(t: Tensor<T>) -> Result<Vec<Tensor<T>>> {
        Ok(vec![t])
    }

    #[derive(Debug)]
    pub struct Add;

    impl<T: Element> DiffOp<T> for Add {
        fn name(&self) -> &'static str {
            "add"
        }
        fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
            inputs[0].add(inputs[1])
        }
        fn vjp(&self, _i: &[&Tensor<T>], _o: &Tensor<T>, up: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
            Ok(vec![up.clone(), up.clone()])
        }
    }

    #[derive(Debug)]
    pub struct Sub;

    impl<T: Element> DiffOp<T> for Sub {
        fn name(&self) -> &'static str {
            "sub"
        }
        fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
            inputs[0].sub(inputs[1])
        }
        fn vjp(&self, _i: &[&Tensor<T>], _o: &Tensor<T>, up: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
            Ok(vec![up.clone(), up.scale(-T::one())])
        }
    }

    #[derive(Debug)]
    pub struct Mul;

    impl<T: Element> DiffOp<T> for Mul {
        fn name(&self) -> &'static str {
            "mul"
        }
        fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
            inputs[0].mul(inputs[1])
        }
        fn vjp(&self, i: &[&Tensor<T>], _o: &Tensor<T>, up: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
            Ok(vec![up.mul(i[1])?, up.mul(i[0])?])
        }
    }

    /// Multiply by a compile-time-known constant (the scalar side of the only
    /// permitted broadcast).
    #[derive(Debug)]
    pub struct Scale {
        pub factor: f64,
    }

    impl<T: Element> DiffOp<T> for Scale {
        fn name(&self) -> &'static str {
            "scale"
        }
        fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
            Ok(inputs[0].scale(T::from_f64(self.factor)))
        }
        fn vjp(&self, _i: &[&Tensor<T>], _o: &Tensor<T>, up: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
            one(up.scale(T::from_f64(self.factor)))
        }
    }

    #[derive(Debug)]
    pub struct Tanh;

    impl<T: Element> DiffOp<T> for Tanh {
        fn name(&self) -> &'static str {
            "tanh"
        }
        fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
            Ok(inputs[0].tanh())
        }
        fn vjp(&self, _i: &[&Tensor<T>], o: &Tensor<T>, up: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
            // d tanh = 1 - tanh^2, using the saved output
            one(up.mul(&o.map(|y| T::one() - y * y))?)
        }
    }

    #[derive(Debug)]
    pub struct Sigmoid;

    impl<T: Element> DiffOp<T> for Sigmoid {
        fn name(&self) -> &'static str {
            "sigmoid"
        }
        fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
            Ok(inputs[0].map(sigmoid))
        }
        fn vjp(&self, _i: &[&Tensor<T>], o: &Tensor<T>, up: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
            one(up.mul(&o.map(|y| y * (T::one() - y)))?)
        }
    }

    #[derive(Debug)]
    pub struct Relu;

    impl<T: Element> DiffOp<T> for Relu {
        fn name(&self) -> &'static str {
            "relu"
        }
        fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
            Ok(inputs[0].relu())
        }
        fn vjp(&self, i: &[&Tensor<T>], _o: &Tensor<T>, up: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
            // subgradient 0 at the kink
            let mask = i[0].map(|x| if x > T::zero() { T::one() } else { T::zero() });
            one(up.mul(&mask)?)
        }
    }

    #[derive(Debug)]
    pub struct MatMul;

    impl<T: Element> DiffOp<T> for MatMul {
        fn name(&self) -> &'static str {
            "matmul"
        }
        fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
            inputs[0].matmul(inputs[1])
        }
        fn vjp(&self, i: &[&Tensor<T>], _o: &Tensor<T>, up: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
            let da = up.matmul(&i[1].transpose()?)?;
            let db = i[0].transpose()?.matmul(up)?;
            Ok(vec![da, db])
        }
    }

    /// `[r,c] + [c]` with the row vector added to every row.
    #[derive(Debug)]
    pub struct AddRow;

    impl<T: Element> DiffOp<T> for AddRow {
        fn name(&self) -> &'static str {
            "add_row"
        }
        fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
            inputs[0].add_row(inputs[1])
        }
        fn vjp(&self, _i: &[&Tensor<T>], _o: &Tensor<T>, up: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
            Ok(vec![up.clone(), up.sum_cols()?])
        }
    }

    /// `[r,c] * [c]` with every row scaled elementwise.
    #[derive(Debug)]
    pub struct MulRow;

    impl<T: Element> DiffOp<T> for MulRow {
        fn name(&self) -> &'static str {
            "mul_row"
        }
        fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
            inputs[0].mul_row(inputs[1])
        }
        fn vjp(&self, i: &[&Tensor<T>], _o: &Tensor<T>, up: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
            let dm = up.mul_row(i[1])?;
            let drow = up.mul(i[0])?.sum_cols()?;
            Ok(vec![dm, drow])
        }
    }

    #[derive(Debug)]
    pub struct Sum;

    impl<T: Element> DiffOp<T> for Sum {
        fn name(&self) -> &'static str {
            "sum"
        }
        fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
            Ok(Tensor::scalar(inputs[0].sum()))
        }
        fn vjp(&self, i: &[&Tensor<T>], _o: &Tensor<T>, up: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
            one(Tensor::filled(i[0].shape(), up.item()?))
        }
    }

    /// Row sums of a rank-2 tensor: `[r,c] -> [r]`.
    #[derive(Debug)]
    pub struct SumRows;

    impl<T: Element> DiffOp<T> for SumRows {
        fn name(&self) -> &'static str {
            "sum_rows"
        }
        fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
            inputs[0].sum_rows()
        }
        fn vjp(&self, i: &[&Tensor<T>], _o: &Tensor<T>, up: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
            let (r, c) = (i[0].shape()[0], i[0].shape()[1]);
            let mut grad = Tensor::zeros(&[r, c]);
            for row in 0..r {
                let g = up.data()[row];
                for col in 0..c {
                    grad.set(&[row, col], g);
                }
            }
            one(grad)
        }
    }

    #[derive(Debug)]
    pub struct Dot;

    impl<T: Element> DiffOp<T> for Dot {
        fn name(&self) -> &'static str {
            "dot"
        }
        fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
            Ok(Tensor::scalar(inputs[0].dot(inputs[1])?))
        }
        fn vjp(&self, i: &[&Tensor<T>], _o: &Tensor<T>, up: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
            let u = up.item()?;
            Ok(vec![i[1].scale(u), i[0].scale(u)])
        }
    }

    #[derive(Debug)]
    pub struct Reshape {
        pub to: Vec<usize>,
    }

    impl<T: Element> DiffOp<T> for Reshape {
        fn name(&self) -> &'static str {
            "reshape"
        }
        fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
            inputs[0].reshape(&self.to)
        }
        fn vjp(&self, i: &[&Tensor<T>], _o: &Tensor<T>, up: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
            one(up.reshape(i[0].shape())?)
        }
    }

    /// Slice of a rank-3 `[H,W,K]` grid: axis 0 gives `[W,K]`, axis 1 gives
    /// `[H,K]`. The vjp scatters the cotangent back into a zero grid.
    #[derive(Debug)]
    pub struct GridSlice {
        pub axis: usize,
        pub index: usize,
    }

    impl<T: Element> DiffOp<T> for GridSlice {
        fn name(&self) -> &'static str {
            "grid_slice"
        }
        fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
            inputs[0].grid_slice(self.axis, self.index)
        }
        fn vjp(&self, i: &[&Tensor<T>], _o: &Tensor<T>, up: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
            let shape = i[0].shape();
            let (h, w, k) = (shape[0], shape[1], shape[2]);
            let mut grad = Tensor::zeros(shape);
            match self.axis {
                0 => {
                    for x in 0..w {
                        for c in 0..k {
                            grad.set(&[self.index, x, c], up.get(&[x, c]));
                        }
                    }
                }
                1 => {
                    for y in 0..h {
                        for c in 0..k {
                            grad.set(&[y, self.index, c], up.get(&[y, c]));
                        }
                    }
                }
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "grid_slice axis {}",
                        self.axis
                    )))
                }
            }
            one(grad)
        }
    }
}
