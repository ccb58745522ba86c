//! A small reverse-mode differentiation engine over dense `f64` tensors.
//!
//! A [`Graph`] is built once from named inputs, constants and primitive
//! operations, then evaluated with [`Graph::forward`] for any set of input
//! bindings. [`Graph::backward`] propagates a seed from one node back to
//! every graph input. Nodes are appended in construction order, so node ids
//! are always topologically sorted.
//!
//! ```
//! use std::collections::HashMap;
//! use oga_core::graph::Graph;
//! use oga_core::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.input("x", &[]);
//! let y = g.square(x).unwrap();
//! g.output("y", y);
//! let mut bind = HashMap::new();
//! bind.insert("x".to_string(), Tensor::scalar(3.0));
//! let out = g.forward(&bind).unwrap();
//! assert_eq!(out["y"].item(), 9.0);
//! let grads = g.backward(y, &Tensor::scalar(1.0)).unwrap();
//! assert_eq!(grads["x"].item(), 6.0);
//! ```

mod check;
pub(crate) mod kernels;

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

pub use check::{check_gradients, check_gradients_at};

/// Index of a node inside its [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvParams {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvParams {
    pub fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        Self {
            stride,
            padding,
            dilation,
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Input {
        name: String,
    },
    Constant(Arc<Tensor>),
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    MatMul,
    Conv2d(ConvParams),
    Relu,
    Gelu,
    Tanh,
    Sigmoid,
    Softplus,
    Exp,
    Log,
    Sqrt,
    Square,
    Sum {
        axis: Option<usize>,
    },
    Mean {
        axis: Option<usize>,
    },
    MaxConst(f64),
    MaskedSelect(Arc<Vec<usize>>),
    BilinearSample(Arc<Tensor>),
    Reshape,
    Transpose(Vec<usize>),
    Concat {
        axis: usize,
    },
    Slice {
        axis: usize,
        start: usize,
        end: usize,
    },
    Broadcast,
    Softmax,
    LogSumExp,
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Constant(_) => "constant",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::MatMul => "matmul",
            Op::Conv2d(_) => "conv2d",
            Op::Relu => "relu",
            Op::Gelu => "gelu",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::Softplus => "softplus",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sqrt => "sqrt",
            Op::Square => "square",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::MaxConst(_) => "max_const",
            Op::MaskedSelect(_) => "masked_select",
            Op::BilinearSample(_) => "bilinear_sample",
            Op::Reshape => "reshape",
            Op::Transpose(_) => "transpose",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Broadcast => "broadcast",
            Op::Softmax => "softmax",
            Op::LogSumExp => "logsumexp",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    shape: Vec<usize>,
    /// True when some graph input is upstream of this node.
    live: bool,
    default: Option<Tensor>,
}

/// Computation graph with per-node values and adjoints.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    values: Vec<Option<Tensor>>,
    adjoints: Vec<Option<Tensor>>,
    outputs: Vec<(String, NodeId)>,
}

pub type Bindings = HashMap<String, Tensor>;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, shape: Vec<usize>) -> NodeId {
        let live = matches!(op, Op::Input { .. }) || inputs.iter().any(|i| self.nodes[i.0].live);
        self.nodes.push(Node {
            op,
            inputs,
            shape,
            live,
            default: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn shape_err(&self, op: &Op, detail: String) -> Error {
        Error::Shape {
            node: self.nodes.len(),
            op: op.name(),
            detail,
        }
    }

    /// Declares a named input that must be bound at [`Graph::forward`].
    pub fn input(&mut self, name: &str, shape: &[usize]) -> NodeId {
        self.push(
            Op::Input {
                name: name.to_string(),
            },
            vec![],
            shape.to_vec(),
        )
    }

    /// Declares a named input with a default value used when no binding is given.
    pub fn variable(&mut self, name: &str, value: Tensor) -> NodeId {
        let id = self.input(name, value.shape());
        self.nodes[id.0].default = Some(value);
        id
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Constant(Arc::new(value)), vec![], shape)
    }

    /// Like [`Graph::constant`] but shares the tensor instead of copying it.
    pub fn constant_shared(&mut self, value: Arc<Tensor>) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Constant(value), vec![], shape)
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(Tensor::scalar(value))
    }

    /// Registers `id` as a named output returned by [`Graph::forward`].
    pub fn output(&mut self, name: &str, id: NodeId) {
        self.outputs.push((name.to_string(), id));
    }

    fn binary(&mut self, op: Op, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let shape = kernels::broadcast_shapes(&sa, &sb)
            .ok_or_else(|| self.shape_err(&op, format!("cannot broadcast {sa:?} with {sb:?}")))?;
        Ok(self.push(op, vec![a, b], shape))
    }

    fn unary(&mut self, op: Op, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(op, vec![a], shape)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Mul, a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Div, a, b)
    }

    /// `a * c` for a constant scalar `c`.
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let k = self.scalar(c);
        self.mul(a, k)
    }

    /// `a + c` for a constant scalar `c`.
    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let k = self.scalar(c);
        self.add(a, k)
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        Ok(self.unary(Op::Neg, a))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        Ok(self.unary(Op::Relu, a))
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        Ok(self.unary(Op::Gelu, a))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        Ok(self.unary(Op::Tanh, a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        Ok(self.unary(Op::Sigmoid, a))
    }

    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        Ok(self.unary(Op::Softplus, a))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        Ok(self.unary(Op::Exp, a))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        Ok(self.unary(Op::Log, a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        Ok(self.unary(Op::Sqrt, a))
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        Ok(self.unary(Op::Square, a))
    }

    /// Elementwise `max(a, c)`; the gradient passes only where `a > c`.
    pub fn max_const(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        Ok(self.unary(Op::MaxConst(c), a))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        if self.shape(a).is_empty() {
            return Err(self.shape_err(&Op::Softmax, "softmax of a scalar".into()));
        }
        Ok(self.unary(Op::Softmax, a))
    }

    /// `log(sum(exp(a)))` over every element.
    pub fn logsumexp(&mut self, a: NodeId) -> Result<NodeId> {
        Ok(self.push(Op::LogSumExp, vec![a], vec![]))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.shape_err(&Op::MatMul, format!("{sa:?} x {sb:?}")));
        }
        Ok(self.push(Op::MatMul, vec![a, b], vec![sa[0], sb[1]]))
    }

    /// 2-D convolution of a `(C, H, W)` input with `(O, C, kh, kw)` weights
    /// and an optional `(O,)` bias.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        params: ConvParams,
    ) -> Result<NodeId> {
        let op = Op::Conv2d(params);
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(weight).to_vec());
        if sx.len() != 3
            || sw.len() != 4
            || sx[0] != sw[1]
            || params.stride == 0
            || params.dilation == 0
        {
            return Err(self.shape_err(&op, format!("input {sx:?}, weight {sw:?}")));
        }
        if let Some(b) = bias {
            if self.shape(b) != [sw[0]] {
                let sb = self.shape(b).to_vec();
                return Err(self.shape_err(&op, format!("bias {sb:?} for {} outputs", sw[0])));
            }
        }
        let out = |n: usize, k: usize| {
            let span = params.dilation * (k - 1) + 1;
            (n + 2 * params.padding)
                .checked_sub(span)
                .map(|r| r / params.stride + 1)
        };
        let (ho, wo) = match (out(sx[1], sw[2]), out(sx[2], sw[3])) {
            (Some(h), Some(w)) => (h, w),
            _ => return Err(self.shape_err(&op, format!("kernel {sw:?} larger than input {sx:?}"))),
        };
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.push(op, inputs, vec![sw[0], ho, wo]))
    }

    pub fn sum(&mut self, a: NodeId, axis: Option<usize>) -> Result<NodeId> {
        let shape = self.reduced_shape(&Op::Sum { axis }, a, axis)?;
        Ok(self.push(Op::Sum { axis }, vec![a], shape))
    }

    pub fn mean(&mut self, a: NodeId, axis: Option<usize>) -> Result<NodeId> {
        let shape = self.reduced_shape(&Op::Mean { axis }, a, axis)?;
        Ok(self.push(Op::Mean { axis }, vec![a], shape))
    }

    fn reduced_shape(&self, op: &Op, a: NodeId, axis: Option<usize>) -> Result<Vec<usize>> {
        let s = self.shape(a);
        match axis {
            None => Ok(vec![]),
            Some(ax) if ax < s.len() => {
                let mut out = s.to_vec();
                out.remove(ax);
                Ok(out)
            }
            Some(ax) => Err(self.shape_err(op, format!("axis {ax} out of range for {s:?}"))),
        }
    }

    /// Gathers `a.flat[i]` for each index, producing a rank-1 tensor.
    pub fn masked_select(&mut self, a: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        let n = numel(self.shape(a));
        let op = Op::MaskedSelect(Arc::new(indices));
        let Op::MaskedSelect(idx) = &op else {
            unreachable!()
        };
        if idx.is_empty() || idx.iter().any(|&i| i >= n) {
            return Err(self.shape_err(&op, format!("indices empty or beyond {n} elements")));
        }
        let len = idx.len();
        Ok(self.push(op, vec![a], vec![len]))
    }

    /// Samples an `(H, W, C)` texture at `(P, 2)` continuous texel coordinates
    /// `(u, v)` (column, row; texel centers at half-integers) with clamp-to-edge
    /// bilinear interpolation. The coordinates are treated as constants.
    pub fn bilinear_sample(&mut self, texture: NodeId, uv: Tensor) -> Result<NodeId> {
        let st = self.shape(texture).to_vec();
        let op = Op::BilinearSample(Arc::new(uv));
        let Op::BilinearSample(uv) = &op else {
            unreachable!()
        };
        if st.len() != 3 || uv.rank() != 2 || uv.shape()[1] != 2 {
            return Err(self.shape_err(&op, format!("texture {st:?}, uv {:?}", uv.shape())));
        }
        let p = uv.shape()[0];
        Ok(self.push(op, vec![texture], vec![p, st[2]]))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        if numel(self.shape(a)) != numel(shape) || shape.contains(&0) {
            let s = self.shape(a).to_vec();
            return Err(self.shape_err(&Op::Reshape, format!("{s:?} -> {shape:?}")));
        }
        Ok(self.push(Op::Reshape, vec![a], shape.to_vec()))
    }

    /// Permutes axes: output axis `i` is input axis `perm[i]`.
    pub fn transpose(&mut self, a: NodeId, perm: &[usize]) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        let mut seen = vec![false; s.len()];
        let valid = perm.len() == s.len()
            && perm
                .iter()
                .all(|&p| p < s.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(self.shape_err(
                &Op::Transpose(perm.to_vec()),
                format!("perm {perm:?} for {s:?}"),
            ));
        }
        let shape = perm.iter().map(|&p| s[p]).collect();
        Ok(self.push(Op::Transpose(perm.to_vec()), vec![a], shape))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        let op = Op::Concat { axis };
        let first = match parts.first() {
            Some(&p) => self.shape(p).to_vec(),
            None => return Err(self.shape_err(&op, "nothing to concatenate".into())),
        };
        if axis >= first.len() {
            return Err(self.shape_err(&op, format!("axis {axis} for {first:?}")));
        }
        let mut shape = first.clone();
        shape[axis] = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                let s = s.to_vec();
                return Err(self.shape_err(&op, format!("{s:?} vs {first:?}")));
            }
            shape[axis] += s[axis];
        }
        Ok(self.push(op, parts.to_vec(), shape))
    }

    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, end: usize) -> Result<NodeId> {
        let op = Op::Slice { axis, start, end };
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start >= end || end > s[axis] {
            return Err(self.shape_err(&op, format!("[{start}..{end}] on axis {axis} of {s:?}")));
        }
        let mut shape = s;
        shape[axis] = end - start;
        Ok(self.push(op, vec![a], shape))
    }

    /// Broadcasts `a` to `shape` under the usual trailing-axis rules.
    pub fn broadcast(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        match kernels::broadcast_shapes(&s, shape) {
            Some(out) if out == shape => Ok(self.push(Op::Broadcast, vec![a], shape.to_vec())),
            _ => Err(self.shape_err(&Op::Broadcast, format!("{s:?} -> {shape:?}"))),
        }
    }

    /// Evaluates every node. Returns the registered outputs by name.
    pub fn forward(&mut self, bindings: &Bindings) -> Result<HashMap<String, Tensor>> {
        let mut values: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let value = match &node.op {
                Op::Input { name } => {
                    let v = bindings
                        .get(name)
                        .or(node.default.as_ref())
                        .ok_or_else(|| Error::MissingBinding(name.clone()))?;
                    if v.shape() != node.shape.as_slice() {
                        return Err(Error::Shape {
                            node: i,
                            op: "input",
                            detail: format!(
                                "binding `{name}` has shape {:?}, declared {:?}",
                                v.shape(),
                                node.shape
                            ),
                        });
                    }
                    v.clone()
                }
                Op::Constant(t) => (**t).clone(),
                op => {
                    let args: Vec<&Tensor> = node
                        .inputs
                        .iter()
                        .map(|id| values[id.0].as_ref().expect("inputs precede consumers"))
                        .collect();
                    kernels::forward(op, &args, &node.shape)
                }
            };
            if !value.all_finite() {
                return Err(Error::NonFinite {
                    node: i,
                    op: node.op.name(),
                });
            }
            values.push(Some(value));
        }
        self.values = values;
        self.adjoints.clear();
        Ok(self
            .outputs
            .iter()
            .map(|(name, id)| (name.clone(), self.value(*id).clone()))
            .collect())
    }

    /// Evaluates with every input taken from its default value.
    pub fn forward_defaults(&mut self) -> Result<HashMap<String, Tensor>> {
        self.forward(&Bindings::new())
    }

    /// Value of a node after [`Graph::forward`].
    pub fn value(&self, id: NodeId) -> &Tensor {
        self.values
            .get(id.0)
            .and_then(|v| v.as_ref())
            .expect("forward must run before reading values")
    }

    /// Adjoint of a node after [`Graph::backward`], if it was reached.
    pub fn adjoint(&self, id: NodeId) -> Option<&Tensor> {
        self.adjoints.get(id.0).and_then(|a| a.as_ref())
    }

    /// Propagates `seed` from `output` to every input. Inputs that do not
    /// influence `output` get zero adjoints.
    pub fn backward(&mut self, output: NodeId, seed: &Tensor) -> Result<HashMap<String, Tensor>> {
        if self.values.len() != self.nodes.len() {
            return Err(Error::InvalidArgument(
                "backward called before forward".into(),
            ));
        }
        if seed.shape() != self.shape(output) {
            return Err(Error::Shape {
                node: output.0,
                op: "seed",
                detail: format!(
                    "seed shape {:?} does not match output {:?}",
                    seed.shape(),
                    self.shape(output)
                ),
            });
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adj[output.0] = Some(seed.clone());
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.live || node.inputs.is_empty() {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            let needs: Vec<bool> = node.inputs.iter().map(|id| self.nodes[id.0].live).collect();
            let args: Vec<&Tensor> = node.inputs.iter().map(|id| self.value(*id)).collect();
            let grads = kernels::backward(&node.op, &args, self.value(NodeId(i)), &g, &needs);
            for (id, grad) in node.inputs.iter().zip(grads) {
                if let Some(grad) = grad {
                    match &mut adj[id.0] {
                        Some(acc) => acc.add_assign(&grad),
                        slot => *slot = Some(grad),
                    }
                }
            }
            adj[i] = Some(g);
        }
        let mut result = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Input { name } = &node.op {
                let a = adj[i].clone().unwrap_or_else(|| Tensor::zeros(&node.shape));
                result.insert(name.clone(), a);
            }
        }
        self.adjoints = adj;
        Ok(result)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bind(pairs: &[(&str, Tensor)]) -> Bindings {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect()
    }

    #[test]
    fn add_of_two_vectors() {
        let mut g = Graph::new();
        let a = g.input("a", &[2]);
        let b = g.input("b", &[2]);
        let c = g.add(a, b).unwrap();
        g.output("c", c);
        let out = g
            .forward(&bind(&[
                ("a", Tensor::vector(vec![1.0, 2.0])),
                ("b", Tensor::vector(vec![3.0, 4.0])),
            ]))
            .unwrap();
        assert_eq!(out["c"].data(), &[4.0, 6.0]);
    }

    #[test]
    fn matmul_with_padded_identity() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap());
        let x = g.input("x", &[3, 1]);
        let y = g.matmul(a, x).unwrap();
        g.output("y", y);
        let out = g
            .forward(&bind(&[(
                "x",
                Tensor::new(vec![3, 1], vec![1.0, 2.0, 3.0]).unwrap(),
            )]))
            .unwrap();
        assert_eq!(out["y"].data(), &[1.0, 2.0]);
    }

    #[test]
    fn sigmoid_of_zero() {
        let mut g = Graph::new();
        let x = g.variable("x", Tensor::vector(vec![0.0]));
        let y = g.sigmoid(x).unwrap();
        g.output("y", y);
        assert_eq!(g.forward_defaults().unwrap()["y"].data(), &[0.5]);
    }

    #[test]
    fn product_rule() {
        let mut g = Graph::new();
        let x = g.variable("x", Tensor::scalar(2.0));
        let y = g.variable("y", Tensor::scalar(5.0));
        let z = g.mul(x, y).unwrap();
        g.forward_defaults().unwrap();
        let grads = g.backward(z, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(grads["x"].item(), 5.0);
        assert_eq!(grads["y"].item(), 2.0);
    }

    #[test]
    fn missing_and_misshapen_bindings_are_errors() {
        let mut g = Graph::new();
        let x = g.input("x", &[2]);
        let _ = g.exp(x).unwrap();
        assert!(matches!(
            g.forward(&Bindings::new()),
            Err(Error::MissingBinding(_))
        ));
        let err = g
            .forward(&bind(&[("x", Tensor::vector(vec![1.0]))]))
            .unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn build_time_shape_errors_name_the_op() {
        let mut g = Graph::new();
        let a = g.input("a", &[2, 3]);
        let b = g.input("b", &[2, 3]);
        let err = g.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"), "{err}");
        let c = g.input("c", &[4]);
        assert!(g.add(a, c).is_err());
    }

    #[test]
    fn non_finite_output_is_reported() {
        let mut g = Graph::new();
        let x = g.variable("x", Tensor::vector(vec![-1.0]));
        let _ = g.log(x).unwrap();
        let err = g.forward_defaults().unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "log", .. }));
    }

    #[test]
    fn seed_shape_is_checked() {
        let mut g = Graph::new();
        let x = g.variable("x", Tensor::vector(vec![1.0, 2.0]));
        let y = g.square(x).unwrap();
        g.forward_defaults().unwrap();
        assert!(g.backward(y, &Tensor::scalar(1.0)).is_err());
        let grads = g.backward(y, &Tensor::vector(vec![1.0, 1.0])).unwrap();
        assert_eq!(grads["x"].data(), &[2.0, 4.0]);
    }

    #[test]
    fn unused_inputs_get_zero_adjoints() {
        let mut g = Graph::new();
        let x = g.variable("x", Tensor::scalar(1.0));
        let _unused = g.variable("u", Tensor::vector(vec![1.0, 2.0]));
        let y = g.square(x).unwrap();
        g.forward_defaults().unwrap();
        let grads = g.backward(y, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(grads["u"].data(), &[0.0, 0.0]);
    }
}
