use std::cell::{Ref, RefCell};
use std::fmt;

use super::kernels::{self, ConvGeom};
use super::{Array, AutodiffError, Result};

/// User-defined differentiable node.
///
/// Fused operations (losses, mostly) implement this to avoid materialising
/// long chains of elementwise nodes.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Returns the gradient with respect to every input, in input order.
    /// `None` means "no contribution".
    fn backward(&self, inputs: &[&[f64]], output: &[f64], grad_out: &[f64]) -> Vec<Option<Vec<f64>>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InterpMode {
    Nearest,
    Bilinear,
}

pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Sigmoid(usize),
    AddChannelBias(usize, usize),
    MulScalar(usize, usize),
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Transpose { a: usize, rows: usize, cols: usize },
    Reshape(usize),
    Concat { inputs: Vec<usize>, axis: usize },
    Narrow { a: usize, axis: usize, start: usize },
    Softmax { a: usize, axis: usize },
    Sum(usize),
    Mean { a: usize, out_index: Vec<usize>, count: usize },
    Conv2d { x: usize, w: usize, geom: ConvGeom, batch: usize, cout: usize },
    Interpolate {
        a: usize,
        channels: usize,
        rows: Vec<(usize, usize, f64)>,
        cols: Vec<(usize, usize, f64)>,
        in_hw: (usize, usize),
    },
    Custom { inputs: Vec<usize>, op: Box<dyn CustomOp> },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | AddChannelBias(a, b) | MulScalar(a, b) => vec![*a, *b],
            Scale(a, _) | AddScalar(a) | Relu(a) | Exp(a) | Log(a) | Sigmoid(a) | Reshape(a) | Sum(a) => {
                vec![*a]
            }
            MatMul { a, b, .. } => vec![*a, *b],
            Transpose { a, .. } | Narrow { a, .. } | Softmax { a, .. } | Mean { a, .. } => vec![*a],
            Interpolate { a, .. } => vec![*a],
            Conv2d { x, w, .. } => vec![*x, *w],
            Concat { inputs, .. } | Custom { inputs, .. } => inputs.clone(),
        }
    }

    fn name(&self) -> &'static str {
        use Op::*;
        match self {
            Leaf => "leaf",
            Add(..) => "add",
            Sub(..) => "sub",
            Mul(..) => "mul",
            Scale(..) => "scale",
            AddScalar(..) => "add_scalar",
            Relu(..) => "relu",
            Exp(..) => "exp",
            Log(..) => "log",
            Sigmoid(..) => "sigmoid",
            AddChannelBias(..) => "add_channel_bias",
            MulScalar(..) => "mul_scalar",
            MatMul { .. } => "matmul",
            Transpose { .. } => "transpose",
            Reshape(..) => "reshape",
            Concat { .. } => "concat",
            Narrow { .. } => "narrow",
            Softmax { .. } => "softmax",
            Sum(..) => "sum",
            Mean { .. } => "mean",
            Conv2d { .. } => "conv2d",
            Interpolate { .. } => "interpolate",
            Custom { op, .. } => op.name(),
        }
    }
}

pub(crate) struct Node {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub op: Op,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

/// Eagerly built differentiation tape. Nodes are appended in creation order,
/// so the node list is always a topological order of the graph.
///
/// A graph is confined to the thread that created it.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.nodes.borrow().len()).finish()
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Tensor<'g> {
    pub(crate) graph: &'g Graph,
    pub(crate) id: usize,
}

impl fmt::Debug for Tensor<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nodes = self.graph.nodes.borrow();
        let node = &nodes[self.id];
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("op", &node.op.name())
            .field("shape", &node.shape)
            .finish()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Array, requires_grad: bool) -> Tensor<'_> {
        let shape = value.shape().to_vec();
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value: value.into_data(),
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Tensor {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Leaf that receives gradients.
    pub fn param(&self, value: &Array) -> Tensor<'_> {
        self.leaf(value.clone(), true)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&self, value: Array) -> Tensor<'_> {
        self.leaf(value, false)
    }

    /// Drops accumulated leaf gradients.
    pub fn clear_grads(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    pub(crate) fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Tensor<'_> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = op.inputs().iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Tensor {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Appends a node whose backward pass is supplied by `op`.
    pub fn custom<'g>(
        &'g self,
        inputs: &[Tensor<'g>],
        shape: Vec<usize>,
        value: Vec<f64>,
        op: Box<dyn CustomOp>,
    ) -> Result<Tensor<'g>> {
        for t in inputs {
            self.check_owner(t)?;
        }
        if shape.iter().product::<usize>() != value.len() {
            return Err(AutodiffError::Dimension {
                op: op.name(),
                detail: format!("shape {shape:?} does not match {} values", value.len()),
            });
        }
        Ok(self.push(
            shape,
            value,
            Op::Custom {
                inputs: inputs.iter().map(|t| t.id).collect(),
                op,
            },
        ))
    }

    pub(crate) fn check_owner(&self, t: &Tensor<'_>) -> Result<()> {
        if std::ptr::eq(self, t.graph) {
            Ok(())
        } else {
            Err(AutodiffError::ForeignTensor)
        }
    }
}

impl<'g> Tensor<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.graph.nodes.borrow()[self.id].value.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    pub fn data(&self) -> Ref<'g, [f64]> {
        Ref::map(self.graph.nodes.borrow(), |nodes| nodes[self.id].value.as_slice())
    }

    /// Detached copy of the value.
    pub fn value(&self) -> Array {
        let nodes = self.graph.nodes.borrow();
        let node = &nodes[self.id];
        Array::new(node.shape.clone(), node.value.clone()).expect("node shape invariant")
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        let nodes = self.graph.nodes.borrow();
        let node = &nodes[self.id];
        assert_eq!(node.value.len(), 1, "item() on tensor of shape {:?}", node.shape);
        node.value[0]
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self) -> Option<Array> {
        let nodes = self.graph.nodes.borrow();
        let node = &nodes[self.id];
        node.grad
            .as_ref()
            .map(|g| Array::new(node.shape.clone(), g.clone()).expect("grad shape invariant"))
    }

    /// Reverse pass from this scalar. Leaf gradients accumulate across calls.
    pub fn backward(&self) -> Result<()> {
        let mut nodes = self.graph.nodes.borrow_mut();
        if nodes[self.id].value.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(nodes[self.id].shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.id + 1];
        grads[self.id] = Some(vec![1.0]);
        for id in (0..=self.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !nodes[id].requires_grad {
                continue;
            }
            if matches!(nodes[id].op, Op::Leaf) {
                let node = &mut nodes[id];
                match node.grad.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            propagate(&nodes, id, &g, &mut grads);
        }
        Ok(())
    }
}

/// Lazily-initialised gradient slot for `id`, or `None` when `id` does not
/// require a gradient.
fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], id: usize) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    Some(grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]))
}

fn propagate(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for input in [*a, *b] {
                if let Some(s) = slot(nodes, grads, input) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(s) = slot(nodes, grads, *a) {
                s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
            }
            if let Some(s) = slot(nodes, grads, *b) {
                s.iter_mut().zip(g).for_each(|(s, g)| *s -= g);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            if let Some(s) = slot(nodes, grads, *a) {
                for i in 0..s.len() {
                    s[i] += g[i] * bv[i];
                }
            }
            if let Some(s) = slot(nodes, grads, *b) {
                for i in 0..s.len() {
                    s[i] += g[i] * av[i];
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(s) = slot(nodes, grads, *a) {
                s.iter_mut().zip(g).for_each(|(s, g)| *s += c * g);
            }
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            if let Some(s) = slot(nodes, grads, *a) {
                s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
            }
        }
        Op::Relu(a) => {
            let x = &nodes[*a].value;
            if let Some(s) = slot(nodes, grads, *a) {
                for i in 0..s.len() {
                    if x[i] > 0.0 {
                        s[i] += g[i];
                    }
                }
            }
        }
        Op::Exp(a) => {
            if let Some(s) = slot(nodes, grads, *a) {
                for i in 0..s.len() {
                    s[i] += g[i] * out[i];
                }
            }
        }
        Op::Log(a) => {
            let x = &nodes[*a].value;
            if let Some(s) = slot(nodes, grads, *a) {
                for i in 0..s.len() {
                    s[i] += g[i] / x[i];
                }
            }
        }
        Op::Sigmoid(a) => {
            if let Some(s) = slot(nodes, grads, *a) {
                for i in 0..s.len() {
                    s[i] += g[i] * out[i] * (1.0 - out[i]);
                }
            }
        }
        Op::AddChannelBias(x, b) => {
            if let Some(s) = slot(nodes, grads, *x) {
                s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
            }
            let channels = nodes[*b].value.len();
            let inner = g.len() / channels;
            if let Some(s) = slot(nodes, grads, *b) {
                for (c, sc) in s.iter_mut().enumerate() {
                    *sc += g[c * inner..(c + 1) * inner].iter().sum::<f64>();
                }
            }
        }
        Op::MulScalar(x, k) => {
            let kv = nodes[*k].value[0];
            let xv = &nodes[*x].value;
            if let Some(s) = slot(nodes, grads, *x) {
                s.iter_mut().zip(g).for_each(|(s, g)| *s += g * kv);
            }
            if let Some(s) = slot(nodes, grads, *k) {
                s[0] += g.iter().zip(xv).map(|(g, x)| g * x).sum::<f64>();
            }
        }
        Op::MatMul { a, b, m, k, n } => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            if let Some(s) = slot(nodes, grads, *a) {
                // dA = G * B^T
                kernels::gemm(*m, *n, *k, g, false, bv, true, s, 1.0);
            }
            if let Some(s) = slot(nodes, grads, *b) {
                // dB = A^T * G
                kernels::gemm(*k, *m, *n, av, true, g, false, s, 1.0);
            }
        }
        Op::Transpose { a, rows, cols } => {
            if let Some(s) = slot(nodes, grads, *a) {
                for r in 0..*rows {
                    for c in 0..*cols {
                        s[r * cols + c] += g[c * rows + r];
                    }
                }
            }
        }
        Op::Concat { inputs, axis } => {
            let out_shape = &node.shape;
            let (outer, _, inner) = kernels::axis_blocks(out_shape, *axis);
            let total_extent = out_shape[*axis];
            let mut offset = 0;
            for &input in inputs {
                let extent = nodes[input].shape[*axis];
                if let Some(s) = slot(nodes, grads, input) {
                    for o in 0..outer {
                        let src = &g[(o * total_extent + offset) * inner..(o * total_extent + offset + extent) * inner];
                        let dst = &mut s[o * extent * inner..(o + 1) * extent * inner];
                        dst.iter_mut().zip(src).for_each(|(d, v)| *d += v);
                    }
                }
                offset += extent;
            }
        }
        Op::Narrow { a, axis, start } => {
            let in_shape = &nodes[*a].shape;
            let (outer, in_extent, inner) = kernels::axis_blocks(in_shape, *axis);
            let extent = node.shape[*axis];
            if let Some(s) = slot(nodes, grads, *a) {
                for o in 0..outer {
                    let dst = &mut s[(o * in_extent + start) * inner..(o * in_extent + start + extent) * inner];
                    let src = &g[o * extent * inner..(o + 1) * extent * inner];
                    dst.iter_mut().zip(src).for_each(|(d, v)| *d += v);
                }
            }
        }
        Op::Softmax { a, axis } => {
            let (outer, extent, inner) = kernels::axis_blocks(&node.shape, *axis);
            if let Some(s) = slot(nodes, grads, *a) {
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * extent * inner + i;
                        let dot: f64 = (0..extent).map(|e| g[base + e * inner] * out[base + e * inner]).sum();
                        for e in 0..extent {
                            let idx = base + e * inner;
                            s[idx] += out[idx] * (g[idx] - dot);
                        }
                    }
                }
            }
        }
        Op::Sum(a) => {
            if let Some(s) = slot(nodes, grads, *a) {
                s.iter_mut().for_each(|v| *v += g[0]);
            }
        }
        Op::Mean { a, out_index, count } => {
            let inv = 1.0 / *count as f64;
            if let Some(s) = slot(nodes, grads, *a) {
                for (v, &o) in s.iter_mut().zip(out_index) {
                    *v += g[o] * inv;
                }
            }
        }
        Op::Conv2d { x, w, geom, batch, cout } => {
            let xv = &nodes[*x].value;
            let wv = &nodes[*w].value;
            let (rows, ncols) = (geom.col_rows(), geom.col_cols());
            let in_size = geom.cin * geom.h * geom.w;
            let out_size = cout * ncols;
            let need_x = nodes[*x].requires_grad;
            let need_w = nodes[*w].requires_grad;
            let mut cols = vec![0.0; if geom.is_pointwise() { 0 } else { rows * ncols }];
            let mut dcols = vec![0.0; if geom.is_pointwise() || !need_x { 0 } else { rows * ncols }];
            for n in 0..*batch {
                let xn = &xv[n * in_size..(n + 1) * in_size];
                let gn = &g[n * out_size..(n + 1) * out_size];
                if need_w {
                    let colsn: &[f64] = if geom.is_pointwise() {
                        xn
                    } else {
                        kernels::im2col(xn, geom, &mut cols);
                        &cols
                    };
                    let s = slot(nodes, grads, *w).expect("requires grad");
                    kernels::gemm(*cout, ncols, rows, gn, false, colsn, true, s, 1.0);
                }
                if need_x {
                    let s = slot(nodes, grads, *x).expect("requires grad");
                    let sx = &mut s[n * in_size..(n + 1) * in_size];
                    if geom.is_pointwise() {
                        kernels::gemm(rows, *cout, ncols, wv, true, gn, false, sx, 1.0);
                    } else {
                        kernels::gemm(rows, *cout, ncols, wv, true, gn, false, &mut dcols, 0.0);
                        kernels::col2im_add(&dcols, geom, sx);
                    }
                }
            }
        }
        Op::Interpolate {
            a,
            channels,
            rows,
            cols,
            in_hw,
        } => {
            let (ih, iw) = *in_hw;
            let (oh, ow) = (rows.len(), cols.len());
            if let Some(s) = slot(nodes, grads, *a) {
                for c in 0..*channels {
                    let src = &mut s[c * ih * iw..(c + 1) * ih * iw];
                    for (oy, &(y0, y1, fy)) in rows.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
                            let gv = g[(c * oh + oy) * ow + ox];
                            src[y0 * iw + x0] += gv * (1.0 - fy) * (1.0 - fx);
                            src[y0 * iw + x1] += gv * (1.0 - fy) * fx;
                            src[y1 * iw + x0] += gv * fy * (1.0 - fx);
                            src[y1 * iw + x1] += gv * fy * fx;
                        }
                    }
                }
            }
        }
        Op::Custom { inputs, op } => {
            let values: Vec<&[f64]> = inputs.iter().map(|&i| nodes[i].value.as_slice()).collect();
            let contributions = op.backward(&values, out, g);
            debug_assert_eq!(contributions.len(), inputs.len());
            for (&input, contribution) in inputs.iter().zip(contributions) {
                if let (Some(c), Some(s)) = (contribution, slot(nodes, grads, input)) {
                    debug_assert_eq!(c.len(), s.len());
                    s.iter_mut().zip(&c).for_each(|(s, c)| *s += c);
                }
            }
        }
    }
}
