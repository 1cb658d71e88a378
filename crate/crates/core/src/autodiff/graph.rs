use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use crate::tensor::{softmax_in_place, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("node {node} ({op}): shape mismatch: {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("node {node} ({op}) produced a non-finite value")]
    NonFinite { node: usize, op: &'static str },
    #[error("input `{0}` is not bound")]
    Unbound(String),
    #[error("node {0} has not been evaluated")]
    NotEvaluated(usize),
    #[error("node {node} ({op}) has no derivative")]
    Unsupported { node: usize, op: &'static str },
    #[error("seed shape {seed:?} does not match output shape {output:?}")]
    SeedShape { seed: Vec<usize>, output: Vec<usize> },
    #[error("output shape {0:?} is not scalar")]
    NonScalar(Vec<usize>),
    #[error("unknown node {0}")]
    UnknownNode(usize),
    #[error("duplicate leaf name `{0}`")]
    DuplicateLeaf(String),
}

/// Operation kinds. Every non-leaf refers only to nodes created before it,
/// so creation order is a topological order.
#[derive(Debug, Clone)]
pub enum Op {
    Leaf { name: String, trainable: bool },
    /// `[m, k] x [k, n]`.
    MatMul(NodeId, NodeId),
    /// 3x3, stride 1, zero "same" padding. `[N, C, H, W]` with kernel
    /// `[O, C, 3, 3]` and per-channel bias `[O]`.
    Conv3x3 {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
    },
    /// 2x2 window, stride 2, on `[N, C, H, W]` with even `H`, `W`.
    MaxPool2(NodeId),
    /// Equal shapes, or a rank-1 right operand added along the last axis.
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Relu(NodeId),
    /// Softmax over the last axis.
    Softmax(NodeId),
    Log(NodeId),
    /// Mean over every element, producing a scalar.
    Mean(NodeId),
    /// Concatenation along the last axis.
    Concat(Vec<NodeId>),
    /// `[d0, d1, ...] -> [d0, d1 * ...]`.
    Flatten(NodeId),
    /// Index of the maximum along the last axis (first on ties). Not
    /// differentiable.
    Argmax(NodeId),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Conv3x3 { .. } => "conv3x3",
            Op::MaxPool2(_) => "maxpool2",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Relu(_) => "relu",
            Op::Softmax(_) => "softmax",
            Op::Log(_) => "log",
            Op::Mean(_) => "mean",
            Op::Concat(_) => "concat",
            Op::Flatten(_) => "flatten",
            Op::Argmax(_) => "argmax",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf { .. } => Vec::new(),
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Conv3x3 {
                input,
                kernel,
                bias,
            } => vec![*input, *kernel, *bias],
            Op::MaxPool2(a)
            | Op::Relu(a)
            | Op::Softmax(a)
            | Op::Log(a)
            | Op::Mean(a)
            | Op::Flatten(a)
            | Op::Argmax(a) => vec![*a],
            Op::Concat(parts) => parts.clone(),
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Option<Tensor>,
    // maxpool: flat input index of each output's maximum
    switches: Vec<usize>,
}

/// Gradients of every leaf, keyed by leaf name.
pub type Gradients = BTreeMap<String, Tensor>;

/// A fixed computation graph over named leaves.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaves: HashMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op) -> NodeId {
        for id in op.inputs() {
            assert!(id.0 < self.nodes.len(), "node {} does not exist yet", id.0);
        }
        self.nodes.push(Node {
            op,
            value: None,
            switches: Vec::new(),
        });
        NodeId(self.nodes.len() - 1)
    }

    fn leaf(&mut self, name: &str, trainable: bool) -> Result<NodeId, GraphError> {
        if self.leaves.contains_key(name) {
            return Err(GraphError::DuplicateLeaf(name.to_string()));
        }
        let id = self.push(Op::Leaf {
            name: name.to_string(),
            trainable,
        });
        self.leaves.insert(name.to_string(), id);
        Ok(id)
    }

    /// A leaf treated as data.
    pub fn input(&mut self, name: &str) -> Result<NodeId, GraphError> {
        self.leaf(name, false)
    }

    /// A leaf treated as a trainable parameter.
    pub fn param(&mut self, name: &str) -> Result<NodeId, GraphError> {
        self.leaf(name, true)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn conv3x3(&mut self, input: NodeId, kernel: NodeId, bias: NodeId) -> NodeId {
        self.push(Op::Conv3x3 {
            input,
            kernel,
            bias,
        })
    }

    pub fn max_pool2(&mut self, a: NodeId) -> NodeId {
        self.push(Op::MaxPool2(a))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu(a))
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Softmax(a))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Log(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        self.push(Op::Concat(parts.to_vec()))
    }

    pub fn flatten(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Flatten(a))
    }

    pub fn argmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Argmax(a))
    }

    /// `x W + b` with `b` added along the last axis.
    pub fn affine(&mut self, x: NodeId, weight: NodeId, bias: NodeId) -> NodeId {
        let xw = self.matmul(x, weight);
        self.add(xw, bias)
    }

    pub fn mark_output(&mut self, name: &str, node: NodeId) {
        self.outputs.insert(name.to_string(), node);
    }

    pub fn output_id(&self, name: &str) -> Option<NodeId> {
        self.outputs.get(name).copied()
    }

    pub fn leaf_id(&self, name: &str) -> Option<NodeId> {
        self.leaves.get(name).copied()
    }

    pub fn op(&self, id: NodeId) -> Option<&Op> {
        self.nodes.get(id.0).map(|n| &n.op)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Names of trainable leaves in creation order.
    pub fn param_names(&self) -> Vec<String> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Leaf {
                    name,
                    trainable: true,
                } => Some(name.clone()),
                _ => None,
            })
            .collect()
    }

    /// Cached value of a node from the last `evaluate`.
    pub fn value(&self, id: NodeId) -> Result<&Tensor, GraphError> {
        self.nodes
            .get(id.0)
            .ok_or(GraphError::UnknownNode(id.0))?
            .value
            .as_ref()
            .ok_or(GraphError::NotEvaluated(id.0))
    }

    /// Runs every node in topological order and returns the marked outputs.
    pub fn evaluate<'a, I>(&mut self, inputs: I) -> Result<BTreeMap<String, Tensor>, GraphError>
    where
        I: IntoIterator<Item = (&'a str, &'a Tensor)>,
    {
        let bound: HashMap<&str, &Tensor> = inputs.into_iter().collect();
        for node in &mut self.nodes {
            node.value = None;
        }
        for idx in 0..self.nodes.len() {
            let (value, switches) = self.forward_node(idx, &bound)?;
            if !value.is_finite() {
                return Err(GraphError::NonFinite {
                    node: idx,
                    op: self.nodes[idx].op.name(),
                });
            }
            let node = &mut self.nodes[idx];
            node.value = Some(value);
            node.switches = switches;
        }
        self.outputs
            .iter()
            .map(|(name, id)| Ok((name.clone(), self.value(*id)?.clone())))
            .collect()
    }

    fn shape_err(&self, idx: usize, detail: String) -> GraphError {
        GraphError::Shape {
            node: idx,
            op: self.nodes[idx].op.name(),
            detail,
        }
    }

    fn forward_node(
        &self,
        idx: usize,
        bound: &HashMap<&str, &Tensor>,
    ) -> Result<(Tensor, Vec<usize>), GraphError> {
        let val = |id: NodeId| self.value(id);
        let op = &self.nodes[idx].op;
        let out = match op {
            Op::Leaf { name, .. } => {
                let t = bound
                    .get(name.as_str())
                    .ok_or_else(|| GraphError::Unbound(name.clone()))?;
                (*t).clone()
            }
            Op::MatMul(a, b) => {
                let (a, b) = (val(*a)?, val(*b)?);
                match (a.shape(), b.shape()) {
                    ([m, k], [k2, n]) if k == k2 => {
                        Tensor::new(&[*m, *n], matmul(a.data(), b.data(), *m, *k, *n))
                            .expect("matmul shape")
                    }
                    (sa, sb) => {
                        return Err(self.shape_err(idx, format!("{sa:?} x {sb:?}")));
                    }
                }
            }
            Op::Conv3x3 {
                input,
                kernel,
                bias,
            } => {
                let (x, w, b) = (val(*input)?, val(*kernel)?, val(*bias)?);
                let dims = conv_dims(x.shape(), w.shape(), b.shape())
                    .map_err(|d| self.shape_err(idx, d))?;
                conv_forward(x.data(), w.data(), b.data(), dims)
            }
            Op::MaxPool2(a) => {
                let x = val(*a)?;
                match x.shape() {
                    [n, c, h, w] if h % 2 == 0 && w % 2 == 0 => {
                        let (out, switches) = pool_forward(x.data(), *n, *c, *h, *w);
                        return Ok((out, switches));
                    }
                    s => return Err(self.shape_err(idx, format!("cannot pool {s:?}"))),
                }
            }
            Op::Add(a, b) => {
                let (a, b) = (val(*a)?, val(*b)?);
                if a.shape() == b.shape() {
                    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
                    Tensor::new(a.shape(), data).expect("add shape")
                } else if b.rank() == 1 && a.shape().last() == Some(&b.len()) && !b.is_empty() {
                    let mut out = a.clone();
                    for row in out.data_mut().chunks_mut(b.len()) {
                        for (o, bias) in row.iter_mut().zip(b.data()) {
                            *o += bias;
                        }
                    }
                    out
                } else {
                    return Err(self.shape_err(
                        idx,
                        format!("{:?} + {:?}", a.shape(), b.shape()),
                    ));
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (val(*a)?, val(*b)?);
                if a.shape() != b.shape() {
                    return Err(self.shape_err(
                        idx,
                        format!("{:?} * {:?}", a.shape(), b.shape()),
                    ));
                }
                let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
                Tensor::new(a.shape(), data).expect("mul shape")
            }
            Op::Relu(a) => val(*a)?.map(|v| v.max(0.0)),
            Op::Softmax(a) => {
                let x = val(*a)?;
                let cols = last_dim(x).ok_or_else(|| self.shape_err(idx, "rank 0".into()))?;
                let mut out = x.clone();
                for row in out.data_mut().chunks_mut(cols) {
                    softmax_in_place(row);
                }
                out
            }
            Op::Log(a) => val(*a)?.map(f64::ln),
            Op::Mean(a) => {
                let x = val(*a)?;
                if x.is_empty() {
                    return Err(self.shape_err(idx, "mean of empty tensor".into()));
                }
                Tensor::scalar(x.sum() / x.len() as f64)
            }
            Op::Concat(parts) => {
                let tensors = parts.iter().map(|p| val(*p)).collect::<Result<Vec<_>, _>>()?;
                concat_last(&tensors).map_err(|d| self.shape_err(idx, d))?
            }
            Op::Flatten(a) => {
                let x = val(*a)?;
                if x.rank() == 0 {
                    return Err(self.shape_err(idx, "cannot flatten a scalar".into()));
                }
                let lead = x.shape()[0];
                let rest = x.shape()[1..].iter().product::<usize>();
                x.clone().reshape(&[lead, rest]).expect("flatten shape")
            }
            Op::Argmax(a) => {
                let x = val(*a)?;
                let cols = last_dim(x).ok_or_else(|| self.shape_err(idx, "rank 0".into()))?;
                let lead = &x.shape()[..x.rank() - 1];
                let data = x
                    .data()
                    .chunks(cols)
                    .map(|row| argmax(row) as f64)
                    .collect();
                Tensor::new(lead, data).expect("argmax shape")
            }
        };
        Ok((out, Vec::new()))
    }

    /// Reverse accumulation from a single output.
    pub fn backward(&self, output: NodeId, seed: &Tensor) -> Result<Gradients, GraphError> {
        self.backward_many(&[(output, seed)])
    }

    /// Reverse accumulation from several outputs, summing their seeds'
    /// contributions. Returns gradients for every leaf, trainable or not.
    pub fn backward_many(&self, seeds: &[(NodeId, &Tensor)]) -> Result<Gradients, GraphError> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (id, seed) in seeds {
            let out = self.value(*id)?;
            if out.shape() != seed.shape() {
                return Err(GraphError::SeedShape {
                    seed: seed.shape().to_vec(),
                    output: out.shape().to_vec(),
                });
            }
            accumulate(&mut grads[id.0], (*seed).clone());
        }
        for idx in (0..self.nodes.len()).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if let Op::Leaf { .. } = node.op {
                grads[idx] = Some(grad);
                continue;
            }
            for (input, g) in self.backward_node(idx, &grad)? {
                accumulate(&mut grads[input.0], g);
            }
        }
        let mut out = Gradients::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { name, .. } = &node.op {
                let g = match grads[idx].take() {
                    Some(g) => g,
                    None => Tensor::zeros(self.value(NodeId(idx))?.shape()),
                };
                out.insert(name.clone(), g);
            }
        }
        Ok(out)
    }

    fn backward_node(&self, idx: usize, grad: &Tensor) -> Result<Vec<(NodeId, Tensor)>, GraphError> {
        let node = &self.nodes[idx];
        let y = node.value.as_ref().ok_or(GraphError::NotEvaluated(idx))?;
        let val = |id: NodeId| self.value(id);
        let g = grad.data();
        Ok(match &node.op {
            Op::Leaf { .. } => Vec::new(),
            Op::MatMul(a, b) => {
                let (at, bt) = (val(*a)?, val(*b)?);
                let (m, k) = at.dims2().expect("matmul lhs");
                let n = bt.shape()[1];
                let (ga, gb) = matmul_backward(at.data(), bt.data(), g, m, k, n);
                vec![
                    (*a, Tensor::new(at.shape(), ga).expect("grad shape")),
                    (*b, Tensor::new(bt.shape(), gb).expect("grad shape")),
                ]
            }
            Op::Conv3x3 {
                input,
                kernel,
                bias,
            } => {
                let (x, w, b) = (val(*input)?, val(*kernel)?, val(*bias)?);
                let dims = conv_dims(x.shape(), w.shape(), b.shape())
                    .map_err(|d| self.shape_err(idx, d))?;
                let (gx, gw, gb) = conv_backward(x.data(), w.data(), g, dims);
                vec![
                    (*input, Tensor::new(x.shape(), gx).expect("grad shape")),
                    (*kernel, Tensor::new(w.shape(), gw).expect("grad shape")),
                    (*bias, Tensor::new(b.shape(), gb).expect("grad shape")),
                ]
            }
            Op::MaxPool2(a) => {
                let x = val(*a)?;
                let mut gx = vec![0.0; x.len()];
                for (o, &src) in node.switches.iter().enumerate() {
                    gx[src] += g[o];
                }
                vec![(*a, Tensor::new(x.shape(), gx).expect("grad shape"))]
            }
            Op::Add(a, b) => {
                let bt = val(*b)?;
                let gb = if bt.shape() == grad.shape() {
                    grad.clone()
                } else {
                    let mut sums = vec![0.0; bt.len()];
                    for row in g.chunks(bt.len()) {
                        for (s, v) in sums.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    Tensor::new(bt.shape(), sums).expect("grad shape")
                };
                vec![(*a, grad.clone()), (*b, gb)]
            }
            Op::Mul(a, b) => {
                let (at, bt) = (val(*a)?, val(*b)?);
                let ga = g.iter().zip(bt.data()).map(|(g, y)| g * y).collect();
                let gb = g.iter().zip(at.data()).map(|(g, x)| g * x).collect();
                vec![
                    (*a, Tensor::new(at.shape(), ga).expect("grad shape")),
                    (*b, Tensor::new(bt.shape(), gb).expect("grad shape")),
                ]
            }
            Op::Relu(a) => {
                let x = val(*a)?;
                let gx = g
                    .iter()
                    .zip(x.data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                vec![(*a, Tensor::new(x.shape(), gx).expect("grad shape"))]
            }
            Op::Softmax(a) => {
                let cols = last_dim(y).expect("softmax rank");
                let mut gx = vec![0.0; y.len()];
                for ((out, yr), gr) in gx
                    .chunks_mut(cols)
                    .zip(y.data().chunks(cols))
                    .zip(g.chunks(cols))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for ((o, y), g) in out.iter_mut().zip(yr).zip(gr) {
                        *o = y * (g - dot);
                    }
                }
                vec![(*a, Tensor::new(y.shape(), gx).expect("grad shape"))]
            }
            Op::Log(a) => {
                let x = val(*a)?;
                let gx = g.iter().zip(x.data()).map(|(g, x)| g / x).collect();
                vec![(*a, Tensor::new(x.shape(), gx).expect("grad shape"))]
            }
            Op::Mean(a) => {
                let x = val(*a)?;
                let each = g[0] / x.len() as f64;
                vec![(*a, Tensor::full(x.shape(), each))]
            }
            Op::Concat(parts) => {
                let widths = parts
                    .iter()
                    .map(|p| val(*p).map(|t| last_dim(t).unwrap_or(1)))
                    .collect::<Result<Vec<_>, _>>()?;
                let total: usize = widths.iter().sum();
                let mut out = Vec::with_capacity(parts.len());
                let mut offset = 0;
                for (p, w) in parts.iter().zip(&widths) {
                    let data = g
                        .chunks(total)
                        .flat_map(|row| row[offset..offset + w].iter().copied())
                        .collect();
                    out.push((*p, Tensor::new(val(*p)?.shape(), data).expect("grad shape")));
                    offset += w;
                }
                out
            }
            Op::Flatten(a) => {
                let x = val(*a)?;
                vec![(*a, grad.clone().reshape(x.shape()).expect("grad shape"))]
            }
            Op::Argmax(_) => {
                return Err(GraphError::Unsupported {
                    node: idx,
                    op: node.op.name(),
                })
            }
        })
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += v;
            }
        }
        None => *slot = Some(g),
    }
}

fn last_dim(t: &Tensor) -> Option<usize> {
    t.shape().last().copied().filter(|&c| c > 0)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn concat_last(parts: &[&Tensor]) -> Result<Tensor, String> {
    let first = parts.first().ok_or("nothing to concatenate")?;
    if first.rank() == 0 {
        return Err("cannot concatenate scalars".into());
    }
    let lead = &first.shape()[..first.rank() - 1];
    for p in parts {
        if p.rank() != first.rank() || &p.shape()[..p.rank() - 1] != lead {
            return Err(format!("{:?} vs {:?}", first.shape(), p.shape()));
        }
    }
    let widths: Vec<usize> = parts.iter().map(|p| p.shape()[p.rank() - 1]).collect();
    let rows: usize = lead.iter().product();
    let total: usize = widths.iter().sum();
    let mut data = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for (p, w) in parts.iter().zip(&widths) {
            data.extend_from_slice(&p.data()[r * w..(r + 1) * w]);
        }
    }
    let mut shape = lead.to_vec();
    shape.push(total);
    Ok(Tensor::new(&shape, data).expect("concat shape"))
}

/// Dot product over interleaved partial sums, which vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; LANES];
    let (a8, b8) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let tail: f64 = a8.remainder().iter().zip(b8.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in a8.zip(b8) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let [a0, a1, a2, a3, a4, a5, a6, a7] = acc;
    ((a0 + a4) + (a1 + a5)) + ((a2 + a6) + (a3 + a7)) + tail
}

fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let out = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, bv) in out.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
    c
}

fn matmul_backward(a: &[f64], b: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut ga = vec![0.0; m * k];
    let mut gb = vec![0.0; k * n];
    for i in 0..m {
        let gi = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            ga[i * k + p] = dot(gi, brow);
            let aip = a[i * k + p];
            if aip != 0.0 {
                for (o, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(gi) {
                    *o += aip * gv;
                }
            }
        }
    }
    (ga, gb)
}

#[derive(Debug, Clone, Copy)]
struct ConvDims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
}

fn conv_dims(x: &[usize], k: &[usize], b: &[usize]) -> Result<ConvDims, String> {
    match (x, k, b) {
        ([n, c, h, w], [o, c2, 3, 3], [o2]) if c == c2 && o == o2 => Ok(ConvDims {
            n: *n,
            c: *c,
            h: *h,
            w: *w,
            o: *o,
        }),
        _ => Err(format!("input {x:?}, kernel {k:?}, bias {b:?}")),
    }
}

/// Output range `[start, end)` along one axis whose tap `k` stays in bounds.
fn tap_range(k: usize, len: usize) -> (usize, usize) {
    // input index = out index + k - 1
    let lo = if k == 0 { 1 } else { 0 };
    let hi = if k == 2 { len.saturating_sub(1) } else { len };
    (lo, hi)
}

/// Unfolds one `[c, h, w]` image into `[c * 9, h * w]` zero-padded patches.
fn im2col(src: &[f64], c: usize, h: usize, w: usize, col: &mut [f64]) {
    let plane = h * w;
    col.fill(0.0);
    for ci in 0..c {
        let img = &src[ci * plane..(ci + 1) * plane];
        for ky in 0..3 {
            let (y0, y1) = tap_range(ky, h);
            for kx in 0..3 {
                let (x0, x1) = tap_range(kx, w);
                let row = &mut col[(ci * 9 + ky * 3 + kx) * plane..(ci * 9 + ky * 3 + kx + 1) * plane];
                for y in y0..y1 {
                    let s0 = (y + ky - 1) * w + x0 + kx - 1;
                    row[y * w + x0..y * w + x1].copy_from_slice(&img[s0..s0 + (x1 - x0)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`], accumulating into `dst`.
fn col2im(col: &[f64], c: usize, h: usize, w: usize, dst: &mut [f64]) {
    let plane = h * w;
    for ci in 0..c {
        let img = &mut dst[ci * plane..(ci + 1) * plane];
        for ky in 0..3 {
            let (y0, y1) = tap_range(ky, h);
            for kx in 0..3 {
                let (x0, x1) = tap_range(kx, w);
                let row = &col[(ci * 9 + ky * 3 + kx) * plane..(ci * 9 + ky * 3 + kx + 1) * plane];
                for y in y0..y1 {
                    let s0 = (y + ky - 1) * w + x0 + kx - 1;
                    for (d, v) in img[s0..s0 + (x1 - x0)].iter_mut().zip(&row[y * w + x0..y * w + x1]) {
                        *d += v;
                    }
                }
            }
        }
    }
}

const LANES: usize = 8;

/// `out[x] = init + sum_r coef[r] * rows[r][x]` over `rows` of length
/// `plane` stored back to back, accumulating in `r` order.
fn weighted_rows(coef: impl Fn(usize) -> f64, count: usize, rows: &[f64], plane: usize, init: f64, out: &mut [f64]) {
    let mut x0 = 0;
    while x0 + LANES <= plane {
        let mut acc = [init; LANES];
        for r in 0..count {
            let k = coef(r);
            let src = &rows[r * plane + x0..r * plane + x0 + LANES];
            for l in 0..LANES {
                acc[l] += k * src[l];
            }
        }
        out[x0..x0 + LANES].copy_from_slice(&acc);
        x0 += LANES;
    }
    for x in x0..plane {
        let mut acc = init;
        for r in 0..count {
            acc += coef(r) * rows[r * plane + x];
        }
        out[x] = acc;
    }
}

fn conv_forward(x: &[f64], w: &[f64], b: &[f64], d: ConvDims) -> Tensor {
    let ConvDims { n, c, h, w: wd, o } = d;
    let plane = h * wd;
    let taps = c * 9;
    let mut col = vec![0.0; taps * plane];
    let mut out = vec![0.0; n * o * plane];
    for ni in 0..n {
        im2col(&x[ni * c * plane..(ni + 1) * c * plane], c, h, wd, &mut col);
        let dst = &mut out[ni * o * plane..(ni + 1) * o * plane];
        for (oi, drow) in dst.chunks_mut(plane).enumerate() {
            let wrow = &w[oi * taps..(oi + 1) * taps];
            weighted_rows(|p| wrow[p], taps, &col, plane, b[oi], drow);
        }
    }
    Tensor::new(&[n, o, h, wd], out).expect("conv shape")
}

fn conv_backward(x: &[f64], w: &[f64], g: &[f64], d: ConvDims) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let ConvDims { n, c, h, w: wd, o } = d;
    let plane = h * wd;
    let taps = c * 9;
    let mut col = vec![0.0; taps * plane];
    let mut gcol = vec![0.0; taps * plane];
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; o];
    for ni in 0..n {
        im2col(&x[ni * c * plane..(ni + 1) * c * plane], c, h, wd, &mut col);
        let gimg = &g[ni * o * plane..(ni + 1) * o * plane];
        for (oi, grow) in gimg.chunks(plane).enumerate() {
            gb[oi] += grow.iter().sum::<f64>();
            for (p, crow) in col.chunks(plane).enumerate() {
                gw[oi * taps + p] += dot(grow, crow);
            }
        }
        for (p, gc) in gcol.chunks_mut(plane).enumerate() {
            weighted_rows(|oi| w[oi * taps + p], o, gimg, plane, 0.0, gc);
        }
        col2im(&gcol, c, h, wd, &mut gx[ni * c * plane..(ni + 1) * c * plane]);
    }
    (gx, gw, gb)
}

fn pool_forward(x: &[f64], n: usize, c: usize, h: usize, w: usize) -> (Tensor, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut switches = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = base + 2 * y * w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * w + 2 * xx + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                switches.push(best);
            }
        }
    }
    (
        Tensor::new(&[n, c, oh, ow], out).expect("pool shape"),
        switches,
    )
}
