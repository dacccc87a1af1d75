//! Wengert tape: every primitive applied through a [`Tape`] is recorded with
//! its inputs, so the forward pass can be replayed on fresh inputs and the
//! chain rule can be run in reverse.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::kernels::{self, ConvGeom};
use crate::{AutodiffError, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node recorded on a particular tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

impl Reduction {
    fn factor(self, rows: usize) -> f64 {
        match self {
            Reduction::Mean => 1.0 / rows as f64,
            Reduction::Sum => 1.0,
        }
    }
}

/// How a leaf entered the tape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Leaf {
    Input(usize),
    Param(String),
}

#[derive(Clone, Debug)]
enum Op {
    Input {
        slot: usize,
    },
    Param {
        name: String,
    },
    Constant,
    MatMul {
        a: usize,
        b: usize,
    },
    Conv2d {
        input: usize,
        weight: usize,
        padding: usize,
    },
    AddBias {
        x: usize,
        bias: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        factor: f64,
    },
    Relu {
        x: usize,
    },
    Reshape {
        x: usize,
        shape: Vec<usize>,
    },
    AvgPool2d {
        x: usize,
        size: usize,
    },
    SoftmaxCrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        reduction: Reduction,
    },
    KlDivergence {
        p: usize,
        q: usize,
        reduction: Reduction,
    },
    L2Norm {
        x: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Param { .. } => "param",
            Op::Constant => "constant",
            Op::MatMul { .. } => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::AddBias { .. } => "add_bias",
            Op::Add { .. } => "add",
            Op::Scale { .. } => "scale",
            Op::Relu { .. } => "relu",
            Op::Reshape { .. } => "reshape",
            Op::AvgPool2d { .. } => "avg_pool2d",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::KlDivergence { .. } => "kl_divergence",
            Op::L2Norm { .. } => "l2_norm",
        }
    }

    fn args(&self) -> Vec<usize> {
        match *self {
            Op::Input { .. } | Op::Param { .. } | Op::Constant => vec![],
            Op::MatMul { a, b } | Op::Add { a, b } => vec![a, b],
            Op::Conv2d { input, weight, .. } => vec![input, weight],
            Op::AddBias { x, bias } => vec![x, bias],
            Op::KlDivergence { p, q, .. } => vec![p, q],
            Op::Scale { x, .. } | Op::Relu { x } | Op::Reshape { x, .. } | Op::AvgPool2d { x, .. } | Op::L2Norm { x } => vec![x],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![logits],
        }
    }
}

/// Forward intermediates kept for the backward rule.
#[derive(Clone, Debug)]
enum Saved {
    Nothing,
    /// im2col buffers, one `[C·K·K, Ho·Wo]` block per batch item.
    Cols(Vec<f64>),
    LogProbs(Vec<f64>),
    Kl {
        lp: Vec<f64>,
        lq: Vec<f64>,
        row_kl: Vec<f64>,
    },
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    saved: Saved,
    requires_grad: bool,
}

/// Recorded computation. Nodes are stored in creation order, which is a
/// topological order because a primitive can only consume existing nodes.
#[derive(Clone, Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    n_inputs: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

type OpResult = Result<(Tensor, Saved), String>;

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            n_inputs: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Shapes the replayed inputs must have, in slot order.
    pub fn input_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = vec![Vec::new(); self.n_inputs];
        for node in &self.nodes {
            if let Op::Input { slot } = node.op {
                shapes[slot] = node.value.shape().to_vec();
            }
        }
        shapes
    }

    fn var(&self, index: usize) -> Var {
        Var { tape: self.id, index }
    }

    fn resolve(&self, v: Var) -> Result<usize, AutodiffError> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(AutodiffError::ForeignVar);
        }
        Ok(v.index)
    }

    fn push_leaf(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            saved: Saved::Nothing,
            requires_grad,
        });
        self.var(self.nodes.len() - 1)
    }

    /// Data input; replaced on every [`Tape::forward_eval`].
    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let slot = self.n_inputs;
        self.n_inputs += 1;
        self.push_leaf(Op::Input { slot }, value, requires_grad)
    }

    pub fn param(&mut self, name: impl Into<String>, value: Tensor, requires_grad: bool) -> Var {
        self.push_leaf(Op::Param { name: name.into() }, value, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(Op::Constant, value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.index].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    fn record(&mut self, op: Op) -> Result<Var, AutodiffError> {
        for &a in &op.args() {
            debug_assert!(a < self.nodes.len());
        }
        let index = self.nodes.len();
        let requires_grad = op.args().iter().any(|&a| self.nodes[a].requires_grad);
        let (value, saved) = eval(&op, &self.nodes).map_err(|detail| AutodiffError::Shape {
            index,
            primitive: op.name(),
            detail,
        })?;
        self.nodes.push(Node {
            op,
            value,
            saved,
            requires_grad,
        });
        Ok(self.var(index))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (a, b) = (self.resolve(a)?, self.resolve(b)?);
        self.record(Op::MatMul { a, b })
    }

    /// Stride-1 convolution of `[B, C, H, W]` with `[O, C, K, K]`, zero
    /// padded by `padding` pixels on every side.
    pub fn conv2d(&mut self, input: Var, weight: Var, padding: usize) -> Result<Var, AutodiffError> {
        let (input, weight) = (self.resolve(input)?, self.resolve(weight)?);
        self.record(Op::Conv2d { input, weight, padding })
    }

    /// Adds a per-channel bias along axis 1.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, AutodiffError> {
        let (x, bias) = (self.resolve(x)?, self.resolve(bias)?);
        self.record(Op::AddBias { x, bias })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (a, b) = (self.resolve(a)?, self.resolve(b)?);
        self.record(Op::Add { a, b })
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var, AutodiffError> {
        let x = self.resolve(x)?;
        self.record(Op::Scale { x, factor })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let x = self.resolve(x)?;
        self.record(Op::Relu { x })
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, AutodiffError> {
        let x = self.resolve(x)?;
        self.record(Op::Reshape { x, shape })
    }

    /// Collapses every axis after the first.
    pub fn flatten(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let shape = self.value(x).shape().to_vec();
        let batch = shape.first().copied().unwrap_or(1);
        let rest = shape.iter().skip(1).product();
        self.reshape(x, vec![batch, rest])
    }

    /// Non-overlapping `size x size` average pooling; trailing rows and
    /// columns that do not fill a window are dropped.
    pub fn avg_pool2d(&mut self, x: Var, size: usize) -> Result<Var, AutodiffError> {
        let x = self.resolve(x)?;
        self.record(Op::AvgPool2d { x, size })
    }

    /// Cross-entropy of `softmax(logits)` against integer labels, via
    /// log-sum-exp. Output is a one-element tensor.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize], reduction: Reduction) -> Result<Var, AutodiffError> {
        let logits = self.resolve(logits)?;
        self.record(Op::SoftmaxCrossEntropy {
            logits,
            labels: labels.to_vec(),
            reduction,
        })
    }

    /// `KL(softmax(p) || softmax(q))` row by row, reduced over rows.
    pub fn kl_divergence(&mut self, p: Var, q: Var, reduction: Reduction) -> Result<Var, AutodiffError> {
        let (p, q) = (self.resolve(p)?, self.resolve(q)?);
        self.record(Op::KlDivergence { p, q, reduction })
    }

    /// Euclidean norm of all entries.
    pub fn l2_norm(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let x = self.resolve(x)?;
        self.record(Op::L2Norm { x })
    }

    /// Re-runs every recorded primitive on new input values and returns the
    /// value of the last node. Parameters and constants keep their recorded
    /// values.
    pub fn forward_eval(&mut self, inputs: &[Tensor]) -> Result<Tensor, AutodiffError> {
        if inputs.len() != self.n_inputs {
            return Err(AutodiffError::InputCount {
                expected: self.n_inputs,
                got: inputs.len(),
            });
        }
        for index in 0..self.nodes.len() {
            let (done, rest) = self.nodes.split_at_mut(index);
            let node = &mut rest[0];
            match &node.op {
                Op::Input { slot } => {
                    let new = &inputs[*slot];
                    if new.shape() != node.value.shape() {
                        return Err(AutodiffError::Shape {
                            index,
                            primitive: "input",
                            detail: format!("slot {slot} expects shape {:?}, got {:?}", node.value.shape(), new.shape()),
                        });
                    }
                    node.value = new.clone();
                }
                Op::Param { .. } | Op::Constant => {}
                op => {
                    let (value, saved) = eval(op, done).map_err(|detail| AutodiffError::Shape {
                        index,
                        primitive: op.name(),
                        detail,
                    })?;
                    node.value = value;
                    node.saved = saved;
                }
            }
        }
        self.nodes.last().map(|n| n.value.clone()).ok_or(AutodiffError::EmptyTape)
    }

    /// Reverse sweep from a one-element `loss`. Every leaf recorded with
    /// `requires_grad` gets an entry, zero when the loss does not depend on it.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AutodiffError> {
        let root = self.resolve(loss)?;
        let loss_shape = self.nodes[root].value.shape();
        if self.nodes[root].value.numel() != 1 {
            return Err(AutodiffError::NonScalarLoss {
                shape: loss_shape.to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root + 1];
        if self.nodes[root].requires_grad {
            grads[root] = Some(vec![1.0]);
        }
        for index in (0..=root).rev() {
            let Some(g) = grads[index].take() else {
                continue;
            };
            let node = &self.nodes[index];
            if matches!(node.op, Op::Input { .. } | Op::Param { .. }) {
                grads[index] = Some(g);
                continue;
            }
            backprop(node, &g, &self.nodes, &mut grads);
        }

        let mut entries = Vec::new();
        for (index, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad {
                continue;
            }
            let leaf = match &node.op {
                Op::Input { slot } => Leaf::Input(*slot),
                Op::Param { name } => Leaf::Param(name.clone()),
                _ => continue,
            };
            let shape = node.value.shape().to_vec();
            let data = grads
                .get_mut(index)
                .and_then(Option::take)
                .unwrap_or_else(|| vec![0.0; node.value.numel()]);
            entries.push(GradEntry {
                var: self.var(index),
                leaf,
                grad: Tensor::new(shape, data)?,
            });
        }
        Ok(Gradients { entries })
    }
}

#[derive(Clone, Debug)]
pub struct GradEntry {
    pub var: Var,
    pub leaf: Leaf,
    pub grad: Tensor,
}

/// Gradients of a scalar loss with respect to every differentiable leaf.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    entries: Vec<GradEntry>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.entries.iter().find(|e| e.var == v).map(|e| &e.grad)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|e| matches!(&e.leaf, Leaf::Param(n) if n == name))
            .map(|e| &e.grad)
    }

    pub fn input(&self, slot: usize) -> Option<&Tensor> {
        self.entries.iter().find(|e| e.leaf == Leaf::Input(slot)).map(|e| &e.grad)
    }

    pub fn entries(&self) -> &[GradEntry] {
        &self.entries
    }

    pub fn into_input(self, slot: usize) -> Option<Tensor> {
        self.entries.into_iter().find(|e| e.leaf == Leaf::Input(slot)).map(|e| e.grad)
    }
}

fn dims<const N: usize>(t: &Tensor, what: &str) -> Result<[usize; N], String> {
    t.shape()
        .try_into()
        .map_err(|_| format!("{what} must be {N}-D, got shape {:?}", t.shape()))
}

fn conv_geom(x: &Tensor, w: &Tensor, padding: usize) -> Result<(usize, usize, ConvGeom), String> {
    let [batch, channels, height, width] = dims::<4>(x, "conv input")?;
    let [out_ch, w_ch, kh, kw] = dims::<4>(w, "conv weight")?;
    if w_ch != channels || kh != kw || kh == 0 {
        return Err(format!("weight {:?} incompatible with input {:?}", w.shape(), x.shape()));
    }
    if height + 2 * padding < kh || width + 2 * padding < kw {
        return Err(format!("kernel {kh} larger than padded input {height}x{width}"));
    }
    let geom = ConvGeom {
        channels,
        height,
        width,
        kernel: kh,
        padding,
        out_h: height + 2 * padding - kh + 1,
        out_w: width + 2 * padding - kw + 1,
    };
    Ok((batch, out_ch, geom))
}

fn reduced(rows: &[f64], reduction: Reduction) -> Tensor {
    let total: f64 = rows.iter().sum();
    Tensor::scalar(total * reduction.factor(rows.len()))
}

fn eval(op: &Op, nodes: &[Node]) -> OpResult {
    let val = |i: usize| &nodes[i].value;
    match op {
        Op::Input { .. } | Op::Param { .. } | Op::Constant => unreachable!("leaves are not evaluated"),
        Op::MatMul { a, b } => {
            let [m, k] = dims::<2>(val(*a), "lhs")?;
            let [k2, n] = dims::<2>(val(*b), "rhs")?;
            if k != k2 {
                return Err(format!("inner dimensions differ: [{m}, {k}] x [{k2}, {n}]"));
            }
            let mut out = vec![0.0; m * n];
            kernels::gemm(m, k, n, val(*a).data(), false, val(*b).data(), false, 0.0, &mut out);
            Ok((Tensor::new(vec![m, n], out).unwrap(), Saved::Nothing))
        }
        Op::Conv2d { input, weight, padding } => {
            let (x, w) = (val(*input), val(*weight));
            let (batch, out_ch, g) = conv_geom(x, w, *padding)?;
            let (plen, olen) = (g.patch_len(), g.out_len());
            let img_len = g.channels * g.height * g.width;
            // Columns of the whole batch side by side: [C·K·K, B·Ho·Wo].
            let span = batch * olen;
            let mut cols = vec![0.0; plen * span];
            for b in 0..batch {
                kernels::im2col(&x.data()[b * img_len..(b + 1) * img_len], &g, &mut cols[b * olen..], span);
            }
            let mut wide = vec![0.0; out_ch * span];
            kernels::gemm(out_ch, plen, span, w.data(), false, &cols, false, 0.0, &mut wide);
            let out = kernels::unfold_batch(&wide, out_ch, batch, olen);
            let saved = if nodes[*weight].requires_grad {
                Saved::Cols(cols)
            } else {
                Saved::Nothing
            };
            let shape = vec![batch, out_ch, g.out_h, g.out_w];
            Ok((Tensor::new(shape, out).unwrap(), saved))
        }
        Op::AddBias { x, bias } => {
            let (x, bias) = (val(*x), val(*bias));
            if x.shape().len() < 2 || bias.shape() != [x.shape()[1]] {
                return Err(format!("bias {:?} does not match axis 1 of {:?}", bias.shape(), x.shape()));
            }
            let channels = x.shape()[1];
            let inner: usize = x.shape()[2..].iter().product();
            let mut out = x.data().to_vec();
            for (i, chunk) in out.chunks_mut(inner).enumerate() {
                let b = bias.data()[i % channels];
                for v in chunk {
                    *v += b;
                }
            }
            Ok((Tensor::new(x.shape().to_vec(), out).unwrap(), Saved::Nothing))
        }
        Op::Add { a, b } => {
            let (a, b) = (val(*a), val(*b));
            if a.shape() != b.shape() {
                return Err(format!("shapes differ: {:?} vs {:?}", a.shape(), b.shape()));
            }
            let out = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
            Ok((Tensor::new(a.shape().to_vec(), out).unwrap(), Saved::Nothing))
        }
        Op::Scale { x, factor } => {
            let x = val(*x);
            let out = x.data().iter().map(|v| v * factor).collect();
            Ok((Tensor::new(x.shape().to_vec(), out).unwrap(), Saved::Nothing))
        }
        Op::Relu { x } => {
            let x = val(*x);
            let out = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
            Ok((Tensor::new(x.shape().to_vec(), out).unwrap(), Saved::Nothing))
        }
        Op::Reshape { x, shape } => {
            let x = val(*x);
            let n: usize = shape.iter().product();
            if n != x.numel() {
                return Err(format!("cannot reshape {:?} into {:?}", x.shape(), shape));
            }
            Ok((Tensor::new(shape.clone(), x.data().to_vec()).unwrap(), Saved::Nothing))
        }
        Op::AvgPool2d { x, size } => {
            let x = val(*x);
            let [batch, channels, h, w] = dims::<4>(x, "pool input")?;
            let s = *size;
            if s == 0 || h < s || w < s {
                return Err(format!("window {s} does not fit {h}x{w}"));
            }
            let (oh, ow) = (h / s, w / s);
            let inv = 1.0 / (s * s) as f64;
            let mut out = vec![0.0; batch * channels * oh * ow];
            for (plane, dst) in x.data().chunks(h * w).zip(out.chunks_mut(oh * ow)) {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for dy in 0..s {
                            let row = &plane[(oy * s + dy) * w + ox * s..][..s];
                            acc += row.iter().sum::<f64>();
                        }
                        dst[oy * ow + ox] = acc * inv;
                    }
                }
            }
            Ok((Tensor::new(vec![batch, channels, oh, ow], out).unwrap(), Saved::Nothing))
        }
        Op::SoftmaxCrossEntropy { logits, labels, reduction } => {
            let z = val(*logits);
            let [rows, classes] = dims::<2>(z, "logits")?;
            if labels.len() != rows {
                return Err(format!("{} labels for {rows} rows", labels.len()));
            }
            if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
                return Err(format!("label {bad} out of range for {classes} classes"));
            }
            let mut lp = vec![0.0; rows * classes];
            let mut row_loss = vec![0.0; rows];
            for r in 0..rows {
                let out = &mut lp[r * classes..(r + 1) * classes];
                kernels::log_softmax_row(&z.data()[r * classes..(r + 1) * classes], out);
                row_loss[r] = -out[labels[r]];
            }
            Ok((reduced(&row_loss, *reduction), Saved::LogProbs(lp)))
        }
        Op::KlDivergence { p, q, reduction } => {
            let (p, q) = (val(*p), val(*q));
            let [rows, classes] = dims::<2>(p, "p logits")?;
            if q.shape() != p.shape() {
                return Err(format!("shapes differ: {:?} vs {:?}", p.shape(), q.shape()));
            }
            let mut lp = vec![0.0; rows * classes];
            let mut lq = vec![0.0; rows * classes];
            let mut row_kl = vec![0.0; rows];
            for r in 0..rows {
                let span = r * classes..(r + 1) * classes;
                kernels::log_softmax_row(&p.data()[span.clone()], &mut lp[span.clone()]);
                kernels::log_softmax_row(&q.data()[span.clone()], &mut lq[span.clone()]);
                row_kl[r] = lp[span.clone()].iter().zip(&lq[span]).map(|(a, b)| a.exp() * (a - b)).sum();
            }
            let value = reduced(&row_kl, *reduction);
            Ok((value, Saved::Kl { lp, lq, row_kl }))
        }
        Op::L2Norm { x } => {
            let norm = val(*x).data().iter().map(|v| v * v).sum::<f64>().sqrt();
            Ok((Tensor::scalar(norm), Saved::Nothing))
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], index: usize, contribution: Vec<f64>) {
    match &mut grads[index] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        slot => *slot = Some(contribution),
    }
}

fn backprop(node: &Node, g: &[f64], nodes: &[Node], grads: &mut [Option<Vec<f64>>]) {
    let rg = |i: usize| nodes[i].requires_grad;
    let val = |i: usize| &nodes[i].value;
    match &node.op {
        Op::Input { .. } | Op::Param { .. } | Op::Constant => {}
        Op::MatMul { a, b } => {
            let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
            let n = val(*b).shape()[1];
            if rg(*a) {
                let mut da = vec![0.0; m * k];
                kernels::gemm(m, n, k, g, false, val(*b).data(), true, 0.0, &mut da);
                accumulate(grads, *a, da);
            }
            if rg(*b) {
                let mut db = vec![0.0; k * n];
                kernels::gemm(k, m, n, val(*a).data(), true, g, false, 0.0, &mut db);
                accumulate(grads, *b, db);
            }
        }
        Op::Conv2d { input, weight, padding } => {
            let (x, w) = (val(*input), val(*weight));
            let (batch, out_ch, geom) = conv_geom(x, w, *padding).expect("validated on forward");
            let (plen, olen) = (geom.patch_len(), geom.out_len());
            let span = batch * olen;
            let wide = kernels::fold_batch(g, out_ch, batch, olen);
            if rg(*weight) {
                let Saved::Cols(cols) = &node.saved else {
                    unreachable!("conv weight requiring grad keeps its columns")
                };
                let mut dw = vec![0.0; out_ch * plen];
                kernels::gemm(out_ch, span, plen, &wide, false, cols, true, 0.0, &mut dw);
                accumulate(grads, *weight, dw);
            }
            if rg(*input) {
                let img_len = geom.channels * geom.height * geom.width;
                let mut dx = vec![0.0; batch * img_len];
                let mut dcols = vec![0.0; plen * span];
                kernels::gemm(plen, out_ch, span, w.data(), true, &wide, false, 0.0, &mut dcols);
                for b in 0..batch {
                    kernels::col2im(&dcols[b * olen..], &geom, &mut dx[b * img_len..(b + 1) * img_len], span);
                }
                accumulate(grads, *input, dx);
            }
        }
        Op::AddBias { x, bias } => {
            if rg(*x) {
                accumulate(grads, *x, g.to_vec());
            }
            if rg(*bias) {
                let shape = val(*x).shape();
                let channels = shape[1];
                let inner: usize = shape[2..].iter().product();
                let mut db = vec![0.0; channels];
                for (i, chunk) in g.chunks(inner).enumerate() {
                    db[i % channels] += chunk.iter().sum::<f64>();
                }
                accumulate(grads, *bias, db);
            }
        }
        Op::Add { a, b } => {
            if rg(*a) {
                accumulate(grads, *a, g.to_vec());
            }
            if rg(*b) {
                accumulate(grads, *b, g.to_vec());
            }
        }
        Op::Scale { x, factor } => {
            if rg(*x) {
                accumulate(grads, *x, g.iter().map(|v| v * factor).collect());
            }
        }
        Op::Relu { x } => {
            if rg(*x) {
                let dx = val(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                accumulate(grads, *x, dx);
            }
        }
        Op::Reshape { x, .. } => {
            if rg(*x) {
                accumulate(grads, *x, g.to_vec());
            }
        }
        Op::AvgPool2d { x, size } => {
            if rg(*x) {
                let [_, _, h, w]: [usize; 4] = val(*x).shape().try_into().unwrap();
                let s = *size;
                let (oh, ow) = (h / s, w / s);
                let inv = 1.0 / (s * s) as f64;
                let mut dx = vec![0.0; val(*x).numel()];
                for (plane, gp) in dx.chunks_mut(h * w).zip(g.chunks(oh * ow)) {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let share = gp[oy * ow + ox] * inv;
                            for dy in 0..s {
                                for v in &mut plane[(oy * s + dy) * w + ox * s..][..s] {
                                    *v += share;
                                }
                            }
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
        }
        Op::SoftmaxCrossEntropy { logits, labels, reduction } => {
            if rg(*logits) {
                let Saved::LogProbs(lp) = &node.saved else { unreachable!() };
                let rows = labels.len();
                let classes = lp.len() / rows.max(1);
                let scale = g[0] * reduction.factor(rows);
                let mut dz: Vec<f64> = lp.iter().map(|l| l.exp() * scale).collect();
                for (r, &label) in labels.iter().enumerate() {
                    dz[r * classes + label] -= scale;
                }
                accumulate(grads, *logits, dz);
            }
        }
        Op::KlDivergence { p, q, reduction } => {
            let Saved::Kl { lp, lq, row_kl } = &node.saved else {
                unreachable!()
            };
            let rows = row_kl.len();
            let classes = lp.len() / rows.max(1);
            let scale = g[0] * reduction.factor(rows);
            if rg(*p) {
                let mut dp = vec![0.0; lp.len()];
                for r in 0..rows {
                    for c in 0..classes {
                        let i = r * classes + c;
                        dp[i] = scale * lp[i].exp() * ((lp[i] - lq[i]) - row_kl[r]);
                    }
                }
                accumulate(grads, *p, dp);
            }
            if rg(*q) {
                let dq = lp.iter().zip(lq).map(|(a, b)| scale * (b.exp() - a.exp())).collect();
                accumulate(grads, *q, dq);
            }
        }
        Op::L2Norm { x } => {
            if rg(*x) {
                let norm = node.value.data()[0];
                let dx = if norm > 0.0 {
                    val(*x).data().iter().map(|v| g[0] * v / norm).collect()
                } else {
                    vec![0.0; val(*x).numel()]
                };
                accumulate(grads, *x, dx);
            }
        }
    }
}
