//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Each operation appends
//! a node holding its output value and whatever it needs for its backward
//! rule, so node order is a topological order and [`Graph::backward`] is a
//! single reverse sweep.
//!
//! Subgradient conventions: `abs'(0) = 0`, `relu'(0) = 0`, and max/min
//! reductions route the gradient to the lowest-index extremum on ties.
//!
//! ```
//! use mmf_osr::autograd::Graph;
//! use mmf_osr::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 3.0]).unwrap());
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap().data(), &[2.0, -4.0, 6.0]);
//! ```

pub(crate) mod kernels;

use std::fmt;
use std::rc::Rc;

use crate::tensor::{axis_split, broadcast_shape, for_each_broadcast, sum_to_shape, Result, Tensor, TensorError};
use kernels::{Layout, Window};

/// Handle to a node on a [`Graph`]. Only meaningful for the graph that made it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for [`Graph::custom`]: receives the output gradient, the
/// input values and the output value, and returns one gradient per input.
pub type BackwardFn = Rc<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Tensor>>;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Abs(Var),
    Relu(Var),
    MatMul(Var, Var),
    Reshape(Var),
    Pad2d {
        x: Var,
        top: usize,
        left: usize,
    },
    Conv2d {
        x: Var,
        kernel: Var,
        win: Window,
        cols: Vec<f64>,
    },
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    Sum {
        x: Var,
        axis: Option<usize>,
        scale: f64,
    },
    BatchNorm {
        x: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        inner: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    PairwiseSqDist(Var),
    Custom {
        inputs: Vec<Var>,
        backward: BackwardFn,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Abs(..) => "abs",
            Op::Relu(..) => "relu",
            Op::MatMul(..) => "matmul",
            Op::Reshape(..) => "reshape",
            Op::Pad2d { .. } => "pad2d",
            Op::Conv2d { .. } => "conv2d",
            Op::Gather { .. } => "gather",
            Op::Sum { .. } => "sum",
            Op::BatchNorm { .. } => "batch_norm",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::PairwiseSqDist(..) => "pairwise_sq_dist",
            Op::Custom { .. } => "custom",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Per-channel statistics of one batch-normalization forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
}

/// Operation tape. See the [module docs](self).
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list()
            .entries(self.nodes.iter().map(|n| (n.op.name(), n.value.shape())))
            .finish()
    }
}

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

    /// A differentiable input; its gradient is readable after [`backward`](Self::backward).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_node(value, Op::Leaf, true)
    }

    /// A constant input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push_node(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_node(value, op, rg)
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, Vec<usize>)> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out = broadcast_shape(op, &sa, &sb)?;
        let mut data = vec![0.0; out.iter().product()];
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        for_each_broadcast(&sa, &sb, &out, |o, i, j| data[o] = f(va[i], vb[j]));
        Ok((Tensor::new(out.clone(), data)?, out))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x * c);
        self.push(t, Op::Scale(a, c), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x + c);
        self.push(t, Op::Offset(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::abs);
        self.push(t, Op::Abs(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(t, Op::Relu(a), &[a])
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.value(a).data(), Layout::Plain, self.value(b).data(), Layout::Plain, &mut out, false);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    /// Collapses every axis after the first: `[N, ...] -> [N, rest]`.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        let n = s.first().copied().unwrap_or(1);
        let rest = s.iter().skip(1).product();
        self.reshape(a, vec![n, rest])
    }

    /// Zero-pads the last two axes of a `[N, C, H, W]` tensor.
    pub fn pad2d(&mut self, a: Var, top: usize, bottom: usize, left: usize, right: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(TensorError::Invalid {
                op: "pad2d",
                msg: format!("expected [N, C, H, W], got {s:?}"),
            });
        }
        let (h, w) = (s[2], s[3]);
        let (ph, pw) = (h + top + bottom, w + left + right);
        let src = self.value(a).data();
        let mut out = vec![0.0; s[0] * s[1] * ph * pw];
        for nc in 0..s[0] * s[1] {
            for y in 0..h {
                let d = (nc * ph + y + top) * pw + left;
                out[d..d + w].copy_from_slice(&src[(nc * h + y) * w..(nc * h + y + 1) * w]);
            }
        }
        let t = Tensor::new(vec![s[0], s[1], ph, pw], out)?;
        Ok(self.push(t, Op::Pad2d { x: a, top, left }, &[a]))
    }

    /// Cross-correlation of `[N, C, H, W]` input with `[O, C, KH, KW]` kernels.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if sx.len() != 4 || sk.len() != 4 || sx[1] != sk[1] || stride == 0 {
            return Err(TensorError::ShapeMismatch { op: "conv2d", lhs: sx, rhs: sk });
        }
        if sk[2] > sx[2] + 2 * padding || sk[3] > sx[3] + 2 * padding {
            return Err(TensorError::WindowTooLarge {
                op: "conv2d",
                window: sk[2..].to_vec(),
                input: vec![sx[2] + 2 * padding, sx[3] + 2 * padding],
            });
        }
        let win = Window { n: sx[0], c: sx[1], h: sx[2], w: sx[3], kh: sk[2], kw: sk[3], sh: stride, sw: stride, pad: padding };
        let cols = kernels::im2col(self.value(x).data(), &win);
        let (rows, plen, o) = (win.patches(), win.patch_len(), sk[0]);
        // [rows, plen] x [o, plen]^T -> [rows, o]
        let mut prod = vec![0.0; rows * o];
        kernels::gemm(rows, plen, o, &cols, Layout::Plain, self.value(kernel).data(), Layout::Transposed, &mut prod, false);
        let (oh, ow) = (win.out_h(), win.out_w());
        let mut out = vec![0.0; win.n * o * oh * ow];
        let hw = oh * ow;
        for n in 0..win.n {
            for p in 0..hw {
                for c in 0..o {
                    out[(n * o + c) * hw + p] = prod[(n * hw + p) * o + c];
                }
            }
        }
        let t = Tensor::new(vec![win.n, o, oh, ow], out)?;
        Ok(self.push(t, Op::Conv2d { x, kernel, win, cols }, &[x, kernel]))
    }

    /// Max pooling over the last two axes of `[N, C, H, W]`, no padding.
    pub fn max_pool2d(&mut self, x: Var, kernel: (usize, usize), stride: (usize, usize)) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || stride.0 == 0 || stride.1 == 0 {
            return Err(TensorError::Invalid {
                op: "max_pool2d",
                msg: format!("expected [N, C, H, W] and nonzero stride, got {s:?} / {stride:?}"),
            });
        }
        if kernel.0 > s[2] || kernel.1 > s[3] {
            return Err(TensorError::WindowTooLarge {
                op: "max_pool2d",
                window: vec![kernel.0, kernel.1],
                input: s[2..].to_vec(),
            });
        }
        let win = Window { n: s[0], c: s[1], h: s[2], w: s[3], kh: kernel.0, kw: kernel.1, sh: stride.0, sw: stride.1, pad: 0 };
        let (out, arg) = kernels::max_pool(self.value(x).data(), &win);
        let t = Tensor::new(vec![s[0], s[1], win.out_h(), win.out_w()], out)?;
        Ok(self.push(t, Op::Gather { x, idx: arg }, &[x]))
    }

    /// Picks entries of `x` by flat index into a tensor of `shape`. The
    /// gradient scatters back (adding on repeated indices).
    pub fn gather(&mut self, x: Var, idx: Vec<usize>, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let len = self.value(x).len();
        if let Some(&bad) = idx.iter().find(|&&i| i >= len) {
            return Err(TensorError::Invalid {
                op: "gather",
                msg: format!("index {bad} out of bounds for {len} elements"),
            });
        }
        let src = self.value(x).data();
        let data = idx.iter().map(|&i| src[i]).collect();
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::Gather { x, idx }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        self.push(t, Op::Sum { x, axis: None, scale: 1.0 }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let t = Tensor::scalar(self.value(x).sum() / n);
        self.push(t, Op::Sum { x, axis: None, scale: 1.0 / n }, &[x])
    }

    /// Sum along `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, "sum_axis", false)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, "mean_axis", true)
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, op: &'static str, mean: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis, op)?;
        let scale = if mean { 1.0 / len.max(1) as f64 } else { 1.0 };
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += src[(o * len + k) * inner + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= scale);
        let mut oshape = shape;
        oshape.remove(axis);
        let t = Tensor::new(oshape, out)?;
        Ok(self.push(t, Op::Sum { x, axis: Some(axis), scale }, &[x]))
    }

    /// Largest entry overall.
    pub fn max(&mut self, x: Var) -> Var {
        self.extreme_all(x, |c, b| c > b)
    }

    /// Smallest entry overall.
    pub fn min(&mut self, x: Var) -> Var {
        self.extreme_all(x, |c, b| c < b)
    }

    fn extreme_all(&mut self, x: Var, better: impl Fn(f64, f64) -> bool) -> Var {
        let d = self.value(x).data();
        let mut best = 0;
        for (i, &v) in d.iter().enumerate().skip(1) {
            if better(v, d[best]) {
                best = i;
            }
        }
        let t = Tensor::scalar(d[best]);
        self.push(t, Op::Gather { x, idx: vec![best] }, &[x])
    }

    /// Maximum along `axis`, removing it.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let arg = self.value(x).argmax(axis)?;
        self.select_along(x, axis, arg)
    }

    /// Minimum along `axis`, removing it.
    pub fn min_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let arg = self.value(x).argmin(axis)?;
        self.select_along(x, axis, arg)
    }

    fn select_along(&mut self, x: Var, axis: usize, arg: Vec<usize>) -> Result<Var> {
        let mut shape = self.shape(x).to_vec();
        let (_, len, inner) = axis_split(&shape, axis, "select")?;
        let idx = arg
            .iter()
            .enumerate()
            .map(|(j, &k)| {
                let (o, i) = (j / inner, j % inner);
                (o * len + k) * inner + i
            })
            .collect();
        shape.remove(axis);
        self.gather(x, idx, shape)
    }

    /// Index of the maximum along `axis` (not differentiable).
    pub fn argmax(&self, x: Var, axis: usize) -> Result<Vec<usize>> {
        self.value(x).argmax(axis)
    }

    pub fn argmin(&self, x: Var, axis: usize) -> Result<Vec<usize>> {
        self.value(x).argmin(axis)
    }

    /// Normalizes every channel (axis 1) of `[N, C]` or `[N, C, H, W]` input
    /// to zero mean and unit variance using the statistics of this batch.
    /// The affine part is left to the caller.
    pub fn batch_norm(&mut self, x: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || s[0] == 0 {
            return Err(TensorError::Invalid {
                op: "batch_norm",
                msg: format!("expected [N, C, ...] with N >= 1, got {s:?}"),
            });
        }
        let (n, c) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        let m = (n * inner) as f64;
        let src = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * inner;
                mean[ch] += src[base..base + inner].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * inner;
                var[ch] += src[base..base + inner].iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= m);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; src.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * inner;
                for i in base..base + inner {
                    xhat[i] = (src[i] - mean[ch]) * inv_std[ch];
                }
            }
        }
        let t = Tensor::new(s, xhat.clone())?;
        let v = self.push(t, Op::BatchNorm { x, xhat, inv_std, inner }, &[x]);
        Ok((v, BatchStats { mean, var }))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`, computed with
    /// the log-sum-exp shift.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: s,
                rhs: vec![labels.len()],
            });
        }
        let c = s[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(TensorError::Invalid {
                op: "cross_entropy",
                msg: format!("label {bad} out of range for {c} classes"),
            });
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; z.len()];
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = &z[r * c..(r + 1) * c];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let lse = mx + sum.ln();
            total += lse - row[y];
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
        }
        let t = Tensor::scalar(total / labels.len() as f64);
        Ok(self.push(t, Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, &[logits]))
    }

    /// `[N, F] -> [N, N]` matrix of squared Euclidean distances between rows.
    pub fn pairwise_sq_dist(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(TensorError::Invalid {
                op: "pairwise_sq_dist",
                msg: format!("expected [N, F], got {s:?}"),
            });
        }
        let (n, f) = (s[0], s[1]);
        let d = self.value(x).data();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let v: f64 = (0..f).map(|k| (d[i * f + k] - d[j * f + k]).powi(2)).sum();
                out[i * n + j] = v;
                out[j * n + i] = v;
            }
        }
        let t = Tensor::new(vec![n, n], out)?;
        Ok(self.push(t, Op::PairwiseSqDist(x), &[x]))
    }

    /// Records a user-defined operation with a precomputed output and its
    /// backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: BackwardFn) -> Var {
        self.push(value, Op::Custom { inputs: inputs.to_vec(), backward }, inputs)
    }

    /// Accumulates `d loss / d leaf` into every differentiable leaf reachable
    /// from `loss`. Calling it again without rebuilding the graph adds to the
    /// stored gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::ones(lv.shape().to_vec()));
        let mut leaf_grads = Vec::new();

        for id in (0..=loss.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let nodes = &self.nodes;
            let mut send = |v: Var, t: Tensor| {
                if nodes[v.0].requires_grad {
                    accumulate(&mut adj[v.0], t);
                }
            };
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => leaf_grads.push((id, g)),
                Op::Add(a, b) => {
                    send(*a, sum_to_shape(&g, val(*a).shape()));
                    send(*b, sum_to_shape(&g, val(*b).shape()));
                }
                Op::Sub(a, b) => {
                    send(*a, sum_to_shape(&g, val(*a).shape()));
                    send(*b, sum_to_shape(&g, val(*b).shape()).map(|x| -x));
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let mut ga = vec![0.0; ta.len()];
                    let mut gb = vec![0.0; tb.len()];
                    let gd = g.data();
                    for_each_broadcast(ta.shape(), tb.shape(), g.shape(), |o, i, j| {
                        ga[i] += gd[o] * tb.data()[j];
                        gb[j] += gd[o] * ta.data()[i];
                    });
                    let (sa, sb) = (ta.shape().to_vec(), tb.shape().to_vec());
                    send(*a, Tensor::new(sa, ga)?);
                    send(*b, Tensor::new(sb, gb)?);
                }
                Op::Scale(a, c) => send(*a, g.map(|x| x * c)),
                Op::Offset(a) => send(*a, g),
                Op::Abs(a) => send(*a, zip_map(&g, val(*a), |g, x| if x > 0.0 { g } else if x < 0.0 { -g } else { 0.0 })),
                Op::Relu(a) => send(*a, zip_map(&g, val(*a), |g, x| if x > 0.0 { g } else { 0.0 })),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    if nodes[a.0].requires_grad {
                        let mut ga = vec![0.0; m * k];
                        kernels::gemm(m, n, k, g.data(), Layout::Plain, tb.data(), Layout::Transposed, &mut ga, false);
                        send(*a, Tensor::new(vec![m, k], ga)?);
                    }
                    if nodes[b.0].requires_grad {
                        let mut gb = vec![0.0; k * n];
                        kernels::gemm(k, m, n, ta.data(), Layout::Transposed, g.data(), Layout::Plain, &mut gb, false);
                        send(*b, Tensor::new(vec![k, n], gb)?);
                    }
                }
                Op::Reshape(a) => send(*a, g.with_shape(val(*a).shape().to_vec())),
                Op::Pad2d { x, top, left } => {
                    let s = val(*x).shape().to_vec();
                    let (ph, pw) = (g.shape()[2], g.shape()[3]);
                    let (h, w) = (s[2], s[3]);
                    let mut gx = vec![0.0; val(*x).len()];
                    for nc in 0..s[0] * s[1] {
                        for y in 0..h {
                            let src = (nc * ph + y + top) * pw + left;
                            gx[(nc * h + y) * w..(nc * h + y + 1) * w].copy_from_slice(&g.data()[src..src + w]);
                        }
                    }
                    send(*x, Tensor::new(s, gx)?);
                }
                Op::Conv2d { x, kernel, win, cols } => {
                    let (rows, plen) = (win.patches(), win.patch_len());
                    let o = val(*kernel).shape()[0];
                    let hw = win.out_h() * win.out_w();
                    // [N, O, OH, OW] -> [rows, O]
                    let mut gm = vec![0.0; rows * o];
                    for n in 0..win.n {
                        for c in 0..o {
                            for p in 0..hw {
                                gm[(n * hw + p) * o + c] = g.data()[(n * o + c) * hw + p];
                            }
                        }
                    }
                    if nodes[kernel.0].requires_grad {
                        let mut gk = vec![0.0; o * plen];
                        kernels::gemm(o, rows, plen, &gm, Layout::Transposed, cols, Layout::Plain, &mut gk, false);
                        send(*kernel, Tensor::new(val(*kernel).shape().to_vec(), gk)?);
                    }
                    if nodes[x.0].requires_grad {
                        let mut gc = vec![0.0; rows * plen];
                        kernels::gemm(rows, o, plen, &gm, Layout::Plain, val(*kernel).data(), Layout::Plain, &mut gc, false);
                        send(*x, Tensor::new(val(*x).shape().to_vec(), kernels::col2im(&gc, win))?);
                    }
                }
                Op::Gather { x, idx } => {
                    let mut gx = vec![0.0; val(*x).len()];
                    for (o, &i) in idx.iter().enumerate() {
                        gx[i] += g.data()[o];
                    }
                    send(*x, Tensor::new(val(*x).shape().to_vec(), gx)?);
                }
                Op::Sum { x, axis, scale } => {
                    let shape = val(*x).shape().to_vec();
                    let gx = match axis {
                        None => Tensor::full(shape, g.data()[0] * scale),
                        Some(ax) => {
                            let (outer, len, inner) = axis_split(&shape, *ax, "sum")?;
                            let mut d = vec![0.0; outer * len * inner];
                            for o in 0..outer {
                                for k in 0..len {
                                    for i in 0..inner {
                                        d[(o * len + k) * inner + i] = g.data()[o * inner + i] * scale;
                                    }
                                }
                            }
                            Tensor::new(shape, d)?
                        }
                    };
                    send(*x, gx);
                }
                Op::BatchNorm { x, xhat, inv_std, inner } => {
                    let s = val(*x).shape();
                    let (n, c, inner) = (s[0], s[1], *inner);
                    let m = (n * inner) as f64;
                    let gd = g.data();
                    let mut sum_g = vec![0.0; c];
                    let mut sum_gx = vec![0.0; c];
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * inner;
                            for i in base..base + inner {
                                sum_g[ch] += gd[i];
                                sum_gx[ch] += gd[i] * xhat[i];
                            }
                        }
                    }
                    let mut gx = vec![0.0; gd.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * inner;
                            for i in base..base + inner {
                                gx[i] = inv_std[ch] / m * (m * gd[i] - sum_g[ch] - xhat[i] * sum_gx[ch]);
                            }
                        }
                    }
                    send(*x, Tensor::new(s.to_vec(), gx)?);
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let c = val(*logits).shape()[1];
                    let scale = g.data()[0] / labels.len() as f64;
                    let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (r, &y) in labels.iter().enumerate() {
                        gl[r * c + y] -= scale;
                    }
                    send(*logits, Tensor::new(val(*logits).shape().to_vec(), gl)?);
                }
                Op::PairwiseSqDist(x) => {
                    let tx = val(*x);
                    let (n, f) = (tx.shape()[0], tx.shape()[1]);
                    let (d, gd) = (tx.data(), g.data());
                    let mut gx = vec![0.0; n * f];
                    for i in 0..n {
                        for j in 0..n {
                            let w = 2.0 * (gd[i * n + j] + gd[j * n + i]);
                            if w == 0.0 || i == j {
                                continue;
                            }
                            for k in 0..f {
                                gx[i * f + k] += w * (d[i * f + k] - d[j * f + k]);
                            }
                        }
                    }
                    send(*x, Tensor::new(vec![n, f], gx)?);
                }
                Op::Custom { inputs, backward } => {
                    let vals: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
                    let grads = backward(&g, &vals, &node.value);
                    for (v, t) in inputs.iter().zip(grads) {
                        if t.shape() != val(*v).shape() {
                            return Err(TensorError::ShapeMismatch { op: "custom backward", lhs: val(*v).shape().to_vec(), rhs: t.shape().to_vec() });
                        }
                        send(*v, t);
                    }
                }
            }
        }

        for (id, g) in leaf_grads {
            accumulate(&mut self.nodes[id].grad, g);
        }
        Ok(())
    }
}

fn accumulate(slot: &mut Option<Tensor>, t: Tensor) {
    match slot {
        Some(acc) => acc.data_mut().iter_mut().zip(t.data()).for_each(|(a, b)| *a += b),
        None => *slot = Some(t),
    }
}

fn zip_map(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g.data().iter().zip(x.data()).map(|(&g, &x)| f(g, x)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

#[cfg(test)]
mod tests;
