use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::spec::{LayerSpec, NetworkSpec};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Tensor, TensorError};

/// Running-statistics momentum of batch normalization.
pub const BN_MOMENTUM: f64 = 0.99;
pub const BN_EPS: f64 = 1e-5;

/// A trainable tensor and its gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// `None` until a backward pass reaches this parameter.
    pub grad: Option<Tensor>,
}

impl Param {
    fn new(name: String, value: Tensor) -> Self {
        Self { name, value, grad: None }
    }
}

#[derive(Clone, Debug)]
enum Layer {
    Pad { top: usize, bottom: usize, left: usize, right: usize },
    Conv { weight: usize, bias: usize, stride: usize, padding: usize },
    MaxPool { kernel: (usize, usize), stride: (usize, usize) },
    Dense { weight: usize, bias: usize },
    BatchNorm { gamma: usize, beta: usize, running_mean: Vec<f64>, running_var: Vec<f64> },
    Relu,
    Dropout { keep: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// Representation-layer activations, `[N, z_dim]`.
    pub z: Var,
    /// Classification logits, present when the network has a head.
    pub logits: Option<Var>,
    params: Vec<Var>,
}

/// Instantiated [`NetworkSpec`].
#[derive(Clone, Debug)]
pub struct Network {
    spec: NetworkSpec,
    params: Vec<Param>,
    layers: Vec<Layer>,
    z: (usize, usize),
    head: Option<(usize, usize)>,
}

impl Network {
    /// Builds the network with He-uniform weights for the trunk, Glorot-uniform
    /// weights for the linear Z layer and head, zero biases, and unit/zero
    /// batch-norm scale/shift. Identical seeds give identical parameters.
    pub fn new(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        let shapes = spec.trunk_shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut layers = Vec::with_capacity(spec.layers.len());
        let add = |params: &mut Vec<Param>, name: String, t: Tensor| {
            params.push(Param::new(name, t));
            params.len() - 1
        };
        let mut prev = spec.input_shape.clone();
        for (i, (layer, out)) in spec.layers.iter().zip(&shapes).enumerate() {
            let built = match *layer {
                LayerSpec::Pad { size } => {
                    let (dh, dw) = (size[0] - prev[1], size[1] - prev[2]);
                    Layer::Pad { top: dh / 2, bottom: dh - dh / 2, left: dw / 2, right: dw - dw / 2 }
                }
                LayerSpec::Conv2d { channels, kernel, stride, padding } => {
                    let fan_in = prev[0] * kernel[0] * kernel[1];
                    let w = he_uniform(vec![channels, prev[0], kernel[0], kernel[1]], fan_in, &mut rng);
                    let weight = add(&mut params, format!("layer{i}.conv.weight"), w);
                    let bias = add(&mut params, format!("layer{i}.conv.bias"), Tensor::zeros(vec![channels]));
                    Layer::Conv { weight, bias, stride, padding }
                }
                LayerSpec::MaxPool { kernel, stride } => Layer::MaxPool { kernel: (kernel[0], kernel[1]), stride: (stride[0], stride[1]) },
                LayerSpec::Dense { units } => {
                    let fan_in: usize = prev.iter().product();
                    let weight = add(&mut params, format!("layer{i}.dense.weight"), he_uniform(vec![fan_in, units], fan_in, &mut rng));
                    let bias = add(&mut params, format!("layer{i}.dense.bias"), Tensor::zeros(vec![units]));
                    Layer::Dense { weight, bias }
                }
                LayerSpec::BatchNorm => {
                    let c = prev[0];
                    let gamma = add(&mut params, format!("layer{i}.bn.gamma"), Tensor::ones(vec![c]));
                    let beta = add(&mut params, format!("layer{i}.bn.beta"), Tensor::zeros(vec![c]));
                    Layer::BatchNorm { gamma, beta, running_mean: vec![0.0; c], running_var: vec![1.0; c] }
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::Dropout { keep_probability } => Layer::Dropout { keep: keep_probability },
            };
            layers.push(built);
            prev = out.clone();
        }
        let width: usize = prev.iter().product();
        let zw = add(&mut params, "z.weight".into(), glorot_uniform(width, spec.z_dim, &mut rng));
        let zb = add(&mut params, "z.bias".into(), Tensor::zeros(vec![spec.z_dim]));
        let head = spec.head.map(|c| {
            let hw = add(&mut params, "head.weight".into(), glorot_uniform(spec.z_dim, c, &mut rng));
            let hb = add(&mut params, "head.bias".into(), Tensor::zeros(vec![c]));
            (hw, hb)
        });
        Ok(Self { spec: spec.clone(), params, layers, z: (zw, zb), head })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Number of layers carrying weights (conv, dense, Z, head); batch-norm
    /// scale/shift excluded.
    pub fn weighted_layer_count(&self) -> usize {
        let trunk = self.layers.iter().filter(|l| matches!(l, Layer::Conv { .. } | Layer::Dense { .. })).count();
        trunk + 1 + usize::from(self.head.is_some())
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad = None);
    }

    /// Running `(mean, var)` of every batch-norm layer, in layer order.
    pub fn running_stats(&self) -> Vec<(&[f64], &[f64])> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::BatchNorm { running_mean, running_var, .. } => Some((running_mean.as_slice(), running_var.as_slice())),
                _ => None,
            })
            .collect()
    }

    pub(crate) fn running_stats_mut(&mut self) -> Vec<(&mut Vec<f64>, &mut Vec<f64>)> {
        self.layers
            .iter_mut()
            .filter_map(|l| match l {
                Layer::BatchNorm { running_mean, running_var, .. } => Some((running_mean, running_var)),
                _ => None,
            })
            .collect()
    }

    /// Training-mode forward: dropout active, batch statistics used and
    /// folded into the running statistics.
    pub fn forward_train(&mut self, g: &mut Graph, x: Var, rng: &mut dyn RngCore) -> Result<Forward> {
        let params = self.bind(g, true);
        self.forward_bound(g, x, params, rng)
    }

    /// Training-mode forward using caller-supplied parameter nodes, in
    /// [`params`](Self::params) order.
    pub fn forward_bound(&mut self, g: &mut Graph, x: Var, params: Vec<Var>, rng: &mut dyn RngCore) -> Result<Forward> {
        let mut updates = Vec::new();
        let fwd = self.run(g, x, params, Some(rng), &mut updates)?;
        let mut stats = self.running_stats_mut();
        for (k, batch) in updates {
            let (mean, var) = &mut stats[k];
            let m = batch.1 as f64;
            let correction = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            for c in 0..mean.len() {
                mean[c] = BN_MOMENTUM * mean[c] + (1.0 - BN_MOMENTUM) * batch.0.mean[c];
                var[c] = BN_MOMENTUM * var[c] + (1.0 - BN_MOMENTUM) * batch.0.var[c] * correction;
            }
        }
        Ok(fwd)
    }

    /// Evaluation-mode forward: no dropout, running batch-norm statistics.
    /// A pure function of the parameters and the input.
    pub fn forward_eval(&self, g: &mut Graph, x: Var) -> Result<Forward> {
        let params = self.bind(g, false);
        self.run(g, x, params, None, &mut Vec::new())
    }

    /// Adds every parameter value to `g`, as leaves when `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params.iter().map(|p| if trainable { g.leaf(p.value.clone()) } else { g.constant(p.value.clone()) }).collect()
    }

    pub fn forward(&mut self, g: &mut Graph, x: Var, mode: Mode, rng: &mut dyn RngCore) -> Result<Forward> {
        match mode {
            Mode::Train => self.forward_train(g, x, rng),
            Mode::Eval => self.forward_eval(g, x),
        }
    }

    fn run(
        &self,
        g: &mut Graph,
        x: Var,
        params: Vec<Var>,
        mut train: Option<&mut dyn RngCore>,
        updates: &mut Vec<(usize, (crate::autograd::BatchStats, usize))>,
    ) -> Result<Forward> {
        let shape = g.shape(x).to_vec();
        if shape.len() != self.spec.input_shape.len() + 1 || shape[1..] != self.spec.input_shape[..] {
            return Err(TensorError::ShapeMismatch { op: "network input", lhs: shape, rhs: self.spec.input_shape.clone() }.into());
        }
        let n = shape[0];
        if params.len() != self.params.len() {
            return Err(Error::Config(format!("expected {} parameter nodes, got {}", self.params.len(), params.len())));
        }
        let mut h = x;
        let mut bn_index = 0;
        for layer in &self.layers {
            h = match layer {
                Layer::Pad { top, bottom, left, right } => g.pad2d(h, *top, *bottom, *left, *right)?,
                Layer::Conv { weight, bias, stride, padding } => {
                    let y = g.conv2d(h, params[*weight], *stride, *padding)?;
                    let o = self.params[*bias].value.len();
                    let b = g.reshape(params[*bias], vec![1, o, 1, 1])?;
                    g.add(y, b)?
                }
                Layer::MaxPool { kernel, stride } => g.max_pool2d(h, *kernel, *stride)?,
                Layer::Dense { weight, bias } => {
                    let flat = if g.shape(h).len() == 2 { h } else { g.flatten(h)? };
                    let y = g.matmul(flat, params[*weight])?;
                    g.add(y, params[*bias])?
                }
                Layer::BatchNorm { gamma, beta, running_mean, running_var } => {
                    let rank = g.shape(h).len();
                    let c = running_mean.len();
                    let bshape = if rank == 4 { vec![1, c, 1, 1] } else { vec![1, c] };
                    let normalized = if train.is_some() {
                        let (y, stats) = g.batch_norm(h, BN_EPS)?;
                        let m = g.value(h).len() / c;
                        updates.push((bn_index, (stats, m)));
                        y
                    } else {
                        let shift = g.constant(Tensor::new(bshape.clone(), running_mean.clone())?);
                        let inv = running_var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                        let inv = g.constant(Tensor::new(bshape.clone(), inv)?);
                        let centered = g.sub(h, shift)?;
                        g.mul(centered, inv)?
                    };
                    bn_index += 1;
                    let gm = g.reshape(params[*gamma], bshape.clone())?;
                    let bt = g.reshape(params[*beta], bshape)?;
                    let scaled = g.mul(normalized, gm)?;
                    g.add(scaled, bt)?
                }
                Layer::Relu => g.relu(h),
                Layer::Dropout { keep } => match train.as_deref_mut() {
                    Some(rng) if *keep < 1.0 => {
                        // inverted dropout: kept units are scaled by 1/keep
                        let len = g.value(h).len();
                        let mask: Vec<f64> = (0..len).map(|_| if rng.gen::<f64>() < *keep { 1.0 / keep } else { 0.0 }).collect();
                        let mask = g.constant(Tensor::new(g.shape(h).to_vec(), mask)?);
                        g.mul(h, mask)?
                    }
                    _ => h,
                },
            };
        }
        let flat = if g.shape(h).len() == 2 { h } else { g.flatten(h)? };
        let zl = g.matmul(flat, params[self.z.0])?;
        let z = g.add(zl, params[self.z.1])?;
        let logits = match self.head {
            Some((w, b)) => {
                let l = g.matmul(z, params[w])?;
                Some(g.add(l, params[b])?)
            }
            None => None,
        };
        debug_assert_eq!(g.shape(z), &[n, self.spec.z_dim]);
        Ok(Forward { z, logits, params })
    }

    /// Adds the gradients of every bound parameter in `g` to its accumulator.
    pub fn accumulate_grads(&mut self, g: &Graph, fwd: &Forward) {
        for (p, v) in self.params.iter_mut().zip(&fwd.params) {
            if let Some(grad) = g.grad(*v) {
                match &mut p.grad {
                    Some(acc) => acc.data_mut().iter_mut().zip(grad.data()).for_each(|(a, b)| *a += b),
                    None => p.grad = Some(grad.clone()),
                }
            }
        }
    }

    /// Eval-mode representations of every sample, computed in chunks.
    pub fn embed(&self, x: &Tensor, chunk: usize) -> Result<Tensor> {
        let n = x.shape().first().copied().unwrap_or(0);
        let f = self.spec.z_dim;
        let mut out = Vec::with_capacity(n * f);
        let chunk = chunk.max(1);
        let mut start = 0;
        while start < n {
            let end = (start + chunk).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let mut g = Graph::new();
            let xv = g.constant(x.select_rows(&idx));
            let fwd = self.forward_eval(&mut g, xv)?;
            out.extend_from_slice(g.value(fwd.z).data());
            start = end;
        }
        Ok(Tensor::new(vec![n, f], out)?)
    }

    /// Replaces parameter values and running statistics, keeping structure.
    pub(crate) fn load_state(&mut self, values: Vec<Tensor>, stats: Vec<(Vec<f64>, Vec<f64>)>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Checkpoint(format!("expected {} parameter tensors, found {}", self.params.len(), values.len())));
        }
        for (p, v) in self.params.iter_mut().zip(&values) {
            if p.value.shape() != v.shape() {
                return Err(Error::Checkpoint(format!("{}: expected shape {:?}, found {:?}", p.name, p.value.shape(), v.shape())));
            }
        }
        let mut slots = self.running_stats_mut();
        if slots.len() != stats.len() {
            return Err(Error::Checkpoint(format!("expected {} batch-norm layers, found {}", slots.len(), stats.len())));
        }
        for ((m, v), (nm, nv)) in slots.iter_mut().zip(stats) {
            if m.len() != nm.len() || v.len() != nv.len() {
                return Err(Error::Checkpoint("batch-norm width mismatch".into()));
            }
            **m = nm;
            **v = nv;
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            p.value = v;
            p.grad = None;
        }
        Ok(())
    }
}

fn he_uniform(shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let limit = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::uniform(shape, -limit, limit, rng)
}

fn glorot_uniform(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
    Tensor::uniform(vec![fan_in, fan_out], -limit, limit, rng)
}
