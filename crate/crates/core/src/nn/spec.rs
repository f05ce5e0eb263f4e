use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One stage of the hidden trunk. Convolution and dense layers are affine
/// only; activation, normalization and dropout are separate stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Zero-pads `[C, H, W]` input symmetrically up to `size` (extra row or
    /// column goes to the bottom/right).
    Pad { size: [usize; 2] },
    Conv2d {
        channels: usize,
        kernel: [usize; 2],
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    MaxPool { kernel: [usize; 2], stride: [usize; 2] },
    /// Fully connected affine map; flattens its input.
    Dense { units: usize },
    BatchNorm,
    Relu,
    Dropout { keep_probability: f64 },
}

fn one() -> usize {
    1
}

/// Declarative network: trunk, then the linear representation layer Z of
/// width `z_dim`, then an optional linear classification head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Shape of one sample, e.g. `[1, 28, 28]` or `[1453]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub z_dim: usize,
    #[serde(default)]
    pub head: Option<usize>,
}

impl NetworkSpec {
    /// Per-sample output shape of every trunk layer; fails on the first
    /// inconsistency.
    pub fn trunk_shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(bad(format!("input shape {:?} must be nonempty and positive", self.input_shape)));
        }
        if self.z_dim == 0 {
            return Err(bad("z_dim must be at least 1".into()));
        }
        if self.head == Some(0) {
            return Err(bad("classification head needs at least 1 unit".into()));
        }
        let mut shape = self.input_shape.clone();
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = match *layer {
                LayerSpec::Pad { size } => {
                    let [c, h, w] = spatial(&shape, i, "pad")?;
                    if size[0] < h || size[1] < w {
                        return Err(bad(format!("layer {i}: cannot pad {h}x{w} down to {size:?}")));
                    }
                    vec![c, size[0], size[1]]
                }
                LayerSpec::Conv2d { channels, kernel, stride, padding } => {
                    let [_, h, w] = spatial(&shape, i, "conv2d")?;
                    if channels == 0 || stride == 0 {
                        return Err(bad(format!("layer {i}: conv2d needs channels and stride >= 1")));
                    }
                    if kernel[0] > h + 2 * padding || kernel[1] > w + 2 * padding || kernel.contains(&0) {
                        return Err(bad(format!("layer {i}: kernel {kernel:?} does not fit {h}x{w} input")));
                    }
                    vec![channels, (h + 2 * padding - kernel[0]) / stride + 1, (w + 2 * padding - kernel[1]) / stride + 1]
                }
                LayerSpec::MaxPool { kernel, stride } => {
                    let [c, h, w] = spatial(&shape, i, "max_pool")?;
                    if kernel[0] > h || kernel[1] > w || stride.contains(&0) || kernel.contains(&0) {
                        return Err(bad(format!("layer {i}: pool window {kernel:?} does not fit {h}x{w} input")));
                    }
                    vec![c, (h - kernel[0]) / stride[0] + 1, (w - kernel[1]) / stride[1] + 1]
                }
                LayerSpec::Dense { units } => {
                    if units == 0 {
                        return Err(bad(format!("layer {i}: dense needs at least 1 unit")));
                    }
                    vec![units]
                }
                LayerSpec::Dropout { keep_probability: p } => {
                    if !(p > 0.0 && p <= 1.0) {
                        return Err(bad(format!("layer {i}: keep probability {p} outside (0, 1]")));
                    }
                    shape
                }
                LayerSpec::BatchNorm | LayerSpec::Relu => shape,
            };
            shapes.push(shape.clone());
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        self.trunk_shapes().map(|_| ())
    }

    /// Flattened width feeding the Z layer.
    pub fn trunk_width(&self) -> Result<usize> {
        let shapes = self.trunk_shapes()?;
        Ok(shapes.last().unwrap_or(&self.input_shape).iter().product())
    }

    pub fn with_head(mut self, classes: Option<usize>) -> Self {
        self.head = classes;
        self
    }
}

fn spatial(shape: &[usize], i: usize, op: &str) -> Result<[usize; 3]> {
    match *shape {
        [c, h, w] => Ok([c, h, w]),
        _ => Err(bad(format!("layer {i}: {op} needs [C, H, W] input, got {shape:?}"))),
    }
}

fn bad(msg: String) -> Error {
    Error::Config(msg)
}

fn conv_block(channels: usize) -> [LayerSpec; 4] {
    [
        LayerSpec::Conv2d { channels, kernel: [5, 5], stride: 1, padding: 0 },
        LayerSpec::BatchNorm,
        LayerSpec::Relu,
        LayerSpec::MaxPool { kernel: [3, 3], stride: [2, 2] },
    ]
}

fn dense_block(units: usize, keep: f64) -> [LayerSpec; 4] {
    [
        LayerSpec::Dense { units },
        LayerSpec::BatchNorm,
        LayerSpec::Relu,
        LayerSpec::Dropout { keep_probability: keep },
    ]
}

/// Representation width used by every preset.
pub const Z_DIM: usize = 6;

impl NetworkSpec {
    /// Padded 32x32 input, conv 32/64 with 3x3 stride-2 pooling, dense
    /// 256/128 with keep probability 0.2, Z of width 6.
    pub fn mnist() -> Self {
        Self::image_convnet([1, 28, 28], 32, &[256, 128], 0.2)
    }

    /// Grayscale 32x32 input padded to 36x36, otherwise as [`mnist`](Self::mnist).
    pub fn cifar10() -> Self {
        Self::image_convnet([1, 32, 32], 36, &[256, 128], 0.2)
    }

    /// 63x63 call-graph matrices padded to 67x67, one dense layer, keep 0.9.
    pub fn mc() -> Self {
        Self::image_convnet([1, 63, 63], 67, &[256], 0.9)
    }

    /// 1453 call-graph features, one dense layer of 64 units, keep 0.9.
    pub fn ag() -> Self {
        let mut layers = Vec::new();
        layers.extend(dense_block(64, 0.9));
        Self { input_shape: vec![1453], layers, z_dim: Z_DIM, head: None }
    }

    /// Convolution-free MNIST network (784 -> 256 -> 128 -> Z) for CPU runs.
    /// Not one of the published architectures.
    pub fn mnist_mlp() -> Self {
        let mut layers = Vec::new();
        layers.extend(dense_block(256, MNIST_MLP_KEEP));
        layers.extend(dense_block(128, MNIST_MLP_KEEP));
        Self { input_shape: vec![1, 28, 28], layers, z_dim: Z_DIM, head: None }
    }

    fn image_convnet(input: [usize; 3], padded: usize, dense: &[usize], keep: f64) -> Self {
        let mut layers = vec![LayerSpec::Pad { size: [padded, padded] }];
        layers.extend(conv_block(32));
        layers.extend(conv_block(64));
        for &u in dense {
            layers.extend(dense_block(u, keep));
        }
        Self { input_shape: input.to_vec(), layers, z_dim: Z_DIM, head: None }
    }

    /// Looks up a preset by its CLI name.
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "mnist" => Some(Self::mnist()),
            "cifar10" => Some(Self::cifar10()),
            "mc" => Some(Self::mc()),
            "ag" => Some(Self::ag()),
            "mnist-mlp" => Some(Self::mnist_mlp()),
            _ => None,
        }
    }

    /// Same layer structure with every conv/dense width replaced by
    /// `conv` / `dense` widths (cycled), for cheap gradient checks.
    pub fn reduced(&self, conv: &[usize], dense: usize) -> Self {
        let mut ci = 0;
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                LayerSpec::Conv2d { kernel, stride, padding, .. } => {
                    let channels = conv[ci % conv.len()];
                    ci += 1;
                    LayerSpec::Conv2d { channels, kernel: *kernel, stride: *stride, padding: *padding }
                }
                LayerSpec::Dense { .. } => LayerSpec::Dense { units: dense },
                other => other.clone(),
            })
            .collect();
        Self { layers, ..self.clone() }
    }
}

/// Keep probability of the dense layers in the `mnist-mlp` preset.
pub const MNIST_MLP_KEEP: f64 = 1.0;
