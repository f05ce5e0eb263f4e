use std::rc::Rc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::GradCheck;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::losses::{self, Extension, LossConfig};
use crate::nn::{LayerSpec, Network, NetworkSpec};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub tolerance: f64,
    /// Coordinates sampled per input of the network-level cases.
    pub network_coords: usize,
    /// Only run cases whose name contains this string.
    pub filter: Option<String>,
    pub seed: u64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self { tolerance: 1e-4, network_coords: 16, filter: None, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CaseResult {
    pub name: String,
    pub group: &'static str,
    pub max_rel_err: f64,
    pub coords_checked: usize,
    pub seconds: f64,
    pub passed: bool,
    /// Set when the case could not be evaluated.
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteResult {
    pub cases: Vec<CaseResult>,
    pub seconds: f64,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        !self.cases.is_empty() && self.cases.iter().all(|c| c.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.cases.iter().filter(|c| c.group != "control").map(|c| c.max_rel_err).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CaseResult> {
        self.cases.iter().filter(|c| !c.passed)
    }
}

type CaseFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

struct Case {
    name: String,
    group: &'static str,
    f: CaseFn,
    inputs: Vec<Tensor>,
    check: GradCheck,
    /// The case passes when the error is above tolerance.
    expect_failure: bool,
}

/// Values in `±[0.2, 1.0]`, clear of the kinks at zero.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(0.2..1.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, rng)
}

/// `sum(y * w)` for a fixed random `w`, so every output entry carries a
/// distinct upstream gradient.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(Tensor::uniform(g.shape(y).to_vec(), -1.0, 1.0, &mut rng));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn labels(n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|i| i % classes).collect()
}

fn build_cases(opts: &SuiteOptions) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut cases = Vec::new();
    let full = GradCheck::default();
    let sampled = GradCheck::default().with_max_coords(opts.network_coords);

    macro_rules! case {
        ($group:expr, $name:expr, $inputs:expr, $f:expr) => {
            case!($group, $name, $inputs, full.clone(), $f)
        };
        ($group:expr, $name:expr, $inputs:expr, $check:expr, $f:expr) => {
            cases.push(Case {
                name: $name.to_string(),
                group: $group,
                f: Box::new($f),
                inputs: $inputs,
                check: $check,
                expect_failure: false,
            })
        };
    }

    // elementwise and structural ops
    case!("op", "add (broadcast)", vec![uniform(&[3, 4], &mut rng), uniform(&[1, 4], &mut rng)], |g, v| {
        let y = g.add(v[0], v[1])?;
        project(g, y, 1)
    });
    case!("op", "sub (broadcast)", vec![uniform(&[3, 1], &mut rng), uniform(&[3, 4], &mut rng)], |g, v| {
        let y = g.sub(v[0], v[1])?;
        project(g, y, 2)
    });
    case!("op", "mul (broadcast)", vec![uniform(&[2, 3, 2], &mut rng), uniform(&[3, 1], &mut rng)], |g, v| {
        let y = g.mul(v[0], v[1])?;
        project(g, y, 3)
    });
    case!("op", "scale, neg, add_scalar", vec![uniform(&[5], &mut rng)], |g, v| {
        let a = g.scale(v[0], -2.5);
        let b = g.neg(a);
        let c = g.add_scalar(b, 0.7);
        let sq = g.mul(c, c)?;
        Ok(g.sum(sq))
    });
    case!("op", "abs", vec![away_from_zero(&[6], &mut rng)], |g, v| {
        let y = g.abs(v[0]);
        project(g, y, 4)
    });
    case!("op", "relu", vec![away_from_zero(&[6], &mut rng)], |g, v| {
        let y = g.relu(v[0]);
        project(g, y, 5)
    });
    case!("op", "matmul", vec![uniform(&[3, 4], &mut rng), uniform(&[4, 5], &mut rng)], |g, v| {
        let y = g.matmul(v[0], v[1])?;
        project(g, y, 6)
    });
    case!("op", "reshape, flatten", vec![uniform(&[2, 2, 3], &mut rng)], |g, v| {
        let r = g.reshape(v[0], vec![3, 4])?;
        let sq = g.mul(r, r)?;
        let f = g.reshape(sq, vec![2, 1, 2, 3])?;
        let f = g.flatten(f)?;
        project(g, f, 7)
    });
    case!("op", "pad2d", vec![uniform(&[1, 2, 3, 3], &mut rng)], |g, v| {
        let y = g.pad2d(v[0], 1, 2, 0, 1)?;
        project(g, y, 8)
    });
    for (stride, padding) in [(1, 1), (2, 0)] {
        case!(
            "op",
            format!("conv2d stride {stride} padding {padding}"),
            vec![uniform(&[2, 2, 5, 5], &mut rng), uniform(&[3, 2, 3, 3], &mut rng)],
            move |g, v| {
                let y = g.conv2d(v[0], v[1], stride, padding)?;
                project(g, y, 9)
            }
        );
    }
    case!("op", "max_pool2d", vec![uniform(&[1, 2, 5, 5], &mut rng)], |g, v| {
        let y = g.max_pool2d(v[0], (3, 3), (2, 2))?;
        project(g, y, 10)
    });
    case!("op", "gather", vec![uniform(&[3, 3], &mut rng)], |g, v| {
        let y = g.gather(v[0], vec![1, 2, 5, 1, 8], vec![5])?;
        project(g, y, 11)
    });
    case!("op", "sum, mean", vec![uniform(&[3, 4], &mut rng)], |g, v| {
        let sq = g.mul(v[0], v[0])?;
        let s = g.sum(sq);
        let m = g.mean(v[0]);
        let m2 = g.mul(m, m)?;
        g.add(s, m2).map_err(Error::from)
    });
    for axis in [0, 1] {
        case!("op", format!("sum_axis, mean_axis {axis}"), vec![uniform(&[3, 4], &mut rng)], move |g, v| {
            let s = g.sum_axis(v[0], axis)?;
            let m = g.mean_axis(v[0], axis)?;
            let y = g.mul(s, m)?;
            project(g, y, 12)
        });
        case!("op", format!("max_axis, min_axis {axis}"), vec![uniform(&[3, 4], &mut rng)], move |g, v| {
            let a = g.max_axis(v[0], axis)?;
            let b = g.min_axis(v[0], axis)?;
            let y = g.sub(a, b)?;
            project(g, y, 13)
        });
    }
    case!("op", "max, min", vec![uniform(&[7], &mut rng)], |g, v| {
        let a = g.max(v[0]);
        let b = g.min(v[0]);
        let b = g.scale(b, 3.0);
        g.add(a, b).map_err(Error::from)
    });
    case!("op", "batch_norm [N, C]", vec![uniform(&[5, 3], &mut rng)], |g, v| {
        let (y, _) = g.batch_norm(v[0], 1e-5)?;
        project(g, y, 14)
    });
    case!("op", "batch_norm [N, C, H, W]", vec![uniform(&[2, 3, 2, 2], &mut rng)], |g, v| {
        let (y, _) = g.batch_norm(v[0], 1e-5)?;
        project(g, y, 15)
    });
    case!("op", "cross_entropy", vec![uniform(&[4, 3], &mut rng)], |g, v| {
        g.cross_entropy(v[0], &[0, 2, 1, 2]).map_err(Error::from)
    });
    case!("op", "pairwise_sq_dist", vec![uniform(&[4, 3], &mut rng)], |g, v| {
        let y = g.pairwise_sq_dist(v[0])?;
        project(g, y, 16)
    });

    // layers and whole networks, through their parameters and input
    let layer_specs: Vec<(&str, NetworkSpec, usize)> = vec![
        ("dense layer", tiny(vec![LayerSpec::Dense { units: 5 }]), 4),
        ("dense + batch norm + relu", tiny(vec![LayerSpec::Dense { units: 5 }, LayerSpec::BatchNorm, LayerSpec::Relu]), 6),
        ("dropout", tiny(vec![LayerSpec::Dense { units: 6 }, LayerSpec::Dropout { keep_probability: 0.5 }]), 4),
        (
            "conv + batch norm + pool",
            NetworkSpec {
                input_shape: vec![1, 6, 6],
                layers: vec![
                    LayerSpec::Conv2d { channels: 2, kernel: [3, 3], stride: 1, padding: 1 },
                    LayerSpec::BatchNorm,
                    LayerSpec::Relu,
                    LayerSpec::MaxPool { kernel: [3, 3], stride: [2, 2] },
                ],
                z_dim: 3,
                head: None,
            },
            3,
        ),
        ("mnist network (reduced)", NetworkSpec::mnist().reduced(&[2, 3], 6), 3),
        ("cifar10 network (reduced)", NetworkSpec::cifar10().reduced(&[2, 2], 5), 3),
        ("mc network (reduced)", NetworkSpec::mc().reduced(&[2, 2], 5), 3),
        ("ag network (reduced)", reduced_ag(), 6),
        ("mnist-mlp network (reduced)", NetworkSpec::mnist_mlp().reduced(&[], 8), 6),
    ];
    for (name, spec, n) in layer_specs {
        let spec = spec.with_head(Some(3));
        let net = Network::new(&spec, opts.seed).expect("suite specs are valid");
        let mut inputs = vec![uniform(&batch_shape(&spec, n), &mut rng)];
        inputs.extend(net.params().iter().map(|p| p.value.clone()));
        let y = labels(n, 3);
        let check = if net.param_count() > 400 { sampled.clone() } else { full.clone() };
        let seed = opts.seed;
        case!("layer", name, inputs, check, move |g, v| {
            let mut net = net.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = net.forward_bound(g, v[0], v[1..].to_vec(), &mut rng)?;
            let logits = f.logits.expect("head attached");
            let ce = g.cross_entropy(logits, &y)?;
            let zp = project(g, f.z, 17)?;
            g.add(ce, zp).map_err(Error::from)
        });
    }

    // losses through the representation matrix
    let z_labels = vec![0, 1, 2, 0, 1, 2, 0, 2];
    case!("loss", "representation matrix", vec![uniform(&[8, 4], &mut rng)], {
        let y = z_labels.clone();
        move |g, v| {
            let u = losses::representation_matrix(g, v[0], &y)?.u;
            project(g, u, 18)
        }
    });
    case!("loss", "max_feature, min_feature", vec![uniform(&[8, 4], &mut rng)], {
        let y = z_labels.clone();
        move |g, v| {
            let u = losses::representation_matrix(g, v[0], &y)?.u;
            let a = losses::max_feature(g, u)?;
            let b = losses::min_feature(g, u)?;
            let a = project(g, a, 19)?;
            let b = project(g, b, 20)?;
            g.add(a, b).map_err(Error::from)
        }
    });
    for ext in Extension::ALL.into_iter().filter(|e| *e != Extension::None) {
        let y = z_labels.clone();
        case!("loss", ext.name(), vec![uniform(&[8, 4], &mut rng)], move |g, v| {
            let u = losses::representation_matrix(g, v[0], &y)?.u;
            Ok(losses::mmf_term(g, u, ext)?.expect("extension term"))
        });
    }
    case!("loss", "cross-entropy with head", vec![uniform(&[6, 3], &mut rng)], |g, v| {
        losses::cross_entropy(g, v[0], &labels(6, 3)).map_err(Error::from)
    });
    case!("loss", "ii", vec![uniform(&[8, 4], &mut rng)], {
        let y = z_labels.clone();
        move |g, v| losses::ii_loss(g, v[0], &y).map_err(Error::from)
    });
    case!("loss", "triplet", vec![triplet_input(&mut rng)], |g, v| {
        losses::triplet_loss(g, v[0], &labels(8, 2), losses::DEFAULT_MARGIN).map_err(Error::from)
    });
    for (base, lambda) in [(losses::BaseLoss::Ii, 0.2), (losses::BaseLoss::Triplet, 0.5)] {
        let y = labels(8, 2);
        let input = if base == losses::BaseLoss::Triplet { triplet_input(&mut rng) } else { uniform(&[8, 4], &mut rng) };
        let cfg = LossConfig::new(base, Extension::Mmf, lambda);
        case!("loss", format!("{}+mmf weighted sum", base.name()), vec![input], move |g, v| {
            let b = losses::base_loss(g, &cfg, v[0], None, &y)?;
            let u = losses::representation_matrix(g, v[0], &y)?.u;
            let e = losses::mmf_term(g, u, Extension::Mmf)?.expect("extension term");
            let e = g.scale(e, cfg.lambda);
            g.add(b, e).map_err(Error::from)
        });
    }

    let keep = |c: &Case| opts.filter.as_deref().is_none_or(|f| c.name.contains(f) || c.group.contains(f));
    cases.retain(keep);
    cases.push(negative_control());
    cases
}

fn tiny(layers: Vec<LayerSpec>) -> NetworkSpec {
    NetworkSpec { input_shape: vec![4], layers, z_dim: 3, head: None }
}

fn reduced_ag() -> NetworkSpec {
    let mut spec = NetworkSpec::ag().reduced(&[], 8);
    spec.input_shape = vec![20];
    spec
}

fn batch_shape(spec: &NetworkSpec, n: usize) -> Vec<usize> {
    let mut s = vec![n];
    s.extend(&spec.input_shape);
    s
}

/// Two well-separated clusters so every hinge sits far from its kink.
fn triplet_input(rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = uniform(&[8, 4], rng);
    for (i, row) in t.data_mut().chunks_mut(4).enumerate() {
        row[0] += if i % 2 == 0 { 0.6 } else { -0.6 };
        row.iter_mut().for_each(|v| *v *= 0.5);
    }
    t
}

/// `x^2` recorded as a custom op whose backward returns `3x` instead of
/// `2x`. The checker must flag it.
fn negative_control() -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    Case {
        name: "corrupted custom op is caught".into(),
        group: "control",
        f: Box::new(|g, v| {
            let value = g.value(v[0]).map(|x| x * x);
            let backward: crate::autograd::BackwardFn =
                Rc::new(|grad, inputs, _| vec![Tensor::new(grad.shape().to_vec(), grad.data().iter().zip(inputs[0].data()).map(|(g, x)| g * 3.0 * x).collect()).expect("same shape")]);
            let y = g.custom(&[v[0]], value, backward);
            Ok(g.sum(y))
        }),
        inputs: vec![away_from_zero(&[5], &mut rng)],
        check: GradCheck::default(),
        expect_failure: true,
    }
}

/// Runs every finite-difference case.
pub fn suite(opts: &SuiteOptions) -> SuiteResult {
    let start = Instant::now();
    let cases = build_cases(opts)
        .into_iter()
        .map(|c| {
            let t = Instant::now();
            let (err, coords, error) = match c.check.run(&c.f, &c.inputs) {
                Ok(r) => (r.max_rel_err, r.coords_checked, None),
                Err(e) => (f64::NAN, 0, Some(e.to_string())),
            };
            let below = err < opts.tolerance;
            let passed = error.is_none() && (below != c.expect_failure);
            CaseResult {
                name: c.name,
                group: c.group,
                max_rel_err: err,
                coords_checked: coords,
                seconds: t.elapsed().as_secs_f64(),
                passed,
                error,
            }
        })
        .collect();
    SuiteResult { cases, seconds: start.elapsed().as_secs_f64() }
}
