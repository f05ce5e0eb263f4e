use super::*;
use crate::gradcheck::GradCheck;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn check(f: impl Fn(&mut Graph, &[Var]) -> Result<Var>, inputs: &[Tensor]) -> f64 {
    GradCheck::default().run(f, inputs).unwrap().max_rel_err
}

#[test]
fn relu_and_abs_values() {
    let mut g = Graph::new();
    let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
    let r = g.relu(x);
    assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
    let y = g.constant(t(&[2], &[-1.2, 0.45]));
    let a = g.abs(y);
    assert_eq!(g.value(a).data(), &[1.2, 0.45]);
}

#[test]
fn subgradients_at_zero_are_zero() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[3], &[-2.0, 0.0, 3.0]));
    let a = g.abs(x);
    let r = g.relu(x);
    let s = g.add(a, r).unwrap();
    let l = g.sum(s);
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[-1.0, 0.0, 2.0]);
}

#[test]
fn broadcast_add_matches_loops() {
    let a = rand_t(&[3, 4], 1);
    let b = rand_t(&[1, 4], 2);
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let s = g.add(va, vb).unwrap();
    for i in 0..3 {
        for j in 0..4 {
            assert_eq!(g.value(s).data()[i * 4 + j], a.data()[i * 4 + j] + b.data()[j]);
        }
    }
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(vec![2, 3]));
    let b = g.constant(Tensor::zeros(vec![4]));
    let err = g.mul(a, b).unwrap_err();
    assert_eq!(err.to_string(), "mul: incompatible shapes [2, 3] and [4]");
}

/// Materializes `x` at every position of `out` by explicit index arithmetic.
fn materialize(x: &Tensor, out: &[usize]) -> Vec<f64> {
    let n: usize = out.iter().product();
    let offset = out.len() - x.rank();
    (0..n)
        .map(|flat| {
            let mut rem = flat;
            let mut idx = vec![0; out.len()];
            for ax in (0..out.len()).rev() {
                idx[ax] = rem % out[ax];
                rem /= out[ax];
            }
            let mut src = 0;
            for ax in 0..x.rank() {
                let d = x.shape()[ax];
                let i = if d == 1 { 0 } else { idx[ax + offset] };
                src = src * d + i;
            }
            x.data()[src]
        })
        .collect()
}

fn broadcast_pair() -> impl Strategy<Value = (Vec<usize>, Vec<usize>, Vec<usize>)> {
    prop::collection::vec(1usize..=5, 1..=4).prop_flat_map(|out| {
        let r = out.len();
        (
            Just(out.clone()),
            prop::collection::vec(any::<bool>(), r),
            prop::collection::vec(any::<bool>(), r),
            0..=r,
            0..=r,
        )
            .prop_map(|(out, ka, kb, da, db)| {
                let mk = |keep: &[bool], drop: usize| -> Vec<usize> {
                    out.iter().zip(keep).skip(drop).map(|(&d, &k)| if k { d } else { 1 }).collect()
                };
                (out.clone(), mk(&ka, da), mk(&kb, db))
            })
    })
}

proptest! {
    #[test]
    fn broadcasting_matches_materialized_oracle((_, sa, sb) in broadcast_pair(), seed in 0u64..1000) {
        let a = rand_t(&sa, seed);
        let b = rand_t(&sb, seed + 1);
        let out = broadcast_shape("test", &sa, &sb).unwrap();
        let (ma, mb) = (materialize(&a, &out), materialize(&b, &out));
        let mut g = Graph::new();
        let (va, vb) = (g.leaf(a.clone()), g.leaf(b.clone()));
        let p = g.mul(va, vb).unwrap();
        let s = g.sub(p, vb).unwrap();
        for i in 0..ma.len() {
            prop_assert_eq!(g.value(p).data()[i], ma[i] * mb[i]);
            prop_assert_eq!(g.value(s).data()[i], ma[i] * mb[i] - mb[i]);
        }
        // gradient of sum(a*b) wrt a: sum of b over broadcast positions
        let l = g.sum(p);
        g.backward(l).unwrap();
        let mut ga = vec![0.0; a.len()];
        let idx_a = materialize(&Tensor::new(sa.clone(), (0..a.len()).map(|i| i as f64).collect()).unwrap(), &out);
        for (pos, &ia) in idx_a.iter().enumerate() {
            ga[ia as usize] += mb[pos];
        }
        for (x, y) in g.grad(va).unwrap().data().iter().zip(&ga) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn matmul_identity_and_loops() {
    let a = rand_t(&[2, 3], 7);
    let b = rand_t(&[3, 2], 8);
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let i3 = g.constant(Tensor::eye(3));
    let ai = g.matmul(va, i3).unwrap();
    assert_eq!(g.value(ai), &a);
    let p = g.matmul(va, vb).unwrap();
    for i in 0..2 {
        for j in 0..2 {
            let mut acc = 0.0;
            for k in 0..3 {
                acc += a.data()[i * 3 + k] * b.data()[k * 2 + j];
            }
            assert!((g.value(p).data()[i * 2 + j] - acc).abs() < 1e-14);
        }
    }
    assert!(g.matmul(vb, vb).is_err());
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let err = check(
        |g, v| {
            let p = g.matmul(v[0], v[1])?;
            Ok(g.sum(p))
        },
        &[rand_t(&[3, 4], 3), rand_t(&[4, 2], 4)],
    );
    assert!(err < 1e-4, "err = {err}");
}

fn naive_conv(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Vec<f64> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let at = |b: usize, ch: usize, y: isize, xx: isize| -> f64 {
        if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
            0.0
        } else {
            x.data()[((b * c + ch) * h + y as usize) * w + xx as usize]
        }
    };
    let mut out = Vec::new();
    for b in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let y = (oy * stride + ky) as isize - pad as isize;
                                let xx = (ox * stride + kx) as isize - pad as isize;
                                acc += at(b, ch, y, xx) * k.data()[((oc * c + ch) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

#[test]
fn conv_unit_kernel_sums_channels() {
    let x = rand_t(&[2, 3, 4, 4], 11);
    let mut g = Graph::new();
    let vx = g.constant(x.clone());
    let k = g.constant(Tensor::ones(vec![1, 3, 1, 1]));
    let y = g.conv2d(vx, k, 1, 0).unwrap();
    assert_eq!(g.shape(y), &[2, 1, 4, 4]);
    for b in 0..2 {
        for p in 0..16 {
            let s: f64 = (0..3).map(|c| x.data()[(b * 3 + c) * 16 + p]).sum();
            assert!((g.value(y).data()[b * 16 + p] - s).abs() < 1e-14);
        }
    }
}

#[test]
fn conv_matches_sliding_window() {
    for (stride, pad) in [(1, 0), (2, 1), (1, 2)] {
        let x = rand_t(&[1, 1, 5, 5], 21);
        let k = rand_t(&[1, 1, 3, 3], 22);
        let mut g = Graph::new();
        let (vx, vk) = (g.constant(x.clone()), g.constant(k.clone()));
        let y = g.conv2d(vx, vk, stride, pad).unwrap();
        let oracle = naive_conv(&x, &k, stride, pad);
        assert_eq!(g.value(y).len(), oracle.len());
        for (a, b) in g.value(y).data().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-13);
        }
    }
    let x = rand_t(&[2, 3, 6, 7], 23);
    let k = rand_t(&[4, 3, 3, 2], 24);
    let mut g = Graph::new();
    let (vx, vk) = (g.constant(x.clone()), g.constant(k.clone()));
    let y = g.conv2d(vx, vk, 2, 1).unwrap();
    for (a, b) in g.value(y).data().iter().zip(&naive_conv(&x, &k, 2, 1)) {
        assert!((a - b).abs() < 1e-13);
    }
}

#[test]
fn conv_rejects_oversized_kernel() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(vec![1, 1, 2, 2]));
    let k = g.constant(Tensor::zeros(vec![1, 1, 3, 3]));
    assert!(matches!(g.conv2d(x, k, 1, 0), Err(TensorError::WindowTooLarge { .. })));
    assert!(g.conv2d(x, k, 1, 1).is_ok());
}

#[test]
fn conv_gradient_matches_finite_differences() {
    for (stride, pad) in [(1, 1), (2, 0)] {
        let err = check(
            |g, v| {
                let y = g.conv2d(v[0], v[1], stride, pad)?;
                let w = g.constant(rand_t(g.shape(y), 99));
                let p = g.mul(y, w)?;
                Ok(g.sum(p))
            },
            &[rand_t(&[1, 2, 4, 4], 31), rand_t(&[3, 2, 3, 3], 32)],
        );
        assert!(err < 1e-4, "stride {stride} pad {pad}: err = {err}");
    }
}

#[test]
fn maxpool_constant_and_ramp() {
    let mut g = Graph::new();
    let c = g.constant(Tensor::full(vec![1, 2, 5, 5], 0.7));
    let p = g.max_pool2d(c, (3, 3), (2, 2)).unwrap();
    assert_eq!(g.shape(p), &[1, 2, 2, 2]);
    assert!(g.value(p).data().iter().all(|&v| v == 0.7));

    let ramp = t(&[1, 1, 4, 4], &(0..16).map(f64::from).collect::<Vec<_>>());
    let r = g.constant(ramp);
    // windows of a row-major ramp peak at their bottom-right corner
    let p33 = g.max_pool2d(r, (3, 3), (2, 2)).unwrap();
    assert_eq!(g.value(p33).data(), &[10.0]);
    let p22 = g.max_pool2d(r, (2, 2), (2, 2)).unwrap();
    assert_eq!(g.value(p22).data(), &[5.0, 7.0, 13.0, 15.0]);
    let p31 = g.max_pool2d(r, (3, 3), (1, 1)).unwrap();
    assert_eq!(g.value(p31).data(), &[10.0, 11.0, 14.0, 15.0]);
    assert!(g.max_pool2d(r, (5, 5), (1, 1)).is_err());
}

#[test]
fn maxpool_gradient_is_one_hot_per_window() {
    let mut g = Graph::new();
    let x = g.leaf(rand_t(&[1, 1, 4, 4], 41));
    let p = g.max_pool2d(x, (2, 2), (2, 2)).unwrap();
    let l = g.sum(p);
    g.backward(l).unwrap();
    let grad = g.grad(x).unwrap().data().to_vec();
    for wy in 0..2 {
        for wx in 0..2 {
            let cells: Vec<f64> = (0..4).map(|k| grad[(wy * 2 + k / 2) * 4 + wx * 2 + k % 2]).collect();
            assert_eq!(cells.iter().filter(|&&v| v == 1.0).count(), 1);
            assert_eq!(cells.iter().filter(|&&v| v == 0.0).count(), 3);
        }
    }
    // ties route to the lowest flat index
    let mut g = Graph::new();
    let x = g.leaf(Tensor::full(vec![1, 1, 2, 2], 3.0));
    let p = g.max_pool2d(x, (2, 2), (2, 2)).unwrap();
    let l = g.sum(p);
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn reductions() {
    let mut g = Graph::new();
    let x = g.constant(t(&[2, 2], &[1.0, 3.0, 2.0, 0.0]));
    let m = g.max_axis(x, 1).unwrap();
    assert_eq!(g.value(m).data(), &[3.0, 2.0]);
    let n = g.min_axis(x, 0).unwrap();
    assert_eq!(g.value(n).data(), &[1.0, 0.0]);
    let s = g.sum_axis(x, 0).unwrap();
    assert_eq!(g.value(s).data(), &[3.0, 3.0]);
    let mm = g.mean_axis(x, 1).unwrap();
    assert_eq!(g.value(mm).data(), &[2.0, 1.0]);
    let total = g.mean(x);
    assert_eq!(g.value(total).item(), Some(1.5));
    assert_eq!(g.argmax(x, 1).unwrap(), vec![1, 0]);
    assert!(matches!(g.sum_axis(x, 2), Err(TensorError::AxisOutOfRange { axis: 2, rank: 2, .. })));

    let tie = g.constant(t(&[4], &[2.0, 1.0, 1.0, 5.0]));
    assert_eq!(g.argmin(tie, 0).unwrap(), vec![1]);
}

#[test]
fn min_gradient_is_one_hot_at_minimizer() {
    let x = t(&[5], &[0.4, -0.3, 0.9, -0.1, 0.2]);
    let mut g = Graph::new();
    let v = g.leaf(x.clone());
    let m = g.min(v);
    g.backward(m).unwrap();
    assert_eq!(g.grad(v).unwrap().data(), &[0.0, 1.0, 0.0, 0.0, 0.0]);
    let err = check(|g, v| Ok(g.min(v[0])), &[x]);
    assert!(err < 1e-8);
}

proptest! {
    #[test]
    fn extreme_axis_gradients_are_one_hot(seed in 0u64..500, rows in 1usize..5, cols in 1usize..6, use_max: bool, scale in 0.1f64..3.0) {
        let x = rand_t(&[rows, cols], seed);
        let mut g = Graph::new();
        let v = g.leaf(x);
        let r = if use_max { g.max_axis(v, 1).unwrap() } else { g.min_axis(v, 1).unwrap() };
        let l = g.sum(r);
        let l = g.scale(l, scale);
        g.backward(l).unwrap();
        let grad = g.grad(v).unwrap();
        for row in grad.rows() {
            prop_assert_eq!(row.iter().filter(|&&x| x != 0.0).count(), 1);
            let mag: f64 = row.iter().map(|x| x.abs()).sum();
            prop_assert!((mag - scale).abs() < 1e-15);
        }
    }
}

#[test]
fn backward_basic_rules() {
    let mut g = Graph::new();
    let x = g.leaf(rand_t(&[2, 3], 5));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));

    let xv = t(&[3], &[1.5, -2.0, 0.25]);
    let mut g = Graph::new();
    let x = g.leaf(xv.clone());
    let sq = g.mul(x, x).unwrap();
    let l = g.sum(sq);
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[3.0, -4.0, 0.5]);

    // a second sweep accumulates
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[6.0, -8.0, 1.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(vec![2]));
    let y = g.scale(x, 2.0);
    assert_eq!(g.backward(y).unwrap_err(), TensorError::NonScalarLoss(vec![2]));
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[2], &[1.0, 2.0]));
    let c = g.constant(t(&[2], &[3.0, 4.0]));
    let p = g.mul(x, c).unwrap();
    let l = g.sum(p);
    g.backward(l).unwrap();
    assert!(g.grad(c).is_none());
    assert_eq!(g.grad(x).unwrap().data(), &[3.0, 4.0]);
}

fn composite(g: &mut Graph, v: &[Var]) -> Result<Var> {
    // conv -> relu -> dense -> cross entropy
    let y = g.conv2d(v[0], v[1], 1, 1)?;
    let y = g.relu(y);
    let f = g.flatten(y)?;
    let z = g.matmul(f, v[2])?;
    g.cross_entropy(z, &[0, 2])
}

#[test]
fn composite_graph_matches_finite_differences() {
    let err = check(composite, &[rand_t(&[2, 1, 4, 4], 51), rand_t(&[2, 1, 3, 3], 52), rand_t(&[32, 3], 53)]);
    assert!(err < 1e-4, "err = {err}");
}

#[test]
fn backward_is_deterministic() {
    let inputs = [rand_t(&[2, 1, 4, 4], 61), rand_t(&[2, 1, 3, 3], 62), rand_t(&[32, 3], 63)];
    let run = || {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let l = composite(&mut g, &vars).unwrap();
        g.backward(l).unwrap();
        vars.iter().map(|v| g.grad(*v).unwrap().clone()).collect::<Vec<_>>()
    };
    let (a, b) = (run(), run());
    for (x, y) in a.iter().zip(&b) {
        let bx: Vec<u64> = x.data().iter().map(|v| v.to_bits()).collect();
        let by: Vec<u64> = y.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bx, by);
    }
}

#[test]
fn fused_ops_match_finite_differences() {
    let cases: Vec<(&str, Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>, Vec<Tensor>)> = vec![
        (
            "batch_norm 2d",
            Box::new(|g: &mut Graph, v: &[Var]| {
                let (y, _) = g.batch_norm(v[0], 1e-5)?;
                let w = g.constant(rand_t(&[4, 3], 7));
                let p = g.mul(y, w)?;
                Ok(g.sum(p))
            }),
            vec![rand_t(&[4, 3], 71)],
        ),
        (
            "batch_norm 4d",
            Box::new(|g: &mut Graph, v: &[Var]| {
                let (y, _) = g.batch_norm(v[0], 1e-5)?;
                let w = g.constant(rand_t(&[2, 2, 3, 3], 8));
                let p = g.mul(y, w)?;
                Ok(g.sum(p))
            }),
            vec![rand_t(&[2, 2, 3, 3], 72)],
        ),
        ("cross_entropy", Box::new(|g: &mut Graph, v: &[Var]| g.cross_entropy(v[0], &[1, 0, 3])), vec![rand_t(&[3, 4], 73)]),
        (
            "pairwise_sq_dist",
            Box::new(|g: &mut Graph, v: &[Var]| {
                let d = g.pairwise_sq_dist(v[0])?;
                let w = g.constant(rand_t(&[5, 5], 9));
                let p = g.mul(d, w)?;
                Ok(g.sum(p))
            }),
            vec![rand_t(&[5, 3], 74)],
        ),
        (
            "pad2d",
            Box::new(|g: &mut Graph, v: &[Var]| {
                let p = g.pad2d(v[0], 1, 2, 0, 1)?;
                let w = g.constant(rand_t(&[1, 2, 6, 4], 10));
                let q = g.mul(p, w)?;
                Ok(g.sum(q))
            }),
            vec![rand_t(&[1, 2, 3, 3], 75)],
        ),
        (
            "mean_axis/sub/abs",
            Box::new(|g: &mut Graph, v: &[Var]| {
                let m = g.mean_axis(v[0], 0)?;
                let d = g.sub(v[0], m)?;
                let a = g.abs(d);
                let s = g.sum_axis(a, 1)?;
                Ok(g.max(s))
            }),
            vec![rand_t(&[4, 3], 76)],
        ),
        (
            "gather",
            Box::new(|g: &mut Graph, v: &[Var]| {
                let x = g.gather(v[0], vec![0, 3, 3, 5], vec![4])?;
                let x = g.mul(x, x)?;
                Ok(g.sum(x))
            }),
            vec![rand_t(&[6], 77)],
        ),
    ];
    for (name, f, inputs) in cases {
        let err = check(f, &inputs);
        assert!(err < 1e-4, "{name}: err = {err}");
    }
}

#[test]
fn batch_norm_normalizes_training_batch() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::uniform(vec![16, 5], -3.0, 7.0, &mut ChaCha8Rng::seed_from_u64(3)));
    let (y, stats) = g.batch_norm(x, 0.0).unwrap();
    let y = g.value(y);
    for c in 0..5 {
        let col: Vec<f64> = (0..16).map(|r| y.data()[r * 5 + c]).collect();
        let mean = col.iter().sum::<f64>() / 16.0;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-6);
    }
    assert_eq!(stats.mean.len(), 5);
}

#[test]
fn cross_entropy_is_stable() {
    let mut g = Graph::new();
    let z = g.constant(Tensor::zeros(vec![2, 6]));
    let l = g.cross_entropy(z, &[0, 5]).unwrap();
    assert!((g.value(l).item().unwrap() - 6f64.ln()).abs() < 1e-15);
    let big = g.constant(t(&[1, 3], &[800.0, 0.0, -800.0]));
    let l = g.cross_entropy(big, &[0]).unwrap();
    assert!(g.value(l).item().unwrap() < 1e-6);
    assert!(g.cross_entropy(big, &[3]).is_err());
}
