//! Reverse-mode gradients of every graph primitive against central differences,
//! plus naive-loop oracles for the dense kernels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tsda::tensor::{Graph, Tensor, Var};

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Builds `build(inputs)`, reduces it to a scalar with fixed random weights and
/// compares every input gradient with a central difference.
fn check<F>(name: &str, inputs: Vec<Tensor<f64>>, build: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let eval = |inputs: &[Tensor<f64>], weights: Option<&Tensor<f64>>| {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = build(&mut g, &vars);
        let w = weights.cloned().unwrap_or_else(|| Tensor::full(g.shape(out), 0.0));
        let wv = g.constant(w.clone());
        let prod = g.mul(out, wv).unwrap();
        let loss = g.sum(prod);
        (g, vars, loss, w)
    };
    let shape = {
        let (g, _, _, w) = eval(&inputs, None);
        drop(g);
        w.shape().to_vec()
    };
    let weights = random(&mut rng, &shape, -1.0, 1.0);
    let (mut g, vars, loss, _) = eval(&inputs, Some(&weights));
    g.backward(loss).unwrap();
    let h = 1e-6;
    for k in 0..inputs.len() {
        let analytic = g.grad(vars[k]).unwrap().to_vec();
        for (j, &a) in analytic.iter().enumerate() {
            let mut shifted = inputs.clone();
            shifted[k].data_mut()[j] += h;
            let (gp, _, lp, _) = eval(&shifted, Some(&weights));
            shifted[k].data_mut()[j] -= 2.0 * h;
            let (gm, _, lm, _) = eval(&shifted, Some(&weights));
            let numeric = (gp.value(lp).data()[0] - gm.value(lm).data()[0]) / (2.0 * h);
            let err = (a - numeric).abs();
            assert!(
                err <= 1e-6 * a.abs().max(numeric.abs()) + 1e-8,
                "{name}: input {k}[{j}] analytic {a} numeric {numeric}"
            );
        }
    }
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(7)
}

#[test]
fn elementwise_ops() {
    let mut r = rng();
    let a = random(&mut r, &[3, 4], -2.0, 2.0);
    let b = random(&mut r, &[3, 4], -2.0, 2.0);
    let row = random(&mut r, &[4], -2.0, 2.0);
    check("add", vec![a.clone(), row.clone()], |g, v| g.add(v[0], v[1]).unwrap());
    check("sub", vec![a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]).unwrap());
    check("mul", vec![a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]).unwrap());
    check("scale", vec![a.clone()], |g, v| g.scale(v[0], -1.7));
    check("add_scalar", vec![a.clone()], |g, v| g.add_scalar(v[0], 0.3));
    check("neg", vec![a.clone()], |g, v| g.neg(v[0]));
    check("square", vec![a.clone()], |g, v| g.square(v[0]));
    check("gelu", vec![a.clone()], |g, v| g.gelu(v[0]));
    check("sigmoid", vec![a.clone()], |g, v| g.sigmoid(v[0]));
    check("exp", vec![a.clone()], |g, v| g.exp(v[0]));
    let pos = random(&mut r, &[3, 4], 0.2, 3.0);
    check("log", vec![pos], |g, v| g.log(v[0]));
}

#[test]
fn piecewise_ops_away_from_kinks() {
    // Values kept at least 0.1 away from the break points.
    let data: Vec<f64> = (0..12)
        .map(|i| {
            if i % 2 == 0 {
                0.1 + i as f64 * 0.2
            } else {
                -0.1 - i as f64 * 0.2
            }
        })
        .collect();
    let x = Tensor::new(vec![3, 4], data).unwrap();
    check("relu", vec![x.clone()], |g, v| g.relu(v[0]));
    check("clamp", vec![x], |g, v| g.clamp(v[0], -1.0, 1.0));
}

#[test]
fn linear_algebra_ops() {
    let mut r = rng();
    check(
        "matmul",
        vec![
            random(&mut r, &[2, 3, 4], -1.0, 1.0),
            random(&mut r, &[4, 5], -1.0, 1.0),
        ],
        |g, v| g.matmul(v[0], v[1]).unwrap(),
    );
    check(
        "bmm",
        vec![
            random(&mut r, &[2, 3, 4], -1.0, 1.0),
            random(&mut r, &[2, 4, 2], -1.0, 1.0),
        ],
        |g, v| g.bmm(v[0], v[1], false).unwrap(),
    );
    check(
        "bmm_t",
        vec![
            random(&mut r, &[2, 3, 4], -1.0, 1.0),
            random(&mut r, &[2, 5, 4], -1.0, 1.0),
        ],
        |g, v| g.bmm(v[0], v[1], true).unwrap(),
    );
    for stride in [1, 2] {
        check(
            "conv1d",
            vec![
                random(&mut r, &[2, 9, 3], -1.0, 1.0),
                random(&mut r, &[3, 3, 4], -1.0, 1.0),
            ],
            move |g, v| g.conv1d(v[0], v[1], stride).unwrap(),
        );
    }
}

#[test]
fn normalization_ops() {
    let mut r = rng();
    let x = random(&mut r, &[4, 3, 5], -2.0, 2.0);
    let gamma = random(&mut r, &[5], 0.5, 1.5);
    let beta = random(&mut r, &[5], -0.5, 0.5);
    check(
        "batch_norm_train",
        vec![x.clone(), gamma.clone(), beta.clone()],
        |g, v| g.batch_norm_train(v[0], v[1], v[2], 1e-5).unwrap().0,
    );
    check(
        "batch_norm_eval",
        vec![x.clone(), gamma.clone(), beta.clone()],
        |g, v| {
            let mean = [0.1, -0.2, 0.0, 0.3, 0.05];
            let var = [1.0, 0.5, 2.0, 0.8, 1.2];
            g.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5).unwrap()
        },
    );
    check("layer_norm", vec![x.clone(), gamma, beta], |g, v| {
        g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap()
    });
    check("softmax", vec![x.clone()], |g, v| g.softmax(v[0]));
    check("log_softmax", vec![x], |g, v| g.log_softmax(v[0]));
}

#[test]
fn shape_and_reduction_ops() {
    let mut r = rng();
    let x = random(&mut r, &[2, 3, 4], -1.0, 1.0);
    let y = random(&mut r, &[2, 2, 4], -1.0, 1.0);
    check("reshape", vec![x.clone()], |g, v| g.reshape(v[0], &[6, 4]).unwrap());
    check("concat1", vec![x.clone(), y.clone()], |g, v| {
        g.concat(&[v[0], v[1]], 1).unwrap()
    });
    check("concat0", vec![x.clone(), x.clone()], |g, v| {
        g.concat(&[v[0], v[1]], 0).unwrap()
    });
    for axis in 0..3 {
        check("sum_axis", vec![x.clone()], move |g, v| g.sum_axis(v[0], axis).unwrap());
        check("mean_axis", vec![x.clone()], move |g, v| {
            g.mean_axis(v[0], axis).unwrap()
        });
    }
    check("sum", vec![x.clone()], |g, v| g.sum(v[0]));
    check("mean", vec![x.clone()], |g, v| g.mean(v[0]));
    let m = random(&mut r, &[4, 3], -1.0, 1.0);
    check("gather_rows", vec![m.clone()], |g, v| {
        g.gather_rows(v[0], &[2, 0, 2, 3, 1]).unwrap()
    });
    check("pick", vec![m.clone()], |g, v| g.pick(v[0], &[1, 0, 2, 2]).unwrap());
    check("row_norm", vec![m], |g, v| g.row_norm(v[0]).unwrap());
}

#[test]
fn dtw_op_with_distinct_elements() {
    let mut r = rng();
    check(
        "dtw",
        vec![
            random(&mut r, &[2, 4, 3], -1.0, 1.0),
            random(&mut r, &[2, 5, 3], -1.0, 1.0),
        ],
        |g, v| g.dtw(v[0], v[1]).unwrap(),
    );
}

fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize) -> Vec<f64> {
    let (b, l, ci) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (k, co) = (w.shape()[0], w.shape()[2]);
    let lo = (l - k) / stride + 1;
    let mut out = vec![0.0; b * lo * co];
    for bi in 0..b {
        for t in 0..lo {
            for o in 0..co {
                let mut acc = 0.0;
                for dk in 0..k {
                    for c in 0..ci {
                        acc += x.data()[(bi * l + t * stride + dk) * ci + c] * w.data()[(dk * ci + c) * co + o];
                    }
                }
                out[(bi * lo + t) * co + o] = acc;
            }
        }
    }
    out
}

#[test]
fn dense_kernels_match_naive_loops() {
    let mut r = rng();
    for (m, k, n) in [(1, 1, 1), (5, 7, 3), (9, 4, 11), (16, 16, 16)] {
        let a = random(&mut r, &[m, k], -1.0, 1.0);
        let b = random(&mut r, &[k, n], -1.0, 1.0);
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let c = g.matmul(va, vb).unwrap();
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|p| a.data()[i * k + p] * b.data()[p * n + j]).sum();
                assert!((g.value(c).data()[i * n + j] - want).abs() < 1e-12);
            }
        }
    }
    for stride in [1, 2, 3] {
        let x = random(&mut r, &[2, 13, 3], -1.0, 1.0);
        let w = random(&mut r, &[4, 3, 5], -1.0, 1.0);
        let mut g = Graph::new();
        let (vx, vw) = (g.constant(x.clone()), g.constant(w.clone()));
        let y = g.conv1d(vx, vw, stride).unwrap();
        for (a, b) in g.value(y).data().iter().zip(naive_conv(&x, &w, stride)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn single_precision_graph() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(Tensor::new(vec![2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap(), true);
    let y = g.square(x);
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.value(s).data()[0], 30.0);
    assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0, 6.0, 8.0]);
}
