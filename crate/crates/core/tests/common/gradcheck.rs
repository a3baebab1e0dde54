//! Central finite-difference oracle for the differentiation graph.

use promptseg::tensor::{Graph, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;

/// Builds a differentiable function of `inputs` inside `g`.
pub type Build = dyn for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Var<'g, f64>;

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.5..1.5))
}

/// Scalarizes `out` as `Σ out ⊙ probe` so every output element matters.
fn scalar_loss(g: &Graph<f64>, inputs: &[Tensor<f64>], probe: Option<&Tensor<f64>>, build: &Build) -> (f64, Vec<Tensor<f64>>) {
    let leaves: Vec<Var<'_, f64>> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(g, &leaves);
    let loss = match probe {
        Some(p) => out.mul(g.constant(p.clone())).unwrap().sum(),
        None => out,
    };
    let value = loss.value().item();
    if !g.grad_enabled() {
        return (value, Vec::new());
    }
    let grads = g.backward(loss).unwrap();
    let gs = leaves
        .iter()
        .map(|&l| grads.get(l).cloned().unwrap_or_else(|| Tensor::zeros(&l.shape())))
        .collect();
    (value, gs)
}

/// Largest relative error (‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂))
/// over all inputs. `scalar_output` skips the random probe for losses.
pub fn max_relative_error(
    rng: &mut ChaCha8Rng,
    inputs: &[Tensor<f64>],
    scalar_output: bool,
    build: &Build,
) -> f64 {
    let probe = if scalar_output {
        None
    } else {
        let g = Graph::<f64>::no_grad();
        let leaves: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let shape = build(&g, &leaves).shape();
        Some(random_tensor(rng, &shape))
    };
    let (_, analytic) = scalar_loss(&Graph::new(), inputs, probe.as_ref(), build);
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.len()];
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= STEP;
            let (lp, _) = scalar_loss(&Graph::no_grad(), &plus, probe.as_ref(), build);
            let (lm, _) = scalar_loss(&Graph::no_grad(), &minus, probe.as_ref(), build);
            numeric[j] = (lp - lm) / (2.0 * STEP);
        }
        let a = analytic[i].data();
        let diff: f64 = a.iter().zip(&numeric).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
        let scale = na.max(nn);
        let rel = if scale < 1e-10 { diff } else { diff / scale };
        worst = worst.max(rel);
    }
    worst
}

/// One randomized case: the input tensors and the function under test.
pub struct Case {
    pub inputs: Vec<Tensor<f64>>,
    pub scalar_output: bool,
    pub build: Box<Build>,
}

pub struct OpSuite {
    pub name: &'static str,
    pub make: fn(&mut ChaCha8Rng) -> Case,
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.gen_range(lo..=hi)
}

fn case(inputs: Vec<Tensor<f64>>, build: Box<Build>) -> Case {
    Case { inputs, scalar_output: false, build }
}

pub fn suites() -> Vec<OpSuite> {
    vec![
        OpSuite { name: "add", make: |r| {
            let s = [dim(r, 1, 4), dim(r, 1, 5)];
            case(vec![random_tensor(r, &s), random_tensor(r, &s)], Box::new(|_, v| v[0].add(v[1]).unwrap()))
        }},
        OpSuite { name: "sub", make: |r| {
            let s = [dim(r, 1, 4), dim(r, 1, 5)];
            case(vec![random_tensor(r, &s), random_tensor(r, &s)], Box::new(|_, v| v[0].sub(v[1]).unwrap()))
        }},
        OpSuite { name: "mul", make: |r| {
            let s = [dim(r, 1, 4), dim(r, 1, 5)];
            case(vec![random_tensor(r, &s), random_tensor(r, &s)], Box::new(|_, v| v[0].mul(v[1]).unwrap()))
        }},
        OpSuite { name: "scale", make: |r| {
            let c: f64 = r.gen_range(-3.0..3.0);
            let s = [dim(r, 1, 6)];
            case(vec![random_tensor(r, &s)], Box::new(move |_, v| v[0].scale(c)))
        }},
        OpSuite { name: "add_bias", make: |r| {
            let (m, n) = (dim(r, 1, 4), dim(r, 1, 5));
            case(vec![random_tensor(r, &[m, n]), random_tensor(r, &[n])], Box::new(|_, v| v[0].add_bias(v[1]).unwrap()))
        }},
        OpSuite { name: "broadcast_rows", make: |r| {
            let (m, n) = (dim(r, 1, 5), dim(r, 1, 5));
            case(vec![random_tensor(r, &[1, n])], Box::new(move |_, v| v[0].broadcast_rows(m).unwrap()))
        }},
        OpSuite { name: "matmul", make: |r| {
            let (m, k, n) = (dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 4));
            case(vec![random_tensor(r, &[m, k]), random_tensor(r, &[k, n])], Box::new(|_, v| v[0].matmul(v[1]).unwrap()))
        }},
        OpSuite { name: "matmul_bt", make: |r| {
            let (m, k, n) = (dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 4));
            case(vec![random_tensor(r, &[m, k]), random_tensor(r, &[n, k])], Box::new(|_, v| v[0].matmul_bt(v[1]).unwrap()))
        }},
        OpSuite { name: "transpose", make: |r| {
            let s = [dim(r, 1, 4), dim(r, 1, 5)];
            case(vec![random_tensor(r, &s)], Box::new(|_, v| v[0].transpose().unwrap()))
        }},
        OpSuite { name: "reshape", make: |r| {
            let (a, b) = (dim(r, 1, 4), dim(r, 1, 4));
            case(vec![random_tensor(r, &[a, b])], Box::new(move |_, v| v[0].reshape(&[b, a]).unwrap()))
        }},
        OpSuite { name: "narrow_concat_cols", make: |r| {
            let (m, n) = (dim(r, 1, 4), dim(r, 2, 6));
            let split = dim(r, 1, n - 1);
            case(vec![random_tensor(r, &[m, n])], Box::new(move |g, v| {
                let left = v[0].narrow_cols(0, split).unwrap();
                let right = v[0].narrow_cols(split, n - split).unwrap();
                g.concat_cols(&[right, left]).unwrap()
            }))
        }},
        OpSuite { name: "softmax", make: |r| {
            let s = [dim(r, 1, 3), dim(r, 1, 4), dim(r, 1, 4)];
            let axis = dim(r, 0, 2);
            case(vec![random_tensor(r, &s)], Box::new(move |_, v| v[0].softmax(axis).unwrap()))
        }},
        OpSuite { name: "layer_norm", make: |r| {
            let (m, d) = (dim(r, 1, 4), dim(r, 2, 6));
            case(
                vec![random_tensor(r, &[m, d]), random_tensor(r, &[d]), random_tensor(r, &[d])],
                Box::new(|_, v| v[0].layer_norm(v[1], v[2], 1e-5).unwrap()),
            )
        }},
        OpSuite { name: "gelu", make: |r| {
            let s = [dim(r, 1, 8)];
            case(vec![random_tensor(r, &s)], Box::new(|_, v| v[0].gelu()))
        }},
        OpSuite { name: "sigmoid", make: |r| {
            let s = [dim(r, 1, 8)];
            case(vec![random_tensor(r, &s)], Box::new(|_, v| v[0].sigmoid()))
        }},
        OpSuite { name: "conv2d", make: |r| {
            let (c, f, k) = (dim(r, 1, 2), dim(r, 1, 3), dim(r, 1, 3));
            let stride = dim(r, 1, 2);
            let pad = dim(r, 0, 1);
            let h = dim(r, k.saturating_sub(2 * pad).max(1), 5);
            let w = dim(r, k.saturating_sub(2 * pad).max(1), 5);
            case(
                vec![random_tensor(r, &[c, h, w]), random_tensor(r, &[f, c, k, k]), random_tensor(r, &[f])],
                Box::new(move |_, v| v[0].conv2d(v[1], v[2], stride, pad).unwrap()),
            )
        }},
        OpSuite { name: "conv_transpose2d", make: |r| {
            let (c, f, k) = (dim(r, 1, 2), dim(r, 1, 3), dim(r, 1, 3));
            let stride = dim(r, 1, 3);
            let (h, w) = (dim(r, 1, 3), dim(r, 1, 3));
            case(
                vec![random_tensor(r, &[c, h, w]), random_tensor(r, &[c, f, k, k]), random_tensor(r, &[f])],
                Box::new(move |_, v| v[0].conv_transpose2d(v[1], v[2], stride).unwrap()),
            )
        }},
        OpSuite { name: "resize_bilinear", make: |r| {
            let (c, h, w) = (dim(r, 1, 2), dim(r, 1, 4), dim(r, 1, 4));
            let (oh, ow) = (dim(r, 1, 7), dim(r, 1, 7));
            case(vec![random_tensor(r, &[c, h, w])], Box::new(move |_, v| v[0].resize_bilinear(oh, ow).unwrap()))
        }},
        OpSuite { name: "sum", make: |r| {
            let s = [dim(r, 1, 4), dim(r, 1, 4)];
            case(vec![random_tensor(r, &s)], Box::new(|_, v| v[0].sum()))
        }},
        OpSuite { name: "mean", make: |r| {
            let s = [dim(r, 1, 4), dim(r, 1, 4)];
            case(vec![random_tensor(r, &s)], Box::new(|_, v| v[0].mean()))
        }},
        OpSuite { name: "normalized_focal_loss", make: |r| {
            let n = dim(r, 1, 12);
            let target: Vec<bool> = (0..n).map(|_| r.gen_bool(0.5)).collect();
            let gamma = [0.0, 1.0, 2.0, 2.5][dim(r, 0, 3)];
            let logits = Tensor::from_fn(&[1, n], |_| r.gen_range(-3.0..3.0));
            Case {
                inputs: vec![logits],
                scalar_output: true,
                build: Box::new(move |_, v| v[0].normalized_focal_loss(&target, gamma, 1e-8).unwrap()),
            }
        }},
        OpSuite { name: "attention_composite", make: |r| {
            let (n, d) = (dim(r, 2, 4), dim(r, 2, 4));
            case(
                vec![random_tensor(r, &[n, d]), random_tensor(r, &[d, d]), random_tensor(r, &[d, d]), random_tensor(r, &[d])],
                Box::new(|_, v| {
                    let q = v[0].matmul(v[1]).unwrap();
                    let k = v[0].matmul(v[2]).unwrap();
                    let att = q.matmul_bt(k).unwrap().scale(0.5).softmax(1).unwrap();
                    let y = att.matmul(v[0]).unwrap();
                    let ones = y.graph().constant(Tensor::ones(&[v[3].shape()[0]]));
                    y.add_bias(v[3]).unwrap().layer_norm(ones, v[3], 1e-5).unwrap().gelu()
                }),
            )
        }},
    ]
}
