//! Finite-difference gradient verification.
//!
//! The oracle here never touches [`Graph::backward`]: it re-evaluates the
//! forward pass at perturbed inputs and forms central differences. Each
//! registered case builds a scalar loss over one op (plus the minimal
//! plumbing needed to make the loss sensitive to every input element), so a
//! passing sweep certifies every backward rule independently.
//!
//! Comparison uses a scaled error `|a - n| / max(1, |a|, |n|)`: relative for
//! large gradients, absolute for sub-unit ones, which keeps the check
//! meaningful where f32 forward rounding dominates the difference quotient.

use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;
use rand::Rng;

/// One op under test: initial input tensors plus a builder that inserts them
/// as grad-requiring leaves and returns (scalar loss, leaf ids).
pub struct GradCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub build: fn(&mut Graph, &[Tensor]) -> (NodeId, Vec<NodeId>),
}

/// Worst scaled error for one case at the given finite-difference step.
pub fn check_case(case: &GradCase, step: f64) -> f64 {
    // Analytic gradients from one backward pass.
    let mut g = Graph::new();
    let (loss, params) = (case.build)(&mut g, &case.inputs);
    g.backward(loss).expect("backward failed in gradient check");
    let analytic: Vec<Vec<f32>> = params
        .iter()
        .map(|&p| g.grad(p).map(<[f32]>::to_vec).unwrap_or_default())
        .collect();

    let eval = |inputs: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let (loss, _) = (case.build)(&mut g, inputs);
        g.value(loss).data[0] as f64
    };

    let mut worst = 0.0f64;
    for (pi, input) in case.inputs.iter().enumerate() {
        for j in 0..input.data.len() {
            let mut plus = case.inputs.to_vec();
            let mut minus = case.inputs.to_vec();
            let xp = (input.data[j] as f64 + step) as f32;
            let xm = (input.data[j] as f64 - step) as f32;
            plus[pi].data[j] = xp;
            minus[pi].data[j] = xm;
            // Use the realized (f32-rounded) step to avoid quantization bias.
            let h = (xp as f64 - xm as f64) / 2.0;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic[pi].get(j).copied().unwrap_or(0.0) as f64;
            let err = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
            if err > worst {
                worst = err;
            }
        }
    }
    worst
}

fn rand_tensor<R: Rng>(rng: &mut R, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0f32)).collect();
    Tensor::new(shape, data)
}

/// Random values bounded away from zero so ReLU kinks stay out of reach of
/// the finite-difference step.
fn rand_tensor_off_kink<R: Rng>(rng: &mut R, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.2..1.0f32);
            if rng.gen::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data)
}

/// Fixed mixing vector making reduction losses sensitive to each element.
fn probe(n: usize) -> Tensor {
    let data = (0..n)
        .map(|j| {
            let base = 0.35 + 0.13 * (j % 7) as f32;
            if j % 2 == 0 {
                base
            } else {
                -base
            }
        })
        .collect();
    Tensor::new(vec![n], data)
}

fn probe_rows(rows: usize, cols: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        data.extend_from_slice(&probe(cols).data.iter().map(|v| v * (1.0 + 0.21 * r as f32)).collect::<Vec<_>>());
    }
    Tensor::new(vec![rows, cols], data)
}

/// The full registry: every differentiable op, each exercised with random
/// inputs drawn from `rng`.
pub fn all_cases<R: Rng>(rng: &mut R) -> Vec<GradCase> {
    vec![
        GradCase {
            name: "matmul",
            inputs: vec![rand_tensor(rng, vec![3, 4]), rand_tensor(rng, vec![4, 2])],
            build: |g, t| {
                let a = g.leaf(t[0].clone(), true);
                let b = g.leaf(t[1].clone(), true);
                let m = g.matmul(a, b).unwrap();
                (g.sum(m), vec![a, b])
            },
        },
        GradCase {
            name: "matmul_trans_b",
            inputs: vec![rand_tensor(rng, vec![3, 4]), rand_tensor(rng, vec![2, 4])],
            build: |g, t| {
                let a = g.leaf(t[0].clone(), true);
                let b = g.leaf(t[1].clone(), true);
                let m = g.matmul_trans_b(a, b).unwrap();
                (g.sum(m), vec![a, b])
            },
        },
        GradCase {
            name: "add",
            inputs: vec![rand_tensor(rng, vec![3, 4]), rand_tensor(rng, vec![3, 4])],
            build: |g, t| {
                let a = g.leaf(t[0].clone(), true);
                let b = g.leaf(t[1].clone(), true);
                let m = g.add(a, b);
                let p = g.constant(probe_rows(3, 4));
                let d = g.row_dot(m, p);
                (g.sum(d), vec![a, b])
            },
        },
        GradCase {
            name: "add_bias",
            inputs: vec![rand_tensor(rng, vec![3, 4]), rand_tensor(rng, vec![4])],
            build: |g, t| {
                let x = g.leaf(t[0].clone(), true);
                let b = g.leaf(t[1].clone(), true);
                let m = g.add_bias(x, b);
                let p = g.constant(probe_rows(3, 4));
                let d = g.row_dot(m, p);
                (g.sum(d), vec![x, b])
            },
        },
        GradCase {
            name: "scale",
            inputs: vec![rand_tensor(rng, vec![3, 4])],
            build: |g, t| {
                let x = g.leaf(t[0].clone(), true);
                let m = g.scale(x, 1.7);
                let p = g.constant(probe_rows(3, 4));
                let d = g.row_dot(m, p);
                (g.sum(d), vec![x])
            },
        },
        GradCase {
            name: "weighted_sum",
            inputs: vec![
                rand_tensor(rng, vec![3]),
                rand_tensor(rng, vec![2, 3]),
                rand_tensor(rng, vec![2, 3]),
                rand_tensor(rng, vec![2, 3]),
            ],
            build: |g, t| {
                let w = g.leaf(t[0].clone(), true);
                let xs: Vec<NodeId> = t[1..].iter().map(|x| g.leaf(x.clone(), true)).collect();
                let m = g.weighted_sum(w, &xs);
                let p = g.constant(probe_rows(2, 3));
                let d = g.row_dot(m, p);
                let loss = g.sum(d);
                let mut params = vec![w];
                params.extend(xs);
                (loss, params)
            },
        },
        GradCase {
            name: "relu",
            inputs: vec![rand_tensor_off_kink(rng, vec![3, 4])],
            build: |g, t| {
                let x = g.leaf(t[0].clone(), true);
                let m = g.relu(x);
                let p = g.constant(probe_rows(3, 4));
                let d = g.row_dot(m, p);
                (g.sum(d), vec![x])
            },
        },
        GradCase {
            name: "layer_norm",
            inputs: vec![
                rand_tensor(rng, vec![3, 4]),
                rand_tensor_off_kink(rng, vec![4]),
                rand_tensor(rng, vec![4]),
            ],
            build: |g, t| {
                let x = g.leaf(t[0].clone(), true);
                let gain = g.leaf(t[1].clone(), true);
                let shift = g.leaf(t[2].clone(), true);
                let m = g.layer_norm(x, gain, shift);
                let p = g.constant(probe_rows(3, 4));
                let d = g.row_dot(m, p);
                (g.sum(d), vec![x, gain, shift])
            },
        },
        GradCase {
            name: "softmax_axis1",
            inputs: vec![rand_tensor(rng, vec![3, 4])],
            build: |g, t| {
                let x = g.leaf(t[0].clone(), true);
                let s = g.softmax(x, 1);
                let p = g.constant(probe_rows(3, 4));
                let d = g.row_dot(s, p);
                (g.sum(d), vec![x])
            },
        },
        GradCase {
            name: "softmax_axis0",
            inputs: vec![rand_tensor(rng, vec![3, 4])],
            build: |g, t| {
                let x = g.leaf(t[0].clone(), true);
                let s = g.softmax(x, 0);
                let p = g.constant(probe_rows(3, 4));
                let d = g.row_dot(s, p);
                (g.sum(d), vec![x])
            },
        },
        GradCase {
            name: "entropy_of_softmax",
            inputs: vec![rand_tensor(rng, vec![3, 4])],
            build: |g, t| {
                let x = g.leaf(t[0].clone(), true);
                let s = g.softmax(x, 1);
                let h = g.entropy(s).unwrap();
                (h, vec![x])
            },
        },
        GradCase {
            name: "sum",
            inputs: vec![rand_tensor(rng, vec![3, 4])],
            build: |g, t| {
                let x = g.leaf(t[0].clone(), true);
                (g.sum(x), vec![x])
            },
        },
        GradCase {
            name: "add_n",
            inputs: vec![
                rand_tensor(rng, vec![2, 3]),
                rand_tensor(rng, vec![2, 3]),
                rand_tensor(rng, vec![2, 3]),
            ],
            build: |g, t| {
                let xs: Vec<NodeId> = t.iter().map(|x| g.leaf(x.clone(), true)).collect();
                let m = g.add_n(&xs);
                let p = g.constant(probe_rows(2, 3));
                let d = g.row_dot(m, p);
                (g.sum(d), xs)
            },
        },
        GradCase {
            name: "gather",
            inputs: vec![rand_tensor(rng, vec![5, 3])],
            build: |g, t| {
                let x = g.leaf(t[0].clone(), true);
                let m = g.gather(x, vec![0, 2, 2, 4]);
                let p = g.constant(probe_rows(4, 3));
                let d = g.row_dot(m, p);
                (g.sum(d), vec![x])
            },
        },
        GradCase {
            name: "slice_cols",
            inputs: vec![rand_tensor(rng, vec![3, 6])],
            build: |g, t| {
                let x = g.leaf(t[0].clone(), true);
                let m = g.slice_cols(x, 1, 3);
                let p = g.constant(probe_rows(3, 3));
                let d = g.row_dot(m, p);
                (g.sum(d), vec![x])
            },
        },
        GradCase {
            name: "concat_cols",
            inputs: vec![rand_tensor(rng, vec![3, 2]), rand_tensor(rng, vec![3, 3])],
            build: |g, t| {
                let a = g.leaf(t[0].clone(), true);
                let b = g.leaf(t[1].clone(), true);
                let m = g.concat_cols(&[a, b]);
                let p = g.constant(probe_rows(3, 5));
                let d = g.row_dot(m, p);
                (g.sum(d), vec![a, b])
            },
        },
        GradCase {
            name: "row_dot",
            inputs: vec![rand_tensor(rng, vec![3, 4]), rand_tensor(rng, vec![3, 4])],
            build: |g, t| {
                let a = g.leaf(t[0].clone(), true);
                let b = g.leaf(t[1].clone(), true);
                let d = g.row_dot(a, b);
                let p = g.constant(probe(3));
                let e = g.stack_cols(&[d]);
                let q = g.stack_cols(&[p]);
                let f = g.row_dot(e, q);
                (g.sum(f), vec![a, b])
            },
        },
        GradCase {
            name: "col_scale",
            inputs: vec![rand_tensor(rng, vec![3, 4]), rand_tensor(rng, vec![3])],
            build: |g, t| {
                let x = g.leaf(t[0].clone(), true);
                let w = g.leaf(t[1].clone(), true);
                let m = g.col_scale(x, w);
                let p = g.constant(probe_rows(3, 4));
                let d = g.row_dot(m, p);
                (g.sum(d), vec![x, w])
            },
        },
        GradCase {
            name: "stack_cols",
            inputs: vec![
                rand_tensor(rng, vec![4]),
                rand_tensor(rng, vec![4]),
                rand_tensor(rng, vec![4]),
            ],
            build: |g, t| {
                let xs: Vec<NodeId> = t.iter().map(|x| g.leaf(x.clone(), true)).collect();
                let m = g.stack_cols(&xs);
                let p = g.constant(probe_rows(4, 3));
                let d = g.row_dot(m, p);
                (g.sum(d), xs)
            },
        },
        GradCase {
            name: "cross_entropy",
            inputs: vec![rand_tensor(rng, vec![4, 5])],
            build: |g, t| {
                let x = g.leaf(t[0].clone(), true);
                (g.cross_entropy(x, vec![0, 3, 1, 4]), vec![x])
            },
        },
        GradCase {
            name: "ensemble_entropy_chain",
            inputs: vec![
                rand_tensor(rng, vec![3]),
                rand_tensor(rng, vec![4, 5]),
                rand_tensor(rng, vec![4, 5]),
                rand_tensor(rng, vec![4, 5]),
            ],
            build: |g, t| {
                // The test-time adaptation gradient path: mixing logits from
                // R candidate adapters with softmax weights, then entropy.
                let beta = g.leaf(t[0].clone(), true);
                let hs: Vec<NodeId> = t[1..].iter().map(|x| g.leaf(x.clone(), true)).collect();
                let alpha = g.softmax(beta, 0);
                let mixed = g.weighted_sum(alpha, &hs);
                let probs = g.softmax(mixed, 1);
                let h = g.entropy(probs).unwrap();
                let mut params = vec![beta];
                params.extend(hs);
                (h, params)
            },
        },
    ]
}
