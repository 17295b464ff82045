use std::sync::Arc;

use letlab_core::alignment::InterpolationPlan;
use letlab_core::tensor::gradcheck::grad_check;
use letlab_core::tensor::{Graph, Primitive, Tensor, Var};
use letlab_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Random values kept away from zero so kinked primitives stay differentiable under FD.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.gen_range(0.05..2.0);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Contracts an arbitrary output with fixed random weights so every output entry matters.
fn contract(g: &mut Graph, out: Var, weights: &Tensor) -> Result<Var> {
    let shape = g.value(out).shape().to_vec();
    let w = g.constant(weights.clone().reshape(&shape)?);
    let prod = g.mul(out, w)?;
    g.sum(prod)
}

#[test]
fn rms_norm_of_constant_row_is_one() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![1, 4], vec![2.5; 4]).unwrap());
    let gain = g.constant(Tensor::vector(vec![1.0; 4]));
    let y = g.rms_norm(x, gain, 1e-6).unwrap();
    for v in g.value(y).data() {
        assert!((v - 1.0).abs() < 1e-6, "{v}");
    }
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
    let y = g.row_softmax(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn matmul_identity_rows() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::matrix(2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap());
    let b = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let y = g.matmul(a, b).unwrap();
    assert_eq!(g.value(y).shape(), &[2]);
    assert_eq!(g.value(y).data(), &[1.0, 2.0]);
}

#[test]
fn shape_mismatch_names_primitive() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[4, 2]));
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("matmul") && err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    let err = g.add(a, b).unwrap_err().to_string();
    assert!(err.contains("add"), "{err}");
}

#[test]
fn non_finite_output_is_reported() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![0.0, 1.0]));
    let err = g.log(x).unwrap_err().to_string();
    assert!(err.contains("log"), "{err}");
}

#[test]
fn square_gradient_at_three() {
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(3.0));
    let y = g.mul(x, x).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(x).item(), 6.0);
}

#[test]
fn backward_rejects_non_scalar_and_foreign_vars() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.0, 2.0]));
    assert!(g.backward(x).is_err());
    let mut other = Graph::new();
    let y = other.param(Tensor::scalar(1.0));
    assert!(g.backward(y).is_err());
    assert!(g.add(x, y).is_err());
}

#[test]
fn unreachable_leaves_get_zero_gradient() {
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(2.0));
    let unused = g.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let y = g.scale(x, 4.0).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(unused).data(), &[0.0, 0.0, 0.0]);
    assert!(!grads.reached(unused));
}

#[test]
fn softmax_cross_entropy_gradient_is_probs_minus_onehot() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let logits = random_tensor(&mut rng, &[3, 5], -2.0, 2.0);
    let targets = [1usize, 4, 0];
    let mut g = Graph::new();
    let z = g.param(logits.clone());
    let lp = g.log_softmax(z).unwrap();
    let picked = g.pick_per_row(lp, &targets).unwrap();
    let s = g.sum(picked).unwrap();
    let loss = g.scale(s, -1.0).unwrap();
    let grads = g.backward(loss).unwrap();
    let gz = grads.get(z);
    for r in 0..3 {
        let row = &logits.data()[r * 5..(r + 1) * 5];
        let max = row.iter().cloned().fold(f64::MIN, f64::max);
        let z_sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        for c in 0..5 {
            let p = (row[c] - max).exp() / z_sum;
            let expected = p - if c == targets[r] { 1.0 } else { 0.0 };
            assert!((gz.data()[r * 5 + c] - expected).abs() < 1e-14);
        }
    }
}

#[test]
fn matmul_chain_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let params: Vec<Tensor> = (0..3).map(|_| random_tensor(&mut rng, &[4, 4], -1.0, 1.0)).collect();
    let w = random_tensor(&mut rng, &[4, 4], -1.0, 1.0);
    let err = grad_check(
        |g, p| {
            let ab = g.matmul(p[0], p[1])?;
            let abc = g.matmul(ab, p[2])?;
            contract(g, abc, &w)
        },
        &params,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "max relative error {err}");
}

#[test]
fn grad_check_linear_model_and_constant() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_tensor(&mut rng, &[6, 3], -1.0, 1.0);
    let y = random_tensor(&mut rng, &[6], -1.0, 1.0);
    let w = random_tensor(&mut rng, &[3], -1.0, 1.0);
    let err = grad_check(
        |g, p| {
            let xs = g.constant(x.clone());
            let ys = g.constant(y.clone());
            let pred = g.matmul(xs, p[0])?;
            let r = g.sub(pred, ys)?;
            let sq = g.mul(r, r)?;
            g.mean(sq)
        },
        &[w.clone()],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-7, "{err}");

    let err = grad_check(|g, _| Ok(g.constant(Tensor::scalar(4.2))), &[w], 1e-5).unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn grad_check_rejects_non_scalar() {
    let w = Tensor::vector(vec![1.0, 2.0]);
    assert!(grad_check(|_, p| Ok(p[0]), &[w], 1e-5).is_err());
}

/// Builds inputs for one primitive and the contraction weights of its output.
fn primitive_case(prim: &Primitive, rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Tensor) {
    let inputs = match prim {
        Primitive::MatMul => vec![
            random_tensor(rng, &[2, 3, 4], -1.0, 1.0),
            random_tensor(rng, &[4, 5], -1.0, 1.0),
        ],
        Primitive::MatMulT => vec![
            random_tensor(rng, &[3, 4], -1.0, 1.0),
            random_tensor(rng, &[5, 4], -1.0, 1.0),
        ],
        Primitive::Add | Primitive::Sub | Primitive::Mul => vec![
            random_tensor(rng, &[3, 4], -2.0, 2.0),
            random_tensor(rng, &[3, 4], -2.0, 2.0),
        ],
        Primitive::RmsNorm { .. } => vec![
            random_tensor(rng, &[3, 5], -2.0, 2.0),
            random_tensor(rng, &[5], 0.5, 1.5),
        ],
        Primitive::Relu => vec![away_from_zero(rng, &[4, 3])],
        Primitive::Log => vec![random_tensor(rng, &[4, 3], 0.2, 3.0)],
        Primitive::GatherRows { .. } => vec![random_tensor(rng, &[5, 3], -1.0, 1.0)],
        Primitive::PickPerRow { .. } => vec![random_tensor(rng, &[4, 5], -1.0, 1.0)],
        Primitive::Concat => vec![
            random_tensor(rng, &[2, 3, 2], -1.0, 1.0),
            random_tensor(rng, &[2, 3, 4], -1.0, 1.0),
        ],
        Primitive::Rope { .. } => vec![random_tensor(rng, &[2, 5, 2, 4], -1.0, 1.0)],
        Primitive::CausalAttention => vec![
            random_tensor(rng, &[2, 4, 4, 3], -1.0, 1.0),
            random_tensor(rng, &[2, 4, 2, 3], -1.0, 1.0),
            random_tensor(rng, &[2, 4, 2, 3], -1.0, 1.0),
        ],
        _ => vec![random_tensor(rng, &[3, 4], -2.0, 2.0)],
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = g.apply(prim, &vars).unwrap();
    let shape = g.value(out).shape().to_vec();
    let n: usize = shape.iter().product::<usize>().max(1);
    let weights = random_tensor(rng, &[n], -1.0, 1.0).reshape(&shape).unwrap();
    (inputs, weights)
}

fn all_primitives() -> Vec<Primitive> {
    vec![
        Primitive::MatMul,
        Primitive::MatMulT,
        Primitive::Add,
        Primitive::Sub,
        Primitive::Mul,
        Primitive::Scale(-1.7),
        Primitive::Relu,
        Primitive::Gelu,
        Primitive::Silu,
        Primitive::RmsNorm { eps: 1e-6 },
        Primitive::L2NormalizeRows { eps: 1e-12 },
        Primitive::RowSoftmax,
        Primitive::LogSoftmax,
        Primitive::Log,
        Primitive::Sum,
        Primitive::Mean,
        Primitive::SumLastDim,
        Primitive::LogSumExpLastDim,
        Primitive::GatherRows {
            ids: vec![4, 0, 4, 2],
            prefix: vec![2, 2],
        },
        Primitive::PickPerRow { index: vec![0, 4, 2, 2] },
        Primitive::Transpose,
        Primitive::Concat,
        Primitive::Reshape(vec![4, 3]),
        Primitive::Rope { base: 10_000.0 },
        Primitive::CausalAttention,
    ]
}

#[test]
fn every_primitive_matches_finite_differences_over_twenty_seeds() {
    for prim in all_primitives() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (inputs, weights) = primitive_case(&prim, &mut rng);
            let err = grad_check(
                |g, p| {
                    let out = g.apply(&prim, p)?;
                    contract(g, out, &weights)
                },
                &inputs,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-5, "{} seed {seed}: relative error {err}", prim.name());
        }
    }
}

#[test]
fn interpolation_primitive_matches_finite_differences() {
    let plan = Arc::new(InterpolationPlan::new(7, 4).unwrap());
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&mut rng, &[3, 7], -1.0, 1.0);
        let w = random_tensor(&mut rng, &[3, 4], -1.0, 1.0);
        let err = grad_check(
            |g, p| {
                let y = g.interpolate_last_dim(p[0], plan.clone())?;
                contract(g, y, &w)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "seed {seed}: {err}");
    }
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    let b = random_tensor(&mut rng, &[4, 2], -1.0, 1.0);
    let build = |g: &mut Graph, which: u8| -> (Var, Var, Var) {
        let x = g.param(a.clone());
        let w = g.param(b.clone());
        let h = g.matmul(x, w).unwrap();
        let l1 = {
            let s = g.silu(h).unwrap();
            g.sum(s).unwrap()
        };
        let l2 = {
            let sq = g.mul(h, h).unwrap();
            g.mean(sq).unwrap()
        };
        let out = match which {
            0 => l1,
            1 => l2,
            _ => g.add(l1, l2).unwrap(),
        };
        (x, w, out)
    };
    let grads_of = |which| {
        let mut g = Graph::new();
        let (x, w, out) = build(&mut g, which);
        let gr = g.backward(out).unwrap();
        (gr.get(x), gr.get(w))
    };
    let (x1, w1) = grads_of(0);
    let (x2, w2) = grads_of(1);
    let (xs, ws) = grads_of(2);
    for ((s, a), b) in xs.data().iter().zip(x1.data()).zip(x2.data()) {
        assert!((s - (a + b)).abs() <= 1e-15 * (1.0 + s.abs()));
    }
    for ((s, a), b) in ws.data().iter().zip(w1.data()).zip(w2.data()) {
        assert!((s - (a + b)).abs() <= 1e-15 * (1.0 + s.abs()));
    }
}

#[test]
fn backward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let q = random_tensor(&mut rng, &[2, 6, 4, 4], -1.0, 1.0);
    let k = random_tensor(&mut rng, &[2, 6, 2, 4], -1.0, 1.0);
    let v = random_tensor(&mut rng, &[2, 6, 2, 4], -1.0, 1.0);
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.param(q), g.param(k), g.param(v));
    let o = g.causal_attention(qv, kv, vv).unwrap();
    let r = g.rope(o, 10_000.0).unwrap();
    let loss = g.mean(r).unwrap();
    let first = g.backward(loss).unwrap();
    let second = g.backward(loss).unwrap();
    for var in [qv, kv, vv] {
        let (a, b) = (first.get(var), second.get(var));
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
