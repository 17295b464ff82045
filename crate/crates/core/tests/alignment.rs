use letlab_core::alignment::{
    cosine_similarity_metric, interpolate_hidden, interpolate_to, proj_loss_cosine, proj_loss_logsum, AlignmentSpec,
    LossKind, Reduction,
};
use letlab_core::tensor::{gradcheck::grad_check, Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Reference interpolation with exact integer position arithmetic.
fn brute_force(h: &[f64], d_t: usize) -> Vec<f64> {
    let d_m = h.len();
    if d_t == 1 {
        return vec![h[0]];
    }
    (0..d_t)
        .map(|j| {
            let num = j * (d_m - 1);
            let den = d_t - 1;
            let lo = num / den;
            let rem = num % den;
            if rem == 0 {
                h[lo]
            } else {
                let beta = rem as f64 / den as f64;
                (1.0 - beta) * h[lo] + beta * h[lo + 1]
            }
        })
        .collect()
}

#[test]
fn interpolation_matches_integer_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..1000 {
        let d_m = rng.gen_range(2..=64);
        let d_t = rng.gen_range(2..=64);
        let h: Vec<f64> = (0..d_m).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let got = interpolate_hidden(&h, d_t).unwrap();
        let want = brute_force(&h, d_t);
        assert_eq!(got.len(), d_t);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-12, "d_m={d_m} d_t={d_t}: {a} vs {b}");
        }
        assert_eq!(got[0].to_bits(), h[0].to_bits());
        assert_eq!(got[d_t - 1].to_bits(), h[d_m - 1].to_bits());
    }
}

#[test]
fn same_width_interpolation_is_bitwise_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for d in 1..=64 {
        let h: Vec<f64> = (0..d).map(|_| rng.gen::<f64>() * 1e3 - 500.0).collect();
        let got = interpolate_hidden(&h, d).unwrap();
        assert!(got.iter().zip(&h).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn interpolation_op_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Tensor::new(vec![3, 7], (0..21).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let w = Tensor::new(vec![3, 4], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let err = grad_check(
        |g, v| {
            let y = interpolate_to(g, v[0], 4)?;
            let p = g.mul(y, v[1])?;
            g.sum(p)
        },
        &[x, w],
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-8, "{err}");
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
}

#[test]
fn projection_losses_match_finite_differences() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hm = random(&mut rng, &[2, 3, 5]);
        let ht = random(&mut rng, &[2, 3, 5]);
        for kind in [LossKind::Cosine, LossKind::Logsum] {
            for red in [Reduction::Mean, Reduction::Sum] {
                let err = grad_check(
                    |g, v| {
                        let t = g.constant(ht.clone());
                        kind.implementation().loss(g, v[0], t, red)
                    },
                    &[hm.clone()],
                    1e-6,
                )
                .unwrap();
                assert!(err < 1e-6, "seed {seed} {kind:?} {red:?}: {err}");
            }
        }
    }
}

#[test]
fn no_gradient_reaches_the_small_model_states() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::new();
    let hm = g.param(random(&mut rng, &[4, 6]));
    let ht = g.param(random(&mut rng, &[4, 3]));
    let hm_i = interpolate_to(&mut g, hm, 3).unwrap();
    let a = proj_loss_cosine(&mut g, hm_i, ht, Reduction::Mean).unwrap();
    let b = proj_loss_logsum(&mut g, hm_i, ht, Reduction::Sum).unwrap();
    let l = g.add(a, b).unwrap();
    let grads = g.backward(l).unwrap();
    assert!(grads.get(ht).data().iter().all(|&v| v == 0.0));
    assert!(grads.get(hm).max_abs() > 0.0);
}

#[test]
fn metric_matches_naive_cosine() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random(&mut rng, &[5, 4]);
    let b = random(&mut rng, &[5, 4]);
    let mut total = 0.0;
    for r in 0..5 {
        let x = &a.data()[r * 4..r * 4 + 4];
        let y = &b.data()[r * 4..r * 4 + 4];
        let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
        let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        total += dot / (nx * ny);
    }
    assert!((cosine_similarity_metric(&a, &b).unwrap() - total / 5.0).abs() < 1e-12);
}

#[test]
fn schedule_endpoints() {
    let spec = AlignmentSpec {
        lambda0: 0.3,
        s_stop: 1500,
        ..AlignmentSpec::default()
    };
    assert_eq!(spec.lambda_at(0), 0.3);
    assert_eq!(spec.lambda_at(1500), 0.0);
    assert_eq!(spec.lambda_at(9999), 0.0);
    assert_eq!(spec.lambda_at(750), 0.15);
    let mut prev = f64::INFINITY;
    for s in 0..=1600 {
        let l = spec.lambda_at(s);
        assert!(l <= prev);
        prev = l;
    }
}

fn loss_of(kind: LossKind, a: &Tensor, b: &Tensor) -> f64 {
    let mut g = Graph::new();
    let va = g.constant(a.clone());
    let vb = g.constant(b.clone());
    let l = kind.implementation().loss(&mut g, va, vb, Reduction::Mean).unwrap();
    g.value(l).item()
}

proptest! {
    #[test]
    fn losses_are_scale_invariant(
        a in proptest::collection::vec(-5.0f64..5.0, 8),
        b in proptest::collection::vec(-5.0f64..5.0, 8),
        s in 0.01f64..100.0,
        t in 0.01f64..100.0,
    ) {
        prop_assume!(a.iter().any(|v| v.abs() > 1e-3) && b.iter().any(|v| v.abs() > 1e-3));
        let ta = Tensor::new(vec![2, 4], a.clone()).unwrap();
        let tb = Tensor::new(vec![2, 4], b.clone()).unwrap();
        let sa = ta.map(|v| v * s);
        let sb = tb.map(|v| v * t);
        for kind in [LossKind::Cosine, LossKind::Logsum] {
            let (x, y) = (loss_of(kind, &ta, &tb), loss_of(kind, &sa, &sb));
            prop_assert!((x - y).abs() < 1e-9, "{:?}: {} vs {}", kind, x, y);
        }
    }

    #[test]
    fn interpolation_is_linear(
        d_m in 2usize..40,
        d_t in 1usize..40,
        seed in any::<u64>(),
        alpha in -3.0f64..3.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..d_m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..d_m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let combo: Vec<f64> = x.iter().zip(&y).map(|(a, b)| alpha * a + b).collect();
        let ix = interpolate_hidden(&x, d_t).unwrap();
        let iy = interpolate_hidden(&y, d_t).unwrap();
        let ic = interpolate_hidden(&combo, d_t).unwrap();
        for j in 0..d_t {
            prop_assert!((ic[j] - (alpha * ix[j] + iy[j])).abs() < 1e-12);
        }
    }
}
