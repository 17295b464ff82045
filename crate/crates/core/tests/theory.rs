use letlab_core::models::DeepLinearNet;
use letlab_core::tensor::Tensor;
use letlab_core::theory::{
    curvature_sweep, projection_gradient, projection_loss, verify_block_structure, verify_gradient_vanishing,
    verify_gradient_vanishing_fd, SweepConfig, DEFAULT_FD_STEP,
};
use proptest::prelude::*;

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    v.iter().map(|a| a / n).collect()
}

#[test]
fn gradient_vanishes_above_alignment_layer() {
    for seed in 0..10 {
        let net = DeepLinearNet::gaussian(3, 4, 0.7, seed).unwrap();
        let g = verify_gradient_vanishing(&net, 1, &[0.3, -1.0, 0.2, 0.5], &[1.0, 0.0, 0.4, -0.2]).unwrap();
        assert!(g < 1e-10, "seed {seed}: {g:e}");
    }
}

#[test]
fn vacuous_layer_set_returns_zero() {
    let net = DeepLinearNet::gaussian(3, 2, 0.7, 5).unwrap();
    assert_eq!(verify_gradient_vanishing(&net, 3, &[1.0, 0.5], &[0.2, 1.0]).unwrap(), 0.0);
}

#[test]
fn finite_difference_gradient_vanishes() {
    let net = DeepLinearNet::gaussian(4, 2, 0.8, 11).unwrap();
    let g = verify_gradient_vanishing_fd(&net, 2, &[0.6, -0.4], &[0.1, 0.9], 1e-5).unwrap();
    assert!(g < 1e-7, "{g:e}");
}

#[test]
fn autodiff_gradient_matches_finite_differences_below_k() {
    let net = DeepLinearNet::gaussian(4, 2, 0.8, 3).unwrap();
    let (x, t) = ([0.6, -0.4], [0.1, 0.9]);
    let grads = projection_gradient(&net, 3, &x, &t).unwrap();
    let flat: Vec<f64> = grads.iter().flat_map(|g| g.data().to_vec()).collect();
    let mut theta = net.flat();
    let h = 1e-6;
    for i in 0..theta.len() {
        let orig = theta[i];
        theta[i] = orig + h;
        let p = projection_loss(&theta, 4, 2, 3, &x, &t).unwrap();
        theta[i] = orig - h;
        let m = projection_loss(&theta, 4, 2, 3, &x, &t).unwrap();
        theta[i] = orig;
        let fd = (p - m) / (2.0 * h);
        assert!((fd - flat[i]).abs() < 1e-7, "entry {i}: {fd} vs {}", flat[i]);
    }
}

#[test]
fn single_live_block_at_depth_one() {
    let net = DeepLinearNet::gaussian(3, 2, 0.9, 21).unwrap();
    let r = verify_block_structure(&net, 1, &[0.8, 0.3], &[-0.2, 1.0], DEFAULT_FD_STEP).unwrap();
    assert_eq!(r.live_blocks(), vec![(0, 0)]);
    assert!((r.total_norm - r.block_norms[0][0]).abs() < 1e-8 * r.total_norm);
    assert!(r.total_norm > 0.0);
    assert!(r.forbidden_ok());
}

#[test]
fn four_live_blocks_at_depth_two() {
    let net = DeepLinearNet::gaussian(4, 2, 0.9, 8).unwrap();
    let r = verify_block_structure(&net, 2, &[0.8, 0.3], &[-0.2, 1.0], DEFAULT_FD_STEP).unwrap();
    assert_eq!(r.live_blocks(), vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
    assert!(r.forbidden_max < 1e-6);
    assert!(r.forbidden_ok() && r.bound_ok() && r.block_sum_ok());
    for i in 0..2 {
        for j in 0..2 {
            assert!(r.block_norms[i][j] > 0.0, "block ({i},{j}) should be live");
            assert!((r.block_norms[i][j] - r.block_norms[j][i]).abs() < 1e-12);
        }
    }
}

#[test]
fn earlier_alignment_has_smaller_bound() {
    let net = DeepLinearNet::gaussian(4, 2, 0.9, 8).unwrap();
    let (x, t) = ([0.8, 0.3], [-0.2, 1.0]);
    let r1 = verify_block_structure(&net, 1, &x, &t, DEFAULT_FD_STEP).unwrap();
    let r2 = verify_block_structure(&net, 2, &x, &t, DEFAULT_FD_STEP).unwrap();
    assert!(r1.bound <= r2.bound, "{} vs {}", r1.bound, r2.bound);
    assert!(r1.total_norm <= r1.bound && r2.total_norm <= r2.bound);
}

/// Hessian assembled column by column from central differences of the
/// autodiff gradient; an independent route to the same matrix.
fn hessian_from_gradients(net: &DeepLinearNet, k: usize, x: &[f64], t: &[f64], h: f64) -> Vec<Vec<f64>> {
    let (layers, dim) = (net.num_layers(), net.dim());
    let theta = net.flat();
    let grad_at = |th: &[f64]| -> Vec<f64> {
        let n = DeepLinearNet::from_flat(layers, dim, th).unwrap();
        projection_gradient(&n, k, x, t)
            .unwrap()
            .iter()
            .flat_map(|g: &Tensor| g.data().to_vec())
            .collect()
    };
    let n = theta.len();
    let mut cols = Vec::with_capacity(n);
    for j in 0..n {
        let mut p = theta.clone();
        p[j] += h;
        let mut m = theta.clone();
        m[j] -= h;
        let (gp, gm) = (grad_at(&p), grad_at(&m));
        cols.push(gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect::<Vec<f64>>());
    }
    (0..n).map(|i| (0..n).map(|j| 0.5 * (cols[j][i] + cols[i][j])).collect()).collect()
}

#[test]
fn dense_hessian_matches_gradient_differences() {
    let net = DeepLinearNet::gaussian(3, 2, 0.9, 4).unwrap();
    let (x, t) = ([0.5, -0.9], [0.7, 0.3]);
    for k in 1..=3 {
        let dense = {
            let theta = net.flat();
            letlab_core::theory::numeric_hessian(
                |th| projection_loss(th, 3, 2, k, &x, &t).unwrap(),
                &theta,
                DEFAULT_FD_STEP,
            )
            .unwrap()
        };
        let cross = hessian_from_gradients(&net, k, &x, &t, 1e-6);
        for (i, (a, b)) in dense.iter().zip(&cross).enumerate() {
            for (j, (u, v)) in a.iter().zip(b).enumerate() {
                assert!((u - v).abs() < 1e-5, "k={k} ({i},{j}): {u} vs {v}");
            }
        }
    }
}

#[test]
fn full_depth_alignment_can_light_every_block() {
    let net = DeepLinearNet::gaussian(3, 2, 0.9, 13).unwrap();
    let r = verify_block_structure(&net, 3, &[0.8, 0.3], &[-0.2, 1.0], DEFAULT_FD_STEP).unwrap();
    assert_eq!(r.live_blocks().len(), 9);
    assert_eq!(r.forbidden_max, 0.0);
    assert!(r.block_norms.iter().flatten().all(|&v| v > 0.0));
}

#[test]
fn identity_nets_reproduce_across_trials() {
    let mut cfg = SweepConfig::new(3, 2, vec![1, 2, 3], 5);
    cfg.weight_scale = None;
    let out = curvature_sweep(&cfg).unwrap();
    for &k in &cfg.ks {
        let norms: Vec<f64> = out.trials.iter().filter(|t| t.k == k).map(|t| t.report.total_norm).collect();
        assert!(norms.iter().all(|&v| v == norms[0]), "k={k}: {norms:?}");
    }
    for s in &out.per_k {
        assert_eq!(s.mean_total_norm, s.max_total_norm);
    }
    assert!(out.all_pass());
}

#[test]
fn default_sweep_passes_every_claim() {
    let cfg = SweepConfig::new(4, 2, vec![1, 2, 3], 10);
    let out = curvature_sweep(&cfg).unwrap();
    for c in &out.claims {
        assert!(c.pass, "{}: {}", c.name, c.detail);
    }
    assert!(out.all_pass());
    assert_eq!(out.trials.len(), 30);
    let bounds: Vec<f64> = out.per_k.iter().map(|s| s.bound).collect();
    assert!(bounds.windows(2).all(|w| w[0] <= w[1]), "{bounds:?}");
    for t in &out.trials {
        assert!(t.report.forbidden_max < 1e-6);
    }
}

#[test]
fn sweep_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out = curvature_sweep(&SweepConfig::new(3, 2, vec![1, 2], 2)).unwrap();
    out.write(dir.path()).unwrap();
    let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert!(summary.starts_with("k,"));
    assert_eq!(summary.lines().count(), 3);
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert!(json["claims"].is_array());
    assert!(dir.path().join("trials.csv").exists());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn forbidden_entries_vanish_for_random_nets(seed in 0u64..10_000, k in 1usize..=3, a in -1.0f64..1.0, b in -1.0f64..1.0) {
        let net = DeepLinearNet::gaussian(3, 2, 0.9, seed).unwrap();
        let x = unit(&[a + 1.5, b]);
        let r = verify_block_structure(&net, k, &x, &[0.3, -0.8], DEFAULT_FD_STEP).unwrap();
        prop_assert!(r.forbidden_max < r.forbidden_tolerance());
        prop_assert!(r.bound_ok());
        prop_assert!(r.max_asymmetry == 0.0);
    }
}
