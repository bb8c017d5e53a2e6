use htfl_core::numcore::{seeded_rng, sgd_step, softmax_row, truncated_svd, SgdConfig, SgdState, Tape, Tensor};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;

#[test]
fn singular_values_match_nalgebra() {
    let mut rng = seeded_rng(42);
    for (m, n) in [(8, 6), (6, 8), (5, 5), (12, 3)] {
        let data: Vec<f32> = (0..m * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ours = truncated_svd(&Tensor::matrix(m, n, data.clone()).unwrap(), 1.0).unwrap();
        let reference = DMatrix::from_row_slice(m, n, &data.iter().map(|&v| v as f64).collect::<Vec<_>>());
        let mut want: Vec<f64> = reference.svd(false, false).singular_values.iter().copied().collect();
        want.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert_eq!(ours.rank, m.min(n));
        for (a, b) in ours.s.iter().zip(&want) {
            assert!((*a as f64 - b).abs() < 1e-4, "{m}x{n}: {a} vs {b}");
        }
        let back = ours.reconstruct();
        for (a, b) in back.data().iter().zip(&data) {
            assert!((a - b).abs() < 1e-4);
        }
    }
}

#[test]
fn energy_threshold_picks_smallest_rank() {
    // singular values 3, 2, 1 → energies 9/14, 13/14, 1
    let d = Tensor::matrix(3, 3, vec![3.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
    assert_eq!(truncated_svd(&d, 0.6).unwrap().rank, 1);
    assert_eq!(truncated_svd(&d, 0.9).unwrap().rank, 2);
    assert_eq!(truncated_svd(&d, 0.95).unwrap().rank, 3);
    assert_eq!(truncated_svd(&Tensor::zeros(vec![2, 3]), 0.9).unwrap().rank, 0);
}

#[test]
fn two_layer_mlp_trains_on_xor_like_data() {
    let x = vec![0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0];
    let y = [0usize, 1, 1, 0];
    let mut rng = seeded_rng(3);
    let mut w1 = Tensor::new(vec![2, 8], (0..16).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap().with_grad();
    let mut b1 = Tensor::zeros(vec![8]).with_grad();
    let mut w2 = Tensor::new(vec![8, 2], (0..16).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap().with_grad();
    let mut b2 = Tensor::zeros(vec![2]).with_grad();
    let cfg = SgdConfig {
        learning_rate: 0.5,
        ..Default::default()
    };
    let mut st = SgdState::new();
    let mut last = f32::INFINITY;
    for _ in 0..500 {
        let mut t = Tape::new();
        let (vw1, vb1, vw2, vb2) = (t.leaf(&w1), t.leaf(&b1), t.leaf(&w2), t.leaf(&b2));
        let xv = t.constant(vec![4, 2], x.clone()).unwrap();
        let h = t.linear(xv, vw1, vb1).unwrap();
        let h = t.relu(h);
        let z = t.linear(h, vw2, vb2).unwrap();
        let l = t.cross_entropy(z, &y).unwrap();
        last = t.scalar(l);
        t.backward(l).unwrap();
        for (p, v) in [(&mut w1, vw1), (&mut b1, vb1), (&mut w2, vw2), (&mut b2, vb2)] {
            if let Some(g) = t.grad(v) {
                p.accumulate_grad(g).unwrap();
            }
        }
        sgd_step(&mut [&mut w1, &mut b1, &mut w2, &mut b2], &cfg, &mut st);
    }
    assert!(last < 0.05, "final loss {last}");
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(z in proptest::collection::vec(-50.0f32..50.0, 1..12)) {
        let p = softmax_row(&z);
        let s: f64 = p.iter().map(|&v| v as f64).sum();
        prop_assert!((s - 1.0).abs() < 1e-5);
        prop_assert!(p.iter().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn kl_is_non_negative(p in proptest::collection::vec(-8.0f32..8.0, 8), q in proptest::collection::vec(-8.0f32..8.0, 8), t in 0.5f32..4.0) {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2, 4], p).unwrap();
        let b = tape.constant(vec![2, 4], q).unwrap();
        let kl = tape.kl_divergence(a, b, t).unwrap();
        prop_assert!(tape.scalar(kl) >= -1e-7);
    }

    #[test]
    fn cross_entropy_stays_finite(z in proptest::collection::vec(-1e4f32..1e4, 6), label in 0usize..3) {
        let mut tape = Tape::new();
        let v = tape.param(vec![2, 3], z).unwrap();
        let l = tape.cross_entropy(v, &[label, 2 - label]).unwrap();
        prop_assert!(tape.scalar(l).is_finite());
        tape.backward(l).unwrap();
        prop_assert!(tape.grad(v).unwrap().iter().all(|g| g.is_finite()));
    }
}
