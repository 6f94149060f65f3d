use std::sync::Arc;

use proptest::prelude::*;
use varsr_numerics::gradcheck::{op_suite, suite_layout, SUITE_TOL};
use varsr_numerics::{Graph, NumericsError, Rng, RotaryTable, Tensor};

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut Rng::new(seed))
}

#[test]
fn every_op_passes_gradient_check() {
    for (name, r) in op_suite().unwrap() {
        assert!(r.max_rel_err <= SUITE_TOL, "{name}: {r:?}");
        assert!(r.checked > 0, "{name}");
    }
}

#[test]
fn matmul_identity_and_hand_case() {
    let mut g = Graph::<f64>::new();
    let a = randn(&[3, 3], 1);
    let i3 = g.constant(Tensor::eye(3));
    let av = g.constant(a.clone());
    let out = g.matmul(i3, av).unwrap();
    assert_eq!(g.value(out), &a);

    let x = g.constant(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let ones = g.constant(Tensor::new(&[2, 1], vec![1.0, 1.0]).unwrap());
    let out = g.matmul(x, ones).unwrap();
    assert_eq!(g.value(out).data(), &[3.0, 7.0]);
}

#[test]
fn matmul_shape_error() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(g.matmul(a, b), Err(NumericsError::Shape { .. })));
}

#[test]
fn conv2d_identity_and_ones() {
    let mut g = Graph::<f64>::new();
    let x = randn(&[1, 1, 4, 4], 8);
    let xv = g.constant(x.clone());
    let w = g.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
    let y = g.conv2d(xv, w, None, 1, 0).unwrap();
    assert_eq!(g.value(y), &x);

    let ones = g.constant(Tensor::full(&[1, 1, 4, 4], 1.0));
    let k = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let y = g.conv2d(ones, k, None, 1, 0).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 2, 2]);
    assert!(g.value(y).data().iter().all(|&v| v == 9.0));
}

#[test]
fn conv2d_output_size_and_kernel_error() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[2, 3, 9, 7]));
    let w = g.constant(Tensor::zeros(&[4, 3, 3, 3]));
    let y = g.conv2d(x, w, None, 2, 1).unwrap();
    // floor((9+2-3)/2)+1 = 5, floor((7+2-3)/2)+1 = 4
    assert_eq!(g.shape(y), &[2, 4, 5, 4]);

    let small = g.constant(Tensor::zeros(&[1, 3, 2, 2]));
    let big = g.constant(Tensor::zeros(&[1, 3, 5, 5]));
    assert!(matches!(g.conv2d(small, big, None, 1, 1), Err(NumericsError::Shape { .. })));
}

#[test]
fn softmax_constant_row_is_uniform() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(&[2, 5], 3.0));
    let y = g.softmax(x, -1).unwrap();
    assert!(g.value(y).data().iter().all(|&p| (p - 0.2).abs() < 1e-15));
}

#[test]
fn layer_norm_normalizes_rows() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(randn(&[4, 16], 15));
    let y = g.layer_norm(x, None, None, 0.0).unwrap();
    for row in g.value(y).data().chunks(16) {
        let mean: f64 = row.iter().sum::<f64>() / 16.0;
        let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-12);
    }
}

#[test]
fn cross_entropy_closed_form() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(&[1, 3], vec![10.0, 0.0, 0.0]).unwrap());
    let l = g.cross_entropy(x, &[0]).unwrap();
    let expected = (1.0 + 2.0 * (-10.0f64).exp()).ln();
    assert!((g.scalar_value(l) - expected).abs() < 1e-15);
    assert!((g.scalar_value(l) - 9.08e-5).abs() < 1e-7);
    // two classes [10, 0] → e^-10 ≈ 4.54e-5
    let two = g.constant(Tensor::new(&[1, 2], vec![10.0, 0.0]).unwrap());
    let l = g.cross_entropy(two, &[0]).unwrap();
    assert!((g.scalar_value(l) - 4.54e-5).abs() < 1e-7);

    let uniform = g.constant(Tensor::zeros(&[3, 64]));
    let l = g.cross_entropy(uniform, &[0, 5, 63]).unwrap();
    assert!((g.scalar_value(l) - 64f64.ln()).abs() < 1e-12);
}

#[test]
fn cross_entropy_target_out_of_range() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[2, 4]));
    assert!(matches!(
        g.cross_entropy(x, &[1, 4]),
        Err(NumericsError::Index { index: 4, bound: 4, .. })
    ));
}

#[test]
fn depth_to_space_layout() {
    // One sample, 4 channels of 1x1 → one 2x2 channel in reading order.
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(&[1, 4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = g.depth_to_space(x, 2).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 2, 2]);
    assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
}

fn rotary(rows: usize, pairs: usize, seed: u64) -> Arc<RotaryTable<f64>> {
    let mut rng = Rng::new(seed);
    let angles: Vec<f64> = (0..rows * pairs).map(|_| rng.uniform_range(-3.0, 3.0)).collect();
    Arc::new(RotaryTable::from_angles(pairs, &angles))
}

#[test]
fn attention_matches_dense_masked_reference() {
    let layout = suite_layout();
    let (q, k, v) = (randn(&[12, 4], 36), randn(&[12, 4], 37), randn(&[12, 4], 38));
    let mut g = Graph::<f64>::new();
    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let y = g.attention(qv, kv, vv, 1, layout).unwrap();
    let limits = [2usize, 2, 3, 6, 6, 6];
    for s in 0..2 {
        for i in 0..6 {
            let qi = q.row(s * 6 + i);
            let mut w: Vec<f64> = (0..limits[i])
                .map(|j| qi.iter().zip(k.row(s * 6 + j)).map(|(a, b)| a * b).sum::<f64>() / 2.0)
                .collect();
            let m = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = w.iter().map(|x| (x - m).exp()).sum();
            w.iter_mut().for_each(|x| *x = (*x - m).exp() / z);
            for c in 0..4 {
                let o: f64 = (0..limits[i]).map(|j| w[j] * v.row(s * 6 + j)[c]).sum();
                assert!((o - g.value(y).row(s * 6 + i)[c]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn ops_are_bit_deterministic() {
    let run = || {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::randn(&[2, 3, 8, 8], 1.0, &mut Rng::new(5)));
        let w = g.leaf(Tensor::randn(&[4, 3, 3, 3], 0.2, &mut Rng::new(6)));
        let y = g.conv2d(x, w, None, 2, 1).unwrap();
        let r = g.nchw_to_rows(y).unwrap();
        let n = g.layer_norm(r, None, None, 1e-6).unwrap();
        let s = g.softmax(n, -1).unwrap();
        let l = g.mean(s);
        let grads = g.backward(l).unwrap();
        (g.value(s).clone(), grads.wrt(w).unwrap().clone())
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_are_simplex(vals in proptest::collection::vec(-50.0f32..50.0, 24)) {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(&[4, 6], vals).unwrap());
        let y = g.softmax(x, -1).unwrap();
        for row in g.value(y).data().chunks(6) {
            let s: f32 = row.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-6);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn rope_preserves_row_norm(vals in proptest::collection::vec(-5.0f64..5.0, 16), seed in 0u64..1000) {
        let table = rotary(2, 4, seed);
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(&[2, 8], vals.clone()).unwrap());
        let y = g.rope(x, table, 8).unwrap();
        for r in 0..2 {
            let a: f64 = vals[r * 8..(r + 1) * 8].iter().map(|v| v * v).sum();
            let b: f64 = g.value(y).row(r).iter().map(|v| v * v).sum();
            prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
        }
    }
}
