use proptest::prelude::*;
use styleswap::gradcheck::{self, TOLERANCE};
use styleswap::{grad_check, Tape, Tensor32, Tensor64};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-20.0f64..20.0, rows * cols)
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(data in matrix(3, 5), shift in -500.0f64..500.0) {
        let mut t = Tape::new();
        let x = t.constant(Tensor64::new(vec![3, 5], data.clone()).unwrap());
        let y = t.softmax(x, 1).unwrap();
        let shifted: Vec<f64> = data.iter().map(|v| v + shift).collect();
        let xs = t.constant(Tensor64::new(vec![3, 5], shifted).unwrap());
        let ys = t.softmax(xs, 1).unwrap();
        let (p, q) = (t.value(y).data().to_vec(), t.value(ys).data().to_vec());
        for row in p.chunks(5) {
            prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        // shift invariance
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_preserves_order(data in matrix(1, 6)) {
        let mut t = Tape::new();
        let x = t.constant(Tensor64::new(vec![1, 6], data.clone()).unwrap());
        let y = t.softmax(x, 1).unwrap();
        let p = t.value(y).data();
        for i in 0..6 {
            for j in 0..6 {
                if data[i] > data[j] {
                    prop_assert!(p[i] >= p[j]);
                }
            }
        }
    }

    #[test]
    fn forward_ops_stay_finite(data in matrix(4, 4)) {
        let mut t = Tape::new();
        let x = t.leaf(Tensor64::new(vec![4, 4], data).unwrap().with_requires_grad(true));
        let g = t.constant(Tensor64::full(&[4], 1.0));
        let b = t.constant(Tensor64::zeros(&[4]));
        let n = t.layer_norm(x, g, b, 1e-5).unwrap();
        let s = t.softmax(n, 1).unwrap();
        let m = t.matmul(s, x).unwrap();
        let e = t.gelu(m);
        let loss = t.sum(e);
        t.backward(loss).unwrap();
        prop_assert!(t.value(loss).is_finite());
        prop_assert!(t.grad(x).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn quadratic_fd_is_exact(w in -5.0f64..5.0) {
        let e = grad_check(|t, x| t.mul(x, x).map(|y| t.sum(y)), &Tensor64::scalar(w), 1e-4).unwrap();
        prop_assert!(e < 1e-6);
    }
}

#[test]
fn extreme_logits_do_not_overflow() {
    let mut t = Tape::new();
    let x = t.constant(Tensor64::new(vec![1, 2], vec![1000.0, 1000.0]).unwrap());
    let y = t.softmax(x, 1).unwrap();
    assert_eq!(t.value(y).data(), &[0.5, 0.5]);
    let mut t = Tape::<f32>::new();
    let x = t.constant(Tensor32::new(vec![1, 2], vec![80.0, -80.0]).unwrap());
    let y = t.cross_entropy(x, &[1], 0).unwrap();
    assert!((t.value(y).data()[0] - 160.0).abs() < 1e-3);
}

#[test]
fn every_op_passes_gradcheck() {
    for seed in [1, 2, 3] {
        for (name, e) in gradcheck::op_checks(seed).unwrap() {
            assert!(e < TOLERANCE, "seed {seed} {name}: {e:e}");
        }
    }
}

#[test]
fn full_model_loss_passes_gradcheck() {
    let probes = gradcheck::model_check(gradcheck::check_config(), 20, 9).unwrap();
    assert_eq!(probes.len(), 20);
    assert!(
        probes.iter().any(|p| p.name.starts_with("adapter")),
        "no adapter probes"
    );
    for p in &probes {
        assert!(p.rel_error < TOLERANCE, "{}[{}]: {:e}", p.name, p.index, p.rel_error);
    }
}
