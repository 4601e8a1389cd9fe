use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
            }
        }
    }
    out
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut g = Graph::inference();
    let x = g.constant(t(&[2], &[0.0, 0.0]));
    let y = g.softmax(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn cross_entropy_of_uniform_logits_is_ln2() {
    let mut g = Graph::inference();
    let x = g.constant(t(&[1, 2], &[0.0, 0.0]));
    let l = g.cross_entropy(x, &[0], &[true]).unwrap();
    assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-15);
}

#[test]
fn matmul_matches_naive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let b = Tensor::randn(&[4, 5], 1.0, &mut rng);
    let mut g = Graph::inference();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let c = g.matmul(va, vb).unwrap();
    for (x, y) in g.value(c).data().iter().zip(naive_matmul(&a, &b)) {
        assert!(relative_error(*x, y) <= 1e-12);
    }
}

#[test]
fn shape_errors_name_both_shapes() {
    let mut g = Graph::inference();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
    assert!(matches!(err, TensorError::Shape { .. }));
}

#[test]
fn sum_of_squares_gradient() {
    let mut g = Graph::new();
    let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
    let vx = g.param(&x);
    let sq = g.mul(vx, vx).unwrap();
    let l = g.sum(sq).unwrap();
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get(vx).unwrap(), &[2.0, 4.0, 6.0]);
}

#[test]
fn repeated_backward_accumulates_until_reset() {
    let mut x = Tensor::new(vec![2], vec![1.0, -1.0]).unwrap();
    for _ in 0..2 {
        let mut g = Graph::new();
        let vx = g.param(&x);
        let l = g.sum(vx).unwrap();
        g.backward(l).unwrap().accumulate_into(vx, &mut x);
    }
    assert_eq!(x.grad().unwrap(), &[2.0, 2.0]);
    x.zero_grad();
    assert!(x.grad().is_none_or(|g| g.iter().all(|&v| v == 0.0)));
}

#[test]
fn cross_entropy_gradient_rows_sum_to_zero() {
    let mut g = Graph::new();
    let x = g.param(&Tensor::zeros(&[3, 5]));
    let l = g.cross_entropy(x, &[0, 4, 2], &[true, false, true]).unwrap();
    let grads = g.backward(l).unwrap();
    for row in grads.get(x).unwrap().chunks(5) {
        assert!(row.iter().sum::<f64>().abs() < 1e-15);
    }
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut g = Graph::new();
    let x = g.param(&Tensor::zeros(&[2]));
    assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
}

#[test]
fn empty_mask_is_rejected() {
    let mut g = Graph::new();
    let x = g.param(&Tensor::zeros(&[2, 2]));
    assert!(matches!(g.cross_entropy(x, &[0, 1], &[false, false]), Err(TensorError::EmptyMask)));
}

#[test]
fn square_gradcheck() {
    let x = Tensor::new(vec![1], vec![3.0]).unwrap();
    let r = grad_check(
        |g, v| {
            let y = g.mul(v[0], v[0])?;
            g.sum(y)
        },
        &[x],
        1e-5,
        1e-7,
        50,
        0,
    )
    .unwrap();
    assert!((r.entries[0].analytic - 6.0).abs() < 1e-12);
    assert!((r.entries[0].numeric - 6.0).abs() < 1e-7);
    assert!(r.passed);
}

#[test]
fn gelu_slope_at_zero_is_half() {
    let mut g = Graph::new();
    let x = g.param(&Tensor::zeros(&[1]));
    let y = g.gelu(x).unwrap();
    let l = g.sum(y).unwrap();
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[0.5]);
}

#[test]
fn every_op_passes_gradcheck() {
    for kind in OpKind::ALL {
        for seed in 0..20 {
            let r = check_op(kind, seed, 1e-5, 1e-4, 50).unwrap();
            assert!(r.passed, "{kind} seed {seed}: {:?}", r.worst());
        }
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut g = Graph::inference();
    let x = g.constant(Tensor::randn(&[4, 6, 7], 3.0, &mut rng));
    let y = g.softmax(x).unwrap();
    for row in g.value(y).data().chunks(7) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn layer_norm_standardizes_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut g = Graph::inference();
    let x = g.constant(Tensor::randn(&[5, 16], 4.0, &mut rng));
    let gain = g.constant(Tensor::filled(&[16], 1.0));
    let bias = g.constant(Tensor::zeros(&[16]));
    let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
    for row in g.value(y).data().chunks(16) {
        let mean = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() <= 1e-9);
        assert!((var - 1.0).abs() <= 1e-6);
    }
}

#[test]
fn layer_norm_parameters_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let params = vec![
        Tensor::randn(&[4, 8], 1.0, &mut rng),
        Tensor::randn(&[8], 1.0, &mut rng),
        Tensor::randn(&[8], 1.0, &mut rng),
    ];
    let w = Tensor::randn(&[4, 8], 1.0, &mut rng);
    let r = grad_check(
        |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            let wc = g.constant(w.clone());
            let p = g.mul(y, wc)?;
            g.sum(p)
        },
        &params,
        1e-5,
        1e-4,
        50,
        1,
    )
    .unwrap();
    assert!(r.passed, "{:?}", r.worst());
}

#[test]
fn construction_order_does_not_change_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let b = Tensor::randn(&[4, 2], 1.0, &mut rng);
    let c = Tensor::randn(&[3, 4], 1.0, &mut rng);

    // loss = sum(softmax(a·b)²) + sum(gelu(a∘c))
    let mut g1 = Graph::new();
    let (va, vb, vc) = (g1.param(&a), g1.param(&b), g1.param(&c));
    let m = g1.matmul(va, vb).unwrap();
    let s = g1.softmax(m).unwrap();
    let s = g1.mul(s, s).unwrap();
    let l1 = g1.sum(s).unwrap();
    let p = g1.mul(va, vc).unwrap();
    let q = g1.gelu(p).unwrap();
    let l2 = g1.sum(q).unwrap();
    let l = g1.add(l1, l2).unwrap();
    let r1 = g1.backward(l).unwrap();
    let first: Vec<Vec<f64>> = [va, vb, vc].iter().map(|v| r1.get(*v).unwrap().to_vec()).collect();

    let mut g2 = Graph::new();
    let vc = g2.param(&c);
    let va = g2.param(&a);
    let p = g2.mul(va, vc).unwrap();
    let q = g2.gelu(p).unwrap();
    let l2 = g2.sum(q).unwrap();
    let vb = g2.param(&b);
    let m = g2.matmul(va, vb).unwrap();
    let s = g2.softmax(m).unwrap();
    let s = g2.mul(s, s).unwrap();
    let l1 = g2.sum(s).unwrap();
    let l = g2.add(l2, l1).unwrap();
    let r2 = g2.backward(l).unwrap();
    let second: Vec<Vec<f64>> = [va, vb, vc].iter().map(|v| r2.get(*v).unwrap().to_vec()).collect();

    for (x, y) in first.iter().flatten().zip(second.iter().flatten()) {
        assert!(relative_error(*x, *y) <= 1e-12);
    }
}

#[test]
fn provenance_is_recorded_only_when_tracking() {
    let mut g = Graph::new();
    let x = g.param(&Tensor::zeros(&[2, 2]));
    let y = g.transpose(x).unwrap();
    assert_eq!(g.op_kind(y), Some(OpKind::Transpose2d));
    assert_eq!(g.parents(y), vec![x]);
    let mut h = Graph::inference();
    let x = h.param(&Tensor::zeros(&[2, 2]));
    let y = h.transpose(x).unwrap();
    assert_eq!(h.op_kind(y), None);
}
