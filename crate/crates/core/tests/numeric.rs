use phenovit::numeric::{check_gradients, Tape, Tensor, Var};
use phenovit::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn eval_leaf(shape: &[usize], data: &[f64]) -> (Tape, Var) {
    let mut tape = Tape::new();
    let v = tape.leaf(Tensor::new(shape.to_vec(), data.to_vec()).unwrap());
    (tape, v)
}

#[test]
fn matmul_identity_and_dot() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let b = tape.leaf(Tensor::new(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap());
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

    let a = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
    let b = tape.leaf(Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap());
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[11.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::zeros(vec![2, 3]));
    let b = tape.leaf(Tensor::zeros(vec![4, 2]));
    match tape.matmul(a, b) {
        Err(Error::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![4, 2]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let a = random_tensor(&[4, 5], 7);
    let b = random_tensor(&[5, 3], 8);
    let report = check_gradients(
        |t, v| {
            let c = t.matmul(v[0], v[1])?;
            Ok(t.sum(c))
        },
        &[a, b],
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-6, "{report:?}");
}

#[test]
fn batched_matmul_gradients() {
    // batch x batch, shared lhs, and folded rhs layouts
    let cases: [(&[usize], &[usize]); 3] = [(&[2, 3, 4], &[2, 4, 2]), (&[3, 4], &[2, 4, 2]), (&[2, 3, 4], &[4, 5])];
    for (i, (sa, sb)) in cases.iter().enumerate() {
        let a = random_tensor(sa, 10 + i as u64);
        let b = random_tensor(sb, 20 + i as u64);
        let w = random_tensor(&[1], 0);
        let report = check_gradients(
            |t, v| {
                let c = t.matmul(v[0], v[1])?;
                let sq = t.mul(c, c)?;
                let s = t.sum(sq);
                t.mul(s, v[2])
            },
            &[a, b, w],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "case {i}: {report:?}");
    }
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::new();
    let gain = tape.leaf(Tensor::filled(vec![4], 1.0));
    let bias = tape.leaf(Tensor::zeros(vec![4]));
    let x = tape.leaf(Tensor::filled(vec![1, 4], 3.5));
    let y = tape.layer_norm(x, gain, bias, 1e-5).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0; 4]);

    let gain = tape.leaf(Tensor::filled(vec![2], 1.0));
    let bias = tape.leaf(Tensor::zeros(vec![2]));
    let x = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap());
    let y = tape.layer_norm(x, gain, bias, 0.0).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, -1.0]);
}

#[test]
fn layer_norm_standardizes_random_row() {
    let d = 16;
    let mut tape = Tape::new();
    let x = tape.leaf(random_tensor(&[1, d], 3));
    let gain = tape.leaf(Tensor::filled(vec![d], 1.0));
    let bias = tape.leaf(Tensor::zeros(vec![d]));
    let y = tape.layer_norm(x, gain, bias, 1e-5).unwrap();
    let out = tape.value(y).data();
    let mean = out.iter().sum::<f64>() / d as f64;
    let var = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
    assert!(mean.abs() < 1e-12);
    // eps shifts the variance by eps / (var + eps); the row variance is ~1/3
    let xs = random_tensor(&[1, d], 3);
    let xm = xs.data().iter().sum::<f64>() / d as f64;
    let xv = xs.data().iter().map(|v| (v - xm).powi(2)).sum::<f64>() / d as f64;
    assert!((var - xv / (xv + 1e-5)).abs() < 1e-9, "var {var}");
    // without eps the standardized variance is one
    let mut tape = Tape::new();
    let x = tape.leaf(xs);
    let gain = tape.leaf(Tensor::filled(vec![d], 1.0));
    let bias = tape.leaf(Tensor::zeros(vec![d]));
    let y = tape.layer_norm(x, gain, bias, 0.0).unwrap();
    let out = tape.value(y).data();
    let var = out.iter().map(|v| v * v).sum::<f64>() / d as f64;
    assert!((var - 1.0).abs() < 1e-9);
}

#[test]
fn layer_norm_sum_of_squares_gradient() {
    let x = random_tensor(&[2, 8], 5);
    let gain = random_tensor(&[8], 6);
    let bias = random_tensor(&[8], 7);
    let report = check_gradients(
        |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            let sq = t.mul(y, y)?;
            Ok(t.sum(sq))
        },
        &[x, gain, bias],
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-6, "{report:?}");
}

#[test]
fn softmax_examples() {
    let (mut tape, x) = eval_leaf(&[3], &[0.0, 0.0, 0.0]);
    let y = tape.softmax(x);
    for v in tape.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    let (mut tape, x) = eval_leaf(&[2], &[1000.0, 0.0]);
    let y = tape.softmax(x);
    let out = tape.value(y).data();
    assert!((out[0] - 1.0).abs() < 1e-12 && out[1].abs() < 1e-12);

    let (mut tape, x) = eval_leaf(&[3], &[1.0, 2.0, 3.0]);
    let y = tape.softmax(x);
    let expected = [0.09003057, 0.24472847, 0.66524096];
    for (v, e) in tape.value(y).data().iter().zip(expected) {
        assert!((v - e).abs() < 1e-8);
    }
}

#[test]
fn gelu_examples_and_gradient() {
    let (mut tape, x) = eval_leaf(&[3], &[0.0, 6.0, 9.0]);
    let y = tape.gelu(x);
    let out = tape.value(y).data();
    assert_eq!(out[0], 0.0);
    assert!((out[1] - 6.0).abs() < 1e-6);
    assert!((out[2] - 9.0).abs() < 1e-6);

    let x = Tensor::new(vec![4], vec![-2.0, -0.5, 0.5, 2.0]).unwrap();
    let report = check_gradients(
        |t, v| {
            let y = t.gelu(v[0]);
            Ok(t.sum(y))
        },
        &[x],
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-5, "{report:?}");
}

#[test]
fn dropout_identity_cases() {
    let data = [1.0, -2.0, 3.0, 4.0];
    let mut rngs = [ChaCha8Rng::seed_from_u64(1)];
    let (mut tape, x) = eval_leaf(&[4], &data);
    let y = tape.dropout(x, 0.0, true, &mut rngs).unwrap();
    assert_eq!(tape.value(y).data(), &data);
    let y = tape.dropout(x, 0.9, false, &mut rngs).unwrap();
    assert_eq!(tape.value(y).data(), &data);
    assert!(matches!(tape.dropout(x, 1.0, true, &mut rngs), Err(Error::Config { .. })));
    assert!(matches!(tape.dropout(x, -0.1, false, &mut rngs), Err(Error::Config { .. })));
}

#[test]
fn dropout_mask_statistics() {
    let n = 1_000_000;
    let mut rngs = [ChaCha8Rng::seed_from_u64(11)];
    let (mut tape, x) = eval_leaf(&[n], &vec![1.0; n]);
    let y = tape.dropout(x, 0.1, true, &mut rngs).unwrap();
    let out = tape.value(y).data();
    let survivors = out.iter().filter(|&&v| v != 0.0).count();
    let frac = survivors as f64 / n as f64;
    assert!((frac - 0.9).abs() < 0.002, "survivor fraction {frac}");
    assert!(out.iter().filter(|&&v| v != 0.0).all(|&v| v == 1.0 / 0.9));
}

#[test]
fn cross_entropy_examples() {
    let (mut tape, z) = eval_leaf(&[1, 2], &[0.0, 0.0]);
    let l = tape.cross_entropy(z, &[0]).unwrap();
    assert!((tape.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);

    let (mut tape, z) = eval_leaf(&[1, 2], &[40.0, -40.0]);
    let l = tape.cross_entropy(z, &[0]).unwrap();
    let v = tape.value(l).data()[0];
    assert!(v.is_finite() && v.abs() < 1e-30);

    let (mut tape, z) = eval_leaf(&[2, 3], &[0.0; 6]);
    match tape.cross_entropy(z, &[1, 3]) {
        Err(Error::Data(msg)) => assert!(msg.contains("sample 1"), "{msg}"),
        other => panic!("expected data error, got {other:?}"),
    }
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_onehot() {
    let logits = random_tensor(&[3, 4], 21);
    let labels = [2usize, 0, 3];
    let mut tape = Tape::new();
    let z = tape.param(logits.clone());
    let l = tape.cross_entropy(z, &labels).unwrap();
    tape.backward(l).unwrap();
    let grad = tape.grad(z).unwrap().to_vec();
    for (b, &label) in labels.iter().enumerate() {
        let row = &logits.data()[b * 4..(b + 1) * 4];
        let max = row.iter().cloned().fold(f64::MIN, f64::max);
        let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
        for j in 0..4 {
            let p = (row[j] - max).exp() / denom;
            let expected = (p - if j == label { 1.0 } else { 0.0 }) / 3.0;
            assert!((grad[b * 4 + j] - expected).abs() < 1e-15);
        }
    }
    let report = check_gradients(|t, v| t.cross_entropy(v[0], &labels), &[logits], 1e-5).unwrap();
    assert!(report.max_rel_err < 1e-5, "{report:?}");
}

#[test]
fn check_gradients_of_sum_is_exact() {
    let x = random_tensor(&[3, 3], 2);
    let report = check_gradients(|t, v| Ok(t.sum(v[0])), &[x], 1e-5).unwrap();
    assert!(report.max_rel_err < 1e-9, "{report:?}");
}

#[test]
fn check_gradients_rejects_bad_usage() {
    let x = random_tensor(&[3], 2);
    assert!(matches!(check_gradients(|_, v| Ok(v[0]), &[x.clone()], 1e-5), Err(Error::Usage(_))));
    assert!(matches!(check_gradients(|t, v| Ok(t.sum(v[0])), &[x], 1e-1), Err(Error::Usage(_))));
}

#[test]
fn shape_ops_gradients() {
    let x = random_tensor(&[2, 3, 4], 31);
    let row = random_tensor(&[4], 32);
    let w = random_tensor(&[2, 4, 3], 33);
    let report = check_gradients(
        |t, v| {
            let p = t.permute(v[0], &[1, 0, 2])?; // [3,2,4]
            let r = t.reshape(p, &[2, 3, 4])?;
            let q = t.prepend(r, v[1])?; // [2,4,4]
            let m = t.mean_axis(q, 1)?; // [2,4]
            let s = t.select(q, 1, 2)?; // [2,4]
            let sm = t.softmax(s);
            let a = t.add(m, sm)?;
            let a3 = t.reshape(a, &[2, 1, 4])?;
            let z = t.matmul(a3, v[2])?;
            let g = t.gelu(z);
            let sq = t.mul(g, g)?;
            Ok(t.sum(sq))
        },
        &[x, row, w],
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-6, "{report:?}");
}

#[test]
fn reused_tensor_accumulates_both_paths() {
    let data = [0.5, -1.5, 2.0];
    let mut tape = Tape::new();
    let x = tape.param(Tensor::new(vec![3], data.to_vec()).unwrap());
    let sq = tape.mul(x, x).unwrap();
    let l = tape.sum(sq);
    tape.backward(l).unwrap();
    let g1 = tape.grad(x).unwrap().to_vec();

    // same function as a 1x3 by 3x1 product
    let mut tape = Tape::new();
    let x = tape.param(Tensor::new(vec![3], data.to_vec()).unwrap());
    let row = tape.reshape(x, &[1, 3]).unwrap();
    let col = tape.reshape(x, &[3, 1]).unwrap();
    let dot = tape.matmul(row, col).unwrap();
    let l = tape.sum(dot);
    tape.backward(l).unwrap();
    let g2 = tape.grad(x).unwrap().to_vec();

    for ((a, b), v) in g1.iter().zip(&g2).zip(data) {
        assert_eq!(*a, 2.0 * v);
        assert_eq!(*b, 2.0 * v);
    }
}

#[test]
fn backward_requires_scalar() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::zeros(vec![2]));
    assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
}

#[test]
fn operations_are_bit_deterministic() {
    let run = || {
        let mut tape = Tape::new();
        let a = tape.param(random_tensor(&[3, 8, 8], 4));
        let b = tape.param(random_tensor(&[8, 8], 5));
        let c = tape.matmul(a, b).unwrap();
        let s = tape.softmax(c);
        let mut rngs = vec![ChaCha8Rng::seed_from_u64(3); 3];
        let d = tape.dropout(s, 0.2, true, &mut rngs).unwrap();
        let l = tape.sum(d);
        tape.backward(l).unwrap();
        (tape.value(d).data().to_vec(), tape.grad(a).unwrap().to_vec())
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(values in proptest::collection::vec(-1e3f64..1e3, 1..40)) {
        let (mut tape, x) = eval_leaf(&[values.len()], &values);
        let y = tape.softmax(x);
        let s: f64 = tape.value(y).data().iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-9);
        prop_assert!(tape.value(y).is_finite());
    }

    #[test]
    fn elementwise_gradients_match_fd(seed in 0u64..1000) {
        let x = random_tensor(&[2, 5], seed);
        let gain = random_tensor(&[5], seed + 1);
        let bias = random_tensor(&[5], seed + 2);
        let report = check_gradients(
            |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                let g = t.gelu(y);
                let s = t.softmax(g);
                let p = t.mul(s, y)?;
                let q = t.scale(p, 1.7);
                Ok(t.sum(q))
            },
            &[x, gain, bias],
            1e-5,
        ).unwrap();
        prop_assert!(report.max_rel_err < 1e-5, "{:?}", report);
    }
}
