//! Tape operations against independent oracles: naive loops, direct
//! formulas and central differences.

use pitvqa::gradcheck::{grad_check, grad_check_many, CheckMode, DEFAULT_H};
use pitvqa::{Error, RngStream, Tape, Tensor, Var};

fn randn(rng: &mut RngStream, shape: &[usize], std: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| std * rng.normal())
}

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i * k + t] * b[t * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

#[test]
fn matmul_matches_triple_loop_on_random_shapes() {
    let mut rng = RngStream::new(10);
    for trial in 0..20 {
        let (m, k, n) = (1 + rng.below(6), 1 + rng.below(6), 1 + rng.below(6));
        let batch = 1 + trial % 3;
        let a = randn(&mut rng, &[batch, m, k], 1.0);
        let b = randn(&mut rng, &[batch, k, n], 1.0);
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let c = tape.matmul(va, vb).unwrap();
        let got = tape.value(c);
        assert_eq!(got.shape(), &[batch, m, n]);
        for bi in 0..batch {
            let want = naive_matmul(
                &a.data()[bi * m * k..(bi + 1) * m * k],
                &b.data()[bi * k * n..(bi + 1) * k * n],
                m,
                k,
                n,
            );
            let have = &got.data()[bi * m * n..(bi + 1) * m * n];
            for (x, y) in have.iter().zip(&want) {
                assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
            }
        }
    }
}

#[test]
fn matmul_zero_left_operand() {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::zeros([2, 3]));
    let b = tape.constant(Tensor::from_fn([3, 4], |i| i as f64 - 5.0));
    let c = tape.matmul(z, b).unwrap();
    assert!(tape.value(c).bitwise_eq(&Tensor::zeros([2, 4])));
}

#[test]
fn softmax_rows_are_probability_vectors_even_at_large_magnitude() {
    let mut rng = RngStream::new(11);
    for scale in [1.0, 10.0, 1e3] {
        let x = randn(&mut rng, &[7, 9], scale);
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let s = tape.softmax(v, 1).unwrap();
        for (row, src) in tape.value(s).data().chunks(9).zip(x.data().chunks(9)) {
            assert!(row.iter().all(|&p| p >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            // direct evaluation with the maximum subtracted
            let m = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = src.iter().map(|v| (v - m).exp()).sum();
            for (p, v) in row.iter().zip(src) {
                assert!((p - (v - m).exp() / z).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn layer_norm_pre_affine_statistics() {
    let mut rng = RngStream::new(12);
    for _ in 0..20 {
        let d = 2 + rng.below(10);
        let scale = 1.0 + 5.0 * rng.uniform();
        let x = randn(&mut rng, &[3, d], scale);
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let g = tape.constant(Tensor::ones([d]));
        let b = tape.constant(Tensor::zeros([d]));
        let y = tape.layer_norm(v, g, b, 1e-5).unwrap();
        for row in tape.value(y).data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            assert!(mean.abs() <= 1e-6);
            assert!((var - 1.0).abs() <= 1e-4, "var {var}");
        }
    }
}

#[test]
fn batch_norm_two_point_column_keeps_unit_scale() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new([2, 1], vec![-1.0, 1.0]).unwrap());
    let g = tape.constant(Tensor::ones([1]));
    let b = tape.constant(Tensor::zeros([1]));
    let (y, stats) = tape.batch_norm_train(x, g, b, 1e-5).unwrap();
    let out = tape.value(y).data();
    // biased variance 1, so y = ±1/sqrt(1 + eps)
    let want = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert!((out[0] + want).abs() < 1e-12 && (out[1] - want).abs() < 1e-12);
    assert_eq!(stats.mean, vec![0.0]);
    assert!((stats.var_unbiased[0] - 2.0).abs() < 1e-15);
}

#[test]
fn batch_of_one_is_degenerate() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::ones([1, 3]));
    let g = tape.constant(Tensor::ones([3]));
    let b = tape.constant(Tensor::zeros([3]));
    assert!(matches!(tape.batch_norm_train(x, g, b, 1e-5), Err(Error::DegenerateBatch(_))));
}

#[test]
fn embedding_of_no_ids_is_empty() {
    let mut tape = Tape::new();
    let t = tape.param("tok", Tensor::ones([5, 3]));
    let e = tape.embedding(t, &[]).unwrap();
    assert_eq!(tape.value(e).shape(), &[0, 3]);
    let err = tape.embedding(t, &[5]).unwrap_err().to_string();
    assert!(err.contains("id 5"), "{err}");
}

#[test]
fn dropout_eval_is_bitwise_identity() {
    let mut rng = RngStream::new(13);
    let x = randn(&mut rng, &[50], 3.0);
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let y = tape.dropout(v, 0.4, false, &mut rng).unwrap();
    assert!(tape.value(y).bitwise_eq(&x));
    assert!(tape.dropout(v, 1.0, true, &mut rng).is_err());
}

#[test]
fn cross_entropy_closed_forms() {
    let mut tape = Tape::new();
    let l = tape.constant(Tensor::zeros([1, 2]));
    let ce = tape.cross_entropy(l, &[1]).unwrap();
    assert!((tape.value(ce).item().unwrap() - 2f64.ln()).abs() < 1e-15);

    let l = tape.constant(Tensor::new([1, 2], vec![10.0, -10.0]).unwrap());
    let ce = tape.cross_entropy(l, &[0]).unwrap();
    let want = (1.0 + (-20f64).exp()).ln();
    let got = tape.value(ce).item().unwrap();
    assert!((got - want).abs() <= 1e-6 * want);
    assert!((got - 2.06e-9).abs() < 1e-11);

    let one = tape.constant(Tensor::new([1, 3], vec![0.3, -1.0, 2.0]).unwrap());
    let two = tape.constant(Tensor::new([2, 3], vec![0.3, -1.0, 2.0, 0.3, -1.0, 2.0]).unwrap());
    let a = tape.cross_entropy(one, &[2]).unwrap();
    let b = tape.cross_entropy(two, &[2, 2]).unwrap();
    assert_eq!(tape.value(a).item().unwrap(), tape.value(b).item().unwrap());
}

#[test]
fn non_finite_results_name_the_operation() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::full([1, 1], 1e200));
    let e = tape.matmul(a, a).unwrap_err();
    assert!(matches!(e, Error::NonFinite { op: "matmul" }), "{e}");
    let e = tape.mul(a, a).unwrap_err();
    assert!(matches!(e, Error::NonFinite { .. }), "{e}");
}

#[test]
fn backward_is_deterministic() {
    let mut rng = RngStream::new(14);
    let x = randn(&mut rng, &[4, 5], 1.0);
    let w = randn(&mut rng, &[5, 3], 1.0);
    let run = || {
        let mut tape = Tape::new();
        let xv = tape.param("x", x.clone());
        let wv = tape.param("w", w.clone());
        let h = tape.matmul(xv, wv).unwrap();
        let h = tape.gelu(h).unwrap();
        let l = tape.cross_entropy(h, &[0, 1, 2, 0]).unwrap();
        tape.backward(l).unwrap()
    };
    let (a, b) = (run(), run());
    for (name, g) in a.named() {
        assert!(g.bitwise_eq(b.by_name(name).unwrap()));
    }
}

#[test]
fn grad_check_reference_cases() {
    let mut rng = RngStream::new(15);
    let x = randn(&mut rng, &[10], 1.0);
    let sig = grad_check(
        |t, v| {
            let s = t.sigmoid(v)?;
            t.sum(s)
        },
        &x,
        DEFAULT_H,
    )
    .unwrap();
    assert!(sig <= 1e-6, "{sig}");

    // a plain sum of LN output is identically β-sum, so weight the output
    let x2 = randn(&mut rng, &[3, 6], 1.0);
    let c = randn(&mut rng, &[3, 6], 1.0);
    let ln = grad_check(
        |t, v| {
            let g = t.constant(Tensor::ones([6]));
            let b = t.constant(Tensor::zeros([6]));
            let y = t.layer_norm(v, g, b, 1e-5)?;
            let cv = t.constant(c.clone());
            let p = t.mul(y, cv)?;
            t.sum(p)
        },
        &x2,
        DEFAULT_H,
    )
    .unwrap();
    assert!(ln <= 1e-5, "{ln}");

    // row sums bounded away from zero keep the relative error well defined
    let w = Tensor::from_fn(vec![6, 2], |_| 0.5 + rng.uniform());
    let lin = grad_check(
        |t, v| {
            let wv = t.constant(w.clone());
            let y = t.matmul(v, wv)?;
            t.sum(y)
        },
        &x2,
        DEFAULT_H,
    )
    .unwrap();
    assert!(lin <= 1e-9, "{lin}");
}

type Op = fn(&mut Tape, &[Var]) -> pitvqa::Result<Var>;

fn weighted_sum(t: &mut Tape, y: Var) -> pitvqa::Result<Var> {
    let shape = t.value(y).shape().to_vec();
    // positive, distinct weights so no reduced gradient cancels to zero
    let c = Tensor::from_fn(shape, |i| 1.0 + (i * 7 % 11) as f64 / 10.0);
    let cv = t.constant(c);
    let p = t.mul(y, cv)?;
    t.sum(p)
}

#[test]
fn every_differentiable_op_passes_grad_check_at_ten_points() {
    let cases: Vec<(&str, Vec<Vec<usize>>, Op)> = vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            weighted_sum(t, y)
        }),
        ("batched_matmul", vec![vec![2, 3, 4], vec![2, 4, 2]], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            weighted_sum(t, y)
        }),
        ("add_broadcast", vec![vec![3, 4], vec![4]], |t, v| {
            let y = t.add(v[0], v[1])?;
            weighted_sum(t, y)
        }),
        ("sub", vec![vec![3, 4], vec![3, 4]], |t, v| {
            let y = t.sub(v[0], v[1])?;
            weighted_sum(t, y)
        }),
        ("mul_broadcast", vec![vec![2, 3, 4], vec![3, 4]], |t, v| {
            let y = t.mul(v[0], v[1])?;
            weighted_sum(t, y)
        }),
        ("scale", vec![vec![5]], |t, v| {
            let y = t.scale(v[0], -2.5)?;
            weighted_sum(t, y)
        }),
        ("softmax_last", vec![vec![3, 5]], |t, v| {
            let y = t.softmax(v[0], 1)?;
            weighted_sum(t, y)
        }),
        ("softmax_first", vec![vec![4, 3]], |t, v| {
            let y = t.softmax(v[0], 0)?;
            weighted_sum(t, y)
        }),
        ("sigmoid", vec![vec![8]], |t, v| {
            let y = t.sigmoid(v[0])?;
            weighted_sum(t, y)
        }),
        ("gelu", vec![vec![8]], |t, v| {
            let y = t.gelu(v[0])?;
            weighted_sum(t, y)
        }),
        ("layer_norm", vec![vec![3, 5], vec![5], vec![5]], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            weighted_sum(t, y)
        }),
        ("batch_norm_train", vec![vec![5, 3], vec![3], vec![3]], |t, v| {
            let (y, _) = t.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
            weighted_sum(t, y)
        }),
        ("batch_norm_eval", vec![vec![4, 3], vec![3], vec![3]], |t, v| {
            let y = t.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[1.5, 0.5, 2.0], 1e-5)?;
            weighted_sum(t, y)
        }),
        ("mean", vec![vec![3, 4, 2]], |t, v| {
            let y = t.mean(v[0], 1)?;
            weighted_sum(t, y)
        }),
        ("sum", vec![vec![3, 4]], |t, v| {
            let s = t.mul(v[0], v[0])?;
            t.sum(s)
        }),
        ("embedding", vec![vec![5, 3]], |t, v| {
            let y = t.embedding(v[0], &[4, 0, 4, 2])?;
            weighted_sum(t, y)
        }),
        ("cross_entropy", vec![vec![3, 5]], |t, v| t.cross_entropy(v[0], &[4, 0, 2])),
        ("reshape", vec![vec![2, 6]], |t, v| {
            let r = t.reshape(v[0], [3, 4])?;
            let y = t.softmax(r, 1)?;
            weighted_sum(t, y)
        }),
        ("permute", vec![vec![2, 3, 4]], |t, v| {
            let p = t.permute(v[0], &[2, 0, 1])?;
            let y = t.softmax(p, 2)?;
            weighted_sum(t, y)
        }),
        ("mask_fill", vec![vec![2, 3]], |t, v| {
            let m = t.mask_fill(v[0], vec![true, false, true, true, true, false])?;
            let y = t.softmax(m, 1)?;
            weighted_sum(t, y)
        }),
        ("dropout_train", vec![vec![20]], |t, v| {
            let mut rng = RngStream::new(3);
            let y = t.dropout(v[0], 0.3, true, &mut rng)?;
            weighted_sum(t, y)
        }),
    ];
    let mut rng = RngStream::new(16);
    for (name, shapes, f) in cases {
        for point in 0..10 {
            let inputs: Vec<Tensor> = shapes
                .iter()
                .map(|s| {
                    let t = randn(&mut rng, s, 1.0);
                    // keep gains and variances away from zero
                    if s.len() == 1 && name.contains("norm") {
                        Tensor::from_fn(s.clone(), |i| 1.0 + 0.3 * t.data()[i])
                    } else {
                        t
                    }
                })
                .collect();
            let r = grad_check_many(f, &inputs, DEFAULT_H, CheckMode::Elementwise).unwrap();
            assert!(r.max_rel_error <= 1e-4, "{name} point {point}: {:?}", r.per_input);
        }
    }
}
