use super::gradcheck::check_gradients;
use super::kernels::{self, cross_entropy, entropy, kl_divergence, matmul, softmax_with_temperature};
use super::*;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * scale).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn row_stochastic(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let logits = random_tensor(rng, &[rows, cols], 3.0);
    softmax_with_temperature(&logits, 1.0).unwrap()
}

#[test]
fn tensor_rejects_inconsistent_shape() {
    assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    assert!(Tensor::new(vec![0, 3], vec![]).is_err());
    assert!(Tensor::new(vec![], vec![]).is_err());
}

#[test]
fn matmul_identity_and_annihilator() {
    let eye = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
    let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
    assert_eq!(matmul(&eye, &a).unwrap().data(), a.data());
    let z = Tensor::zeros(&[2, 2]);
    assert_eq!(matmul(&a, &z).unwrap().data(), &[0.0; 4]);
}

fn triple_loop_diff(a: &Tensor, b: &Tensor) -> f64 {
    let (m, k) = a.dims2().unwrap();
    let (_, n) = b.dims2().unwrap();
    let c = matmul(a, b).unwrap();
    let mut max_diff: f64 = 0.0;
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..k {
                s += a.get2(i, t) * b.get2(t, j);
            }
            max_diff = max_diff.max((s - c.get2(i, j)).abs());
        }
    }
    max_diff
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (m, k, n) in [(3, 4, 2), (9, 5, 7), (4, 1, 1), (13, 17, 3)] {
        let a = random_tensor(&mut rng, &[m, k], 1.0);
        let b = random_tensor(&mut rng, &[k, n], 1.0);
        let d = triple_loop_diff(&a, &b);
        assert!(d <= 1e-12, "{m}x{k}x{n}: {d}");
    }
}

#[test]
fn accumulating_kernels_match_loops_in_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (m, k, n) in [(1, 1, 1), (5, 3, 9), (130, 4, 11), (7, 140, 17), (257, 9, 8)] {
        let a = random_tensor(&mut rng, &[m, k], 1.0);
        let b = random_tensor(&mut rng, &[k, n], 1.0);
        let g = random_tensor(&mut rng, &[m, n], 1.0);
        let (a, b, g) = (a.data(), b.data(), g.data());

        let mut out = vec![0.5; m * n];
        kernels::matmul_acc(a, b, &mut out, m, k, n);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.5;
                for t in 0..k {
                    acc += a[i * k + t] * b[t * n + j];
                }
                assert_eq!(out[i * n + j], acc, "matmul_acc {m}x{k}x{n} at ({i},{j})");
            }
        }

        let mut out = vec![-0.25; k * n];
        kernels::matmul_at_b_acc(a, g, &mut out, m, k, n);
        for r in 0..k {
            for j in 0..n {
                let mut acc = -0.25;
                for t in 0..m {
                    acc += a[t * k + r] * g[t * n + j];
                }
                assert_eq!(out[r * n + j], acc, "matmul_at_b_acc {m}x{k}x{n} at ({r},{j})");
            }
        }
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let a = Tensor::zeros(&[2, 3]);
    let b = Tensor::zeros(&[2, 3]);
    let err = matmul(&a, &b).unwrap_err();
    let msg = alloc::format!("{err}");
    assert!(msg.contains("[2, 3]"), "{msg}");
    assert!(matches!(err, TensorError::Shape { .. }));
}

#[test]
fn softmax_symmetry_and_scaling() {
    for t in [0.5, 1.0, 3.0, 17.0] {
        let s = softmax_with_temperature(&Tensor::from_rows(&[&[0.0, 0.0]]).unwrap(), t).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
    }
    let a = softmax_with_temperature(&Tensor::from_rows(&[&[2.0, 4.0]]).unwrap(), 2.0).unwrap();
    let b = softmax_with_temperature(&Tensor::from_rows(&[&[1.0, 2.0]]).unwrap(), 1.0).unwrap();
    assert!(a.max_abs_diff(&b) <= 1e-15);
}

#[test]
fn softmax_matches_extended_precision_values() {
    // 40-digit evaluation of exp(z_i) / Σ exp(z_j) for z = [1, 2, 3].
    let expected = [
        0.090_030_573_170_380_457_998_022_1,
        0.244_728_471_054_797_652_472_959_6,
        0.665_240_955_774_821_889_529_018_3,
    ];
    let s = softmax_with_temperature(&Tensor::from_rows(&[&[1.0, 2.0, 3.0]]).unwrap(), 1.0).unwrap();
    for (got, want) in s.data().iter().zip(expected) {
        assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
    }
}

#[test]
fn softmax_domain_and_dimension_errors() {
    let z = Tensor::from_rows(&[&[1.0, 2.0]]).unwrap();
    assert!(matches!(
        softmax_with_temperature(&z, 0.0),
        Err(TensorError::Domain { .. })
    ));
    assert!(matches!(
        softmax_with_temperature(&z, -1.0),
        Err(TensorError::Domain { .. })
    ));
    let single = Tensor::from_rows(&[&[1.0]]).unwrap();
    assert!(matches!(
        softmax_with_temperature(&single, 1.0),
        Err(TensorError::Dimension { .. })
    ));
}

#[test]
fn kl_identity_and_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = row_stochastic(&mut rng, 5, 4);
    assert!(kl_divergence(&p, &p).unwrap().abs() <= 1e-12);
    let one_hot = Tensor::from_rows(&[&[1.0, 0.0]]).unwrap();
    let uniform = Tensor::from_rows(&[&[0.5, 0.5]]).unwrap();
    let v = kl_divergence(&one_hot, &uniform).unwrap();
    assert!((v - core::f64::consts::LN_2).abs() <= 1e-15);
}

#[test]
fn kl_matches_term_by_term_oracle() {
    let p: [f64; 2] = [0.5, 0.5];
    let q: [f64; 2] = [0.9, 0.1];
    let oracle: f64 = p.iter().zip(q).map(|(a, b)| a * (a / b).ln()).sum();
    let got = kl_divergence(&Tensor::from_rows(&[&p]).unwrap(), &Tensor::from_rows(&[&q]).unwrap()).unwrap();
    assert!((got - oracle).abs() <= 1e-12);
    // 25-digit reference: 0.5 ln(5/9) + 0.5 ln 5
    assert!((got - 0.510_825_623_765_990_683_205_514_1).abs() <= 1e-12);
}

#[test]
fn kl_errors() {
    let p = Tensor::from_rows(&[&[0.5, 0.5]]).unwrap();
    let q = Tensor::from_rows(&[&[1.0, 0.0]]).unwrap();
    assert!(matches!(kl_divergence(&p, &q), Err(TensorError::Domain { .. })));
    let q3 = Tensor::from_rows(&[&[0.2, 0.3, 0.5]]).unwrap();
    assert!(matches!(kl_divergence(&p, &q3), Err(TensorError::Shape { .. })));
}

#[test]
fn cross_entropy_cases() {
    let confident = Tensor::from_rows(&[&[20.0, -20.0]]).unwrap();
    assert!(cross_entropy(&confident, &[0]).unwrap() <= 1e-8);
    let uniform = Tensor::from_rows(&[&[0.7, 0.7, 0.7], &[0.7, 0.7, 0.7]]).unwrap();
    assert!((cross_entropy(&uniform, &[2, 0]).unwrap() - 3f64.ln()).abs() <= 1e-15);
    assert!(matches!(
        cross_entropy(&uniform, &[3, 0]),
        Err(TensorError::Index { index: 3, .. })
    ));
}

#[test]
fn cross_entropy_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let logits = random_tensor(&mut rng, &[4, 3], 4.0);
    let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
    let mut oracle = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let exps: Vec<f64> = row.iter().map(|z| z.exp()).collect();
        let s: f64 = exps.iter().sum();
        oracle += -(exps[y] / s).ln();
    }
    oracle /= 4.0;
    assert!((cross_entropy(&logits, &labels).unwrap() - oracle).abs() <= 1e-12);
}

#[test]
fn backward_linear_and_quadratic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w = random_tensor(&mut rng, &[3, 2], 1.0);
    let mut tape = Tape::new();
    let v = tape.param(&w);
    let loss = tape.sum(v).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(v).unwrap(), &[1.0; 6]);
    assert_eq!(tape.grad(loss).unwrap(), &[1.0]);

    let mut tape = Tape::new();
    let v = tape.param(&w);
    let sq = tape.mul(v, v).unwrap();
    let s = tape.sum(sq).unwrap();
    let loss = tape.scale(s, 0.5).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(v).unwrap(), w.data());
}

#[test]
fn backward_rejects_foreign_and_non_scalar() {
    let mut a = Tape::new();
    let mut b = Tape::new();
    let x = a.param(&Tensor::scalar(1.0));
    assert!(matches!(b.backward(x), Err(TensorError::Usage(_))));
    let m = a.param(&Tensor::zeros(&[2, 2]));
    assert!(matches!(a.backward(m), Err(TensorError::Usage(_))));
    a.reset();
    assert!(matches!(a.backward(x), Err(TensorError::Usage(_))));
}

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn assert_grad<F>(inputs: &[Tensor], f: F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let report = check_gradients(inputs, H, f).unwrap();
    assert!(report.max_rel_error <= TOL, "{report:?}");
}

/// Reduces an arbitrary node to a scalar with a fixed random weighting so the
/// upstream gradient is not uniform.
fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> Result<Var, TensorError> {
    let shape = tape.shape(x).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random_tensor(&mut rng, &shape, 1.0);
    let wv = tape.constant(&w);
    let p = tape.mul(x, wv)?;
    tape.sum(p)
}

#[test]
fn gradcheck_elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let a = random_tensor(&mut rng, &[3, 4], 1.5);
    let b = random_tensor(&mut rng, &[3, 4], 1.5);
    let bias = random_tensor(&mut rng, &[4], 1.0);
    assert_grad(&[a.clone(), b.clone()], |t, v| {
        let s = t.add(v[0], v[1])?;
        let d = t.sub(s, v[1])?;
        let m = t.mul(d, v[1])?;
        weighted_sum(t, m, 1)
    });
    assert_grad(&[a.clone(), bias], |t, v| {
        let r = t.add_row(v[0], v[1])?;
        let s = t.scale(r, -1.7)?;
        weighted_sum(t, s, 2)
    });
    assert_grad(core::slice::from_ref(&a), |t, v| {
        let g = t.gelu(v[0])?;
        weighted_sum(t, g, 3)
    });
    assert_grad(core::slice::from_ref(&a), |t, v| {
        let g = t.tanh(v[0])?;
        let s = t.sigmoid(g)?;
        let m = t.mean(s)?;
        t.scale(m, 3.0)
    });
}

#[test]
fn gradcheck_matmul_layernorm_gather_slice_blend() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let a = random_tensor(&mut rng, &[3, 4], 1.0);
    let b = random_tensor(&mut rng, &[4, 5], 1.0);
    assert_grad(&[a.clone(), b.clone()], |t, v| {
        let m = t.matmul(v[0], v[1])?;
        weighted_sum(t, m, 4)
    });
    let gain = random_tensor(&mut rng, &[4], 1.0);
    let bias = random_tensor(&mut rng, &[4], 1.0);
    assert_grad(&[a.clone(), gain, bias], |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2])?;
        weighted_sum(t, y, 5)
    });
    assert_grad(core::slice::from_ref(&a), |t, v| {
        let g = t.gather_rows(v[0], &[2, 0, 2, 1])?;
        let s = t.slice_cols(g, 1, 3)?;
        weighted_sum(t, s, 6)
    });
    let c = random_tensor(&mut rng, &[3, 4], 1.0);
    assert_grad(&[a, c], |t, v| {
        let bl = t.blend_rows(&[true, false, true], v[0], v[1])?;
        weighted_sum(t, bl, 7)
    });
}

#[test]
fn gradcheck_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let (batch, seq, d) = (2, 4, 6);
    let q = random_tensor(&mut rng, &[batch * seq, d], 1.0);
    let k = random_tensor(&mut rng, &[batch * seq, d], 1.0);
    let v = random_tensor(&mut rng, &[batch * seq, d], 1.0);
    assert_grad(&[q, k, v], |t, x| {
        let o = t.causal_attention(x[0], x[1], x[2], seq, 2, &[4, 2])?;
        weighted_sum(t, o, 8)
    });
}

#[test]
fn gradcheck_softmax_kl_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let z = random_tensor(&mut rng, &[3, 4], 2.0);
    let z2 = random_tensor(&mut rng, &[3, 4], 2.0);
    assert_grad(core::slice::from_ref(&z), |t, v| {
        let s = t.softmax_with_temperature(v[0], 3.0)?;
        weighted_sum(t, s, 9)
    });
    assert_grad(&[z.clone(), z2], |t, v| {
        let p = t.softmax_with_temperature(v[0], 1.0)?;
        let q = t.softmax_with_temperature(v[1], 2.5)?;
        t.kl_divergence(p, q)
    });
    assert_grad(core::slice::from_ref(&z), |t, v| t.cross_entropy(v[0], &[0, 3, 1]));
}

#[test]
fn attention_with_zero_scores_averages_visible_values() {
    let (seq, d) = (4, 2);
    let q = Tensor::zeros(&[seq, d]);
    let v = Tensor::from_rows(&[&[1.0, 10.0], &[2.0, 20.0], &[3.0, 30.0], &[4.0, 40.0]]).unwrap();
    let mut tape = Tape::new();
    let (qv, kv, vv) = (tape.constant(&q), tape.constant(&q), tape.constant(&v));
    // valid length 3: position 3 is padding and must not be attended to
    let o = tape.causal_attention(qv, kv, vv, seq, 1, &[3]).unwrap();
    let out = tape.to_tensor(o);
    let expected = [[1.0, 10.0], [1.5, 15.0], [2.0, 20.0], [2.0, 20.0]];
    for (i, row) in expected.iter().enumerate() {
        for j in 0..2 {
            assert!((out.get2(i, j) - row[j]).abs() <= 1e-12);
        }
    }
}

#[test]
fn dropout_zero_rate_is_identity_and_scales_survivors() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::full(&[10, 10], 2.0);
    let mut tape = Tape::new();
    let v = tape.constant(&x);
    let same = tape.dropout(v, 0.0, &mut rng).unwrap();
    assert_eq!(same, v);
    let d = tape.dropout(v, 0.5, &mut rng).unwrap();
    assert!(tape.value(d).iter().all(|&y| y == 0.0 || y == 4.0));
}

#[test]
fn adam_zero_gradient_is_noop() {
    let mut params = vec![Tensor::from_rows(&[&[1.5, -2.0]]).unwrap()];
    params[0].set_grad(vec![0.0, 0.0]).unwrap();
    let mut opt = Adam::new(AdamConfig::default(), &params).unwrap();
    opt.step(&mut params).unwrap();
    assert_eq!(params[0].data(), &[1.5, -2.0]);
    assert_eq!(opt.steps(), 1);
}

#[test]
fn adam_moves_against_gradient_sign() {
    for g in [3.0, -0.25] {
        let mut params = vec![Tensor::scalar(0.0)];
        params[0].set_grad(vec![g]).unwrap();
        let mut opt = Adam::new(AdamConfig::default(), &params).unwrap();
        opt.step(&mut params).unwrap();
        assert!(params[0].item() * g < 0.0);
        assert_eq!(params[0].grad().unwrap(), &[0.0]);
    }
}

#[test]
fn adam_reduces_quadratic_distance() {
    let config = AdamConfig {
        learning_rate: 0.1,
        ..AdamConfig::default()
    };
    let mut params = vec![Tensor::scalar(0.0)];
    let mut opt = Adam::new(config, &params).unwrap();
    let mut last_step = 0;
    for _ in 0..10 {
        let w = params[0].item();
        params[0].set_grad(vec![2.0 * (w - 3.0)]).unwrap();
        opt.step(&mut params).unwrap();
        assert_eq!(opt.steps(), last_step + 1);
        last_step = opt.steps();
    }
    assert!((params[0].item() - 3.0).abs() < 3.0);
}

#[test]
fn adam_requires_gradients() {
    let mut params = vec![Tensor::scalar(0.0)];
    let mut opt = Adam::new(AdamConfig::default(), &params).unwrap();
    assert!(matches!(opt.step(&mut params), Err(TensorError::Usage(_))));
}

#[test]
fn softmax_rows_sum_to_one_over_wide_magnitudes() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let logits = random_tensor(&mut rng, &[1000, 5], 100.0);
    let s = softmax_with_temperature(&logits, 1.0).unwrap();
    for i in 0..1000 {
        let row = s.row(i);
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        assert!(row.iter().all(|&p| p > 0.0 && p <= 1.0));
        assert!(row.iter().all(|p| p.is_finite()));
    }
}

proptest! {
    #[test]
    fn entropy_non_decreasing_in_temperature(row in prop::collection::vec(-20.0f64..20.0, 2..6)) {
        prop_assume!(row.iter().any(|&x| x != row[0]));
        let z = Tensor::from_rows(&[&row]).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for t in [0.5, 1.0, 2.0, 3.0, 10.0] {
            let h = entropy(softmax_with_temperature(&z, t).unwrap().data());
            prop_assert!(h >= prev - 1e-12);
            prev = h;
        }
    }

    #[test]
    fn kl_is_non_negative(seed in any::<u64>(), cols in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = row_stochastic(&mut rng, 3, cols);
        let q = row_stochastic(&mut rng, 3, cols);
        prop_assert!(kl_divergence(&p, &q).unwrap() >= 0.0);
    }

    #[test]
    fn cross_entropy_equals_kl_against_one_hot(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = random_tensor(&mut rng, &[4, 3], 10.0);
        let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
        let mut onehot = Tensor::zeros(&[4, 3]);
        for (i, &y) in labels.iter().enumerate() {
            onehot.data_mut()[i * 3 + y] = 1.0;
        }
        let q = softmax_with_temperature(&logits, 1.0).unwrap();
        let ce = cross_entropy(&logits, &labels).unwrap();
        let kl = kl_divergence(&onehot, &q).unwrap();
        prop_assert!((ce - kl).abs() <= 1e-10);
    }

    #[test]
    fn log_sum_exp_is_shift_invariant(row in prop::collection::vec(-50.0f64..50.0, 2..8), c in -100.0f64..100.0) {
        let shifted: Vec<f64> = row.iter().map(|x| x + c).collect();
        prop_assert!((kernels::log_sum_exp(&shifted) - kernels::log_sum_exp(&row) - c).abs() <= 1e-9);
    }
}
