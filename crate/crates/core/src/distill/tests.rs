use std::string::ToString;
use std::vec;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};

use super::*;
use crate::codeprep::{CLS, PAD};
use crate::models::{ModelConfig, TransformerConfig};
use crate::tensor::gradcheck::check_gradients;

fn scalar_softmax(z: &[f64], t: f64) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| ((x - m) / t).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

fn scalar_kl(p: &[f64], q: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (a, b) in p.iter().zip(q) {
        if *a > 0.0 {
            acc += a * (a / b).ln();
        }
    }
    acc
}

fn scalar_ce(z: &[f64], y: usize) -> f64 {
    -scalar_softmax(z, 1.0)[y].ln()
}

fn row_entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|x| **x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}

fn t2(rows: &[[f64; 2]]) -> Tensor {
    let r: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
    Tensor::from_rows(&r).unwrap()
}

fn tiny(seed: u64, dropout: f64) -> Model {
    Model::new(ModelConfig::Transformer(TransformerConfig {
        vocab_size: 12,
        d_model: 16,
        n_heads: 2,
        n_layers: 2,
        d_ff: 32,
        max_len: 8,
        n_classes: 2,
        dropout_rate: dropout,
        seed,
    }))
    .unwrap()
}

/// Label is 1 exactly when token 5 occurs.
fn toy_examples(n: usize, seed: u64, prefix: &str) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let len = rng.random_range(2..8);
            let mut ids = vec![CLS];
            for _ in 1..len {
                ids.push(rng.random_range(3..12));
            }
            if i % 2 == 1 && !ids.contains(&5) {
                let at = rng.random_range(1..len);
                ids[at] = 5;
            }
            if i % 2 == 0 {
                for t in ids.iter_mut().skip(1) {
                    if *t == 5 {
                        *t = 6;
                    }
                }
            }
            let label = if ids.contains(&5) {
                Label::Vulnerable
            } else {
                Label::Safe
            };
            let true_length = ids.len();
            ids.resize(8, PAD);
            Example {
                id: format!("{prefix}{i}"),
                seq: TokenSequence {
                    ids,
                    true_length,
                    label: Some(label),
                },
                label,
            }
        })
        .collect()
}

fn bytes(model: &Model) -> Vec<u64> {
    model
        .params()
        .iter()
        .flat_map(|p| p.data().iter().map(|x| x.to_bits()))
        .collect()
}

#[test]
fn soft_targets_soften_with_temperature() {
    let z = t2(&[[4.0, 0.0]]);
    let cold = soft_targets(&z, 1.0).unwrap();
    let warm = soft_targets(&z, 3.0).unwrap();
    assert!(row_entropy(warm.row(0)) > row_entropy(cold.row(0)));
    for t in [0.5, 1.0, 3.0, 50.0] {
        let p = soft_targets(&t2(&[[1.7, 1.7]]), t).unwrap();
        assert_eq!(p.row(0), &[0.5, 0.5]);
    }
    let p = soft_targets(&t2(&[[2.0, -1.0]]), 3.0).unwrap();
    let oracle = [1.0 / (1.0 + (-1.0f64).exp()), (-1.0f64).exp() / (1.0 + (-1.0f64).exp())];
    for (got, want) in p.row(0).iter().zip(oracle) {
        assert!((got - want).abs() < 1e-12);
    }
    assert!(soft_targets(&z, 0.0).is_err());
}

#[test]
fn kd_loss_examples() {
    let p = t2(&[[0.8, 0.2], [0.35, 0.65]]);
    let t = 3.0;
    let matched: Vec<[f64; 2]> = (0..2).map(|i| [t * p.get2(i, 0).ln(), t * p.get2(i, 1).ln()]).collect();
    assert!(kd_loss(&t2(&matched), &p, t).unwrap().abs() < 1e-12);
    assert_eq!(kd_loss(&t2(&[[0.0, 0.0]]), &t2(&[[0.5, 0.5]]), 3.0).unwrap(), 0.0);

    let got = kd_loss(&t2(&[[1.0, -1.0]]), &t2(&[[0.9, 0.1]]), 3.0).unwrap();
    let q1 = 1.0 / (1.0 + (-2.0f64 / 3.0).exp());
    let oracle = 0.9 * (0.9 / q1).ln() + 0.1 * (0.1 / (1.0 - q1)).ln();
    assert!((got - oracle).abs() < 1e-12, "{got} vs {oracle}");
}

#[test]
fn total_loss_examples() {
    let obj = Objective {
        temperature: 3.0,
        teacher_weights: vec![1.0],
        hard_loss_weight: 1.0,
    };
    assert_eq!(obj.combine(1.0, 0.5).total, 5.5);

    let z = t2(&[[0.3, -1.2], [2.0, 0.5], [-0.7, 0.1]]);
    let labels = [Label::Safe, Label::Vulnerable, Label::Vulnerable];
    let onehot = t2(&[[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]]);
    let cfg = DistillConfig {
        temperature: 1.0,
        ..DistillConfig::default()
    };
    let b = total_loss(&z, &labels, &[&onehot], &cfg).unwrap();
    assert!((b.kd - b.ce).abs() < 1e-10);
    assert!((b.total - 2.0 * b.ce).abs() < 1e-10);
}

#[test]
fn two_teacher_loss_matches_scalar_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 6;
    let z: Vec<[f64; 2]> = (0..n)
        .map(|_| [rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)])
        .collect();
    let labels: Vec<Label> = (0..n).map(|i| Label::from_index(i % 2).unwrap()).collect();
    let teachers: Vec<Vec<[f64; 2]>> = (0..2)
        .map(|_| {
            (0..n)
                .map(|_| {
                    let a: f64 = rng.random_range(0.01..0.99);
                    [a, 1.0 - a]
                })
                .collect()
        })
        .collect();
    let cfg = DistillConfig {
        teacher_weights: vec![0.7, 0.3],
        hard_loss_weight: 0.5,
        ..DistillConfig::default()
    };
    let tp: Vec<Tensor> = teachers.iter().map(|t| t2(t)).collect();
    let b = total_loss(&t2(&z), &labels, &[&tp[0], &tp[1]], &cfg).unwrap();

    let ce: f64 = (0..n).map(|i| scalar_ce(&z[i], labels[i].index())).sum::<f64>() / n as f64;
    let mut kd = 0.0;
    for (k, w) in [0.7, 0.3].iter().enumerate() {
        let kl: f64 = (0..n)
            .map(|i| scalar_kl(&teachers[k][i], &scalar_softmax(&z[i], 3.0)))
            .sum::<f64>()
            / n as f64;
        kd += w * kl;
    }
    let total = 0.5 * ce + 9.0 * kd;
    assert!((b.ce - ce).abs() < 1e-12);
    assert!((b.kd - kd).abs() < 1e-12);
    assert!((b.total - total).abs() < 1e-12);
}

#[test]
fn loss_identity_and_kl_sign_over_random_tuples() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..1000 {
        let n = rng.random_range(1..6);
        let scale = [1.0, 10.0, 100.0][rng.random_range(0..3)];
        let z: Vec<[f64; 2]> = (0..n)
            .map(|_| [rng.random_range(-scale..scale), rng.random_range(-scale..scale)])
            .collect();
        let labels: Vec<Label> = (0..n)
            .map(|_| Label::from_index(rng.random_range(0..2)).unwrap())
            .collect();
        let p: Vec<[f64; 2]> = (0..n)
            .map(|_| {
                let a: f64 = rng.random_range(0.0..1.0);
                [a, 1.0 - a]
            })
            .collect();
        let cfg = DistillConfig {
            temperature: rng.random_range(0.5..10.0),
            hard_loss_weight: rng.random_range(0.0..2.0),
            ..DistillConfig::default()
        };
        let b = total_loss(&t2(&z), &labels, &[&t2(&p)], &cfg).unwrap();
        let t = cfg.temperature;
        assert!((b.total - (cfg.hard_loss_weight * b.ce + t * t * b.kd)).abs() <= 1e-12);
        assert!(b.kd >= 0.0 && b.ce >= 0.0);
    }
}

#[test]
fn kd_loss_gradient_matches_finite_differences() {
    let z = t2(&[[0.3, -0.8], [1.1, 0.4], [-0.2, 0.9]]);
    let p1 = t2(&[[0.7, 0.3], [0.2, 0.8], [0.5, 0.5]]);
    let p2 = t2(&[[0.1, 0.9], [0.6, 0.4], [0.99, 0.01]]);
    let obj = Objective {
        temperature: 3.0,
        teacher_weights: vec![0.25, 0.75],
        hard_loss_weight: 0.7,
    };
    let report = check_gradients(&[z], 1e-5, |tape, v| {
        obj.loss_var(tape, v[0], &[0, 1, 1], &[&p1, &p2])
            .map(|(l, _)| l)
            .map_err(|e| match e {
                DistillError::Tensor(t) => t,
                other => TensorError::Usage(other.to_string()),
            })
    })
    .unwrap();
    assert!(report.max_rel_error <= 1e-4, "{report:?}");
}

#[test]
fn config_validation() {
    assert!(DistillConfig::default().validate().is_ok());
    let bad = [
        DistillConfig {
            temperature: 0.0,
            ..DistillConfig::default()
        },
        DistillConfig {
            hard_loss_weight: -1.0,
            ..DistillConfig::default()
        },
        DistillConfig {
            teacher_weights: vec![0.5, 0.6],
            ..DistillConfig::default()
        },
        DistillConfig {
            teacher_weights: vec![1.5, -0.5],
            ..DistillConfig::default()
        },
        DistillConfig {
            teachers: vec!["a".into()],
            teacher_weights: vec![0.5, 0.5],
            ..DistillConfig::default()
        },
        DistillConfig {
            batch_size: 0,
            ..DistillConfig::default()
        },
    ];
    for c in bad {
        assert!(matches!(c.validate(), Err(DistillError::Config(_))), "{c:?}");
    }
    let c = DistillConfig::default();
    let w = c.weights(3).unwrap();
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(c.weights(0).is_err());
    let c = DistillConfig {
        teacher_weights: vec![0.5, 0.5],
        ..DistillConfig::default()
    };
    assert!(c.weights(3).is_err());
    let z = t2(&[[0.0, 1.0]]);
    let p = t2(&[[0.5, 0.5]]);
    assert!(total_loss(&z, &[Label::Safe], &[&p, &p], &c).is_ok());
    assert!(matches!(
        total_loss(&z, &[Label::Safe], &[&p], &c),
        Err(DistillError::Config(_))
    ));
}

#[test]
fn config_serde_rejects_unknown_keys() {
    let c: DistillConfig = serde_json::from_str(r#"{"epochs": 2, "teachers": ["t.ck"]}"#).unwrap();
    assert_eq!((c.temperature, c.hard_loss_weight, c.epochs), (3.0, 1.0, 2));
    assert!(serde_json::from_str::<DistillConfig>(r#"{"temprature": 2}"#).is_err());
    assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 2}"#).is_err());
    let back: DistillConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
    assert_eq!(back, c);
}

#[test]
fn teacher_cache_spot_check_and_determinism() {
    let a = tiny(1, 0.1);
    let b = tiny(2, 0.1);
    let data = toy_examples(20, 3, "x");
    let cache = cache_teacher_predictions(&[&a, &b], &data, 3.0).unwrap();
    assert_eq!(cache.num_teachers() * cache.len(), 40);
    assert_eq!(cache, cache_teacher_predictions(&[&a, &b], &data, 3.0).unwrap());
    let direct = soft_targets(&b.logits(&[&data[7].seq]).unwrap(), 3.0).unwrap();
    assert_eq!(cache.get(1, "x7").unwrap(), direct.row(0));
    assert!(cache.get(0, "nope").is_none());
    for k in 0..2 {
        for i in 0..20 {
            assert!((cache.probs(k).row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
    let mut long = data[0].clone();
    long.seq = long.seq.resized(12);
    let err = cache_teacher_predictions(&[&a], &[long], 3.0).unwrap_err();
    assert!(
        matches!(
            err,
            DistillError::Model(ModelError::Tensor(TensorError::Dimension { .. }))
        ),
        "{err}"
    );
    assert!(cache_teacher_predictions(&[], &data, 3.0).is_err());
}

#[test]
fn zero_epochs_leave_parameters_unchanged() {
    let teacher = tiny(1, 0.1);
    let mut student = tiny(2, 0.1);
    let before = bytes(&student);
    let (train, val) = (toy_examples(10, 1, "t"), toy_examples(4, 2, "v"));
    let cfg = DistillConfig {
        epochs: 0,
        ..DistillConfig::default()
    };
    let log = okdd_train(&[&teacher], &mut student, &train, &val, &cfg, &NoClock).unwrap();
    assert!(log.epochs.is_empty() && log.best_epoch.is_none());
    assert_eq!(bytes(&student), before);
    let tc = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    train_teacher(&mut student, &train, &val, &tc, &NoClock).unwrap();
    assert_eq!(bytes(&student), before);
}

#[test]
fn self_teacher_has_zero_kd_at_first_step() {
    let student = tiny(4, 0.0);
    let teacher = student.clone();
    let mut student = student;
    let train = toy_examples(12, 1, "t");
    let cfg = DistillConfig {
        epochs: 1,
        batch_size: 12,
        ..DistillConfig::default()
    };
    let log = okdd_train(
        &[&teacher],
        &mut student,
        &train,
        &toy_examples(4, 2, "v"),
        &cfg,
        &NoClock,
    )
    .unwrap();
    assert!(log.epochs[0].kd.abs() < 1e-12, "{}", log.epochs[0].kd);
}

#[test]
fn teachers_are_never_modified() {
    let teacher = tiny(1, 0.1);
    let before = bytes(&teacher);
    let mut student = tiny(2, 0.1);
    let cfg = DistillConfig {
        epochs: 2,
        batch_size: 4,
        learning_rate: 1e-2,
        ..DistillConfig::default()
    };
    okdd_train(
        &[&teacher],
        &mut student,
        &toy_examples(16, 1, "t"),
        &toy_examples(6, 2, "v"),
        &cfg,
        &NoClock,
    )
    .unwrap();
    assert_eq!(bytes(&teacher), before);
    assert_ne!(bytes(&student), bytes(&tiny(2, 0.1)));
}

#[test]
fn identical_teachers_reduce_to_one() {
    let teacher = tiny(1, 0.1);
    let train = toy_examples(16, 1, "t");
    let val = toy_examples(6, 2, "v");
    let copies: Vec<Model> = (0..3).map(|_| teacher.clone()).collect();
    let z = tiny(9, 0.0)
        .logits(&train.iter().map(|e| &e.seq).collect::<Vec<_>>())
        .unwrap();
    let labels: Vec<Label> = train.iter().map(|e| e.label).collect();
    let one = cache_teacher_predictions(&[&teacher], &train, 3.0).unwrap();
    let cfg = DistillConfig::default();
    let single = total_loss(&z, &labels, &[one.probs(0)], &cfg).unwrap();
    for k in [2, 3, 5] {
        let probs: Vec<&Tensor> = (0..k).map(|_| one.probs(0)).collect();
        let multi = total_loss(&z, &labels, &probs, &cfg).unwrap();
        assert!((multi.kd - single.kd).abs() < 1e-12, "k={k}");
    }

    let run = |teachers: &[&Model]| {
        let mut student = tiny(2, 0.1);
        let cfg = DistillConfig {
            epochs: 2,
            batch_size: 5,
            ..DistillConfig::default()
        };
        okdd_train(teachers, &mut student, &train, &val, &cfg, &NoClock).unwrap()
    };
    let a = run(&[&teacher]);
    let b = run(&copies.iter().collect::<Vec<_>>());
    for (x, y) in a.epochs.iter().zip(&b.epochs) {
        assert!((x.kd - y.kd).abs() < 1e-12);
    }
}

#[test]
fn training_is_deterministic() {
    let teacher = tiny(1, 0.1);
    let (train, val) = (toy_examples(20, 1, "t"), toy_examples(6, 2, "v"));
    let cfg = DistillConfig {
        epochs: 2,
        batch_size: 6,
        seed: 11,
        ..DistillConfig::default()
    };
    let run = || {
        let mut s = tiny(2, 0.1);
        let log = okdd_train(&[&teacher], &mut s, &train, &val, &cfg, &NoClock).unwrap();
        (log, bytes(&s))
    };
    let (l1, p1) = run();
    let (l2, p2) = run();
    assert_eq!(l1, l2);
    assert_eq!(p1, p2);
    let other = DistillConfig {
        seed: 12,
        ..cfg.clone()
    };
    let mut s = tiny(2, 0.1);
    let l3 = okdd_train(&[&teacher], &mut s, &train, &val, &other, &NoClock).unwrap();
    assert_ne!(l1, l3);
}

#[test]
fn best_epoch_ties_go_to_the_later_epoch() {
    let mut model = tiny(3, 0.0);
    let train = toy_examples(8, 1, "t");
    let val = toy_examples(4, 2, "v");
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 8,
        learning_rate: 1e-9,
        seed: 0,
    };
    let log = train_teacher(&mut model, &train, &val, &cfg, &NoClock).unwrap();
    let accs: Vec<f64> = log.epochs.iter().map(|r| r.val_accuracy).collect();
    assert!(accs.windows(2).all(|w| w[0] == w[1]), "{accs:?}");
    assert_eq!(log.best_epoch, Some(3));
}

#[test]
fn best_parameters_are_restored() {
    let mut model = tiny(3, 0.1);
    let train = toy_examples(40, 1, "t");
    let val = toy_examples(10, 2, "v");
    let cfg = TrainConfig {
        epochs: 4,
        batch_size: 8,
        learning_rate: 5e-3,
        seed: 1,
    };
    let log = train_teacher(&mut model, &train, &val, &cfg, &NoClock).unwrap();
    let best = log.best_epoch.unwrap();
    let best_acc = log.epochs[best - 1].val_accuracy;
    assert!(log.epochs.iter().all(|r| r.val_accuracy <= best_acc));
    assert!(log.epochs[best..].iter().all(|r| r.val_accuracy < best_acc));
    assert_eq!(evaluate(&model, &val).unwrap().accuracy, best_acc);
    assert!(model.params().iter().all(|p| p.grad().is_none()));
}

#[test]
fn hard_loss_decreases_on_separable_toy_set() {
    let mut model = tiny(5, 0.0);
    let make = |n: usize, prefix: &str| -> Vec<Example> {
        (0..n)
            .map(|i| {
                let label = Label::from_index(i % 2).unwrap();
                let tok = if label == Label::Vulnerable { 4 } else { 3 };
                Example {
                    id: format!("{prefix}{i}"),
                    seq: TokenSequence {
                        ids: vec![CLS, tok, PAD, PAD, PAD, PAD, PAD, PAD],
                        true_length: 2,
                        label: Some(label),
                    },
                    label,
                }
            })
            .collect()
    };
    let cfg = TrainConfig {
        epochs: 6,
        batch_size: 4,
        learning_rate: 1e-2,
        seed: 2,
    };
    let log = train_teacher(&mut model, &make(16, "t"), &make(4, "v"), &cfg, &NoClock).unwrap();
    let ce: Vec<f64> = log.epochs.iter().map(|r| r.ce).collect();
    assert!(ce.windows(2).all(|w| w[1] <= w[0]), "{ce:?}");
    assert_eq!(log.epochs.last().unwrap().val_accuracy, 1.0);
    assert!(log.epochs.iter().all(|r| r.kd == 0.0 && r.total == r.ce));
}

#[test]
fn non_finite_loss_names_epoch_and_batch() {
    let mut model = tiny(3, 0.0);
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 4,
        learning_rate: 1e300,
        seed: 0,
    };
    let err = train_teacher(
        &mut model,
        &toy_examples(16, 1, "t"),
        &toy_examples(4, 2, "v"),
        &cfg,
        &NoClock,
    )
    .unwrap_err();
    assert_eq!(err, DistillError::NonFinite { epoch: 1, batch: 2 });
    assert!(err.to_string().contains("epoch 1, batch 2"));
}

#[test]
fn empty_sets_and_bad_teacher_init() {
    let teacher = tiny(1, 0.1);
    let mut student = tiny(2, 0.1);
    let cfg = DistillConfig::default();
    let data = toy_examples(4, 1, "t");
    assert!(matches!(
        okdd_train(&[&teacher], &mut student, &[], &data, &cfg, &NoClock),
        Err(DistillError::Usage(_))
    ));
    assert!(matches!(
        okdd_train(&[&teacher], &mut student, &data, &[], &cfg, &NoClock),
        Err(DistillError::Usage(_))
    ));
    assert!(matches!(
        okdd_train(&[], &mut student, &data, &data, &cfg, &NoClock),
        Err(DistillError::Config(_))
    ));

    let init = DistillConfig {
        epochs: 0,
        init_from_teacher: true,
        ..DistillConfig::default()
    };
    okdd_train(&[&teacher], &mut student, &data, &data, &init, &NoClock).unwrap();
    assert_eq!(bytes(&student), bytes(&teacher));
    let mut lstm = Model::new(ModelConfig::Lstm(crate::models::LstmConfig {
        vocab_size: 12,
        d_embed: 4,
        d_hidden: 4,
        max_len: 8,
        n_classes: 2,
        dropout_rate: 0.0,
        seed: 0,
    }))
    .unwrap();
    assert!(matches!(
        okdd_train(&[&teacher], &mut lstm, &data, &data, &init, &NoClock),
        Err(DistillError::Config(_))
    ));
}

#[test]
fn epoch_record_comparison_ignores_seconds() {
    let r = EpochRecord {
        epoch: 1,
        ce: 0.5,
        kd: 0.1,
        total: 1.4,
        val_accuracy: 0.75,
        val_f1: 0.7,
        seconds: 3.0,
    };
    let s = EpochRecord { seconds: 9.0, ..r };
    assert!(r.same_outcome(&s));
    assert!(!r.same_outcome(&EpochRecord { ce: 0.6, ..r }));
    let json = serde_json::to_string(&r).unwrap();
    assert_eq!(
        json,
        r#"{"epoch":1,"ce":0.5,"kd":0.1,"total":1.4,"val_accuracy":0.75,"val_f1":0.7,"seconds":3.0}"#
    );
    let _ = "".to_string();
}

proptest! {
    #[test]
    fn argmax_survives_any_temperature(a in -50.0f64..50.0, b in -50.0f64..50.0, t in 0.05f64..100.0) {
        prop_assume!(a != b);
        let p = soft_targets(&t2(&[[a, b]]), t).unwrap();
        prop_assert_eq!(p.get2(0, 0) > p.get2(0, 1), a > b);
    }

    #[test]
    fn kd_is_zero_only_for_matching_rows(a in 0.01f64..0.99, z0 in -5.0f64..5.0, z1 in -5.0f64..5.0, t in 0.5f64..5.0) {
        let p = t2(&[[a, 1.0 - a]]);
        let kd = kd_loss(&t2(&[[z0, z1]]), &p, t).unwrap();
        prop_assert!(kd >= 0.0);
        let q = soft_targets(&t2(&[[z0, z1]]), t).unwrap();
        let gap = (q.get2(0, 0) - a).abs();
        if gap > 1e-3 {
            prop_assert!(kd > 0.0);
        }
        let matched = kd_loss(&t2(&[[t * a.ln(), t * (1.0 - a).ln()]]), &p, t).unwrap();
        prop_assert!(matched.abs() < 1e-12);
    }
}
