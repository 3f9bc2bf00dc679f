mod common;

use std::collections::BTreeMap;

use common::*;
use quantnet::binarize::{BinarizedLayerState, BinarizerKind};
use quantnet::meta::MetaInit;
use quantnet::nn::{Layer, LayerSpec, NetworkSpec};
use quantnet::optim::OptimizerKind;
use quantnet::train::{
    argmax, discretize_model, evaluate, load_mnist, Dataset, DatasetKind, LrSchedule, Model, Trainer, TrainingConfig,
};
use quantnet::{DType, Error, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const KINDS: [BinarizerKind; 4] = [
    BinarizerKind::SignSte,
    BinarizerKind::XnorScaled,
    BinarizerKind::SelfBinarizingTanh,
    BinarizerKind::QuantNetMeta,
];

fn trainer(kind: Option<BinarizerKind>, optimizer: OptimizerKind, lr: f64, seed: u64) -> Trainer<f64> {
    let config = toy_config(kind, optimizer, lr);
    Trainer::with_model(config, toy_model(kind, seed), ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

// ---- config ----------------------------------------------------------------

#[test]
fn config_parses_key_value_text() {
    let c = TrainingConfig::parse(
        "# comment\nnetwork = cnn\ndataset = cifar10\nbinarizer = xnor\noptimizer = amsgrad\n\
         lr = 0.01 # trailing\nlambda = 0\nbatch_size = 32\nseed = 9\ndeterministic = off\n\
         activation_bits = 2\nlr_schedule = step\ntrain_limit = 500\nprecision = f64\n",
    )
    .unwrap();
    assert_eq!(c.network, "cnn");
    assert_eq!(c.dataset, DatasetKind::Cifar10);
    assert_eq!(c.binarizer, Some(BinarizerKind::XnorScaled));
    assert_eq!(c.optimizer, OptimizerKind::Amsgrad);
    assert_eq!(c.lr, 0.01);
    assert_eq!(c.lambda, 0.0);
    assert_eq!(c.batch_size, 32);
    assert_eq!(c.seed, 9);
    assert!(!c.deterministic);
    assert_eq!(c.activation_bits, 2);
    assert_eq!(c.lr_schedule, LrSchedule::Step);
    assert_eq!(c.train_limit, Some(500));
    assert_eq!(c.precision, DType::F64);
    assert_eq!(TrainingConfig::parse("binarizer = none").unwrap().binarizer, None);
}

#[test]
fn unknown_keys_and_bad_values_are_errors() {
    for text in ["colour = blue", "lr = fast", "deterministic = maybe", "no equals sign", "optimizer = lbfgs"] {
        assert!(matches!(TrainingConfig::parse(text), Err(Error::Config(_))), "{text}");
    }
}

#[test]
fn config_round_trips_through_text() {
    let mut c = TrainingConfig::default();
    assert_eq!(TrainingConfig::parse(&c.to_kv()).unwrap(), c);
    c.network = "cnn".into();
    c.binarizer = None;
    c.lr = 0.1 + 0.2;
    c.lambda = 3e-7;
    c.meta_init = MetaInit::Cold;
    c.test_limit = Some(7);
    c.max_steps_per_epoch = Some(11);
    c.data_dir = Some("some/where".into());
    c.precision = DType::F64;
    assert_eq!(TrainingConfig::parse(&c.to_kv()).unwrap(), c);
}

#[test]
fn validation_rejects_non_positive_settings() {
    assert!(TrainingConfig::default().validate().is_ok());
    let cases: [fn(&mut TrainingConfig); 7] = [
        |c| c.lr = 0.0,
        |c| c.quantnet_lr = -1.0,
        |c| c.lambda = -1e-4,
        |c| c.batch_size = 1,
        |c| c.epochs = 0,
        |c| c.dominance_k = 1.5,
        |c| c.network = "resnet".into(),
    ];
    for f in cases {
        let mut c = TrainingConfig::default();
        f(&mut c);
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}

#[test]
fn step_schedule_decays_at_half_and_three_quarters() {
    let c = TrainingConfig {
        lr: 1.0,
        epochs: 8,
        lr_schedule: LrSchedule::Step,
        ..TrainingConfig::default()
    };
    let lrs: Vec<f64> = (0..8).map(|e| c.lr_at(e)).collect();
    assert_eq!(lrs, vec![1.0, 1.0, 1.0, 1.0, 0.1, 0.1, 0.01, 0.01]);
    let flat = TrainingConfig { lr: 0.5, ..c };
    let flat = TrainingConfig {
        lr_schedule: LrSchedule::Constant,
        ..flat
    };
    assert!((0..8).all(|e| flat.lr_at(e) == 0.5));
}

// ---- train_step ------------------------------------------------------------

#[test]
fn warm_started_meta_quantizer_without_regularizer_matches_tanh_training() {
    let data = blobs(30, 4);
    let (x, labels) = data.batch::<f64>(&(0..30).collect::<Vec<_>>()).unwrap();
    let mut runs = Vec::new();
    for kind in [BinarizerKind::QuantNetMeta, BinarizerKind::SelfBinarizingTanh] {
        let mut config = toy_config(Some(kind), OptimizerKind::Sgdm, 1e-3);
        config.quantnet_lr = 1e-3;
        config.lambda = 0.0;
        let mut t = Trainer::with_model(config, toy_model::<f64>(Some(kind), 7), ChaCha8Rng::seed_from_u64(7)).unwrap();
        let r = t.train_step(&x, &labels).unwrap();
        runs.push((r.task_loss, t.model.net.params.clone()));
    }
    let (q, t) = (&runs[0], &runs[1]);
    assert!((q.0 - t.0).abs() <= 1e-6, "{} vs {}", q.0, t.0);
    for id in q.1.ids() {
        for (a, b) in q.1.get(id).data().iter().zip(t.1.get(id).data()) {
            assert!((a - b).abs() <= 1e-6, "{}: {a} vs {b}", q.1.name(id));
        }
    }
}

#[test]
fn equal_seeds_give_identical_loss_sequences() {
    let data = toy_data();
    let run = || {
        let mut t = trainer(Some(BinarizerKind::QuantNetMeta), OptimizerKind::Adam, 1e-2, 5);
        let mut losses = Vec::new();
        for _ in 0..3 {
            losses.push(t.train_epoch(&data.train).unwrap().task_loss);
        }
        (losses, t.model.net.params)
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a, b);
    assert_eq!(pa, pb);
}

#[test]
fn loss_decreases_on_separable_data() {
    let data = blobs(60, 8);
    let (x, labels) = data.batch::<f64>(&(0..60).collect::<Vec<_>>()).unwrap();
    for kind in [None, Some(BinarizerKind::SelfBinarizingTanh), Some(BinarizerKind::QuantNetMeta)] {
        let mut t = trainer(kind, OptimizerKind::Sgdm, 1e-2, 11);
        let losses: Vec<f64> = (0..10).map(|_| t.train_step(&x, &labels).unwrap().task_loss).collect();
        for w in losses.windows(2) {
            assert!(w[1] < w[0], "{kind:?}: {losses:?}");
        }
    }
}

#[test]
fn nan_loss_aborts_the_step() {
    let mut t = trainer(Some(BinarizerKind::SignSte), OptimizerKind::Adam, 1e-2, 1);
    let before = t.model.clone();
    let x = Tensor::<f64>::from_f64(vec![2, FEATURES], &[f64::NAN; 2 * FEATURES]).unwrap();
    assert!(matches!(t.train_step(&x, &[0, 1]), Err(Error::Diverged { step: 0, .. })));
    assert_eq!(t.model.net.params, before.net.params);
}

#[test]
fn frozen_shadow_weights_stay_put() {
    let data = blobs(20, 3);
    let (x, labels) = data.batch::<f64>(&(0..20).collect::<Vec<_>>()).unwrap();
    let mut t = trainer(Some(BinarizerKind::QuantNetMeta), OptimizerKind::Adam, 1e-2, 2);
    t.config.w_trainable = false;
    let wid = t.model.net.weight_id(3).unwrap();
    let w0 = t.model.net.params.get(wid).clone();
    let theta0 = t.model.binarized[0].meta.as_ref().unwrap().store.clone();
    t.train_step(&x, &labels).unwrap();
    assert_eq!(t.model.net.params.get(wid), &w0);
    assert_ne!(t.model.binarized[0].meta.as_ref().unwrap().store, theta0);
}

#[test]
fn epochs_smaller_than_a_batch_are_rejected() {
    let mut t = trainer(None, OptimizerKind::Adam, 1e-2, 1);
    assert!(matches!(t.train_epoch(&blobs(5, 1)), Err(Error::Config(_))));
}

// ---- discretize ------------------------------------------------------------

#[test]
fn discretized_weights_are_signs() {
    let st = BinarizedLayerState::<f64>::new(0, BinarizerKind::QuantNetMeta);
    let wq = Tensor::from_f64(vec![2], &[0.9, -0.2]).unwrap();
    assert_eq!(st.discretized(&wq).data(), &[1.0, -1.0]);
}

#[test]
fn discretization_is_idempotent_and_removes_the_quantizer() {
    let data = toy_data();
    for kind in KINDS {
        let mut t = trainer(Some(kind), OptimizerKind::Adam, 1e-2, 6);
        t.train_epoch(&data.train).unwrap();
        let once = discretize_model(&t.model).unwrap();
        let twice = discretize_model(&once).unwrap();
        assert_eq!(once, twice, "{kind}");
        assert_eq!(once.meta_param_count(), 0);
        if kind == BinarizerKind::QuantNetMeta {
            assert!(t.model.meta_param_count() > 0);
        }
        for st in &once.binarized {
            assert!(st.fixed && st.meta.is_none());
            let w = once.net.params.get(once.net.weight_id(st.layer).unwrap());
            let n = *w.shape().last().unwrap();
            for (i, &v) in w.data().iter().enumerate() {
                let s = if st.scale.len() == 1 { st.scale[0] } else { st.scale[i % n] };
                let s = if kind == BinarizerKind::XnorScaled { s } else { 1.0 };
                assert!(v == s || v == -s, "{kind}: {v} vs ±{s}");
            }
        }
    }
}

#[test]
fn discretization_rescales_the_following_batch_norm() {
    let mut m = toy_model::<f64>(Some(BinarizerKind::SelfBinarizingTanh), 4);
    let bn = m.net.following_batch_norm(3).unwrap().clone();
    m.net.params.set(bn.running_mean, Tensor::full(vec![8], 0.2));
    m.net.params.set(bn.running_var, Tensor::full(vec![8], 0.5));
    let wq = m.binarized_weights().unwrap()[&3].clone();
    let rms = (wq.data().iter().map(|v| v * v).sum::<f64>() / wq.len() as f64).sqrt();
    let d = discretize_model(&m).unwrap();
    for &v in d.net.params.get(bn.running_mean).data() {
        assert!((v - 0.2 / rms).abs() < 1e-12);
    }
    for &v in d.net.params.get(bn.running_var).data() {
        assert!((v - 0.5 / (rms * rms)).abs() < 1e-12);
    }
    let first = m.net.following_batch_norm(0).unwrap();
    assert_eq!(d.net.params.get(first.running_mean), m.net.params.get(first.running_mean));
}

// ---- evaluate --------------------------------------------------------------

fn linear_model(inputs: usize, outputs: usize, w: Vec<f64>) -> Model<f64> {
    let spec = NetworkSpec::from_body(
        "linear",
        vec![inputs],
        vec![LayerSpec::Dense {
            inputs,
            outputs,
            bias: true,
        }],
        false,
        0,
    );
    let mut m = Model::new(spec, None, MetaInit::Warm, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let id = m.net.weight_id(0).unwrap();
    m.net.params.set(id, Tensor::new(vec![inputs, outputs], w).unwrap());
    m
}

#[test]
fn argmax_prefers_the_lowest_index_on_ties() {
    assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    assert_eq!(argmax(&[0.0; 10]), 0);
    assert_eq!(argmax(&[-1.0, -0.5]), 1);
}

#[test]
fn evaluate_counts_correct_predictions() {
    let mut eye = vec![0.0; 9];
    (0..3).for_each(|i| eye[i * 3 + i] = 1.0);
    let mut m = linear_model(3, 3, eye);
    let images: Vec<f32> = (0..30).flat_map(|i| (0..3).map(move |j| if j == i % 3 { 1.0 } else { 0.0 })).collect();
    let labels = (0..30).map(|i| (i % 3) as u8).collect();
    let d = Dataset::new(images, labels, vec![3], 3).unwrap();
    assert_eq!(evaluate(&mut m, &d, None).unwrap(), 1.0);
    assert_eq!(evaluate(&mut m, &d, Some(7)).unwrap(), 1.0);
}

#[test]
fn constant_outputs_score_chance_on_balanced_data() {
    let mut m = linear_model(2, 10, vec![0.0; 20]);
    let images: Vec<f32> = (0..200).map(|i| i as f32 / 7.0).collect();
    let labels = (0..100).map(|i| (i % 10) as u8).collect();
    let d = Dataset::new(images, labels, vec![2], 10).unwrap();
    assert_eq!(evaluate(&mut m, &d, None).unwrap(), 0.1);
}

#[test]
fn evaluating_an_empty_split_is_an_error() {
    let mut m = linear_model(2, 2, vec![0.0; 4]);
    let d = Dataset::new(Vec::new(), Vec::new(), vec![2], 2).unwrap();
    assert!(matches!(evaluate(&mut m, &d, None), Err(Error::EmptyInput { .. })));
}

/// Scalar forward pass over dense / batch-norm (running) / leaky-relu layers.
fn loop_logits(m: &Model<f64>, weights: &BTreeMap<usize, Tensor<f64>>, x: &[f32]) -> Vec<f64> {
    let p = &m.net.params;
    let mut h: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    for (i, layer) in m.net.layers.iter().enumerate() {
        h = match layer {
            Layer::Dense(d) => {
                let w = weights.get(&i).unwrap_or_else(|| p.get(d.w)).data();
                (0..d.outputs)
                    .map(|o| {
                        let b = d.b.map_or(0.0, |b| p.get(b).data()[o]);
                        b + (0..d.inputs).map(|k| h[k] * w[k * d.outputs + o]).sum::<f64>()
                    })
                    .collect()
            }
            Layer::BatchNorm(bn) => (0..bn.features)
                .map(|f| {
                    let mean = p.get(bn.running_mean).data()[f];
                    let var = p.get(bn.running_var).data()[f];
                    p.get(bn.gamma).data()[f] * (h[f] - mean) / (var + bn.eps).sqrt() + p.get(bn.beta).data()[f]
                })
                .collect(),
            Layer::LeakyRelu(s) => h.iter().map(|&v| if v >= 0.0 { v } else { s * v }).collect(),
            other => panic!("unexpected layer {other:?}"),
        };
    }
    h
}

#[test]
fn evaluate_matches_a_scalar_loop_on_mnist() {
    let dir = mnist_dir();
    let split = if dir.join("t10k-images-idx3-ubyte").exists() {
        load_mnist(&dir).unwrap().test.truncated(100)
    } else {
        eprintln!("MNIST not found; using synthetic digits");
        let images = (0..100 * 784).map(|i| ((i * 7919) % 256) as f32 / 255.0).collect();
        Dataset::new(images, (0..100).map(|i| (i % 10) as u8).collect(), vec![784], 10).unwrap()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let spec = NetworkSpec::mlp(false, 0);
    let mut m = Model::<f64>::new(spec, Some(BinarizerKind::SelfBinarizingTanh), MetaInit::Warm, true, &mut rng).unwrap();
    // non-trivial running statistics
    for layer in [1, 4] {
        let Layer::BatchNorm(bn) = m.net.layers[layer].clone() else { panic!() };
        let mean = (0..256).map(|f| (f as f64 - 128.0) / 900.0).collect();
        let var = (0..256).map(|f| 0.002 + f as f64 / 3000.0).collect();
        m.net.params.set(bn.running_mean, Tensor::new(vec![256], mean).unwrap());
        m.net.params.set(bn.running_var, Tensor::new(vec![256], var).unwrap());
    }
    let weights = m.binarized_weights().unwrap();
    let mut correct = 0;
    for i in 0..split.len() {
        let logits = loop_logits(&m, &weights, split.image(i));
        let mut best = 0;
        for (c, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = c;
            }
        }
        correct += (best == split.labels[i] as usize) as usize;
    }
    let acc = evaluate(&mut m, &split, None).unwrap();
    assert_eq!(acc, correct as f64 / split.len() as f64);

    // logits themselves agree
    let (x, _) = split.batch::<f64>(&[0, 1, 2]).unwrap();
    let got = m.logits_with(&x, &weights).unwrap();
    for r in 0..3 {
        for (a, b) in got.data()[r * 10..(r + 1) * 10].iter().zip(loop_logits(&m, &weights, split.image(r))) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
