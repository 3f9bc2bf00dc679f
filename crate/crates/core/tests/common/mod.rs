#![allow(dead_code)]

use quantnet::binarize::BinarizerKind;
use quantnet::meta::MetaInit;
use quantnet::nn::{LayerSpec, NetworkSpec};
use quantnet::optim::OptimizerKind;
use quantnet::train::{Dataset, DatasetHandle, Model, TrainingConfig};
use quantnet::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FEATURES: usize = 4;
pub const CLASSES: usize = 3;

pub fn mnist_dir() -> std::path::PathBuf {
    std::path::PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

/// 4-8-8-3 perceptron; only the middle dense layer is binarized.
pub fn toy_spec() -> NetworkSpec {
    let bn = |f| LayerSpec::BatchNorm {
        features: f,
        momentum: 0.9,
        eps: 1e-5,
    };
    let act = || LayerSpec::LeakyRelu { slope: 0.01 };
    let body = vec![
        LayerSpec::Dense {
            inputs: FEATURES,
            outputs: 8,
            bias: false,
        },
        bn(8),
        act(),
        LayerSpec::Dense {
            inputs: 8,
            outputs: 8,
            bias: false,
        },
        bn(8),
        act(),
        LayerSpec::Dense {
            inputs: 8,
            outputs: CLASSES,
            bias: true,
        },
    ];
    NetworkSpec::from_body("toy", vec![FEATURES], body, false, 0)
}

pub fn toy_model<T: Scalar>(kind: Option<BinarizerKind>, seed: u64) -> Model<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Model::new(toy_spec(), kind, MetaInit::Warm, true, &mut rng).unwrap()
}

/// Three Gaussian blobs centred on ±2 along different axes.
pub fn blobs(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n * FEATURES);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % CLASSES;
        for f in 0..FEATURES {
            let centre = if f == c { 2.0 } else if f == CLASSES { -1.0 } else { 0.0 };
            images.push(centre + rng.random_range(-0.5f32..0.5));
        }
        labels.push(c as u8);
    }
    Dataset::new(images, labels, vec![FEATURES], CLASSES).unwrap()
}

pub fn toy_data() -> DatasetHandle {
    DatasetHandle {
        train: blobs(60, 1),
        test: blobs(30, 2),
    }
}

pub fn toy_config(kind: Option<BinarizerKind>, optimizer: OptimizerKind, lr: f64) -> TrainingConfig {
    TrainingConfig {
        binarizer: kind,
        optimizer,
        lr,
        batch_size: 10,
        epochs: 2,
        seed: 3,
        train_eval_limit: 60,
        dominance_batch: 20,
        ..TrainingConfig::default()
    }
}
