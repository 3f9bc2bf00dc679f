mod common;

use common::*;
use quantnet::binarize::BinarizerKind;
use quantnet::optim::OptimizerKind;
use quantnet::train::checkpoint::{MAGIC, VERSION};
use quantnet::train::{discretize_model, load_checkpoint, save_checkpoint, Checkpoint, Trainer};
use quantnet::{DType, Error, Scalar};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn trained<T: Scalar>(kind: Option<BinarizerKind>, optimizer: OptimizerKind) -> (Trainer<T>, Vec<quantnet::metrics::MetricsRecord>) {
    let config = toy_config(kind, optimizer, 1e-2);
    let mut t = Trainer::with_model(config, toy_model::<T>(kind, 12), ChaCha8Rng::seed_from_u64(12)).unwrap();
    let records = t.fit(&toy_data(), None).unwrap();
    (t, records)
}

/// Byte length implied by walking the header fields directly.
fn size_from_header(bytes: &[u8]) -> usize {
    let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    let u64_at = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()) as usize;
    let json_len = u64_at(12);
    let mut at = 20 + json_len;
    let count = u32_at(at);
    at += 4;
    let mut payload = 0;
    for _ in 0..count {
        let width = match u32_at(at) {
            1 => 4,
            2 => 8,
            c => panic!("dtype code {c}"),
        };
        let rank = u32_at(at + 4);
        at += 8;
        let mut n = 1;
        for _ in 0..rank {
            n *= u64_at(at);
            at += 8;
        }
        payload += n * width;
    }
    at + payload
}

#[test]
fn save_load_save_is_byte_identical() {
    for (kind, opt) in [
        (Some(BinarizerKind::QuantNetMeta), OptimizerKind::Adam),
        (Some(BinarizerKind::XnorScaled), OptimizerKind::Sgdm),
        (Some(BinarizerKind::SignSte), OptimizerKind::Amsgrad),
        (None, OptimizerKind::Adam),
    ] {
        let (t, records) = trained::<f64>(kind, opt);
        let c = Checkpoint::from_trainer(&t, &records).unwrap();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);

        let t2 = back.to_trainer::<f64>().unwrap();
        assert_eq!(t2.model.net.params, t.model.net.params);
        for (a, b) in t2.model.binarized.iter().zip(&t.model.binarized) {
            assert_eq!(a.meta.as_ref().map(|m| &m.store), b.meta.as_ref().map(|m| &m.store));
            assert_eq!(a.scale, b.scale);
        }
        assert_eq!(t2.task_opt, t.task_opt);
        assert_eq!(t2.meta_opts, t.meta_opts);
        assert_eq!(t2.regs, t.regs);
        assert_eq!((t2.epoch, t2.steps), (t.epoch, t.steps));
        let again = Checkpoint::from_trainer(&t2, &records).unwrap().to_bytes().unwrap();
        assert_eq!(again, bytes, "{kind:?}");
    }
}

#[test]
fn single_precision_round_trip() {
    let (t, records) = trained::<f32>(Some(BinarizerKind::QuantNetMeta), OptimizerKind::Adam);
    let c = Checkpoint::from_trainer(&t, &records).unwrap();
    assert_eq!(c.dtype, DType::F32);
    let bytes = c.to_bytes().unwrap();
    let t2 = Checkpoint::from_bytes(&bytes).unwrap().to_trainer::<f32>().unwrap();
    assert_eq!(t2.model.net.params, t.model.net.params);
    assert!(Checkpoint::from_bytes(&bytes).unwrap().to_trainer::<f64>().is_err());
}

#[test]
fn discretized_models_round_trip() {
    let (mut t, records) = trained::<f64>(Some(BinarizerKind::QuantNetMeta), OptimizerKind::Adam);
    t.model = discretize_model(&t.model).unwrap();
    let bytes = Checkpoint::from_trainer(&t, &records).unwrap().to_bytes().unwrap();
    let t2 = Checkpoint::from_bytes(&bytes).unwrap().to_trainer::<f64>().unwrap();
    assert_eq!(t2.model, t.model);
    assert_eq!(t2.model.meta_param_count(), 0);
}

#[test]
fn file_size_matches_the_header() {
    let (t, records) = trained::<f64>(Some(BinarizerKind::QuantNetMeta), OptimizerKind::Amsgrad);
    let c = Checkpoint::from_trainer(&t, &records).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.bqf");
    save_checkpoint(&path, &c).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], MAGIC);
    assert_eq!(bytes.len(), size_from_header(&bytes));
    assert_eq!(bytes.len(), c.encoded_len().unwrap());
    assert_eq!(load_checkpoint(&path).unwrap(), c);
}

#[test]
fn corrupt_files_are_rejected() {
    let (t, records) = trained::<f64>(Some(BinarizerKind::SelfBinarizingTanh), OptimizerKind::Adam);
    let bytes = Checkpoint::from_trainer(&t, &records).unwrap().to_bytes().unwrap();

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));

    let mut bad = bytes.clone();
    bad[4..8].copy_from_slice(&(VERSION + 1).to_le_bytes());
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));

    for cut in [0, 3, 10, 30, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Format(_))), "cut at {cut}");
    }
    let mut long = bytes.clone();
    long.push(0);
    assert!(Checkpoint::from_bytes(&long).is_err());

    let dir = tempfile::tempdir().unwrap();
    assert!(load_checkpoint(dir.path().join("missing.bqf")).is_err());
}

#[test]
fn metrics_tail_is_kept() {
    let (t, records) = trained::<f64>(None, OptimizerKind::Sgdm);
    let c = Checkpoint::from_trainer(&t, &records).unwrap();
    assert_eq!(c.meta.metrics_tail.last().map(|r| r.test_acc), records.last().map(|r| r.test_acc));
    assert!(c.meta.metrics_tail.iter().all(|r| r.step_ms == 0.0));
    assert_eq!(c.meta.epoch, 2);
    assert_eq!(c.meta.seed, t.config.seed);
}
