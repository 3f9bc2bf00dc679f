//! Models with binarized layers, the alternating training step, evaluation,
//! discretization and the epoch loop.

pub mod checkpoint;
pub mod config;
pub mod data;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{DatasetKind, LrSchedule, TrainingConfig};
pub use data::{load_cifar10, load_mnist, Dataset, DatasetHandle};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::binarize::{BinarizedLayerState, BinarizerKind};
use crate::error::{Error, Result};
use crate::meta::{
    as_kernel_shape, compute_meta_gradients, regularizer_step, sparsity_value, update_shadow_weights,
    MetaInit, QuantNetParams, RegularizerState, META_DECAY,
};
use crate::metrics::{self, MetricsRecord, MetricsWriter, RunSummary};
use crate::nn::{BnMode, Bound, Layer, Network, NetworkSpec};
use crate::optim::Optimizer;
use crate::tensor::{Graph, Scalar, Tensor};

/// Evaluation batch size; keeps graph memory bounded.
const EVAL_BATCH: usize = 500;

/// A network plus the binarization state of its binarized layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Scalar> {
    pub net: Network<T>,
    pub binarized: Vec<BinarizedLayerState<T>>,
}

impl<T: Scalar> Model<T> {
    /// Builds a model; `kind = None` (or a spec without binarization flags)
    /// gives the full-precision network.
    pub fn new(
        spec: NetworkSpec,
        kind: Option<BinarizerKind>,
        meta_init: MetaInit,
        xnor_per_filter: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let spec = if kind.is_none() { spec.full_precision() } else { spec };
        let net = Network::new(spec, rng)?;
        let mut binarized = Vec::new();
        if let Some(kind) = kind {
            for layer in net.binarized_layers() {
                let mut st = BinarizedLayerState::new(layer, kind);
                st.per_filter = xnor_per_filter;
                if kind == BinarizerKind::QuantNetMeta {
                    let wid = net.weight_id(layer).expect("binarized layers carry weights");
                    let [k, _, m, n] = as_kernel_shape(net.params.get(wid).shape())?;
                    st.meta = Some(QuantNetParams::new(k, m * n, meta_init, rng)?);
                }
                binarized.push(st);
            }
        }
        Ok(Self { net, binarized })
    }

    pub fn from_config(config: &TrainingConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let spec = NetworkSpec::by_name(&config.network, config.binarize_all, config.activation_bits)?;
        Self::new(spec, config.binarizer, config.meta_init, config.xnor_per_filter, rng)
    }

    /// Current `W_q` of every binarized layer, keyed by layer index.
    pub fn binarized_weights(&mut self) -> Result<BTreeMap<usize, Tensor<T>>> {
        let mut out = BTreeMap::new();
        for st in &mut self.binarized {
            let wid = self.net.weight_id(st.layer).expect("weighted layer");
            let w = self.net.params.get(wid);
            out.insert(st.layer, st.binarize_weights(w)?);
        }
        Ok(out)
    }

    /// Number of meta-quantizer parameters still attached.
    pub fn meta_param_count(&self) -> usize {
        self.binarized
            .iter()
            .filter_map(|s| s.meta.as_ref())
            .map(|m| m.store.len())
            .sum()
    }

    /// Logits in inference mode with the supplied binarized weights.
    pub fn logits_with(&mut self, x: &Tensor<T>, weights: &BTreeMap<usize, Tensor<T>>) -> Result<Tensor<T>> {
        self.net.predict(x, weights)
    }

    /// Mean cross-entropy on `data[indices]` in inference mode.
    pub fn loss_with(&mut self, data: &Dataset, indices: &[usize], weights: &BTreeMap<usize, Tensor<T>>) -> Result<f64> {
        let mut total = 0.0;
        for chunk in indices.chunks(EVAL_BATCH) {
            let (x, labels) = data.batch::<T>(chunk)?;
            let mut g = Graph::new();
            let bound = self.net.params.bind(&mut g, |_| false);
            let overrides = weights.iter().map(|(&i, w)| (i, g.constant(w.clone()))).collect();
            let xv = g.constant(x);
            let y = self.net.forward(&mut g, &bound, xv, BnMode::Running, &overrides)?;
            let l = g.softmax_cross_entropy(y, &labels)?;
            total += g.value(l).item().f64() * chunk.len() as f64;
        }
        Ok(total / indices.len() as f64)
    }
}

/// Index of the largest logit; the lowest index wins ties.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Top-1 accuracy of the model's soft binarized weights (or of a
/// discretized model) on the first `limit` samples of `split`.
pub fn evaluate<T: Scalar>(model: &mut Model<T>, split: &Dataset, limit: Option<usize>) -> Result<f64> {
    let n = limit.map_or(split.len(), |l| l.min(split.len()));
    if n == 0 {
        return Err(Error::EmptyInput { op: "evaluate" });
    }
    let weights = model.binarized_weights()?;
    let classes = model.net.classes()?;
    let idx: Vec<usize> = (0..n).collect();
    let mut correct = 0usize;
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, labels) = split.batch::<T>(chunk)?;
        let logits = model.logits_with(&x, &weights)?;
        for (r, &l) in labels.iter().enumerate() {
            if argmax(&logits.data()[r * classes..(r + 1) * classes]) == l {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / n as f64)
}

fn rms<T: Scalar>(v: &[T]) -> f64 {
    (v.iter().map(|x| x.f64() * x.f64()).sum::<f64>() / v.len().max(1) as f64).sqrt()
}

/// Replaces each binarized layer's weights by `sign(W_q)` (scaled for XNOR)
/// and drops Θ. Already-discretized layers are left as they are.
///
/// When a batch norm directly follows the layer, its running statistics
/// are divided by `α = rms(W_q) / rms(W*)` (variance by α²), so that they
/// describe the pre-activations of the new weights. Saturated and XNOR
/// weights have α ≈ 1 and are unaffected.
pub fn discretize_model<T: Scalar>(model: &Model<T>) -> Result<Model<T>> {
    let mut out = model.clone();
    for st in &mut out.binarized {
        if st.fixed {
            continue;
        }
        let wid = out.net.weight_id(st.layer).expect("weighted layer");
        let wq = st.binarize_weights(out.net.params.get(wid))?;
        let fixed = st.discretized(&wq);
        let alpha = rms(wq.data()) / rms(fixed.data());
        if let Some(bn) = out.net.following_batch_norm(st.layer).cloned() {
            if alpha.is_finite() && alpha > 0.0 {
                let mean = out.net.params.get_mut(bn.running_mean);
                *mean = mean.map(|v| T::c(v.f64() / alpha));
                let var = out.net.params.get_mut(bn.running_var);
                *var = var.map(|v| T::c(v.f64() / (alpha * alpha)));
            }
        }
        out.net.params.set(wid, fixed.clone());
        st.w_q = Some(fixed);
        st.meta = None;
        st.fixed = true;
    }
    Ok(out)
}

/// Losses and timing of one training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub task_loss: f64,
    /// Sparsity objective summed over binarized layers, before the
    /// regularizer step.
    pub reg_loss: f64,
    pub step_ms: f64,
}

/// All mutable state of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer<T: Scalar> {
    pub config: TrainingConfig,
    pub model: Model<T>,
    pub task_opt: Optimizer,
    /// One per binarized layer; used only by the meta-quantizer.
    pub meta_opts: Vec<Optimizer>,
    pub regs: Vec<RegularizerState>,
    pub rng: ChaCha8Rng,
    pub epoch: usize,
    pub steps: u64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainingConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = Model::from_config(&config, &mut rng)?;
        Self::with_model(config, model, rng)
    }

    pub fn with_model(config: TrainingConfig, model: Model<T>, rng: ChaCha8Rng) -> Result<Self> {
        let task_opt = Optimizer::new(config.optimizer, config.lr);
        let mut meta_opts = Vec::new();
        let mut regs = Vec::new();
        for _ in &model.binarized {
            let mut o = Optimizer::new(config.optimizer, config.quantnet_lr);
            o.decay = META_DECAY;
            meta_opts.push(o);
            regs.push(RegularizerState::new(config.lambda, config.optimizer)?);
        }
        Ok(Self {
            config,
            model,
            task_opt,
            meta_opts,
            regs,
            rng,
            epoch: 0,
            steps: 0,
        })
    }

    fn uses_meta(&self) -> bool {
        self.config.binarizer == Some(BinarizerKind::QuantNetMeta)
    }

    /// One iteration of the alternating scheme: forward with `W_q`, task
    /// loss, backward to `g_{W_q}` and on into Θ and W, updates of Θ (meta
    /// optimizer), W (`W ← W − η·∂ℓ/∂W` for the meta-quantizer, task
    /// optimizer otherwise) and the remaining parameters, then one
    /// regularizer step per meta-quantized layer. A non-finite loss aborts
    /// the step with every parameter and running statistic untouched.
    pub fn train_step(&mut self, x: &Tensor<T>, labels: &[usize]) -> Result<StepReport> {
        let start = Instant::now();
        let meta = self.uses_meta();
        let frozen: Vec<usize> = if meta && !self.config.w_trainable {
            self.model
                .binarized
                .iter()
                .map(|s| self.model.net.weight_id(s.layer).expect("weighted layer").0)
                .collect()
        } else {
            Vec::new()
        };

        let mut g = Graph::new();
        let bound = self.model.net.params.bind(&mut g, |id| !frozen.contains(&id.0));
        let mut overrides = BTreeMap::new();
        let mut thetas: Vec<Option<Bound>> = Vec::new();
        for st in &mut self.model.binarized {
            let wid = self.model.net.weight_id(st.layer).expect("weighted layer");
            let theta = st.meta.as_ref().map(|m| m.store.bind(&mut g, |_| true));
            let wq = st.binarize_var(&mut g, bound[wid], theta.as_ref(), BnMode::Train)?;
            overrides.insert(st.layer, wq);
            thetas.push(theta);
        }
        let running: Vec<_> = self
            .model
            .net
            .layers
            .iter()
            .filter_map(|l| match l {
                Layer::BatchNorm(bn) => Some([bn.running_mean, bn.running_var]),
                _ => None,
            })
            .flatten()
            .map(|id| (id, self.model.net.params.get(id).clone()))
            .collect();
        let xv = g.constant(x.clone());
        let logits = self.model.net.forward(&mut g, &bound, xv, BnMode::Train, &overrides)?;
        let loss = g.softmax_cross_entropy(logits, labels)?;
        let task_loss = g.value(loss).item().f64();
        if !task_loss.is_finite() {
            for (id, t) in running {
                self.model.net.params.set(id, t);
            }
            return Err(Error::Diverged {
                step: self.steps as usize,
                loss: task_loss,
            });
        }
        g.backward(loss)?;
        let mut grads = bound.grads(&g);

        if meta {
            for (i, st) in self.model.binarized.iter_mut().enumerate() {
                let theta = thetas[i].as_ref().expect("meta layers bind Θ");
                let g_theta = compute_meta_gradients(&g, theta)?;
                let store = &mut st.meta.as_mut().expect("meta layer").store;
                self.meta_opts[i].step(store, &g_theta)?;
                let wid = self.model.net.weight_id(st.layer).expect("weighted layer");
                if let Some(gw) = grads[wid.0].take() {
                    update_shadow_weights(self.model.net.params.get_mut(wid), self.config.quantnet_lr, &gw)?;
                }
            }
        }
        self.task_opt.step(&mut self.model.net.params, &grads)?;

        let mut reg_loss = 0.0;
        for (i, st) in self.model.binarized.iter_mut().enumerate() {
            match st.meta.as_mut() {
                Some(q) => {
                    let wid = self.model.net.weight_id(st.layer).expect("weighted layer");
                    reg_loss += regularizer_step(q, self.model.net.params.get(wid), &mut self.regs[i])?;
                }
                None => {
                    if let Some(wq) = &st.w_q {
                        reg_loss += sparsity_value(wq.data());
                    }
                }
            }
        }
        self.steps += 1;
        Ok(StepReport {
            task_loss,
            reg_loss,
            step_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// One pass over a seed-determined shuffle of `train`. Returns the mean
    /// task loss, mean regularizer value and mean step time.
    pub fn train_epoch(&mut self, train: &Dataset) -> Result<StepReport> {
        self.task_opt.lr = self.config.lr_at(self.epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let bs = self.config.batch_size;
        let mut steps = order.len() / bs;
        if let Some(cap) = self.config.max_steps_per_epoch {
            steps = steps.min(cap);
        }
        if steps == 0 {
            return Err(Error::Config(format!(
                "training split of {} samples is smaller than one batch of {bs}",
                train.len()
            )));
        }
        let (mut tl, mut rl, mut ms) = (0.0, 0.0, 0.0);
        for s in 0..steps {
            let (x, labels) = train.batch::<T>(&order[s * bs..(s + 1) * bs])?;
            let r = self.train_step(&x, &labels)?;
            tl += r.task_loss;
            rl += r.reg_loss;
            ms += r.step_ms;
        }
        self.epoch += 1;
        let n = steps as f64;
        Ok(StepReport {
            task_loss: tl / n,
            reg_loss: rl / n,
            step_ms: ms / n,
        })
    }

    /// Metrics of the current model; `train_loss`/`reg_loss`/`step_ms`
    /// come from the epoch just run (or from an evaluation pass for the
    /// epoch-0 baseline).
    pub fn measure(&mut self, data: &DatasetHandle, report: Option<StepReport>) -> Result<MetricsRecord> {
        let cfg = &self.config;
        let train_n = cfg.train_eval_limit.min(data.train.len());
        let train_acc = evaluate(&mut self.model, &data.train, Some(train_n))?;
        let (test_acc, test_acc_d, gap) = metrics::discretization_gap(&self.model, &data.test, None)?;
        let weights = self.model.binarized_weights()?;
        let wqs: Vec<Tensor<T>> = weights.values().cloned().collect();
        let saturation = metrics::saturation_stats(&wqs).fraction;
        let dom_idx: Vec<usize> = (0..cfg.dominance_batch.min(data.train.len())).collect();
        let dominance = metrics::model_dominance(&mut self.model, &data.train, &dom_idx, cfg.dominance_k)?.ratio;
        let (task_loss, reg_loss, step_ms) = match report {
            Some(r) => (r.task_loss, r.reg_loss, r.step_ms),
            None => {
                let loss = self.model.loss_with(&data.train, &(0..train_n).collect::<Vec<_>>(), &weights)?;
                let reg = wqs.iter().map(|w| sparsity_value(w.data())).sum();
                (loss, reg, 0.0)
            }
        };
        Ok(MetricsRecord {
            epoch: self.epoch,
            task_loss,
            reg_loss,
            train_acc,
            test_acc,
            test_acc_d,
            gap,
            saturation,
            dominance,
            step_ms,
        })
    }

    /// Runs the configured epochs, recording a baseline row and one row per
    /// epoch. With `out`, writes `metrics.csv` (row by row), `summary.json`
    /// and `final.bqf` there.
    pub fn fit(&mut self, data: &DatasetHandle, out: Option<&Path>) -> Result<Vec<MetricsRecord>> {
        let started = Instant::now();
        let mut writer = match out {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                Some(MetricsWriter::create(dir.join("metrics.csv"), self.config.deterministic)?)
            }
            None => None,
        };
        let mut records = Vec::with_capacity(self.config.epochs + 1);
        let mut push = |r: MetricsRecord, records: &mut Vec<MetricsRecord>| -> Result<()> {
            if let Some(w) = writer.as_mut() {
                w.append(&r)?;
            }
            records.push(r);
            Ok(())
        };
        let baseline = self.measure(data, None)?;
        push(baseline, &mut records)?;
        while self.epoch < self.config.epochs {
            let report = self.train_epoch(&data.train)?;
            let rec = self.measure(data, Some(report))?;
            push(rec, &mut records)?;
        }
        if let Some(dir) = out {
            let summary = RunSummary::new(&self.config, &records, started.elapsed().as_secs_f64());
            metrics::write_summary(dir.join("summary.json"), &summary)?;
            save_checkpoint(dir.join("final.bqf"), &Checkpoint::from_trainer(self, &records)?)?;
        }
        Ok(records)
    }
}

/// Dataset directory: the config's `data_dir`, else `$BQF_DATA_DIR`, else
/// `data/` under the current directory; then the per-dataset subfolder.
pub fn dataset_dir(config: &TrainingConfig) -> PathBuf {
    if let Some(d) = &config.data_dir {
        return d.clone();
    }
    let root = std::env::var_os("BQF_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"));
    match config.dataset {
        DatasetKind::Mnist => root.join("mnist"),
        DatasetKind::Cifar10 => root.join("cifar-10-batches-bin"),
    }
}

pub fn load_dataset(config: &TrainingConfig) -> Result<DatasetHandle> {
    let dir = dataset_dir(config);
    let mut h = match config.dataset {
        DatasetKind::Mnist => load_mnist(&dir)?,
        DatasetKind::Cifar10 => load_cifar10(&dir, config.train_limit, config.test_limit)?,
    };
    if let Some(l) = config.train_limit {
        h.train = h.train.truncated(l);
    }
    if let Some(l) = config.test_limit {
        h.test = h.test.truncated(l);
    }
    Ok(h)
}
