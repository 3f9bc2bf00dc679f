//! Flat `key = value` training configuration.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::binarize::BinarizerKind;
use crate::error::{Error, Result};
use crate::meta::{MetaInit, DEFAULT_LAMBDA, META_LR};
use crate::optim::OptimizerKind;
use crate::tensor::DType;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// ×0.1 at 50% and again at 75% of the epochs.
    Step,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    /// `mlp` or `cnn`.
    pub network: String,
    pub dataset: DatasetKind,
    pub data_dir: Option<PathBuf>,
    /// `None` trains the full-precision reference.
    pub binarizer: Option<BinarizerKind>,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    /// η: learning rate of Θ and of the shadow-weight update.
    pub quantnet_lr: f64,
    pub lambda: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub deterministic: bool,
    /// When false the shadow weights are a fixed input of the quantizer.
    pub w_trainable: bool,
    /// 0 keeps activations in full precision; otherwise PACT bits.
    pub activation_bits: u32,
    pub binarize_all: bool,
    pub meta_init: MetaInit,
    pub xnor_per_filter: bool,
    pub lr_schedule: LrSchedule,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    /// Training samples scored for `train_acc` each epoch.
    pub train_eval_limit: usize,
    /// Samples used by the dominance diagnostic.
    pub dominance_batch: usize,
    /// k as a fraction of each layer's element count.
    pub dominance_k: f64,
    /// Caps the steps per epoch (budgeted runs).
    pub max_steps_per_epoch: Option<usize>,
    /// Element type of the model.
    pub precision: DType,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            network: "mlp".into(),
            dataset: DatasetKind::Mnist,
            data_dir: None,
            binarizer: Some(BinarizerKind::QuantNetMeta),
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            quantnet_lr: META_LR,
            lambda: DEFAULT_LAMBDA,
            batch_size: 100,
            epochs: 5,
            seed: 0,
            deterministic: true,
            w_trainable: true,
            activation_bits: 0,
            binarize_all: false,
            meta_init: MetaInit::Warm,
            xnor_per_filter: true,
            lr_schedule: LrSchedule::Constant,
            train_limit: None,
            test_limit: None,
            train_eval_limit: 10_000,
            dominance_batch: 1000,
            dominance_k: 0.7,
            max_steps_per_epoch: None,
            precision: DType::F32,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected on/off, got '{v}'"))),
    }
}

fn parse_limit(key: &str, v: &str) -> Result<Option<usize>> {
    if v == "none" || v == "all" {
        Ok(None)
    } else {
        parse(key, v).map(Some)
    }
}

impl TrainingConfig {
    /// Parses `key = value` lines; `#` starts a comment. Unknown keys are
    /// errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            c.set(k.trim(), v.trim())?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "network" => self.network = v.to_string(),
            "dataset" => {
                self.dataset = match v {
                    "mnist" => DatasetKind::Mnist,
                    "cifar10" => DatasetKind::Cifar10,
                    _ => return Err(Error::Config(format!("dataset: unknown '{v}'"))),
                }
            }
            "data_dir" => self.data_dir = Some(PathBuf::from(v)),
            "binarizer" => {
                self.binarizer = if v == "none" { None } else { Some(v.parse()?) };
            }
            "optimizer" => self.optimizer = v.parse()?,
            "lr" => self.lr = parse(key, v)?,
            "quantnet_lr" => self.quantnet_lr = parse(key, v)?,
            "lambda" => self.lambda = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "deterministic" => self.deterministic = parse_bool(key, v)?,
            "w_trainable" => self.w_trainable = parse_bool(key, v)?,
            "activation_bits" => self.activation_bits = parse(key, v)?,
            "binarize_all" => self.binarize_all = parse_bool(key, v)?,
            "meta_init" => {
                self.meta_init = match v {
                    "warm" => MetaInit::Warm,
                    "cold" => MetaInit::Cold,
                    _ => return Err(Error::Config(format!("meta_init: expected warm or cold, got '{v}'"))),
                }
            }
            "xnor_per_filter" => self.xnor_per_filter = parse_bool(key, v)?,
            "lr_schedule" => {
                self.lr_schedule = match v {
                    "constant" => LrSchedule::Constant,
                    "step" => LrSchedule::Step,
                    _ => return Err(Error::Config(format!("lr_schedule: expected constant or step, got '{v}'"))),
                }
            }
            "train_limit" => self.train_limit = parse_limit(key, v)?,
            "test_limit" => self.test_limit = parse_limit(key, v)?,
            "train_eval_limit" => self.train_eval_limit = parse(key, v)?,
            "dominance_batch" => self.dominance_batch = parse(key, v)?,
            "dominance_k" => self.dominance_k = parse(key, v)?,
            "max_steps_per_epoch" => self.max_steps_per_epoch = parse_limit(key, v)?,
            "precision" => {
                self.precision = match v {
                    "f32" => DType::F32,
                    "f64" => DType::F64,
                    _ => return Err(Error::Config(format!("precision: expected f32 or f64, got '{v}'"))),
                }
            }
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("lr", self.lr)?;
        positive("quantnet_lr", self.quantnet_lr)?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be ≥ 0, got {}", self.lambda)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be ≥ 2 (batch norm)".into()));
        }
        if self.epochs == 0 || self.train_eval_limit == 0 || self.dominance_batch == 0 {
            return Err(Error::Config("epochs, train_eval_limit and dominance_batch must be positive".into()));
        }
        if !(self.dominance_k > 0.0 && self.dominance_k <= 1.0) {
            return Err(Error::Config(format!("dominance_k must lie in (0, 1], got {}", self.dominance_k)));
        }
        if self.max_steps_per_epoch == Some(0) || self.train_limit == Some(0) || self.test_limit == Some(0) {
            return Err(Error::Config("limits must be positive".into()));
        }
        if !matches!(self.network.as_str(), "mlp" | "cnn") {
            return Err(Error::Config(format!("unknown network '{}'", self.network)));
        }
        Ok(())
    }

    /// Learning rate of the task optimizer during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Step => {
                let f = epoch as f64 / self.epochs as f64;
                self.lr * if f >= 0.75 { 0.01 } else if f >= 0.5 { 0.1 } else { 1.0 }
            }
        }
    }

    /// Serializes back to the `key = value` form accepted by [`parse`](Self::parse).
    pub fn to_kv(&self) -> String {
        let opt = |v: Option<usize>| v.map_or("none".to_string(), |n| n.to_string());
        let onoff = |b: bool| if b { "on" } else { "off" };
        let mut s = String::new();
        let _ = writeln!(s, "network = {}", self.network);
        let _ = writeln!(
            s,
            "dataset = {}",
            match self.dataset {
                DatasetKind::Mnist => "mnist",
                DatasetKind::Cifar10 => "cifar10",
            }
        );
        if let Some(d) = &self.data_dir {
            let _ = writeln!(s, "data_dir = {}", d.display());
        }
        let _ = writeln!(s, "binarizer = {}", self.binarizer.map_or("none".to_string(), |b| b.to_string()));
        let _ = writeln!(s, "optimizer = {}", self.optimizer);
        let _ = writeln!(s, "lr = {:?}", self.lr);
        let _ = writeln!(s, "quantnet_lr = {:?}", self.quantnet_lr);
        let _ = writeln!(s, "lambda = {:?}", self.lambda);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "deterministic = {}", onoff(self.deterministic));
        let _ = writeln!(s, "w_trainable = {}", onoff(self.w_trainable));
        let _ = writeln!(s, "activation_bits = {}", self.activation_bits);
        let _ = writeln!(s, "binarize_all = {}", onoff(self.binarize_all));
        let _ = writeln!(
            s,
            "meta_init = {}",
            match self.meta_init {
                MetaInit::Warm => "warm",
                MetaInit::Cold => "cold",
            }
        );
        let _ = writeln!(s, "xnor_per_filter = {}", onoff(self.xnor_per_filter));
        let _ = writeln!(
            s,
            "lr_schedule = {}",
            match self.lr_schedule {
                LrSchedule::Constant => "constant",
                LrSchedule::Step => "step",
            }
        );
        let _ = writeln!(s, "train_limit = {}", opt(self.train_limit));
        let _ = writeln!(s, "test_limit = {}", opt(self.test_limit));
        let _ = writeln!(s, "train_eval_limit = {}", self.train_eval_limit);
        let _ = writeln!(s, "dominance_batch = {}", self.dominance_batch);
        let _ = writeln!(s, "dominance_k = {:?}", self.dominance_k);
        let _ = writeln!(s, "max_steps_per_epoch = {}", opt(self.max_steps_per_epoch));
        let _ = writeln!(
            s,
            "precision = {}",
            match self.precision {
                DType::F32 => "f32",
                DType::F64 => "f64",
            }
        );
        s
    }
}
