//! The `BQF1` checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "BQF1"            magic
//! u32               format version
//! u32               model dtype code (1 = f32, 2 = f64)
//! u64, bytes        length and UTF-8 JSON run description
//! u32               tensor count
//! per tensor        u32 dtype code, u32 rank, rank × u64 dims
//! payload           tensor elements in order, native width
//! ```

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Model, Trainer, TrainingConfig};
use crate::binarize::BinarizerKind;
use crate::error::{Error, Result};
use crate::meta::MetaInit;
use crate::metrics::MetricsRecord;
use crate::nn::{NetworkSpec, ParamId, ParamStore};
use crate::optim::{Optimizer, OptimizerKind, Slot};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"BQF1";
pub const VERSION: u32 = 1;
const METRICS_TAIL: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl StoredTensor {
    fn of<T: Scalar>(t: &Tensor<T>) -> Self {
        Self {
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            values: t.to_f64_vec(),
        }
    }

    fn f64s(shape: Vec<usize>, values: Vec<f64>) -> Self {
        Self {
            dtype: DType::F64,
            shape,
            values,
        }
    }

    fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        if self.dtype != T::DTYPE {
            return Err(Error::Format(format!("tensor dtype {:?}, expected {:?}", self.dtype, T::DTYPE)));
        }
        Tensor::from_f64(self.shape.clone(), &self.values)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantNetMeta {
    pub kernel: usize,
    pub filters: usize,
    pub init: MetaInit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMeta {
    pub layer: usize,
    pub kind: BinarizerKind,
    pub per_filter: bool,
    pub fixed: bool,
    pub scale: Vec<f64>,
    pub quantnet: Option<QuantNetMeta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotMeta {
    pub index: usize,
    pub steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub role: String,
    pub kind: OptimizerKind,
    pub lr: f64,
    pub decay: f64,
    pub beta2: f64,
    pub eps: f64,
    pub slots: Vec<SlotMeta>,
}

/// Everything except the raw tensor payloads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: TrainingConfig,
    pub spec: NetworkSpec,
    pub epoch: usize,
    pub seed: u64,
    pub steps: u64,
    pub layers: Vec<LayerMeta>,
    pub optimizers: Vec<OptimizerMeta>,
    pub tensor_names: Vec<String>,
    pub metrics_tail: Vec<MetricsRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub dtype: DType,
    pub meta: CheckpointMeta,
    pub tensors: Vec<StoredTensor>,
}

struct Collector {
    names: Vec<String>,
    tensors: Vec<StoredTensor>,
}

impl Collector {
    fn store<T: Scalar>(&mut self, prefix: &str, s: &ParamStore<T>) {
        for id in s.ids() {
            self.names.push(format!("{prefix}{}", s.name(id)));
            self.tensors.push(StoredTensor::of(s.get(id)));
        }
    }

    fn optimizer(&mut self, role: &str, o: &Optimizer) -> OptimizerMeta {
        let mut slots = Vec::new();
        for (i, s) in o.slots().iter().enumerate() {
            let Some(s) = s else { continue };
            slots.push(SlotMeta { index: i, steps: s.steps });
            for (tag, buf) in [("m", &s.m), ("v", &s.v), ("vmax", &s.vmax)] {
                if !buf.is_empty() {
                    self.names.push(format!("{role}.{i}.{tag}"));
                    self.tensors.push(StoredTensor::f64s(vec![buf.len()], buf.clone()));
                }
            }
        }
        OptimizerMeta {
            role: role.to_string(),
            kind: o.kind,
            lr: o.lr,
            decay: o.decay,
            beta2: o.beta2,
            eps: o.eps,
            slots,
        }
    }
}

struct Reader<'a> {
    names: &'a [String],
    tensors: &'a [StoredTensor],
    at: usize,
}

impl Reader<'_> {
    fn next(&mut self, expect: &str) -> Result<&StoredTensor> {
        let i = self.at;
        let (Some(name), Some(t)) = (self.names.get(i), self.tensors.get(i)) else {
            return Err(Error::Format(format!("checkpoint ends before tensor '{expect}'")));
        };
        if name != expect {
            return Err(Error::Format(format!("checkpoint tensor {i} is '{name}', expected '{expect}'")));
        }
        self.at += 1;
        Ok(t)
    }

    fn store<T: Scalar>(&mut self, prefix: &str, s: &mut ParamStore<T>) -> Result<()> {
        for id in s.ids().collect::<Vec<ParamId>>() {
            let t = self.next(&format!("{prefix}{}", s.name(id)))?.to_tensor::<T>()?;
            if t.shape() != s.get(id).shape() {
                return Err(Error::Format(format!("tensor '{}' has shape {:?}", s.name(id), t.shape())));
            }
            s.set(id, t);
        }
        Ok(())
    }

    fn optimizer(&mut self, m: &OptimizerMeta) -> Result<Optimizer> {
        let mut o = Optimizer::new(m.kind, m.lr);
        o.decay = m.decay;
        o.beta2 = m.beta2;
        o.eps = m.eps;
        let mut slots: Vec<Option<Slot>> = Vec::new();
        for s in &m.slots {
            let mut take = |tag: &str| -> Result<Vec<f64>> {
                Ok(self.next(&format!("{}.{}.{tag}", m.role, s.index))?.values.clone())
            };
            let mvec = take("m")?;
            let v = if m.kind == OptimizerKind::Sgdm { Vec::new() } else { take("v")? };
            let vmax = if m.kind == OptimizerKind::Amsgrad { take("vmax")? } else { Vec::new() };
            if slots.len() <= s.index {
                slots.resize(s.index + 1, None);
            }
            slots[s.index] = Some(Slot {
                steps: s.steps,
                m: mvec,
                v,
                vmax,
            });
        }
        o.set_slots(slots);
        Ok(o)
    }
}

impl Checkpoint {
    /// Snapshot of `t` with the last metrics rows. Deterministic runs store
    /// zero step times so that repeat runs give identical files.
    pub fn from_trainer<T: Scalar>(t: &Trainer<T>, records: &[MetricsRecord]) -> Result<Self> {
        let mut c = Collector {
            names: Vec::new(),
            tensors: Vec::new(),
        };
        c.store("net.", &t.model.net.params);
        let mut layers = Vec::new();
        for st in &t.model.binarized {
            if let Some(q) = &st.meta {
                c.store(&format!("meta{}.", st.layer), &q.store);
            }
            let wid = t.model.net.weight_id(st.layer).expect("weighted layer");
            let [k, _, m, n] = crate::meta::as_kernel_shape(t.model.net.params.get(wid).shape())?;
            layers.push(LayerMeta {
                layer: st.layer,
                kind: st.kind,
                per_filter: st.per_filter,
                fixed: st.fixed,
                scale: st.scale.iter().map(|s| s.f64()).collect(),
                quantnet: st.meta.as_ref().map(|q| QuantNetMeta {
                    kernel: k,
                    filters: m * n,
                    init: q.init,
                }),
            });
        }
        let mut optimizers = vec![c.optimizer("task", &t.task_opt)];
        for (i, o) in t.meta_opts.iter().enumerate() {
            optimizers.push(c.optimizer(&format!("meta_opt{i}"), o));
        }
        for (i, r) in t.regs.iter().enumerate() {
            optimizers.push(c.optimizer(&format!("reg_opt{i}"), &r.optimizer));
        }
        let tail = records.len().saturating_sub(METRICS_TAIL);
        Ok(Self {
            dtype: T::DTYPE,
            meta: CheckpointMeta {
                config: t.config.clone(),
                spec: t.model.net.spec.clone(),
                epoch: t.epoch,
                seed: t.config.seed,
                steps: t.steps,
                layers,
                optimizers,
                tensor_names: c.names,
                metrics_tail: records[tail..]
                    .iter()
                    .map(|r| MetricsRecord {
                        step_ms: if t.config.deterministic { 0.0 } else { r.step_ms },
                        ..*r
                    })
                    .collect(),
            },
            tensors: c.tensors,
        })
    }

    /// Rebuilds the trainer. The shuffling RNG restarts from the seed
    /// advanced by the epoch count.
    pub fn to_trainer<T: Scalar>(&self) -> Result<Trainer<T>> {
        if self.dtype != T::DTYPE {
            return Err(Error::Format(format!("checkpoint holds {:?} tensors", self.dtype)));
        }
        let m = &self.meta;
        let mut rng = ChaCha8Rng::seed_from_u64(m.seed);
        let kind = m.layers.first().map(|l| l.kind).or(m.config.binarizer);
        let mut model = Model::<T>::new(m.spec.clone(), kind, m.config.meta_init, m.config.xnor_per_filter, &mut rng)?;
        if model.binarized.len() != m.layers.len() {
            return Err(Error::Format("binarized layer count does not match the network".into()));
        }
        let mut r = Reader {
            names: &m.tensor_names,
            tensors: &self.tensors,
            at: 0,
        };
        r.store("net.", &mut model.net.params)?;
        for (st, lm) in model.binarized.iter_mut().zip(&m.layers) {
            if st.layer != lm.layer {
                return Err(Error::Format(format!("binarized layer {} recorded as {}", st.layer, lm.layer)));
            }
            st.kind = lm.kind;
            st.per_filter = lm.per_filter;
            st.fixed = lm.fixed;
            st.scale = lm.scale.iter().map(|&s| T::c(s)).collect();
            match (&lm.quantnet, st.meta.as_mut()) {
                (Some(_), Some(q)) => r.store(&format!("meta{}.", lm.layer), &mut q.store)?,
                (None, _) => st.meta = None,
                (Some(_), None) => return Err(Error::Format("quantizer recorded for a non-meta layer".into())),
            }
            if st.fixed {
                let wid = model.net.weight_id(st.layer).expect("weighted layer");
                st.w_q = Some(model.net.params.get(wid).clone());
            }
        }
        let mut opts = m.optimizers.iter();
        let mut next_opt = |role: String| -> Result<Optimizer> {
            let om = opts
                .next()
                .filter(|o| o.role == role)
                .ok_or_else(|| Error::Format(format!("missing optimizer '{role}'")))?;
            r.optimizer(om)
        };
        let task_opt = next_opt("task".into())?;
        let n = model.binarized.len();
        let meta_opts = (0..n).map(|i| next_opt(format!("meta_opt{i}"))).collect::<Result<Vec<_>>>()?;
        let reg_opts = (0..n).map(|i| next_opt(format!("reg_opt{i}"))).collect::<Result<Vec<_>>>()?;
        if r.at != self.tensors.len() {
            return Err(Error::Format("checkpoint has unread tensors".into()));
        }
        let mut t = Trainer::with_model(m.config.clone(), model, ChaCha8Rng::seed_from_u64(m.seed.wrapping_add(m.epoch as u64)))?;
        t.task_opt = task_opt;
        t.meta_opts = meta_opts;
        for (reg, o) in t.regs.iter_mut().zip(reg_opts) {
            reg.optimizer = o;
        }
        t.epoch = m.epoch;
        t.steps = m.steps;
        Ok(t)
    }

    fn json(&self) -> Result<Vec<u8>> {
        serde_json::to_vec(&self.meta).map_err(|e| Error::Format(e.to_string()))
    }

    /// Byte size implied by the header fields.
    pub fn encoded_len(&self) -> Result<usize> {
        let header: usize = self.tensors.iter().map(|t| 8 + 8 * t.shape.len()).sum();
        let payload: usize = self.tensors.iter().map(|t| t.values.len() * t.dtype.size_of()).sum();
        Ok(4 + 4 + 4 + 8 + self.json()?.len() + 4 + header + payload)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let json = self.json()?;
        let mut out = Vec::with_capacity(self.encoded_len()?);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.dtype.code().to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&t.dtype.code().to_le_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        for t in &self.tensors {
            match t.dtype {
                DType::F32 => t.values.iter().for_each(|&v| (v as f32).write_le(&mut out)),
                DType::F64 => t.values.iter().for_each(|&v| v.write_le(&mut out)),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, at: 0 };
        if cur.take(4)? != MAGIC {
            return Err(Error::Format("not a BQF1 checkpoint (bad magic)".into()));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("checkpoint version {version}, expected {VERSION}")));
        }
        let dtype = cur.dtype()?;
        let json_len = cur.u64()? as usize;
        let meta: CheckpointMeta =
            serde_json::from_slice(cur.take(json_len)?).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let count = cur.u32()? as usize;
        if count != meta.tensor_names.len() {
            return Err(Error::Format(format!(
                "{count} tensors but {} names",
                meta.tensor_names.len()
            )));
        }
        let mut heads = Vec::with_capacity(count);
        for _ in 0..count {
            let dt = cur.dtype()?;
            let rank = cur.u32()? as usize;
            let shape = (0..rank).map(|_| cur.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            heads.push((dt, shape));
        }
        let mut tensors = Vec::with_capacity(count);
        for (dt, shape) in heads {
            let n: usize = shape.iter().product();
            let raw = cur.take(n.checked_mul(dt.size_of()).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
            let values = match dt {
                DType::F32 => raw.chunks_exact(4).map(|c| f32::read_le(c) as f64).collect(),
                DType::F64 => raw.chunks_exact(8).map(f64::read_le).collect(),
            };
            tensors.push(StoredTensor { dtype: dt, shape, values });
        }
        if cur.at != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - cur.at)));
        }
        Ok(Self { dtype, meta, tensors })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint is truncated".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }

    fn dtype(&mut self) -> Result<DType> {
        let c = self.u32()?;
        DType::from_code(c).ok_or_else(|| Error::Format(format!("unknown dtype code {c}")))
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, c: &Checkpoint) -> Result<()> {
    std::fs::write(path, c.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Checkpoint::from_bytes(&bytes)
}
