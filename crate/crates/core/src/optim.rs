//! First-order optimizers over a [`ParamStore`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgdm,
    Adam,
    Amsgrad,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgdm" => Ok(Self::Sgdm),
            "adam" => Ok(Self::Adam),
            "amsgrad" => Ok(Self::Amsgrad),
            other => Err(Error::Config(format!(
                "unknown optimizer '{other}' (expected sgdm, adam or amsgrad)"
            ))),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sgdm => "sgdm",
            Self::Adam => "adam",
            Self::Amsgrad => "amsgrad",
        })
    }
}

pub const MOMENTUM: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Per-parameter optimizer slots. `m` is the momentum buffer (sgdm) or first
/// moment; `v` the second moment; `vmax` the running maximum of `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Slot {
    pub steps: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub vmax: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// Momentum (sgdm) or β₁ (adam, amsgrad).
    pub decay: f64,
    pub beta2: f64,
    pub eps: f64,
    pub checked: bool,
    slots: Vec<Option<Slot>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            decay: MOMENTUM,
            beta2: BETA2,
            eps: ADAM_EPS,
            checked: false,
            slots: Vec::new(),
        }
    }

    pub fn slots(&self) -> &[Option<Slot>] {
        &self.slots
    }

    pub fn set_slots(&mut self, slots: Vec<Option<Slot>>) {
        self.slots = slots;
    }

    /// Updates every parameter that has a gradient. Parameters without one
    /// keep their value and optimizer state.
    pub fn step<T: Scalar>(&mut self, params: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer: {} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                self.update(i, params.get_mut(ParamId(i)), g)?;
            }
        }
        Ok(())
    }

    /// Single-tensor update using slot `index`.
    pub fn update<T: Scalar>(&mut self, index: usize, p: &mut Tensor<T>, g: &Tensor<T>) -> Result<()> {
        if p.shape() != g.shape() {
            return Err(Error::shape("optimizer_step", p.shape(), g.shape()));
        }
        if self.checked && !g.is_finite() {
            return Err(Error::NonFinite { op: "optimizer_step" });
        }
        if self.slots.len() <= index {
            self.slots.resize(index + 1, None);
        }
        let n = p.len();
        let slot = self.slots[index].get_or_insert_with(|| Slot {
            steps: 0,
            m: vec![0.0; n],
            v: if matches!(self.kind, OptimizerKind::Sgdm) { Vec::new() } else { vec![0.0; n] },
            vmax: if matches!(self.kind, OptimizerKind::Amsgrad) { vec![0.0; n] } else { Vec::new() },
        });
        if slot.m.len() != n {
            return Err(Error::shape("optimizer_step", &[slot.m.len()], p.shape()));
        }
        slot.steps += 1;
        let (lr, b1, b2, eps) = (self.lr, self.decay, self.beta2, self.eps);
        let pd = p.data_mut();
        match self.kind {
            OptimizerKind::Sgdm => {
                for ((w, &gi), m) in pd.iter_mut().zip(g.data()).zip(&mut slot.m) {
                    *m = b1 * *m + gi.f64();
                    *w = T::c(w.f64() - lr * *m);
                }
            }
            OptimizerKind::Adam | OptimizerKind::Amsgrad => {
                let t = slot.steps as i32;
                let bc1 = 1.0 - b1.powi(t);
                let bc2 = 1.0 - b2.powi(t);
                let ams = self.kind == OptimizerKind::Amsgrad;
                for (e, (w, &gi)) in pd.iter_mut().zip(g.data()).enumerate() {
                    let gi = gi.f64();
                    slot.m[e] = b1 * slot.m[e] + (1.0 - b1) * gi;
                    slot.v[e] = b2 * slot.v[e] + (1.0 - b2) * gi * gi;
                    let second = if ams {
                        slot.vmax[e] = slot.vmax[e].max(slot.v[e]);
                        slot.vmax[e]
                    } else {
                        slot.v[e]
                    };
                    let denom = (second / bc2).sqrt() + eps;
                    *w = T::c(w.f64() - lr * (slot.m[e] / bc1) / denom);
                }
            }
        }
        Ok(())
    }
}
