//! Weight binarizers: clipped straight-through sign, XNOR-scaled sign,
//! self-binarizing tanh and the meta-quantizer.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meta::QuantNetParams;
use crate::nn::{BnMode, Bound};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Straight-through gradients pass where `|w| ≤ STE_CLIP`.
pub const STE_CLIP: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinarizerKind {
    SignSte,
    XnorScaled,
    SelfBinarizingTanh,
    QuantNetMeta,
}

impl BinarizerKind {
    pub fn is_soft(self) -> bool {
        matches!(self, Self::SelfBinarizingTanh | Self::QuantNetMeta)
    }
}

impl FromStr for BinarizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sign_ste" => Ok(Self::SignSte),
            "xnor" => Ok(Self::XnorScaled),
            "tanh" => Ok(Self::SelfBinarizingTanh),
            "quantnet" => Ok(Self::QuantNetMeta),
            other => Err(Error::Config(format!(
                "unknown binarizer '{other}' (expected sign_ste, xnor, tanh or quantnet)"
            ))),
        }
    }
}

impl fmt::Display for BinarizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::SignSte => "sign_ste",
            Self::XnorScaled => "xnor",
            Self::SelfBinarizingTanh => "tanh",
            Self::QuantNetMeta => "quantnet",
        })
    }
}

// ---- eager helpers --------------------------------------------------------

/// Elementwise sign with `sign(0) = +1`.
pub fn sign_binarize<T: Scalar>(w: &Tensor<T>) -> Tensor<T> {
    w.map(|v| if v >= T::zero() { T::one() } else { -T::one() })
}

/// Clipped straight-through rule: `upstream` where `|w| ≤ 1`, else 0.
pub fn ste_backward<T: Scalar>(upstream: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    if upstream.shape() != w.shape() {
        return Err(Error::shape("ste_backward", upstream.shape(), w.shape()));
    }
    let clip = T::c(STE_CLIP);
    let data = upstream
        .data()
        .iter()
        .zip(w.data())
        .map(|(&g, &x)| if x.abs() <= clip { g } else { T::zero() })
        .collect();
    Tensor::new(w.shape().to_vec(), data)
}

/// Mean absolute value.
pub fn xnor_scale<T: Scalar>(w: &[T]) -> Result<T> {
    if w.is_empty() {
        return Err(Error::EmptyInput { op: "xnor_scale" });
    }
    let s: f64 = w.iter().map(|v| v.f64().abs()).sum();
    Ok(T::c(s / w.len() as f64))
}

/// Mean absolute value per output filter (last axis).
pub fn xnor_filter_scales<T: Scalar>(w: &Tensor<T>) -> Vec<T> {
    let n = *w.shape().last().expect("tensor has rank ≥ 1");
    let per = w.len() / n;
    let mut acc = vec![0.0f64; n];
    for (i, v) in w.data().iter().enumerate() {
        acc[i % n] += v.f64().abs();
    }
    acc.into_iter().map(|a| T::c(a / per as f64)).collect()
}

/// Elementwise tanh.
pub fn tanh_soft_binarize<T: Scalar>(w: &Tensor<T>) -> Tensor<T> {
    w.map(|v| v.tanh())
}

// ---- per-layer state ------------------------------------------------------

/// Binarization state of one weighted layer. The shadow weights `W` live in
/// the network's parameter store; this records how they are binarized.
#[derive(Debug, Clone, PartialEq)]
pub struct BinarizedLayerState<T: Scalar> {
    pub layer: usize,
    pub kind: BinarizerKind,
    /// XNOR: one scale per output filter instead of one per layer.
    pub per_filter: bool,
    /// `f(w)`: 1 for the sign and soft kinds, mean |W| for XNOR.
    pub scale: Vec<T>,
    pub w_q: Option<Tensor<T>>,
    pub meta: Option<QuantNetParams<T>>,
    /// Set once discretized: the stored weights are final.
    pub fixed: bool,
}

impl<T: Scalar> BinarizedLayerState<T> {
    pub fn new(layer: usize, kind: BinarizerKind) -> Self {
        Self {
            layer,
            kind,
            per_filter: true,
            scale: vec![T::one()],
            w_q: None,
            meta: None,
            fixed: false,
        }
    }

    /// Records `W_q` for the shadow weights `w` on `g`. `theta` holds the
    /// bound Θ for the meta-quantizer. Caches the value of `W_q` and the
    /// scale.
    pub fn binarize_var(&mut self, g: &mut Graph<T>, w: Var, theta: Option<&Bound>, mode: BnMode) -> Result<Var> {
        if self.fixed {
            return Ok(w);
        }
        let wq = match self.kind {
            BinarizerKind::SignSte => {
                self.scale = vec![T::one()];
                g.sign_ste(w, STE_CLIP)?
            }
            BinarizerKind::XnorScaled => {
                let s = g.sign_ste(w, STE_CLIP)?;
                let a = g.abs(w)?;
                let shape = g.shape(w).to_vec();
                if self.per_filter {
                    let axis = shape.len() - 1;
                    let per = (g.value(w).len() / shape[axis]) as f64;
                    let sums = g.sum_to_axis(a, axis)?;
                    let scale = g.scale(sums, 1.0 / per)?;
                    self.scale = g.value(scale).data().to_vec();
                    g.broadcast_mul(s, scale, axis)?
                } else {
                    let scale = g.mean(a)?;
                    self.scale = g.value(scale).data().to_vec();
                    g.mul(s, scale)?
                }
            }
            BinarizerKind::SelfBinarizingTanh => {
                self.scale = vec![T::one()];
                g.tanh(w)?
            }
            BinarizerKind::QuantNetMeta => {
                let meta = self.meta.as_mut().ok_or_else(|| {
                    Error::InvalidArgument(format!("layer {}: meta-quantizer not initialized", self.layer))
                })?;
                let bound = theta.ok_or_else(|| {
                    Error::InvalidArgument(format!("layer {}: Θ not bound on this graph", self.layer))
                })?;
                self.scale = vec![T::one()];
                meta.quantize(g, bound, w, mode)?
            }
        };
        self.w_q = Some(g.value(wq).clone());
        Ok(wq)
    }

    /// Eager `W_q` for shadow weights `w`. Batch statistics inside the
    /// meta-quantizer are computed over all kernels and never stored.
    pub fn binarize_weights(&mut self, w: &Tensor<T>) -> Result<Tensor<T>> {
        if !w.is_finite() {
            return Err(Error::NonFinite { op: "binarize_weights" });
        }
        let mut g = Graph::new();
        let wv = g.constant(w.clone());
        let bound = self.meta.as_ref().map(|m| m.store.bind(&mut g, |_| false));
        let wq = self.binarize_var(&mut g, wv, bound.as_ref(), BnMode::Batch)?;
        Ok(g.value(wq).clone())
    }

    /// `sign(W_q)` times the XNOR scale for XNOR layers.
    pub fn discretized(&self, wq: &Tensor<T>) -> Tensor<T> {
        let s = sign_binarize(wq);
        if self.kind != BinarizerKind::XnorScaled {
            return s;
        }
        let n = *wq.shape().last().expect("rank ≥ 1");
        let scale = &self.scale;
        let data = s
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * if scale.len() == 1 { scale[0] } else { scale[i % n] })
            .collect();
        Tensor::new(wq.shape().to_vec(), data).expect("same shape")
    }
}
