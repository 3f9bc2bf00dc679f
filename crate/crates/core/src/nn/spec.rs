use serde::{Deserialize, Serialize};

use super::layers::{BN_EPS, BN_MOMENTUM, PACT_ALPHA_INIT};
use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
        bias: bool,
    },
    Conv2d {
        kernel: usize,
        in_channels: usize,
        filters: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    },
    BatchNorm {
        features: usize,
        momentum: f64,
        eps: f64,
    },
    LeakyRelu {
        slope: f64,
    },
    Pact {
        bits: u32,
        alpha: f64,
    },
    MaxPool,
    AvgPool,
    Flatten,
}

impl LayerSpec {
    pub fn is_weighted(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }
}

/// Ordered layers plus a per-layer binarization flag (only meaningful on
/// dense and convolution layers).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    /// Per-sample input shape, `[features]` or `[C, H, W]`.
    pub input: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub binarize: Vec<bool>,
}

impl NetworkSpec {
    /// Builds a spec whose weighted layers are binarized except the first
    /// and last (all of them when `binarize_all`). With `act_bits > 0` a
    /// PACT quantizer follows the nonlinearity of every binarized layer.
    pub fn from_body(name: &str, input: Vec<usize>, body: Vec<LayerSpec>, binarize_all: bool, act_bits: u32) -> Self {
        let weighted: Vec<usize> = (0..body.len()).filter(|&i| body[i].is_weighted()).collect();
        let (first, last) = (weighted.first().copied(), weighted.last().copied());
        let wants = |i: usize| body[i].is_weighted() && (binarize_all || (Some(i) != first && Some(i) != last));

        let mut layers = Vec::with_capacity(body.len());
        let mut binarize = Vec::with_capacity(body.len());
        let mut pending_pact = false;
        for (i, l) in body.iter().enumerate() {
            if l.is_weighted() {
                pending_pact = act_bits > 0 && wants(i);
            }
            let is_act = matches!(l, LayerSpec::LeakyRelu { .. });
            layers.push(l.clone());
            binarize.push(wants(i));
            if is_act && pending_pact {
                layers.push(LayerSpec::Pact {
                    bits: act_bits,
                    alpha: PACT_ALPHA_INIT,
                });
                binarize.push(false);
                pending_pact = false;
            }
        }
        Self {
            name: name.to_string(),
            input,
            layers,
            binarize,
        }
    }

    /// 784-256-256-10 perceptron with FC-BN-LeakyReLU hidden units.
    pub fn mlp(binarize_all: bool, act_bits: u32) -> Self {
        let mut body = Vec::new();
        for (i, o) in [(784, 256), (256, 256)] {
            body.push(LayerSpec::Dense {
                inputs: i,
                outputs: o,
                bias: false,
            });
            body.extend(bn_act(o));
        }
        body.push(LayerSpec::Dense {
            inputs: 256,
            outputs: 10,
            bias: true,
        });
        Self::from_body("mlp", vec![784], body, binarize_all, act_bits)
    }

    /// Four 3×3 convolution blocks (32, 32, 64, 64 channels) with 2×2 max
    /// pooling after the second and fourth, then a dense classifier.
    pub fn cnn(binarize_all: bool, act_bits: u32) -> Self {
        let mut body = Vec::new();
        let mut c_in = 3;
        for (i, f) in [32, 32, 64, 64].into_iter().enumerate() {
            body.push(LayerSpec::Conv2d {
                kernel: 3,
                in_channels: c_in,
                filters: f,
                stride: 1,
                pad: 1,
                bias: false,
            });
            body.extend(bn_act(f));
            if i % 2 == 1 {
                body.push(LayerSpec::MaxPool);
            }
            c_in = f;
        }
        body.push(LayerSpec::Flatten);
        body.push(LayerSpec::Dense {
            inputs: 64 * 8 * 8,
            outputs: 10,
            bias: true,
        });
        Self::from_body("cnn", vec![3, 32, 32], body, binarize_all, act_bits)
    }

    pub fn by_name(name: &str, binarize_all: bool, act_bits: u32) -> Result<Self> {
        match name {
            "mlp" => Ok(Self::mlp(binarize_all, act_bits)),
            "cnn" => Ok(Self::cnn(binarize_all, act_bits)),
            other => Err(Error::Config(format!("unknown network '{other}' (expected mlp or cnn)"))),
        }
    }

    /// Clears every binarization flag.
    pub fn full_precision(mut self) -> Self {
        self.binarize.iter_mut().for_each(|b| *b = false);
        self
    }

    /// Per-sample output shape; fails when adjacent layers disagree.
    pub fn output_shape(&self) -> Result<Vec<usize>> {
        let mut s = self.input.clone();
        for (i, l) in self.layers.iter().enumerate() {
            let bad = |s: &[usize]| Error::Config(format!("layer {i} ({l:?}) cannot take input {s:?}"));
            s = match *l {
                LayerSpec::Dense { inputs, outputs, .. } => {
                    if s != [inputs] {
                        return Err(bad(&s));
                    }
                    vec![outputs]
                }
                LayerSpec::Conv2d {
                    kernel,
                    in_channels,
                    filters,
                    stride,
                    pad,
                    ..
                } => {
                    if s.len() != 3 || s[0] != in_channels || kernel == 0 || stride == 0 {
                        return Err(bad(&s));
                    }
                    let out = |d: usize| -> Option<usize> {
                        let span = d + 2 * pad;
                        (span >= kernel && (span - kernel) % stride == 0).then(|| (span - kernel) / stride + 1)
                    };
                    match (out(s[1]), out(s[2])) {
                        (Some(h), Some(w)) => vec![filters, h, w],
                        _ => return Err(bad(&s)),
                    }
                }
                LayerSpec::BatchNorm { features, .. } => {
                    if s.first() != Some(&features) {
                        return Err(bad(&s));
                    }
                    s
                }
                LayerSpec::LeakyRelu { .. } | LayerSpec::Pact { .. } => s,
                LayerSpec::MaxPool | LayerSpec::AvgPool => {
                    if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
                        return Err(bad(&s));
                    }
                    vec![s[0], s[1] / 2, s[2] / 2]
                }
                LayerSpec::Flatten => vec![s.iter().product()],
            };
        }
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.binarize.len() != self.layers.len() {
            return Err(Error::Config(format!(
                "{} binarization flags for {} layers",
                self.binarize.len(),
                self.layers.len()
            )));
        }
        for (i, (l, &b)) in self.layers.iter().zip(&self.binarize).enumerate() {
            if b && !l.is_weighted() {
                return Err(Error::Config(format!("layer {i} has no weights to binarize")));
            }
            match *l {
                LayerSpec::BatchNorm { momentum, eps, .. } if !(momentum > 0.0 && momentum < 1.0 && eps > 0.0) => {
                    return Err(Error::Config(format!("layer {i}: momentum must lie in (0,1), eps > 0")));
                }
                LayerSpec::Pact { bits, alpha } if bits == 0 || !(alpha > 0.0) => {
                    return Err(Error::Config(format!("layer {i}: PACT needs bits ≥ 1 and α > 0")));
                }
                _ => {}
            }
        }
        self.output_shape().map(|_| ())
    }
}

fn bn_act(features: usize) -> [LayerSpec; 2] {
    [
        LayerSpec::BatchNorm {
            features,
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        },
        LayerSpec::LeakyRelu { slope: LEAKY_SLOPE },
    ]
}
