//! Layers, parameter storage and the reference architectures.

mod layers;
mod params;
mod spec;

pub use layers::{BatchNorm, BnMode, Conv2d, Dense, Layer, Pact};
pub use params::{truncated_normal, Bound, ParamId, ParamStore};
pub use spec::{LayerSpec, NetworkSpec};

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, PoolKind, Scalar, Tensor, Var};

/// Standard deviation of the truncated Gaussian weight initializer.
pub const INIT_SIGMA: f64 = 0.05;

/// A feed-forward network built from a [`NetworkSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T: Scalar> {
    pub spec: NetworkSpec,
    pub params: ParamStore<T>,
    pub layers: Vec<Layer>,
}

impl<T: Scalar> Network<T> {
    /// Builds the network with truncated Gaussian weights (σ = 0.05, cut at
    /// ±2σ), zero biases, unit BN scale and PACT α = 6.
    pub fn new<R: Rng>(spec: NetworkSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamStore::new();
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (i, ls) in spec.layers.iter().enumerate() {
            let layer = match *ls {
                LayerSpec::Dense { inputs, outputs, bias } => {
                    let w = params.add(
                        format!("l{i}.w"),
                        truncated_normal(rng, &[inputs, outputs], INIT_SIGMA),
                        true,
                    );
                    let b = bias.then(|| params.add(format!("l{i}.b"), Tensor::zeros(vec![outputs]), true));
                    Layer::Dense(Dense { w, b, inputs, outputs })
                }
                LayerSpec::Conv2d { kernel, in_channels, filters, stride, pad, bias } => {
                    let w = params.add(
                        format!("l{i}.w"),
                        truncated_normal(rng, &[kernel, kernel, in_channels, filters], INIT_SIGMA),
                        true,
                    );
                    let b = bias.then(|| params.add(format!("l{i}.b"), Tensor::zeros(vec![filters]), true));
                    Layer::Conv2d(Conv2d { w, b, kernel, in_channels, filters, stride, pad })
                }
                LayerSpec::BatchNorm { features, momentum, eps } => {
                    Layer::BatchNorm(BatchNorm::new(&mut params, &format!("l{i}"), features, momentum, eps)?)
                }
                LayerSpec::LeakyRelu { slope } => Layer::LeakyRelu(slope),
                LayerSpec::Pact { bits, alpha } => {
                    Layer::Pact(Pact::new(&mut params, &format!("l{i}"), bits, alpha)?)
                }
                LayerSpec::MaxPool => Layer::Pool(PoolKind::Max),
                LayerSpec::AvgPool => Layer::Pool(PoolKind::Avg),
                LayerSpec::Flatten => Layer::Flatten,
            };
            layers.push(layer);
        }
        Ok(Self { spec, params, layers })
    }

    /// Indices of the weighted layers whose binarization flag is set.
    pub fn binarized_layers(&self) -> Vec<usize> {
        self.spec
            .binarize
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    /// Weight parameter of a dense or convolution layer.
    pub fn weight_id(&self, layer: usize) -> Option<ParamId> {
        match self.layers.get(layer)? {
            Layer::Dense(d) => Some(d.w),
            Layer::Conv2d(c) => Some(c.w),
            _ => None,
        }
    }

    /// Batch norm fed directly by the bias-free weighted layer `layer`.
    pub fn following_batch_norm(&self, layer: usize) -> Option<&BatchNorm> {
        let bias = match self.layers.get(layer)? {
            Layer::Dense(d) => d.b,
            Layer::Conv2d(c) => c.b,
            _ => return None,
        };
        match self.layers.get(layer + 1) {
            Some(Layer::BatchNorm(bn)) if bias.is_none() => Some(bn),
            _ => None,
        }
    }

    /// Runs the network on `x`. `weights` substitutes the weight of the
    /// listed layers (the binarized weights during training). In
    /// [`BnMode::Train`] batch-norm running statistics are updated.
    pub fn forward(
        &mut self,
        g: &mut Graph<T>,
        bound: &Bound,
        x: Var,
        mode: BnMode,
        weights: &BTreeMap<usize, Var>,
    ) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let w_override = weights.get(&i).copied();
            h = match layer {
                Layer::Dense(d) => d.forward_with(g, w_override.unwrap_or(bound[d.w]), d.b.map(|b| bound[b]), h)?,
                Layer::Conv2d(c) => c.forward_with(g, w_override.unwrap_or(bound[c.w]), c.b.map(|b| bound[b]), h)?,
                Layer::BatchNorm(bn) => bn.forward(g, &mut self.params, bound, h, mode)?,
                Layer::LeakyRelu(slope) => g.leaky_relu(h, *slope)?,
                Layer::Pact(p) => g.pact(h, bound[p.alpha], p.bits)?,
                Layer::Pool(kind) => g.pool2x2(h, *kind)?,
                Layer::Flatten => {
                    let s = g.shape(h).to_vec();
                    let rest: usize = s[1..].iter().product();
                    g.reshape(h, vec![s[0], rest])?
                }
            };
        }
        Ok(h)
    }

    /// Convenience inference pass: binds every parameter as a constant and
    /// returns the logits. Batch norm uses running statistics.
    pub fn predict(&mut self, x: &Tensor<T>, weights: &BTreeMap<usize, Tensor<T>>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, |_| false);
        let overrides = weights
            .iter()
            .map(|(&i, w)| (i, g.constant(w.clone())))
            .collect();
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, &bound, xv, BnMode::Running, &overrides)?;
        Ok(g.value(y).clone())
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.spec.input
    }

    pub fn classes(&self) -> Result<usize> {
        match self.spec.output_shape()?.as_slice() {
            [c] => Ok(*c),
            other => Err(Error::InvalidArgument(format!("network output {other:?} is not a class vector"))),
        }
    }
}
