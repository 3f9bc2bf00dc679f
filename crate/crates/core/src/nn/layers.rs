use super::params::{Bound, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Graph, PoolKind, Scalar, Tensor, Var};

/// How batch normalization obtains its statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Batch statistics without touching running statistics.
    Batch,
    /// Running statistics.
    Running,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense(Dense),
    Conv2d(Conv2d),
    BatchNorm(BatchNorm),
    LeakyRelu(f64),
    Pact(Pact),
    Pool(PoolKind),
    Flatten,
}

/// `y = x·W + b` with `W: [inputs, outputs]` and `x: [batch, inputs]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, bound: &Bound, x: Var) -> Result<Var> {
        self.forward_with(g, bound[self.w], self.b.map(|b| bound[b]), x)
    }

    pub fn forward_with<T: Scalar>(&self, g: &mut Graph<T>, w: Var, b: Option<Var>, x: Var) -> Result<Var> {
        let xs = g.shape(x);
        if xs.len() != 2 || xs[1] != self.inputs {
            return Err(Error::shape("dense", xs, &[self.inputs, self.outputs]));
        }
        let y = g.matmul(x, w)?;
        match b {
            Some(b) => g.broadcast_add(y, b, 1),
            None => Ok(y),
        }
    }
}

/// Convolution with kernels `[k, k, in_channels, filters]` on NCHW input.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub kernel: usize,
    pub in_channels: usize,
    pub filters: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn forward_with<T: Scalar>(&self, g: &mut Graph<T>, w: Var, b: Option<Var>, x: Var) -> Result<Var> {
        let y = g.conv2d(x, w, self.stride, self.pad)?;
        match b {
            Some(b) => g.broadcast_add(y, b, 1),
            None => Ok(y),
        }
    }
}

/// Batch normalization over axis 1 (features of `[B, F]` or channels of
/// `[N, C, H, W]`).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub features: usize,
    /// Weight of the old running value in each update.
    pub momentum: f64,
    pub eps: f64,
}

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

impl BatchNorm {
    pub fn new<T: Scalar>(
        params: &mut ParamStore<T>,
        prefix: &str,
        features: usize,
        momentum: f64,
        eps: f64,
    ) -> Result<Self> {
        if features == 0 {
            return Err(Error::InvalidArgument("batch_norm: zero features".into()));
        }
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "batch_norm: momentum {momentum} outside (0, 1)"
            )));
        }
        if !(eps > 0.0) {
            return Err(Error::InvalidArgument("batch_norm: eps must be positive".into()));
        }
        Ok(Self {
            gamma: params.add(format!("{prefix}.gamma"), Tensor::ones(vec![features]), true),
            beta: params.add(format!("{prefix}.beta"), Tensor::zeros(vec![features]), true),
            running_mean: params.add(format!("{prefix}.running_mean"), Tensor::zeros(vec![features]), false),
            running_var: params.add(format!("{prefix}.running_var"), Tensor::ones(vec![features]), false),
            features,
            momentum,
            eps,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        params: &mut ParamStore<T>,
        bound: &Bound,
        x: Var,
        mode: BnMode,
    ) -> Result<Var> {
        let (gamma, beta) = (bound[self.gamma], bound[self.beta]);
        match mode {
            BnMode::Running => {
                let mean = params.get(self.running_mean).data().to_vec();
                let var = params.get(self.running_var).data().to_vec();
                g.batch_norm_eval(x, gamma, beta, 1, self.eps, &mean, &var)
            }
            BnMode::Batch | BnMode::Train => {
                let (y, stats) = g.batch_norm_train(x, gamma, beta, 1, self.eps)?;
                if mode == BnMode::Train {
                    let m = T::c(self.momentum);
                    let keep = T::one() - m;
                    // running variance tracks the unbiased estimate
                    let unbias = T::c(stats.count as f64 / (stats.count as f64 - 1.0));
                    for (r, &b) in params.get_mut(self.running_mean).data_mut().iter_mut().zip(&stats.mean) {
                        *r = m * *r + keep * b;
                    }
                    for (r, &b) in params.get_mut(self.running_var).data_mut().iter_mut().zip(&stats.var) {
                        *r = m * *r + keep * b * unbias;
                    }
                }
                Ok(y)
            }
        }
    }
}

/// PACT activation quantizer with a learned clip level.
#[derive(Debug, Clone, PartialEq)]
pub struct Pact {
    pub alpha: ParamId,
    pub bits: u32,
}

pub const PACT_ALPHA_INIT: f64 = 6.0;

impl Pact {
    pub fn new<T: Scalar>(params: &mut ParamStore<T>, prefix: &str, bits: u32, alpha: f64) -> Result<Self> {
        if bits == 0 {
            return Err(Error::InvalidArgument("pact: bits must be ≥ 1".into()));
        }
        if !(alpha > 0.0) {
            return Err(Error::domain("pact", "clip level α must be positive"));
        }
        Ok(Self {
            alpha: params.add(format!("{prefix}.alpha"), Tensor::scalar(T::c(alpha)), true),
            bits,
        })
    }
}
