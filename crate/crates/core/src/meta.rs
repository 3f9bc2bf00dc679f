//! The meta-quantizer: kernel-wise reshaping, the encoder / compressor /
//! decoder network producing `W_q = tanh(Q_Θ(W))`, the sparsity objective
//! and its alternating optimizer, and the two assumption diagnostics.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm, BnMode, Bound, Dense, ParamStore};
use crate::optim::{Optimizer, OptimizerKind};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Learning rate of the QuantNet optimizers.
pub const META_LR: f64 = 1e-3;
/// Momentum / first-moment decay of the QuantNet optimizers.
pub const META_DECAY: f64 = 0.9;
/// Default weight of the sparsity objective.
pub const DEFAULT_LAMBDA: f64 = 1e-4;
pub const LEAKY_SLOPE: f64 = 0.01;

// ---- kernel batches ---------------------------------------------------

/// Kernels of a `[k, k, m, n]` weight as an `(m·n) × k²` matrix: element
/// `(i, j, p, q)` sits at row `p·n + q`, column `i·k + j`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelBatch<T: Scalar> {
    pub rows: Tensor<T>,
    /// Shape of the originating weight; `None` once detached from it.
    pub origin: Option<[usize; 4]>,
}

fn four_d(shape: &[usize]) -> Result<[usize; 4]> {
    match *shape {
        [a, b, c, d] if a == b => Ok([a, b, c, d]),
        _ => Err(Error::InvalidArgument(format!(
            "kernel batch needs a [k, k, m, n] weight, got {shape:?}"
        ))),
    }
}

fn transpose<T: Scalar>(data: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

pub fn reshape_to_kernel_batch<T: Scalar>(w: &Tensor<T>) -> Result<KernelBatch<T>> {
    let [k, _, m, n] = four_d(w.shape())?;
    let rows = Tensor::new(vec![m * n, k * k], transpose(w.data(), k * k, m * n))?;
    Ok(KernelBatch {
        rows,
        origin: Some([k, k, m, n]),
    })
}

pub fn restore_shape<T: Scalar>(batch: &KernelBatch<T>) -> Result<Tensor<T>> {
    let [k, _, m, n] = batch
        .origin
        .ok_or_else(|| Error::InvalidArgument("kernel batch has no shape record".into()))?;
    if batch.rows.shape() != [m * n, k * k] {
        return Err(Error::shape("restore_shape", batch.rows.shape(), &[m * n, k * k]));
    }
    Tensor::new(vec![k, k, m, n], transpose(batch.rows.data(), m * n, k * k))
}

/// Graph form of [`reshape_to_kernel_batch`].
pub fn kernel_batch_var<T: Scalar>(g: &mut Graph<T>, w: Var) -> Result<Var> {
    let [k, _, m, n] = four_d(g.shape(w))?;
    let flat = g.reshape(w, vec![k * k, m * n])?;
    g.transpose(flat)
}

/// Graph form of [`restore_shape`].
pub fn restore_var<T: Scalar>(g: &mut Graph<T>, rows: Var, origin: [usize; 4]) -> Result<Var> {
    let t = g.transpose(rows)?;
    g.reshape(t, origin.to_vec())
}

/// Views a dense `[in, out]` weight as a `[1, 1, in, out]` kernel tensor.
pub fn as_kernel_shape(shape: &[usize]) -> Result<[usize; 4]> {
    match *shape {
        [i, o] => Ok([1, 1, i, o]),
        _ => four_d(shape),
    }
}

// ---- QuantNet -----------------------------------------------------------

/// How the decoder is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaInit {
    /// Identity skip from input to output with a zeroed decoder, so that
    /// `tanh(Q_Θ(W)) = tanh(W)` at step 0.
    Warm,
    /// Every affine map drawn at random; no skip.
    Cold,
}

/// Parameters Θ of one layer's quantizer: FC-BN-LeakyReLU encoder
/// (k² → d²), FC-BN-LeakyReLU compressor (d² → c) and an affine decoder
/// (c → k²), with d = 3k and c = 2k².
#[derive(Debug, Clone, PartialEq)]
pub struct QuantNetParams<T: Scalar> {
    pub kernel: usize,
    pub d: usize,
    pub c: usize,
    pub init: MetaInit,
    pub store: ParamStore<T>,
    pub encoder: Dense,
    pub encoder_bn: Option<BatchNorm>,
    pub compressor: Dense,
    pub compressor_bn: Option<BatchNorm>,
    pub decoder: Dense,
}

fn scaled_normal<T: Scalar, R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor<T> {
    let s = 1.0 / (rows as f64).sqrt();
    let data: Vec<T> = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::c(z * s)
        })
        .collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches sample count")
}

impl<T: Scalar> QuantNetParams<T> {
    /// Quantizer for a layer with kernel size `kernel` and `filters = m·n`
    /// kernels. With a single kernel there is no batch to normalize over,
    /// so the batch-norm stages are omitted.
    pub fn new<R: Rng>(kernel: usize, filters: usize, init: MetaInit, rng: &mut R) -> Result<Self> {
        if kernel == 0 || filters == 0 {
            return Err(Error::InvalidArgument("quantnet: empty layer".into()));
        }
        let (k2, d) = (kernel * kernel, 3 * kernel);
        let (d2, c) = (d * d, 2 * k2);
        let mut store = ParamStore::new();
        // batch norm absorbs any bias of the layer in front of it
        let normalized = filters > 1;
        let mut dense = |store: &mut ParamStore<T>, name: &str, i: usize, o: usize, zero: bool, bias: bool| Dense {
            w: store.add(
                format!("{name}.w"),
                if zero { Tensor::zeros(vec![i, o]) } else { scaled_normal(rng, i, o) },
                true,
            ),
            b: bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(vec![o]), true)),
            inputs: i,
            outputs: o,
        };
        let encoder = dense(&mut store, "encoder", k2, d2, false, !normalized);
        let compressor = dense(&mut store, "compressor", d2, c, false, !normalized);
        let decoder = dense(&mut store, "decoder", c, k2, init == MetaInit::Warm, true);
        let (encoder_bn, compressor_bn) = if normalized {
            (
                Some(BatchNorm::new(&mut store, "encoder.bn", d2, META_DECAY, 1e-5)?),
                Some(BatchNorm::new(&mut store, "compressor.bn", c, META_DECAY, 1e-5)?),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            kernel,
            d,
            c,
            init,
            store,
            encoder,
            encoder_bn,
            compressor,
            compressor_bn,
            decoder,
        })
    }

    pub fn has_skip(&self) -> bool {
        self.init == MetaInit::Warm
    }

    /// `Q_Θ` on a kernel batch `[rows, k²]`, before the tanh.
    pub fn pre_activation(&mut self, g: &mut Graph<T>, bound: &Bound, rows: Var, mode: BnMode) -> Result<Var> {
        self.stages(g, bound, rows, mode, &mut Vec::new())
    }

    /// Smallest |input| of any LeakyReLU for kernel batch `rows`, using
    /// batch statistics.
    pub fn kink_margin(&mut self, rows: &Tensor<T>) -> Result<f64> {
        let mut g = Graph::new();
        let bound = self.store.bind(&mut g, |_| false);
        let x = g.constant(rows.clone());
        let mut taps = Vec::new();
        self.stages(&mut g, &bound, x, BnMode::Batch, &mut taps)?;
        Ok(taps
            .iter()
            .flat_map(|&t| g.value(t).data().iter().map(|v| v.f64().abs()))
            .fold(f64::INFINITY, f64::min))
    }

    fn stages(&mut self, g: &mut Graph<T>, bound: &Bound, rows: Var, mode: BnMode, taps: &mut Vec<Var>) -> Result<Var> {
        let k2 = self.kernel * self.kernel;
        if g.shape(rows).get(1) != Some(&k2) {
            return Err(Error::shape("quantnet", g.shape(rows), &[k2]));
        }
        let mut h = self.encoder.forward(g, bound, rows)?;
        if let Some(bn) = &self.encoder_bn {
            h = bn.forward(g, &mut self.store, bound, h, mode)?;
        }
        taps.push(h);
        h = g.leaky_relu(h, LEAKY_SLOPE)?;
        h = self.compressor.forward(g, bound, h)?;
        if let Some(bn) = &self.compressor_bn {
            h = bn.forward(g, &mut self.store, bound, h, mode)?;
        }
        taps.push(h);
        h = g.leaky_relu(h, LEAKY_SLOPE)?;
        let out = self.decoder.forward(g, bound, h)?;
        if self.has_skip() {
            g.add(rows, out)
        } else {
            Ok(out)
        }
    }

    /// `tanh(Q_Θ(W))` reshaped back to `W`'s shape (dense `[in, out]` or
    /// kernel `[k, k, m, n]`).
    pub fn quantize(&mut self, g: &mut Graph<T>, bound: &Bound, w: Var, mode: BnMode) -> Result<Var> {
        let shape = g.shape(w).to_vec();
        let origin = as_kernel_shape(&shape)?;
        if origin[0] != self.kernel {
            return Err(Error::shape("quantnet", &shape, &[self.kernel, self.kernel]));
        }
        let w4 = g.reshape(w, origin.to_vec())?;
        let rows = kernel_batch_var(g, w4)?;
        let q = self.pre_activation(g, bound, rows, mode)?;
        let t = g.tanh(q)?;
        let restored = restore_var(g, t, origin)?;
        g.reshape(restored, shape)
    }

    pub fn element_count(&self) -> usize {
        self.store.trainable_elements()
    }
}

/// A trainable map from full-precision weights to binarized weights.
pub trait Quantizer<T: Scalar> {
    fn params(&self) -> &ParamStore<T>;
    fn params_mut(&mut self) -> &mut ParamStore<T>;
    fn quantize(&mut self, g: &mut Graph<T>, bound: &Bound, w: Var, mode: BnMode) -> Result<Var>;
}

impl<T: Scalar> Quantizer<T> for QuantNetParams<T> {
    fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn quantize(&mut self, g: &mut Graph<T>, bound: &Bound, w: Var, mode: BnMode) -> Result<Var> {
        QuantNetParams::quantize(self, g, bound, w, mode)
    }
}

/// Records Θ on `g` and returns `W_q = tanh(Q_Θ(W))`.
pub fn quantnet_forward<T: Scalar>(
    g: &mut Graph<T>,
    theta: &mut QuantNetParams<T>,
    w: Var,
    mode: BnMode,
) -> Result<(Var, Bound)> {
    let bound = theta.store.bind(g, |_| true);
    let wq = theta.quantize(g, &bound, w, mode)?;
    Ok((wq, bound))
}

// ---- sparsity objective -------------------------------------------------

/// `‖1 − |W_q|‖₂ + ‖W_q‖₁` on the graph.
pub fn sparsity_objective<T: Scalar>(g: &mut Graph<T>, wq: Var) -> Result<Var> {
    let a = g.abs(wq)?;
    let one = g.scalar(1.0);
    let residual = g.sub(one, a)?;
    let r = g.l2_norm(residual)?;
    let l1 = g.l1_norm(wq)?;
    g.add(r, l1)
}

/// Direct evaluation of the sparsity objective.
pub fn sparsity_value<T: Scalar>(wq: &[T]) -> f64 {
    let r: f64 = wq.iter().map(|v| (1.0 - v.f64().abs()).powi(2)).sum();
    let l1: f64 = wq.iter().map(|v| v.f64().abs()).sum();
    r.sqrt() + l1
}

/// State of the alternating optimizer that minimizes `λ · objective(W_q)`
/// over Θ.
#[derive(Debug, Clone, PartialEq)]
pub struct RegularizerState {
    pub lambda: f64,
    pub optimizer: Optimizer,
}

impl RegularizerState {
    /// Dedicated optimizer of the given family with the meta learning rate
    /// and decay.
    pub fn new(lambda: f64, kind: OptimizerKind) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::Config(format!("λ must be a finite non-negative number, got {lambda}")));
        }
        let mut optimizer = Optimizer::new(kind, META_LR);
        optimizer.decay = META_DECAY;
        Ok(Self { lambda, optimizer })
    }
}

/// One optimizer step on `λ · objective(quantize(W))` w.r.t. Θ only; `w` is
/// recorded as a constant and never written. Returns the objective value
/// before the step. With λ = 0 Θ is left untouched.
pub fn regularizer_step<T: Scalar, Q: Quantizer<T>>(
    q: &mut Q,
    w: &Tensor<T>,
    state: &mut RegularizerState,
) -> Result<f64> {
    let mut g = Graph::new();
    let bound = q.params().bind(&mut g, |_| true);
    let wv = g.constant(w.clone());
    let wq = q.quantize(&mut g, &bound, wv, BnMode::Batch)?;
    let obj = sparsity_objective(&mut g, wq)?;
    let value = g.value(obj).item().f64();
    if state.lambda == 0.0 {
        return Ok(value);
    }
    let loss = g.scale(obj, state.lambda)?;
    g.backward(loss)?;
    let grads = bound.grads(&g);
    state.optimizer.step(q.params_mut(), &grads)?;
    Ok(value)
}

// ---- meta-gradients and shadow weights -----------------------------------

/// Reads `g_Θ` off a graph on which the task loss has been backpropagated
/// through the quantizer.
pub fn compute_meta_gradients<T: Scalar>(g: &Graph<T>, theta: &Bound) -> Result<Vec<Option<Tensor<T>>>> {
    if !g.is_backpropagated() {
        return Err(Error::InvalidArgument(
            "meta-gradients requested before the task loss was backpropagated".into(),
        ));
    }
    if theta.vars().iter().any(|&v| !g.owns(v)) {
        return Err(Error::DetachedGraph);
    }
    Ok(theta.grads(g))
}

/// `W ← W − η · ∂ℓ/∂W`.
pub fn update_shadow_weights<T: Scalar>(w: &mut Tensor<T>, eta: f64, grad: &Tensor<T>) -> Result<()> {
    if w.shape() != grad.shape() {
        return Err(Error::shape("update_shadow_weights", w.shape(), grad.shape()));
    }
    for (p, &gi) in w.data_mut().iter_mut().zip(grad.data()) {
        *p = T::c(p.f64() - eta * gi.f64());
    }
    Ok(())
}

// ---- diagnostics ---------------------------------------------------------

/// Dominance tolerance used for reporting.
pub const DOMINANCE_EPS: f64 = 1e-5;
/// Looser tolerance that is reachable at small scale.
pub const DOMINANCE_EPS_PRACTICAL: f64 = 0.05;

/// Keeps the `k` largest-magnitude entries (earlier index wins ties).
pub fn topk_mask<T: Scalar>(wq: &[T], k: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..wq.len()).collect();
    order.sort_by(|&a, &b| {
        wq[b].abs()
            .partial_cmp(&wq[a].abs())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut keep = vec![false; wq.len()];
    for &i in order.iter().take(k) {
        keep[i] = true;
    }
    keep
}

/// Default `k = ⌈fraction · n⌉`.
pub fn default_k(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64).ceil() as usize).min(n)
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct DominanceReport {
    pub loss_full: f64,
    pub loss_masked: f64,
    /// `ℓ(W_q ⊙ v) / ℓ(W_q)`.
    pub ratio: f64,
    pub within_eps: bool,
    pub within_practical: bool,
}

/// Compares the loss with every layer's `W_q` masked to its top-`k`
/// entries against the unmasked loss. `loss` evaluates the model with the
/// supplied binarized weights.
pub fn topk_dominance_diagnostic<T: Scalar>(
    wqs: &[Tensor<T>],
    ks: &[usize],
    mut loss: impl FnMut(&[Tensor<T>]) -> Result<f64>,
) -> Result<DominanceReport> {
    if wqs.len() != ks.len() {
        return Err(Error::InvalidArgument("one k per binarized layer".into()));
    }
    for (w, &k) in wqs.iter().zip(ks) {
        if k > w.len() {
            return Err(Error::InvalidArgument(format!("k = {k} exceeds {} elements", w.len())));
        }
    }
    let loss_full = loss(wqs)?;
    if loss_full == 0.0 {
        return Err(Error::InvalidArgument("dominance ratio undefined: reference loss is zero".into()));
    }
    let masked: Vec<Tensor<T>> = wqs
        .iter()
        .zip(ks)
        .map(|(w, &k)| {
            let keep = topk_mask(w.data(), k);
            let data = w.data().iter().zip(keep).map(|(&v, m)| if m { v } else { T::zero() }).collect();
            Tensor::new(w.shape().to_vec(), data)
        })
        .collect::<Result<_>>()?;
    let loss_masked = loss(&masked)?;
    let ratio = loss_masked / loss_full;
    Ok(DominanceReport {
        loss_full,
        loss_masked,
        ratio,
        within_eps: (ratio - 1.0).abs() <= DOMINANCE_EPS,
        within_practical: (ratio - 1.0).abs() <= DOMINANCE_EPS_PRACTICAL,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct ProbeRow {
    pub w: f64,
    /// Jacobian norm of `tanh(F(w·1))` per kernel coordinate.
    pub meta_grad: f64,
    /// `1 − tanh²(w)`.
    pub tanh_grad: f64,
}

/// Gradient magnitude of `tanh(F(x))` at kernels filled with each probe
/// value, next to plain tanh. `f` maps a `[1, k2]` kernel row to its
/// pre-activation; the reported norm is `‖J‖_F / √k2`, which equals
/// `|1 − tanh²(w)|` for the identity map.
pub fn assumption1_probe<T: Scalar>(
    mut f: impl FnMut(&mut Graph<T>, Var) -> Result<Var>,
    k2: usize,
    points: &[f64],
) -> Result<Vec<ProbeRow>> {
    let mut rows = Vec::with_capacity(points.len());
    for &w in points {
        let mut sq = 0.0;
        let mut single = 0.0;
        for o in 0..k2 {
            let mut g = Graph::new();
            let x = g.param(Tensor::full(vec![1, k2], T::c(w)));
            let pre = f(&mut g, x)?;
            let y = g.tanh(pre)?;
            let mut pick = vec![T::zero(); k2];
            pick[o] = T::one();
            let sel = g.constant(Tensor::new(vec![1, k2], pick)?);
            let p = g.mul(y, sel)?;
            let s = g.sum(p)?;
            g.backward(s)?;
            if let Some(gr) = g.grad(x) {
                for &e in gr.data() {
                    sq += e.f64() * e.f64();
                    single = e.f64().abs();
                }
            }
        }
        let meta_grad = if k2 == 1 { single } else { (sq / k2 as f64).sqrt() };
        let t = w.tanh();
        rows.push(ProbeRow {
            w,
            meta_grad,
            tanh_grad: 1.0 - t * t,
        });
    }
    Ok(rows)
}
