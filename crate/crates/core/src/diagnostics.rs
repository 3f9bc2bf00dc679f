//! Finite-difference sweep over every differentiable op and the full
//! `tanh(Q_Θ(W))` composite, and the read-only checkpoint diagnosis.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use serde::Serialize;

use crate::binarize::BinarizerKind;
use crate::error::Result;
use crate::meta::{
    as_kernel_shape, assumption1_probe, default_k, reshape_to_kernel_batch, DominanceReport, MetaInit, ProbeRow,
    QuantNetParams,
};
use crate::metrics::{model_dominance, saturation_stats, Saturation};
use crate::train::{Dataset, Model};
use crate::nn::{BnMode, Bound};
use crate::tensor::gradcheck::{directional_check_many, finite_diff_check_many};
use crate::tensor::{DType, Graph, PoolKind, ReduceOp, Scalar, Tensor, Var};

/// Composite probe points keep every LeakyReLU input at least this far
/// from its kink.
pub const KINK_MARGIN: f64 = 1e-3;

/// Random directions per composite probe point.
pub const COMPOSITE_DIRECTIONS: usize = 16;

/// Per-op tolerance in f64.
pub const OP_TOLERANCE_F64: f64 = 1e-6;
/// End-to-end tolerance in f64.
pub const COMPOSITE_TOLERANCE_F64: f64 = 1e-5;
/// f32 tolerance (rounding floor of a wide-step five-point stencil).
pub const TOLERANCE_F32: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq)]
pub struct OpCheck {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub points: usize,
    pub coordinates: usize,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

fn rand_tensor<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_f64(shape.to_vec(), &data).expect("shape matches sample count")
}

/// Magnitudes in [0.15, 1.5) with random sign, so kinked ops are smooth
/// near each probe.
fn rand_away_from_zero<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let m = rng.random_range(0.15..1.5);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_f64(shape.to_vec(), &data).expect("shape matches sample count")
}

/// Contracts `y` with fixed positive weights so every coordinate matters.
fn weighted_sum<T: Scalar>(g: &mut Graph<T>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(y).to_vec();
    let w = g.constant(rand_tensor(&mut rng, &shape, 0.5, 1.5));
    let p = g.mul(y, w)?;
    g.sum(p)
}

/// Mixed-sign readout. Normalized outputs satisfy batch-level identities,
/// so same-sign or squared readouts cancel.
fn signed_sum<T: Scalar>(g: &mut Graph<T>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(y).to_vec();
    let w = g.constant(rand_away_from_zero(&mut rng, &shape));
    let p = g.mul(y, w)?;
    g.sum(p)
}

type OpFn<T> = fn(&mut Graph<T>, &[Var]) -> Result<Var>;

/// Name, input shapes and scalar-valued function of each op case.
pub fn op_cases<T: Scalar>() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn<T>)> {
    vec![
        ("add", vec![vec![2, 3], vec![2, 3]], |g, v| {
            let y = g.add(v[0], v[1])?;
            weighted_sum(g, y, 1)
        }),
        ("sub", vec![vec![2, 3], vec![2, 3]], |g, v| {
            let y = g.sub(v[0], v[1])?;
            weighted_sum(g, y, 2)
        }),
        ("mul", vec![vec![2, 3], vec![2, 3]], |g, v| {
            let y = g.mul(v[0], v[1])?;
            weighted_sum(g, y, 3)
        }),
        ("mul_scalar_broadcast", vec![vec![5], vec![1]], |g, v| {
            let y = g.mul(v[0], v[1])?;
            weighted_sum(g, y, 4)
        }),
        ("div", vec![vec![2, 3], vec![2, 3]], |g, v| {
            let y = g.div(v[0], v[1])?;
            weighted_sum(g, y, 5)
        }),
        ("tanh", vec![vec![6]], |g, v| {
            let y = g.tanh(v[0])?;
            weighted_sum(g, y, 6)
        }),
        ("leaky_relu", vec![vec![6]], |g, v| {
            let y = g.leaky_relu(v[0], 0.01)?;
            weighted_sum(g, y, 7)
        }),
        ("abs", vec![vec![6]], |g, v| {
            let y = g.abs(v[0])?;
            weighted_sum(g, y, 8)
        }),
        ("sqrt", vec![vec![6]], |g, v| {
            let a = g.abs(v[0])?;
            let y = g.sqrt(a)?;
            weighted_sum(g, y, 9)
        }),
        ("square", vec![vec![6]], |g, v| {
            let y = g.square(v[0])?;
            weighted_sum(g, y, 10)
        }),
        ("scale", vec![vec![6]], |g, v| {
            let y = g.scale(v[0], -1.75)?;
            weighted_sum(g, y, 24)
        }),
        ("clip", vec![vec![6]], |g, v| {
            let y = g.clip(v[0], -0.1, 0.1)?;
            let z = g.add(y, v[0])?;
            weighted_sum(g, z, 11)
        }),
        ("matmul", vec![vec![3, 4], vec![4, 2]], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            weighted_sum(g, y, 12)
        }),
        ("conv2d", vec![vec![2, 2, 4, 4], vec![3, 3, 2, 2]], |g, v| {
            let y = g.conv2d(v[0], v[1], 1, 1)?;
            weighted_sum(g, y, 13)
        }),
        ("conv2d_strided", vec![vec![1, 2, 5, 5], vec![3, 3, 2, 2]], |g, v| {
            let y = g.conv2d(v[0], v[1], 2, 0)?;
            weighted_sum(g, y, 14)
        }),
        ("sum", vec![vec![6]], |g, v| {
            let y = g.reduce(ReduceOp::Sum, v[0])?;
            let t = g.square(y)?;
            g.sum(t)
        }),
        ("mean", vec![vec![6]], |g, v| {
            let y = g.reduce(ReduceOp::Mean, v[0])?;
            let t = g.square(y)?;
            g.sum(t)
        }),
        ("l1_norm", vec![vec![6]], |g, v| g.reduce(ReduceOp::L1Norm, v[0])),
        ("l2_norm", vec![vec![6]], |g, v| g.reduce(ReduceOp::L2Norm, v[0])),
        ("broadcast_add", vec![vec![2, 3, 2], vec![3]], |g, v| {
            let y = g.broadcast_add(v[0], v[1], 1)?;
            let t = g.tanh(y)?;
            weighted_sum(g, t, 15)
        }),
        ("broadcast_mul", vec![vec![2, 3, 2], vec![3]], |g, v| {
            let y = g.broadcast_mul(v[0], v[1], 1)?;
            weighted_sum(g, y, 16)
        }),
        ("sum_to_axis", vec![vec![2, 3, 2]], |g, v| {
            let y = g.sum_to_axis(v[0], 2)?;
            let t = g.square(y)?;
            weighted_sum(g, t, 17)
        }),
        ("reshape_transpose", vec![vec![2, 3]], |g, v| {
            let r = g.reshape(v[0], vec![3, 2])?;
            let t = g.transpose(r)?;
            let y = g.mul(t, v[0])?;
            weighted_sum(g, y, 18)
        }),
        ("batch_norm_dense", vec![vec![8, 2], vec![2], vec![2]], |g, v| {
            let (y, _) = g.batch_norm_train(v[0], v[1], v[2], 1, 1e-5)?;
            signed_sum(g, y, 19)
        }),
        ("batch_norm_conv", vec![vec![2, 2, 2, 2], vec![2], vec![2]], |g, v| {
            let (y, _) = g.batch_norm_train(v[0], v[1], v[2], 1, 1e-5)?;
            signed_sum(g, y, 20)
        }),
        ("batch_norm_eval", vec![vec![4, 3], vec![3], vec![3]], |g, v| {
            let mean = [T::c(0.1), T::c(-0.2), T::c(0.3)];
            let var = [T::c(0.5), T::c(1.5), T::c(2.0)];
            let y = g.batch_norm_eval(v[0], v[1], v[2], 1, 1e-5, &mean, &var)?;
            signed_sum(g, y, 21)
        }),
        ("max_pool", vec![vec![1, 2, 4, 4]], |g, v| {
            let y = g.pool2x2(v[0], PoolKind::Max)?;
            weighted_sum(g, y, 22)
        }),
        ("avg_pool", vec![vec![1, 2, 4, 4]], |g, v| {
            let y = g.pool2x2(v[0], PoolKind::Avg)?;
            weighted_sum(g, y, 23)
        }),
        ("softmax_cross_entropy", vec![vec![3, 4]], |g, v| {
            g.softmax_cross_entropy(v[0], &[0, 3, 1])
        }),
    ]
}

fn op_tolerance<T: Scalar>(composite: bool) -> f64 {
    match (T::DTYPE, composite) {
        (DType::F32, _) => TOLERANCE_F32,
        (DType::F64, false) => OP_TOLERANCE_F64,
        (DType::F64, true) => COMPOSITE_TOLERANCE_F64,
    }
}

/// `signed_sum(tanh(Q_Θ(W)))` checked jointly in W and every trainable
/// tensor of Θ, with batch statistics in the quantizer's batch norms.
/// Thousands of coordinates per point make some near-stationary by chance,
/// so the end-to-end check runs along random directions instead.
fn composite_check<T: Scalar>(
    name: &'static str,
    shape: &[usize],
    init: MetaInit,
    points: usize,
    rng: &mut ChaCha8Rng,
) -> Result<OpCheck> {
    let kernel = if shape.len() == 4 { shape[0] } else { 1 };
    let filters = if shape.len() == 4 { shape[2] * shape[3] } else { shape.iter().product() };
    let mut worst: f64 = 0.0;
    let mut coordinates = 0;
    for _ in 0..points {
        let (q, inputs) = loop {
            let mut q = QuantNetParams::<T>::new(kernel, filters, init, rng)?;
            // a zero decoder would hide every upstream gradient
            let dec = q.decoder.w;
            let shape_dec = q.store.get(dec).shape().to_vec();
            q.store.set(dec, rand_tensor::<T>(rng, &shape_dec, -0.5, 0.5));
            let w = rand_tensor::<T>(rng, shape, -1.0, 1.0);
            let rows = reshape_to_kernel_batch(&w.reshape(as_kernel_shape(shape)?.to_vec())?)?;
            if q.kink_margin(&rows.rows)? < KINK_MARGIN {
                continue;
            }
            let mut inputs = vec![w];
            inputs.extend(q.store.ids().filter(|&id| q.store.is_trainable(id)).map(|id| q.store.get(id).clone()));
            break (q, inputs);
        };
        let readout_seed = rng.random();
        let report = directional_check_many(
            |g, v| {
                let mut q = q.clone();
                let mut next = 1;
                let mut vars = Vec::with_capacity(q.store.len());
                for id in q.store.ids() {
                    if q.store.is_trainable(id) {
                        vars.push(v[next]);
                        next += 1;
                    } else {
                        vars.push(g.constant(q.store.get(id).clone()));
                    }
                }
                let bound = Bound::from_vars(vars);
                let wq = q.quantize(g, &bound, v[0], BnMode::Batch)?;
                signed_sum(g, wq, readout_seed)
            },
            &inputs,
            T::default_fd_epsilon(),
            COMPOSITE_DIRECTIONS,
            readout_seed,
        )?;
        worst = worst.max(report.max_rel_error);
        coordinates += report.coordinates;
    }
    Ok(OpCheck {
        name,
        max_rel_error: worst,
        tolerance: op_tolerance::<T>(true),
        points,
        coordinates,
    })
}

/// Runs every op case and the quantizer composites at `points` random
/// points each.
pub fn gradcheck_suite<T: Scalar>(points: usize, seed: u64) -> Result<Vec<OpCheck>> {
    let eps = T::default_fd_epsilon();
    let mut out = Vec::new();
    for (name, shapes, f) in op_cases::<T>() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(name.len() as u64));
        // Mixed-sign f32 kernels can cancel an input gradient down to the
        // rounding floor of the probe; same-sign draws keep it measurable.
        let positive = T::DTYPE == DType::F32 && name.starts_with("conv");
        let mut worst: f64 = 0.0;
        let mut coordinates = 0;
        for _ in 0..points {
            let inputs: Vec<Tensor<T>> = shapes
                .iter()
                .map(|s| {
                    let t: Tensor<T> = rand_away_from_zero(&mut rng, s);
                    if positive {
                        t.map(|x| x.abs())
                    } else {
                        t
                    }
                })
                .collect();
            let report = finite_diff_check_many(f, &inputs, eps)?;
            worst = worst.max(report.max_rel_error);
            coordinates += report.coordinates;
        }
        out.push(OpCheck {
            name,
            max_rel_error: worst,
            tolerance: op_tolerance::<T>(false),
            points,
            coordinates,
        });
    }
    // end-to-end checks are meaningful only at f64 resolution
    if T::DTYPE == DType::F64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        for (name, init) in [("quantnet_warm", MetaInit::Warm), ("quantnet_cold", MetaInit::Cold)] {
            out.push(composite_check::<T>(name, &[3, 3, 4, 4], init, points, &mut rng)?);
        }
    }
    Ok(out)
}

/// Shadow-weight values at which the gradient probe is tabulated.
pub const PROBE_POINTS: [f64; 11] = [-10.0, -5.0, -2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0, 5.0, 10.0];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerDiagnosis {
    pub layer: usize,
    pub kind: BinarizerKind,
    pub elements: usize,
    /// Entries kept by the dominance mask.
    pub k: usize,
    pub fixed: bool,
    /// Gradient magnitude of the binarizer next to plain tanh; absent for
    /// estimator-based and discretized layers.
    pub probe: Option<Vec<ProbeRow>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnosis {
    pub layers: Vec<LayerDiagnosis>,
    pub dominance: DominanceReport,
    pub saturation: Saturation,
}

/// Gradient probe, top-k dominance on the first `batch` samples of `data`
/// and saturation of a model. Works on a copy; `model` is untouched.
pub fn diagnose<T: Scalar>(model: &Model<T>, data: &Dataset, fraction: f64, batch: usize) -> Result<Diagnosis> {
    let mut m = model.clone();
    let weights = m.binarized_weights()?;
    let mut layers = Vec::new();
    for st in &m.binarized {
        let elements = weights.get(&st.layer).map_or(0, |w| w.len());
        let probe = match (&st.meta, st.kind, st.fixed) {
            (_, _, true) => None,
            (Some(q), _, _) => {
                let mut q = q.clone();
                let k2 = q.kernel * q.kernel;
                Some(assumption1_probe(
                    |g, x| {
                        let bound = q.store.bind(g, |_| false);
                        q.pre_activation(g, &bound, x, BnMode::Running)
                    },
                    k2,
                    &PROBE_POINTS,
                )?)
            }
            (None, BinarizerKind::SelfBinarizingTanh, _) => {
                Some(assumption1_probe::<T>(|_, x| Ok(x), 1, &PROBE_POINTS)?)
            }
            _ => None,
        };
        layers.push(LayerDiagnosis {
            layer: st.layer,
            kind: st.kind,
            elements,
            k: default_k(elements, fraction),
            fixed: st.fixed,
            probe,
        });
    }
    let wqs: Vec<Tensor<T>> = weights.values().cloned().collect();
    let saturation = saturation_stats(&wqs);
    let idx: Vec<usize> = (0..batch.min(data.len())).collect();
    let dominance = model_dominance(&mut m, data, &idx, fraction)?;
    Ok(Diagnosis {
        layers,
        dominance,
        saturation,
    })
}
