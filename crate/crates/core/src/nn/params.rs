use std::ops::Index;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::tensor::{Graph, Scalar, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named tensors owned by a model. Buffers (`trainable == false`), such as
/// batch-norm running statistics, live here too so that checkpoints and
/// checksums see every piece of state.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    trainable: Vec<bool>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            trainable: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        self.trainable.push(trainable);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) {
        self.values[id.0] = value;
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Total element count of trainable parameters.
    pub fn trainable_elements(&self) -> usize {
        self.values
            .iter()
            .zip(&self.trainable)
            .filter(|(_, &t)| t)
            .map(|(v, _)| v.len())
            .sum()
    }

    /// Records every tensor on `g`. Trainable tensors for which `grad`
    /// returns true become gradient-tracked leaves; everything else is
    /// a constant.
    pub fn bind(&self, g: &mut Graph<T>, grad: impl Fn(ParamId) -> bool) -> Bound {
        let vars = self
            .ids()
            .map(|id| {
                let track = self.trainable[id.0] && grad(id);
                g.leaf(self.values[id.0].clone(), track)
            })
            .collect();
        Bound { vars }
    }

    /// Order-sensitive FNV-1a hash over every element's bits.
    pub fn checksum(&self) -> u64 {
        let mut bytes = Vec::new();
        for v in &self.values {
            for &e in v.data() {
                e.write_le(&mut bytes);
            }
        }
        bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
            (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
        })
    }
}

/// Graph variables for every entry of a [`ParamStore`], indexed by id.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Binding from explicit graph nodes, one per parameter id in order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients after backward, `None` where none reached the leaf.
    pub fn grads<T: Scalar>(&self, g: &Graph<T>) -> Vec<Option<Tensor<T>>> {
        self.vars.iter().map(|&v| g.grad(v).cloned()).collect()
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

/// Gaussian samples with standard deviation `sigma`, redrawn until they fall
/// inside ±2σ.
pub fn truncated_normal<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], sigma: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break T::c(z * sigma);
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches sample count")
}
