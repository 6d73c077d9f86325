use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// A learnable tensor and its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Index of a parameter inside its [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Ordered, named collection of parameters belonging to one model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.params.push(Param::new(value));
        ParamId(self.params.len() - 1)
    }

    /// Glorot-uniform weight matrix `fan_in × fan_out`.
    pub fn add_weight(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let w = glorot_uniform(fan_in, fan_out, &[fan_in, fan_out], rng);
        self.add(name, w)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Param::zero_grad);
    }

    /// Adds `grads` (in parameter order) into the stored gradients.
    pub fn accumulate(&mut self, grads: &[Tensor]) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::dim(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.params.len()
            )));
        }
        for (p, g) in self.params.iter_mut().zip(grads) {
            if p.grad.shape() != g.shape() {
                return Err(Error::dim("gradient shape mismatch"));
            }
            p.grad.add_assign(g);
        }
        Ok(())
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// `(name, value)` pairs in storage order.
    pub fn named_values(&self) -> Vec<(String, Tensor)> {
        self.names
            .iter()
            .cloned()
            .zip(self.params.iter().map(|p| p.value.clone()))
            .collect()
    }

    /// Replaces all values, checking names and shapes against `self`.
    pub fn load_values(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        if named.len() != self.params.len() {
            return Err(Error::dim(format!(
                "expected {} tensors, got {}",
                self.params.len(),
                named.len()
            )));
        }
        for ((name, t), (own, p)) in named.iter().zip(self.names.iter().zip(&mut self.params)) {
            if name != own || t.shape() != p.value.shape() {
                return Err(Error::dim(format!(
                    "tensor {name} {:?} does not match {own} {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        Ok(())
    }

    /// Polyak blend: `self ← (1 − rate)·self + rate·other`.
    pub fn blend_toward(&mut self, other: &ParamSet, rate: f64) {
        for (p, o) in self.params.iter_mut().zip(&other.params) {
            for (a, b) in p.value.data_mut().iter_mut().zip(o.value.data()) {
                *a = (1.0 - rate) * *a + rate * b;
            }
        }
    }
}

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform(
    fan_in: usize,
    fan_out: usize,
    shape: &[usize],
    rng: &mut ChaCha8Rng,
) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches length")
}
