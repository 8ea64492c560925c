//! Learnable tensors with gradient buffers.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// A learnable tensor and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    pub fn zeros(shape: Vec<usize>) -> Self {
        Self {
            value: Tensor::zeros(shape.clone()),
            grad: Tensor::zeros(shape),
        }
    }

    /// Uniform initialization in `[-bound, bound]`.
    pub fn uniform<R: Rng>(shape: Vec<usize>, bound: f64, rng: &mut R) -> Self {
        let mut p = Self::zeros(shape);
        for v in p.value.data_mut() {
            *v = rng.random_range(-bound..=bound);
        }
        p
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }
}

/// Anything that owns named learnable parameters.
///
/// Names are stable and unique within a model; they key checkpoint records.
pub trait Parameters {
    fn params(&self) -> Vec<(String, &Param)>;
    fn params_mut(&mut self) -> Vec<(String, &mut Param)>;

    fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|(_, p)| p.value.len()).sum()
    }

    /// Names the first parameter whose gradient holds NaN or infinity.
    fn check_grads_finite(&self) -> Result<()> {
        for (name, p) in self.params() {
            if !p.grad.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        Ok(())
    }
}

pub(crate) fn prefixed<'a>(prefix: &str, items: Vec<(String, &'a Param)>) -> Vec<(String, &'a Param)> {
    items
        .into_iter()
        .map(|(n, p)| (format!("{prefix}.{n}"), p))
        .collect()
}

pub(crate) fn prefixed_mut<'a>(
    prefix: &str,
    items: Vec<(String, &'a mut Param)>,
) -> Vec<(String, &'a mut Param)> {
    items
        .into_iter()
        .map(|(n, p)| (format!("{prefix}.{n}"), p))
        .collect()
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Identity plus mutation counter of a parameter owner; caches record the
/// stamp they were produced under so a backward pass can reject them once the
/// weights have changed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stamp {
    id: u64,
    version: u64,
}

impl Stamp {
    pub fn fresh() -> Self {
        Self {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            version: 0,
        }
    }

    pub fn bump(&mut self) {
        self.version += 1;
    }
}

impl Default for Stamp {
    fn default() -> Self {
        Self::fresh()
    }
}

/// Dense affine map `y = W x + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    in_dim: usize,
    out_dim: usize,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: Param::zeros(vec![out_dim, in_dim]),
            bias: Param::zeros(vec![out_dim]),
            in_dim,
            out_dim,
        }
    }

    pub fn init<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Self {
            weight: Param::uniform(vec![out_dim, in_dim], bound, rng),
            bias: Param::uniform(vec![out_dim], bound, rng),
            in_dim,
            out_dim,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.bias.value.data().to_vec();
        crate::numerics::matvec_acc(self.weight.value.data(), self.out_dim, self.in_dim, x, &mut y);
        y
    }

    /// Accumulates weight gradients and returns `dL/dx`.
    pub fn backward(&mut self, x: &[f64], grad_y: &[f64]) -> Vec<f64> {
        crate::numerics::outer_acc(self.weight.grad.data_mut(), grad_y, x);
        for (g, d) in self.bias.grad.data_mut().iter_mut().zip(grad_y) {
            *g += d;
        }
        let mut dx = vec![0.0; self.in_dim];
        crate::numerics::matvec_t_acc(self.weight.value.data(), self.out_dim, self.in_dim, grad_y, &mut dx);
        dx
    }
}

impl Parameters for Linear {
    fn params(&self) -> Vec<(String, &Param)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        vec![
            ("weight".into(), &mut self.weight),
            ("bias".into(), &mut self.bias),
        ]
    }
}
