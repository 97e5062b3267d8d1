//! Dense row-major `f64` tensors plus the op tape that records forward passes
//! and replays them backward.  The value type here is deliberately plain: a
//! shape vector and a flat buffer.  All graph behaviour lives in [`tape`].

mod kernels;
mod tape;

pub use kernels::{mm_nn, mm_nt, mm_tn};
pub use tape::{Gradients, ParamId, Tape, Var};

use crate::error::{Error, Result};
use crate::rng::Rng;
use rand_distr::{Distribution, Normal};

/// Whether a forward pass is training (dropout active, tape usually recording)
/// or evaluation (dropout off everywhere).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Per-element FLOP weights used both by the tape's runtime counter and by the
/// analytic cost model in `accounting`.  The two sides share these constants
/// but derive their totals independently (op-by-op vs. closed-form algebra).
pub mod cost {
    /// max, subtract, exp, sum, divide — five passes worth of work per element.
    pub const SOFTMAX: u64 = 5;
    /// mean, variance, normalize, scale-and-shift.
    pub const LAYER_NORM: u64 = 8;
    /// tanh-approximation GELU: polynomial, tanh, and the outer product.
    pub const GELU: u64 = 10;
    /// mask draw application and rescale.
    pub const DROPOUT: u64 = 2;
    /// log-softmax plus gather and averaging.
    pub const CROSS_ENTROPY: u64 = 6;
    /// one arithmetic op per element (add, mul, scale, bias, gathered bias).
    pub const ELEMWISE: u64 = 1;

    /// A `[p,q] x [q,r]` product: one multiply and one add per inner step.
    pub fn matmul(p: usize, q: usize, r: usize) -> u64 {
        2 * p as u64 * q as u64 * r as u64
    }
}

/// A dense row-major tensor of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `data.len()` matches the shape product.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::Length {
                what: "tensor data for shape",
                got: data.len(),
                limit: numel,
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel] }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor { shape, data: vec![value; numel] }
    }

    /// A rank-0 tensor holding one value.
    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    /// Samples every element from `N(0, std^2)`.
    pub fn randn(shape: impl Into<Vec<usize>>, std: f64, rng: &mut Rng) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let data = (0..numel).map(|_| dist.sample(rng)).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Rows of a matrix (or of a scalar/vector treated as one row).
    pub fn dim(&self, axis: usize) -> usize {
        self.shape.get(axis).copied().unwrap_or(1)
    }

    /// The single value of a rank-0 or one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )))
        }
    }

    /// True when every element is a normal, subnormal, or zero value.
    pub fn is_all_finite(&self) -> bool {
        all_finite(&self.data)
    }
}

/// Single vectorized pass: `x * 0.0` is 0 for finite x and NaN for NaN or
/// infinity, so a zero running sum proves the whole slice finite.
pub(crate) fn all_finite(xs: &[f64]) -> bool {
    let mut acc = 0.0f64;
    for x in xs {
        acc += x * 0.0;
    }
    acc == 0.0
}
