//! Dense double-precision tensors, a reverse-mode differentiation tape and the
//! layer primitives built on it.
//!
//! Activations use the N×C×H×W layout (batch, channel, row, column) and
//! kernels Cout×Cin×Kh×Kw, both row-major. A pre-softmax activation element
//! indexed `(n, w, h, i)` in an N×W×H×C convention lives here at
//! `(n, i, h, w)`: the class channel moves to axis 1, the spatial axes follow
//! as row-then-column.

mod conv;
mod gradcheck;
pub mod io;
mod ops;
mod resize;
mod tape;

pub use conv::{Conv2dParams, Padding};
pub use gradcheck::finite_diff_grad;
pub use ops::{reduce_stats, ElementwiseKind};
pub use tape::{BackwardOp, Tape, Var};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

/// How a freshly created tensor is filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fill {
    Zeros,
    Constant(f64),
    Uniform { lo: f64, hi: f64, seed: u64 },
    Normal { mean: f64, std: f64, seed: u64 },
}

/// A dense row-major tensor with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

pub(crate) fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "rank must be at least 1".into(),
        });
    }
    if shape.contains(&0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "extents must be positive".into(),
        });
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: &[usize], fill: Fill) -> Result<Self> {
        let len = check_shape(shape)?;
        let values = match fill {
            Fill::Zeros => vec![0.0; len],
            Fill::Constant(v) => vec![v; len],
            Fill::Uniform { lo, hi, seed } => {
                let dist = Uniform::new(lo, hi).map_err(|e| Error::Domain {
                    op: "create_tensor",
                    reason: e.to_string(),
                })?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..len).map(|_| dist.sample(&mut rng)).collect()
            }
            Fill::Normal { mean, std, seed } => {
                let dist = Normal::new(mean, std).map_err(|e| Error::Domain {
                    op: "create_tensor",
                    reason: e.to_string(),
                })?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..len).map(|_| dist.sample(&mut rng)).collect()
            }
        };
        Ok(Self {
            shape: shape.to_vec(),
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::new(shape, Fill::Zeros)
    }

    pub fn from_vec(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != values.len() {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("{} values supplied for {} elements", values.len(), len),
            });
        }
        if !all_finite(&values) {
            return Err(Error::NonFinite {
                op: "from_vec".into(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            values: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub(crate) fn set_grad(&mut self, grad: Option<Vec<f64>>) {
        debug_assert!(grad.as_ref().is_none_or(|g| g.len() == self.values.len()));
        self.grad = grad;
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.values.len() != 1 {
            return Err(Error::NotScalar(self.shape.clone()));
        }
        Ok(self.values[0])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != self.values.len() {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("cannot reshape {:?}", self.shape),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        all_finite(&self.values)
    }
}

/// Branch-free scan: `v·0` is NaN exactly when `v` is not finite.
pub(crate) fn all_finite(values: &[f64]) -> bool {
    let mut acc = [0.0f64; 8];
    let mut chunks = values.chunks_exact(8);
    for c in &mut chunks {
        for (a, v) in acc.iter_mut().zip(c) {
            *a += v * 0.0;
        }
    }
    let tail: f64 = chunks.remainder().iter().map(|v| v * 0.0).sum();
    (acc.iter().sum::<f64>() + tail).is_finite()
}
