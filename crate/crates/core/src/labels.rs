use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Integer class map with shape N×H×W (or H×W for a single scene).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    shape: Vec<usize>,
    values: Vec<usize>,
}

impl LabelMap {
    pub fn new(shape: &[usize], values: Vec<usize>) -> Result<Self> {
        let len = crate::tensor::check_shape(shape)?;
        if len != values.len() {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("{} labels supplied for {} elements", values.len(), len),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            values,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[usize] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Fails if any label is `>= classes`.
    pub fn check_range(&self, classes: usize) -> Result<()> {
        match self.values.iter().find(|&&l| l >= classes) {
            Some(&label) => Err(Error::LabelOutOfRange { label, classes }),
            None => Ok(()),
        }
    }

    /// Per-class pixel counts.
    pub fn counts(&self, classes: usize) -> Vec<usize> {
        let mut c = vec![0; classes];
        for &l in &self.values {
            if l < classes {
                c[l] += 1;
            }
        }
        c
    }

    /// Stacks H×W maps into one N×H×W map.
    pub fn stack(maps: &[&LabelMap]) -> Result<Self> {
        let first = maps.first().ok_or(Error::EmptyInput("label stack"))?;
        let mut values = Vec::with_capacity(first.len() * maps.len());
        for m in maps {
            if m.shape != first.shape {
                return Err(Error::ShapeMismatch {
                    op: "label stack",
                    left: first.shape.clone(),
                    right: m.shape.clone(),
                });
            }
            values.extend_from_slice(&m.values);
        }
        let mut shape = vec![maps.len()];
        shape.extend_from_slice(&first.shape);
        Self::new(&shape, values)
    }

    /// Real-valued copy for the tensor file format.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_raw(
            self.shape.clone(),
            self.values.iter().map(|&v| v as f64).collect(),
        )
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let values = t
            .values()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(Error::Format(format!(
                        "label value {v} is not a class index"
                    )))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(t.shape(), values)
    }
}
