//! Dense row-major `f64` arrays and the differentiable operations of a
//! dense convolutional network.
//!
//! [`Tensor`] is plain data. Gradient bookkeeping (the `requires_grad` flag
//! and the accumulated gradient) lives on the nodes of a [`Graph`], which
//! records every operation applied to its variables and replays the
//! recorded backward rules in reverse order.

mod conv;
mod gradcheck;
mod graph;
mod ops;

use std::fmt;
use std::ops::Range;

pub use gradcheck::{finite_diff_check, finite_diff_check_coords};
pub use graph::{Activation, BatchNormOptions, Graph, Mode, Var};
pub use ops::{RunningStats, PROB_CLAMP};

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    values: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.dims)?;
        if self.values.len() <= 16 {
            write!(f, " {:?}", self.values)?;
        }
        Ok(())
    }
}

impl Tensor {
    /// Builds a tensor, checking that `dims` describes exactly `values.len()`
    /// elements. Zero-sized dimensions are allowed (an empty channel set is a
    /// valid concatenation operand).
    pub fn new(dims: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != values.len() {
            return Err(Error::shape(format!(
                "dims {:?} describe {} values, got {}",
                dims,
                expected,
                values.len()
            )));
        }
        Ok(Tensor { dims, values })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: &[usize], value: f64) -> Self {
        Tensor {
            dims: dims.to_vec(),
            values: vec![value; dims.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            dims: vec![1],
            values: vec![value],
        }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            values: (0..n).map(&mut f).collect(),
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
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

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn reshape(self, dims: Vec<usize>) -> Result<Self> {
        Tensor::new(dims, self.values)
    }

    pub(crate) fn dims4(&self, what: &str) -> Result<(usize, usize, usize, usize)> {
        match self.dims[..] {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => Err(Error::shape(format!(
                "{what} expects a rank-4 tensor, got dims {:?}",
                self.dims
            ))),
        }
    }

    /// Channel range `range` of a `[B, C, H, W]` tensor.
    pub fn slice_channels(&self, range: Range<usize>) -> Result<Tensor> {
        let (b, c, h, w) = self.dims4("slice_channels")?;
        if range.start > range.end || range.end > c {
            return Err(Error::shape(format!(
                "channel range {range:?} out of bounds for dims {:?}",
                self.dims
            )));
        }
        let plane = h * w;
        let mut values = Vec::with_capacity(b * range.len() * plane);
        for n in 0..b {
            let start = (n * c + range.start) * plane;
            values.extend_from_slice(&self.values[start..start + range.len() * plane]);
        }
        Ok(Tensor {
            dims: vec![b, range.len(), h, w],
            values,
        })
    }

    /// The `index`-th item along the leading axis, with that axis removed.
    pub fn item(&self, index: usize) -> Result<Tensor> {
        let Some((&n, rest)) = self.dims.split_first() else {
            return Err(Error::shape("item() on a rank-0 tensor"));
        };
        if index >= n {
            return Err(Error::shape(format!("item {index} out of {n}")));
        }
        let stride: usize = rest.iter().product();
        Ok(Tensor {
            dims: rest.to_vec(),
            values: self.values[index * stride..(index + 1) * stride].to_vec(),
        })
    }

    /// Stacks equally-shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("cannot stack zero tensors"))?;
        let mut values = Vec::with_capacity(items.len() * first.len());
        for t in items {
            if t.dims != first.dims {
                return Err(Error::shape(format!(
                    "cannot stack dims {:?} with {:?}",
                    t.dims, first.dims
                )));
            }
            values.extend_from_slice(&t.values);
        }
        let mut dims = vec![items.len()];
        dims.extend_from_slice(&first.dims);
        Ok(Tensor { dims, values })
    }
}
