//! Dense row-major `f64` arrays.
//!
//! A [`Tensor`] is a plain value. Gradient bookkeeping (the `requires_grad`
//! flag and the accumulated gradient buffer) lives on the [`Tape`] node that
//! wraps a tensor during a forward pass, see [`crate::autodiff`].
//!
//! [`Tape`]: crate::autodiff::Tape

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self { shape, data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f64) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Self { data: (0..n).map(&mut f).collect(), shape }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// The single value of a tensor with exactly one element.
    pub fn item(&self) -> Result<f64> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::dim(format!("item() on tensor of shape {:?}", self.shape))),
        }
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Leading-axis extent; 1 for scalars.
    pub fn batch(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Number of elements in one leading-axis slice.
    pub fn sample_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    /// Copies the leading-axis rows named by `indices` into a new tensor.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Self> {
        if self.shape.is_empty() {
            return Err(Error::dim("gather_rows on a scalar"));
        }
        let stride = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            if i >= self.shape[0] {
                return Err(Error::dim(format!("row {i} out of range {}", self.shape[0])));
            }
            data.extend_from_slice(&self.data[i * stride..(i + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Ok(Self { shape, data })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let stride = self.sample_len();
        &self.data[i * stride..(i + 1) * stride]
    }

    /// Concatenates tensors along the leading axis.
    pub fn concat_rows(parts: &[Tensor]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let tail = &first.shape[1..];
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(Error::dim(format!(
                    "concat_rows: {:?} vs {:?}",
                    p.shape, first.shape
                )));
            }
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = rows;
        Ok(Self { shape, data })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Row-wise argmax of a 2-D tensor; ties resolve to the lowest index.
    pub fn argmax_rows(&self) -> Result<Vec<usize>> {
        if self.ndim() != 2 {
            return Err(Error::dim(format!("argmax_rows needs 2-D, got {:?}", self.shape)));
        }
        let k = self.shape[1];
        Ok(self
            .data
            .chunks(k)
            .map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate().skip(1) {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= SHOWN {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " {:?}..", &self.data[..SHOWN])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn length_must_match_shape() {
        assert!(Tensor::new([2, 3], vec![0.0; 5]).is_err());
        assert_eq!(Tensor::new([2, 3], vec![0.0; 6]).unwrap().len(), 6);
    }

    #[test]
    fn argmax_ties_go_low() {
        let t = Tensor::new([2, 2], vec![0.5, 0.5, 0.1, 0.9]).unwrap();
        assert_eq!(t.argmax_rows().unwrap(), vec![0, 1]);
    }

    #[test]
    fn gather_and_concat() {
        let t = Tensor::from_fn([3, 2], |i| i as f64);
        let g = t.gather_rows(&[2, 0]).unwrap();
        assert_eq!(g.data(), &[4.0, 5.0, 0.0, 1.0]);
        let c = Tensor::concat_rows(&[g.clone(), t.gather_rows(&[1]).unwrap()]).unwrap();
        assert_eq!(c.shape(), &[3, 2]);
        assert_eq!(c.row(2), &[2.0, 3.0]);
    }
}
