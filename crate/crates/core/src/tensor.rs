//! Dense row-major tensors.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;

/// A dense, row-major n-dimensional array.
///
/// Gradient bookkeeping lives on the [`Tape`](crate::tape::Tape); a `Tensor`
/// is a plain value.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected = numel(shape);
        if expected != data.len() || shape.contains(&0) {
            return Err(Error::DataLength {
                shape: shape.to_vec(),
                expected,
                got: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero extent in {shape:?}");
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| T::of(x)).collect())
    }

    /// Square identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// The single element of a scalar (or one-element) tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::of_usize(self.data.len())
    }

    /// Element at a multi-index.
    pub fn at(&self, index: &[usize]) -> T {
        self.data[offset(&self.shape, index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let o = offset(&self.shape, index);
        self.data[o] = value;
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::of(x.as_f64())).collect(),
        }
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn offset(shape: &[usize], index: &[usize]) -> usize {
    assert_eq!(shape.len(), index.len(), "index rank");
    index.iter().zip(shape).fold(0, |acc, (&i, &d)| {
        assert!(i < d, "index {index:?} out of bounds for {shape:?}");
        acc * d + i
    })
}

/// Flattens an `H×W×C` map into `N×C` rows in row-major pixel order.
pub fn flatten_spatial<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    match *x.shape() {
        [h, w, c] => x.clone().reshape(&[h * w, c]),
        _ => Err(Error::Rank {
            op: "flatten_spatial",
            expected: 3,
            shape: x.shape().to_vec(),
        }),
    }
}

/// Inverse of [`flatten_spatial`].
pub fn unflatten_spatial<T: Real>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    match *x.shape() {
        [n, c] if n == h * w => x.clone().reshape(&[h, w, c]),
        _ => Err(Error::ShapeMismatch {
            op: "unflatten_spatial",
            lhs: x.shape().to_vec(),
            rhs: vec![h, w],
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_length() {
        assert!(Tensor::<f32>::new(&[2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::new(&[0, 2], vec![]).is_err());
    }

    #[test]
    fn flatten_orders_pixels_row_major() {
        let x = Tensor::<f32>::from_f64(&[2, 2, 1], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let f = flatten_spatial(&x).unwrap();
        assert_eq!(f.shape(), &[4, 1]);
        assert_eq!(f.data(), &[1.0, 2.0, 3.0, 4.0]);
        let single = Tensor::<f32>::from_f64(&[1, 1, 3], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(flatten_spatial(&single).unwrap().data(), single.data());
        assert!(flatten_spatial(&f).is_err());
    }

    #[test]
    fn flatten_round_trip() {
        for (h, w, c) in [(1, 1, 1), (3, 5, 2), (16, 16, 8)] {
            let data = (0..h * w * c).map(|i| i as f64).collect::<Vec<_>>();
            let x = Tensor::<f32>::from_f64(&[h, w, c], &data).unwrap();
            let f = flatten_spatial(&x).unwrap();
            // row i is pixel (i / w, i % w)
            for i in 0..h * w {
                for ch in 0..c {
                    assert_eq!(f.at(&[i, ch]), x.at(&[i / w, i % w, ch]));
                }
            }
            assert_eq!(unflatten_spatial(&f, h, w).unwrap(), x);
        }
    }
}
