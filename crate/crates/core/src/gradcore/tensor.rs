use sha2::{Digest, Sha256};

use super::Real;
use crate::error::{shape_err, Result};

/// Dense row-major tensor with value semantics.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<R> {
    dims: Vec<usize>,
    data: Vec<R>,
}

impl<R: Real> Tensor<R> {
    pub fn new(dims: Vec<usize>, data: Vec<R>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(shape_err!("dims must be positive, got {dims:?}"));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(shape_err!(
                "dims {dims:?} hold {n} values but data has {}",
                data.len()
            ));
        }
        Ok(Self { dims, data })
    }

    /// Internal constructor for shapes already known to be consistent.
    pub(crate) fn from_parts(dims: Vec<usize>, data: Vec<R>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self { dims, data }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Self::from_parts(dims.to_vec(), vec![R::zero(); n])
    }

    pub fn full(dims: &[usize], value: R) -> Self {
        let n = dims.iter().product();
        Self::from_parts(dims.to_vec(), vec![value; n])
    }

    pub fn scalar(value: R) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn vector(values: Vec<R>) -> Result<Self> {
        let n = values.len();
        Self::new(vec![n], values)
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<R>) -> Result<Self> {
        Self::new(vec![rows, cols], values)
    }

    pub fn from_f64(dims: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(dims.to_vec(), values.iter().map(|&v| R::of(v)).collect())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[R] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [R] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<R> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when viewed as a matrix (leading dims flattened).
    pub fn rows(&self) -> usize {
        if self.dims.len() <= 1 {
            1
        } else {
            self.data.len() / self.cols()
        }
    }

    /// Size of the last dimension.
    pub fn cols(&self) -> usize {
        *self.dims.last().unwrap_or(&1)
    }

    pub fn row(&self, i: usize) -> &[R] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [R] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> R {
        self.data[0]
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != self.data.len() {
            return Err(shape_err!("cannot reshape {:?} into {dims:?}", self.dims));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(R) -> R) -> Self {
        Self::from_parts(self.dims.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.as_f64()).collect()
    }

    pub fn sum(&self) -> R {
        self.data.iter().copied().sum()
    }

    /// Little-endian bytes of the payload.
    pub fn le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * R::DTYPE.width());
        for &x in &self.data {
            x.write_le(&mut out);
        }
        out
    }

    /// SHA-256 over dims and payload bytes.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for d in &self.dims {
            h.update((*d as u64).to_le_bytes());
        }
        h.update(self.le_bytes());
        hex::encode(h.finalize())
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn cast<S: Real>(&self) -> Tensor<S> {
        Tensor::from_parts(
            self.dims.clone(),
            self.data.iter().map(|x| S::of(x.as_f64())).collect(),
        )
    }
}
