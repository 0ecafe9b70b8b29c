use crate::error::{Error, Result};

use super::Scalar;

/// Dense `N x H x W x C` tensor in row-major (NHWC) order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4<T> {
    dims: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Tensor4<T> {
    pub fn zeros(dims: [usize; 4]) -> Result<Self> {
        check(dims)?;
        Ok(Self {
            dims,
            data: vec![T::zero(); dims.iter().product()],
        })
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<T>) -> Result<Self> {
        check(dims)?;
        let need: usize = dims.iter().product();
        if data.len() != need {
            return Err(Error::Shape(format!(
                "tensor {dims:?} needs {need} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn from_fn(dims: [usize; 4], f: impl Fn([usize; 4]) -> T) -> Result<Self> {
        check(dims)?;
        let [n, h, w, c] = dims;
        let mut data = Vec::with_capacity(n * h * w * c);
        for i in 0..n {
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        data.push(f([i, y, x, ch]));
                    }
                }
            }
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    /// Values per batch element.
    pub fn sample_len(&self) -> usize {
        self.dims[1] * self.dims[2] * self.dims[3]
    }

    pub fn sample(&self, i: usize) -> &[T] {
        let len = self.sample_len();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn at(&self, idx: [usize; 4]) -> T {
        let [_, h, w, c] = self.dims;
        self.data[((idx[0] * h + idx[1]) * w + idx[2]) * c + idx[3]]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 {
            dims: self.dims,
            data: self
                .data
                .iter()
                .map(|v| U::of(v.to_f64().expect("finite")))
                .collect(),
        }
    }
}

fn check(dims: [usize; 4]) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::Shape(format!(
            "tensor dimensions must be >= 1, got {dims:?}"
        )));
    }
    Ok(())
}
