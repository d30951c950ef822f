use crate::error::{Error, Result};
use crate::scalar::Real;

/// Dense row-major array. Image-like tensors are laid out `(batch, channels,
/// height, width)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// `(n, c, h, w)` of a rank-4 tensor.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "expected rank-4 tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> (usize, usize) {
        assert_eq!(self.shape.len(), 2, "expected rank-2 tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn min_max(&self) -> (T, T) {
        self.data.iter().fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                .collect(),
        }
    }

    /// Samples `[start, start + len)` along the batch axis.
    pub fn batch_slice(&self, start: usize, len: usize) -> Self {
        let per: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = len;
        Tensor {
            shape,
            data: self.data[start * per..(start + len) * per].to_vec(),
        }
    }

    /// Concatenates tensors along the batch axis.
    pub fn stack_batch(parts: &[Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("cannot stack zero tensors".into()))?;
        let tail = &first.shape[1..];
        let mut data = Vec::with_capacity(parts.iter().map(Tensor::numel).sum());
        let mut batch = 0;
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(Error::Shape(format!(
                    "cannot stack {:?} with {:?}",
                    p.shape, first.shape
                )));
            }
            batch += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = batch;
        Ok(Tensor { shape, data })
    }
}

/// A rank-4 image batch with values in `[-1, 1]` and spatial sizes that are
/// multiples of 4.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor(Tensor<f32>);

impl ImageTensor {
    pub const RANGE_SLACK: f32 = 1e-6;

    pub fn new(tensor: Tensor<f32>) -> Result<Self> {
        if tensor.rank() != 4 {
            return Err(Error::Shape(format!(
                "image tensor must be rank 4, got {:?}",
                tensor.shape()
            )));
        }
        let (_, c, h, w) = tensor.dims4();
        if c != 3 {
            return Err(Error::Shape(format!("image tensor needs 3 channels, got {c}")));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Shape(format!(
                "image height and width must be multiples of 4, got {h}x{w}"
            )));
        }
        if !tensor.all_finite() {
            return Err(Error::Precondition("image tensor contains non-finite values".into()));
        }
        let (lo, hi) = tensor.min_max();
        if lo < -1.0 - Self::RANGE_SLACK || hi > 1.0 + Self::RANGE_SLACK {
            return Err(Error::Precondition(format!(
                "image values must lie in [-1, 1], got [{lo}, {hi}]"
            )));
        }
        Ok(ImageTensor(tensor))
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.0
    }

    pub fn batch(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.0.dims4()
    }

    pub fn stack(parts: &[ImageTensor]) -> Result<Self> {
        let tensors: Vec<_> = parts.iter().map(|p| p.0.clone()).collect();
        Ok(ImageTensor(Tensor::stack_batch(&tensors)?))
    }

    pub fn sample(&self, index: usize) -> ImageTensor {
        ImageTensor(self.0.batch_slice(index, 1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_tensor_invariants() {
        assert!(ImageTensor::new(Tensor::zeros(&[1, 3, 8, 8])).is_ok());
        assert!(ImageTensor::new(Tensor::zeros(&[1, 3, 6, 8])).is_err());
        assert!(ImageTensor::new(Tensor::zeros(&[1, 1, 8, 8])).is_err());
        assert!(ImageTensor::new(Tensor::full(&[1, 3, 8, 8], 1.5)).is_err());
        assert!(ImageTensor::new(Tensor::full(&[1, 3, 8, 8], f32::NAN)).is_err());
    }

    #[test]
    fn stack_and_slice() {
        let a = Tensor::<f32>::full(&[1, 2, 1, 1], 1.0);
        let b = Tensor::<f32>::full(&[2, 2, 1, 1], 2.0);
        let s = Tensor::stack_batch(&[a.clone(), b]).unwrap();
        assert_eq!(s.shape(), &[3, 2, 1, 1]);
        assert_eq!(s.batch_slice(0, 1), a);
        assert_eq!(s.batch_slice(1, 2).data(), &[2.0; 4]);
    }
}
