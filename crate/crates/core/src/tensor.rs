//! Dense row-major `f64` arrays and trainable parameters.

use std::fmt;

use rand::Rng;

use crate::error::{FgdError, Result};

/// Dense rank-N array of 64-bit floats stored in row-major order.
///
/// A rank-0 tensor (empty shape) holds exactly one value.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(FgdError::dim(format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(FgdError::dim(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: Vec::new(), data: vec![v], requires_grad: false, grad: None }
    }

    /// 1-D tensor from a slice. Panics on an empty slice.
    pub fn from_slice(v: &[f64]) -> Self {
        Tensor::new(vec![v.len()], v.to_vec()).expect("non-empty vector")
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![v; n]).expect("full: shape has a zero extent")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::full(shape, 1.0)
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor::new(shape.to_vec(), data).expect("uniform: shape has a zero extent")
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

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the stored gradient, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(FgdError::dim(format!(
                "gradient of length {} for tensor of shape {:?}",
                g.len(),
                self.shape
            )));
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let mut t = Tensor::new(shape.to_vec(), self.data.clone())?;
        t.requires_grad = self.requires_grad;
        Ok(t)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Image `i` of a rank-4 batch, returned with a leading extent of 1.
    pub fn batch_item(&self, i: usize) -> Result<Tensor> {
        if self.rank() != 4 || i >= self.shape[0] {
            return Err(FgdError::dim(format!(
                "batch item {i} of tensor with shape {:?}",
                self.shape
            )));
        }
        let per = self.numel() / self.shape[0];
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor::new(shape, self.data[i * per..(i + 1) * per].to_vec())
    }

    /// Concatenates rank-4 tensors along the batch axis.
    pub fn stack_batch(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| FgdError::dim("stack of zero tensors"))?;
        if first.rank() != 4 {
            return Err(FgdError::dim("stack_batch expects rank-4 tensors"));
        }
        let mut data = Vec::with_capacity(first.numel() * items.len());
        let mut batch = 0;
        for t in items {
            if t.rank() != 4 || t.shape[1..] != first.shape[1..] {
                return Err(FgdError::dim(format!(
                    "cannot stack {:?} with {:?}",
                    t.shape, first.shape
                )));
            }
            batch += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = batch;
        Tensor::new(shape, data)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .field("requires_grad", &self.requires_grad)
            .finish()
    }
}

/// Row-major strides for `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// A named trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        let mut tensor = tensor.with_requires_grad(true);
        tensor.grad = Some(vec![0.0; tensor.numel()]);
        Parameter { name: name.into(), tensor }
    }

    pub fn shape(&self) -> &[usize] {
        self.tensor.shape()
    }

    pub fn grad(&self) -> &[f64] {
        self.tensor.grad().expect("parameters always carry a gradient buffer")
    }

    pub fn zero_grad(&mut self) {
        self.tensor.zero_grad();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_values() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        let t = Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
        assert_eq!(Tensor::scalar(3.0).shape(), &[] as &[usize]);
    }

    #[test]
    fn gradient_accumulates_and_zeroes() {
        let mut p = Parameter::new("w", Tensor::from_slice(&[1.0, 2.0]));
        p.tensor.accumulate_grad(&[1.0, 1.0]).unwrap();
        p.tensor.accumulate_grad(&[0.5, -1.0]).unwrap();
        assert_eq!(p.grad(), &[1.5, 0.0]);
        assert!(p.tensor.accumulate_grad(&[1.0]).is_err());
        p.zero_grad();
        assert_eq!(p.grad(), &[0.0, 0.0]);
    }

    #[test]
    fn batch_item_and_stack_are_inverse() {
        let t = Tensor::new(vec![2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let a = t.batch_item(0).unwrap();
        let b = t.batch_item(1).unwrap();
        assert_eq!(b.data(), &[3.0, 4.0]);
        assert_eq!(Tensor::stack_batch(&[a, b]).unwrap(), t);
        assert!(t.batch_item(2).is_err());
    }

    #[test]
    fn strides_are_row_major() {
        assert_eq!(strides(&[2, 3, 4]), vec![12, 4, 1]);
        assert!(strides(&[]).is_empty());
    }
}
