use rand::Rng;
use rand_distr::StandardNormal;

use crate::{Result, TensorError};

/// Dense row-major tensor of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(TensorError::Invalid {
                op: "tensor",
                msg: format!("shape {shape:?} has a zero dimension"),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::Shape {
                op: "tensor",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::new(shape, vec![0.0; numel]).expect("zero dimension in Tensor::zeros")
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self::new(shape, vec![value; numel]).expect("zero dimension in Tensor::full")
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(&[1], vec![value]).unwrap()
    }

    /// 2-D tensor from nested rows. All rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TensorError::Invalid {
                op: "from_rows",
                msg: "ragged rows".into(),
            });
        }
        Self::new(&[rows.len(), cols], rows.concat())
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * std)
            .collect();
        Self::new(shape, data).expect("zero dimension in Tensor::randn")
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows and columns when viewed as a matrix over the last axis.
    pub fn rows_cols(&self) -> (usize, usize) {
        let cols = *self.shape.last().unwrap();
        (self.numel() / cols, cols)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let (_, cols) = self.rows_cols();
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_length() {
        assert!(matches!(
            Tensor::new(&[2, 2], vec![1.0; 3]),
            Err(TensorError::Shape { .. })
        ));
    }

    #[test]
    fn rejects_zero_dim() {
        assert!(Tensor::new(&[0, 2], vec![]).is_err());
    }

    #[test]
    fn from_rows_layout() {
        let t = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(t.shape(), &[2, 2]);
        assert_eq!(t.row(1), &[3.0, 4.0]);
    }
}
