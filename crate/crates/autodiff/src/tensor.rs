//! The primitive operation set shared by plain arrays, taped variables and
//! dual numbers. Model code is written once against [`Tensor`] and then run
//! with whichever backend the caller needs: [`Array`] for fast evaluation,
//! [`Var`](crate::Var) for gradients, [`Dual`](crate::Dual) for time
//! derivatives, or `Dual<Var>` for gradients of time derivatives.

use crate::array::{self, Array};
use crate::error::{Result, Shape};

pub trait Tensor: Clone {
    fn shape(&self) -> Shape;

    /// The primal value.
    fn value(&self) -> &Array;

    /// Lifts a constant into the same context as `self`.
    fn constant(&self, value: Array) -> Self;

    fn add(&self, rhs: &Self) -> Result<Self>;
    fn sub(&self, rhs: &Self) -> Result<Self>;
    fn mul(&self, rhs: &Self) -> Result<Self>;
    fn div(&self, rhs: &Self) -> Result<Self>;
    fn matmul(&self, rhs: &Self) -> Result<Self>;

    fn neg(&self) -> Self;
    fn scale(&self, k: f64) -> Self;
    fn add_scalar(&self, k: f64) -> Self;

    fn tanh(&self) -> Self;
    fn sigmoid(&self) -> Self;
    /// `log(1 + exp(x))`, evaluated without overflow.
    fn softplus(&self) -> Self;
    fn exp(&self) -> Self;
    fn log(&self) -> Self;
    fn sqrt(&self) -> Self;
    fn square(&self) -> Self;

    /// Sum of all elements as a `1x1` value.
    fn sum(&self) -> Self;
    fn mean(&self) -> Self;
    /// `m x n -> m x 1`
    fn row_sum(&self) -> Self;

    fn concat_cols(parts: &[Self]) -> Result<Self>;
    fn concat_rows(parts: &[Self]) -> Result<Self>;
    fn slice_cols(&self, start: usize, len: usize) -> Result<Self>;
    fn slice_rows(&self, start: usize, len: usize) -> Result<Self>;

    fn item(&self) -> f64 {
        self.value().item()
    }

    fn zeros_like(&self) -> Self {
        let (r, c) = self.shape();
        self.constant(Array::zeros(r, c))
    }

    /// Repeats a single row `n` times.
    fn repeat_rows(&self, n: usize) -> Result<Self> {
        if n == 1 {
            return Ok(self.clone());
        }
        self.constant(Array::ones(n, 1)).matmul(self)
    }
}

impl Tensor for Array {
    fn shape(&self) -> Shape {
        Array::shape(self)
    }

    fn value(&self) -> &Array {
        self
    }

    fn constant(&self, value: Array) -> Self {
        value
    }

    fn add(&self, rhs: &Self) -> Result<Self> {
        Array::add(self, rhs)
    }

    fn sub(&self, rhs: &Self) -> Result<Self> {
        Array::sub(self, rhs)
    }

    fn mul(&self, rhs: &Self) -> Result<Self> {
        Array::mul(self, rhs)
    }

    fn div(&self, rhs: &Self) -> Result<Self> {
        Array::div(self, rhs)
    }

    fn matmul(&self, rhs: &Self) -> Result<Self> {
        Array::matmul(self, rhs)
    }

    fn neg(&self) -> Self {
        self.map(|v| -v)
    }

    fn scale(&self, k: f64) -> Self {
        Array::scale(self, k)
    }

    fn add_scalar(&self, k: f64) -> Self {
        self.map(|v| v + k)
    }

    fn tanh(&self) -> Self {
        self.map(f64::tanh)
    }

    fn sigmoid(&self) -> Self {
        self.map(array::sigmoid)
    }

    fn softplus(&self) -> Self {
        self.map(array::softplus)
    }

    fn exp(&self) -> Self {
        self.map(f64::exp)
    }

    fn log(&self) -> Self {
        self.map(f64::ln)
    }

    fn sqrt(&self) -> Self {
        self.map(f64::sqrt)
    }

    fn square(&self) -> Self {
        self.map(|v| v * v)
    }

    fn sum(&self) -> Self {
        Array::scalar(Array::sum(self))
    }

    fn mean(&self) -> Self {
        Array::scalar(Array::mean(self))
    }

    fn row_sum(&self) -> Self {
        Array::row_sum(self)
    }

    fn concat_cols(parts: &[Self]) -> Result<Self> {
        let refs: Vec<&Array> = parts.iter().collect();
        Array::concat_cols(&refs)
    }

    fn concat_rows(parts: &[Self]) -> Result<Self> {
        let refs: Vec<&Array> = parts.iter().collect();
        Array::concat_rows(&refs)
    }

    fn slice_cols(&self, start: usize, len: usize) -> Result<Self> {
        Array::slice_cols(self, start, len)
    }

    fn slice_rows(&self, start: usize, len: usize) -> Result<Self> {
        Array::slice_rows(self, start, len)
    }
}
