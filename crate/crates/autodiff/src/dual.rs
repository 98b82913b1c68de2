//! Forward-mode differentiation along a single scalar direction.
//!
//! A [`Dual`] pairs a primal value with its derivative along one direction
//! (time, in the model code). It is generic over the underlying [`Tensor`],
//! so `Dual<Array>` gives plain tangents and `Dual<Var>` records both primal
//! and tangent on a tape, making the tangent itself differentiable with
//! respect to the tape's leaves.

use crate::array::Array;
use crate::error::{Result, Shape};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Dual<T> {
    primal: T,
    /// `None` is an exact zero tangent.
    tangent: Option<T>,
}

impl<T: Tensor> Dual<T> {
    pub fn new(primal: T, tangent: T) -> Result<Self> {
        if primal.shape() != tangent.shape() {
            return Err(crate::Error::Shape {
                op: "dual",
                lhs: primal.shape(),
                rhs: tangent.shape(),
            });
        }
        Ok(Self {
            primal,
            tangent: Some(tangent),
        })
    }

    /// A value that does not vary along the direction.
    pub fn constant_of(primal: T) -> Self {
        Self { primal, tangent: None }
    }

    /// Seeds the direction: tangent of ones.
    pub fn variable(primal: T) -> Self {
        let (r, c) = primal.shape();
        let tangent = primal.constant(Array::ones(r, c));
        Self {
            primal,
            tangent: Some(tangent),
        }
    }

    pub fn primal(&self) -> &T {
        &self.primal
    }

    /// The tangent, materialising zeros for constants.
    pub fn tangent(&self) -> T {
        self.tangent.clone().unwrap_or_else(|| self.primal.zeros_like())
    }

    pub fn has_tangent(&self) -> bool {
        self.tangent.is_some()
    }

    pub fn into_parts(self) -> (T, T) {
        let t = self.tangent();
        (self.primal, t)
    }
}

/// Evaluates `f` at `t` together with `df/dt` in a single pass.
pub fn time_jvp<T, F>(t: &T, f: F) -> Result<Dual<T>>
where
    T: Tensor,
    F: FnOnce(&Dual<T>) -> Result<Dual<T>>,
{
    f(&Dual::variable(t.clone()))
}

fn add_opt<T: Tensor>(a: Option<T>, b: Option<T>) -> Result<Option<T>> {
    Ok(match (a, b) {
        (None, None) => None,
        (Some(a), None) => Some(a),
        (None, Some(b)) => Some(b),
        (Some(a), Some(b)) => Some(a.add(&b)?),
    })
}

/// Broadcast a tangent contribution up to the output shape when an operand
/// was broadcast in the primal computation.
fn fit<T: Tensor>(t: T, shape: Shape) -> Result<T> {
    if t.shape() == shape {
        Ok(t)
    } else {
        t.add(&t.constant(Array::zeros(shape.0, shape.1)))
    }
}

impl<T: Tensor> Dual<T> {
    fn map_tangent(&self, primal: T, f: impl FnOnce(&T) -> Result<T>) -> Result<Self> {
        let tangent = match &self.tangent {
            Some(t) => Some(f(t)?),
            None => None,
        };
        Ok(Self { primal, tangent })
    }
}

impl<T: Tensor> Tensor for Dual<T> {
    fn shape(&self) -> Shape {
        self.primal.shape()
    }

    fn value(&self) -> &Array {
        self.primal.value()
    }

    fn constant(&self, value: Array) -> Self {
        Self::constant_of(self.primal.constant(value))
    }

    fn add(&self, rhs: &Self) -> Result<Self> {
        let primal = self.primal.add(&rhs.primal)?;
        let shape = primal.shape();
        let tangent = add_opt(self.tangent.clone(), rhs.tangent.clone())?
            .map(|t| fit(t, shape))
            .transpose()?;
        Ok(Self { primal, tangent })
    }

    fn sub(&self, rhs: &Self) -> Result<Self> {
        let primal = self.primal.sub(&rhs.primal)?;
        let shape = primal.shape();
        let tangent = add_opt(self.tangent.clone(), rhs.tangent.as_ref().map(|t| t.neg()))?
            .map(|t| fit(t, shape))
            .transpose()?;
        Ok(Self { primal, tangent })
    }

    fn mul(&self, rhs: &Self) -> Result<Self> {
        let primal = self.primal.mul(&rhs.primal)?;
        let shape = primal.shape();
        let left = self.tangent.as_ref().map(|t| t.mul(&rhs.primal)).transpose()?;
        let right = rhs.tangent.as_ref().map(|t| self.primal.mul(t)).transpose()?;
        let tangent = add_opt(left, right)?.map(|t| fit(t, shape)).transpose()?;
        Ok(Self { primal, tangent })
    }

    fn div(&self, rhs: &Self) -> Result<Self> {
        let primal = self.primal.div(&rhs.primal)?;
        let shape = primal.shape();
        let left = self.tangent.as_ref().map(|t| t.div(&rhs.primal)).transpose()?;
        // d(a/b) = da/b - (a/b) db/b
        let right = match &rhs.tangent {
            Some(t) => Some(primal.mul(t)?.div(&rhs.primal)?.neg()),
            None => None,
        };
        let tangent = add_opt(left, right)?.map(|t| fit(t, shape)).transpose()?;
        Ok(Self { primal, tangent })
    }

    fn matmul(&self, rhs: &Self) -> Result<Self> {
        let primal = self.primal.matmul(&rhs.primal)?;
        let left = self.tangent.as_ref().map(|t| t.matmul(&rhs.primal)).transpose()?;
        let right = rhs.tangent.as_ref().map(|t| self.primal.matmul(t)).transpose()?;
        let tangent = add_opt(left, right)?;
        Ok(Self { primal, tangent })
    }

    fn neg(&self) -> Self {
        Self {
            primal: self.primal.neg(),
            tangent: self.tangent.as_ref().map(Tensor::neg),
        }
    }

    fn scale(&self, k: f64) -> Self {
        Self {
            primal: self.primal.scale(k),
            tangent: self.tangent.as_ref().map(|t| t.scale(k)),
        }
    }

    fn add_scalar(&self, k: f64) -> Self {
        Self {
            primal: self.primal.add_scalar(k),
            tangent: self.tangent.clone(),
        }
    }

    fn tanh(&self) -> Self {
        let y = self.primal.tanh();
        // (1 - y^2) t
        self.map_tangent(y.clone(), |t| y.square().neg().add_scalar(1.0).mul(t))
            .expect("same-shape tangent")
    }

    fn sigmoid(&self) -> Self {
        let y = self.primal.sigmoid();
        self.map_tangent(y.clone(), |t| y.mul(&y.neg().add_scalar(1.0))?.mul(t))
            .expect("same-shape tangent")
    }

    fn softplus(&self) -> Self {
        let y = self.primal.softplus();
        let x = &self.primal;
        self.map_tangent(y, |t| x.sigmoid().mul(t)).expect("same-shape tangent")
    }

    fn exp(&self) -> Self {
        let y = self.primal.exp();
        self.map_tangent(y.clone(), |t| y.mul(t)).expect("same-shape tangent")
    }

    fn log(&self) -> Self {
        let x = &self.primal;
        self.map_tangent(x.log(), |t| t.div(x)).expect("same-shape tangent")
    }

    fn sqrt(&self) -> Self {
        let y = self.primal.sqrt();
        self.map_tangent(y.clone(), |t| t.div(&y.scale(2.0))).expect("same-shape tangent")
    }

    fn square(&self) -> Self {
        let x = &self.primal;
        self.map_tangent(x.square(), |t| x.scale(2.0).mul(t)).expect("same-shape tangent")
    }

    fn sum(&self) -> Self {
        Self {
            primal: self.primal.sum(),
            tangent: self.tangent.as_ref().map(Tensor::sum),
        }
    }

    fn mean(&self) -> Self {
        Self {
            primal: self.primal.mean(),
            tangent: self.tangent.as_ref().map(Tensor::mean),
        }
    }

    fn row_sum(&self) -> Self {
        Self {
            primal: self.primal.row_sum(),
            tangent: self.tangent.as_ref().map(Tensor::row_sum),
        }
    }

    fn concat_cols(parts: &[Self]) -> Result<Self> {
        let primals: Vec<T> = parts.iter().map(|p| p.primal.clone()).collect();
        let primal = T::concat_cols(&primals)?;
        let tangent = if parts.iter().any(Dual::has_tangent) {
            let ts: Vec<T> = parts.iter().map(Dual::tangent).collect();
            Some(T::concat_cols(&ts)?)
        } else {
            None
        };
        Ok(Self { primal, tangent })
    }

    fn concat_rows(parts: &[Self]) -> Result<Self> {
        let primals: Vec<T> = parts.iter().map(|p| p.primal.clone()).collect();
        let primal = T::concat_rows(&primals)?;
        let tangent = if parts.iter().any(Dual::has_tangent) {
            let ts: Vec<T> = parts.iter().map(Dual::tangent).collect();
            Some(T::concat_rows(&ts)?)
        } else {
            None
        };
        Ok(Self { primal, tangent })
    }

    fn slice_cols(&self, start: usize, len: usize) -> Result<Self> {
        let primal = self.primal.slice_cols(start, len)?;
        self.map_tangent(primal, |t| t.slice_cols(start, len))
    }

    fn slice_rows(&self, start: usize, len: usize) -> Result<Self> {
        let primal = self.primal.slice_rows(start, len)?;
        self.map_tangent(primal, |t| t.slice_rows(start, len))
    }
}
