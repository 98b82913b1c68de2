//! Small dense-array differentiation toolkit.
//!
//! * [`Array`]: row-major `f64` matrices (rank ≤ 2).
//! * [`Tensor`]: the primitive op set, implemented by [`Array`], [`Var`] and [`Dual`].
//! * [`Tape`]/[`Var`]: reverse mode, rebuilt for every evaluation.
//! * [`Dual`]/[`time_jvp`]: forward mode in one scalar direction.
//! * [`nn`]: parameter store, tanh MLPs and a gated recurrent cell.
//! * [`optim::Adam`].

pub mod array;
pub mod dual;
pub mod error;
pub mod nn;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use array::Array;
pub use dual::{time_jvp, Dual};
pub use error::{Error, Result, Shape};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
