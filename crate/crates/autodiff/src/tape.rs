//! Define-by-run reverse-mode differentiation.
//!
//! Every operation on a [`Var`] that depends on at least one tracked input is
//! appended to its [`Tape`]. Constants carry no node id and operations whose
//! inputs are all constant are evaluated without being recorded. Nodes are
//! appended in evaluation order, so the node list is already topologically
//! sorted and the reverse sweep in [`Tape::backward`] visits every node once.

use std::cell::RefCell;
use std::rc::Rc;

use crate::array::{self, Array};
use crate::error::{Error, Result, Shape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    Neg,
    Scale(f64),
    AddScalar,
    Tanh,
    Sigmoid,
    Softplus,
    Exp,
    Log,
    Sqrt,
    Square,
    Sum,
    Mean,
    RowSum,
    ConcatCols,
    ConcatRows,
    SliceCols(usize),
    SliceRows(usize),
}

#[derive(Clone)]
struct Arg {
    id: Option<usize>,
    value: Rc<Array>,
}

struct Node {
    op: Op,
    args: Vec<Arg>,
    value: Rc<Array>,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
    leaves: Vec<usize>,
}

/// Recording context for one forward/backward pass.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a trainable leaf. Gradients are reported in registration order.
    pub fn leaf(&self, value: Array) -> Var {
        let value = Rc::new(value);
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            op: Op::Leaf,
            args: Vec::new(),
            value: value.clone(),
        });
        inner.leaves.push(id);
        Var {
            tape: self.clone(),
            id: Some(id),
            value,
        }
    }

    /// An untracked value living on this tape.
    pub fn constant(&self, value: Array) -> Var {
        Var {
            tape: self.clone(),
            id: None,
            value: Rc::new(value),
        }
    }

    /// Number of recorded nodes, leaves included.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf_count(&self) -> usize {
        self.inner.borrow().leaves.len()
    }

    fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    fn record(&self, op: Op, args: &[&Var], value: Array) -> Var {
        let value = Rc::new(value);
        if args.iter().all(|a| a.id.is_none()) {
            return Var {
                tape: self.clone(),
                id: None,
                value,
            };
        }
        debug_assert!(args.iter().all(|a| a.tape.same_tape(self)), "vars from different tapes");
        let args = args
            .iter()
            .map(|a| Arg {
                id: a.id,
                value: a.value.clone(),
            })
            .collect();
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            op,
            args,
            value: value.clone(),
        });
        Var {
            tape: self.clone(),
            id: Some(id),
            value,
        }
    }

    /// Reverse sweep from a scalar `loss`. Returns one gradient per registered
    /// leaf; leaves that `loss` does not depend on get zeros.
    pub fn backward(&self, loss: &Var) -> Result<Gradients> {
        if loss.shape() != (1, 1) {
            return Err(Error::NonScalarLoss(loss.shape()));
        }
        let inner = self.inner.borrow();
        let mut adjoint: Vec<Option<Array>> = Vec::new();
        if let Some(root) = loss.id {
            adjoint.resize_with(root + 1, || None);
            adjoint[root] = Some(Array::scalar(1.0));
            for id in (0..=root).rev() {
                let Some(g) = adjoint[id].take() else { continue };
                let node = &inner.nodes[id];
                if matches!(node.op, Op::Leaf) {
                    adjoint[id] = Some(g);
                    continue;
                }
                let contributions = local_vjp(node, &g)?;
                for (arg, contrib) in node.args.iter().zip(contributions) {
                    let (Some(aid), Some(c)) = (arg.id, contrib) else { continue };
                    match &mut adjoint[aid] {
                        Some(acc) => acc.add_assign(&c),
                        slot @ None => *slot = Some(c),
                    }
                }
            }
        }
        let grads = inner
            .leaves
            .iter()
            .map(|&leaf| {
                adjoint
                    .get_mut(leaf)
                    .and_then(Option::take)
                    .unwrap_or_else(|| {
                        let (r, c) = inner.nodes[leaf].value.shape();
                        Array::zeros(r, c)
                    })
            })
            .collect();
        Ok(Gradients {
            leaf_ids: inner.leaves.clone(),
            grads,
        })
    }
}

/// Adjoint contributions of one node to each of its arguments.
fn local_vjp(node: &Node, g: &Array) -> Result<Vec<Option<Array>>> {
    let a = &node.args;
    let y = &node.value;
    let want = |i: usize| a[i].id.is_some();
    let x0 = || a[0].value.as_ref();
    Ok(match node.op {
        Op::Leaf => Vec::new(),
        Op::Add => vec![
            want(0).then(|| g.reduce_to(a[0].value.shape())),
            want(1).then(|| g.reduce_to(a[1].value.shape())),
        ],
        Op::Sub => vec![
            want(0).then(|| g.reduce_to(a[0].value.shape())),
            want(1).then(|| g.scale(-1.0).reduce_to(a[1].value.shape())),
        ],
        Op::Mul => vec![
            if want(0) { Some(g.mul(&a[1].value)?.reduce_to(a[0].value.shape())) } else { None },
            if want(1) { Some(g.mul(&a[0].value)?.reduce_to(a[1].value.shape())) } else { None },
        ],
        Op::Div => vec![
            if want(0) { Some(g.div(&a[1].value)?.reduce_to(a[0].value.shape())) } else { None },
            if want(1) {
                let t = g.mul(y)?.div(&a[1].value)?;
                Some(t.scale(-1.0).reduce_to(a[1].value.shape()))
            } else {
                None
            },
        ],
        Op::MatMul => vec![
            if want(0) { Some(g.matmul_t(&a[1].value)?) } else { None },
            if want(1) { Some(a[0].value.t_matmul(g)?) } else { None },
        ],
        Op::Neg => vec![Some(g.scale(-1.0))],
        Op::Scale(k) => vec![Some(g.scale(k))],
        Op::AddScalar => vec![Some(g.clone())],
        Op::Tanh => vec![Some(g.zip_map(y, "tanh", |g, y| g * (1.0 - y * y))?)],
        Op::Sigmoid => vec![Some(g.zip_map(y, "sigmoid", |g, y| g * y * (1.0 - y))?)],
        Op::Softplus => vec![Some(g.zip_map(x0(), "softplus", |g, x| g * array::sigmoid(x))?)],
        Op::Exp => vec![Some(g.mul(y)?)],
        Op::Log => vec![Some(g.div(x0())?)],
        Op::Sqrt => vec![Some(g.zip_map(y, "sqrt", |g, y| 0.5 * g / y)?)],
        Op::Square => vec![Some(g.zip_map(x0(), "square", |g, x| 2.0 * g * x)?)],
        Op::Sum => {
            let (r, c) = x0().shape();
            vec![Some(Array::full(r, c, g.item()))]
        }
        Op::Mean => {
            let (r, c) = x0().shape();
            vec![Some(Array::full(r, c, g.item() / (r * c) as f64))]
        }
        Op::RowSum => {
            let (r, c) = x0().shape();
            vec![Some(Array::from_fn(r, c, |i, _| g.get(i, 0)))]
        }
        Op::ConcatCols => {
            let mut out = Vec::with_capacity(a.len());
            let mut start = 0;
            for arg in a {
                let w = arg.value.cols();
                out.push(if arg.id.is_some() { Some(g.slice_cols(start, w)?) } else { None });
                start += w;
            }
            out
        }
        Op::ConcatRows => {
            let mut out = Vec::with_capacity(a.len());
            let mut start = 0;
            for arg in a {
                let h = arg.value.rows();
                out.push(if arg.id.is_some() { Some(g.slice_rows(start, h)?) } else { None });
                start += h;
            }
            out
        }
        Op::SliceCols(start) => {
            let (r, c) = x0().shape();
            let w = g.cols();
            vec![Some(Array::from_fn(r, c, |i, j| {
                if j >= start && j < start + w {
                    g.get(i, j - start)
                } else {
                    0.0
                }
            }))]
        }
        Op::SliceRows(start) => {
            let (r, c) = x0().shape();
            let h = g.rows();
            vec![Some(Array::from_fn(r, c, |i, j| {
                if i >= start && i < start + h {
                    g.get(i - start, j)
                } else {
                    0.0
                }
            }))]
        }
    })
}

/// Gradients of a loss with respect to every registered leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    leaf_ids: Vec<usize>,
    grads: Vec<Array>,
}

impl Gradients {
    /// Gradient for `leaf`, or `None` if it is not a leaf of this tape.
    pub fn get(&self, leaf: &Var) -> Option<&Array> {
        let id = leaf.id?;
        let pos = self.leaf_ids.iter().position(|&l| l == id)?;
        Some(&self.grads[pos])
    }

    /// Gradients in leaf registration order.
    pub fn as_slice(&self) -> &[Array] {
        &self.grads
    }

    pub fn into_vec(self) -> Vec<Array> {
        self.grads
    }

    /// Euclidean norm over all leaves.
    pub fn global_norm(&self) -> f64 {
        self.grads.iter().map(Array::sum_squares).sum::<f64>().sqrt()
    }
}

/// A value on a [`Tape`].
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: Option<usize>,
    value: Rc<Array>,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("value", &self.value).finish()
    }
}

impl Var {
    pub fn id(&self) -> Option<usize> {
        self.id
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn is_tracked(&self) -> bool {
        self.id.is_some()
    }

    pub fn backward(&self) -> Result<Gradients> {
        self.tape.backward(self)
    }

    fn unary(&self, op: Op, f: impl Fn(&Array) -> Array) -> Var {
        let v = f(&self.value);
        self.tape.record(op, &[self], v)
    }

    fn binary(&self, rhs: &Var, op: Op, f: impl Fn(&Array, &Array) -> Result<Array>) -> Result<Var> {
        let v = f(&self.value, &rhs.value)?;
        Ok(self.tape.record(op, &[self, rhs], v))
    }
}

impl Tensor for Var {
    fn shape(&self) -> Shape {
        self.value.shape()
    }

    fn value(&self) -> &Array {
        &self.value
    }

    fn constant(&self, value: Array) -> Self {
        self.tape.constant(value)
    }

    fn add(&self, rhs: &Self) -> Result<Self> {
        self.binary(rhs, Op::Add, Array::add)
    }

    fn sub(&self, rhs: &Self) -> Result<Self> {
        self.binary(rhs, Op::Sub, Array::sub)
    }

    fn mul(&self, rhs: &Self) -> Result<Self> {
        self.binary(rhs, Op::Mul, Array::mul)
    }

    fn div(&self, rhs: &Self) -> Result<Self> {
        self.binary(rhs, Op::Div, Array::div)
    }

    fn matmul(&self, rhs: &Self) -> Result<Self> {
        self.binary(rhs, Op::MatMul, Array::matmul)
    }

    fn neg(&self) -> Self {
        self.unary(Op::Neg, |a| a.scale(-1.0))
    }

    fn scale(&self, k: f64) -> Self {
        self.unary(Op::Scale(k), |a| a.scale(k))
    }

    fn add_scalar(&self, k: f64) -> Self {
        self.unary(Op::AddScalar, |a| a.map(|v| v + k))
    }

    fn tanh(&self) -> Self {
        self.unary(Op::Tanh, |a| a.map(f64::tanh))
    }

    fn sigmoid(&self) -> Self {
        self.unary(Op::Sigmoid, |a| a.map(array::sigmoid))
    }

    fn softplus(&self) -> Self {
        self.unary(Op::Softplus, |a| a.map(array::softplus))
    }

    fn exp(&self) -> Self {
        self.unary(Op::Exp, |a| a.map(f64::exp))
    }

    fn log(&self) -> Self {
        self.unary(Op::Log, |a| a.map(f64::ln))
    }

    fn sqrt(&self) -> Self {
        self.unary(Op::Sqrt, |a| a.map(f64::sqrt))
    }

    fn square(&self) -> Self {
        self.unary(Op::Square, |a| a.map(|v| v * v))
    }

    fn sum(&self) -> Self {
        self.unary(Op::Sum, |a| Array::scalar(a.sum()))
    }

    fn mean(&self) -> Self {
        self.unary(Op::Mean, |a| Array::scalar(a.mean()))
    }

    fn row_sum(&self) -> Self {
        self.unary(Op::RowSum, Array::row_sum)
    }

    fn concat_cols(parts: &[Self]) -> Result<Self> {
        let first = parts.first().ok_or(Error::Empty("concat_cols"))?;
        let values: Vec<&Array> = parts.iter().map(|p| p.value.as_ref()).collect();
        let v = Array::concat_cols(&values)?;
        let args: Vec<&Var> = parts.iter().collect();
        Ok(first.tape.record(Op::ConcatCols, &args, v))
    }

    fn concat_rows(parts: &[Self]) -> Result<Self> {
        let first = parts.first().ok_or(Error::Empty("concat_rows"))?;
        let values: Vec<&Array> = parts.iter().map(|p| p.value.as_ref()).collect();
        let v = Array::concat_rows(&values)?;
        let args: Vec<&Var> = parts.iter().collect();
        Ok(first.tape.record(Op::ConcatRows, &args, v))
    }

    fn slice_cols(&self, start: usize, len: usize) -> Result<Self> {
        let v = self.value.slice_cols(start, len)?;
        Ok(self.tape.record(Op::SliceCols(start), &[self], v))
    }

    fn slice_rows(&self, start: usize, len: usize) -> Result<Self> {
        let v = self.value.slice_rows(start, len)?;
        Ok(self.tape.record(Op::SliceRows(start), &[self], v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_and_tanh_derivatives() {
        let tape = Tape::new();
        let x = tape.leaf(Array::scalar(3.0));
        let y = x.square();
        assert_eq!(y.item(), 9.0);
        assert_eq!(y.backward().unwrap().get(&x).unwrap().item(), 6.0);

        let tape = Tape::new();
        let x = tape.leaf(Array::scalar(0.0));
        let y = x.tanh();
        assert_eq!(y.item(), 0.0);
        assert_eq!(y.backward().unwrap().get(&x).unwrap().item(), 1.0);
    }

    #[test]
    fn product_rule() {
        let tape = Tape::new();
        let x = tape.leaf(Array::scalar(2.0));
        let y = tape.leaf(Array::scalar(5.0));
        let g = x.mul(&y).unwrap().backward().unwrap();
        assert_eq!(g.get(&x).unwrap().item(), 5.0);
        assert_eq!(g.get(&y).unwrap().item(), 2.0);
    }

    #[test]
    fn constant_loss_gives_zero_gradients() {
        let tape = Tape::new();
        let x = tape.leaf(Array::row(&[1.0, 2.0]));
        let c = tape.constant(Array::scalar(4.0)).square();
        assert!(!c.is_tracked());
        let g = tape.backward(&c).unwrap();
        assert_eq!(g.get(&x).unwrap(), &Array::zeros(1, 2));
    }

    #[test]
    fn unreachable_leaf_gets_zeros() {
        let tape = Tape::new();
        let x = tape.leaf(Array::scalar(1.5));
        let unused = tape.leaf(Array::ones(2, 3));
        let g = x.exp().backward().unwrap();
        assert_eq!(g.get(&unused).unwrap(), &Array::zeros(2, 3));
        assert_eq!(g.as_slice().len(), 2);
    }

    #[test]
    fn gradient_accumulates_over_reuse() {
        let tape = Tape::new();
        let x = tape.leaf(Array::scalar(1.25));
        // x + x + x consumed three times
        let y = x.add(&x).unwrap().add(&x).unwrap();
        assert_eq!(y.backward().unwrap().get(&x).unwrap().item(), 3.0);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(Array::ones(2, 2));
        assert_eq!(x.backward().unwrap_err(), Error::NonScalarLoss((2, 2)));
    }

    #[test]
    fn shape_error_names_operation() {
        let tape = Tape::new();
        let a = tape.leaf(Array::ones(3, 4));
        let b = tape.leaf(Array::ones(3, 2));
        match a.matmul(&b) {
            Err(Error::Shape { op, lhs, rhs }) => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, (3, 4));
                assert_eq!(rhs, (3, 2));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn constant_only_ops_are_not_recorded() {
        let tape = Tape::new();
        let c = tape.constant(Array::ones(2, 2));
        let _ = c.tanh().exp().sum();
        assert_eq!(tape.len(), 0);
        let x = tape.leaf(Array::ones(2, 2));
        let _ = x.mul(&c).unwrap().sum();
        assert_eq!(tape.len(), 3);
    }
}
