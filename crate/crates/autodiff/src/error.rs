use thiserror::Error;

/// Row/column shape of a rank-2 array.
pub type Shape = (usize, usize);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("shape mismatch in `{op}`: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },
    #[error("`{op}` out of bounds: range {start}..{end} on axis of length {len}")]
    Bounds {
        op: &'static str,
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Shape),
    #[error("buffer of length {len} cannot be viewed as {rows}x{cols}")]
    Buffer { len: usize, rows: usize, cols: usize },
    #[error("`{0}` needs at least one operand")]
    Empty(&'static str),
}

pub type Result<T> = std::result::Result<T, Error>;
