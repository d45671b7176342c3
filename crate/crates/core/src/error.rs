use alloc::string::String;
use core::fmt;

use crate::tensor::Shape;

pub type Result<T> = core::result::Result<T, Error>;

/// Errors raised by tensor ops, models and the data generator.
#[derive(Clone, Debug, PartialEq)]
pub enum Error {
    /// Two operands do not satisfy the op's shape rule.
    ShapeMismatch {
        op: &'static str,
        left: Shape,
        right: Shape,
    },
    /// A tensor had the wrong rank or extents for the op.
    BadShape {
        op: &'static str,
        expected: String,
        got: Shape,
    },
    /// `data.len()` disagrees with the product of the shape.
    DataLength { expected: usize, got: usize },
    /// More than five axes.
    RankTooLarge(usize),
    /// Convolution kernels must have odd spatial size.
    EvenKernel(usize),
    /// `backward` was called on a tensor with more than one element.
    NonScalarLoss(Shape),
    /// A configuration value is out of range or inconsistent.
    InvalidConfig(String),
    /// An index (class, activity, frame window) is out of range.
    OutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },
    /// A tensor held NaN or infinity.
    NonFinite(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: incompatible shapes {left} and {right}")
            }
            Error::BadShape { op, expected, got } => {
                write!(f, "{op}: expected {expected}, got shape {got}")
            }
            Error::DataLength { expected, got } => {
                write!(f, "data length {got} does not match shape volume {expected}")
            }
            Error::RankTooLarge(r) => write!(f, "rank {r} exceeds the maximum of 5"),
            Error::EvenKernel(k) => write!(f, "kernel size {k} is even; same padding needs odd"),
            Error::NonScalarLoss(s) => write!(f, "backward needs a scalar loss, got shape {s}"),
            Error::InvalidConfig(msg) => write!(f, "invalid configuration: {msg}"),
            Error::OutOfRange { what, index, bound } => {
                write!(f, "{what} {index} out of range (must be < {bound})")
            }
            Error::NonFinite(name) => write!(f, "non-finite value in {name}"),
        }
    }
}

impl core::error::Error for Error {}
