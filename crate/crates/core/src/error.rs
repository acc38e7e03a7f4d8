use alloc::string::String;
use core::fmt;

use crate::tensor::Shape;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A shape with a zero dimension, or a data buffer of the wrong length.
    InvalidShape(String),
    /// Two operands (or an operand and a parameter) disagree on shape.
    ShapeMismatch {
        op: &'static str,
        expected: Shape,
        found: Shape,
    },
    /// A channel count is not divisible by the requested split or group count.
    NotDivisible {
        what: &'static str,
        value: usize,
        divisor: usize,
    },
    InvalidRange {
        low: f64,
        high: f64,
    },
    InvalidConfig(String),
    UnknownModel(String),
    InputTooSmall {
        min: usize,
        found: usize,
    },
    InvalidLabel {
        label: usize,
        classes: usize,
    },
    /// Loss became NaN or infinite during training.
    Diverged {
        epoch: usize,
        step: usize,
    },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidShape(msg) => write!(f, "invalid shape: {msg}"),
            Error::ShapeMismatch { op, expected, found } => write!(f, "{op}: expected shape {expected}, found {found}"),
            Error::NotDivisible { what, value, divisor } => write!(f, "{what} = {value} is not divisible by {divisor}"),
            Error::InvalidRange { low, high } => {
                write!(f, "invalid range: low ({low}) must be below high ({high})")
            }
            Error::InvalidConfig(msg) => write!(f, "invalid configuration: {msg}"),
            Error::UnknownModel(name) => write!(f, "unknown model `{name}`"),
            Error::InputTooSmall { min, found } => {
                write!(f, "input spatial size {found} is below the minimum of {min}")
            }
            Error::InvalidLabel { label, classes } => {
                write!(f, "label {label} out of range for {classes} classes")
            }
            Error::Diverged { epoch, step } => {
                write!(f, "loss diverged (non-finite) at epoch {epoch}, step {step}")
            }
        }
    }
}

impl core::error::Error for Error {}
