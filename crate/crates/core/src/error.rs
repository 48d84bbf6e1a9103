use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("knot times must be strictly increasing (violated at index {index})")]
    Ordering { index: usize },
    #[error("t = {t} lies outside the path domain [{start}, {end}]")]
    Domain { t: f64, start: f64, end: f64 },
    #[error("integration diverged at step {step}")]
    Divergence { step: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
