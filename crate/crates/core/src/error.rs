use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("shape error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("index {index} out of range for {what} (bound {bound})")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("integer overflow while computing {0}")]
    Overflow(&'static str),

    #[error("non-finite gradient for parameter `{param}` at step {step}")]
    NonFiniteGradient { param: String, step: usize },

    #[error("training diverged at step {step}: loss {loss} stayed above 10x the initial loss {initial} for {window} steps")]
    Diverged {
        step: usize,
        loss: f64,
        initial: f64,
        window: usize,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
