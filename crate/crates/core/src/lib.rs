pub mod dataspace;
pub mod decoding;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod training;
pub mod transformer;

pub use error::{Result, VsdError};
pub use numerics::{ParamId, ParamStore, Tape, Tensor, Var};
