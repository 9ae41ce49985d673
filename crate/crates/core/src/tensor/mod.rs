//! Differentiable dense-array numerics: arrays, parameters, the gradient
//! tape and the layers built on it.

mod array;
mod conv;
pub mod gradcheck;
pub mod nn;
mod ops;
mod param;
mod tape;

pub use array::{DenseArray, Real};
pub use ops::{GELU_CUBIC, GELU_SQRT_2_OVER_PI};
pub use param::{Init, ParamId, ParamStore, Parameter, INIT_STD};
pub use tape::{CustomOp, Gradients, Tape, Var};
