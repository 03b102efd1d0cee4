//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records operations as they execute; [`Tape::backward`] replays
//! them in reverse to produce gradients. Leaves created with
//! [`Tape::constant`] are excluded from differentiation, and the exclusion
//! propagates so frozen sub-graphs cost nothing on the backward sweep.

mod conv;
mod tape;
mod tensor;

pub use conv::ConvGeom;
pub use tape::{CustomOp, Gradients, Tape, Unary, Var};
pub use tensor::{gemm, Tensor};
