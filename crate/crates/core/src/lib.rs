//! EAT-block vision transformer built on a small reverse-mode tensor engine.

// `!(x > 0.0)` is used on purpose so NaN fails validation; index loops in
// the kernels and oracles mirror the formulas they implement.
#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::too_many_arguments
)]

pub mod data;
pub mod error;
pub mod io;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use model::{Model, ModelSpec, ParamReport, StageSpec};
pub use tensor::{DType, Real, Tape, Tensor, Var};
