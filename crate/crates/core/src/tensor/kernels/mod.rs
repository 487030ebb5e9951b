//! Slice-level forward/backward kernels. The tape wires these together; they
//! know nothing about graphs.

pub mod bilinear;
pub mod conv;
pub mod elementwise;
pub mod gemm;
pub mod norm;
