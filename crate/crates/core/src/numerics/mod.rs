//! Deterministic numeric substrate.

pub mod fp16;
pub mod ops;
pub mod reduce;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use fp16::quantize_fp16;
pub use reduce::{deterministic_sum, grad_check, grad_check_with, GradCheckReport, Stencil};
pub use rng::RngStream;
pub use tape::{Gradients, Op, Tape, Var};
pub use tensor::{DType, Tensor};
