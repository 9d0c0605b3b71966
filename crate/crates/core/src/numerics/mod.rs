//! Tensor algebra, reverse-mode differentiation, Adam and the warmup schedule.

mod adam;
pub mod gradcheck;
mod schedule;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use gradcheck::{gradient_check, gradient_check_many};
pub use schedule::{lr_at, LrSchedule};
pub use tape::{gelu_scalar, Gradients, Tape, Var};
pub use tensor::Tensor;
