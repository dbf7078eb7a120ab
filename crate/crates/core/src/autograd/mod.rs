//! Reverse-mode automatic differentiation and its finite-difference harness.

mod gradcheck;
mod tape;

pub use gradcheck::{grad_check, GradCheckReport, RELATIVE_FLOOR};
pub use tape::{Gradients, Tape, Var};
