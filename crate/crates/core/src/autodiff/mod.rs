//! Reverse-mode differentiation engine and its finite-difference oracle.

mod gradcheck;
mod tape;

pub use gradcheck::{finite_diff_check, EntryReport, GradCheckReport};
pub use tape::{Activation, BatchStats, BinaryOp, Tape, Var};
