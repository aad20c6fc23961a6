//! Reverse-mode differentiation over dense arrays.
//!
//! A [`Tape`] records every primitive as it is applied; [`Tape::backward`]
//! sweeps it once in reverse. [`finite_diff_check`] is the central-difference
//! oracle used to verify all of it.

mod backward;
mod check;
mod tape;

pub use backward::Gradients;
pub use check::{finite_diff_check, relative_error, FiniteDiffReport};
pub use tape::{mac_count, reset_mac_count, Tape, Var, MASK_BIAS};

pub(crate) use tape::{gelu, normalize_row, rope_row, sigmoid};
