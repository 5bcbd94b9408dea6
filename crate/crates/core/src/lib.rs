//! Martingale laboratory: finite filtered probability spaces, Banach-valued
//! processes with labelled jumps, the Gundy and canonical decompositions, and
//! Monte Carlo or exact verification of the weak-type and `L^p` bounds that
//! hold for them.
//!
//! Most numeric guards are written as `!(x >= y)` so that a NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod decompose;
pub mod finprob;
pub mod generators;
pub mod process;
pub mod scenario;
pub mod space;
pub mod stochcalc;
pub mod verify;
