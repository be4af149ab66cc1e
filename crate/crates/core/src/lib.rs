#![cfg_attr(not(any(feature = "std", test)), no_std)]
// Negated float comparisons are how NaN gets rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

extern crate alloc;

pub mod dag;
pub mod error;
pub mod factor_graph;
pub mod gen;
pub mod geometry;
pub mod lift;
pub mod math;
pub mod posterior;
pub mod spn;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
