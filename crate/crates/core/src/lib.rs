//! Flow-matching action-chunk policies fine-tuned online with a
//! critic-weighted, clipped behavior-cloning objective.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod critic;
pub mod envs;
pub mod error;
pub mod flow;
pub mod numerics;
pub mod poco;
pub mod replay;
pub mod trainer;

pub use error::{Error, Result};
