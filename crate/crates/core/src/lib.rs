// NaN must fail these range checks, so `!(x > y)` is intended.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod models;
pub mod numerics;
pub mod selftest;
pub mod strategies;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, ErrorKind, Result};
