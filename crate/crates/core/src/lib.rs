//! Model-targeted data poisoning toolkit.
//!
//! Computes the poisoning-budget threshold below which a target parameter
//! cannot be induced by retraining on clean plus poisoned data, constructs
//! poisoned sets with gradient canceling (and gradient matching / Frank-Wolfe
//! variants), and evaluates them through retraining and two defenses.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod mathcore;
pub mod data;
pub mod models;
pub mod reachability;
pub mod attack;
pub mod cli;
pub mod defense;
pub mod harness;
pub mod targetgen;
pub mod serde_ext;

pub use error::{Error, Result};
