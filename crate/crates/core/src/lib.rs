//! Online few-shot class-incremental learning.
//!
//! A trainable backbone and projection layer (FCR) map inputs to prototype
//! features. New classes are learned in a single forward pass by appending an
//! integer-quantized class prototype to an explicit memory; inference picks the
//! prototype with the highest cosine similarity. Offline pretraining and
//! metalearning shape the feature space before deployment.

// Negated float comparisons are how NaN gets rejected in validation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod backbone;
pub mod cli;
pub mod config;
pub mod data_io;
pub mod error;
pub mod explicit_memory;
pub mod harness;
pub mod losses;
pub mod numerics;
pub mod offline_training;
pub mod online_learner;

mod io_util;

pub use error::{Error, Result};
pub use io_util::fingerprint;
