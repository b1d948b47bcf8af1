//! Sparse Sinkhorn attention.
//!
//! Blocks of a sequence are pooled, scored by a small sorting network and
//! balanced by Sinkhorn iterations into a relaxed block permutation. Keys and
//! values are re-ordered with it so that block-local attention can reach
//! distant context. The crate carries its own reverse-mode tensor engine, the
//! attention variants, a tiny transformer stack and the training harness.

mod error;
pub mod attention;
pub mod harness;
pub mod model;
pub mod rng;
pub mod selftest;
pub mod sinkhorn;
pub mod sortnet;
pub mod tensor;

pub use error::{Error, Result};
