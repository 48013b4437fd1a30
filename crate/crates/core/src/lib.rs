//! Language-model alignment by conditional fine-tuning on textual feedback.
//!
//! The crate covers the whole desk-scale pipeline: a synthetic corpus and
//! closed vocabulary ([`corpus`], [`vocab`]), a small transformer with
//! hand-written gradients ([`model`]), feedback providers ([`feedback`]), the
//! sample pool ([`pool`]), the feedback-conditioned trainer ([`trainer`]), the
//! iterative sample/annotate/train loop ([`alt_loop`]) and the evaluation
//! metrics ([`eval`]). [`pipeline`] wires them into runnable experiments.

pub mod alt_loop;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod feedback;
pub mod model;
pub mod pipeline;
pub mod pool;
pub mod rng;
pub mod trainer;
pub mod vocab;

pub use error::{AltError, Result};
