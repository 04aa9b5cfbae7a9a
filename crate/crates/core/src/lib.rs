//! Sequence-aware matrix factorization (SeqMF) for next-app prediction.
//!
//! The crate covers the whole experimental pipeline:
//!
//! * [`ingest`]: parsing, deduplication, sessionization, splitting, cycle
//!   rebalancing and a synthetic usage generator.
//! * [`seqmf`]: the model itself (transition statistics, confidence weights,
//!   relevance scores, ALS user update, item gradient, loss).
//! * [`privacy`]: local-DP gradient mechanisms (QHarmony, k-Harmony, Laplace,
//!   passthrough).
//! * [`federation`]: a single-process simulator of the hybrid federated
//!   optimization.
//! * [`baselines`]: SR, SR-od, MRU, MFU and Random predictors.
//! * [`eval`]: restricted top-n evaluation with iterative revealing and the
//!   static/dynamic experiment harnesses.
//! * [`experiment`]: config-driven experiment runner used by the CLI.

// `!(x > 0.0)` is how range checks also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod federation;
pub mod ingest;
mod linalg;
pub mod privacy;
pub mod seqmf;

pub use error::{Error, Result};
