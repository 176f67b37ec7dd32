//! Estimators of the KL divergence between autoregressive sequence models.
//!
//! The crate is organised around small tabular language models whose support
//! is bounded by a forced end-of-string horizon. Bounded support makes every
//! expectation a finite sum, so each sampled estimator can be checked against
//! an exact enumeration:
//!
//! - [`model`]: alphabets, sequences, the tabular softmax model and its text format.
//! - [`sampling`]: seeded ancestral sampling and sample batches.
//! - [`oracle`]: brute-force KL, estimator moments, covariances and KL gradients.
//! - [`estimators`]: Monte Carlo, Horvitz–Thompson, control-variate,
//!   Rao–Blackwellized, off-policy and PPO-style KL estimators.
//! - [`gradients`]: score functions and Monte Carlo / Rao–Blackwellized KL gradients.
//! - [`rlhf`]: a toy REINFORCE leave-one-out loop with a KL penalty, Pareto
//!   sweeps and permutation tests.
//! - [`harness`]: experiment configuration, replication statistics, the
//!   identity suite and CSV/JSON emission used by the command-line tool.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod estimators;
pub mod gradients;
pub mod harness;
pub mod model;
pub mod oracle;
pub mod rlhf;
pub mod sampling;

pub use error::{Error, Result};
pub use model::{Alphabet, NextDist, PaddedSeq, Seq, TabularLM};
pub use sampling::SampleBatch;
