//! Few-shot classification with convex base learners fit inside the
//! training loop.
//!
//! The pipeline: an embedding network maps raw features to a learned space
//! ([`embedding`]); per episode, a small convex classifier (multiclass SVM,
//! ridge regression, or nearest class mean) is fit on the embedded support
//! set ([`learners`]); query-set softmax loss then backpropagates through
//! the classifier's optimality conditions into the embedding ([`meta`]).
//! Episode sampling and dataset plumbing live in [`episodes`], independent
//! reference solvers for testing in [`reference`].

pub mod embedding;
pub mod episodes;
mod error;
pub mod learners;
pub mod meta;
pub mod reference;

pub use error::FewshotError;
