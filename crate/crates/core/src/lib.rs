//! Numeric core for deep metric learning experiments.
//!
//! The crate covers four areas that share the [`EmbeddingSet`] data model:
//!
//! * retrieval, clustering and embedding-structure metrics ([`metrics`]),
//! * Frechet distance between Gaussian summaries of embedding sets ([`fid`])
//!   and the class-swapping split builder that uses it ([`splits`]),
//! * pair-based metric-learning objectives and multiscale self-distillation,
//!   all with analytic gradients ([`losses`]),
//! * small MLP embedding heads, Adam, a deterministic training loop and
//!   few-shot adaptation episodes ([`nn`], [`optim`], [`trainer`]).
//!
//! Everything here is `no_std` + `alloc`; file formats and the command line
//! live in the companion `dml-tools` crate.

#![no_std]
#![warn(missing_debug_implementations)]
// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod embed;
pub mod error;
pub mod fid;
pub mod gradcheck;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod splits;
pub mod trainer;

pub use embed::{ClassIndex, EmbeddingSet, SynthSpec};
pub use error::{Error, Result};
pub use linalg::Matrix;
