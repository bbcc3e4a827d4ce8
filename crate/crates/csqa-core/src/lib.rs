//! Desk-scale fine-grained classification with quality-probing supervision.
//!
//! The crate is a small stack: a tape-based f64 autodiff substrate
//! ([`tensor`]); a shared-parameter convolutional backbone ([`backbone`]);
//! quality-probing classifiers ([`qp`]); multi-level semantic evaluation
//! ([`mlsqe`]); the part navigator ([`navigator`]); masked multi-part
//! cross-attention ([`mpmsca`]); the assembled network ([`model`]); and the
//! training/evaluation harness ([`harness`]) behind the `csqa` CLI.

pub mod backbone;
pub mod error;
pub mod harness;
pub mod mlsqe;
pub mod model;
pub mod mpmsca;
pub mod navigator;
pub mod qp;
pub mod tensor;

pub use error::{CsqaError, Result};

/// Build identification reported by the CLI and the C ABI.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
