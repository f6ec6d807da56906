//! Occupancy-field reconstruction from multi-view binary silhouettes.
//!
//! Sparse anchor points probe a learned occupancy field; camera rays
//! max-pool the anchors whose spherical supports they cross and are compared
//! against silhouette labels. A finite-difference normal-consistency term
//! regularizes the 0.5 level set.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod extract_eval;
pub mod field;
pub mod geom;
pub mod imaging;
pub mod par;
pub mod probing;
pub mod regularizer;
pub mod sampling;
pub mod trainer;

pub use error::{Error, Result};
