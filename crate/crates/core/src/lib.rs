//! Camera-based 3D semantic scene completion.
//!
//! The pipeline lifts image features into a pseudo semantic dimension,
//! clusters global semantics to re-weight them ([`hsd`]), projects them into
//! a voxel grid ([`geometry`]), and predicts per-voxel classes with a
//! detect-and-refine head ([`hor`]). Everything differentiable runs on the
//! small reverse-mode engine in [`diffcore`].

// `!(x > 0.0)` is used on purpose so NaN fails the check; index loops
// mirror the math they implement.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cli;
pub mod dataio;
pub mod diffcore;
pub mod error;
pub mod geometry;
pub mod hor;
pub mod hsd;
pub mod metrics;
pub mod pipeline;

pub use error::{Error, Result};
