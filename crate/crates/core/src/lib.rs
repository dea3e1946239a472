//! Distilling a compact student network from a frozen teacher with an
//! unlabeled, distribution-shifted pool of instances.
//!
//! The pieces, roughly in pipeline order:
//!
//! - [`numerics`]: dense arrays, stable softmax/sigmoid, seeded RNG.
//! - [`datagen`], [`idx`], [`datafile`]: synthetic shift benchmark, MNIST IDX
//!   loading, and the binary dataset layout.
//! - [`model`]: MLP extractor, shared classifier, projection head.
//! - [`selection`]: per-epoch confidence-based instance selection.
//! - [`alignment`]: weighted feature alignment.
//! - [`mixdist`]: statistics-mixing perturbation and the cross-view
//!   contrastive loss.
//! - [`trainer`]: training loops, ablations, the KD baseline, evaluation.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Index loops read more naturally in the matrix kernels.
#![allow(clippy::needless_range_loop)]

pub mod alignment;
pub mod checkpoint;
pub mod datafile;
pub mod datagen;
pub mod error;
pub mod gradcheck;
pub mod idx;
pub mod mixdist;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod optim;
pub mod par;
pub mod selection;
pub mod trainer;

pub use error::{Error, Result};
