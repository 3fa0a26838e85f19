//! Synthetic cryo-EM particle simulation, ab initio heterogeneous reconstruction
//! with amortized pose/conformation inference, and quantitative evaluation.
//!
//! The crate is organized around the stages of the pipeline:
//!
//! * [`geometry`] — rotations (S²×S² parameterization), poses, frequency lattices
//! * [`xform`] — centered discrete Hartley transforms and slice interpolation
//! * [`optics`] — CTF evaluation, Hartley-domain translation, noise model
//! * [`sim`] — analytic phantoms, synthetic dataset generation, on-disk formats
//! * [`ad`] — the reverse-mode tape every trainable component is built on
//! * [`nn`] — dense/conv/batch-norm layers
//! * [`encoder`] — the discriminative model mapping images to (z, rotation, shift)
//! * [`field`] — the coordinate-network volume representation in Hartley space
//! * [`train`] — forward operator, symmetric loss, optimizer loop, checkpoints
//! * [`eval`] — pose alignment, PCA/confusion/Spearman, FSC, pixel window
//! * [`report`] — evaluation driver: reports, plots, volume alignment, traversal

pub mod ad;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod field;
pub mod geometry;
pub mod nn;
pub mod optics;
pub mod report;
pub mod sim;
pub mod train;
pub mod xform;

pub use error::{Error, Result};
