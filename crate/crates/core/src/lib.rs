//! Motion-guided few-shot video object segmentation.
//!
//! The crate is organised bottom-up:
//!
//! - [`types`]: clips, masks, episodes and predictions.
//! - [`synth`]: deterministic shapes-with-motions videos.
//! - [`dataset`]: on-disk dataset layout, category folds, episode sampling.
//! - [`model`]: encoder, proposal generator, decoupled motion-appearance
//!   prototypes, prototype attention and mask decoding.
//! - [`train`]: losses, optimiser, checkpoints and the episodic loop.
//! - [`metrics`]: J, F, J&F, T-Acc and N-Acc.
//! - [`embed`]: silhouette scores and a stochastic neighbour embedding.

pub mod embed;
pub mod error;
pub mod metrics;
pub mod synth;
pub mod types;

#[cfg(feature = "io")]
pub mod dataset;
#[cfg(feature = "io")]
pub mod episode_io;
#[cfg(feature = "model")]
pub mod model;
#[cfg(feature = "model")]
pub mod train;

pub use error::{Error, Result};
