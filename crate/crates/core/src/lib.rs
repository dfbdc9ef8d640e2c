//! Coarse-to-fine recursive speech separation for mixtures with an unknown
//! number of speakers.
//!
//! Stage 1 ([`separator`]) peels one speaker off per iteration and hands the
//! residual back to itself; a classifier ([`stop`]) decides when only one
//! speaker is left. Stage 2 ([`extractor`]) re-extracts every speaker from
//! the original mixture, conditioned on the stage-1 estimate as a cue.

pub mod audio;
pub mod cache;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod extractor;
pub mod loss;
pub mod metrics;
pub mod mixsim;
pub mod nn;
pub mod optim;
pub mod parallel;
pub mod pipeline;
pub mod separator;
pub mod stage1;
pub mod stop;
pub mod toy;
pub mod train;

pub use error::{Error, Result};
