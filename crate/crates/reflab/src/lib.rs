//! Synthetic laboratory for word-order sensitivity in visual referring
//! expression grounding: scene and expression generation, simulated
//! annotation pipelines with Easy/Hard/Adversarial splits, small
//! differentiable grounding models, and the training regimes and reports
//! needed to study them.

pub mod diagnostics;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod model;
pub mod rng;
pub mod training;
pub mod vocab;
pub mod worldgen;

pub use error::{Error, Result};
