//! Dependent multi-task image captioning with latent de-confounding.
//!
//! The pipeline predicts a bag of categories (BOC) from region features,
//! re-embeds it as a mediator for a top-down attention caption decoder, and
//! conditions decoding on a latent confounder inferred from proxy concepts by
//! variational inference. Training runs a maximum-likelihood phase with
//! Gumbel-softmax bridging between the two tasks, then alternates
//! self-critical policy-gradient updates for the BOC and caption agents. A
//! separate image-text selector ranks candidates sampled under different
//! latent draws.

pub mod autograd;
pub mod boc;
pub mod cli;
pub mod captioner;
pub mod confounder;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod marl;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod selector;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
