//! Unsupervised audio-visual speech enhancement and separation.
//!
//! A Wasserstein autoencoder is trained on clean speech power spectra paired
//! with lip-motion and facial-identity features. At test time a Monte Carlo
//! EM loop samples the latent speech representation of each visually
//! identified speaker, fits a nonnegative noise model, and recovers each
//! speaker with a Wiener filter.

pub mod ablation;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod dsp;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod seed;
pub mod training;

pub use error::{Error, Result};

#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/signals.md")]
    struct Signals;
    #[doc = include_str!("../../../book/src/model.md")]
    struct Model;
    #[doc = include_str!("../../../book/src/training.md")]
    struct Training;
    #[doc = include_str!("../../../book/src/inference.md")]
    struct Inference;
    #[doc = include_str!("../../../book/src/evaluation.md")]
    struct Evaluation;
    #[doc = include_str!("../../../book/src/formats.md")]
    struct Formats;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
}
