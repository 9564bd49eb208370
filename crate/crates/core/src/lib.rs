//! Bayesian refinement of paired embedding tables.
//!
//! Two pre-trained tables describe the same entities: a knowledge-graph table
//! `w` that acts as the prior and a behavior-graph table `z` that acts as the
//! observation. A small variational generative model links them through a
//! per-entity correction `delta` and a projection `f`, and the trained model
//! emits refined versions of both tables.
//!
//! Modules:
//! - [`diffcore`]: two-layer perceptrons with analytic gradients and Adam.
//! - [`bemmodel`]: edge functions, batch priors, posterior inference, the
//!   reconstruction and KL terms and the per-pair ELBO.
//! - [`trainer`]: the batch training loop and the refinement pass.
//! - [`dataio`]: embedding/label text formats and the binary model file.
//! - [`evalkit`]: classification, similarity histograms, cluster ratio,
//!   hit recall and random projections.
//! - [`synthgen`]: synthetic data drawn from the generative model itself.

pub mod bemmodel;
pub mod dataio;
pub mod diffcore;
pub mod error;
pub mod evalkit;
pub mod rng;
pub mod synthgen;
pub mod trainer;

pub use bemmodel::{BatchPrior, EdgeFunction, LatentSample, PosteriorStats};
pub use dataio::{EmbeddingTable, LabelTable};
pub use diffcore::{AdamState, DiffNet};
pub use error::{BemError, Result};
pub use trainer::{Mode, TrainConfig, TrainReport};
