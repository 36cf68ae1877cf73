//! Continuous-time discrete-space diffusion for top-K recommendation.
//!
//! User histories are fixed-length item sequences. A forward continuous-time
//! Markov chain with a single absorbing `MASK` state corrupts them under a
//! popularity-aware cumulative noise schedule; a Transformer denoiser is
//! trained as a consistency function over that chain and then used to
//! generate sequences whose item embeddings rank the catalog.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, configuration
//! and the command line live in the companion `cdrec` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autograd;
pub mod collab;
pub mod corpus;
pub mod denoiser;
mod error;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};

pub use collab::{EmbeddingBundle, EmbeddingSource, MfConfig};
pub use corpus::{Event, InteractionLog, PopularityTable, SplitBundle, Token, UserSequence};
pub use denoiser::{Denoiser, DenoiserConfig, PositionDistribution};
pub use metrics::MetricsReport;
pub use sampler::{Recommendation, SamplingPlan};
pub use schedule::{DiffusionState, KernelMode, NoiseSchedule};
pub use training::{LossBreakdown, PairMethod, TrainConfig};
