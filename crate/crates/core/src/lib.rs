//! lexflow fits a latent logistic-binomial vector-autoregressive state-space
//! model to panel count data (word x region x week), induces a directed
//! region-to-region influence network with Monte Carlo confidence intervals
//! under FDR control, and runs the downstream homophily and asymmetry
//! analyses. A built-in generative simulator provides the verification
//! oracle.

pub mod analysis;
pub mod corpus;
pub mod emission;
pub mod error;
pub mod geo;
pub mod kalman;
pub mod network;
pub mod panel;
pub mod pipeline;
pub mod rng;
pub mod smc;
pub mod synth;

pub use error::{Error, Result};
