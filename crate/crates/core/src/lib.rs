//! Absorbing-state discrete diffusion and an autoregressive baseline for
//! language modelling, with the evaluation protocol that compares them.

pub mod ar;
pub mod checkpoint;
pub mod corpus;
pub mod denoiser;
pub mod diffusion;
pub mod harness;
pub mod metrics;
pub mod nelbo;
pub mod nn;
pub mod oracle;
pub mod rng;
pub mod tokenizer;
pub mod train;
