//! Feature-space diagnostics for models pre-trained on noisy supervision and
//! regularized tuning heads that counter their effect.

pub mod cli;
pub mod harness;
pub mod io;
pub mod linalg;
pub mod loss;
pub mod nn;
pub mod noise;
pub mod sim;
pub mod spectrum;
