//! Policy / world-model co-improvement on a 2D contact-manipulation suite.

pub mod numerics;
pub mod seed;

/// Element type used for all training.
pub type Real = f64;
pub type Mlp = numerics::MlpParams<Real>;
pub type Mlp32 = numerics::MlpParams<f32>;
pub type Matrix = numerics::Matrix<Real>;
pub type Tape = numerics::Tape<Real>;
pub type Adam = numerics::AdamState<Real>;

pub mod config;
pub mod dataset;
pub mod env;
pub mod evalkit;
pub mod pipeline;
pub mod policy;
pub mod reward;
pub mod worldmodel;
