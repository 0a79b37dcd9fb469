//! Dense MLPs, a reverse-mode gradient tape, and Adam.
//!
//! Everything here is generic over [`Scalar`] so the same code runs in
//! `f32` or `f64`. Training elsewhere in the crate uses `f64`
//! (see the aliases at the crate root).

mod adam;
pub mod check;
mod checkpoint;
mod matrix;
mod mlp;
mod scalar;
mod tape;

pub use adam::{adam_step, AdamConfig, AdamState, ParamTensors};
pub use checkpoint::{NamedTensor, NamedTensors, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use matrix::Matrix;
pub use mlp::{Activation, Layer, MlpParams, MlpVars};
pub use scalar::Scalar;
pub use tape::{grad, Grads, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value produced at {label}")]
    NonFinite { label: String },
    #[error("invalid network: {0}")]
    InvalidNetwork(String),
    #[error("corrupt checkpoint at byte {offset}: {reason}")]
    CorruptCheckpoint { offset: usize, reason: String },
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("io: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, NumericsError>;

#[cfg(test)]
mod tests;

/// Eight sinusoidal features of a scalar in `[0, 1]`: `sin, cos` of
/// `2^k π x` for `k = 0..4`.
pub fn sinusoidal8(x: f64) -> [f64; 8] {
    let mut out = [0.0; 8];
    for k in 0..4 {
        let a = std::f64::consts::PI * (1u32 << k) as f64 * x;
        out[2 * k] = a.sin();
        out[2 * k + 1] = a.cos();
    }
    out
}
