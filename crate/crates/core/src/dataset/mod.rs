//! Trajectories, the append-only store, batch sampling and persistence.

mod io;
mod store;

pub use io::{load, save, Manifest, FORMAT_TAG, FORMAT_VERSION};
pub use store::{filter_success, sample_batch, BatchSampler, Selector, TrajectoryStore, TransitionBatch, TransitionRow};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::env::{ActionChunk, EventAnnotation, Observation, TaskSpec, CHUNK_LEN};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DatasetError {
    #[error("malformed trajectory: {0}")]
    Malformed(String),
    #[error("trajectory {index} is unlabeled")]
    Unlabeled { index: usize },
    #[error("no transitions match the selection")]
    EmptySelection,
    #[error("corrupt trajectory file at byte {offset} (line {line}): {reason}")]
    Corrupt { offset: usize, line: usize, reason: String },
    #[error("io: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Real,
    Synthetic,
    Expert,
}

impl Source {
    pub fn name(self) -> &'static str {
        match self {
            Source::Real => "real",
            Source::Synthetic => "synthetic",
            Source::Expert => "expert",
        }
    }
}

/// Trajectory-level success label `r_τ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Unlabeled,
    Failure,
    Success,
}

impl Label {
    pub fn from_bool(success: bool) -> Self {
        if success {
            Label::Success
        } else {
            Label::Failure
        }
    }

    /// `Some(1.0)` / `Some(0.0)` for labeled trajectories.
    pub fn reward(self) -> Option<f64> {
        match self {
            Label::Success => Some(1.0),
            Label::Failure => Some(0.0),
            Label::Unlabeled => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Unlabeled => "unlabeled",
            Label::Failure => "failure",
            Label::Success => "success",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub task: TaskSpec,
    observations: Vec<Observation>,
    chunks: Vec<ActionChunk>,
    pub label: Label,
    pub source: Source,
    pub events: Vec<EventAnnotation>,
}

impl Trajectory {
    pub fn new(task: TaskSpec, observations: Vec<Observation>, chunks: Vec<ActionChunk>, source: Source) -> Result<Self> {
        let t = Trajectory {
            task,
            observations,
            chunks,
            label: Label::Unlabeled,
            source,
            events: Vec::new(),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.observations.len() != self.chunks.len() * CHUNK_LEN + 1 {
            return Err(DatasetError::Malformed(format!(
                "{} observations for {} chunks (need chunks × {CHUNK_LEN} + 1)",
                self.observations.len(),
                self.chunks.len()
            )));
        }
        if self.observations.iter().any(|o| o.0.iter().any(|v| !v.is_finite())) {
            return Err(DatasetError::Malformed("non-finite observation".into()));
        }
        Ok(())
    }

    /// Start a trajectory at `o0`; extend with [`push_chunk`](Self::push_chunk).
    pub fn start(task: TaskSpec, o0: Observation, source: Source) -> Self {
        Trajectory {
            task,
            observations: vec![o0],
            chunks: Vec::new(),
            label: Label::Unlabeled,
            source,
            events: Vec::new(),
        }
    }

    pub fn push_chunk(&mut self, chunk: ActionChunk, future: &[Observation]) -> Result<()> {
        if future.len() != CHUNK_LEN {
            return Err(DatasetError::Malformed(format!("{} future observations, need {CHUNK_LEN}", future.len())));
        }
        self.chunks.push(chunk);
        self.observations.extend_from_slice(future);
        Ok(())
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn chunks(&self) -> &[ActionChunk] {
        &self.chunks
    }

    pub fn initial(&self) -> &Observation {
        &self.observations[0]
    }

    pub fn num_chunks(&self) -> usize {
        self.chunks.len()
    }

    /// Observation at the start of chunk `k`.
    pub fn obs_at_chunk(&self, k: usize) -> &Observation {
        &self.observations[k * CHUNK_LEN]
    }

    /// The `CHUNK_LEN` observations produced by chunk `k`.
    pub fn future_of_chunk(&self, k: usize) -> &[Observation] {
        &self.observations[k * CHUNK_LEN + 1..(k + 1) * CHUNK_LEN + 1]
    }

    pub fn with_label(mut self, label: Label) -> Self {
        self.label = label;
        self
    }

    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(io::encode_record(self).as_bytes());
        h.finalize().into()
    }
}
