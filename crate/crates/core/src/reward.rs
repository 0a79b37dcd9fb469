//! Trajectory success classifier with a strict probability threshold.
//!
//! A trajectory is summarized by 16 equispaced frames plus the family
//! one-hot; an MLP maps that to a logit and `classify` returns
//! `1[σ(logit) > α]`.

use std::fmt;

use log::warn;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Label, Trajectory};
use crate::env::{Family, Observation, NUM_FAMILIES, OBS_DIM};
use crate::numerics::{self, adam_step, Activation, NamedTensors, NumericsError};
use crate::{Adam, Matrix, Mlp, Tape};

pub const NUM_FRAMES: usize = 16;
pub const RM_INPUT_DIM: usize = NUM_FRAMES * OBS_DIM + NUM_FAMILIES;
pub const DEFAULT_THRESHOLD: f64 = 0.8;
pub const DEFAULT_TRAIN_STEPS: usize = 200;
pub const DEFAULT_BATCH: usize = 128;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RewardError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("trajectory has no observations")]
    Empty,
    #[error("trajectory {index} is unlabeled")]
    Unlabeled { index: usize },
    #[error("length mismatch: {preds} predictions vs {labels} labels")]
    LengthMismatch { preds: usize, labels: usize },
    #[error("threshold {0} outside [0, 1]")]
    BadThreshold(f64),
}

pub type Result<T> = std::result::Result<T, RewardError>;

/// Frame indices `round(i · (n − 1) / 15)` for `i = 0..16`.
pub fn frame_indices(n: usize) -> [usize; NUM_FRAMES] {
    let last = n.saturating_sub(1) as f64;
    std::array::from_fn(|i| (i as f64 * last / (NUM_FRAMES - 1) as f64).round() as usize)
}

pub fn featurize_observations(obs: &[Observation], family: Family) -> Result<Vec<f64>> {
    if obs.is_empty() {
        return Err(RewardError::Empty);
    }
    let mut out = Vec::with_capacity(RM_INPUT_DIM);
    for i in frame_indices(obs.len()) {
        out.extend_from_slice(&obs[i.min(obs.len() - 1)].0);
    }
    out.extend_from_slice(&family.one_hot());
    Ok(out)
}

pub fn featurize(traj: &Trajectory) -> Result<Vec<f64>> {
    featurize_observations(traj.observations(), traj.task.family)
}

pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardNet {
    pub mlp: Mlp,
}

impl RewardNet {
    pub fn new<R: Rng + ?Sized>(hidden: &[usize], rng: &mut R) -> Self {
        let mut sizes = vec![RM_INPUT_DIM];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        Self {
            mlp: Mlp::init(&sizes, Activation::Relu, Activation::Identity, rng),
        }
    }

    pub fn from_mlp(mlp: Mlp) -> std::result::Result<Self, NumericsError> {
        if mlp.input_dim() != RM_INPUT_DIM || mlp.output_dim() != 1 {
            return Err(NumericsError::InvalidNetwork(format!(
                "reward net must map {RM_INPUT_DIM} -> 1, got {} -> {}",
                mlp.input_dim(),
                mlp.output_dim()
            )));
        }
        Ok(Self { mlp })
    }

    pub fn to_named(&self, out: &mut NamedTensors) {
        self.mlp.to_named("rm.net", out);
    }

    pub fn from_named(t: &NamedTensors) -> std::result::Result<Self, NumericsError> {
        Self::from_mlp(Mlp::from_named("rm.net", t)?)
    }

    pub fn logits(&self, features: &Matrix) -> Vec<f64> {
        self.mlp.forward_batch(features).expect("reward input layout").into_data()
    }

    pub fn prob_of_features(&self, features: &[f64]) -> f64 {
        let x = Matrix::from_vec(1, RM_INPUT_DIM, features.to_vec()).expect("feature length");
        logistic(self.logits(&x)[0])
    }
}

/// `P(success | τ)`.
pub fn predict_prob(net: &RewardNet, traj: &Trajectory) -> Result<f64> {
    Ok(net.prob_of_features(&featurize(traj)?))
}

/// Strict threshold rule: 1 iff `p > α`.
pub fn classify_prob(p: f64, alpha: f64) -> Result<bool> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(RewardError::BadThreshold(alpha));
    }
    Ok(p > alpha)
}

pub fn classify(net: &RewardNet, traj: &Trajectory, alpha: f64) -> Result<bool> {
    classify_prob(predict_prob(net, traj)?, alpha)
}

/// Probabilities for many trajectories, in parallel.
pub fn predict_many(net: &RewardNet, trajs: &[&Trajectory]) -> Result<Vec<f64>> {
    trajs.par_iter().map(|t| predict_prob(net, t)).collect()
}

/// Set `label` on each trajectory from the classifier.
pub fn label_trajectories(net: &RewardNet, trajs: &mut [Trajectory], alpha: f64) -> Result<Vec<f64>> {
    let probs = predict_many(net, &trajs.iter().collect::<Vec<_>>())?;
    for (t, &p) in trajs.iter_mut().zip(&probs) {
        t.label = Label::from_bool(classify_prob(p, alpha)?);
    }
    Ok(probs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmTrainConfig {
    pub steps: usize,
    pub batch: usize,
}

impl Default for RmTrainConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_TRAIN_STEPS,
            batch: DEFAULT_BATCH,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmTrainReport {
    pub final_loss: f64,
    /// Accuracy on the training set at `p > 0.5`.
    pub train_accuracy: f64,
    pub positives: usize,
    pub negatives: usize,
}

/// Minibatch BCE on precomputed features with 0/1 targets.
pub fn train_on_features<R: Rng + ?Sized>(
    net: &mut RewardNet,
    features: &[Vec<f64>],
    targets: &[f64],
    cfg: &RmTrainConfig,
    opt: &mut Adam,
    rng: &mut R,
) -> Result<RmTrainReport> {
    let n = features.len();
    let positives = targets.iter().filter(|&&y| y > 0.5).count();
    if n == 0 {
        return Ok(RmTrainReport {
            final_loss: 0.0,
            train_accuracy: 0.0,
            positives: 0,
            negatives: 0,
        });
    }
    if positives == 0 || positives == n {
        warn!("reward model training set has a single class ({positives}/{n} positive)");
    }
    let mut final_loss = 0.0;
    for _ in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch.max(1)).map(|_| rng.gen_range(0..n)).collect();
        let mut data = Vec::with_capacity(idx.len() * RM_INPUT_DIM);
        for &i in &idx {
            data.extend_from_slice(&features[i]);
        }
        let x = Matrix::from_vec(idx.len(), RM_INPUT_DIM, data).map_err(RewardError::Numerics)?;
        let y: Vec<f64> = idx.iter().map(|&i| targets[i]).collect();
        let (loss, g) = numerics::grad(&net.mlp, |tape: &mut Tape, vars| {
            let xin = tape.constant(x);
            let z = net.mlp.forward_on_tape(tape, vars, xin);
            Ok(tape.bce_with_logits(z, y))
        })?;
        adam_step(&mut net.mlp, &g, opt)?;
        final_loss = loss;
    }
    let all = Matrix::from_vec(n, RM_INPUT_DIM, features.concat()).map_err(RewardError::Numerics)?;
    let correct = net
        .logits(&all)
        .iter()
        .zip(targets)
        .filter(|(&z, &y)| (logistic(z) > 0.5) == (y > 0.5))
        .count();
    Ok(RmTrainReport {
        final_loss,
        train_accuracy: correct as f64 / n as f64,
        positives,
        negatives: n - positives,
    })
}

/// Finetune on labeled trajectories.
pub fn rm_train<R: Rng + ?Sized>(
    net: &mut RewardNet,
    trajs: &[&Trajectory],
    cfg: &RmTrainConfig,
    opt: &mut Adam,
    rng: &mut R,
) -> Result<RmTrainReport> {
    let mut feats = Vec::with_capacity(trajs.len());
    let mut targets = Vec::with_capacity(trajs.len());
    for (i, t) in trajs.iter().enumerate() {
        targets.push(t.label.reward().ok_or(RewardError::Unlabeled { index: i })?);
        feats.push(featurize(t)?);
    }
    train_on_features(net, &feats, &targets, cfg, opt, rng)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub fp: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.tp + self.fn_ + self.tn + self.fp
    }

    pub fn accuracy(&self) -> f64 {
        if self.total() == 0 {
            return 0.0;
        }
        (self.tp + self.tn) as f64 / self.total() as f64
    }

    pub fn add(&mut self, pred: bool, label: bool) {
        match (pred, label) {
            (true, true) => self.tp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
            (true, false) => self.fp += 1,
        }
    }

    pub fn csv_header() -> &'static str {
        "method,alpha,tp,fn,tn,fp"
    }

    pub fn csv_row(&self, method: &str, alpha: f64) -> String {
        format!("{method},{alpha},{},{},{},{}", self.tp, self.fn_, self.tn, self.fp)
    }

    /// Parse a `method,alpha,tp,fn,tn,fp` row.
    pub fn parse_csv_row(line: &str) -> Option<(String, f64, ConfusionMatrix)> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 6 {
            return None;
        }
        let n = |s: &str| s.trim().parse::<usize>().ok();
        Some((
            f[0].to_string(),
            f[1].trim().parse().ok()?,
            ConfusionMatrix {
                tp: n(f[2])?,
                fn_: n(f[3])?,
                tn: n(f[4])?,
                fp: n(f[5])?,
            },
        ))
    }
}

impl fmt::Display for ConfusionMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TP={} FN={} TN={} FP={}", self.tp, self.fn_, self.tn, self.fp)
    }
}

/// Label `true` is ground-truth success.
pub fn confusion(preds: &[bool], labels: &[bool]) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(RewardError::LengthMismatch {
            preds: preds.len(),
            labels: labels.len(),
        });
    }
    let mut m = ConfusionMatrix::default();
    for (&p, &l) in preds.iter().zip(labels) {
        m.add(p, l);
    }
    Ok(m)
}
