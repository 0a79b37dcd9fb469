//! Action-chunk policy as a rectified-flow velocity field.
//!
//! Input layout: noisy chunk (8), flow time features (8), egocentric
//! observation (24),
//! family one-hot (5). Output: velocity over the flattened chunk (8).
//! Training regresses `v(a_s, s) ≈ a − ε` on `a_s = (1 − s) ε + s a`;
//! sampling Euler-integrates the field from `ε ~ N(0, I)`.
//!
//! The flow runs in normalized action units `a / action_scale`, so with the
//! default scale the action bounds are `±1`.

use log::warn;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Label, TransitionBatch, TransitionRow};
use crate::env::{ActionChunk, Family, Observation, TaskSpec, CHUNK_DIM, MAX_DELTA, NUM_FAMILIES, OBS_DIM};
use crate::numerics::{self, adam_step, sinusoidal8, Activation, NamedTensor, NamedTensors, NumericsError};
use crate::seed::Rng as SeedRng;
use crate::{Adam, Matrix, Mlp, Tape};

pub const POLICY_INPUT_DIM: usize = CHUNK_DIM + 8 + OBS_DIM + NUM_FAMILIES;
pub const DEFAULT_SAMPLE_STEPS: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("trajectory label missing for weighting")]
    Unlabeled,
    #[error("invalid weighting: {0}")]
    BadWeighting(String),
}

pub type Result<T> = std::result::Result<T, PolicyError>;

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNet {
    pub mlp: Mlp,
    pub sample_steps: usize,
    pub action_scale: f64,
}

impl PolicyNet {
    pub fn new<R: Rng + ?Sized>(hidden: &[usize], rng: &mut R) -> Self {
        let mut sizes = vec![POLICY_INPUT_DIM];
        sizes.extend_from_slice(hidden);
        sizes.push(CHUNK_DIM);
        let mut mlp = Mlp::init(&sizes, Activation::Relu, Activation::Identity, rng);
        // start near the zero field
        if let Some(last) = mlp.layers_mut().last_mut() {
            last.weight.data_mut().iter_mut().for_each(|w| *w *= 0.1);
        }
        Self {
            mlp,
            sample_steps: DEFAULT_SAMPLE_STEPS,
            action_scale: MAX_DELTA,
        }
    }

    pub fn from_mlp(mlp: Mlp) -> std::result::Result<Self, NumericsError> {
        if mlp.input_dim() != POLICY_INPUT_DIM || mlp.output_dim() != CHUNK_DIM {
            return Err(NumericsError::InvalidNetwork(format!(
                "policy net must map {POLICY_INPUT_DIM} -> {CHUNK_DIM}, got {} -> {}",
                mlp.input_dim(),
                mlp.output_dim()
            )));
        }
        Ok(Self {
            mlp,
            sample_steps: DEFAULT_SAMPLE_STEPS,
            action_scale: MAX_DELTA,
        })
    }

    pub fn with_action_scale(mut self, scale: f64) -> Self {
        self.action_scale = scale;
        self
    }

    pub fn to_named(&self, out: &mut NamedTensors) {
        self.mlp.to_named("pi.net", out);
        out.push(NamedTensor::new("pi.action_scale", vec![1], vec![self.action_scale]));
        out.push(NamedTensor::new("pi.sample_steps", vec![1], vec![self.sample_steps as f64]));
    }

    pub fn from_named(t: &NamedTensors) -> std::result::Result<Self, NumericsError> {
        let scalar = |name: &str| {
            t.get(name)
                .and_then(|x| x.values.first().copied())
                .ok_or_else(|| NumericsError::MissingTensor(name.to_string()))
        };
        let mut net = Self::from_mlp(Mlp::from_named("pi.net", t)?)?;
        net.action_scale = scalar("pi.action_scale")?;
        net.sample_steps = scalar("pi.sample_steps")? as usize;
        if !(net.action_scale.is_finite() && net.action_scale > 0.0) {
            return Err(NumericsError::InvalidNetwork("pi.action_scale must be positive".into()));
        }
        Ok(net)
    }

    /// Chunk in normalized flow units.
    pub fn normalize(&self, chunk: &ActionChunk) -> [f64; CHUNK_DIM] {
        chunk.flat().map(|v| v / self.action_scale)
    }

    /// Normalized flow sample back to a (clamped) action chunk.
    pub fn denormalize(&self, u: &[f64; CHUNK_DIM]) -> ActionChunk {
        let bound = MAX_DELTA / self.action_scale;
        let a: [f64; CHUNK_DIM] = u.map(|v| v.clamp(-bound, bound) * self.action_scale);
        ActionChunk::from_flat(&a).expect("chunk size")
    }

    /// Velocity at flow time `s` for each row of noisy chunks.
    pub fn velocity(&self, noisy: &[[f64; CHUNK_DIM]], s: &[f64], ctx: &[(Observation, Family)]) -> Matrix {
        let x = input_matrix(noisy, s, ctx);
        self.mlp.forward_batch(&x).expect("policy input layout")
    }
}

fn input_row(out: &mut Vec<f64>, noisy: &[f64; CHUNK_DIM], s: f64, obs: &Observation, family: Family) {
    out.extend_from_slice(noisy);
    out.extend_from_slice(&sinusoidal8(s));
    out.extend_from_slice(&obs.egocentric(family).0);
    out.extend_from_slice(&family.one_hot());
}

fn input_matrix(noisy: &[[f64; CHUNK_DIM]], s: &[f64], ctx: &[(Observation, Family)]) -> Matrix {
    let mut data = Vec::with_capacity(noisy.len() * POLICY_INPUT_DIM);
    for ((a, &si), (o, f)) in noisy.iter().zip(s).zip(ctx) {
        input_row(&mut data, a, si, o, *f);
    }
    Matrix::from_vec(noisy.len(), POLICY_INPUT_DIM, data).expect("sized")
}

/// Anything that emits one action chunk per observation.
pub trait Policy: Sync {
    /// One chunk per input, consuming randomness only from that row's rng.
    fn act_batch(&self, inputs: &[(Observation, TaskSpec)], rngs: &mut [SeedRng]) -> Vec<ActionChunk>;
}

impl Policy for PolicyNet {
    fn act_batch(&self, inputs: &[(Observation, TaskSpec)], rngs: &mut [SeedRng]) -> Vec<ActionChunk> {
        let ctx: Vec<(Observation, Family)> = inputs.iter().map(|(o, t)| (*o, t.family)).collect();
        sample_actions(self, &ctx, rngs)
    }
}

fn normal_chunk<R: Rng + ?Sized>(rng: &mut R) -> [f64; CHUNK_DIM] {
    std::array::from_fn(|_| StandardNormal.sample(rng))
}

/// Batched Euler sampler; row `i` gets exactly what a solo call with
/// `rngs[i]` would produce.
pub fn sample_actions(net: &PolicyNet, ctx: &[(Observation, Family)], rngs: &mut [SeedRng]) -> Vec<ActionChunk> {
    let mut a: Vec<[f64; CHUNK_DIM]> = rngs.iter_mut().map(|r| normal_chunk(r)).collect();
    let steps = net.sample_steps.max(1);
    let dt = 1.0 / steps as f64;
    for k in 0..steps {
        let s = vec![k as f64 * dt; a.len()];
        let v = net.velocity(&a, &s, ctx);
        for (i, ai) in a.iter_mut().enumerate() {
            for (j, x) in ai.iter_mut().enumerate() {
                *x += dt * v.get(i, j);
            }
        }
    }
    a.iter().map(|x| net.denormalize(x)).collect()
}

pub fn sample_action(net: &PolicyNet, obs: &Observation, task: &TaskSpec, rng: &mut SeedRng) -> ActionChunk {
    sample_actions(net, &[(*obs, task.family)], std::slice::from_mut(rng))[0]
}

/// One flow-matching training example; `action` is in normalized units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FmSample {
    pub obs: Observation,
    pub family: Family,
    pub action: [f64; CHUNK_DIM],
    pub weight: f64,
}

impl FmSample {
    pub fn from_row(net: &PolicyNet, row: &TransitionRow) -> Self {
        Self {
            obs: row.obs,
            family: row.task.family,
            action: net.normalize(&row.chunk),
            weight: row.weight,
        }
    }
}

/// Noise draws for one sample: `ε` then `s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FmDraw {
    pub eps: [f64; CHUNK_DIM],
    pub s: f64,
}

impl FmDraw {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let eps = normal_chunk(rng);
        let s = rng.gen_range(0.0..1.0);
        Self { eps, s }
    }
}

/// `Σ_i w_i ‖v(a_s, s, o) − (a − ε)‖² / normalizer` over samples with
/// positive weight; zero-weight samples consume no randomness.
/// Returns `(loss, gradient, effective count)`.
pub fn fm_loss_batch<R: Rng + ?Sized>(
    net: &PolicyNet,
    samples: &[FmSample],
    normalizer: usize,
    rng: &mut R,
) -> Result<(f64, Mlp, usize)> {
    let active: Vec<&FmSample> = samples.iter().filter(|s| s.weight > 0.0).collect();
    let draws: Vec<FmDraw> = active.iter().map(|_| FmDraw::sample(rng)).collect();
    let (loss, grads) = fm_loss_with_draws(net, &active, &draws, normalizer)?;
    Ok((loss, grads, active.len()))
}

fn fm_inputs(samples: &[&FmSample], draws: &[FmDraw]) -> (Matrix, Matrix) {
    let mut noisy = Vec::with_capacity(samples.len());
    let mut targets = Vec::with_capacity(samples.len() * CHUNK_DIM);
    let mut s = Vec::with_capacity(samples.len());
    for (x, d) in samples.iter().zip(draws) {
        noisy.push(std::array::from_fn(|j| (1.0 - d.s) * d.eps[j] + d.s * x.action[j]));
        targets.extend((0..CHUNK_DIM).map(|j| x.action[j] - d.eps[j]));
        s.push(d.s);
    }
    let ctx: Vec<(Observation, Family)> = samples.iter().map(|x| (x.obs, x.family)).collect();
    let input = input_matrix(&noisy, &s, &ctx);
    let target = Matrix::from_vec(samples.len(), CHUNK_DIM, targets).expect("sized");
    (input, target)
}

/// Network inputs `[a_s, emb(s), o, family]` for the given draws.
pub fn fm_input_matrix(samples: &[&FmSample], draws: &[FmDraw]) -> Matrix {
    fm_inputs(samples, draws).0
}

/// Loss for externally supplied velocities (one row per sample).
pub fn fm_loss_from_velocity(v: &Matrix, samples: &[&FmSample], draws: &[FmDraw], normalizer: usize) -> f64 {
    let n = normalizer.max(1) as f64;
    samples
        .iter()
        .zip(draws)
        .enumerate()
        .map(|(i, (x, d))| {
            let sq: f64 = (0..CHUNK_DIM).map(|j| (v.get(i, j) - (x.action[j] - d.eps[j])).powi(2)).sum();
            x.weight * sq / n
        })
        .sum()
}

pub fn fm_loss_with_draws(net: &PolicyNet, samples: &[&FmSample], draws: &[FmDraw], normalizer: usize) -> Result<(f64, Mlp)> {
    if samples.is_empty() {
        return Ok((0.0, net.mlp.zeros_like()));
    }
    let (input, target) = fm_inputs(samples, draws);
    let n = normalizer.max(1) as f64;
    let weights: Vec<f64> = samples.iter().map(|x| x.weight / n).collect();
    let (loss, g) = numerics::grad(&net.mlp, |tape: &mut Tape, vars| {
        let xin = tape.constant(input);
        let v = net.mlp.forward_on_tape(tape, vars, xin);
        let t = tape.constant(target);
        let d = tape.sub(v, t);
        let per_row = tape.row_squared_norm(d);
        Ok(tape.weighted_sum(per_row, weights))
    })?;
    Ok((loss, g))
}

/// Single-pair flow-matching loss and gradient, in normalized units.
pub fn fm_loss<R: Rng + ?Sized>(
    net: &PolicyNet,
    obs: &Observation,
    task: &TaskSpec,
    chunk: &ActionChunk,
    rng: &mut R,
) -> Result<(f64, Mlp)> {
    let x = FmSample {
        obs: *obs,
        family: task.family,
        action: net.normalize(chunk),
        weight: 1.0,
    };
    let (l, g, _) = fm_loss_batch(net, &[x], 1, rng)?;
    Ok((l, g))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightingMode {
    Binary,
    Exponential,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightingConfig {
    pub mode: WeightingMode,
    pub beta: f64,
}

impl Default for WeightingConfig {
    fn default() -> Self {
        Self {
            mode: WeightingMode::Binary,
            beta: 1.0,
        }
    }
}

/// Binary: `r_τ`. Exponential: `exp((r_τ − baseline) / β)`.
pub fn compute_weight(label: Label, cfg: &WeightingConfig, baseline: f64) -> Result<f64> {
    let r = label.reward().ok_or(PolicyError::Unlabeled)?;
    match cfg.mode {
        WeightingMode::Binary => Ok(r),
        WeightingMode::Exponential => {
            if !(cfg.beta.is_finite() && cfg.beta > 0.0) {
                return Err(PolicyError::BadWeighting(format!("beta must be finite and > 0, got {}", cfg.beta)));
            }
            Ok(((r - baseline) / cfg.beta).exp())
        }
    }
}

/// Assign weights in place; the exponential baseline is the per-family
/// success rate of the batch.
pub fn assign_weights(batch: &mut TransitionBatch, cfg: &WeightingConfig) -> Result<()> {
    let mut sums = [(0.0f64, 0usize); crate::env::NUM_FAMILIES];
    for r in &batch.rows {
        let v = r.label.reward().ok_or(PolicyError::Unlabeled)?;
        let e = &mut sums[r.task.family.index()];
        e.0 += v;
        e.1 += 1;
    }
    for r in &mut batch.rows {
        let (s, n) = sums[r.task.family.index()];
        r.weight = compute_weight(r.label, cfg, s / n.max(1) as f64)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub loss: f64,
    pub effective: usize,
    pub skipped: bool,
}

/// One Adam step on `Σ w · L_FM / |real ∪ syn|`. Weights are taken from
/// the rows as given (see [`assign_weights`]).
pub fn policy_update_step<R: Rng + ?Sized>(
    net: &mut PolicyNet,
    batch_real: &TransitionBatch,
    batch_syn: &TransitionBatch,
    opt: &mut Adam,
    rng: &mut R,
) -> Result<UpdateStats> {
    let samples: Vec<FmSample> = batch_real.rows.iter().chain(&batch_syn.rows).map(|r| FmSample::from_row(net, r)).collect();
    let (loss, g, effective) = fm_loss_batch(net, &samples, samples.len(), rng)?;
    if effective == 0 {
        warn!("policy update skipped: every row has zero weight");
        return Ok(UpdateStats {
            loss: 0.0,
            effective: 0,
            skipped: true,
        });
    }
    adam_step(&mut net.mlp, &g, opt)?;
    Ok(UpdateStats {
        loss,
        effective,
        skipped: false,
    })
}

/// Mean unweighted flow-matching loss over `rows` with a fixed seed.
pub fn evaluate_fm(net: &PolicyNet, rows: &[TransitionRow], rng: &mut SeedRng) -> Result<f64> {
    let samples: Vec<FmSample> = rows
        .iter()
        .map(|r| FmSample {
            weight: 1.0,
            ..FmSample::from_row(net, r)
        })
        .collect();
    let (l, _, _) = fm_loss_batch(net, &samples, samples.len(), rng)?;
    Ok(l)
}

#[cfg(test)]
mod tests;
