//! Action-conditioned diffusion dynamics over future observation chunks.
//!
//! The denoiser predicts the clean chunk `x̂0` from a noised chunk
//! `x_t' = √ᾱ x0 + √(1 − ᾱ) ε`. Input layout (141 values): noised future
//! (4 × 24), step features (8), current observation (24), normalized action
//! chunk (8), family one-hot (5). By default the network output is a
//! residual added to the current observation tiled over the horizon.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Source, Trajectory, TransitionRow};
use crate::env::{self, ActionChunk, EnvState, Family, Observation, TaskSpec, CHUNK_DIM, CHUNK_LEN, MAX_DELTA, NUM_FAMILIES, OBS_DIM};
use crate::numerics::{self, adam_step, sinusoidal8, Activation, NamedTensor, NamedTensors, NumericsError};
use crate::policy::Policy;
use crate::seed::Rng as SeedRng;
use crate::{Adam, Matrix, Mlp, Tape};

pub const FUTURE_DIM: usize = CHUNK_LEN * OBS_DIM;
pub const WM_INPUT_DIM: usize = FUTURE_DIM + 8 + OBS_DIM + CHUNK_DIM + NUM_FAMILIES;
pub const DEFAULT_STEPS: usize = 50;
pub const OBS_MIN: f64 = -0.1;
pub const OBS_MAX: f64 = 1.1;
/// Rows per batched sampling call inside parallel rollouts.
const ROLLOUT_BLOCK: usize = 32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorldModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("diffusion step {step} outside [0, {max}]")]
    StepOutOfRange { step: usize, max: usize },
    #[error("invalid noise schedule: {0}")]
    BadSchedule(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

pub type Result<T> = std::result::Result<T, WorldModelError>;

/// `ᾱ_0 = 1, ᾱ_1, …, ᾱ_T'`, nonincreasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Cosine schedule with offset 0.008, floored to stay strictly positive.
    pub fn cosine(steps: usize) -> Self {
        let s = 0.008;
        let f = |t: f64| (((t / steps as f64) + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
        let f0 = f(0.0);
        let mut alpha_bar: Vec<f64> = (0..=steps).map(|t| (f(t as f64) / f0).clamp(1e-5, 1.0)).collect();
        alpha_bar[0] = 1.0;
        for t in 1..alpha_bar.len() {
            alpha_bar[t] = alpha_bar[t].min(alpha_bar[t - 1]);
        }
        Self { alpha_bar }
    }

    /// Explicit `ᾱ` array; the final entry may be 0 (pure noise).
    pub fn explicit(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 2 {
            return Err(WorldModelError::BadSchedule("need at least one step".into()));
        }
        if alpha_bar[0] != 1.0 {
            return Err(WorldModelError::BadSchedule(format!("alpha_bar[0] must be 1, got {}", alpha_bar[0])));
        }
        for (i, w) in alpha_bar.windows(2).enumerate() {
            if !(w[1].is_finite() && (0.0..=1.0).contains(&w[1]) && w[1] <= w[0]) {
                return Err(WorldModelError::BadSchedule(format!("alpha_bar[{}] = {} breaks monotonicity", i + 1, w[1])));
            }
        }
        Ok(Self { alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or(WorldModelError::StepOutOfRange { step: t, max: self.steps() })
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Per-step ratios `α_t = ᾱ_t / ᾱ_{t−1}` for `t ≥ 1`.
    pub fn alphas(&self) -> Vec<f64> {
        self.alpha_bar
            .windows(2)
            .map(|w| if w[0] > 0.0 { w[1] / w[0] } else { 0.0 })
            .collect()
    }
}

/// `√ᾱ_t x0 + √(1 − ᾱ_t) ε`.
pub fn noising(x0: &[f64], eps: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
    if x0.len() != eps.len() {
        return Err(WorldModelError::Shape(format!("x0 has {} values, eps has {}", x0.len(), eps.len())));
    }
    let ab = sched.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

/// Conditioning context for one chunk prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cond {
    pub obs: Observation,
    pub chunk: ActionChunk,
    pub family: Family,
}

impl Cond {
    pub fn from_row(row: &TransitionRow) -> Self {
        Self {
            obs: row.obs,
            chunk: row.chunk,
            family: row.task.family,
        }
    }

    /// The current observation repeated over the horizon.
    pub fn tiled(&self) -> [f64; FUTURE_DIM] {
        std::array::from_fn(|i| self.obs.0[i % OBS_DIM])
    }
}

/// Anything that predicts clean chunks from noised ones.
pub trait Denoiser: Sync {
    fn predict_x0(&self, x_t: &Matrix, t: &[usize], cond: &[Cond]) -> Matrix;
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldModelNet {
    pub mlp: Mlp,
    pub steps: usize,
    pub residual: bool,
}

impl WorldModelNet {
    pub fn new<R: Rng + ?Sized>(hidden: &[usize], steps: usize, rng: &mut R) -> Self {
        let mut sizes = vec![WM_INPUT_DIM];
        sizes.extend_from_slice(hidden);
        sizes.push(FUTURE_DIM);
        let mut mlp = Mlp::init(&sizes, Activation::Relu, Activation::Identity, rng);
        if let Some(last) = mlp.layers_mut().last_mut() {
            last.weight.data_mut().iter_mut().for_each(|w| *w *= 0.1);
        }
        Self {
            mlp,
            steps,
            residual: true,
        }
    }

    pub fn from_mlp(mlp: Mlp, steps: usize, residual: bool) -> std::result::Result<Self, NumericsError> {
        if mlp.input_dim() != WM_INPUT_DIM || mlp.output_dim() != FUTURE_DIM {
            return Err(NumericsError::InvalidNetwork(format!(
                "world model net must map {WM_INPUT_DIM} -> {FUTURE_DIM}, got {} -> {}",
                mlp.input_dim(),
                mlp.output_dim()
            )));
        }
        Ok(Self { mlp, steps, residual })
    }

    pub fn input_matrix(&self, x_t: &Matrix, t: &[usize], cond: &[Cond]) -> Matrix {
        let n = cond.len();
        let mut data = Vec::with_capacity(n * WM_INPUT_DIM);
        for i in 0..n {
            data.extend_from_slice(x_t.row(i));
            data.extend_from_slice(&sinusoidal8(t[i] as f64 / self.steps.max(1) as f64));
            data.extend_from_slice(&cond[i].obs.0);
            data.extend(cond[i].chunk.flat().iter().map(|a| a / MAX_DELTA));
            data.extend_from_slice(&cond[i].family.one_hot());
        }
        Matrix::from_vec(n, WM_INPUT_DIM, data).expect("sized")
    }

    fn base_matrix(&self, cond: &[Cond]) -> Matrix {
        let mut data = Vec::with_capacity(cond.len() * FUTURE_DIM);
        for c in cond {
            if self.residual {
                data.extend_from_slice(&c.tiled());
            } else {
                data.extend(std::iter::repeat(0.0).take(FUTURE_DIM));
            }
        }
        Matrix::from_vec(cond.len(), FUTURE_DIM, data).expect("sized")
    }

    pub fn to_named(&self, sched: &NoiseSchedule, out: &mut NamedTensors) {
        self.mlp.to_named("wm.net", out);
        out.push(NamedTensor::new("wm.residual", vec![1], vec![self.residual as u8 as f64]));
        out.push(NamedTensor::new("wm.alpha_bar", vec![sched.alpha_bar.len()], sched.alpha_bar.clone()));
    }

    pub fn from_named(t: &NamedTensors) -> std::result::Result<(Self, NoiseSchedule), WorldModelError> {
        let mlp = Mlp::from_named("wm.net", t)?;
        let residual = t
            .get("wm.residual")
            .and_then(|x| x.values.first().copied())
            .ok_or_else(|| NumericsError::MissingTensor("wm.residual".into()))?;
        let ab = t.get("wm.alpha_bar").ok_or_else(|| NumericsError::MissingTensor("wm.alpha_bar".into()))?;
        let sched = NoiseSchedule::explicit(ab.values.clone())?;
        let net = Self::from_mlp(mlp, sched.steps(), residual != 0.0)?;
        Ok((net, sched))
    }
}

impl Denoiser for WorldModelNet {
    fn predict_x0(&self, x_t: &Matrix, t: &[usize], cond: &[Cond]) -> Matrix {
        let out = self.mlp.forward_batch(&self.input_matrix(x_t, t, cond)).expect("wm input layout");
        let base = self.base_matrix(cond);
        let data = out.data().iter().zip(base.data()).map(|(a, b)| a + b).collect();
        Matrix::from_vec(cond.len(), FUTURE_DIM, data).expect("sized")
    }
}

/// Noise draws for one training row.
#[derive(Debug, Clone, PartialEq)]
pub struct WmDraw {
    pub t: usize,
    pub eps: Vec<f64>,
}

impl WmDraw {
    /// `t' ~ U{1..T'}` then `ε ~ N(0, I)`.
    pub fn sample<R: Rng + ?Sized>(sched: &NoiseSchedule, rng: &mut R) -> Self {
        let t = rng.gen_range(1..=sched.steps());
        let eps = (0..FUTURE_DIM).map(|_| StandardNormal.sample(rng)).collect();
        Self { t, eps }
    }
}

/// A training pair: conditioning and the true future chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct WmExample {
    pub cond: Cond,
    pub target: [f64; FUTURE_DIM],
}

impl WmExample {
    pub fn from_row(row: &TransitionRow) -> Self {
        let mut target = [0.0; FUTURE_DIM];
        for (k, o) in row.future.iter().enumerate() {
            target[k * OBS_DIM..(k + 1) * OBS_DIM].copy_from_slice(&o.0);
        }
        Self {
            cond: Cond::from_row(row),
            target,
        }
    }
}

/// Mean over rows and elements of `(x̂0 − x0)²` for the given draws,
/// scaled by `scale`, with its gradient.
pub fn wm_loss_with_draws(
    net: &WorldModelNet,
    examples: &[WmExample],
    draws: &[WmDraw],
    sched: &NoiseSchedule,
    scale: f64,
) -> Result<(f64, Mlp)> {
    if examples.is_empty() {
        return Ok((0.0, net.mlp.zeros_like()));
    }
    let n = examples.len();
    let mut noised = Vec::with_capacity(n * FUTURE_DIM);
    let mut ts = Vec::with_capacity(n);
    for (ex, d) in examples.iter().zip(draws) {
        noised.extend(noising(&ex.target, &d.eps, d.t, sched)?);
        ts.push(d.t);
    }
    let x_t = Matrix::from_vec(n, FUTURE_DIM, noised).expect("sized");
    let cond: Vec<Cond> = examples.iter().map(|e| e.cond).collect();
    let input = net.input_matrix(&x_t, &ts, &cond);
    let base = net.base_matrix(&cond);
    let mut resid = Vec::with_capacity(n * FUTURE_DIM);
    for (i, ex) in examples.iter().enumerate() {
        resid.extend(ex.target.iter().zip(base.row(i)).map(|(x, b)| x - b));
    }
    let target = Matrix::from_vec(n, FUTURE_DIM, resid).expect("sized");
    let (loss, g) = numerics::grad(&net.mlp, |tape: &mut Tape, vars| {
        let xin = tape.constant(input);
        let out = net.mlp.forward_on_tape(tape, vars, xin);
        let tg = tape.constant(target);
        let d = tape.sub(out, tg);
        let ms = tape.mean_squares(d);
        Ok(tape.scale(ms, scale))
    })?;
    Ok((loss, g))
}

/// Monte-Carlo diffusion loss over a batch, one `(t', ε)` draw per row.
pub fn wm_loss<R: Rng + ?Sized>(net: &WorldModelNet, examples: &[WmExample], sched: &NoiseSchedule, rng: &mut R) -> Result<(f64, Mlp)> {
    let draws: Vec<WmDraw> = examples.iter().map(|_| WmDraw::sample(sched, rng)).collect();
    wm_loss_with_draws(net, examples, &draws, sched, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WmLosses {
    pub real: f64,
    pub pretrain: f64,
    pub total: f64,
}

/// `L_real + λ L_pretrain` and its gradient for fixed draws.
pub fn wm_combined_with_draws(
    net: &WorldModelNet,
    real: (&[WmExample], &[WmDraw]),
    pretrain: (&[WmExample], &[WmDraw]),
    lambda: f64,
    sched: &NoiseSchedule,
) -> Result<(WmLosses, Mlp)> {
    let (lr, mut g) = wm_loss_with_draws(net, real.0, real.1, sched, 1.0)?;
    let (lp, gp) = if lambda > 0.0 && !pretrain.0.is_empty() {
        let (l, g) = wm_loss_with_draws(net, pretrain.0, pretrain.1, sched, 1.0)?;
        (l, Some(g))
    } else {
        (0.0, None)
    };
    if let Some(gp) = gp {
        g.add_scaled(&gp, lambda);
    }
    let total = lr + lambda * lp;
    if !total.is_finite() {
        return Err(NumericsError::NonFinite { label: "world model loss".into() }.into());
    }
    Ok((
        WmLosses {
            real: lr,
            pretrain: lp,
            total,
        },
        g,
    ))
}

/// One Adam step on `L_real + λ L_pretrain`. Real-row draws come first.
pub fn wm_train_step<R: Rng + ?Sized>(
    net: &mut WorldModelNet,
    real: &[WmExample],
    pretrain: &[WmExample],
    lambda: f64,
    sched: &NoiseSchedule,
    opt: &mut Adam,
    rng: &mut R,
) -> Result<WmLosses> {
    if lambda < 0.0 {
        return Err(WorldModelError::Shape(format!("lambda must be >= 0, got {lambda}")));
    }
    let dr: Vec<WmDraw> = real.iter().map(|_| WmDraw::sample(sched, rng)).collect();
    let dp: Vec<WmDraw> = pretrain.iter().map(|_| WmDraw::sample(sched, rng)).collect();
    let (losses, g) = wm_combined_with_draws(net, (real, &dr), (pretrain, &dp), lambda, sched)?;
    adam_step(&mut net.mlp, &g, opt)?;
    Ok(losses)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    /// DDIM with η = 0: only the initial noise is random.
    Deterministic,
    /// Ancestral sampling with posterior variance.
    Stochastic,
}

fn normal_vec(rng: &mut SeedRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Reverse diffusion for a batch of conditions; row `i` draws only from
/// `rngs[i]`. Output rows are clamped to `[OBS_MIN, OBS_MAX]`.
pub fn sample_chunks<D: Denoiser + ?Sized>(
    den: &D,
    cond: &[Cond],
    sched: &NoiseSchedule,
    mode: SampleMode,
    rngs: &mut [SeedRng],
) -> Matrix {
    let n = cond.len();
    reverse_diffusion(FUTURE_DIM, |x, t| den.predict_x0(x, &vec![t; n], cond), sched, mode, rngs).map(|v| v.clamp(OBS_MIN, OBS_MAX))
}

/// Reverse diffusion of `rngs.len()` rows of width `dim` under an
/// x0-predictor `predict(x_t, t)`. Unclamped.
pub fn reverse_diffusion(
    dim: usize,
    mut predict: impl FnMut(&Matrix, usize) -> Matrix,
    sched: &NoiseSchedule,
    mode: SampleMode,
    rngs: &mut [SeedRng],
) -> Matrix {
    let n = rngs.len();
    let mut x = Matrix::zeros(n, dim);
    for (i, r) in rngs.iter_mut().enumerate() {
        x.row_mut(i).copy_from_slice(&normal_vec(r, dim));
    }
    let ab = sched.alpha_bars();
    for t in (1..=sched.steps()).rev() {
        let x0 = predict(&x, t);
        let (a_t, a_prev) = (ab[t], ab[t - 1]);
        match mode {
            SampleMode::Deterministic => {
                let sa = (1.0 - a_t).sqrt();
                for i in 0..n {
                    let (xr, pr) = (x.row_mut(i), x0.row(i));
                    for j in 0..dim {
                        let eps = if sa > 1e-12 { (xr[j] - a_t.sqrt() * pr[j]) / sa } else { 0.0 };
                        xr[j] = a_prev.sqrt() * pr[j] + (1.0 - a_prev).sqrt() * eps;
                    }
                }
            }
            SampleMode::Stochastic => {
                let alpha = if a_prev > 0.0 { a_t / a_prev } else { 0.0 };
                let beta = 1.0 - alpha;
                let denom = (1.0 - a_t).max(1e-12);
                let c0 = a_prev.sqrt() * beta / denom;
                let ct = alpha.sqrt() * (1.0 - a_prev) / denom;
                let sigma = (beta * (1.0 - a_prev) / denom).max(0.0).sqrt();
                for (i, r) in rngs.iter_mut().enumerate() {
                    let z = if t > 1 { normal_vec(r, dim) } else { vec![0.0; dim] };
                    let (xr, pr) = (x.row_mut(i), x0.row(i));
                    for j in 0..dim {
                        xr[j] = c0 * pr[j] + ct * xr[j] + sigma * z[j];
                    }
                }
            }
        }
    }
    x
}

/// Split a flattened future row into observations.
pub fn split_future(row: &[f64]) -> [Observation; CHUNK_LEN] {
    std::array::from_fn(|k| Observation::from_slice(&row[k * OBS_DIM..(k + 1) * OBS_DIM]).expect("row size"))
}

/// Single-chunk prediction.
pub fn sample_chunk<D: Denoiser + ?Sized>(
    den: &D,
    obs: &Observation,
    chunk: &ActionChunk,
    task: &TaskSpec,
    sched: &NoiseSchedule,
    mode: SampleMode,
    rng: &mut SeedRng,
) -> [Observation; CHUNK_LEN] {
    let cond = Cond {
        obs: *obs,
        chunk: *chunk,
        family: task.family,
    };
    let m = sample_chunks(den, &[cond], sched, mode, std::slice::from_mut(rng));
    split_future(m.row(0))
}

/// One-chunk-at-a-time dynamics used for closed-loop rollouts.
pub trait Dynamics: Sync {
    type State: Clone + Send;
    fn start(&self, task: &TaskSpec, o0: &Observation) -> Self::State;
    fn observe(&self, state: &Self::State) -> Observation;
    /// Advance every state by its chunk; returns the predicted observations.
    fn advance(&self, states: &mut [Self::State], chunks: &[ActionChunk], rngs: &mut [SeedRng]) -> Vec<[Observation; CHUNK_LEN]>;
}

/// The learned model as dynamics.
#[derive(Debug, Clone, Copy)]
pub struct DiffusionDynamics<'a, D: Denoiser + ?Sized> {
    pub denoiser: &'a D,
    pub sched: &'a NoiseSchedule,
    pub mode: SampleMode,
}

impl<D: Denoiser + ?Sized> Dynamics for DiffusionDynamics<'_, D> {
    type State = (TaskSpec, Observation);

    fn start(&self, task: &TaskSpec, o0: &Observation) -> Self::State {
        (*task, *o0)
    }

    fn observe(&self, state: &Self::State) -> Observation {
        state.1
    }

    fn advance(&self, states: &mut [Self::State], chunks: &[ActionChunk], rngs: &mut [SeedRng]) -> Vec<[Observation; CHUNK_LEN]> {
        let cond: Vec<Cond> = states
            .iter()
            .zip(chunks)
            .map(|((task, o), c)| Cond {
                obs: *o,
                chunk: *c,
                family: task.family,
            })
            .collect();
        let m = sample_chunks(self.denoiser, &cond, self.sched, self.mode, rngs);
        (0..states.len())
            .map(|i| {
                let f = split_future(m.row(i));
                states[i].1 = f[CHUNK_LEN - 1];
                f
            })
            .collect()
    }
}

/// The true environment as dynamics; consumes no randomness.
#[derive(Debug, Clone, Copy, Default)]
pub struct EnvDynamics;

impl Dynamics for EnvDynamics {
    type State = EnvState;

    fn start(&self, task: &TaskSpec, _o0: &Observation) -> Self::State {
        env::reset(task)
    }

    fn observe(&self, state: &Self::State) -> Observation {
        env::observe(state)
    }

    fn advance(&self, states: &mut [Self::State], chunks: &[ActionChunk], _rngs: &mut [SeedRng]) -> Vec<[Observation; CHUNK_LEN]> {
        states
            .iter_mut()
            .zip(chunks)
            .map(|(s, c)| {
                let (next, obs, _) = env::step_chunk(s, c);
                *s = next;
                obs.try_into().expect("chunk length")
            })
            .collect()
    }
}

fn rollout_block<M: Dynamics, P: Policy + ?Sized>(
    model: &M,
    policy: &P,
    starts: &[(TaskSpec, Observation)],
    num_calls: usize,
    rngs: &mut [SeedRng],
    source: Source,
) -> Vec<Trajectory> {
    let mut states: Vec<M::State> = starts.iter().map(|(t, o)| model.start(t, o)).collect();
    let mut trajs: Vec<Trajectory> = starts.iter().map(|(t, o)| Trajectory::start(*t, *o, source)).collect();
    for _ in 0..num_calls {
        let inputs: Vec<(Observation, TaskSpec)> = states.iter().zip(starts).map(|(s, (t, _))| (model.observe(s), *t)).collect();
        let chunks = policy.act_batch(&inputs, rngs);
        let futures = model.advance(&mut states, &chunks, rngs);
        for ((tr, c), f) in trajs.iter_mut().zip(&chunks).zip(&futures) {
            tr.push_chunk(*c, f).expect("chunk length");
        }
    }
    trajs
}

/// Closed-loop rollouts, one rng per rollout. Results do not depend on the
/// rayon pool size.
pub fn rollout_in_model<M: Dynamics, P: Policy + ?Sized>(
    model: &M,
    policy: &P,
    starts: &[(TaskSpec, Observation)],
    num_calls: usize,
    mut rngs: Vec<SeedRng>,
    source: Source,
) -> Vec<Trajectory> {
    assert_eq!(starts.len(), rngs.len(), "one rng per rollout");
    starts
        .par_chunks(ROLLOUT_BLOCK)
        .zip(rngs.par_chunks_mut(ROLLOUT_BLOCK))
        .flat_map_iter(|(s, r)| rollout_block(model, policy, s, num_calls, r, source))
        .collect()
}
