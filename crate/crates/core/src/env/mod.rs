//! Five deterministic 2D contact-manipulation task families.
//!
//! The gripper is a disk of radius [`GRIPPER_RADIUS`] moving in the unit
//! square. Each low-level step is resolved in [`SUBSTEPS`] equal sub-moves so
//! pushing and proximity triggers never tunnel through an object.
//!
//! Observation layout (`OBS_DIM = 24`):
//!
//! | index | content |
//! |-------|---------|
//! | 0..2  | gripper x, y |
//! | 2..7  | family one-hot |
//! | 7..24 | family slots (see each family module), zero padded |
//!
//! Contact, event outcomes and success are all computed from observations,
//! so they apply equally to real and model-predicted trajectories.

mod book;
mod draw;
mod scoop;
mod stack;
mod wipe;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Trajectory;
use crate::seed;

pub const OBS_DIM: usize = 24;
pub const SLOT_OFFSET: usize = 7;
pub const SLOT_DIM: usize = OBS_DIM - SLOT_OFFSET;
pub const CHUNK_LEN: usize = 4;
pub const ACTION_DIM: usize = 2;
pub const CHUNK_DIM: usize = CHUNK_LEN * ACTION_DIM;
pub const CALLS_PER_EPISODE: usize = 20;
pub const HORIZON: usize = CALLS_PER_EPISODE * CHUNK_LEN;
pub const MAX_DELTA: f64 = 0.05;
pub const GRIPPER_RADIUS: f64 = 0.02;
pub const HOME: [f64; 2] = [0.5, 0.5];
pub const SUBSTEPS: usize = 5;
/// Steps the stacked block must stay in place at the end of an episode.
pub const STACK_HOLD_STEPS: usize = 5;
pub const EXPERT_NOISE: f64 = 0.005;
pub const NUM_FAMILIES: usize = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("unknown task family `{0}`")]
    UnknownFamily(String),
    #[error("variant {variant} out of range for {family} (has {count})")]
    BadVariant { family: Family, variant: u32, count: u32 },
    #[error("malformed task id `{0}` (expected family:variant)")]
    MalformedTask(String),
    #[error("trajectory incomplete: {got} observations, need {need}")]
    Incomplete { got: usize, need: usize },
    #[error("clip [{start}, {start}+{len}) outside trajectory of {steps} steps")]
    ClipOutOfRange { start: usize, len: usize, steps: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Stack2d,
    Wipe2d,
    Book2d,
    Scoop2d,
    Draw2d,
}

impl Family {
    pub const ALL: [Family; NUM_FAMILIES] = [
        Family::Stack2d,
        Family::Wipe2d,
        Family::Book2d,
        Family::Scoop2d,
        Family::Draw2d,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Stack2d => "stack2d",
            Family::Wipe2d => "wipe2d",
            Family::Book2d => "book2d",
            Family::Scoop2d => "scoop2d",
            Family::Draw2d => "draw2d",
        }
    }

    pub fn num_variants(self) -> u32 {
        match self {
            Family::Stack2d => 12,
            Family::Wipe2d => 3,
            Family::Book2d => 4,
            Family::Scoop2d => 3,
            Family::Draw2d => 1,
        }
    }

    pub fn one_hot(self) -> [f64; NUM_FAMILIES] {
        let mut v = [0.0; NUM_FAMILIES];
        v[self.index()] = 1.0;
        v
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, EnvError> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| EnvError::UnknownFamily(s.to_string()))
    }
}

/// A catalog entry `family:variant`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TaskId {
    pub family: Family,
    pub variant: u32,
}

impl TaskId {
    pub fn new(family: Family, variant: u32) -> Result<Self, EnvError> {
        if variant >= family.num_variants() {
            return Err(EnvError::BadVariant {
                family,
                variant,
                count: family.num_variants(),
            });
        }
        Ok(Self { family, variant })
    }

    pub fn with_seed(self, seed: u64) -> TaskSpec {
        TaskSpec {
            family: self.family,
            variant: self.variant,
            seed,
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.family, self.variant)
    }
}

impl FromStr for TaskId {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, EnvError> {
        let (fam, var) = s.split_once(':').ok_or_else(|| EnvError::MalformedTask(s.to_string()))?;
        let family: Family = fam.parse()?;
        let variant: u32 = var.parse().map_err(|_| EnvError::MalformedTask(s.to_string()))?;
        TaskId::new(family, variant)
    }
}

/// One episode's task: family, variant and the seed of its initial layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskSpec {
    pub family: Family,
    pub variant: u32,
    pub seed: u64,
}

impl TaskSpec {
    pub fn new(family: Family, variant: u32, seed: u64) -> Result<Self, EnvError> {
        Ok(TaskId::new(family, variant)?.with_seed(seed))
    }

    pub fn id(&self) -> TaskId {
        TaskId {
            family: self.family,
            variant: self.variant,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation(pub [f64; OBS_DIM]);

impl Observation {
    pub fn zeros() -> Self {
        Observation([0.0; OBS_DIM])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn from_slice(s: &[f64]) -> Option<Self> {
        Some(Observation(s.try_into().ok()?))
    }

    pub fn gripper(&self) -> [f64; 2] {
        [self.0[0], self.0[1]]
    }

    #[inline]
    pub fn slot(&self, i: usize) -> f64 {
        self.0[SLOT_OFFSET + i]
    }

    #[inline]
    pub fn slot_xy(&self, i: usize) -> [f64; 2] {
        [self.0[SLOT_OFFSET + i], self.0[SLOT_OFFSET + i + 1]]
    }

    /// Same vector with every object position re-expressed relative to the
    /// gripper (offset by 0.5). Invertible given the gripper entries.
    pub fn egocentric(&self, family: Family) -> Observation {
        let mut x = self.0;
        for &p in position_slots(family) {
            x[SLOT_OFFSET + p] -= self.0[0] - 0.5;
            x[SLOT_OFFSET + p + 1] -= self.0[1] - 0.5;
        }
        Observation(x)
    }
}

/// Slot indices that start an `(x, y)` position pair.
pub fn position_slots(family: Family) -> &'static [usize] {
    match family {
        Family::Stack2d => &[0, 2, 4, 6],
        Family::Wipe2d => &[0, 3, 6, 9],
        Family::Book2d => &[0, 5],
        Family::Scoop2d => &[0, 3, 5, 7],
        Family::Draw2d => &[0, 2],
    }
}

/// `CHUNK_LEN` gripper velocity commands, each component within `±MAX_DELTA`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionChunk([[f64; ACTION_DIM]; CHUNK_LEN]);

impl ActionChunk {
    /// Clamps every component; non-finite entries become zero.
    pub fn new(rows: [[f64; ACTION_DIM]; CHUNK_LEN]) -> Self {
        let mut rows = rows;
        for r in &mut rows {
            for v in r.iter_mut() {
                *v = clamp_action(*v);
            }
        }
        ActionChunk(rows)
    }

    pub fn zeros() -> Self {
        ActionChunk([[0.0; ACTION_DIM]; CHUNK_LEN])
    }

    pub fn from_flat(flat: &[f64]) -> Option<Self> {
        if flat.len() != CHUNK_DIM {
            return None;
        }
        let mut rows = [[0.0; ACTION_DIM]; CHUNK_LEN];
        for (i, r) in rows.iter_mut().enumerate() {
            r.copy_from_slice(&flat[i * ACTION_DIM..(i + 1) * ACTION_DIM]);
        }
        Some(Self::new(rows))
    }

    pub fn rows(&self) -> &[[f64; ACTION_DIM]; CHUNK_LEN] {
        &self.0
    }

    pub fn flat(&self) -> [f64; CHUNK_DIM] {
        let mut out = [0.0; CHUNK_DIM];
        for (i, r) in self.0.iter().enumerate() {
            out[i * ACTION_DIM..(i + 1) * ACTION_DIM].copy_from_slice(r);
        }
        out
    }
}

fn clamp_action(v: f64) -> f64 {
    if v.is_finite() {
        v.clamp(-MAX_DELTA, MAX_DELTA)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Success,
    Failure,
}

/// Interaction summary for a clip. `outcome` is `None` exactly when there
/// was no interaction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventAnnotation {
    pub start: usize,
    pub len: usize,
    pub interaction: bool,
    pub outcome: Option<Outcome>,
}

impl EventAnnotation {
    pub fn is_success(&self) -> bool {
        self.outcome == Some(Outcome::Success)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Slots {
    Stack(stack::StackState),
    Wipe(wipe::WipeState),
    Book(book::BookState),
    Scoop(scoop::ScoopState),
    Draw(draw::DrawState),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub task: TaskSpec,
    pub gripper: [f64; 2],
    pub tool_engaged: bool,
    pub t: usize,
    pub slots: Slots,
}

/// Per-step contact flag returned by [`step`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepEvent {
    pub contact: bool,
}

pub(crate) fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

pub(crate) fn clamp01(p: [f64; 2]) -> [f64; 2] {
    [p[0].clamp(0.0, 1.0), p[1].clamp(0.0, 1.0)]
}

pub(crate) fn uniform_point<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> [f64; 2] {
    [rng.gen_range(lo..hi), rng.gen_range(lo..hi)]
}

pub fn reset(task: &TaskSpec) -> EnvState {
    let mut rng = seed::rng(task.seed, &[task.family.index() as u64, task.variant as u64]);
    let slots = match task.family {
        Family::Stack2d => Slots::Stack(stack::reset(task.variant, &mut rng)),
        Family::Wipe2d => Slots::Wipe(wipe::reset(task.variant, &mut rng)),
        Family::Book2d => Slots::Book(book::reset(task.variant, &mut rng)),
        Family::Scoop2d => Slots::Scoop(scoop::reset(task.variant, &mut rng)),
        Family::Draw2d => Slots::Draw(draw::reset(&mut rng)),
    };
    EnvState {
        task: *task,
        gripper: HOME,
        tool_engaged: false,
        t: 0,
        slots,
    }
}

/// Advance one low-level step. Magnitudes are clamped, never rejected.
pub fn step(state: &EnvState, action: [f64; 2]) -> (EnvState, StepEvent) {
    let before = observe(state);
    let mut next = state.clone();
    let delta = [clamp_action(action[0]), clamp_action(action[1])];
    let sub = [delta[0] / SUBSTEPS as f64, delta[1] / SUBSTEPS as f64];
    for _ in 0..SUBSTEPS {
        let prev = next.gripper;
        next.gripper = clamp01([prev[0] + sub[0], prev[1] + sub[1]]);
        let g = next.gripper;
        let mut engaged = next.tool_engaged;
        match &mut next.slots {
            Slots::Stack(s) => stack::substep(s, g),
            Slots::Wipe(s) => wipe::substep(s, g, &mut engaged),
            Slots::Book(s) => book::substep(s, prev, g, &mut engaged),
            Slots::Scoop(s) => scoop::substep(s, g, &mut engaged),
            Slots::Draw(s) => draw::substep(s, g, &mut engaged),
        }
        next.tool_engaged = engaged;
    }
    next.t = (state.t + 1).min(HORIZON);
    let after = observe(&next);
    let contact = contact_between(&state.task, &before, &after);
    (next, StepEvent { contact })
}

pub fn observe(state: &EnvState) -> Observation {
    let mut o = [0.0; OBS_DIM];
    o[0] = state.gripper[0];
    o[1] = state.gripper[1];
    o[2..2 + NUM_FAMILIES].copy_from_slice(&state.task.family.one_hot());
    let slots = &mut o[SLOT_OFFSET..];
    match &state.slots {
        Slots::Stack(s) => stack::observe(s, slots),
        Slots::Wipe(s) => wipe::observe(s, state.gripper, state.tool_engaged, slots),
        Slots::Book(s) => book::observe(s, state.tool_engaged, slots),
        Slots::Scoop(s) => scoop::observe(s, state.gripper, state.tool_engaged, slots),
        Slots::Draw(s) => draw::observe(s, state.gripper, state.tool_engaged, slots),
    }
    Observation(o)
}

/// Whether the step `prev → next` involved gripper–object contact.
pub fn contact_between(task: &TaskSpec, prev: &Observation, next: &Observation) -> bool {
    match task.family {
        Family::Stack2d => stack::contact(prev, next),
        Family::Wipe2d => wipe::contact(task.variant, next),
        Family::Book2d => book::contact(next),
        Family::Scoop2d => scoop::contact(prev, next),
        Family::Draw2d => draw::contact(next),
    }
}

/// Family micro-predicate over a clip's observations (first = clip start).
pub fn clip_outcome(task: &TaskSpec, obs: &[Observation]) -> bool {
    match task.family {
        Family::Stack2d => stack::clip_success(obs),
        Family::Wipe2d => wipe::clip_success(task.variant, obs),
        Family::Book2d => book::clip_success(obs),
        Family::Scoop2d => scoop::clip_success(obs),
        Family::Draw2d => draw::clip_success(obs),
    }
}

/// Task success judged from a complete trajectory's observations.
pub fn success(traj: &Trajectory) -> Result<bool, EnvError> {
    let obs = traj.observations();
    if obs.len() < HORIZON + 1 {
        return Err(EnvError::Incomplete {
            got: obs.len(),
            need: HORIZON + 1,
        });
    }
    Ok(success_of_observations(&traj.task, obs))
}

pub fn success_of_observations(task: &TaskSpec, obs: &[Observation]) -> bool {
    match task.family {
        Family::Stack2d => stack::success(obs),
        Family::Wipe2d => wipe::success(task.variant, obs),
        Family::Book2d => book::success(obs),
        Family::Scoop2d => scoop::success(obs),
        Family::Draw2d => draw::success(obs),
    }
}

/// Annotate the clip covering steps `clip_start .. clip_start + clip_len`
/// (observations `clip_start ..= clip_start + clip_len`).
pub fn annotate_events(traj: &Trajectory, clip_start: usize, clip_len: usize) -> Result<EventAnnotation, EnvError> {
    let obs = traj.observations();
    let steps = obs.len().saturating_sub(1);
    if clip_start + clip_len > steps {
        return Err(EnvError::ClipOutOfRange {
            start: clip_start,
            len: clip_len,
            steps,
        });
    }
    Ok(annotate_observations(&traj.task, &obs[clip_start..=clip_start + clip_len], clip_start))
}

pub fn annotate_observations(task: &TaskSpec, clip: &[Observation], start: usize) -> EventAnnotation {
    let len = clip.len().saturating_sub(1);
    let interaction = clip.windows(2).any(|w| contact_between(task, &w[0], &w[1]));
    let outcome = interaction.then(|| {
        if clip_outcome(task, clip) {
            Outcome::Success
        } else {
            Outcome::Failure
        }
    });
    EventAnnotation {
        start,
        len,
        interaction,
        outcome,
    }
}

/// Privileged subgoal for the scripted expert's proportional controller.
fn expert_target(state: &EnvState) -> [f64; 2] {
    let g = state.gripper;
    match &state.slots {
        Slots::Stack(s) => stack::expert_target(s, g),
        Slots::Wipe(s) => wipe::expert_target(s, g, state.tool_engaged),
        Slots::Book(s) => book::expert_target(s, g, state.tool_engaged),
        Slots::Scoop(s) => scoop::expert_target(s, g, state.tool_engaged),
        Slots::Draw(s) => draw::expert_target(s, g, state.tool_engaged),
    }
}

/// Proportional waypoint controller with small Gaussian action noise; it
/// simulates forward inside the chunk so every row sees its own subgoal.
pub fn scripted_expert<R: Rng + ?Sized>(state: &EnvState, rng: &mut R, noise: f64) -> ActionChunk {
    let mut sim = state.clone();
    let mut rows = [[0.0; ACTION_DIM]; CHUNK_LEN];
    for row in rows.iter_mut() {
        let target = expert_target(&sim);
        let g = sim.gripper;
        for k in 0..ACTION_DIM {
            let z: f64 = StandardNormal.sample(rng);
            row[k] = clamp_action(target[k] - g[k] + noise * z);
        }
        sim = step(&sim, *row).0;
    }
    ActionChunk(rows)
}

/// Apply a chunk, returning the `CHUNK_LEN` resulting observations.
pub fn step_chunk(state: &EnvState, chunk: &ActionChunk) -> (EnvState, Vec<Observation>, bool) {
    let mut s = state.clone();
    let mut obs = Vec::with_capacity(CHUNK_LEN);
    let mut contact = false;
    for a in chunk.rows() {
        let (n, ev) = step(&s, *a);
        contact |= ev.contact;
        obs.push(observe(&n));
        s = n;
    }
    (s, obs, contact)
}

/// Run a full episode, asking `act` for one chunk per policy call.
pub fn run_episode(
    task: &TaskSpec,
    source: crate::dataset::Source,
    mut act: impl FnMut(&EnvState, &Observation) -> ActionChunk,
) -> Trajectory {
    let mut state = reset(task);
    let mut traj = Trajectory::start(*task, observe(&state), source);
    for _ in 0..CALLS_PER_EPISODE {
        let o = observe(&state);
        let chunk = act(&state, &o);
        let (next, obs, _) = step_chunk(&state, &chunk);
        traj.push_chunk(chunk, &obs).expect("chunk length");
        state = next;
    }
    traj
}

/// Scripted-expert demonstration, labeled with ground-truth success.
pub fn expert_episode<R: Rng + ?Sized>(task: &TaskSpec, noise: f64, rng: &mut R) -> Trajectory {
    let traj = run_episode(task, crate::dataset::Source::Expert, |s, _| scripted_expert(s, rng, noise));
    let ok = success_of_observations(task, traj.observations());
    traj.with_label(crate::dataset::Label::from_bool(ok))
}
