//! Evaluation protocols: action replay inside a model, interaction-event
//! confusion, success tables, reward threshold sweeps and ablations.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::dataset::{Label, Source, Trajectory, TrajectoryStore};
use crate::env::{self, ActionChunk, EventAnnotation, Family, Observation, TaskSpec, CALLS_PER_EPISODE, CHUNK_LEN, OBS_DIM};
use crate::pipeline::{self, PipelineError};
use crate::policy::Policy;
use crate::reward::{self, ConfusionMatrix, RewardNet};
use crate::seed::{self, Rng as SeedRng};
use crate::worldmodel::{rollout_in_model, sample_chunks, Cond, Denoiser, EnvDynamics, NoiseSchedule, SampleMode};

/// Policy calls per replay clip.
pub const CLIP_CHUNKS: usize = 5;
pub const CLIP_STEPS: usize = CLIP_CHUNKS * CHUNK_LEN;
pub const REPLAY_CLIPS: usize = 256;
pub const INTERACTION_CLIPS: usize = 50;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need {needed} clips but only {available} qualify")]
    InsufficientClips { needed: usize, available: usize },
    #[error("duplicate table entry ({tag}, {metric})")]
    DuplicateEntry { tag: String, metric: String },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Reward(#[from] reward::RewardError),
    #[error("io: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Recorded actions and true futures for five consecutive policy calls.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayClip {
    pub task: TaskSpec,
    pub start: Observation,
    /// Chunks executed before the clip, for re-simulating the start state.
    pub prefix: Vec<ActionChunk>,
    pub chunks: Vec<ActionChunk>,
    pub futures: Vec<Observation>,
    pub traj_index: usize,
    pub start_chunk: usize,
    pub annotation: EventAnnotation,
}

impl ReplayClip {
    fn from_trajectory(t: &Trajectory, traj_index: usize, k: usize) -> Self {
        let s = k * CHUNK_LEN;
        let annotation = env::annotate_events(t, s, CLIP_STEPS).expect("clip inside trajectory");
        Self {
            task: t.task,
            start: *t.obs_at_chunk(k),
            prefix: t.chunks()[..k].to_vec(),
            chunks: t.chunks()[k..k + CLIP_CHUNKS].to_vec(),
            futures: t.observations()[s + 1..=s + CLIP_STEPS].to_vec(),
            traj_index,
            start_chunk: k,
            annotation,
        }
    }

    /// Real positive: an interaction that succeeded.
    pub fn real_positive(&self) -> bool {
        self.annotation.is_success()
    }
}

/// `count` distinct clips drawn uniformly over all valid starts of real
/// trajectories, optionally only those containing an interaction.
pub fn extract_clips(store: &TrajectoryStore, count: usize, rng: &mut SeedRng, interaction_only: bool) -> Result<Vec<ReplayClip>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let mut candidates = Vec::new();
    for (i, t) in store.iter().enumerate() {
        if t.source != Source::Real || t.num_chunks() < CLIP_CHUNKS {
            continue;
        }
        for k in 0..=t.num_chunks() - CLIP_CHUNKS {
            if interaction_only {
                let a = env::annotate_events(t, k * CHUNK_LEN, CLIP_STEPS).expect("clip inside trajectory");
                if !a.interaction {
                    continue;
                }
            }
            candidates.push((i, k));
        }
    }
    if candidates.len() < count {
        return Err(EvalError::InsufficientClips {
            needed: count,
            available: candidates.len(),
        });
    }
    let mut picks = sample_indices(rng, candidates.len(), count).into_vec();
    picks.sort_unstable();
    Ok(picks
        .into_iter()
        .map(|p| {
            let (i, k) = candidates[p];
            ReplayClip::from_trajectory(store.get(i).expect("index"), i, k)
        })
        .collect())
}

/// Something that predicts a clip's futures from its start and chunks.
pub trait ReplayModel: Sync {
    /// One `CLIP_STEPS`-long predicted observation sequence per clip.
    fn replay(&self, clips: &[ReplayClip]) -> Vec<Vec<Observation>>;
}

/// The true environment, re-simulated from the task's reset state.
#[derive(Debug, Clone, Copy, Default)]
pub struct EnvReplay;

impl ReplayModel for EnvReplay {
    fn replay(&self, clips: &[ReplayClip]) -> Vec<Vec<Observation>> {
        clips
            .par_iter()
            .map(|c| {
                let mut s = env::reset(&c.task);
                for ch in &c.prefix {
                    s = env::step_chunk(&s, ch).0;
                }
                let mut out = Vec::with_capacity(CLIP_STEPS);
                for ch in &c.chunks {
                    let (next, obs, _) = env::step_chunk(&s, ch);
                    out.extend(obs);
                    s = next;
                }
                out
            })
            .collect()
    }
}

/// A learned model fed its own predictions chunk by chunk.
pub struct ModelReplay<'a, D: Denoiser + ?Sized> {
    pub denoiser: &'a D,
    pub sched: &'a NoiseSchedule,
    pub mode: SampleMode,
    pub seed: u64,
}

impl<D: Denoiser + ?Sized> ReplayModel for ModelReplay<'_, D> {
    fn replay(&self, clips: &[ReplayClip]) -> Vec<Vec<Observation>> {
        clips
            .par_chunks(32)
            .enumerate()
            .flat_map_iter(|(b, block)| {
                let mut rngs: Vec<SeedRng> = (0..block.len()).map(|i| seed::rng(self.seed, &[(b * 32 + i) as u64])).collect();
                let mut cur: Vec<Observation> = block.iter().map(|c| c.start).collect();
                let mut out: Vec<Vec<Observation>> = vec![Vec::with_capacity(CLIP_STEPS); block.len()];
                for k in 0..CLIP_CHUNKS {
                    let cond: Vec<Cond> = block
                        .iter()
                        .zip(&cur)
                        .map(|(c, o)| Cond {
                            obs: *o,
                            chunk: c.chunks[k],
                            family: c.task.family,
                        })
                        .collect();
                    let m = sample_chunks(self.denoiser, &cond, self.sched, self.mode, &mut rngs);
                    for i in 0..block.len() {
                        let f = crate::worldmodel::split_future(m.row(i));
                        cur[i] = f[CHUNK_LEN - 1];
                        out[i].extend(f);
                    }
                }
                out
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayFidelity {
    /// Mean squared error per policy call (horizon 1..=5).
    pub per_horizon: Vec<f64>,
    pub mean: f64,
}

/// Squared state error averaged over clips, steps within a call and
/// state dimensions, reported per call horizon.
pub fn replay_fidelity(model: &dyn ReplayModel, clips: &[ReplayClip]) -> ReplayFidelity {
    let preds = model.replay(clips);
    let mut per = vec![0.0; CLIP_CHUNKS];
    for (c, p) in clips.iter().zip(&preds) {
        for (s, (a, b)) in p.iter().zip(&c.futures).enumerate() {
            let se: f64 = a.0.iter().zip(&b.0).map(|(x, y)| (x - y).powi(2)).sum();
            per[s / CHUNK_LEN] += se;
        }
    }
    let denom = (clips.len().max(1) * CHUNK_LEN * OBS_DIM) as f64;
    per.iter_mut().for_each(|v| *v /= denom);
    let mean = per.iter().sum::<f64>() / CLIP_CHUNKS as f64;
    ReplayFidelity { per_horizon: per, mean }
}

/// Predicted interaction outcome vs the recorded one, per clip.
pub fn event_confusion_eval(model: &dyn ReplayModel, clips: &[ReplayClip]) -> ConfusionMatrix {
    let preds = model.replay(clips);
    let mut m = ConfusionMatrix::default();
    for (c, p) in clips.iter().zip(&preds) {
        let mut seq = Vec::with_capacity(CLIP_STEPS + 1);
        seq.push(c.start);
        seq.extend_from_slice(p);
        let pred = env::annotate_observations(&c.task, &seq, c.annotation.start).is_success();
        m.add(pred, c.real_positive());
    }
    m
}

/// `(tag, metric, value)` rows in insertion order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalTable {
    rows: Vec<(String, String, f64)>,
}

impl EvalTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, tag: &str, metric: &str, value: f64) -> Result<()> {
        if self.get(tag, metric).is_some() {
            return Err(EvalError::DuplicateEntry {
                tag: tag.into(),
                metric: metric.into(),
            });
        }
        self.rows.push((tag.into(), metric.into(), value));
        Ok(())
    }

    pub fn get(&self, tag: &str, metric: &str) -> Option<f64> {
        self.rows.iter().find(|(t, m, _)| t == tag && m == metric).map(|r| r.2)
    }

    pub fn rows(&self) -> &[(String, String, f64)] {
        &self.rows
    }

    pub fn extend(&mut self, other: &EvalTable) -> Result<()> {
        for (t, m, v) in &other.rows {
            self.push(t, m, *v)?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("tag,metric,value\n");
        for (t, m, v) in &self.rows {
            s.push_str(&format!("{t},{m},{v}\n"));
        }
        s
    }

    pub fn to_json(&self) -> String {
        let v: Vec<serde_json::Value> = self
            .rows
            .iter()
            .map(|(t, m, v)| serde_json::json!({"tag": t, "metric": m, "value": v}))
            .collect();
        serde_json::to_string_pretty(&v).expect("table serializes") + "\n"
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        let io = |e: std::io::Error| EvalError::Io(format!("{}: {e}", dir.display()));
        std::fs::create_dir_all(dir).map_err(io)?;
        std::fs::write(dir.join(format!("{stem}.csv")), self.to_csv()).map_err(io)?;
        std::fs::write(dir.join(format!("{stem}.json")), self.to_json()).map_err(io)?;
        Ok(())
    }
}

/// Ground-truth outcome of every evaluation episode, per family in order.
pub fn eval_episodes<P: Policy + ?Sized>(policy: &P, families: &[Family], episodes: usize, seed_base: u64) -> BTreeMap<Family, Vec<bool>> {
    let mut starts = Vec::new();
    let mut rngs = Vec::new();
    for &f in families {
        for i in 0..episodes {
            let t = TaskSpec::new(f, i as u32 % f.num_variants(), pipeline::eval_task_seed(seed_base, f, i)).expect("variant");
            starts.push((t, env::observe(&env::reset(&t))));
            rngs.push(seed::rng(seed_base, &[seed::phase::EVAL, f.index() as u64, i as u64]));
        }
    }
    let trajs = rollout_in_model(&EnvDynamics, policy, &starts, CALLS_PER_EPISODE, rngs, Source::Real);
    let mut out: BTreeMap<Family, Vec<bool>> = BTreeMap::new();
    for t in &trajs {
        out.entry(t.task.family).or_default().push(env::success(t).expect("complete episode"));
    }
    out
}

pub fn success_rates<P: Policy + ?Sized>(policy: &P, families: &[Family], episodes: usize, seed_base: u64) -> BTreeMap<Family, f64> {
    eval_episodes(policy, families, episodes, seed_base)
        .into_iter()
        .map(|(f, v)| (f, v.iter().filter(|&&b| b).count() as f64 / v.len().max(1) as f64))
        .collect()
}

/// Per-family success columns plus their unweighted mean.
pub fn success_table<P: Policy + ?Sized>(tag: &str, policy: &P, families: &[Family], episodes: usize, seed_base: u64) -> Result<EvalTable> {
    table_from_rates(tag, &success_rates(policy, families, episodes, seed_base))
}

pub fn table_from_rates(tag: &str, rates: &BTreeMap<Family, f64>) -> Result<EvalTable> {
    let mut t = EvalTable::new();
    for (f, r) in rates {
        t.push(tag, f.name(), *r)?;
    }
    let mean = rates.values().sum::<f64>() / rates.len().max(1) as f64;
    t.push(tag, "mean", mean)?;
    Ok(t)
}

/// Confusion of the reward model against ground truth at each threshold.
pub fn threshold_sweep(rm: &RewardNet, trajs: &[&Trajectory], alphas: &[f64]) -> Result<Vec<(f64, ConfusionMatrix)>> {
    let probs = reward::predict_many(rm, trajs)?;
    let labels: Vec<bool> = trajs.iter().map(|t| t.label == Label::Success).collect();
    alphas
        .iter()
        .map(|&a| {
            let preds = probs.iter().map(|&p| reward::classify_prob(p, a)).collect::<std::result::Result<Vec<_>, _>>()?;
            Ok((a, reward::confusion(&preds, &labels)?))
        })
        .collect()
}

/// Synthetic set keeping the first `n` rollouts of every family. Rollout
/// `i` depends only on its own seed and the first `i` start picks, so this
/// equals a fresh generation with budget `n`.
pub fn truncate_synthetic(syn: &TrajectoryStore, n: usize) -> std::result::Result<TrajectoryStore, crate::dataset::DatasetError> {
    let mut seen: BTreeMap<Family, usize> = BTreeMap::new();
    let keep = syn.iter().filter(|t| {
        let c = seen.entry(t.task.family).or_default();
        *c += 1;
        *c <= n
    });
    TrajectoryStore::from_trajectories(keep.cloned())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub variant: String,
    pub family: Family,
    pub success: f64,
}

/// Re-run the final iteration's policy update under each variant and
/// evaluate on `family`. Variants: `full`, `half_synthetic`, `no_real`.
pub fn ablation_suite(cfg: &RunConfig, run_dir: &Path, family: Family) -> Result<(EvalTable, Vec<AblationResult>)> {
    let k = cfg.loop_.iterations;
    if k == 0 {
        return Err(EvalError::Pipeline(PipelineError::Precondition("ablation needs at least one iteration".into())));
    }
    let before = pipeline::load_state(run_dir, k - 1, cfg)?;
    let after = pipeline::load_state(run_dir, k, cfg)?;
    let variants: Vec<(&str, RunConfig, TrajectoryStore)> = vec![
        ("full", cfg.clone(), after.stores.syn.clone()),
        ("half_synthetic", cfg.clone(), truncate_synthetic(&after.stores.syn, cfg.dream.n / 2).map_err(PipelineError::from)?),
        (
            "no_real",
            {
                let mut c = cfg.clone();
                c.policy.use_real = false;
                c
            },
            after.stores.syn.clone(),
        ),
    ];
    let mut table = EvalTable::new();
    let mut out = Vec::new();
    for (name, c, syn) in variants {
        let mut pol = before.models.policy.clone();
        pipeline::phase_policy_update(&mut pol, &after.stores.real, &syn, &c, k)?;
        let r = success_rates(&pol, &[family], cfg.eval.episodes, cfg.eval.seed_base)[&family];
        table.push(name, family.name(), r)?;
        out.push(AblationResult {
            variant: name.into(),
            family,
            success: r,
        });
    }
    Ok((table, out))
}

/// Held-out ground-truth-labeled rollouts of `policy`, on task seeds no
/// training phase uses.
pub fn holdout_rollouts<P: Policy + ?Sized>(policy: &P, cfg: &RunConfig, per_family: usize) -> TrajectoryStore {
    let master = cfg.run.seed;
    let mut starts = Vec::new();
    let mut rngs = Vec::new();
    for &f in &cfg.run.families {
        for i in 0..per_family {
            let path = [seed::phase::CLIPS, f.index() as u64, i as u64];
            let t = TaskSpec::new(f, i as u32 % f.num_variants(), pipeline::train_task_seed(master, &path)).expect("variant");
            starts.push((t, env::observe(&env::reset(&t))));
            rngs.push(seed::rng(master, &[seed::phase::CLIPS, f.index() as u64, i as u64, 1]));
        }
    }
    let trajs = rollout_in_model(&EnvDynamics, policy, &starts, CALLS_PER_EPISODE, rngs, Source::Real);
    TrajectoryStore::from_trajectories(trajs.into_iter().map(|t| {
        let ok = env::success(&t).expect("complete episode");
        t.with_label(Label::from_bool(ok))
    }))
    .expect("fresh trajectories")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub model: String,
    pub fidelity: ReplayFidelity,
    pub events: ConfusionMatrix,
}

/// Replay fidelity and event confusion of the warm-start world model
/// (`pretrained`) and the one after iteration `k` (`post_trained`) on
/// clips from held-out rollouts of the policy that generated iteration
/// `k`'s real data.
pub fn replay_suite(cfg: &RunConfig, run_dir: &Path, k: usize, holdout_per_family: usize) -> Result<(EvalTable, Vec<ReplayReport>)> {
    if k == 0 {
        return Err(EvalError::Pipeline(PipelineError::Precondition("replay evaluation needs a post-trained iteration".into())));
    }
    let pre = pipeline::Models::load(&pipeline::iter_dir(run_dir, 0))?;
    let post = pipeline::Models::load(&pipeline::iter_dir(run_dir, k))?;
    let behaviour = pipeline::Models::load(&pipeline::iter_dir(run_dir, k - 1))?.policy;
    let store = holdout_rollouts(&behaviour, cfg, holdout_per_family);
    let master = cfg.run.seed;
    let replay = extract_clips(&store, REPLAY_CLIPS, &mut seed::rng(master, &[seed::phase::CLIPS, 0]), false)?;
    let events = extract_clips(&store, INTERACTION_CLIPS, &mut seed::rng(master, &[seed::phase::CLIPS, 1]), true)?;
    let mut table = EvalTable::new();
    let mut out = Vec::new();
    for (name, m) in [("pretrained", &pre), ("post_trained", &post)] {
        let model = ModelReplay {
            denoiser: &m.wm,
            sched: &m.sched,
            mode: cfg.dream.mode,
            seed: seed::derive(master, &[seed::phase::CLIPS, 2]),
        };
        let fidelity = replay_fidelity(&model, &replay);
        let ev = event_confusion_eval(&model, &events);
        for (h, v) in fidelity.per_horizon.iter().enumerate() {
            table.push(name, &format!("mse_h{}", h + 1), *v)?;
        }
        table.push(name, "mse_mean", fidelity.mean)?;
        for (metric, v) in [("tp", ev.tp), ("fn", ev.fn_), ("tn", ev.tn), ("fp", ev.fp)] {
            table.push(name, metric, v as f64)?;
        }
        out.push(ReplayReport {
            model: name.into(),
            fidelity,
            events: ev,
        });
    }
    Ok((table, out))
}
