//! The co-improvement loop: real rollouts, world-model and reward-model
//! post-training, imagined rollouts with reward labels, policy update.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::RunConfig;
use crate::dataset::{self, BatchSampler, DatasetError, Label, Selector, Source, Trajectory, TrajectoryStore, TransitionBatch};
use crate::env::{self, Family, Observation, TaskSpec, CALLS_PER_EPISODE};
use crate::evalkit;
use crate::numerics::{AdamConfig, NamedTensors, NumericsError};
use crate::policy::{assign_weights, policy_update_step, PolicyError, PolicyNet, WeightingConfig, WeightingMode};
use crate::reward::{self, ConfusionMatrix, RewardError, RewardNet, RmTrainConfig};
use crate::seed::{self, phase};
use crate::worldmodel::{self, rollout_in_model, DiffusionDynamics, EnvDynamics, NoiseSchedule, WmExample, WorldModelError, WorldModelNet};
use crate::Adam;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    WorldModel(#[from] WorldModelError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error("missing artifact {0}")]
    Missing(PathBuf),
    #[error("io: {0}")]
    Io(String),
    #[error("{0}")]
    Precondition(String),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |e| PipelineError::Io(format!("{}: {e}", path.display()))
}

/// Task seeds used for training data carry the top bit; evaluation seeds
/// never do, so the two ranges cannot overlap.
pub fn train_task_seed(master: u64, path: &[u64]) -> u64 {
    seed::derive(master, path) | (1 << 63)
}

pub fn eval_task_seed(seed_base: u64, family: Family, index: usize) -> u64 {
    (seed_base + family.index() as u64 * 1_000_000 + index as u64) & !(1 << 63)
}

fn task_for(family: Family, index: usize, seed: u64) -> TaskSpec {
    TaskSpec::new(family, index as u32 % family.num_variants(), seed).expect("variant in range")
}

fn expert_set(cfg: &RunConfig, tag: u64, per_family: usize) -> Result<TrajectoryStore> {
    let master = cfg.run.seed;
    let trajs: Vec<Trajectory> = cfg
        .run
        .families
        .iter()
        .flat_map(|&f| (0..per_family).map(move |i| (f, i)))
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(f, i)| {
            let path = [tag, f.index() as u64, i as u64];
            let task = task_for(f, i, train_task_seed(master, &path));
            let mut rng = seed::rng(master, &[tag, f.index() as u64, i as u64, 1]);
            env::expert_episode(&task, cfg.warmstart.expert_noise, &mut rng)
        })
        .collect();
    Ok(TrajectoryStore::from_trajectories(trajs)?)
}

/// Frozen expert corpus standing in for the large pretraining dataset.
pub fn build_pretrain(cfg: &RunConfig) -> Result<TrajectoryStore> {
    expert_set(cfg, phase::PRETRAIN_DATA, cfg.pretrain.per_family)
}

/// Warm-start demonstrations.
pub fn build_demos(cfg: &RunConfig) -> Result<TrajectoryStore> {
    expert_set(cfg, phase::DEMO_DATA, cfg.warmstart.demos)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PolicyTrainStats {
    pub steps: usize,
    /// Mean loss over the last (up to) 100 steps.
    pub final_loss: f64,
    pub skipped_steps: usize,
    pub transitions: usize,
}

/// Flow-matching training over the selected transitions. In binary mode
/// only success rows are drawn (zero-weight rows contribute nothing);
/// otherwise every labeled row is drawn and weighted.
pub fn train_policy(
    net: &mut PolicyNet,
    stores: &[&TrajectoryStore],
    weighting: &WeightingConfig,
    steps: usize,
    batch: usize,
    lr: f64,
    rng: &mut seed::Rng,
) -> Result<PolicyTrainStats> {
    let union = union_of(stores)?;
    let selector = match weighting.mode {
        WeightingMode::Binary => Selector::all().successes(),
        WeightingMode::Exponential => Selector::all(),
    };
    let sampler = match BatchSampler::new(&union, &selector) {
        Ok(s) => s,
        Err(DatasetError::EmptySelection) => {
            warn!("policy update skipped: no eligible transitions");
            return Ok(PolicyTrainStats::default());
        }
        Err(e) => return Err(e.into()),
    };
    let mut opt = Adam::new(&net.mlp, AdamConfig::with_lr(lr));
    let mut tail = Vec::new();
    let mut skipped = 0;
    for _ in 0..steps {
        let mut b = sampler.sample(batch, rng);
        assign_weights(&mut b, weighting)?;
        let s = policy_update_step(net, &b, &TransitionBatch::default(), &mut opt, rng)?;
        skipped += s.skipped as usize;
        tail.push(s.loss);
        if tail.len() > 100 {
            tail.remove(0);
        }
    }
    Ok(PolicyTrainStats {
        steps,
        final_loss: mean(&tail),
        skipped_steps: skipped,
        transitions: sampler.total(),
    })
}

fn union_of(stores: &[&TrajectoryStore]) -> Result<TrajectoryStore> {
    let mut u = TrajectoryStore::new();
    for s in stores {
        u.extend(s.iter().cloned())?;
    }
    Ok(u)
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct WmTrainStats {
    pub steps: usize,
    pub final_real: f64,
    pub final_pretrain: f64,
    pub final_total: f64,
}

/// Mixed-batch diffusion training: `round(batch · λ / (1 + λ))` rows from
/// the pretraining corpus, the rest from `real`.
pub fn train_wm(
    net: &mut WorldModelNet,
    sched: &NoiseSchedule,
    real: &TrajectoryStore,
    pretrain: &TrajectoryStore,
    lambda: f64,
    steps: usize,
    batch: usize,
    lr: f64,
    rng: &mut seed::Rng,
) -> Result<WmTrainStats> {
    if steps == 0 {
        return Ok(WmTrainStats::default());
    }
    let n_pre = if pretrain.is_empty() {
        0
    } else {
        ((batch as f64) * lambda / (1.0 + lambda)).round() as usize
    };
    let n_real = batch - n_pre.min(batch);
    let real_s = if n_real > 0 { Some(BatchSampler::new(real, &Selector::all())?) } else { None };
    let pre_s = if n_pre > 0 { Some(BatchSampler::new(pretrain, &Selector::all())?) } else { None };
    let mut opt = Adam::new(&net.mlp, AdamConfig::with_lr(lr));
    let mut tail: Vec<worldmodel::WmLosses> = Vec::new();
    for _ in 0..steps {
        let r: Vec<WmExample> = real_s.as_ref().map(|s| s.sample(n_real, rng).rows.iter().map(WmExample::from_row).collect()).unwrap_or_default();
        let p: Vec<WmExample> = pre_s.as_ref().map(|s| s.sample(n_pre, rng).rows.iter().map(WmExample::from_row).collect()).unwrap_or_default();
        let l = worldmodel::wm_train_step(net, &r, &p, if n_pre > 0 { lambda } else { 0.0 }, sched, &mut opt, rng)?;
        tail.push(l);
        if tail.len() > 100 {
            tail.remove(0);
        }
    }
    let avg = |f: fn(&worldmodel::WmLosses) -> f64| mean(&tail.iter().map(f).collect::<Vec<_>>());
    Ok(WmTrainStats {
        steps,
        final_real: avg(|l| l.real),
        final_pretrain: avg(|l| l.pretrain),
        final_total: avg(|l| l.total),
    })
}

/// Every model the loop carries between phases.
#[derive(Debug, Clone, PartialEq)]
pub struct Models {
    pub policy: PolicyNet,
    pub wm: WorldModelNet,
    pub sched: NoiseSchedule,
    pub rm: RewardNet,
}

impl Models {
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for bytes in [self.policy_bytes(), self.wm_bytes(), self.rm_bytes()] {
            h.update(Sha256::digest(bytes));
        }
        hex(&h.finalize())
    }

    pub fn policy_bytes(&self) -> Vec<u8> {
        let mut t = NamedTensors::new();
        self.policy.to_named(&mut t);
        t.to_bytes()
    }

    pub fn wm_bytes(&self) -> Vec<u8> {
        let mut t = NamedTensors::new();
        self.wm.to_named(&self.sched, &mut t);
        t.to_bytes()
    }

    pub fn rm_bytes(&self) -> Vec<u8> {
        let mut t = NamedTensors::new();
        self.rm.to_named(&mut t);
        t.to_bytes()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        for (name, bytes) in [("pi.ckpt", self.policy_bytes()), ("wm.ckpt", self.wm_bytes()), ("rm.ckpt", self.rm_bytes())] {
            let p = dir.join(name);
            std::fs::write(&p, bytes).map_err(io_err(&p))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let policy = PolicyNet::from_named(&read_ckpt(dir, "pi.ckpt")?)?;
        let (wm, sched) = Self::load_wm(dir)?;
        let rm = Self::load_rm(dir)?;
        Ok(Self { policy, wm, sched, rm })
    }

    pub fn load_wm(dir: &Path) -> Result<(WorldModelNet, NoiseSchedule)> {
        Ok(WorldModelNet::from_named(&read_ckpt(dir, "wm.ckpt")?)?)
    }

    pub fn load_rm(dir: &Path) -> Result<RewardNet> {
        Ok(RewardNet::from_named(&read_ckpt(dir, "rm.ckpt")?)?)
    }
}

fn read_ckpt(dir: &Path, name: &str) -> Result<NamedTensors> {
    let p = dir.join(name);
    if !p.exists() {
        return Err(PipelineError::Missing(p));
    }
    Ok(NamedTensors::load(&p)?)
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Datasets the loop grows or regenerates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Stores {
    pub pretrain: TrajectoryStore,
    pub demos: TrajectoryStore,
    pub real: TrajectoryStore,
    /// Synthetic rollouts of the latest iteration.
    pub syn: TrajectoryStore,
}

/// Warm-start stage output.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct WarmstartReport {
    pub policy: PolicyTrainStats,
    pub wm: WmTrainStats,
    pub eval_success: BTreeMap<Family, f64>,
    pub eval_mean: f64,
    pub demos: usize,
    pub pretrain: usize,
}

#[derive(Debug, Clone)]
pub struct State {
    pub models: Models,
    pub stores: Stores,
}

/// Base policy, pretrained world model and untrained reward model.
pub fn warmstart(cfg: &RunConfig) -> Result<(State, WarmstartReport)> {
    cfg.validate().map_err(|e| PipelineError::Precondition(e.to_string()))?;
    let master = cfg.run.seed;
    let demos = build_demos(cfg)?;
    let pretrain = build_pretrain(cfg)?;
    let mut pol = PolicyNet::new(&cfg.policy.hidden, &mut seed::rng(master, &[phase::INIT, 0]));
    pol.sample_steps = cfg.policy.sample_steps;
    let ps = train_policy(
        &mut pol,
        &[&demos],
        &WeightingConfig::default(),
        cfg.warmstart.steps,
        cfg.warmstart.batch,
        cfg.warmstart.lr,
        &mut seed::rng(master, &[phase::WARMSTART]),
    )?;
    info!("warm start: policy loss {:.4}", ps.final_loss);
    let sched = NoiseSchedule::cosine(cfg.wm.diffusion_steps);
    let mut wm = WorldModelNet::new(&cfg.wm.hidden, cfg.wm.diffusion_steps, &mut seed::rng(master, &[phase::INIT, 1]));
    wm.residual = cfg.wm.residual;
    let needs_wm = cfg.dream.n > 0;
    let ws = if needs_wm {
        train_wm(
            &mut wm,
            &sched,
            &pretrain,
            &TrajectoryStore::new(),
            0.0,
            cfg.pretrain.wm_steps,
            cfg.wm.batch,
            cfg.wm.lr,
            &mut seed::rng(master, &[phase::WORLD_MODEL, 0]),
        )?
    } else {
        WmTrainStats::default()
    };
    info!("warm start: world model loss {:.5}", ws.final_total);
    let rm = RewardNet::new(&cfg.reward.hidden, &mut seed::rng(master, &[phase::INIT, 2]));
    let (eval_success, eval_mean) = evaluate(&pol, cfg);
    info!("warm start: base success {eval_mean:.3}");
    let report = WarmstartReport {
        policy: ps,
        wm: ws,
        eval_success,
        eval_mean,
        demos: demos.len(),
        pretrain: pretrain.len(),
    };
    let state = State {
        models: Models { policy: pol, wm, sched, rm },
        stores: Stores {
            pretrain,
            demos,
            real: TrajectoryStore::new(),
            syn: TrajectoryStore::new(),
        },
    };
    Ok((state, report))
}

/// Per-family and mean success on the disjoint evaluation seed range.
pub fn evaluate(policy: &PolicyNet, cfg: &RunConfig) -> (BTreeMap<Family, f64>, f64) {
    let rates = evalkit::success_rates(policy, &cfg.run.families, cfg.eval.episodes, cfg.eval.seed_base);
    let m = mean(&rates.values().copied().collect::<Vec<_>>());
    (rates, m)
}

pub fn success_by_family(trajs: &[Trajectory]) -> BTreeMap<Family, f64> {
    let mut acc: BTreeMap<Family, (usize, usize)> = BTreeMap::new();
    for t in trajs {
        let e = acc.entry(t.task.family).or_default();
        e.0 += (t.label == Label::Success) as usize;
        e.1 += 1;
    }
    acc.into_iter().map(|(f, (k, n))| (f, k as f64 / n as f64)).collect()
}

/// Phase 1: `K` ground-truth-labeled rollouts per family.
pub fn phase_real_rollouts(policy: &PolicyNet, cfg: &RunConfig, iteration: usize) -> Vec<Trajectory> {
    let master = cfg.run.seed;
    let it = iteration as u64;
    let mut starts = Vec::new();
    let mut rngs = Vec::new();
    for &f in &cfg.run.families {
        for i in 0..cfg.real.k {
            let path = [phase::REAL, it, f.index() as u64, i as u64];
            let task = task_for(f, i, train_task_seed(master, &path));
            starts.push((task, env::observe(&env::reset(&task))));
            rngs.push(seed::rng(master, &[phase::REAL, it, f.index() as u64, i as u64, 1]));
        }
    }
    rollout_in_model(&EnvDynamics, policy, &starts, CALLS_PER_EPISODE, rngs, Source::Real)
        .into_iter()
        .map(|t| {
            let ok = env::success(&t).expect("env-generated trajectory");
            t.with_label(Label::from_bool(ok))
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RmStats {
    pub trained: bool,
    pub train_accuracy: f64,
    pub final_loss: f64,
    /// Classifier vs ground truth on this iteration's real rollouts.
    pub audit: ConfusionMatrix,
}

/// Phase 2: world model on `D_real` mixed with the pretraining corpus;
/// the reward model trains on the first iteration's labels only.
pub fn phase_wm_update(models: &mut Models, stores: &Stores, fresh: &[Trajectory], cfg: &RunConfig, iteration: usize) -> Result<(WmTrainStats, RmStats)> {
    let ws = phase_wm_only(models, stores, cfg, iteration)?;
    let rs = phase_rm_update(models, fresh, cfg, iteration)?;
    Ok((ws, rs))
}

pub fn phase_wm_only(models: &mut Models, stores: &Stores, cfg: &RunConfig, iteration: usize) -> Result<WmTrainStats> {
    if stores.real.is_empty() {
        return Err(PipelineError::Precondition("world-model update needs real rollouts".into()));
    }
    train_wm(
        &mut models.wm,
        &models.sched,
        &stores.real,
        &stores.pretrain,
        cfg.wm.lambda,
        cfg.wm.steps,
        cfg.wm.batch,
        cfg.wm.lr,
        &mut seed::rng(cfg.run.seed, &[phase::WORLD_MODEL, iteration as u64]),
    )
}

/// Trains at iteration 1 only; always audits against the fresh labels.
pub fn phase_rm_update(models: &mut Models, fresh: &[Trajectory], cfg: &RunConfig, iteration: usize) -> Result<RmStats> {
    let mut rs = RmStats::default();
    let refs: Vec<&Trajectory> = fresh.iter().collect();
    if iteration == 1 {
        let mut opt = Adam::new(&models.rm.mlp, AdamConfig::with_lr(cfg.reward.lr));
        let rep = reward::rm_train(
            &mut models.rm,
            &refs,
            &RmTrainConfig {
                steps: cfg.reward.steps,
                batch: cfg.reward.batch,
            },
            &mut opt,
            &mut seed::rng(cfg.run.seed, &[phase::REWARD, iteration as u64]),
        )?;
        rs.trained = true;
        rs.train_accuracy = rep.train_accuracy;
        rs.final_loss = rep.final_loss;
    }
    let probs = reward::predict_many(&models.rm, &refs)?;
    let preds: Vec<bool> = probs.iter().map(|&p| p > cfg.reward.alpha).collect();
    let labels: Vec<bool> = fresh.iter().map(|t| t.label == Label::Success).collect();
    rs.audit = reward::confusion(&preds, &labels)?;
    Ok(rs)
}

/// Phase 3: `N` imagined rollouts per family from real initial
/// observations, labeled by the reward model. Returns the labeled set.
pub fn phase_dream(models: &Models, real: &TrajectoryStore, cfg: &RunConfig, iteration: usize, n: usize) -> Result<Vec<Trajectory>> {
    let master = cfg.run.seed;
    let it = iteration as u64;
    let mut starts: Vec<(TaskSpec, Observation)> = Vec::new();
    let mut rngs = Vec::new();
    for &f in &cfg.run.families {
        let pool: Vec<&Trajectory> = real.iter().filter(|t| t.task.family == f).collect();
        if pool.is_empty() || n == 0 {
            continue;
        }
        let mut pick = seed::rng(master, &[phase::DREAM, it, f.index() as u64]);
        for i in 0..n {
            let src = pool[rand::Rng::gen_range(&mut pick, 0..pool.len())];
            starts.push((src.task, *src.initial()));
            rngs.push(seed::rng(master, &[phase::DREAM, it, f.index() as u64, i as u64, 1]));
        }
    }
    let dyn_ = DiffusionDynamics {
        denoiser: &models.wm,
        sched: &models.sched,
        mode: cfg.dream.mode,
    };
    let mut trajs = rollout_in_model(&dyn_, &models.policy, &starts, CALLS_PER_EPISODE, rngs, Source::Synthetic);
    reward::label_trajectories(&models.rm, &mut trajs, cfg.reward.alpha)?;
    for &f in &cfg.run.families {
        let any = trajs.iter().any(|t| t.task.family == f && t.label == Label::Success);
        if n > 0 && !any {
            warn!("iteration {iteration}: no synthetic successes for {f}; family left out of the synthetic mix");
        }
    }
    Ok(trajs)
}

/// Phase 4: success-weighted flow matching over `D_real+ ∪ D_syn+`.
pub fn phase_policy_update(policy: &mut PolicyNet, real: &TrajectoryStore, syn: &TrajectoryStore, cfg: &RunConfig, iteration: usize) -> Result<PolicyTrainStats> {
    let mut stores: Vec<&TrajectoryStore> = vec![syn];
    if cfg.policy.use_real {
        stores.insert(0, real);
    }
    train_policy(
        policy,
        &stores,
        &cfg.weighting(),
        cfg.policy.steps,
        cfg.policy.batch,
        cfg.policy.lr,
        &mut seed::rng(cfg.run.seed, &[phase::POLICY, iteration as u64]),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub real_success: BTreeMap<Family, f64>,
    pub d_real: usize,
    pub d_real_pos: usize,
    pub d_syn: usize,
    pub d_syn_pos: usize,
    pub syn_pos_by_family: BTreeMap<Family, usize>,
    pub wm: WmTrainStats,
    pub rm: RmStats,
    pub policy: PolicyTrainStats,
    pub eval_success: BTreeMap<Family, f64>,
    pub eval_mean: f64,
    pub seeds: BTreeMap<String, u64>,
    pub model_digest: String,
}

/// Wall-clock per phase, kept out of the report so reports stay hashable.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Timing {
    pub phases: BTreeMap<String, f64>,
}

/// World-model phase output, persisted between staged commands.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelPhaseReport {
    pub wm: WmTrainStats,
    pub rm: RmStats,
}

/// Phase 1 on the state: appends to `D_real` and returns the fresh batch.
pub fn stage_collect(state: &mut State, cfg: &RunConfig, iteration: usize) -> Result<Vec<Trajectory>> {
    let fresh = phase_real_rollouts(&state.models.policy, cfg, iteration);
    state.stores.real.extend(fresh.iter().cloned())?;
    info!("iteration {iteration}: real success {:?}", success_by_family(&fresh));
    Ok(fresh)
}

/// Phase 2 on the state; a no-op when dreaming is disabled.
pub fn stage_models(state: &mut State, fresh: &[Trajectory], cfg: &RunConfig, iteration: usize) -> Result<ModelPhaseReport> {
    if cfg.dream.n == 0 {
        return Ok(ModelPhaseReport::default());
    }
    let (wm, rm) = phase_wm_update(&mut state.models, &state.stores, fresh, cfg, iteration)?;
    Ok(ModelPhaseReport { wm, rm })
}

/// Phase 3 on the state: replaces `D_syn`.
pub fn stage_dream(state: &mut State, cfg: &RunConfig, iteration: usize) -> Result<()> {
    let syn = if cfg.dream.n > 0 {
        phase_dream(&state.models, &state.stores.real, cfg, iteration, cfg.dream.n)?
    } else {
        Vec::new()
    };
    state.stores.syn = TrajectoryStore::from_trajectories(syn)?;
    Ok(())
}

/// Phase 4 plus evaluation; assembles the iteration report.
pub fn stage_policy(state: &mut State, fresh: &[Trajectory], models: &ModelPhaseReport, cfg: &RunConfig, iteration: usize) -> Result<IterationReport> {
    let ps = phase_policy_update(&mut state.models.policy, &state.stores.real, &state.stores.syn, cfg, iteration)?;
    info!("iteration {iteration}: policy loss {:.4} over {} transitions", ps.final_loss, ps.transitions);
    let (eval_success, eval_mean) = evaluate(&state.models.policy, cfg);
    info!("iteration {iteration}: eval success {eval_mean:.3}");

    let count_pos = |s: &TrajectoryStore| s.count_where(|_, _, l| l == Label::Success);
    let mut syn_pos_by_family = BTreeMap::new();
    for &f in &cfg.run.families {
        syn_pos_by_family.insert(f, state.stores.syn.count_where(|_, ff, l| ff == f && l == Label::Success));
    }
    let master = cfg.run.seed;
    let it = iteration as u64;
    let seeds = [
        ("real", seed::derive(master, &[phase::REAL, it])),
        ("world_model", seed::derive(master, &[phase::WORLD_MODEL, it])),
        ("reward", seed::derive(master, &[phase::REWARD, it])),
        ("dream", seed::derive(master, &[phase::DREAM, it])),
        ("policy", seed::derive(master, &[phase::POLICY, it])),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    Ok(IterationReport {
        iteration,
        real_success: success_by_family(fresh),
        d_real: state.stores.real.len(),
        d_real_pos: count_pos(&state.stores.real),
        d_syn: state.stores.syn.len(),
        d_syn_pos: count_pos(&state.stores.syn),
        syn_pos_by_family,
        wm: models.wm,
        rm: models.rm.clone(),
        policy: ps,
        eval_success,
        eval_mean,
        seeds,
        model_digest: state.models.digest(),
    })
}

/// One full iteration of the four phases. Returns the fresh real batch
/// and the model-phase report alongside, for persistence.
pub fn iterate(state: &mut State, cfg: &RunConfig, iteration: usize) -> Result<(IterationReport, Timing)> {
    iterate_full(state, cfg, iteration).map(|(r, t, _, _)| (r, t))
}

fn iterate_full(state: &mut State, cfg: &RunConfig, iteration: usize) -> Result<(IterationReport, Timing, Vec<Trajectory>, ModelPhaseReport)> {
    let mut timing = Timing::default();
    let mut clock = Instant::now();
    let mut lap = |name: &str, t: &mut Timing| {
        t.phases.insert(name.into(), clock.elapsed().as_secs_f64());
        clock = Instant::now();
    };
    let fresh = stage_collect(state, cfg, iteration)?;
    lap("real", &mut timing);
    let mp = stage_models(state, &fresh, cfg, iteration)?;
    lap("world_model", &mut timing);
    stage_dream(state, cfg, iteration)?;
    lap("dream", &mut timing);
    let report = stage_policy(state, &fresh, &mp, cfg, iteration)?;
    lap("policy_and_eval", &mut timing);
    Ok((report, timing, fresh, mp))
}

pub fn iter_dir(run_dir: &Path, k: usize) -> PathBuf {
    run_dir.join(format!("iter{k}"))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(v).expect("report serializes") + "\n";
    std::fs::write(path, s).map_err(io_err(path))
}

pub fn save_warmstart(dir: &Path, state: &State, report: &WarmstartReport, cfg: &RunConfig) -> Result<()> {
    let d = iter_dir(dir, 0);
    state.models.save(&d)?;
    dataset::save(&state.stores.demos, &d.join("demos.traj.jsonl"))?;
    cfg.write_snapshot(&dir.join("config.toml")).map_err(|e| PipelineError::Io(e.to_string()))?;
    write_json(&d.join("report.json"), report)
}

pub const FRESH_FILE: &str = "fresh.traj.jsonl";
pub const MODEL_PHASE_FILE: &str = "models.json";

pub fn save_iteration(dir: &Path, state: &State, fresh: &[Trajectory], report: &IterationReport, timing: &Timing) -> Result<()> {
    let d = iter_dir(dir, report.iteration);
    state.models.save(&d)?;
    save_trajs(fresh, &d.join(FRESH_FILE))?;
    write_json(&d.join(MODEL_PHASE_FILE), &ModelPhaseReport { wm: report.wm, rm: report.rm.clone() })?;
    dataset::save(&state.stores.real, &d.join("real.traj.jsonl"))?;
    dataset::save(&state.stores.syn, &d.join("syn.traj.jsonl"))?;
    write_json(&d.join("report.json"), report)?;
    write_json(&d.join("timing.json"), timing)
}

/// Restore the state at the end of iteration `k` (0 = warm start).
pub fn load_state(dir: &Path, k: usize, cfg: &RunConfig) -> Result<State> {
    let d = iter_dir(dir, k);
    let models = Models::load(&d)?;
    let need = |p: PathBuf| if p.exists() { Ok(p) } else { Err(PipelineError::Missing(p)) };
    let (real, syn) = if k == 0 {
        (TrajectoryStore::new(), TrajectoryStore::new())
    } else {
        (dataset::load(&need(d.join("real.traj.jsonl"))?)?, dataset::load(&need(d.join("syn.traj.jsonl"))?)?)
    };
    let demos = dataset::load(&need(iter_dir(dir, 0).join("demos.traj.jsonl"))?)?;
    Ok(State {
        models,
        stores: Stores {
            pretrain: build_pretrain(cfg)?,
            demos,
            real,
            syn,
        },
    })
}

/// Full run output.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub warmstart: WarmstartReport,
    pub iterations: Vec<IterationReport>,
    pub state: State,
}

/// Warm start, then `loop.iterations` iterations; artifacts go under
/// `run_dir` when given. On error, reports written so far stay on disk.
pub fn run(cfg: &RunConfig, run_dir: Option<&Path>) -> Result<RunOutput> {
    let (state, ws) = warmstart(cfg)?;
    if let Some(d) = run_dir {
        save_warmstart(d, &state, &ws, cfg)?;
    }
    run_from(cfg, state, ws, run_dir)
}

/// Iterations starting from an existing warm-start state.
pub fn run_from(cfg: &RunConfig, mut state: State, ws: WarmstartReport, run_dir: Option<&Path>) -> Result<RunOutput> {
    let mut reports = Vec::new();
    for k in 1..=cfg.loop_.iterations {
        let (rep, timing, fresh, _) = iterate_full(&mut state, cfg, k)?;
        if let Some(d) = run_dir {
            save_iteration(d, &state, &fresh, &rep, &timing)?;
        }
        reports.push(rep);
    }
    Ok(RunOutput {
        warmstart: ws,
        iterations: reports,
        state,
    })
}

fn save_trajs(trajs: &[Trajectory], path: &Path) -> Result<()> {
    dataset::save(&TrajectoryStore::from_trajectories(trajs.iter().cloned())?, path)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|_| PipelineError::Missing(path.to_path_buf()))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))
}

/// First iteration without a report; requires a warm start on disk.
pub fn next_iteration(run_dir: &Path) -> Result<usize> {
    let ws = iter_dir(run_dir, 0).join("report.json");
    if !ws.exists() {
        return Err(PipelineError::Missing(ws));
    }
    let mut k = 1;
    while iter_dir(run_dir, k).join("report.json").exists() {
        k += 1;
    }
    Ok(k)
}

/// Latest completed iteration (0 = warm start only).
pub fn latest_iteration(run_dir: &Path) -> Result<usize> {
    Ok(next_iteration(run_dir)? - 1)
}

pub fn load_warmstart_report(run_dir: &Path) -> Result<WarmstartReport> {
    read_json(&iter_dir(run_dir, 0).join("report.json"))
}

pub fn load_iteration_report(run_dir: &Path, k: usize) -> Result<IterationReport> {
    read_json(&iter_dir(run_dir, k).join("report.json"))
}

/// The in-progress iteration `k` as far as staged commands have taken it.
struct Staged {
    k: usize,
    state: State,
    fresh: Vec<Trajectory>,
}

fn load_staged(cfg: &RunConfig, run_dir: &Path) -> Result<Staged> {
    let k = next_iteration(run_dir)?;
    let mut state = load_state(run_dir, k - 1, cfg)?;
    let p = iter_dir(run_dir, k).join(FRESH_FILE);
    if !p.exists() {
        return Err(PipelineError::Missing(p));
    }
    let fresh: Vec<Trajectory> = dataset::load(&p)?.iter().cloned().collect();
    state.stores.real.extend(fresh.iter().cloned())?;
    Ok(Staged { k, state, fresh })
}

fn load_stage_models(s: &mut Staged, run_dir: &Path) -> Result<ModelPhaseReport> {
    let d = iter_dir(run_dir, s.k);
    let mp: ModelPhaseReport = read_json(&d.join(MODEL_PHASE_FILE))?;
    (s.state.models.wm, s.state.models.sched) = Models::load_wm(&d)?;
    s.state.models.rm = Models::load_rm(&d)?;
    Ok(mp)
}

fn save_stage_models(s: &Staged, mp: &ModelPhaseReport, run_dir: &Path) -> Result<()> {
    let d = iter_dir(run_dir, s.k);
    for (name, bytes) in [("wm.ckpt", s.state.models.wm_bytes()), ("rm.ckpt", s.state.models.rm_bytes())] {
        let p = d.join(name);
        std::fs::write(&p, bytes).map_err(io_err(&p))?;
    }
    write_json(&d.join(MODEL_PHASE_FILE), mp)
}

/// Warm start as a standalone command.
pub fn staged_warmstart(cfg: &RunConfig, run_dir: &Path) -> Result<WarmstartReport> {
    let (state, ws) = warmstart(cfg)?;
    save_warmstart(run_dir, &state, &ws, cfg)?;
    Ok(ws)
}

/// Phase 1 of the next iteration. Returns the iteration index.
pub fn staged_collect(cfg: &RunConfig, run_dir: &Path) -> Result<usize> {
    let k = next_iteration(run_dir)?;
    let mut state = load_state(run_dir, k - 1, cfg)?;
    let fresh = stage_collect(&mut state, cfg, k)?;
    let d = iter_dir(run_dir, k);
    std::fs::create_dir_all(&d).map_err(io_err(&d))?;
    save_trajs(&fresh, &d.join(FRESH_FILE))?;
    Ok(k)
}

/// Phase 2 (world model, and the reward model at iteration 1).
pub fn staged_train_wm(cfg: &RunConfig, run_dir: &Path) -> Result<(usize, ModelPhaseReport)> {
    let mut s = load_staged(cfg, run_dir)?;
    let mp = stage_models(&mut s.state, &s.fresh, cfg, s.k)?;
    save_stage_models(&s, &mp, run_dir)?;
    Ok((s.k, mp))
}

/// Reward model part of phase 2 alone, from the model state the
/// iteration started with. Re-running it reproduces the same weights.
pub fn staged_train_rm(cfg: &RunConfig, run_dir: &Path) -> Result<(usize, RmStats)> {
    let mut s = load_staged(cfg, run_dir)?;
    let mut mp = match load_stage_models(&mut s, run_dir) {
        Ok(mp) => mp,
        Err(PipelineError::Missing(_)) => ModelPhaseReport::default(),
        Err(e) => return Err(e),
    };
    s.state.models.rm = load_state(run_dir, s.k - 1, cfg)?.models.rm;
    mp.rm = phase_rm_update(&mut s.state.models, &s.fresh, cfg, s.k)?;
    save_stage_models(&s, &mp, run_dir)?;
    Ok((s.k, mp.rm))
}

/// Phase 3 on the staged models.
pub fn staged_dream(cfg: &RunConfig, run_dir: &Path) -> Result<(usize, usize)> {
    let mut s = load_staged(cfg, run_dir)?;
    load_stage_models(&mut s, run_dir)?;
    stage_dream(&mut s.state, cfg, s.k)?;
    dataset::save(&s.state.stores.syn, &iter_dir(run_dir, s.k).join("syn.traj.jsonl"))?;
    Ok((s.k, s.state.stores.syn.len()))
}

/// Phase 4 and evaluation; completes the iteration on disk.
pub fn staged_train_policy(cfg: &RunConfig, run_dir: &Path) -> Result<IterationReport> {
    let mut s = load_staged(cfg, run_dir)?;
    let mp = load_stage_models(&mut s, run_dir)?;
    let p = iter_dir(run_dir, s.k).join("syn.traj.jsonl");
    if !p.exists() {
        return Err(PipelineError::Missing(p));
    }
    s.state.stores.syn = dataset::load(&p)?;
    let clock = Instant::now();
    let report = stage_policy(&mut s.state, &s.fresh, &mp, cfg, s.k)?;
    let mut timing = Timing::default();
    timing.phases.insert("policy_and_eval".into(), clock.elapsed().as_secs_f64());
    save_iteration(run_dir, &s.state, &s.fresh, &report, &timing)?;
    Ok(report)
}

/// Iterations after the latest completed one, up to `loop.iterations`.
pub fn resume(cfg: &RunConfig, run_dir: &Path) -> Result<Vec<IterationReport>> {
    let done = latest_iteration(run_dir)?;
    let mut state = load_state(run_dir, done, cfg)?;
    let mut reports = Vec::new();
    for k in done + 1..=cfg.loop_.iterations {
        let (rep, timing, fresh, _) = iterate_full(&mut state, cfg, k)?;
        save_iteration(run_dir, &state, &fresh, &rep, &timing)?;
        reports.push(rep);
    }
    Ok(reports)
}
