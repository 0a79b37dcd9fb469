//! End-to-end acceptance checks, run sequentially with one verdict line per
//! criterion. Set `VLAW_ACCEPTANCE_DIR` to keep (and reuse) the loop runs,
//! and `VLAW_ACCEPTANCE_ONLY=3,4` to run a subset. A failed verdict only
//! fails the process under `VLAW_ACCEPTANCE_STRICT=1`.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use proptest::test_runner::{Config as PropConfig, TestCaseError, TestRunner};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use vlaw::config::RunConfig;
use vlaw::dataset::{self, Label, Selector, Source, Trajectory, TrajectoryStore, TransitionBatch};
use vlaw::env::{self, ActionChunk, Family, Observation, TaskSpec, CHUNK_DIM, CHUNK_LEN, EXPERT_NOISE, MAX_DELTA};
use vlaw::evalkit;
use vlaw::numerics::check::{finite_difference, max_rel_err};
use vlaw::numerics::{self, adam_step, sinusoidal8, Activation, AdamConfig, ParamTensors};
use vlaw::pipeline;
use vlaw::policy::{self, FmDraw, FmSample, Policy, PolicyNet, WeightingConfig};
use vlaw::reward::{self, RewardNet};
use vlaw::seed::{self, Rng as SeedRng};
use vlaw::worldmodel::{self, Cond, NoiseSchedule, SampleMode, WmDraw, WmExample, WorldModelNet};
use vlaw::{Adam, Matrix, Mlp, Tape};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn within(elapsed: Duration, budget_s: f64) -> bool {
    elapsed.as_secs_f64() <= budget_s
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)` over all parameters.
fn norm_rel_err(a: &Mlp, b: &Mlp) -> f64 {
    let (mut d, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.tensors().iter().zip(b.tensors()) {
        for (p, q) in x.iter().zip(y.iter()) {
            d += (p - q) * (p - q);
            na += p * p;
            nb += q * q;
        }
    }
    d.sqrt() / na.max(nb).sqrt().max(1e-300)
}

fn normal(r: &mut SeedRng) -> f64 {
    StandardNormal.sample(r)
}

fn w1(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
    assert_eq!(a.len(), b.len());
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

fn obs_of(t: &TaskSpec) -> Observation {
    env::observe(&env::reset(t))
}

// 1. Gradients

fn criterion_1() -> Verdict {
    let clock = Instant::now();
    let mut r = seed::rng(1, &[]);
    let tasks: Vec<TaskSpec> = Family::ALL.iter().map(|&f| TaskSpec::new(f, 0, 5).unwrap()).collect();
    let chunk = |r: &mut SeedRng| ActionChunk::new(std::array::from_fn(|_| [r.gen_range(-MAX_DELTA..MAX_DELTA), r.gen_range(-MAX_DELTA..MAX_DELTA)]));

    let wm = WorldModelNet::new(&[16], 10, &mut r);
    let sched = NoiseSchedule::cosine(10);
    let examples: Vec<WmExample> = tasks
        .iter()
        .map(|t| {
            let o = obs_of(t);
            let mut target = [0.0; worldmodel::FUTURE_DIM];
            target.iter_mut().enumerate().for_each(|(i, x)| *x = o.0[i % o.0.len()] + 0.01 * normal(&mut r));
            WmExample {
                cond: Cond { obs: o, chunk: chunk(&mut r), family: t.family },
                target,
            }
        })
        .collect();
    let draws: Vec<WmDraw> = examples.iter().map(|_| WmDraw::sample(&sched, &mut r)).collect();
    let (_, g_wm) = worldmodel::wm_loss_with_draws(&wm, &examples, &draws, &sched, 1.0).unwrap();
    let f_wm = |m: &Mlp| {
        let n = WorldModelNet { mlp: m.clone(), ..wm.clone() };
        worldmodel::wm_loss_with_draws(&n, &examples, &draws, &sched, 1.0).unwrap().0
    };
    let fd_wm = finite_difference(&wm.mlp, &f_wm, 1e-6);
    let (e_wm, m_wm) = (norm_rel_err(&g_wm, &fd_wm), max_rel_err(&g_wm, &fd_wm, 1e-6));

    let pi = PolicyNet::new(&[16, 16], &mut r);
    let samples: Vec<FmSample> = tasks
        .iter()
        .map(|t| FmSample { obs: obs_of(t), family: t.family, action: pi.normalize(&chunk(&mut r)), weight: 1.0 })
        .collect();
    let refs: Vec<&FmSample> = samples.iter().collect();
    let fdraws: Vec<FmDraw> = samples.iter().map(|_| FmDraw::sample(&mut r)).collect();
    let (_, g_pi) = policy::fm_loss_with_draws(&pi, &refs, &fdraws, refs.len()).unwrap();
    let f_pi = |m: &Mlp| {
        let n = PolicyNet { mlp: m.clone(), ..pi.clone() };
        policy::fm_loss_with_draws(&n, &refs, &fdraws, refs.len()).unwrap().0
    };
    let fd_pi = finite_difference(&pi.mlp, &f_pi, 1e-6);
    let (e_pi, m_pi) = (norm_rel_err(&g_pi, &fd_pi), max_rel_err(&g_pi, &fd_pi, 1e-6));

    let rm = RewardNet::new(&[8], &mut r);
    let trajs: Vec<_> = tasks.iter().map(|t| env::expert_episode(t, EXPERT_NOISE, &mut seed::rng(2, &[t.family.index() as u64]))).collect();
    let feats: Vec<f64> = trajs.iter().flat_map(|t| reward::featurize(t).unwrap()).collect();
    let x = Matrix::from_vec(trajs.len(), reward::RM_INPUT_DIM, feats).unwrap();
    let y: Vec<f64> = (0..trajs.len()).map(|i| (i % 2) as f64).collect();
    let ce = |m: &Mlp| {
        numerics::grad(m, |tape: &mut Tape, vars| {
            let xin = tape.constant(x.clone());
            let z = m.forward_on_tape(tape, vars, xin);
            Ok(tape.bce_with_logits(z, y.clone()))
        })
        .unwrap()
    };
    let (_, g_rm) = ce(&rm.mlp);
    let fd_rm = finite_difference(&rm.mlp, &|m: &Mlp| ce(m).0, 1e-6);
    let (e_rm, m_rm) = (norm_rel_err(&g_rm, &fd_rm), max_rel_err(&g_rm, &fd_rm, 1e-6));

    let sizes = [wm.mlp.num_params(), pi.mlp.num_params(), rm.mlp.num_params()];
    let worst = e_wm.max(e_pi).max(e_rm);
    let t = clock.elapsed();
    verdict(
        worst < 1e-4 && sizes.iter().all(|&n| n <= 5000) && within(t, 10.0),
        format!(
            "rel err wm {e_wm:.1e} fm {e_pi:.1e} rm {e_rm:.1e} (worst entry {:.1e}); params {sizes:?}; {:.1}s",
            m_wm.max(m_pi).max(m_rm),
            t.as_secs_f64()
        ),
    )
}

// 2. Binary weights over D equal plain loss over D+

fn criterion_2() -> Verdict {
    let clock = Instant::now();
    let mut runner = TestRunner::new(PropConfig { cases: 100, failure_persistence: None, ..PropConfig::default() });
    let strategy = (proptest::collection::vec((0usize..5, proptest::bool::ANY), 1..6), 0u64..10_000);
    let worst = std::cell::Cell::new(0.0f64);
    let outcome = runner.run(&strategy, |(spec, s)| {
        let trajs = spec.iter().enumerate().map(|(i, &(f, ok))| {
            let t = TaskSpec::new(Family::ALL[f], 0, s + i as u64).unwrap();
            let full = env::expert_episode(&t, EXPERT_NOISE, &mut seed::rng(s, &[i as u64]));
            let m = 2 + (s as usize + i) % 4;
            let obs = full.observations()[..m * CHUNK_LEN + 1].to_vec();
            Trajectory::new(t, obs, full.chunks()[..m].to_vec(), Source::Real).unwrap().with_label(Label::from_bool(ok))
        });
        let store = TrajectoryStore::from_trajectories(trajs).unwrap();
        let net = PolicyNet::new(&[8], &mut seed::rng(s, &[1]));
        let mut all = TransitionBatch::all(&store, &Selector::all());
        policy::assign_weights(&mut all, &WeightingConfig::default()).unwrap();
        let plus_store = TrajectoryStore::from_trajectories(dataset::filter_success(&store, None).unwrap().into_iter().cloned()).unwrap();
        let plus = TransitionBatch::all(&plus_store, &Selector::all());
        let xs: Vec<FmSample> = all.rows.iter().map(|r| FmSample::from_row(&net, r)).collect();
        let xp: Vec<FmSample> = plus.rows.iter().map(|r| FmSample { weight: 1.0, ..FmSample::from_row(&net, r) }).collect();
        // one draw per row of D; D+ rows reuse the draws of the same transitions
        let mut r = seed::rng(s, &[2]);
        let draws: Vec<FmDraw> = xs.iter().map(|_| FmDraw::sample(&mut r)).collect();
        let plus_draws: Vec<FmDraw> = xs.iter().zip(&draws).filter(|(x, _)| x.weight > 0.0).map(|(_, d)| *d).collect();
        let (lw, gw) = policy::fm_loss_with_draws(&net, &xs.iter().collect::<Vec<_>>(), &draws, xs.len()).unwrap();
        let (lu, gu) = policy::fm_loss_with_draws(&net, &xp.iter().collect::<Vec<_>>(), &plus_draws, xp.len().max(1)).unwrap();
        let (a, b) = (lw * xs.len() as f64, lu * xp.len() as f64);
        let rel = (a - b).abs() / a.abs().max(1e-300);
        worst.set(worst.get().max(if a == 0.0 && b == 0.0 { 0.0 } else { rel }));
        if (a - b).abs() > 1e-12 * a.abs().max(1.0) {
            return Err(TestCaseError::fail(format!("loss {a} vs {b}")));
        }
        let mut gws = net.mlp.zeros_like();
        gws.add_scaled(&gw, xs.len() as f64);
        let mut gus = net.mlp.zeros_like();
        gus.add_scaled(&gu, xp.len() as f64);
        if max_rel_err(&gws, &gus, 1e-12) > 1e-9 {
            return Err(TestCaseError::fail("gradients differ"));
        }
        Ok(())
    });
    let t = clock.elapsed();
    verdict(
        outcome.is_ok() && within(t, 5.0),
        format!("100 cases, worst rel loss diff {:.1e}{}; {:.1}s", worst.get(), outcome.err().map(|e| format!(" ({e})")).unwrap_or_default(), t.as_secs_f64()),
    )
}

// 3. Diffusion sampler

fn criterion_3() -> Verdict {
    let clock = Instant::now();
    let sched = NoiseSchedule::cosine(worldmodel::DEFAULT_STEPS);
    let c = 0.37;
    let mut const_err = 0.0f64;
    for mode in [SampleMode::Deterministic, SampleMode::Stochastic] {
        let mut rngs: Vec<SeedRng> = (0..16).map(|i| seed::rng(5, &[i])).collect();
        let x = worldmodel::reverse_diffusion(3, |x, _| x.map(|_| c), &sched, mode, &mut rngs);
        const_err = const_err.max(x.data().iter().map(|v| (v - c).abs()).fold(0.0, f64::max));
    }

    // bimodal target: ±0.6 with σ = 0.1
    let target = |r: &mut SeedRng| if r.gen_bool(0.5) { 0.6 } else { -0.6 } + 0.1 * normal(r);
    let steps = sched.steps();
    let features = |x: f64, t: usize| {
        let mut v = vec![x];
        v.extend(sinusoidal8(t as f64 / steps as f64));
        v
    };
    let mut net = Mlp::init(&[9, 64, 64, 1], Activation::Relu, Activation::Identity, &mut seed::rng(6, &[]));
    let mut opt = Adam::new(&net, AdamConfig::with_lr(2e-3));
    let mut r = seed::rng(7, &[]);
    let batch = 256;
    for step in 0..6000 {
        if step == 4000 {
            opt.config.lr = 5e-4;
        }
        let mut xin = Vec::with_capacity(batch * 9);
        let mut x0s = Vec::with_capacity(batch);
        for _ in 0..batch {
            let x0 = target(&mut r);
            let t = r.gen_range(1..=steps);
            let ab = sched.alpha_bars()[t];
            let xt = ab.sqrt() * x0 + (1.0 - ab).sqrt() * normal(&mut r);
            xin.extend(features(xt, t));
            x0s.push(x0);
        }
        let x = Matrix::from_vec(batch, 9, xin).unwrap();
        let y = Matrix::from_vec(batch, 1, x0s).unwrap();
        let (_, g) = numerics::grad(&net, |tape: &mut Tape, vars| {
            let xin = tape.constant(x);
            let out = net.forward_on_tape(tape, vars, xin);
            let tg = tape.constant(y);
            let d = tape.sub(out, tg);
            Ok(tape.mean_squares(d))
        })
        .unwrap();
        adam_step(&mut net, &g, &mut opt).unwrap();
    }
    let n = 4000;
    let mut w1s = Vec::new();
    for mode in [SampleMode::Stochastic, SampleMode::Deterministic] {
        let mut rngs: Vec<SeedRng> = (0..n as u64).map(|i| seed::rng(8, &[i])).collect();
        let predict = |x: &Matrix, t: usize| {
            let rows: Vec<f64> = x.data().iter().flat_map(|&v| features(v, t)).collect();
            net.forward_batch(&Matrix::from_vec(x.rows(), 9, rows).unwrap()).unwrap()
        };
        let got = worldmodel::reverse_diffusion(1, predict, &sched, mode, &mut rngs).into_data();
        let mut g = seed::rng(9, &[]);
        let want: Vec<f64> = (0..n).map(|_| target(&mut g)).collect();
        w1s.push(w1(got, want));
    }
    let t = clock.elapsed();
    verdict(
        const_err < 1e-6 && w1s[0] < 0.1 && within(t, 180.0),
        format!("constant x0 error {const_err:.1e}; bimodal W1 ancestral {:.3}, ddim {:.3}; {:.0}s", w1s[0], w1s[1], t.as_secs_f64()),
    )
}

// 4. Flow matching on a conditional Gaussian

fn criterion_4() -> Verdict {
    let clock = Instant::now();
    let fams = [Family::Book2d, Family::Draw2d];
    let tasks: Vec<TaskSpec> = fams.iter().map(|&f| TaskSpec::new(f, 0, 3).unwrap()).collect();
    let mu = [0.4, -0.3];
    let sigma = 0.2;
    let mut net = PolicyNet::new(&[64, 64], &mut seed::rng(0, &[]));
    let mut gen = seed::rng(3, &[]);
    let mut opt = Adam::new(&net.mlp, AdamConfig::with_lr(2e-3));
    let mut r = seed::rng(1, &[]);
    for step in 0..8000 {
        match step {
            4000 => opt.config.lr = 5e-4,
            6500 => opt.config.lr = 1e-4,
            _ => {}
        }
        let batch: Vec<FmSample> = (0..256)
            .map(|i| {
                let k = i % 2;
                FmSample {
                    obs: obs_of(&tasks[k]),
                    family: fams[k],
                    action: std::array::from_fn(|_| mu[k] + sigma * normal(&mut gen)),
                    weight: 1.0,
                }
            })
            .collect();
        let (_, g, _) = policy::fm_loss_batch(&net, &batch, 256, &mut r).unwrap();
        adam_step(&mut net.mlp, &g, &mut opt).unwrap();
    }
    // the 10-step Euler default trades variance for speed; a finer grid
    // reads out the learned field itself
    net.sample_steps = 50;
    let n = 2000;
    let (mut mean_err, mut worst_w1) = (0.0f64, 0.0f64);
    for (k, t) in tasks.iter().enumerate() {
        let inputs = vec![(obs_of(t), *t); n];
        let mut rngs: Vec<SeedRng> = (0..n as u64).map(|i| seed::rng(91, &[k as u64, i])).collect();
        let out = net.act_batch(&inputs, &mut rngs);
        let mut g = seed::rng(92, &[k as u64]);
        for j in 0..CHUNK_DIM {
            let got: Vec<f64> = out.iter().map(|a| a.flat()[j] / MAX_DELTA).collect();
            let mean = got.iter().sum::<f64>() / n as f64;
            mean_err = mean_err.max((mean - mu[k]).abs());
            let want: Vec<f64> = (0..n).map(|_| mu[k] + sigma * normal(&mut g)).collect();
            worst_w1 = worst_w1.max(w1(got, want));
        }
    }
    let t = clock.elapsed();
    verdict(
        mean_err < 0.02 && worst_w1 < 0.05 && within(t, 180.0),
        format!("max mean error {mean_err:.4}, max W1 {worst_w1:.4} (action units / max delta); {:.0}s", t.as_secs_f64()),
    )
}

// Shared loop runs for 5–8

struct Runs {
    cfg: RunConfig,
    ours: PathBuf,
    base: f64,
    ours_iters: Vec<f64>,
    fbc_iters: Vec<f64>,
    elapsed: Option<Duration>,
    _tmp: Option<tempfile::TempDir>,
}

fn fbc_config(cfg: &RunConfig) -> RunConfig {
    let mut c = cfg.clone();
    c.dream.n = 0;
    c
}

fn completed(dir: &Path, cfg: &RunConfig) -> bool {
    RunConfig::load(Some(&dir.join("config.toml")), &[]).is_ok_and(|c| &c == cfg)
        && pipeline::latest_iteration(dir).is_ok_and(|k| k == cfg.loop_.iterations)
}

fn means(dir: &Path, cfg: &RunConfig) -> (f64, Vec<f64>) {
    let base = pipeline::load_warmstart_report(dir).unwrap().eval_mean;
    let it = (1..=cfg.loop_.iterations)
        .map(|k| pipeline::load_iteration_report(dir, k).unwrap().eval_mean)
        .collect();
    (base, it)
}

fn loop_runs() -> Runs {
    let cfg = RunConfig::default();
    let fbc = fbc_config(&cfg);
    let (root, tmp) = match std::env::var_os("VLAW_ACCEPTANCE_DIR") {
        Some(d) => (PathBuf::from(d), None),
        None => {
            let t = tempfile::tempdir().unwrap();
            (t.path().to_path_buf(), Some(t))
        }
    };
    let (ours, fdir) = (root.join("ours"), root.join("fbc"));
    let mut elapsed = None;
    if !(completed(&ours, &cfg) && completed(&fdir, &fbc)) {
        for d in [&ours, &fdir] {
            let _ = std::fs::remove_dir_all(d);
            std::fs::create_dir_all(d).unwrap();
        }
        let clock = Instant::now();
        let (state, ws) = pipeline::warmstart(&cfg).unwrap();
        pipeline::save_warmstart(&ours, &state, &ws, &cfg).unwrap();
        pipeline::save_warmstart(&fdir, &state, &ws, &fbc).unwrap();
        pipeline::run_from(&fbc, state.clone(), ws.clone(), Some(&fdir)).unwrap();
        pipeline::run_from(&cfg, state, ws, Some(&ours)).unwrap();
        elapsed = Some(clock.elapsed());
    }
    let (base, ours_iters) = means(&ours, &cfg);
    let (_, fbc_iters) = means(&fdir, &fbc);
    Runs {
        cfg,
        ours,
        base,
        ours_iters,
        fbc_iters,
        elapsed,
        _tmp: tmp,
    }
}

fn criterion_5(runs: &Runs) -> Verdict {
    let clock = Instant::now();
    let k = runs.cfg.loop_.iterations;
    let (_, reports) = evalkit::replay_suite(&runs.cfg, &runs.ours, k, 40).unwrap();
    let (pre, post) = (&reports[0], &reports[1]);
    let fp_ok = post.events.fp < pre.events.fp && post.events.fp as f64 <= 0.6 * pre.events.fp as f64;
    let mse_ok = post.fidelity.per_horizon.iter().zip(&pre.fidelity.per_horizon).all(|(a, b)| a < b);
    let t = clock.elapsed();
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.2e}")).collect::<Vec<_>>().join(" ");
    verdict(
        fp_ok && mse_ok && within(t, 900.0),
        format!(
            "FP expert-only {} vs mixed {}; mse expert-only [{}] vs mixed [{}]; {:.0}s",
            pre.events.fp,
            post.events.fp,
            fmt(&pre.fidelity.per_horizon),
            fmt(&post.fidelity.per_horizon),
            t.as_secs_f64()
        ),
    )
}

fn criterion_6(runs: &Runs) -> Verdict {
    let clock = Instant::now();
    let cfg = &runs.cfg;
    let rm = pipeline::Models::load_rm(&pipeline::iter_dir(&runs.ours, 1)).unwrap();
    let base = pipeline::Models::load(&pipeline::iter_dir(&runs.ours, 0)).unwrap().policy;
    let per_family = 40 / cfg.run.families.len();
    let held = evalkit::holdout_rollouts(&base, cfg, per_family);
    let trajs: Vec<_> = held.iter().take(40).collect();
    let sweep = evalkit::threshold_sweep(&rm, &trajs, &[0.5, 0.8]).unwrap();
    let (argmax, strict) = (sweep[0].1, sweep[1].1);
    let fp_gain = argmax.fp as i64 - strict.fp as i64;
    let tp_loss = argmax.tp as i64 - strict.tp as i64;
    let t = clock.elapsed();
    verdict(
        fp_gain > 0 && tp_loss <= fp_gain && within(t, 60.0),
        format!(
            "{} trajectories; alpha 0.5 tp {} fp {}; alpha 0.8 tp {} fp {}; {:.0}s",
            trajs.len(),
            argmax.tp,
            argmax.fp,
            strict.tp,
            strict.fp,
            t.as_secs_f64()
        ),
    )
}

fn criterion_7(runs: &Runs) -> Verdict {
    let (o1, o2) = (runs.ours_iters[0], runs.ours_iters[1]);
    let f2 = runs.fbc_iters[1];
    let b = runs.base;
    let fams = runs.cfg.run.families.len();
    let ordered = o2 > f2 && f2 > b && o2 - b >= 0.10 && o2 > o1;
    let timing = match runs.elapsed {
        Some(t) => format!("{:.0}s for both methods", t.as_secs_f64()),
        None => "reused runs".into(),
    };
    let in_budget = runs.elapsed.map_or(true, |t| within(t, 45.0 * 60.0));
    verdict(
        ordered && fams >= 3 && runs.cfg.eval.episodes >= 200 && in_budget,
        format!("base {b:.3}, filtered-bc iter2 {f2:.3}, ours iter1 {o1:.3}, ours iter2 {o2:.3} ({fams} families x {} episodes); {timing}", runs.cfg.eval.episodes),
    )
}

fn criterion_8(runs: &Runs) -> Verdict {
    let clock = Instant::now();
    let (_, res) = evalkit::ablation_suite(&runs.cfg, &runs.ours, Family::Draw2d).unwrap();
    let get = |v: &str| res.iter().find(|r| r.variant == v).unwrap().success;
    let (full, half, no_real) = (get("full"), get("half_synthetic"), get("no_real"));
    let t = clock.elapsed();
    verdict(
        half < full && no_real < full && within(t, 900.0),
        format!("draw2d full {full:.3}, N/2 {half:.3}, without real successes {no_real:.3}; {:.0}s", t.as_secs_f64()),
    )
}

// 9. Reproducibility across worker counts

fn repro_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.run.families = vec![Family::Book2d, Family::Scoop2d, Family::Wipe2d];
    c.run.seed = 3;
    c.warmstart.steps = 1500;
    c.pretrain.per_family = 60;
    c.pretrain.wm_steps = 600;
    c.wm.steps = 600;
    c.wm.hidden = vec![128, 128];
    c.policy.steps = 300;
    c.policy.hidden = vec![128, 128];
    c.real.k = 20;
    c.dream.n = 150;
    c.eval.episodes = 50;
    c
}

fn artifacts(dir: &Path, iterations: usize) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for k in 0..=iterations {
        for name in ["report.json", "pi.ckpt", "wm.ckpt", "rm.ckpt"] {
            let p = pipeline::iter_dir(dir, k).join(name);
            out.push((format!("iter{k}/{name}"), std::fs::read(&p).unwrap()));
        }
    }
    out
}

fn criterion_9() -> Verdict {
    let clock = Instant::now();
    let cfg = repro_config();
    let mut runs = Vec::new();
    for jobs in [1, 3] {
        let dir = tempfile::tempdir().unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build().unwrap();
        pool.install(|| pipeline::run(&cfg, Some(dir.path()))).unwrap();
        runs.push(artifacts(dir.path(), cfg.loop_.iterations));
    }
    let differing: Vec<&str> = runs[0].iter().zip(&runs[1]).filter(|(a, b)| a.1 != b.1).map(|(a, _)| a.0.as_str()).collect();
    let t = clock.elapsed();
    verdict(
        differing.is_empty() && within(t, 600.0),
        format!(
            "{} artifacts compared across 1 and 3 workers, {} differ{}; {:.0}s",
            runs[0].len(),
            differing.len(),
            if differing.is_empty() { String::new() } else { format!(" ({})", differing.join(", ")) },
            t.as_secs_f64()
        ),
    )
}

fn selected() -> Vec<usize> {
    match std::env::var("VLAW_ACCEPTANCE_ONLY") {
        Ok(s) => s.split(',').filter_map(|x| x.trim().parse().ok()).collect(),
        Err(_) => (1..=9).collect(),
    }
}

fn main() {
    let only = selected();
    let mut failed = Vec::new();
    let mut emit = |n: usize, name: &str, check: &dyn Fn() -> Verdict| {
        if !only.contains(&n) {
            return;
        }
        let v = check();
        let tag = if v.pass { "PASS" } else { "FAIL" };
        let mut out = std::io::stdout().lock();
        writeln!(out, "criterion {n} {name}: {tag} ({})", v.detail).unwrap();
        out.flush().unwrap();
        if !v.pass {
            failed.push(n);
        }
    };
    emit(1, "gradient correctness", &criterion_1);
    emit(2, "binary weighting identity", &criterion_2);
    emit(3, "diffusion sampler", &criterion_3);
    emit(4, "flow matching projection", &criterion_4);
    if only.iter().any(|n| (5..=8).contains(n)) {
        let runs = loop_runs();
        emit(5, "over-optimism direction", &|| criterion_5(&runs));
        emit(6, "reward thresholding direction", &|| criterion_6(&runs));
        emit(7, "end-to-end ordering", &|| criterion_7(&runs));
        emit(8, "ablation direction", &|| criterion_8(&runs));
    }
    emit(9, "reproducibility", &criterion_9);
    let ran = only.iter().filter(|n| (1..=9).contains(*n)).count();
    println!("acceptance: {} of {ran} criteria passed, failed {failed:?}", ran - failed.len());
    if !failed.is_empty() && std::env::var_os("VLAW_ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
