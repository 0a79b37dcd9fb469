use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use vlaw::config::{ConfigError, RunConfig};
use vlaw::env::Family;
use vlaw::evalkit::{self, EvalError};
use vlaw::pipeline::{self, PipelineError};

#[derive(Parser, Debug)]
#[command(name = "vlaw", version, about = "Policy / world-model co-improvement on a 2D manipulation suite")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML config; `default` means built-in defaults. Without it, the run
    /// directory's snapshot is used when present.
    #[arg(long, global = true)]
    config: Option<String>,
    #[arg(long, global = true, default_value = "runs/default")]
    run_dir: PathBuf,
    /// Master seed (overrides `run.seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Dotted override, e.g. `dream.N=250`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the base policy on demonstrations and pretrain the world model.
    Warmstart,
    /// Real rollouts for the next iteration.
    Collect,
    /// World-model post-training (and the reward model at iteration 1).
    TrainWm,
    /// Reward model alone for the in-progress iteration.
    TrainRm,
    /// Imagined rollouts labeled by the reward model.
    Dream,
    /// Policy update and evaluation; completes the iteration.
    TrainPolicy,
    /// Warm start (if needed) and all remaining iterations.
    Loop,
    /// Success table for a completed iteration.
    Eval {
        /// Iteration to evaluate (default: latest).
        #[arg(long)]
        iter: Option<usize>,
    },
    /// Replay fidelity and event confusion of the world models.
    ReplayEval {
        #[arg(long)]
        iter: Option<usize>,
        /// Held-out rollouts per family to draw clips from.
        #[arg(long, default_value_t = 40)]
        holdout: usize,
    },
    /// Re-run the final policy update without half the synthetic data or
    /// without the real rollouts.
    Ablate {
        #[arg(long, default_value = "draw2d")]
        family: Family,
    },
}

#[derive(Debug)]
enum Failure {
    Config(ConfigError),
    Missing(PathBuf),
    Other(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Missing(_) => 3,
            Failure::Other(_) => 1,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(e) => write!(f, "config error: {e}"),
            Failure::Missing(p) => write!(f, "missing artifact: {}", p.display()),
            Failure::Other(s) => write!(f, "{s}"),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e)
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Missing(p) => Failure::Missing(p),
            other => Failure::Other(other.to_string()),
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Pipeline(p) => p.into(),
            other => Failure::Other(other.to_string()),
        }
    }
}

fn init_logging() {
    let env = env_logger::Env::default().default_filter_or("info");
    env_logger::Builder::from_env(env)
        .format(|buf, rec| writeln!(buf, "{} {:<5} {}", buf.timestamp_millis(), rec.level(), rec.args()))
        .target(env_logger::Target::Stderr)
        .init();
}

fn load_config(c: &Common) -> Result<RunConfig, Failure> {
    let snapshot = c.run_dir.join("config.toml");
    let path: Option<PathBuf> = match c.config.as_deref() {
        Some("default") => None,
        Some(p) => {
            let p = PathBuf::from(p);
            if !p.exists() {
                return Err(ConfigError::Io(format!("{}: no such config file", p.display())).into());
            }
            Some(p)
        }
        None => snapshot.exists().then_some(snapshot),
    };
    let mut overrides = c.overrides.clone();
    if let Some(s) = c.seed {
        overrides.push(format!("run.seed={s}"));
    }
    Ok(RunConfig::load(path.as_deref(), &overrides)?)
}

fn ensure_dir(p: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(p).map_err(|e| Failure::Other(format!("{}: {e}", p.display())))
}

fn warn_on_snapshot_drift(cfg: &RunConfig, run_dir: &Path) {
    let snap = run_dir.join("config.toml");
    if let Ok(prev) = RunConfig::load(Some(&snap), &[]) {
        if &prev != cfg {
            warn!("effective config differs from the run's snapshot {}", snap.display());
        }
    }
}

fn dispatch(cli: &Cli) -> Result<(), Failure> {
    let cfg = load_config(&cli.common)?;
    let dir = cli.common.run_dir.as_path();
    match &cli.cmd {
        Command::Warmstart => {
            ensure_dir(dir)?;
            let ws = pipeline::staged_warmstart(&cfg, dir)?;
            info!("base policy success {:.3}", ws.eval_mean);
        }
        Command::Collect => {
            warn_on_snapshot_drift(&cfg, dir);
            let k = pipeline::staged_collect(&cfg, dir)?;
            info!("collected real rollouts for iteration {k}");
        }
        Command::TrainWm => {
            warn_on_snapshot_drift(&cfg, dir);
            let (k, mp) = pipeline::staged_train_wm(&cfg, dir)?;
            info!("iteration {k}: world model loss {:.5}, reward audit {}", mp.wm.final_total, mp.rm.audit);
        }
        Command::TrainRm => {
            warn_on_snapshot_drift(&cfg, dir);
            let (k, rs) = pipeline::staged_train_rm(&cfg, dir)?;
            info!("iteration {k}: reward model trained={} audit {}", rs.trained, rs.audit);
        }
        Command::Dream => {
            warn_on_snapshot_drift(&cfg, dir);
            let (k, n) = pipeline::staged_dream(&cfg, dir)?;
            info!("iteration {k}: {n} imagined rollouts");
        }
        Command::TrainPolicy => {
            warn_on_snapshot_drift(&cfg, dir);
            let r = pipeline::staged_train_policy(&cfg, dir)?;
            info!("iteration {}: eval success {:.3}", r.iteration, r.eval_mean);
        }
        Command::Loop => {
            ensure_dir(dir)?;
            if pipeline::next_iteration(dir).is_err() {
                pipeline::run(&cfg, Some(dir))?;
            } else {
                warn_on_snapshot_drift(&cfg, dir);
                pipeline::resume(&cfg, dir)?;
            }
            let last = pipeline::latest_iteration(dir)?;
            info!("run complete through iteration {last}");
        }
        Command::Eval { iter } => {
            let k = match iter {
                Some(k) => *k,
                None => pipeline::latest_iteration(dir)?,
            };
            let models = pipeline::Models::load(&pipeline::iter_dir(dir, k))?;
            let tag = format!("iter{k}");
            let table = evalkit::success_table(&tag, &models.policy, &cfg.run.families, cfg.eval.episodes, cfg.eval.seed_base)?;
            let out = dir.join("eval");
            table.write(&out, &format!("success_{tag}"))?;
            cfg.write_snapshot(&out.join(format!("config_{tag}.toml")))?;
            info!("{tag}: mean success {:.3}", table.get(&tag, "mean").unwrap_or(0.0));
        }
        Command::ReplayEval { iter, holdout } => {
            let k = match iter {
                Some(k) => *k,
                None => pipeline::latest_iteration(dir)?,
            };
            let (table, reports) = evalkit::replay_suite(&cfg, dir, k, *holdout)?;
            let out = dir.join("eval");
            table.write(&out, &format!("replay_iter{k}"))?;
            cfg.write_snapshot(&out.join(format!("config_replay_iter{k}.toml")))?;
            for r in reports {
                info!("{}: replay mse {:.6}, events {}", r.model, r.fidelity.mean, r.events);
            }
        }
        Command::Ablate { family } => {
            let (table, results) = evalkit::ablation_suite(&cfg, dir, *family)?;
            let out = dir.join("eval");
            table.write(&out, &format!("ablation_{}", family.name()))?;
            cfg.write_snapshot(&out.join(format!("config_ablation_{}.toml", family.name())))?;
            for r in results {
                info!("{}: {} success {:.3}", r.variant, r.family, r.success);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging();
    if let Some(j) = cli.common.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(j.max(1)).build_global() {
            eprintln!("cannot size worker pool: {e}");
            return ExitCode::from(1);
        }
    }
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.code())
        }
    }
}
