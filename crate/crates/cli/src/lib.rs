//! `scoop` command line: training, fine-tuning, evaluation, replay and the
//! teleop server.

pub mod config;
pub mod server;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use config::ExperimentConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scoop_core::env::{Curriculum, EpisodeState, Mode, OBS_DIM};
use scoop_core::eval::{
    object_specs_by_name, rows_to_csv, run_ablation_suite, run_angular_eval, run_multi_eval, run_object_type_eval,
    write_rows, AblationRow, MultiController, MultiReport,
};
use scoop_core::meta::{expert_action, ExpertId, Experts};
use scoop_core::nn::{Checkpoint, PolicyNet};
use scoop_core::rewards::{Ablation, RewardWeights};
use scoop_core::sti;
use scoop_core::teleop::{DirFrame, TeleopSession};
use scoop_core::trace::{replay_event_log, Trace, TraceWriter};
use scoop_core::train::{train, TrainConfig, TrainInputs, TrainOutcome};
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Arc;

#[derive(Debug, Parser)]
#[command(name = "scoop", version, about = "Scoop-and-toss skill training, evaluation and teleoperation")]
pub struct Cli {
    /// TOML experiment config; command-line flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExpertMode {
    ScoopToss,
    Approach,
}

impl From<ExpertMode> for Mode {
    fn from(m: ExpertMode) -> Self {
        match m {
            ExpertMode::ScoopToss => Mode::ScoopToss,
            ExpertMode::Approach => Mode::Approach,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Frame {
    World,
    Body,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Seed for initialization, environments and sampling.
    #[arg(long)]
    pub seed: u64,
    /// Output directory (checkpoints, metrics, resolved config).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Environment-step budget.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Stop once the windowed success rate reaches this value.
    #[arg(long)]
    pub target_success: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a scoop-toss or approach expert from scratch.
    TrainExpert {
        #[arg(value_enum)]
        mode: ExpertMode,
        #[command(flatten)]
        run: RunArgs,
        /// Start from an existing checkpoint instead of a fresh network.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Fine-tune an expert from states visited by the other expert.
    FinetuneSti {
        /// Mode of the policy being fine-tuned.
        #[arg(value_enum)]
        mode: ExpertMode,
        /// Checkpoint of the policy to fine-tune.
        #[arg(long)]
        policy: PathBuf,
        /// Checkpoint of the other expert, whose rollouts fill the buffer.
        #[arg(long)]
        source: PathBuf,
        /// Number of robot states to collect.
        #[arg(long)]
        buffer_size: Option<usize>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train the expert-selecting meta-policy over two frozen experts.
    TrainMeta {
        #[arg(long)]
        scoop_toss: Option<PathBuf>,
        #[arg(long)]
        approach: Option<PathBuf>,
        /// Pay a flat bonus per load instead of the increasing one.
        #[arg(long)]
        no_extra_bonus: bool,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Evaluation protocols.
    Eval {
        #[command(subcommand)]
        protocol: EvalCommand,
    },
    /// Re-simulate a dumped trace and print its event log.
    Replay {
        trace: PathBuf,
        /// Write the event log here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Roll out one expert episode and dump it as a trace.
    Trace {
        #[arg(value_enum)]
        mode: ExpertMode,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Live joystick teleoperation.
    Teleop {
        #[command(subcommand)]
        action: TeleopCommand,
    },
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Eight 45-degree placement sectors around the robot.
    Angular {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Report path; `.json` selects JSON, anything else CSV.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Frontal placements of each object type.
    Objects {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated object names (default: all presets).
        #[arg(long, value_delimiter = ',')]
        objects: Option<Vec<String>>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Many cubes spread around the robot, collected under a time limit.
    Multi {
        #[arg(long)]
        scoop_toss: Option<PathBuf>,
        #[arg(long)]
        approach: Option<PathBuf>,
        /// Meta-policy checkpoint; without it `--pinned` picks the expert.
        #[arg(long)]
        meta: Option<PathBuf>,
        #[arg(long, value_enum, conflicts_with = "meta")]
        pinned: Option<ExpertMode>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        objects: Option<usize>,
        #[arg(long)]
        seconds: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train and score the reward ablations against the baseline.
    Ablation {
        /// Comma-separated training seeds.
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        /// Comma-separated variants (default: no-height,no-exp-dist,no-load-bonus).
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        trials: Option<usize>,
    },
}

#[derive(Debug, Subcommand)]
pub enum TeleopCommand {
    /// Serve the `/teleop` WebSocket endpoint.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long)]
        scoop_toss: Option<PathBuf>,
        #[arg(long)]
        approach: Option<PathBuf>,
        /// Cubes scattered around the robot.
        #[arg(long, default_value_t = 5)]
        objects: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Frame the joystick direction is read in.
        #[arg(long, value_enum)]
        frame: Option<Frame>,
        /// Log the session as a replayable trace.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
}

/// Parses arguments and runs; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

pub fn dispatch(cli: Cli) -> Result<()> {
    let file = cli.config.as_deref();
    match cli.command {
        Command::TrainExpert { mode, run, init } => train_expert(file, mode.into(), run, init),
        Command::FinetuneSti {
            mode,
            policy,
            source,
            buffer_size,
            run,
        } => finetune_sti(file, mode.into(), &policy, &source, buffer_size, run),
        Command::TrainMeta {
            scoop_toss,
            approach,
            no_extra_bonus,
            run,
        } => train_meta(file, scoop_toss, approach, no_extra_bonus, run),
        Command::Eval { protocol } => eval(file, protocol),
        Command::Replay { trace, out } => {
            let log = replay_event_log(&Trace::load(&trace)?)?;
            match out {
                Some(p) => std::fs::write(p, log)?,
                None => print!("{log}"),
            }
            Ok(())
        }
        Command::Trace {
            mode,
            checkpoint,
            seed,
            out,
        } => dump_trace(file, mode.into(), &checkpoint, seed, &out),
        Command::Teleop { action } => teleop(file, action),
    }
}

fn apply_run_args(cfg: &mut ExperimentConfig, command: &str, run: &RunArgs, default_dir: String) -> PathBuf {
    cfg.command = command.to_string();
    cfg.train.seed = run.seed;
    cfg.seeds = vec![run.seed];
    if let Some(s) = run.steps {
        cfg.train.max_env_steps = s;
    }
    if let Some(t) = run.target_success {
        cfg.train.target_success = Some(t);
    }
    let dir = run
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(default_dir));
    cfg.out_dir = Some(dir.clone());
    dir
}

fn load_policy(path: &Path) -> Result<Checkpoint<f32>> {
    Checkpoint::<f32>::load(path, Some(OBS_DIM)).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn report(outcome: &TrainOutcome, dir: &Path) {
    let last = outcome.last();
    println!(
        "{} updates, {} env steps, {:.0} s, success {:.3}, target reached: {}; outputs in {}",
        outcome.updates,
        outcome.env_steps,
        outcome.wall_seconds,
        last.map_or(0.0, |r| r.success_rate),
        outcome.reached_target,
        dir.display()
    );
}

fn train_expert(file: Option<&Path>, mode: Mode, run: RunArgs, init: Option<PathBuf>) -> Result<()> {
    let mut cfg = ExperimentConfig::resolve(mode, file)?;
    cfg.train.mode = mode;
    let dir = apply_run_args(&mut cfg, "train-expert", &run, format!("{}-seed{}", mode.name(), run.seed));
    let (init_net, lineage) = match &init {
        Some(p) => {
            cfg.checkpoints.insert("init".into(), p.clone());
            let ck = load_policy(p)?;
            (Some(ck.net), ck.seed_lineage)
        }
        None => (None, Vec::new()),
    };
    cfg.write(&dir)?;
    let out = train(
        &cfg.train,
        TrainInputs {
            init_net,
            lineage,
            out_dir: Some(dir.clone()),
            ..Default::default()
        },
    )?;
    report(&out, &dir);
    Ok(())
}

fn finetune_sti(
    file: Option<&Path>,
    mode: Mode,
    policy: &Path,
    source: &Path,
    buffer_size: Option<usize>,
    run: RunArgs,
) -> Result<()> {
    let source_mode = match mode {
        Mode::ScoopToss => Mode::Approach,
        _ => Mode::ScoopToss,
    };
    let mut cfg = ExperimentConfig::resolve_with(TrainConfig::for_finetune(mode, run.seed), file)?;
    if let Some(n) = buffer_size {
        cfg.sti.buffer_size = n;
    }
    let dir = apply_run_args(&mut cfg, "finetune-sti", &run, format!("{}-sti-seed{}", mode.name(), run.seed));
    cfg.checkpoints.insert("policy".into(), policy.to_path_buf());
    cfg.checkpoints.insert("source".into(), source.to_path_buf());
    cfg.write(&dir)?;
    let target = load_policy(policy)?;
    let src = load_policy(source)?;
    let buf = sti::collect(&src.net, source_mode, cfg.sti.buffer_size, &cfg.train.env, run.seed)?;
    buf.save(&dir.join("sti.bin"))?;
    let mut lineage = target.seed_lineage.clone();
    lineage.push(run.seed);
    let out = train(
        &cfg.train,
        TrainInputs {
            init_net: Some(target.net),
            lineage,
            sti: Some(Arc::new(buf)),
            out_dir: Some(dir.clone()),
            ..Default::default()
        },
    )?;
    report(&out, &dir);
    Ok(())
}

fn expert_paths(cfg: &mut ExperimentConfig, scoop_toss: Option<PathBuf>, approach: Option<PathBuf>) -> Result<(PathBuf, PathBuf)> {
    let st = scoop_toss.or_else(|| cfg.checkpoints.get("scoop_toss").cloned());
    let ap = approach.or_else(|| cfg.checkpoints.get("approach").cloned());
    match (st, ap) {
        (Some(st), Some(ap)) => {
            cfg.checkpoints.insert("scoop_toss".into(), st.clone());
            cfg.checkpoints.insert("approach".into(), ap.clone());
            Ok((st, ap))
        }
        _ => bail!("both expert checkpoints are required (--scoop-toss and --approach)"),
    }
}

fn train_meta(
    file: Option<&Path>,
    scoop_toss: Option<PathBuf>,
    approach: Option<PathBuf>,
    no_extra_bonus: bool,
    run: RunArgs,
) -> Result<()> {
    let mut cfg = ExperimentConfig::resolve(Mode::Meta, file)?;
    cfg.train.mode = Mode::Meta;
    let (st, ap) = expert_paths(&mut cfg, scoop_toss, approach)?;
    if no_extra_bonus {
        cfg.train.rewards.flat_meta_bonus = true;
    }
    let dir = apply_run_args(&mut cfg, "train-meta", &run, format!("meta-seed{}", run.seed));
    let experts = Arc::new(Experts::load(&st, &ap)?);
    cfg.write(&dir)?;
    let out = train(
        &cfg.train,
        TrainInputs {
            experts: Some(experts),
            lineage: vec![run.seed],
            out_dir: Some(dir.clone()),
            ..Default::default()
        },
    )?;
    report(&out, &dir);
    Ok(())
}

fn write_provenance(mut cfg: ExperimentConfig, command: &str, out: &Path) -> Result<()> {
    cfg.command = command.to_string();
    let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = out.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(format!("{name}.experiment.toml")), toml::to_string_pretty(&cfg)?)?;
    Ok(())
}

fn eval(file: Option<&Path>, protocol: EvalCommand) -> Result<()> {
    match protocol {
        EvalCommand::Angular {
            checkpoint,
            out,
            trials,
            seed,
        } => {
            let mut cfg = ExperimentConfig::resolve(Mode::ScoopToss, file)?;
            cfg.eval.trials_per_sector = trials.unwrap_or(cfg.eval.trials_per_sector);
            cfg.eval.seed = seed.unwrap_or(cfg.eval.seed);
            cfg.checkpoints.insert("policy".into(), checkpoint.clone());
            let ck = load_policy(&checkpoint)?;
            let rep = run_angular_eval(&ck.net, &cfg.train.env, cfg.eval.trials_per_sector, cfg.eval.seed)?;
            rep.write(&out)?;
            write_provenance(cfg, "eval angular", &out)?;
            println!(
                "frontal load {:.1}%, rear load {:.1}%; report in {}",
                rep.frontal_load_pct(),
                rep.rear_load_pct(),
                out.display()
            );
        }
        EvalCommand::Objects {
            checkpoint,
            out,
            objects,
            trials,
            seed,
        } => {
            let mut cfg = ExperimentConfig::resolve(Mode::ScoopToss, file)?;
            if let Some(o) = objects {
                cfg.objects = o;
            }
            cfg.eval.object_trials = trials.unwrap_or(cfg.eval.object_trials);
            cfg.eval.seed = seed.unwrap_or(cfg.eval.seed);
            cfg.checkpoints.insert("policy".into(), checkpoint.clone());
            let specs = object_specs_by_name(&cfg.objects)?;
            let ck = load_policy(&checkpoint)?;
            let rows = run_object_type_eval(&ck.net, &cfg.train.env, &specs, cfg.eval.object_trials, cfg.eval.seed)?;
            write_rows(&out, &rows_to_csv(&rows), &rows)?;
            write_provenance(cfg, "eval objects", &out)?;
            print!("{}", rows_to_csv(&rows));
        }
        EvalCommand::Multi {
            scoop_toss,
            approach,
            meta,
            pinned,
            out,
            episodes,
            objects,
            seconds,
            seed,
        } => {
            let mut cfg = ExperimentConfig::resolve(Mode::Meta, file)?;
            let (st, ap) = expert_paths(&mut cfg, scoop_toss, approach)?;
            let experts = Arc::new(Experts::load(&st, &ap)?);
            let (label, controller) = match (meta, pinned) {
                (Some(m), _) => {
                    cfg.checkpoints.insert("meta".into(), m.clone());
                    ("meta".to_string(), MultiController::Meta(Arc::new(load_meta(&m)?)))
                }
                (None, Some(p)) => {
                    let id = match p {
                        ExpertMode::ScoopToss => ExpertId::ScoopToss,
                        ExpertMode::Approach => ExpertId::Approach,
                    };
                    (format!("pinned-{}", Mode::from(p).name()), MultiController::Pinned(id))
                }
                (None, None) => bail!("eval multi needs --meta or --pinned"),
            };
            let e = &mut cfg.eval;
            e.multi_episodes = episodes.unwrap_or(e.multi_episodes);
            e.multi_objects = objects.unwrap_or(e.multi_objects);
            e.multi_seconds = seconds.unwrap_or(e.multi_seconds);
            e.seed = seed.unwrap_or(e.seed);
            let rep = run_multi_eval(
                &label,
                &controller,
                &experts,
                &cfg.train.env,
                e.multi_objects,
                e.multi_episodes,
                e.multi_seconds,
                e.seed,
            )?;
            let rows = vec![rep];
            write_rows(&out, &MultiReport::to_csv(&rows), &rows)?;
            write_provenance(cfg, "eval multi", &out)?;
            print!("{}", MultiReport::to_csv(&rows));
        }
        EvalCommand::Ablation {
            seeds,
            variants,
            out,
            steps,
            trials,
        } => {
            let mut cfg = ExperimentConfig::resolve(Mode::ScoopToss, file)?;
            cfg.command = "eval ablation".into();
            cfg.seeds = seeds.clone();
            if let Some(s) = steps {
                cfg.train.max_env_steps = s;
            }
            cfg.eval.trials_per_sector = trials.unwrap_or(cfg.eval.trials_per_sector);
            let names = variants.unwrap_or_else(|| vec!["no-height".into(), "no-exp-dist".into(), "no-load-bonus".into()]);
            let mut list = vec![None];
            for n in &names {
                list.push(Some(n.parse::<Ablation>()?));
            }
            cfg.out_dir = Some(out.clone());
            cfg.write(&out)?;
            let rows = run_ablation_suite(&cfg.train, &seeds, &list, cfg.eval.trials_per_sector, Some(&out))?;
            let csv = AblationRow::to_csv(&rows);
            std::fs::write(out.join("ablation.csv"), &csv)?;
            print!("{csv}");
        }
    }
    Ok(())
}

fn load_meta(path: &Path) -> Result<PolicyNet<f32>> {
    Ok(load_policy(path)?.net)
}

fn dump_trace(file: Option<&Path>, mode: Mode, checkpoint: &Path, seed: u64, out: &Path) -> Result<()> {
    let cfg = ExperimentConfig::resolve(mode, file)?;
    let env = &cfg.train.env;
    let ck = load_policy(checkpoint)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ep = EpisodeState::reset(mode, env, &Curriculum::finished(), &mut rng, None)?;
    let f = std::io::BufWriter::new(std::fs::File::create(out)?);
    let mut tw = TraceWriter::new(f, mode.name(), &ep.world)?;
    let w = RewardWeights::default();
    loop {
        let obs = ep.build_observation()?;
        let u = expert_action(&ck.net, &obs)?;
        let res = ep.step(&u, env, &w)?;
        tw.record(&ep.world, &env.action_vector(&ep.action), Some(mode.name()))?;
        if res.termination.is_done() {
            println!("{:?} after {} steps; trace in {}", res.termination, ep.elapsed_steps, out.display());
            break;
        }
    }
    tw.flush()?;
    Ok(())
}

fn teleop(file: Option<&Path>, action: TeleopCommand) -> Result<()> {
    let TeleopCommand::Serve {
        port,
        host,
        scoop_toss,
        approach,
        objects,
        seed,
        frame,
        trace,
    } = action;
    let mut cfg = ExperimentConfig::resolve(Mode::Meta, file)?;
    cfg.command = "teleop serve".into();
    let (st, ap) = expert_paths(&mut cfg, scoop_toss, approach)?;
    if let Some(f) = frame {
        cfg.teleop.frame = match f {
            Frame::World => DirFrame::World,
            Frame::Body => DirFrame::Body,
        };
    }
    let experts = Arc::new(Experts::load(&st, &ap)?);
    let mut env = cfg.train.env.clone();
    env.meta_objects = objects;
    let settings = cfg.teleop;
    let sessions = std::sync::atomic::AtomicU64::new(0);
    let factory: server::SessionFactory = Box::new(move || {
        let n = sessions.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(n));
        let world = EpisodeState::reset(Mode::Meta, &env, &Curriculum::default(), &mut rng, None)?.world;
        let mut s = TeleopSession::new(world, env.clone(), experts.clone(), settings);
        if let Some(p) = &trace {
            let p = if n == 0 { p.clone() } else { p.with_extension(format!("{n}.ndjson")) };
            s.record_to(Box::new(std::io::BufWriter::new(std::fs::File::create(p)?)))?;
        }
        Ok(s)
    });
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind((host.as_str(), port)).await?;
        println!("teleop listening on ws://{}/teleop", listener.local_addr()?);
        server::serve(listener, factory, server::ServerOptions::default()).await
    })
}
