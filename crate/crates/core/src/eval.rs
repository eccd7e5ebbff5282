//! Evaluation protocols: angular sectors, object types, multi-object meta
//! runs, and report emission.

use crate::env::{Curriculum, EnvConfig, EnvError, EpisodeState, Mode, ObjectSpec, Observation};
use crate::meta::{ExpertId, Experts, MetaController, MetaError, SelectMode};
use crate::nn::PolicyNet;
use crate::rewards::{ablate, Ablation, RewardWeights};
use crate::train::{train, TrainConfig, TrainError, TrainInputs};
use crate::sim::{rotate, Event, Vec2, World, DOF};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

pub const N_SECTORS: usize = 8;
pub const EVAL_RADIUS: f64 = 1.5;
pub const EVAL_SECONDS: f64 = 20.0;
/// Frontal range used by the object-type protocol, either side of forward.
pub const FRONTAL_HALF_ANGLE: f64 = 135.0 * PI / 180.0;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("unknown object spec {0:?}")]
    UnknownSpec(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Meta(#[from] MetaError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("report: {0}")]
    Report(String),
}

/// Stage outcome of one single-object trial.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub angle: f64,
    pub approached: bool,
    pub scooped: bool,
    pub tossed: bool,
    pub loaded: bool,
    pub toss_height: f64,
    /// Tossed, not loaded, and first landed behind the tray's rear edge.
    pub overshoot: bool,
    pub steps: u64,
}

/// Aggregated stage-success percentages for a group of trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRow {
    pub label: String,
    pub trials: usize,
    pub approach_pct: f64,
    pub scoop_pct: f64,
    pub toss_pct: f64,
    pub load_pct: f64,
    /// Mean toss height over loaded trials.
    pub height_success: Option<f64>,
    /// Mean toss height over tossed-but-not-loaded trials.
    pub height_fail: Option<f64>,
    /// Load failures that overshot the rear tray edge.
    pub overshoot_failures: usize,
    pub load_failures: usize,
}

impl StageRow {
    pub fn from_trials(label: impl Into<String>, trials: &[TrialResult]) -> Self {
        let n = trials.len();
        let pct = |f: fn(&TrialResult) -> bool| {
            if n == 0 {
                0.0
            } else {
                100.0 * trials.iter().filter(|t| f(t)).count() as f64 / n as f64
            }
        };
        let mean = |v: Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        Self {
            label: label.into(),
            trials: n,
            approach_pct: pct(|t| t.approached),
            scoop_pct: pct(|t| t.scooped),
            toss_pct: pct(|t| t.tossed),
            load_pct: pct(|t| t.loaded),
            height_success: mean(trials.iter().filter(|t| t.loaded).map(|t| t.toss_height).collect()),
            height_fail: mean(
                trials
                    .iter()
                    .filter(|t| t.tossed && !t.loaded)
                    .map(|t| t.toss_height)
                    .collect(),
            ),
            overshoot_failures: trials.iter().filter(|t| t.overshoot).count(),
            load_failures: trials.iter().filter(|t| !t.loaded).count(),
        }
    }

    pub fn is_monotone(&self) -> bool {
        self.approach_pct >= self.scoop_pct && self.scoop_pct >= self.toss_pct && self.toss_pct >= self.load_pct
    }

    fn height_cell(h: Option<f64>) -> String {
        h.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"))
    }
}

const CSV_HEADER: &str = "label,trials,approach_pct,scoop_pct,toss_pct,load_pct,height_success,height_fail,overshoot_failures,load_failures";

/// Rows rendered as CSV; empty height sets print as "-".
pub fn rows_to_csv(rows: &[StageRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{:.1},{:.1},{:.1},{:.1},{},{},{},{}",
            r.label,
            r.trials,
            r.approach_pct,
            r.scoop_pct,
            r.toss_pct,
            r.load_pct,
            StageRow::height_cell(r.height_success),
            StageRow::height_cell(r.height_fail),
            r.overshoot_failures,
            r.load_failures
        );
    }
    s
}

/// Writes `rows` as CSV or JSON depending on the file extension.
pub fn write_rows<T: Serialize>(path: &Path, csv_text: &str, rows: &T) -> Result<(), EvalError> {
    let text = match path.extension().and_then(|e| e.to_str()) {
        Some("json") => serde_json::to_string_pretty(rows).map_err(|e| EvalError::Report(e.to_string()))?,
        _ => csv_text.to_string(),
    };
    std::fs::write(path, text)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngularSectorReport {
    pub rows: Vec<StageRow>,
}

impl AngularSectorReport {
    fn load_rate(&self, sectors: &[usize]) -> f64 {
        let trials: usize = sectors.iter().map(|&s| self.rows[s].trials).sum();
        let loaded: f64 = sectors
            .iter()
            .map(|&s| self.rows[s].load_pct * self.rows[s].trials as f64 / 100.0)
            .sum();
        if trials == 0 {
            0.0
        } else {
            100.0 * loaded / trials as f64
        }
    }

    /// Load percentage over the six sectors within ±135° of forward.
    pub fn frontal_load_pct(&self) -> f64 {
        self.load_rate(&[0, 1, 2, 5, 6, 7])
    }

    /// Load percentage over the two sectors spanning 135° to 225°.
    pub fn rear_load_pct(&self) -> f64 {
        self.load_rate(&[3, 4])
    }

    pub fn to_csv(&self) -> String {
        rows_to_csv(&self.rows)
    }

    pub fn write(&self, path: &Path) -> Result<(), EvalError> {
        write_rows(path, &self.to_csv(), self)
    }
}

/// Sector index of a counterclockwise angle from forward.
pub fn sector_of(angle: f64) -> usize {
    let a = angle.rem_euclid(2.0 * PI);
    ((a / (2.0 * PI / N_SECTORS as f64)) as usize).min(N_SECTORS - 1)
}

/// Single-object episode spawned at (`angle`, `r`) around the training spawn
/// center (`spawn_ahead` in front of the scoop tip).
fn placed_episode(cfg: &EnvConfig, spec: &ObjectSpec, angle: f64, r: f64, rng: &mut ChaCha8Rng) -> Result<EpisodeState, EvalError> {
    let mut world = World::new(cfg.sim, rng.random()).map_err(EnvError::from)?;
    let yaw = world.robot.yaw;
    let center = world.scoop_tip() + rotate(Vec2::new(cfg.spawn_ahead, 0.0), yaw);
    let xy = center + rotate(Vec2::new(r * angle.cos(), r * angle.sin()), yaw);
    world.add_object(spec.spawn(xy, rng));
    Ok(EpisodeState::from_world(world, Mode::ScoopToss, cfg, EVAL_SECONDS))
}

/// Runs single-object trials with the policy's mean action until load or
/// the 20 s limit. Trials are batched through the network in trial order.
pub fn run_trials(policy: &PolicyNet<f32>, cfg: &EnvConfig, mut eps: Vec<EpisodeState>, angles: &[f64]) -> Result<Vec<TrialResult>, EvalError> {
    let w = RewardWeights::default();
    let max_steps = cfg.steps(EVAL_SECONDS);
    let mut track = vec![LandingTracker::default(); eps.len()];
    let mut done = vec![false; eps.len()];
    let mut steps = 0;
    while steps < max_steps && done.iter().any(|d| !d) {
        let active: Vec<usize> = (0..eps.len()).filter(|&i| !done[i]).collect();
        let obs: Vec<Observation> = active
            .iter()
            .map(|&i| eps[i].build_observation())
            .collect::<Result<_, _>>()?;
        let raw: Vec<f32> = obs.iter().flat_map(|o| o.iter().map(|&v| v as f32)).collect();
        let means = policy
            .actor_normalized(&policy.normalize(&raw), active.len())
            .map_err(MetaError::from)?;
        let mut stepped: Vec<(&mut EpisodeState, &mut LandingTracker)> = eps
            .iter_mut()
            .zip(track.iter_mut())
            .enumerate()
            .filter(|(i, _)| !done[*i])
            .map(|(_, p)| p)
            .collect();
        let finished: Vec<Result<bool, EnvError>> = stepped
            .par_iter_mut()
            .enumerate()
            .map(|(k, (ep, tr))| {
                let mut u = [0.0; DOF];
                for (j, v) in u.iter_mut().enumerate() {
                    *v = means[k * DOF + j] as f64;
                }
                let r = ep.step(&u, cfg, &w)?;
                tr.observe(ep);
                Ok(r.termination.is_done() || ep.stage_flags[0].loaded || ep.elapsed_steps >= max_steps)
            })
            .collect();
        for (k, f) in finished.into_iter().enumerate() {
            if f? {
                done[active[k]] = true;
            }
        }
        steps += 1;
    }
    let rear_edge = cfg.sim.tray.center_offset.x - cfg.sim.tray.half_extents.x;
    Ok(eps
        .iter()
        .zip(&track)
        .zip(angles)
        .map(|((ep, tr), &angle)| {
            let f = ep.stage_flags[0];
            TrialResult {
                angle,
                approached: f.approached,
                scooped: f.scooped,
                tossed: f.tossed,
                loaded: f.loaded,
                toss_height: ep.world.objects[0].max_height_reached,
                overshoot: f.tossed && !f.loaded && tr.landing_x.is_some_and(|x| x < rear_edge),
                steps: ep.elapsed_steps,
            }
        })
        .collect())
}

/// Remembers where the object first touched the ground after its first
/// release, in the base frame at that moment.
#[derive(Debug, Clone, Copy, Default)]
struct LandingTracker {
    cursor: usize,
    released: bool,
    landing_x: Option<f64>,
}

impl LandingTracker {
    fn observe(&mut self, ep: &EpisodeState) {
        for (_, e) in ep.world.events_since(self.cursor) {
            match e {
                Event::Release { .. } => self.released = true,
                Event::GroundHit { object, .. } if self.released && self.landing_x.is_none() => {
                    let p = ep.world.objects[*object].position;
                    self.landing_x = Some(ep.world.world_to_base(&p).x);
                }
                _ => {}
            }
        }
        self.cursor = ep.world.event_log.len();
    }
}

/// Angular-sector protocol: `trials_per_sector` cube placements per 45°
/// sector, uniform over the sector's area within 1.5 m.
pub fn run_angular_eval(policy: &PolicyNet<f32>, cfg: &EnvConfig, trials_per_sector: usize, seed: u64) -> Result<AngularSectorReport, EvalError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = 2.0 * PI / N_SECTORS as f64;
    let mut eps = Vec::new();
    let mut angles = Vec::new();
    for s in 0..N_SECTORS {
        for _ in 0..trials_per_sector {
            let angle = s as f64 * width + rng.random::<f64>() * width;
            let r = EVAL_RADIUS * rng.random::<f64>().sqrt();
            eps.push(placed_episode(cfg, &ObjectSpec::cube(), angle, r, &mut rng)?);
            angles.push(angle);
        }
    }
    let results = run_trials(policy, cfg, eps, &angles)?;
    let rows = (0..N_SECTORS)
        .map(|s| {
            let trials: Vec<TrialResult> = results.iter().filter(|t| sector_of(t.angle) == s).copied().collect();
            let lo = s as f64 * 45.0;
            StageRow::from_trials(format!("{lo:.0}-{:.0}", lo + 45.0), &trials)
        })
        .collect();
    Ok(AngularSectorReport { rows })
}

/// Object-type protocol: frontal ±135° placements, one row per spec.
pub fn run_object_type_eval(policy: &PolicyNet<f32>, cfg: &EnvConfig, specs: &[ObjectSpec], trials: usize, seed: u64) -> Result<Vec<StageRow>, EvalError> {
    let mut rows = Vec::new();
    for (k, spec) in specs.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
        let mut cfg_obj = cfg.clone();
        cfg_obj.object = spec.clone();
        let mut eps = Vec::new();
        let mut angles = Vec::new();
        for _ in 0..trials {
            let angle = rng.random_range(-FRONTAL_HALF_ANGLE..FRONTAL_HALF_ANGLE);
            let r = EVAL_RADIUS * rng.random::<f64>().sqrt();
            eps.push(placed_episode(&cfg_obj, spec, angle, r, &mut rng)?);
            angles.push(angle);
        }
        let results = run_trials(policy, &cfg_obj, eps, &angles)?;
        rows.push(StageRow::from_trials(spec.name.clone(), &results));
    }
    Ok(rows)
}

pub fn object_specs_by_name(names: &[String]) -> Result<Vec<ObjectSpec>, EvalError> {
    names
        .iter()
        .map(|n| ObjectSpec::by_name(n).ok_or_else(|| EvalError::UnknownSpec(n.clone())))
        .collect()
}

/// Which controller drives the multi-object protocol.
#[derive(Debug, Clone)]
pub enum MultiController {
    Meta(Arc<PolicyNet<f32>>),
    Pinned(ExpertId),
    /// Zero action every step.
    Idle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiReport {
    pub label: String,
    pub episodes: usize,
    pub mean_loaded: f64,
    /// Episode time until the last load divided by loads, averaged over
    /// episodes with at least one load.
    pub mean_time_per_object: Option<f64>,
    pub mean_switches: f64,
}

impl MultiReport {
    pub fn to_csv(reports: &[MultiReport]) -> String {
        let mut s = String::from("label,episodes,mean_loaded,mean_time_per_object,mean_switches\n");
        for r in reports {
            let _ = writeln!(
                s,
                "{},{},{:.2},{},{:.1}",
                r.label,
                r.episodes,
                r.mean_loaded,
                r.mean_time_per_object.map_or_else(|| "-".into(), |t| format!("{t:.1}")),
                r.mean_switches
            );
        }
        s
    }
}

/// Multi-object protocol: `n_objects` cubes in a 5 m disc, `seconds` limit.
#[allow(clippy::too_many_arguments)]
pub fn run_multi_eval(
    label: &str,
    controller: &MultiController,
    experts: &Arc<Experts>,
    cfg: &EnvConfig,
    n_objects: usize,
    episodes: usize,
    seconds: f64,
    seed: u64,
) -> Result<MultiReport, EvalError> {
    let mut cfg = cfg.clone();
    cfg.meta_objects = n_objects;
    cfg.meta_time_limit = seconds;
    let w = RewardWeights::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut eps = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        eps.push(EpisodeState::reset(Mode::Meta, &cfg, &Curriculum::default(), &mut rng, None)?);
    }
    let placeholder = Arc::new(crate::nn::PolicyNet::new(crate::nn::HeadKind::Categorical, crate::env::OBS_DIM, 2, &mut rng));
    let mut ctrls: Vec<MetaController> = (0..episodes)
        .map(|_| match controller {
            MultiController::Meta(net) => MetaController::new(net.clone(), experts.clone()),
            MultiController::Pinned(id) => MetaController::pinned(placeholder.clone(), experts.clone(), *id),
            MultiController::Idle => MetaController::pinned(placeholder.clone(), experts.clone(), ExpertId::Approach),
        })
        .collect::<Result<_, _>>()?;
    let mut last_load = vec![0u64; episodes];
    let mut done = vec![false; episodes];
    while done.iter().any(|d| !d) {
        let active: Vec<usize> = (0..episodes).filter(|&i| !done[i]).collect();
        let obs: Vec<Observation> = active
            .iter()
            .map(|&i| eps[i].build_observation())
            .collect::<Result<_, _>>()?;
        let ids: Vec<ExpertId> = match controller {
            MultiController::Meta(net) => {
                let raw: Vec<f32> = obs.iter().flat_map(|o| o.iter().map(|&v| v as f32)).collect();
                let logits = net.actor_normalized(&net.normalize(&raw), active.len()).map_err(MetaError::from)?;
                active
                    .iter()
                    .enumerate()
                    .map(|(k, &i)| ctrls[i].select_from_logits(&logits[k * 2..k * 2 + 2], SelectMode::Eval, &mut rng).0)
                    .collect()
            }
            _ => active
                .iter()
                .map(|&i| ctrls[i].select_from_logits(&[0.0, 0.0], SelectMode::Eval, &mut rng).0)
                .collect(),
        };
        let actions = match controller {
            MultiController::Idle => vec![[0.0; DOF]; active.len()],
            _ => experts.act_batch(&ids, &obs)?,
        };
        let mut stepped: Vec<&mut EpisodeState> = eps
            .iter_mut()
            .enumerate()
            .filter(|(i, _)| !done[*i])
            .map(|(_, e)| e)
            .collect();
        let res: Vec<Result<(bool, usize, u64), EnvError>> = stepped
            .par_iter_mut()
            .zip(actions.par_iter())
            .map(|(ep, u)| {
                let r = ep.step(u, &cfg, &w)?;
                Ok((r.termination.is_done(), ep.new_loads, ep.elapsed_steps))
            })
            .collect();
        for (k, r) in res.into_iter().enumerate() {
            let (finished, new_loads, steps) = r?;
            let i = active[k];
            if new_loads > 0 {
                last_load[i] = steps;
            }
            if finished {
                done[i] = true;
            }
        }
    }
    let dt = cfg.sim.dt;
    let loaded: Vec<usize> = eps.iter().map(|e| e.n_loaded).collect();
    let per_object: Vec<f64> = loaded
        .iter()
        .zip(&last_load)
        .filter(|(n, _)| **n > 0)
        .map(|(n, s)| *s as f64 * dt / *n as f64)
        .collect();
    Ok(MultiReport {
        label: label.to_string(),
        episodes,
        mean_loaded: loaded.iter().sum::<usize>() as f64 / episodes.max(1) as f64,
        mean_time_per_object: (!per_object.is_empty()).then(|| per_object.iter().sum::<f64>() / per_object.len() as f64),
        mean_switches: ctrls.iter().map(|c| c.switch_count as f64).sum::<f64>() / episodes.max(1) as f64,
    })
}

/// One trained variant of the reward-ablation study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub frontal_load_pct: f64,
    pub rear_load_pct: f64,
    pub env_steps: u64,
    pub wall_seconds: f64,
    pub reached_target: bool,
}

impl AblationRow {
    pub fn to_csv(rows: &[AblationRow]) -> String {
        let mut s = String::from("variant,seed,frontal_load_pct,rear_load_pct,env_steps,wall_seconds,reached_target\n");
        for r in rows {
            let _ = writeln!(
                s,
                "{},{},{:.1},{:.1},{},{:.1},{}",
                r.variant, r.seed, r.frontal_load_pct, r.rear_load_pct, r.env_steps, r.wall_seconds, r.reached_target
            );
        }
        s
    }
}

pub fn variant_name(v: Option<Ablation>) -> &'static str {
    v.map_or("baseline", |a| a.name())
}

/// Trains one scoop-toss policy per (variant, seed) under the same budget
/// and scores each with the angular protocol. `None` is the baseline.
pub fn run_ablation_suite(
    base: &TrainConfig,
    seeds: &[u64],
    variants: &[Option<Ablation>],
    trials_per_sector: usize,
    out_dir: Option<&Path>,
) -> Result<Vec<AblationRow>, EvalError> {
    let mut rows = Vec::new();
    for &seed in seeds {
        for &v in variants {
            let mut cfg = base.clone();
            cfg.mode = Mode::ScoopToss;
            cfg.seed = seed;
            if let Some(a) = v {
                cfg.rewards = ablate(&base.rewards, a);
            }
            let dir = out_dir.map(|d| d.join(format!("{}-seed{seed}", variant_name(v))));
            if let Some(d) = &dir {
                std::fs::create_dir_all(d)?;
            }
            let out = train(
                &cfg,
                TrainInputs {
                    out_dir: dir,
                    ..Default::default()
                },
            )?;
            let rep = run_angular_eval(&out.net, &cfg.env, trials_per_sector, seed)?;
            let row = AblationRow {
                variant: variant_name(v).to_string(),
                seed,
                frontal_load_pct: rep.frontal_load_pct(),
                rear_load_pct: rep.rear_load_pct(),
                env_steps: out.env_steps,
                wall_seconds: out.wall_seconds,
                reached_target: out.reached_target,
            };
            log::info!(
                "ablation {} seed {}: frontal {:.1}% rear {:.1}%",
                row.variant,
                seed,
                row.frontal_load_pct,
                row.rear_load_pct
            );
            rows.push(row);
        }
    }
    Ok(rows)
}
