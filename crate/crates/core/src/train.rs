//! Vectorized rollout collection and the PPO training loop for experts and
//! the meta-policy.

use crate::env::{Curriculum, EnvConfig, EnvError, EpisodeState, Mode, Observation, Termination, OBS_DIM};
use crate::meta::{ExpertId, Experts, MetaError, N_EXPERTS};
use crate::nn::{Adam, Checkpoint, HeadKind, NnError, PolicyNet, SampledAction};
use crate::ppo::{ppo_update, PpoConfig, PpoError, PpoStats, RolloutBuffer, RunningMeanStd};
use crate::rewards::{RegWeights, RewardWeights};
use crate::sim::DOF;
use crate::sti::{StiBuffer, StiError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Ppo(#[from] PpoError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Meta(#[from] MetaError),
    #[error(transparent)]
    Sti(#[from] StiError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("metrics log: {0}")]
    Csv(#[from] csv::Error),
}

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub seed: u64,
    pub ppo: PpoConfig,
    pub env: EnvConfig,
    pub rewards: RewardWeights,
    pub curriculum: Curriculum,
    /// Budget in environment steps (summed over all parallel envs).
    pub max_env_steps: u64,
    /// Stop early once the windowed success rate reaches this value.
    pub target_success: Option<f64>,
    /// For scoop-toss, `target_success` only counts once the curriculum is at its caps.
    pub require_full_curriculum: bool,
    /// Episodes in the success-rate window.
    pub success_window: usize,
    /// Updates between periodic checkpoints (0 disables them).
    pub checkpoint_every: u64,
    /// Regularization weights ramp linearly from zero to their configured
    /// values over this many env steps (0 applies them from the start).
    pub reg_warmup_steps: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Approach,
            seed: 0,
            ppo: PpoConfig::default(),
            env: EnvConfig::default(),
            rewards: RewardWeights::default(),
            curriculum: Curriculum::default(),
            max_env_steps: 20_000_000,
            target_success: None,
            require_full_curriculum: true,
            success_window: 100,
            checkpoint_every: 50,
            reg_warmup_steps: 0,
        }
    }
}

impl TrainConfig {
    /// Default configuration for one training mode. Scoop-toss starts its
    /// curriculum at 1.5 s: under the actuator caps a level-0 load needs
    /// 40 to 60 control steps, so a 1.0 s limit could never promote.
    pub fn for_mode(mode: Mode, seed: u64) -> Self {
        let (curriculum, reg_warmup_steps) = match mode {
            Mode::ScoopToss => (Curriculum::starting_at(SCOOP_TOSS_START_TIME), SCOOP_TOSS_REG_WARMUP),
            _ => (Curriculum::default(), 0),
        };
        let target_success = match mode {
            Mode::Meta => None,
            _ => Some(EXPERT_TARGET_SUCCESS),
        };
        Self {
            mode,
            seed,
            curriculum,
            reg_warmup_steps,
            target_success,
            ..Self::default()
        }
    }

    /// Fine-tuning an already trained expert: the task distribution is the
    /// final curriculum level and the full regularization applies at once.
    pub fn for_finetune(mode: Mode, seed: u64) -> Self {
        Self {
            curriculum: Curriculum::finished(),
            reg_warmup_steps: 0,
            max_env_steps: FINETUNE_MAX_STEPS,
            ..Self::for_mode(mode, seed)
        }
    }
}

pub const FINETUNE_MAX_STEPS: u64 = 3_000_000;

pub const SCOOP_TOSS_START_TIME: f64 = 1.5;
/// Expert runs stop once the windowed success rate at the final curriculum
/// level reaches this.
pub const EXPERT_TARGET_SUCCESS: f64 = 0.95;
/// Exploration noise at the initial std drives the scoop servos into their
/// acceleration caps, and the full penalty for that outweighs everything a
/// random policy can earn, so scoop-toss learns the toss before smoothing.
pub const SCOOP_TOSS_REG_WARMUP: u64 = 3_000_000;

/// Regularization weights after `env_steps` of a `warmup`-step ramp.
pub fn warmed_weights(base: &RewardWeights, env_steps: u64, warmup: u64) -> RewardWeights {
    if warmup == 0 || env_steps >= warmup {
        return *base;
    }
    let k = env_steps as f64 / warmup as f64;
    let scale = |r: RegWeights| RegWeights {
        w6: r.w6 * k,
        w7: r.w7 * k,
        w8: r.w8 * k,
    };
    RewardWeights {
        reg_scoop: scale(base.reg_scoop),
        reg_approach: scale(base.reg_approach),
        ..*base
    }
}

/// Per-update row of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub update: u64,
    pub env_steps: u64,
    pub episodes: u64,
    pub mean_reward: f64,
    pub success_rate: f64,
    pub curriculum_level: u32,
    pub curriculum_radius: f64,
    pub mean_loaded: f64,
    pub kl: f64,
    pub clip_fraction: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeOutcome {
    pub termination: Termination,
    pub episode_return: f64,
    pub steps: u64,
    pub n_loaded: usize,
    pub success: bool,
    /// The episode started with the curriculum radius at its cap.
    pub at_cap: bool,
}

/// Initial-state source for resets.
#[derive(Debug, Clone)]
pub enum InitSource {
    Default,
    Sti(Arc<StiBuffer>),
}

/// `n` independent episodes with per-instance RNG streams.
pub struct VecEnv {
    pub mode: Mode,
    pub cfg: EnvConfig,
    pub weights: RewardWeights,
    pub curriculum: Curriculum,
    pub use_curriculum: bool,
    pub init: InitSource,
    pub envs: Vec<EpisodeState>,
    rngs: Vec<ChaCha8Rng>,
    returns: Vec<f64>,
    started_at_cap: Vec<bool>,
}

impl VecEnv {
    pub fn new(
        mode: Mode,
        n: usize,
        cfg: EnvConfig,
        weights: RewardWeights,
        curriculum: Curriculum,
        init: InitSource,
        seed: u64,
    ) -> Result<Self, TrainError> {
        if let InitSource::Sti(buf) = &init {
            buf.check_cross_wiring(mode)?;
            if buf.is_empty() {
                return Err(StiError::Empty.into());
            }
        }
        let mut rngs = Vec::with_capacity(n);
        for i in 0..n {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(i as u64 + 1);
            rngs.push(r);
        }
        let mut v = Self {
            mode,
            cfg,
            weights,
            use_curriculum: mode == Mode::ScoopToss,
            curriculum,
            init,
            envs: Vec::with_capacity(n),
            rngs,
            returns: vec![0.0; n],
            started_at_cap: vec![false; n],
        };
        for i in 0..n {
            let ep = v.fresh(i)?;
            v.envs.push(ep);
        }
        Ok(v)
    }

    fn fresh(&mut self, i: usize) -> Result<EpisodeState, TrainError> {
        if let Some(c) = self.started_at_cap.get_mut(i) {
            *c = self.curriculum.radius >= self.curriculum.radius_cap;
        }
        let rng = &mut self.rngs[i];
        Ok(match &self.init {
            InitSource::Default => EpisodeState::reset(self.mode, &self.cfg, &self.curriculum, rng, None)?,
            InitSource::Sti(buf) => buf.sample_init(rng, self.mode, &self.cfg, &self.curriculum)?,
        })
    }

    pub fn len(&self) -> usize {
        self.envs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.envs.is_empty()
    }

    pub fn observations(&self) -> Result<Vec<Observation>, TrainError> {
        self.envs
            .iter()
            .map(|e| e.build_observation().map_err(TrainError::from))
            .collect()
    }

    /// Steps every env with its action. Finished episodes are reported and
    /// replaced (after the curriculum sees their outcomes in env order); the
    /// observation of each finished episode's final state is returned for
    /// bootstrapping.
    #[allow(clippy::type_complexity)]
    pub fn step(
        &mut self,
        actions: &[[f64; DOF]],
    ) -> Result<(Vec<f64>, Vec<Termination>, Vec<Option<(EpisodeOutcome, Observation)>>), TrainError> {
        let (cfg, w) = (&self.cfg, &self.weights);
        let results: Vec<Result<_, EnvError>> = self
            .envs
            .par_iter_mut()
            .zip(actions.par_iter())
            .map(|(ep, u)| {
                let r = ep.step(u, cfg, w)?;
                let final_obs = if r.termination.is_done() {
                    Some(ep.build_observation().unwrap_or([0.0; OBS_DIM]))
                } else {
                    None
                };
                Ok((r, final_obs))
            })
            .collect();
        let mut rewards = Vec::with_capacity(self.len());
        let mut terms = Vec::with_capacity(self.len());
        let mut finished = Vec::with_capacity(self.len());
        for (i, res) in results.into_iter().enumerate() {
            let (r, final_obs) = res?;
            self.returns[i] += r.reward;
            rewards.push(r.reward);
            terms.push(r.termination);
            match final_obs {
                Some(obs) => {
                    let ep = &self.envs[i];
                    let success = match self.mode {
                        Mode::ScoopToss => r.termination == Termination::SuccessLoad,
                        Mode::Approach => r.termination == Termination::ApproachSuccess,
                        Mode::Meta => r.termination == Termination::SuccessLoad,
                    };
                    let outcome = EpisodeOutcome {
                        termination: r.termination,
                        episode_return: self.returns[i],
                        steps: ep.elapsed_steps,
                        n_loaded: ep.n_loaded,
                        success,
                        at_cap: !self.use_curriculum || self.started_at_cap[i],
                    };
                    if self.use_curriculum {
                        self.curriculum.update(success);
                    }
                    self.returns[i] = 0.0;
                    finished.push(Some((outcome, obs)));
                }
                None => finished.push(None),
            }
        }
        for (i, f) in finished.iter().enumerate() {
            if f.is_some() {
                self.envs[i] = self.fresh(i)?;
            }
        }
        Ok((rewards, terms, finished))
    }
}

/// Trained parameters plus everything logged along the way.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: PolicyNet<f32>,
    pub metrics: Vec<MetricsRow>,
    pub curriculum: Curriculum,
    pub env_steps: u64,
    pub updates: u64,
    pub wall_seconds: f64,
    pub reached_target: bool,
}

impl TrainOutcome {
    pub fn last(&self) -> Option<&MetricsRow> {
        self.metrics.last()
    }
}

/// Optional inputs beyond the config.
#[derive(Default)]
pub struct TrainInputs {
    /// Starting parameters (fine-tuning); fresh initialization otherwise.
    pub init_net: Option<PolicyNet<f32>>,
    /// Seeds of the runs that produced `init_net`.
    pub lineage: Vec<u64>,
    pub sti: Option<Arc<StiBuffer>>,
    /// Frozen experts (meta mode only).
    pub experts: Option<Arc<Experts>>,
    /// Where checkpoints, metrics and the resolved config go.
    pub out_dir: Option<PathBuf>,
}

fn write_config(dir: &Path, cfg: &TrainConfig) -> Result<(), TrainError> {
    let text = toml::to_string_pretty(cfg).map_err(|e| TrainError::Config(e.to_string()))?;
    std::fs::write(dir.join("config.toml"), text)?;
    Ok(())
}

fn save_checkpoint(path: &Path, net: &PolicyNet<f32>, lineage: &[u64], cfg: &TrainConfig, row: Option<&MetricsRow>) -> Result<(), TrainError> {
    let mut ck = Checkpoint::new(net.clone(), lineage.to_vec());
    ck.metadata.insert("mode".into(), serde_json::json!(cfg.mode.name()));
    if let Some(r) = row {
        ck.metadata.insert("update".into(), serde_json::json!(r.update));
        ck.metadata.insert("env_steps".into(), serde_json::json!(r.env_steps));
        ck.metadata.insert("success_rate".into(), serde_json::json!(r.success_rate));
        ck.metadata.insert("curriculum_level".into(), serde_json::json!(r.curriculum_level));
    }
    ck.save(path)?;
    Ok(())
}

/// Runs PPO until the step budget is spent or the success target is met.
pub fn train(cfg: &TrainConfig, inputs: TrainInputs) -> Result<TrainOutcome, TrainError> {
    cfg.ppo.validate()?;
    let started = Instant::now();
    let (head, act_dim) = match cfg.mode {
        Mode::Meta => (HeadKind::Categorical, N_EXPERTS),
        _ => (HeadKind::Gaussian, DOF),
    };
    if cfg.mode == Mode::Meta && inputs.experts.is_none() {
        return Err(TrainError::Config("meta training needs both expert checkpoints".into()));
    }
    if cfg.mode == Mode::Meta && inputs.sti.is_some() {
        return Err(TrainError::Config("STI initialization applies to expert fine-tuning only".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = match inputs.init_net {
        Some(n) => {
            if n.head != head || n.obs_dim() != OBS_DIM || n.act_dim() != act_dim {
                return Err(TrainError::Config("initial network does not match the mode".into()));
            }
            n
        }
        None => PolicyNet::<f32>::new(head, OBS_DIM, act_dim, &mut rng),
    };
    let mut lineage = inputs.lineage.clone();
    lineage.push(cfg.seed);
    let experts = inputs.experts.clone();
    let frozen = experts.as_ref().map(|e| (**e).clone());
    let init = match inputs.sti {
        Some(b) => InitSource::Sti(b),
        None => InitSource::Default,
    };
    let mut venv = VecEnv::new(
        cfg.mode,
        cfg.ppo.n_envs,
        cfg.env.clone(),
        cfg.rewards,
        cfg.curriculum.clone(),
        init,
        cfg.seed,
    )?;
    if let Some(dir) = &inputs.out_dir {
        std::fs::create_dir_all(dir)?;
        write_config(dir, cfg)?;
    }
    let mut log = match &inputs.out_dir {
        Some(dir) => Some(csv::Writer::from_path(dir.join("metrics.csv"))?),
        None => None,
    };

    let n = cfg.ppo.n_envs;
    let buf_act = if head == HeadKind::Categorical { 1 } else { act_dim };
    let mut buf = RolloutBuffer::<f32>::new(n, cfg.ppo.horizon, OBS_DIM, buf_act);
    let mut adam = Adam::new(&net, cfg.ppo.lr);
    let mut obs_rms = RunningMeanStd::new(OBS_DIM);
    if net.obs_std.iter().any(|&s| s != 1.0) || net.obs_mean.iter().any(|&m| m != 0.0) {
        // Continue from the stats the network was trained with.
        obs_rms.mean = net.obs_mean.iter().map(|&v| v as f64).collect();
        obs_rms.var = net.obs_std.iter().map(|&v| (v as f64).powi(2)).collect();
        obs_rms.count = 1e4;
    }
    let mut ret_rms = RunningMeanStd::new(1);
    let mut disc_ret = vec![0.0; n];
    let mut window: VecDeque<EpisodeOutcome> = VecDeque::new();
    // Outcomes of episodes that began at the final curriculum radius.
    let mut cap_window: VecDeque<bool> = VecDeque::new();
    let mut episodes = 0u64;
    let mut metrics = Vec::new();
    let mut env_steps = 0u64;
    let mut update = 0u64;
    let mut last_good = net.clone();
    let mut reached = false;
    let mut obs = venv.observations()?;

    while env_steps < cfg.max_env_steps {
        venv.weights = warmed_weights(&cfg.rewards, env_steps, cfg.reg_warmup_steps);
        buf.clear();
        let mut upd_returns = Vec::new();
        let mut raw_rows: Vec<f64> = Vec::with_capacity(n * cfg.ppo.horizon * OBS_DIM);
        for _ in 0..cfg.ppo.horizon {
            let raw: Vec<f32> = obs.iter().flat_map(|o| o.iter().map(|&v| v as f32)).collect();
            raw_rows.extend(obs.iter().flat_map(|o| o.iter().copied()));
            let x = net.normalize(&raw);
            let (out, values) = net.forward_normalized(&x, n)?;
            let mut actions_buf = Vec::with_capacity(n * buf_act);
            let mut log_probs = Vec::with_capacity(n);
            let mut env_actions = vec![[0.0; DOF]; n];
            let mut selections = Vec::with_capacity(n);
            for i in 0..n {
                let (a, lp) = net.head_at(&out, i).sample(&mut rng);
                log_probs.push(lp);
                match a {
                    SampledAction::Continuous(v) => {
                        for (j, x) in v.iter().enumerate() {
                            env_actions[i][j] = *x as f64;
                        }
                        actions_buf.extend(v);
                    }
                    SampledAction::Discrete(k) => {
                        actions_buf.push(k as f32);
                        selections.push(ExpertId::from_index(k));
                    }
                }
            }
            if let Some(ex) = &experts {
                env_actions = ex.act_batch(&selections, &obs)?;
            }
            let (rewards, terms, finished) = venv.step(&env_actions)?;
            env_steps += n as u64;
            let mut scaled = Vec::with_capacity(n);
            for i in 0..n {
                let r = rewards[i];
                if cfg.ppo.normalize_reward {
                    disc_ret[i] = disc_ret[i] * cfg.ppo.gamma + r;
                    ret_rms.update(&[disc_ret[i]]);
                }
                let scale = if cfg.ppo.normalize_reward {
                    1.0 / ret_rms.std()[0].max(1e-4)
                } else {
                    1.0
                };
                scaled.push((r * scale).clamp(-100.0, 100.0));
            }
            // Bootstrap clock-cut episodes with the critic's value of the final state.
            let cut: Vec<usize> = (0..n).filter(|&i| terms[i].bootstraps()).collect();
            if !cut.is_empty() {
                let raw_final: Vec<f32> = cut
                    .iter()
                    .flat_map(|&i| finished[i].as_ref().unwrap().1.iter().map(|&v| v as f32))
                    .collect();
                let (_, v_final) = net.forward_normalized(&net.normalize(&raw_final), cut.len())?;
                for (k, &i) in cut.iter().enumerate() {
                    scaled[i] += cfg.ppo.gamma * v_final[k] as f64;
                }
            }
            let dones: Vec<bool> = terms.iter().map(|t| t.is_done()).collect();
            for (i, f) in finished.iter().enumerate() {
                if let Some((outcome, _)) = f {
                    disc_ret[i] = 0.0;
                    episodes += 1;
                    upd_returns.push(outcome.episode_return);
                    window.push_back(*outcome);
                    while window.len() > cfg.success_window {
                        window.pop_front();
                    }
                    // Only episodes run under the full reward weights count toward stopping.
                    if outcome.at_cap && env_steps >= cfg.reg_warmup_steps {
                        cap_window.push_back(outcome.success);
                        while cap_window.len() > cfg.success_window {
                            cap_window.pop_front();
                        }
                    }
                }
            }
            let values64: Vec<f64> = values.iter().map(|&v| v as f64).collect();
            buf.push(&x, &actions_buf, &log_probs, &scaled, &values64, &dones)?;
            obs = venv.observations()?;
        }
        let raw: Vec<f32> = obs.iter().flat_map(|o| o.iter().map(|&v| v as f32)).collect();
        let (_, last_v) = net.forward_normalized(&net.normalize(&raw), n)?;
        buf.last_values = last_v.iter().map(|&v| v as f64).collect();

        let stats = match ppo_update(&mut net, &mut adam, &buf, &cfg.ppo, &mut rng, update) {
            Ok(s) => s,
            Err(e) => {
                if let Some(dir) = &inputs.out_dir {
                    save_checkpoint(&dir.join("last_good.bin"), &last_good, &lineage, cfg, metrics.last())?;
                }
                return Err(e.into());
            }
        };
        obs_rms.update(&raw_rows);
        net.obs_mean = obs_rms.mean.iter().map(|&v| v as f32).collect();
        net.obs_std = obs_rms.std().iter().map(|&v| v as f32).collect();
        last_good = net.clone();
        update += 1;

        let row = metrics_row(update, env_steps, episodes, &upd_returns, &window, &venv.curriculum, &stats);
        if let Some(w) = log.as_mut() {
            w.serialize(&row)?;
            w.flush()?;
        }
        log::info!(
            "update {} steps {} success {:.3} level {} reward {:.2} kl {:.4}",
            row.update,
            row.env_steps,
            row.success_rate,
            row.curriculum_level,
            row.mean_reward,
            row.kl
        );
        let warmed = env_steps >= cfg.reg_warmup_steps;
        let hit = warmed
            && cfg.target_success.is_some_and(|t| {
            if venv.use_curriculum && cfg.require_full_curriculum {
                let rate = cap_window.iter().filter(|&&s| s).count() as f64 / cap_window.len().max(1) as f64;
                cap_window.len() >= cfg.success_window && rate >= t
            } else {
                window.len() >= cfg.success_window.min(20) && row.success_rate >= t
            }
        });
        metrics.push(row);
        if let Some(dir) = &inputs.out_dir {
            if cfg.checkpoint_every > 0 && update % cfg.checkpoint_every == 0 {
                save_checkpoint(&dir.join(format!("ckpt_{update:06}.bin")), &net, &lineage, cfg, metrics.last())?;
            }
        }
        if hit {
            reached = true;
            break;
        }
    }
    if let (Some(before), Some(after)) = (&frozen, &experts) {
        if before != after.as_ref() {
            return Err(TrainError::Config("expert parameters changed during meta training".into()));
        }
    }
    if let Some(dir) = &inputs.out_dir {
        save_checkpoint(&dir.join("final.bin"), &net, &lineage, cfg, metrics.last())?;
    }
    Ok(TrainOutcome {
        net,
        metrics,
        curriculum: venv.curriculum,
        env_steps,
        updates: update,
        wall_seconds: started.elapsed().as_secs_f64(),
        reached_target: reached,
    })
}

fn metrics_row(
    update: u64,
    env_steps: u64,
    episodes: u64,
    returns: &[f64],
    window: &VecDeque<EpisodeOutcome>,
    cur: &Curriculum,
    stats: &PpoStats,
) -> MetricsRow {
    let mean = |v: &mut dyn Iterator<Item = f64>, n: usize| {
        if n == 0 {
            0.0
        } else {
            v.sum::<f64>() / n as f64
        }
    };
    MetricsRow {
        update,
        env_steps,
        episodes,
        mean_reward: mean(&mut returns.iter().copied(), returns.len()),
        success_rate: mean(&mut window.iter().map(|o| o.success as u8 as f64), window.len()),
        curriculum_level: cur.level,
        curriculum_radius: cur.radius,
        mean_loaded: mean(&mut window.iter().map(|o| o.n_loaded as f64), window.len()),
        kl: stats.approx_kl,
        clip_fraction: stats.clip_fraction,
        policy_loss: stats.policy_loss,
        value_loss: stats.value_loss,
        entropy: stats.entropy,
    }
}
