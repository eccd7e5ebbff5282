//! Episode orchestration for the scoop-toss, approach and multi-object
//! environments: spawning, observations, stage classification, termination
//! and the placement curriculum.

use crate::rewards::{self, RewardWeights};
use crate::sim::{
    rotate, wrap_angle, ActionVector, Event, ObjectState, Phase, RobotState, ShapeClass, SimConfig, SimError, Vec2,
    Vec3, World, DOF,
};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

pub const OBS_DIM: usize = 28;
/// Scoop-object distance that counts as a successful approach stage.
pub const APPROACHED_DISTANCE: f64 = 0.10;
pub type Observation = [f64; OBS_DIM];

/// Named segments of the observation vector, in order.
pub struct ObservationLayout;

impl ObservationLayout {
    pub const SEGMENTS: [(&'static str, usize); 8] = [
        ("projected_gravity", 3),
        ("base_angular_velocity", 3),
        ("base_acceleration", 3),
        ("dof_positions", 5),
        ("dof_velocities", 5),
        ("previous_action", 5),
        ("object_rel_pos", 3),
        ("scoop_object_distance", 1),
    ];

    pub fn dim() -> usize {
        Self::SEGMENTS.iter().map(|(_, n)| n).sum()
    }

    /// Start offset of a named segment.
    pub fn offset(name: &str) -> Option<usize> {
        let mut at = 0;
        for (n, len) in Self::SEGMENTS {
            if n == name {
                return Some(at);
            }
            at += len;
        }
        None
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum EnvError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("no uncollected target remains; the episode should have ended")]
    NoTarget,
    #[error("episode already terminated ({0:?})")]
    EpisodeOver(Termination),
    #[error("unknown mode `{0}` (expected scoop-toss, approach or meta)")]
    UnknownMode(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    ScoopToss,
    Approach,
    Meta,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::ScoopToss => "scoop-toss",
            Mode::Approach => "approach",
            Mode::Meta => "meta",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "scoop-toss" | "scooptoss" => Ok(Mode::ScoopToss),
            "approach" => Ok(Mode::Approach),
            "meta" => Ok(Mode::Meta),
            _ => Err(EnvError::UnknownMode(s.to_string())),
        }
    }
}

/// Physical description of a test object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub name: String,
    pub mass: f64,
    pub shape_class: ShapeClass,
    pub restitution: f64,
    pub radius: f64,
}

impl ObjectSpec {
    fn new(name: &str, mass: f64, shape_class: ShapeClass, restitution: f64, radius: f64) -> Self {
        Self {
            name: name.to_string(),
            mass,
            shape_class,
            restitution,
            radius,
        }
    }

    pub fn cube() -> Self {
        Self::new("Cube", 0.096, ShapeClass::Box, 0.2, 0.02)
    }

    pub fn bucket() -> Self {
        Self::new("Bucket", 0.080, ShapeClass::Round, 0.3, 0.025)
    }

    pub fn mug() -> Self {
        Self::new("Mug", 0.080, ShapeClass::Handled, 0.3, 0.025)
    }

    pub fn foam_brick() -> Self {
        Self::new("FoamBrick", 0.030, ShapeClass::Box, 0.5, 0.025)
    }

    pub fn potted_meat_can() -> Self {
        Self::new("PottedMeatCan", 0.220, ShapeClass::Box, 0.15, 0.025)
    }

    pub fn presets() -> Vec<ObjectSpec> {
        vec![
            Self::cube(),
            Self::bucket(),
            Self::mug(),
            Self::foam_brick(),
            Self::potted_meat_can(),
        ]
    }

    pub fn by_name(name: &str) -> Option<ObjectSpec> {
        let key = name.to_ascii_lowercase().replace(['-', '_', ' '], "");
        Self::presets().into_iter().find(|s| s.name.to_ascii_lowercase() == key)
    }

    /// A resting instance at `xy`; handles get a uniformly random direction.
    pub fn spawn<R: Rng + ?Sized>(&self, xy: Vec2, rng: &mut R) -> ObjectState {
        let mut o = ObjectState::resting(xy, self.mass, self.radius, self.shape_class, self.restitution);
        if self.shape_class == ShapeClass::Handled {
            o.handle_yaw = rng.random_range(-PI..PI);
        }
        o
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub sim: SimConfig,
    /// Policy outputs in `[-1, 1]` map to `offset + scale * u` before clamping.
    pub action_scale: [f64; DOF],
    pub action_offset: [f64; DOF],
    /// Scoop-toss spawn center distance in front of the scoop tip.
    pub spawn_ahead: f64,
    pub approach_radius: f64,
    pub meta_objects: usize,
    pub meta_radius: f64,
    pub meta_time_limit: f64,
    pub hard_timeout: f64,
    pub retain_time: f64,
    pub success_distance: f64,
    pub object: ObjectSpec,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            sim: SimConfig::default(),
            action_scale: [1.5, 1.5, 3.0, 0.8, 1.2],
            action_offset: [0.0; DOF],
            spawn_ahead: 0.05,
            approach_radius: 5.0,
            meta_objects: 5,
            meta_radius: 5.0,
            meta_time_limit: 60.0,
            hard_timeout: 20.0,
            retain_time: 5.0,
            success_distance: 0.10,
            object: ObjectSpec::cube(),
        }
    }
}

impl EnvConfig {
    pub fn action_vector(&self, u: &[f64; DOF]) -> ActionVector {
        let mut a = [0.0; DOF];
        for i in 0..DOF {
            a[i] = self.action_offset[i] + self.action_scale[i] * u[i].clamp(-1.0, 1.0);
        }
        ActionVector::from_array(a).clamped(&self.sim.actuator)
    }

    pub fn steps(&self, seconds: f64) -> u64 {
        (seconds / self.sim.dt).round() as u64
    }
}

/// Placement curriculum for the scoop-toss expert.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Curriculum {
    pub radius: f64,
    pub time_limit: f64,
    pub level: u32,
    pub window: VecDeque<bool>,
    pub window_size: usize,
    pub min_episodes: usize,
    pub promote_rate: f64,
    pub radius_step: f64,
    pub radius_cap: f64,
    pub time_start: f64,
    pub time_step: f64,
    pub time_cap: f64,
}

impl Default for Curriculum {
    fn default() -> Self {
        Self {
            radius: 0.05,
            time_limit: 1.0,
            level: 0,
            window: VecDeque::new(),
            window_size: 50,
            min_episodes: 10,
            promote_rate: 0.80,
            radius_step: 0.05,
            radius_cap: 1.5,
            time_start: 1.0,
            time_step: 0.5,
            time_cap: 20.0,
        }
    }
}

impl Curriculum {
    /// A curriculum pinned at its final level (used for evaluation and fine-tuning).
    pub fn finished() -> Self {
        let mut c = Self::default();
        c.radius = c.radius_cap;
        c.time_limit = c.time_cap;
        c
    }

    /// Level-0 curriculum with a different starting time limit.
    pub fn starting_at(time_limit: f64) -> Self {
        Self {
            time_limit,
            time_start: time_limit,
            ..Self::default()
        }
    }

    pub fn success_rate(&self) -> f64 {
        if self.window.is_empty() {
            0.0
        } else {
            self.window.iter().filter(|&&s| s).count() as f64 / self.window.len() as f64
        }
    }

    /// Records one episode outcome; returns whether a promotion fired.
    pub fn update(&mut self, success: bool) -> bool {
        self.window.push_back(success);
        while self.window.len() > self.window_size {
            self.window.pop_front();
        }
        if self.window.len() >= self.min_episodes && self.success_rate() > self.promote_rate {
            self.radius = (self.radius + self.radius_step).min(self.radius_cap);
            self.time_limit = (self.time_limit + self.time_step).min(self.time_cap);
            self.level += 1;
            self.window.clear();
            true
        } else {
            false
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageFlags {
    pub approached: bool,
    pub scooped: bool,
    pub tossed: bool,
    pub loaded: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Termination {
    Continue,
    SuccessLoad,
    TimeLimitFail,
    /// Hard 20 s cap.
    Timeout,
    ApproachSuccess,
}

impl Termination {
    pub fn is_done(self) -> bool {
        self != Termination::Continue
    }

    /// Whether the episode was cut by a clock rather than by reaching a
    /// terminal task state. Approach success is also treated as a cut since
    /// the approach reward carries no terminal bonus.
    pub fn bootstraps(self) -> bool {
        matches!(
            self,
            Termination::TimeLimitFail | Termination::Timeout | Termination::ApproachSuccess
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepResult {
    pub reward: f64,
    pub termination: Termination,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeState {
    pub world: World,
    pub mode: Mode,
    pub target_index: usize,
    /// Goal point for approach episodes (no physical object there).
    pub approach_target: Option<Vec3>,
    pub stage_flags: Vec<StageFlags>,
    pub n_loaded: usize,
    /// Loads that happened during the last step.
    pub new_loads: usize,
    /// The target became loaded during the last step.
    pub target_load_event: bool,
    pub retain_steps: u64,
    pub elapsed_steps: u64,
    pub time_limit_steps: u64,
    pub action: [f64; DOF],
    pub prev_action: [f64; DOF],
    pub last_heading: f64,
    pub terminal: Option<Termination>,
    event_cursor: usize,
}

fn sample_disc<R: Rng + ?Sized>(rng: &mut R, radius: f64) -> Vec2 {
    let r = radius * rng.random::<f64>().sqrt();
    let a = rng.random_range(-PI..PI);
    Vec2::new(r * a.cos(), r * a.sin())
}

impl EpisodeState {
    /// Wraps an already populated world into an episode.
    pub fn from_world(world: World, mode: Mode, cfg: &EnvConfig, time_limit: f64) -> Self {
        let n = world.objects.len();
        let mut ep = Self {
            last_heading: world.robot.yaw,
            world,
            mode,
            target_index: 0,
            approach_target: None,
            stage_flags: vec![StageFlags::default(); n],
            n_loaded: 0,
            new_loads: 0,
            target_load_event: false,
            retain_steps: 0,
            elapsed_steps: 0,
            time_limit_steps: cfg.steps(time_limit),
            action: [0.0; DOF],
            prev_action: [0.0; DOF],
            terminal: None,
            event_cursor: 0,
        };
        ep.n_loaded = ep.world.n_loaded();
        if mode == Mode::Meta {
            if let Ok(i) = ep.nearest_uncollected() {
                ep.target_index = i;
            }
        }
        ep
    }

    /// Starts a new episode. `init_robot` overrides the default resting pose
    /// at the origin (skill-transition initialization).
    pub fn reset<R: Rng + ?Sized>(
        mode: Mode,
        cfg: &EnvConfig,
        curriculum: &Curriculum,
        rng: &mut R,
        init_robot: Option<RobotState>,
    ) -> Result<Self, EnvError> {
        let mut world = World::new(cfg.sim, rng.random())?;
        if let Some(robot) = init_robot {
            world.robot = robot;
        }
        let mut approach_target = None;
        let time_limit = match mode {
            Mode::ScoopToss => {
                let tip = world.scoop_tip();
                let fwd = rotate(Vec2::new(cfg.spawn_ahead, 0.0), world.robot.yaw);
                let xy = tip + fwd + sample_disc(rng, curriculum.radius);
                world.add_object(cfg.object.spawn(xy, rng));
                curriculum.time_limit
            }
            Mode::Approach => {
                let xy = world.robot.base_pos + sample_disc(rng, cfg.approach_radius);
                approach_target = Some(Vec3::new(xy.x, xy.y, cfg.object.radius));
                cfg.hard_timeout
            }
            Mode::Meta => {
                for _ in 0..cfg.meta_objects {
                    let xy = world.robot.base_pos + sample_disc(rng, cfg.meta_radius);
                    world.add_object(cfg.object.spawn(xy, rng));
                }
                cfg.meta_time_limit
            }
        };
        let mut ep = Self::from_world(world, mode, cfg, time_limit);
        ep.approach_target = approach_target;
        Ok(ep)
    }

    pub fn elapsed(&self) -> f64 {
        self.elapsed_steps as f64 * self.world.dt()
    }

    pub fn retain_time(&self) -> f64 {
        self.retain_steps as f64 * self.world.dt()
    }

    /// World position the policy is steered toward.
    pub fn target_position(&self) -> Vec3 {
        match (self.mode, self.approach_target) {
            (Mode::Approach, Some(p)) => p,
            _ => self
                .world
                .objects
                .get(self.target_index)
                .map(|o| o.position)
                .unwrap_or_else(Vec3::zeros),
        }
    }

    pub fn scoop_target_distance(&self) -> f64 {
        (self.world.basin_center() - self.target_position()).norm()
    }

    fn target_phase(&self) -> Option<Phase> {
        self.world.objects.get(self.target_index).map(|o| o.phase)
    }

    pub fn has_target(&self) -> bool {
        match self.mode {
            Mode::Approach => self.approach_target.is_some(),
            Mode::ScoopToss => self.target_phase().is_some(),
            Mode::Meta => self.target_phase().is_some_and(|p| p != Phase::Loaded),
        }
    }

    /// Index of the closest non-loaded object to the base (ties: lowest index).
    pub fn nearest_uncollected(&self) -> Result<usize, EnvError> {
        let base = self.world.robot.base_pos;
        let mut best: Option<(usize, f64)> = None;
        for (i, o) in self.world.objects.iter().enumerate() {
            if o.phase == Phase::Loaded {
                continue;
            }
            let d = (Vec2::new(o.position.x, o.position.y) - base).norm();
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        best.map(|(i, _)| i).ok_or(EnvError::NoTarget)
    }

    pub fn build_observation(&self) -> Result<Observation, EnvError> {
        if !self.has_target() {
            return Err(EnvError::NoTarget);
        }
        let r = &self.world.robot;
        let body_vel = r.body_velocity();
        let body_acc = rotate(r.base_accel, -r.yaw);
        let rel = self.world.world_to_base(&self.target_position());
        let mut obs = [0.0; OBS_DIM];
        let values: [f64; OBS_DIM] = [
            0.0,
            0.0,
            -1.0,
            0.0,
            0.0,
            r.yaw_rate,
            body_acc.x,
            body_acc.y,
            0.0,
            body_vel.x,
            body_vel.y,
            r.yaw_rate,
            r.scoop_height,
            r.scoop_pitch,
            r.dof_accel[0],
            r.dof_accel[1],
            r.dof_accel[2],
            r.scoop_height_rate,
            r.scoop_pitch_rate,
            self.action[0],
            self.action[1],
            self.action[2],
            self.action[3],
            self.action[4],
            rel.x,
            rel.y,
            rel.z,
            self.scoop_target_distance(),
        ];
        obs.copy_from_slice(&values);
        if obs.iter().any(|v| !v.is_finite()) {
            return Err(EnvError::Sim(SimError::NonFinite {
                time: self.world.time,
                what: "observation",
            }));
        }
        Ok(obs)
    }

    /// Updates the ordered stage flags from the current world and the events
    /// logged since the last call.
    pub fn classify_stage_events(&mut self) {
        let basin = self.world.basin_center();
        let tray_height = self.world.tray_floor_center().z;
        let events = self.world.events_since(self.event_cursor).to_vec();
        self.event_cursor = self.world.event_log.len();
        for (i, flags) in self.stage_flags.iter_mut().enumerate() {
            let obj = &self.world.objects[i];
            if (basin - obj.position).norm() < APPROACHED_DISTANCE {
                flags.approached = true;
            }
            let captured = events
                .iter()
                .any(|(_, e)| matches!(e, Event::Capture { object } if *object == i));
            if captured && flags.approached {
                flags.scooped = true;
            }
            if flags.scooped && obj.max_height_reached > tray_height {
                flags.tossed = true;
            }
            if flags.tossed && obj.phase == Phase::Loaded {
                flags.loaded = true;
            }
        }
    }

    /// Terminal outcome for the current state (`Continue` while running).
    pub fn check_termination(&self, cfg: &EnvConfig) -> Termination {
        if let Some(t) = self.terminal {
            return t;
        }
        let hard = cfg.steps(cfg.hard_timeout);
        let fallen = false; // a planar base cannot fall
        if fallen {
            return Termination::TimeLimitFail;
        }
        match self.mode {
            Mode::ScoopToss => {
                if self.target_phase() == Some(Phase::Loaded) {
                    if self.retain_steps >= cfg.steps(cfg.retain_time) {
                        Termination::SuccessLoad
                    } else if self.elapsed_steps >= hard {
                        Termination::Timeout
                    } else {
                        Termination::Continue
                    }
                } else if self.elapsed_steps >= self.time_limit_steps.min(hard) {
                    Termination::TimeLimitFail
                } else {
                    Termination::Continue
                }
            }
            Mode::Approach => {
                if self.scoop_target_distance() <= cfg.success_distance {
                    Termination::ApproachSuccess
                } else if self.elapsed_steps >= hard {
                    Termination::Timeout
                } else {
                    Termination::Continue
                }
            }
            Mode::Meta => {
                if !self.world.objects.is_empty() && self.n_loaded == self.world.objects.len() {
                    Termination::SuccessLoad
                } else if self.elapsed_steps >= self.time_limit_steps {
                    Termination::TimeLimitFail
                } else {
                    Termination::Continue
                }
            }
        }
    }

    /// Applies a policy action in `[-1, 1]^5`, advances the world and
    /// returns the step reward and termination status.
    pub fn step(&mut self, u: &[f64; DOF], cfg: &EnvConfig, w: &RewardWeights) -> Result<StepResult, EnvError> {
        if let Some(t) = self.terminal {
            return Err(EnvError::EpisodeOver(t));
        }
        let mut clipped = [0.0; DOF];
        for i in 0..DOF {
            if !u[i].is_finite() {
                return Err(EnvError::Sim(SimError::NonFinite {
                    time: self.world.time,
                    what: "policy action",
                }));
            }
            clipped[i] = u[i].clamp(-1.0, 1.0);
        }
        self.prev_action = self.action;
        self.action = clipped;
        let av = cfg.action_vector(&clipped);
        let loaded_before = self.world.n_loaded();
        let target_was_loaded = self.target_phase() == Some(Phase::Loaded);
        self.world.step(&av)?;
        self.elapsed_steps += 1;
        self.n_loaded = self.world.n_loaded();
        self.new_loads = self.n_loaded.saturating_sub(loaded_before);
        let target_loaded = self.target_phase() == Some(Phase::Loaded);
        self.target_load_event = !target_was_loaded && target_loaded;
        self.classify_stage_events();
        if self.mode == Mode::ScoopToss && target_loaded {
            self.retain_steps += 1;
        }
        let reward = rewards::reward(self, w);
        let basin = self.world.basin_center();
        let target = self.target_position();
        let to_target = Vec2::new(target.x - basin.x, target.y - basin.y);
        if to_target.norm() >= 1e-6 {
            self.last_heading = wrap_angle(to_target.y.atan2(to_target.x));
        }
        if self.mode == Mode::Meta && target_loaded {
            if let Ok(i) = self.nearest_uncollected() {
                self.target_index = i;
            }
        }
        let termination = self.check_termination(cfg);
        if termination.is_done() {
            self.terminal = Some(termination);
        }
        Ok(StepResult { reward, termination })
    }
}
