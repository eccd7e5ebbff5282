//! Joystick teleoperation: the wire protocol and the rule-based session that
//! drives the approach expert toward a projected target and hands over to
//! the scoop-toss expert while the trigger is held near an object.

use crate::env::{EnvConfig, EpisodeState, Mode};
use crate::meta::{ExpertId, Experts, MetaError};
use crate::sim::{rotate, ActionVector, Phase, Vec2, Vec3, World, DOF};
use crate::trace::{TraceError, TraceWriter};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::sync::Arc;

pub const PROJECTION_DISTANCE: f64 = 2.0;
pub const SWITCH_RADIUS: f64 = 1.5;
pub const STATE_HZ: f64 = 30.0;
/// Without any client message for this long the robot is commanded to stop.
pub const INPUT_TIMEOUT: f64 = 1.0;
pub const RECONNECT_GRACE: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirFrame {
    #[default]
    World,
    Body,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Controller,
    Observer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    Joystick { dir: [f64; 2], trigger: bool },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotPose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub vx: f64,
    pub vy: f64,
    pub yaw_rate: f64,
    pub scoop_height: f64,
    pub scoop_pitch: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectView {
    pub position: [f64; 3],
    pub phase: Phase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateMessage {
    pub time: f64,
    pub robot: RobotPose,
    pub objects: Vec<ObjectView>,
    pub n_loaded: usize,
    pub active_expert: ExpertId,
    pub target: Option<[f64; 3]>,
    pub ignored: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    State(StateMessage),
    Role { role: Role },
}

impl ServerMessage {
    /// Single-line JSON text.
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("server messages serialize")
    }
}

/// Ground point `distance` along `dir` from the base; `dir` is rotated by
/// the heading when interpreted in the body frame. `None` for a zero or
/// non-finite direction.
pub fn project_target(base_pos: Vec2, yaw: f64, dir: [f64; 2], distance: f64, frame: DirFrame, ground: f64) -> Option<Vec3> {
    let d = Vec2::new(dir[0], dir[1]);
    let n = d.norm();
    if !n.is_finite() || n < 1e-9 {
        return None;
    }
    let d = d / n;
    let d = match frame {
        DirFrame::World => d,
        DirFrame::Body => rotate(d, yaw),
    };
    let p = base_pos + d * distance;
    Some(Vec3::new(p.x, p.y, ground))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeleopSettings {
    pub distance: f64,
    pub frame: DirFrame,
    pub switch_radius: f64,
    pub input_timeout: f64,
}

impl Default for TeleopSettings {
    fn default() -> Self {
        Self {
            distance: PROJECTION_DISTANCE,
            frame: DirFrame::World,
            switch_radius: SWITCH_RADIUS,
            input_timeout: INPUT_TIMEOUT,
        }
    }
}

/// Simulation side of a teleop session, independent of any transport.
pub struct TeleopSession {
    pub ep: EpisodeState,
    pub cfg: EnvConfig,
    pub settings: TeleopSettings,
    experts: Arc<Experts>,
    pub target: Option<Vec3>,
    pub trigger: bool,
    pub active_expert: ExpertId,
    /// Malformed or unusable client messages.
    pub ignored: u64,
    last_input: Option<f64>,
    trace: Option<TraceWriter<Box<dyn Write + Send>>>,
}

impl TeleopSession {
    pub fn new(world: World, cfg: EnvConfig, experts: Arc<Experts>, settings: TeleopSettings) -> Self {
        let ep = EpisodeState::from_world(world, Mode::Approach, &cfg, f64::INFINITY);
        Self {
            ep,
            cfg,
            settings,
            experts,
            target: None,
            trigger: false,
            active_expert: ExpertId::Approach,
            ignored: 0,
            last_input: None,
            trace: None,
        }
    }

    /// Logs every subsequent step to `out` as a replayable trace.
    pub fn record_to(&mut self, out: Box<dyn Write + Send>) -> Result<(), TraceError> {
        self.trace = Some(TraceWriter::new(out, "teleop", &self.ep.world)?);
        Ok(())
    }

    pub fn world(&self) -> &World {
        &self.ep.world
    }

    pub fn time(&self) -> f64 {
        self.ep.world.time
    }

    /// Parses one client text frame. Returns false (and counts it) when the
    /// message is ignored.
    pub fn handle_text(&mut self, text: &str) -> bool {
        match serde_json::from_str::<ClientMessage>(text) {
            Ok(ClientMessage::Joystick { dir, trigger }) => self.apply_joystick(dir, trigger),
            Err(_) => {
                self.ignored += 1;
                false
            }
        }
    }

    /// Applies a joystick sample; a zero direction keeps the previous target.
    pub fn apply_joystick(&mut self, dir: [f64; 2], trigger: bool) -> bool {
        if dir.iter().any(|v| !v.is_finite()) {
            self.ignored += 1;
            return false;
        }
        let r = &self.ep.world.robot;
        if let Some(t) = project_target(
            r.base_pos,
            r.yaw,
            dir,
            self.settings.distance,
            self.settings.frame,
            self.cfg.object.radius,
        ) {
            self.target = Some(t);
        }
        self.trigger = trigger;
        self.last_input = Some(self.time());
        true
    }

    /// Client gone: stop driving and release the trigger.
    pub fn disconnect(&mut self) {
        self.target = None;
        self.trigger = false;
        self.last_input = None;
    }

    fn nearest_ground_object(&self) -> Option<(usize, f64)> {
        let basin = self.ep.world.basin_center();
        self.ep
            .world
            .objects
            .iter()
            .enumerate()
            .filter(|(_, o)| o.phase == Phase::Ground)
            .map(|(i, o)| (i, Vec2::new(o.position.x - basin.x, o.position.y - basin.y).norm()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
    }

    fn carried_object(&self) -> Option<usize> {
        self.ep
            .world
            .objects
            .iter()
            .position(|o| matches!(o.phase, Phase::Carried | Phase::Ballistic))
    }

    /// Expert for the next step under the trigger/proximity rule; `None`
    /// means no command (zero action).
    pub fn select(&self) -> Option<(ExpertId, Option<usize>)> {
        let idle = self
            .last_input
            .is_none_or(|t| self.time() - t > self.settings.input_timeout);
        if self.trigger && !idle {
            // Keep tossing an object already in the scoop or in flight.
            if let Some(i) = self.carried_object() {
                return Some((ExpertId::ScoopToss, Some(i)));
            }
            if let Some((i, d)) = self.nearest_ground_object() {
                if d <= self.settings.switch_radius {
                    return Some((ExpertId::ScoopToss, Some(i)));
                }
            }
        }
        if idle {
            return None;
        }
        self.target.map(|_| (ExpertId::Approach, None))
    }

    /// One control step of the sim.
    pub fn tick(&mut self) -> Result<(), MetaError> {
        let sel = self.select();
        let u = match sel {
            Some((ExpertId::ScoopToss, Some(i))) => {
                self.active_expert = ExpertId::ScoopToss;
                self.ep.mode = Mode::ScoopToss;
                self.ep.target_index = i;
                let obs = self.ep.build_observation()?;
                self.experts.act(ExpertId::ScoopToss, &obs)?
            }
            Some((_, _)) => {
                self.active_expert = ExpertId::Approach;
                self.ep.mode = Mode::Approach;
                self.ep.approach_target = self.target;
                let obs = self.ep.build_observation()?;
                self.experts.act(ExpertId::Approach, &obs)?
            }
            None => {
                self.active_expert = ExpertId::Approach;
                [0.0; DOF]
            }
        };
        let mut clipped = [0.0; DOF];
        for (c, v) in clipped.iter_mut().zip(&u) {
            *c = v.clamp(-1.0, 1.0);
        }
        let av: ActionVector = if sel.is_none() {
            ActionVector::default()
        } else {
            self.cfg.action_vector(&clipped)
        };
        self.ep.prev_action = self.ep.action;
        self.ep.action = clipped;
        self.ep.world.step(&av).map_err(crate::env::EnvError::from)?;
        self.ep.elapsed_steps += 1;
        self.ep.n_loaded = self.ep.world.n_loaded();
        if let Some(tr) = self.trace.as_mut() {
            let name = match self.active_expert {
                ExpertId::ScoopToss => "scoop_toss",
                ExpertId::Approach => "approach",
            };
            // A failed trace write must not stop the robot.
            if let Err(e) = tr.record(&self.ep.world, &av, Some(name)).and_then(|_| tr.flush()) {
                log::warn!("teleop trace disabled: {e}");
                self.trace = None;
            }
        }
        Ok(())
    }

    pub fn state_message(&self) -> StateMessage {
        let r = &self.ep.world.robot;
        StateMessage {
            time: self.time(),
            robot: RobotPose {
                x: r.base_pos.x,
                y: r.base_pos.y,
                yaw: r.yaw,
                vx: r.base_vel.x,
                vy: r.base_vel.y,
                yaw_rate: r.yaw_rate,
                scoop_height: r.scoop_height,
                scoop_pitch: r.scoop_pitch,
            },
            objects: self
                .ep
                .world
                .objects
                .iter()
                .map(|o| ObjectView {
                    position: [o.position.x, o.position.y, o.position.z],
                    phase: o.phase,
                })
                .collect(),
            n_loaded: self.ep.world.n_loaded(),
            active_expert: self.active_expert,
            target: self.target.map(|t| [t.x, t.y, t.z]),
            ignored: self.ignored,
        }
    }
}
