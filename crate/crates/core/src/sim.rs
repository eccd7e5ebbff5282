//! Fixed-timestep physics of a planar robot base that carries a scoop on its
//! front-right corner and a tray on its back.
//!
//! The robot has five actuated degrees of freedom: planar velocity (body
//! frame x/y), yaw rate, scoop height and scoop pitch. Objects are point-like
//! bodies with a bounding radius and move through a small phase graph:
//!
//! ```text
//! Ground -> Carried -> Ballistic -> Ground
//!                              \-> Loaded (absorbing)
//! ```
//!
//! Carried objects ride the scoop basin kinematically until the scoop can no
//! longer support them (normal force, friction cone or tilt). Tossing is not
//! scripted anywhere; it falls out of how the scoop is moved.

use nalgebra::{Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;

/// Number of actuated degrees of freedom.
pub const DOF: usize = 5;

/// Mass of the reference training object (4 cm cube).
pub const REFERENCE_MASS: f64 = 0.096;

const IMPACT_FRICTION: f64 = 0.3;
const REST_SPEED: f64 = 0.05;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum SimError {
    #[error("integration fault: non-finite {what} at t = {time:.3} s")]
    NonFinite { time: f64, what: &'static str },
    #[error("object index {index} out of range ({len} objects)")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(angle: f64) -> f64 {
    let r = angle.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

/// Rotates a planar vector by `yaw`.
pub fn rotate(v: Vec2, yaw: f64) -> Vec2 {
    let (s, c) = yaw.sin_cos();
    Vec2::new(c * v.x - s * v.y, s * v.x + c * v.y)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoopGeom {
    pub basin_half_width_x: f64,
    pub basin_half_width_y: f64,
    pub wall_height: f64,
    pub mass: f64,
    /// Pivot of the scoop in the base frame.
    pub mount_offset: Vec2,
    /// Distance from the pitch axis to the basin floor, used for the
    /// tangential launch velocity.
    pub release_lever: f64,
}

impl Default for ScoopGeom {
    fn default() -> Self {
        Self {
            basin_half_width_x: 0.0675,
            basin_half_width_y: 0.0825,
            wall_height: 0.075,
            mass: 0.2,
            mount_offset: Vec2::new(0.25, -0.12),
            release_lever: 0.15,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrayGeom {
    pub center_offset: Vec2,
    pub half_extents: Vec2,
    pub wall_height: f64,
    pub floor_height: f64,
    pub mass: f64,
}

impl Default for TrayGeom {
    fn default() -> Self {
        Self {
            center_offset: Vec2::new(-0.20, 0.0),
            half_extents: Vec2::new(0.145, 0.145),
            wall_height: 0.07,
            floor_height: 0.35,
            mass: 0.4,
        }
    }
}

/// Servo gains, rate limits and command limits of the five DOFs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ActuatorConfig {
    pub kp: f64,
    pub base_accel_limit: f64,
    pub yaw_accel_limit: f64,
    pub height_rate_limit: f64,
    pub pitch_rate_limit: f64,
    pub height_accel_limit: f64,
    pub pitch_accel_limit: f64,
    pub max_speed: f64,
    pub max_yaw_rate: f64,
    pub height_range: (f64, f64),
    pub pitch_range: (f64, f64),
    pub base_mass: f64,
    pub yaw_inertia: f64,
    pub pitch_inertia: f64,
}

impl Default for ActuatorConfig {
    fn default() -> Self {
        Self {
            kp: 10.0,
            base_accel_limit: 2.0,
            yaw_accel_limit: 6.0,
            height_rate_limit: 4.0,
            pitch_rate_limit: 12.0,
            height_accel_limit: 25.0,
            pitch_accel_limit: 60.0,
            max_speed: 1.5,
            max_yaw_rate: 3.0,
            height_range: (0.0, 0.8),
            pitch_range: (-PI / 2.0, PI / 2.0),
            base_mass: 12.0,
            yaw_inertia: 0.5,
            pitch_inertia: 0.005,
        }
    }
}

/// Thresholds of the capture / release contact model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContactConfig {
    pub capture_radius: f64,
    pub capture_max_height: f64,
    pub capture_max_pitch: f64,
    pub capture_max_rel_speed: f64,
    pub snag_half_angle: f64,
    pub snag_kick: f64,
    pub spill_friction: f64,
    pub tilt_release: f64,
    /// Vertical speed below which a contained object counts as settled.
    pub load_max_vz: f64,
    /// Coulomb coefficient for sliding on the ground.
    pub ground_friction: f64,
    /// Rolling resistance used instead for `Round` objects.
    pub rolling_friction: f64,
    /// Exponent of the `(reference_mass / mass)` launch gain.
    pub launch_mass_exponent: f64,
}

impl Default for ContactConfig {
    fn default() -> Self {
        Self {
            capture_radius: 0.06,
            capture_max_height: 0.05,
            capture_max_pitch: 0.3,
            capture_max_rel_speed: 1.5,
            snag_half_angle: 0.6,
            snag_kick: 0.4,
            spill_friction: 0.6,
            tilt_release: 0.9,
            load_max_vz: 0.05,
            ground_friction: 0.5,
            rolling_friction: 0.1,
            launch_mass_exponent: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub dt: f64,
    pub gravity: f64,
    pub scoop: ScoopGeom,
    pub tray: TrayGeom,
    pub actuator: ActuatorConfig,
    pub contact: ContactConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 0.02,
            gravity: 9.81,
            scoop: ScoopGeom::default(),
            tray: TrayGeom::default(),
            actuator: ActuatorConfig::default(),
            contact: ContactConfig::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let s = &self.scoop;
        let t = &self.tray;
        let positive = [
            ("dt", self.dt),
            ("gravity", self.gravity),
            ("scoop.basin_half_width_x", s.basin_half_width_x),
            ("scoop.basin_half_width_y", s.basin_half_width_y),
            ("scoop.wall_height", s.wall_height),
            ("scoop.mass", s.mass),
            ("scoop.release_lever", s.release_lever),
            ("tray.half_extents.x", t.half_extents.x),
            ("tray.half_extents.y", t.half_extents.y),
            ("tray.wall_height", t.wall_height),
            ("tray.floor_height", t.floor_height),
            ("tray.mass", t.mass),
            ("actuator.kp", self.actuator.kp),
            ("actuator.base_accel_limit", self.actuator.base_accel_limit),
            ("actuator.yaw_accel_limit", self.actuator.yaw_accel_limit),
            ("actuator.height_rate_limit", self.actuator.height_rate_limit),
            ("actuator.pitch_rate_limit", self.actuator.pitch_rate_limit),
            ("actuator.height_accel_limit", self.actuator.height_accel_limit),
            ("actuator.pitch_accel_limit", self.actuator.pitch_accel_limit),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(SimError::InvalidGeometry(format!("{name} must be > 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Pose and DOF state of the reduced robot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub base_pos: Vec2,
    pub yaw: f64,
    /// World-frame planar velocity.
    pub base_vel: Vec2,
    pub yaw_rate: f64,
    /// World-frame planar acceleration over the last step.
    pub base_accel: Vec2,
    pub scoop_height: f64,
    pub scoop_pitch: f64,
    pub scoop_height_rate: f64,
    pub scoop_pitch_rate: f64,
    /// Per-DOF acceleration over the last step: body-frame x/y acceleration,
    /// yaw acceleration, scoop height acceleration, scoop pitch acceleration.
    pub dof_accel: [f64; DOF],
    /// Actuator effort proxy over the last step.
    pub effort: [f64; DOF],
}

impl Default for RobotState {
    fn default() -> Self {
        Self {
            base_pos: Vec2::zeros(),
            yaw: 0.0,
            base_vel: Vec2::zeros(),
            yaw_rate: 0.0,
            base_accel: Vec2::zeros(),
            scoop_height: 0.0,
            scoop_pitch: 0.0,
            scoop_height_rate: 0.0,
            scoop_pitch_rate: 0.0,
            dof_accel: [0.0; DOF],
            effort: [0.0; DOF],
        }
    }
}

impl RobotState {
    pub fn at(base_pos: Vec2, yaw: f64) -> Self {
        Self {
            base_pos,
            yaw: wrap_angle(yaw),
            ..Self::default()
        }
    }

    /// Planar velocity expressed in the base frame.
    pub fn body_velocity(&self) -> Vec2 {
        rotate(self.base_vel, -self.yaw)
    }

    /// Checks the range invariants of the type.
    pub fn is_valid(&self, limits: &ActuatorConfig) -> bool {
        let finite = self.base_pos.iter().all(|v| v.is_finite())
            && self.base_vel.iter().all(|v| v.is_finite())
            && self.base_accel.iter().all(|v| v.is_finite())
            && [self.yaw, self.yaw_rate, self.scoop_height, self.scoop_pitch]
                .iter()
                .all(|v| v.is_finite())
            && [self.scoop_height_rate, self.scoop_pitch_rate]
                .iter()
                .all(|v| v.is_finite())
            && self.dof_accel.iter().chain(&self.effort).all(|v| v.is_finite());
        finite
            && self.scoop_height >= limits.height_range.0
            && self.scoop_height <= limits.height_range.1
            && self.scoop_pitch >= limits.pitch_range.0
            && self.scoop_pitch <= limits.pitch_range.1
            && self.yaw > -PI
            && self.yaw <= PI
    }
}

/// Targets for the five DOFs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ActionVector {
    pub target_vx: f64,
    pub target_vy: f64,
    pub target_yaw_rate: f64,
    pub target_scoop_height: f64,
    pub target_scoop_pitch: f64,
}

impl ActionVector {
    pub fn from_array(a: [f64; DOF]) -> Self {
        Self {
            target_vx: a[0],
            target_vy: a[1],
            target_yaw_rate: a[2],
            target_scoop_height: a[3],
            target_scoop_pitch: a[4],
        }
    }

    pub fn to_array(&self) -> [f64; DOF] {
        [
            self.target_vx,
            self.target_vy,
            self.target_yaw_rate,
            self.target_scoop_height,
            self.target_scoop_pitch,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn clamped(&self, limits: &ActuatorConfig) -> Self {
        Self {
            target_vx: self.target_vx.clamp(-limits.max_speed, limits.max_speed),
            target_vy: self.target_vy.clamp(-limits.max_speed, limits.max_speed),
            target_yaw_rate: self
                .target_yaw_rate
                .clamp(-limits.max_yaw_rate, limits.max_yaw_rate),
            target_scoop_height: self
                .target_scoop_height
                .clamp(limits.height_range.0, limits.height_range.1),
            target_scoop_pitch: self
                .target_scoop_pitch
                .clamp(limits.pitch_range.0, limits.pitch_range.1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ShapeClass {
    Box,
    Round,
    Handled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    Ground,
    Carried,
    Ballistic,
    Loaded,
}

impl Phase {
    /// Whether `self -> next` is an edge of the phase graph (self loops included).
    pub fn can_become(self, next: Phase) -> bool {
        use Phase::*;
        self == next
            || matches!(
                (self, next),
                (Ground, Carried) | (Carried, Ballistic) | (Ballistic, Ground) | (Ballistic, Loaded)
            )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectState {
    pub position: Vec3,
    pub velocity: Vec3,
    pub mass: f64,
    pub radius: f64,
    pub shape_class: ShapeClass,
    pub restitution: f64,
    pub phase: Phase,
    pub max_height_reached: f64,
    /// World-frame direction the handle points to (`Handled` only).
    pub handle_yaw: f64,
    /// Position in the base frame once loaded.
    pub tray_local: Option<Vec3>,
}

impl ObjectState {
    /// The 4 cm, 96 g training cube resting on the ground at `xy`.
    pub fn cube(xy: Vec2) -> Self {
        Self::resting(xy, REFERENCE_MASS, 0.02, ShapeClass::Box, 0.2)
    }

    pub fn resting(xy: Vec2, mass: f64, radius: f64, shape_class: ShapeClass, restitution: f64) -> Self {
        Self {
            position: Vec3::new(xy.x, xy.y, radius),
            velocity: Vec3::zeros(),
            mass,
            radius,
            shape_class,
            restitution: restitution.clamp(0.0, 1.0),
            phase: Phase::Ground,
            max_height_reached: radius,
            handle_yaw: 0.0,
            tray_local: None,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().chain(self.velocity.iter()).all(|v| v.is_finite())
            && self.max_height_reached.is_finite()
    }

    fn horizontal_velocity(&self) -> Vec2 {
        Vec2::new(self.velocity.x, self.velocity.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReleaseCause {
    NormalForce,
    FrictionCone,
    Tilt,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Event {
    Capture { object: usize },
    Snag { object: usize },
    Release { object: usize, cause: ReleaseCause },
    Apex { object: usize, height: f64 },
    TrayEnter { object: usize },
    GroundHit { object: usize, speed: f64 },
}

impl Event {
    pub fn object(&self) -> usize {
        match *self {
            Event::Capture { object }
            | Event::Snag { object }
            | Event::Release { object, .. }
            | Event::Apex { object, .. }
            | Event::TrayEnter { object }
            | Event::GroundHit { object, .. } => object,
        }
    }
}

/// Result of a scoop/object contact test for a ground object.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Contact {
    None,
    Capture,
    /// Handle caught the scoop edge; the object is pushed sideways instead.
    Snag { kick_dir: Vec2 },
}

/// Free flight with symplectic Euler and a restitution bounce on the ground.
///
/// Returns the new state, the apex height if the vertical velocity changed
/// sign during the step, and the impact speed if the ground was hit.
pub fn integrate_ballistic(obj: &ObjectState, dt: f64, g: f64) -> (ObjectState, Option<f64>, Option<f64>) {
    let mut o = *obj;
    if o.position.z <= o.radius && o.velocity.norm() < REST_SPEED {
        o.position.z = o.radius;
        o.velocity = Vec3::zeros();
        o.phase = Phase::Ground;
        return (o, None, None);
    }
    let vz_before = o.velocity.z;
    o.velocity.z -= g * dt;
    o.position += o.velocity * dt;
    let mut apex = None;
    if vz_before > 0.0 && o.velocity.z <= 0.0 {
        apex = Some(o.position.z.max(obj.position.z));
    }
    o.max_height_reached = o.max_height_reached.max(o.position.z);
    let mut impact = None;
    if o.position.z <= o.radius {
        let pre = o.velocity.norm();
        impact = Some(pre);
        o.position.z = o.radius;
        o.velocity.z = -o.restitution * o.velocity.z.min(0.0);
        o.velocity.x *= 1.0 - IMPACT_FRICTION;
        o.velocity.y *= 1.0 - IMPACT_FRICTION;
        if o.velocity.norm() < REST_SPEED {
            o.velocity = Vec3::zeros();
            o.phase = Phase::Ground;
        }
    }
    (o, apex, impact)
}

/// Complete simulation state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct World {
    pub config: SimConfig,
    pub robot: RobotState,
    pub objects: Vec<ObjectState>,
    pub time: f64,
    pub rng: ChaCha8Rng,
    pub event_log: Vec<(f64, Event)>,
    /// Basin acceleration over the last step (world frame).
    pub basin_accel: Vec3,
}

impl PartialEq for World {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.robot == other.robot
            && self.objects == other.objects
            && self.time.to_bits() == other.time.to_bits()
            && self.rng == other.rng
            && self.event_log == other.event_log
            && self.basin_accel == other.basin_accel
    }
}

impl World {
    pub fn new(config: SimConfig, seed: u64) -> Result<Self, SimError> {
        config.validate()?;
        Ok(Self {
            config,
            robot: RobotState::default(),
            objects: Vec::new(),
            time: 0.0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            event_log: Vec::new(),
            basin_accel: Vec3::zeros(),
        })
    }

    pub fn dt(&self) -> f64 {
        self.config.dt
    }

    pub fn gravity(&self) -> f64 {
        self.config.gravity
    }

    /// Transforms a base-frame planar point to the world frame.
    pub fn base_to_world(&self, local: Vec2) -> Vec2 {
        self.robot.base_pos + rotate(local, self.robot.yaw)
    }

    /// Expresses a world point in the base frame (z unchanged, base at ground level).
    pub fn world_to_base(&self, p: &Vec3) -> Vec3 {
        let rel = rotate(Vec2::new(p.x, p.y) - self.robot.base_pos, -self.robot.yaw);
        Vec3::new(rel.x, rel.y, p.z)
    }

    pub fn basin_center(&self) -> Vec3 {
        basin_center_of(&self.robot, &self.config.scoop)
    }

    pub fn basin_velocity(&self) -> Vec3 {
        basin_velocity_of(&self.robot, &self.config.scoop)
    }

    /// Front edge of the scoop basin at ground level.
    pub fn scoop_tip(&self) -> Vec2 {
        let s = &self.config.scoop;
        self.base_to_world(s.mount_offset + Vec2::new(s.basin_half_width_x, 0.0))
    }

    pub fn tray_floor_center(&self) -> Vec3 {
        let xy = self.base_to_world(self.config.tray.center_offset);
        Vec3::new(xy.x, xy.y, self.config.tray.floor_height)
    }

    fn tray_velocity(&self) -> Vec3 {
        let r = rotate(self.config.tray.center_offset, self.robot.yaw);
        let w = self.robot.yaw_rate;
        Vec3::new(self.robot.base_vel.x - w * r.y, self.robot.base_vel.y + w * r.x, 0.0)
    }

    fn object(&self, index: usize) -> Result<&ObjectState, SimError> {
        self.objects.get(index).ok_or(SimError::IndexOutOfRange {
            index,
            len: self.objects.len(),
        })
    }

    pub fn add_object(&mut self, obj: ObjectState) -> usize {
        self.objects.push(obj);
        self.objects.len() - 1
    }

    pub fn any_carried(&self) -> bool {
        self.objects.iter().any(|o| o.phase == Phase::Carried)
    }

    pub fn n_loaded(&self) -> usize {
        self.objects.iter().filter(|o| o.phase == Phase::Loaded).count()
    }

    /// Contact classification of a ground object against the current scoop.
    pub fn contact(&self, index: usize) -> Result<Contact, SimError> {
        let obj = self.object(index)?;
        if obj.phase != Phase::Ground || self.any_carried() {
            return Ok(Contact::None);
        }
        let c = &self.config.contact;
        let basin = self.basin_center();
        let offset = Vec2::new(basin.x - obj.position.x, basin.y - obj.position.y);
        let basin_vel = self.basin_velocity();
        let rel_speed = (Vec2::new(basin_vel.x, basin_vel.y) - obj.horizontal_velocity()).norm();
        let engaged = offset.norm() < c.capture_radius
            && self.robot.scoop_height < c.capture_max_height
            && self.robot.scoop_pitch.abs() < c.capture_max_pitch
            && rel_speed < c.capture_max_rel_speed;
        if !engaged {
            return Ok(Contact::None);
        }
        if obj.shape_class == ShapeClass::Handled {
            // Bearing of the scoop as seen from the object; zero offset means
            // the scoop arrives along its own heading.
            let bearing = if offset.norm() > 1e-9 {
                offset.y.atan2(offset.x)
            } else {
                wrap_angle(self.robot.yaw + PI)
            };
            let miss = wrap_angle(bearing - obj.handle_yaw);
            if miss.abs() < c.snag_half_angle {
                let kick_dir = rotate(Vec2::new(bearing.cos(), bearing.sin()), PI / 2.0);
                return Ok(Contact::Snag { kick_dir });
            }
        }
        Ok(Contact::Capture)
    }

    /// Whether the ground object at `index` is captured by the scoop now.
    pub fn capture_check(&self, index: usize) -> Result<bool, SimError> {
        Ok(self.contact(index)? == Contact::Capture)
    }

    /// Release predicate for a carried object given the last basin acceleration.
    pub fn release_cause(&self, index: usize) -> Result<Option<ReleaseCause>, SimError> {
        let obj = self.object(index)?;
        if obj.phase != Phase::Carried {
            return Ok(None);
        }
        let c = &self.config.contact;
        let support = self.basin_accel.z + self.config.gravity;
        let lateral = Vec2::new(self.basin_accel.x, self.basin_accel.y).norm();
        Ok(if support <= 0.0 {
            Some(ReleaseCause::NormalForce)
        } else if lateral > c.spill_friction * support {
            Some(ReleaseCause::FrictionCone)
        } else if self.robot.scoop_pitch.abs() > c.tilt_release {
            Some(ReleaseCause::Tilt)
        } else {
            None
        })
    }

    pub fn release_check(&self, index: usize) -> Result<bool, SimError> {
        Ok(self.release_cause(index)?.is_some())
    }

    /// Whether the object's center lies inside the tray interior box.
    pub fn tray_containment(&self, index: usize) -> Result<bool, SimError> {
        let obj = self.object(index)?;
        Ok(self.point_in_tray(&obj.position))
    }

    pub fn point_in_tray(&self, p: &Vec3) -> bool {
        let t = &self.config.tray;
        let local = self.world_to_base(p);
        (local.x - t.center_offset.x).abs() <= t.half_extents.x
            && (local.y - t.center_offset.y).abs() <= t.half_extents.y
            && local.z >= t.floor_height
            && local.z <= t.floor_height + t.wall_height
    }

    fn log(&mut self, event: Event) {
        self.event_log.push((self.time, event));
    }

    /// Launch velocity added by the scoop's pitch rate at release.
    fn tangential_launch(&self, mass: f64) -> Vec3 {
        let s = &self.config.scoop;
        let r = &self.robot;
        let speed = s.release_lever * r.scoop_pitch_rate;
        let gain = (REFERENCE_MASS / mass).powf(self.config.contact.launch_mass_exponent);
        let fwd = Vec2::new(r.yaw.cos(), r.yaw.sin());
        let back = -r.scoop_pitch.sin() * speed * gain;
        Vec3::new(fwd.x * back, fwd.y * back, r.scoop_pitch.cos() * speed * gain)
    }

    fn actuate(&mut self, action: &ActionVector) {
        let a = &self.config.actuator;
        let dt = self.config.dt;
        let scoop_mass = self.config.scoop.mass;
        let payload: f64 = self
            .objects
            .iter()
            .filter(|o| o.phase == Phase::Carried)
            .map(|o| o.mass)
            .sum();
        let r = &mut self.robot;
        let old_body_vel = rotate(r.base_vel, -r.yaw);
        let old_yaw_rate = r.yaw_rate;
        let old_h_rate = r.scoop_height_rate;
        let old_p_rate = r.scoop_pitch_rate;

        // Base: first-order velocity tracking with an isotropic accel cap.
        let target_vel = rotate(Vec2::new(action.target_vx, action.target_vy), r.yaw);
        let mut accel = (target_vel - r.base_vel) * a.kp;
        let n = accel.norm();
        if n > a.base_accel_limit {
            accel *= a.base_accel_limit / n;
        }
        r.base_vel += accel * dt;
        r.base_pos += r.base_vel * dt;
        r.base_accel = accel;

        let yaw_acc = (a.kp * (action.target_yaw_rate - r.yaw_rate)).clamp(-a.yaw_accel_limit, a.yaw_accel_limit);
        r.yaw_rate += yaw_acc * dt;
        r.yaw = wrap_angle(r.yaw + r.yaw_rate * dt);

        // Scoop: position servos with rate and acceleration caps.
        let h_rate = (a.kp * (action.target_scoop_height - r.scoop_height))
            .clamp(-a.height_rate_limit, a.height_rate_limit);
        let h_rate = old_h_rate + (h_rate - old_h_rate).clamp(-a.height_accel_limit * dt, a.height_accel_limit * dt);
        let h_new = (r.scoop_height + h_rate * dt).clamp(a.height_range.0, a.height_range.1);
        r.scoop_height_rate = (h_new - r.scoop_height) / dt;
        r.scoop_height = h_new;

        let p_rate = (a.kp * (action.target_scoop_pitch - r.scoop_pitch))
            .clamp(-a.pitch_rate_limit, a.pitch_rate_limit);
        let p_rate = old_p_rate + (p_rate - old_p_rate).clamp(-a.pitch_accel_limit * dt, a.pitch_accel_limit * dt);
        let p_new = (r.scoop_pitch + p_rate * dt).clamp(a.pitch_range.0, a.pitch_range.1);
        r.scoop_pitch_rate = (p_new - r.scoop_pitch) / dt;
        r.scoop_pitch = p_new;

        let body_acc = (rotate(r.base_vel, -r.yaw) - old_body_vel) / dt;
        r.dof_accel = [
            body_acc.x,
            body_acc.y,
            (r.yaw_rate - old_yaw_rate) / dt,
            (r.scoop_height_rate - old_h_rate) / dt,
            (r.scoop_pitch_rate - old_p_rate) / dt,
        ];
        let lifted = scoop_mass + payload;
        r.effort = [
            a.base_mass * r.dof_accel[0],
            a.base_mass * r.dof_accel[1],
            a.yaw_inertia * r.dof_accel[2],
            lifted * r.dof_accel[3],
            a.pitch_inertia * r.dof_accel[4],
        ];
    }

    /// Advances the world by one control step.
    pub fn step(&mut self, action: &ActionVector) -> Result<(), SimError> {
        if !action.is_finite() {
            return Err(SimError::NonFinite {
                time: self.time,
                what: "action",
            });
        }
        let action = action.clamped(&self.config.actuator);
        let dt = self.config.dt;
        let g = self.config.gravity;
        let old_basin_vel = self.basin_velocity();
        self.actuate(&action);
        let basin = self.basin_center();
        let basin_vel = self.basin_velocity();
        self.basin_accel = (basin_vel - old_basin_vel) / dt;
        self.time += dt;

        for i in 0..self.objects.len() {
            match self.objects[i].phase {
                Phase::Carried => {
                    if let Some(cause) = self.release_cause(i)? {
                        let mut o = self.objects[i];
                        o.velocity = old_basin_vel + self.tangential_launch(o.mass);
                        o.phase = Phase::Ballistic;
                        self.objects[i] = o;
                        self.log(Event::Release { object: i, cause });
                        self.advance_ballistic(i, dt, g);
                    } else {
                        let o = &mut self.objects[i];
                        o.position = basin + Vec3::new(0.0, 0.0, o.radius);
                        o.velocity = basin_vel;
                        o.max_height_reached = o.max_height_reached.max(o.position.z);
                    }
                }
                Phase::Ballistic => self.advance_ballistic(i, dt, g),
                Phase::Ground => self.advance_ground(i, dt, g)?,
                Phase::Loaded => {
                    let tray_vel = self.tray_velocity();
                    let local = self.objects[i].tray_local.unwrap_or_default();
                    let xy = self.base_to_world(Vec2::new(local.x, local.y));
                    let o = &mut self.objects[i];
                    o.position = Vec3::new(xy.x, xy.y, local.z);
                    o.velocity = tray_vel;
                }
            }
        }
        self.check_finite()
    }

    fn advance_ballistic(&mut self, i: usize, dt: f64, g: f64) {
        let before = self.objects[i];
        let (mut o, apex, impact) = integrate_ballistic(&before, dt, g);
        if let Some(height) = apex {
            self.log(Event::Apex { object: i, height });
        }
        if let Some(speed) = impact {
            self.log(Event::GroundHit { object: i, speed });
        }
        if o.phase == Phase::Ballistic {
            let t = self.config.tray;
            let local_before = self.world_to_base(&before.position);
            let mut local = self.world_to_base(&o.position);
            let inside_xy = (local.x - t.center_offset.x).abs() <= t.half_extents.x
                && (local.y - t.center_offset.y).abs() <= t.half_extents.y;
            // Falling through the floor plane inside the walls lands on the floor.
            let crossed_floor = inside_xy
                && o.velocity.z <= 0.0
                && local_before.z >= t.floor_height
                && local.z < t.floor_height;
            let settled = self.point_in_tray(&o.position) && o.velocity.z <= self.config.contact.load_max_vz;
            if crossed_floor || settled {
                if crossed_floor {
                    local.z = t.floor_height + o.radius.min(t.wall_height);
                }
                o.phase = Phase::Loaded;
                o.tray_local = Some(local);
                let xy = self.base_to_world(Vec2::new(local.x, local.y));
                o.position = Vec3::new(xy.x, xy.y, local.z);
                o.velocity = self.tray_velocity();
                self.objects[i] = o;
                self.log(Event::TrayEnter { object: i });
                return;
            }
        }
        self.objects[i] = o;
    }

    fn advance_ground(&mut self, i: usize, dt: f64, g: f64) -> Result<(), SimError> {
        let c = self.config.contact;
        {
            let o = &mut self.objects[i];
            let mu = if o.shape_class == ShapeClass::Round {
                c.rolling_friction
            } else {
                c.ground_friction
            };
            let v = o.horizontal_velocity();
            let speed = v.norm();
            let new_speed = (speed - mu * g * dt).max(0.0);
            let v = if speed > 0.0 { v * (new_speed / speed) } else { v };
            o.velocity = Vec3::new(v.x, v.y, 0.0);
            o.position += o.velocity * dt;
            o.position.z = o.radius;
        }
        match self.contact(i)? {
            Contact::Capture => {
                let basin = self.basin_center();
                let basin_vel = self.basin_velocity();
                let o = &mut self.objects[i];
                o.phase = Phase::Carried;
                o.position = basin + Vec3::new(0.0, 0.0, o.radius);
                o.velocity = basin_vel;
                self.log(Event::Capture { object: i });
            }
            Contact::Snag { kick_dir } => {
                let kick = self.config.contact.snag_kick;
                let o = &mut self.objects[i];
                let along = o.horizontal_velocity().dot(&kick_dir);
                let add = (kick - along).max(0.0);
                o.velocity.x += kick_dir.x * add;
                o.velocity.y += kick_dir.y * add;
                self.log(Event::Snag { object: i });
            }
            Contact::None => {}
        }
        Ok(())
    }

    fn check_finite(&self) -> Result<(), SimError> {
        let r = &self.robot;
        if !r.base_pos.iter().chain(r.base_vel.iter()).all(|v| v.is_finite())
            || ![r.yaw, r.yaw_rate, r.scoop_height, r.scoop_pitch].iter().all(|v| v.is_finite())
        {
            return Err(SimError::NonFinite {
                time: self.time,
                what: "robot state",
            });
        }
        if !self.objects.iter().all(ObjectState::is_finite) {
            return Err(SimError::NonFinite {
                time: self.time,
                what: "object state",
            });
        }
        Ok(())
    }

    /// Events logged at or after position `from` of the event log.
    pub fn events_since(&self, from: usize) -> &[(f64, Event)] {
        &self.event_log[from.min(self.event_log.len())..]
    }
}

pub fn basin_center_of(robot: &RobotState, scoop: &ScoopGeom) -> Vec3 {
    let xy = robot.base_pos + rotate(scoop.mount_offset, robot.yaw);
    Vec3::new(xy.x, xy.y, robot.scoop_height)
}

pub fn basin_velocity_of(robot: &RobotState, scoop: &ScoopGeom) -> Vec3 {
    let r = rotate(scoop.mount_offset, robot.yaw);
    let w = robot.yaw_rate;
    Vec3::new(
        robot.base_vel.x - w * r.y,
        robot.base_vel.y + w * r.x,
        robot.scoop_height_rate,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn world() -> World {
        World::new(SimConfig::default(), 7).unwrap()
    }

    fn carried_world() -> World {
        let mut w = world();
        let basin = w.basin_center();
        let mut cube = ObjectState::cube(Vec2::new(basin.x, basin.y));
        cube.phase = Phase::Carried;
        cube.position = basin + Vec3::new(0.0, 0.0, cube.radius);
        w.add_object(cube);
        w
    }

    #[test]
    fn wrap_angle_range() {
        assert_abs_diff_eq!(wrap_angle(PI), PI);
        assert_abs_diff_eq!(wrap_angle(-PI), PI);
        assert_abs_diff_eq!(wrap_angle(3.0 * PI / 2.0), -PI / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(wrap_angle(0.1), 0.1);
    }

    #[test]
    fn zero_action_from_rest_only_advances_clock() {
        let mut w = world();
        let before = w.robot;
        w.step(&ActionVector::default()).unwrap();
        assert_eq!(w.robot, before);
        assert_abs_diff_eq!(w.time, 0.02);
    }

    #[test]
    fn forward_command_tracks_closed_form() {
        // Oracle: integrate the capped first-order tracker in closed form.
        // Phase 1 accel-limited ramp to where kp*(v*-v) = limit, then
        // exponential approach with the symplectic discrete map.
        let mut w = world();
        let action = ActionVector {
            target_vx: 0.3,
            ..Default::default()
        };
        for _ in 0..50 {
            w.step(&action).unwrap();
        }
        let (kp, lim, dt, vt): (f64, f64, f64, f64) = (10.0, 2.0, 0.02, 0.3);
        let (mut v, mut x) = (0.0f64, 0.0f64);
        for _ in 0..50 {
            v += (kp * (vt - v)).clamp(-lim, lim) * dt;
            x += v * dt;
        }
        assert_abs_diff_eq!(w.robot.base_pos.x, x, epsilon = 1e-12);
        assert_abs_diff_eq!(w.robot.base_pos.y, 0.0, epsilon = 1e-12);
        // Within the actuator ramp of the ideal 0.3 m.
        assert!((x - 0.3).abs() < 0.06, "x = {x}");
    }

    #[test]
    fn capture_when_basin_over_cube() {
        let mut w = world();
        let basin = w.basin_center();
        w.add_object(ObjectState::cube(Vec2::new(basin.x, basin.y)));
        assert!(w.capture_check(0).unwrap());
        w.step(&ActionVector::default()).unwrap();
        assert_eq!(w.objects[0].phase, Phase::Carried);
        assert!(matches!(w.event_log[0].1, Event::Capture { object: 0 }));
    }

    #[test]
    fn no_capture_when_far() {
        let mut w = world();
        let basin = w.basin_center();
        w.add_object(ObjectState::cube(Vec2::new(basin.x + 0.2, basin.y)));
        assert!(!w.capture_check(0).unwrap());
        assert!(matches!(w.capture_check(3), Err(SimError::IndexOutOfRange { index: 3, len: 1 })));
    }

    #[test]
    fn handle_snag_kicks_sideways() {
        let mut w = world();
        let basin = w.basin_center();
        // Object slightly ahead of the basin, handle pointing back at the scoop.
        let mut mug = ObjectState::resting(Vec2::new(basin.x + 0.03, basin.y), 0.08, 0.03, ShapeClass::Handled, 0.2);
        mug.handle_yaw = PI;
        w.add_object(mug);
        assert!(!w.capture_check(0).unwrap());
        assert!(matches!(w.contact(0).unwrap(), Contact::Snag { .. }));
        w.step(&ActionVector::default()).unwrap();
        let o = &w.objects[0];
        assert_eq!(o.phase, Phase::Ground);
        // bearing = pi, kick dir = rotate((-1,0), +90deg) = (0,-1); friction then acts once.
        let v = Vec2::new(o.velocity.x, o.velocity.y);
        assert_abs_diff_eq!(v.x, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v.y, -0.4, epsilon = 1e-12);
    }

    #[test]
    fn handle_away_from_scoop_captures() {
        let mut w = world();
        let basin = w.basin_center();
        let mut mug = ObjectState::resting(Vec2::new(basin.x + 0.03, basin.y), 0.08, 0.03, ShapeClass::Handled, 0.2);
        mug.handle_yaw = 0.0;
        w.add_object(mug);
        assert!(w.capture_check(0).unwrap());
    }

    #[test]
    fn release_static_scoop_holds() {
        let w = carried_world();
        assert!(!w.release_check(0).unwrap());
    }

    #[test]
    fn release_on_negative_support() {
        let mut w = carried_world();
        w.basin_accel = Vec3::new(0.0, 0.0, -12.0);
        assert_eq!(w.release_cause(0).unwrap(), Some(ReleaseCause::NormalForce));
    }

    #[test]
    fn release_on_tilt() {
        let mut w = carried_world();
        w.robot.scoop_pitch = 1.2;
        w.basin_accel = Vec3::new(0.1, 0.0, 0.2);
        assert_eq!(w.release_cause(0).unwrap(), Some(ReleaseCause::Tilt));
    }

    #[test]
    fn release_on_spill() {
        let mut w = carried_world();
        w.basin_accel = Vec3::new(6.0, 0.0, 0.0);
        assert_eq!(w.release_cause(0).unwrap(), Some(ReleaseCause::FrictionCone));
    }

    #[test]
    fn decelerating_scoop_releases_during_step() {
        let mut w = carried_world();
        w.robot.scoop_height = 0.3;
        w.robot.scoop_height_rate = 3.0;
        w.objects[0].position = w.basin_center() + Vec3::new(0.0, 0.0, 0.02);
        // Holding height 0.3 commands rate 0: a_z = -3 / 0.02 = -150 < -g.
        w.step(&ActionVector {
            target_scoop_height: 0.3,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(w.objects[0].phase, Phase::Ballistic);
        assert!(w.basin_accel.z + w.gravity() <= 0.0);
        assert!(matches!(
            w.event_log.last().unwrap().1,
            Event::Release {
                cause: ReleaseCause::NormalForce,
                ..
            }
        ));
        assert!(w.objects[0].velocity.z > 2.5);
    }

    #[test]
    fn ballistic_rest_case_goes_to_ground() {
        let mut o = ObjectState::cube(Vec2::zeros());
        o.phase = Phase::Ballistic;
        let (o2, _, _) = integrate_ballistic(&o, 0.02, 9.81);
        assert_eq!(o2.phase, Phase::Ground);
        assert_eq!(o2.position.z, o.radius);
    }

    #[test]
    fn inelastic_impact_zeroes_vertical() {
        let mut o = ObjectState::cube(Vec2::zeros());
        o.restitution = 0.0;
        o.phase = Phase::Ballistic;
        o.position.z = 0.021;
        o.velocity = Vec3::new(1.0, 0.0, -2.0);
        let (o2, _, hit) = integrate_ballistic(&o, 0.02, 9.81);
        assert!(hit.is_some());
        assert_eq!(o2.velocity.z, 0.0);
        assert_eq!(o2.position.z, o.radius);
    }

    #[test]
    fn apex_close_to_closed_form() {
        let mut o = ObjectState::cube(Vec2::zeros());
        o.phase = Phase::Ballistic;
        o.position.z = 0.1;
        o.velocity.z = 3.0;
        let mut apex = None;
        while apex.is_none() {
            let (n, a, _) = integrate_ballistic(&o, 0.02, 9.81);
            o = n;
            apex = a;
        }
        let exact = 0.1 + 9.0 / (2.0 * 9.81);
        assert_abs_diff_eq!(exact, 0.558_715_6, epsilon = 1e-6);
        assert!((apex.unwrap() - exact).abs() <= 3.0 * 0.02);
    }

    #[test]
    fn tray_containment_cases() {
        let mut w = world();
        let floor = w.tray_floor_center();
        w.add_object(ObjectState::cube(Vec2::new(floor.x, floor.y)));
        w.objects[0].position.z = w.config.tray.floor_height;
        assert!(w.tray_containment(0).unwrap());
        w.objects[0].position = Vec3::new(-1.0, 0.0, 0.02);
        assert!(!w.tray_containment(0).unwrap());
        w.objects[0].position = Vec3::new(floor.x, floor.y, 0.35 + 0.07 + 0.05);
        assert!(!w.tray_containment(0).unwrap());
    }

    #[test]
    fn falling_into_tray_loads() {
        let mut w = world();
        let floor = w.tray_floor_center();
        let mut o = ObjectState::cube(Vec2::new(floor.x, floor.y));
        o.position.z = 0.6;
        o.phase = Phase::Ballistic;
        w.add_object(o);
        for _ in 0..30 {
            w.step(&ActionVector::default()).unwrap();
        }
        assert_eq!(w.objects[0].phase, Phase::Loaded);
        assert!(w.tray_containment(0).unwrap());
        assert!(w.event_log.iter().any(|(_, e)| matches!(e, Event::TrayEnter { object: 0 })));
        // Loaded objects ride with the robot.
        for _ in 0..20 {
            w.step(&ActionVector {
                target_vx: 1.0,
                target_yaw_rate: 1.0,
                ..Default::default()
            })
            .unwrap();
        }
        assert_eq!(w.objects[0].phase, Phase::Loaded);
        assert!(w.tray_containment(0).unwrap());
    }

    #[test]
    fn non_finite_action_is_fault() {
        let mut w = world();
        let bad = ActionVector {
            target_vx: f64::NAN,
            ..Default::default()
        };
        assert!(matches!(w.step(&bad), Err(SimError::NonFinite { .. })));
    }

    #[test]
    fn invalid_geometry_rejected() {
        let mut cfg = SimConfig::default();
        cfg.tray.floor_height = 0.0;
        assert!(World::new(cfg, 0).is_err());
    }
}
