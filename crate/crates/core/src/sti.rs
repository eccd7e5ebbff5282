//! Skill-transition initialization: robot states harvested from one expert's
//! rollouts seed the episodes used to fine-tune the other expert.

use crate::env::{Curriculum, EnvConfig, EnvError, EpisodeState, Mode};
use crate::meta::{expert_action, MetaError};
use crate::nn::PolicyNet;
use crate::rewards::RewardWeights;
use crate::sim::{RobotState, Vec2, DOF};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::path::Path;

pub const STI_CAPACITY: usize = 10_000;
/// Rollouts are cut into segments of this many steps; one snapshot is taken
/// at a uniformly random step inside each segment.
pub const SEGMENT_STEPS: u64 = 50;
const MAGIC: &[u8; 4] = b"STIB";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum StiError {
    #[error("STI buffer is empty")]
    Empty,
    #[error("buffer collected from {tag} cannot initialize {mode} fine-tuning")]
    CrossWiring { tag: Mode, mode: Mode },
    #[error("requested {0} entries, capacity is {STI_CAPACITY}")]
    OverCapacity(usize),
    #[error("invalid robot state from source policy at entry {0}")]
    InvalidState(usize),
    #[error("STI file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Meta(#[from] MetaError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StiBuffer {
    /// Mode of the policy whose rollouts produced the entries.
    pub tag: Mode,
    pub capacity: usize,
    entries: Vec<RobotState>,
}

impl StiBuffer {
    pub fn new(tag: Mode) -> Self {
        Self {
            tag,
            capacity: STI_CAPACITY,
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[RobotState] {
        &self.entries
    }

    /// Appends a state; returns false (and drops it) once full.
    pub fn push(&mut self, state: RobotState) -> bool {
        if self.entries.len() >= self.capacity {
            return false;
        }
        self.entries.push(state);
        true
    }

    /// Uniform draw with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<&RobotState, StiError> {
        if self.entries.is_empty() {
            return Err(StiError::Empty);
        }
        Ok(&self.entries[rng.random_range(0..self.entries.len())])
    }

    /// Rejects buffers that would initialize a policy from its own states.
    pub fn check_cross_wiring(&self, mode: Mode) -> Result<(), StiError> {
        if self.tag == mode || mode == Mode::Meta {
            return Err(StiError::CrossWiring { tag: self.tag, mode });
        }
        Ok(())
    }

    /// Starts a fine-tuning episode from a stored robot state; objects and
    /// targets come from the standard reset sampler of `mode`.
    pub fn sample_init<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        mode: Mode,
        cfg: &EnvConfig,
        curriculum: &Curriculum,
    ) -> Result<EpisodeState, StiError> {
        self.check_cross_wiring(mode)?;
        let robot = *self.sample(rng)?;
        Ok(EpisodeState::reset(mode, cfg, curriculum, rng, Some(robot))?)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), StiError> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        let tag = self.tag.name().as_bytes();
        w.write_u32::<LittleEndian>(tag.len() as u32)?;
        w.write_all(tag)?;
        w.write_u32::<LittleEndian>(self.capacity as u32)?;
        w.write_u32::<LittleEndian>(self.entries.len() as u32)?;
        for s in &self.entries {
            for v in robot_fields(s) {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, StiError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(StiError::Format("bad magic".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(StiError::Format(format!("unsupported version {version}")));
        }
        let n = r.read_u32::<LittleEndian>()? as usize;
        let mut tag = vec![0u8; n];
        r.read_exact(&mut tag)?;
        let tag: Mode = String::from_utf8(tag)
            .map_err(|e| StiError::Format(e.to_string()))?
            .parse()
            .map_err(|e: EnvError| StiError::Format(e.to_string()))?;
        let capacity = r.read_u32::<LittleEndian>()? as usize;
        let len = r.read_u32::<LittleEndian>()? as usize;
        if len > capacity || capacity > STI_CAPACITY {
            return Err(StiError::Format(format!("{len} entries for capacity {capacity}")));
        }
        let mut entries = Vec::with_capacity(len);
        for _ in 0..len {
            let mut f = [0.0; ROBOT_FIELDS];
            for v in f.iter_mut() {
                *v = r.read_f64::<LittleEndian>()?;
            }
            entries.push(robot_from_fields(&f));
        }
        Ok(Self { tag, capacity, entries })
    }

    pub fn save(&self, path: &Path) -> Result<(), StiError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, StiError> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

const ROBOT_FIELDS: usize = 13 + 2 * DOF;

fn robot_fields(s: &RobotState) -> [f64; ROBOT_FIELDS] {
    let mut f = [0.0; ROBOT_FIELDS];
    let head = [
        s.base_pos.x,
        s.base_pos.y,
        s.yaw,
        s.base_vel.x,
        s.base_vel.y,
        s.yaw_rate,
        s.base_accel.x,
        s.base_accel.y,
        s.scoop_height,
        s.scoop_pitch,
        s.scoop_height_rate,
        s.scoop_pitch_rate,
    ];
    f[..12].copy_from_slice(&head);
    f[12..12 + DOF].copy_from_slice(&s.dof_accel);
    f[12 + DOF..12 + 2 * DOF].copy_from_slice(&s.effort);
    f
}

fn robot_from_fields(f: &[f64; ROBOT_FIELDS]) -> RobotState {
    let mut dof_accel = [0.0; DOF];
    let mut effort = [0.0; DOF];
    dof_accel.copy_from_slice(&f[12..12 + DOF]);
    effort.copy_from_slice(&f[12 + DOF..12 + 2 * DOF]);
    RobotState {
        base_pos: Vec2::new(f[0], f[1]),
        yaw: f[2],
        base_vel: Vec2::new(f[3], f[4]),
        yaw_rate: f[5],
        base_accel: Vec2::new(f[6], f[7]),
        scoop_height: f[8],
        scoop_pitch: f[9],
        scoop_height_rate: f[10],
        scoop_pitch_rate: f[11],
        dof_accel,
        effort,
    }
}

/// Rolls out `policy` (mean actions) in its own training environment and
/// snapshots robot states until `n` entries are collected.
pub fn collect(
    policy: &PolicyNet<f32>,
    source: Mode,
    n: usize,
    cfg: &EnvConfig,
    seed: u64,
) -> Result<StiBuffer, StiError> {
    if n > STI_CAPACITY {
        return Err(StiError::OverCapacity(n));
    }
    let mut buf = StiBuffer::new(source);
    let curriculum = Curriculum::finished();
    let weights = RewardWeights::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while buf.len() < n {
        let mut ep = EpisodeState::reset(source, cfg, &curriculum, &mut rng, None)?;
        let mut pick = rng.random_range(0..SEGMENT_STEPS);
        loop {
            let step = ep.elapsed_steps;
            if step % SEGMENT_STEPS == pick {
                if !ep.world.robot.is_valid(&cfg.sim.actuator) {
                    return Err(StiError::InvalidState(buf.len()));
                }
                buf.push(ep.world.robot);
                if buf.len() >= n {
                    break;
                }
            }
            if (step + 1) % SEGMENT_STEPS == 0 {
                pick = rng.random_range(0..SEGMENT_STEPS);
            }
            let obs = ep.build_observation()?;
            let u = expert_action(policy, &obs)?;
            if u.iter().any(|v| !v.is_finite()) {
                return Err(StiError::InvalidState(buf.len()));
            }
            if ep.step(&u, cfg, &weights)?.termination.is_done() {
                break;
            }
        }
    }
    Ok(buf)
}
