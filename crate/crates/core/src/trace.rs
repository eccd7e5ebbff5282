//! Per-step trajectory dumps as newline-delimited JSON, and deterministic
//! replay of a dump back into an event log.
//!
//! The first line is a header carrying the format version and the full
//! initial world; every following line is one control step.

use crate::env::StageFlags;
use crate::sim::{ActionVector, Event, Phase, RobotState, SimError, Vec3, World};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

pub const TRACE_FORMAT: &str = "scoop-trace";
pub const TRACE_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error("trace line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unsupported trace {format:?} version {version}")]
    Version { format: String, version: u32 },
    #[error("trace has no header")]
    MissingHeader,
    #[error("replay diverged from the recording at step {step}: {what}")]
    Diverged { step: u64, what: &'static str },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub format: String,
    pub version: u32,
    /// Free-form label (mode, session id).
    pub label: String,
    pub initial: World,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceObject {
    pub position: Vec3,
    pub phase: Phase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: u64,
    pub time: f64,
    /// Clamped actuator command applied on this step.
    pub action: ActionVector,
    pub robot: RobotState,
    pub objects: Vec<TraceObject>,
    pub events: Vec<Event>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expert: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
// Adjacent tagging: the world RNG carries a u128 stream position, which an
// internally tagged enum cannot buffer.
#[serde(tag = "type", content = "data", rename_all = "snake_case")]
pub enum TraceRecord {
    Header(TraceHeader),
    Step(TraceStep),
}

/// Streams one record per line; call [`TraceWriter::record`] after each
/// `World::step`.
pub struct TraceWriter<W: Write> {
    out: W,
    cursor: usize,
    step: u64,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(mut out: W, label: &str, initial: &World) -> Result<Self, TraceError> {
        let header = TraceRecord::Header(TraceHeader {
            format: TRACE_FORMAT.to_string(),
            version: TRACE_VERSION,
            label: label.to_string(),
            initial: initial.clone(),
        });
        write_line(&mut out, &header)?;
        Ok(Self {
            out,
            cursor: initial.event_log.len(),
            step: 0,
        })
    }

    pub fn record(&mut self, world: &World, action: &ActionVector, expert: Option<&str>) -> Result<(), TraceError> {
        self.step += 1;
        let rec = TraceRecord::Step(TraceStep {
            step: self.step,
            time: world.time,
            action: *action,
            robot: world.robot,
            objects: world
                .objects
                .iter()
                .map(|o| TraceObject {
                    position: o.position,
                    phase: o.phase,
                })
                .collect(),
            events: world.events_since(self.cursor).iter().map(|(_, e)| *e).collect(),
            expert: expert.map(str::to_string),
        });
        self.cursor = world.event_log.len();
        write_line(&mut self.out, &rec)
    }

    pub fn flush(&mut self) -> Result<(), TraceError> {
        self.out.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

fn write_line<W: Write>(out: &mut W, rec: &TraceRecord) -> Result<(), TraceError> {
    let line = serde_json::to_string(rec).map_err(|e| TraceError::Parse { line: 0, msg: e.to_string() })?;
    writeln!(out, "{line}")?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub header: TraceHeader,
    pub steps: Vec<TraceStep>,
}

impl Trace {
    pub fn read<R: BufRead>(r: R) -> Result<Self, TraceError> {
        let mut header = None;
        let mut steps = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: TraceRecord = serde_json::from_str(&line).map_err(|e| TraceError::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
            match rec {
                TraceRecord::Header(h) => {
                    if h.format != TRACE_FORMAT || h.version != TRACE_VERSION {
                        return Err(TraceError::Version {
                            format: h.format,
                            version: h.version,
                        });
                    }
                    header = Some(h);
                }
                TraceRecord::Step(s) => {
                    if header.is_none() {
                        return Err(TraceError::MissingHeader);
                    }
                    steps.push(s);
                }
            }
        }
        Ok(Self {
            header: header.ok_or(TraceError::MissingHeader)?,
            steps,
        })
    }

    pub fn load(path: &Path) -> Result<Self, TraceError> {
        Self::read(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    /// Recorded events with their step times.
    pub fn recorded_events(&self) -> Vec<(f64, Event)> {
        self.steps
            .iter()
            .flat_map(|s| s.events.iter().map(move |e| (s.time, *e)))
            .collect()
    }

    /// Re-simulates the recorded actions from the initial world, checking
    /// every step against the recording, and returns the final world.
    pub fn replay(&self) -> Result<World, TraceError> {
        let mut world = self.header.initial.clone();
        for s in &self.steps {
            world.step(&s.action)?;
            if world.robot != s.robot {
                return Err(TraceError::Diverged { step: s.step, what: "robot state" });
            }
            let same_objects = world.objects.len() == s.objects.len()
                && world
                    .objects
                    .iter()
                    .zip(&s.objects)
                    .all(|(o, r)| o.position == r.position && o.phase == r.phase);
            if !same_objects {
                return Err(TraceError::Diverged { step: s.step, what: "objects" });
            }
        }
        Ok(world)
    }
}

/// Text rendering of an event log, one event per line.
pub fn render_event_log(events: &[(f64, Event)]) -> String {
    let mut s = String::new();
    for (t, e) in events {
        let _ = match e {
            Event::Capture { object } => writeln!(s, "{t:9.3} capture    object {object}"),
            Event::Snag { object } => writeln!(s, "{t:9.3} snag       object {object}"),
            Event::Release { object, cause } => writeln!(s, "{t:9.3} release    object {object} cause {cause:?}"),
            Event::Apex { object, height } => writeln!(s, "{t:9.3} apex       object {object} height {height:.4}"),
            Event::TrayEnter { object } => writeln!(s, "{t:9.3} tray-enter object {object}"),
            Event::GroundHit { object, speed } => writeln!(s, "{t:9.3} ground-hit object {object} speed {speed:.4}"),
        };
    }
    s
}

/// Replays a dumped trace and renders the regenerated event log.
pub fn replay_event_log(trace: &Trace) -> Result<String, TraceError> {
    let world = trace.replay()?;
    let start = trace.header.initial.event_log.len();
    Ok(render_event_log(&world.event_log[start..]))
}

/// Stage flags of one object from its event stream alone: approach and
/// scoop on capture, toss on an apex above the tray floor, load on tray entry.
pub fn stage_flags_from_events(events: &[Event], object: usize, tray_floor_height: f64) -> StageFlags {
    let mut f = StageFlags::default();
    for e in events.iter().filter(|e| e.object() == object) {
        match e {
            Event::Capture { .. } => {
                f.approached = true;
                f.scooped = true;
            }
            Event::Apex { height, .. } if f.scooped && *height > tray_floor_height => f.tossed = true,
            Event::TrayEnter { .. } if f.tossed => f.loaded = true,
            _ => {}
        }
    }
    f
}
