//! Reward terms for the scoop-toss, approach and meta environments.
//!
//! The pure term functions take plain numbers so they can be checked by hand;
//! the episode-level functions read their inputs from an [`EpisodeState`].

use crate::env::{EpisodeState, Mode};
use crate::sim::{wrap_angle, Phase, Vec2, DOF};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegWeights {
    /// Weight on the squared DOF acceleration norm.
    pub w6: f64,
    /// Weight on the squared action change norm.
    pub w7: f64,
    /// Weight on the squared effort norm.
    pub w8: f64,
}

impl RegWeights {
    pub const SCOOP: RegWeights = RegWeights {
        w6: -1e-3,
        w7: -1e-4,
        w8: -3e-5,
    };
    pub const APPROACH: RegWeights = RegWeights {
        w6: -1e-2,
        w7: -3e-3,
        w8: -1e-5,
    };
}

/// Which factors of the toss term are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TossForm {
    /// `w1 * h * exp(-w2 * d)`
    Full,
    /// `w1 * exp(-w2 * d)`
    NoHeight,
    /// `w1 * h`
    NoExpDist,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardWeights {
    pub w1: f64,
    pub w2: f64,
    pub b_load: f64,
    pub w3: f64,
    pub w4: f64,
    pub w5: f64,
    pub v_des: f64,
    pub reg_scoop: RegWeights,
    pub reg_approach: RegWeights,
    pub meta_bonus_unit: f64,
    pub toss_form: TossForm,
    /// Pay `meta_bonus_unit` per load instead of `unit * n_loaded`.
    pub flat_meta_bonus: bool,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            w1: 30.0,
            w2: 4.0,
            b_load: 100.0,
            w3: 3.5,
            w4: 1.0,
            w5: 1.0,
            v_des: 0.3,
            reg_scoop: RegWeights::SCOOP,
            reg_approach: RegWeights::APPROACH,
            meta_bonus_unit: 100.0,
            toss_form: TossForm::Full,
            flat_meta_bonus: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Ablation {
    NoHeight,
    NoExpDist,
    NoLoadBonus,
    NoExtraBonus,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::NoHeight,
        Ablation::NoExpDist,
        Ablation::NoLoadBonus,
        Ablation::NoExtraBonus,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::NoHeight => "no-height",
            Ablation::NoExpDist => "no-exp-dist",
            Ablation::NoLoadBonus => "no-load-bonus",
            Ablation::NoExtraBonus => "no-extra-bonus",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("unknown reward ablation `{0}` (expected no-height, no-exp-dist, no-load-bonus or no-extra-bonus)")]
pub struct UnknownAblation(pub String);

impl FromStr for Ablation {
    type Err = UnknownAblation;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        match key.as_str() {
            "noheight" => Ok(Ablation::NoHeight),
            "noexpdist" => Ok(Ablation::NoExpDist),
            "noloadbonus" => Ok(Ablation::NoLoadBonus),
            "noextrabonus" => Ok(Ablation::NoExtraBonus),
            _ => Err(UnknownAblation(s.to_string())),
        }
    }
}

/// Returns a copy of `w` with one reward component removed.
pub fn ablate(w: &RewardWeights, variant: Ablation) -> RewardWeights {
    let mut out = *w;
    match variant {
        Ablation::NoHeight => out.toss_form = TossForm::NoHeight,
        Ablation::NoExpDist => out.toss_form = TossForm::NoExpDist,
        Ablation::NoLoadBonus => out.b_load = 0.0,
        Ablation::NoExtraBonus => out.flat_meta_bonus = true,
    }
    out
}

/// `w1 * h * exp(-w2 * d)` (or its ablated form).
pub fn toss_reward(h_obj: f64, d_obj: f64, w: &RewardWeights) -> f64 {
    match w.toss_form {
        TossForm::Full => w.w1 * h_obj * (-w.w2 * d_obj).exp(),
        TossForm::NoHeight => w.w1 * (-w.w2 * d_obj).exp(),
        TossForm::NoExpDist => w.w1 * h_obj,
    }
}

pub fn load_bonus(loaded_event: bool, w: &RewardWeights) -> f64 {
    if loaded_event {
        w.b_load
    } else {
        0.0
    }
}

/// Bonus for `new_loads` load events that bring the episode count to `n_loaded`.
///
/// The k-th load of an episode pays `unit * k`; with the flat ablation every
/// load pays `unit`.
pub fn meta_load_bonus(new_loads: usize, n_loaded: usize, w: &RewardWeights) -> f64 {
    let first = n_loaded + 1 - new_loads.min(n_loaded + 1);
    (first..=n_loaded)
        .take(new_loads)
        .map(|k| {
            if w.flat_meta_bonus {
                w.meta_bonus_unit
            } else {
                w.meta_bonus_unit * k as f64
            }
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RegularizationInputs {
    pub dof_accel: [f64; DOF],
    /// Previous action minus current action.
    pub action_delta: [f64; DOF],
    pub effort: [f64; DOF],
}

fn sq_norm(v: &[f64; DOF]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

pub fn regularization(inp: &RegularizationInputs, reg: &RegWeights) -> f64 {
    reg.w6 * sq_norm(&inp.dof_accel) + reg.w7 * sq_norm(&inp.action_delta) + reg.w8 * sq_norm(&inp.effort)
}

/// Velocity-tracking plus heading-alignment terms of the approach reward.
///
/// `to_target` is the scoop-to-target vector; when it is shorter than 1e-6
/// the heading term falls back to `fallback_heading`.
pub fn approach_terms(velocity: Vec2, yaw: f64, to_target: Vec2, fallback_heading: f64, w: &RewardWeights) -> f64 {
    let len = to_target.norm();
    let (track, heading) = if len < 1e-6 {
        (0.0, fallback_heading)
    } else {
        let dir = to_target / len;
        (velocity.dot(&dir), dir.y.atan2(dir.x))
    };
    let yaw_err = wrap_angle(heading - yaw).abs();
    w.w3 * track.min(w.v_des) + w.w4 * (-w.w5 * yaw_err).exp()
}

pub fn regularization_inputs(ep: &EpisodeState) -> RegularizationInputs {
    let mut delta = [0.0; DOF];
    for (d, (p, a)) in delta.iter_mut().zip(ep.prev_action.iter().zip(&ep.action)) {
        *d = p - a;
    }
    RegularizationInputs {
        dof_accel: ep.world.robot.dof_accel,
        action_delta: delta,
        effort: ep.world.robot.effort,
    }
}

fn target_toss(ep: &EpisodeState, w: &RewardWeights) -> f64 {
    let Some(obj) = ep.world.objects.get(ep.target_index) else {
        return 0.0;
    };
    let h = obj.position.z.max(0.0);
    let d = (obj.position - ep.world.tray_floor_center()).norm();
    toss_reward(h, d, w)
}

/// Toss term plus the one-time load bonus plus scoop regularization.
pub fn scoop_toss_reward(ep: &EpisodeState, w: &RewardWeights) -> f64 {
    debug_assert_eq!(ep.mode, Mode::ScoopToss);
    let loaded_event = ep.target_load_event
        && ep
            .world
            .objects
            .get(ep.target_index)
            .is_some_and(|o| o.phase == Phase::Loaded);
    target_toss(ep, w) + load_bonus(loaded_event, w) + regularization(&regularization_inputs(ep), &w.reg_scoop)
}

pub fn approach_reward(ep: &EpisodeState, w: &RewardWeights) -> f64 {
    debug_assert_eq!(ep.mode, Mode::Approach);
    let basin = ep.world.basin_center();
    let target = ep.target_position();
    let to_target = Vec2::new(target.x - basin.x, target.y - basin.y);
    let r = &ep.world.robot;
    approach_terms(r.base_vel, r.yaw, to_target, ep.last_heading, w)
        + regularization(&regularization_inputs(ep), &w.reg_approach)
}

pub fn meta_reward(ep: &EpisodeState, w: &RewardWeights) -> f64 {
    debug_assert_eq!(ep.mode, Mode::Meta);
    target_toss(ep, w)
        + meta_load_bonus(ep.new_loads, ep.n_loaded, w)
        + regularization(&regularization_inputs(ep), &w.reg_scoop)
}

/// Reward of the last step for the episode's mode.
pub fn reward(ep: &EpisodeState, w: &RewardWeights) -> f64 {
    match ep.mode {
        Mode::ScoopToss => scoop_toss_reward(ep, w),
        Mode::Approach => approach_reward(ep, w),
        Mode::Meta => meta_reward(ep, w),
    }
}
