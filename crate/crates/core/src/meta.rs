//! Expert composition: a categorical meta-policy picks one frozen expert per
//! control step and the chosen expert acts on the shared observation.

use crate::env::{EnvConfig, EnvError, EpisodeState, Mode, Observation, Termination, OBS_DIM};
use crate::nn::{argmax, log_softmax, softmax, Checkpoint, HeadKind, NnError, PolicyNet};
use crate::rewards::RewardWeights;
use crate::sim::DOF;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::Arc;

pub const N_EXPERTS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertId {
    ScoopToss = 0,
    Approach = 1,
}

impl ExpertId {
    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            ExpertId::ScoopToss
        } else {
            ExpertId::Approach
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn mode(self) -> Mode {
        match self {
            ExpertId::ScoopToss => Mode::ScoopToss,
            ExpertId::Approach => Mode::Approach,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SelectMode {
    /// Sample from the categorical (exploration during meta training).
    Train,
    /// Highest-probability expert, ties to `ScoopToss`.
    Eval,
}

#[derive(Debug, thiserror::Error)]
pub enum MetaError {
    #[error("expert {0:?}: {1}")]
    Expert(ExpertId, String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

fn to_f32(obs: &Observation) -> Vec<f32> {
    obs.iter().map(|&v| v as f32).collect()
}

fn to_action(mean: &[f32]) -> [f64; DOF] {
    let mut u = [0.0; DOF];
    for (d, s) in u.iter_mut().zip(mean) {
        *d = *s as f64;
    }
    u
}

/// The two frozen expert policies.
#[derive(Debug, Clone, PartialEq)]
pub struct Experts {
    pub scoop_toss: PolicyNet<f32>,
    pub approach: PolicyNet<f32>,
}

impl Experts {
    pub fn new(scoop_toss: PolicyNet<f32>, approach: PolicyNet<f32>) -> Result<Self, MetaError> {
        for (id, net) in [(ExpertId::ScoopToss, &scoop_toss), (ExpertId::Approach, &approach)] {
            if net.head != HeadKind::Gaussian || net.obs_dim() != OBS_DIM || net.act_dim() != DOF {
                return Err(MetaError::Expert(
                    id,
                    format!(
                        "expected a Gaussian {OBS_DIM}->{DOF} policy, got {:?} {}->{}",
                        net.head,
                        net.obs_dim(),
                        net.act_dim()
                    ),
                ));
            }
        }
        Ok(Self { scoop_toss, approach })
    }

    pub fn load(scoop_toss: &Path, approach: &Path) -> Result<Self, MetaError> {
        let st = Checkpoint::<f32>::load(scoop_toss, Some(OBS_DIM))?;
        let ap = Checkpoint::<f32>::load(approach, Some(OBS_DIM))?;
        Self::new(st.net, ap.net)
    }

    pub fn get(&self, id: ExpertId) -> &PolicyNet<f32> {
        match id {
            ExpertId::ScoopToss => &self.scoop_toss,
            ExpertId::Approach => &self.approach,
        }
    }

    /// Deterministic (mean) action of one expert.
    pub fn act(&self, id: ExpertId, obs: &Observation) -> Result<[f64; DOF], MetaError> {
        expert_action(self.get(id), obs)
    }

    /// Mean actions for a batch, grouping rows by expert.
    pub fn act_batch(&self, ids: &[ExpertId], obs: &[Observation]) -> Result<Vec<[f64; DOF]>, MetaError> {
        let mut out = vec![[0.0; DOF]; obs.len()];
        for id in [ExpertId::ScoopToss, ExpertId::Approach] {
            let rows: Vec<usize> = (0..obs.len()).filter(|&i| ids[i] == id).collect();
            if rows.is_empty() {
                continue;
            }
            let net = self.get(id);
            let raw: Vec<f32> = rows.iter().flat_map(|&i| to_f32(&obs[i])).collect();
            let means = net.actor_normalized(&net.normalize(&raw), rows.len())?;
            for (k, &i) in rows.iter().enumerate() {
                out[i] = to_action(&means[k * DOF..(k + 1) * DOF]);
            }
        }
        Ok(out)
    }
}

/// Mean action of a Gaussian policy for a single observation.
pub fn expert_action(net: &PolicyNet<f32>, obs: &Observation) -> Result<[f64; DOF], MetaError> {
    let mean = net.actor_normalized(&net.normalize(&to_f32(obs)), 1)?;
    Ok(to_action(&mean))
}

/// One recorded meta decision.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaTransition {
    pub obs: Observation,
    pub selection: ExpertId,
    pub log_prob: f64,
    pub reward: f64,
    pub termination: Termination,
}

#[derive(Debug, Clone)]
pub struct MetaController {
    pub meta_net: Arc<PolicyNet<f32>>,
    pub experts: Arc<Experts>,
    pub last_selection: Option<ExpertId>,
    pub switch_count: u64,
    /// Forces every selection to one expert (ablations, equivalence checks).
    pub pinned: Option<ExpertId>,
}

impl MetaController {
    pub fn new(meta_net: Arc<PolicyNet<f32>>, experts: Arc<Experts>) -> Result<Self, MetaError> {
        if meta_net.head != HeadKind::Categorical || meta_net.act_dim() != N_EXPERTS || meta_net.obs_dim() != OBS_DIM {
            return Err(MetaError::Nn(NnError::IncompatibleCheckpoint(format!(
                "meta policy must be categorical {OBS_DIM}->{N_EXPERTS}"
            ))));
        }
        Ok(Self {
            meta_net,
            experts,
            last_selection: None,
            switch_count: 0,
            pinned: None,
        })
    }

    pub fn pinned(meta_net: Arc<PolicyNet<f32>>, experts: Arc<Experts>, id: ExpertId) -> Result<Self, MetaError> {
        let mut c = Self::new(meta_net, experts)?;
        c.pinned = Some(id);
        Ok(c)
    }

    pub fn reset(&mut self) {
        self.last_selection = None;
        self.switch_count = 0;
    }

    /// Meta-policy logits for one observation.
    pub fn logits(&self, obs: &Observation) -> Result<Vec<f32>, MetaError> {
        Ok(self.meta_net.actor_normalized(&self.meta_net.normalize(&to_f32(obs)), 1)?)
    }

    /// Chooses an expert from logits and records switches.
    pub fn select_from_logits<R: Rng + ?Sized>(
        &mut self,
        logits: &[f32],
        mode: SelectMode,
        rng: &mut R,
    ) -> (ExpertId, f64) {
        let lsm = log_softmax(logits);
        let idx = match (self.pinned, mode) {
            (Some(id), _) => id.index(),
            (None, SelectMode::Eval) => argmax(&softmax(logits)),
            (None, SelectMode::Train) => crate::nn::categorical_sample(logits, rng),
        };
        let id = ExpertId::from_index(idx);
        if self.last_selection.is_some_and(|prev| prev != id) {
            self.switch_count += 1;
        }
        self.last_selection = Some(id);
        (id, lsm[idx])
    }

    pub fn select_expert<R: Rng + ?Sized>(
        &mut self,
        obs: &Observation,
        mode: SelectMode,
        rng: &mut R,
    ) -> Result<(ExpertId, f64), MetaError> {
        if self.pinned.is_some() {
            // No network evaluation needed; keeps pinned runs identical to standalone experts.
            let (id, _) = self.select_from_logits(&[0.0, 0.0], mode, rng);
            return Ok((id, 0.0));
        }
        let logits = self.logits(obs)?;
        Ok(self.select_from_logits(&logits, mode, rng))
    }

    /// Observes, selects an expert, applies its action and scores the step
    /// with the meta reward (or the episode's own reward for non-meta modes).
    pub fn meta_step<R: Rng + ?Sized>(
        &mut self,
        ep: &mut EpisodeState,
        cfg: &EnvConfig,
        w: &RewardWeights,
        mode: SelectMode,
        rng: &mut R,
    ) -> Result<([f64; DOF], MetaTransition), MetaError> {
        let obs = ep.build_observation()?;
        let (selection, log_prob) = self.select_expert(&obs, mode, rng)?;
        let action = self.experts.act(selection, &obs)?;
        let res = ep.step(&action, cfg, w)?;
        Ok((
            action,
            MetaTransition {
                obs,
                selection,
                log_prob,
                reward: res.reward,
                termination: res.termination,
            },
        ))
    }
}
