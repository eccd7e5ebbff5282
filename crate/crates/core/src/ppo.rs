//! Proximal policy optimization: rollout storage, GAE and the clipped update.

use crate::nn::{log_softmax, Adam, HeadKind, NnError, PolicyNet, Real, HALF_LN_2PI};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum PpoError {
    #[error("sequence length mismatch: {0}")]
    Shape(String),
    #[error("non-finite {what} at update {update}")]
    NonFinite { what: &'static str, update: u64 },
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub lr: f64,
    pub vf_coef: f64,
    pub ent_coef: f64,
    pub max_grad_norm: f64,
    pub n_envs: usize,
    pub horizon: usize,
    /// Scale rewards by the running std of the discounted return.
    pub normalize_reward: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda: 0.95,
            clip: 0.2,
            epochs: 5,
            minibatches: 4,
            lr: 3e-4,
            vf_coef: 0.5,
            ent_coef: 0.005,
            max_grad_norm: 1.0,
            n_envs: 64,
            horizon: 100,
            normalize_reward: true,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), PpoError> {
        let ok = (0.0..=1.0).contains(&self.gamma)
            && (0.0..=1.0).contains(&self.lambda)
            && self.clip > 0.0
            && self.lr > 0.0
            && self.epochs > 0
            && self.minibatches > 0
            && self.n_envs > 0
            && self.horizon > 0
            && self.n_envs * self.horizon >= self.minibatches;
        if ok {
            Ok(())
        } else {
            Err(PpoError::Shape(format!("invalid PPO config {self:?}")))
        }
    }

    pub fn batch_size(&self) -> usize {
        self.n_envs * self.horizon
    }
}

/// GAE over one sequence. `values` has one extra trailing entry holding the
/// bootstrap value of the state after the last step; `dones[t]` cuts the
/// recursion after step `t`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>), PpoError> {
    let n = rewards.len();
    if values.len() != n + 1 || dones.len() != n {
        return Err(PpoError::Shape(format!(
            "rewards {n}, values {}, dones {}",
            values.len(),
            dones.len()
        )));
    }
    let mut adv = vec![0.0; n];
    let mut next = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * values[t + 1] * live - values[t];
        next = delta + gamma * lambda * live * next;
        adv[t] = next;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, ret))
}

/// In-place standardization with a 1e-8 floor on the standard deviation.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    adv.iter_mut().for_each(|a| *a = (*a - mean) / std);
}

/// Welford running mean and variance over fixed-width vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningMeanStd {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: f64,
}

impl RunningMeanStd {
    pub fn new(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
            count: 1e-4,
        }
    }

    /// Merges a row-major batch of `dim`-wide rows.
    pub fn update(&mut self, rows: &[f64]) {
        let dim = self.mean.len();
        let n = (rows.len() / dim) as f64;
        if n == 0.0 {
            return;
        }
        let mut bmean = vec![0.0; dim];
        for row in rows.chunks_exact(dim) {
            for (m, x) in bmean.iter_mut().zip(row) {
                *m += x / n;
            }
        }
        let mut bvar = vec![0.0; dim];
        for row in rows.chunks_exact(dim) {
            for ((v, x), m) in bvar.iter_mut().zip(row).zip(&bmean) {
                *v += (x - m) * (x - m) / n;
            }
        }
        let total = self.count + n;
        for i in 0..dim {
            let delta = bmean[i] - self.mean[i];
            let m2 = self.var[i] * self.count + bvar[i] * n + delta * delta * self.count * n / total;
            self.mean[i] += delta * n / total;
            self.var[i] = m2 / total;
        }
        self.count = total;
    }

    pub fn std(&self) -> Vec<f64> {
        self.var.iter().map(|v| (v + 1e-8).sqrt()).collect()
    }
}

/// Fixed-capacity storage for `n_envs x horizon` transitions, time-major.
#[derive(Debug, Clone)]
pub struct RolloutBuffer<T> {
    pub n_envs: usize,
    pub horizon: usize,
    pub obs_dim: usize,
    /// Width of a stored action row (1 for categorical indices).
    pub act_dim: usize,
    /// Normalized network inputs.
    pub obs: Vec<T>,
    pub actions: Vec<T>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub dones: Vec<bool>,
    /// Critic values of the states following the last stored step.
    pub last_values: Vec<f64>,
    steps: usize,
}

impl<T: Real> RolloutBuffer<T> {
    pub fn new(n_envs: usize, horizon: usize, obs_dim: usize, act_dim: usize) -> Self {
        let cap = n_envs * horizon;
        Self {
            n_envs,
            horizon,
            obs_dim,
            act_dim,
            obs: Vec::with_capacity(cap * obs_dim),
            actions: Vec::with_capacity(cap * act_dim),
            log_probs: Vec::with_capacity(cap),
            rewards: Vec::with_capacity(cap),
            values: Vec::with_capacity(cap),
            dones: Vec::with_capacity(cap),
            last_values: vec![0.0; n_envs],
            steps: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.steps * self.n_envs
    }

    pub fn is_empty(&self) -> bool {
        self.steps == 0
    }

    pub fn is_full(&self) -> bool {
        self.steps == self.horizon
    }

    pub fn clear(&mut self) {
        self.obs.clear();
        self.actions.clear();
        self.log_probs.clear();
        self.rewards.clear();
        self.values.clear();
        self.dones.clear();
        self.steps = 0;
    }

    /// Appends one vectorized step (one row per environment).
    #[allow(clippy::too_many_arguments)]
    pub fn push(
        &mut self,
        obs: &[T],
        actions: &[T],
        log_probs: &[f64],
        rewards: &[f64],
        values: &[f64],
        dones: &[bool],
    ) -> Result<(), PpoError> {
        let n = self.n_envs;
        if self.is_full()
            || obs.len() != n * self.obs_dim
            || actions.len() != n * self.act_dim
            || log_probs.len() != n
            || rewards.len() != n
            || values.len() != n
            || dones.len() != n
        {
            return Err(PpoError::Shape("rollout step does not match buffer layout".into()));
        }
        self.obs.extend_from_slice(obs);
        self.actions.extend_from_slice(actions);
        self.log_probs.extend_from_slice(log_probs);
        self.rewards.extend_from_slice(rewards);
        self.values.extend_from_slice(values);
        self.dones.extend_from_slice(dones);
        self.steps += 1;
        Ok(())
    }

    /// Per-environment GAE, returned in buffer row order (unnormalized).
    pub fn advantages(&self, gamma: f64, lambda: f64) -> Result<(Vec<f64>, Vec<f64>), PpoError> {
        let (n, t_len) = (self.n_envs, self.steps);
        let mut adv = vec![0.0; n * t_len];
        let mut ret = vec![0.0; n * t_len];
        for e in 0..n {
            let rewards: Vec<f64> = (0..t_len).map(|t| self.rewards[t * n + e]).collect();
            let dones: Vec<bool> = (0..t_len).map(|t| self.dones[t * n + e]).collect();
            let mut values: Vec<f64> = (0..t_len).map(|t| self.values[t * n + e]).collect();
            values.push(self.last_values[e]);
            let (a, r) = compute_gae(&rewards, &values, &dones, gamma, lambda)?;
            for t in 0..t_len {
                adv[t * n + e] = a[t];
                ret[t * n + e] = r[t];
            }
        }
        Ok((adv, ret))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
}

/// Per-sample clipped surrogate `min(rho A, clip(rho) A)` and its derivative
/// with respect to the new log-probability.
pub fn clipped_surrogate(ratio: f64, adv: f64, clip: f64) -> (f64, f64) {
    let unclipped = ratio * adv;
    let clipped = ratio.clamp(1.0 - clip, 1.0 + clip) * adv;
    if unclipped <= clipped {
        (unclipped, ratio * adv)
    } else {
        (clipped, 0.0)
    }
}

/// Loss gradients for one minibatch given precomputed advantages/returns.
/// Returns the loss components and fills the gradient block of `net`.
#[allow(clippy::too_many_arguments)]
pub fn minibatch_gradients<T: Real>(
    net: &PolicyNet<T>,
    obs: &[T],
    actions: &[T],
    old_log_probs: &[f64],
    advantages: &[f64],
    returns: &[f64],
    cfg: &PpoConfig,
) -> Result<(crate::nn::PolicyGrads<T>, PpoStats), PpoError> {
    let b = old_log_probs.len();
    let act_w = actions.len() / b.max(1);
    let out_dim = net.act_dim();
    let a_tape = net.actor.forward_batch(obs, b)?;
    let c_tape = net.critic.forward_batch(obs, b)?;
    let out = a_tape.output();
    let values = c_tape.output();
    let mut d_out = vec![T::zero(); b * out_dim];
    let mut d_val = vec![T::zero(); b];
    let mut grads = net.zero_grads();
    let mut d_log_std = vec![0.0; net.log_std.len()];
    let mut stats = PpoStats::default();
    let inv_b = 1.0 / b as f64;
    for i in 0..b {
        let row = &out[i * out_dim..(i + 1) * out_dim];
        let (logp, entropy);
        // Gradients of logp and entropy w.r.t. the actor outputs.
        let mut dlogp = vec![0.0; out_dim];
        let mut dent = vec![0.0; out_dim];
        match net.head {
            HeadKind::Gaussian => {
                let a = &actions[i * act_w..(i + 1) * act_w];
                let mut lp = 0.0;
                let mut ent = 0.0;
                for j in 0..out_dim {
                    let ls = net.log_std[j].as_f64();
                    let inv_var = (-2.0 * ls).exp();
                    let diff = a[j].as_f64() - row[j].as_f64();
                    lp += -0.5 * diff * diff * inv_var - ls - HALF_LN_2PI;
                    ent += ls + 0.5 + HALF_LN_2PI;
                    dlogp[j] = diff * inv_var;
                }
                logp = lp;
                entropy = ent;
            }
            HeadKind::Categorical => {
                let k = actions[i * act_w].as_f64() as usize;
                let lsm = log_softmax(row);
                let h: f64 = lsm.iter().map(|l| -l.exp() * l).sum();
                for j in 0..out_dim {
                    let p = lsm[j].exp();
                    dlogp[j] = if j == k { 1.0 - p } else { -p };
                    dent[j] = -p * (lsm[j] + h);
                }
                logp = lsm[k];
                entropy = h;
            }
        }
        let log_ratio = logp - old_log_probs[i];
        let ratio = log_ratio.exp();
        let (surr, dsurr_dlogp) = clipped_surrogate(ratio, advantages[i], cfg.clip);
        stats.policy_loss -= surr * inv_b;
        stats.entropy += entropy * inv_b;
        stats.approx_kl += ((ratio - 1.0) - log_ratio) * inv_b;
        if (ratio - 1.0).abs() > cfg.clip {
            stats.clip_fraction += inv_b;
        }
        // loss = -surr - ent_coef * entropy, averaged over the batch.
        for j in 0..out_dim {
            let g = (-dsurr_dlogp * dlogp[j] - cfg.ent_coef * dent[j]) * inv_b;
            d_out[i * out_dim + j] = T::of_f64(g);
        }
        if net.head == HeadKind::Gaussian {
            let a = &actions[i * act_w..(i + 1) * act_w];
            for j in 0..out_dim {
                let ls = net.log_std[j].as_f64();
                let z = (a[j].as_f64() - row[j].as_f64()) * (-ls).exp();
                // d logp / d log_std = z^2 - 1, d entropy / d log_std = 1
                d_log_std[j] += (-dsurr_dlogp * (z * z - 1.0) - cfg.ent_coef) * inv_b;
            }
        }
        let err = values[i].as_f64() - returns[i];
        stats.value_loss += err * err * inv_b;
        d_val[i] = T::of_f64(cfg.vf_coef * 2.0 * err * inv_b);
    }
    net.actor.backward(&a_tape, &d_out, &mut grads.actor)?;
    net.critic.backward(&c_tape, &d_val, &mut grads.critic)?;
    for (g, d) in grads.log_std.iter_mut().zip(&d_log_std) {
        *g = T::of_f64(*d);
    }
    Ok((grads, stats))
}

/// Runs the clipped PPO update over a full buffer.
pub fn ppo_update<T: Real, R: Rng + ?Sized>(
    net: &mut PolicyNet<T>,
    adam: &mut Adam<T>,
    buf: &RolloutBuffer<T>,
    cfg: &PpoConfig,
    rng: &mut R,
    update: u64,
) -> Result<PpoStats, PpoError> {
    let (mut adv, ret) = buf.advantages(cfg.gamma, cfg.lambda)?;
    normalize_advantages(&mut adv);
    let n = buf.len();
    let mb = (n / cfg.minibatches).max(1);
    let (od, ad) = (buf.obs_dim, buf.act_dim);
    let mut idx: Vec<usize> = (0..n).collect();
    let mut total = PpoStats::default();
    let mut count = 0.0;
    for _ in 0..cfg.epochs {
        idx.shuffle(rng);
        for chunk in idx.chunks(mb) {
            if chunk.len() < mb {
                continue;
            }
            let mut obs = Vec::with_capacity(mb * od);
            let mut act = Vec::with_capacity(mb * ad);
            let mut lp = Vec::with_capacity(mb);
            let mut a = Vec::with_capacity(mb);
            let mut r = Vec::with_capacity(mb);
            for &k in chunk {
                obs.extend_from_slice(&buf.obs[k * od..(k + 1) * od]);
                act.extend_from_slice(&buf.actions[k * ad..(k + 1) * ad]);
                lp.push(buf.log_probs[k]);
                a.push(adv[k]);
                r.push(ret[k]);
            }
            let (mut grads, stats) = minibatch_gradients(net, &obs, &act, &lp, &a, &r, cfg)?;
            if !(stats.policy_loss.is_finite() && stats.value_loss.is_finite()) {
                return Err(PpoError::NonFinite { what: "loss", update });
            }
            grads.check_finite()?;
            let norm = grads.global_norm();
            if norm > cfg.max_grad_norm {
                grads.scale(T::of_f64(cfg.max_grad_norm / norm));
            }
            adam.step(net, &grads);
            total.policy_loss += stats.policy_loss;
            total.value_loss += stats.value_loss;
            total.entropy += stats.entropy;
            total.approx_kl += stats.approx_kl;
            total.clip_fraction += stats.clip_fraction;
            total.grad_norm += norm;
            count += 1.0;
        }
    }
    if !net.is_finite() {
        return Err(PpoError::NonFinite {
            what: "parameters",
            update,
        });
    }
    if count > 0.0 {
        total.policy_loss /= count;
        total.value_loss /= count;
        total.entropy /= count;
        total.approx_kl /= count;
        total.clip_fraction /= count;
        total.grad_norm /= count;
    }
    Ok(total)
}
