//! Project acceptance suite. Runs without the libtest harness so every
//! criterion prints its `[PASS]`/`[FAIL]` line even under plain `cargo test`.
//! Criteria are run in order and a failure does not stop the rest; the
//! process exits non-zero if any failed.
//!
//! Pass criterion function names as arguments to run only those.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use scoop_core::env::{Curriculum, EnvConfig, EpisodeState, Mode, Termination, OBS_DIM};
use scoop_core::eval::{run_ablation_suite, run_angular_eval, run_multi_eval, AblationRow, MultiController, MultiReport};
use scoop_core::meta::{expert_action, ExpertId, Experts, MetaController, SelectMode};
use scoop_core::nn::{gaussian_log_prob, log_softmax, HeadKind, PolicyNet};
use scoop_core::ppo::{compute_gae, minibatch_gradients, PpoConfig};
use scoop_core::rewards::{
    ablate, approach_terms, load_bonus, meta_load_bonus, regularization, toss_reward, Ablation, RegWeights,
    RegularizationInputs, RewardWeights,
};
use scoop_core::sim::{integrate_ballistic, ActionVector, ObjectState, Phase, SimConfig, Vec2, Vec3, World, DOF};
use scoop_core::sti::{self, StiBuffer, StiError, STI_CAPACITY};
use scoop_core::train::{train, TrainConfig, TrainInputs, TrainOutcome};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use std::f64::consts::PI;
use std::sync::{Arc, OnceLock};
use std::time::Instant;

const SEED: u64 = 1;
const ABLATION_SEEDS: [u64; 3] = [1, 2, 3];
/// Env-step budget every ablation run gets, baseline included.
const ABLATION_BUDGET: u64 = 5_000_000;
const META_BUDGET: u64 = 4_000_000;
const TRIALS_PER_SECTOR: usize = 100;
const EVAL_SEED: u64 = 2024;

fn report(name: &str, pass: bool, detail: impl AsRef<str>) -> bool {
    println!("[{}] {name}: {}", if pass { "PASS" } else { "FAIL" }, detail.as_ref());
    pass
}

fn verdict(name: &str, pass: bool, detail: impl AsRef<str>) {
    assert!(report(name, pass, &detail), "{name}: {}", detail.as_ref());
}

fn minutes(s: f64) -> String {
    format!("{:.1} min", s / 60.0)
}

// ---------------------------------------------------------------- rewards

fn reward_oracles() {
    let w = RewardWeights::default();
    // Hand oracle with the default weights written out as literals.
    let toss = |h: f64, d: f64| 30.0 * h * (-4.0 * d).exp();
    let mut cases: Vec<(String, f64, f64)> = Vec::new();
    let mut case = |name: &str, got: f64, want: f64| cases.push((name.to_string(), got, want));

    case("toss(0, 0)", toss_reward(0.0, 0.0, &w), 0.0);
    case("toss(0, 3)", toss_reward(0.0, 3.0, &w), 0.0);
    case("toss(0.5, 0)", toss_reward(0.5, 0.0, &w), 15.0);
    case("toss(0.5, 0.25)", toss_reward(0.5, 0.25, &w), 5.518_191_617_571_635);
    for (h, d) in [(0.8, 0.1), (0.02, 1.7), (1.2, 0.0), (0.35, 0.6)] {
        case(&format!("toss({h}, {d})"), toss_reward(h, d, &w), toss(h, d));
    }
    case("load(true)", load_bonus(true, &w), 100.0);
    case("load(false)", load_bonus(false, &w), 0.0);

    let mut inp = RegularizationInputs::default();
    case("reg(0) scoop", regularization(&inp, &RegWeights::SCOOP), 0.0);
    inp.dof_accel[0] = 1.0;
    case("reg accel e1 scoop", regularization(&inp, &RegWeights::SCOOP), -1e-3);
    let mut inp = RegularizationInputs::default();
    inp.action_delta[0] = 2.0;
    case("reg delta 2e1 approach", regularization(&inp, &RegWeights::APPROACH), -0.012);
    let inp = RegularizationInputs {
        dof_accel: [1.0, -2.0, 0.5, 3.0, 0.0],
        action_delta: [0.1, 0.2, -0.3, 0.0, 0.4],
        effort: [10.0, 0.0, -4.0, 1.0, 2.0],
    };
    // |a|^2 = 14.25, |da|^2 = 0.30, |tau|^2 = 121
    case("reg mixed scoop", regularization(&inp, &RegWeights::SCOOP), -1e-3 * 14.25 - 1e-4 * 0.30 - 3e-5 * 121.0);
    case("reg mixed approach", regularization(&inp, &RegWeights::APPROACH), -1e-2 * 14.25 - 3e-3 * 0.30 - 1e-5 * 121.0);

    let east = Vec2::new(3.0, 0.0);
    case("approach 0.3 aligned", approach_terms(Vec2::new(0.3, 0.0), 0.0, east, 0.0, &w), 2.05);
    case("approach 1.0 aligned", approach_terms(Vec2::new(1.0, 0.0), 0.0, east, 0.0, &w), 2.05);
    case("approach rest 90deg", approach_terms(Vec2::zeros(), PI / 2.0, east, 0.0, &w), (-PI / 2.0).exp());
    case("approach 0.1 aligned", approach_terms(Vec2::new(0.1, 0.0), 0.0, east, 0.0, &w), 3.5 * 0.1 + 1.0);
    case("approach backwards", approach_terms(Vec2::new(-0.5, 0.0), 0.0, east, 0.0, &w), 3.5 * -0.5 + 1.0);
    // yaw error 350 deg wraps to -10 deg
    let y = 350f64.to_radians();
    case("approach wrapped yaw", approach_terms(Vec2::zeros(), y, east, 0.0, &w), (-(10f64.to_radians())).exp());

    case("meta 1st load", meta_load_bonus(1, 1, &w), 100.0);
    case("meta 3rd load", meta_load_bonus(1, 3, &w), 300.0);
    case("meta no load", meta_load_bonus(0, 3, &w), 0.0);
    case("meta 2nd+3rd same step", meta_load_bonus(2, 3, &w), 500.0);
    let flat = ablate(&w, Ablation::NoExtraBonus);
    case("meta flat 3rd", meta_load_bonus(1, 3, &flat), 100.0);
    case("no-load-bonus", load_bonus(true, &ablate(&w, Ablation::NoLoadBonus)), 0.0);
    case("no-height(0, 0)", toss_reward(0.0, 0.0, &ablate(&w, Ablation::NoHeight)), 30.0);
    case("no-exp-dist(0.4, 5)", toss_reward(0.4, 5.0, &ablate(&w, Ablation::NoExpDist)), 12.0);

    let bad: Vec<_> = cases.iter().filter(|(_, g, e)| (g - e).abs() > 1e-9).collect();
    verdict(
        "reward oracles",
        cases.len() >= 20 && bad.is_empty(),
        format!("{} cases, {} outside 1e-9 {:?}", cases.len(), bad.len(), bad),
    );
}

// -------------------------------------------------------------- gradients

fn scrambled_net(head: HeadKind, act_dim: usize, rng: &mut ChaCha8Rng) -> PolicyNet<f64> {
    let mut net = PolicyNet::<f64>::new(head, OBS_DIM, act_dim, rng);
    for p in net.actor.params_mut().iter_mut().chain(net.critic.params_mut()) {
        *p += 0.3 * rng.sample::<f64, _>(StandardNormal);
    }
    for l in net.log_std.iter_mut() {
        *l = rng.random_range(-1.0..0.0);
    }
    net
}

struct Batch {
    obs: Vec<f64>,
    actions: Vec<f64>,
    old_log_probs: Vec<f64>,
    advantages: Vec<f64>,
    returns: Vec<f64>,
}

fn batch_for(net: &PolicyNet<f64>, b: usize, rng: &mut ChaCha8Rng) -> Batch {
    let d = net.act_dim();
    let obs: Vec<f64> = (0..b * OBS_DIM).map(|_| rng.sample(StandardNormal)).collect();
    let (out, _) = net.forward_normalized(&obs, b).unwrap();
    let mut actions = Vec::new();
    let mut old = Vec::new();
    for i in 0..b {
        let row = &out[i * d..(i + 1) * d];
        let lp = match net.head {
            HeadKind::Gaussian => {
                let a: Vec<f64> = (0..d)
                    .map(|j| row[j] + net.log_std[j].exp() * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let lp = gaussian_log_prob(row, &net.log_std, &a);
                actions.extend(a);
                lp
            }
            HeadKind::Categorical => {
                let k = rng.random_range(0..d);
                actions.push(k as f64);
                log_softmax(row)[k]
            }
        };
        // keep ratios inside the clip range so the loss is smooth at the probe
        old.push(lp + rng.random_range(-0.05..0.05));
    }
    Batch {
        obs,
        actions,
        old_log_probs: old,
        advantages: (0..b).map(|_| rng.sample(StandardNormal)).collect(),
        returns: (0..b).map(|_| rng.sample(StandardNormal)).collect(),
    }
}

fn total_loss(net: &PolicyNet<f64>, bt: &Batch, cfg: &PpoConfig) -> f64 {
    let (_, s) = minibatch_gradients(net, &bt.obs, &bt.actions, &bt.old_log_probs, &bt.advantages, &bt.returns, cfg).unwrap();
    s.policy_loss - cfg.ent_coef * s.entropy + cfg.vf_coef * s.value_loss
}

#[derive(Clone, Copy)]
enum Block {
    Actor,
    Critic,
    LogStd,
}

fn param(net: &mut PolicyNet<f64>, block: Block, i: usize) -> &mut f64 {
    match block {
        Block::Actor => &mut net.actor.params_mut()[i],
        Block::Critic => &mut net.critic.params_mut()[i],
        Block::LogStd => &mut net.log_std[i],
    }
}

fn gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = PpoConfig::default();
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut probes = 0;
    for (head, act_dim, n_actor, n_critic, n_std) in [(HeadKind::Gaussian, DOF, 40, 12, 5), (HeadKind::Categorical, 2, 12, 4, 0)] {
        for _ in 0..2 {
            let mut net = scrambled_net(head, act_dim, &mut rng);
            let bt = batch_for(&net, 16, &mut rng);
            let (g, _) =
                minibatch_gradients(&net, &bt.obs, &bt.actions, &bt.old_log_probs, &bt.advantages, &bt.returns, &cfg).unwrap();
            let mut picks = Vec::new();
            for _ in 0..n_actor / 2 {
                picks.push((Block::Actor, rng.random_range(0..g.actor.len())));
            }
            for _ in 0..n_critic / 2 {
                picks.push((Block::Critic, rng.random_range(0..g.critic.len())));
            }
            for i in 0..n_std {
                picks.push((Block::LogStd, i));
            }
            for (block, i) in picks {
                let analytic = match block {
                    Block::Actor => g.actor[i],
                    Block::Critic => g.critic[i],
                    Block::LogStd => g.log_std[i],
                };
                let orig = *param(&mut net, block, i);
                *param(&mut net, block, i) = orig + h;
                let up = total_loss(&net, &bt, &cfg);
                *param(&mut net, block, i) = orig - h;
                let down = total_loss(&net, &bt, &cfg);
                *param(&mut net, block, i) = orig;
                let numeric = (up - down) / (2.0 * h);
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(rel);
                probes += 1;
            }
        }
    }
    verdict(
        "gradient check",
        probes >= 50 && worst < 1e-4,
        format!("{probes} probes (28->5 Gaussian and 28->2 categorical, f64), worst relative error {worst:.2e}"),
    );
}

// -------------------------------------------------------------------- GAE

/// Advantage by direct summation of the lambda-weighted TD errors.
fn brute_force_gae(rewards: &[f64], values: &[f64], dones: &[bool], gamma: f64, lambda: f64) -> Vec<f64> {
    let n = rewards.len();
    (0..n)
        .map(|t| {
            let mut sum = 0.0;
            let mut weight = 1.0;
            for k in t..n {
                let live = if dones[k] { 0.0 } else { 1.0 };
                sum += weight * (rewards[k] + gamma * values[k + 1] * live - values[k]);
                if dones[k] {
                    break;
                }
                weight *= gamma * lambda;
            }
            sum
        })
        .collect()
}

/// Undiscounted return to the end of the episode (bootstrapped when cut).
fn monte_carlo_return(rewards: &[f64], values: &[f64], dones: &[bool], t: usize) -> f64 {
    let mut g = 0.0;
    for k in t..rewards.len() {
        g += rewards[k];
        if dones[k] {
            return g;
        }
    }
    g + values[rewards.len()]
}

fn gae_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut mismatches = 0;
    for _ in 0..100 {
        let n = rng.random_range(1..=10);
        let dones: Vec<bool> = (0..n).map(|_| rng.random_bool(0.25)).collect();

        // lambda = 0: one-step TD error
        let r: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let v: Vec<f64> = (0..=n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let gamma = rng.random_range(0.5..1.0);
        let (adv, ret) = compute_gae(&r, &v, &dones, gamma, 0.0).unwrap();
        for t in 0..n {
            let live = if dones[t] { 0.0 } else { 1.0 };
            let td = r[t] + gamma * v[t + 1] * live - v[t];
            if adv[t] != td || ret[t] != adv[t] + v[t] {
                mismatches += 1;
            }
        }
        let bf = brute_force_gae(&r, &v, &dones, gamma, 0.0);
        mismatches += adv.iter().zip(&bf).filter(|(a, b)| a != b).count();

        // gamma = lambda = 1: Monte Carlo return minus the baseline. Integer
        // data keeps every sum exact.
        let r: Vec<f64> = (0..n).map(|_| rng.random_range(-9..=9) as f64).collect();
        let v: Vec<f64> = (0..=n).map(|_| rng.random_range(-9..=9) as f64).collect();
        let (adv, _) = compute_gae(&r, &v, &dones, 1.0, 1.0).unwrap();
        let bf = brute_force_gae(&r, &v, &dones, 1.0, 1.0);
        for t in 0..n {
            if adv[t] != monte_carlo_return(&r, &v, &dones, t) - v[t] || adv[t] != bf[t] {
                mismatches += 1;
            }
        }
    }
    // two-step episode ending in a terminal: returns 2 and 1
    let (adv, _) = compute_gae(&[1.0, 1.0], &[0.0, 0.0, 0.0], &[false, true], 1.0, 1.0).unwrap();
    if adv != vec![2.0, 1.0] {
        mismatches += 1;
    }
    verdict("GAE oracles", mismatches == 0, format!("100 random sequences, {mismatches} inexact entries"));
}

// ---------------------------------------------------------------- physics

fn fuzz_action(rng: &mut ChaCha8Rng) -> ActionVector {
    ActionVector::from_array([
        rng.random_range(-2.0..2.0),
        rng.random_range(-2.0..2.0),
        rng.random_range(-4.0..4.0),
        rng.random_range(-0.2..1.0),
        rng.random_range(-2.0..2.0),
    ])
}

fn cluttered_world(seed: u64) -> World {
    let mut w = World::new(SimConfig::default(), seed).unwrap();
    let b = w.basin_center();
    w.add_object(ObjectState::cube(Vec2::new(b.x, b.y)));
    w.add_object(ObjectState::cube(Vec2::new(b.x + 0.3, b.y - 0.1)));
    w
}

fn physics_properties() {
    let t0 = Instant::now();
    let g = 9.81;
    let dt = 0.02;
    let mut rng = ChaCha8Rng::seed_from_u64(5);

    // apex of free flight vs v^2 / 2g
    let mut worst_apex = 0.0f64;
    let mut apex_ok = true;
    for _ in 0..100 {
        let z0 = rng.random_range(0.1..1.0);
        let vz = rng.random_range(0.5..6.0);
        let mut o = ObjectState::cube(Vec2::zeros());
        o.position.z = z0;
        o.velocity = Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), vz);
        o.phase = Phase::Ballistic;
        let mut apex = None;
        while apex.is_none() {
            let (next, a, _) = integrate_ballistic(&o, dt, g);
            apex = a;
            o = next;
        }
        let err = (apex.unwrap() - (z0 + vz * vz / (2.0 * g))).abs();
        worst_apex = worst_apex.max(err);
        // one step of travel at the launch speed bounds the discretization error
        apex_ok &= err <= vz * dt + g * dt * dt;
    }

    // carried objects sit exactly on the basin; phases follow the graph
    let mut carried_steps = 0u64;
    let mut carried_exact = true;
    let mut illegal = 0u64;
    let mut loaded_exits = 0u64;
    let mut fuzz_steps = 0u64;
    let mut seed = 0;
    while fuzz_steps < 1_000_000 {
        let mut w = cluttered_world(seed);
        seed += 1;
        let mut hold = fuzz_action(&mut rng);
        for t in 0..2000 {
            if t % 12 == 0 {
                hold = fuzz_action(&mut rng);
            }
            let before: Vec<Phase> = w.objects.iter().map(|o| o.phase).collect();
            w.step(&hold).unwrap();
            fuzz_steps += 1;
            let basin = w.basin_center();
            for (p0, o) in before.iter().zip(&w.objects) {
                if !p0.can_become(o.phase) {
                    illegal += 1;
                }
                if *p0 == Phase::Loaded && o.phase != Phase::Loaded {
                    loaded_exits += 1;
                }
                if o.phase == Phase::Carried {
                    carried_steps += 1;
                    carried_exact &= o.position == basin + Vec3::new(0.0, 0.0, o.radius);
                }
            }
        }
    }

    // two seeded replays of 10^4 steps
    let mut rng_a = ChaCha8Rng::seed_from_u64(77);
    let actions: Vec<ActionVector> = (0..10_000).map(|_| fuzz_action(&mut rng_a)).collect();
    let run = || {
        let mut w = cluttered_world(42);
        for a in &actions {
            w.step(a).unwrap();
        }
        w
    };
    let (a, b) = (run(), run());
    let identical = a == b && serde_json::to_string(&a).unwrap() == serde_json::to_string(&b).unwrap();

    verdict(
        "physics properties",
        apex_ok && carried_exact && carried_steps > 0 && illegal == 0 && loaded_exits == 0 && identical,
        format!(
            "apex worst error {worst_apex:.4} m over 100 launches; {carried_steps} carried steps exact: {carried_exact}; \
             {fuzz_steps} fuzzed steps, {illegal} illegal transitions, {loaded_exits} exits from Loaded; \
             10^4-step replays identical: {identical}; {:.1} s",
            t0.elapsed().as_secs_f64()
        ),
    );
}

// ----------------------------------------------------- curriculum / termination

fn curriculum_and_termination() {
    let mut problems = Vec::new();

    // 9 successes are not enough, the 10th promotes (10/10 > 0.8)
    let mut c = Curriculum::default();
    for k in 0..9 {
        if c.update(true) {
            problems.push(format!("promoted after {} episodes", k + 1));
        }
    }
    if !c.update(true) || (c.radius - 0.10).abs() > 1e-12 || (c.time_limit - 1.5).abs() > 1e-12 {
        problems.push(format!("10th success: radius {} time {}", c.radius, c.time_limit));
    }
    // exactly 80% does not promote, it has to exceed it
    let mut c = Curriculum::default();
    let mut fired = false;
    for k in 0..10 {
        fired |= c.update(k % 5 != 0);
    }
    if fired {
        problems.push("promoted at exactly 80%".into());
    }
    // 9 of 11 is above 80%
    if !c.update(true) {
        problems.push("no promotion at 9/11".into());
    }
    // drive to the caps
    let mut c = Curriculum::default();
    let mut promotions = 0;
    for _ in 0..5000 {
        if c.update(true) {
            promotions += 1;
        }
    }
    if (c.radius - 1.5).abs() > 1e-9 || (c.time_limit - 20.0).abs() > 1e-9 {
        problems.push(format!("caps: radius {} time {}", c.radius, c.time_limit));
    }
    let mut c = Curriculum::default();
    let mut levels = Vec::new();
    while c.radius < 1.5 - 1e-9 {
        for _ in 0..10 {
            c.update(true);
        }
        levels.push((c.radius, c.time_limit));
    }
    // 29 promotions of +0.05 from 0.05; time saturates after 38 promotions
    if levels.len() != 29 {
        problems.push(format!("{} promotions to reach the radius cap", levels.len()));
    }
    for (k, (r, t)) in levels.iter().enumerate() {
        let n = (k + 1) as f64;
        if (r - (0.05 + 0.05 * n).min(1.5)).abs() > 1e-9 || (t - (1.0 + 0.5 * n).min(20.0)).abs() > 1e-9 {
            problems.push(format!("level {}: radius {r} time {t}", k + 1));
        }
    }

    // termination exclusivity over fuzzed episodes
    let cfg = EnvConfig::default();
    let w = RewardWeights::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut episodes = 0;
    for mode in [Mode::ScoopToss, Mode::Approach, Mode::Meta] {
        for _ in 0..40 {
            let cur = Curriculum {
                radius: rng.random_range(0.05..1.5),
                time_limit: rng.random_range(1.0..20.0),
                ..Curriculum::default()
            };
            let mut ep = EpisodeState::reset(mode, &cfg, &cur, &mut rng, None).unwrap();
            let mut terminals = 0;
            let mut last = Termination::Continue;
            for _ in 0..cfg.steps(100.0) {
                let u: [f64; DOF] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
                let r = ep.step(&u, &cfg, &w).unwrap();
                if r.termination.is_done() {
                    terminals += 1;
                    last = r.termination;
                    break;
                }
            }
            let legal = match mode {
                Mode::ScoopToss => matches!(last, Termination::SuccessLoad | Termination::TimeLimitFail | Termination::Timeout),
                Mode::Approach => matches!(last, Termination::ApproachSuccess | Termination::Timeout),
                Mode::Meta => matches!(last, Termination::SuccessLoad | Termination::TimeLimitFail),
            };
            if terminals != 1 || !legal || ep.step(&[0.0; DOF], &cfg, &w).is_ok() {
                problems.push(format!("{mode:?} episode ended {terminals} times as {last:?}"));
            }
            episodes += 1;
        }
    }
    verdict(
        "curriculum/termination",
        problems.is_empty(),
        format!("{promotions} promotions scripted to the caps, {episodes} fuzzed episodes; problems: {problems:?}"),
    );
}

// ------------------------------------------------------------------- STI

fn sti_suite() {
    let mut problems = Vec::new();
    let mut buf = StiBuffer::new(Mode::Approach);
    for i in 0..STI_CAPACITY + 5 {
        let ok = buf.push(scoop_core::sim::RobotState::at(Vec2::new(i as f64, 0.0), 0.0));
        if ok != (i < STI_CAPACITY) {
            problems.push(format!("push {i} returned {ok}"));
        }
    }
    if buf.len() != STI_CAPACITY {
        problems.push(format!("len {}", buf.len()));
    }
    if !matches!(buf.check_cross_wiring(Mode::Approach), Err(StiError::CrossWiring { .. })) {
        problems.push("approach buffer accepted for approach fine-tuning".into());
    }
    if buf.check_cross_wiring(Mode::ScoopToss).is_err() {
        problems.push("approach buffer rejected for scoop-toss fine-tuning".into());
    }
    if !matches!(buf.check_cross_wiring(Mode::Meta), Err(StiError::CrossWiring { .. })) {
        problems.push("buffer accepted for the meta policy".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    if sti::collect(
        &PolicyNet::new(HeadKind::Gaussian, OBS_DIM, DOF, &mut rng),
        Mode::ScoopToss,
        STI_CAPACITY + 1,
        &EnvConfig::default(),
        0,
    )
    .is_ok()
    {
        problems.push("collected beyond capacity".into());
    }

    let mut small = StiBuffer::new(Mode::ScoopToss);
    for i in 0..100 {
        small.push(scoop_core::sim::RobotState::at(Vec2::new(i as f64, 0.0), 0.0));
    }
    let mut counts = [0u32; 100];
    let mut rng = ChaCha8Rng::seed_from_u64(12345);
    for _ in 0..10_000 {
        let s = small.sample(&mut rng).unwrap();
        counts[s.base_pos.x as usize] += 1;
    }
    let expected = 100.0;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new(99.0).unwrap().cdf(stat);
    verdict(
        "STI suite",
        problems.is_empty() && p > 0.01,
        format!("capacity {STI_CAPACITY}, cross-wiring checked, chi2 {stat:.1} on 99 dof, p = {p:.3}; problems: {problems:?}"),
    );
}

// ------------------------------------------------- degenerate controller

fn pinned_meta_matches_standalone_expert() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let st = PolicyNet::<f32>::new(HeadKind::Gaussian, OBS_DIM, DOF, &mut rng);
    let ap = PolicyNet::<f32>::new(HeadKind::Gaussian, OBS_DIM, DOF, &mut rng);
    let meta = Arc::new(PolicyNet::<f32>::new(HeadKind::Categorical, OBS_DIM, 2, &mut rng));
    let experts = Arc::new(Experts::new(st, ap).unwrap());
    let cfg = EnvConfig::default();
    let w = RewardWeights::default();
    let mut checked = Vec::new();
    let mut all_equal = true;
    for (id, mode) in [
        (ExpertId::ScoopToss, Mode::ScoopToss),
        (ExpertId::Approach, Mode::Approach),
        (ExpertId::ScoopToss, Mode::Meta),
        (ExpertId::Approach, Mode::Meta),
    ] {
        let seed = 1000 + checked.len() as u64;
        let reset = || {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            EpisodeState::reset(mode, &cfg, &Curriculum::finished(), &mut r, None).unwrap()
        };
        let mut a = reset();
        let mut b = reset();
        let mut ctrl = MetaController::pinned(meta.clone(), experts.clone(), id).unwrap();
        let mut sel_rng = ChaCha8Rng::seed_from_u64(seed);
        let mut steps = 0;
        loop {
            let (ua, tr) = ctrl.meta_step(&mut a, &cfg, &w, SelectMode::Eval, &mut sel_rng).unwrap();
            let ub = expert_action(experts.get(id), &b.build_observation().unwrap()).unwrap();
            let rb = b.step(&ub, &cfg, &w).unwrap();
            steps += 1;
            if ua.map(f64::to_bits) != ub.map(f64::to_bits) || a != b || tr.reward.to_bits() != rb.reward.to_bits() {
                all_equal = false;
                break;
            }
            if rb.termination.is_done() || steps >= 1500 {
                break;
            }
        }
        checked.push(format!("{mode:?}/{id:?} {steps} steps"));
        all_equal &= ctrl.switch_count == 0;
    }
    verdict("degenerate-controller equivalence", all_equal, checked.join(", "));
}

// ------------------------------------------------------ trained policies

struct Trained {
    approach: TrainOutcome,
    scoop_toss: TrainOutcome,
    experts_sti: Arc<Experts>,
    experts_raw: Arc<Experts>,
    meta: TrainOutcome,
    meta_no_sti: TrainOutcome,
    meta_flat: TrainOutcome,
}

fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let _ = env_logger::builder().is_test(true).try_init();
        let env = EnvConfig::default();
        let approach = train(&TrainConfig::for_mode(Mode::Approach, SEED), TrainInputs::default()).unwrap();
        println!("approach expert: {} env steps, {}", approach.env_steps, minutes(approach.wall_seconds));
        let scoop_toss = train(&TrainConfig::for_mode(Mode::ScoopToss, SEED), TrainInputs::default()).unwrap();
        println!("scoop-toss expert: {} env steps, {}", scoop_toss.env_steps, minutes(scoop_toss.wall_seconds));

        let finetune = |mode: Mode, net: &PolicyNet<f32>, source: (Mode, &PolicyNet<f32>)| {
            let buf = sti::collect(source.1, source.0, STI_CAPACITY, &env, SEED).unwrap();
            let out = train(
                &TrainConfig::for_finetune(mode, SEED),
                TrainInputs {
                    init_net: Some(net.clone()),
                    lineage: vec![SEED],
                    sti: Some(Arc::new(buf)),
                    ..Default::default()
                },
            )
            .unwrap();
            println!("{} STI fine-tune: {} env steps, {}", mode.name(), out.env_steps, minutes(out.wall_seconds));
            out.net
        };
        let st_ft = finetune(Mode::ScoopToss, &scoop_toss.net, (Mode::Approach, &approach.net));
        let ap_ft = finetune(Mode::Approach, &approach.net, (Mode::ScoopToss, &scoop_toss.net));
        let experts_sti = Arc::new(Experts::new(st_ft, ap_ft).unwrap());
        let experts_raw = Arc::new(Experts::new(scoop_toss.net.clone(), approach.net.clone()).unwrap());

        let meta_run = |experts: &Arc<Experts>, flat: bool| {
            let mut cfg = TrainConfig::for_mode(Mode::Meta, SEED);
            cfg.max_env_steps = META_BUDGET;
            cfg.rewards.flat_meta_bonus = flat;
            let out = train(
                &cfg,
                TrainInputs {
                    experts: Some(experts.clone()),
                    lineage: vec![SEED],
                    ..Default::default()
                },
            )
            .unwrap();
            println!("meta (flat bonus {flat}): {} env steps, {}", out.env_steps, minutes(out.wall_seconds));
            out
        };
        let meta = meta_run(&experts_sti, false);
        let meta_no_sti = meta_run(&experts_raw, false);
        let meta_flat = meta_run(&experts_sti, true);
        Trained {
            approach,
            scoop_toss,
            experts_sti,
            experts_raw,
            meta,
            meta_no_sti,
            meta_flat,
        }
    })
}

fn approach_training() {
    let t = trained();
    let ap = &t.approach;
    let rate = ap.last().map_or(0.0, |r| r.success_rate);
    verdict(
        "approach training",
        ap.reached_target && rate >= 0.9 && ap.wall_seconds <= 30.0 * 60.0,
        format!(
            "windowed ApproachSuccess {rate:.3} after {} env steps in {} on {} core(s) (budget 30 min on 8)",
            ap.env_steps,
            minutes(ap.wall_seconds),
            rayon::current_num_threads()
        ),
    );
}

fn scoop_toss_training() {
    let t = trained();
    let st = &t.scoop_toss;
    let rep = run_angular_eval(&st.net, &EnvConfig::default(), TRIALS_PER_SECTOR, EVAL_SEED).unwrap();
    print!("{}", rep.to_csv());
    let (front, rear) = (rep.frontal_load_pct(), rep.rear_load_pct());
    let in_time = st.wall_seconds <= 4.0 * 3600.0;
    let frontal_ok = report(
        "scoop-toss training: frontal load >= 70%",
        front >= 70.0 && in_time,
        format!("frontal {front:.1}% after {} env steps in {}", st.env_steps, minutes(st.wall_seconds)),
    );
    let gap_ok = report(
        "scoop-toss training: frontal - rear >= 15 pp",
        front - rear >= 15.0,
        format!("frontal {front:.1}% vs rear {rear:.1}% ({:+.1} pp)", front - rear),
    );
    assert!(frontal_ok && gap_ok, "scoop-toss training criteria failed");
}

fn reward_ablation_trend() {
    let mut base = TrainConfig::for_mode(Mode::ScoopToss, SEED);
    base.max_env_steps = ABLATION_BUDGET;
    // no early stop: every run consumes exactly the same number of env steps
    base.target_success = None;
    let variants = [None, Some(Ablation::NoHeight), Some(Ablation::NoExpDist), Some(Ablation::NoLoadBonus)];
    let rows = run_ablation_suite(&base, &ABLATION_SEEDS, &variants, TRIALS_PER_SECTOR, None).unwrap();
    print!("{}", AblationRow::to_csv(&rows));
    let mut worse_everywhere = true;
    let mut lines = Vec::new();
    for &seed in &ABLATION_SEEDS {
        let of = |v: &str| rows.iter().find(|r| r.seed == seed && r.variant == v).unwrap().frontal_load_pct;
        let b = of("baseline");
        let mut parts = vec![format!("seed {seed}: baseline {b:.1}%")];
        for v in [Ablation::NoHeight, Ablation::NoExpDist, Ablation::NoLoadBonus] {
            let x = of(v.name());
            worse_everywhere &= x < b;
            parts.push(format!("{} {x:.1}%", v.name()));
        }
        lines.push(parts.join(" "));
    }
    let same_budget = rows.iter().all(|r| r.env_steps == rows[0].env_steps);
    lines.push(format!("{} env steps per run, identical: {same_budget}", rows[0].env_steps));
    verdict("reward ablation trend", worse_everywhere && same_budget, lines.join("; "));
}

fn meta_trend() {
    let t = trained();
    let env = EnvConfig::default();
    let eval = |label: &str, ctrl: MultiController, experts: &Arc<Experts>| -> MultiReport {
        run_multi_eval(label, &ctrl, experts, &env, 10, 100, 100.0, EVAL_SEED).unwrap()
    };
    let meta = eval("meta", MultiController::Meta(Arc::new(t.meta.net.clone())), &t.experts_sti);
    let st_only = eval("scoop-toss-only", MultiController::Pinned(ExpertId::ScoopToss), &t.experts_sti);
    let no_sti = eval("no-sti", MultiController::Meta(Arc::new(t.meta_no_sti.net.clone())), &t.experts_raw);
    let flat = eval("no-extra-bonus", MultiController::Meta(Arc::new(t.meta_flat.net.clone())), &t.experts_sti);
    let rows = vec![meta.clone(), st_only.clone(), no_sti.clone(), flat.clone()];
    print!("{}", MultiReport::to_csv(&rows));
    let ratio_ok = report(
        "meta trend: meta >= 1.5x scoop-toss-only",
        meta.mean_loaded >= 1.5 * st_only.mean_loaded && meta.mean_loaded > 0.0,
        format!("meta {:.2} vs scoop-toss-only {:.2} objects / 100 s", meta.mean_loaded, st_only.mean_loaded),
    );
    let variants_ok = report(
        "meta trend: NoSTI and NoExtraBonus below baseline",
        no_sti.mean_loaded < meta.mean_loaded && flat.mean_loaded < meta.mean_loaded,
        format!(
            "meta {:.2}, no-sti {:.2}, no-extra-bonus {:.2}",
            meta.mean_loaded, no_sti.mean_loaded, flat.mean_loaded
        ),
    );
    assert!(ratio_ok && variants_ok, "meta trend criteria failed");
}

const CRITERIA: &[(&str, fn())] = &[
    ("reward_oracles", reward_oracles),
    ("gradient_check", gradient_check),
    ("gae_oracles", gae_oracles),
    ("physics_properties", physics_properties),
    ("curriculum_and_termination", curriculum_and_termination),
    ("sti_suite", sti_suite),
    ("pinned_meta_matches_standalone_expert", pinned_meta_matches_standalone_expert),
    ("approach_training", approach_training),
    ("scoop_toss_training", scoop_toss_training),
    ("meta_trend", meta_trend),
    ("reward_ablation_trend", reward_ablation_trend),
];

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = Vec::new();
    for &(name, f) in CRITERIA {
        if !filters.is_empty() && !filters.iter().any(|p| p == name) {
            continue;
        }
        if std::panic::catch_unwind(f).is_err() {
            failed.push(name);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: failed {failed:?}");
        std::process::exit(1);
    }
}
