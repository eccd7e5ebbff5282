use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scoop_core::env::{Curriculum, EnvConfig, EpisodeState, Mode, Termination};
use scoop_core::rewards::{approach_terms, regularization, toss_reward, RegWeights, RegularizationInputs, RewardWeights};
use scoop_core::sim::{integrate_ballistic, ActionVector, Event, ObjectState, Phase, SimConfig, Vec2, Vec3, World, DOF};
use scoop_core::teleop::{project_target, DirFrame};
use std::f64::consts::PI;

fn config() -> ProptestConfig {
    ProptestConfig {
        cases: 64,
        ..ProptestConfig::default()
    }
}

fn random_action(rng: &mut ChaCha8Rng) -> ActionVector {
    let mut a = [0.0; DOF];
    for v in &mut a {
        *v = rng.random_range(-4.0..4.0);
    }
    a[3] = rng.random_range(-0.2..1.0);
    ActionVector::from_array(a)
}

/// World with cubes sitting under and around the basin so captures happen.
fn busy_world(seed: u64) -> World {
    let mut w = World::new(SimConfig::default(), seed).unwrap();
    let b = w.basin_center();
    w.add_object(ObjectState::cube(Vec2::new(b.x, b.y)));
    w.add_object(ObjectState::cube(Vec2::new(b.x + 0.3, b.y)));
    w.add_object(ObjectState::cube(Vec2::new(b.x - 0.4, b.y + 0.2)));
    w
}

fn launched(z: f64, v: Vec3, restitution: f64) -> ObjectState {
    let mut o = ObjectState::cube(Vec2::zeros());
    o.position.z = z;
    o.velocity = v;
    o.phase = Phase::Ballistic;
    o.restitution = restitution;
    o
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn stepping_is_deterministic(seed in any::<u64>(), steps in 1usize..400) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let actions: Vec<ActionVector> = (0..steps).map(|_| random_action(&mut rng)).collect();
        let mut a = busy_world(seed);
        let mut b = busy_world(seed);
        for act in &actions {
            a.step(act).unwrap();
            b.step(act).unwrap();
        }
        prop_assert!(a == b);
    }

    #[test]
    fn phases_follow_the_graph(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = busy_world(seed);
        let mut hold = random_action(&mut rng);
        for t in 0..1500 {
            if t % 10 == 0 {
                hold = random_action(&mut rng);
            }
            let before: Vec<ObjectState> = w.objects.clone();
            w.step(&hold).unwrap();
            for (o0, o1) in before.iter().zip(&w.objects) {
                prop_assert!(o0.phase.can_become(o1.phase), "{:?} -> {:?}", o0.phase, o1.phase);
                prop_assert!(o1.max_height_reached >= o0.max_height_reached);
                if o1.phase == Phase::Ground {
                    prop_assert!(o1.position.z >= o1.radius);
                }
                if o1.phase == Phase::Carried {
                    let expect = w.basin_center() + Vec3::new(0.0, 0.0, o1.radius);
                    prop_assert_eq!(o1.position, expect);
                }
            }
        }
    }

    #[test]
    fn tray_entry_follows_release_follows_capture(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = busy_world(seed);
        let mut hold = random_action(&mut rng);
        for t in 0..2000 {
            if t % 8 == 0 {
                hold = random_action(&mut rng);
            }
            w.step(&hold).unwrap();
        }
        for (k, (_, e)) in w.event_log.iter().enumerate() {
            if let Event::TrayEnter { object } = *e {
                let earlier = &w.event_log[..k];
                let rel = earlier
                    .iter()
                    .rposition(|(_, e)| matches!(e, Event::Release { object: o, .. } if *o == object));
                prop_assert!(rel.is_some());
                let cap = earlier[..rel.unwrap()]
                    .iter()
                    .any(|(_, e)| matches!(e, Event::Capture { object: o } if *o == object));
                prop_assert!(cap);
            }
        }
    }

    #[test]
    fn flight_conserves_horizontal_velocity_and_energy(
        z in 0.3f64..2.0,
        vx in -3.0f64..3.0,
        vy in -3.0f64..3.0,
        vz in -1.0f64..5.0,
    ) {
        let g = 9.81;
        let dt = 0.02;
        let mut o = launched(z, Vec3::new(vx, vy, vz), 0.3);
        let energy = |o: &ObjectState| 0.5 * o.velocity.norm_squared() + g * o.position.z;
        let e0 = energy(&o);
        loop {
            let (next, _, impact) = integrate_ballistic(&o, dt, g);
            if impact.is_some() || next.phase != Phase::Ballistic {
                break;
            }
            prop_assert_eq!(next.velocity.x, vx);
            prop_assert_eq!(next.velocity.y, vy);
            // symplectic Euler drifts by at most g * |v| * dt per step in total
            prop_assert!((energy(&next) - e0).abs() <= g * dt * (vz.abs() + 2.0 * g * 2.0_f64.sqrt() + 5.0));
            o = next;
        }
    }

    #[test]
    fn bounces_never_gain_speed(vx in -3.0f64..3.0, vz in -6.0f64..-0.1, e in 0.0f64..=1.0) {
        let o = launched(0.025, Vec3::new(vx, 0.0, vz), e);
        let (next, _, impact) = integrate_ballistic(&o, 0.02, 9.81);
        let pre = impact.expect("moving down at the ground must hit");
        prop_assert!(next.velocity.norm() <= pre + 1e-12);
    }

    #[test]
    fn observations_stay_finite(seed in any::<u64>(), mode in 0usize..3) {
        let mode = [Mode::ScoopToss, Mode::Approach, Mode::Meta][mode];
        let cfg = EnvConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ep = EpisodeState::reset(mode, &cfg, &Curriculum::finished(), &mut rng, None).unwrap();
        let w = RewardWeights::default();
        for _ in 0..300 {
            let obs = ep.build_observation().unwrap();
            prop_assert!(obs.iter().all(|v| v.is_finite()));
            let u: [f64; DOF] = std::array::from_fn(|_| rng.random_range(-1.5..1.5));
            let r = ep.step(&u, &cfg, &w).unwrap();
            prop_assert!(r.reward.is_finite());
            if r.termination.is_done() {
                break;
            }
        }
    }

    #[test]
    fn episodes_end_exactly_once_with_one_outcome(seed in any::<u64>(), mode in 0usize..3) {
        let mode = [Mode::ScoopToss, Mode::Approach, Mode::Meta][mode];
        let cfg = EnvConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cur = Curriculum { time_limit: 3.0, ..Curriculum::finished() };
        let mut ep = EpisodeState::reset(mode, &cfg, &cur, &mut rng, None).unwrap();
        let w = RewardWeights::default();
        let mut end = None;
        for _ in 0..cfg.steps(cfg.hard_timeout).max(ep.time_limit_steps) + 1 {
            let u: [f64; DOF] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let r = ep.step(&u, &cfg, &w).unwrap();
            if r.termination.is_done() {
                end = Some(r.termination);
                break;
            }
        }
        let end = end.expect("every episode terminates by the hard cap");
        let allowed: &[Termination] = match mode {
            Mode::ScoopToss => &[Termination::SuccessLoad, Termination::TimeLimitFail, Termination::Timeout],
            Mode::Approach => &[Termination::ApproachSuccess, Termination::Timeout],
            Mode::Meta => &[Termination::SuccessLoad, Termination::TimeLimitFail],
        };
        prop_assert!(allowed.contains(&end), "{:?} in {:?}", end, mode);
        prop_assert_eq!(ep.check_termination(&cfg), end);
        prop_assert!(ep.step(&[0.0; DOF], &cfg, &w).is_err());
    }

    #[test]
    fn stage_flags_never_skip_or_regress(seed in any::<u64>()) {
        let cfg = EnvConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ep = EpisodeState::reset(Mode::ScoopToss, &cfg, &Curriculum::default(), &mut rng, None).unwrap();
        let w = RewardWeights::default();
        let rank = |f: &scoop_core::env::StageFlags| [f.approached, f.scooped, f.tossed, f.loaded];
        let mut prev = rank(&ep.stage_flags[0]);
        for _ in 0..400 {
            let u: [f64; DOF] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let r = ep.step(&u, &cfg, &w).unwrap();
            let now = rank(&ep.stage_flags[0]);
            for k in 0..4 {
                prop_assert!(now[k] >= prev[k]);
                if k > 0 && now[k] {
                    prop_assert!(now[k - 1]);
                }
            }
            prev = now;
            if r.termination.is_done() {
                break;
            }
        }
    }

    #[test]
    fn curriculum_only_grows_and_stays_capped(outcomes in proptest::collection::vec(any::<bool>(), 0..3000)) {
        let mut c = Curriculum::default();
        let (mut r, mut t, mut lvl) = (c.radius, c.time_limit, c.level);
        for s in outcomes {
            let promoted = c.update(s);
            prop_assert!(c.radius >= r && c.time_limit >= t && c.level >= lvl);
            prop_assert!(c.radius <= c.radius_cap + 1e-12 && c.time_limit <= c.time_cap + 1e-12);
            prop_assert_eq!(promoted, c.level == lvl + 1);
            if promoted {
                prop_assert!(s, "a failure cannot trigger a promotion");
            }
            r = c.radius;
            t = c.time_limit;
            lvl = c.level;
        }
    }

    #[test]
    fn toss_reward_shape(h in 0.001f64..2.0, d in 0.0f64..5.0, dd in 0.001f64..1.0) {
        let w = RewardWeights::default();
        prop_assert!(toss_reward(h, d + dd, &w) < toss_reward(h, d, &w));
        prop_assert_eq!(toss_reward(2.0 * h, d, &w) / toss_reward(h, d, &w), 2.0);
        prop_assert_eq!(toss_reward(0.0, d, &w), 0.0);
    }

    #[test]
    fn approach_terms_clip_and_peak(speed in 0.3f64..1.5, yaw in -PI..PI, off in -1.0f64..1.0) {
        let w = RewardWeights::default();
        let dir = Vec2::new(yaw.cos(), yaw.sin());
        let aligned = approach_terms(dir * speed, yaw, dir * 3.0, 0.0, &w);
        prop_assert!((aligned - (w.w3 * w.v_des + w.w4)).abs() < 1e-12);
        if off != 0.0 {
            prop_assert!(approach_terms(dir * speed, yaw + off, dir * 3.0, 0.0, &w) < aligned);
        }
    }

    #[test]
    fn regularization_is_never_positive(v in proptest::collection::vec(-50.0f64..50.0, 15)) {
        let inp = RegularizationInputs {
            dof_accel: std::array::from_fn(|i| v[i]),
            action_delta: std::array::from_fn(|i| v[5 + i]),
            effort: std::array::from_fn(|i| v[10 + i]),
        };
        prop_assert!(regularization(&inp, &RegWeights::SCOOP) <= 0.0);
        prop_assert!(regularization(&inp, &RegWeights::APPROACH) <= 0.0);
    }

    #[test]
    fn projected_target_is_at_fixed_range(x in -5.0f64..5.0, y in -5.0f64..5.0, yaw in -PI..PI, a in -PI..PI, m in 0.05f64..1.0) {
        let base = Vec2::new(x, y);
        let dir = [m * a.cos(), m * a.sin()];
        for frame in [DirFrame::World, DirFrame::Body] {
            let t = project_target(base, yaw, dir, 2.0, frame, 0.0).unwrap();
            prop_assert!(((Vec2::new(t.x, t.y) - base).norm() - 2.0).abs() < 1e-9);
            prop_assert_eq!(t.z, 0.0);
        }
        prop_assert!(project_target(base, yaw, [0.0, 0.0], 2.0, DirFrame::World, 0.0).is_none());
    }
}
