use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scoop_cli::config::{ExperimentConfig, CONFIG_FILE};
use scoop_core::env::OBS_DIM;
use scoop_core::sim::DOF;
use scoop_core::nn::{Checkpoint, HeadKind, PolicyNet};
use scoop_core::trace::Trace;
use std::path::{Path, PathBuf};

fn scoop(args: &[&str]) -> i32 {
    let mut v = vec!["scoop"];
    v.extend_from_slice(args);
    scoop_cli::run(v)
}

fn random_checkpoint(dir: &Path, name: &str, seed: u64) -> PathBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = PolicyNet::<f32>::new(HeadKind::Gaussian, OBS_DIM, DOF, &mut rng);
    let p = dir.join(name);
    Checkpoint::new(net, vec![seed]).save(&p).unwrap();
    p
}

fn small_config(dir: &Path) -> PathBuf {
    let p = dir.join("small.toml");
    std::fs::write(&p, "[train.ppo]\nn_envs = 4\nhorizon = 64\nminibatches = 2\nepochs = 1\n").unwrap();
    p
}

#[test]
fn training_requires_a_seed() {
    assert_eq!(scoop(&["train-expert", "approach"]), 2);
}

#[test]
fn train_expert_writes_checkpoint_and_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("run");
    let code = scoop(&[
        "--config",
        cfg.to_str().unwrap(),
        "train-expert",
        "approach",
        "--seed",
        "7",
        "--steps",
        "512",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let resolved = ExperimentConfig::resolve(scoop_core::env::Mode::Approach, Some(&out.join(CONFIG_FILE))).unwrap();
    assert_eq!(resolved.command, "train-expert");
    assert_eq!(resolved.seeds, vec![7]);
    assert_eq!(resolved.train.seed, 7);
    assert_eq!(resolved.train.ppo.n_envs, 4);
    assert_eq!(resolved.train.max_env_steps, 512);
    let ck = Checkpoint::<f32>::load(&out.join("final.bin"), Some(OBS_DIM)).unwrap();
    assert_eq!(ck.seed_lineage, vec![7]);
}

#[test]
fn dumped_trace_replays_to_the_same_event_log() {
    let dir = tempfile::tempdir().unwrap();
    let ck = random_checkpoint(dir.path(), "st.bin", 1);
    let trace = dir.path().join("ep.ndjson");
    let code = scoop(&[
        "trace",
        "scoop-toss",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--seed",
        "4",
        "--out",
        trace.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let log = dir.path().join("events.txt");
    assert_eq!(scoop(&["replay", trace.to_str().unwrap(), "--out", log.to_str().unwrap()]), 0);
    let t = Trace::load(&trace).unwrap();
    assert!(!t.steps.is_empty());
    let expected = scoop_core::trace::render_event_log(&t.recorded_events());
    assert_eq!(std::fs::read_to_string(&log).unwrap(), expected);
}

#[test]
fn tampered_trace_fails_replay() {
    let dir = tempfile::tempdir().unwrap();
    let ck = random_checkpoint(dir.path(), "ap.bin", 2);
    let trace = dir.path().join("ep.ndjson");
    let args = ["trace", "approach", "--checkpoint", ck.to_str().unwrap(), "--seed", "5", "--out", trace.to_str().unwrap()];
    assert_eq!(scoop(&args), 0);
    let text = std::fs::read_to_string(&trace).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    let last = lines.len() - 1;
    let mut v: serde_json::Value = serde_json::from_str(&lines[last]).unwrap();
    let x = v["data"]["robot"]["base_pos"][0].as_f64().unwrap();
    v["data"]["robot"]["base_pos"][0] = serde_json::json!(x + 0.25);
    lines[last] = v.to_string();
    std::fs::write(&trace, lines.join("\n") + "\n").unwrap();
    assert_eq!(scoop(&["replay", trace.to_str().unwrap(), "--out", dir.path().join("l").to_str().unwrap()]), 1);
}

#[test]
fn angular_eval_writes_report_and_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let ck = random_checkpoint(dir.path(), "st.bin", 3);
    let out = dir.path().join("angular.csv");
    let code = scoop(&["eval", "angular", "--checkpoint", ck.to_str().unwrap(), "--trials", "2", "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0);
    let csv = std::fs::read_to_string(&out).unwrap();
    assert_eq!(csv.lines().count(), 1 + 8);
    assert!(dir.path().join("angular.experiment.toml").exists());
}

#[test]
fn multi_eval_needs_a_controller() {
    let dir = tempfile::tempdir().unwrap();
    let st = random_checkpoint(dir.path(), "st.bin", 1);
    let ap = random_checkpoint(dir.path(), "ap.bin", 2);
    let out = dir.path().join("m.csv");
    let base = ["eval", "multi", "--scoop-toss", st.to_str().unwrap(), "--approach", ap.to_str().unwrap(), "--out", out.to_str().unwrap()];
    assert_eq!(scoop(&base), 1);
    let mut pinned = base.to_vec();
    pinned.extend_from_slice(&["--pinned", "approach", "--episodes", "1", "--objects", "2", "--seconds", "1"]);
    assert_eq!(scoop(&pinned), 0);
    assert!(std::fs::read_to_string(&out).unwrap().contains("pinned-approach"));
}
