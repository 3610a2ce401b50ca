//! Experiment harness: configuration, runs, checkpoints, evaluation, curves
//! and the command-line front end.

use std::path::{Path, PathBuf};
use std::process::Command;

use sha2::{Digest, Sha256};
use uas_core::action_space::{LayoutKind, UnifiedActionSpace};
use uas_core::algos::rollout::{evaluate, evaluate_policy, EvalResult};
use uas_core::algos::train::{eval_seeds, run_training};
use uas_core::envs::proposition::analytic_shared_optimum;
use uas_core::envs::{
    Environment, ObsMode, PropositionConfig, PropositionGame, StepResult, TimeStep,
};
use uas_core::harness::plot::{aggregate, aggregate_series, curves};
use uas_core::harness::run::{build_trial, PropositionScript};
use uas_core::harness::{evaluate_checkpoint, run, Algorithm, ExperimentConfig, Selection};
use uas_core::{Error, Result};

fn config(body: &str, out: &Path) -> ExperimentConfig {
    let text = format!("output_dir = {:?}\n{body}", out.display().to_string());
    ExperimentConfig::from_toml(&text).unwrap()
}

const TINY_SKIRMISH: &str = r#"
seeds = [3]
[env]
kind = "skirmish"
skirmish = { width = 8, height = 8, n_attackers = 2, n_healers = 1, n_enemies = 2, episode_limit = 20 }
[algo]
algorithms = ["u-qmix"]
qmix = { buffer_size = 64, batch_size = 4 }
[train]
total_steps = 600
eval_interval = 200
eval_episodes = 4
"#;

const TINY_PROPOSITION: &str = r#"
seeds = [0, 1]
[env]
kind = "proposition"
proposition = { n = 2, a0 = 4, a1 = 6, obs_mode = "id" }
[algo]
algorithms = ["u-mappo", "u-qmix"]
mappo = { episodes_per_update = 8 }
qmix = { buffer_size = 64, batch_size = 8 }
[train]
total_steps = 200
eval_interval = 50
eval_episodes = 4
"#;

fn sha(path: &Path) -> String {
    hex_digest(&std::fs::read(path).unwrap())
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Counts resets of the wrapped environment.
struct Counting {
    inner: Box<dyn Environment>,
    resets: usize,
}

impl Environment for Counting {
    fn action_space(&self) -> &UnifiedActionSpace {
        self.inner.action_space()
    }
    fn n_agents(&self) -> usize {
        self.inner.n_agents()
    }
    fn obs_dim(&self) -> usize {
        self.inner.obs_dim()
    }
    fn state_dim(&self) -> usize {
        self.inner.state_dim()
    }
    fn episode_limit(&self) -> usize {
        self.inner.episode_limit()
    }
    fn reset(&mut self, seed: u64) -> Result<TimeStep> {
        self.resets += 1;
        self.inner.reset(seed)
    }
    fn step(&mut self, actions: &[usize]) -> Result<StepResult> {
        self.inner.step(actions)
    }
}

#[test]
fn config_hash_survives_a_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(TINY_PROPOSITION, dir.path());
    let path = dir.path().join("copy.toml");
    std::fs::write(&path, toml::to_string(&cfg).unwrap()).unwrap();
    let back = ExperimentConfig::load(&path).unwrap();
    assert_eq!(back.hash(), cfg.hash());
    assert_eq!(back, cfg);
}

#[test]
fn reruns_write_identical_metrics() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = run(&config(TINY_SKIRMISH, a.path()), &Selection::default()).unwrap();
    let rb = run(&config(TINY_SKIRMISH, b.path()), &Selection::default()).unwrap();
    assert_eq!(ra.len(), 1);
    assert!(ra[0].completed(), "{:?}", ra[0].status);
    assert_eq!(sha(&ra[0].metrics_path), sha(&rb[0].metrics_path));
    let final_a = ra[0].checkpoint_paths.last().unwrap();
    let final_b = rb[0].checkpoint_paths.last().unwrap();
    assert_eq!(sha(final_a), sha(final_b));
}

#[test]
fn run_layout_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(TINY_PROPOSITION, dir.path());
    let records = run(&cfg, &Selection::default()).unwrap();
    assert_eq!(records.len(), 4);
    let root = cfg.run_root();
    assert!(root.join("config.toml").is_file());
    assert!(root.join("summary.json").is_file());
    for r in &records {
        assert!(r.completed());
        assert!(r.metrics_path.starts_with(root.join(r.algorithm.to_string())));
        assert_eq!(r.final_eval.as_ref().unwrap().episodes, 4);
    }
    // The copied configuration hashes like the original.
    let copy = ExperimentConfig::load(&root.join("config.toml")).unwrap();
    assert_eq!(copy.hash(), cfg.hash());
}

#[test]
fn selection_restricts_the_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(TINY_PROPOSITION, dir.path());
    let select = Selection {
        algorithms: Some(vec!["u-qmix".parse().unwrap()]),
        seeds: Some(vec![1]),
    };
    let records = run(&cfg, &select).unwrap();
    assert_eq!(records.len(), 1);
    assert_eq!((records[0].algorithm.to_string().as_str(), records[0].seed), ("u-qmix", 1));
    let outside = Selection {
        algorithms: None,
        seeds: Some(vec![9]),
    };
    assert!(matches!(run(&cfg, &outside), Err(Error::Config(_))));
}

#[test]
fn checkpoint_evaluation_matches_in_memory_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(TINY_SKIRMISH, dir.path());
    let records = run(&cfg, &Selection::default()).unwrap();
    let ckpt = records[0].checkpoint_paths.last().unwrap();
    let from_disk = evaluate_checkpoint(ckpt, &cfg, 6).unwrap();
    assert_eq!(from_disk.episodes, 6);
    assert!((0.0..=1.0).contains(&from_disk.win_rate));
    // Same weights, same seeds, same result.
    let (_, params) = uas_core::grad::checkpoint::load(ckpt).unwrap();
    let trial = build_trial(&cfg, records[0].algorithm, records[0].seed).unwrap();
    let mut env = cfg.env.build(LayoutKind::Unified).unwrap();
    let direct = evaluate(env.as_mut(), trial.learner.net(), &params, &eval_seeds(3, 6)).unwrap();
    assert_eq!(direct, from_disk);
}

#[test]
fn checkpoint_architecture_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(TINY_SKIRMISH, dir.path());
    let records = run(&cfg, &Selection::default()).unwrap();
    let ckpt = records[0].checkpoint_paths.last().unwrap();
    let bigger = config(&TINY_SKIRMISH.replace("n_enemies = 2", "n_enemies = 3"), dir.path());
    assert!(matches!(evaluate_checkpoint(ckpt, &bigger, 4), Err(Error::Checkpoint(_))));
    let garbage = dir.path().join("garbage.ckpt");
    std::fs::write(&garbage, b"not a checkpoint").unwrap();
    assert!(matches!(evaluate_checkpoint(&garbage, &cfg, 4), Err(Error::Checkpoint(_))));
}

#[test]
fn random_weights_rarely_win_the_default_skirmish() {
    let dir = tempfile::tempdir().unwrap();
    let body = r#"
        seeds = [0]
        [env]
        kind = "skirmish"
        [algo]
        algorithms = ["u-qmix", "u-mappo"]
    "#;
    let cfg = config(body, dir.path());
    for algo in ["u-qmix", "u-mappo"] {
        let algo: Algorithm = algo.parse().unwrap();
        for seed in 0..3 {
            let mut trial = build_trial(&cfg, algo, seed).unwrap();
            let seeds = eval_seeds(seed, 32);
            let r = evaluate(trial.eval_env.as_mut(), trial.learner.net(), trial.learner.params(), &seeds).unwrap();
            assert_eq!(r.episodes, 32);
            assert!(r.win_rate < 0.2, "{algo} seed {seed}: {r:?}");
        }
    }
}

#[test]
fn scripted_optimum_wins_every_proposition_episode() {
    let cfg = PropositionConfig {
        obs_mode: ObsMode::Id,
        ..Default::default()
    };
    let game = PropositionGame::new(cfg, LayoutKind::Unified).unwrap();
    let mut script = PropositionScript::new(&game).unwrap();
    let mut env = Counting {
        inner: Box::new(game),
        resets: 0,
    };
    let r: EvalResult = evaluate_policy(&mut env, &mut script, &eval_seeds(7, 32)).unwrap();
    assert_eq!(env.resets, 32);
    assert_eq!(r.episodes, 32);
    assert_eq!(r.win_rate, 1.0);
    assert_eq!(r.mean_return, 1.0);

    let blind = PropositionGame::new(PropositionConfig::default(), LayoutKind::Unified).unwrap();
    assert!(PropositionScript::new(&blind).is_err());
}

#[test]
fn evaluation_runs_exactly_one_episode_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(TINY_SKIRMISH, dir.path());
    let trial = build_trial(&cfg, "u-qmix".parse().unwrap(), 0).unwrap();
    let mut env = Counting {
        inner: cfg.env.build(LayoutKind::Unified).unwrap(),
        resets: 0,
    };
    let r = evaluate(&mut env, trial.learner.net(), trial.learner.params(), &eval_seeds(0, 32)).unwrap();
    assert_eq!((env.resets, r.episodes), (32, 32));
}

#[test]
fn single_seed_band_collapses_to_the_mean() {
    assert_eq!(aggregate(&[0.25]), (0.25, 0.25, 0.25));
    let rows = aggregate_series(&[vec![(10, 0.5), (20, 0.75)]], None);
    assert!(rows.iter().all(|r| r.ci_low == r.mean && r.ci_high == r.mean));
}

#[test]
fn five_seeds_of_ten_points_give_ten_rows() {
    let series: Vec<Vec<(u64, f64)>> = (0..5)
        .map(|s| (1..=10).map(|k| (k * 100, (k + s) as f64)).collect())
        .collect();
    let rows = aggregate_series(&series, None);
    assert_eq!(rows.len(), 10);
    for (k, r) in rows.iter().enumerate() {
        assert_eq!(r.step, (k as u64 + 1) * 100);
        assert!((r.mean - (k as f64 + 3.0)).abs() < 1e-12);
        assert!(r.ci_low < r.mean && r.mean < r.ci_high);
    }
}

#[test]
fn band_width_shrinks_like_inverse_root_of_seed_count() {
    // Values ±1 alternately: the sample deviation stays near 1, so the
    // half-width is t(k-1)·s/√k.
    let width = |k: usize| {
        let vals: Vec<f64> = (0..k).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let (_, lo, hi) = aggregate(&vals);
        (hi - lo) / 2.0
    };
    for k in [4usize, 16, 64] {
        let s = (k as f64 / (k - 1) as f64).sqrt();
        let t = t_quantile_975(k - 1);
        assert!((width(k) - t * s / (k as f64).sqrt()).abs() < 1e-9);
    }
    // Once t has settled, quadrupling the seeds halves the band.
    let ratio = width(256) / width(1024);
    assert!((ratio - 2.0).abs() < 0.02, "{ratio}");
}

/// 97.5% Student-t quantile by bisection on a numerically integrated CDF.
fn t_quantile_975(dof: usize) -> f64 {
    let nu = dof as f64;
    let pdf = |x: f64| (1.0 + x * x / nu).powf(-(nu + 1.0) / 2.0);
    // Simpson integration of the unnormalized density.
    let integral = |a: f64, b: f64| {
        let n = 20_000;
        let h = (b - a) / n as f64;
        let mut s = pdf(a) + pdf(b);
        for i in 1..n {
            s += pdf(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    };
    let total = 2.0 * (integral(0.0, 50.0) + integral(50.0, 1e4));
    let (mut lo, mut hi) = (0.0, 20.0);
    for _ in 0..60 {
        let mid = (lo + hi) / 2.0;
        if 0.5 + integral(0.0, mid) / total < 0.975 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (lo + hi) / 2.0
}

#[test]
fn curves_are_labelled_per_run_group() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(TINY_PROPOSITION, dir.path());
    run(&cfg, &Selection::default()).unwrap();
    let found = curves(&[cfg.run_root()]).unwrap();
    let mut labels: Vec<(String, &str, usize, usize)> =
        found.iter().map(|c| (c.label.clone(), c.metric, c.seeds, c.rows.len())).collect();
    labels.sort();
    assert_eq!(
        labels,
        vec![
            ("u-mappo".into(), "eval_return", 2, 4),
            ("u-mappo".into(), "eval_wr", 2, 4),
            ("u-qmix".into(), "eval_return", 2, 4),
            ("u-qmix".into(), "eval_wr", 2, 4),
        ]
    );
}

fn uas(args: &[&str], root: &Path) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_uas"))
        .args(args)
        .env("UAS_OUTPUT_ROOT", root)
        .env("RUST_LOG", "error")
        .output()
        .unwrap();
    (out.status.code().unwrap(), String::from_utf8(out.stdout).unwrap())
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let good = root.join("good.toml");
    std::fs::write(&good, TINY_PROPOSITION.replace("seeds = [0, 1]", "seeds = [0]")).unwrap();
    let bad = root.join("bad.toml");
    std::fs::write(&bad, "seeds = []\n[env]\nkind = \"proposition\"\n[algo]\nalgorithms = []\n").unwrap();

    assert_eq!(uas(&["--help"], root).0, 0);
    assert_eq!(uas(&["no-such-command"], root).0, 1);
    assert_eq!(uas(&["train", bad.to_str().unwrap()], root).0, 1);
    assert_eq!(uas(&["train", root.join("missing.toml").to_str().unwrap()], root).0, 2);
    assert_eq!(uas(&["verify", "nonsense"], root).0, 1);

    let (code, stdout) = uas(&["train", good.to_str().unwrap(), "--algorithm", "u-qmix"], root);
    assert_eq!(code, 0);
    let records: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    let ckpt = records[0]["checkpoint_paths"].as_array().unwrap().last().unwrap().as_str().unwrap();
    assert!(Path::new(ckpt).starts_with(root.join("runs")), "{ckpt}");

    let (code, stdout) = uas(&["eval", ckpt, good.to_str().unwrap(), "--episodes", "5"], root);
    assert_eq!(code, 0);
    let eval: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(eval["episodes"], 5);

    let run_root: PathBuf = Path::new(ckpt).ancestors().nth(3).unwrap().to_path_buf();
    let plots = root.join("plots");
    let (code, stdout) = uas(&["plot", run_root.to_str().unwrap(), "--out", plots.to_str().unwrap()], root);
    assert_eq!(code, 0);
    assert_eq!(stdout.lines().count(), 2);
    let csv = std::fs::read_to_string(plots.join("u-qmix_eval_wr.csv")).unwrap();
    assert!(csv.starts_with("step,mean,ci_low,ci_high\n"));

    let (code, stdout) = uas(&["verify", "igm"], root);
    assert_eq!(code, 0);
    let report: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(report["passed"], true);

    let (code, stdout) = uas(&["bruteforce", "--resolution", "20"], root);
    assert_eq!(code, 0);
    assert!(stdout.contains("0.0625"), "{stdout}");
}

#[test]
fn trained_blind_shared_policy_stays_under_the_shared_ceiling() {
    let dir = tempfile::tempdir().unwrap();
    let body = r#"
        seeds = [0]
        [env]
        kind = "proposition"
        [algo]
        algorithms = ["qmix", "mappo"]
        qmix = { buffer_size = 64, batch_size = 8 }
        [train]
        total_steps = 1000
        eval_interval = 500
        eval_episodes = 8
    "#;
    let cfg = config(body, dir.path());
    for algo in ["qmix", "mappo"] {
        let mut t = build_trial(&cfg, algo.parse().unwrap(), 0).unwrap();
        let mut sink = Vec::new();
        run_training(t.learner.as_mut(), t.env.as_mut(), t.eval_env.as_mut(), &cfg.train, 0, &mut sink).unwrap();
        let seeds: Vec<u64> = (0..10_000).collect();
        let r = evaluate(t.eval_env.as_mut(), t.learner.net(), t.learner.params(), &seeds).unwrap();
        assert!(r.mean_return <= analytic_shared_optimum(2, 1.0) + 0.02, "{algo}: {r:?}");
    }
}
