//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (no libtest harness) so every line is printed in
//! order. The multi-hour parts of criterion 5 run only with `--ignored` or
//! `--include-ignored`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use uas_core::action_space::LayoutKind;
use uas_core::algos::hyper::{AblationFlags, UMappoHyperparameters, UQmixHyperparameters};
use uas_core::algos::mappo::{UMappo, CGI_SCOPE};
use uas_core::algos::metrics::{Instrumentation, MetricsRecord};
use uas_core::algos::qmix::UQmix;
use uas_core::algos::rollout::{run_episode, ActionSelection};
use uas_core::algos::schedule::EpsilonSchedule;
use uas_core::algos::train::Learner;
use uas_core::envs::proposition::brute_force_shared_optimum;
use uas_core::envs::{EpisodeBatch, Environment, PropositionConfig, PropositionGame, Skirmish, SkirmishConfig};
use uas_core::harness::plot;
use uas_core::harness::{run, run_suite, Algorithm, ExperimentConfig, Family, RunRecord, Selection, Suite, SuiteReport};

type Verdict = Result<String, String>;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Runs one criterion, turning panics into failures, and prints its line.
fn criterion(id: &str, title: &str, f: impl FnOnce() -> Verdict) -> bool {
    let t0 = Instant::now();
    let verdict = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(v) => v,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    };
    let secs = t0.elapsed().as_secs_f64();
    let (tag, detail) = match &verdict {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("{tag} criterion {id} ({title}): {detail} [{secs:.1}s]");
    verdict.is_ok()
}

fn suite(s: Suite) -> SuiteReport {
    run_suite(s).unwrap()
}

fn describe(r: &SuiteReport) -> String {
    r.checks
        .iter()
        .map(|c| format!("{}={:.3e}/{:.0e}", c.name, c.measured, c.tolerance))
        .collect::<Vec<_>>()
        .join(", ")
}

fn within(t0: Instant, limit: Duration) -> bool {
    t0.elapsed() < limit
}

fn config(body: &str, out: &Path) -> ExperimentConfig {
    ExperimentConfig::from_toml(&format!("output_dir = {:?}\n{body}", out.display().to_string())).unwrap()
}

fn read_metrics(r: &RunRecord) -> Vec<MetricsRecord> {
    std::fs::read_to_string(&r.metrics_path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn digest(path: &Path) -> String {
    Sha256::digest(std::fs::read(path).unwrap()).iter().map(|b| format!("{b:02x}")).collect()
}

fn proposition_oracle() -> Verdict {
    let t0 = Instant::now();
    let report = suite(Suite::Proposition);
    // Independent closed form: every one of the 2N agents must land on its
    // own rewarded action, each with probability at most rho / N.
    let (n, rho) = (2.0f64, 1.0f64);
    let closed = (rho / n).powf(2.0 * n);
    let bf = brute_force_shared_optimum(2, 4, 6, 60).unwrap();
    let gap = (bf.max_reward - closed).abs();
    let fast = within(t0, Duration::from_secs(60));
    check(
        report.passed && gap < 1e-3 && fast,
        format!("brute force {:.6} vs {closed}, gap {gap:.1e}; {}", bf.max_reward, describe(&report)),
    )
}

fn gradients() -> Verdict {
    let t0 = Instant::now();
    let report = suite(Suite::Gradcheck);
    let worst = report
        .checks
        .iter()
        .max_by(|a, b| a.measured.total_cmp(&b.measured))
        .unwrap();
    let shape_ok = report.checks.iter().all(|c| c.fixtures == 20 && c.tolerance == 1e-4);
    let fast = within(t0, Duration::from_secs(300));
    let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    check(
        report.passed && shape_ok && fast,
        format!(
            "{} checks x 20 fixtures, worst {} = {:.2e}{}",
            report.checks.len(),
            worst.name,
            worst.measured,
            if failed.is_empty() { String::new() } else { format!("; failed: {}", failed.join(", ")) }
        ),
    )
}

fn igm() -> Verdict {
    let r = suite(Suite::Igm);
    let c = r.check("joint_argmax_mismatches").unwrap();
    check(
        r.passed && c.fixtures == 100 && c.measured == 0.0,
        format!("{}/{} draws consistent over 125 joint actions", c.fixtures - c.measured as usize, c.fixtures),
    )
}

fn masks() -> Verdict {
    let r = suite(Suite::Masks);
    let instances = ["renormalization", "unavailable_mass", "idempotence", "cross_group_independence"]
        .iter()
        .all(|n| r.check(n).is_some_and(|c| c.fixtures == 1000));
    let samples = r.check("illegal_samples").is_some_and(|c| c.fixtures == 10_000);
    check(r.passed && instances && samples, describe(&r))
}

const PROPOSITION_LEARNING: &str = r#"
seeds = [0, 1, 2, 3, 4]
[env]
kind = "proposition"
proposition = { n = 2, a0 = 4, a1 = 6, obs_mode = "id" }
[algo]
algorithms = ["u-qmix", "u-mappo"]
[train]
total_steps = 50000
eval_interval = 1000
eval_episodes = 32
stop_at_return = 0.9
"#;

fn proposition_baseline(steps: u64) -> String {
    format!(
        r#"
seeds = [0, 1, 2, 3, 4]
[env]
kind = "proposition"
proposition = {{ n = 2, a0 = 4, a1 = 6, obs_mode = "blind" }}
[algo]
algorithms = ["qmix", "mappo"]
[train]
total_steps = {steps}
eval_interval = 1000
eval_episodes = 32
"#
    )
}

/// The unified learners solve the proposition game and the shared blind
/// baseline stays at the shared-policy ceiling.
fn proposition_learning(baseline_steps: u64) -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(PROPOSITION_LEARNING, dir.path());
    let records = run(&cfg, &Selection::default()).unwrap();
    let mut solved = Vec::new();
    for algo in ["u-qmix", "u-mappo"] {
        let k = records
            .iter()
            .filter(|r| r.algorithm.to_string() == algo)
            .filter(|r| {
                read_metrics(r)
                    .iter()
                    .any(|m| m.step <= 50_000 && m.eval_return.is_some_and(|v| v >= 0.9))
            })
            .count();
        solved.push((algo, k));
    }
    let base = config(&proposition_baseline(baseline_steps), dir.path());
    let base_records = run(&base, &Selection::default()).unwrap();
    let ceiling = 0.0625 + 0.02;
    let peak = base_records
        .iter()
        .flat_map(|r| read_metrics(r).into_iter().filter_map(|m| m.eval_return))
        .fold(f64::NEG_INFINITY, f64::max);
    let ok = solved.iter().all(|&(_, k)| k >= 4) && peak <= ceiling && base_records.iter().all(|r| r.completed());
    check(
        ok,
        format!(
            "seeds reaching 0.9 within 50k steps: {}; baseline peak eval return {peak:.4} over {baseline_steps} steps (ceiling {ceiling})",
            solved.iter().map(|(a, k)| format!("{a} {k}/5")).collect::<Vec<_>>().join(", ")
        ),
    )
}

const SKIRMISH: &str = r#"
seeds = [0, 1, 2, 3, 4]
[env]
kind = "skirmish"
[algo]
algorithms = ["u-qmix", "qmix"]
[train]
total_steps = 200000
eval_interval = 10000
eval_episodes = 32
"#;

fn skirmish_ordering() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let records = run(&config(SKIRMISH, dir.path()), &Selection::default()).unwrap();
    let mean_wr = |algo: &str| {
        let wr: Vec<f64> = records
            .iter()
            .filter(|r| r.algorithm.to_string() == algo)
            .map(|r| r.final_eval.as_ref().map_or(0.0, |e| e.win_rate))
            .collect();
        wr.iter().sum::<f64>() / wr.len() as f64
    };
    let (u, base) = (mean_wr("u-qmix"), mean_wr("qmix"));
    check(
        u - base >= 0.15,
        format!("final WR u-qmix {u:.3} vs qmix {base:.3}, margin {:.3} (need 0.15)", u - base),
    )
}

const ABLATION: &str = r#"
seeds = [0]
[env]
kind = "skirmish"
skirmish = { width = 8, height = 8, n_attackers = 2, n_healers = 1, n_enemies = 2, episode_limit = 20 }
[algo]
qmix = { buffer_size = 64, batch_size = 4 }
mappo = { episodes_per_update = 2 }
[train]
total_steps = 400
eval_interval = 200
eval_episodes = 4
"#;

fn small_skirmish() -> Skirmish {
    let cfg = SkirmishConfig {
        width: 8,
        height: 8,
        n_attackers: 2,
        n_healers: 1,
        n_enemies: 2,
        episode_limit: 10,
    };
    Skirmish::new(cfg, LayoutKind::Unified).unwrap()
}

fn rollouts(env: &mut dyn Environment, learner: &dyn Learner, sel: ActionSelection) -> Vec<EpisodeBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut counters = Instrumentation::default();
    (0..3)
        .map(|s| {
            let kind = learner.output_kind();
            run_episode(env, learner.net(), learner.params(), s, kind, sel, &mut rng, &mut counters).unwrap()
        })
        .collect()
}

fn ablation() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let algos: Vec<String> = [Family::Qmix, Family::Mappo]
        .into_iter()
        .flat_map(Algorithm::ablation_matrix)
        .map(|a| format!("{:?}", a.to_string()))
        .collect();
    let body = ABLATION.replace("[algo]", &format!("[algo]\nalgorithms = [{}]", algos.join(", ")));
    let cfg = config(&body, dir.path());
    let records = run(&cfg, &Selection::default()).unwrap();
    let out = dir.path().join("plots");
    let files = plot::export(&[cfg.run_root()], &out).unwrap();
    let mut names: Vec<String> = files
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    names.sort();
    let mut expected: Vec<String> = ["mappo", "mappo+cgi", "mappo+uas", "u-mappo", "qmix", "qmix+cgi", "qmix+uas", "u-qmix"]
        .iter()
        .flat_map(|l| [format!("{l}_eval_return.csv"), format!("{l}_eval_wr.csv")])
        .collect();
    expected.sort();
    let separable = names == expected && records.iter().all(|r| r.completed());

    // Zero inverse coefficient: the term never enters the graph.
    let mut env = small_skirmish();
    let hp = UMappoHyperparameters {
        lambda_i: 0.0,
        ..Default::default()
    };
    let mut m = UMappo::new(&env, hp, AblationFlags::FULL, false, 3).unwrap();
    let eps = rollouts(&mut env, &m, ActionSelection::Sample);
    let fx = m.prepare(&eps).unwrap();
    let mut g = m.loss_graph(&fx).unwrap();
    let mappo_absent = g.cgi.is_none() && !g.tape.scope_reaches(g.total, CGI_SCOPE);
    let grads = g.gradients(f64::INFINITY).unwrap();
    let predictor_silent = grads
        .iter()
        .filter(|(n, _)| n.starts_with("predictor."))
        .all(|(_, t)| t.squared_norm() == 0.0);
    let hp = UQmixHyperparameters {
        lambda_i: 0.0,
        ..Default::default()
    };
    let mut q = UQmix::new(&env, hp, AblationFlags::FULL, false, 3).unwrap();
    let eps = rollouts(&mut env, &q, ActionSelection::EpsilonGreedy(0.5));
    let refs: Vec<&EpisodeBatch> = eps.iter().collect();
    let g = q.loss_graph(&refs).unwrap();
    let qmix_absent = g.cgi.is_none() && !g.tape.scope_reaches(g.total, CGI_SCOPE);
    let never_built = m.counters().cgi_evaluations == 0 && q.counters().cgi_evaluations == 0;

    check(
        separable && mappo_absent && predictor_silent && qmix_absent && never_built,
        format!(
            "{} curve files from one matrix; λ_I = 0 leaves no inverse term on either tape (mappo {mappo_absent}, qmix {qmix_absent}, predictor gradients zero {predictor_silent})",
            names.len()
        ),
    )
}

fn schedules() -> Verdict {
    let q = UQmixHyperparameters::default();
    let m = UMappoHyperparameters::default();
    let eps = EpsilonSchedule {
        start: q.eps_start,
        end: q.eps_end,
        steps: q.eps_anneal_steps,
    };
    let schedule_ok = eps.at(0) == 1.0 && eps.at(50_000) == 0.05 && eps.at(200_000) == 0.05;
    let coeffs_ok = m.lambda_e == 0.01
        && m.lambda_v == 1.0
        && m.lambda_i == 0.8
        && q.lambda_i == 0.06
        && m.lr == 5e-4
        && q.lr == 3e-4
        && q.buffer_size == 5000
        && q.batch_size == 32;

    // A live learner on one-step episodes: updates start with the 32nd
    // episode and the buffer never holds more than 5000.
    let mut env = PropositionGame::new(PropositionConfig::default(), LayoutKind::Unified).unwrap();
    let mut learner = UQmix::new(&env, q, AblationFlags::FULL, false, 0).unwrap();
    let start_eps = learner.epsilon();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut first_update = None;
    let mut peak = 0;
    for k in 1..=5_100u64 {
        let rec = learner.iterate(&mut env, &mut rng).unwrap();
        if first_update.is_none() && rec.loss_total.is_some() {
            first_update = Some(k);
        }
        peak = peak.max(learner.buffer().len());
    }
    let live_ok = start_eps == 1.0
        && first_update == Some(32)
        && peak == 5000
        && learner.buffer().capacity() == 5000
        && learner.counters().updates == 5_100 - 31;
    check(
        schedule_ok && coeffs_ok && live_ok,
        format!(
            "ε(0) = {}, ε(50000) = {}, first update at episode {first_update:?}, buffer peak {peak}, coefficients {}",
            eps.at(0),
            eps.at(50_000),
            if coeffs_ok { "exact" } else { "differ" }
        ),
    )
}

const REPRO: &str = r#"
seeds = [4]
[env]
kind = "skirmish"
skirmish = { width = 8, height = 8, n_attackers = 2, n_healers = 1, n_enemies = 2, episode_limit = 20 }
[algo]
algorithms = ["u-qmix", "u-mappo"]
qmix = { buffer_size = 64, batch_size = 4 }
mappo = { episodes_per_update = 2 }
[train]
total_steps = 600
eval_interval = 200
eval_episodes = 4
"#;

fn reproducibility() -> Verdict {
    let hashes = || {
        let dir = tempfile::tempdir().unwrap();
        let records = run(&config(REPRO, dir.path()), &Selection::default()).unwrap();
        records.iter().map(|r| digest(&r.metrics_path)).collect::<Vec<_>>()
    };
    let (a, b) = (hashes(), hashes());
    check(
        a == b && a.len() == 2,
        format!("{} metrics files rehashed identically: {}", a.len(), a.iter().map(|h| &h[..12]).collect::<Vec<_>>().join(", ")),
    )
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let long = args.iter().any(|a| a == "--ignored" || a == "--include-ignored");
    let mut ok = true;
    ok &= criterion("1", "proposition optimum", proposition_oracle);
    ok &= criterion("2", "gradient correctness", gradients);
    ok &= criterion("3", "IGM consistency", igm);
    ok &= criterion("4", "mask algebra", masks);
    if long {
        ok &= criterion("5a", "proposition learning", || proposition_learning(50_000));
        ok &= criterion("5b", "skirmish ordering", skirmish_ordering);
    } else {
        ok &= criterion("5a", "proposition learning", || proposition_learning(5_000));
        println!("SKIP criterion 5b (skirmish ordering): multi-hour; run with --ignored");
    }
    ok &= criterion("6", "ablation contract", ablation);
    ok &= criterion("7", "schedules and defaults", schedules);
    ok &= criterion("8", "reproducibility", reproducibility);
    if !ok {
        std::process::exit(1);
    }
}
