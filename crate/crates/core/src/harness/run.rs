//! Seeded multi-run orchestration, metrics persistence, checkpoints and
//! checkpoint evaluation.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::config::{Algorithm, ExperimentConfig, Family};
use crate::algos::mappo::UMappo;
use crate::algos::metrics::{MetricsRecord, Observer};
use crate::algos::qmix::UQmix;
use crate::action_space::SemanticAction;
use crate::algos::rollout::{evaluate, EvalResult, GreedyPolicy};
use crate::algos::train::{eval_seeds, run_training, Learner};
use crate::envs::{Environment, TimeStep};
use crate::error::{Error, Result};
use crate::grad::{checkpoint, ParameterSet};
use crate::nets::NetConfig;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_COPY: &str = "config.toml";

/// A learner with its training and evaluation environments.
pub struct Trial {
    pub learner: Box<dyn Learner>,
    pub env: Box<dyn Environment>,
    pub eval_env: Box<dyn Environment>,
}

/// Builds the learner for one (algorithm, seed) of a configuration.
pub fn build_trial(cfg: &ExperimentConfig, algo: Algorithm, seed: u64) -> Result<Trial> {
    let layout = algo.flags.layout();
    let env = cfg.env.build(layout)?;
    let eval_env = cfg.env.build(layout)?;
    let agent_id = cfg.env.agent_id(layout);
    let learner: Box<dyn Learner> = match algo.family {
        Family::Mappo => Box::new(UMappo::new(env.as_ref(), cfg.algo.mappo.clone(), algo.flags, agent_id, seed)?),
        Family::Qmix => Box::new(UQmix::new(env.as_ref(), cfg.algo.qmix.clone(), algo.flags, agent_id, seed)?),
    };
    Ok(Trial {
        learner,
        env,
        eval_env,
    })
}

/// JSON stored in every checkpoint header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub algorithm: Algorithm,
    pub net: NetConfig,
    pub config_hash: String,
    pub seed: u64,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "state", rename_all = "lowercase")]
pub enum RunStatus {
    Completed,
    Failed { error: String },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub algorithm: Algorithm,
    pub seed: u64,
    pub metrics_path: PathBuf,
    pub checkpoint_paths: Vec<PathBuf>,
    pub wall_clock_secs: f64,
    pub status: RunStatus,
    pub env_steps: u64,
    pub final_eval: Option<EvalResult>,
}

impl RunRecord {
    pub fn completed(&self) -> bool {
        self.status == RunStatus::Completed
    }
}

/// Directory of one (algorithm, seed) run.
pub fn run_dir(root: &Path, algo: Algorithm, seed: u64) -> PathBuf {
    root.join(algo.to_string()).join(format!("seed-{seed}"))
}

/// Writes one JSON line per record and checkpoint files on request.
struct RunObserver {
    metrics: BufWriter<File>,
    metrics_path: PathBuf,
    dir: PathBuf,
    header: CheckpointHeader,
    checkpoints: Vec<PathBuf>,
}

impl RunObserver {
    fn create(dir: &Path, header: CheckpointHeader) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let metrics_path = dir.join(METRICS_FILE);
        let file = File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
        Ok(Self {
            metrics: BufWriter::new(file),
            metrics_path,
            dir: dir.to_path_buf(),
            header,
            checkpoints: Vec::new(),
        })
    }

    fn save(&mut self, name: &str, step: u64, params: &ParameterSet) -> Result<()> {
        let path = self.dir.join(name);
        self.header.step = step;
        checkpoint::save(&path, &serde_json::to_string(&self.header)?, params)?;
        self.checkpoints.push(path);
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        self.metrics.flush().map_err(|e| Error::io(&self.metrics_path, e))
    }
}

impl Observer for RunObserver {
    fn record(&mut self, record: &MetricsRecord) -> Result<()> {
        serde_json::to_writer(&mut self.metrics, record)?;
        self.metrics
            .write_all(b"\n")
            .map_err(|e| Error::io(&self.metrics_path, e))
    }

    fn checkpoint(&mut self, step: u64, params: &ParameterSet) -> Result<()> {
        self.save(&format!("step-{step}.ckpt"), step, params)
    }
}

/// Trains one (algorithm, seed). Numerical or runtime failures during
/// training produce a failed record; setup errors are returned.
pub fn run_one(cfg: &ExperimentConfig, algo: Algorithm, seed: u64) -> Result<RunRecord> {
    let hash = cfg.hash();
    let dir = run_dir(&cfg.run_root(), algo, seed);
    let mut trial = build_trial(cfg, algo, seed)?;
    let header = CheckpointHeader {
        algorithm: algo,
        net: trial.learner.net().clone(),
        config_hash: hash.clone(),
        seed,
        step: 0,
    };
    let mut obs = RunObserver::create(&dir, header)?;
    let start = Instant::now();
    info!("training {algo} seed {seed} -> {}", dir.display());
    let outcome = run_training(
        trial.learner.as_mut(),
        trial.env.as_mut(),
        trial.eval_env.as_mut(),
        &cfg.train,
        seed,
        &mut obs,
    );
    obs.flush()?;
    let steps = trial.learner.counters().env_steps;
    let (status, final_eval) = match outcome {
        Ok(summary) => {
            obs.save("final.ckpt", steps, trial.learner.params())?;
            (RunStatus::Completed, summary.final_eval().cloned())
        }
        Err(e) => {
            warn!("{algo} seed {seed} failed at step {steps}: {e}");
            (RunStatus::Failed { error: e.to_string() }, None)
        }
    };
    Ok(RunRecord {
        config_hash: hash,
        algorithm: algo,
        seed,
        metrics_path: obs.metrics_path.clone(),
        checkpoint_paths: std::mem::take(&mut obs.checkpoints),
        wall_clock_secs: start.elapsed().as_secs_f64(),
        status,
        env_steps: steps,
        final_eval,
    })
}

/// Mean and sample standard deviation of final evaluations over the
/// completed seeds of one algorithm.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FinalStats {
    pub algorithm: Algorithm,
    pub completed: usize,
    pub return_mean: f64,
    pub return_std: f64,
    pub win_rate_mean: f64,
    pub win_rate_std: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}

pub fn final_stats(records: &[RunRecord]) -> Vec<FinalStats> {
    let mut algos: Vec<Algorithm> = Vec::new();
    for r in records {
        if !algos.contains(&r.algorithm) {
            algos.push(r.algorithm);
        }
    }
    algos
        .into_iter()
        .map(|a| {
            let evals: Vec<&EvalResult> = records
                .iter()
                .filter(|r| r.algorithm == a)
                .filter_map(|r| r.final_eval.as_ref())
                .collect();
            let rets: Vec<f64> = evals.iter().map(|e| e.mean_return).collect();
            let wrs: Vec<f64> = evals.iter().map(|e| e.win_rate).collect();
            let (return_mean, return_std) = mean_std(&rets);
            let (win_rate_mean, win_rate_std) = mean_std(&wrs);
            FinalStats {
                algorithm: a,
                completed: evals.len(),
                return_mean,
                return_std,
                win_rate_mean,
                win_rate_std,
            }
        })
        .collect()
}

#[derive(Serialize)]
struct Summary<'a> {
    config_hash: &'a str,
    runs: &'a [RunRecord],
    final_stats: Vec<FinalStats>,
}

/// Restricts a run to some algorithms or seeds, e.g. one worker process per
/// seed.
#[derive(Clone, Debug, Default)]
pub struct Selection {
    pub algorithms: Option<Vec<Algorithm>>,
    pub seeds: Option<Vec<u64>>,
}

/// Trains every selected (algorithm, seed) pair in order, then writes the
/// config copy and a summary next to the runs.
pub fn run(cfg: &ExperimentConfig, select: &Selection) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    let algos: Vec<Algorithm> = match &select.algorithms {
        Some(only) => {
            if let Some(a) = only.iter().find(|a| !cfg.algo.algorithms.contains(a)) {
                return Err(Error::Config(format!("{a} is not in algo.algorithms")));
            }
            only.clone()
        }
        None => cfg.algo.algorithms.clone(),
    };
    let seeds: Vec<u64> = match &select.seeds {
        Some(only) => {
            if let Some(s) = only.iter().find(|s| !cfg.seeds.contains(s)) {
                return Err(Error::Config(format!("seed {s} is not in seeds")));
            }
            only.clone()
        }
        None => cfg.seeds.clone(),
    };
    let root = cfg.run_root();
    std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let copy = root.join(CONFIG_COPY);
    let text = toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(&copy, text).map_err(|e| Error::io(&copy, e))?;

    let mut records = Vec::new();
    for &a in &algos {
        for &s in &seeds {
            records.push(run_one(cfg, a, s)?);
        }
    }
    let summary = Summary {
        config_hash: &cfg.hash(),
        runs: &records,
        final_stats: final_stats(&records),
    };
    let path = root.join(SUMMARY_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&summary)?).map_err(|e| Error::io(&path, e))?;
    Ok(records)
}

/// Greedy evaluation of a saved checkpoint on the configured environment.
/// The checkpoint's architecture must match what the configuration builds.
pub fn evaluate_checkpoint(path: &Path, cfg: &ExperimentConfig, episodes: usize) -> Result<EvalResult> {
    if episodes == 0 {
        return Err(Error::Config("episodes must be positive".into()));
    }
    let (raw, params) = checkpoint::load(path)?;
    let header: CheckpointHeader =
        serde_json::from_str(&raw).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.config_hash != cfg.hash() {
        warn!("checkpoint was trained under config {}", &header.config_hash[..12]);
    }
    let layout = header.algorithm.flags.layout();
    let mut env = cfg.env.build(layout)?;
    let net = &header.net;
    let expected = (
        env.obs_dim(),
        env.state_dim(),
        env.action_space().size(),
        env.n_agents(),
        cfg.env.agent_id(layout),
    );
    let got = (net.obs_dim, net.state_dim, net.n_actions, net.n_agents, net.agent_id);
    if expected != got {
        return Err(Error::Checkpoint(format!(
            "architecture (obs, state, actions, agents, agent_id) = {got:?} does not match the environment's {expected:?}"
        )));
    }
    net.check(&params)
        .map_err(|e| Error::Checkpoint(format!("parameters do not match header: {e}")))?;
    evaluate(env.as_mut(), net, &params, &eval_seeds(header.seed, episodes))
}

/// The optimal proposition-game policy written out by hand: every agent
/// picks the action of its group whose index equals its within-group id,
/// read from an id observation.
pub struct PropositionScript {
    space: crate::action_space::UnifiedActionSpace,
    n: usize,
}

impl PropositionScript {
    pub fn new(game: &crate::envs::PropositionGame) -> Result<Self> {
        if game.config().obs_mode == crate::envs::ObsMode::Blind {
            return Err(Error::Config("the scripted policy needs id observations".into()));
        }
        Ok(Self {
            space: game.action_space().clone(),
            n: game.config().n,
        })
    }
}

impl GreedyPolicy for PropositionScript {
    fn begin(&mut self, _first: &TimeStep) -> Result<()> {
        Ok(())
    }

    fn act(&mut self, ts: &TimeStep) -> Result<Vec<usize>> {
        ts.obs
            .iter()
            .enumerate()
            .map(|(agent, o)| {
                let id = o[..self.n]
                    .iter()
                    .position(|&x| x == 1.0)
                    .ok_or_else(|| Error::contract("proposition_script", "observation carries no id"))?;
                let g = self.space.group_index_of(agent);
                self.space
                    .encode(g, SemanticAction::Choice(id))
                    .ok_or_else(|| Error::contract("proposition_script", "id outside the group's actions"))
            })
            .collect()
    }
}
