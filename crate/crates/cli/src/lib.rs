//! Experiment runner behind the `varmatch` binary: dataset generation,
//! training, evaluation, gradient surfaces and sweeps. Every command is a
//! function of the config file, the flags and the seed.

pub mod cli;
pub mod commands;
pub mod config;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::Context;
use serde::Serialize;
use varmatch::evaluation::EvalReport;
use varmatch::model::Backend;
use varmatch::scenes::{generate_dataset, read_jsonl, write_jsonl, Scene, Split};
use varmatch::trainer::{evaluate_model, init_model, train, Dataset, TrainLog, TrainState};

pub use config::ExperimentConfig;

/// Bad flags, config or inputs; maps to exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// 1 for usage and configuration errors, 2 for runtime and numerical ones.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    match err.downcast_ref::<varmatch::Error>() {
        Some(
            varmatch::Error::InvalidConfig(_)
            | varmatch::Error::InfeasibleOcclusion(_)
            | varmatch::Error::StrideMismatch { .. }
            | varmatch::Error::EncodingKindMismatch
            | varmatch::Error::SceneNotAllocated { .. },
        ) => 1,
        _ => 2,
    }
}

pub const TRAIN_FILE: &str = "train.jsonl";
pub const EVAL_FILE: &str = "eval.jsonl";

#[derive(Clone, Debug, PartialEq)]
pub struct Datasets {
    pub train: Vec<Scene>,
    pub eval: Vec<Scene>,
}

impl Datasets {
    pub fn generate(cfg: &ExperimentConfig) -> varmatch::Result<Datasets> {
        Ok(Datasets {
            train: generate_dataset(&cfg.scene, cfg.data.n_train, cfg.seed, Split::Train)?,
            eval: generate_dataset(&cfg.scene, cfg.data.n_eval, cfg.seed, Split::Eval)?,
        })
    }

    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        write_jsonl(&dir.join(TRAIN_FILE), &self.train)?;
        write_jsonl(&dir.join(EVAL_FILE), &self.eval)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> anyhow::Result<Datasets> {
        let read = |name: &str| -> anyhow::Result<Vec<Scene>> {
            let path = dir.join(name);
            if !path.exists() {
                return Err(UsageError(format!(
                    "dataset file {} not found; run `varmatch gen` first",
                    path.display()
                ))
                .into());
            }
            Ok(read_jsonl(&path)?)
        };
        Ok(Datasets { train: read(TRAIN_FILE)?, eval: read(EVAL_FILE)? })
    }
}

/// Scene count per band label.
pub fn band_histogram(scenes: &[Scene]) -> BTreeMap<String, usize> {
    let mut h = BTreeMap::new();
    for s in scenes {
        *h.entry(s.band.to_string()).or_insert(0) += 1;
    }
    h
}

/// Training data and the scenes each epoch is evaluated on. `TABLE` models
/// have rows only for training scenes, so they are evaluated there.
pub fn prepare(cfg: &ExperimentConfig, sets: &Datasets) -> anyhow::Result<(Dataset, Dataset)> {
    let data = Dataset::prepare(&sets.train, &cfg.model, cfg.train.bag_size)?;
    let eval = match cfg.model.backend {
        Backend::Table => data.clone(),
        Backend::Linear => {
            if sets.eval.is_empty() {
                return Err(UsageError("the eval split is empty".into()).into());
            }
            Dataset::prepare(&sets.eval, &cfg.model, cfg.train.bag_size)?
        }
    };
    Ok((data, eval))
}

/// Runs the remaining epochs one at a time, calling `after_epoch` after each.
pub fn run_training(
    cfg: &ExperimentConfig,
    data: &Dataset,
    eval: &Dataset,
    state: &mut TrainState,
    mut after_epoch: impl FnMut(&TrainState) -> anyhow::Result<()>,
) -> anyhow::Result<()> {
    while state.epoch < cfg.train.epochs {
        let upto = varmatch::trainer::TrainConfig { epochs: state.epoch + 1, ..cfg.train.clone() };
        train(state, data, Some(eval), &upto, &cfg.eval)?;
        after_epoch(state)?;
    }
    Ok(())
}

pub struct RunOutput {
    pub state: TrainState,
    pub report: EvalReport,
    pub wall_time_s: f64,
}

/// Fresh training run followed by evaluation of the final model.
pub fn run_experiment(cfg: &ExperimentConfig, sets: &Datasets) -> anyhow::Result<RunOutput> {
    let start = std::time::Instant::now();
    let (data, eval) = prepare(cfg, sets)?;
    let mut state = TrainState::new(init_model(&data, &cfg.model)?);
    run_training(cfg, &data, &eval, &mut state, |_| Ok(()))?;
    let report = evaluate_model(&state.model, &eval, &cfg.eval)?;
    Ok(RunOutput { state, report, wall_time_s: start.elapsed().as_secs_f64() })
}

/// Per-epoch CSV: loss terms averaged over the epoch's steps, sigma
/// summaries and eval metrics.
pub fn metrics_csv(log: &TrainLog) -> String {
    let mut out = String::from(
        "epoch,lr,mean_loss,kl,weighted_log_pos,weighted_log_neg,sigma_foreground,sigma_bag,sigma_background,sigma_all,eval_mr,eval_ap\n",
    );
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for e in &log.epochs {
        let steps: Vec<_> = log.steps.iter().filter(|s| s.epoch == e.epoch).collect();
        let n = steps.len().max(1) as f64;
        let mean = |f: &dyn Fn(&varmatch::trainer::StepRecord) -> f64| steps.iter().map(|s| f(s)).sum::<f64>() / n;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            e.epoch,
            e.lr,
            e.mean_loss,
            mean(&|s| s.kl),
            mean(&|s| s.weighted_log_pos),
            mean(&|s| s.weighted_log_neg),
            e.sigma.foreground,
            e.sigma.bag,
            e.sigma.background,
            e.sigma.all,
            opt(e.eval_mr),
            opt(e.eval_ap),
        );
    }
    out
}

/// Pretty JSON with a trailing newline.
pub fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
