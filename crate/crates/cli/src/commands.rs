use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use varmatch::estimators::{default_kink_slices, default_surface_axes, expected_iou_surface, kink_jump, Axis};
use varmatch::evaluation::{evaluate_detections, Detection, EvalReport};
use varmatch::geometry::EncodingKind;
use varmatch::model::Backend;
use varmatch::scenes::Scene;
use varmatch::trainer::{evaluate_model, init_model, Checkpoint, Dataset, TrainLog, TrainState};

use crate::cli::*;
use crate::{
    band_histogram, metrics_csv, prepare, run_experiment, run_training, write_json, write_text, Datasets,
    ExperimentConfig, UsageError,
};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";

/// Resolved configuration and output directory of one invocation.
pub struct Env {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
}

impl Env {
    pub fn new(cli: &Cli) -> anyhow::Result<Env> {
        let mut cfg = match &cli.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = cli.seed {
            cfg.set_seed(s);
        }
        Ok(Env { cfg, out: cli.out.clone() })
    }

    fn finish(&self) -> anyhow::Result<String> {
        self.cfg.validate()?;
        std::fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        Ok(self.cfg.hash())
    }

    fn write_config(&self, name: &str) -> anyhow::Result<()> {
        write_text(&self.out.join(name), &self.cfg.to_toml())
    }
}

pub fn apply_scene(cfg: &mut ExperimentConfig, o: &SceneOverrides) -> anyhow::Result<()> {
    if let Some(b) = &o.band {
        cfg.scene.band = b.parse().map_err(|e: varmatch::Error| UsageError(e.to_string()))?;
    }
    if let Some(c) = &o.canvas {
        cfg.scene.canvas = [c[0], c[1]];
    }
    if let Some(n) = o.n_train {
        cfg.data.n_train = n;
    }
    if let Some(n) = o.n_eval {
        cfg.data.n_eval = n;
    }
    Ok(())
}

pub fn apply_train(cfg: &mut ExperimentConfig, o: &TrainOverrides) -> anyhow::Result<()> {
    if let Some(v) = o.alpha {
        cfg.train.alpha = v;
    }
    if let Some(v) = o.sigma_clamp_max {
        cfg.model.log_sigma_max = v;
    }
    if let Some(v) = o.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = o.samples {
        cfg.train.samples = v;
    }
    if let Some(v) = o.bag_size {
        cfg.train.bag_size = v;
    }
    if let Some(v) = o.lr {
        cfg.train.lr = v;
    }
    if let Some(b) = &o.backend {
        cfg.model.backend = b.parse::<Backend>().map_err(|e| UsageError(e.to_string()))?;
    }
    Ok(())
}

pub fn run(cli: &Cli) -> anyhow::Result<()> {
    let mut env = Env::new(cli)?;
    match &cli.command {
        Command::Gen(a) => {
            apply_scene(&mut env.cfg, &a.scene)?;
            cmd_gen(&env)
        }
        Command::Train(a) => {
            apply_train(&mut env.cfg, &a.train)?;
            cmd_train(&env, a.data.as_deref(), a.resume)
        }
        Command::Eval(a) => cmd_eval(&env, a),
        Command::Gradmap(a) => cmd_gradmap(&env, a),
        Command::Sweep(a) => {
            apply_train(&mut env.cfg, &a.train)?;
            cmd_sweep(&env, a)
        }
    }
}

#[derive(Serialize)]
struct GenManifest {
    config_hash: String,
    seed: u64,
    n_train: usize,
    n_eval: usize,
    bands_train: std::collections::BTreeMap<String, usize>,
    bands_eval: std::collections::BTreeMap<String, usize>,
}

pub fn cmd_gen(env: &Env) -> anyhow::Result<()> {
    let hash = env.finish()?;
    let sets = Datasets::generate(&env.cfg)?;
    sets.write(&env.out)?;
    let manifest = GenManifest {
        config_hash: hash,
        seed: env.cfg.seed,
        n_train: sets.train.len(),
        n_eval: sets.eval.len(),
        bands_train: band_histogram(&sets.train),
        bands_eval: band_histogram(&sets.eval),
    };
    write_json(&env.out.join("gen_manifest.json"), &manifest)?;
    env.write_config("gen_config.toml")?;
    println!("wrote {} scenes ({} train, {} eval) to {}", sets.train.len() + sets.eval.len(), sets.train.len(), sets.eval.len(), env.out.display());
    for (band, n) in band_histogram(&sets.train.iter().chain(&sets.eval).cloned().collect::<Vec<_>>()) {
        println!("  {band}: {n}");
    }
    Ok(())
}

#[derive(Serialize)]
struct LogFile<'a> {
    config_hash: &'a str,
    log: &'a TrainLog,
}

#[derive(Serialize)]
struct Diagnostic<'a> {
    config_hash: &'a str,
    step: u64,
    scene: usize,
    anchor: Option<usize>,
    detail: &'a str,
}

fn load_resumable(path: &Path, hash: &str, fresh: &TrainState) -> anyhow::Result<TrainState> {
    let ck = Checkpoint::load(path)?;
    if ck.config_hash != hash {
        eprintln!("warning: checkpoint config hash {} differs from the current config {hash}", ck.config_hash);
    }
    let m = &ck.state.model;
    if m.backend != fresh.model.backend || m.params.len() != fresh.model.params.len() || m.patch != fresh.model.patch {
        return Err(UsageError(format!("checkpoint {} does not match the configured model", path.display())).into());
    }
    Ok(ck.state)
}

pub fn cmd_train(env: &Env, data_dir: Option<&Path>, resume: bool) -> anyhow::Result<()> {
    let hash = env.finish()?;
    let sets = Datasets::read(data_dir.unwrap_or(&env.out))?;
    let (data, eval) = prepare(&env.cfg, &sets)?;
    let fresh = TrainState::new(init_model(&data, &env.cfg.model)?);
    let ck_path = env.out.join(CHECKPOINT_FILE);
    let mut state = if resume && ck_path.exists() { load_resumable(&ck_path, &hash, &fresh)? } else { fresh };
    env.write_config("train_config.toml")?;
    let epochs = env.cfg.train.epochs;
    let result = run_training(&env.cfg, &data, &eval, &mut state, |st| {
        let e = st.log.epochs.last().expect("an epoch was recorded");
        eprintln!(
            "epoch {}/{epochs}  loss {:.5}  sigma fg {:.3} bg {:.3}  eval mr {:.4}  ({:.1} s)",
            e.epoch + 1,
            e.mean_loss,
            e.sigma.foreground,
            e.sigma.background,
            e.eval_mr.unwrap_or(f64::NAN),
            e.wall_time_s
        );
        Checkpoint::new(&hash, st.clone()).save(&ck_path)?;
        Ok(())
    });
    if let Err(err) = result {
        if let Some(varmatch::Error::NonFiniteLoss { step, scene, anchor, detail }) = err.downcast_ref() {
            let d = Diagnostic { config_hash: &hash, step: *step, scene: *scene, anchor: *anchor, detail };
            write_json(&env.out.join("diagnostic.json"), &d)?;
        }
        return Err(err);
    }
    Checkpoint::new(&hash, state.clone()).save(&ck_path)?;
    write_json(&env.out.join("train_log.json"), &LogFile { config_hash: &hash, log: &state.log })?;
    write_text(&env.out.join("metrics.csv"), &metrics_csv(&state.log))?;
    let first = state.log.initial_eval_mr.unwrap_or(f64::NAN);
    let last = state.log.epochs.last().and_then(|e| e.eval_mr).unwrap_or(first);
    println!("trained {} epochs ({} steps); eval mr {first:.4} -> {last:.4}", state.epoch, state.step);
    Ok(())
}

#[derive(Serialize)]
struct EvalFile<'a> {
    config_hash: &'a str,
    split: &'a str,
    source: &'a str,
    report: &'a EvalReport,
}

pub fn cmd_eval(env: &Env, args: &EvalArgs) -> anyhow::Result<()> {
    let hash = env.finish()?;
    let sets = Datasets::read(args.data.as_deref().unwrap_or(&env.out))?;
    let (split_name, scenes): (&str, &[Scene]) = match args.split {
        SplitArg::Train => ("train", &sets.train),
        SplitArg::Eval => ("eval", &sets.eval),
    };
    if scenes.is_empty() {
        return Err(UsageError(format!("the {split_name} split is empty")).into());
    }
    let (source, report) = match &args.detections {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let dets: Vec<Vec<Detection>> =
                serde_json::from_str(&text).map_err(|e| UsageError(format!("{}: {e}", path.display())))?;
            if dets.len() != scenes.len() {
                return Err(UsageError(format!(
                    "{} holds {} detection lists for {} scenes",
                    path.display(),
                    dets.len(),
                    scenes.len()
                ))
                .into());
            }
            let refs: Vec<&Scene> = scenes.iter().collect();
            (path.display().to_string(), evaluate_detections(&dets, &refs, env.cfg.eval.match_iou)?)
        }
        None => {
            let path = args.checkpoint.clone().unwrap_or_else(|| env.out.join(CHECKPOINT_FILE));
            let ck = Checkpoint::load(&path)?;
            if ck.config_hash != hash {
                eprintln!("warning: checkpoint config hash {} differs from the current config {hash}", ck.config_hash);
            }
            let model = &ck.state.model;
            if model.backend == Backend::Table && args.split != SplitArg::Train {
                return Err(UsageError("a TABLE checkpoint can only be evaluated on --split train".into()).into());
            }
            let data = Dataset::prepare(scenes, &env.cfg.model, env.cfg.train.bag_size)?;
            if data.grid.len() != model.n_anchors {
                return Err(UsageError(format!(
                    "checkpoint has {} anchors, the configured grid {}",
                    model.n_anchors,
                    data.grid.len()
                ))
                .into());
            }
            (path.display().to_string(), evaluate_model(model, &data, &env.cfg.eval)?)
        }
    };
    write_json(
        &env.out.join("eval_report.json"),
        &EvalFile { config_hash: &hash, split: split_name, source: &source, report: &report },
    )?;
    write_text(&env.out.join("bands.csv"), &report.band_csv())?;
    write_text(&env.out.join("curve.csv"), &report.overall.curve_csv())?;
    println!("mr {:.4}  ap {:.4}  ({} scenes, {} gts)", report.overall.mr, report.overall.ap, report.overall.n_scenes, report.overall.n_gt);
    for (band, r) in &report.per_band {
        println!("  {band}: mr {:.4} ap {:.4} ({} gts)", r.mr, r.ap, r.n_gt);
    }
    Ok(())
}

#[derive(Serialize)]
struct GradmapManifest {
    config_hash: String,
    kind: EncodingKind,
    samples: usize,
    kink_samples: usize,
    fd_step: f64,
    files: Vec<String>,
    kink: Vec<varmatch::estimators::KinkJump>,
}

pub fn cmd_gradmap(env: &Env, args: &GradmapArgs) -> anyhow::Result<()> {
    let hash = env.finish()?;
    if args.sigmas.iter().any(|s| !(*s >= 0.0)) {
        return Err(UsageError("sigmas must be non-negative".into()).into());
    }
    let (kind, name) = match args.kind {
        KindArg::Fa => (EncodingKind::Fa, "fa"),
        KindArg::Fcos => (EncodingKind::Fcos, "fcos"),
    };
    let dir = env.out.join("gradmap");
    std::fs::create_dir_all(&dir)?;
    let axes = default_surface_axes(kind).map(|a| match args.resolution {
        Some(r) => Axis::new(&a.name, a.min, a.max, r),
        None => a,
    });
    let seed = env.cfg.seed;
    let mut files = Vec::new();
    let mut kink = Vec::new();
    let mut summary = String::from("sigma,max_jump\n");
    for &sigma in &args.sigmas {
        let surface = expected_iou_surface(kind, axes.clone(), sigma, args.samples, seed)?;
        let file = format!("{name}_sigma_{sigma}.csv");
        write_text(&dir.join(&file), &surface.to_csv())?;
        files.push(file);
        let jump = kink_jump(kind, sigma, &default_kink_slices(kind), args.kink_samples, seed, args.fd_step)?;
        let _ = writeln!(summary, "{sigma},{}", jump.max_jump);
        kink.push(jump);
    }
    let kink_file = format!("{name}_kink.csv");
    write_text(&dir.join(&kink_file), &summary)?;
    files.push(kink_file);
    let decreasing = kink.windows(2).all(|w| w[1].max_jump < w[0].max_jump);
    println!("{name} kink jump of the numerical derivative:");
    for k in &kink {
        println!("  sigma {:<6} max jump {:.5}", k.sigma, k.max_jump);
    }
    println!("  strictly decreasing in sigma: {}", if decreasing { "yes" } else { "no" });
    write_json(
        &env.out.join(format!("gradmap_{name}_manifest.json")),
        &GradmapManifest {
            config_hash: hash,
            kind,
            samples: args.samples,
            kink_samples: args.kink_samples,
            fd_step: args.fd_step,
            files,
            kink,
        },
    )?;
    Ok(())
}

/// Config of one sweep run. An alpha of 0 runs the deterministic baseline.
pub fn sweep_config(base: &ExperimentConfig, param: SweepParam, value: &str, seed: u64) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = base.clone();
    cfg.set_seed(seed);
    let bad = |e: &dyn std::fmt::Display| UsageError(format!("invalid sweep value {value:?}: {e}"));
    match param {
        SweepParam::Alpha => {
            let a: f64 = value.parse().map_err(|e| bad(&e))?;
            if a == 0.0 {
                cfg.make_ml_baseline();
            } else {
                cfg.train.alpha = a;
            }
        }
        SweepParam::Samples => cfg.train.samples = value.parse().map_err(|e| bad(&e))?,
        SweepParam::Bagsize => cfg.train.bag_size = value.parse().map_err(|e| bad(&e))?,
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_sweep(env: &Env, args: &SweepArgs) -> anyhow::Result<()> {
    let hash = env.finish()?;
    let seeds = if args.seeds.is_empty() { vec![env.cfg.seed] } else { args.seeds.clone() };
    let pname = match args.param {
        SweepParam::Alpha => "alpha",
        SweepParam::Samples => "samples",
        SweepParam::Bagsize => "bagsize",
    };
    let configs = args
        .values
        .iter()
        .map(|v| seeds.iter().map(|&s| sweep_config(&env.cfg, args.param, v, s)).collect::<anyhow::Result<Vec<_>>>())
        .collect::<anyhow::Result<Vec<_>>>()?;
    let mut csv = String::from("value,seed,mr,wall_time\n");
    let mut means = Vec::new();
    for (value, cfgs) in args.values.iter().zip(&configs) {
        let mut sum = 0.0;
        for cfg in cfgs {
            let sets = Datasets::generate(cfg)?;
            let run = run_experiment(cfg, &sets)?;
            let dir = env.out.join("sweep").join(format!("{pname}_{value}")).join(format!("seed_{}", cfg.seed));
            std::fs::create_dir_all(&dir)?;
            let run_hash = cfg.hash();
            write_json(&dir.join("train_log.json"), &LogFile { config_hash: &run_hash, log: &run.state.log })?;
            write_json(
                &dir.join("eval_report.json"),
                &EvalFile { config_hash: &run_hash, split: "eval", source: "sweep", report: &run.report },
            )?;
            let mr = run.report.overall.mr;
            let _ = writeln!(csv, "{value},{},{mr},{:.3}", cfg.seed, run.wall_time_s);
            eprintln!("{pname}={value} seed={} mr {mr:.4} ({:.1} s)", cfg.seed, run.wall_time_s);
            sum += mr;
        }
        means.push((value.clone(), sum / cfgs.len() as f64));
    }
    write_text(&env.out.join(format!("sweep_{pname}.csv")), &csv)?;
    write_json(
        &env.out.join(format!("sweep_{pname}_manifest.json")),
        &serde_json::json!({ "config_hash": hash, "param": pname, "values": args.values, "seeds": seeds }),
    )?;
    for (v, m) in &means {
        println!("{pname}={v}: mean mr {m:.4}");
    }
    if let Some((v, m)) = means.iter().min_by(|a, b| a.1.total_cmp(&b.1)) {
        println!("best {pname}={v} (mean mr {m:.4})");
    }
    Ok(())
}
