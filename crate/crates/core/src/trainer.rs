//! Stochastic variational training of the proposal model.
//!
//! Each step draws a minibatch of scenes, samples one latent box per anchor
//! (or `samples` of them) by reparameterization, and descends
//! `alpha * KL(q || prior) - E_q[pseudo log-likelihood]` with SGD.
//! The KL is summed over anchors; the loss is averaged over the minibatch.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distributions::{derive_seed, NoiseSource};
use crate::error::{Error, Result};
use crate::estimators::{
    latent_sample, logits_of, reparam_sample_gradient, AnchorParams, DetectionObjective, NoiseContext,
    PARAMS_PER_ANCHOR,
};
use crate::evaluation::{evaluate_detections, infer, Detection, EvalReport, InferConfig};
use crate::geometry::{iou, BBox, BoxCoder, EncodingKind};
use crate::model::{Backend, ProposalModel};
use crate::pseudo_likelihood::{build_bags, AnchorBag, LikelihoodConfig, NegativeSet, ObjectiveReport};
use crate::scenes::{build_anchor_grid, rasterize, AnchorGrid, Raster, Scene};

const SHUFFLE_TAG: u64 = 0x5348_5546;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the KL term.
    pub alpha: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Monte-Carlo draws per anchor and step.
    pub samples: usize,
    pub bag_size: usize,
    pub gamma: f64,
    pub negatives: NegativeSet,
    pub seed: u64,
    /// Epochs (0-based) from which the learning rate is multiplied by `lr_decay`.
    pub lr_steps: Vec<usize>,
    pub lr_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 1e-4,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 24,
            batch_size: 8,
            samples: 1,
            bag_size: 8,
            gamma: 2.0,
            negatives: NegativeSet::All,
            seed: 0,
            lr_steps: vec![16, 22],
            lr_decay: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if self.samples < 1 {
            return bad("samples must be >= 1".into());
        }
        if self.bag_size < 1 {
            return bad("bag_size must be >= 1".into());
        }
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.gamma >= 0.0 && self.lr_decay > 0.0) {
            return bad("weight_decay and gamma must be >= 0, lr_decay > 0".into());
        }
        Ok(())
    }

    pub fn likelihood(&self) -> LikelihoodConfig {
        LikelihoodConfig { bag_size: self.bag_size, gamma: self.gamma, negatives: self.negatives }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let k = self.lr_steps.iter().filter(|&&e| e <= epoch).count();
        self.lr * self.lr_decay.powi(k as i32)
    }
}

/// Anchor grid, box coder and model shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub backend: Backend,
    pub stride: u32,
    pub anchor_wh: [f64; 2],
    pub encoding: EncodingKind,
    pub coder_stds: [f64; 4],
    pub patch: usize,
    pub log_sigma_max: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            backend: Backend::Linear,
            stride: 4,
            anchor_wh: [10.0, 25.0],
            encoding: EncodingKind::Fa,
            coder_stds: [0.1, 0.1, 0.2, 0.2],
            patch: 13,
            log_sigma_max: 2.0,
        }
    }
}

impl DetectorConfig {
    pub fn coder(&self) -> BoxCoder {
        BoxCoder::new(self.encoding, self.coder_stds)
    }

    pub fn grid(&self, canvas: [u32; 2]) -> Result<AnchorGrid> {
        build_anchor_grid(canvas, self.stride, self.anchor_wh)
    }
}

/// A scene with everything the objective needs precomputed.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    /// Row index for the `TABLE` backend and noise stream address.
    pub id: usize,
    pub scene: Scene,
    pub raster: Raster,
    pub bags: Vec<AnchorBag>,
}

/// Scenes sharing one canvas, grid and coder.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub grid: AnchorGrid,
    pub coder: BoxCoder,
    /// Bag size the scenes' bags were built with.
    pub bag_size: usize,
    pub scenes: Vec<PreparedScene>,
}

impl Dataset {
    pub fn prepare(scenes: &[Scene], det: &DetectorConfig, bag_size: usize) -> Result<Dataset> {
        let first = scenes.first().ok_or_else(|| Error::InvalidConfig("dataset is empty".into()))?;
        let grid = det.grid(first.canvas)?;
        let anchor_boxes = grid.boxes();
        let prepared = scenes
            .iter()
            .enumerate()
            .map(|(id, s)| {
                Ok(PreparedScene {
                    id,
                    scene: s.clone(),
                    raster: rasterize(s, &grid, det.patch)?,
                    bags: build_bags(&s.gt_boxes, &anchor_boxes, bag_size)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { grid, coder: det.coder(), bag_size, scenes: prepared })
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }
}

/// Loss and gradients of one scene.
#[derive(Clone, Debug)]
pub struct SceneOutcome {
    pub report: ObjectiveReport,
    /// KL gradient over the model outputs.
    pub g1_out: Vec<f64>,
    /// Gradient of the negative expected log-likelihood over the model outputs.
    pub g2_out: Vec<f64>,
}

fn non_finite(step: u64, scene: &PreparedScene, params: &[AnchorParams], detail: &str) -> Error {
    // the first anchor with a non-finite output, else the one with the largest KL term
    let anchor = params
        .iter()
        .position(|p| !p.cls_logit.is_finite() || p.dist.mu.iter().chain(&p.dist.log_sigma).any(|v| !v.is_finite()))
        .or_else(|| {
            (0..params.len()).max_by(|&a, &b| {
                params[a].dist.kl_to_standard_normal().total_cmp(&params[b].dist.kl_to_standard_normal())
            })
        });
    let boxes: Vec<[f64; 4]> = scene.scene.gt_boxes.iter().map(BBox::to_array).collect();
    let extra = match anchor {
        Some(j) => format!("; anchor params {:?}", params[j]),
        None => String::new(),
    };
    Error::NonFiniteLoss {
        step,
        scene: scene.id,
        anchor,
        detail: format!("{detail}; scene seed {}, gt boxes {boxes:?}{extra}", scene.scene.seed),
    }
}

/// `alpha * sum KL - mean_s log p(x | z_s)` for one scene with its output-space gradients.
pub fn scene_objective(
    params: &[AnchorParams],
    scene: &PreparedScene,
    data: &Dataset,
    cfg: &TrainConfig,
    noise: &NoiseSource,
    step: u64,
) -> Result<SceneOutcome> {
    let lik = cfg.likelihood();
    let objective = DetectionObjective {
        gts: &scene.scene.gt_boxes,
        anchors: &data.grid.anchors,
        coder: data.coder,
        bags: scene.bags.clone(),
        config: lik,
    };
    let ctx = NoiseContext { source: noise, step, scene: scene.id as u64 };
    let logits = logits_of(params);
    let dim = params.len() * PARAMS_PER_ANCHOR;
    let mut g2 = vec![0.0; dim];
    let mut sample_grad = vec![0.0; dim];
    let (mut value, mut log_pos, mut log_neg) = (0.0, 0.0, 0.0);
    let mut per_gt = vec![0.0; scene.scene.gt_boxes.len()];
    let mut weights = None;
    for s in 0..cfg.samples {
        let eps = ctx.sample_noise(params.len(), s);
        let z = latent_sample(params, &eps);
        let (pl, eval) = objective.evaluate_detailed(&logits, &z);
        reparam_sample_gradient(params, &eps, &eval, &mut sample_grad);
        for (g, v) in g2.iter_mut().zip(&sample_grad) {
            *g -= v;
        }
        value += pl.value;
        log_pos += pl.log_pos;
        log_neg += pl.log_neg;
        for (a, b) in per_gt.iter_mut().zip(&pl.per_gt_meanmax) {
            *a += b;
        }
        weights = Some(pl.weights);
    }
    let inv = 1.0 / cfg.samples as f64;
    g2.iter_mut().for_each(|g| *g *= inv);
    per_gt.iter_mut().for_each(|v| *v *= inv);

    let mut g1 = vec![0.0; dim];
    let mut kl = 0.0;
    for (j, p) in params.iter().enumerate() {
        kl += p.dist.kl_to_standard_normal();
        let (dmu, dls) = p.dist.kl_gradient();
        let base = j * PARAMS_PER_ANCHOR;
        g1[base + 1..base + 5].copy_from_slice(&dmu);
        g1[base + 5..base + 9].copy_from_slice(&dls);
    }
    let weights = weights.expect("samples >= 1");
    let report = ObjectiveReport {
        log_pos: log_pos * inv,
        log_neg: log_neg * inv,
        kl,
        total_loss: cfg.alpha * kl - value * inv,
        per_gt_meanmax: per_gt,
        w1: weights.w1,
        w2: weights.w2,
        alpha: cfg.alpha,
        gamma: cfg.gamma,
        bag_size: cfg.bag_size,
        samples: cfg.samples,
    };
    if !report.total_loss.is_finite() || g2.iter().any(|v| !v.is_finite()) {
        return Err(non_finite(step, scene, params, &format!("loss {}", report.total_loss)));
    }
    Ok(SceneOutcome { report, g1_out: g1, g2_out: g2 })
}

/// Summary of one optimization step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub scenes: Vec<usize>,
    /// Minibatch means.
    pub kl: f64,
    pub weighted_log_pos: f64,
    pub weighted_log_neg: f64,
    pub total_loss: f64,
    pub mean_meanmax: f64,
}

impl StepRecord {
    pub fn recomputed_total(&self, alpha: f64) -> f64 {
        alpha * self.kl - (self.weighted_log_pos + self.weighted_log_neg)
    }
}

/// Everything one step computed, in parameter space.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub record: StepRecord,
    pub per_scene: Vec<ObjectiveReport>,
    /// Minibatch-mean KL gradient.
    pub g1: Vec<f64>,
    /// Minibatch-mean gradient of the negative expected log-likelihood.
    pub g2: Vec<f64>,
    /// `alpha * g1 + g2`, the loss gradient handed to the optimizer.
    pub applied: Vec<f64>,
}

/// Loss gradient over a minibatch without touching the model.
pub fn batch_gradient(
    model: &ProposalModel,
    batch: &[&PreparedScene],
    data: &Dataset,
    cfg: &TrainConfig,
    step: u64,
) -> Result<StepOutput> {
    if cfg.bag_size != data.bag_size {
        return Err(Error::InvalidConfig(format!(
            "bag_size {} does not match the dataset's bags ({})",
            cfg.bag_size, data.bag_size
        )));
    }
    let noise = NoiseSource::new(cfg.seed);
    let results: Vec<Result<_>> = batch
        .par_iter()
        .map(|sc| {
            let params = model.forward(sc.id, &sc.raster)?;
            let out = scene_objective(&params, sc, data, cfg, &noise, step)?;
            let g1 = model.backward(sc.id, &sc.raster, &out.g1_out)?;
            let g2 = model.backward(sc.id, &sc.raster, &out.g2_out)?;
            Ok((out.report, g1, g2))
        })
        .collect();
    let n = batch.len() as f64;
    let mut g1 = vec![0.0; model.params.len()];
    let mut g2 = vec![0.0; model.params.len()];
    let mut per_scene = Vec::with_capacity(batch.len());
    for r in results {
        let (report, b1, b2) = r?;
        b1.add_into(&mut g1, 1.0 / n);
        b2.add_into(&mut g2, 1.0 / n);
        per_scene.push(report);
    }
    let applied = g1.iter().zip(&g2).map(|(a, b)| cfg.alpha * a + b).collect();
    let mean = |f: &dyn Fn(&ObjectiveReport) -> f64| per_scene.iter().map(f).sum::<f64>() / n;
    let n_gt: usize = per_scene.iter().map(|r| r.per_gt_meanmax.len()).sum();
    let record = StepRecord {
        step,
        epoch: 0,
        lr: 0.0,
        scenes: batch.iter().map(|s| s.id).collect(),
        kl: mean(&|r| r.kl),
        weighted_log_pos: mean(&|r| r.w1 * r.log_pos),
        weighted_log_neg: mean(&|r| r.w2 * r.log_neg),
        total_loss: mean(&|r| r.total_loss),
        mean_meanmax: if n_gt == 0 {
            0.0
        } else {
            per_scene.iter().flat_map(|r| r.per_gt_meanmax.iter()).sum::<f64>() / n_gt as f64
        },
    };
    Ok(StepOutput { record, per_scene, g1, g2, applied })
}

/// SGD with momentum, weight decay added to the gradient:
/// `v = m v + (g + wd theta)`, `theta -= lr v`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(dim: usize) -> Self {
        Sgd { velocity: vec![0.0; dim] }
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64, momentum: f64, weight_decay: f64) {
        for ((p, v), g) in params.iter_mut().zip(self.velocity.iter_mut()).zip(grad) {
            *v = momentum * *v + (g + weight_decay * *p);
            *p -= lr * *v;
        }
    }
}

/// One step: gradient over the minibatch, then the SGD update.
pub fn train_step(
    model: &mut ProposalModel,
    opt: &mut Sgd,
    batch: &[&PreparedScene],
    data: &Dataset,
    cfg: &TrainConfig,
    step: u64,
    epoch: usize,
) -> Result<StepOutput> {
    let mut out = batch_gradient(model, batch, data, cfg, step)?;
    let lr = cfg.lr_at(epoch);
    opt.update(&mut model.params, &out.applied, lr, cfg.momentum, cfg.weight_decay);
    out.record.epoch = epoch;
    out.record.lr = lr;
    Ok(out)
}

/// Geometric-mean sigma over anchors and coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaSummary {
    /// The highest-scoring bag member of each ground truth.
    pub foreground: f64,
    /// Every anchor in some ground-truth bag.
    pub bag: f64,
    /// Anchors with zero IoU to every ground truth.
    pub background: f64,
    pub all: f64,
}

pub fn sigma_summary(model: &ProposalModel, data: &Dataset) -> Result<SigmaSummary> {
    #[derive(Default)]
    struct Acc(f64, usize);
    impl Acc {
        fn add(&mut self, p: &AnchorParams) {
            self.0 += p.dist.log_sigma.iter().sum::<f64>();
            self.1 += 4;
        }
        fn geo_mean(&self) -> f64 {
            if self.1 == 0 {
                1.0
            } else {
                (self.0 / self.1 as f64).exp()
            }
        }
    }
    let (mut fg, mut bag, mut bg, mut all) = (Acc::default(), Acc::default(), Acc::default(), Acc::default());
    for sc in &data.scenes {
        let params = model.forward(sc.id, &sc.raster)?;
        let mut in_bag = vec![false; params.len()];
        for b in &sc.bags {
            for &j in &b.member_indices {
                in_bag[j] = true;
            }
            let top = b.member_indices.iter().copied().max_by(|&x, &y| {
                params[x].cls_logit.total_cmp(&params[y].cls_logit).then(y.cmp(&x))
            });
            if let Some(j) = top {
                fg.add(&params[j]);
            }
        }
        for (j, (p, a)) in params.iter().zip(&data.grid.anchors).enumerate() {
            all.add(p);
            if in_bag[j] {
                bag.add(p);
            } else if sc.scene.gt_boxes.iter().all(|g| iou(&a.bbox, g) == 0.0) {
                bg.add(p);
            }
        }
    }
    Ok(SigmaSummary { foreground: fg.geo_mean(), bag: bag.geo_mean(), background: bg.geo_mean(), all: all.geo_mean() })
}

/// Mean-box detections for every scene of `data`.
pub fn detect_all(model: &ProposalModel, data: &Dataset, cfg: &InferConfig) -> Result<Vec<Vec<Detection>>> {
    data.scenes
        .par_iter()
        .map(|sc| infer(model, sc.id, &sc.raster, &data.grid, &data.coder, cfg))
        .collect()
}

pub fn evaluate_model(model: &ProposalModel, data: &Dataset, cfg: &InferConfig) -> Result<EvalReport> {
    let dets = detect_all(model, data, cfg)?;
    let scenes: Vec<&Scene> = data.scenes.iter().map(|s| &s.scene).collect();
    evaluate_detections(&dets, &scenes, cfg.match_iou)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub sigma: SigmaSummary,
    pub eval_mr: Option<f64>,
    pub eval_ap: Option<f64>,
    /// Not serialized, so logs of identical runs compare equal byte for byte.
    #[serde(skip)]
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    /// Eval MR of the model before the first step.
    pub initial_eval_mr: Option<f64>,
    pub initial_sigma: Option<SigmaSummary>,
}

/// Model, optimizer state and log; resuming from it continues a run exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub model: ProposalModel,
    pub opt: Sgd,
    /// Next epoch to run.
    pub epoch: usize,
    /// Next step index.
    pub step: u64,
    pub log: TrainLog,
}

impl TrainState {
    pub fn new(model: ProposalModel) -> Self {
        let dim = model.params.len();
        TrainState { model, opt: Sgd::new(dim), epoch: 0, step: 0, log: TrainLog::default() }
    }
}

/// Scene order of one epoch, a function of the seed and epoch only.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[SHUFFLE_TAG, epoch as u64])));
    order
}

/// Runs epochs until `cfg.epochs`, evaluating on `eval` after each one when
/// given. `TABLE` models can only be evaluated on their training scenes.
pub fn train(
    state: &mut TrainState,
    data: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
    infer_cfg: &InferConfig,
) -> Result<()> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidConfig("dataset is empty".into()));
    }
    if state.epoch >= cfg.epochs {
        return Ok(());
    }
    if state.epoch == 0 && state.step == 0 {
        state.log.initial_sigma = Some(sigma_summary(&state.model, data)?);
        if let Some(ev) = eval {
            state.log.initial_eval_mr = Some(evaluate_model(&state.model, ev, infer_cfg)?.overall.mr);
        }
    }
    while state.epoch < cfg.epochs {
        let start = std::time::Instant::now();
        let epoch = state.epoch;
        let order = epoch_order(cfg.seed, epoch, data.len());
        let mut loss_sum = 0.0;
        let mut n_steps = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PreparedScene> = chunk.iter().map(|&i| &data.scenes[i]).collect();
            let out = train_step(&mut state.model, &mut state.opt, &batch, data, cfg, state.step, epoch)?;
            loss_sum += out.record.total_loss;
            n_steps += 1;
            state.log.steps.push(out.record);
            state.step += 1;
        }
        let report = match eval {
            Some(ev) => Some(evaluate_model(&state.model, ev, infer_cfg)?.overall),
            None => None,
        };
        state.log.epochs.push(EpochRecord {
            epoch,
            lr: cfg.lr_at(epoch),
            mean_loss: loss_sum / n_steps as f64,
            sigma: sigma_summary(&state.model, data)?,
            eval_mr: report.as_ref().map(|r| r.mr),
            eval_ap: report.as_ref().map(|r| r.ap),
            wall_time_s: start.elapsed().as_secs_f64(),
        });
        state.epoch += 1;
    }
    Ok(())
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Training state on disk. The noise is counter-based, so `state.step` and
/// `state.epoch` are the whole RNG cursor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: String,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn new(config_hash: &str, state: TrainState) -> Self {
        Checkpoint { version: CHECKPOINT_VERSION, config_hash: config_hash.to_string(), state }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_vec(self)?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path)?;
        let ck: Checkpoint =
            serde_json::from_slice(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: version {} is not supported (expected {CHECKPOINT_VERSION})",
                path.display(),
                ck.version
            )));
        }
        if ck.state.model.params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint(format!("{}: non-finite parameters", path.display())));
        }
        Ok(ck)
    }
}

/// Zero-initialized model sized for `data`.
pub fn init_model(data: &Dataset, det: &DetectorConfig) -> Result<ProposalModel> {
    ProposalModel::new(det.backend, data.grid.len(), data.len(), det.patch, det.log_sigma_max)
}
