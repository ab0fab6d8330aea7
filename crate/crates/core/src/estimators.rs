//! Stochastic gradient estimators for expectations under the per-anchor
//! Gaussian proposal distributions.
//!
//! Parameters are laid out per anchor as
//! `[cls_logit, mu_0..mu_3, log_sigma_0..log_sigma_3]`. All estimators return
//! the gradient of `E_q[f(z)]` (ascent direction of the data term). The
//! classification logit is deterministic: every estimator uses its pathwise
//! partial derivative.
//!
//! Gradients are composed from closed-form partials along the fixed chain
//! `z -> decode -> IoU -> mean-max / focal`, not from a tape.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::distributions::{DiagonalGaussian4, McEstimate, NoiseSource, StreamIndex};
use crate::error::{Error, Result};
use crate::geometry::{iou, pull_back, Anchor, BBox, BoxCoder, EncodingKind};
use crate::pseudo_likelihood::{
    build_bags, clamp_score, pseudo_log_likelihood, AnchorBag, DenseProposal, LikelihoodConfig, PseudoLikelihood,
    SCORE_EPS,
};

pub const PARAMS_PER_ANCHOR: usize = 9;

/// Variational parameters of one anchor: deterministic class logit plus the
/// Gaussian over the four encoded regression variables.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AnchorParams {
    pub cls_logit: f64,
    pub dist: DiagonalGaussian4,
}

impl AnchorParams {
    pub fn from_slice(v: &[f64]) -> Self {
        AnchorParams {
            cls_logit: v[0],
            dist: DiagonalGaussian4::new([v[1], v[2], v[3], v[4]], [v[5], v[6], v[7], v[8]]),
        }
    }

    pub fn write_to(&self, out: &mut [f64]) {
        out[0] = self.cls_logit;
        out[1..5].copy_from_slice(&self.dist.mu);
        out[5..9].copy_from_slice(&self.dist.log_sigma);
    }
}

pub fn flatten(params: &[AnchorParams]) -> Vec<f64> {
    let mut out = vec![0.0; params.len() * PARAMS_PER_ANCHOR];
    for (p, chunk) in params.iter().zip(out.chunks_exact_mut(PARAMS_PER_ANCHOR)) {
        p.write_to(chunk);
    }
    out
}

pub fn unflatten(flat: &[f64]) -> Vec<AnchorParams> {
    flat.chunks_exact(PARAMS_PER_ANCHOR).map(AnchorParams::from_slice).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Value of an objective at one latent sample, with partials.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub value: f64,
    pub grad_logit: Vec<f64>,
    pub grad_z: Vec<[f64; 4]>,
}

/// A function of the class logits and one latent sample `z` per anchor.
pub trait LatentObjective: Sync {
    fn n_anchors(&self) -> usize;
    fn evaluate(&self, logits: &[f64], z: &[[f64; 4]]) -> Evaluation;
}

/// The pseudo detection log-likelihood of one scene as a function of the
/// latent encodings.
#[derive(Clone, Debug)]
pub struct DetectionObjective<'a> {
    pub gts: &'a [BBox],
    pub anchors: &'a [Anchor],
    pub coder: BoxCoder,
    pub bags: Vec<AnchorBag>,
    pub config: LikelihoodConfig,
}

impl<'a> DetectionObjective<'a> {
    pub fn new(gts: &'a [BBox], anchors: &'a [Anchor], coder: BoxCoder, config: LikelihoodConfig) -> Result<Self> {
        let anchor_boxes: Vec<BBox> = anchors.iter().map(|a| a.bbox).collect();
        let bags = build_bags(gts, &anchor_boxes, config.bag_size)?;
        Ok(DetectionObjective { gts, anchors, coder, bags, config })
    }

    pub fn proposals(&self, logits: &[f64], z: &[[f64; 4]]) -> Vec<DenseProposal> {
        self.anchors
            .iter()
            .enumerate()
            .map(|(j, a)| DenseProposal::new(j, sigmoid(logits[j]), self.coder.decode_values(&z[j], a)))
            .collect()
    }

    /// Full likelihood breakdown together with the chained partials.
    pub fn evaluate_detailed(&self, logits: &[f64], z: &[[f64; 4]]) -> (PseudoLikelihood, Evaluation) {
        let proposals = self.proposals(logits, z);
        let pl = pseudo_log_likelihood(self.gts, &proposals, &self.bags, &self.config);
        let grad_logit = logits
            .iter()
            .zip(&pl.grad_score)
            .map(|(&l, &g)| {
                let s = sigmoid(l);
                if clamp_score(s) != s || s <= SCORE_EPS {
                    0.0
                } else {
                    g * s * (1.0 - s)
                }
            })
            .collect();
        let grad_z = self
            .anchors
            .iter()
            .enumerate()
            .map(|(j, a)| {
                let gb = &pl.grad_box[j];
                if gb.iter().all(|v| *v == 0.0) {
                    [0.0; 4]
                } else {
                    pull_back(gb, &self.coder.decode_jacobian(&z[j], a))
                }
            })
            .collect();
        let eval = Evaluation { value: pl.value, grad_logit, grad_z };
        (pl, eval)
    }
}

impl LatentObjective for DetectionObjective<'_> {
    fn n_anchors(&self) -> usize {
        self.anchors.len()
    }

    fn evaluate(&self, logits: &[f64], z: &[[f64; 4]]) -> Evaluation {
        self.evaluate_detailed(logits, z).1
    }
}

/// `f(z) = -sum_j |z_j - c_j|^2`; under `z ~ N(mu, sigma^2)` its expectation
/// has gradient `-2 (mu - c)` in `mu` and `-2 sigma^2` in `log sigma`.
#[derive(Clone, Debug)]
pub struct QuadraticToy {
    pub centers: Vec<[f64; 4]>,
}

impl QuadraticToy {
    pub fn expected_gradient(&self, params: &[AnchorParams]) -> Vec<f64> {
        let mut out = vec![0.0; params.len() * PARAMS_PER_ANCHOR];
        for (j, p) in params.iter().enumerate() {
            let s = p.dist.sigma();
            for k in 0..4 {
                out[j * PARAMS_PER_ANCHOR + 1 + k] = -2.0 * (p.dist.mu[k] - self.centers[j][k]);
                out[j * PARAMS_PER_ANCHOR + 5 + k] = -2.0 * s[k] * s[k];
            }
        }
        out
    }
}

impl LatentObjective for QuadraticToy {
    fn n_anchors(&self) -> usize {
        self.centers.len()
    }

    fn evaluate(&self, _logits: &[f64], z: &[[f64; 4]]) -> Evaluation {
        let mut value = 0.0;
        let grad_z = z
            .iter()
            .zip(&self.centers)
            .map(|(zj, cj)| {
                std::array::from_fn(|k| {
                    let d = zj[k] - cj[k];
                    value -= d * d;
                    -2.0 * d
                })
            })
            .collect();
        Evaluation { value, grad_logit: vec![0.0; z.len()], grad_z }
    }
}

/// `f(z) = c` everywhere.
#[derive(Clone, Debug)]
pub struct ConstantObjective {
    pub n_anchors: usize,
    pub value: f64,
}

impl LatentObjective for ConstantObjective {
    fn n_anchors(&self) -> usize {
        self.n_anchors
    }

    fn evaluate(&self, _logits: &[f64], z: &[[f64; 4]]) -> Evaluation {
        Evaluation { value: self.value, grad_logit: vec![0.0; z.len()], grad_z: vec![[0.0; 4]; z.len()] }
    }
}

/// Addressing of the noise used by one estimate.
#[derive(Clone, Copy, Debug)]
pub struct NoiseContext<'a> {
    pub source: &'a NoiseSource,
    pub step: u64,
    pub scene: u64,
}

impl NoiseContext<'_> {
    pub fn epsilon(&self, anchor: usize, sample: usize) -> [f64; 4] {
        self.source
            .draw(StreamIndex { step: self.step, scene: self.scene, anchor: anchor as u64, sample: sample as u64 })
            .epsilon
    }

    /// All anchors' noise for one sample.
    pub fn sample_noise(&self, n_anchors: usize, sample: usize) -> Vec<[f64; 4]> {
        (0..n_anchors).map(|j| self.epsilon(j, sample)).collect()
    }
}

pub fn latent_sample(params: &[AnchorParams], eps: &[[f64; 4]]) -> Vec<[f64; 4]> {
    params.iter().zip(eps).map(|(p, e)| p.dist.reparameterize(e)).collect()
}

pub fn logits_of(params: &[AnchorParams]) -> Vec<f64> {
    params.iter().map(|p| p.cls_logit).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EstimatorKind {
    Reparam,
    ScoreFn,
    FiniteDiff,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    None,
    /// Leave-one-out mean of the other samples' values.
    Mean,
}

/// Estimated objective value and gradient over all variational parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientEstimate {
    pub value: f64,
    pub value_std_err: f64,
    pub grad: Vec<f64>,
    /// Per-coordinate standard error; zero for finite differences.
    pub grad_std_err: Vec<f64>,
    pub n_samples: usize,
    pub estimator: EstimatorKind,
}

/// Running mean and variance per coordinate.
struct Accumulator {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Accumulator {
    fn new(dim: usize) -> Self {
        Accumulator { n: 0, mean: vec![0.0; dim], m2: vec![0.0; dim] }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1;
        let n = self.n as f64;
        for ((m, s), v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let d = v - *m;
            *m += d / n;
            *s += d * (v - *m);
        }
    }

    fn std_err(&self) -> Vec<f64> {
        if self.n < 2 {
            return vec![0.0; self.mean.len()];
        }
        let n = self.n as f64;
        self.m2.iter().map(|s| (s / (n - 1.0) / n).sqrt()).collect()
    }
}

fn check_samples(samples: usize, min: usize) -> Result<()> {
    if samples < min {
        return Err(Error::InvalidConfig(format!("need at least {min} Monte-Carlo samples, got {samples}")));
    }
    Ok(())
}

/// Pathwise gradient of one sample: `d f / d mu = df/dz`,
/// `d f / d log sigma = df/dz * sigma * eps`.
pub fn reparam_sample_gradient(params: &[AnchorParams], eps: &[[f64; 4]], eval: &Evaluation, out: &mut [f64]) {
    for (j, p) in params.iter().enumerate() {
        let s = p.dist.sigma();
        let base = j * PARAMS_PER_ANCHOR;
        out[base] = eval.grad_logit[j];
        for k in 0..4 {
            out[base + 1 + k] = eval.grad_z[j][k];
            out[base + 5 + k] = eval.grad_z[j][k] * s[k] * eps[j][k];
        }
    }
}

/// Reparameterization estimate of `grad E_q[f]` from `samples` draws.
pub fn reparam_gradient(
    objective: &dyn LatentObjective,
    params: &[AnchorParams],
    samples: usize,
    noise: NoiseContext<'_>,
) -> Result<GradientEstimate> {
    check_samples(samples, 1)?;
    let logits = logits_of(params);
    let dim = params.len() * PARAMS_PER_ANCHOR;
    let mut acc = Accumulator::new(dim);
    let mut values = Vec::with_capacity(samples);
    let mut g = vec![0.0; dim];
    for s in 0..samples {
        let eps = noise.sample_noise(params.len(), s);
        let z = latent_sample(params, &eps);
        let eval = objective.evaluate(&logits, &z);
        reparam_sample_gradient(params, &eps, &eval, &mut g);
        acc.push(&g);
        values.push(eval.value);
    }
    let v = McEstimate::from_samples(&values);
    Ok(GradientEstimate {
        value: v.mean,
        value_std_err: v.std_err,
        grad_std_err: acc.std_err(),
        grad: acc.mean,
        n_samples: samples,
        estimator: EstimatorKind::Reparam,
    })
}

/// Score-function (REINFORCE) estimate:
/// `(1/S) sum_s (f(z_s) - b_s) grad log q(z_s)`.
///
/// With [`Baseline::Mean`], `b_s` is the mean of the other samples' values,
/// which keeps the estimator unbiased; this needs `samples >= 2`.
pub fn score_function_gradient(
    objective: &dyn LatentObjective,
    params: &[AnchorParams],
    samples: usize,
    noise: NoiseContext<'_>,
    baseline: Baseline,
) -> Result<GradientEstimate> {
    check_samples(samples, if baseline == Baseline::Mean { 2 } else { 1 })?;
    let logits = logits_of(params);
    let dim = params.len() * PARAMS_PER_ANCHOR;
    let mut draws = Vec::with_capacity(samples);
    for s in 0..samples {
        let eps = noise.sample_noise(params.len(), s);
        let z = latent_sample(params, &eps);
        let eval = objective.evaluate(&logits, &z);
        draws.push((eps, eval));
    }
    let total: f64 = draws.iter().map(|(_, e)| e.value).sum();
    let mut acc = Accumulator::new(dim);
    let mut g = vec![0.0; dim];
    for (eps, eval) in &draws {
        let b = match baseline {
            Baseline::None => 0.0,
            Baseline::Mean => (total - eval.value) / (samples - 1) as f64,
        };
        let weight = eval.value - b;
        for (j, p) in params.iter().enumerate() {
            let (dmu, dls) = p.dist.score(&eps[j]);
            let base = j * PARAMS_PER_ANCHOR;
            g[base] = eval.grad_logit[j];
            for k in 0..4 {
                g[base + 1 + k] = weight * dmu[k];
                g[base + 5 + k] = weight * dls[k];
            }
        }
        acc.push(&g);
    }
    let values: Vec<f64> = draws.iter().map(|(_, e)| e.value).collect();
    let v = McEstimate::from_samples(&values);
    Ok(GradientEstimate {
        value: v.mean,
        value_std_err: v.std_err,
        grad_std_err: acc.std_err(),
        grad: acc.mean,
        n_samples: samples,
        estimator: EstimatorKind::ScoreFn,
    })
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn central_differences(f: impl Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + step;
            let up = f(&probe);
            probe[i] = x[i] - step;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Sample-average objective at fixed noise.
pub fn mc_objective(objective: &dyn LatentObjective, params: &[AnchorParams], noise: &[Vec<[f64; 4]>]) -> f64 {
    let logits = logits_of(params);
    let total: f64 = noise.iter().map(|eps| objective.evaluate(&logits, &latent_sample(params, eps)).value).sum();
    total / noise.len() as f64
}

/// Finite-difference gradient of the `samples`-draw objective estimate, with
/// the same noise reused at every probe (common random numbers).
pub fn finite_diff_gradient(
    objective: &dyn LatentObjective,
    params: &[AnchorParams],
    samples: usize,
    noise: NoiseContext<'_>,
    step: f64,
) -> Result<GradientEstimate> {
    check_samples(samples, 1)?;
    if !(1e-6..=1e-3).contains(&step) {
        return Err(Error::InvalidConfig(format!("finite-difference step {step} outside [1e-6, 1e-3]")));
    }
    let draws: Vec<Vec<[f64; 4]>> = (0..samples).map(|s| noise.sample_noise(params.len(), s)).collect();
    let x = flatten(params);
    let f = |v: &[f64]| mc_objective(objective, &unflatten(v), &draws);
    let grad = central_differences(f, &x, step);
    Ok(GradientEstimate {
        value: mc_objective(objective, params, &draws),
        value_std_err: 0.0,
        grad_std_err: vec![0.0; grad.len()],
        grad,
        n_samples: samples,
        estimator: EstimatorKind::FiniteDiff,
    })
}

/// Gradient of `f` at `z = mu`; the `log_sigma` entries are zero.
pub fn deterministic_gradient(objective: &dyn LatentObjective, params: &[AnchorParams]) -> GradientEstimate {
    let logits = logits_of(params);
    let z: Vec<[f64; 4]> = params.iter().map(|p| p.dist.mu).collect();
    let eval = objective.evaluate(&logits, &z);
    let mut grad = vec![0.0; params.len() * PARAMS_PER_ANCHOR];
    reparam_sample_gradient(params, &vec![[0.0; 4]; params.len()], &eval, &mut grad);
    GradientEstimate {
        value: eval.value,
        value_std_err: 0.0,
        grad_std_err: vec![0.0; grad.len()],
        grad,
        n_samples: 1,
        estimator: EstimatorKind::Reparam,
    }
}

/// One axis of a surface grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub name: String,
    pub min: f64,
    pub max: f64,
    pub resolution: usize,
}

impl Axis {
    pub fn new(name: &str, min: f64, max: f64, resolution: usize) -> Self {
        Axis { name: name.to_string(), min, max, resolution }
    }

    pub fn value(&self, i: usize) -> f64 {
        self.min + (self.max - self.min) * i as f64 / (self.resolution - 1) as f64
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.resolution).map(|i| self.value(i)).collect()
    }
}

/// Expected IoU over a 2-D slice of proposal means, against the unit box at
/// the origin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceGrid {
    pub kind: EncodingKind,
    pub axes: [Axis; 2],
    /// Row-major: the first axis is the outer index.
    pub values: Vec<f64>,
    pub sigma: f64,
    pub samples: usize,
}

impl SurfaceGrid {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.axes[1].resolution + j]
    }

    /// Long-format CSV: `axis0,axis1,expected_iou`, rows in row-major order.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{},{},expected_iou\n", self.axes[0].name, self.axes[1].name);
        for i in 0..self.axes[0].resolution {
            for j in 0..self.axes[1].resolution {
                let _ = writeln!(out, "{},{},{}", self.axes[0].value(i), self.axes[1].value(j), self.at(i, j));
            }
        }
        out
    }
}

/// The unit ground-truth box at the origin; also the anchor of the surfaces.
pub fn unit_gt() -> BBox {
    BBox { cx: 0.0, cy: 0.0, w: 1.0, h: 1.0 }
}

/// Box at a surface point: FA axes are `(x, w)` with unit height centered at
/// `y = 0`; FCOS axes are `(r, l)`, the distances from the origin to the right
/// and left sides, with the top and bottom at `-0.5` and `0.5`.
pub fn surface_box(kind: EncodingKind, a: f64, b: f64) -> Result<BBox> {
    match kind {
        EncodingKind::Fa => BBox::new(a, 0.0, b, 1.0),
        EncodingKind::Fcos => BBox::new(0.5 * (a - b), 0.0, a + b, 1.0),
    }
}

pub fn default_surface_axes(kind: EncodingKind) -> [Axis; 2] {
    match kind {
        EncodingKind::Fa => [Axis::new("x", -1.5, 1.5, 61), Axis::new("w", 0.25, 3.0, 56)],
        EncodingKind::Fcos => [Axis::new("r", 0.05, 1.5, 59), Axis::new("l", 0.05, 1.5, 59)],
    }
}

/// Shared standard-normal draws for surface evaluations.
pub fn surface_noise(samples: usize, seed: u64) -> Vec<[f64; 4]> {
    let src = NoiseSource::new(seed);
    (0..samples).map(|s| src.draw(StreamIndex { sample: s as u64, ..Default::default() }).epsilon).collect()
}

/// `E_{z ~ N(encode(box), sigma^2)}[IoU(decode(z), unit gt)]` at one point.
/// With `sigma = 0` this is the plain IoU.
pub fn expected_iou_at(kind: EncodingKind, a: f64, b: f64, sigma: f64, noise: &[[f64; 4]]) -> Result<f64> {
    let gt = unit_gt();
    let anchor = Anchor::standalone(gt);
    let coder = BoxCoder::unit(kind);
    let bx = surface_box(kind, a, b)?;
    if sigma == 0.0 {
        return Ok(iou(&bx, &gt));
    }
    let mu = coder.encode(&bx, &anchor)?.values;
    let total: f64 = noise
        .iter()
        .map(|e| {
            let z: [f64; 4] = std::array::from_fn(|k| mu[k] + sigma * e[k]);
            iou(&coder.decode_values(&z, &anchor), &gt)
        })
        .sum();
    Ok(total / noise.len() as f64)
}

pub fn expected_iou_surface(
    kind: EncodingKind,
    axes: [Axis; 2],
    sigma: f64,
    samples: usize,
    seed: u64,
) -> Result<SurfaceGrid> {
    if axes.iter().any(|a| a.resolution < 2) {
        return Err(Error::InvalidConfig("surface axes need at least 2 points".into()));
    }
    if !(sigma >= 0.0) {
        return Err(Error::InvalidConfig(format!("sigma must be non-negative, got {sigma}")));
    }
    check_samples(samples, 1)?;
    let noise = if sigma > 0.0 { surface_noise(samples, seed) } else { Vec::new() };
    let mut values = Vec::with_capacity(axes[0].resolution * axes[1].resolution);
    for a in axes[0].values() {
        for b in axes[1].values() {
            values.push(expected_iou_at(kind, a, b, sigma, &noise)?);
        }
    }
    Ok(SurfaceGrid { kind, axes, values, sigma, samples })
}

/// Position along the first surface axis where the IoU has a kink, for a
/// given value of the second axis.
pub fn kink_location(kind: EncodingKind, other: f64) -> f64 {
    match kind {
        // box edge meets the gt edge at x = |1 - w| / 2
        EncodingKind::Fa => 0.5 * (1.0 - other).abs(),
        // right side meets the gt's right side
        EncodingKind::Fcos => 0.5,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KinkJump {
    pub sigma: f64,
    /// `(second-axis value, jump)`.
    pub per_slice: Vec<(f64, f64)>,
    pub max_jump: f64,
}

/// Largest change of the numerical first-axis derivative across the kink
/// line. The derivative is a central difference with step `fd_step`, taken at
/// `kink -/+ 2 fd_step` so each stencil stays on one side of the kink.
pub fn kink_jump(
    kind: EncodingKind,
    sigma: f64,
    slices: &[f64],
    samples: usize,
    seed: u64,
    fd_step: f64,
) -> Result<KinkJump> {
    let noise = if sigma > 0.0 { surface_noise(samples, seed) } else { Vec::new() };
    let surf = |a: f64, b: f64| expected_iou_at(kind, a, b, sigma, &noise);
    let mut per_slice = Vec::with_capacity(slices.len());
    for &b in slices {
        let k = kink_location(kind, b);
        let offset = 2.0 * fd_step;
        let deriv = |a: f64| -> Result<f64> { Ok((surf(a + fd_step, b)? - surf(a - fd_step, b)?) / (2.0 * fd_step)) };
        let jump = (deriv(k + offset)? - deriv(k - offset)?).abs();
        per_slice.push((b, jump));
    }
    let max_jump = per_slice.iter().map(|p| p.1).fold(0.0, f64::max);
    Ok(KinkJump { sigma, per_slice, max_jump })
}

/// Second-axis slices used by the kink-jump summary.
pub fn default_kink_slices(kind: EncodingKind) -> Vec<f64> {
    match kind {
        EncodingKind::Fa => vec![0.4, 0.6, 0.8, 1.25, 1.5, 2.0],
        EncodingKind::Fcos => vec![0.3, 0.5, 0.8, 1.2],
    }
}
