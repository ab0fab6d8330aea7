//! Tractable pseudo detection likelihood.
//!
//! Positive side: every ground truth gets a bag of the top-`n` anchors by
//! anchor IoU; the match quality of a member is `score * IoU(gt, proposal)`
//! and the bag is aggregated with the mean-max relaxation of the hard max.
//!
//! Negative side: every proposal is kept as a negative with probability
//! `k(s) = (1 - (1 - s)^(s^gamma)) / s`, which turns `log(1 - k s)` into the
//! focal term `s^gamma * log(1 - s)`. The focal form is what gets evaluated.
//!
//! Gradients are returned with respect to each proposal's score and decoded
//! box `(cx, cy, w, h)`; chaining into logits and encodings happens in
//! [`crate::estimators`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, iou_gradient, BBox, Wrt};

/// Scores live in `(SCORE_EPS, 1 - SCORE_EPS)`.
pub const SCORE_EPS: f64 = 1e-7;
/// Upper clamp on match quality so `1 / (1 - M)` stays finite.
pub const MATCH_MAX: f64 = 1.0 - 1e-7;
/// Floor on the positive likelihood before taking its log.
pub const POS_FLOOR: f64 = 1e-12;

/// Clamps a score into `(SCORE_EPS, 1 - SCORE_EPS)`.
pub fn clamp_score(s: f64) -> f64 {
    s.clamp(SCORE_EPS, 1.0 - SCORE_EPS)
}

/// A decoded dense proposal with its classification score.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseProposal {
    pub anchor_index: usize,
    pub cls_score: f64,
    pub bbox: BBox,
}

impl DenseProposal {
    /// The score is clamped on construction.
    pub fn new(anchor_index: usize, cls_score: f64, bbox: BBox) -> Self {
        DenseProposal { anchor_index, cls_score: clamp_score(cls_score), bbox }
    }
}

/// `score * IoU(gt, proposal)`, clamped to `MATCH_MAX`.
pub fn match_quality(gt: &BBox, p: &DenseProposal) -> f64 {
    (p.cls_score * iou(gt, &p.bbox)).min(MATCH_MAX)
}

/// Top-`n` anchors by IoU to one ground truth.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorBag {
    pub gt_index: usize,
    /// Sorted by anchor IoU descending, ties by anchor index ascending.
    pub member_indices: Vec<usize>,
    pub n: usize,
}

/// One bag per ground truth, built from the anchor boxes so membership does
/// not change between Monte-Carlo samples.
pub fn build_bags(gts: &[BBox], anchor_boxes: &[BBox], n: usize) -> Result<Vec<AnchorBag>> {
    if n == 0 {
        return Err(Error::InvalidConfig("bag size must be at least 1".into()));
    }
    if anchor_boxes.is_empty() {
        return Err(Error::InvalidConfig("at least one anchor is required to build bags".into()));
    }
    Ok(gts
        .iter()
        .enumerate()
        .map(|(gt_index, gt)| {
            let mut scored: Vec<(usize, f64)> =
                anchor_boxes.iter().enumerate().map(|(j, a)| (j, iou(gt, a))).collect();
            scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            scored.truncate(n);
            AnchorBag { gt_index, member_indices: scored.into_iter().map(|(j, _)| j).collect(), n }
        })
        .collect())
}

/// `sum(M / (1 - M)) / sum(1 / (1 - M))`.
///
/// Panics on an empty slice.
pub fn mean_max(values: &[f64]) -> f64 {
    mean_max_with_gradient(values).0
}

/// Mean-max and its partial derivatives `dP/dM_j = (1 - P) w_j^2 / sum(w)`
/// with `w_j = 1 / (1 - M_j)`.
pub fn mean_max_with_gradient(values: &[f64]) -> (f64, Vec<f64>) {
    assert!(!values.is_empty(), "mean_max of an empty bag");
    let weights: Vec<f64> = values.iter().map(|m| 1.0 / (1.0 - m)).collect();
    let sum_w: f64 = weights.iter().sum();
    let p = values.iter().zip(&weights).map(|(m, w)| m * w).sum::<f64>() / sum_w;
    let grad = weights.iter().map(|w| (1.0 - p) * w * w / sum_w).collect();
    (p, grad)
}

/// Positive log-likelihood over all bags with gradients per proposal.
#[derive(Clone, Debug, PartialEq)]
pub struct PositiveTerm {
    /// `sum_i log max(P_i, POS_FLOOR)`.
    pub log_likelihood: f64,
    pub per_gt_meanmax: Vec<f64>,
    pub grad_score: Vec<f64>,
    pub grad_box: Vec<[f64; 4]>,
}

/// `sum_i log Mean-max(x_i | z)`.
///
/// Bags with `P_i < POS_FLOOR` (in particular bags whose every member has
/// `M = 0`) contribute `log(POS_FLOOR)` and no gradient.
pub fn positive_log_likelihood(gts: &[BBox], proposals: &[DenseProposal], bags: &[AnchorBag]) -> PositiveTerm {
    let mut grad_score = vec![0.0; proposals.len()];
    let mut grad_box = vec![[0.0; 4]; proposals.len()];
    let mut per_gt = Vec::with_capacity(bags.len());
    let mut total = 0.0;
    for bag in bags {
        let gt = &gts[bag.gt_index];
        let mut ious = Vec::with_capacity(bag.member_indices.len());
        let mut values = Vec::with_capacity(bag.member_indices.len());
        for &j in &bag.member_indices {
            let p = &proposals[j];
            let o = iou(gt, &p.bbox);
            ious.push(o);
            values.push((p.cls_score * o).min(MATCH_MAX));
        }
        let (pos, dpos) = mean_max_with_gradient(&values);
        per_gt.push(pos);
        if pos < POS_FLOOR {
            total += POS_FLOOR.ln();
            continue;
        }
        total += pos.ln();
        for (slot, &j) in bag.member_indices.iter().enumerate() {
            let p = &proposals[j];
            let raw = p.cls_score * ious[slot];
            if raw > MATCH_MAX {
                continue;
            }
            let dlog_dm = dpos[slot] / pos;
            grad_score[j] += dlog_dm * ious[slot];
            let g = iou_gradient(gt, &p.bbox, Wrt::B);
            for k in 0..4 {
                grad_box[j][k] += dlog_dm * p.cls_score * g[k];
            }
        }
    }
    PositiveTerm { log_likelihood: total, per_gt_meanmax: per_gt, grad_score, grad_box }
}

/// Keep probability `k(s) = (1 - (1 - s)^(s^gamma)) / s`, evaluated stably.
pub fn keep_probability(s: f64, gamma: f64) -> f64 {
    let s = clamp_score(s);
    -(s.powf(gamma) * (-s).ln_1p()).exp_m1() / s
}

/// `log(1 - k(s) s)`, the negative likelihood written through the keep
/// probability. Agrees with [`focal_negative_term`], but as `s -> 1` the
/// difference `1 - k s` cancels and only about `-log10(1 - s)` fewer digits
/// survive, which is why the objective uses the focal form.
pub fn keep_form_negative_term(s: f64, gamma: f64) -> f64 {
    let s = clamp_score(s);
    let k = keep_probability(s, gamma);
    (-k).mul_add(s, 1.0).ln()
}

/// `s^gamma * log(1 - s)`.
pub fn focal_negative_term(s: f64, gamma: f64) -> f64 {
    let s = clamp_score(s);
    s.powf(gamma) * (-s).ln_1p()
}

/// Derivative of [`focal_negative_term`] with respect to `s`.
pub fn focal_negative_derivative(s: f64, gamma: f64) -> f64 {
    let s = clamp_score(s);
    let log1m = (-s).ln_1p();
    let first = if gamma == 0.0 { 0.0 } else { gamma * s.powf(gamma - 1.0) * log1m };
    first - s.powf(gamma) / (1.0 - s)
}

#[derive(Clone, Debug, PartialEq)]
pub struct NegativeTerm {
    /// `sum_j s_j^gamma log(1 - s_j)` over included proposals.
    pub log_likelihood: f64,
    pub grad_score: Vec<f64>,
}

/// Negative log-likelihood over the proposals flagged in `include`
/// (all of them when `include` is `None`).
pub fn negative_log_likelihood(proposals: &[DenseProposal], gamma: f64, include: Option<&[bool]>) -> NegativeTerm {
    let mut total = 0.0;
    let mut grad_score = vec![0.0; proposals.len()];
    for (j, p) in proposals.iter().enumerate() {
        if include.is_some_and(|inc| !inc[j]) {
            continue;
        }
        total += focal_negative_term(p.cls_score, gamma);
        grad_score[j] = focal_negative_derivative(p.cls_score, gamma);
    }
    NegativeTerm { log_likelihood: total, grad_score }
}

/// Which proposals enter the negative sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSet {
    #[default]
    All,
    ExcludeBagMembers,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodConfig {
    pub bag_size: usize,
    pub gamma: f64,
    #[serde(default)]
    pub negatives: NegativeSet,
}

impl Default for LikelihoodConfig {
    fn default() -> Self {
        LikelihoodConfig { bag_size: 8, gamma: 2.0, negatives: NegativeSet::All }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodWeights {
    pub w1: f64,
    pub w2: f64,
}

/// `w1 = 0.5 / |gt|`, `w2 = 0.5 / (n |gt|)`; an image with no ground truth
/// uses `|gt| = 1`.
pub fn likelihood_weights(n_gt: usize, bag_size: usize) -> LikelihoodWeights {
    let g = n_gt.max(1) as f64;
    LikelihoodWeights { w1: 0.5 / g, w2: 0.5 / (bag_size as f64 * g) }
}

/// The combined pseudo log-likelihood of one latent sample.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLikelihood {
    /// `w1 * log_pos + w2 * log_neg`.
    pub value: f64,
    pub log_pos: f64,
    pub log_neg: f64,
    pub per_gt_meanmax: Vec<f64>,
    pub weights: LikelihoodWeights,
    pub grad_score: Vec<f64>,
    pub grad_box: Vec<[f64; 4]>,
}

pub fn pseudo_log_likelihood(
    gts: &[BBox],
    proposals: &[DenseProposal],
    bags: &[AnchorBag],
    config: &LikelihoodConfig,
) -> PseudoLikelihood {
    let weights = likelihood_weights(gts.len(), config.bag_size);
    let pos = positive_log_likelihood(gts, proposals, bags);
    let include = match config.negatives {
        NegativeSet::All => None,
        NegativeSet::ExcludeBagMembers => {
            let mut inc = vec![true; proposals.len()];
            for bag in bags {
                for &j in &bag.member_indices {
                    inc[j] = false;
                }
            }
            Some(inc)
        }
    };
    let neg = negative_log_likelihood(proposals, config.gamma, include.as_deref());
    let grad_score = pos
        .grad_score
        .iter()
        .zip(&neg.grad_score)
        .map(|(p, n)| weights.w1 * p + weights.w2 * n)
        .collect();
    let grad_box = pos.grad_box.iter().map(|g| g.map(|v| weights.w1 * v)).collect();
    PseudoLikelihood {
        value: weights.w1 * pos.log_likelihood + weights.w2 * neg.log_likelihood,
        log_pos: pos.log_likelihood,
        log_neg: neg.log_likelihood,
        per_gt_meanmax: pos.per_gt_meanmax,
        weights,
        grad_score,
        grad_box,
    }
}

/// Loss decomposition of one objective evaluation.
///
/// `total_loss = alpha * kl - (w1 * log_pos + w2 * log_neg)`, with the
/// likelihood terms averaged over the Monte-Carlo samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveReport {
    pub log_pos: f64,
    pub log_neg: f64,
    pub kl: f64,
    pub total_loss: f64,
    pub per_gt_meanmax: Vec<f64>,
    pub w1: f64,
    pub w2: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub bag_size: usize,
    pub samples: usize,
}

impl ObjectiveReport {
    /// Recomputes the loss from the stored terms.
    pub fn recomputed_total(&self) -> f64 {
        self.alpha * self.kl - (self.w1 * self.log_pos + self.w2 * self.log_neg)
    }
}
