//! Inference from the proposal means and the detection metrics: log-average
//! miss rate over false positives per image, average precision, and
//! occlusion-sliced miss rates.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::sigmoid;
use crate::geometry::{iou, BBox, BoxCoder};
use crate::model::ProposalModel;
use crate::scenes::{AnchorGrid, Band, Raster, Scene};

/// Miss rates below this are floored before taking logs.
pub const MISS_RATE_FLOOR: f64 = 1e-10;

/// The nine reference FPPI values `10^-2, 10^-1.75, ..., 10^0`.
pub fn reference_fppi() -> [f64; 9] {
    std::array::from_fn(|i| 10f64.powf(-2.0 + 0.25 * i as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub scene_id: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    pub score_thresh: f64,
    pub nms_iou: f64,
    pub match_iou: f64,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig { score_thresh: 0.05, nms_iou: 0.5, match_iou: 0.5 }
    }
}

/// Stable sort by score, highest first.
pub fn sort_by_score(dets: &mut [Detection]) {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
}

/// Greedy non-maximum suppression: a detection is dropped when its IoU with
/// an already kept, higher-scored one exceeds `iou_thresh`.
pub fn nms(mut dets: Vec<Detection>, iou_thresh: f64) -> Vec<Detection> {
    sort_by_score(&mut dets);
    let mut kept: Vec<Detection> = Vec::with_capacity(dets.len());
    for d in dets {
        if kept.iter().all(|k| iou(&k.bbox, &d.bbox) <= iou_thresh) {
            kept.push(d);
        }
    }
    kept
}

/// Decodes each anchor's mean box, keeps scores above the threshold, and
/// applies NMS. The standard deviations play no part.
pub fn infer(
    model: &ProposalModel,
    scene_id: usize,
    raster: &Raster,
    grid: &AnchorGrid,
    coder: &BoxCoder,
    cfg: &InferConfig,
) -> Result<Vec<Detection>> {
    let params = model.forward(scene_id, raster)?;
    let dets = params
        .iter()
        .zip(&grid.anchors)
        .filter_map(|(p, a)| {
            let score = sigmoid(p.cls_logit);
            let bbox = coder.decode_values(&p.dist.mu, a);
            (score > cfg.score_thresh && bbox.is_finite() && bbox.w > 0.0 && bbox.h > 0.0)
                .then_some(Detection { bbox, score, scene_id })
        })
        .collect();
    Ok(nms(dets, cfg.nms_iou))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub fppi: f64,
    pub miss_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mr: f64,
    pub ap: f64,
    /// One point per distinct score threshold, starting with the empty set.
    pub curve: Vec<CurvePoint>,
    /// Miss rate at each reference FPPI.
    pub sampled_miss_rates: Vec<f64>,
    pub n_scenes: usize,
    pub n_gt: usize,
    pub n_det: usize,
}

impl MetricReport {
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("fppi,missrate\n");
        for p in &self.curve {
            let _ = writeln!(out, "{},{}", p.fppi, p.miss_rate);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Outcome {
    Tp,
    Fp,
    Ignored,
}

/// Greedy matching in descending score order. A detection takes the unmatched
/// counted gt of highest IoU (at least `match_iou`); failing that it is
/// ignored if it overlaps an uncounted gt by `match_iou`, otherwise it is a
/// false positive.
fn match_scene(dets: &[Detection], gts: &[BBox], counted: &[bool], match_iou: f64) -> Vec<Outcome> {
    let mut taken = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if !counted[g] || taken[g] {
                    continue;
                }
                let v = iou(&d.bbox, gt);
                if v >= match_iou && best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            if let Some((g, _)) = best {
                taken[g] = true;
                Outcome::Tp
            } else if gts.iter().zip(counted).any(|(gt, c)| !c && iou(&d.bbox, gt) >= match_iou) {
                Outcome::Ignored
            } else {
                Outcome::Fp
            }
        })
        .collect()
}

/// Miss rate at each reference FPPI: the lowest miss rate among curve points
/// whose FPPI does not exceed the reference.
pub fn sample_curve(curve: &[CurvePoint]) -> Vec<f64> {
    reference_fppi()
        .iter()
        .map(|&r| curve.iter().filter(|p| p.fppi <= r).map(|p| p.miss_rate).fold(1.0, f64::min))
        .collect()
}

pub fn log_average(miss_rates: &[f64]) -> f64 {
    let mean_log = miss_rates.iter().map(|m| m.max(MISS_RATE_FLOOR).ln()).sum::<f64>() / miss_rates.len() as f64;
    mean_log.exp()
}

fn evaluate_with(dets: &[Vec<Detection>], gts: &[Vec<BBox>], counted: &[Vec<bool>], match_iou: f64) -> Result<MetricReport> {
    if dets.len() != gts.len() {
        return Err(Error::InvalidConfig(format!("{} detection sets for {} scenes", dets.len(), gts.len())));
    }
    if gts.is_empty() {
        return Err(Error::MetricUndefined("no scenes".into()));
    }
    let n_gt: usize = counted.iter().map(|c| c.iter().filter(|v| **v).count()).sum();
    if n_gt == 0 {
        return Err(Error::MetricUndefined("no ground-truth boxes".into()));
    }
    let n_scenes = gts.len();
    let mut scored: Vec<(f64, Outcome)> = Vec::new();
    for ((d, g), c) in dets.iter().zip(gts).zip(counted) {
        let mut d = d.clone();
        sort_by_score(&mut d);
        let outcomes = match_scene(&d, g, c, match_iou);
        scored.extend(d.iter().map(|x| x.score).zip(outcomes));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut curve = vec![CurvePoint { fppi: 0.0, miss_rate: 1.0 }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut ap = 0.0;
    let mut pr: Vec<(f64, f64)> = Vec::new();
    let mut i = 0;
    while i < scored.len() {
        let s = scored[i].0;
        while i < scored.len() && scored[i].0 == s {
            match scored[i].1 {
                Outcome::Tp => tp += 1,
                Outcome::Fp => fp += 1,
                Outcome::Ignored => {}
            }
            i += 1;
        }
        curve.push(CurvePoint { fppi: fp as f64 / n_scenes as f64, miss_rate: 1.0 - tp as f64 / n_gt as f64 });
        if tp + fp > 0 {
            pr.push((tp as f64 / n_gt as f64, tp as f64 / (tp + fp) as f64));
        }
    }
    // all-point interpolated precision
    let mut prev_recall = 0.0;
    for k in 0..pr.len() {
        let (recall, _) = pr[k];
        if recall > prev_recall {
            let best = pr[k..].iter().map(|p| p.1).fold(0.0, f64::max);
            ap += (recall - prev_recall) * best;
            prev_recall = recall;
        }
    }
    let sampled = sample_curve(&curve);
    Ok(MetricReport {
        mr: log_average(&sampled),
        ap,
        curve,
        sampled_miss_rates: sampled,
        n_scenes,
        n_gt,
        n_det: dets.iter().map(Vec::len).sum(),
    })
}

/// Log-average miss rate over FPPI in `[1e-2, 1]` and AP, every gt counted.
pub fn log_average_miss_rate(dets: &[Vec<Detection>], gts: &[Vec<BBox>], match_iou: f64) -> Result<MetricReport> {
    let counted: Vec<Vec<bool>> = gts.iter().map(|g| vec![true; g.len()]).collect();
    evaluate_with(dets, gts, &counted, match_iou)
}

/// Metrics restricted to the gts of each named occlusion band. Detections
/// matching only out-of-band gts are ignored; bands with no gts are omitted.
pub fn occlusion_sliced_mr(
    dets: &[Vec<Detection>],
    scenes: &[&Scene],
    match_iou: f64,
) -> Result<BTreeMap<String, MetricReport>> {
    let gts: Vec<Vec<BBox>> = scenes.iter().map(|s| s.gt_boxes.clone()).collect();
    let mut out = BTreeMap::new();
    for band in Band::NAMED {
        let counted: Vec<Vec<bool>> =
            scenes.iter().map(|s| s.occlusion_labels.iter().map(|l| band.contains(*l)).collect()).collect();
        if counted.iter().all(|c| c.iter().all(|v| !v)) {
            continue;
        }
        out.insert(band.to_string(), evaluate_with(dets, &gts, &counted, match_iou)?);
    }
    Ok(out)
}

/// Overall and per-band metrics of one detection run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: MetricReport,
    pub per_band: BTreeMap<String, MetricReport>,
}

pub fn evaluate_detections(dets: &[Vec<Detection>], scenes: &[&Scene], match_iou: f64) -> Result<EvalReport> {
    let gts: Vec<Vec<BBox>> = scenes.iter().map(|s| s.gt_boxes.clone()).collect();
    Ok(EvalReport {
        overall: log_average_miss_rate(dets, &gts, match_iou)?,
        per_band: occlusion_sliced_mr(dets, scenes, match_iou)?,
    })
}

impl EvalReport {
    /// `band,mr,ap,n_gt`, one row per band present.
    pub fn band_csv(&self) -> String {
        let mut out = String::from("band,mr,ap,n_gt\n");
        for (band, r) in &self.per_band {
            let _ = writeln!(out, "{band},{},{},{}", r.mr, r.ap, r.n_gt);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRow {
    pub scene_id: usize,
    pub anchor: usize,
    pub cls_score: f64,
    pub sum_log_sigma: f64,
    /// Ground truths overlapping the anchor's mean box with IoU above 0.5.
    pub matched_gt: usize,
}

/// Per-anchor score, summed log-sigma and matched-gt count for every scene.
pub fn variance_diagnostics(
    model: &ProposalModel,
    scenes: &[(usize, &Scene, &Raster)],
    grid: &AnchorGrid,
    coder: &BoxCoder,
) -> Result<Vec<DiagnosticRow>> {
    let mut rows = Vec::with_capacity(scenes.len() * grid.len());
    for &(scene_id, scene, raster) in scenes {
        let params = model.forward(scene_id, raster)?;
        for (j, (p, a)) in params.iter().zip(&grid.anchors).enumerate() {
            let mean_box = coder.decode_values(&p.dist.mu, a);
            rows.push(DiagnosticRow {
                scene_id,
                anchor: j,
                cls_score: sigmoid(p.cls_logit),
                sum_log_sigma: p.dist.log_sigma.iter().sum(),
                matched_gt: scene.gt_boxes.iter().filter(|g| iou(&mean_box, g) > 0.5).count(),
            });
        }
    }
    Ok(rows)
}

pub fn diagnostics_csv(rows: &[DiagnosticRow]) -> String {
    let mut out = String::from("scene,anchor,cls_score,sum_log_sigma,matched_gt\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.scene_id, r.anchor, r.cls_score, r.sum_log_sigma, r.matched_gt);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(cx: f64, score: f64, scene_id: usize) -> Detection {
        Detection { bbox: BBox { cx, cy: 0.0, w: 1.0, h: 1.0 }, score, scene_id }
    }

    #[test]
    fn nms_suppresses_duplicate() {
        let kept = nms(vec![det(0.0, 0.8, 0), det(0.0, 0.9, 0)], 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
    }

    #[test]
    fn reference_points() {
        let r = reference_fppi();
        assert!((r[0] - 0.01).abs() < 1e-15 && (r[8] - 1.0).abs() < 1e-15 && (r[4] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_empty() {
        let gts = vec![vec![BBox { cx: 0.0, cy: 0.0, w: 1.0, h: 1.0 }], vec![BBox { cx: 5.0, cy: 0.0, w: 1.0, h: 1.0 }]];
        let perfect = vec![vec![det(0.0, 1.0, 0)], vec![det(5.0, 1.0, 1)]];
        let r = log_average_miss_rate(&perfect, &gts, 0.5).unwrap();
        assert!(r.mr <= 1e-10 * (1.0 + 1e-9));
        assert_eq!(r.ap, 1.0);
        let r = log_average_miss_rate(&[vec![], vec![]], &gts, 0.5).unwrap();
        assert_eq!(r.mr, 1.0);
        assert_eq!(r.ap, 0.0);
    }

    #[test]
    fn no_gt_is_undefined() {
        let err = log_average_miss_rate(&[vec![det(0.0, 0.5, 0)]], &[vec![]], 0.5).unwrap_err();
        assert!(err.to_string().starts_with("metric undefined"));
    }

    #[test]
    fn one_tp_one_fp() {
        // scene 0: gt hit at score 0.9; scene 1: FP at 0.8 and a missed gt
        let gts = vec![vec![BBox { cx: 0.0, cy: 0.0, w: 1.0, h: 1.0 }], vec![BBox { cx: 0.0, cy: 0.0, w: 1.0, h: 1.0 }]];
        let dets = vec![vec![det(0.0, 0.9, 0)], vec![det(10.0, 0.8, 1)]];
        let r = log_average_miss_rate(&dets, &gts, 0.5).unwrap();
        // miss 0.5 at fppi 0 and 0.5; fppi 0.5 < 1 so every reference sees 0.5
        assert!((r.mr - 0.5).abs() < 1e-15);
        assert_eq!(r.curve.len(), 3);
    }
}
