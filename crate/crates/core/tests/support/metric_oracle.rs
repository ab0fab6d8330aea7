use varmatch::evaluation::Detection;
use varmatch::geometry::{iou, BBox};

/// Evaluates every threshold from scratch: the detections with score at
/// least `t`, re-matched greedily, for every distinct `t`.
pub fn brute_force_mr(dets: &[Vec<Detection>], gts: &[Vec<BBox>], counted: &[Vec<bool>], thr: f64) -> f64 {
    let n_gt = counted.iter().flatten().filter(|c| **c).count() as f64;
    let n_scenes = gts.len() as f64;
    let mut thresholds: Vec<f64> = dets.iter().flatten().map(|d| d.score).collect();
    thresholds.push(f64::INFINITY);
    let mut points = Vec::new();
    for &t in &thresholds {
        let (mut tp, mut fp) = (0usize, 0usize);
        for ((ds, gs), cs) in dets.iter().zip(gts).zip(counted) {
            let mut kept: Vec<&Detection> = ds.iter().filter(|d| d.score >= t).collect();
            kept.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
            let mut used = vec![false; gs.len()];
            for d in kept {
                let mut best = None;
                let mut best_iou = thr;
                for g in 0..gs.len() {
                    let v = iou(&d.bbox, &gs[g]);
                    if cs[g] && !used[g] && v >= best_iou && (best.is_none() || v > best_iou) {
                        best = Some(g);
                        best_iou = v;
                    }
                }
                match best {
                    Some(g) => {
                        used[g] = true;
                        tp += 1;
                    }
                    None => {
                        let ignored = (0..gs.len()).any(|g| !cs[g] && iou(&d.bbox, &gs[g]) >= thr);
                        if !ignored {
                            fp += 1;
                        }
                    }
                }
            }
        }
        points.push((fp as f64 / n_scenes, 1.0 - tp as f64 / n_gt));
    }
    let mut log_sum = 0.0;
    for i in 0..9 {
        let r = 10f64.powf(-2.0 + 0.25 * i as f64);
        let mut m = 1.0f64;
        for &(f, mr) in &points {
            if f <= r && mr < m {
                m = mr;
            }
        }
        log_sum += m.max(1e-10).ln();
    }
    (log_sum / 9.0).exp()
}
