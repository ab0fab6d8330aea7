use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use varmatch::distributions::{DiagonalGaussian4, NoiseSource};
use varmatch::estimators::*;
use varmatch::geometry::{iou, Anchor, BBox, BoxCoder, EncodingKind};
use varmatch::pseudo_likelihood::LikelihoodConfig;

fn ctx(source: &NoiseSource, step: u64) -> NoiseContext<'_> {
    NoiseContext { source, step, scene: 0 }
}

fn toy() -> (QuadraticToy, Vec<AnchorParams>) {
    let toy = QuadraticToy { centers: vec![[0.5, -1.0, 2.0, 0.0], [0.0, 0.3, -0.7, 1.5]] };
    let params = vec![
        AnchorParams { cls_logit: 0.0, dist: DiagonalGaussian4::new([0.1, 0.2, -0.3, 0.4], [0.0, -0.5, 0.3, -1.0]) },
        AnchorParams { cls_logit: 0.0, dist: DiagonalGaussian4::new([-1.0, 0.0, 0.5, 0.2], [0.2, 0.1, -0.2, 0.0]) },
    ];
    (toy, params)
}

fn box_coords(p: usize) -> impl Iterator<Item = usize> {
    (0..p).flat_map(|j| (1..9).map(move |k| j * PARAMS_PER_ANCHOR + k))
}

fn within_3se(est: &GradientEstimate, exact: &[f64], coords: impl Iterator<Item = usize>) {
    for i in coords {
        let tol = 3.0 * est.grad_std_err[i];
        assert!((est.grad[i] - exact[i]).abs() < tol, "{:?} coord {i}: {} vs {} (3se {tol})", est.estimator, est.grad[i], exact[i]);
    }
}

/// A gt with four anchors around it, in canvas units.
fn four_anchor_scene() -> (Vec<BBox>, Vec<Anchor>) {
    let gts = vec![BBox::new(20.0, 30.0, 12.0, 30.0).unwrap(), BBox::new(29.0, 31.0, 11.0, 27.0).unwrap()];
    let anchors = [(18.0, 28.0), (22.0, 28.0), (26.0, 32.0), (30.0, 32.0)]
        .iter()
        .map(|&(x, y)| Anchor::standalone(BBox::new(x, y, 10.0, 25.0).unwrap()))
        .collect();
    (gts, anchors)
}

fn random_params(n: usize, seed: u64, log_sigma: Option<f64>) -> Vec<AnchorParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| AnchorParams {
            cls_logit: rng.random_range(-1.5..1.5),
            dist: DiagonalGaussian4::new(
                std::array::from_fn(|_| rng.random_range(-0.8..0.8)),
                std::array::from_fn(|_| log_sigma.unwrap_or_else(|| rng.random_range(-1.5..-0.5))),
            ),
        })
        .collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn reparam_matches_closed_form_toy() {
    let (toy, params) = toy();
    let src = NoiseSource::new(1);
    let est = reparam_gradient(&toy, &params, 10_000, ctx(&src, 0)).unwrap();
    within_3se(&est, &toy.expected_gradient(&params), box_coords(2));
    assert_eq!(est.estimator, EstimatorKind::Reparam);
    assert_eq!(est.grad.len(), 2 * PARAMS_PER_ANCHOR);
}

#[test]
fn score_function_matches_closed_form_toy() {
    let (toy, params) = toy();
    let src = NoiseSource::new(2);
    let exact = toy.expected_gradient(&params);
    for (samples, baseline) in [(10_000, Baseline::Mean), (100_000, Baseline::None), (100_000, Baseline::Mean)] {
        let est = score_function_gradient(&toy, &params, samples, ctx(&src, 0), baseline).unwrap();
        within_3se(&est, &exact, box_coords(2));
    }
}

#[test]
fn finite_differences_match_closed_form_toy() {
    let (toy, params) = toy();
    let src = NoiseSource::new(3);
    let fd = finite_diff_gradient(&toy, &params, 10_000, ctx(&src, 0), 1e-4).unwrap();
    // same draws as the reparameterized estimate, which carries the error bars
    let rp = reparam_gradient(&toy, &params, 10_000, ctx(&src, 0)).unwrap();
    let exact = toy.expected_gradient(&params);
    for i in box_coords(2) {
        assert!((fd.grad[i] - rp.grad[i]).abs() < 1e-6, "coord {i}");
        assert!((fd.grad[i] - exact[i]).abs() < 3.0 * rp.grad_std_err[i]);
    }
}

#[test]
fn reparam_has_lower_variance_than_score_function() {
    let (toy, params) = toy();
    let src = NoiseSource::new(4);
    let reps = 100;
    let mut rp = Vec::new();
    let mut sf = Vec::new();
    for r in 0..reps {
        rp.push(reparam_gradient(&toy, &params, 16, ctx(&src, r)).unwrap().grad);
        sf.push(score_function_gradient(&toy, &params, 16, ctx(&src, r), Baseline::Mean).unwrap().grad);
    }
    let var = |xs: &[Vec<f64>], i: usize| {
        let m = xs.iter().map(|x| x[i]).sum::<f64>() / xs.len() as f64;
        xs.iter().map(|x| (x[i] - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
    };
    let total = |xs: &[Vec<f64>]| box_coords(2).map(|i| var(xs, i)).sum::<f64>();
    assert!(total(&sf) > total(&rp), "score {} reparam {}", total(&sf), total(&rp));
    for i in box_coords(2) {
        assert!(var(&sf, i) > var(&rp, i), "coord {i}");
    }
}

#[test]
fn constant_objective_has_zero_expected_score_gradient() {
    let obj = ConstantObjective { n_anchors: 3, value: 2.5 };
    let params = random_params(3, 5, None);
    let src = NoiseSource::new(5);
    let est = score_function_gradient(&obj, &params, 20_000, ctx(&src, 0), Baseline::None).unwrap();
    within_3se(&est, &vec![0.0; 27], box_coords(3));
    let mean = score_function_gradient(&obj, &params, 100, ctx(&src, 0), Baseline::Mean).unwrap();
    assert!(mean.grad.iter().all(|g| *g == 0.0));
}

#[test]
fn mean_baseline_needs_two_samples() {
    let (toy, params) = toy();
    let src = NoiseSource::new(0);
    assert!(score_function_gradient(&toy, &params, 1, ctx(&src, 0), Baseline::Mean).is_err());
    assert!(score_function_gradient(&toy, &params, 1, ctx(&src, 0), Baseline::None).is_ok());
    assert!(reparam_gradient(&toy, &params, 0, ctx(&src, 0)).is_err());
    assert!(finite_diff_gradient(&toy, &params, 1, ctx(&src, 0), 1e-2).is_err());
}

#[test]
fn point_mass_reduces_to_deterministic_gradient() {
    let (gts, anchors) = four_anchor_scene();
    let obj = DetectionObjective::new(&gts, &anchors, BoxCoder::fa_normalized(), LikelihoodConfig::default()).unwrap();
    let params = random_params(4, 6, Some(1e-12f64.ln()));
    let det = deterministic_gradient(&obj, &params);
    let src = NoiseSource::new(6);
    for samples in [1, 5] {
        let est = reparam_gradient(&obj, &params, samples, ctx(&src, 0)).unwrap();
        for j in 0..4 {
            for k in 0..5 {
                let i = j * PARAMS_PER_ANCHOR + k;
                assert!((est.grad[i] - det.grad[i]).abs() < 1e-8, "coord {i}: {} vs {}", est.grad[i], det.grad[i]);
            }
        }
        assert!((est.value - det.value).abs() < 1e-8);
    }
}

#[test]
fn sample_streams_are_prefix_stable() {
    let (gts, anchors) = four_anchor_scene();
    let obj = DetectionObjective::new(&gts, &anchors, BoxCoder::fa_normalized(), LikelihoodConfig::default()).unwrap();
    let params = random_params(4, 7, None);
    let src = NoiseSource::new(7);
    let one = reparam_gradient(&obj, &params, 1, ctx(&src, 3)).unwrap();
    let two = reparam_gradient(&obj, &params, 2, ctx(&src, 3)).unwrap();
    let noise = ctx(&src, 3);
    assert_eq!(noise.sample_noise(4, 0), ctx(&src, 3).sample_noise(4, 0));
    // the second sample alone
    let eps = noise.sample_noise(4, 1);
    let eval = obj.evaluate(&logits_of(&params), &latent_sample(&params, &eps));
    let mut g1 = vec![0.0; 36];
    reparam_sample_gradient(&params, &eps, &eval, &mut g1);
    for i in 0..36 {
        assert!((two.grad[i] - 0.5 * (one.grad[i] + g1[i])).abs() < 1e-12);
    }
}

#[test]
fn estimates_are_bitwise_deterministic() {
    let (gts, anchors) = four_anchor_scene();
    let obj = DetectionObjective::new(&gts, &anchors, BoxCoder::fa_normalized(), LikelihoodConfig::default()).unwrap();
    let params = random_params(4, 8, None);
    let a = reparam_gradient(&obj, &params, 50, ctx(&NoiseSource::new(8), 1)).unwrap();
    let b = reparam_gradient(&obj, &params, 50, ctx(&NoiseSource::new(8), 1)).unwrap();
    assert_eq!(a, b);
    let c = score_function_gradient(&obj, &params, 50, ctx(&NoiseSource::new(8), 1), Baseline::Mean).unwrap();
    let d = score_function_gradient(&obj, &params, 50, ctx(&NoiseSource::new(8), 1), Baseline::Mean).unwrap();
    assert_eq!(c, d);
}

#[test]
fn reparam_matches_common_random_number_differences_on_four_anchors() {
    let (gts, anchors) = four_anchor_scene();
    let obj = DetectionObjective::new(&gts, &anchors, BoxCoder::fa_normalized(), LikelihoodConfig::default()).unwrap();
    let params = random_params(4, 9, None);
    let src = NoiseSource::new(9);
    let rp = reparam_gradient(&obj, &params, 1_000, ctx(&src, 0)).unwrap();
    let fd = finite_diff_gradient(&obj, &params, 1_000, ctx(&src, 0), 1e-6).unwrap();
    let c = cosine(&rp.grad, &fd.grad);
    assert!(c > 0.999, "cosine {c}");
    assert!(rp.grad.iter().all(|g| g.is_finite()));
}

#[test]
fn empty_scene_with_suppressed_scores_has_near_zero_gradient() {
    let (_, anchors) = four_anchor_scene();
    let obj = DetectionObjective::new(&[], &anchors, BoxCoder::fa_normalized(), LikelihoodConfig::default()).unwrap();
    let mut params = random_params(4, 10, None);
    for p in &mut params {
        p.cls_logit = -15.0;
    }
    let src = NoiseSource::new(10);
    let fd = finite_diff_gradient(&obj, &params, 100, ctx(&src, 0), 1e-4).unwrap();
    assert!(fd.grad.iter().all(|g| g.abs() < 1e-9), "{:?}", fd.grad);
    assert!(fd.value.abs() < 1e-9);
}

#[test]
fn deterministic_surface_equals_pointwise_iou() {
    for kind in [EncodingKind::Fa, EncodingKind::Fcos] {
        let axes = default_surface_axes(kind);
        let s = expected_iou_surface(kind, axes.clone(), 0.0, 1, 0).unwrap();
        for (i, a) in axes[0].values().into_iter().enumerate() {
            for (j, b) in axes[1].values().into_iter().enumerate() {
                let direct = iou(&surface_box(kind, a, b).unwrap(), &unit_gt());
                assert!((s.at(i, j) - direct).abs() < 1e-12);
            }
        }
    }
    let at_gt = expected_iou_surface(EncodingKind::Fa, [Axis::new("x", 0.0, 1.0, 2), Axis::new("w", 1.0, 2.0, 2)], 0.0, 1, 0).unwrap();
    assert_eq!(at_gt.at(0, 0), 1.0);
}

#[test]
fn surface_converges_in_sample_count() {
    let axes = [Axis::new("x", -1.5, 1.5, 31), Axis::new("w", 0.25, 3.0, 28)];
    let small = expected_iou_surface(EncodingKind::Fa, axes.clone(), 0.1, 10_000, 11).unwrap();
    let large = expected_iou_surface(EncodingKind::Fa, axes, 0.1, 100_000, 12).unwrap();
    let sup = small.values.iter().zip(&large.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(sup < 0.01, "sup diff {sup}");
    assert!(large.values.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn surface_tends_to_deterministic_as_sigma_shrinks() {
    let axes = [Axis::new("x", -1.5, 1.5, 31), Axis::new("w", 0.25, 3.0, 28)];
    let exact = expected_iou_surface(EncodingKind::Fa, axes.clone(), 0.0, 1, 0).unwrap();
    let mut last = f64::INFINITY;
    for sigma in [0.1, 0.01, 0.001] {
        let s = expected_iou_surface(EncodingKind::Fa, axes.clone(), sigma, 2_000, 13).unwrap();
        let sup = s.values.iter().zip(&exact.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(sup < last, "sigma {sigma}: {sup} !< {last}");
        last = sup;
    }
    assert!(last < 0.01);
}

#[test]
fn kink_jump_decreases_with_sigma() {
    let slices = default_kink_slices(EncodingKind::Fa);
    let jumps: Vec<f64> = [0.0, 0.05, 0.1, 0.2]
        .iter()
        .map(|&s| kink_jump(EncodingKind::Fa, s, &slices, 100_000, 14, 1e-2).unwrap().max_jump)
        .collect();
    for w in jumps.windows(2) {
        assert!(w[1] < w[0], "{jumps:?}");
    }
    assert!(jumps[0] > 0.5);
}

#[test]
fn surface_csv_layout() {
    let s = expected_iou_surface(EncodingKind::Fa, [Axis::new("x", 0.0, 1.0, 2), Axis::new("w", 1.0, 2.0, 3)], 0.0, 1, 0).unwrap();
    let csv = s.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "x,w,expected_iou");
    assert_eq!(lines.len(), 7);
    assert!(lines[1].starts_with("0,1,1"));
}
