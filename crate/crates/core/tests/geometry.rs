use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use varmatch::geometry::*;

fn bbox() -> impl Strategy<Value = BBox> {
    (-50.0..50.0f64, -50.0..50.0f64, 0.1..30.0f64, 0.1..30.0f64).prop_map(|(cx, cy, w, h)| BBox { cx, cy, w, h })
}

fn edges(b: &BBox) -> ([f64; 2], [f64; 2]) {
    ([b.x1(), b.x2()], [b.y1(), b.y2()])
}

/// True when any pair of parallel edges is within `tol`.
fn near_kink(a: &BBox, b: &BBox, tol: f64) -> bool {
    let (ax, ay) = edges(a);
    let (bx, by) = edges(b);
    ax.iter().any(|p| bx.iter().any(|q| (p - q).abs() < tol)) || ay.iter().any(|p| by.iter().any(|q| (p - q).abs() < tol))
}

fn param(b: &BBox, k: usize) -> f64 {
    b.to_array()[k]
}

fn with_param(b: &BBox, k: usize, v: f64) -> BBox {
    let mut a = b.to_array();
    a[k] = v;
    BBox { cx: a[0], cy: a[1], w: a[2], h: a[3] }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

proptest! {
    #[test]
    fn iou_bounded_and_symmetric(a in bbox(), b in bbox()) {
        let v = iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(v, iou(&b, &a));
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn iou_scale_invariant(a in bbox(), b in bbox(), s in 0.01..100.0f64) {
        let sa = BBox { cx: a.cx * s, cy: a.cy * s, w: a.w * s, h: a.h * s };
        let sb = BBox { cx: b.cx * s, cy: b.cy * s, w: b.w * s, h: b.h * s };
        prop_assert!((iou(&a, &b) - iou(&sa, &sb)).abs() < 1e-12);
    }

    #[test]
    fn fa_round_trip(b in bbox(), a in bbox(), normalized in any::<bool>()) {
        let coder = if normalized { BoxCoder::fa_normalized() } else { BoxCoder::unit(EncodingKind::Fa) };
        let anchor = Anchor::standalone(a);
        let back = coder.decode(&coder.encode(&b, &anchor).unwrap(), &anchor).unwrap();
        for (x, y) in back.to_array().iter().zip(b.to_array()) {
            prop_assert!((x - y).abs() <= 1e-9 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn fcos_round_trip(b in bbox(), fx in 0.01..0.99f64, fy in 0.01..0.99f64, aw in 1.0..20.0f64, ah in 1.0..20.0f64) {
        let anchor = Anchor::standalone(BBox { cx: b.x1() + fx * b.w, cy: b.y1() + fy * b.h, w: aw, h: ah });
        let coder = BoxCoder::unit(EncodingKind::Fcos);
        let back = coder.decode(&coder.encode(&b, &anchor).unwrap(), &anchor).unwrap();
        prop_assert!(back.w > 0.0 && back.h > 0.0);
        for (x, y) in back.to_array().iter().zip(b.to_array()) {
            prop_assert!((x - y).abs() <= 1e-9 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn fcos_decode_always_valid(v in prop::array::uniform4(-5.0..5.0f64), a in bbox()) {
        let out = BoxCoder::unit(EncodingKind::Fcos).decode_values(&v, &Anchor::standalone(a));
        prop_assert!(out.w > 0.0 && out.h > 0.0);
    }

    #[test]
    fn decode_jacobian_matches_finite_differences(v in prop::array::uniform4(-2.0..2.0f64), a in bbox(), fcos in any::<bool>()) {
        let coder = if fcos { BoxCoder::unit(EncodingKind::Fcos) } else { BoxCoder::fa_normalized() };
        let anchor = Anchor::standalone(a);
        let jac = coder.decode_jacobian(&v, &anchor);
        for k in 0..4 {
            let mut up = v;
            up[k] += 1e-6;
            let mut dn = v;
            dn[k] -= 1e-6;
            let bu = coder.decode_values(&up, &anchor).to_array();
            let bd = coder.decode_values(&dn, &anchor).to_array();
            for i in 0..4 {
                let fd = (bu[i] - bd[i]) / 2e-6;
                prop_assert!(rel_err(jac[i][k], fd) < 1e-6, "J[{}][{}] {} vs {}", i, k, jac[i][k], fd);
            }
        }
    }
}

#[test]
fn iou_gradient_matches_finite_differences_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut checked = 0;
    while checked < 1000 {
        let a = BBox::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(0.5..6.0), rng.random_range(0.5..6.0)).unwrap();
        let b = BBox::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(0.5..6.0), rng.random_range(0.5..6.0)).unwrap();
        if iou(&a, &b) < 1e-3 || near_kink(&a, &b, 1e-4) {
            continue;
        }
        for wrt in [Wrt::A, Wrt::B] {
            let g = iou_gradient(&a, &b, wrt);
            for k in 0..4 {
                let f = |x: f64| match wrt {
                    Wrt::A => iou(&with_param(&a, k, x), &b),
                    Wrt::B => iou(&a, &with_param(&b, k, x)),
                };
                let p = match wrt {
                    Wrt::A => param(&a, k),
                    Wrt::B => param(&b, k),
                };
                let fd = (f(p + 1e-6) - f(p - 1e-6)) / 2e-6;
                assert!(rel_err(g[k], fd) < 1e-5, "{a:?} {b:?} {wrt:?} k={k}: {} vs {fd}", g[k]);
            }
        }
        checked += 1;
    }
}

#[test]
fn iou_gradient_at_kink_is_right_sided() {
    let a = BBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
    let g = iou_gradient(&a, &a, Wrt::A);
    let h = 1e-7;
    let right = (iou(&with_param(&a, 2, 1.0 + h), &a) - 1.0) / h;
    assert!((g[2] - right).abs() < 1e-6, "{} vs {right}", g[2]);
    let left = (1.0 - iou(&with_param(&a, 2, 1.0 - h), &a)) / h;
    assert!((g[2] - left).abs() > 0.1);
}

#[test]
fn iou_gradient_one_dimensional_slice() {
    let a = BBox::new(0.1, 0.0, 1.0, 1.0).unwrap();
    let b = BBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
    let g = iou_gradient(&a, &b, Wrt::A);
    // closed form (1 - d) / (1 + d)
    let slice = |d: f64| (1.0 - d) / (1.0 + d);
    let fd = (slice(0.1 + 1e-6) - slice(0.1 - 1e-6)) / 2e-6;
    assert!((g[0] - fd).abs() < 1e-8);
    assert!((g[0] + 2.0 / 1.21).abs() < 1e-8);
}

#[test]
fn fa_example_encoding() {
    let anchor = Anchor::standalone(BBox::new(0.0, 0.0, 2.0, 2.0).unwrap());
    let coder = BoxCoder::unit(EncodingKind::Fa);
    let b = BBox::new(2.0, 0.0, 4.0, 2.0).unwrap();
    let enc = coder.encode(&b, &anchor).unwrap();
    assert_eq!(enc.values, [1.0, 0.0, 2f64.ln(), 0.0]);
    assert_eq!(coder.decode(&enc, &anchor).unwrap(), b);
    assert_eq!(coder.encode(&anchor.bbox, &anchor).unwrap().values, [0.0; 4]);
}

#[test]
fn fcos_rejects_outside_location() {
    let anchor = Anchor::standalone(BBox::new(10.0, 0.0, 1.0, 1.0).unwrap());
    let b = BBox::new(0.0, 0.0, 2.0, 2.0).unwrap();
    let err = BoxCoder::unit(EncodingKind::Fcos).encode(&b, &anchor).unwrap_err();
    assert!(err.to_string().contains("location not inside box"));
}
