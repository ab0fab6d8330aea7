//! Double-double arithmetic (about 32 significant digits), enough to
//! evaluate `log(1 - k(s) s)` without the cancellation that plain `f64`
//! suffers when `k(s) s` is close to 1.

#![allow(dead_code)]

use std::ops::{Add, Div, Mul, Neg, Sub};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

const LN2: Dd = Dd { hi: std::f64::consts::LN_2, lo: 2.319_046_813_846_299_6e-17 };

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl Dd {
    pub fn new(x: f64) -> Dd {
        Dd { hi: x, lo: 0.0 }
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    fn scale(self, k: i32) -> Dd {
        let f = 2f64.powi(k);
        Dd { hi: self.hi * f, lo: self.lo * f }
    }

    pub fn powi(self, n: u32) -> Dd {
        (0..n).fold(Dd::new(1.0), |acc, _| acc * self)
    }

    pub fn exp(self) -> Dd {
        let k = (self.hi / LN2.hi).round();
        let r = (self - LN2 * Dd::new(k)).scale(-10);
        // Taylor series of exp(r) - 1 for |r| < 2^-10
        let mut term = r;
        let mut sum = r;
        for n in 2..=14 {
            term = term * r / Dd::new(n as f64);
            sum = sum + term;
        }
        // (1 + s)^2 - 1 = s (2 + s), ten times
        for _ in 0..10 {
            sum = sum * (sum + Dd::new(2.0));
        }
        (sum + Dd::new(1.0)).scale(k as i32)
    }

    pub fn ln(self) -> Dd {
        assert!(self.hi > 0.0, "ln of a non-positive value");
        let mut y = Dd::new(self.hi.ln());
        for _ in 0..3 {
            y = y + self * (-y).exp() - Dd::new(1.0);
        }
        y
    }
}

impl Add for Dd {
    type Output = Dd;
    fn add(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, o.hi);
        let (t, f) = two_sum(self.lo, o.lo);
        let (s, e) = quick_two_sum(s, e + t);
        let (hi, lo) = quick_two_sum(s, e + f);
        Dd { hi, lo }
    }
}

impl Neg for Dd {
    type Output = Dd;
    fn neg(self) -> Dd {
        Dd { hi: -self.hi, lo: -self.lo }
    }
}

impl Sub for Dd {
    type Output = Dd;
    fn sub(self, o: Dd) -> Dd {
        self + (-o)
    }
}

impl Mul for Dd {
    type Output = Dd;
    fn mul(self, o: Dd) -> Dd {
        let (p, e) = two_prod(self.hi, o.hi);
        let e = e + (self.hi * o.lo + self.lo * o.hi);
        let (hi, lo) = quick_two_sum(p, e);
        Dd { hi, lo }
    }
}

impl Div for Dd {
    type Output = Dd;
    fn div(self, o: Dd) -> Dd {
        let q1 = self.hi / o.hi;
        let r = self - o * Dd::new(q1);
        let q2 = r.hi / o.hi;
        let r = r - o * Dd::new(q2);
        let q3 = r.hi / o.hi;
        let (hi, lo) = quick_two_sum(q1, q2);
        Dd { hi, lo } + Dd::new(q3)
    }
}

/// `log(1 - k s)` with `k = (1 - (1 - s)^(s^gamma)) / s`, evaluated
/// literally in double-double for integer `gamma`.
pub fn keep_form_log(s: f64, gamma: u32) -> f64 {
    let s = Dd::new(s);
    let one = Dd::new(1.0);
    let survive = (s.powi(gamma) * (one - s).ln()).exp();
    let k = (one - survive) / s;
    (one - k * s).ln().to_f64()
}
