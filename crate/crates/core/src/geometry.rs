//! Axis-aligned boxes, anchor-relative encodings and IoU with its analytic
//! gradient.
//!
//! Boxes are stored in center-size form. IoU is piecewise smooth; where an
//! edge of one box coincides with an edge of the other the derivative has a
//! kink, and [`iou_gradient`] returns the right-sided derivative there (the
//! derivative observed under a small positive perturbation of the parameter).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned rectangle in canvas units, center-size form.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    /// Checked constructor; width and height must be finite and positive.
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = BBox { cx, cy, w, h };
        if !(w > 0.0 && h > 0.0) || !b.is_finite() {
            return Err(Error::InvalidBox { cx, cy, w, h });
        }
        Ok(b)
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        BBox::new(0.5 * (x1 + x2), 0.5 * (y1 + y2), x2 - x1, y2 - y1)
    }

    pub fn is_finite(&self) -> bool {
        self.cx.is_finite() && self.cy.is_finite() && self.w.is_finite() && self.h.is_finite()
    }

    pub fn x1(&self) -> f64 {
        self.cx - 0.5 * self.w
    }
    pub fn x2(&self) -> f64 {
        self.cx + 0.5 * self.w
    }
    pub fn y1(&self) -> f64 {
        self.cy - 0.5 * self.h
    }
    pub fn y2(&self) -> f64 {
        self.cy + 0.5 * self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// `[cx, cy, w, h]`.
    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_array(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x1() && x <= self.x2() && y >= self.y1() && y <= self.y2()
    }

    pub fn translated(&self, dx: f64, dy: f64) -> BBox {
        BBox { cx: self.cx + dx, cy: self.cy + dy, ..*self }
    }
}

/// Position of an anchor in the grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridIndex {
    pub row: usize,
    pub col: usize,
    pub level: usize,
}

/// A default box at a grid location.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub bbox: BBox,
    pub grid_index: GridIndex,
}

impl Anchor {
    /// Anchor that is not part of any grid (row/col/level all zero).
    pub fn standalone(bbox: BBox) -> Self {
        Anchor { bbox, grid_index: GridIndex { row: 0, col: 0, level: 0 } }
    }
}

fn overlap_1d(a1: f64, a2: f64, b1: f64, b2: f64) -> f64 {
    (a2.min(b2) - a1.max(b1)).max(0.0)
}

/// Intersection over union of two valid boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    if a == b {
        return 1.0;
    }
    let iw = overlap_1d(a.x1(), a.x2(), b.x1(), b.x2());
    let ih = overlap_1d(a.y1(), a.y2(), b.y1(), b.y2());
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Which box [`iou_gradient`] differentiates with respect to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Wrt {
    A,
    B,
}

/// Right-sided derivative of `overlap_1d` with respect to a parameter that
/// moves the first interval's edges at rates `(d1, d2)`.
fn overlap_1d_derivative(a1: f64, a2: f64, b1: f64, b2: f64, d1: f64, d2: f64) -> (f64, f64) {
    // lo = max(a1, b1)
    let dlo = if a1 > b1 {
        d1
    } else if a1 < b1 {
        0.0
    } else {
        d1.max(0.0)
    };
    // hi = min(a2, b2)
    let dhi = if a2 < b2 {
        d2
    } else if a2 > b2 {
        0.0
    } else {
        d2.min(0.0)
    };
    let raw = a2.min(b2) - a1.max(b1);
    let draw = dhi - dlo;
    let d = if raw > 0.0 {
        draw
    } else if raw < 0.0 {
        0.0
    } else {
        draw.max(0.0)
    };
    (raw.max(0.0), d)
}

/// Gradient of `iou(a, b)` with respect to `(cx, cy, w, h)` of the chosen
/// box.
///
/// At kinks (coincident edges) the right-sided derivative is returned.
pub fn iou_gradient(a: &BBox, b: &BBox, wrt: Wrt) -> [f64; 4] {
    let (p, q) = match wrt {
        Wrt::A => (a, b),
        Wrt::B => (b, a),
    };
    // Edge rates (d x1, d x2) for each parameter of p.
    // cx moves both edges by +1, w moves them by -1/2 and +1/2.
    let x_rates = [(1.0, 1.0), (0.0, 0.0), (-0.5, 0.5), (0.0, 0.0)];
    let y_rates = [(0.0, 0.0), (1.0, 1.0), (0.0, 0.0), (-0.5, 0.5)];
    let area_rates = [0.0, 0.0, p.h, p.w];

    let mut grad = [0.0; 4];
    for k in 0..4 {
        let (iw, diw) = overlap_1d_derivative(p.x1(), p.x2(), q.x1(), q.x2(), x_rates[k].0, x_rates[k].1);
        let (ih, dih) = overlap_1d_derivative(p.y1(), p.y2(), q.y1(), q.y2(), y_rates[k].0, y_rates[k].1);
        let inter = iw * ih;
        let dinter = diw * ih + iw * dih;
        if inter <= 0.0 && dinter <= 0.0 {
            continue;
        }
        let union = p.area() + q.area() - inter;
        let dunion = area_rates[k] - dinter;
        grad[k] = (dinter * union - inter * dunion) / (union * union);
    }
    grad
}

/// Box parameterization relative to an anchor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum EncodingKind {
    /// `(dx, dy, dlogw, dlogh)` relative to the anchor box.
    Fa,
    /// Log-distances `(l, t, r, b)` from the anchor center to the box sides.
    Fcos,
}

/// Four encoded regression variables.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxEncoding {
    pub kind: EncodingKind,
    pub values: [f64; 4],
}

/// Encoder/decoder between boxes and anchor-relative encodings.
///
/// FA:
/// `dx = (cx - ax) / (aw * s0)`, `dy = (cy - ay) / (ah * s1)`,
/// `dlogw = ln(w / aw) / s2`, `dlogh = ln(h / ah) / s3`.
///
/// FCOS: `v = (ln(l / aw), ln(t / ah), ln(r / aw), ln(b / ah)) / s` where
/// `l = ax - x1`, `t = ay - y1`, `r = x2 - ax`, `b = y2 - ay`.
///
/// `s` are per-coordinate scales ("target stds"); the unit coder uses 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxCoder {
    pub kind: EncodingKind,
    pub stds: [f64; 4],
}

impl BoxCoder {
    pub fn new(kind: EncodingKind, stds: [f64; 4]) -> Self {
        BoxCoder { kind, stds }
    }

    pub fn unit(kind: EncodingKind) -> Self {
        BoxCoder { kind, stds: [1.0; 4] }
    }

    /// FA coder with the usual detection-head normalization `(0.1, 0.1, 0.2, 0.2)`.
    pub fn fa_normalized() -> Self {
        BoxCoder { kind: EncodingKind::Fa, stds: [0.1, 0.1, 0.2, 0.2] }
    }

    pub fn encode(&self, bbox: &BBox, anchor: &Anchor) -> Result<BoxEncoding> {
        let a = &anchor.bbox;
        let s = &self.stds;
        let values = match self.kind {
            EncodingKind::Fa => [
                (bbox.cx - a.cx) / (a.w * s[0]),
                (bbox.cy - a.cy) / (a.h * s[1]),
                (bbox.w / a.w).ln() / s[2],
                (bbox.h / a.h).ln() / s[3],
            ],
            EncodingKind::Fcos => {
                let l = a.cx - bbox.x1();
                let t = a.cy - bbox.y1();
                let r = bbox.x2() - a.cx;
                let b = bbox.y2() - a.cy;
                if !(l > 0.0 && t > 0.0 && r > 0.0 && b > 0.0) {
                    return Err(Error::LocationNotInsideBox);
                }
                [
                    (l / a.w).ln() / s[0],
                    (t / a.h).ln() / s[1],
                    (r / a.w).ln() / s[2],
                    (b / a.h).ln() / s[3],
                ]
            }
        };
        Ok(BoxEncoding { kind: self.kind, values })
    }

    /// Decodes raw encoding values; total for finite input.
    pub fn decode_values(&self, v: &[f64; 4], anchor: &Anchor) -> BBox {
        let a = &anchor.bbox;
        let s = &self.stds;
        match self.kind {
            EncodingKind::Fa => BBox {
                cx: a.cx + v[0] * s[0] * a.w,
                cy: a.cy + v[1] * s[1] * a.h,
                w: a.w * (v[2] * s[2]).exp(),
                h: a.h * (v[3] * s[3]).exp(),
            },
            EncodingKind::Fcos => {
                let l = a.w * (v[0] * s[0]).exp();
                let t = a.h * (v[1] * s[1]).exp();
                let r = a.w * (v[2] * s[2]).exp();
                let b = a.h * (v[3] * s[3]).exp();
                BBox { cx: a.cx + 0.5 * (r - l), cy: a.cy + 0.5 * (b - t), w: l + r, h: t + b }
            }
        }
    }

    pub fn decode(&self, enc: &BoxEncoding, anchor: &Anchor) -> Result<BBox> {
        if enc.kind != self.kind {
            return Err(Error::EncodingKindMismatch);
        }
        Ok(self.decode_values(&enc.values, anchor))
    }

    /// Jacobian `J[i][k] = d box_i / d v_k` of [`decode_values`](Self::decode_values),
    /// box order `(cx, cy, w, h)`.
    pub fn decode_jacobian(&self, v: &[f64; 4], anchor: &Anchor) -> [[f64; 4]; 4] {
        let a = &anchor.bbox;
        let s = &self.stds;
        let mut j = [[0.0; 4]; 4];
        match self.kind {
            EncodingKind::Fa => {
                j[0][0] = s[0] * a.w;
                j[1][1] = s[1] * a.h;
                j[2][2] = s[2] * a.w * (v[2] * s[2]).exp();
                j[3][3] = s[3] * a.h * (v[3] * s[3]).exp();
            }
            EncodingKind::Fcos => {
                let dl = s[0] * a.w * (v[0] * s[0]).exp();
                let dt = s[1] * a.h * (v[1] * s[1]).exp();
                let dr = s[2] * a.w * (v[2] * s[2]).exp();
                let db = s[3] * a.h * (v[3] * s[3]).exp();
                j[0][0] = -0.5 * dl;
                j[0][2] = 0.5 * dr;
                j[2][0] = dl;
                j[2][2] = dr;
                j[1][1] = -0.5 * dt;
                j[1][3] = 0.5 * db;
                j[3][1] = dt;
                j[3][3] = db;
            }
        }
        j
    }
}

/// Chains a box-space gradient through the decode Jacobian into encoding space.
pub fn pull_back(grad_box: &[f64; 4], jac: &[[f64; 4]; 4]) -> [f64; 4] {
    let mut out = [0.0; 4];
    for (k, o) in out.iter_mut().enumerate() {
        *o = (0..4).map(|i| grad_box[i] * jac[i][k]).sum();
    }
    out
}
