//! Synthetic crowded scenes with controlled occlusion, the anchor grid, and
//! the rasterized features fed to the proposal model.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distributions::derive_seed;
use crate::error::{Error, Result};
use crate::geometry::{iou, Anchor, BBox, GridIndex};

/// Total placement attempts allowed for one scene.
pub const ATTEMPT_BUDGET: usize = 100_000;
/// Consecutive failures for one box before the scene is restarted.
const BOX_RETRIES: usize = 200;
/// Raster counts are clipped here.
pub const RASTER_CLIP: f64 = 4.0;

/// Occlusion band, on the maximum IoU of a box to any other box in its scene.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Band {
    /// `[0, 0.3]`
    Bare,
    /// `(0.3, 0.7]`
    Partial,
    /// `(0.7, 1]`
    Heavy,
    /// Each scene draws one of the three named bands.
    Mixed,
    /// `(lo, hi]`, or `[0, hi]` when `lo = 0`.
    Custom { lo: f64, hi: f64 },
}

impl Band {
    pub const NAMED: [Band; 3] = [Band::Bare, Band::Partial, Band::Heavy];

    /// `(lo, hi)`; `None` for [`Band::Mixed`].
    pub fn bounds(&self) -> Option<(f64, f64)> {
        match *self {
            Band::Bare => Some((0.0, 0.3)),
            Band::Partial => Some((0.3, 0.7)),
            Band::Heavy => Some((0.7, 1.0)),
            Band::Mixed => None,
            Band::Custom { lo, hi } => Some((lo, hi)),
        }
    }

    pub fn contains(&self, label: f64) -> bool {
        match self.bounds() {
            Some((lo, hi)) => label <= hi && (label > lo || (lo == 0.0 && label == 0.0)),
            None => Band::NAMED.iter().any(|b| b.contains(label)),
        }
    }

    /// The named band a label falls in.
    pub fn classify(label: f64) -> Band {
        Band::NAMED.into_iter().find(|b| b.contains(label)).unwrap_or(Band::Heavy)
    }
}

impl fmt::Display for Band {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Band::Bare => write!(f, "bare"),
            Band::Partial => write!(f, "partial"),
            Band::Heavy => write!(f, "heavy"),
            Band::Mixed => write!(f, "mixed"),
            Band::Custom { lo, hi } => write!(f, "{lo}-{hi}"),
        }
    }
}

impl FromStr for Band {
    type Err = Error;

    fn from_str(s: &str) -> Result<Band> {
        match s.to_ascii_lowercase().as_str() {
            "bare" => Ok(Band::Bare),
            "partial" => Ok(Band::Partial),
            "heavy" => Ok(Band::Heavy),
            "mixed" => Ok(Band::Mixed),
            other => {
                let bad = || Error::InvalidConfig(format!("unknown occlusion band {other:?}"));
                let (lo, hi) = other.split_once('-').ok_or_else(bad)?;
                let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
                let hi: f64 = hi.trim().parse().map_err(|_| bad())?;
                if !(0.0..hi).contains(&lo) || hi > 1.0 {
                    return Err(Error::InvalidConfig(format!("band bounds must satisfy 0 <= lo < hi <= 1, got {other}")));
                }
                Ok(Band::Custom { lo, hi })
            }
        }
    }
}

impl From<Band> for String {
    fn from(b: Band) -> String {
        b.to_string()
    }
}

impl TryFrom<String> for Band {
    type Error = Error;

    fn try_from(s: String) -> Result<Band> {
        s.parse()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    /// `(width, height)`.
    pub canvas: [u32; 2],
    /// Inclusive range of box counts.
    pub count: [usize; 2],
    /// Inclusive range of box heights.
    pub height: [f64; 2],
    /// Width / height of every box.
    pub aspect: f64,
    pub band: Band,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig { canvas: [128, 128], count: [2, 8], height: [20.0, 36.0], aspect: 0.4, band: Band::Mixed }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.canvas[0] == 0 || self.canvas[1] == 0 {
            return bad("canvas must be non-empty".into());
        }
        if self.count[0] < 1 || self.count[0] > self.count[1] {
            return bad(format!("count range {:?} must satisfy 1 <= min <= max", self.count));
        }
        if !(self.height[0] > 0.0 && self.height[0] <= self.height[1] && self.height[1].is_finite()) {
            return bad(format!("height range {:?} must satisfy 0 < min <= max", self.height));
        }
        if !(self.aspect > 0.0 && self.aspect.is_finite()) {
            return bad(format!("aspect must be positive, got {}", self.aspect));
        }
        if let Some((lo, hi)) = self.band.bounds() {
            if !(0.0..hi).contains(&lo) || hi > 1.0 {
                return bad(format!("band bounds must satisfy 0 <= lo < hi <= 1, got ({lo}, {hi})"));
            }
        }
        Ok(())
    }
}

/// One synthetic image: its ground-truth boxes and how it was generated.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub canvas: [u32; 2],
    pub gt_boxes: Vec<BBox>,
    /// Max IoU of each box to any other box; 0 for a single box.
    pub occlusion_labels: Vec<f64>,
    pub seed: u64,
    /// The concrete band the scene was drawn for.
    pub band: Band,
}

#[derive(Serialize, Deserialize)]
struct SceneRecord {
    canvas: [u32; 2],
    boxes: Vec<[f64; 4]>,
    seed: u64,
    band: Band,
}

pub fn occlusion_labels(boxes: &[BBox]) -> Vec<f64> {
    (0..boxes.len())
        .map(|i| {
            (0..boxes.len()).filter(|&j| j != i).map(|j| iou(&boxes[i], &boxes[j])).fold(0.0, f64::max)
        })
        .collect()
}

impl Scene {
    pub fn new(canvas: [u32; 2], gt_boxes: Vec<BBox>, seed: u64, band: Band) -> Self {
        let occlusion_labels = occlusion_labels(&gt_boxes);
        Scene { canvas, gt_boxes, occlusion_labels, seed, band }
    }

    pub fn to_json(&self) -> Result<String> {
        let rec = SceneRecord {
            canvas: self.canvas,
            boxes: self.gt_boxes.iter().map(BBox::to_array).collect(),
            seed: self.seed,
            band: self.band,
        };
        Ok(serde_json::to_string(&rec)?)
    }

    pub fn from_json(line: &str) -> Result<Scene> {
        let rec: SceneRecord = serde_json::from_str(line)?;
        let boxes = rec.boxes.into_iter().map(BBox::from_array).collect::<Result<Vec<_>>>()?;
        Ok(Scene::new(rec.canvas, boxes, rec.seed, rec.band))
    }

    pub fn inside_canvas(&self, b: &BBox) -> bool {
        b.x1() >= 0.0 && b.y1() >= 0.0 && b.x2() <= self.canvas[0] as f64 && b.y2() <= self.canvas[1] as f64
    }
}

pub fn write_jsonl(path: &Path, scenes: &[Scene]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in scenes {
        writeln!(out, "{}", s.to_json()?)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Scene>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut scenes = Vec::new();
    for line in file.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            scenes.push(Scene::from_json(&line)?);
        }
    }
    Ok(scenes)
}

struct Placer<'a> {
    cfg: &'a SceneConfig,
    lo: f64,
    hi: f64,
    rng: ChaCha8Rng,
    attempts: usize,
}

impl Placer<'_> {
    fn infeasible(&self) -> Error {
        Error::InfeasibleOcclusion(format!(
            "no placement with max IoU in band {} on a {}x{} canvas after {} attempts",
            Band::Custom { lo: self.lo, hi: self.hi },
            self.cfg.canvas[0],
            self.cfg.canvas[1],
            ATTEMPT_BUDGET
        ))
    }

    fn spend(&mut self) -> Result<()> {
        self.attempts += 1;
        if self.attempts > ATTEMPT_BUDGET {
            return Err(self.infeasible());
        }
        Ok(())
    }

    fn inside(&self, b: &BBox) -> bool {
        b.x1() >= 0.0 && b.y1() >= 0.0 && b.x2() <= self.cfg.canvas[0] as f64 && b.y2() <= self.cfg.canvas[1] as f64
    }

    fn sized_box(&self, cx: f64, cy: f64, h: f64) -> BBox {
        BBox { cx, cy, w: self.cfg.aspect * h, h }
    }

    fn random_height(&mut self) -> f64 {
        let [a, b] = self.cfg.height;
        if a == b {
            a
        } else {
            self.rng.random_range(a..=b)
        }
    }

    fn uniform_box(&mut self) -> BBox {
        let h = self.random_height();
        let cx = self.rng.random::<f64>() * self.cfg.canvas[0] as f64;
        let cy = self.rng.random::<f64>() * self.cfg.canvas[1] as f64;
        self.sized_box(cx, cy, h)
    }

    /// A box whose IoU with `partner` is a random target inside the band.
    fn partnered_box(&mut self, partner: &BBox) -> BBox {
        let target = self.lo + (self.hi.min(0.97) - self.lo) * (1.0 - self.rng.random::<f64>());
        // co-centered boxes of the same aspect have IoU = ratio^2; leave room above the target
        let r_min = target.sqrt() + 0.5 * (1.0 - target.sqrt());
        let mut ratio = self.rng.random_range(r_min..=1.0);
        if self.rng.random::<bool>() {
            ratio = 1.0 / ratio;
        }
        let h = (partner.h * ratio).clamp(self.cfg.height[0], self.cfg.height[1]);
        let angle = self.rng.random_range(-std::f64::consts::FRAC_PI_4..=std::f64::consts::FRAC_PI_4);
        let sign = if self.rng.random::<bool>() { 1.0 } else { -1.0 };
        let (ux, uy) = (sign * angle.cos(), angle.sin());
        let at = |d: f64| self.sized_box(partner.cx + d * ux, partner.cy + d * uy, h);
        // IoU is non-increasing in the displacement along a ray from the shared center
        let (mut a, mut b) = (0.0, partner.w + partner.h + 2.0 * h);
        if iou(&at(0.0), partner) < target {
            return at(0.0);
        }
        for _ in 0..60 {
            let m = 0.5 * (a + b);
            if iou(&at(m), partner) > target {
                a = m;
            } else {
                b = m;
            }
        }
        at(b)
    }

    fn fits(&self, cand: &BBox, placed: &[BBox]) -> bool {
        self.inside(cand) && placed.iter().all(|p| iou(cand, p) <= self.hi)
    }

    fn place(&mut self, count: usize) -> Result<Vec<BBox>> {
        'scene: loop {
            let mut placed: Vec<BBox> = Vec::with_capacity(count);
            // index of a box still waiting for a partner
            let mut open: Option<usize> = None;
            while placed.len() < count {
                let remaining = count - placed.len();
                let partner = if self.lo == 0.0 {
                    None
                } else if let Some(i) = open {
                    Some(i)
                } else if placed.is_empty() || (remaining >= 2 && self.rng.random::<bool>()) {
                    None
                } else {
                    Some(self.rng.random_range(0..placed.len()))
                };
                let mut ok = false;
                for _ in 0..BOX_RETRIES {
                    self.spend()?;
                    let cand = match partner {
                        Some(p) => self.partnered_box(&placed[p]),
                        None => self.uniform_box(),
                    };
                    let in_band = partner.is_none_or(|p| Band::Custom { lo: self.lo, hi: self.hi }.contains(iou(&cand, &placed[p])));
                    if in_band && self.fits(&cand, &placed) {
                        open = if partner.is_none() && self.lo > 0.0 { Some(placed.len()) } else { None };
                        placed.push(cand);
                        ok = true;
                        break;
                    }
                }
                if !ok {
                    continue 'scene;
                }
            }
            return Ok(placed);
        }
    }
}

/// Draws one scene. Every box's max IoU to the others lies in the band.
pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let band = match cfg.band {
        Band::Mixed => Band::NAMED[rng.random_range(0..3)],
        b => b,
    };
    let (lo, hi) = band.bounds().expect("concrete band");
    let mut count = rng.random_range(cfg.count[0]..=cfg.count[1]);
    if lo > 0.0 {
        if cfg.count[1] < 2 {
            return Err(Error::InfeasibleOcclusion(format!("band {band} needs at least two boxes per scene")));
        }
        count = count.max(2);
    }
    let mut placer = Placer { cfg, lo, hi, rng, attempts: 0 };
    let boxes = placer.place(count)?;
    Ok(Scene::new(cfg.canvas, boxes, seed, band))
}

/// Dataset split, mixed into per-scene seeds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train = 0,
    Eval = 1,
}

pub fn scene_seed(seed: u64, split: Split, index: usize) -> u64 {
    derive_seed(seed, &[split as u64, index as u64])
}

/// `n` scenes, generated in parallel; output order is by index.
pub fn generate_dataset(cfg: &SceneConfig, n: usize, seed: u64, split: Split) -> Result<Vec<Scene>> {
    cfg.validate()?;
    (0..n).into_par_iter().map(|i| generate_scene(cfg, scene_seed(seed, split, i))).collect()
}

/// One anchor per cell of a regular grid, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorGrid {
    pub canvas: [u32; 2],
    pub stride: u32,
    pub rows: usize,
    pub cols: usize,
    pub levels: usize,
    pub anchor_wh: [f64; 2],
    pub anchors: Vec<Anchor>,
}

pub fn build_anchor_grid(canvas: [u32; 2], stride: u32, anchor_wh: [f64; 2]) -> Result<AnchorGrid> {
    if stride == 0 || canvas[0] % stride != 0 || canvas[1] % stride != 0 || canvas[0] == 0 || canvas[1] == 0 {
        return Err(Error::StrideMismatch { stride, width: canvas[0], height: canvas[1] });
    }
    if !(anchor_wh[0] > 0.0 && anchor_wh[1] > 0.0) {
        return Err(Error::InvalidConfig(format!("anchor size {anchor_wh:?} must be positive")));
    }
    let cols = (canvas[0] / stride) as usize;
    let rows = (canvas[1] / stride) as usize;
    let s = stride as f64;
    let mut anchors = Vec::with_capacity(rows * cols);
    for row in 0..rows {
        for col in 0..cols {
            let bbox = BBox { cx: (col as f64 + 0.5) * s, cy: (row as f64 + 0.5) * s, w: anchor_wh[0], h: anchor_wh[1] };
            anchors.push(Anchor { bbox, grid_index: GridIndex { row, col, level: 0 } });
        }
    }
    Ok(AnchorGrid { canvas, stride, rows, cols, levels: 1, anchor_wh, anchors })
}

impl AnchorGrid {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn boxes(&self) -> Vec<BBox> {
        self.anchors.iter().map(|a| a.bbox).collect()
    }
}

/// Coverage counts at the anchor-grid resolution plus per-anchor patches.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub rows: usize,
    pub cols: usize,
    /// Row-major.
    pub map: Vec<f64>,
    pub patch: usize,
    /// One flattened `patch x patch` window per anchor.
    pub features: Vec<Vec<f64>>,
}

impl Raster {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.map[row * self.cols + col]
    }
}

/// Number of boxes covering each cell center, clipped at [`RASTER_CLIP`],
/// and the zero-padded `patch x patch` neighbourhood of every anchor.
pub fn rasterize(scene: &Scene, grid: &AnchorGrid, patch: usize) -> Result<Raster> {
    if patch % 2 == 0 {
        return Err(Error::InvalidConfig(format!("patch size must be odd, got {patch}")));
    }
    if scene.canvas != grid.canvas {
        return Err(Error::InvalidConfig(format!(
            "scene canvas {:?} does not match grid canvas {:?}",
            scene.canvas, grid.canvas
        )));
    }
    let (rows, cols) = (grid.rows, grid.cols);
    let map: Vec<f64> = grid
        .anchors
        .iter()
        .map(|a| {
            let n = scene.gt_boxes.iter().filter(|b| b.contains_point(a.bbox.cx, a.bbox.cy)).count();
            (n as f64).min(RASTER_CLIP)
        })
        .collect();
    let half = (patch / 2) as isize;
    let features = grid
        .anchors
        .iter()
        .map(|a| {
            let (r0, c0) = (a.grid_index.row as isize, a.grid_index.col as isize);
            let mut f = Vec::with_capacity(patch * patch);
            for dr in -half..=half {
                for dc in -half..=half {
                    let (r, c) = (r0 + dr, c0 + dc);
                    let inside = r >= 0 && c >= 0 && (r as usize) < rows && (c as usize) < cols;
                    f.push(if inside { map[r as usize * cols + c as usize] } else { 0.0 });
                }
            }
            f
        })
        .collect();
    Ok(Raster { rows, cols, map, patch, features })
}
