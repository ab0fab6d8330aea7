//! The trainable map from a scene to per-anchor proposal distributions.
//!
//! Each anchor gets nine outputs: class logit, four means and four
//! log-standard-deviations of the encoded box. `TABLE` stores the nine
//! outputs directly for every (scene, anchor); `LINEAR` is one affine map
//! shared by all anchors, applied to the anchor's raster patch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{AnchorParams, PARAMS_PER_ANCHOR};
use crate::scenes::Raster;

/// Lower end of the log-sigma clamp; an upper end below it moves it down.
pub const LOG_SIGMA_MIN: f64 = -6.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Backend {
    Table,
    Linear,
}

impl std::str::FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Backend> {
        match s.to_ascii_lowercase().as_str() {
            "table" => Ok(Backend::Table),
            "linear" => Ok(Backend::Linear),
            other => Err(Error::InvalidConfig(format!("unknown backend {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalModel {
    pub backend: Backend,
    pub n_anchors: usize,
    /// Scenes with their own rows; zero for `LINEAR`.
    pub n_scenes: usize,
    /// Raster patch side used as the `LINEAR` input.
    pub patch: usize,
    pub log_sigma_max: f64,
    pub params: Vec<f64>,
}

/// Gradient with respect to a contiguous block of the parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockGrad {
    pub offset: usize,
    pub values: Vec<f64>,
}

impl BlockGrad {
    pub fn add_into(&self, full: &mut [f64], scale: f64) {
        for (f, v) in full[self.offset..self.offset + self.values.len()].iter_mut().zip(&self.values) {
            *f += scale * v;
        }
    }
}

impl ProposalModel {
    /// Zero-initialized model: every anchor starts at the prior with score 0.5.
    pub fn new(backend: Backend, n_anchors: usize, n_scenes: usize, patch: usize, log_sigma_max: f64) -> Result<Self> {
        if !log_sigma_max.is_finite() {
            return Err(Error::InvalidConfig("log_sigma_max must be finite".into()));
        }
        if patch % 2 == 0 {
            return Err(Error::InvalidConfig(format!("patch size must be odd, got {patch}")));
        }
        let (n_scenes, len) = match backend {
            Backend::Table => (n_scenes, n_scenes * n_anchors * PARAMS_PER_ANCHOR),
            Backend::Linear => (0, PARAMS_PER_ANCHOR * (patch * patch + 1)),
        };
        Ok(ProposalModel { backend, n_anchors, n_scenes, patch, log_sigma_max, params: vec![0.0; len] })
    }

    pub fn log_sigma_bounds(&self) -> (f64, f64) {
        (LOG_SIGMA_MIN.min(self.log_sigma_max), self.log_sigma_max)
    }

    fn n_inputs(&self) -> usize {
        self.patch * self.patch + 1
    }

    fn check_input(&self, scene_id: usize, raster: &Raster) -> Result<()> {
        if raster.features.len() != self.n_anchors {
            return Err(Error::InvalidConfig(format!(
                "raster has {} anchors, model expects {}",
                raster.features.len(),
                self.n_anchors
            )));
        }
        match self.backend {
            Backend::Table if scene_id >= self.n_scenes => {
                Err(Error::SceneNotAllocated { scene: scene_id, allocated: self.n_scenes, anchors: self.n_anchors })
            }
            Backend::Linear if raster.patch != self.patch => Err(Error::InvalidConfig(format!(
                "raster patch {} does not match model patch {}",
                raster.patch, self.patch
            ))),
            _ => Ok(()),
        }
    }

    /// Unclamped outputs, flat per anchor.
    pub fn raw_outputs(&self, scene_id: usize, raster: &Raster) -> Result<Vec<f64>> {
        self.check_input(scene_id, raster)?;
        let block = self.n_anchors * PARAMS_PER_ANCHOR;
        Ok(match self.backend {
            Backend::Table => self.params[scene_id * block..(scene_id + 1) * block].to_vec(),
            Backend::Linear => {
                let n_in = self.n_inputs();
                let mut out = Vec::with_capacity(block);
                for x in &raster.features {
                    for o in 0..PARAMS_PER_ANCHOR {
                        let w = &self.params[o * n_in..(o + 1) * n_in];
                        let dot: f64 = w[..n_in - 1].iter().zip(x).map(|(w, x)| w * x).sum();
                        out.push(dot + w[n_in - 1]);
                    }
                }
                out
            }
        })
    }

    /// Per-anchor distribution parameters with log-sigma clamped.
    pub fn forward(&self, scene_id: usize, raster: &Raster) -> Result<Vec<AnchorParams>> {
        let raw = self.raw_outputs(scene_id, raster)?;
        let (lo, hi) = self.log_sigma_bounds();
        Ok(raw
            .chunks_exact(PARAMS_PER_ANCHOR)
            .map(|c| {
                let mut p = AnchorParams::from_slice(c);
                p.dist.log_sigma = p.dist.log_sigma.map(|v| v.clamp(lo, hi));
                p
            })
            .collect())
    }

    /// Pulls a gradient over the (clamped) outputs back to the parameters.
    /// Clamped log-sigma outputs pass no gradient.
    pub fn backward(&self, scene_id: usize, raster: &Raster, grad_out: &[f64]) -> Result<BlockGrad> {
        let raw = self.raw_outputs(scene_id, raster)?;
        let (lo, hi) = self.log_sigma_bounds();
        let g: Vec<f64> = grad_out
            .iter()
            .zip(&raw)
            .enumerate()
            .map(|(i, (g, r))| {
                let o = i % PARAMS_PER_ANCHOR;
                if o >= 5 && (*r < lo || *r > hi) {
                    0.0
                } else {
                    *g
                }
            })
            .collect();
        Ok(match self.backend {
            Backend::Table => BlockGrad { offset: scene_id * self.n_anchors * PARAMS_PER_ANCHOR, values: g },
            Backend::Linear => {
                let n_in = self.n_inputs();
                let mut values = vec![0.0; PARAMS_PER_ANCHOR * n_in];
                for (x, ga) in raster.features.iter().zip(g.chunks_exact(PARAMS_PER_ANCHOR)) {
                    for (o, &go) in ga.iter().enumerate() {
                        if go == 0.0 {
                            continue;
                        }
                        let row = &mut values[o * n_in..(o + 1) * n_in];
                        for (w, xi) in row.iter_mut().zip(x) {
                            *w += go * xi;
                        }
                        row[n_in - 1] += go;
                    }
                }
                BlockGrad { offset: 0, values }
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenes::{build_anchor_grid, generate_scene, rasterize, SceneConfig};

    fn setup() -> (crate::scenes::Scene, Raster) {
        let grid = build_anchor_grid([128, 128], 8, [10.0, 25.0]).unwrap();
        let scene = generate_scene(&SceneConfig::default(), 1).unwrap();
        let raster = rasterize(&scene, &grid, 5).unwrap();
        (scene, raster)
    }

    #[test]
    fn zero_init_is_prior() {
        let (_, raster) = setup();
        for backend in [Backend::Table, Backend::Linear] {
            let m = ProposalModel::new(backend, 256, 1, 5, 2.0).unwrap();
            let out = m.forward(0, &raster).unwrap();
            assert_eq!(out.len(), 256);
            assert!(out.iter().all(|p| *p == AnchorParams::default()));
        }
    }

    #[test]
    fn log_sigma_clamp() {
        let (_, raster) = setup();
        let mut m = ProposalModel::new(Backend::Table, 256, 1, 5, 2.0).unwrap();
        m.params[5] = 10.0;
        m.params[6] = -10.0;
        let out = m.forward(0, &raster).unwrap();
        assert_eq!(out[0].dist.log_sigma[0], 2.0);
        assert_eq!(out[0].dist.log_sigma[1], -6.0);
        let g = m.backward(0, &raster, &vec![1.0; 256 * 9]).unwrap();
        assert_eq!(&g.values[..9], &[1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);

        let det = ProposalModel::new(Backend::Table, 256, 1, 5, -12.0).unwrap();
        assert_eq!(det.log_sigma_bounds(), (-12.0, -12.0));
    }

    #[test]
    fn table_rejects_unallocated_scene() {
        let (_, raster) = setup();
        let m = ProposalModel::new(Backend::Table, 256, 2, 5, 2.0).unwrap();
        assert!(matches!(m.forward(2, &raster), Err(Error::SceneNotAllocated { scene: 2, .. })));
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let (_, raster) = setup();
        let mut m = ProposalModel::new(Backend::Linear, 256, 0, 5, 2.0).unwrap();
        for (i, p) in m.params.iter_mut().enumerate() {
            *p = ((i * 37 % 11) as f64 - 5.0) * 0.01;
        }
        // linear functional of the outputs: sum_i c_i * out_i
        let c: Vec<f64> = (0..256 * 9).map(|i| ((i * 13 % 7) as f64 - 3.0) * 0.1).collect();
        let f = |m: &ProposalModel| -> f64 {
            let out = m.forward(0, &raster).unwrap();
            let flat = crate::estimators::flatten(&out);
            flat.iter().zip(&c).map(|(a, b)| a * b).sum()
        };
        let g = m.backward(0, &raster, &c).unwrap();
        for i in [0, 7, 26, 100, 200, m.params.len() - 1] {
            let mut up = m.clone();
            up.params[i] += 1e-6;
            let mut dn = m.clone();
            dn.params[i] -= 1e-6;
            let fd = (f(&up) - f(&dn)) / 2e-6;
            assert!((fd - g.values[i]).abs() < 1e-6 * (1.0 + fd.abs()), "param {i}: {fd} vs {}", g.values[i]);
        }
    }
}
