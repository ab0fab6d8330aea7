//! Diagonal Gaussian variational family over the four encoded regression
//! variables, with a standard-normal prior.
//!
//! Noise is counter based: every draw is addressed by a `(seed, stream)` pair,
//! so the same draw is reproduced no matter which thread asks for it or in
//! which order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `N(mu, diag(sigma^2))` in encoding units, parameterized by `log_sigma`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagonalGaussian4 {
    pub mu: [f64; 4],
    pub log_sigma: [f64; 4],
}

impl Default for DiagonalGaussian4 {
    /// The prior itself: `mu = 0`, `sigma = 1`.
    fn default() -> Self {
        DiagonalGaussian4 { mu: [0.0; 4], log_sigma: [0.0; 4] }
    }
}

impl DiagonalGaussian4 {
    pub fn new(mu: [f64; 4], log_sigma: [f64; 4]) -> Self {
        DiagonalGaussian4 { mu, log_sigma }
    }

    /// Panics if any sigma is not positive.
    pub fn from_sigma(mu: [f64; 4], sigma: [f64; 4]) -> Self {
        assert!(sigma.iter().all(|s| *s > 0.0), "sigma must be positive");
        DiagonalGaussian4 { mu, log_sigma: sigma.map(f64::ln) }
    }

    pub fn sigma(&self) -> [f64; 4] {
        self.log_sigma.map(f64::exp)
    }

    /// `z = mu + sigma * epsilon`.
    pub fn reparameterize(&self, eps: &[f64; 4]) -> [f64; 4] {
        let s = self.sigma();
        std::array::from_fn(|k| self.mu[k] + s[k] * eps[k])
    }

    /// Inverse of [`reparameterize`](Self::reparameterize).
    pub fn standardize(&self, z: &[f64; 4]) -> [f64; 4] {
        let s = self.sigma();
        std::array::from_fn(|k| (z[k] - self.mu[k]) / s[k])
    }

    /// `sum_k 1/2 (mu_k^2 + sigma_k^2 - 1 - 2 ln sigma_k)`.
    pub fn kl_to_standard_normal(&self) -> f64 {
        (0..4)
            .map(|k| {
                let ls = self.log_sigma[k];
                // sigma^2 - 1 - 2 ln sigma, written to stay accurate near sigma = 1
                let var_term = (2.0 * ls).exp_m1() - 2.0 * ls;
                0.5 * (self.mu[k] * self.mu[k] + var_term)
            })
            .sum()
    }

    /// Gradient of the KL with respect to `(mu, log_sigma)`.
    pub fn kl_gradient(&self) -> ([f64; 4], [f64; 4]) {
        let dmu = self.mu;
        let dls = self.log_sigma.map(|ls| (2.0 * ls).exp_m1());
        (dmu, dls)
    }

    pub fn log_density(&self, z: &[f64; 4]) -> f64 {
        let e = self.standardize(z);
        (0..4).map(|k| -0.5 * LN_2PI - self.log_sigma[k] - 0.5 * e[k] * e[k]).sum()
    }

    /// Score `d log q(z) / d(mu, log_sigma)` at a point written as `z = mu + sigma * eps`.
    pub fn score(&self, eps: &[f64; 4]) -> ([f64; 4], [f64; 4]) {
        let s = self.sigma();
        (std::array::from_fn(|k| eps[k] / s[k]), eps.map(|e| e * e - 1.0))
    }
}

pub fn standard_normal_log_density(z: &[f64; 4]) -> f64 {
    z.iter().map(|v| -0.5 * LN_2PI - 0.5 * v * v).sum()
}

/// Address of one noise draw.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamIndex {
    pub step: u64,
    pub scene: u64,
    pub anchor: u64,
    pub sample: u64,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Deterministic child seed of `base` addressed by `parts`.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix64(base), |h, p| splitmix64(h ^ p))
}

impl StreamIndex {
    fn key(&self) -> u64 {
        let mut h = splitmix64(self.step);
        h = splitmix64(h ^ self.scene);
        h = splitmix64(h ^ self.anchor);
        splitmix64(h ^ self.sample)
    }
}

/// One standard-normal 4-vector with its provenance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseDraw {
    pub epsilon: [f64; 4],
    pub seed: u64,
    pub stream: StreamIndex,
}

/// Counter-based source of [`NoiseDraw`]s.
#[derive(Clone, Debug)]
pub struct NoiseSource {
    seed: u64,
    base: ChaCha8Rng,
}

impl NoiseSource {
    pub fn new(seed: u64) -> Self {
        NoiseSource { seed, base: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn draw(&self, stream: StreamIndex) -> NoiseDraw {
        let mut rng = self.base.clone();
        rng.set_stream(stream.key());
        rng.set_word_pos(0);
        let epsilon = std::array::from_fn(|_| rng.sample(StandardNormal));
        NoiseDraw { epsilon, seed: self.seed, stream }
    }
}

/// Monte-Carlo mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub n: usize,
}

impl McEstimate {
    pub fn from_samples(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        McEstimate { mean, std_err: (var / n as f64).sqrt(), n }
    }
}

/// Sampled `E_q[log q(z) - log p(z)]`, an independent check on
/// [`DiagonalGaussian4::kl_to_standard_normal`].
pub fn kl_monte_carlo(d: &DiagonalGaussian4, n_samples: usize, seed: u64) -> McEstimate {
    assert!(n_samples >= 1, "n_samples must be at least 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values: Vec<f64> = (0..n_samples)
        .map(|_| {
            let eps: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
            let z = d.reparameterize(&eps);
            d.log_density(&z) - standard_normal_log_density(&z)
        })
        .collect();
    McEstimate::from_samples(&values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reparameterize_examples() {
        let prior = DiagonalGaussian4::default();
        let e = [0.3, -1.2, 2.0, 0.0];
        assert_eq!(prior.reparameterize(&e), e);

        let point = DiagonalGaussian4::from_sigma([1.5, -2.0, 0.25, 7.0], [1e-12; 4]);
        let z = point.reparameterize(&[1.0, -1.0, 3.0, -3.0]);
        for k in 0..4 {
            assert!((z[k] - point.mu[k]).abs() < 1e-10);
        }

        let d = DiagonalGaussian4::from_sigma([1.0, 2.0, 3.0, 4.0], [1.0, 1.0, 2.0, 2.0]);
        assert_eq!(d.reparameterize(&[1.0, -1.0, 1.0, -1.0]), [2.0, 1.0, 5.0, 2.0]);
    }

    #[test]
    fn kl_examples() {
        assert_eq!(DiagonalGaussian4::default().kl_to_standard_normal(), 0.0);
        let shifted = DiagonalGaussian4::new([1.0, 0.0, 0.0, 0.0], [0.0; 4]);
        assert!((shifted.kl_to_standard_normal() - 0.5).abs() < 1e-15);
        let wide = DiagonalGaussian4::from_sigma([0.0; 4], [2.0; 4]);
        let expected = 6.0 - 4.0 * 2f64.ln();
        assert!((wide.kl_to_standard_normal() - expected).abs() < 1e-12);
        assert!((expected - 3.22742).abs() < 1e-5);
    }

    #[test]
    fn standardize_inverts_reparameterize() {
        let d = DiagonalGaussian4::new([0.5, -1.0, 2.0, 0.0], [-0.3, 0.2, 1.0, -2.0]);
        let e = [0.7, -0.1, 1.3, -2.2];
        let back = d.standardize(&d.reparameterize(&e));
        for k in 0..4 {
            assert!((back[k] - e[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn noise_is_reproducible_and_stream_separated() {
        let src = NoiseSource::new(42);
        let idx = StreamIndex { step: 3, scene: 1, anchor: 17, sample: 0 };
        assert_eq!(src.draw(idx), NoiseSource::new(42).draw(idx));
        let other = StreamIndex { sample: 1, ..idx };
        assert_ne!(src.draw(idx).epsilon, src.draw(other).epsilon);
        assert_ne!(src.draw(idx).epsilon, NoiseSource::new(43).draw(idx).epsilon);
    }

    #[test]
    fn kl_monte_carlo_at_prior_is_zero() {
        // log q - log p is identically zero when q is the prior
        let est = kl_monte_carlo(&DiagonalGaussian4::default(), 100, 1);
        assert_eq!(est.mean, 0.0);
    }
}
