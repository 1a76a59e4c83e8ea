//! Training-time augmentation: brightness/contrast jitter, random frame
//! dropping and additive white Gaussian noise, producing up to `A` variants
//! per training sample.
//!
//! Every random draw comes from a stream derived from `(seed, sample key,
//! variant index)`, so a variant's content never depends on the order in
//! which samples are visited.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::VideoTensor;
use crate::error::{Error, Result};
use crate::preprocess::standardize_temporal;
use crate::seed::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Variants per training sample (`A`).
    #[serde(alias = "A")]
    pub variants: usize,
    /// Brightness factor range for `b ~ U[lo, hi]`.
    pub b_range: (f64, f64),
    /// Contrast factor range for `c ~ U[lo, hi]`.
    pub c_range: (f64, f64),
    pub frame_drop_prob: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { variants: 3, b_range: (0.7, 1.3), c_range: (0.5, 1.5), frame_drop_prob: 0.1, noise_sigma: 0.02, seed: 0 }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let ordered = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        if !ordered(self.b_range) || !ordered(self.c_range) {
            return Err(Error::Config("augmentation ranges must be finite and ordered".into()));
        }
        if !(0.0..=1.0).contains(&self.frame_drop_prob) {
            return Err(Error::Config("frame_drop_prob must be in [0, 1]".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// `x' = clip((x*b - mu)*c + mu, 0, 1)` with `mu = mean(x*b)` over the
/// whole clip.
pub fn brightness_contrast_jitter(x: &VideoTensor, b: f64, c: f64) -> VideoTensor {
    let mu = x.data().iter().map(|v| *v as f64 * b).sum::<f64>() / x.data().len() as f64;
    let mut out = x.clone();
    out.map_clamped(|v| ((v as f64 * b - mu) * c + mu) as f32);
    out
}

/// Indices of the frames that survive independent dropping with
/// probability `p` (frame 0 if none survive).
pub fn surviving_frames(frames: usize, p: f64, rng: &mut impl Rng) -> Vec<usize> {
    let kept: Vec<usize> = (0..frames).filter(|_| !rng.random_bool(p)).collect();
    if kept.is_empty() {
        vec![0]
    } else {
        kept
    }
}

/// Drops frames independently with probability `p` and re-standardizes to
/// the original frame count.
pub fn drop_frames(x: &VideoTensor, p: f64, rng: &mut impl Rng) -> VideoTensor {
    let kept = surviving_frames(x.frames(), p, rng);
    standardize_temporal(&x.select_frames(&kept), x.frames()).expect("frame count is positive")
}

/// `x' = clip(x + n, 0, 1)` with i.i.d. `n ~ N(0, sigma^2)`.
pub fn add_gaussian_noise(x: &VideoTensor, sigma: f64, rng: &mut impl Rng) -> VideoTensor {
    let mut out = x.clone();
    if sigma == 0.0 {
        return out;
    }
    let normal = Normal::new(0.0f32, sigma as f32).expect("sigma is finite and non-negative");
    out.map_clamped(|v| v + normal.sample(rng));
    out
}

/// Stream for one variant.
pub fn variant_rng(seed: u64, sample_key: &str, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &["augment", sample_key, &index.to_string()]))
}

/// One augmented variant: jitter with fresh `(b, c)`, then frame dropping,
/// then noise.
pub fn make_variant(x: &VideoTensor, cfg: &AugmentConfig, sample_key: &str, index: usize) -> VideoTensor {
    let mut rng = variant_rng(cfg.seed, sample_key, index);
    let b = rng.random_range(cfg.b_range.0..=cfg.b_range.1);
    let c = rng.random_range(cfg.c_range.0..=cfg.c_range.1);
    let y = brightness_contrast_jitter(x, b, c);
    let y = drop_frames(&y, cfg.frame_drop_prob, &mut rng);
    add_gaussian_noise(&y, cfg.noise_sigma, &mut rng)
}

/// `cfg.variants` augmented copies of a standardized training sample.
pub fn make_variants(x: &VideoTensor, cfg: &AugmentConfig, sample_key: &str) -> Vec<VideoTensor> {
    (0..cfg.variants).map(|i| make_variant(x, cfg, sample_key, i)).collect()
}

/// Augmentation entry point used by training; records every sample key it
/// is asked to augment so runs can be audited for leakage.
#[derive(Debug, Clone)]
pub struct Augmenter {
    cfg: AugmentConfig,
    calls: Vec<String>,
}

impl Augmenter {
    pub fn new(cfg: AugmentConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, calls: Vec::new() })
    }

    pub fn config(&self) -> &AugmentConfig {
        &self.cfg
    }

    pub fn variants(&mut self, x: &VideoTensor, sample_key: &str) -> Vec<VideoTensor> {
        self.calls.push(sample_key.to_string());
        make_variants(x, &self.cfg, sample_key)
    }

    /// Sample keys augmented so far, in call order.
    pub fn calls(&self) -> &[String] {
        &self.calls
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(t: usize) -> VideoTensor {
        let data = (0..t * 6 * 5).map(|i| ((i * 37) % 101) as f32 / 100.0).collect();
        VideoTensor::new(t, 6, 5, data).unwrap()
    }

    #[test]
    fn jitter_examples() {
        let x = ramp(4);
        assert_eq!(brightness_contrast_jitter(&x, 1.0, 1.0), x);
        for c in [0.5, 1.0, 1.37, 1.5] {
            let y = brightness_contrast_jitter(&VideoTensor::filled(3, 4, 4, 0.5), 1.2, c);
            assert!(y.data().iter().all(|v| (*v - 0.6).abs() < 1e-6), "c = {c}");
        }
        let y = brightness_contrast_jitter(&VideoTensor::filled(2, 3, 3, 0.9), 1.3, 1.0);
        assert!(y.data().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn jitter_matches_formula() {
        let x = ramp(3);
        let (b, c) = (0.83, 1.21);
        let mu: f64 = x.data().iter().map(|v| *v as f64 * b).sum::<f64>() / x.data().len() as f64;
        let y = brightness_contrast_jitter(&x, b, c);
        for (a, o) in x.data().iter().zip(y.data()) {
            let want = ((*a as f64 * b - mu) * c + mu).clamp(0.0, 1.0);
            assert!((*o as f64 - want).abs() < 1e-6);
        }
    }

    #[test]
    fn drop_frame_examples() {
        let x = ramp(32);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(drop_frames(&x, 0.0, &mut rng), x);
        let all = drop_frames(&x, 1.0, &mut rng);
        assert_eq!(all.frames(), 32);
        for t in 0..32 {
            assert_eq!(all.frame(t), x.frame(0));
        }
        let a = surviving_frames(32, 0.3, &mut ChaCha8Rng::seed_from_u64(9));
        let b = surviving_frames(32, 0.3, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert!(a.len() < 32);
        let y = drop_frames(&x, 0.3, &mut ChaCha8Rng::seed_from_u64(9));
        for (k, &i) in a.iter().enumerate() {
            assert_eq!(y.frame(k), x.frame(i));
        }
        assert_eq!(y.frame(31), x.frame(*a.last().unwrap()));
    }

    #[test]
    fn noise_is_unbiased_at_one_million_pixels() {
        // Interior-valued input so clipping never triggers at 0.02 sigma.
        let sigma = 0.02;
        let n = 1_000_000;
        let x = VideoTensor::filled(1, 1000, 1000, 0.5);
        let y = add_gaussian_noise(&x, sigma, &mut ChaCha8Rng::seed_from_u64(2024));
        let diffs: Vec<f64> = y.data().iter().map(|v| *v as f64 - 0.5).collect();
        let mean = diffs.iter().sum::<f64>() / n as f64;
        let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 3.0 * sigma / (n as f64).sqrt(), "mean {mean}");
        assert!((var.sqrt() - sigma).abs() < 0.01 * sigma, "sd {}", var.sqrt());
        assert_eq!(add_gaussian_noise(&x, 0.0, &mut ChaCha8Rng::seed_from_u64(1)), x);
        let edge = add_gaussian_noise(&VideoTensor::filled(2, 50, 50, 1.0), 0.3, &mut ChaCha8Rng::seed_from_u64(3));
        assert!(edge.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn variants_are_deterministic_and_distinct() {
        let x = ramp(32);
        let cfg = AugmentConfig { seed: 5, ..AugmentConfig::default() };
        assert!(make_variants(&x, &AugmentConfig { variants: 0, ..cfg.clone() }, "k").is_empty());
        let a = make_variants(&x, &cfg, "P01_TV_NSR#3");
        assert_eq!(a, make_variants(&x, &cfg, "P01_TV_NSR#3"));
        assert_eq!(a.len(), 3);
        assert!(a[0] != a[1] && a[1] != a[2] && a[0] != a[2]);
        assert!(a.iter().all(|v| v.shape() == x.shape()));
        // Order independence: variant 2 alone equals variant 2 in the list.
        assert_eq!(make_variant(&x, &cfg, "P01_TV_NSR#3", 2), a[2]);
        assert_ne!(make_variants(&x, &cfg, "P01_TV_NSR#4")[0], a[0]);
    }

    #[test]
    fn augmenter_logs_keys() {
        let mut aug = Augmenter::new(AugmentConfig { variants: 1, ..Default::default() }).unwrap();
        aug.variants(&ramp(32), "a");
        aug.variants(&ramp(32), "b");
        assert_eq!(aug.calls(), ["a", "b"]);
        assert!(Augmenter::new(AugmentConfig { b_range: (1.3, 0.7), ..Default::default() }).is_err());
    }
}
