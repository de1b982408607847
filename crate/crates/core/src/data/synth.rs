use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, Split};
use crate::error::{Error, Result};

/// Class-conditional oriented-bar images.
///
/// Class `c` of `K` is a soft bar through the image centre at angle `π·c/K`,
/// shifted perpendicular to itself by a uniform offset in `±jitter` pixels,
/// plus i.i.d. Gaussian pixel noise, clipped to `[0, 1]` and quantised to bytes.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub n_samples: usize,
    pub num_classes: usize,
    pub image_size: usize,
    pub noise: f64,
    pub jitter: f64,
}

impl SynthSpec {
    pub fn new(n_samples: usize, num_classes: usize, image_size: usize) -> Self {
        Self {
            n_samples,
            num_classes,
            image_size,
            noise: 0.25,
            jitter: image_size as f64 / 8.0,
        }
    }

    pub fn with_noise(mut self, noise: f64) -> Self {
        self.noise = noise;
        self
    }

    pub fn with_jitter(mut self, jitter: f64) -> Self {
        self.jitter = jitter;
        self
    }

    fn render(&self, class: usize, offset: f64) -> Vec<f64> {
        let s = self.image_size;
        let theta = std::f64::consts::PI * class as f64 / self.num_classes as f64;
        let (sin, cos) = theta.sin_cos();
        let width = (s as f64 / 10.0).max(0.5);
        let half = s as f64 / 2.0;
        let plane: Vec<f64> = (0..s * s)
            .map(|i| {
                let (py, px) = ((i / s) as f64 + 0.5 - half, (i % s) as f64 + 0.5 - half);
                let dist = py * cos - px * sin - offset;
                (-dist * dist / (2.0 * width * width)).exp()
            })
            .collect();
        plane.repeat(3)
    }

    /// Noise-free, centred image of `class` (`3·S·S` values).
    pub fn template(&self, class: usize) -> Vec<f64> {
        self.render(class, 0.0)
    }

    pub fn generate(&self, seed: u64) -> Result<Dataset> {
        if self.num_classes < 2 || self.num_classes > 256 {
            return Err(Error::config("synthetic data needs 2..=256 classes"));
        }
        if self.n_samples < self.num_classes {
            return Err(Error::config(format!(
                "{} samples cannot cover {} classes",
                self.n_samples, self.num_classes
            )));
        }
        if self.image_size < 4 {
            return Err(Error::config("image size must be at least 4"));
        }
        if !(self.noise >= 0.0 && self.jitter >= 0.0) {
            return Err(Error::config("noise and jitter must be non-negative"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut labels: Vec<u8> = (0..self.n_samples).map(|i| (i % self.num_classes) as u8).collect();
        labels.shuffle(&mut rng);
        let normal = Normal::new(0.0, self.noise.max(f64::MIN_POSITIVE)).expect("finite");
        let per = 3 * self.image_size * self.image_size;
        let mut pixels = Vec::with_capacity(per * self.n_samples);
        for &label in &labels {
            let offset = if self.jitter > 0.0 {
                rng.random_range(-self.jitter..=self.jitter)
            } else {
                0.0
            };
            for v in self.render(label as usize, offset) {
                let noisy = if self.noise > 0.0 {
                    v + normal.sample(&mut rng)
                } else {
                    v
                };
                pixels.push((noisy.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        let s = self.image_size;
        Dataset::from_bytes([3, s, s], pixels, labels, self.num_classes, Split::Train)
    }
}

/// Synthetic dataset with the default noise (0.25) and jitter (size/8).
pub fn synth_dataset(seed: u64, n_samples: usize, num_classes: usize, image_size: usize) -> Result<Dataset> {
    SynthSpec::new(n_samples, num_classes, image_size).generate(seed)
}
