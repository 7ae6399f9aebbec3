use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ClassLabel, Dataset, MultimodalSample, Split};
use crate::error::{Error, Result};

const CLASS_NAMES: [&str; 32] = [
    "dog", "rooster", "rain", "crow", "clock", "engine", "bell", "train", "keyboard", "sheep",
    "piano", "siren", "frog", "drum", "violin", "helicopter", "cat", "thunder", "wave", "wind",
    "laughter", "applause", "whistle", "door", "hammer", "saw", "cow", "owl", "horse", "guitar",
    "fountain", "speech",
];

/// Gaussian mixture with one cluster per class in each modality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub samples_per_class: usize,
    pub visual_dim: usize,
    pub audio_dim: usize,
    pub visual_noise: f64,
    pub audio_noise: f64,
    /// Weight of the visual latent inside the audio signal, in `[0, 1]`.
    pub correlation: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            classes: 8,
            samples_per_class: 60,
            visual_dim: 32,
            audio_dim: 32,
            visual_noise: 0.6,
            audio_noise: 3.0,
            correlation: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.classes < 2 {
            return bad("synthetic data needs at least 2 classes");
        }
        if self.samples_per_class < 2 {
            return bad("samples_per_class must be at least 2 (one train, one test)");
        }
        if self.visual_dim == 0 || self.audio_dim == 0 {
            return bad("feature dimensions must be positive");
        }
        if !(self.visual_noise > 0.0 && self.audio_noise > 0.0)
            || !self.visual_noise.is_finite()
            || !self.audio_noise.is_finite()
        {
            return bad("noise scales must be positive and finite");
        }
        if !(0.0..=1.0).contains(&self.correlation) {
            return bad("correlation must lie in [0, 1]");
        }
        Ok(())
    }
}

fn gauss(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Draws a class-balanced dataset.
///
/// Per class `k` a visual mean `m_k` and an independent latent `u_k` are
/// drawn from `N(0, I)`. A visual sample is `x = m_k + σ_v ε`; its paired
/// audio sample is `Q (ρ x + (1 − ρ)(u_k + σ_v ε')) + σ_a η`, where `Q` is a
/// fixed random map into audio space. Each class is split 80/20 into train
/// and test after a seeded shuffle.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<Dataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (dv, da) = (config.visual_dim, config.audio_dim);
    let q_scale = 1.0 / (dv as f64).sqrt();
    let q: Vec<Vec<f64>> = (0..da)
        .map(|_| gauss(&mut rng, dv).into_iter().map(|z| z * q_scale).collect())
        .collect();
    let project = |latent: &[f64]| -> Vec<f64> {
        q.iter()
            .map(|row| row.iter().zip(latent).map(|(a, b)| a * b).sum())
            .collect()
    };

    let rho = config.correlation;
    let n_test = ((config.samples_per_class as f64 * 0.2).round() as usize)
        .clamp(1, config.samples_per_class - 1);
    let mut classes = Vec::with_capacity(config.classes);
    let mut samples = Vec::with_capacity(config.classes * config.samples_per_class);
    for k in 0..config.classes {
        let name = CLASS_NAMES
            .get(k)
            .map(|s| s.to_string())
            .unwrap_or_else(|| format!("category_{k}"));
        classes.push(ClassLabel { id: k, name });
        let visual_mean = gauss(&mut rng, dv);
        let independent = gauss(&mut rng, dv);
        let mut order: Vec<usize> = (0..config.samples_per_class).collect();
        order.shuffle(&mut rng);
        for j in 0..config.samples_per_class {
            let visual: Vec<f64> = visual_mean
                .iter()
                .zip(gauss(&mut rng, dv))
                .map(|(m, e)| m + config.visual_noise * e)
                .collect();
            let latent: Vec<f64> = visual
                .iter()
                .zip(&independent)
                .zip(gauss(&mut rng, dv))
                .map(|((x, u), e)| rho * x + (1.0 - rho) * (u + config.visual_noise * e))
                .collect();
            let audio: Vec<f64> = project(&latent)
                .into_iter()
                .zip(gauss(&mut rng, da))
                .map(|(a, e)| a + config.audio_noise * e)
                .collect();
            let split = if order[j] < n_test { Split::Test } else { Split::Train };
            samples.push(MultimodalSample {
                sample_id: k * config.samples_per_class + j,
                visual,
                audio,
                label: k,
                split,
            });
        }
    }
    Dataset::new(samples, classes, dv, da)
}
