//! Multimodal data model, class-incremental task streams, synthetic data and
//! feature-file ingestion.

mod features;
mod prompts;
mod stream;
mod synthetic;

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use features::{load_precomputed, read_features, save_precomputed, write_features};
pub use prompts::{expand_label, PromptTemplateSet, DEFAULT_TEMPLATES, PLACEHOLDER};
pub use stream::{build_stream, Task, TaskStream};
pub use synthetic::{generate_synthetic, SyntheticConfig};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassLabel {
    pub id: usize,
    pub name: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One paired (visual, audio, label) observation.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalSample {
    pub sample_id: usize,
    pub visual: Vec<f64>,
    pub audio: Vec<f64>,
    pub label: usize,
    pub split: Split,
}

/// A validated collection of samples. Construct with [`Dataset::new`].
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    samples: Vec<MultimodalSample>,
    classes: Vec<ClassLabel>,
    visual_dim: usize,
    audio_dim: usize,
    by_id: HashMap<usize, usize>,
}

impl Dataset {
    pub fn new(
        samples: Vec<MultimodalSample>,
        classes: Vec<ClassLabel>,
        visual_dim: usize,
        audio_dim: usize,
    ) -> Result<Self> {
        if visual_dim == 0 || audio_dim == 0 {
            return Err(Error::InvalidConfig("feature dimensions must be positive".into()));
        }
        let mut ids = HashSet::new();
        let mut names = HashSet::new();
        for c in &classes {
            if c.name.is_empty() || c.name.chars().any(char::is_whitespace) {
                return Err(Error::InvalidConfig(format!(
                    "class {} needs a non-empty name without whitespace",
                    c.id
                )));
            }
            if !ids.insert(c.id) {
                return Err(Error::InvalidConfig(format!("duplicate class id {}", c.id)));
            }
            if !names.insert(c.name.as_str()) {
                return Err(Error::InvalidConfig(format!("duplicate class name {}", c.name)));
            }
        }
        let mut by_id = HashMap::with_capacity(samples.len());
        let mut seen: HashMap<usize, (usize, usize)> = HashMap::new();
        for (pos, s) in samples.iter().enumerate() {
            if by_id.insert(s.sample_id, pos).is_some() {
                return Err(Error::InvalidConfig(format!("duplicate sample id {}", s.sample_id)));
            }
            if !ids.contains(&s.label) {
                return Err(Error::InvalidConfig(format!(
                    "sample {} has unknown label {}",
                    s.sample_id, s.label
                )));
            }
            if s.visual.len() != visual_dim || s.audio.len() != audio_dim {
                return Err(Error::Shape(format!(
                    "sample {} has dims ({}, {}), expected ({visual_dim}, {audio_dim})",
                    s.sample_id,
                    s.visual.len(),
                    s.audio.len()
                )));
            }
            if s.visual.iter().chain(&s.audio).any(|z| !z.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "sample {} has non-finite features",
                    s.sample_id
                )));
            }
            let e = seen.entry(s.label).or_default();
            match s.split {
                Split::Train => e.0 += 1,
                Split::Test => e.1 += 1,
            }
        }
        for c in &classes {
            let (train, test) = seen.get(&c.id).copied().unwrap_or_default();
            if train == 0 || test == 0 {
                return Err(Error::InvalidConfig(format!(
                    "class {} needs at least one train and one test sample (has {train}/{test})",
                    c.name
                )));
            }
        }
        Ok(Self {
            samples,
            classes,
            visual_dim,
            audio_dim,
            by_id,
        })
    }

    pub fn samples(&self) -> &[MultimodalSample] {
        &self.samples
    }

    pub fn classes(&self) -> &[ClassLabel] {
        &self.classes
    }

    pub fn class(&self, id: usize) -> Option<&ClassLabel> {
        self.classes.iter().find(|c| c.id == id)
    }

    pub fn sample(&self, sample_id: usize) -> Option<&MultimodalSample> {
        self.by_id.get(&sample_id).map(|&i| &self.samples[i])
    }

    pub fn visual_dim(&self) -> usize {
        self.visual_dim
    }

    pub fn audio_dim(&self) -> usize {
        self.audio_dim
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// True when both datasets hold the same samples with bitwise-equal
    /// features.
    pub fn bit_identical(&self, other: &Dataset) -> bool {
        let bits = |v: &[f64]| v.iter().map(|z| z.to_bits()).collect::<Vec<_>>();
        self.classes == other.classes
            && self.visual_dim == other.visual_dim
            && self.audio_dim == other.audio_dim
            && self.samples.len() == other.samples.len()
            && self.samples.iter().zip(&other.samples).all(|(a, b)| {
                a.sample_id == b.sample_id
                    && a.label == b.label
                    && a.split == b.split
                    && bits(&a.visual) == bits(&b.visual)
                    && bits(&a.audio) == bits(&b.audio)
            })
    }
}
