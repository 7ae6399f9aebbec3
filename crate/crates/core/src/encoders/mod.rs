//! Visual, audio and text feature extractors.
//!
//! The visual and text branches are small frozen transformers whose blocks
//! carry a mixture of LoRA experts; one expert per task is added and trained
//! while the earlier ones stay frozen. The audio branch is a frozen
//! projection.

mod checkpoint;
mod moe;
mod transformer;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, Segments, Var};
use crate::error::{shape_err, Error, Result};
use crate::fusion::{FusionConfig, FusionParams};
use crate::losses::MiCritic;
use crate::params::{normal_mat, Fnv, ParamGroup, ParamId, ParamStore};
use crate::scenario::{expand_label, ClassLabel, MultimodalSample, PromptTemplateSet};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use moe::{moe_forward, FeedForward, LoraExpert, MoeLayer, Router};
pub use transformer::{InputAdapter, InputSpec, LayerNormParams, Linear, Modality, TransformerBlock, TransformerEncoder};

/// Prototype averages below this norm are rejected.
pub const PROTOTYPE_EPS: f64 = 1e-8;
const EVAL_CHUNK: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub router_hidden: usize,
    /// Tokens produced from each raw visual vector.
    pub visual_tokens: usize,
    /// Output width of the visual and text encoders.
    pub feature_dim: usize,
    /// Output width of the audio encoder.
    pub audio_feature_dim: usize,
    pub vocab: usize,
    pub max_text_tokens: usize,
    pub lora_rank: usize,
    pub lora_scale: f64,
    /// Seed for backbone initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 64,
            blocks: 2,
            heads: 4,
            ffn_hidden: 256,
            router_hidden: 32,
            visual_tokens: 4,
            feature_dim: 512,
            audio_feature_dim: 1024,
            vocab: 4096,
            max_text_tokens: 16,
            lora_rank: 4,
            lora_scale: 1.0,
            seed: 7,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("width", self.width),
            ("blocks", self.blocks),
            ("heads", self.heads),
            ("ffn_hidden", self.ffn_hidden),
            ("router_hidden", self.router_hidden),
            ("visual_tokens", self.visual_tokens),
            ("feature_dim", self.feature_dim),
            ("audio_feature_dim", self.audio_feature_dim),
            ("vocab", self.vocab),
            ("max_text_tokens", self.max_text_tokens),
            ("lora_rank", self.lora_rank),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Config("model.width must be divisible by model.heads".into()));
        }
        if !(self.lora_scale > 0.0) {
            return Err(Error::Config("model.lora_scale must be positive".into()));
        }
        Ok(())
    }
}

/// Lowercases, drops punctuation, splits on whitespace and hashes each word
/// into `vocab` buckets. At most `max_tokens` ids; never empty.
pub fn tokenize(text: &str, vocab: usize, max_tokens: usize) -> Vec<usize> {
    let cleaned: String = text
        .chars()
        .map(|c| if c.is_alphanumeric() || c == '_' { c.to_ascii_lowercase() } else { ' ' })
        .collect();
    let mut ids: Vec<usize> = cleaned
        .split_whitespace()
        .take(max_tokens)
        .map(|w| {
            let mut h = Fnv::new();
            h.write(w.as_bytes());
            (h.finish() % vocab as u64) as usize
        })
        .collect();
    if ids.is_empty() {
        ids.push(0);
    }
    ids
}

/// Frozen `tanh(x W + b)` audio encoder.
#[derive(Clone, Debug)]
pub struct AudioEncoder {
    pub linear: Linear,
}

impl AudioEncoder {
    fn new(store: &mut ParamStore, d_raw: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let linear = Linear::new(store, "audio.proj", d_raw, d_out, ParamGroup::AudioEncoder, rng);
        store.get_mut(linear.bias).value = normal_mat(rng, 1, d_out, 0.1);
        Self { linear }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, raw: Var) -> Var {
        let h = self.linear.forward(g, store, raw);
        g.tanh(h)
    }
}

/// Normalizes each embedding, averages and renormalizes.
pub fn prototype_from_embeddings(embeddings: &[Vec<f64>]) -> Result<Vec<f64>> {
    let Some(first) = embeddings.first() else {
        return Err(Error::DegeneratePrototype("no embeddings".into()));
    };
    let mut mean = vec![0.0; first.len()];
    for e in embeddings {
        if e.len() != mean.len() {
            return Err(shape_err("embeddings differ in length"));
        }
        let n = e.iter().map(|z| z * z).sum::<f64>().sqrt();
        if n < PROTOTYPE_EPS {
            return Err(Error::DegeneratePrototype("zero-norm prompt embedding".into()));
        }
        for (m, z) in mean.iter_mut().zip(e) {
            *m += z / n;
        }
    }
    mean.iter_mut().for_each(|m| *m /= embeddings.len() as f64);
    let n = mean.iter().map(|z| z * z).sum::<f64>().sqrt();
    if n < PROTOTYPE_EPS {
        return Err(Error::DegeneratePrototype(format!("mean embedding norm {n:e}")));
    }
    Ok(mean.into_iter().map(|z| z / n).collect())
}

/// One parameter tensor in the trainable set.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainableEntry {
    pub name: String,
    pub group: ParamGroup,
    pub owner_task: Option<usize>,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParameterSet {
    pub entries: Vec<TrainableEntry>,
}

impl ParameterSet {
    pub fn count(&self) -> usize {
        self.entries.iter().map(|e| e.rows * e.cols).sum()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|e| e.name == name)
    }
}

/// Graph nodes for one batch.
pub struct BatchForward {
    pub visual: Var,
    pub audio: Var,
    pub fused: Var,
    pub masked: Vec<bool>,
    pub r: Vec<f64>,
}

/// Features for a set of samples, one row per sample.
#[derive(Clone, Debug)]
pub struct EvalFeatures {
    pub visual: Mat,
    pub audio: Mat,
    pub fused: Mat,
    pub masked: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub fusion_config: FusionConfig,
    pub store: ParamStore,
    pub visual: TransformerEncoder,
    pub text: TransformerEncoder,
    pub audio: AudioEncoder,
    pub fusion: FusionParams,
    pub critics: [MiCritic; 2],
    pub visual_raw: usize,
    pub audio_raw: usize,
    experts: usize,
}

impl Model {
    pub fn new(config: &ModelConfig, fusion_config: &FusionConfig, visual_raw: usize, audio_raw: usize) -> Result<Self> {
        config.validate()?;
        fusion_config.validate()?;
        if visual_raw == 0 || audio_raw == 0 {
            return Err(Error::Config("raw input dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let c = config;
        let visual = TransformerEncoder::new(
            &mut store,
            "visual",
            Modality::Visual,
            InputSpec::Project { d_raw: visual_raw, tokens: c.visual_tokens },
            c.visual_tokens,
            c.width,
            c.blocks,
            c.heads,
            c.ffn_hidden,
            c.router_hidden,
            c.feature_dim,
            ParamGroup::VisualBackbone,
            &mut rng,
        );
        let text = TransformerEncoder::new(
            &mut store,
            "text",
            Modality::Text,
            InputSpec::Embed { vocab: c.vocab },
            c.max_text_tokens,
            c.width,
            c.blocks,
            c.heads,
            c.ffn_hidden,
            c.router_hidden,
            c.feature_dim,
            ParamGroup::TextBackbone,
            &mut rng,
        );
        let audio = AudioEncoder::new(&mut store, audio_raw, c.audio_feature_dim, &mut rng);
        let fusion = FusionParams::new(&mut store, fusion_config.clone(), c.feature_dim, c.audio_feature_dim, &mut rng);
        let d = c.feature_dim;
        let critics = [
            MiCritic::new(&mut store, "critic_visual", Mat::eye(d), Mat::eye(d)),
            MiCritic::new(&mut store, "critic_audio", Mat::eye(d), Mat::zeros((c.audio_feature_dim, d))),
        ];
        let mut model = Self {
            config: config.clone(),
            fusion_config: fusion_config.clone(),
            store,
            visual,
            text,
            audio,
            fusion,
            critics,
            visual_raw,
            audio_raw,
            experts: 0,
        };
        model.reset_critics();
        Ok(model)
    }

    /// Experts per MoE layer.
    pub fn expert_count(&self) -> usize {
        self.experts
    }

    /// Critics start as identity maps, with the projection on the audio side.
    pub fn reset_critics(&mut self) {
        let d = self.config.feature_dim;
        let p = self.store.value(self.fusion.projection).clone();
        let [cv, ca] = &self.critics;
        let (cv, ca) = (cv.clone(), ca.clone());
        self.store.get_mut(cv.left).value = Mat::eye(d);
        self.store.get_mut(cv.right).value = Mat::eye(d);
        self.store.get_mut(ca.left).value = Mat::eye(d);
        self.store.get_mut(ca.right).value = p;
    }

    /// Adds a zero-initialized expert for task `t` to every MoE layer and
    /// freezes the experts of earlier tasks.
    pub fn add_task_expert(&mut self, t: usize) -> Result<()> {
        if t != self.experts + 1 {
            return Err(Error::Protocol(format!(
                "expert for task {t} requested with {} experts present",
                self.experts
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(t as u64)));
        let (rank, scale) = (self.config.lora_rank, self.config.lora_scale);
        for enc in [&mut self.visual, &mut self.text] {
            for (i, block) in enc.blocks.iter_mut().enumerate() {
                for e in &block.moe.experts {
                    e.set_frozen(&mut self.store, true);
                }
                let prefix = format!("{}.block{i}.moe", enc.prefix);
                block.add_expert(&mut self.store, &prefix, rank, scale, t, &mut rng);
            }
        }
        self.experts = t;
        Ok(())
    }

    /// Freezes every expert, e.g. once the final task is trained.
    pub fn freeze_experts(&mut self) {
        for enc in [&self.visual, &self.text] {
            for layer in enc.moe_layers() {
                for e in &layer.experts {
                    e.set_frozen(&mut self.store, true);
                }
            }
        }
    }

    pub fn backbone_ids(&self) -> Vec<ParamId> {
        let mut ids = self.visual.backbone_ids();
        ids.extend(self.text.backbone_ids());
        ids
    }

    /// Unfreezes (or refreezes) the visual and text backbones. The audio
    /// encoder and the fusion projection are unaffected.
    pub fn set_backbone_trainable(&mut self, trainable: bool) {
        for id in self.backbone_ids() {
            self.store.get_mut(id).frozen = !trainable;
        }
    }

    pub fn trainable_parameters(&self) -> ParameterSet {
        ParameterSet {
            entries: self
                .store
                .iter()
                .filter(|(_, p)| !p.frozen)
                .map(|(_, p)| TrainableEntry {
                    name: p.name.clone(),
                    group: p.group,
                    owner_task: p.owner_task,
                    rows: p.value.nrows(),
                    cols: p.value.ncols(),
                })
                .collect(),
        }
    }

    fn raw_matrix(&self, samples: &[&MultimodalSample]) -> Result<(Mat, Mat)> {
        let n = samples.len();
        let mut v = Mat::zeros((n, self.visual_raw));
        let mut a = Mat::zeros((n, self.audio_raw));
        for (i, s) in samples.iter().enumerate() {
            if s.visual.len() != self.visual_raw || s.audio.len() != self.audio_raw {
                return Err(shape_err(format!(
                    "sample {} has {}/{} raw dims, model expects {}/{}",
                    s.sample_id,
                    s.visual.len(),
                    s.audio.len(),
                    self.visual_raw,
                    self.audio_raw
                )));
            }
            v.row_mut(i).assign(&ndarray::ArrayView1::from(&s.visual));
            a.row_mut(i).assign(&ndarray::ArrayView1::from(&s.audio));
        }
        Ok((v, a))
    }

    pub fn visual_graph(&self, g: &mut Graph, raw: Var) -> Result<Var> {
        if g.shape(raw).1 != self.visual_raw {
            return Err(shape_err(format!("visual input has {} dims, expected {}", g.shape(raw).1, self.visual_raw)));
        }
        Ok(self.visual.encode_raw(g, &self.store, raw))
    }

    pub fn audio_graph(&self, g: &mut Graph, raw: Var) -> Result<Var> {
        if g.shape(raw).1 != self.audio_raw {
            return Err(shape_err(format!("audio input has {} dims, expected {}", g.shape(raw).1, self.audio_raw)));
        }
        Ok(self.audio.forward(g, &self.store, raw))
    }

    pub fn encode_visual(&self, raw: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let x = g.constant(Mat::from_shape_vec((1, raw.len()), raw.to_vec()).expect("row"));
        let out = self.visual_graph(&mut g, x)?;
        Ok(g.value(out).iter().copied().collect())
    }

    pub fn encode_audio(&self, raw: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let x = g.constant(Mat::from_shape_vec((1, raw.len()), raw.to_vec()).expect("row"));
        let out = self.audio_graph(&mut g, x)?;
        Ok(g.value(out).iter().copied().collect())
    }

    /// One embedding row per text.
    pub fn text_graph(&self, g: &mut Graph, texts: &[String]) -> Var {
        let seqs: Vec<Vec<usize>> = texts
            .iter()
            .map(|t| tokenize(t, self.config.vocab, self.config.max_text_tokens))
            .collect();
        self.text.encode_ids(g, &self.store, &seqs)
    }

    pub fn encode_text(&self, texts: &[String]) -> Mat {
        let mut g = Graph::new();
        let out = self.text_graph(&mut g, texts);
        g.value(out).clone()
    }

    /// `C × d` unit prototypes, one per class, differentiable through the
    /// text adapters.
    pub fn prototypes_graph(&self, g: &mut Graph, classes: &[ClassLabel], templates: &PromptTemplateSet) -> Result<Var> {
        if classes.is_empty() {
            return Err(Error::Config("no classes to build prototypes for".into()));
        }
        let n = templates.len();
        let prompts: Vec<String> = classes.iter().flat_map(|c| expand_label(c, templates)).collect();
        let emb = self.text_graph(g, &prompts);
        for (i, row) in g.value(emb).rows().into_iter().enumerate() {
            if row.dot(&row).sqrt() < PROTOTYPE_EPS {
                return Err(Error::DegeneratePrototype(format!(
                    "class {} prompt {} has a zero embedding",
                    classes[i / n].id,
                    i % n
                )));
            }
        }
        let unit = g.normalize_rows(emb);
        let segs: Segments = (0..classes.len()).map(|c| (c * n, n)).collect::<Vec<_>>().into();
        let mean = g.segment_mean(unit, &segs);
        for (c, row) in g.value(mean).rows().into_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if norm < PROTOTYPE_EPS {
                return Err(Error::DegeneratePrototype(format!(
                    "class {} mean embedding norm {norm:e}",
                    classes[c].id
                )));
            }
        }
        Ok(g.normalize_rows(mean))
    }

    pub fn prototypes(&self, classes: &[ClassLabel], templates: &PromptTemplateSet) -> Result<Mat> {
        let mut g = Graph::new();
        let p = self.prototypes_graph(&mut g, classes, templates)?;
        Ok(g.value(p).clone())
    }

    pub fn encode_text_prototype(&self, class: &ClassLabel, templates: &PromptTemplateSet) -> Result<Vec<f64>> {
        Ok(self.prototypes(std::slice::from_ref(class), templates)?.iter().copied().collect())
    }

    /// Encodes and fuses a batch.
    pub fn forward_batch(&self, g: &mut Graph, samples: &[&MultimodalSample], training: bool) -> Result<BatchForward> {
        let (v, a) = self.raw_matrix(samples)?;
        let v = g.constant(v);
        let a = g.constant(a);
        let visual = self.visual_graph(g, v)?;
        let audio = self.audio_graph(g, a)?;
        let out = self.fusion.forward(g, &self.store, visual, audio, training)?;
        Ok(BatchForward {
            visual,
            audio,
            fused: out.fused,
            masked: out.masked,
            r: out.r,
        })
    }

    /// Eval-mode features, computed in chunks.
    pub fn features(&self, samples: &[&MultimodalSample]) -> Result<EvalFeatures> {
        let (dv, da) = (self.config.feature_dim, self.config.audio_feature_dim);
        let n = samples.len();
        let mut out = EvalFeatures {
            visual: Mat::zeros((n, dv)),
            audio: Mat::zeros((n, da)),
            fused: Mat::zeros((n, dv)),
            masked: Vec::with_capacity(n),
        };
        for (k, chunk) in samples.chunks(EVAL_CHUNK).enumerate() {
            let mut g = Graph::new();
            let b = self.forward_batch(&mut g, chunk, false)?;
            let rows = k * EVAL_CHUNK..k * EVAL_CHUNK + chunk.len();
            out.visual.slice_mut(ndarray::s![rows.clone(), ..]).assign(g.value(b.visual));
            out.audio.slice_mut(ndarray::s![rows.clone(), ..]).assign(g.value(b.audio));
            out.fused.slice_mut(ndarray::s![rows, ..]).assign(g.value(b.fused));
            out.masked.extend(b.masked);
        }
        Ok(out)
    }

    /// Digest of every tensor matching `select`.
    pub fn fingerprint(&self, select: impl FnMut(&crate::params::Param) -> bool) -> u64 {
        self.store.fingerprint(select)
    }
}
