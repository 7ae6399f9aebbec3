//! The incremental protocol: per-task expert growth, optimization, stage and
//! pre-task evaluation, and the baselines.

mod optim;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::ArrayView1;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat};
use crate::encoders::{save_checkpoint, Model, ModelConfig, Modality};
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, StrongModality};
use crate::losses::{total_loss, BatchFeatures, LossConfig};
use crate::metrics::{confusion_matrix, fusion_nmi, task_similarity, AccuracyMatrix, MetricsLedger, StageConfusion};
use crate::params::ParamId;
use crate::scenario::{build_stream, ClassLabel, Dataset, MultimodalSample, PromptTemplateSet, TaskStream};

pub use optim::{cosine_lr, AdamW};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Per-task LoRA experts with frozen backbones.
    Ours,
    /// No experts; backbones, fusion and critics train on every task.
    NaiveFinetune,
    /// The initial model, never trained.
    ZeroShot,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ours => "ours",
            Method::NaiveFinetune => "naive_finetune",
            Method::ZeroShot => "zero_shot",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ours" => Some(Method::Ours),
            "naive_finetune" => Some(Method::NaiveFinetune),
            "zero_shot" => Some(Method::ZeroShot),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub method: Method,
    pub tasks: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate reached at the last step of every task.
    pub lr_min: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    pub tau: f64,
    pub tau_mi: f64,
    /// Prompt templates per class.
    pub prompts: usize,
    /// Seeds the task split, batch order and k-means.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Ours,
            tasks: 4,
            epochs: 20,
            batch_size: 32,
            lr: 1e-3,
            lr_min: 1e-5,
            weight_decay: 1e-4,
            alpha: 0.7,
            tau: 1.0,
            tau_mi: 0.07,
            prompts: 35,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn loss(&self) -> LossConfig {
        LossConfig {
            alpha: self.alpha,
            tau: self.tau,
            tau_mi: self.tau_mi,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss().validate()?;
        for (name, v) in [
            ("tasks", self.tasks),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("prompts", self.prompts),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("train.{name} must be positive")));
            }
        }
        if self.alpha < 1.0 && self.batch_size < 2 {
            return Err(Error::Config("the mutual-information term needs train.batch_size ≥ 2".into()));
        }
        if !(self.lr > 0.0) || !(self.lr_min >= 0.0) || self.lr_min > self.lr {
            return Err(Error::Config("need 0 ≤ train.lr_min ≤ train.lr and train.lr > 0".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("train.weight_decay must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Hooks into a run. Every method has a no-op default.
pub trait Observer {
    /// After experts are added for task `t`, before any update.
    fn task_started(&mut self, _t: usize, _model: &Model) {}
    fn epoch_finished(&mut self, _t: usize, _epoch: usize, _loss: f64, _model: &Model) {}
    fn task_finished(&mut self, _t: usize, _model: &Model) {}
}

impl Observer for () {}

/// Result of evaluating one stage.
#[derive(Clone, Debug)]
pub struct StageEval {
    pub t: usize,
    /// Accuracy on each task `1..=t`.
    pub row: Vec<f64>,
    /// Accuracy over all seen test samples.
    pub pooled: f64,
    pub confusion: StageConfusion,
    /// Prototypes of the seen classes, in stream order.
    pub prototypes: Mat,
    /// Fused test features and the 1-based task of each row.
    pub fused: Mat,
    pub task_of_row: Vec<usize>,
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
}

/// Index of the prototype with the highest cosine similarity.
pub fn nearest_prototype(f: ArrayView1<f64>, prototypes: &Mat) -> Result<usize> {
    let norm = f.dot(&f).sqrt();
    if norm < 1e-12 {
        return Err(Error::DegenerateFeature("zero-norm fused feature".into()));
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (c, p) in prototypes.rows().into_iter().enumerate() {
        let s = f.dot(&p) / (norm * p.dot(&p).sqrt());
        if s > best.1 {
            best = (c, s);
        }
    }
    Ok(best.0)
}

fn nearest_centroid_accuracy(features: &Mat, labels: &[usize], classes: usize) -> f64 {
    let d = features.ncols();
    let mut centroids = Mat::zeros((classes, d));
    let mut counts = vec![0usize; classes];
    for (row, &y) in features.rows().into_iter().zip(labels) {
        let mut c = centroids.row_mut(y);
        c += &row;
        counts[y] += 1;
    }
    for (mut c, &n) in centroids.rows_mut().into_iter().zip(&counts) {
        if n > 0 {
            c /= n as f64;
        }
    }
    let correct = features
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(row, &y)| {
            let mut best = (0, f64::INFINITY);
            for (k, c) in centroids.rows().into_iter().enumerate() {
                if counts[k] == 0 {
                    continue;
                }
                let dist: f64 = row.iter().zip(c.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                if dist < best.1 {
                    best = (k, dist);
                }
            }
            best.0 == y
        })
        .count();
    correct as f64 / labels.len().max(1) as f64
}

/// Splits `n` shuffled positions into batches; a trailing batch of one is
/// merged into its predecessor so contrastive terms always see pairs.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let start = (out.len() - 1) * size;
        *out.last_mut().expect("nonempty") = &order[start..];
    }
    out
}

/// One model being taken through a task stream.
pub struct Session<'a> {
    pub dataset: &'a Dataset,
    pub stream: TaskStream,
    pub model: Model,
    pub config: TrainConfig,
    pub templates: PromptTemplateSet,
    trained: usize,
    begun: usize,
}

impl<'a> Session<'a> {
    pub fn new(dataset: &'a Dataset, model: &ModelConfig, fusion: &FusionConfig, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let stream = build_stream(dataset, config.tasks, config.seed)?;
        let mut m = Model::new(model, fusion, dataset.visual_dim(), dataset.audio_dim())?;
        if config.method == Method::NaiveFinetune {
            m.set_backbone_trainable(true);
        }
        Ok(Self {
            dataset,
            stream,
            model: m,
            config: config.clone(),
            templates: PromptTemplateSet::standard(config.prompts)?,
            trained: 0,
            begun: 0,
        })
    }

    /// Replaces the model with one that has been trained through task `t`,
    /// e.g. from a checkpoint.
    pub fn restore(&mut self, model: Model, t: usize) -> Result<()> {
        if t > self.stream.len() {
            return Err(Error::Protocol(format!("stream has {} tasks, cannot restore task {t}", self.stream.len())));
        }
        if model.visual_raw != self.dataset.visual_dim() || model.audio_raw != self.dataset.audio_dim() {
            return Err(Error::Shape(format!(
                "model expects raw dims ({}, {}), dataset has ({}, {})",
                model.visual_raw,
                model.audio_raw,
                self.dataset.visual_dim(),
                self.dataset.audio_dim()
            )));
        }
        if self.config.method == Method::Ours && model.expert_count() != t {
            return Err(Error::Protocol(format!("model has {} experts, expected {t}", model.expert_count())));
        }
        self.model = model;
        self.trained = t;
        self.begun = t;
        Ok(())
    }

    pub fn trained_tasks(&self) -> usize {
        self.trained
    }

    pub fn seen_labels(&self, t: usize) -> Vec<ClassLabel> {
        self.stream
            .seen_classes(t)
            .into_iter()
            .map(|id| self.dataset.class(id).expect("stream classes exist").clone())
            .collect()
    }

    fn samples(&self, ids: &[usize]) -> Vec<&'a MultimodalSample> {
        let ds: &'a Dataset = self.dataset;
        ids.iter().map(|&id| ds.sample(id).expect("stream samples exist")).collect()
    }

    /// Accuracy on task `i`'s test data over the classes of tasks `1..=t`.
    pub fn task_accuracy(&self, i: usize, t: usize) -> Result<f64> {
        let seen = self.seen_labels(t);
        let protos = self.model.prototypes(&seen, &self.templates)?;
        let samples = self.samples(&self.stream.task(i).test_samples);
        let feats = self.model.features(&samples)?;
        let mut correct = 0;
        for (row, s) in feats.fused.rows().into_iter().zip(&samples) {
            if seen[nearest_prototype(row, &protos)?].id == s.label {
                correct += 1;
            }
        }
        Ok(correct as f64 / samples.len() as f64)
    }

    /// Adds the task's experts (ours) and resolves an automatic strong
    /// modality.
    pub fn begin_task(&mut self, t: usize) -> Result<()> {
        if t != self.trained + 1 || t > self.stream.len() || self.begun >= t {
            return Err(Error::Protocol(format!("cannot begin task {t} after {} trained", self.trained)));
        }
        if self.config.method == Method::Ours {
            self.model.add_task_expert(t)?;
        }
        if self.model.fusion_config.strong_modality == StrongModality::Auto {
            let samples = self.samples(&self.stream.task(t).train_samples);
            let feats = self.model.features(&samples)?;
            let classes = &self.stream.task(t).classes;
            let labels: Vec<usize> = samples
                .iter()
                .map(|s| classes.iter().position(|&c| c == s.label).expect("task label"))
                .collect();
            let acc_v = nearest_centroid_accuracy(&feats.visual, &labels, classes.len());
            let acc_a = nearest_centroid_accuracy(&feats.audio, &labels, classes.len());
            self.model.fusion.strong = if acc_a > acc_v { Modality::Audio } else { Modality::Visual };
        }
        self.begun = t;
        Ok(())
    }

    /// Accuracy on task `t` before it is trained, over `C_{1:t}`.
    pub fn evaluate_pre_task(&self, t: usize) -> Result<f64> {
        if t != self.trained + 1 || t > self.stream.len() {
            return Err(Error::Protocol(format!(
                "pre-task evaluation of task {t} with {} tasks trained",
                self.trained
            )));
        }
        self.task_accuracy(t, t)
    }

    /// Trains task `t`; returns the mean loss of every epoch.
    pub fn train_task(&mut self, t: usize, observer: &mut dyn Observer) -> Result<Vec<f64>> {
        if t != self.trained + 1 || self.begun != t {
            return Err(Error::Protocol(format!("task {t} has not been begun in order")));
        }
        if self.config.method == Method::Ours && self.model.expert_count() != t {
            return Err(Error::Protocol(format!(
                "task {t} needs {t} experts per layer, found {}",
                self.model.expert_count()
            )));
        }
        if self.config.method == Method::ZeroShot {
            self.trained = t;
            return Ok(Vec::new());
        }
        self.model.reset_critics();
        let seen = self.seen_labels(t);
        let position: HashMap<usize, usize> = seen.iter().enumerate().map(|(i, c)| (c.id, i)).collect();
        let train = self.samples(&self.stream.task(t).train_samples);
        let loss_cfg = self.config.loss();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ (0x5851_f42d_4c95_7f2du64.wrapping_mul(t as u64 + 1)));
        let mut opt = AdamW::new(self.config.weight_decay);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let per_epoch = batches(&order, self.config.batch_size).len();
        let total_steps = per_epoch * self.config.epochs;
        let mut step = 0;
        let mut losses = Vec::with_capacity(self.config.epochs);
        for epoch in 0..self.config.epochs {
            order.shuffle(&mut rng);
            let mut sum = 0.0;
            for idx in batches(&order, self.config.batch_size) {
                let batch: Vec<&MultimodalSample> = idx.iter().map(|&i| train[i]).collect();
                let labels: Vec<usize> = batch.iter().map(|s| position[&s.label]).collect();
                let mut g = Graph::new();
                let fw = self.model.forward_batch(&mut g, &batch, true)?;
                let prototypes = self.model.prototypes_graph(&mut g, &seen, &self.templates)?;
                let feats = BatchFeatures {
                    visual: fw.visual,
                    audio: fw.audio,
                    fused: fw.fused,
                    prototypes,
                    labels: &labels,
                };
                let parts = total_loss(&mut g, &self.model.store, &feats, &self.model.critics, &loss_cfg)?;
                let loss = g.scalar(parts.total);
                if !loss.is_finite() {
                    return Err(Error::DegenerateFeature(format!("non-finite loss at task {t} epoch {epoch}")));
                }
                sum += loss;
                let grads = g.backward(parts.total);
                let updates: Vec<(ParamId, Mat)> = g
                    .bound()
                    .filter_map(|(k, v)| grads.get(v).map(|gr| (ParamId(k), gr.clone())))
                    .collect();
                let lr = cosine_lr(step, total_steps, self.config.lr, self.config.lr_min);
                opt.step(&mut self.model.store, &updates, lr);
                step += 1;
            }
            let mean = sum / per_epoch as f64;
            losses.push(mean);
            observer.epoch_finished(t, epoch, mean, &self.model);
        }
        self.trained = t;
        Ok(losses)
    }

    /// Optimizer steps taken while training task `t`.
    pub fn steps_per_task(&self, t: usize) -> usize {
        let n = self.stream.task(t).num_train();
        let order: Vec<usize> = (0..n).collect();
        batches(&order, self.config.batch_size).len() * self.config.epochs
    }

    /// Evaluates every task `1..=t` over the classes seen so far.
    pub fn evaluate_stage(&self, t: usize) -> Result<StageEval> {
        if t == 0 || t > self.trained {
            return Err(Error::Protocol(format!("stage {t} evaluated with {} tasks trained", self.trained)));
        }
        let seen = self.seen_labels(t);
        let prototypes = self.model.prototypes(&seen, &self.templates)?;
        let mut samples = Vec::new();
        let mut task_of_row = Vec::new();
        for i in 1..=t {
            let s = self.samples(&self.stream.task(i).test_samples);
            task_of_row.extend(std::iter::repeat_n(i, s.len()));
            samples.extend(s);
        }
        let feats = self.model.features(&samples)?;
        let position: HashMap<usize, usize> = seen.iter().enumerate().map(|(i, c)| (c.id, i)).collect();
        let mut predictions = Vec::with_capacity(samples.len());
        for row in feats.fused.rows() {
            predictions.push(nearest_prototype(row, &prototypes)?);
        }
        let labels: Vec<usize> = samples.iter().map(|s| position[&s.label]).collect();
        let mut correct = vec![0usize; t];
        let mut total = vec![0usize; t];
        for ((&p, &y), &i) in predictions.iter().zip(&labels).zip(&task_of_row) {
            total[i - 1] += 1;
            correct[i - 1] += usize::from(p == y);
        }
        let row = correct.iter().zip(&total).map(|(&c, &n)| c as f64 / n as f64).collect();
        let pooled = correct.iter().sum::<usize>() as f64 / samples.len() as f64;
        let counts = confusion_matrix(&predictions, &labels, seen.len())?;
        Ok(StageEval {
            t,
            row,
            pooled,
            confusion: StageConfusion {
                t,
                classes: seen.iter().map(|c| c.id).collect(),
                counts,
            },
            prototypes,
            fused: feats.fused,
            task_of_row,
            predictions,
            labels,
        })
    }

    /// `w_t` from the stage's prototypes and fused test features.
    pub fn task_similarity(&self, eval: &StageEval) -> Result<f64> {
        let t = eval.t;
        if t == 1 {
            return Ok(0.0);
        }
        let old = self.stream.seen_classes(t - 1).len();
        let select = |f: &dyn Fn(usize) -> bool| -> Mat {
            let rows: Vec<usize> = (0..eval.fused.nrows()).filter(|&r| f(eval.task_of_row[r])).collect();
            eval.fused.select(ndarray::Axis(0), &rows)
        };
        let new_feats = select(&|i| i == t);
        let old_feats = select(&|i| i < t);
        let p = &eval.prototypes;
        task_similarity(
            t,
            p.slice(ndarray::s![old.., ..]),
            p.slice(ndarray::s![..old, ..]),
            new_feats.view(),
            old_feats.view(),
        )
    }

    /// Fusion NMI against visual and audio features over all test samples.
    pub fn fusion_nmi(&self) -> Result<(f64, f64)> {
        let mut samples = Vec::new();
        for t in 1..=self.stream.len() {
            samples.extend(self.samples(&self.stream.task(t).test_samples));
        }
        let feats = self.model.features(&samples)?;
        let k = self.dataset.num_classes();
        let seed = self.config.seed;
        Ok((
            fusion_nmi(&feats.fused, &feats.visual, k, seed)?,
            fusion_nmi(&feats.fused, &feats.audio, k, seed)?,
        ))
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions<'a> {
    /// Writes `task{t}.ckpt` after each trained task when set.
    pub checkpoint_dir: Option<&'a Path>,
    /// Stored inside every checkpoint header as `{"task": t, "run": echo}`.
    pub echo: serde_json::Value,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunRecord {
    pub method: Method,
    pub stream: TaskStream,
    pub ledger: MetricsLedger,
    pub epoch_losses: Vec<Vec<f64>>,
    pub strong_modality: Vec<Modality>,
    #[serde(skip)]
    pub stage_seconds: Vec<f64>,
    pub checkpoints: Vec<PathBuf>,
    pub incomplete: bool,
    pub error: Option<String>,
}

/// Runs the whole stream: zero-shot reference, then per task expert growth,
/// pre-task evaluation, training and stage evaluation; NMI at the end.
/// Failures after setup yield a record flagged incomplete.
pub fn run_scenario(
    dataset: &Dataset,
    model: &ModelConfig,
    fusion: &FusionConfig,
    config: &TrainConfig,
    options: &RunOptions<'_>,
    observer: &mut dyn Observer,
) -> Result<RunRecord> {
    let mut session = Session::new(dataset, model, fusion, config)?;
    let tasks = session.stream.len();
    let mut zero_shot = Vec::with_capacity(tasks);
    for t in 1..=tasks {
        zero_shot.push(session.task_accuracy(t, t)?);
    }
    let mut record = RunRecord {
        method: config.method,
        stream: session.stream.clone(),
        ledger: MetricsLedger::new(AccuracyMatrix::new(zero_shot)?),
        epoch_losses: Vec::new(),
        strong_modality: Vec::new(),
        stage_seconds: Vec::new(),
        checkpoints: Vec::new(),
        incomplete: false,
        error: None,
    };
    if let Err(e) = drive(&mut session, &mut record, options, observer) {
        record.incomplete = true;
        record.error = Some(e.to_string());
    }
    Ok(record)
}

fn drive(session: &mut Session<'_>, record: &mut RunRecord, options: &RunOptions<'_>, observer: &mut dyn Observer) -> Result<()> {
    for t in 1..=session.stream.len() {
        let start = Instant::now();
        session.begin_task(t)?;
        record.strong_modality.push(session.model.fusion.strong);
        let pre = session.evaluate_pre_task(t)?;
        record.ledger.matrix.set_pre_task(t, pre)?;
        observer.task_started(t, &session.model);
        let losses = session.train_task(t, observer)?;
        record.epoch_losses.push(losses);
        observer.task_finished(t, &session.model);
        let eval = session.evaluate_stage(t)?;
        let w = session.task_similarity(&eval)?;
        record.ledger.record_stage(eval.row, eval.pooled, w, eval.confusion)?;
        if let (Some(dir), false) = (options.checkpoint_dir, session.config.method == Method::ZeroShot) {
            let path = dir.join(format!("task{t}.ckpt"));
            let echo = serde_json::json!({ "task": t, "run": options.echo });
            save_checkpoint(&session.model, &echo, &path)?;
            record.checkpoints.push(path);
        }
        record.stage_seconds.push(start.elapsed().as_secs_f64());
    }
    let (nv, na) = session.fusion_nmi()?;
    record.ledger.set_nmi(nv, na)?;
    Ok(())
}
