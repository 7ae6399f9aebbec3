//! Prototype prediction, similarity-weighted cross-entropy and the
//! contrastive mutual-information terms.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore};

/// Probabilities are floored here before the log in cross-entropy.
pub const CE_FLOOR: f64 = 1e-12;
const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the classification term; `1 − alpha` goes to the MI term.
    pub alpha: f64,
    /// Softmax temperature over cosine similarities.
    pub tau: f64,
    /// Temperature of the MI critic scores.
    pub tau_mi: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.7,
            tau: 1.0,
            tau_mi: 0.07,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.tau > 0.0) || !(self.tau_mi > 0.0) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        Ok(())
    }
}

/// Linear maps applied to both sides before the cosine score.
#[derive(Clone, Debug)]
pub struct MiCritic {
    pub left: ParamId,
    pub right: ParamId,
}

impl MiCritic {
    pub fn new(store: &mut ParamStore, name: &str, left: Mat, right: Mat) -> Self {
        assert_eq!(left.ncols(), right.ncols(), "critic maps must share an output width");
        Self {
            left: store.add(format!("{name}.left"), left, ParamGroup::Critic, None, false),
            right: store.add(format!("{name}.right"), right, ParamGroup::Critic, None, false),
        }
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.left, self.right]
    }
}

fn check_rows_nonzero(g: &Graph, x: Var, what: &str) -> Result<()> {
    for (i, row) in g.value(x).rows().into_iter().enumerate() {
        if row.dot(&row).sqrt() < NORM_EPS {
            return Err(Error::DegenerateFeature(format!("{what} row {i} has zero norm")));
        }
    }
    Ok(())
}

/// Cosine logits `cos(f_i, p_c) / tau` for an `n × d` batch against `C × d`
/// prototype rows.
pub fn cosine_logits(g: &mut Graph, fused: Var, prototypes: Var, tau: f64) -> Result<Var> {
    check_rows_nonzero(g, fused, "fused feature")?;
    check_rows_nonzero(g, prototypes, "prototype")?;
    let f = g.normalize_rows(fused);
    let p = g.normalize_rows(prototypes);
    let sim = g.matmul_t(f, p);
    Ok(g.scale(sim, 1.0 / tau))
}

/// Class probabilities for one fused feature.
pub fn predict(fused: &[f64], prototypes: &[Vec<f64>], tau: f64) -> Result<Vec<f64>> {
    if prototypes.is_empty() {
        return Err(Error::Config("no prototypes to predict over".into()));
    }
    let d = fused.len();
    if prototypes.iter().any(|p| p.len() != d) {
        return Err(Error::Shape("prototype and feature dimensions differ".into()));
    }
    let mut g = Graph::new();
    let f = g.constant(Mat::from_shape_vec((1, d), fused.to_vec()).expect("row"));
    let flat: Vec<f64> = prototypes.iter().flatten().copied().collect();
    let p = g.constant(Mat::from_shape_vec((prototypes.len(), d), flat).expect("rows"));
    let logits = cosine_logits(&mut g, f, p, tau)?;
    let probs = g.softmax_rows(logits, None);
    Ok(g.value(probs).iter().copied().collect())
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = a.iter().map(|z| z * z).sum::<f64>().sqrt();
    let nb = b.iter().map(|z| z * z).sum::<f64>().sqrt();
    if na < NORM_EPS || nb < NORM_EPS {
        return Err(Error::DegenerateFeature("zero-norm vector in cosine".into()));
    }
    Ok((a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)).clamp(-1.0, 1.0))
}

/// `w_ij = (cos(v_i, v_j) + 1) / 2`.
pub fn pairwise_weight(v_i: &[f64], v_j: &[f64]) -> Result<f64> {
    Ok(0.5 * cosine(v_i, v_j)? + 0.5)
}

/// `(1/n²) Σ_i Σ_j w_ij · ce_i`.
pub fn similarity_weighted_ce(weights: &[Vec<f64>], ce: &[f64]) -> f64 {
    let n = ce.len() as f64;
    weights
        .iter()
        .zip(ce)
        .map(|(row, c)| row.iter().sum::<f64>() * c)
        .sum::<f64>()
        / (n * n)
}

/// Per-sample cross-entropy `−log max(p_i[label_i], CE_FLOOR)` as an `n×1`
/// column.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Var {
    let logp = g.log_softmax_rows(logits);
    let picked = g.pick_per_row(logp, labels);
    let floored = g.clamp_min(picked, CE_FLOOR.ln());
    g.scale(floored, -1.0)
}

/// One training batch as graph nodes. `labels` index rows of `prototypes`.
pub struct BatchFeatures<'a> {
    pub visual: Var,
    pub audio: Var,
    pub fused: Var,
    pub prototypes: Var,
    pub labels: &'a [usize],
}

/// Similarity-weighted cross-entropy.
pub fn loss_cw(g: &mut Graph, batch: &BatchFeatures<'_>, tau: f64) -> Result<Var> {
    let classes = g.shape(batch.prototypes).0;
    if let Some(&bad) = batch.labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Config(format!("label index {bad} has no prototype")));
    }
    if batch.labels.len() != g.shape(batch.fused).0 {
        return Err(Error::Shape("labels and batch rows differ".into()));
    }
    check_rows_nonzero(g, batch.visual, "visual feature")?;
    let logits = cosine_logits(g, batch.fused, batch.prototypes, tau)?;
    let ce = cross_entropy(g, logits, batch.labels);
    let vn = g.normalize_rows(batch.visual);
    let sim = g.matmul_t(vn, vn);
    let sim = g.scale(sim, 0.5);
    let w = g.add_const(sim, 0.5);
    let w_bar = g.row_mean(w);
    let weighted = g.mul(w_bar, ce);
    Ok(g.mean(weighted))
}

/// In-batch contrastive lower bound on mutual information:
/// `(1/n) Σ_i log( n · softmax_j(s_ij / τ)[i] )` with cosine scores after the
/// critic maps. Never exceeds `log n`.
pub fn mi_estimate(g: &mut Graph, store: &ParamStore, f: Var, other: Var, critic: &MiCritic, tau_mi: f64) -> Result<Var> {
    let n = g.shape(f).0;
    if n < 2 {
        return Err(Error::BatchTooSmall(n));
    }
    if g.shape(other).0 != n {
        return Err(Error::Shape("MI operands have different batch sizes".into()));
    }
    let left = store.bind(g, critic.left);
    let right = store.bind(g, critic.right);
    let fl = g.matmul(f, left);
    let gr = g.matmul(other, right);
    let fl = g.normalize_rows(fl);
    let gr = g.normalize_rows(gr);
    let scores = g.matmul_t(fl, gr);
    let scores = g.scale(scores, 1.0 / tau_mi);
    let logp = g.log_softmax_rows(scores);
    let diag = g.diag(logp);
    let mean = g.mean(diag);
    Ok(g.add_const(mean, (n as f64).ln()))
}

/// `−Î(fused; visual) − Î(fused; audio)`.
pub fn loss_mi(
    g: &mut Graph,
    store: &ParamStore,
    batch: &BatchFeatures<'_>,
    critics: &[MiCritic; 2],
    tau_mi: f64,
) -> Result<Var> {
    let iv = mi_estimate(g, store, batch.fused, batch.visual, &critics[0], tau_mi)?;
    let ia = mi_estimate(g, store, batch.fused, batch.audio, &critics[1], tau_mi)?;
    let sum = g.add(iv, ia);
    Ok(g.scale(sum, -1.0))
}

pub struct LossParts {
    pub total: Var,
    pub cw: Option<Var>,
    pub mi: Option<Var>,
}

/// `alpha · L_CW + (1 − alpha) · L_MI`. A term with zero weight is not
/// built, so `alpha = 1` works for single-sample batches.
pub fn total_loss(
    g: &mut Graph,
    store: &ParamStore,
    batch: &BatchFeatures<'_>,
    critics: &[MiCritic; 2],
    config: &LossConfig,
) -> Result<LossParts> {
    config.validate()?;
    let cw = (config.alpha > 0.0).then(|| loss_cw(g, batch, config.tau)).transpose()?;
    let mi = (config.alpha < 1.0)
        .then(|| loss_mi(g, store, batch, critics, config.tau_mi))
        .transpose()?;
    let total = match (cw, mi) {
        (Some(c), None) => c,
        (None, Some(m)) => m,
        (Some(c), Some(m)) => {
            let a = g.scale(c, config.alpha);
            let b = g.scale(m, 1.0 - config.alpha);
            g.add(a, b)
        }
        (None, None) => unreachable!("alpha lies in [0, 1]"),
    };
    Ok(LossParts { total, cw, mi })
}
