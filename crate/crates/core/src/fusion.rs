//! Correlation-gated audio-visual fusion.
//!
//! Audio features are mapped into the visual space by a frozen projection.
//! A per-sample Pearson coefficient between the visual feature and the
//! projected audio feature decides whether the weak modality takes part.
//! The two features, scaled by learnable modality weights, form a two-token
//! sequence that the visual feature attends over; a residual MLP turns the
//! attended vector into the fused feature.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, Var};
use crate::encoders::{Linear, Modality};
use crate::error::{shape_err, Error, Result};
use crate::params::{normal_mat, ParamGroup, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Pearson gate, weighted token pair and cross-attention.
    Aavfm,
    /// Fixed linear map of the concatenated features, no gate.
    Concat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrongModality {
    Visual,
    Audio,
    /// Chosen per task by nearest-centroid accuracy on the training split.
    Auto,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub mode: FusionMode,
    pub threshold: f64,
    pub strong_modality: StrongModality,
    /// Apply the weak-modality mask while training as well as at inference.
    pub mask_in_training: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            mode: FusionMode::Aavfm,
            threshold: 0.8,
            strong_modality: StrongModality::Visual,
            mask_in_training: true,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(-1.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("fusion threshold {} outside [-1, 1]", self.threshold)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateDecision {
    FuseBoth,
    StrongOnly,
}

/// Pearson correlation over the components of two equal-length vectors.
pub fn pearson(v: &[f64], a: &[f64]) -> Result<f64> {
    if v.len() != a.len() || v.len() < 2 {
        return Err(shape_err(format!(
            "pearson needs two vectors of equal length >= 2, got {} and {}",
            v.len(),
            a.len()
        )));
    }
    let n = v.len() as f64;
    let mv = v.iter().sum::<f64>() / n;
    let ma = a.iter().sum::<f64>() / n;
    let (mut cov, mut vv, mut va) = (0.0, 0.0, 0.0);
    for (x, y) in v.iter().zip(a) {
        let (dx, dy) = (x - mv, y - ma);
        cov += dx * dy;
        vv += dx * dx;
        va += dy * dy;
    }
    if vv == 0.0 || va == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok((cov / (vv.sqrt() * va.sqrt())).clamp(-1.0, 1.0))
}

/// `r < th` keeps only the strong modality; `r ≥ th` fuses both.
pub fn gate_modalities(r: f64, th: f64) -> GateDecision {
    if r < th {
        GateDecision::StrongOnly
    } else {
        GateDecision::FuseBoth
    }
}

/// Scales the visual and projected audio rows into the two fusion tokens.
pub fn weighted_concat_graph(g: &mut Graph, v: Var, a_proj: Var, w_v: Var, w_a: Var) -> Result<[Var; 2]> {
    if g.shape(v) != g.shape(a_proj) {
        return Err(shape_err(format!(
            "token shapes differ: {:?} vs {:?}",
            g.shape(v),
            g.shape(a_proj)
        )));
    }
    Ok([g.mul_scalar(v, w_v), g.mul_scalar(a_proj, w_a)])
}

/// Single-query attention of each row of `query` over its row in every
/// token matrix. `mask[[i, j]] == false` removes token `j` for row `i`.
/// Returns the attended rows and the `n × k` attention weights.
pub fn cross_attention_graph(
    g: &mut Graph,
    query: Var,
    tokens: &[Var],
    mask: &Array2<bool>,
) -> Result<(Var, Var)> {
    let (n, d) = g.shape(query);
    if tokens.iter().any(|&t| g.shape(t) != (n, d)) || mask.dim() != (n, tokens.len()) {
        return Err(shape_err("cross-attention tokens must match the query shape"));
    }
    if mask.rows().into_iter().any(|row| !row.iter().any(|&m| m)) {
        return Err(Error::Mask);
    }
    let scale = 1.0 / (d as f64).sqrt();
    let scores: Vec<Var> = tokens
        .iter()
        .map(|&t| {
            let prod = g.mul(query, t);
            let s = g.row_sum(prod);
            g.scale(s, scale)
        })
        .collect();
    let scores = g.concat_cols(&scores);
    let attn = g.softmax_rows(scores, Some(mask));
    let mut out: Option<Var> = None;
    for (j, &t) in tokens.iter().enumerate() {
        let w = g.slice_cols(attn, j, 1);
        let part = g.mul_col(t, w);
        out = Some(match out {
            Some(o) => g.add(o, part),
            None => part,
        });
    }
    Ok((out.expect("at least one token"), attn))
}

fn row(v: &[f64]) -> Mat {
    Mat::from_shape_vec((1, v.len()), v.to_vec()).expect("row vector")
}

/// Vector form of [`weighted_concat_graph`].
pub fn weighted_concat(v: &[f64], a_proj: &[f64], w_v: f64, w_a: f64) -> Result<[Vec<f64>; 2]> {
    let mut g = Graph::new();
    let (vv, av) = (g.constant(row(v)), g.constant(row(a_proj)));
    let (wv, wa) = (g.constant(row(&[w_v])), g.constant(row(&[w_a])));
    let [t0, t1] = weighted_concat_graph(&mut g, vv, av, wv, wa)?;
    Ok([g.value(t0).iter().copied().collect(), g.value(t1).iter().copied().collect()])
}

/// Vector form of [`cross_attention_graph`].
pub fn cross_attention(query: &[f64], tokens: &[Vec<f64>], mask: &[bool]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut g = Graph::new();
    let q = g.constant(row(query));
    let toks: Vec<Var> = tokens.iter().map(|t| g.constant(row(t))).collect();
    let mask = Array2::from_shape_vec((1, mask.len()), mask.to_vec()).expect("mask row");
    let (out, attn) = cross_attention_graph(&mut g, q, &toks, &mask)?;
    Ok((g.value(out).iter().copied().collect(), g.value(attn).iter().copied().collect()))
}

/// `x + W2 · gelu(W1 x + b1) + b2`; identity while `W2` and `b2` are zero.
#[derive(Clone, Debug)]
pub struct ResidualMlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl ResidualMlp {
    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w1 = store.bind(g, self.w1);
        let b1 = store.bind(g, self.b1);
        let w2 = store.bind(g, self.w2);
        let b2 = store.bind(g, self.b2);
        let h = g.matmul(x, w1);
        let h = g.add_row(h, b1);
        let h = g.gelu(h);
        let h = g.matmul(h, w2);
        let h = g.add_row(h, b2);
        g.add(x, h)
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

/// Parameters of the fusion module.
#[derive(Clone, Debug)]
pub struct FusionParams {
    pub config: FusionConfig,
    /// Frozen `d_a × d_v` map from audio space to visual space.
    pub projection: ParamId,
    pub w_visual: ParamId,
    pub w_audio: ParamId,
    pub mlp: ResidualMlp,
    pub concat: Option<Linear>,
    /// Resolved strong modality; `Auto` is settled per task by the trainer.
    pub strong: Modality,
    pub d_v: usize,
    pub d_a: usize,
}

/// Batch output of [`FusionParams::forward`].
pub struct FusionOutput {
    pub fused: Var,
    pub masked: Vec<bool>,
    pub r: Vec<f64>,
}

/// Single-sample fusion result.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedFeature {
    pub vector: Vec<f64>,
    pub masked: bool,
    pub r: f64,
}

impl FusionParams {
    pub fn new(store: &mut ParamStore, config: FusionConfig, d_v: usize, d_a: usize, rng: &mut impl Rng) -> Self {
        let projection = store.add(
            "fusion.projection",
            normal_mat(rng, d_a, d_v, 1.0 / (d_a as f64).sqrt()),
            ParamGroup::FusionProjection,
            None,
            true,
        );
        let add = |store: &mut ParamStore, name: &str, m: Mat| {
            store.add(format!("fusion.{name}"), m, ParamGroup::Fusion, None, false)
        };
        let (w_visual, w_audio, concat) = match config.mode {
            FusionMode::Aavfm => (
                add(store, "w_visual", Mat::ones((1, 1))),
                add(store, "w_audio", Mat::ones((1, 1))),
                None,
            ),
            FusionMode::Concat => {
                let mut w = Mat::zeros((2 * d_v, d_v));
                for i in 0..d_v {
                    w[[i, i]] = 0.5;
                    w[[d_v + i, i]] = 0.5;
                }
                let concat = Linear {
                    weight: add(store, "concat.weight", w),
                    bias: add(store, "concat.bias", Mat::zeros((1, d_v))),
                };
                // Placeholder scalars keep the parameter layout uniform; they are frozen.
                let wv = store.add("fusion.w_visual", Mat::ones((1, 1)), ParamGroup::Fusion, None, true);
                let wa = store.add("fusion.w_audio", Mat::ones((1, 1)), ParamGroup::Fusion, None, true);
                (wv, wa, Some(concat))
            }
        };
        let mlp = ResidualMlp {
            w1: add(store, "mlp.w1", normal_mat(rng, d_v, d_v, 1.0 / (d_v as f64).sqrt())),
            b1: add(store, "mlp.b1", Mat::zeros((1, d_v))),
            w2: add(store, "mlp.w2", Mat::zeros((d_v, d_v))),
            b2: add(store, "mlp.b2", Mat::zeros((1, d_v))),
        };
        let strong = match config.strong_modality {
            StrongModality::Audio => Modality::Audio,
            _ => Modality::Visual,
        };
        Self {
            config,
            projection,
            w_visual,
            w_audio,
            mlp,
            concat,
            strong,
            d_v,
            d_a,
        }
    }

    /// Learnable tensors owned by fusion.
    pub fn learnable_ids(&self, store: &ParamStore) -> Vec<ParamId> {
        let mut ids = vec![self.w_visual, self.w_audio];
        if let Some(c) = &self.concat {
            ids.extend(c.ids());
        }
        ids.extend(self.mlp.ids());
        ids.retain(|&id| !store.get(id).frozen);
        ids
    }

    /// Fuses a batch of visual (`n × d_v`) and audio (`n × d_a`) features.
    /// `training` selects whether the mask follows `mask_in_training`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, v_feat: Var, a_feat: Var, training: bool) -> Result<FusionOutput> {
        let (n, dv) = g.shape(v_feat);
        let (na, da) = g.shape(a_feat);
        if dv != self.d_v || da != self.d_a || n != na {
            return Err(shape_err(format!(
                "fusion expects n×{} visual and n×{} audio features, got {n}×{dv} and {na}×{da}",
                self.d_v, self.d_a
            )));
        }
        let p = store.bind(g, self.projection);
        let a_proj = g.matmul(a_feat, p);
        let r: Vec<f64> = (0..n)
            .map(|i| {
                let v = g.value(v_feat).row(i).to_vec();
                let a = g.value(a_proj).row(i).to_vec();
                match pearson(&v, &a) {
                    Ok(r) => Ok(r),
                    Err(Error::ZeroVariance) => Ok(0.0),
                    Err(e) => Err(e),
                }
            })
            .collect::<Result<_>>()?;

        if let Some(concat) = &self.concat {
            let joined = g.concat_cols(&[v_feat, a_proj]);
            let x = concat.forward(g, store, joined);
            let fused = self.mlp.forward(g, store, x);
            return Ok(FusionOutput {
                fused,
                masked: vec![false; n],
                r,
            });
        }

        let apply_mask = !training || self.config.mask_in_training;
        let masked: Vec<bool> = r
            .iter()
            .map(|&r| apply_mask && gate_modalities(r, self.config.threshold) == GateDecision::StrongOnly)
            .collect();
        let weak = match self.strong {
            Modality::Audio => 0,
            _ => 1,
        };
        let mask = Array2::from_shape_fn((n, 2), |(i, j)| !(masked[i] && j == weak));
        let w_v = store.bind(g, self.w_visual);
        let w_a = store.bind(g, self.w_audio);
        let tokens = weighted_concat_graph(g, v_feat, a_proj, w_v, w_a)?;
        let (attended, _) = cross_attention_graph(g, v_feat, &tokens, &mask)?;
        let fused = self.mlp.forward(g, store, attended);
        Ok(FusionOutput { fused, masked, r })
    }

    /// Fuses one sample.
    pub fn fuse(&self, store: &ParamStore, v_feat: &[f64], a_feat: &[f64]) -> Result<FusedFeature> {
        let mut g = Graph::new();
        let v = g.constant(row(v_feat));
        let a = g.constant(row(a_feat));
        let out = self.forward(&mut g, store, v, a, false)?;
        Ok(FusedFeature {
            vector: g.value(out.fused).iter().copied().collect(),
            masked: out.masked[0],
            r: out.r[0],
        })
    }
}
