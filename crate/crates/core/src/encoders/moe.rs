//! Mixture of LoRA experts placed in parallel with a block's feed-forward
//! network.

use rand::Rng;

use crate::autograd::{Graph, Mat, Segments, Var};
use crate::error::{shape_err, Result};
use crate::params::{normal_mat, ParamGroup, ParamId, ParamStore};

/// Low-rank adapter `x ↦ s · B (A x)` with `A: rank×d_in`, `B: d_out×rank`.
#[derive(Clone, Debug)]
pub struct LoraExpert {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub scale: f64,
    pub owner_task: usize,
}

impl LoraExpert {
    /// `B` starts at zero, so a fresh expert contributes nothing.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        rank: usize,
        scale: f64,
        owner_task: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let a = store.add(
            format!("{prefix}.expert{owner_task}.lora_a"),
            normal_mat(rng, rank, d_in, 1.0 / (d_in as f64).sqrt()),
            ParamGroup::Expert,
            Some(owner_task),
            false,
        );
        let b = store.add(
            format!("{prefix}.expert{owner_task}.lora_b"),
            Mat::zeros((d_out, rank)),
            ParamGroup::Expert,
            Some(owner_task),
            false,
        );
        Self {
            a,
            b,
            rank,
            scale,
            owner_task,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let a = store.bind(g, self.a);
        let b = store.bind(g, self.b);
        let down = g.matmul_t(x, a);
        let up = g.matmul_t(down, b);
        g.scale(up, self.scale)
    }

    pub fn is_frozen(&self, store: &ParamStore) -> bool {
        store.get(self.a).frozen && store.get(self.b).frozen
    }

    pub fn set_frozen(&self, store: &mut ParamStore, frozen: bool) {
        store.get_mut(self.a).frozen = frozen;
        store.get_mut(self.b).frozen = frozen;
    }
}

/// Single-hidden-layer MLP producing one gate logit per expert.
#[derive(Clone, Debug)]
pub struct Router {
    pub w_hidden: ParamId,
    pub b_hidden: ParamId,
    pub w_out: ParamId,
    pub b_out: ParamId,
}

impl Router {
    pub fn new(store: &mut ParamStore, prefix: &str, d_in: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let add = |store: &mut ParamStore, name: &str, m: Mat| {
            store.add(format!("{prefix}.router.{name}"), m, ParamGroup::Router, None, false)
        };
        Self {
            w_hidden: add(store, "w_hidden", normal_mat(rng, d_in, hidden, 1.0 / (d_in as f64).sqrt())),
            b_hidden: add(store, "b_hidden", Mat::zeros((1, hidden))),
            w_out: add(store, "w_out", Mat::zeros((hidden, 0))),
            b_out: add(store, "b_out", Mat::zeros((1, 0))),
        }
    }

    pub fn width(&self, store: &ParamStore) -> usize {
        store.value(self.w_out).ncols()
    }

    /// Appends a zero logit column for a new expert.
    pub fn grow(&self, store: &mut ParamStore) {
        for id in [self.w_out, self.b_out] {
            let p = store.get_mut(id);
            let (r, c) = p.value.dim();
            let mut wider = Mat::zeros((r, c + 1));
            wider.slice_mut(ndarray::s![.., ..c]).assign(&p.value);
            p.value = wider;
        }
    }

    pub fn logits(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w1 = store.bind(g, self.w_hidden);
        let b1 = store.bind(g, self.b_hidden);
        let w2 = store.bind(g, self.w_out);
        let b2 = store.bind(g, self.b_out);
        let h = g.matmul(x, w1);
        let h = g.add_row(h, b1);
        let h = g.tanh(h);
        let out = g.matmul(h, w2);
        g.add_row(out, b2)
    }

    /// Softmax gate weights, one row per input row.
    pub fn gates(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let logits = self.logits(g, store, x);
        g.softmax_rows(logits, None)
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.w_hidden, self.b_hidden, self.w_out, self.b_out]
    }
}

/// Position-wise two-layer feed-forward network of a transformer block.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FeedForward {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w1 = store.bind(g, self.w1);
        let b1 = store.bind(g, self.b1);
        let w2 = store.bind(g, self.w2);
        let b2 = store.bind(g, self.b2);
        let h = g.matmul(x, w1);
        let h = g.add_row(h, b1);
        let h = g.gelu(h);
        let out = g.matmul(h, w2);
        g.add_row(out, b2)
    }
}

#[derive(Clone, Debug)]
pub struct MoeLayer {
    pub experts: Vec<LoraExpert>,
    pub router: Router,
    pub d_in: usize,
    pub d_out: usize,
}

impl MoeLayer {
    /// Gated sum of expert outputs, `Σ_e g_e · expert_e(x)`, where the gate
    /// for every row of a segment comes from the router applied to the
    /// segment's mean row. `None` when the layer has no experts yet.
    pub fn mixture(&self, g: &mut Graph, store: &ParamStore, x: Var, segs: &Segments) -> Option<Var> {
        if self.experts.is_empty() {
            return None;
        }
        let pooled = g.segment_mean(x, segs);
        let gates = self.router.gates(g, store, pooled);
        let per_row = g.expand_segments(gates, segs);
        let mut total: Option<Var> = None;
        for (e, expert) in self.experts.iter().enumerate() {
            let out = expert.forward(g, store, x);
            let w = g.slice_cols(per_row, e, 1);
            let part = g.mul_col(out, w);
            total = Some(match total {
                Some(t) => g.add(t, part),
                None => part,
            });
        }
        total
    }

    /// `ffn(x) + mixture(x)`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        ffn: &FeedForward,
        x: Var,
        segs: &Segments,
    ) -> Var {
        let base = ffn.forward(g, store, x);
        match self.mixture(g, store, x, segs) {
            Some(m) => g.add(base, m),
            None => base,
        }
    }
}

/// Evaluates one MoE feed-forward step on a single vector.
pub fn moe_forward(x: &[f64], ffn: &FeedForward, layer: &MoeLayer, store: &ParamStore) -> Result<Vec<f64>> {
    if layer.experts.is_empty() {
        return Err(shape_err("MoE layer has no experts"));
    }
    if x.len() != layer.d_in {
        return Err(shape_err(format!("input has {} dims, layer expects {}", x.len(), layer.d_in)));
    }
    let mut g = Graph::new();
    let xv = g.constant(Mat::from_shape_vec((1, x.len()), x.to_vec()).expect("row"));
    let segs: Segments = vec![(0, 1)].into();
    let out = layer.forward(&mut g, store, ffn, xv, &segs);
    Ok(g.value(out).iter().copied().collect())
}
