//! Small pre-norm transformer used as the frozen visual and text backbone.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::moe::{FeedForward, LoraExpert, MoeLayer, Router};
use crate::autograd::{Graph, Mat, Segments, Var};
use crate::params::{normal_mat, ParamGroup, ParamId, ParamStore};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Audio,
    Text,
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    fn new(store: &mut ParamStore, name: &str, width: usize, group: ParamGroup) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Mat::ones((1, width)), group, None, true),
            bias: store.add(format!("{name}.bias"), Mat::zeros((1, width)), group, None, true),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let n = g.layer_norm(x, LN_EPS);
        let gain = store.bind(g, self.gain);
        let bias = store.bind(g, self.bias);
        let n = g.mul_row(n, gain);
        g.add_row(n, bias)
    }

    fn ids(&self) -> [ParamId; 2] {
        [self.gain, self.bias]
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        group: ParamGroup,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            weight: store.add(
                format!("{name}.weight"),
                normal_mat(rng, d_in, d_out, 1.0 / (d_in as f64).sqrt()),
                group,
                None,
                true,
            ),
            bias: store.add(format!("{name}.bias"), Mat::zeros((1, d_out)), group, None, true),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = store.bind(g, self.weight);
        let b = store.bind(g, self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln_attn: LayerNormParams,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub attn_out: Linear,
    pub ln_ffn: LayerNormParams,
    pub ffn: FeedForward,
    pub moe: MoeLayer,
    pub heads: usize,
}

impl TransformerBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        width: usize,
        heads: usize,
        ffn_hidden: usize,
        router_hidden: usize,
        group: ParamGroup,
        rng: &mut impl Rng,
    ) -> Self {
        let ln_attn = LayerNormParams::new(store, &format!("{prefix}.ln_attn"), width, group);
        let query = Linear::new(store, &format!("{prefix}.query"), width, width, group, rng);
        let key = Linear::new(store, &format!("{prefix}.key"), width, width, group, rng);
        let value = Linear::new(store, &format!("{prefix}.value"), width, width, group, rng);
        let attn_out = Linear::new(store, &format!("{prefix}.attn_out"), width, width, group, rng);
        let ln_ffn = LayerNormParams::new(store, &format!("{prefix}.ln_ffn"), width, group);
        let up = Linear::new(store, &format!("{prefix}.ffn.up"), width, ffn_hidden, group, rng);
        let down = Linear::new(store, &format!("{prefix}.ffn.down"), ffn_hidden, width, group, rng);
        let ffn = FeedForward {
            w1: up.weight,
            b1: up.bias,
            w2: down.weight,
            b2: down.bias,
        };
        let router = Router::new(store, &format!("{prefix}.moe"), width, router_hidden, rng);
        Self {
            ln_attn,
            query,
            key,
            value,
            attn_out,
            ln_ffn,
            ffn,
            moe: MoeLayer {
                experts: Vec::new(),
                router,
                d_in: width,
                d_out: width,
            },
            heads,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, segs: &Segments) -> Var {
        let a = self.ln_attn.forward(g, store, x);
        let q = self.query.forward(g, store, a);
        let k = self.key.forward(g, store, a);
        let v = self.value.forward(g, store, a);
        let att = g.attention(q, k, v, segs, self.heads);
        let att = self.attn_out.forward(g, store, att);
        let h = g.add(x, att);
        let z = self.ln_ffn.forward(g, store, h);
        let mixed = self.moe.forward(g, store, &self.ffn, z, segs);
        g.add(h, mixed)
    }

    pub fn backbone_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        ids.extend(self.ln_attn.ids());
        for l in [&self.query, &self.key, &self.value, &self.attn_out] {
            ids.extend(l.ids());
        }
        ids.extend(self.ln_ffn.ids());
        ids.extend([self.ffn.w1, self.ffn.b1, self.ffn.w2, self.ffn.b2]);
        ids
    }

    pub fn add_expert(
        &mut self,
        store: &mut ParamStore,
        prefix: &str,
        rank: usize,
        scale: f64,
        task: usize,
        rng: &mut impl Rng,
    ) {
        self.moe.router.grow(store);
        let (d_in, d_out) = (self.moe.d_in, self.moe.d_out);
        let e = LoraExpert::new(store, prefix, d_in, d_out, rank, scale, task, rng);
        self.moe.experts.push(e);
    }
}

/// How raw inputs become token rows.
#[derive(Clone, Debug)]
pub enum InputAdapter {
    /// A raw vector is linearly mapped to `tokens × width` and reshaped.
    Project { proj: Linear, tokens: usize },
    /// Token ids index a frozen embedding table.
    Embed { table: ParamId },
}

#[derive(Clone, Debug)]
pub struct TransformerEncoder {
    pub modality: Modality,
    pub input: InputAdapter,
    pub positions: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub ln_final: LayerNormParams,
    pub head: Linear,
    pub width: usize,
    pub prefix: String,
}

impl TransformerEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        modality: Modality,
        input: InputSpec,
        max_tokens: usize,
        width: usize,
        blocks: usize,
        heads: usize,
        ffn_hidden: usize,
        router_hidden: usize,
        d_out: usize,
        group: ParamGroup,
        rng: &mut impl Rng,
    ) -> Self {
        let input = match input {
            InputSpec::Project { d_raw, tokens } => InputAdapter::Project {
                proj: Linear::new(store, &format!("{prefix}.input"), d_raw, tokens * width, group, rng),
                tokens,
            },
            InputSpec::Embed { vocab } => InputAdapter::Embed {
                table: store.add(
                    format!("{prefix}.token_embedding"),
                    normal_mat(rng, vocab, width, 1.0),
                    group,
                    None,
                    true,
                ),
            },
        };
        let positions = store.add(
            format!("{prefix}.positions"),
            normal_mat(rng, max_tokens, width, 0.1),
            group,
            None,
            true,
        );
        let blocks = (0..blocks)
            .map(|i| {
                TransformerBlock::new(store, &format!("{prefix}.block{i}"), width, heads, ffn_hidden, router_hidden, group, rng)
            })
            .collect();
        let ln_final = LayerNormParams::new(store, &format!("{prefix}.ln_final"), width, group);
        let head = Linear::new(store, &format!("{prefix}.head"), width, d_out, group, rng);
        Self {
            modality,
            input,
            positions,
            blocks,
            ln_final,
            head,
            width,
            prefix: prefix.to_string(),
        }
    }

    /// Runs token rows through every block and mean-pools each segment.
    pub fn encode_tokens(&self, g: &mut Graph, store: &ParamStore, tokens: Var, segs: &Segments) -> Var {
        let mut x = tokens;
        for block in &self.blocks {
            x = block.forward(g, store, x, segs);
        }
        let x = self.ln_final.forward(g, store, x);
        let pooled = g.segment_mean(x, segs);
        self.head.forward(g, store, pooled)
    }

    /// Raw `n × d_raw` inputs to `n × d_out` features (projection adapters).
    pub fn encode_raw(&self, g: &mut Graph, store: &ParamStore, raw: Var) -> Var {
        let InputAdapter::Project { proj, tokens } = &self.input else {
            panic!("encode_raw needs a projection input adapter");
        };
        let n = g.shape(raw).0;
        let flat = proj.forward(g, store, raw);
        let rows = g.reshape(flat, n * tokens, self.width);
        let pos_idx: Vec<usize> = (0..n).flat_map(|_| 0..*tokens).collect();
        let pos = store.bind(g, self.positions);
        let pos = g.gather_rows(pos, &pos_idx);
        let x = g.add(rows, pos);
        let segs: Segments = (0..n).map(|i| (i * tokens, *tokens)).collect::<Vec<_>>().into();
        self.encode_tokens(g, store, x, &segs)
    }

    /// Token-id sequences to one feature row each (embedding adapters).
    pub fn encode_ids(&self, g: &mut Graph, store: &ParamStore, seqs: &[Vec<usize>]) -> Var {
        let InputAdapter::Embed { table } = &self.input else {
            panic!("encode_ids needs an embedding input adapter");
        };
        let mut ids = Vec::new();
        let mut pos_idx = Vec::new();
        let mut segs = Vec::with_capacity(seqs.len());
        for s in seqs {
            segs.push((ids.len(), s.len()));
            ids.extend_from_slice(s);
            pos_idx.extend(0..s.len());
        }
        let table = store.bind(g, *table);
        let emb = g.gather_rows(table, &ids);
        let pos = store.bind(g, self.positions);
        let pos = g.gather_rows(pos, &pos_idx);
        let x = g.add(emb, pos);
        let segs: Segments = segs.into();
        self.encode_tokens(g, store, x, &segs)
    }

    pub fn backbone_ids(&self) -> Vec<ParamId> {
        let mut ids = match &self.input {
            InputAdapter::Project { proj, .. } => proj.ids().to_vec(),
            InputAdapter::Embed { table } => vec![*table],
        };
        ids.push(self.positions);
        for b in &self.blocks {
            ids.extend(b.backbone_ids());
        }
        ids.extend(self.ln_final.ids());
        ids.extend(self.head.ids());
        ids
    }

    pub fn moe_layers(&self) -> impl Iterator<Item = &MoeLayer> {
        self.blocks.iter().map(|b| &b.moe)
    }
}

#[derive(Clone, Copy, Debug)]
pub enum InputSpec {
    Project { d_raw: usize, tokens: usize },
    Embed { vocab: usize },
}
