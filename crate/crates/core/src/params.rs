//! Named parameter tensors with ownership and freeze flags.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    /// The key this parameter is bound under in a [`Graph`].
    pub fn key(self) -> usize {
        self.0
    }
}

/// Which part of the model a tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    VisualBackbone,
    TextBackbone,
    AudioEncoder,
    Expert,
    Router,
    Fusion,
    FusionProjection,
    Critic,
}

impl ParamGroup {
    pub fn tag(self) -> u8 {
        match self {
            Self::VisualBackbone => 0,
            Self::TextBackbone => 1,
            Self::AudioEncoder => 2,
            Self::Expert => 3,
            Self::Router => 4,
            Self::Fusion => 5,
            Self::FusionProjection => 6,
            Self::Critic => 7,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => Self::VisualBackbone,
            1 => Self::TextBackbone,
            2 => Self::AudioEncoder,
            3 => Self::Expert,
            4 => Self::Router,
            5 => Self::Fusion,
            6 => Self::FusionProjection,
            7 => Self::Critic,
            _ => return None,
        })
    }

    pub fn is_backbone(self) -> bool {
        matches!(self, Self::VisualBackbone | Self::TextBackbone)
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Mat,
    pub group: ParamGroup,
    pub owner_task: Option<usize>,
    pub frozen: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        value: Mat,
        group: ParamGroup,
        owner_task: Option<usize>,
        frozen: bool,
    ) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            group,
            owner_task,
            frozen,
        });
        id
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.params[id.0].value
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.iter().filter(|(_, p)| !p.frozen).map(|(id, _)| id)
    }

    /// Inserts the parameter into `g`; trainable tensors track gradients.
    pub fn bind(&self, g: &mut Graph, id: ParamId) -> Var {
        let p = &self.params[id.0];
        g.bind(id.0, &p.value, !p.frozen)
    }

    /// FNV-1a digest of the selected tensors' names, shapes and bit patterns.
    pub fn fingerprint(&self, mut select: impl FnMut(&Param) -> bool) -> u64 {
        let mut h = Fnv::new();
        for p in self.params.iter().filter(|p| select(p)) {
            h.write(p.name.as_bytes());
            h.write(&(p.value.nrows() as u64).to_le_bytes());
            h.write(&(p.value.ncols() as u64).to_le_bytes());
            for z in p.value.iter() {
                h.write(&z.to_bits().to_le_bytes());
            }
        }
        h.finish()
    }
}


/// 64-bit FNV-1a.
#[derive(Clone, Copy)]
pub struct Fnv(u64);

impl Fnv {
    pub fn new() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }

    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }

    pub fn finish(self) -> u64 {
        self.0
    }
}

impl Default for Fnv {
    fn default() -> Self {
        Self::new()
    }
}

pub fn normal_mat(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Mat {
    Mat::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

pub fn eye(n: usize) -> Mat {
    Mat::eye(n)
}
