//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "MCILCKPT"
//! version    u32
//! header     u64 length + UTF-8 JSON (model config, fusion config, raw dims,
//!            expert count, strong modality, run config echo)
//! count      u64 number of tensors
//! tensor     u32 name length, name bytes, u8 group tag, i64 owner task
//!            (-1 for none), u8 frozen, u64 rows, u64 cols, rows*cols f64
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, Modality};
use crate::autograd::Mat;
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::params::ParamGroup;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MCILCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub fusion: FusionConfig,
    pub visual_raw: usize,
    pub audio_raw: usize,
    pub experts: usize,
    pub strong: Modality,
    pub echo: serde_json::Value,
}

fn header_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        tensor: "<header>".into(),
        msg: msg.into(),
    }
}

pub fn save_checkpoint(model: &Model, echo: &serde_json::Value, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        model: model.config.clone(),
        fusion: model.fusion_config.clone(),
        visual_raw: model.visual_raw,
        audio_raw: model.audio_raw,
        experts: model.experts,
        strong: model.fusion.strong,
        echo: echo.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| header_err(e.to_string()))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&(model.store.len() as u64).to_le_bytes());
    for (_, p) in model.store.iter() {
        buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.push(p.group.tag());
        buf.extend_from_slice(&p.owner_task.map_or(-1i64, |t| t as i64).to_le_bytes());
        buf.push(u8::from(p.frozen));
        buf.extend_from_slice(&(p.value.nrows() as u64).to_le_bytes());
        buf.extend_from_slice(&(p.value.ncols() as u64).to_le_bytes());
        for z in p.value.iter() {
            buf.extend_from_slice(&z.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, tensor: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint {
                tensor: tensor.into(),
                msg: "unexpected end of file".into(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, tensor: &str) -> Result<u8> {
        Ok(self.take(1, tensor)?[0])
    }

    fn u32(&mut self, tensor: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, tensor)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, tensor: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, tensor)?.try_into().expect("8 bytes")))
    }

    fn i64(&mut self, tensor: &str) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8, tensor)?.try_into().expect("8 bytes")))
    }
}

struct Tensor {
    name: String,
    group: ParamGroup,
    owner: Option<usize>,
    frozen: bool,
    value: Mat,
}

fn read_file(path: &Path) -> Result<(CheckpointHeader, Vec<Tensor>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(8, "<header>")? != CHECKPOINT_MAGIC {
        return Err(header_err("bad magic"));
    }
    let version = c.u32("<header>")?;
    if version != CHECKPOINT_VERSION {
        return Err(header_err(format!("unsupported version {version}")));
    }
    let len = c.u64("<header>")? as usize;
    let header: CheckpointHeader =
        serde_json::from_slice(c.take(len, "<header>")?).map_err(|e| header_err(e.to_string()))?;
    let count = c.u64("<header>")?;
    let mut tensors = Vec::new();
    for i in 0..count {
        let at = format!("<tensor {i}>");
        let name_len = c.u32(&at)? as usize;
        let name = String::from_utf8(c.take(name_len, &at)?.to_vec()).map_err(|_| Error::Checkpoint {
            tensor: at.clone(),
            msg: "name is not UTF-8".into(),
        })?;
        let bad = |msg: &str| Error::Checkpoint {
            tensor: name.clone(),
            msg: msg.into(),
        };
        let group = ParamGroup::from_tag(c.u8(&name)?).ok_or_else(|| bad("unknown group tag"))?;
        let owner = c.i64(&name)?;
        let owner = match owner {
            -1 => None,
            o if o >= 0 => Some(o as usize),
            _ => return Err(bad("negative owner task")),
        };
        let frozen = match c.u8(&name)? {
            0 => false,
            1 => true,
            _ => return Err(bad("frozen flag is not 0 or 1")),
        };
        let rows = c.u64(&name)? as usize;
        let cols = c.u64(&name)? as usize;
        let n = rows.checked_mul(cols).filter(|n| n.checked_mul(8).is_some()).ok_or_else(|| bad("tensor too large"))?;
        let data: Vec<f64> = c
            .take(n * 8, &name)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let value = Mat::from_shape_vec((rows, cols), data).expect("sized");
        tensors.push(Tensor {
            name,
            group,
            owner,
            frozen,
            value,
        });
    }
    if c.pos != bytes.len() {
        return Err(header_err("trailing bytes after last tensor"));
    }
    Ok((header, tensors))
}

fn restore(model: &mut Model, tensors: Vec<Tensor>) -> Result<()> {
    if tensors.len() != model.store.len() {
        let tensor = tensors
            .iter()
            .find(|t| model.store.id_of(&t.name).is_none())
            .map_or_else(|| "<header>".to_string(), |t| t.name.clone());
        return Err(Error::Checkpoint {
            tensor,
            msg: format!("checkpoint has {} tensors, model has {}", tensors.len(), model.store.len()),
        });
    }
    for t in tensors {
        let bad = |msg: String| Error::Checkpoint {
            tensor: t.name.clone(),
            msg,
        };
        let id = model.store.id_of(&t.name).ok_or_else(|| bad("not present in the model".into()))?;
        let p = model.store.get_mut(id);
        if p.value.dim() != t.value.dim() {
            return Err(bad(format!("shape {:?} does not match model shape {:?}", t.value.dim(), p.value.dim())));
        }
        if p.group != t.group || p.owner_task != t.owner {
            return Err(bad("group or owner task does not match the model".into()));
        }
        p.value = t.value;
        p.frozen = t.frozen;
    }
    Ok(())
}

/// Rebuilds a model from a checkpoint. Returns the model and the stored
/// config echo.
pub fn load_checkpoint(path: &Path) -> Result<(Model, serde_json::Value)> {
    let (header, tensors) = read_file(path)?;
    let mut model = Model::new(&header.model, &header.fusion, header.visual_raw, header.audio_raw)
        .map_err(|e| header_err(e.to_string()))?;
    for t in 1..=header.experts {
        model.add_task_expert(t)?;
    }
    model.fusion.strong = header.strong;
    restore(&mut model, tensors)?;
    Ok((model, header.echo))
}

impl Model {
    /// Loads tensors into an existing model whose layout must match.
    pub fn load_into(&mut self, path: &Path) -> Result<()> {
        let (header, tensors) = read_file(path)?;
        restore(self, tensors)?;
        self.fusion.strong = header.strong;
        Ok(())
    }
}
