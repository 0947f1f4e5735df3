//! Checkpoint files: every tensor (weights plus optional optimizer moments)
//! in a flat little-endian binary block, followed by a JSON metadata tail.
//!
//! Layout:
//! ```text
//! magic   4 bytes  "SWKT"
//! version u32      currently 1
//! count   u32      number of tensors
//! tensor  repeated count times:
//!   name_len u16, name UTF-8, ndim u8, dims ndim x u64, data numel x f32
//! metadata UTF-8 JSON, runs to end of file
//! ```
//! Optimizer moments ride along as tensors named `opt.m.<param>` /
//! `opt.v.<param>`; everything else must match the model's parameter set
//! exactly. The reader tracks byte offsets so a truncated or corrupted file
//! reports where it went wrong.

use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::CheckpointError;
use crate::model::Model;
use crate::train::adamw::{AdamW, AdamWParams};

const MAGIC: [u8; 4] = *b"SWKT";
const VERSION: u32 = 1;

/// Everything about a run that is not a tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment_id: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch: Option<usize>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerMeta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub step: u64,
    pub hp: AdamWParams,
}

fn write_tensor<W: Write>(
    w: &mut W,
    name: &str,
    dims: &[usize],
    data: &[f32],
) -> std::io::Result<()> {
    debug_assert!(name.len() <= u16::MAX as usize && dims.len() <= u8::MAX as usize);
    w.write_all(&(name.len() as u16).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&[dims.len() as u8])?;
    for &d in dims {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Serialize model weights, metadata, and (optionally) optimizer moments.
/// `meta.optimizer` is filled in from `optimizer` when one is given.
pub fn save_checkpoint(
    model: &Model,
    meta: &CheckpointMeta,
    optimizer: Option<&AdamW>,
    path: &Path,
) -> Result<(), CheckpointError> {
    let mut meta = meta.clone();
    let moments = optimizer.map(|opt| {
        meta.optimizer = Some(OptimizerMeta {
            step: opt.step_count(),
            hp: opt.hp,
        });
        opt.export_state()
    });
    let moment_count = moments.as_ref().map_or(0, |m| 2 * m.len());

    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&((model.params.len() + moment_count) as u32).to_le_bytes())?;
    for (name, param) in model.params.iter() {
        let t = param.borrow();
        write_tensor(&mut w, name, t.shape(), t.data())?;
    }
    if let Some(moments) = &moments {
        for (name, m, v) in moments {
            write_tensor(&mut w, &format!("opt.m.{name}"), &[m.len()], m)?;
            write_tensor(&mut w, &format!("opt.v.{name}"), &[v.len()], v)?;
        }
    }
    w.write_all(serde_json::to_string(&meta)?.as_bytes())?;
    w.flush()?;
    Ok(())
}

/// Byte-slice reader that remembers its offset for error reporting.
struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Truncated {
                offset: self.pos as u64,
                what,
            });
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

fn read_tensor(c: &mut Cursor<'_>) -> Result<(String, Vec<usize>, Vec<f32>), CheckpointError> {
    let name_offset = c.pos as u64;
    let name_len = c.u16("tensor name length")? as usize;
    let name = std::str::from_utf8(c.take(name_len, "tensor name")?)
        .map_err(|e| CheckpointError::Malformed {
            offset: name_offset,
            msg: format!("tensor name is not UTF-8: {e}"),
        })?
        .to_string();
    let ndim = c.take(1, "tensor rank")?[0] as usize;
    let mut dims = Vec::with_capacity(ndim);
    let mut numel: u64 = 1;
    for _ in 0..ndim {
        let d = c.u64("tensor dimension")?;
        numel = numel.checked_mul(d).ok_or(CheckpointError::Malformed {
            offset: name_offset,
            msg: format!("tensor {name} dimensions overflow"),
        })?;
        dims.push(d as usize);
    }
    if numel > (c.buf.len() - c.pos) as u64 / 4 + 1 {
        return Err(CheckpointError::Truncated {
            offset: c.pos as u64,
            what: "tensor data",
        });
    }
    let bytes = c.take(numel as usize * 4, "tensor data")?;
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok((name, dims, data))
}

/// Read a checkpoint back into a freshly built model. Weight names and
/// shapes must match the model implied by the stored config exactly; an
/// optimizer is reconstructed when the file carries one.
pub fn load_checkpoint(
    path: &Path,
) -> Result<(Model, CheckpointMeta, Option<AdamW>), CheckpointError> {
    let buf = std::fs::read(path)?;
    let mut c = Cursor { buf: &buf, pos: 0 };

    let magic = c.take(4, "magic")?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic {
            found: magic.try_into().unwrap(),
        });
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::Version {
            found: version,
            supported: VERSION,
        });
    }
    let count = c.u32("tensor count")? as usize;
    let mut weights = Vec::new();
    let mut moments: std::collections::HashMap<String, Vec<f32>> =
        std::collections::HashMap::new();
    for _ in 0..count {
        let (name, dims, data) = read_tensor(&mut c)?;
        if name.starts_with("opt.m.") || name.starts_with("opt.v.") {
            moments.insert(name, data);
        } else {
            weights.push((name, dims, data));
        }
    }
    let meta_offset = c.pos as u64;
    let meta: CheckpointMeta = serde_json::from_slice(&buf[c.pos..])?;

    let model = Model::new(&meta.config, meta.seed).map_err(|e| CheckpointError::Malformed {
        offset: meta_offset,
        msg: format!("embedded config rejected: {e}"),
    })?;
    if weights.len() != model.params.len() {
        return Err(CheckpointError::ParamMismatch(format!(
            "file holds {} weight tensors, model expects {}",
            weights.len(),
            model.params.len()
        )));
    }
    for (name, dims, data) in &weights {
        let param = model
            .params
            .get(name)
            .ok_or_else(|| CheckpointError::ParamMismatch(format!("unknown tensor {name}")))?;
        if param.shape() != *dims {
            return Err(CheckpointError::ParamMismatch(format!(
                "tensor {name}: file shape {:?}, model shape {:?}",
                dims,
                param.shape()
            )));
        }
        param.borrow_mut().data_mut().copy_from_slice(data);
    }

    let optimizer = match &meta.optimizer {
        Some(om) => {
            let mut state = Vec::new();
            for (name, param) in model.params.iter() {
                let (Some(m), Some(v)) = (
                    moments.get(&format!("opt.m.{name}")),
                    moments.get(&format!("opt.v.{name}")),
                ) else {
                    continue;
                };
                if m.len() != param.numel() || v.len() != param.numel() {
                    return Err(CheckpointError::ParamMismatch(format!(
                        "moment buffers for {name} hold {}/{} values, parameter has {}",
                        m.len(),
                        v.len(),
                        param.numel()
                    )));
                }
                state.push((name.to_string(), m.clone(), v.clone()));
            }
            if 2 * state.len() != moments.len() {
                return Err(CheckpointError::ParamMismatch(
                    "moment tensors do not pair up with model parameters".into(),
                ));
            }
            Some(AdamW::restore_state(om.hp, om.step, state))
        }
        None if moments.is_empty() => None,
        None => {
            return Err(CheckpointError::ParamMismatch(
                "moment tensors present but metadata carries no optimizer".into(),
            ));
        }
    };
    Ok((model, meta, optimizer))
}
