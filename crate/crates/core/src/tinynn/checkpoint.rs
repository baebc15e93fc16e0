use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Model, ModelConfig};
use super::optim::{Adam, AdamConfig};
use super::train::History;
use crate::error::{Error, FormatError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TNN1";

/// Trained weights with running statistics, optimizer state and history.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub optimizer: Option<Adam>,
    pub history: History,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerHeader {
    config: AdamConfig,
    step: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    model_config: ModelConfig,
    parameter_count: usize,
    tensors: Vec<Entry>,
    optimizer: Option<OptimizerHeader>,
    history: History,
}

impl Checkpoint {
    /// `TNN1`, u32 LE header length, JSON header, f32 LE payload in manifest order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut blobs: Vec<(String, Vec<usize>, &[f32])> = Vec::new();
        for (name, t) in self.model.named_params() {
            blobs.push((name, t.shape.clone(), &t.data));
        }
        for (name, b) in self.model.buffers() {
            blobs.push((name, vec![b.len()], b));
        }
        let pnames: Vec<String> = self
            .model
            .named_params()
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        if let Some(opt) = &self.optimizer {
            for (i, n) in pnames.iter().enumerate() {
                blobs.push((format!("adam.m.{n}"), vec![opt.m[i].len()], &opt.m[i]));
                blobs.push((format!("adam.v.{n}"), vec![opt.v[i].len()], &opt.v[i]));
            }
        }
        let mut offset = 0;
        let tensors = blobs
            .iter()
            .map(|(name, shape, data)| {
                let e = Entry {
                    name: name.clone(),
                    shape: shape.clone(),
                    offset,
                    len: data.len(),
                };
                offset += data.len();
                e
            })
            .collect();
        let header = Header {
            model_config: self.model.config().clone(),
            parameter_count: self.model.parameter_count(),
            tensors,
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                config: o.config,
                step: o.step,
            }),
            history: self.history.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(8 + json.len() + 4 * offset);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, data) in &blobs {
            for v in data.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(FormatError::Truncated(format!("{} bytes", bytes.len())).into());
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(FormatError::BadMagic {
                expected: "TNN1".into(),
                found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
            }
            .into());
        }
        let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let body = bytes
            .get(8..8 + hlen)
            .ok_or_else(|| FormatError::Truncated("header".into()))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| FormatError::Header(e.to_string()))?;
        let payload = &bytes[8 + hlen..];
        let total: usize = header.tensors.iter().map(|e| e.len).sum();
        if payload.len() != 4 * total {
            return Err(FormatError::SizeMismatch {
                expected: 4 * total,
                found: payload.len(),
            }
            .into());
        }
        let read = |e: &Entry| -> Vec<f32> {
            payload[4 * e.offset..4 * (e.offset + e.len)]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect()
        };
        let find = |name: &str| header.tensors.iter().find(|e| e.name == name);

        let mut model = Model::<f32>::new(header.model_config.clone(), 0)
            .map_err(|e| FormatError::Header(e.to_string()))?;
        if model.parameter_count() != header.parameter_count {
            return Err(FormatError::Header(format!(
                "parameter count {} does not match config ({})",
                header.parameter_count,
                model.parameter_count()
            ))
            .into());
        }
        let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        let missing = |n: &str| Error::from(FormatError::Header(format!("missing tensor {n}")));
        for (name, p) in names.iter().zip(model.params_mut()) {
            let e = find(name).ok_or_else(|| missing(name))?;
            if e.shape != p.shape || e.len != p.numel() {
                return Err(FormatError::Header(format!("shape mismatch for {name}")).into());
            }
            p.data = read(e);
        }
        let bnames: Vec<String> = model.buffers().into_iter().map(|(n, _)| n).collect();
        for (name, b) in bnames.iter().zip(model.buffers_mut()) {
            let e = find(name).ok_or_else(|| missing(name))?;
            if e.len != b.len() {
                return Err(FormatError::Header(format!("length mismatch for {name}")).into());
            }
            *b = read(e);
        }
        let optimizer = match &header.optimizer {
            None => None,
            Some(oh) => {
                let mut m = Vec::new();
                let mut v = Vec::new();
                for n in &names {
                    let em = find(&format!("adam.m.{n}")).ok_or_else(|| missing(n))?;
                    let ev = find(&format!("adam.v.{n}")).ok_or_else(|| missing(n))?;
                    m.push(read(em));
                    v.push(read(ev));
                }
                Some(Adam {
                    config: oh.config,
                    step: oh.step,
                    m,
                    v,
                })
            }
        };
        Ok(Checkpoint {
            model,
            optimizer,
            history: header.history,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path.as_ref())?;
    Checkpoint::from_bytes(&bytes)
}
