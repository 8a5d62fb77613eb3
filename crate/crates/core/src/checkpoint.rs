//! Versioned binary checkpoints.
//!
//! Layout: the magic bytes `S2R1`, a little-endian `u32` format version, a
//! little-endian `u64` header length, a JSON header, then the payload of
//! little-endian `f64` values. The header holds the model config, training
//! metadata, the optimizer step counter and an index of
//! `(name, kind, section, shape, offset)` entries; `offset` counts `f64`
//! values from the start of the payload.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, SrModel};
use crate::optim::{Adam, AdamConfig};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"S2R1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub steps_completed: u64,
    pub seed: u64,
    pub dataset_id: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub parameters: ParamStore,
    pub optimizer: Option<Adam>,
    pub train_meta: TrainMeta,
}

#[derive(Serialize, Deserialize, Clone, Copy, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
enum Section {
    Param,
    AdamFirst,
    AdamSecond,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    kind: ParamKind,
    section: Section,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model_config: ModelConfig,
    train_meta: TrainMeta,
    optimizer: Option<(AdamConfig, u64)>,
    entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn from_model(model: &SrModel, optimizer: Option<Adam>, train_meta: TrainMeta) -> Self {
        Self {
            model_config: model.config().clone(),
            parameters: model.params().clone(),
            optimizer,
            train_meta,
        }
    }

    pub fn model(&self) -> Result<SrModel> {
        SrModel::from_parts(self.model_config.clone(), self.parameters.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::new();
        let mut payload: Vec<f64> = Vec::new();
        let mut push = |name: &str, kind, section, t: &Tensor| {
            entries.push(Entry {
                name: name.to_string(),
                kind,
                section,
                shape: t.shape().to_vec(),
                offset: payload.len(),
            });
            payload.extend_from_slice(t.data());
        };
        for (name, kind, t) in self.parameters.iter() {
            push(name, kind, Section::Param, t);
        }
        if let Some(adam) = &self.optimizer {
            for (section, moments) in [(Section::AdamFirst, adam.first_moments()), (Section::AdamSecond, adam.second_moments())] {
                for (i, m) in moments.iter().enumerate() {
                    if let Some(m) = m {
                        push(self.parameters.name(i), ParamKind::Trainable, section, m);
                    }
                }
            }
        }
        let header = Header {
            model_config: self.model_config.clone(),
            train_meta: self.train_meta.clone(),
            optimizer: self.optimizer.as_ref().map(|a| (a.config, a.step_count())),
            entries,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + 8 * payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |m: String| Error::Format(m);
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(fail("not a checkpoint (missing S2R1 magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(fail(format!(
                "checkpoint format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..).unwrap_or_default();
        if body.len() < hlen || !(body.len() - hlen).is_multiple_of(8) {
            return Err(fail("truncated checkpoint".into()));
        }
        let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| fail(format!("bad header: {e}")))?;
        let payload: Vec<f64> = body[hlen..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let read = |e: &Entry| -> Result<Tensor> {
            let n: usize = e.shape.iter().product();
            let data = payload
                .get(e.offset..e.offset + n)
                .ok_or_else(|| fail(format!("entry {:?} points past the payload", e.name)))?;
            Tensor::from_vec(&e.shape, data.to_vec())
        };
        let mut parameters = ParamStore::new();
        for e in header.entries.iter().filter(|e| e.section == Section::Param) {
            parameters.insert(e.name.clone(), read(e)?, e.kind)?;
        }
        let optimizer = match header.optimizer {
            None => None,
            Some((config, step)) => {
                let mut first = vec![None; parameters.len()];
                let mut second = vec![None; parameters.len()];
                for e in header.entries.iter().filter(|e| e.section != Section::Param) {
                    let i = parameters
                        .position(&e.name)
                        .ok_or_else(|| fail(format!("optimizer state for unknown parameter {:?}", e.name)))?;
                    let slot = if e.section == Section::AdamFirst { &mut first } else { &mut second };
                    slot[i] = Some(read(e)?);
                }
                Some(Adam::from_state(config, step, first, second))
            }
        };
        Ok(Self {
            model_config: header.model_config,
            parameters,
            optimizer,
            train_meta: header.train_meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
