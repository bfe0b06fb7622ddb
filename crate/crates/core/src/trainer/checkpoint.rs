//! Sectioned binary checkpoints.
//!
//! Layout: a magic line `FUSIONALIGN-CKPT <version>`, a line holding the byte
//! length of the JSON header, the header itself plus a newline, then every
//! tensor as little-endian `f64` in header order. The header records each
//! tensor's shape and element offset, the run metadata, the seed and the step.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{RunConfig, Stage};
use super::model::{Model, ModelDims};
use crate::error::{Error, Result};
use crate::ndgrad::Tensor;
use crate::optim::{AdamWState, Moments};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "FUSIONALIGN-CKPT";

/// Input layout the brain encoder was trained on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalLayout {
    pub channels: Vec<String>,
    pub sample_rate_hz: f64,
    pub window_ms: [f64; 2],
    pub num_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: Stage,
    pub fingerprint: String,
    pub config: RunConfig,
    pub dims: ModelDims,
    pub branch_ids: Vec<String>,
    pub signal: Option<SignalLayout>,
    pub optim_step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub seed: u64,
    /// Training steps completed.
    pub step: u64,
    /// `(section, [(tensor name, tensor)])` in file order; `optim` holds `<param>.m` / `<param>.v`.
    pub sections: Vec<(String, Vec<(String, Tensor)>)>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct SectionEntry {
    name: String,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    seed: u64,
    step: u64,
    meta: CheckpointMeta,
    sections: Vec<SectionEntry>,
    payload_len: usize,
}

impl Checkpoint {
    pub fn new(
        model: &Model,
        optim: Option<&AdamWState>,
        meta: CheckpointMeta,
        seed: u64,
        step: u64,
    ) -> Self {
        let mut sections = model.sections();
        let mut meta = meta;
        if let Some(o) = optim {
            meta.optim_step = o.step;
            let tensors = o
                .moments
                .iter()
                .flat_map(|(k, m)| {
                    [
                        (format!("{k}.m"), m.m.clone()),
                        (format!("{k}.v"), m.v.clone()),
                    ]
                })
                .collect();
            sections.push(("optim".into(), tensors));
        }
        Checkpoint {
            meta,
            seed,
            step,
            sections,
        }
    }

    pub fn has_section(&self, name: &str) -> bool {
        self.sections.iter().any(|(n, _)| n == name)
    }

    pub fn model(&self, dims: &ModelDims) -> Result<Model> {
        Model::from_sections(dims, &self.sections)
    }

    /// Optimizer state, or `None` when the checkpoint carries no `optim` section.
    pub fn optim_state(&self) -> Result<Option<AdamWState>> {
        let Some((_, tensors)) = self.sections.iter().find(|(n, _)| n == "optim") else {
            return Ok(None);
        };
        let mut st = AdamWState::new(self.meta.config.optim);
        st.step = self.meta.optim_step;
        for pair in tensors.chunks(2) {
            let [(mn, m), (vn, v)] = pair else {
                return Err(Error::CorruptCheckpoint {
                    section: "optim".into(),
                    reason: "odd number of moment tensors".into(),
                });
            };
            let key = mn
                .strip_suffix(".m")
                .filter(|k| vn.strip_suffix(".v") == Some(*k));
            let Some(key) = key else {
                return Err(Error::CorruptCheckpoint {
                    section: "optim".into(),
                    reason: format!("unpaired moments `{mn}` / `{vn}`"),
                });
            };
            st.moments.insert(
                key.to_string(),
                Moments {
                    m: m.clone(),
                    v: v.clone(),
                },
            );
        }
        Ok(Some(st))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let mut payload = Vec::new();
        let mut sections = Vec::new();
        for (name, tensors) in &self.sections {
            let mut entries = Vec::new();
            for (tn, t) in tensors {
                entries.push(TensorEntry {
                    name: tn.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                });
                offset += t.numel();
                for v in t.data() {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            }
            sections.push(SectionEntry {
                name: name.clone(),
                tensors: entries,
            });
        }
        let header = Header {
            version: CHECKPOINT_VERSION,
            seed: self.seed,
            step: self.step,
            meta: self.meta.clone(),
            sections,
            payload_len: offset,
        };
        let json = serde_json::to_string(&header).expect("checkpoint header serializes");
        let mut out =
            format!("{MAGIC} {CHECKPOINT_VERSION}\n{}\n{json}\n", json.len()).into_bytes();
        out.extend(payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |section: &str, reason: String| Error::CorruptCheckpoint {
            section: section.to_string(),
            reason,
        };
        let mut lines = bytes.splitn(3, |&b| b == b'\n');
        let magic = lines.next().unwrap_or_default();
        let magic =
            std::str::from_utf8(magic).map_err(|_| corrupt("header", "bad magic line".into()))?;
        let Some(version) = magic.strip_prefix(MAGIC).map(str::trim) else {
            return Err(corrupt("header", "not a checkpoint file".into()));
        };
        let version: u32 = version
            .parse()
            .map_err(|_| corrupt("header", format!("bad version `{version}`")))?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                what: "checkpoint",
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let len_line = lines
            .next()
            .ok_or_else(|| corrupt("header", "truncated".into()))?;
        let header_len: usize = std::str::from_utf8(len_line)
            .ok()
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| corrupt("header", "bad header length".into()))?;
        let rest = lines.next().unwrap_or_default();
        if rest.len() < header_len + 1 {
            return Err(corrupt("header", "truncated".into()));
        }
        let header: Header = serde_json::from_slice(&rest[..header_len])
            .map_err(|e| corrupt("header", e.to_string()))?;
        let payload = &rest[header_len + 1..];
        let mut sections = Vec::with_capacity(header.sections.len());
        for s in header.sections {
            let mut tensors = Vec::with_capacity(s.tensors.len());
            for t in s.tensors {
                let numel: usize = t.shape.iter().product();
                let (start, end) = (t.offset * 8, (t.offset + numel) * 8);
                if end > payload.len() {
                    return Err(corrupt(
                        &s.name,
                        format!(
                            "tensor `{}` needs bytes {start}..{end}, file has {}",
                            t.name,
                            payload.len()
                        ),
                    ));
                }
                let data = payload[start..end]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                    .collect();
                let tensor = Tensor::new(t.shape, data)
                    .map_err(|e| corrupt(&s.name, format!("tensor `{}`: {e}", t.name)))?;
                tensors.push((t.name, tensor));
            }
            sections.push((s.name, tensors));
        }
        if payload.len() != header.payload_len * 8 {
            return Err(corrupt(
                "payload",
                format!(
                    "{} bytes, header declares {}",
                    payload.len(),
                    header.payload_len * 8
                ),
            ));
        }
        Ok(Checkpoint {
            meta: header.meta,
            seed: header.seed,
            step: header.step,
            sections,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}
