//! The full parameter set and its mapping onto checkpoint sections.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Group, ModelConfig};
use crate::align::TemperatureParam;
use crate::brainproj::MbpParams;
use crate::error::{Error, Result};
use crate::fusion::HvfParams;
use crate::ndgrad::Tensor;
use crate::nn::Module;
use crate::prior::{ProjectorParams, ToyDenoiser, BACKBONE_PREFIX};

/// Shapes the model is built for, derived from the data and the model config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub branch_dims: Vec<usize>,
    /// Width of the diffusion target (the pixel-latent branch).
    pub x_dim: usize,
    /// Flattened brain input `C'·T'`; absent for prior-only runs.
    pub input_len: Option<usize>,
    pub model: ModelConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub hvf: HvfParams,
    pub brain: Option<MbpParams>,
    pub temp: TemperatureParam,
    pub projector: Option<ProjectorParams>,
    pub denoiser: Option<ToyDenoiser>,
}

fn module_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const STREAM_HVF: u64 = 11;
const STREAM_BRAIN: u64 = 12;
const STREAM_PROJECTOR: u64 = 13;
const STREAM_DENOISER: u64 = 14;

impl Model {
    /// Seeded initialization; each module draws from its own stream.
    pub fn init(dims: &ModelDims, seed: u64, with_prior: bool) -> Self {
        let m = &dims.model;
        Model {
            hvf: HvfParams::init(
                &dims.branch_dims,
                m.shared_dim,
                m.fuse_hidden,
                &mut module_rng(seed, STREAM_HVF),
            ),
            brain: dims.input_len.map(|len| Model::init_brain(dims, len, seed)),
            temp: TemperatureParam::default(),
            projector: with_prior.then(|| {
                ProjectorParams::init(
                    m.shared_dim,
                    m.projector_hidden,
                    &mut module_rng(seed, STREAM_PROJECTOR),
                )
            }),
            denoiser: with_prior.then(|| {
                ToyDenoiser::init(
                    dims.x_dim,
                    m.shared_dim,
                    m.denoiser_width,
                    &mut module_rng(seed, STREAM_DENOISER),
                )
            }),
        }
    }

    pub fn init_brain(dims: &ModelDims, input_len: usize, seed: u64) -> MbpParams {
        let m = &dims.model;
        MbpParams::init(
            input_len,
            m.shared_dim,
            m.brain_hidden,
            &mut module_rng(seed, STREAM_BRAIN),
        )
    }

    pub fn brain(&self) -> Result<&MbpParams> {
        self.brain.as_ref().ok_or_else(|| {
            Error::Protocol("model has no brain encoder (prior-only checkpoint)".into())
        })
    }

    pub fn projector(&self) -> Result<&ProjectorParams> {
        self.projector.as_ref().ok_or_else(|| {
            Error::Protocol("model has no projector (retrieval-only checkpoint)".into())
        })
    }

    /// Tensors of one group, as `(name, tensor)` pairs.
    pub fn group_tensors(&self, g: Group) -> Vec<(String, &Tensor)> {
        match g {
            Group::Hvf => self.hvf.named_tensors(),
            Group::Brain => self
                .brain
                .as_ref()
                .map(|b| b.named_tensors())
                .unwrap_or_default(),
            Group::Temp => self.temp.named_tensors(),
            Group::Projector => self
                .projector
                .as_ref()
                .map(|p| p.named_tensors())
                .unwrap_or_default(),
            Group::DenoiserAdapter | Group::DenoiserBackbone => {
                let backbone = g == Group::DenoiserBackbone;
                self.denoiser
                    .as_ref()
                    .map(|d| {
                        d.named_tensors()
                            .into_iter()
                            .filter(|(n, _)| n.starts_with(BACKBONE_PREFIX) == backbone)
                            .collect()
                    })
                    .unwrap_or_default()
            }
        }
    }

    pub fn group_checksum(&self, g: Group) -> u64 {
        self.group_tensors(g)
            .iter()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, (n, t)| {
                let mut x = h ^ t.checksum();
                for b in n.bytes() {
                    x = (x ^ u64::from(b)).wrapping_mul(0x100_0000_01b3);
                }
                x
            })
    }

    /// Checkpoint sections in fixed order; optional modules are omitted when absent.
    pub fn sections(&self) -> Vec<(String, Vec<(String, Tensor)>)> {
        let mut out = vec![("hvf".to_string(), self.hvf.to_section())];
        if let Some(b) = &self.brain {
            out.push(("brain".into(), b.to_section()));
        }
        out.push(("temp".into(), self.temp.to_section()));
        if let Some(p) = &self.projector {
            out.push(("projector".into(), p.to_section()));
        }
        if let Some(d) = &self.denoiser {
            out.push(("denoiser".into(), d.to_section()));
        }
        out
    }

    /// Rebuilds a model of shape `dims` from checkpoint sections, validating every tensor shape.
    pub fn from_sections(
        dims: &ModelDims,
        sections: &[(String, Vec<(String, Tensor)>)],
    ) -> Result<Self> {
        let find = |name: &str| {
            sections
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.as_slice())
        };
        let m = &dims.model;
        let mut hvf = HvfParams::zeros(&dims.branch_dims, m.shared_dim, m.fuse_hidden);
        let hvf_src = find("hvf").ok_or_else(|| Error::CheckpointShape {
            section: "hvf".into(),
            reason: "section missing".into(),
        })?;
        let want = hvf.named_tensors().len();
        if hvf_src.len() != want {
            return Err(Error::CheckpointShape {
                section: "hvf".into(),
                reason: format!("{} tensors, expected {want}", hvf_src.len()),
            });
        }
        hvf.assign_from("hvf", hvf_src)?;
        let mut temp = TemperatureParam::default();
        temp.assign_from(
            "temp",
            find("temp").ok_or_else(|| Error::CheckpointShape {
                section: "temp".into(),
                reason: "section missing".into(),
            })?,
        )?;
        let brain = match (find("brain"), dims.input_len) {
            (Some(src), Some(len)) => {
                let mut b = MbpParams::zeros(len, m.shared_dim, m.brain_hidden);
                b.assign_from("brain", src)?;
                Some(b)
            }
            _ => None,
        };
        let projector = match find("projector") {
            Some(src) => {
                let mut p = ProjectorParams::zeros(m.shared_dim, m.projector_hidden);
                p.assign_from("projector", src)?;
                Some(p)
            }
            None => None,
        };
        let denoiser = match find("denoiser") {
            Some(src) => {
                let mut d = ToyDenoiser {
                    in_w: Tensor::zeros(&[dims.x_dim + m.shared_dim, m.denoiser_width]),
                    in_b: Tensor::zeros(&[m.denoiser_width]),
                    hid_w: Tensor::zeros(&[m.denoiser_width, m.denoiser_width]),
                    hid_b: Tensor::zeros(&[m.denoiser_width]),
                    time_w: Tensor::zeros(&[crate::prior::TIME_FEATURES, m.denoiser_width]),
                    time_b: Tensor::zeros(&[m.denoiser_width]),
                    out_w: Tensor::zeros(&[m.denoiser_width, dims.x_dim]),
                    out_b: Tensor::zeros(&[dims.x_dim]),
                };
                d.assign_from("denoiser", src)?;
                Some(d)
            }
            None => None,
        };
        Ok(Model {
            hvf,
            brain,
            temp,
            projector,
            denoiser,
        })
    }
}
