//! Run configuration (TOML) and its fingerprint.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::databank::PreprocSpec;
use crate::error::{Error, Result};
use crate::fusion::BranchMask;
use crate::optim::AdamWConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Plain contrastive alignment of brain and fused embeddings, both sides trained.
    AlignRetrieval,
    /// Stage i: fuser, projector and denoiser adapter trained on the noise-prediction loss.
    PriorPretrain,
    /// Stage ii: brain side aligned to the frozen fusion prior.
    BrainFusionAlign,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::AlignRetrieval => "align_retrieval",
            Stage::PriorPretrain => "prior_pretrain",
            Stage::BrainFusionAlign => "brain_fusion_align",
        }
    }

    /// Groups a stage always freezes, whatever the config says.
    pub fn forced_frozen(self) -> &'static [Group] {
        match self {
            Stage::AlignRetrieval => &[
                Group::Projector,
                Group::DenoiserAdapter,
                Group::DenoiserBackbone,
            ],
            Stage::PriorPretrain => &[Group::Brain, Group::Temp, Group::DenoiserBackbone],
            Stage::BrainFusionAlign => &[
                Group::Hvf,
                Group::Projector,
                Group::DenoiserAdapter,
                Group::DenoiserBackbone,
            ],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "align_retrieval" => Ok(Stage::AlignRetrieval),
            "prior_pretrain" => Ok(Stage::PriorPretrain),
            "brain_fusion_align" => Ok(Stage::BrainFusionAlign),
            other => Err(Error::Config(format!("unknown stage `{other}`"))),
        }
    }
}

/// Parameter groups that can be frozen independently.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    #[serde(rename = "hvf")]
    Hvf,
    #[serde(rename = "brain")]
    Brain,
    #[serde(rename = "temp")]
    Temp,
    #[serde(rename = "projector")]
    Projector,
    #[serde(rename = "denoiser.adapter")]
    DenoiserAdapter,
    #[serde(rename = "denoiser.backbone")]
    DenoiserBackbone,
}

impl Group {
    pub const ALL: [Group; 6] = [
        Group::Hvf,
        Group::Brain,
        Group::Temp,
        Group::Projector,
        Group::DenoiserAdapter,
        Group::DenoiserBackbone,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Hvf => "hvf",
            Group::Brain => "brain",
            Group::Temp => "temp",
            Group::Projector => "projector",
            Group::DenoiserAdapter => "denoiser.adapter",
            Group::DenoiserBackbone => "denoiser.backbone",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub shared_dim: usize,
    pub fuse_hidden: usize,
    pub brain_hidden: usize,
    pub projector_hidden: usize,
    pub denoiser_width: usize,
}

impl ModelConfig {
    pub fn full() -> Self {
        ModelConfig {
            shared_dim: 1024,
            fuse_hidden: 1024,
            brain_hidden: 1024,
            projector_hidden: 4096,
            denoiser_width: 128,
        }
    }

    pub fn desk() -> Self {
        ModelConfig {
            shared_dim: 64,
            fuse_hidden: 64,
            brain_hidden: 16,
            projector_hidden: 128,
            denoiser_width: 128,
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::full()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub beta_start: f64,
    pub beta_end: f64,
    pub train_steps: usize,
    pub respaced_steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            beta_start: 1e-4,
            beta_end: 2e-2,
            train_steps: 1000,
            respaced_steps: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub stage: Stage,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    /// Drop the last incomplete batch of every epoch.
    pub drop_last: bool,
    pub tau_min: f64,
    pub threads: usize,
    /// Extra frozen groups on top of the stage's forced set.
    pub freeze: Vec<Group>,
    /// Inference-time branch mask, e.g. `"1,1,0"`; training always uses every kept branch.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask: Option<BranchMask>,
    /// Keep only these bank branches (encoder-subset ablations).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub branches: Option<Vec<usize>>,
    /// Subject left out of training and used for evaluation (leave-one-subject-out).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub holdout_subject: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    /// Checkpoint to start from; required for `brain_fusion_align`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init_checkpoint: Option<PathBuf>,
    pub preproc: PreprocSpec,
    pub model: ModelConfig,
    pub optim: AdamWConfig,
    pub diffusion: ScheduleConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::full()
    }
}

impl RunConfig {
    /// Full-scale settings: 25 epochs, batch 1024, peak lr 5e-4, 10 warmup steps.
    pub fn full() -> Self {
        RunConfig {
            stage: Stage::AlignRetrieval,
            seed: 0,
            epochs: 25,
            batch_size: 1024,
            peak_lr: 5e-4,
            warmup_steps: 10,
            drop_last: true,
            tau_min: crate::align::DEFAULT_TAU_MIN,
            threads: 1,
            freeze: Vec::new(),
            mask: None,
            branches: None,
            holdout_subject: None,
            data: None,
            init_checkpoint: None,
            preproc: PreprocSpec::default(),
            model: ModelConfig::full(),
            optim: AdamWConfig::default(),
            diffusion: ScheduleConfig::default(),
        }
    }

    /// Single-core settings for the synthetic desk dataset.
    ///
    /// Alignment runs use strong decoupled weight decay: with a few hundred
    /// training concepts the encoders otherwise memorize the training pairs.
    pub fn desk(stage: Stage) -> Self {
        let base = RunConfig {
            stage,
            batch_size: 64,
            model: ModelConfig::desk(),
            ..RunConfig::full()
        };
        match stage {
            Stage::PriorPretrain => RunConfig {
                epochs: 300,
                peak_lr: 3e-3,
                ..base
            },
            Stage::AlignRetrieval | Stage::BrainFusionAlign => RunConfig {
                epochs: 150,
                peak_lr: 1e-3,
                optim: AdamWConfig {
                    weight_decay: 10.0,
                    ..AdamWConfig::default()
                },
                ..base
            },
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.peak_lr > 0.0) || !self.peak_lr.is_finite() {
            return bad(format!("peak_lr must be positive, got {}", self.peak_lr));
        }
        if !(self.tau_min > 0.0) {
            return bad(format!("tau_min must be positive, got {}", self.tau_min));
        }
        if self.threads == 0 {
            return bad("threads must be at least 1".into());
        }
        let m = &self.model;
        if [
            m.shared_dim,
            m.fuse_hidden,
            m.brain_hidden,
            m.projector_hidden,
            m.denoiser_width,
        ]
        .contains(&0)
        {
            return bad("model dims must be positive".into());
        }
        if self.trainable().is_empty() {
            return bad(format!("stage {} has no trainable group left", self.stage));
        }
        if let Some(b) = &self.branches {
            let set: BTreeSet<_> = b.iter().collect();
            if b.is_empty() || set.len() != b.len() {
                return bad(format!(
                    "branch subset {b:?} must be non-empty without repeats"
                ));
            }
            if let Some(mask) = &self.mask {
                if mask.len() != b.len() {
                    return Err(Error::Mask(format!(
                        "mask covers {} branches, subset keeps {}",
                        mask.len(),
                        b.len()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn frozen(&self) -> BTreeSet<Group> {
        self.stage
            .forced_frozen()
            .iter()
            .chain(&self.freeze)
            .copied()
            .collect()
    }

    pub fn trainable(&self) -> BTreeSet<Group> {
        let frozen = self.frozen();
        let used: &[Group] = match self.stage {
            Stage::AlignRetrieval | Stage::BrainFusionAlign => {
                &[Group::Hvf, Group::Brain, Group::Temp]
            }
            Stage::PriorPretrain => &[Group::Hvf, Group::Projector, Group::DenoiserAdapter],
        };
        used.iter()
            .filter(|g| !frozen.contains(g))
            .copied()
            .collect()
    }

    /// Hex SHA-256 of the canonical TOML form, truncated to 16 characters.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_defaults() {
        let c = RunConfig::full();
        assert_eq!((c.epochs, c.batch_size, c.warmup_steps), (25, 1024, 10));
        assert_eq!(c.peak_lr, 5e-4);
        assert_eq!(c.model.shared_dim, 1024);
        assert_eq!(c.model.projector_hidden, 4096);
    }

    #[test]
    fn toml_round_trip_and_fingerprint() {
        let mut c = RunConfig::desk(Stage::AlignRetrieval);
        c.mask = Some("1,0,1".parse().unwrap());
        c.freeze = vec![Group::Temp];
        let back = RunConfig::from_toml_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.fingerprint(), c.fingerprint());
        assert_ne!(
            RunConfig::desk(Stage::AlignRetrieval).fingerprint(),
            c.fingerprint()
        );
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(
            RunConfig::from_toml_str("epochz = 3"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn stage_two_freezes_visual_side() {
        let c = RunConfig::desk(Stage::BrainFusionAlign);
        let t = c.trainable();
        assert!(t.contains(&Group::Brain) && t.contains(&Group::Temp));
        assert!(!t.contains(&Group::Hvf));
        let stuck = RunConfig {
            freeze: vec![Group::Brain, Group::Temp],
            ..c
        };
        assert!(stuck.validate().is_err());
    }

    #[test]
    fn prior_stage_freezes_backbone() {
        let c = RunConfig::desk(Stage::PriorPretrain);
        assert!(c.frozen().contains(&Group::DenoiserBackbone));
        assert!(c.trainable().contains(&Group::DenoiserAdapter));
    }
}
