//! Embedding banks, brain recordings, preprocessing and the synthetic generator.
//!
//! A dataset directory holds `manifest.json`, one `branch_<id>.f32` per
//! visual branch and one `brain_<subject>.f32` per subject. Payloads are raw
//! little-endian `f32` in row-major order; brain rows are `C·T` samples,
//! channel-major.

mod bank;
mod brain;
mod preprocess;
mod synth;

use std::path::Path;

pub use bank::{
    load_bank, pixel_latent_dim, save_bank, BranchInfo, BranchKind, EmbeddingBank, GroundTruthInfo,
    Manifest, Partition, BANK_VERSION, MANIFEST_FILE,
};
pub use brain::{samples_for_window, BrainManifest, BrainRecording, RecordRef, SubjectRecords};
pub use preprocess::{
    average, preprocess, ChannelSubset, PreprocSpec, Preprocessed, Trial, OCCIPITAL, O_PLUS_P,
    PARIETAL,
};
pub use synth::{generate_synthetic, SynthSpec};

pub use bank::{read_f32, write_f32};

use crate::error::{Error, Result};
use crate::ndgrad::Tensor;

const LATENT_FILE: &str = "latent.f32";

/// A bank plus paired brain recordings and, for synthetic data, the generating latent.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub bank: EmbeddingBank,
    pub recordings: Vec<BrainRecording>,
    pub ground_truth: Option<Tensor>,
}

pub fn save_dataset(data: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    data.bank.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = data.bank.manifest();
    manifest.brain = brain::write_recordings(dir, &data.recordings, data.bank.num_stimuli)?;
    if let Some(u) = &data.ground_truth {
        if u.rows() != data.bank.num_stimuli {
            return Err(Error::Shape(format!(
                "ground truth has {} rows for {} stimuli",
                u.rows(),
                data.bank.num_stimuli
            )));
        }
        let values: Vec<f32> = u.data().iter().map(|&v| v as f32).collect();
        write_f32(&dir.join(LATENT_FILE), &values)?;
        manifest.ground_truth = Some(GroundTruthInfo {
            latent_dim: u.cols(),
            file: LATENT_FILE.into(),
        });
    }
    bank::write_branches(dir, &data.bank)?;
    bank::write_manifest(dir, &manifest)
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest = bank::read_manifest(dir)?;
    let bank = bank::bank_from_manifest(dir, &manifest)?;
    let recordings = match &manifest.brain {
        Some(b) => brain::read_recordings(dir, b, bank.num_stimuli)?,
        None => Vec::new(),
    };
    let ground_truth = match &manifest.ground_truth {
        Some(g) => {
            let path = dir.join(&g.file);
            let values = read_f32(&path)?;
            if g.latent_dim == 0 || values.len() != bank.num_stimuli * g.latent_dim {
                return Err(Error::Format {
                    path,
                    reason: format!(
                        "{} values for {} latents of {}",
                        values.len(),
                        bank.num_stimuli,
                        g.latent_dim
                    ),
                });
            }
            Some(Tensor::matrix(
                bank.num_stimuli,
                g.latent_dim,
                values.into_iter().map(f64::from).collect(),
            )?)
        }
        None => None,
    };
    Ok(Dataset {
        bank,
        recordings,
        ground_truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_round_trip_is_exact() {
        let spec = SynthSpec {
            num_train_stimuli: 6,
            num_test_stimuli: 4,
            num_subjects: 2,
            repetitions: 3,
            ..SynthSpec::desk()
        };
        let data = generate_synthetic(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&data, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, data);
        // the same directory reads as a plain bank too
        assert_eq!(load_bank(dir.path()).unwrap(), data.bank);
    }

    #[test]
    fn truncated_brain_file_is_format_error() {
        let spec = SynthSpec {
            num_train_stimuli: 3,
            num_test_stimuli: 2,
            num_subjects: 1,
            repetitions: 1,
            ..SynthSpec::desk()
        };
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&generate_synthetic(&spec).unwrap(), dir.path()).unwrap();
        let path = dir.path().join("brain_sub01.f32");
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(Error::Format { .. })
        ));
    }
}
