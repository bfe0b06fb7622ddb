//! Embedding banks: a JSON manifest plus one little-endian `f32` payload file per branch.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::brain::BrainManifest;
use crate::error::{Error, Result};
use crate::ndgrad::Tensor;

pub const BANK_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BranchKind {
    Semantic,
    Pixel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchInfo {
    pub branch_id: String,
    pub name: String,
    pub dim: usize,
    pub kind: BranchKind,
    /// Source image `[H, W]` for pixel-latent branches; the flattened latent is `H·W/16` long.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pixel_hw: Option<[usize; 2]>,
}

impl BranchInfo {
    pub fn file_name(&self) -> String {
        format!("branch_{}.f32", self.branch_id)
    }
}

/// Flattened length of a `[H/8, W/8, 4]` latent.
pub fn pixel_latent_dim(h: usize, w: usize) -> usize {
    (h / 8) * (w / 8) * 4
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthInfo {
    pub latent_dim: usize,
    pub file: String,
}

/// On-disk `manifest.json`. Bank fields are required; brain and ground-truth
/// sections appear only in full datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub bank_version: u32,
    pub num_stimuli: usize,
    pub branches: Vec<BranchInfo>,
    pub concept_labels: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partitions: Option<Vec<Partition>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub source: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub brain: Option<BrainManifest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<GroundTruthInfo>,
}

/// Precomputed per-stimulus embeddings from `K` encoder branches.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBank {
    pub num_stimuli: usize,
    pub branches: Vec<BranchInfo>,
    pub concept_labels: Vec<u32>,
    pub partitions: Vec<Partition>,
    /// Free-form provenance tags (e.g. which stage produced an export).
    pub source: BTreeMap<String, String>,
    /// Row-major `num_stimuli × dim` matrix per branch.
    pub payload: Vec<Vec<f32>>,
}

impl EmbeddingBank {
    pub fn validate(&self) -> Result<()> {
        validate_header(
            &self.branches,
            self.num_stimuli,
            &self.concept_labels,
            &self.partitions,
        )?;
        if self.payload.len() != self.branches.len() {
            return Err(Error::CorruptBank {
                branch_id: "*".into(),
                reason: format!(
                    "{} payload matrices for {} branches",
                    self.payload.len(),
                    self.branches.len()
                ),
            });
        }
        for (b, p) in self.branches.iter().zip(&self.payload) {
            if p.len() != self.num_stimuli * b.dim {
                return Err(Error::CorruptBank {
                    branch_id: b.branch_id.clone(),
                    reason: format!(
                        "payload holds {} values, expected {} rows × {}",
                        p.len(),
                        self.num_stimuli,
                        b.dim
                    ),
                });
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::CorruptBank {
                    branch_id: b.branch_id.clone(),
                    reason: "non-finite value in payload".into(),
                });
            }
        }
        Ok(())
    }

    pub fn num_branches(&self) -> usize {
        self.branches.len()
    }

    pub fn branch_dims(&self) -> Vec<usize> {
        self.branches.iter().map(|b| b.dim).collect()
    }

    /// Stimulus indices in `partition`, in bank order.
    pub fn indices(&self, partition: Partition) -> Vec<usize> {
        (0..self.num_stimuli)
            .filter(|&i| self.partitions[i] == partition)
            .collect()
    }

    /// Branch `k` rows for `rows` as an `f64` matrix.
    pub fn branch_rows(&self, k: usize, rows: &[usize]) -> Tensor {
        let dim = self.branches[k].dim;
        let p = &self.payload[k];
        let mut data = Vec::with_capacity(rows.len() * dim);
        for &r in rows {
            data.extend(p[r * dim..(r + 1) * dim].iter().map(|&v| f64::from(v)));
        }
        Tensor::matrix(rows.len(), dim, data).expect("validated bank rows")
    }

    /// All branches for `rows`.
    pub fn embeddings(&self, rows: &[usize]) -> Vec<Tensor> {
        (0..self.num_branches())
            .map(|k| self.branch_rows(k, rows))
            .collect()
    }

    /// First pixel-kind branch, falling back to the last branch.
    pub fn pixel_branch(&self) -> usize {
        self.branches
            .iter()
            .position(|b| b.kind == BranchKind::Pixel)
            .unwrap_or(self.branches.len() - 1)
    }

    /// Keeps only the listed branches, in the given order.
    pub fn subset_branches(&self, keep: &[usize]) -> Result<EmbeddingBank> {
        if keep.is_empty() || keep.iter().any(|&k| k >= self.num_branches()) {
            return Err(Error::Config(format!(
                "invalid branch subset {keep:?} for {} branches",
                self.num_branches()
            )));
        }
        Ok(EmbeddingBank {
            branches: keep.iter().map(|&k| self.branches[k].clone()).collect(),
            payload: keep.iter().map(|&k| self.payload[k].clone()).collect(),
            ..self.clone()
        })
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            bank_version: BANK_VERSION,
            num_stimuli: self.num_stimuli,
            branches: self.branches.clone(),
            concept_labels: self.concept_labels.clone(),
            partitions: Some(self.partitions.clone()),
            source: self.source.clone(),
            brain: None,
            ground_truth: None,
        }
    }
}

pub(crate) fn validate_header(
    branches: &[BranchInfo],
    num_stimuli: usize,
    concept_labels: &[u32],
    partitions: &[Partition],
) -> Result<()> {
    let mut seen = HashSet::new();
    for b in branches {
        if !seen.insert(b.branch_id.as_str()) {
            return Err(Error::CorruptBank {
                branch_id: b.branch_id.clone(),
                reason: "duplicate branch id".into(),
            });
        }
        if b.dim == 0 {
            return Err(Error::CorruptBank {
                branch_id: b.branch_id.clone(),
                reason: "branch dim must be positive".into(),
            });
        }
        if let (BranchKind::Pixel, Some([h, w])) = (b.kind, b.pixel_hw) {
            let expect = h * w / 16;
            if h % 8 != 0 || w % 8 != 0 || b.dim != expect {
                return Err(Error::CorruptBank {
                    branch_id: b.branch_id.clone(),
                    reason: format!(
                        "pixel branch declared {h}×{w} must have dim {expect}, found {}",
                        b.dim
                    ),
                });
            }
        }
    }
    if concept_labels.len() != num_stimuli {
        return Err(Error::CorruptBank {
            branch_id: "*".into(),
            reason: format!(
                "{} concept labels for {num_stimuli} stimuli",
                concept_labels.len()
            ),
        });
    }
    if partitions.len() != num_stimuli {
        return Err(Error::CorruptBank {
            branch_id: "*".into(),
            reason: format!(
                "{} partition tags for {num_stimuli} stimuli",
                partitions.len()
            ),
        });
    }
    let mut owner: HashMap<u32, Partition> = HashMap::new();
    for (&c, &p) in concept_labels.iter().zip(partitions) {
        if *owner.entry(c).or_insert(p) != p {
            return Err(Error::Protocol(format!(
                "concept {c} appears in both train and test partitions"
            )));
        }
    }
    Ok(())
}

pub fn write_f32(path: &Path, values: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_f32(path: &Path) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("length {} is not a multiple of 4", bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub(crate) fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub(crate) fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    if manifest.bank_version != BANK_VERSION {
        return Err(Error::Version {
            what: "bank",
            found: manifest.bank_version,
            expected: BANK_VERSION,
        });
    }
    Ok(manifest)
}

pub(crate) fn write_branches(dir: &Path, bank: &EmbeddingBank) -> Result<()> {
    for (b, p) in bank.branches.iter().zip(&bank.payload) {
        write_f32(&dir.join(b.file_name()), p)?;
    }
    Ok(())
}

pub fn save_bank(bank: &EmbeddingBank, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    bank.validate()?;
    write_manifest(dir, &bank.manifest())?;
    write_branches(dir, bank)
}

pub(crate) fn bank_from_manifest(dir: &Path, manifest: &Manifest) -> Result<EmbeddingBank> {
    let partitions = manifest
        .partitions
        .clone()
        .unwrap_or_else(|| vec![Partition::Train; manifest.num_stimuli]);
    validate_header(
        &manifest.branches,
        manifest.num_stimuli,
        &manifest.concept_labels,
        &partitions,
    )?;
    let mut payload = Vec::with_capacity(manifest.branches.len());
    for b in &manifest.branches {
        let path: PathBuf = dir.join(b.file_name());
        let values = read_f32(&path)?;
        let expect = manifest.num_stimuli * b.dim;
        if values.len() != expect {
            return Err(Error::CorruptBank {
                branch_id: b.branch_id.clone(),
                reason: format!(
                    "payload has {} rows of {}, manifest declares {} stimuli",
                    values.len() as f64 / b.dim as f64,
                    b.dim,
                    manifest.num_stimuli
                ),
            });
        }
        payload.push(values);
    }
    let bank = EmbeddingBank {
        num_stimuli: manifest.num_stimuli,
        branches: manifest.branches.clone(),
        concept_labels: manifest.concept_labels.clone(),
        partitions,
        source: manifest.source.clone(),
        payload,
    };
    bank.validate()?;
    Ok(bank)
}

pub fn load_bank(dir: impl AsRef<Path>) -> Result<EmbeddingBank> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    bank_from_manifest(dir, &manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_bank(rows: usize) -> EmbeddingBank {
        EmbeddingBank {
            num_stimuli: rows,
            branches: vec![
                BranchInfo {
                    branch_id: "0".into(),
                    name: "sem".into(),
                    dim: 3,
                    kind: BranchKind::Semantic,
                    pixel_hw: None,
                },
                BranchInfo {
                    branch_id: "vae".into(),
                    name: "vae".into(),
                    dim: 4,
                    kind: BranchKind::Pixel,
                    pixel_hw: Some([8, 8]),
                },
            ],
            concept_labels: (0..rows as u32).collect(),
            partitions: (0..rows)
                .map(|i| {
                    if i % 2 == 0 {
                        Partition::Train
                    } else {
                        Partition::Test
                    }
                })
                .collect(),
            source: BTreeMap::new(),
            payload: vec![
                (0..rows * 3).map(|i| i as f32 * 0.1 + 1e-7).collect(),
                (0..rows * 4).map(|i| -(i as f32) / 3.0).collect(),
            ],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let bank = tiny_bank(5);
        save_bank(&bank, dir.path()).unwrap();
        let back = load_bank(dir.path()).unwrap();
        assert_eq!(bank, back);
        for (a, b) in bank
            .payload
            .iter()
            .flatten()
            .zip(back.payload.iter().flatten())
        {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn short_branch_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let bank = tiny_bank(200);
        save_bank(&bank, dir.path()).unwrap();
        // truncate branch "vae" to 199 rows
        write_f32(
            &dir.path().join("branch_vae.f32"),
            &bank.payload[1][..199 * 4],
        )
        .unwrap();
        match load_bank(dir.path()) {
            Err(Error::CorruptBank { branch_id, .. }) => assert_eq!(branch_id, "vae"),
            other => panic!("expected corrupt bank, got {other:?}"),
        }
    }

    #[test]
    fn unknown_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = tiny_bank(2).manifest();
        m.bank_version = 7;
        write_manifest(dir.path(), &m).unwrap();
        assert!(matches!(
            load_bank(dir.path()),
            Err(Error::Version { found: 7, .. })
        ));
    }

    #[test]
    fn pixel_dim_follows_resolution() {
        assert_eq!(pixel_latent_dim(128, 128), 1024);
        assert_eq!(128 * 128 / 16, 1024);
        let mut bank = tiny_bank(2);
        bank.branches[1].pixel_hw = Some([128, 128]);
        assert!(matches!(bank.validate(), Err(Error::CorruptBank { .. })));
        bank.branches[1].dim = 1024;
        bank.payload[1] = vec![0.0; 2 * 1024];
        bank.validate().unwrap();
    }

    #[test]
    fn concept_in_both_partitions_is_protocol_error() {
        let mut bank = tiny_bank(4);
        bank.concept_labels = vec![0, 0, 1, 2];
        assert!(matches!(bank.validate(), Err(Error::Protocol(_))));
    }

    #[test]
    fn duplicate_branch_ids_rejected() {
        let mut bank = tiny_bank(2);
        bank.branches[1].branch_id = "0".into();
        assert!(matches!(bank.validate(), Err(Error::CorruptBank { .. })));
    }
}
