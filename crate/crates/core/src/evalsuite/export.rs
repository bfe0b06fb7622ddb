//! Embedding and similarity export in the bank payload format (`f32` LE, row-major).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::retrieval::{cosine_similarity, encode_test, EvalOptions};
use crate::databank::{read_f32, write_f32, Dataset};
use crate::error::{Error, Result};
use crate::ndgrad::Tensor;
use crate::trainer::Checkpoint;

pub const EXPORT_FILE: &str = "export.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportedMatrix {
    pub file: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportInfo {
    pub fingerprint: String,
    pub mask: String,
    pub z_b: ExportedMatrix,
    pub z_f: ExportedMatrix,
    /// One per branch, `z^(k) W^(k)` over the gallery.
    pub branch_projected: Vec<ExportedMatrix>,
    /// Cosine similarity, queries × gallery.
    pub similarity: ExportedMatrix,
    pub query_subject: Vec<String>,
    pub query_stimulus: Vec<usize>,
    /// Gallery column of each query's own stimulus.
    pub targets: Vec<usize>,
    /// Bank indices of the gallery columns.
    pub gallery: Vec<usize>,
}

fn write_matrix(dir: &Path, file: &str, t: &Tensor) -> Result<ExportedMatrix> {
    let values: Vec<f32> = t.data().iter().map(|&v| v as f32).collect();
    write_f32(&dir.join(file), &values)?;
    Ok(ExportedMatrix {
        file: file.into(),
        rows: t.rows(),
        cols: t.cols(),
    })
}

/// Writes `z_b`, `z_f`, the per-branch projections and the similarity matrix under `dir`.
pub fn export_embeddings(
    ck: &Checkpoint,
    data: &Dataset,
    opts: &EvalOptions,
    dir: impl AsRef<Path>,
) -> Result<ExportInfo> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let model = ck.model(&ck.meta.dims)?;
    let enc = encode_test(ck, &model, data, opts)?;
    let sim = cosine_similarity(&enc.zb, &enc.zf)?;
    let branch_projected = enc
        .branch_projected
        .iter()
        .zip(&ck.meta.branch_ids)
        .map(|(t, id)| write_matrix(dir, &format!("branch_{id}_projected.f32"), t))
        .collect::<Result<Vec<_>>>()?;
    let info = ExportInfo {
        fingerprint: ck.meta.fingerprint.clone(),
        mask: enc.mask.to_string(),
        z_b: write_matrix(dir, "z_b.f32", &enc.zb)?,
        z_f: write_matrix(dir, "z_f.f32", &enc.zf)?,
        branch_projected,
        similarity: write_matrix(dir, "similarity.f32", &sim)?,
        query_subject: enc.query_subject,
        query_stimulus: enc.query_stimulus,
        targets: enc.targets,
        gallery: enc.gallery,
    };
    let path = dir.join(EXPORT_FILE);
    std::fs::write(
        &path,
        serde_json::to_string_pretty(&info).expect("export info serializes"),
    )
    .map_err(|e| Error::io(&path, e))?;
    Ok(info)
}

pub fn read_export_info(dir: impl AsRef<Path>) -> Result<ExportInfo> {
    let path = dir.as_ref().join(EXPORT_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path,
        reason: e.to_string(),
    })
}

/// Reads one exported matrix back as `f64`.
pub fn read_matrix(dir: impl AsRef<Path>, m: &ExportedMatrix) -> Result<Tensor> {
    let path = dir.as_ref().join(&m.file);
    let values = read_f32(&path)?;
    if values.len() != m.rows * m.cols {
        return Err(Error::Format {
            path,
            reason: format!("{} values, expected {}×{}", values.len(), m.rows, m.cols),
        });
    }
    Tensor::matrix(m.rows, m.cols, values.into_iter().map(f64::from).collect())
}
