//! Ablation grids: inference-time masking, encoder subsets, channel groups and time windows.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::retrieval::{evaluate_retrieval, EvalOptions, RetrievalReport};
use crate::databank::{ChannelSubset, Dataset};
use crate::error::{Error, Result};
use crate::fusion::BranchMask;
use crate::trainer::{train_alignment, Checkpoint, RunConfig, Stage};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSpec {
    /// Evaluated on the given checkpoint without retraining.
    pub masks: Vec<BranchMask>,
    /// Branch index subsets, each retrained.
    pub subsets: Vec<Vec<usize>>,
    pub channels: Vec<ChannelSubset>,
    pub windows: Vec<[f64; 2]>,
}

impl AblationSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("ablation spec: {e}")))
    }

    /// The full mask plus one cell per dropped branch.
    pub fn leave_one_out(num_branches: usize) -> Result<Self> {
        let mut masks = vec![BranchMask::all(num_branches)];
        for k in 0..num_branches {
            masks.push(BranchMask::without(num_branches, k)?);
        }
        Ok(AblationSpec {
            masks,
            ..Default::default()
        })
    }

    /// Every non-empty subset of `num_branches` branches, smallest first.
    pub fn all_subsets(num_branches: usize) -> Self {
        let mut subsets: Vec<Vec<usize>> = (1u32..(1 << num_branches))
            .map(|bits| (0..num_branches).filter(|k| bits & (1 << k) != 0).collect())
            .collect();
        subsets.sort_by_key(|s| s.len());
        AblationSpec {
            subsets,
            ..Default::default()
        }
    }
}

/// Cumulative windows `[start, t]` and trailing windows `[t, end]` for each cut `t`.
pub fn window_families(recorded: [f64; 2], cuts: &[f64]) -> Vec<[f64; 2]> {
    let inner = cuts
        .iter()
        .copied()
        .filter(|&t| t > recorded[0] && t < recorded[1]);
    let mut out: Vec<[f64; 2]> = inner.clone().map(|t| [recorded[0], t]).collect();
    out.push(recorded);
    out.extend(inner.map(|t| [t, recorded[1]]));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    Mask,
    Subset,
    Channels,
    Window,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub kind: CellKind,
    pub label: String,
    pub report: RetrievalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub cells: Vec<AblationCell>,
}

impl AblationGrid {
    pub fn cell(&self, kind: CellKind, label: &str) -> Option<&AblationCell> {
        self.cells
            .iter()
            .find(|c| c.kind == kind && c.label == label)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,cell,k_way,queries,top1,top5\n");
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{},{:.4},{:.4}\n",
                serde_json::to_value(c.kind)
                    .expect("kind")
                    .as_str()
                    .expect("string"),
                c.label,
                c.report.k_way,
                c.report.num_queries,
                c.report.top1,
                c.report.top5
            ));
        }
        out
    }

    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<10} {:<28} {:>8} {:>8}\n",
            "kind", "cell", "top-1", "top-5"
        );
        for c in &self.cells {
            out.push_str(&format!(
                "{:<10} {:<28} {:>8.1} {:>8.1}\n",
                format!("{:?}", c.kind).to_lowercase(),
                c.label,
                c.report.top1,
                c.report.top5
            ));
        }
        if let Some(c) = self.cells.first().and_then(|c| c.report.caveat.as_ref()) {
            out.push_str(&format!("note: {c}\n"));
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("ablation.json");
        std::fs::write(
            &json,
            serde_json::to_string_pretty(self).expect("grid serializes"),
        )
        .map_err(|e| Error::io(&json, e))?;
        let csv = dir.join("ablation.csv");
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))
    }
}

fn window_label(w: [f64; 2]) -> String {
    format!("{}-{}ms", w[0], w[1])
}

/// Runs every cell of `spec`.
///
/// Mask cells reuse `base`. Subset, channel and window cells retrain from
/// scratch with `base`'s config and seed, changing only that one setting.
/// All cells must end up with the same test gallery.
pub fn run_ablation(
    base: &Checkpoint,
    data: &Dataset,
    spec: &AblationSpec,
    opts: &EvalOptions,
) -> Result<AblationGrid> {
    let mut cells = Vec::new();
    for m in &spec.masks {
        let report = evaluate_retrieval(
            base,
            data,
            &EvalOptions {
                mask: Some(m.clone()),
                ..opts.clone()
            },
        )?;
        cells.push(AblationCell {
            kind: CellKind::Mask,
            label: m.to_string(),
            report,
        });
    }
    let retrain = !(spec.subsets.is_empty() && spec.channels.is_empty() && spec.windows.is_empty());
    if retrain && base.meta.config.stage != Stage::AlignRetrieval {
        return Err(Error::Config(
            "subset, channel and window cells retrain and need an align_retrieval checkpoint"
                .into(),
        ));
    }
    let cfg = RunConfig {
        mask: None,
        ..base.meta.config.clone()
    };
    let mut jobs: Vec<(CellKind, String, RunConfig)> = Vec::new();
    for s in &spec.subsets {
        let label = s
            .iter()
            .map(|k| data.bank.branches[*k].branch_id.clone())
            .collect::<Vec<_>>()
            .join("+");
        jobs.push((
            CellKind::Subset,
            label,
            RunConfig {
                branches: Some(s.clone()),
                ..cfg.clone()
            },
        ));
    }
    for c in &spec.channels {
        let mut cell = cfg.clone();
        cell.preproc.channels = c.clone();
        jobs.push((CellKind::Channels, c.to_string(), cell));
    }
    for w in &spec.windows {
        let mut cell = cfg.clone();
        cell.preproc.window_ms = Some(*w);
        jobs.push((CellKind::Window, window_label(*w), cell));
    }
    for (kind, label, cell_cfg) in jobs {
        log::info!("ablation cell {label}: training");
        let out = train_alignment(&cell_cfg, data, None)?;
        let report = evaluate_retrieval(
            &out.checkpoint,
            data,
            &EvalOptions {
                mask: None,
                ..opts.clone()
            },
        )?;
        cells.push(AblationCell {
            kind,
            label,
            report,
        });
    }
    if let Some(first) = cells.first() {
        for c in &cells[1..] {
            if c.report.gallery != first.report.gallery {
                return Err(Error::Protocol(format!(
                    "cell `{}` was evaluated on a different test partition than `{}`",
                    c.label, first.label
                )));
            }
        }
    }
    Ok(AblationGrid { cells })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn windows_cover_both_families() {
        let w = window_families([0.0, 1000.0], &[200.0, 500.0, 1000.0]);
        assert_eq!(
            w,
            vec![
                [0.0, 200.0],
                [0.0, 500.0],
                [0.0, 1000.0],
                [200.0, 1000.0],
                [500.0, 1000.0]
            ]
        );
    }

    #[test]
    fn subsets_enumerate() {
        let s = AblationSpec::all_subsets(3).subsets;
        assert_eq!(s.len(), 7);
        assert_eq!(s[0], vec![0]);
        assert_eq!(s[6], vec![0, 1, 2]);
    }

    #[test]
    fn spec_parses() {
        let s = AblationSpec::from_toml_str(
            "masks = [\"1,1,1\", \"1,1,0\"]\nchannels = [\"o_plus_p\", \"others\"]\nwindows = [[0.0, 500.0]]\n",
        )
        .unwrap();
        assert_eq!(s.masks.len(), 2);
        assert_eq!(s.channels[1], ChannelSubset::Others);
        assert!(AblationSpec::from_toml_str("bogus = 1").is_err());
    }
}
