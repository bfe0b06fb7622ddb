//! Zero-shot retrieval of test stimuli from brain queries.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::brainproj::BrainBackbone as _;
use crate::databank::{Dataset, EmbeddingBank, Partition, PreprocSpec};
use crate::error::{Error, Result};
use crate::fusion::BranchMask;
use crate::ndgrad::{matmul_raw, Tensor};
use crate::trainer::{effective_bank, Checkpoint, Model, PairedSet};

/// Printed on every report built from synthetic data.
pub const SYNTHETIC_CAVEAT: &str = "synthetic data: accuracies measure this pipeline on generated signals and \
are not comparable to published THINGS-EEG/MEG numbers, which need real recordings and pretrained encoders";

const SUBSAMPLE_STREAM: u64 = 1 << 40;

/// Row-wise L2 normalization; all-zero rows stay zero.
pub fn l2_normalize_rows(x: &Tensor) -> Tensor {
    let (n, d) = (x.rows(), x.cols());
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(d.max(1)).take(n) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    Tensor::matrix(n, d, out).expect("same shape")
}

/// Cosine similarity `[n_q × n_g]` without temperature.
pub fn cosine_similarity(queries: &Tensor, gallery: &Tensor) -> Result<Tensor> {
    if queries.cols() != gallery.cols() {
        return Err(Error::Shape(format!(
            "query width {} vs gallery width {}",
            queries.cols(),
            gallery.cols()
        )));
    }
    let q = l2_normalize_rows(queries);
    let g = l2_normalize_rows(gallery);
    let (nq, ng, d) = (q.rows(), g.rows(), q.cols());
    // gallery transposed so the product is a plain row-major matmul
    let mut gt = vec![0.0; d * ng];
    for j in 0..ng {
        for (k, v) in g.row(j).iter().enumerate() {
            gt[k * ng + j] = *v;
        }
    }
    Tensor::matrix(nq, ng, matmul_raw(q.data(), &gt, nq, d, ng))
}

/// Zero-based rank of `target` in a similarity row.
///
/// Items scoring strictly higher rank ahead, and so do equal scores at a
/// lower index.
pub fn rank_of(row: &[f64], target: usize) -> usize {
    let s = row[target];
    row.iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < target))
        .count()
}

/// Ranks of each query's target column.
pub fn rank_all(sim: &Tensor, targets: &[usize]) -> Vec<usize> {
    targets
        .iter()
        .enumerate()
        .map(|(i, &t)| rank_of(sim.row(i), t))
        .collect()
}

/// Percentage of ranks below `k`.
pub fn top_k_percent(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    100.0 * ranks.iter().filter(|&&r| r < k).count() as f64 / ranks.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRow {
    pub subject: String,
    /// Excluded from training (inter-subject).
    pub held_out: bool,
    pub queries: usize,
    pub top1: f64,
    pub top5: f64,
}

/// What a report was computed from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFingerprint {
    /// Fingerprint of the training config.
    pub config: String,
    pub mask: String,
    pub branches: Vec<String>,
    pub channels: String,
    pub window_ms: [f64; 2],
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub k_way: usize,
    pub num_queries: usize,
    pub top1: f64,
    pub top5: f64,
    pub per_subject: Vec<SubjectRow>,
    pub fingerprint: ReportFingerprint,
    /// Bank indices of the gallery, in column order.
    pub gallery: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub caveat: Option<String>,
    /// Not serialized, so saved reports stay byte-identical across runs.
    #[serde(skip)]
    pub wall_clock_s: f64,
    #[serde(skip)]
    pub queries: Vec<QueryResult>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    pub subject: String,
    pub stimulus: usize,
    pub rank: usize,
}

impl RetrievalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One header line, then one row per subject and an `all` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("subject,held_out,queries,k_way,top1,top5\n");
        for r in &self.per_subject {
            out.push_str(&format!(
                "{},{},{},{},{:.4},{:.4}\n",
                r.subject, r.held_out, r.queries, self.k_way, r.top1, r.top5
            ));
        }
        out.push_str(&format!(
            "all,,{},{},{:.4},{:.4}\n",
            self.num_queries, self.k_way, self.top1, self.top5
        ));
        out
    }

    /// Plain-text table for the terminal.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{}-way retrieval  mask {}  channels {}  window {:?} ms  seed {}  config {}\n",
            self.k_way,
            self.fingerprint.mask,
            self.fingerprint.channels,
            self.fingerprint.window_ms,
            self.fingerprint.seed,
            self.fingerprint.config
        );
        out.push_str(&format!(
            "{:<12} {:>8} {:>8} {:>8}\n",
            "subject", "queries", "top-1", "top-5"
        ));
        for r in &self.per_subject {
            let name = if r.held_out {
                format!("{} (held out)", r.subject)
            } else {
                r.subject.clone()
            };
            out.push_str(&format!(
                "{:<12} {:>8} {:>8.1} {:>8.1}\n",
                name, r.queries, r.top1, r.top5
            ));
        }
        out.push_str(&format!(
            "{:<12} {:>8} {:>8.1} {:>8.1}\n",
            "all", self.num_queries, self.top1, self.top5
        ));
        if let Some(c) = &self.caveat {
            out.push_str(&format!("note: {c}\n"));
        }
        out
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (ext, text) in [("json", self.to_json()), ("csv", self.to_csv())] {
            let path = dir.join(format!("{stem}.{ext}"));
            let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            f.write_all(text.as_bytes())
                .map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalOptions {
    /// Gallery size; `None` uses every test stimulus.
    pub k_way: Option<usize>,
    /// Inference-time mask; `None` falls back to the checkpoint config's mask, then all branches.
    pub mask: Option<BranchMask>,
    /// Seed for gallery subsampling; `None` uses the checkpoint seed.
    pub seed: Option<u64>,
}

/// Everything retrieval needs after encoding: queries, gallery and targets.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub zb: Tensor,
    pub zf: Tensor,
    pub targets: Vec<usize>,
    pub gallery: Vec<usize>,
    pub query_subject: Vec<String>,
    pub query_stimulus: Vec<usize>,
    pub mask: BranchMask,
    /// Per branch, projected gallery embeddings `z^(k) W^(k)`.
    pub branch_projected: Vec<Tensor>,
}

/// Test-partition pairs under the checkpoint's preprocessing, checked against its trained layout.
pub fn test_set(
    ck: &Checkpoint,
    data: &Dataset,
) -> Result<(EmbeddingBank, PairedSet, PreprocSpec)> {
    let cfg = &ck.meta.config;
    let bank = effective_bank(cfg, &data.bank)?;
    let ids: Vec<String> = bank.branches.iter().map(|b| b.branch_id.clone()).collect();
    if ids != ck.meta.branch_ids {
        return Err(Error::Protocol(format!(
            "checkpoint was trained on branches {:?}, data provides {:?}",
            ck.meta.branch_ids, ids
        )));
    }
    let set = PairedSet::build(
        &bank,
        &data.recordings,
        &cfg.preproc,
        Partition::Test,
        |_| true,
    )?;
    if let Some(layout) = &ck.meta.signal {
        if *layout != set.layout {
            return Err(Error::Protocol(format!(
                "test signals ({} channels, {} samples) do not match the trained layout ({} channels, {} samples)",
                set.layout.channels.len(),
                set.layout.num_samples,
                layout.channels.len(),
                layout.num_samples
            )));
        }
    }
    Ok((bank, set, cfg.preproc.clone()))
}

/// Encodes test queries and the (optionally subsampled) gallery.
pub fn encode_test(
    ck: &Checkpoint,
    model: &Model,
    data: &Dataset,
    opts: &EvalOptions,
) -> Result<Encoded> {
    let (_, set, _) = test_set(ck, data)?;
    let brain = model.brain()?;
    let mask = match (&opts.mask, &ck.meta.config.mask) {
        (Some(m), _) | (None, Some(m)) => m.clone(),
        (None, None) => BranchMask::all(model.hvf.num_branches()),
    };
    let n_g = set.stimuli.len();
    let k_way = opts.k_way.unwrap_or(n_g);
    if k_way < 2 {
        return Err(Error::Contract(format!(
            "k_way must be at least 2, got {k_way}"
        )));
    }
    if k_way > n_g {
        return Err(Error::Contract(format!(
            "gallery has {n_g} test stimuli, fewer than k_way = {k_way}"
        )));
    }
    // rows of `set.stimuli` kept in the gallery, ascending
    let keep: Vec<usize> = if k_way == n_g {
        (0..n_g).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.unwrap_or(ck.seed));
        rng.set_stream(SUBSAMPLE_STREAM);
        let mut v = sample(&mut rng, n_g, k_way).into_vec();
        v.sort_unstable();
        v
    };
    let col_of: std::collections::BTreeMap<usize, usize> =
        keep.iter().enumerate().map(|(c, &r)| (r, c)).collect();
    let trials: Vec<usize> = (0..set.num_trials())
        .filter(|&i| col_of.contains_key(&set.trial_stimulus[i]))
        .collect();
    let embs: Vec<Tensor> = set
        .embeddings
        .iter()
        .map(|e| e.select_rows(&keep))
        .collect();
    let zf = model.hvf.forward(&embs, &mask)?;
    let zb = brain.encode(&set.signals.select_rows(&trials))?;
    let branch_projected = embs
        .iter()
        .enumerate()
        .map(|(k, e)| model.hvf.project_branch(k, e))
        .collect::<Result<Vec<_>>>()?;
    Ok(Encoded {
        zb,
        zf,
        targets: trials
            .iter()
            .map(|&i| col_of[&set.trial_stimulus[i]])
            .collect(),
        gallery: keep.iter().map(|&r| set.stimuli[r]).collect(),
        query_subject: trials
            .iter()
            .map(|&i| set.trial_subject[i].clone())
            .collect(),
        query_stimulus: trials
            .iter()
            .map(|&i| set.stimuli[set.trial_stimulus[i]])
            .collect(),
        mask,
        branch_projected,
    })
}

/// Builds a report from ranks; `held_out` names the subject excluded from training.
pub fn report_from_ranks(
    ck: &Checkpoint,
    enc: &Encoded,
    ranks: &[usize],
    held_out: Option<&str>,
    synthetic: bool,
    seed: u64,
) -> RetrievalReport {
    let mut subjects: Vec<String> = Vec::new();
    for s in &enc.query_subject {
        if !subjects.contains(s) {
            subjects.push(s.clone());
        }
    }
    let per_subject = subjects
        .into_iter()
        .map(|s| {
            let r: Vec<usize> = ranks
                .iter()
                .zip(&enc.query_subject)
                .filter(|(_, q)| **q == s)
                .map(|(r, _)| *r)
                .collect();
            SubjectRow {
                held_out: held_out == Some(s.as_str()),
                queries: r.len(),
                top1: top_k_percent(&r, 1),
                top5: top_k_percent(&r, 5),
                subject: s,
            }
        })
        .collect();
    let layout = ck.meta.signal.as_ref();
    RetrievalReport {
        k_way: enc.gallery.len(),
        num_queries: ranks.len(),
        top1: top_k_percent(ranks, 1),
        top5: top_k_percent(ranks, 5),
        per_subject,
        fingerprint: ReportFingerprint {
            config: ck.meta.fingerprint.clone(),
            mask: enc.mask.to_string(),
            branches: ck.meta.branch_ids.clone(),
            channels: ck.meta.config.preproc.channels.to_string(),
            window_ms: layout.map_or([0.0, 0.0], |l| l.window_ms),
            seed,
        },
        gallery: enc.gallery.clone(),
        caveat: synthetic.then(|| SYNTHETIC_CAVEAT.to_string()),
        wall_clock_s: 0.0,
        queries: enc
            .query_subject
            .iter()
            .zip(&enc.query_stimulus)
            .zip(ranks)
            .map(|((s, &st), &rank)| QueryResult {
                subject: s.clone(),
                stimulus: st,
                rank,
            })
            .collect(),
    }
}

/// Nearest-neighbor retrieval of test stimuli in the fused space.
pub fn evaluate_retrieval(
    ck: &Checkpoint,
    data: &Dataset,
    opts: &EvalOptions,
) -> Result<RetrievalReport> {
    let t0 = Instant::now();
    let model = ck.model(&ck.meta.dims)?;
    let enc = encode_test(ck, &model, data, opts)?;
    let sim = cosine_similarity(&enc.zb, &enc.zf)?;
    let ranks = rank_all(&sim, &enc.targets);
    let synthetic = data.bank.source.get("generator").map(String::as_str) == Some("synthetic");
    let mut report = report_from_ranks(
        ck,
        &enc,
        &ranks,
        ck.meta.config.holdout_subject.as_deref(),
        synthetic,
        opts.seed.unwrap_or(ck.seed),
    );
    report.wall_clock_s = t0.elapsed().as_secs_f64();
    Ok(report)
}
