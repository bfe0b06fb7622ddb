//! Closed-form ridge baseline used to calibrate synthetic noise levels.

use super::retrieval::{cosine_similarity, rank_all, top_k_percent};
use crate::databank::{Dataset, Partition, PreprocSpec};
use crate::error::{Error, Result};
use crate::ndgrad::{matmul_raw, Tensor};
use crate::trainer::PairedSet;

/// Solves `(XᵀX + λI) W = XᵀY` by Cholesky.
pub fn ridge_fit(x: &Tensor, y: &Tensor, lambda: f64) -> Result<Tensor> {
    let (n, p, q) = (x.rows(), x.cols(), y.cols());
    if y.rows() != n {
        return Err(Error::Shape(format!(
            "ridge: {n} inputs vs {} targets",
            y.rows()
        )));
    }
    let mut xt = vec![0.0; p * n];
    for i in 0..n {
        for (j, v) in x.row(i).iter().enumerate() {
            xt[j * n + i] = *v;
        }
    }
    let mut a = matmul_raw(&xt, x.data(), p, n, p);
    for j in 0..p {
        a[j * p + j] += lambda;
    }
    let mut b = matmul_raw(&xt, y.data(), p, n, q);
    // in-place lower Cholesky factor of `a`
    for j in 0..p {
        let mut d = a[j * p + j];
        for k in 0..j {
            d -= a[j * p + k] * a[j * p + k];
        }
        if d <= 0.0 {
            return Err(Error::Degenerate(
                "ridge system is not positive definite".into(),
            ));
        }
        let d = d.sqrt();
        a[j * p + j] = d;
        for i in j + 1..p {
            let mut s = a[i * p + j];
            for k in 0..j {
                s -= a[i * p + k] * a[j * p + k];
            }
            a[i * p + j] = s / d;
        }
    }
    for c in 0..q {
        for i in 0..p {
            let mut s = b[i * q + c];
            for k in 0..i {
                s -= a[i * p + k] * b[k * q + c];
            }
            b[i * q + c] = s / a[i * p + i];
        }
        for i in (0..p).rev() {
            let mut s = b[i * q + c];
            for k in i + 1..p {
                s -= a[k * p + i] * b[k * q + c];
            }
            b[i * q + c] = s / a[i * p + i];
        }
    }
    Tensor::matrix(p, q, b)
}

fn concat_cols(parts: &[Tensor]) -> Tensor {
    let n = parts[0].rows();
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            parts
                .iter()
                .flat_map(|t| t.row(i).iter().copied())
                .collect()
        })
        .collect();
    Tensor::from_rows(&rows)
}

/// Top-1 (%) of a linear baseline: ridge from brain signals to the concatenated
/// visual embeddings on the train split, then cosine nearest neighbour among the
/// test stimuli.
pub fn ridge_oracle_top1(data: &Dataset, spec: &PreprocSpec, lambda: f64) -> Result<f64> {
    let train = PairedSet::build(&data.bank, &data.recordings, spec, Partition::Train, |_| {
        true
    })?;
    let test = PairedSet::build(&data.bank, &data.recordings, spec, Partition::Test, |_| {
        true
    })?;
    let targets = concat_cols(&train.embeddings).select_rows(&train.trial_stimulus);
    let w = ridge_fit(&train.signals, &targets, lambda)?;
    let (n, p, q) = (test.num_trials(), w.rows(), w.cols());
    let pred = Tensor::matrix(n, q, matmul_raw(test.signals.data(), w.data(), n, p, q))?;
    let sim = cosine_similarity(&pred, &concat_cols(&test.embeddings))?;
    Ok(top_k_percent(&rank_all(&sim, &test.trial_stimulus), 1))
}
