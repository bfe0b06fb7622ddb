//! Temperature-scaled cosine logits and the symmetric InfoNCE objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::{Tape, Tensor, Var};
use crate::nn::Module;

pub const INITIAL_TAU: f64 = 0.07;
pub const DEFAULT_TAU_MIN: f64 = 0.01;

/// Trainable temperature stored as `log τ`, so `τ > 0` always holds.
#[derive(Debug, Clone, PartialEq)]
pub struct TemperatureParam {
    pub log_tau: Tensor,
}

impl Default for TemperatureParam {
    fn default() -> Self {
        TemperatureParam::new(INITIAL_TAU)
    }
}

impl TemperatureParam {
    pub fn new(tau: f64) -> Self {
        assert!(tau > 0.0, "temperature must be positive");
        TemperatureParam {
            log_tau: Tensor::scalar(tau.ln()),
        }
    }

    pub fn tau(&self) -> f64 {
        self.log_tau.item().exp()
    }

    /// Projects `τ` back to `τ ≥ tau_min` after an optimizer step.
    pub fn clamp_min(&mut self, tau_min: f64) {
        let floor = tau_min.ln();
        if self.log_tau.item() < floor {
            self.log_tau.data_mut()[0] = floor;
        }
    }
}

impl Module for TemperatureParam {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        vec![("log_tau".into(), &self.log_tau)]
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![("log_tau".into(), &mut self.log_tau)]
    }
}

/// Cosine-logit matrix between brain rows (queries) and fused rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub rows: usize,
    pub cols: usize,
    /// Row-major `s_ij = ⟨ẑ_b^(i), ẑ_f^(j)⟩ / τ`.
    pub logits: Vec<f64>,
    pub tau: f64,
    /// Free-form provenance (mask, window, channel set).
    pub provenance: Vec<String>,
}

impl SimilarityMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.logits[i * self.cols + j]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(self.rows, self.cols, self.logits.clone()).expect("finite logits")
    }
}

/// Builds `s = l2n(zb) · l2n(zf)ᵀ · exp(−log τ)` on the tape.
pub fn similarity_on(tape: &mut Tape, zb: Var, zf: Var, log_tau: Var) -> Result<Var> {
    let (b, f) = (tape.value(zb), tape.value(zf));
    if b.shape().len() != 2 || b.shape() != f.shape() {
        return Err(Error::Shape(format!(
            "similarity: brain {:?} and fused {:?} must be equal N×d matrices",
            b.shape(),
            f.shape()
        )));
    }
    let nb = tape.l2_normalize(zb)?;
    let nf = tape.l2_normalize(zf)?;
    let nft = tape.transpose(nf)?;
    let cos = tape.matmul(nb, nft)?;
    let neg = tape.scale(log_tau, -1.0)?;
    let inv_tau = tape.exp(neg)?;
    tape.mul_scalar(cos, inv_tau)
}

/// Gradient-free similarity matrix.
pub fn similarity(zb: &Tensor, zf: &Tensor, temp: &TemperatureParam) -> Result<SimilarityMatrix> {
    let mut tape = Tape::new();
    let (b, f) = (tape.constant(zb.clone()), tape.constant(zf.clone()));
    let lt = tape.constant(temp.log_tau.clone());
    let s = similarity_on(&mut tape, b, f, lt)?;
    let v = tape.value(s);
    Ok(SimilarityMatrix {
        rows: v.shape()[0],
        cols: v.shape()[1],
        logits: v.data().to_vec(),
        tau: temp.tau(),
        provenance: Vec::new(),
    })
}

pub fn infonce_on(tape: &mut Tape, logits: Var) -> Result<Var> {
    tape.infonce(logits)
}

pub fn infonce_loss(sim: &SimilarityMatrix) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(
        Tensor::matrix(sim.rows, sim.cols, sim.logits.clone())
            .map_err(|_| Error::Shape("infonce: logits must be a non-empty matrix".into()))?,
    );
    let out = tape.infonce(l)?;
    Ok(tape.value(out).item())
}

/// Complete contrastive loss for paired `[N×d]` batches.
pub fn contrastive_loss_on(tape: &mut Tape, zb: Var, zf: Var, log_tau: Var) -> Result<Var> {
    let s = similarity_on(tape, zb, zf, log_tau)?;
    tape.infonce(s)
}
