//! Brain-side encoders.
//!
//! [`BrainBackbone`] is the seam the alignment trainer depends on; any
//! encoder mapping a flattened `C×T` signal to the shared width can be
//! plugged in. [`MbpParams`] is the shipped implementation: a linear
//! projection of the flattened signal followed by the same post-norm
//! residual block used on the visual side.

use rand::Rng;

use crate::error::{Error, Result};
use crate::ndgrad::{Tape, Tensor, Var};
use crate::nn::{init_weight, residual_norm_forward, Mlp, Module};

pub const DEFAULT_BRAIN_HIDDEN: usize = 1024;

/// An encoder from brain signals to the shared embedding space.
///
/// Inputs on the tape are `[n × (C·T)]`, flattened channel-major (channel 0's
/// `T` samples first).
pub trait BrainBackbone: Module {
    fn name(&self) -> &str;

    /// Length of one flattened input signal, `C·T`.
    fn input_len(&self) -> usize;

    fn output_dim(&self) -> usize;

    /// `vars` are this backbone's tensors bound in [`Module::named_tensors`] order.
    fn forward_on(&self, tape: &mut Tape, vars: &[Var], signals: Var) -> Result<Var>;

    /// Gradient-free encode of `[n × C × T]` or `[n × C·T]` signals.
    fn encode(&self, signals: &Tensor) -> Result<Tensor> {
        let flat = flatten_signals(signals, self.input_len())?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(flat);
        let out = self.forward_on(&mut tape, &vars, x)?;
        Ok(tape.value(out).clone())
    }
}

/// Reshapes `[n × C × T]` (or already-flat `[n × C·T]`) into `[n × C·T]`.
pub fn flatten_signals(signals: &Tensor, expected_len: usize) -> Result<Tensor> {
    let n = signals.shape()[0];
    let got: usize = signals.shape()[1..].iter().product();
    if signals.shape().len() < 2 || got != expected_len {
        return Err(Error::Shape(format!(
            "brain signal length C·T: expected {expected_len}, got {got} (shape {:?})",
            signals.shape()
        )));
    }
    signals.reshape(&[n, got])
}

#[derive(Debug, Clone, PartialEq)]
pub struct MbpParams {
    pub w_b: Tensor,
    pub proj_mlp: Mlp,
    pub ln_gamma: Tensor,
    pub ln_beta: Tensor,
}

impl MbpParams {
    pub fn init<R: Rng + ?Sized>(input_len: usize, d: usize, d_b: usize, rng: &mut R) -> Self {
        MbpParams {
            w_b: init_weight(input_len, d, rng),
            proj_mlp: Mlp::init(d, d_b, d, rng),
            ln_gamma: Tensor::filled(&[d], 1.0),
            ln_beta: Tensor::zeros(&[d]),
        }
    }

    pub fn zeros(input_len: usize, d: usize, d_b: usize) -> Self {
        MbpParams {
            w_b: Tensor::zeros(&[input_len, d]),
            proj_mlp: Mlp::zeros(d, d_b, d),
            ln_gamma: Tensor::filled(&[d], 1.0),
            ln_beta: Tensor::zeros(&[d]),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.proj_mlp.hidden_dim()
    }
}

impl Module for MbpParams {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("w_b".to_string(), &self.w_b)];
        out.extend(self.proj_mlp.named("proj_mlp"));
        out.push(("ln.gamma".into(), &self.ln_gamma));
        out.push(("ln.beta".into(), &self.ln_beta));
        out
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![("w_b".to_string(), &mut self.w_b)];
        out.extend(self.proj_mlp.named_mut("proj_mlp"));
        out.push(("ln.gamma".into(), &mut self.ln_gamma));
        out.push(("ln.beta".into(), &mut self.ln_beta));
        out
    }
}

impl BrainBackbone for MbpParams {
    fn name(&self) -> &str {
        "mbp"
    }

    fn input_len(&self) -> usize {
        self.w_b.shape()[0]
    }

    fn output_dim(&self) -> usize {
        self.w_b.shape()[1]
    }

    fn forward_on(&self, tape: &mut Tape, vars: &[Var], signals: Var) -> Result<Var> {
        let Some((&w_b, block)) = vars.split_first() else {
            return Err(Error::Shape("mbp: no bound tensors".into()));
        };
        let got = tape.value(signals).cols();
        if got != self.input_len() {
            return Err(Error::Shape(format!(
                "mbp: flattened signal length expected {}, got {got}",
                self.input_len()
            )));
        }
        let zbar = tape.matmul(signals, w_b)?;
        residual_norm_forward(tape, block, zbar)
    }
}
