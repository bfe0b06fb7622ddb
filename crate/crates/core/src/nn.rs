//! Parameter containers and the layer shapes shared by the encoders.

use rand::Rng;

use crate::error::{Error, Result};
use crate::ndgrad::{Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-8;

/// A named, ordered collection of trainable tensors.
///
/// `named_tensors` and `named_tensors_mut` must yield the same names in the
/// same order; bound variables from [`Module::bind`] follow that order too.
pub trait Module {
    fn named_tensors(&self) -> Vec<(String, &Tensor)>;
    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.named_tensors()
            .into_iter()
            .map(|(_, t)| tape.leaf(t.clone(), trainable))
            .collect()
    }

    fn num_parameters(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    fn checksum(&self) -> u64 {
        self.named_tensors().iter().fold(0u64, |h, (name, t)| {
            let mut x = h.rotate_left(7) ^ t.checksum();
            for b in name.bytes() {
                x = x.wrapping_mul(31).wrapping_add(u64::from(b));
            }
            x
        })
    }

    /// Copies tensors from a checkpoint section, requiring exact name and shape agreement.
    fn assign_from(&mut self, section: &str, tensors: &[(String, Tensor)]) -> Result<()> {
        for (name, slot) in self.named_tensors_mut() {
            let (_, src) =
                tensors
                    .iter()
                    .find(|(n, _)| *n == name)
                    .ok_or_else(|| Error::CheckpointShape {
                        section: section.to_string(),
                        reason: format!("missing tensor `{name}`"),
                    })?;
            if src.shape() != slot.shape() {
                return Err(Error::CheckpointShape {
                    section: section.to_string(),
                    reason: format!(
                        "tensor `{name}` has shape {:?}, expected {:?}",
                        src.shape(),
                        slot.shape()
                    ),
                });
            }
            *slot = src.clone();
        }
        Ok(())
    }

    fn to_section(&self) -> Vec<(String, Tensor)> {
        self.named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect()
    }
}

/// `uniform(−1/√fan_in, 1/√fan_in)` weight matrix.
pub fn init_weight<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    Tensor::uniform(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng)
}

/// Two-layer perceptron `gelu(x·W1 + b1)·W2 + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl Mlp {
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        Mlp {
            w1: init_weight(input, hidden, rng),
            b1: Tensor::uniform(&[hidden], 1.0 / (input as f64).sqrt(), rng),
            w2: init_weight(hidden, output, rng),
            b2: Tensor::uniform(&[output], 1.0 / (hidden as f64).sqrt(), rng),
        }
    }

    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Mlp {
            w1: Tensor::zeros(&[input, hidden]),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[hidden, output]),
            b2: Tensor::zeros(&[output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.w2.shape()[1]
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        vec![
            (format!("{prefix}.w1"), &self.w1),
            (format!("{prefix}.b1"), &self.b1),
            (format!("{prefix}.w2"), &self.w2),
            (format!("{prefix}.b2"), &self.b2),
        ]
    }

    pub fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        vec![
            (format!("{prefix}.w1"), &mut self.w1),
            (format!("{prefix}.b1"), &mut self.b1),
            (format!("{prefix}.w2"), &mut self.w2),
            (format!("{prefix}.b2"), &mut self.b2),
        ]
    }
}

/// Applies a bound MLP; `vars` is `[w1, b1, w2, b2]`.
pub fn mlp_forward(tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
    let [w1, b1, w2, b2] = *vars else {
        return Err(Error::Shape(format!(
            "mlp expects 4 bound tensors, got {}",
            vars.len()
        )));
    };
    let h = tape.matmul(x, w1)?;
    let h = tape.add_row(h, b1)?;
    let h = tape.gelu(h)?;
    let o = tape.matmul(h, w2)?;
    tape.add_row(o, b2)
}

/// Post-norm residual block `LayerNorm(x + mlp(x))`; `vars` is `[w1, b1, w2, b2, gamma, beta]`.
pub fn residual_norm_forward(tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
    let [w1, b1, w2, b2, gamma, beta] = *vars else {
        return Err(Error::Shape(format!(
            "residual block expects 6 bound tensors, got {}",
            vars.len()
        )));
    };
    let m = mlp_forward(tape, &[w1, b1, w2, b2], x)?;
    let s = tape.add(x, m)?;
    tape.layer_norm(s, gamma, beta, LAYER_NORM_EPS)
}
