//! Fusion prior: residual condition projector, a toy DDPM substrate and the
//! noise-prediction objective.
//!
//! The toy denoiser stands in for a frozen pretrained generator. Its
//! "backbone" (time embedding and output layer) is frozen during prior
//! pretraining; the "adapter" (the input layer over `[x_t, z_c]` and the
//! hidden layer) is trained together with the fuser and the projector.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::databank::{save_bank, BranchInfo, BranchKind, EmbeddingBank, Partition};
use crate::error::{Error, Result};
use crate::ndgrad::{Tape, Tensor, Var};
use crate::nn::{init_weight, mlp_forward, Mlp, Module};

pub const DEFAULT_PROJECTOR_HIDDEN: usize = 4096;
pub const TIME_FEATURES: usize = 32;
pub const DEFAULT_DENOISER_WIDTH: usize = 128;

/// `z_c = z + φ_c(z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorParams {
    pub mlp: Mlp,
}

impl ProjectorParams {
    pub fn init<R: Rng + ?Sized>(d: usize, d_c: usize, rng: &mut R) -> Self {
        ProjectorParams {
            mlp: Mlp::init(d, d_c, d, rng),
        }
    }

    pub fn zeros(d: usize, d_c: usize) -> Self {
        ProjectorParams {
            mlp: Mlp::zeros(d, d_c, d),
        }
    }

    pub fn dim(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.mlp.hidden_dim()
    }

    pub fn project_on(&self, tape: &mut Tape, vars: &[Var], z: Var) -> Result<Var> {
        let width = tape.value(z).cols();
        if tape.value(z).shape().len() != 2 || width != self.dim() {
            return Err(Error::Shape(format!(
                "projector: input {:?}, expected n×{}",
                tape.value(z).shape(),
                self.dim()
            )));
        }
        let m = mlp_forward(tape, vars, z)?;
        tape.add(z, m)
    }

    /// Applies the projector to fused or brain embeddings.
    pub fn project(&self, z: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(z.clone());
        let out = self.project_on(&mut tape, &vars, x)?;
        Ok(tape.value(out).clone())
    }
}

impl Module for ProjectorParams {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.mlp.named("phi_c")
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.mlp.named_mut("phi_c")
    }
}

/// Noise schedule indexed by `t ∈ [1, num_steps]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub betas: Vec<f64>,
    /// `ᾱ_t = Π_{s ≤ t} (1 − β_s)`, stored at index `t − 1`.
    pub alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::Config(
                "betas must be non-empty and inside (0, 1)".into(),
            ));
        }
        let mut acc = 1.0;
        let alpha_bar = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(DiffusionSchedule { betas, alpha_bar })
    }

    /// `β` linear from `start` to `end` over `steps`.
    pub fn linear(start: f64, end: f64, steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Config(
                "a linear schedule needs at least 2 steps".into(),
            ));
        }
        let betas = (0..steps)
            .map(|i| start + (end - start) * i as f64 / (steps - 1) as f64)
            .collect();
        DiffusionSchedule::from_betas(betas)
    }

    /// Keeps `steps` evenly spaced timesteps (the last one included) and
    /// rederives `β'_i = 1 − ᾱ'_i / ᾱ'_{i−1}` so the kept `ᾱ` are unchanged.
    pub fn respaced(&self, steps: usize) -> Result<Self> {
        let total = self.num_steps();
        if steps == 0 || steps > total {
            return Err(Error::Config(format!(
                "cannot respace {total} steps to {steps}"
            )));
        }
        let kept: Vec<f64> = (0..steps)
            .map(|i| self.alpha_bar[(i + 1) * total / steps - 1])
            .collect();
        let mut prev = 1.0;
        let betas = kept
            .iter()
            .map(|&a| {
                let b = 1.0 - a / prev;
                prev = a;
                b
            })
            .collect();
        DiffusionSchedule::from_betas(betas)
    }

    /// 1000-step linear `β ∈ [1e-4, 2e-2]` respaced to 50 steps.
    pub fn desk() -> Self {
        DiffusionSchedule::linear(1e-4, 2e-2, 1000)
            .and_then(|s| s.respaced(50))
            .expect("valid default schedule")
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn alpha_bar_at(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.num_steps() {
            return Err(Error::Contract(format!(
                "timestep {t} outside [1, {}]",
                self.num_steps()
            )));
        }
        Ok(self.alpha_bar[t - 1])
    }
}

/// `√ᾱ · x0 + √(1 − ᾱ) · eps` for an explicit `ᾱ ∈ [0, 1]`.
pub fn add_noise_with(alpha_bar: f64, x0: &Tensor, eps: &Tensor) -> Result<Tensor> {
    if x0.shape() != eps.shape() {
        return Err(Error::Shape(format!(
            "add_noise: x0 {:?} vs eps {:?}",
            x0.shape(),
            eps.shape()
        )));
    }
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(x, e)| a * x + b * e)
        .collect();
    Tensor::new(x0.shape().to_vec(), data)
}

pub fn add_noise(
    schedule: &DiffusionSchedule,
    x0: &Tensor,
    t: usize,
    eps: &Tensor,
) -> Result<Tensor> {
    add_noise_with(schedule.alpha_bar_at(t)?, x0, eps)
}

/// Sinusoidal features `[sin(t·f_i), cos(t·f_i)]` with `f_i = 10000^(−i/(D/2))`.
pub fn time_features(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (t as f64 * f).sin();
        out[half + i] = (t as f64 * f).cos();
    }
    out
}

/// Timesteps and Gaussian noise for one batch, drawn from stream `counter` of `seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub timesteps: Vec<usize>,
    pub eps: Tensor,
}

impl NoiseDraw {
    pub fn sample(seed: u64, counter: u64, n: usize, dim: usize, num_steps: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(counter);
        let timesteps = (0..n).map(|_| rng.random_range(1..=num_steps)).collect();
        let eps = Tensor::randn(&[n, dim], 1.0, &mut rng);
        NoiseDraw { timesteps, eps }
    }
}

/// Two-hidden-layer conditional noise predictor.
///
/// `h1 = gelu([x_t, z_c]·W_in + b_in + φ(t)·W_t + b_t)`,
/// `h2 = gelu(h1·W_h + b_h)`, `ε̂ = h2·W_out + b_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDenoiser {
    pub in_w: Tensor,
    pub in_b: Tensor,
    pub hid_w: Tensor,
    pub hid_b: Tensor,
    pub time_w: Tensor,
    pub time_b: Tensor,
    pub out_w: Tensor,
    pub out_b: Tensor,
}

/// Name prefix of the tensors frozen during prior pretraining.
pub const BACKBONE_PREFIX: &str = "backbone.";

impl ToyDenoiser {
    pub fn init<R: Rng + ?Sized>(x_dim: usize, cond_dim: usize, width: usize, rng: &mut R) -> Self {
        let fan = (x_dim + cond_dim) as f64;
        ToyDenoiser {
            in_w: init_weight(x_dim + cond_dim, width, rng),
            in_b: Tensor::uniform(&[width], 1.0 / fan.sqrt(), rng),
            hid_w: init_weight(width, width, rng),
            hid_b: Tensor::uniform(&[width], 1.0 / (width as f64).sqrt(), rng),
            time_w: init_weight(TIME_FEATURES, width, rng),
            time_b: Tensor::uniform(&[width], 1.0 / (TIME_FEATURES as f64).sqrt(), rng),
            out_w: init_weight(width, x_dim, rng),
            out_b: Tensor::zeros(&[x_dim]),
        }
    }

    pub fn x_dim(&self) -> usize {
        self.out_w.cols()
    }

    pub fn cond_dim(&self) -> usize {
        self.in_w.rows() - self.x_dim()
    }

    pub fn width(&self) -> usize {
        self.hid_w.rows()
    }

    /// `vars` bound in [`Module::named_tensors`] order.
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        x_t: Var,
        tfeat: Var,
        cond: Var,
    ) -> Result<Var> {
        let [in_w, in_b, hid_w, hid_b, time_w, time_b, out_w, out_b] = *vars else {
            return Err(Error::Shape(format!(
                "denoiser expects 8 bound tensors, got {}",
                vars.len()
            )));
        };
        let (xs, cs) = (
            tape.value(x_t).shape().to_vec(),
            tape.value(cond).shape().to_vec(),
        );
        if xs.len() != 2
            || xs[1] != self.x_dim()
            || cs.len() != 2
            || cs[1] != self.cond_dim()
            || xs[0] != cs[0]
        {
            return Err(Error::Shape(format!(
                "denoiser: x_t {xs:?} and condition {cs:?}, expected n×{} and n×{}",
                self.x_dim(),
                self.cond_dim()
            )));
        }
        let inp = tape.concat_cols(&[x_t, cond])?;
        let h = tape.matmul(inp, in_w)?;
        let h = tape.add_row(h, in_b)?;
        let te = tape.matmul(tfeat, time_w)?;
        let te = tape.add_row(te, time_b)?;
        let h = tape.add(h, te)?;
        let h = tape.gelu(h)?;
        let h = tape.matmul(h, hid_w)?;
        let h = tape.add_row(h, hid_b)?;
        let h = tape.gelu(h)?;
        let o = tape.matmul(h, out_w)?;
        tape.add_row(o, out_b)
    }
}

impl Module for ToyDenoiser {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("adapter.in_w".into(), &self.in_w),
            ("adapter.in_b".into(), &self.in_b),
            ("adapter.hid_w".into(), &self.hid_w),
            ("adapter.hid_b".into(), &self.hid_b),
            ("backbone.time_w".into(), &self.time_w),
            ("backbone.time_b".into(), &self.time_b),
            ("backbone.out_w".into(), &self.out_w),
            ("backbone.out_b".into(), &self.out_b),
        ]
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("adapter.in_w".into(), &mut self.in_w),
            ("adapter.in_b".into(), &mut self.in_b),
            ("adapter.hid_w".into(), &mut self.hid_w),
            ("adapter.hid_b".into(), &mut self.hid_b),
            ("backbone.time_w".into(), &mut self.time_w),
            ("backbone.time_b".into(), &mut self.time_b),
            ("backbone.out_w".into(), &mut self.out_w),
            ("backbone.out_b".into(), &mut self.out_b),
        ]
    }
}

/// Noisy inputs and time features for a batch (both constants on the tape).
pub fn noisy_inputs(
    schedule: &DiffusionSchedule,
    x0: &Tensor,
    draw: &NoiseDraw,
) -> Result<(Tensor, Tensor)> {
    let n = x0.rows();
    if draw.timesteps.len() != n || draw.eps.shape() != x0.shape() {
        return Err(Error::Shape(format!(
            "noise draw for {} rows of {:?}, batch is {:?}",
            draw.timesteps.len(),
            draw.eps.shape(),
            x0.shape()
        )));
    }
    let dim = x0.cols();
    let mut xt = Vec::with_capacity(n * dim);
    let mut tf = Vec::with_capacity(n * TIME_FEATURES);
    for (i, &t) in draw.timesteps.iter().enumerate() {
        let ab = schedule.alpha_bar_at(t)?;
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        xt.extend(
            x0.row(i)
                .iter()
                .zip(draw.eps.row(i))
                .map(|(x, e)| a * x + b * e),
        );
        tf.extend(time_features(t, TIME_FEATURES));
    }
    Ok((
        Tensor::matrix(n, dim, xt)?,
        Tensor::matrix(n, TIME_FEATURES, tf)?,
    ))
}

/// `mean_i ‖ε_i − δ(x_t, t, z_c)_i‖²` with `cond` already on the tape.
pub fn prior_loss_on(
    tape: &mut Tape,
    denoiser: &ToyDenoiser,
    vars: &[Var],
    schedule: &DiffusionSchedule,
    x0: &Tensor,
    cond: Var,
    draw: &NoiseDraw,
) -> Result<Var> {
    let (xt, tf) = noisy_inputs(schedule, x0, draw)?;
    let (xt, tf) = (tape.constant(xt), tape.constant(tf));
    let eps_hat = denoiser.forward_on(tape, vars, xt, tf, cond)?;
    let eps = tape.constant(draw.eps.clone());
    let diff = tape.sub(eps, eps_hat)?;
    let ss = tape.sum_squares(diff)?;
    tape.scale(ss, 1.0 / x0.rows() as f64)
}

/// Gradient-free prior loss for given conditions.
pub fn prior_loss(
    denoiser: &ToyDenoiser,
    schedule: &DiffusionSchedule,
    x0: &Tensor,
    z_c: &Tensor,
    draw: &NoiseDraw,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = denoiser.bind(&mut tape, false);
    let c = tape.constant(z_c.clone());
    let l = prior_loss_on(&mut tape, denoiser, &vars, schedule, x0, c, draw)?;
    Ok(tape.value(l).item())
}

/// Writes `z_c = project(zb)` as a single-branch bank tagged with `stage`.
pub fn export_conditions(
    zb: &Tensor,
    projector: &ProjectorParams,
    dir: impl AsRef<Path>,
    stage: &str,
) -> Result<EmbeddingBank> {
    let zc = projector.project(zb)?;
    let n = zc.rows();
    let mut source = BTreeMap::new();
    source.insert("content".to_string(), "condition z_c".to_string());
    source.insert("stage".to_string(), stage.to_string());
    let bank = EmbeddingBank {
        num_stimuli: n,
        branches: vec![BranchInfo {
            branch_id: "z_c".into(),
            name: "condition".into(),
            dim: zc.cols(),
            kind: BranchKind::Semantic,
            pixel_hw: None,
        }],
        concept_labels: (0..n as u32).collect(),
        partitions: vec![Partition::Test; n],
        source,
        payload: vec![zc.data().iter().map(|&v| v as f32).collect()],
    };
    save_bank(&bank, dir)?;
    Ok(bank)
}
