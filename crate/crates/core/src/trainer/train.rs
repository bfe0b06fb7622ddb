//! Training loops for both stages and plain retrieval alignment.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{Checkpoint, CheckpointMeta};
use super::config::{Group, RunConfig, Stage};
use super::data::PairedSet;
use super::model::{Model, ModelDims};
use crate::align::{contrastive_loss_on, TemperatureParam};
use crate::brainproj::BrainBackbone;
use crate::databank::{Dataset, EmbeddingBank, Partition};
use crate::error::{Error, Result};
use crate::fusion::{BranchMask, HvfParams};
use crate::ndgrad::{set_parallelism, Gradients, Tape, Tensor, Var};
use crate::nn::Module;
use crate::optim::{AdamWState, LrSchedule, ParamUpdate};
use crate::prior::{
    prior_loss_on, DiffusionSchedule, NoiseDraw, ProjectorParams, ToyDenoiser, BACKBONE_PREFIX,
};

/// Stream offset for per-epoch shuffles.
const SHUFFLE_STREAM: u64 = 1 << 20;
/// Stream offset for per-step diffusion noise.
pub const NOISE_STREAM: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossTrace {
    pub rows: Vec<TraceRow>,
    pub steps_per_epoch: usize,
}

impl LossTrace {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Mean loss of each epoch, in order.
    pub fn epoch_means(&self) -> Vec<f64> {
        self.rows
            .chunks(self.steps_per_epoch.max(1))
            .map(|c| c.iter().map(|r| r.loss).sum::<f64>() / c.len() as f64)
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,lr,loss\n");
        for r in &self.rows {
            out.push_str(&format!("{},{:e},{:e}\n", r.step, r.lr, r.loss));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes())
            .map_err(|e| Error::io(path, e))
    }
}

/// Batch plan shared by both loops.
#[derive(Debug, Clone, Copy)]
pub struct Plan {
    pub batch: usize,
    pub steps_per_epoch: usize,
    pub total_steps: usize,
}

impl Plan {
    pub fn new(n: usize, cfg: &RunConfig) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptyGroup("training set is empty".into()));
        }
        let batch = cfg.batch_size.min(n);
        let steps_per_epoch = if cfg.drop_last {
            n / batch
        } else {
            n.div_ceil(batch)
        };
        Ok(Plan {
            batch,
            steps_per_epoch,
            total_steps: steps_per_epoch * cfg.epochs,
        })
    }

    pub fn schedule(&self, cfg: &RunConfig) -> Result<LrSchedule> {
        let warmup = cfg.warmup_steps.min(self.total_steps.saturating_sub(1));
        LrSchedule::new(cfg.peak_lr, warmup, self.total_steps.max(1))
    }
}

/// Seeded permutation of `0..n` for `epoch`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SHUFFLE_STREAM + epoch as u64);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

fn batch_indices(seed: u64, plan: &Plan, n: usize, step: usize) -> Vec<usize> {
    let epoch = step / plan.steps_per_epoch;
    let b = step % plan.steps_per_epoch;
    let order = epoch_order(seed, epoch, n);
    order[b * plan.batch..((b + 1) * plan.batch).min(n)].to_vec()
}

fn diverged(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(_) | Error::PoisonedGradient(_) => Error::Diverged { step },
        other => other,
    }
}

struct Pending<'a> {
    name: String,
    slot: &'a mut Tensor,
    grad: Tensor,
    decay: bool,
}

/// Queues gradients for the tensors of `module` whose group (by name) is trainable.
fn collect<'a, M: Module + ?Sized>(
    out: &mut Vec<Pending<'a>>,
    module: &'a mut M,
    vars: &[Var],
    grads: &Gradients,
    group_of: impl Fn(&str) -> Group,
    trainable: &std::collections::BTreeSet<Group>,
) {
    for ((name, slot), &v) in module.named_tensors_mut().into_iter().zip(vars) {
        let g = group_of(&name);
        if trainable.contains(&g) {
            let grad = grads.get_or_zeros(v, slot.shape());
            out.push(Pending {
                name: format!("{}/{name}", g.as_str()),
                slot,
                grad,
                decay: g != Group::Temp,
            });
        }
    }
}

fn apply(optim: &mut AdamWState, pending: &mut [Pending<'_>], lr: f64) -> Result<()> {
    let mut ups: Vec<ParamUpdate<'_>> = pending
        .iter_mut()
        .map(|p| ParamUpdate {
            name: &p.name,
            value: &mut *p.slot,
            grad: &p.grad,
            decay: p.decay,
        })
        .collect();
    optim.step(&mut ups, lr)
}

fn checksums(model_parts: &[(Group, u64)]) -> BTreeMap<Group, u64> {
    model_parts.iter().copied().collect()
}

fn verify(before: &BTreeMap<Group, u64>, now: &BTreeMap<Group, u64>) -> Result<()> {
    for (g, h) in before {
        if now.get(g) != Some(h) {
            return Err(Error::FrozenMutated(g.as_str().into()));
        }
    }
    Ok(())
}

fn align_checksums<B: BrainBackbone>(
    hvf: &HvfParams,
    brain: &B,
    temp: &TemperatureParam,
    frozen: &std::collections::BTreeSet<Group>,
) -> BTreeMap<Group, u64> {
    let mut parts = Vec::new();
    for &g in frozen {
        match g {
            Group::Hvf => parts.push((g, hvf.checksum())),
            Group::Brain => parts.push((g, brain.checksum())),
            Group::Temp => parts.push((g, temp.checksum())),
            _ => {}
        }
    }
    checksums(&parts)
}

/// Contrastive alignment of any brain backbone against the fuser.
///
/// Runs steps `start_step..` of the plan; a frozen fuser's outputs are
/// computed once up front. Frozen groups are checksummed every epoch.
pub fn fit_alignment<B: BrainBackbone>(
    hvf: &mut HvfParams,
    brain: &mut B,
    temp: &mut TemperatureParam,
    data: &PairedSet,
    cfg: &RunConfig,
    optim: &mut AdamWState,
    start_step: usize,
) -> Result<LossTrace> {
    if brain.output_dim() != hvf.shared_dim() {
        return Err(Error::Shape(format!(
            "brain backbone `{}` outputs {} dims, fuser {}",
            brain.name(),
            brain.output_dim(),
            hvf.shared_dim()
        )));
    }
    let n = data.num_trials();
    let plan = Plan::new(n, cfg)?;
    let schedule = plan.schedule(cfg)?;
    let trainable = cfg.trainable();
    let frozen = cfg.frozen();
    let full = BranchMask::all(hvf.num_branches());
    let zf_table = if trainable.contains(&Group::Hvf) {
        None
    } else {
        Some(hvf.forward(&data.embeddings, &full)?)
    };
    let before = align_checksums(hvf, brain, temp, &frozen);
    let mut trace = LossTrace {
        rows: Vec::new(),
        steps_per_epoch: plan.steps_per_epoch,
    };
    for step in start_step..plan.total_steps {
        let idx = batch_indices(cfg.seed, &plan, n, step);
        let stim: Vec<usize> = idx.iter().map(|&i| data.trial_stimulus[i]).collect();
        let mut tape = Tape::new();
        let hv = hvf.bind(&mut tape, trainable.contains(&Group::Hvf));
        let bv = brain.bind(&mut tape, trainable.contains(&Group::Brain));
        let tv = temp.bind(&mut tape, trainable.contains(&Group::Temp));
        let zf = match &zf_table {
            Some(t) => tape.constant(t.select_rows(&stim)),
            None => {
                let embs: Vec<Var> = data
                    .embeddings
                    .iter()
                    .map(|e| tape.constant(e.select_rows(&stim)))
                    .collect();
                hvf.forward_on(&mut tape, &hv, &embs, &full)
                    .map_err(diverged(step))?
            }
        };
        let x = tape.constant(data.signals.select_rows(&idx));
        let zb = brain
            .forward_on(&mut tape, &bv, x)
            .map_err(diverged(step))?;
        let loss = contrastive_loss_on(&mut tape, zb, zf, tv[0]).map_err(diverged(step))?;
        let value = tape.value(loss).item();
        let grads = tape.backward(loss).map_err(diverged(step))?;
        let lr = schedule.lr_at(step)?;
        let mut pending = Vec::new();
        collect(&mut pending, hvf, &hv, &grads, |_| Group::Hvf, &trainable);
        collect(
            &mut pending,
            brain,
            &bv,
            &grads,
            |_| Group::Brain,
            &trainable,
        );
        collect(&mut pending, temp, &tv, &grads, |_| Group::Temp, &trainable);
        apply(optim, &mut pending, lr).map_err(diverged(step))?;
        drop(pending);
        if trainable.contains(&Group::Temp) {
            temp.clamp_min(cfg.tau_min);
        }
        trace.rows.push(TraceRow {
            step: step as u64,
            lr,
            loss: value,
        });
        if (step + 1) % plan.steps_per_epoch == 0 {
            verify(&before, &align_checksums(hvf, brain, temp, &frozen))?;
            log::debug!(
                "epoch {} loss {value:.5}",
                (step + 1) / plan.steps_per_epoch
            );
        }
    }
    verify(&before, &align_checksums(hvf, brain, temp, &frozen))?;
    Ok(trace)
}

pub fn diffusion_schedule(cfg: &RunConfig) -> Result<DiffusionSchedule> {
    let d = &cfg.diffusion;
    DiffusionSchedule::linear(d.beta_start, d.beta_end, d.train_steps)?.respaced(d.respaced_steps)
}

fn prior_checksums(
    hvf: &HvfParams,
    projector: &ProjectorParams,
    denoiser: &ToyDenoiser,
    frozen: &std::collections::BTreeSet<Group>,
) -> BTreeMap<Group, u64> {
    let mut parts = Vec::new();
    for &g in frozen {
        match g {
            Group::Hvf => parts.push((g, hvf.checksum())),
            Group::Projector => parts.push((g, projector.checksum())),
            Group::DenoiserAdapter | Group::DenoiserBackbone => {
                let backbone = g == Group::DenoiserBackbone;
                let sum = denoiser
                    .named_tensors()
                    .iter()
                    .filter(|(n, _)| n.starts_with(BACKBONE_PREFIX) == backbone)
                    .fold(0u64, |h, (_, t)| h.rotate_left(5) ^ t.checksum());
                parts.push((g, sum));
            }
            _ => {}
        }
    }
    checksums(&parts)
}

fn denoiser_group(name: &str) -> Group {
    if name.starts_with(BACKBONE_PREFIX) {
        Group::DenoiserBackbone
    } else {
        Group::DenoiserAdapter
    }
}

/// Noise-prediction training of fuser, projector and denoiser adapter.
///
/// `embeddings` are the branch rows of the training stimuli and `x0` the
/// diffusion target rows (the pixel-latent branch).
#[allow(clippy::too_many_arguments)]
pub fn fit_prior(
    hvf: &mut HvfParams,
    projector: &mut ProjectorParams,
    denoiser: &mut ToyDenoiser,
    embeddings: &[Tensor],
    x0: &Tensor,
    cfg: &RunConfig,
    optim: &mut AdamWState,
    start_step: usize,
) -> Result<LossTrace> {
    let n = x0.rows();
    let plan = Plan::new(n, cfg)?;
    let schedule = plan.schedule(cfg)?;
    let diffusion = diffusion_schedule(cfg)?;
    let trainable = cfg.trainable();
    let frozen = cfg.frozen();
    let full = BranchMask::all(hvf.num_branches());
    let before = prior_checksums(hvf, projector, denoiser, &frozen);
    let mut trace = LossTrace {
        rows: Vec::new(),
        steps_per_epoch: plan.steps_per_epoch,
    };
    for step in start_step..plan.total_steps {
        let idx = batch_indices(cfg.seed, &plan, n, step);
        let draw = NoiseDraw::sample(
            cfg.seed,
            NOISE_STREAM + step as u64,
            idx.len(),
            x0.cols(),
            diffusion.num_steps(),
        );
        let mut tape = Tape::new();
        let hv = hvf.bind(&mut tape, trainable.contains(&Group::Hvf));
        let pv = projector.bind(&mut tape, trainable.contains(&Group::Projector));
        let dv: Vec<Var> = denoiser
            .named_tensors()
            .into_iter()
            .map(|(name, t)| tape.leaf(t.clone(), trainable.contains(&denoiser_group(&name))))
            .collect();
        let embs: Vec<Var> = embeddings
            .iter()
            .map(|e| tape.constant(e.select_rows(&idx)))
            .collect();
        let zf = hvf
            .forward_on(&mut tape, &hv, &embs, &full)
            .map_err(diverged(step))?;
        let zc = projector
            .project_on(&mut tape, &pv, zf)
            .map_err(diverged(step))?;
        let loss = prior_loss_on(
            &mut tape,
            denoiser,
            &dv,
            &diffusion,
            &x0.select_rows(&idx),
            zc,
            &draw,
        )
        .map_err(diverged(step))?;
        let value = tape.value(loss).item();
        let grads = tape.backward(loss).map_err(diverged(step))?;
        let lr = schedule.lr_at(step)?;
        let mut pending = Vec::new();
        collect(&mut pending, hvf, &hv, &grads, |_| Group::Hvf, &trainable);
        collect(
            &mut pending,
            projector,
            &pv,
            &grads,
            |_| Group::Projector,
            &trainable,
        );
        collect(
            &mut pending,
            denoiser,
            &dv,
            &grads,
            denoiser_group,
            &trainable,
        );
        apply(optim, &mut pending, lr).map_err(diverged(step))?;
        drop(pending);
        trace.rows.push(TraceRow {
            step: step as u64,
            lr,
            loss: value,
        });
        if (step + 1) % plan.steps_per_epoch == 0 {
            verify(&before, &prior_checksums(hvf, projector, denoiser, &frozen))?;
        }
    }
    verify(&before, &prior_checksums(hvf, projector, denoiser, &frozen))?;
    Ok(trace)
}

/// Result of a training command.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub model: Model,
    pub checkpoint: Checkpoint,
    pub trace: LossTrace,
}

/// The bank after applying the config's branch subset.
pub fn effective_bank(cfg: &RunConfig, bank: &EmbeddingBank) -> Result<EmbeddingBank> {
    match &cfg.branches {
        Some(keep) => bank.subset_branches(keep),
        None => Ok(bank.clone()),
    }
}

/// Model dims for a bank and (optionally) a brain input length.
pub fn model_dims(cfg: &RunConfig, bank: &EmbeddingBank, input_len: Option<usize>) -> ModelDims {
    ModelDims {
        branch_dims: bank.branch_dims(),
        x_dim: bank.branches[bank.pixel_branch()].dim,
        input_len,
        model: cfg.model.clone(),
    }
}

fn resume_state(cfg: &RunConfig, init: Option<&Checkpoint>) -> Result<(AdamWState, usize)> {
    if let Some(ck) = init.filter(|c| c.meta.stage == cfg.stage) {
        if let Some(st) = ck.optim_state()? {
            return Ok((st, ck.step as usize));
        }
    }
    Ok((AdamWState::new(cfg.optim), 0))
}

fn meta(
    cfg: &RunConfig,
    dims: ModelDims,
    bank: &EmbeddingBank,
    data: Option<&PairedSet>,
) -> CheckpointMeta {
    CheckpointMeta {
        stage: cfg.stage,
        fingerprint: cfg.fingerprint(),
        config: cfg.clone(),
        dims,
        branch_ids: bank.branches.iter().map(|b| b.branch_id.clone()).collect(),
        signal: data.map(|d| d.layout.clone()),
        optim_step: 0,
    }
}

fn model_checksums(
    model: &Model,
    groups: &std::collections::BTreeSet<Group>,
) -> BTreeMap<Group, u64> {
    groups
        .iter()
        .map(|&g| (g, model.group_checksum(g)))
        .collect()
}

/// Retrieval alignment (both sides trained) or stage ii (brain side only).
pub fn train_alignment(
    cfg: &RunConfig,
    data: &Dataset,
    init: Option<&Checkpoint>,
) -> Result<RunOutput> {
    alignment_run(cfg, data, init, true)
}

/// The checkpoint `train_alignment` would start from, before any step.
pub fn untrained_alignment(cfg: &RunConfig, data: &Dataset) -> Result<Checkpoint> {
    Ok(alignment_run(cfg, data, None, false)?.checkpoint)
}

fn alignment_run(
    cfg: &RunConfig,
    data: &Dataset,
    init: Option<&Checkpoint>,
    fit: bool,
) -> Result<RunOutput> {
    cfg.validate()?;
    if cfg.stage == Stage::PriorPretrain {
        return Err(Error::Config(
            "train_alignment needs an alignment stage".into(),
        ));
    }
    set_parallelism(cfg.threads);
    let bank = effective_bank(cfg, &data.bank)?;
    let holdout = cfg.holdout_subject.clone();
    let set = PairedSet::build(
        &bank,
        &data.recordings,
        &cfg.preproc,
        Partition::Train,
        |s| holdout.as_deref() != Some(s),
    )?;
    let dims = model_dims(cfg, &bank, Some(set.input_len()));
    let mut model = match init {
        Some(ck) => ck.model(&dims)?,
        None => Model::init(&dims, cfg.seed, false),
    };
    if cfg.stage == Stage::BrainFusionAlign {
        let ck = init.ok_or_else(|| {
            Error::Config("brain_fusion_align needs init_checkpoint from prior_pretrain".into())
        })?;
        for section in ["projector", "denoiser"] {
            if !ck.has_section(section) {
                return Err(Error::CheckpointShape {
                    section: section.into(),
                    reason: "required by brain_fusion_align but missing from the checkpoint".into(),
                });
            }
        }
    }
    if model.brain.is_none() {
        model.brain = Some(Model::init_brain(&dims, set.input_len(), cfg.seed));
    }
    let (mut optim, start) = resume_state(cfg, init)?;
    let frozen = cfg.frozen();
    let before = model_checksums(&model, &frozen);
    log::info!(
        "{}: {} trials, {} stimuli, input {}",
        cfg.stage,
        set.num_trials(),
        set.stimuli.len(),
        set.input_len()
    );
    let trace = if !fit {
        LossTrace::default()
    } else {
        let Model {
            hvf, brain, temp, ..
        } = &mut model;
        let brain = brain.as_mut().expect("brain initialized above");
        fit_alignment(hvf, brain, temp, &set, cfg, &mut optim, start)?
    };
    verify(&before, &model_checksums(&model, &frozen))?;
    let step = (start + trace.len()) as u64;
    let checkpoint = Checkpoint::new(
        &model,
        Some(&optim),
        meta(cfg, dims, &bank, Some(&set)),
        cfg.seed,
        step,
    );
    Ok(RunOutput {
        model,
        checkpoint,
        trace,
    })
}

/// Training rows of the bank and the diffusion target.
pub fn prior_training_rows(bank: &EmbeddingBank) -> (Vec<Tensor>, Tensor) {
    let rows = bank.indices(Partition::Train);
    let x0 = bank.branch_rows(bank.pixel_branch(), &rows);
    (bank.embeddings(&rows), x0)
}

/// Stage i on a bank alone.
pub fn train_prior(
    cfg: &RunConfig,
    bank: &EmbeddingBank,
    init: Option<&Checkpoint>,
) -> Result<RunOutput> {
    cfg.validate()?;
    if cfg.stage != Stage::PriorPretrain {
        return Err(Error::Config(
            "train_prior needs stage = prior_pretrain".into(),
        ));
    }
    set_parallelism(cfg.threads);
    let bank = effective_bank(cfg, bank)?;
    let input_len = init.and_then(|c| c.meta.dims.input_len);
    let dims = model_dims(cfg, &bank, input_len);
    let mut model = match init {
        Some(ck) => ck.model(&dims)?,
        None => Model::init(&dims, cfg.seed, true),
    };
    let fresh = Model::init(&dims, cfg.seed, true);
    model
        .projector
        .get_or_insert_with(|| fresh.projector.clone().expect("with prior"));
    model
        .denoiser
        .get_or_insert_with(|| fresh.denoiser.clone().expect("with prior"));
    let (mut optim, start) = resume_state(cfg, init)?;
    let (embeddings, x0) = prior_training_rows(&bank);
    let frozen = cfg.frozen();
    let before = model_checksums(&model, &frozen);
    let trace = {
        let Model {
            hvf,
            projector,
            denoiser,
            ..
        } = &mut model;
        fit_prior(
            hvf,
            projector.as_mut().expect("set above"),
            denoiser.as_mut().expect("set above"),
            &embeddings,
            &x0,
            cfg,
            &mut optim,
            start,
        )?
    };
    verify(&before, &model_checksums(&model, &frozen))?;
    let step = (start + trace.len()) as u64;
    let checkpoint = Checkpoint::new(
        &model,
        Some(&optim),
        meta(cfg, dims, &bank, None),
        cfg.seed,
        step,
    );
    Ok(RunOutput {
        model,
        checkpoint,
        trace,
    })
}

/// Mean prior loss over `x0` with a fixed draw; `permute` shuffles which condition each row receives.
pub fn prior_eval_loss(
    model: &Model,
    embeddings: &[Tensor],
    x0: &Tensor,
    schedule: &DiffusionSchedule,
    draw: &NoiseDraw,
    permute: Option<&[usize]>,
) -> Result<f64> {
    let zf = model
        .hvf
        .forward(embeddings, &BranchMask::all(model.hvf.num_branches()))?;
    let mut zc = model.projector()?.project(&zf)?;
    if let Some(p) = permute {
        zc = zc.select_rows(p);
    }
    let denoiser = model
        .denoiser
        .as_ref()
        .ok_or_else(|| Error::Protocol("model has no denoiser".into()))?;
    crate::prior::prior_loss(denoiser, schedule, x0, &zc, draw)
}
