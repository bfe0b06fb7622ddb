//! Command-line front end. `main` only parses argv and calls [`run`].

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use crate::databank::{
    generate_synthetic, load_dataset, save_dataset, ChannelSubset, Dataset, SynthSpec,
};
use crate::error::{Error, Result};
use crate::evalsuite::{
    evaluate_retrieval, export_embeddings, run_ablation, AblationSpec, EvalOptions, RetrievalReport,
};
use crate::fusion::BranchMask;
use crate::ndgrad::set_parallelism;
use crate::prior::{export_conditions, NoiseDraw};
use crate::selfcheck::{gradient_suite, oracle_suite, CheckResult};
use crate::trainer::{
    diffusion_schedule, prior_training_rows, train_alignment, train_prior, Checkpoint, RunConfig,
    RunOutput, Stage,
};

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const RUN_CONFIG_FILE: &str = "run_config.toml";

#[derive(Debug, Parser)]
#[command(
    name = "fusionalign",
    version,
    about = "Brain-vision alignment: training, evaluation and verification"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SynthPreset {
    Desk,
    Noiseless,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RunPreset {
    /// Small single-core settings.
    Desk,
    /// Full-width model and schedule.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ConditionSource {
    /// Brain embeddings of the test queries (stage-ii use).
    Brain,
    /// Fused embeddings of the test gallery.
    Fused,
}

#[derive(Debug, Args)]
pub struct OutArg {
    /// Directory that receives every output of the command.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory (bank manifest plus brain recordings).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Run config (TOML); flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Settings used when no --config is given.
    #[arg(long, value_enum, default_value = "desk")]
    pub preset: RunPreset,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Inference-time branch mask such as `1,1,0`.
    #[arg(long)]
    pub mask: Option<BranchMask>,
    /// `o_plus_p`, `occipital`, `parietal`, `others`, `all` or a comma list of names.
    #[arg(long)]
    pub channels: Option<ChannelSubset>,
    /// Crop window `start,end` in ms.
    #[arg(long, value_parser = parse_window)]
    pub window_ms: Option<[f64; 2]>,
    /// Subject excluded from training.
    #[arg(long)]
    pub holdout_subject: Option<String>,
    /// Checkpoint to start from (required for brain_fusion_align).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Gallery size; defaults to every test stimulus.
    #[arg(long)]
    pub kway: Option<usize>,
    #[arg(long)]
    pub mask: Option<BranchMask>,
    /// Seed for gallery subsampling; defaults to the checkpoint's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded synthetic dataset.
    GenSynth {
        #[arg(long, value_enum, default_value = "desk")]
        preset: SynthPreset,
        /// Synthetic spec (TOML); replaces the preset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        noise_sigma: Option<f64>,
        #[arg(long)]
        subjects: Option<usize>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Contrastive alignment of brain and fused embeddings.
    TrainAlign {
        /// `align_retrieval` or `brain_fusion_align`.
        #[arg(long)]
        stage: Option<Stage>,
        #[command(flatten)]
        args: TrainArgs,
    },
    /// Stage i: pretrain the fusion prior on the embedding bank.
    TrainPrior {
        #[command(flatten)]
        args: TrainArgs,
    },
    /// Stage ii: align a brain encoder to a frozen fusion prior.
    AlignBrain {
        #[command(flatten)]
        args: TrainArgs,
    },
    /// Zero-shot retrieval on the test partition.
    EvalRetrieval {
        #[command(flatten)]
        args: EvalArgs,
    },
    /// Masking, encoder-subset, channel and window ablations.
    Ablate {
        /// Ablation spec (TOML); defaults to leave-one-branch-out masks.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Extra channel-subset cell; repeatable.
        #[arg(long)]
        channels: Vec<ChannelSubset>,
        /// Extra window cell `start,end`; repeatable.
        #[arg(long, value_parser = parse_window)]
        window_ms: Vec<[f64; 2]>,
        #[command(flatten)]
        args: EvalArgs,
    },
    /// Diffusion conditions z_c for the test set, written as a one-branch bank.
    ExportConditions {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "brain")]
        from: ConditionSource,
        #[command(flatten)]
        out: OutArg,
    },
    /// Query, gallery and per-branch embeddings plus the similarity matrix.
    ExportEmbeddings {
        #[command(flatten)]
        args: EvalArgs,
    },
    /// Finite-difference gradient checks of every operator and model.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Gradient checks plus the built-in oracle suite.
    Selftest {
        #[arg(long, default_value_t = 20)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_window(s: &str) -> std::result::Result<[f64; 2], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [a, b] => {
            let a: f64 = a.parse().map_err(|_| format!("bad window start `{a}`"))?;
            let b: f64 = b.parse().map_err(|_| format!("bad window end `{b}`"))?;
            Ok([a, b])
        }
        _ => Err(format!("window must be `start,end` in ms, got `{s}`")),
    }
}

fn short_hash(text: &str) -> String {
    Sha256::digest(text.as_bytes())
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn announce(fingerprint: &str, seed: u64) {
    println!("fingerprint {fingerprint} seed {seed}");
}

fn run_config(args: &TrainArgs, stage: Stage) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => match args.preset {
            RunPreset::Desk => RunConfig::desk(stage),
            RunPreset::Full => RunConfig {
                stage,
                ..RunConfig::full()
            },
        },
    };
    cfg.stage = stage;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(t) = args.threads {
        cfg.threads = t;
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(m) = &args.mask {
        cfg.mask = Some(m.clone());
    }
    if let Some(c) = &args.channels {
        cfg.preproc.channels = c.clone();
    }
    if let Some(w) = args.window_ms {
        cfg.preproc.window_ms = Some(w);
    }
    if let Some(h) = &args.holdout_subject {
        cfg.holdout_subject = Some(h.clone());
    }
    if let Some(d) = &args.data {
        cfg.data = Some(d.clone());
    }
    if let Some(c) = &args.checkpoint {
        cfg.init_checkpoint = Some(c.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_inputs(cfg: &RunConfig) -> Result<(Dataset, Option<Checkpoint>)> {
    let dir = cfg.data.as_ref().ok_or_else(|| {
        Error::Config("no dataset: pass --data or set `data` in the config".into())
    })?;
    let data = load_dataset(dir)?;
    let init = cfg
        .init_checkpoint
        .as_ref()
        .map(Checkpoint::load)
        .transpose()?;
    Ok((data, init))
}

fn save_run(out: &Path, cfg: &RunConfig, run: &RunOutput) -> Result<()> {
    run.checkpoint.save(out.join(CHECKPOINT_FILE))?;
    run.trace.write_csv(&out.join("loss.csv"))?;
    write_text(&out.join(RUN_CONFIG_FILE), &cfg.to_toml())
}

fn print_report(report: &RetrievalReport) {
    print!("{}", report.table());
    log::info!("evaluation took {:.2}s", report.wall_clock_s);
}

fn train_align(args: &TrainArgs, stage: Stage) -> Result<()> {
    if stage == Stage::PriorPretrain {
        return Err(Error::Config(
            "train-align runs align_retrieval or brain_fusion_align; use train-prior".into(),
        ));
    }
    let cfg = run_config(args, stage)?;
    announce(&cfg.fingerprint(), cfg.seed);
    let (data, init) = load_inputs(&cfg)?;
    let run = train_alignment(&cfg, &data, init.as_ref())?;
    let out = &args.out.out;
    save_run(out, &cfg, &run)?;
    let report = evaluate_retrieval(&run.checkpoint, &data, &EvalOptions::default())?;
    report.write(out, "retrieval")?;
    print_report(&report);
    Ok(())
}

fn train_prior_cmd(args: &TrainArgs) -> Result<()> {
    let cfg = run_config(args, Stage::PriorPretrain)?;
    announce(&cfg.fingerprint(), cfg.seed);
    let (data, init) = load_inputs(&cfg)?;
    let run = train_prior(&cfg, &data.bank, init.as_ref())?;
    let out = &args.out.out;
    save_run(out, &cfg, &run)?;
    // fixed-noise evaluation with matched and pairwise-swapped conditions
    let (embs, x0) = prior_training_rows(&data.bank);
    let schedule = diffusion_schedule(&cfg)?;
    let draw = NoiseDraw::sample(
        cfg.seed,
        u64::MAX,
        x0.rows(),
        x0.cols(),
        schedule.num_steps(),
    );
    let n = x0.rows();
    let swap: Vec<usize> = (0..n)
        .map(|i| {
            if i % 2 == 0 {
                (i + 1).min(n - 1)
            } else {
                i - 1
            }
        })
        .collect();
    let matched = crate::trainer::prior_eval_loss(&run.model, &embs, &x0, &schedule, &draw, None)?;
    let shuffled =
        crate::trainer::prior_eval_loss(&run.model, &embs, &x0, &schedule, &draw, Some(&swap))?;
    let first = run.trace.rows.first().map_or(f64::NAN, |r| r.loss);
    let last = run.trace.epoch_means().last().copied().unwrap_or(f64::NAN);
    let summary = serde_json::json!({
        "first_step_loss": first,
        "last_epoch_loss": last,
        "eval_loss_matched": matched,
        "eval_loss_shuffled": shuffled,
    });
    write_text(
        &out.join("prior_eval.json"),
        &serde_json::to_string_pretty(&summary).expect("json"),
    )?;
    println!("loss {first:.4} -> {last:.4} (last epoch mean)");
    println!("eval loss matched {matched:.4} shuffled {shuffled:.4}");
    Ok(())
}

fn eval_options(args: &EvalArgs) -> EvalOptions {
    EvalOptions {
        k_way: args.kway,
        mask: args.mask.clone(),
        seed: args.seed,
    }
}

fn load_eval(args: &EvalArgs) -> Result<(Checkpoint, Dataset)> {
    set_parallelism(args.threads.unwrap_or(1));
    let ck = Checkpoint::load(&args.checkpoint)?;
    announce(&ck.meta.fingerprint, args.seed.unwrap_or(ck.seed));
    Ok((ck, load_dataset(&args.data)?))
}

fn eval_cmd(args: &EvalArgs) -> Result<()> {
    let (ck, data) = load_eval(args)?;
    let report = evaluate_retrieval(&ck, &data, &eval_options(args))?;
    report.write(&args.out.out, "retrieval")?;
    print_report(&report);
    Ok(())
}

fn ablate_cmd(
    config: Option<&Path>,
    channels: &[ChannelSubset],
    windows: &[[f64; 2]],
    args: &EvalArgs,
) -> Result<()> {
    let (ck, data) = load_eval(args)?;
    let mut spec = match config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            AblationSpec::from_toml_str(&text)?
        }
        None => AblationSpec::leave_one_out(ck.meta.branch_ids.len())?,
    };
    spec.channels.extend(channels.iter().cloned());
    spec.windows.extend_from_slice(windows);
    let grid = run_ablation(&ck, &data, &spec, &eval_options(args))?;
    grid.write(&args.out.out)?;
    write_text(
        &args.out.out.join("ablation_spec.toml"),
        &toml::to_string(&spec).expect("spec serializes"),
    )?;
    print!("{}", grid.table());
    Ok(())
}

fn export_conditions_cmd(
    checkpoint: &Path,
    data: &Path,
    from: ConditionSource,
    out: &Path,
) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    announce(&ck.meta.fingerprint, ck.seed);
    let data = load_dataset(data)?;
    let model = ck.model(&ck.meta.dims)?;
    let enc = crate::evalsuite::encode_test(&ck, &model, &data, &EvalOptions::default())?;
    let (z, tag) = match from {
        ConditionSource::Brain => (&enc.zb, "brain"),
        ConditionSource::Fused => (&enc.zf, "fused"),
    };
    let bank = export_conditions(
        z,
        model.projector()?,
        out,
        &format!("{} ({tag})", ck.meta.stage),
    )?;
    println!(
        "wrote {} conditions of dim {} to {}",
        bank.num_stimuli,
        bank.branches[0].dim,
        out.display()
    );
    Ok(())
}

fn export_embeddings_cmd(args: &EvalArgs) -> Result<()> {
    let (ck, data) = load_eval(args)?;
    let info = export_embeddings(&ck, &data, &eval_options(args), &args.out.out)?;
    println!(
        "wrote z_b {}×{}, z_f {}×{}, similarity {}×{} to {}",
        info.z_b.rows,
        info.z_b.cols,
        info.z_f.rows,
        info.z_f.cols,
        info.similarity.rows,
        info.similarity.cols,
        args.out.out.display()
    );
    Ok(())
}

fn print_checks(results: &[CheckResult]) -> Result<()> {
    for r in results {
        println!("{}", r.line());
    }
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.name.as_str())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::CheckFailed(failed.join(", ")))
    }
}

fn gen_synth(
    preset: SynthPreset,
    config: Option<&Path>,
    seed: Option<u64>,
    noise_sigma: Option<f64>,
    subjects: Option<usize>,
    out: &Path,
) -> Result<()> {
    let mut spec = match config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {}", p.display(), e.message())))?
        }
        None => match preset {
            SynthPreset::Desk => SynthSpec::desk(),
            SynthPreset::Noiseless => SynthSpec::noiseless(),
        },
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    if let Some(n) = noise_sigma {
        spec.noise_sigma = n;
    }
    if let Some(s) = subjects {
        spec.num_subjects = s;
    }
    let text = toml::to_string(&spec).expect("synth spec serializes");
    announce(&short_hash(&text), spec.seed);
    let data = generate_synthetic(&spec)?;
    save_dataset(&data, out)?;
    write_text(&out.join("synth_spec.toml"), &text)?;
    println!(
        "wrote {} stimuli, {} recordings to {}",
        data.bank.num_stimuli,
        data.recordings.len(),
        out.display()
    );
    Ok(())
}

pub fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynth {
            preset,
            config,
            seed,
            noise_sigma,
            subjects,
            out,
        } => gen_synth(
            preset,
            config.as_deref(),
            seed,
            noise_sigma,
            subjects,
            &out.out,
        ),
        Command::TrainAlign { stage, args } => {
            train_align(&args, stage.unwrap_or(Stage::AlignRetrieval))
        }
        Command::TrainPrior { args } => train_prior_cmd(&args),
        Command::AlignBrain { args } => {
            if args.checkpoint.is_none() && args.config.is_none() {
                return Err(Error::Config(
                    "align-brain needs --checkpoint from train-prior".into(),
                ));
            }
            train_align(&args, Stage::BrainFusionAlign)
        }
        Command::EvalRetrieval { args } => eval_cmd(&args),
        Command::Ablate {
            config,
            channels,
            window_ms,
            args,
        } => ablate_cmd(config.as_deref(), &channels, &window_ms, &args),
        Command::ExportConditions {
            checkpoint,
            data,
            from,
            out,
        } => export_conditions_cmd(&checkpoint, &data, from, &out.out),
        Command::ExportEmbeddings { args } => export_embeddings_cmd(&args),
        Command::Gradcheck { points, seed } => {
            announce(&short_hash(&format!("gradcheck points={points}")), seed);
            print_checks(&gradient_suite(points, seed))
        }
        Command::Selftest { points, seed } => {
            announce(&short_hash(&format!("selftest points={points}")), seed);
            let mut all = gradient_suite(points, seed);
            all.extend(oracle_suite(seed));
            print_checks(&all)
        }
    }
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            let class = e.class();
            eprintln!("error[{}]: {}", class.as_str(), e);
            class.exit_code()
        }
    }
}
