//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Runs with `harness = false`.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fusionalign::databank::{generate_synthetic, Dataset, Partition, PreprocSpec, SynthSpec};
use fusionalign::evalsuite::{
    cosine_similarity, encode_test, evaluate_retrieval, pixcorr, rank_all, ridge_oracle_top1, ssim,
    EvalOptions,
};
use fusionalign::fusion::BranchMask;
use fusionalign::ndgrad::{Tape, Tensor};
use fusionalign::prior::NoiseDraw;
use fusionalign::selfcheck::gradient_suite;
use fusionalign::trainer::{
    diffusion_schedule, prior_eval_loss, prior_training_rows, train_alignment, train_prior,
    untrained_alignment, Group, Model, RunConfig, Stage,
};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn infonce(m: &Tensor) -> f64 {
    let mut t = Tape::new();
    let v = t.constant(m.clone());
    let l = t.infonce(v).expect("square logits");
    t.value(l).item()
}

fn transpose(m: &Tensor) -> Tensor {
    let (r, c) = (m.rows(), m.cols());
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = m.row(i)[j];
        }
    }
    Tensor::matrix(c, r, out).unwrap()
}

fn gradient_criterion() -> Outcome {
    let results = gradient_suite(20, 0);
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.line())
        .collect();
    let models = results
        .iter()
        .filter(|r| r.name.starts_with("grad model:"))
        .count();
    outcome(
        failed.is_empty() && models == 2,
        if failed.is_empty() {
            format!(
                "{} cases ({} full models) at 20 points, rel err < 1e-4",
                results.len(),
                models
            )
        } else {
            failed.join("; ")
        },
    )
}

fn infonce_criterion() -> Outcome {
    let one = infonce(&Tensor::filled(&[1, 1], -2.3));
    let two = infonce(&Tensor::eye(2));
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(2..=24);
        let m = Tensor::randn(&[n, n], 3.0, &mut rng);
        worst = worst.max((infonce(&m) - infonce(&transpose(&m))).abs());
    }
    outcome(
        one == 0.0 && (two - 0.313262).abs() < 1e-6 && worst <= 1e-12,
        format!(
            "N=1 {}, N=2 {two:.7}, max |loss(M)-loss(Mᵀ)| {worst:.1e} over 100 matrices",
            one.abs()
        ),
    )
}

fn align_cfg() -> RunConfig {
    RunConfig::desk(Stage::AlignRetrieval)
}

fn noiseless_criterion() -> Outcome {
    let spec = SynthSpec::noiseless();
    let data = generate_synthetic(&spec).unwrap();
    let run = train_alignment(&align_cfg(), &data, None).unwrap();
    let r = evaluate_retrieval(&run.checkpoint, &data, &EvalOptions::default()).unwrap();
    outcome(
        r.k_way == 200 && r.top1 == 100.0,
        format!(
            "{}-way top-1 {:.2}% over {} queries",
            r.k_way, r.top1, r.num_queries
        ),
    )
}

const RIDGE_LAMBDAS: [f64; 5] = [100.0, 300.0, 1e3, 3e3, 1e4];

fn calibrated_criterion() -> Outcome {
    let preproc = PreprocSpec::default();
    let mut best: Option<(f64, f64)> = None;
    for noise in [4.0, 4.5, 5.0, 5.5, 6.0] {
        let data = generate_synthetic(&SynthSpec {
            noise_sigma: noise,
            ..SynthSpec::desk()
        })
        .unwrap();
        let oracle = RIDGE_LAMBDAS
            .iter()
            .map(|&l| ridge_oracle_top1(&data, &preproc, l).unwrap())
            .fold(f64::MIN, f64::max);
        if best.is_none_or(|(_, o)| (oracle - 95.0).abs() < (o - 95.0).abs()) {
            best = Some((noise, oracle));
        }
    }
    let (noise, oracle) = best.unwrap();
    let data = generate_synthetic(&SynthSpec {
        noise_sigma: noise,
        ..SynthSpec::desk()
    })
    .unwrap();
    let run = train_alignment(&align_cfg(), &data, None).unwrap();
    let r = evaluate_retrieval(&run.checkpoint, &data, &EvalOptions::default()).unwrap();
    outcome(
        r.top1 >= 85.0,
        format!(
            "noise_sigma {noise}: ridge oracle {oracle:.1}%, trained {}-way top-1 {:.1}% (need >= 85)",
            r.k_way, r.top1
        ),
    )
}

fn masking_criterion() -> Outcome {
    let data = generate_synthetic(&SynthSpec {
        branch_info_weights: vec![0.1, 0.1, 1.0],
        ..SynthSpec::desk()
    })
    .unwrap();
    let run = train_alignment(&align_cfg(), &data, None).unwrap();
    let top1 = |mask: BranchMask| {
        evaluate_retrieval(
            &run.checkpoint,
            &data,
            &EvalOptions {
                mask: Some(mask),
                ..Default::default()
            },
        )
        .unwrap()
        .top1
    };
    let full = top1(BranchMask::all(3));
    let drops: Vec<f64> = (0..3)
        .map(|k| full - top1(BranchMask::without(3, k).unwrap()))
        .collect();
    outcome(
        drops[2] > drops[0] && drops[2] > drops[1],
        format!(
            "full {full:.1}%, top-1 drop without branch 1/2/3: {:.1} / {:.1} / {:.1}",
            drops[0], drops[1], drops[2]
        ),
    )
}

const VISUAL_GROUPS: [Group; 4] = [
    Group::Hvf,
    Group::Projector,
    Group::DenoiserAdapter,
    Group::DenoiserBackbone,
];

fn prior_criterion() -> Outcome {
    let data = generate_synthetic(&SynthSpec::desk()).unwrap();
    let cfg = RunConfig::desk(Stage::PriorPretrain);
    let run = train_prior(&cfg, &data.bank, None).unwrap();
    let initial = Model::init(&run.checkpoint.meta.dims, cfg.seed, true);
    let backbone_kept = initial.group_checksum(Group::DenoiserBackbone)
        == run.model.group_checksum(Group::DenoiserBackbone);
    let step0 = run.trace.rows[0].loss;
    let last = *run.trace.epoch_means().last().unwrap();

    let (embs, x0) = prior_training_rows(&data.bank);
    let schedule = diffusion_schedule(&cfg).unwrap();
    let draw = NoiseDraw::sample(99, 0, x0.rows(), x0.cols(), schedule.num_steps());
    let n = x0.rows();
    let swap: Vec<usize> = (0..n).map(|i| i ^ 1).map(|j| j.min(n - 1)).collect();
    let matched = prior_eval_loss(&run.model, &embs, &x0, &schedule, &draw, None).unwrap();
    let shuffled = prior_eval_loss(&run.model, &embs, &x0, &schedule, &draw, Some(&swap)).unwrap();

    let stage2 = train_alignment(
        &RunConfig::desk(Stage::BrainFusionAlign),
        &data,
        Some(&run.checkpoint),
    )
    .unwrap();
    let visual_kept = VISUAL_GROUPS
        .iter()
        .all(|&g| run.model.group_checksum(g) == stage2.model.group_checksum(g));
    outcome(
        last <= 0.5 * step0 && matched < shuffled && backbone_kept && visual_kept,
        format!(
            "loss {step0:.3} -> {last:.3} ({:.0}% drop), eval matched {matched:.3} < shuffled {shuffled:.3}, \
             backbone unchanged in stage i: {backbone_kept}, visual side unchanged in stage ii: {visual_kept}",
            100.0 * (1.0 - last / step0)
        ),
    )
}

/// Position of `target` after sorting by descending score, lower index first among equals.
fn sorted_rank(row: &[f64], target: usize) -> usize {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    order.iter().position(|&j| j == target).unwrap()
}

/// Copies every even test stimulus onto the next one so their gallery columns tie exactly.
fn with_duplicate_stimuli(mut data: Dataset) -> Dataset {
    let test = data.bank.indices(Partition::Test);
    for pair in test.chunks(2) {
        if let [a, b] = *pair {
            for (branch, payload) in data.bank.branches.iter().zip(data.bank.payload.iter_mut()) {
                let d = branch.dim;
                let src: Vec<f32> = payload[a * d..(a + 1) * d].to_vec();
                payload[b * d..(b + 1) * d].copy_from_slice(&src);
            }
        }
    }
    data
}

fn retrieval_criterion() -> Outcome {
    let data = with_duplicate_stimuli(generate_synthetic(&SynthSpec::desk()).unwrap());
    let mut cfg = align_cfg();
    cfg.preproc.average_repetitions = false;
    let ck = untrained_alignment(&cfg, &data).unwrap();
    let report = evaluate_retrieval(&ck, &data, &EvalOptions::default()).unwrap();
    let model = ck.model(&ck.meta.dims).unwrap();
    let enc = encode_test(&ck, &model, &data, &EvalOptions::default()).unwrap();
    let sim = cosine_similarity(&enc.zb, &enc.zf).unwrap();
    let mut mismatches = 0;
    let mut tied_targets = 0;
    for (i, q) in report.queries.iter().enumerate() {
        let row = sim.row(i);
        let t = enc.targets[i];
        if row.iter().enumerate().any(|(j, &s)| j != t && s == row[t]) {
            tied_targets += 1;
        }
        if q.rank != sorted_rank(row, t) {
            mismatches += 1;
        }
    }

    // planted ties on a random score matrix
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (nq, ng) = (1000, 200);
    let mut scores: Vec<f64> = (0..nq * ng)
        .map(|_| (rng.random_range(0..40) as f64) / 40.0)
        .collect();
    let targets: Vec<usize> = (0..nq).map(|_| rng.random_range(0..ng)).collect();
    for (i, &t) in targets.iter().enumerate() {
        let other = rng.random_range(0..ng);
        scores[i * ng + other] = scores[i * ng + t];
    }
    let m = Tensor::matrix(nq, ng, scores).unwrap();
    let planted = rank_all(&m, &targets)
        .iter()
        .enumerate()
        .filter(|&(i, &r)| r != sorted_rank(m.row(i), targets[i]))
        .count();
    let n = report.queries.len();
    outcome(
        n >= 1000 && mismatches == 0 && tied_targets > 0 && planted == 0,
        format!(
            "{n} model queries ({tied_targets} with tied targets): {mismatches} mismatches; \
             1000 planted-tie queries: {planted} mismatches"
        ),
    )
}

fn chance_criterion() -> Outcome {
    let data = generate_synthetic(&SynthSpec {
        num_subjects: 3,
        ..SynthSpec::desk()
    })
    .unwrap();
    let mut cfg = align_cfg();
    cfg.preproc.average_repetitions = false;
    let ck = untrained_alignment(&cfg, &data).unwrap();
    let r = evaluate_retrieval(&ck, &data, &EvalOptions::default()).unwrap();
    let p = 1.0 / r.k_way as f64;
    let n = r.num_queries as f64;
    let sigma = 100.0 * (p * (1.0 - p) / n).sqrt();
    let dev = (r.top1 - 100.0 * p).abs();
    outcome(
        r.k_way == 200 && r.num_queries >= 2000 && dev <= 3.0 * sigma,
        format!(
            "untrained {}-way top-1 {:.3}% over {} queries, chance {:.2}% ± {:.3} (1σ), |dev| = {:.2}σ",
            r.k_way,
            r.top1,
            r.num_queries,
            100.0 * p,
            sigma,
            dev / sigma
        ),
    )
}

fn cli(args: &[&str]) {
    let status = Command::new(env!("CARGO_BIN_EXE_fusionalign"))
        .args(args)
        .output()
        .expect("run fusionalign");
    assert!(
        status.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&status.stderr)
    );
}

const REPORT_FILES: [&str; 4] = [
    "checkpoint.ckpt",
    "retrieval.json",
    "retrieval.csv",
    "loss.csv",
];

fn determinism_criterion() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let dir = |name: &str| tmp.path().join(name).to_str().unwrap().to_string();
    cli(&["gen-synth", "--seed", "3", "--out", &dir("data")]);
    for run in ["a", "b"] {
        cli(&[
            "train-align",
            "--data",
            &dir("data"),
            "--seed",
            "5",
            "--threads",
            "1",
            "--out",
            &dir(run),
        ]);
    }
    let read = |run: &str, f: &str| std::fs::read(Path::new(&dir(run)).join(f)).unwrap();
    let differing: Vec<&str> = REPORT_FILES
        .iter()
        .copied()
        .filter(|f| read("a", f) != read("b", f))
        .collect();
    outcome(
        differing.is_empty(),
        if differing.is_empty() {
            format!("two runs, identical {}", REPORT_FILES.join(", "))
        } else {
            format!("differ: {}", differing.join(", "))
        },
    )
}

/// SSIM evaluated window by window with centered second moments.
fn ssim_direct(a: &Tensor, b: &Tensor) -> f64 {
    let (h, w) = (a.shape()[0], a.shape()[1]);
    let g: Vec<f64> = (0..11)
        .map(|i| (-((i as f64 - 5.0).powi(2)) / 4.5).exp())
        .collect();
    let norm: f64 = g.iter().sum::<f64>().powi(2);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (x, y) = (a.data(), b.data());
    let mut total = 0.0;
    let mut count = 0;
    for r in 0..=h - 11 {
        for c in 0..=w - 11 {
            let at = |i: usize, j: usize| (r + i) * w + c + j;
            let wt = |i: usize, j: usize| g[i] * g[j] / norm;
            let (mut mx, mut my) = (0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    mx += wt(i, j) * x[at(i, j)];
                    my += wt(i, j) * y[at(i, j)];
                }
            }
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let (dx, dy) = (x[at(i, j)] - mx, y[at(i, j)] - my);
                    vx += wt(i, j) * dx * dx;
                    vy += wt(i, j) * dy * dy;
                    cxy += wt(i, j) * dx * dy;
                }
            }
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    total / count as f64
}

/// Pearson r as cov / (sd·sd) with sample (n-1) normalization.
fn pearson_cov(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - ma) * (y - mb))
        .sum::<f64>()
        / (n - 1.0);
    let va = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / (n - 1.0);
    let vb = b.iter().map(|y| (y - mb).powi(2)).sum::<f64>() / (n - 1.0);
    cov / (va.sqrt() * vb.sqrt())
}

fn metric_criterion() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut worst_pc, mut worst_ss, mut worst_same): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for _ in 0..50 {
        let (h, w) = (rng.random_range(11..40), rng.random_range(11..40));
        let a = Tensor::uniform(&[h, w], 1.0, &mut rng).map(|v| 0.5 + 0.5 * v);
        let noise = Tensor::uniform(&[h, w], 1.0, &mut rng);
        let mix = rng.random_range(0.0..1.0);
        let b = Tensor::new(
            vec![h, w],
            a.data()
                .iter()
                .zip(noise.data())
                .map(|(x, e)| (mix * x + (1.0 - mix) * (0.5 + 0.5 * e)).clamp(0.0, 1.0))
                .collect(),
        )
        .unwrap();
        worst_pc = worst_pc.max((pixcorr(&a, &b).unwrap() - pearson_cov(a.data(), b.data())).abs());
        worst_ss = worst_ss.max((ssim(&a, &b).unwrap() - ssim_direct(&a, &b)).abs());
        worst_same = worst_same
            .max((pixcorr(&a, &a).unwrap() - 1.0).abs())
            .max((ssim(&a, &a).unwrap() - 1.0).abs());
    }
    outcome(
        worst_pc <= 1e-9 && worst_ss <= 1e-9 && worst_same <= 1e-9,
        format!(
            "50 pairs: max |Δ| pixcorr {worst_pc:.1e}, ssim {worst_ss:.1e}; identical images off 1.0 by {worst_same:.1e}"
        ),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    // `cargo test -- <filter>` and `--list` are accepted and ignored
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let criteria: [Criterion; 10] = [
        ("gradient suite", gradient_criterion),
        ("infonce exact values", infonce_criterion),
        ("noiseless recovery", noiseless_criterion),
        ("calibrated-noise recovery", calibrated_criterion),
        ("masking monotonicity", masking_criterion),
        ("fusion prior contract", prior_criterion),
        ("retrieval oracle equivalence", retrieval_criterion),
        ("chance level", chance_criterion),
        ("cli determinism", determinism_criterion),
        ("metric fidelity", metric_criterion),
    ];
    let start = Instant::now();
    let mut failures = 0;
    for (name, check) in criteria {
        let t = Instant::now();
        let o = check();
        if !o.passed {
            failures += 1;
        }
        println!(
            "{} {name}: {} [{:.1}s]",
            if o.passed { "PASS" } else { "FAIL" },
            o.detail,
            t.elapsed().as_secs_f64()
        );
    }
    println!(
        "acceptance: {} passed, {failures} failed in {:.1}s",
        criteria.len() - failures,
        start.elapsed().as_secs_f64()
    );
    if failures > 0 {
        std::process::exit(1);
    }
}
