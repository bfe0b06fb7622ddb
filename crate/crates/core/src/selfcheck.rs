//! Built-in verification suites shared by the `gradcheck` and `selftest` commands.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::align::{contrastive_loss_on, TemperatureParam};
use crate::brainproj::{BrainBackbone as _, MbpParams};
use crate::error::Result;
use crate::evalsuite::{cosine_similarity, pixcorr, rank_all, ssim};
use crate::fusion::{BranchMask, HvfParams};
use crate::ndgrad::{check_gradients, Tape, Tensor, Var, DEFAULT_STEP, DEFAULT_TOLERANCE};
use crate::nn::Module;
use crate::prior::{prior_loss_on, DiffusionSchedule, NoiseDraw, ProjectorParams, ToyDenoiser};

/// Outcome of one named check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    pub fn line(&self) -> String {
        format!(
            "{} {}: {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail
        )
    }
}

type Case = fn(&mut ChaCha8Rng) -> Result<f64>;

fn rn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Worst relative error of `f` at one random point.
fn check(inputs: Vec<Tensor>, f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> Result<f64> {
    Ok(check_gradients(&inputs, f, DEFAULT_STEP)?.max_rel_error)
}

/// Turns a tensor-valued op into a scalar with a fixed random target.
fn squared_error(tape: &mut Tape, out: Var, target: &Tensor) -> Result<Var> {
    let t = tape.constant(target.clone());
    let d = tape.sub(out, t)?;
    tape.sum_squares(d)
}

fn op_cases() -> Vec<(&'static str, Case)> {
    vec![
        ("matmul", |r| {
            let c = rn(&[3, 2], r);
            check(vec![rn(&[3, 4], r), rn(&[4, 2], r)], move |t, v| {
                let y = t.matmul(v[0], v[1])?;
                squared_error(t, y, &c)
            })
        }),
        ("add", |r| {
            let c = rn(&[2, 3], r);
            check(vec![rn(&[2, 3], r), rn(&[2, 3], r)], move |t, v| {
                let y = t.add(v[0], v[1])?;
                squared_error(t, y, &c)
            })
        }),
        ("add_n", |r| {
            let c = rn(&[2, 3], r);
            check(
                vec![rn(&[2, 3], r), rn(&[2, 3], r), rn(&[2, 3], r)],
                move |t, v| {
                    let y = t.add_n(v)?;
                    squared_error(t, y, &c)
                },
            )
        }),
        ("sub", |r| {
            let c = rn(&[2, 3], r);
            check(vec![rn(&[2, 3], r), rn(&[2, 3], r)], move |t, v| {
                let y = t.sub(v[0], v[1])?;
                squared_error(t, y, &c)
            })
        }),
        ("add_row", |r| {
            let c = rn(&[3, 4], r);
            check(vec![rn(&[3, 4], r), rn(&[4], r)], move |t, v| {
                let y = t.add_row(v[0], v[1])?;
                squared_error(t, y, &c)
            })
        }),
        ("scale", |r| {
            let (c, k) = (rn(&[2, 3], r), r.random_range(-2.0..2.0));
            check(vec![rn(&[2, 3], r)], move |t, v| {
                let y = t.scale(v[0], k)?;
                squared_error(t, y, &c)
            })
        }),
        ("mul_scalar", |r| {
            let c = rn(&[2, 3], r);
            check(vec![rn(&[2, 3], r), rn(&[], r)], move |t, v| {
                let y = t.mul_scalar(v[0], v[1])?;
                squared_error(t, y, &c)
            })
        }),
        ("exp", |r| {
            let c = rn(&[2, 3], r);
            check(vec![rn(&[2, 3], r)], move |t, v| {
                let y = t.exp(v[0])?;
                squared_error(t, y, &c)
            })
        }),
        ("gelu", |r| {
            let c = rn(&[3, 4], r);
            check(vec![rn(&[3, 4], r)], move |t, v| {
                let y = t.gelu(v[0])?;
                squared_error(t, y, &c)
            })
        }),
        ("layer_norm", |r| {
            let c = rn(&[3, 5], r);
            check(
                vec![rn(&[3, 5], r), rn(&[5], r), rn(&[5], r)],
                move |t, v| {
                    let y = t.layer_norm(v[0], v[1], v[2], crate::nn::LAYER_NORM_EPS)?;
                    squared_error(t, y, &c)
                },
            )
        }),
        ("l2_normalize", |r| {
            let c = rn(&[3, 4], r);
            check(vec![rn(&[3, 4], r)], move |t, v| {
                let y = t.l2_normalize(v[0])?;
                squared_error(t, y, &c)
            })
        }),
        ("transpose", |r| {
            let c = rn(&[4, 2], r);
            check(vec![rn(&[2, 4], r)], move |t, v| {
                let y = t.transpose(v[0])?;
                squared_error(t, y, &c)
            })
        }),
        ("concat_cols", |r| {
            let c = rn(&[2, 5], r);
            check(vec![rn(&[2, 2], r), rn(&[2, 3], r)], move |t, v| {
                let y = t.concat_cols(v)?;
                squared_error(t, y, &c)
            })
        }),
        ("reshape", |r| {
            let c = rn(&[3, 2], r);
            check(vec![rn(&[2, 3], r)], move |t, v| {
                let y = t.reshape(v[0], &[3, 2])?;
                squared_error(t, y, &c)
            })
        }),
        ("sum", |r| {
            check(vec![rn(&[2, 3], r)], |t, v| {
                let e = t.exp(v[0])?;
                t.sum(e)
            })
        }),
        ("mean", |r| {
            check(vec![rn(&[2, 3], r)], |t, v| {
                let e = t.exp(v[0])?;
                t.mean(e)
            })
        }),
        ("sum_squares", |r| {
            check(vec![rn(&[2, 3], r)], |t, v| t.sum_squares(v[0]))
        }),
        ("infonce", |r| {
            check(vec![rn(&[4, 4], r)], |t, v| t.infonce(v[0]))
        }),
    ]
}

fn seeded<R: Rng>(r: &mut R) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(r.random())
}

/// Fuser + brain encoder + InfoNCE at one random point, every parameter checked.
fn alignment_model(r: &mut ChaCha8Rng) -> Result<f64> {
    let hvf = HvfParams::init(&[3, 2], 4, 5, &mut seeded(r));
    let mbp = MbpParams::init(6, 4, 3, &mut seeded(r));
    let embs: Vec<Tensor> = vec![rn(&[3, 3], r), rn(&[3, 2], r)];
    let signals = rn(&[3, 6], r);
    let temp = TemperatureParam::new(r.random_range(0.05..1.0));
    let mut inputs: Vec<Tensor> = hvf
        .named_tensors()
        .into_iter()
        .map(|(_, t)| t.clone())
        .collect();
    let nh = inputs.len();
    inputs.extend(mbp.named_tensors().into_iter().map(|(_, t)| t.clone()));
    let nb = inputs.len();
    inputs.push(temp.log_tau.clone());
    check(inputs, |t, v| {
        let e: Vec<Var> = embs.iter().map(|x| t.constant(x.clone())).collect();
        let zf = hvf.forward_on(t, &v[..nh], &e, &BranchMask::all(2))?;
        let x = t.constant(signals.clone());
        let zb = mbp.forward_on(t, &v[nh..nb], x)?;
        contrastive_loss_on(t, zb, zf, v[nb])
    })
}

/// Projector + toy denoiser + noise-prediction loss at one random point.
fn prior_model(r: &mut ChaCha8Rng) -> Result<f64> {
    let s = DiffusionSchedule::desk();
    let den = ToyDenoiser::init(3, 4, 5, &mut seeded(r));
    let proj = ProjectorParams::init(4, 6, &mut seeded(r));
    let x0 = rn(&[2, 3], r);
    let draw = NoiseDraw::sample(r.random(), 0, 2, 3, s.num_steps());
    let mut inputs = vec![rn(&[2, 4], r)];
    inputs.extend(proj.named_tensors().into_iter().map(|(_, t)| t.clone()));
    let np = inputs.len();
    inputs.extend(den.named_tensors().into_iter().map(|(_, t)| t.clone()));
    check(inputs, |t, v| {
        let zc = proj.project_on(t, &v[1..np], v[0])?;
        prior_loss_on(t, &den, &v[np..], &s, &x0, zc, &draw)
    })
}

/// Central-difference checks of every operator and both full models at `points` seeded points each.
pub fn gradient_suite(points: usize, seed: u64) -> Vec<CheckResult> {
    let mut cases = op_cases();
    cases.push(("model: fuser + brain encoder + infonce", alignment_model));
    cases.push(("model: projector + denoiser + prior loss", prior_model));
    cases
        .into_iter()
        .enumerate()
        .map(|(i, (name, case))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut worst: f64 = 0.0;
            let mut failure = None;
            for _ in 0..points {
                match case(&mut rng) {
                    Ok(e) => worst = worst.max(e),
                    Err(e) => {
                        failure = Some(e.to_string());
                        break;
                    }
                }
            }
            let passed = failure.is_none() && worst < DEFAULT_TOLERANCE;
            CheckResult {
                name: format!("grad {name}"),
                passed,
                detail: failure
                    .unwrap_or_else(|| format!("max rel error {worst:.2e} over {points} points")),
            }
        })
        .collect()
}

/// Retrieval ranks against a full sort, with exact ties planted.
fn retrieval_vs_sort(queries: usize, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = rn(&[50, 8], &mut rng);
    let mut q = rn(&[queries, 8], &mut rng);
    // every fourth query duplicates two gallery directions so its target ties exactly
    let mut targets = Vec::with_capacity(queries);
    for i in 0..queries {
        targets.push(rng.random_range(0..50));
        if i % 4 == 0 {
            q.data_mut()[i * 8..(i + 1) * 8].copy_from_slice(g.row(targets[i]));
        }
    }
    let mut g2 = g.clone();
    for j in (0..50).step_by(5) {
        let src = g.row(j).to_vec();
        g2.data_mut()[(j + 1) * 8..(j + 2) * 8].copy_from_slice(&src);
    }
    let sim = cosine_similarity(&q, &g2).expect("shapes agree");
    let ranks = rank_all(&sim, &targets);
    let mut mismatches = 0;
    for (i, &t) in targets.iter().enumerate() {
        let mut order: Vec<usize> = (0..50).collect();
        order.sort_by(|&a, &b| sim.row(i)[b].total_cmp(&sim.row(i)[a]).then(a.cmp(&b)));
        if order.iter().position(|&j| j == t) != Some(ranks[i]) {
            mismatches += 1;
        }
    }
    CheckResult {
        name: "retrieval ranks vs full sort".into(),
        passed: mismatches == 0,
        detail: format!("{mismatches} mismatches over {queries} queries"),
    }
}

/// Fast oracle checks: InfoNCE values, retrieval ranking and image metric identities.
pub fn oracle_suite(seed: u64) -> Vec<CheckResult> {
    let mut out = Vec::new();
    let loss = |m: Tensor| -> f64 {
        let mut t = Tape::new();
        let v = t.constant(m);
        let l = t.infonce(v).expect("square");
        t.value(l).item()
    };
    let one = loss(Tensor::filled(&[1, 1], 3.7));
    out.push(CheckResult {
        name: "infonce N=1".into(),
        passed: one == 0.0,
        detail: format!("loss {}", one.abs()),
    });
    let two = loss(Tensor::eye(2));
    let expect = (1.0 + (-1.0f64).exp()).ln();
    out.push(CheckResult {
        name: "infonce N=2 identity logits".into(),
        passed: (two - 0.313262).abs() < 1e-6 && (two - expect).abs() < 1e-15,
        detail: format!("loss {two:.9}"),
    });
    out.push(retrieval_vs_sort(200, seed));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img = Tensor::uniform(&[32, 32], 1.0, &mut rng).map(f64::abs);
    let (pc, ss) = (pixcorr(&img, &img), ssim(&img, &img));
    out.push(CheckResult {
        name: "identical images".into(),
        passed: matches!((&pc, &ss), (Ok(a), Ok(b)) if (a - 1.0).abs() < 1e-9 && (b - 1.0).abs() < 1e-9),
        detail: match (&pc, &ss) {
            (Ok(a), Ok(b)) => format!("pixcorr {a} ssim {b}"),
            _ => format!("pixcorr {pc:?} ssim {ss:?}"),
        },
    });
    out
}
