//! Seeded synthetic datasets with a known shared latent.
//!
//! Each stimulus `i` draws `u_i ~ N(0, I_L)`. Branch `k` sees
//! `w_k · u_i A_k + σ_k · n` with `A_k` entries `~ N(0, 1/L)`, so informative
//! branches have roughly unit-variance features. Subject `s` records
//! `u_i B_s + σ · n` reshaped to `C × T`, where
//! `B_s = √(1 − v²) B + v R_s` mixes a shared brain map with a subject-specific one.
//! Every draw is taken from its own ChaCha stream, and all values are rounded to
//! `f32` so a save/load round trip is lossless.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::bank::{BranchInfo, BranchKind, EmbeddingBank, Partition};
use super::brain::BrainRecording;
use super::preprocess::O_PLUS_P;
use super::Dataset;
use crate::error::{Error, Result};
use crate::ndgrad::{matmul_raw, Tensor};

/// Non occipito-parietal 10-10 sites used to pad synthetic montages.
const OTHER_CHANNELS: [&str; 46] = [
    "Fp1", "Fp2", "AF7", "AF3", "AFz", "AF4", "AF8", "F7", "F5", "F3", "F1", "Fz", "F2", "F4",
    "F6", "F8", "FT9", "FT7", "FC5", "FC3", "FC1", "FC2", "FC4", "FC6", "FT8", "FT10", "T7", "C5",
    "C3", "C1", "Cz", "C2", "C4", "C6", "T8", "TP9", "TP7", "CP5", "CP3", "CP1", "CPz", "CP2",
    "CP4", "CP6", "TP8", "TP10",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub num_train_stimuli: usize,
    pub num_test_stimuli: usize,
    pub branch_dims: Vec<usize>,
    /// Relative amount of latent signal carried by each branch.
    pub branch_info_weights: Vec<f64>,
    /// Per-branch additive noise, independent of the latent.
    pub branch_noise_sigma: f64,
    pub latent_dim: usize,
    pub num_channels: usize,
    pub num_samples: usize,
    pub sample_rate_hz: f64,
    /// Additive Gaussian noise on every brain sample.
    pub noise_sigma: f64,
    pub num_subjects: usize,
    pub repetitions: u32,
    /// Share `v` of each subject's brain map that is subject-specific.
    pub subject_variation: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec::desk()
    }
}

impl SynthSpec {
    /// Small dataset for the desk-scale runs: 200 train and 200 test concepts.
    pub fn desk() -> Self {
        SynthSpec {
            seed: 1,
            num_train_stimuli: 200,
            num_test_stimuli: 200,
            branch_dims: vec![48, 32, 64],
            branch_info_weights: vec![1.0, 1.0, 1.0],
            branch_noise_sigma: 0.1,
            latent_dim: 32,
            num_channels: 24,
            num_samples: 25,
            sample_rate_hz: 25.0,
            noise_sigma: 1.0,
            num_subjects: 2,
            repetitions: 4,
            subject_variation: 0.3,
        }
    }

    /// The desk dataset with noise-free brain signals.
    pub fn noiseless() -> Self {
        SynthSpec {
            noise_sigma: 0.0,
            ..SynthSpec::desk()
        }
    }

    pub fn num_stimuli(&self) -> usize {
        self.num_train_stimuli + self.num_test_stimuli
    }

    pub fn window_ms(&self) -> [f64; 2] {
        [0.0, self.num_samples as f64 * 1000.0 / self.sample_rate_hz]
    }

    /// Montage: non-O+P padding sites first, then the 17 O+P sites; short montages take
    /// a prefix of the O+P list.
    pub fn channel_names(&self) -> Vec<String> {
        let c = self.num_channels;
        if c < O_PLUS_P.len() {
            return O_PLUS_P[..c].iter().map(|s| s.to_string()).collect();
        }
        let pad = c - O_PLUS_P.len();
        let mut names: Vec<String> = (0..pad)
            .map(|i| match OTHER_CHANNELS.get(i) {
                Some(n) => n.to_string(),
                None => format!("E{}", i + 1),
            })
            .collect();
        names.extend(O_PLUS_P.iter().map(|s| s.to_string()));
        names
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("synthetic spec: {msg}")));
        if self.num_train_stimuli == 0 || self.num_test_stimuli == 0 {
            return bad("train and test stimulus counts must be positive".into());
        }
        if self.branch_dims.is_empty() || self.branch_dims.contains(&0) {
            return bad(format!(
                "branch dims must be positive, got {:?}",
                self.branch_dims
            ));
        }
        if self.branch_info_weights.len() != self.branch_dims.len() {
            return bad(format!(
                "{} info weights for {} branches",
                self.branch_info_weights.len(),
                self.branch_dims.len()
            ));
        }
        if self
            .branch_info_weights
            .iter()
            .any(|w| !(*w >= 0.0) || !w.is_finite())
            || self.branch_info_weights.iter().all(|&w| w == 0.0)
        {
            return bad("info weights must be nonnegative and not all zero".into());
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("branch_noise_sigma", self.branch_noise_sigma),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be >= 0, got {v}"));
            }
        }
        if self.latent_dim == 0 || self.num_channels == 0 || self.num_samples == 0 {
            return bad("latent_dim, num_channels and num_samples must be positive".into());
        }
        if !(self.sample_rate_hz > 0.0) {
            return bad("sample_rate_hz must be positive".into());
        }
        if self.num_subjects == 0 || self.repetitions == 0 {
            return bad("num_subjects and repetitions must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.subject_variation) {
            return bad("subject_variation must lie in [0, 1]".into());
        }
        Ok(())
    }
}

// Stream ids; subjects use SUBJECT_BASE + 2s (map) and SUBJECT_BASE + 2s + 1 (noise).
const STREAM_LATENT: u64 = 1;
const STREAM_BRANCH_MAPS: u64 = 2;
const STREAM_BRANCH_NOISE: u64 = 3;
const STREAM_BRAIN_MAP: u64 = 4;
const SUBJECT_BASE: u64 = 1000;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn round_f32(v: f64) -> f64 {
    f64::from(v as f32)
}

/// Pixel-latent resolution whose `H·W/16` equals `dim`, for square images with side a multiple of 8.
fn square_pixel_hw(dim: usize) -> Option<[usize; 2]> {
    let side = ((dim * 16) as f64).sqrt().round() as usize;
    (side * side == dim * 16 && side.is_multiple_of(8)).then_some([side, side])
}

/// Draws the dataset. The last branch is tagged as the pixel-latent branch.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let n = spec.num_stimuli();
    let l = spec.latent_dim;
    let k = spec.branch_dims.len();

    let latent = Tensor::randn(&[n, l], 1.0, &mut stream(spec.seed, STREAM_LATENT)).map(round_f32);

    let mut map_rng = stream(spec.seed, STREAM_BRANCH_MAPS);
    let mut noise_rng = stream(spec.seed, STREAM_BRANCH_NOISE);
    let map_std = 1.0 / (l as f64).sqrt();
    let mut branches = Vec::with_capacity(k);
    let mut payload = Vec::with_capacity(k);
    for (b, (&dim, &w)) in spec
        .branch_dims
        .iter()
        .zip(&spec.branch_info_weights)
        .enumerate()
    {
        let a = Tensor::randn(&[l, dim], map_std, &mut map_rng);
        let noise = Tensor::randn(&[n, dim], spec.branch_noise_sigma.max(0.0), &mut noise_rng);
        let signal = matmul_raw(latent.data(), a.data(), n, l, dim);
        payload.push(
            signal
                .iter()
                .zip(noise.data())
                .map(|(s, e)| (w * s + e) as f32)
                .collect::<Vec<f32>>(),
        );
        let pixel_hw = if b + 1 == k {
            square_pixel_hw(dim)
        } else {
            None
        };
        branches.push(BranchInfo {
            branch_id: b.to_string(),
            name: if b + 1 == k {
                format!("pixel{b}")
            } else {
                format!("semantic{b}")
            },
            dim,
            kind: if b + 1 == k {
                BranchKind::Pixel
            } else {
                BranchKind::Semantic
            },
            pixel_hw,
        });
    }
    let mut source = BTreeMap::new();
    source.insert("generator".into(), "synthetic".into());
    source.insert("seed".into(), spec.seed.to_string());
    let bank = EmbeddingBank {
        num_stimuli: n,
        branches,
        concept_labels: (0..n as u32).collect(),
        partitions: (0..n)
            .map(|i| {
                if i < spec.num_train_stimuli {
                    Partition::Train
                } else {
                    Partition::Test
                }
            })
            .collect(),
        source,
        payload,
    };
    bank.validate()?;

    let (c, t) = (spec.num_channels, spec.num_samples);
    let ct = c * t;
    let shared = Tensor::randn(&[l, ct], map_std, &mut stream(spec.seed, STREAM_BRAIN_MAP));
    let channels: Arc<[String]> = spec.channel_names().into();
    let v = spec.subject_variation;
    let keep = (1.0 - v * v).sqrt();
    let mut recordings = Vec::with_capacity(n * spec.num_subjects * spec.repetitions as usize);
    for s in 0..spec.num_subjects {
        let own = Tensor::randn(
            &[l, ct],
            map_std,
            &mut stream(spec.seed, SUBJECT_BASE + 2 * s as u64),
        );
        let map: Vec<f64> = shared
            .data()
            .iter()
            .zip(own.data())
            .map(|(a, b)| keep * a + v * b)
            .collect();
        let clean = matmul_raw(latent.data(), &map, n, l, ct);
        let mut rng = stream(spec.seed, SUBJECT_BASE + 2 * s as u64 + 1);
        for i in 0..n {
            for r in 0..spec.repetitions {
                let noise = Tensor::randn(&[c, t], 1.0, &mut rng);
                let data = clean[i * ct..(i + 1) * ct]
                    .iter()
                    .zip(noise.data())
                    .map(|(x, e)| round_f32(x + spec.noise_sigma * e))
                    .collect();
                recordings.push(BrainRecording {
                    subject_id: format!("sub{:02}", s + 1),
                    stimulus: i,
                    repetition: r,
                    channels: channels.clone(),
                    sample_rate_hz: spec.sample_rate_hz,
                    window_ms: spec.window_ms(),
                    samples: Tensor::matrix(c, t, data)?,
                });
            }
        }
    }
    Ok(Dataset {
        bank,
        recordings,
        ground_truth: Some(latent),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            num_train_stimuli: 20,
            num_test_stimuli: 10,
            num_subjects: 2,
            repetitions: 2,
            ..SynthSpec::desk()
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let (a, b) = (
            generate_synthetic(&small()).unwrap(),
            generate_synthetic(&small()).unwrap(),
        );
        assert_eq!(a, b);
        let other = generate_synthetic(&SynthSpec { seed: 2, ..small() }).unwrap();
        assert_ne!(a.bank.payload, other.bank.payload);
    }

    #[test]
    fn noiseless_brain_is_linear_in_latent() {
        let spec = SynthSpec {
            noise_sigma: 0.0,
            subject_variation: 0.0,
            num_train_stimuli: 40,
            ..small()
        };
        let d = generate_synthetic(&spec).unwrap();
        let u = d.ground_truth.as_ref().unwrap();
        let ct = spec.num_channels * spec.num_samples;
        let rows: Vec<&BrainRecording> = d
            .recordings
            .iter()
            .filter(|r| r.subject_id == "sub01" && r.repetition == 0)
            .collect();
        // Write u_i as a combination of L other latents; x_i must follow with the same weights.
        let l = spec.latent_dim;
        let basis: Vec<Vec<f64>> = (0..l).map(|j| u.row(j).to_vec()).collect();
        let target = u.row(l + 3).to_vec();
        let coeffs = solve(&transpose(&basis), &target);
        let mut resid = 0.0f64;
        for e in 0..ct {
            let pred: f64 = (0..l).map(|j| coeffs[j] * rows[j].samples.data()[e]).sum();
            resid = resid.max((pred - rows[l + 3].samples.data()[e]).abs());
        }
        assert!(resid < 1e-4, "residual {resid}");
        // repetitions are identical when noise is zero
        let reps: Vec<_> = d
            .recordings
            .iter()
            .filter(|r| r.subject_id == "sub01" && r.stimulus == 0)
            .collect();
        assert_eq!(reps[0].samples, reps[1].samples);
    }

    fn transpose(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
        (0..m[0].len())
            .map(|j| m.iter().map(|r| r[j]).collect())
            .collect()
    }

    fn solve(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
        let n = b.len();
        let mut m: Vec<Vec<f64>> = a
            .iter()
            .zip(b)
            .map(|(r, &v)| [r.clone(), vec![v]].concat())
            .collect();
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
                .unwrap();
            m.swap(col, piv);
            for r in 0..n {
                if r != col {
                    let f = m[r][col] / m[col][col];
                    for c in col..=n {
                        m[r][c] -= f * m[col][c];
                    }
                }
            }
        }
        (0..n).map(|i| m[i][n] / m[i][i]).collect()
    }

    #[test]
    fn zero_weight_branches_are_uncorrelated_with_latent() {
        let spec = SynthSpec {
            num_train_stimuli: 500,
            num_test_stimuli: 500,
            branch_info_weights: vec![1.0, 0.0, 0.0],
            num_subjects: 1,
            repetitions: 1,
            num_channels: 2,
            num_samples: 2,
            ..SynthSpec::desk()
        };
        let d = generate_synthetic(&spec).unwrap();
        let u = d.ground_truth.unwrap();
        let corr = |x: &[f64], y: &[f64]| {
            let n = x.len() as f64;
            let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
            let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
            let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
            let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
            cov / (vx * vy).sqrt()
        };
        let col = |t: &Tensor, j: usize| (0..t.rows()).map(|i| t.row(i)[j]).collect::<Vec<f64>>();
        let all = (0..d.bank.num_stimuli).collect::<Vec<_>>();
        let mut informative = 0.0f64;
        for k in 0..3 {
            let b = d.bank.branch_rows(k, &all);
            for j in 0..4 {
                for li in 0..4 {
                    let r = corr(&col(&b, j), &col(&u, li)).abs();
                    if k == 0 {
                        informative = informative.max(r);
                    } else {
                        assert!(r < 0.1, "branch {k} feature {j} vs latent {li}: {r}");
                    }
                }
            }
        }
        assert!(informative > 0.1);
    }

    #[test]
    fn splits_are_zero_shot_and_montage_has_o_plus_p() {
        let d = generate_synthetic(&small()).unwrap();
        d.bank.validate().unwrap();
        assert_eq!(d.bank.indices(Partition::Test).len(), 10);
        let names = small().channel_names();
        assert_eq!(names.len(), 24);
        assert_eq!(&names[7..], O_PLUS_P.map(String::from).as_slice());
        assert_eq!(d.recordings.len(), 30 * 2 * 2);
    }

    #[test]
    fn invalid_specs_rejected() {
        for s in [
            SynthSpec {
                branch_info_weights: vec![0.0, 0.0, 0.0],
                ..small()
            },
            SynthSpec {
                branch_info_weights: vec![1.0],
                ..small()
            },
            SynthSpec {
                noise_sigma: -1.0,
                ..small()
            },
            SynthSpec {
                branch_dims: vec![4, 0, 4],
                ..small()
            },
        ] {
            assert!(matches!(generate_synthetic(&s), Err(Error::Config(_))));
        }
    }
}
