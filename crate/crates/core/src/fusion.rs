//! Hierarchical visual fuser.
//!
//! Each encoder branch `k` is mapped to the shared width by a bias-free
//! linear map, the aligned features are summed, and the sum passes through
//! a post-norm residual MLP: `z_f = LayerNorm(z̄ + φ(z̄))`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::{Tape, Tensor, Var};
use crate::nn::{init_weight, residual_norm_forward, Mlp, Module};

pub const DEFAULT_SHARED_DIM: usize = 1024;
pub const DEFAULT_FUSE_HIDDEN: usize = 1024;

/// Which encoder branches contribute at inference time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct BranchMask {
    active: Vec<bool>,
}

impl BranchMask {
    pub fn all(num_branches: usize) -> Self {
        BranchMask {
            active: vec![true; num_branches],
        }
    }

    pub fn new(active: Vec<bool>) -> Result<Self> {
        if !active.iter().any(|&a| a) {
            return Err(Error::Mask("at least one branch must stay active".into()));
        }
        Ok(BranchMask { active })
    }

    /// Full mask with branch `k` (0-based) zeroed.
    pub fn without(num_branches: usize, k: usize) -> Result<Self> {
        let mut active = vec![true; num_branches];
        if k >= num_branches {
            return Err(Error::Mask(format!(
                "branch {k} out of range for {num_branches} branches"
            )));
        }
        active[k] = false;
        BranchMask::new(active)
    }

    /// Mask with only branch `k` active.
    pub fn only(num_branches: usize, k: usize) -> Result<Self> {
        if k >= num_branches {
            return Err(Error::Mask(format!(
                "branch {k} out of range for {num_branches} branches"
            )));
        }
        BranchMask::new((0..num_branches).map(|i| i == k).collect())
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    pub fn is_active(&self, k: usize) -> bool {
        self.active[k]
    }

    pub fn is_full(&self) -> bool {
        self.active.iter().all(|&a| a)
    }

    pub fn active(&self) -> &[bool] {
        &self.active
    }
}

impl fmt::Display for BranchMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s: Vec<&str> = self
            .active
            .iter()
            .map(|&a| if a { "1" } else { "0" })
            .collect();
        f.write_str(&s.join(","))
    }
}

impl TryFrom<String> for BranchMask {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<BranchMask> for String {
    fn from(m: BranchMask) -> String {
        m.to_string()
    }
}

/// Parses `"1,0,1"`.
impl FromStr for BranchMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let active = s
            .split(',')
            .map(|p| match p.trim() {
                "1" | "on" | "true" => Ok(true),
                "0" | "off" | "false" => Ok(false),
                other => Err(Error::Mask(format!("bad mask entry `{other}` in `{s}`"))),
            })
            .collect::<Result<Vec<_>>>()?;
        BranchMask::new(active)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HvfParams {
    pub branch_maps: Vec<Tensor>,
    pub fuse_mlp: Mlp,
    pub ln_gamma: Tensor,
    pub ln_beta: Tensor,
}

impl HvfParams {
    pub fn init<R: Rng + ?Sized>(branch_dims: &[usize], d: usize, d_v: usize, rng: &mut R) -> Self {
        HvfParams {
            branch_maps: branch_dims
                .iter()
                .map(|&dk| init_weight(dk, d, rng))
                .collect(),
            fuse_mlp: Mlp::init(d, d_v, d, rng),
            ln_gamma: Tensor::filled(&[d], 1.0),
            ln_beta: Tensor::zeros(&[d]),
        }
    }

    /// All-zero parameters with the right shapes; used as a checkpoint loading target.
    pub fn zeros(branch_dims: &[usize], d: usize, d_v: usize) -> Self {
        HvfParams {
            branch_maps: branch_dims
                .iter()
                .map(|&dk| Tensor::zeros(&[dk, d]))
                .collect(),
            fuse_mlp: Mlp::zeros(d, d_v, d),
            ln_gamma: Tensor::filled(&[d], 1.0),
            ln_beta: Tensor::zeros(&[d]),
        }
    }

    pub fn shared_dim(&self) -> usize {
        self.ln_gamma.numel()
    }

    pub fn hidden_dim(&self) -> usize {
        self.fuse_mlp.hidden_dim()
    }

    pub fn num_branches(&self) -> usize {
        self.branch_maps.len()
    }

    pub fn branch_dims(&self) -> Vec<usize> {
        self.branch_maps.iter().map(|w| w.shape()[0]).collect()
    }

    fn check_inputs(
        &self,
        dims: impl Iterator<Item = (usize, usize)>,
        n: usize,
        mask: &BranchMask,
    ) -> Result<()> {
        if n != self.num_branches() {
            return Err(Error::Shape(format!(
                "hvf: expected {} branch embeddings, got {n}",
                self.num_branches()
            )));
        }
        if mask.len() != n {
            return Err(Error::Shape(format!(
                "hvf: mask covers {} branches, model has {n}",
                mask.len()
            )));
        }
        if !mask.active().iter().any(|&a| a) {
            return Err(Error::Mask("hvf: all branches masked".into()));
        }
        let mut rows = None;
        for (k, (r, c)) in dims.enumerate() {
            let dk = self.branch_maps[k].shape()[0];
            if c != dk {
                return Err(Error::Shape(format!(
                    "hvf: branch {k} embedding width {c}, expected {dk}"
                )));
            }
            if *rows.get_or_insert(r) != r {
                return Err(Error::Shape("hvf: branch batch sizes differ".into()));
            }
        }
        Ok(())
    }

    /// `z̄ = Σ_k mask_k · z^(k) W^(k)` on the tape; `maps` are the bound branch maps.
    pub fn aggregate_on(
        &self,
        tape: &mut Tape,
        maps: &[Var],
        embeddings: &[Var],
        mask: &BranchMask,
    ) -> Result<Var> {
        let dims: Vec<(usize, usize)> = embeddings
            .iter()
            .map(|&e| {
                let v = tape.value(e);
                (v.rows(), v.cols())
            })
            .collect();
        self.check_inputs(dims.into_iter(), embeddings.len(), mask)?;
        let mut parts = Vec::with_capacity(embeddings.len());
        for (k, (&emb, &w)) in embeddings.iter().zip(maps).enumerate() {
            if mask.is_active(k) {
                parts.push(tape.matmul(emb, w)?);
            }
        }
        tape.add_n(&parts)
    }

    /// Fused embedding `[n × d]` for bound parameters `vars` (ordered as [`Module::named_tensors`]).
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        embeddings: &[Var],
        mask: &BranchMask,
    ) -> Result<Var> {
        let k = self.num_branches();
        if vars.len() != k + 6 {
            return Err(Error::Shape(format!(
                "hvf: expected {} bound tensors, got {}",
                k + 6,
                vars.len()
            )));
        }
        let (maps, block) = vars.split_at(k);
        let zbar = self.aggregate_on(tape, maps, embeddings, mask)?;
        residual_norm_forward(tape, block, zbar)
    }

    /// Gradient-free convenience wrapper.
    pub fn forward(&self, embeddings: &[Tensor], mask: &BranchMask) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let embs: Vec<Var> = embeddings
            .iter()
            .map(|e| tape.constant(e.clone()))
            .collect();
        let out = self.forward_on(&mut tape, &vars, &embs, mask)?;
        Ok(tape.value(out).clone())
    }

    /// Pre-MLP aggregate `z̄` without gradients.
    pub fn aggregate(&self, embeddings: &[Tensor], mask: &BranchMask) -> Result<Tensor> {
        let mut tape = Tape::new();
        let maps: Vec<Var> = self
            .branch_maps
            .iter()
            .map(|w| tape.constant(w.clone()))
            .collect();
        let embs: Vec<Var> = embeddings
            .iter()
            .map(|e| tape.constant(e.clone()))
            .collect();
        let out = self.aggregate_on(&mut tape, &maps, &embs, mask)?;
        Ok(tape.value(out).clone())
    }

    /// Branch `k`'s aligned features `z^(k) W^(k)`.
    pub fn project_branch(&self, k: usize, embedding: &Tensor) -> Result<Tensor> {
        let w = self
            .branch_maps
            .get(k)
            .ok_or_else(|| Error::Shape(format!("hvf: no branch {k}")))?;
        let mut tape = Tape::new();
        let (e, wv) = (tape.constant(embedding.clone()), tape.constant(w.clone()));
        let out = tape.matmul(e, wv)?;
        Ok(tape.value(out).clone())
    }
}

impl Module for HvfParams {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self
            .branch_maps
            .iter()
            .enumerate()
            .map(|(k, w)| (format!("branch_map.{k}"), w))
            .collect();
        out.extend(self.fuse_mlp.named("fuse_mlp"));
        out.push(("ln.gamma".into(), &self.ln_gamma));
        out.push(("ln.beta".into(), &self.ln_beta));
        out
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = self
            .branch_maps
            .iter_mut()
            .enumerate()
            .map(|(k, w)| (format!("branch_map.{k}"), w))
            .collect();
        out.extend(self.fuse_mlp.named_mut("fuse_mlp"));
        out.push(("ln.gamma".into(), &mut self.ln_gamma));
        out.push(("ln.beta".into(), &mut self.ln_beta));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndgrad::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn identity_pipeline() {
        let d = 4;
        let mut p = HvfParams::zeros(&[d], d, 3);
        p.branch_maps[0] = Tensor::eye(d);
        // zero mean, unit population variance
        let x = Tensor::from_rows(&[vec![1.0, -1.0, 1.0, -1.0]]);
        let out = p.forward(&[x.clone()], &BranchMask::all(1)).unwrap();
        assert!(out.max_abs_diff(&x) < 1e-6);
    }

    #[test]
    fn shared_dim_at_full_scale() {
        let mut r = rng(0);
        let p = HvfParams::init(
            &[1024, 512, 1024],
            DEFAULT_SHARED_DIM,
            DEFAULT_FUSE_HIDDEN,
            &mut r,
        );
        for n in [1, 3] {
            let embs: Vec<Tensor> = p
                .branch_dims()
                .iter()
                .map(|&dk| Tensor::randn(&[n, dk], 1.0, &mut r))
                .collect();
            let out = p.forward(&embs, &BranchMask::all(3)).unwrap();
            assert_eq!(out.shape(), &[n, 1024]);
        }
    }

    fn small() -> (HvfParams, Vec<Tensor>) {
        let mut r = rng(11);
        let p = HvfParams::init(&[3, 5, 2], 6, 7, &mut r);
        let embs = p
            .branch_dims()
            .iter()
            .map(|&dk| Tensor::randn(&[4, dk], 1.0, &mut r))
            .collect();
        (p, embs)
    }

    #[test]
    fn masking_equals_zeroed_branch() {
        let (p, embs) = small();
        for k in 0..3 {
            let masked = p
                .forward(&embs, &BranchMask::without(3, k).unwrap())
                .unwrap();
            let mut zeroed = embs.clone();
            zeroed[k] = Tensor::zeros(embs[k].shape());
            let reference = p.forward(&zeroed, &BranchMask::all(3)).unwrap();
            assert_eq!(masked, reference);
        }
    }

    #[test]
    fn aggregate_is_additive_over_branches() {
        let (p, embs) = small();
        let full = p.aggregate(&embs, &BranchMask::all(3)).unwrap();
        let parts: Vec<Tensor> = (0..3)
            .map(|k| {
                p.aggregate(&embs, &BranchMask::only(3, k).unwrap())
                    .unwrap()
            })
            .collect();
        // sum each element's addends smallest-first
        for e in 0..full.numel() {
            let mut v: Vec<f64> = parts.iter().map(|t| t.data()[e]).collect();
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            assert_eq!(full.data()[e], v[0] + v[1] + v[2]);
        }
    }

    #[test]
    fn branch_permutation_is_exact() {
        let (p, embs) = small();
        let out = p.forward(&embs, &BranchMask::all(3)).unwrap();
        for perm in [[1, 0, 2], [2, 1, 0], [1, 2, 0], [2, 0, 1], [0, 2, 1]] {
            let mut q = p.clone();
            q.branch_maps = perm.iter().map(|&i| p.branch_maps[i].clone()).collect();
            let e2: Vec<Tensor> = perm.iter().map(|&i| embs[i].clone()).collect();
            let out2 = q.forward(&e2, &BranchMask::all(3)).unwrap();
            assert_eq!(out, out2);
        }
    }

    #[test]
    fn layer_norm_contract() {
        let (p, embs) = small();
        let out = p.forward(&embs, &BranchMask::all(3)).unwrap();
        for i in 0..out.rows() {
            let row = out.row(i);
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / row.len() as f64;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-6, "{var}");
        }
    }

    #[test]
    fn errors() {
        let (p, embs) = small();
        assert!(matches!(
            p.forward(&embs[..2], &BranchMask::all(2)),
            Err(Error::Shape(_))
        ));
        assert!(BranchMask::new(vec![false, false, false]).is_err());
        assert!("1,0,x".parse::<BranchMask>().is_err());
        assert_eq!("1,0,1".parse::<BranchMask>().unwrap().to_string(), "1,0,1");
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut r = rng(5);
        let p = HvfParams::init(&[3, 2], 4, 5, &mut r);
        let embs: Vec<Tensor> = p
            .branch_dims()
            .iter()
            .map(|&dk| Tensor::randn(&[2, dk], 1.0, &mut r))
            .collect();
        let weights = Tensor::randn(&[2, 4], 1.0, &mut r);
        let mut inputs: Vec<Tensor> = p
            .named_tensors()
            .into_iter()
            .map(|(_, t)| t.clone())
            .collect();
        let np = inputs.len();
        inputs.extend(embs);
        let report = check_gradients(
            &inputs,
            |tape, vars| {
                let out = p.forward_on(tape, &vars[..np], &vars[np..], &BranchMask::all(2))?;
                let w = tape.constant(weights.clone());
                let d = tape.sub(out, w)?;
                tape.sum_squares(d)
            },
            1e-5,
        )
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }
}
