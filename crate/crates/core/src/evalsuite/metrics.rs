//! Low-level reconstruction metrics: pixel correlation and SSIM.
//!
//! Images are tensors `[H × W]` (grayscale) or `[H × W × 3]` (RGB) with
//! values in `[0, 1]`. [`eval_pair`] brings both to the shared evaluation
//! resolution before scoring.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::Tensor;

/// Side length both images are resized to before scoring.
pub const EVAL_RESOLUTION: usize = 256;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const SSIM_RANGE: f64 = 1.0;

fn dims(img: &Tensor) -> Result<(usize, usize, usize)> {
    match *img.shape() {
        [h, w] => Ok((h, w, 1)),
        [h, w, c] if c == 1 || c == 3 => Ok((h, w, c)),
        ref s => Err(Error::Shape(format!(
            "image must be [H, W] or [H, W, 3], got {s:?}"
        ))),
    }
}

/// Pearson correlation over all flattened values.
pub fn pixcorr(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "pixcorr: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let n = a.numel() as f64;
    let (ma, mb) = (
        a.data().iter().sum::<f64>() / n,
        b.data().iter().sum::<f64>() / n,
    );
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Degenerate(
            "pixcorr of a constant image is undefined".into(),
        ));
    }
    Ok(sab / (saa * sbb).sqrt())
}

/// ITU-R BT.601 luma; grayscale input is returned unchanged.
pub fn to_gray(img: &Tensor) -> Result<Tensor> {
    let (h, w, c) = dims(img)?;
    if c == 1 {
        return img.reshape(&[h, w]);
    }
    let data = img
        .data()
        .chunks_exact(3)
        .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
        .collect();
    Tensor::new(vec![h, w], data)
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w, c) = dims(img)?;
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    let src = img.data();
    let coord = |i: usize, n_in: usize, n_out: usize| {
        let x = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = x.floor() as usize;
        (lo, (lo + 1).min(n_in - 1), x - lo as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for i in 0..out_h {
        let (y0, y1, fy) = coord(i, h, out_h);
        for j in 0..out_w {
            let (x0, x1, fx) = coord(j, w, out_w);
            for ch in 0..c {
                let at = |y: usize, x: usize| src[(y * w + x) * c + ch];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    let shape = if img.shape().len() == 2 {
        vec![out_h, out_w]
    } else {
        vec![out_h, out_w, c]
    };
    Tensor::new(shape, out)
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let mid = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - mid).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of an `h × w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x0 in 0..ow {
            rows[y * ow + x0] = taps
                .iter()
                .enumerate()
                .map(|(t, g)| g * x[y * w + x0 + t])
                .sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y0 in 0..oh {
        for x0 in 0..ow {
            out[y0 * ow + x0] = taps
                .iter()
                .enumerate()
                .map(|(t, g)| g * rows[(y0 + t) * ow + x0])
                .sum();
        }
    }
    out
}

/// Mean SSIM over every position where the 11×11 Gaussian window fits.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (ga, gb) = (to_gray(a)?, to_gray(b)?);
    if ga.shape() != gb.shape() {
        return Err(Error::Shape(format!(
            "ssim: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (h, w) = (ga.shape()[0], ga.shape()[1]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Contract(format!(
            "ssim needs images of at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {h}×{w}"
        )));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let (x, y) = (ga.data(), gb.data());
    let prod = |f: &dyn Fn(usize) -> f64| (0..x.len()).map(f).collect::<Vec<f64>>();
    let mu_a = filter_valid(x, h, w, &taps);
    let mu_b = filter_valid(y, h, w, &taps);
    let e_aa = filter_valid(&prod(&|i| x[i] * x[i]), h, w, &taps);
    let e_bb = filter_valid(&prod(&|i| y[i] * y[i]), h, w, &taps);
    let e_ab = filter_valid(&prod(&|i| x[i] * y[i]), h, w, &taps);
    let c1 = (SSIM_K1 * SSIM_RANGE).powi(2);
    let c2 = (SSIM_K2 * SSIM_RANGE).powi(2);
    let total: f64 = (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / mu_a.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LowLevelMetrics {
    pub pixcorr: f64,
    pub ssim: f64,
}

/// Resizes both images to the evaluation resolution, then scores PixCorr (all channels) and SSIM (luma).
pub fn eval_pair(reference: &Tensor, candidate: &Tensor) -> Result<LowLevelMetrics> {
    let a = resize_bilinear(reference, EVAL_RESOLUTION, EVAL_RESOLUTION)?;
    let b = resize_bilinear(candidate, EVAL_RESOLUTION, EVAL_RESOLUTION)?;
    Ok(LowLevelMetrics {
        pixcorr: pixcorr(&a, &b)?,
        ssim: ssim(&a, &b)?,
    })
}
