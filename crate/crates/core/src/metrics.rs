//! Reconstruction quality metrics: PSNR, SSIM and RMSE in 0–255 units.

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn mse(a: &Tensor, b: &Tensor, op: &'static str) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::mismatch(op, a.shape(), b.shape()));
    }
    if a.is_empty() {
        return Err(Error::InvalidArgument(format!("{op}: empty tensors")));
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum / a.len() as f64)
}

/// Peak signal-to-noise ratio in dB; identical inputs give `f64::INFINITY`.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    let m = mse(a, b, "psnr")?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

/// Root-mean-square error of `[0, 1]` data expressed in 0–255 units.
pub fn rmse255(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(255.0 * mse(a, b, "rmse255")?.sqrt())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn ssim_window() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable "valid" filtering of one plane with the SSIM window.
fn filter_valid(src: &[f64], h: usize, w: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut tmp = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            tmp[r * ow + c] = (0..SSIM_WINDOW).map(|k| win[k] * src[r * w + c + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..SSIM_WINDOW).map(|k| win[k] * tmp[(r + k) * ow + c]).sum();
        }
    }
    out
}

/// Mean structural similarity with an 11×11 Gaussian window (σ = 1.5),
/// `K₁ = 0.01`, `K₂ = 0.03` and peak 1, averaged over every `(n, c)` plane.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    let s = a.shape();
    if s != b.shape() {
        return Err(Error::mismatch("ssim", s, b.shape()));
    }
    if s.h < SSIM_WINDOW || s.w < SSIM_WINDOW {
        return Err(Error::invalid_shape("ssim", s, "smaller than the 11×11 window"));
    }
    let win = ssim_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let p = s.plane();
    let mut total = 0.0;
    for nc in 0..s.n * s.c {
        let x: Vec<f64> = a.data()[nc * p..(nc + 1) * p].iter().map(|&v| v as f64).collect();
        let y: Vec<f64> = b.data()[nc * p..(nc + 1) * p].iter().map(|&v| v as f64).collect();
        let prod = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(a, b)| a * b).collect::<Vec<_>>();
        let mx = filter_valid(&x, s.h, s.w, &win);
        let my = filter_valid(&y, s.h, s.w, &win);
        let sxx = filter_valid(&prod(&x, &x), s.h, s.w, &win);
        let syy = filter_valid(&prod(&y, &y), s.h, s.w, &win);
        let sxy = filter_valid(&prod(&x, &y), s.h, s.w, &win);
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / (s.n * s.c) as f64)
}

/// Metrics of one reconstructed image against its reference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageMetrics {
    pub psnr_db: f64,
    pub ssim: f64,
    pub rmse255: f64,
}

impl ImageMetrics {
    pub fn compute(pred: &Tensor, truth: &Tensor) -> Result<Self> {
        Ok(ImageMetrics {
            psnr_db: psnr(pred, truth, 1.0)?,
            ssim: ssim(pred, truth)?,
            rmse255: rmse255(pred, truth)?,
        })
    }
}

/// Per-image metrics plus their means (per-image metrics averaged, not pooled).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub label: String,
    pub per_image: Vec<ImageMetrics>,
}

impl MetricReport {
    pub fn new(label: impl Into<String>) -> Self {
        MetricReport {
            label: label.into(),
            per_image: Vec::new(),
        }
    }

    pub fn push(&mut self, m: ImageMetrics) {
        self.per_image.push(m);
    }

    pub fn mean(&self) -> ImageMetrics {
        let n = self.per_image.len().max(1) as f64;
        let sum = |f: fn(&ImageMetrics) -> f64| self.per_image.iter().map(f).sum::<f64>() / n;
        ImageMetrics {
            psnr_db: sum(|m| m.psnr_db),
            ssim: sum(|m| m.ssim),
            rmse255: sum(|m| m.rmse255),
        }
    }

    pub fn csv_header() -> &'static str {
        "label,image,psnr_db,ssim,rmse255"
    }

    /// One CSV row per image followed by a `mean` row.
    pub fn to_csv_rows(&self) -> String {
        let mut out = String::new();
        for (i, m) in self.per_image.iter().enumerate() {
            out.push_str(&format!(
                "{},{i},{:.6},{:.6},{:.6}\n",
                self.label, m.psnr_db, m.ssim, m.rmse255
            ));
        }
        let m = self.mean();
        out.push_str(&format!(
            "{},mean,{:.6},{:.6},{:.6}\n",
            self.label, m.psnr_db, m.ssim, m.rmse255
        ));
        out
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = self.mean();
        write!(
            f,
            "{:<24} {:>10.4} {:>8.4} {:>9.4}",
            self.label, m.psnr_db, m.ssim, m.rmse255
        )
    }
}

/// Renders reports as an aligned table with a header row.
pub fn format_table(reports: &[MetricReport]) -> String {
    let mut out = format!("{:<24} {:>10} {:>8} {:>9}\n", "method", "PSNR(dB)", "SSIM", "RMSE255");
    for r in reports {
        out.push_str(&format!("{r}\n"));
    }
    out
}
