//! Linear observation operators and synthetic paired-contrast data.
//!
//! `DK` blurs an HR image with a normalised 3×3 Gaussian (reflect boundary)
//! and keeps the top-left sample of every `scale×scale` block. `P` is a fixed
//! 3×3 correlation with a gain. Both come with exact adjoints; all kernels are
//! evaluated in `f64` and rounded once at the end.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Mirror index without repeating the edge sample (`-1 -> 1`, `n -> n-2`).
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * n - 2 - i
    } else {
        i
    };
    r as usize
}

/// Samples of the 2-D Gaussian on the 3×3 integer grid, normalised to sum 1.
pub fn gaussian_kernel3(sigma: f64) -> Result<[f32; 9]> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "blur sigma must be positive, got {sigma}"
        )));
    }
    let mut k = [0.0f64; 9];
    for dy in -1i32..=1 {
        for dx in -1i32..=1 {
            k[((dy + 1) * 3 + dx + 1) as usize] = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
        }
    }
    let total: f64 = k.iter().sum();
    Ok(k.map(|v| (v / total) as f32))
}

/// Identity 3×3 kernel.
pub const IDENTITY_KERNEL: [f32; 9] = [0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0];

/// `out[p, q] = Σ k[a, b] · z[reflect(p·s + a − 1), reflect(q·s + b − 1)]`
/// for one `(hh, ww)` plane, producing a `(hh/s, ww/s)` plane. With `s = 1`
/// this is plain reflect-padded correlation.
pub(crate) fn correlate_sample(z: &[f64], hh: usize, ww: usize, k: &[f64; 9], s: usize, out: &mut [f64]) {
    let (h, w) = (hh / s, ww / s);
    for p in 0..h {
        for q in 0..w {
            let (cy, cx) = ((p * s) as isize, (q * s) as isize);
            let mut acc = 0.0;
            for a in 0..3 {
                let row = reflect(cy + a as isize - 1, hh) * ww;
                for b in 0..3 {
                    acc += k[a * 3 + b] * z[row + reflect(cx + b as isize - 1, ww)];
                }
            }
            out[p * w + q] = acc;
        }
    }
}

/// Exact adjoint of [`correlate_sample`]: scatters each low-resolution value
/// back through the reflected taps. `out` must be zeroed by the caller.
pub(crate) fn correlate_sample_adjoint(x: &[f64], hh: usize, ww: usize, k: &[f64; 9], s: usize, out: &mut [f64]) {
    let (h, w) = (hh / s, ww / s);
    for p in 0..h {
        for q in 0..w {
            let v = x[p * w + q];
            if v == 0.0 {
                continue;
            }
            let (cy, cx) = ((p * s) as isize, (q * s) as isize);
            for a in 0..3 {
                let row = reflect(cy + a as isize - 1, hh) * ww;
                for b in 0..3 {
                    out[row + reflect(cx + b as isize - 1, ww)] += k[a * 3 + b] * v;
                }
            }
        }
    }
}

fn widen(k: &[f32; 9]) -> [f64; 9] {
    k.map(f64::from)
}

/// Applies a per-plane `f64` kernel to every `(n, c)` plane of `t`.
fn per_plane(t: &Tensor, out_shape: Shape, f: impl Fn(&[f64], &mut [f64])) -> Tensor {
    let s = t.shape();
    let plane_in = s.plane();
    let plane_out = out_shape.plane();
    let mut out = Vec::with_capacity(out_shape.len());
    let mut src = vec![0.0f64; plane_in];
    let mut dst = vec![0.0f64; plane_out];
    for nc in 0..s.n * s.c {
        for (d, &v) in src.iter_mut().zip(&t.data()[nc * plane_in..(nc + 1) * plane_in]) {
            *d = v as f64;
        }
        dst.fill(0.0);
        f(&src, &mut dst);
        out.extend(dst.iter().map(|&v| v as f32));
    }
    Tensor::from_vec(out_shape, out).expect("plane kernel shape")
}

/// Blur-then-decimate observation model `X = DKZ + N₁`.
#[derive(Debug, Clone, PartialEq)]
pub struct DegradationOp {
    pub kernel: [f32; 9],
    pub scale: usize,
    pub noise_std: f32,
}

impl DegradationOp {
    pub fn new(scale: usize, sigma: f64, noise_std: f32) -> Result<Self> {
        if scale == 0 {
            return Err(Error::InvalidArgument("scale must be positive".into()));
        }
        if !(noise_std >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "noise std must be non-negative, got {noise_std}"
            )));
        }
        Ok(DegradationOp {
            kernel: gaussian_kernel3(sigma)?,
            scale,
            noise_std,
        })
    }

    fn check_hr(&self, op: &'static str, s: Shape) -> Result<()> {
        if !s.h.is_multiple_of(self.scale) || !s.w.is_multiple_of(self.scale) {
            return Err(Error::invalid_shape(
                op,
                s,
                format!("not divisible by scale {}", self.scale),
            ));
        }
        if s.h < 2 || s.w < 2 {
            return Err(Error::invalid_shape(op, s, "reflect padding needs at least 2×2"));
        }
        Ok(())
    }

    pub fn lr_shape(&self, hr: Shape) -> Shape {
        hr.with_spatial(hr.h / self.scale, hr.w / self.scale)
    }

    pub fn hr_shape(&self, lr: Shape) -> Shape {
        lr.with_spatial(lr.h * self.scale, lr.w * self.scale)
    }

    /// `DK·z`.
    pub fn apply(&self, z: &Tensor) -> Result<Tensor> {
        let s = z.shape();
        self.check_hr("apply_dk", s)?;
        let k = widen(&self.kernel);
        Ok(per_plane(z, self.lr_shape(s), |src, dst| {
            correlate_sample(src, s.h, s.w, &k, self.scale, dst)
        }))
    }

    /// `(DK)ᵀ·x`: zero-insertion upsampling followed by the adjoint of the
    /// reflect-padded blur.
    pub fn adjoint(&self, x: &Tensor) -> Result<Tensor> {
        let hr = self.hr_shape(x.shape());
        self.check_hr("apply_dk_adjoint", hr)?;
        let k = widen(&self.kernel);
        Ok(per_plane(x, hr, |src, dst| {
            correlate_sample_adjoint(src, hr.h, hr.w, &k, self.scale, dst)
        }))
    }

    /// `f64` forward on one plane, used by the conjugate-gradient oracle.
    pub(crate) fn apply_plane_f64(&self, z: &[f64], hh: usize, ww: usize) -> Vec<f64> {
        let mut out = vec![0.0; (hh / self.scale) * (ww / self.scale)];
        correlate_sample(z, hh, ww, &widen(&self.kernel), self.scale, &mut out);
        out
    }

    pub(crate) fn adjoint_plane_f64(&self, x: &[f64], hh: usize, ww: usize) -> Vec<f64> {
        let mut out = vec![0.0; hh * ww];
        correlate_sample_adjoint(x, hh, ww, &widen(&self.kernel), self.scale, &mut out);
        out
    }
}

/// Apply `DK` to `z`. See [`DegradationOp::apply`].
pub fn apply_dk(z: &Tensor, op: &DegradationOp) -> Result<Tensor> {
    op.apply(z)
}

/// Apply `(DK)ᵀ` to `x`. See [`DegradationOp::adjoint`].
pub fn apply_dk_adjoint(x: &Tensor, op: &DegradationOp) -> Result<Tensor> {
    op.adjoint(x)
}

/// Linear cross-modal map `P z = gain · (kernel ⋆ z)` with reflect boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearCrossModalOp {
    pub kernel: [f32; 9],
    pub gain: f32,
    pub noise_std: f32,
}

impl LinearCrossModalOp {
    pub fn identity() -> Self {
        LinearCrossModalOp {
            kernel: IDENTITY_KERNEL,
            gain: 1.0,
            noise_std: 0.0,
        }
    }

    /// Gaussian kernel of width `sigma` scaled by `gain`.
    pub fn gaussian(sigma: f64, gain: f32, noise_std: f32) -> Result<Self> {
        if !(noise_std >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "noise std must be non-negative, got {noise_std}"
            )));
        }
        Ok(LinearCrossModalOp {
            kernel: gaussian_kernel3(sigma)?,
            gain,
            noise_std,
        })
    }

    fn gained(&self) -> [f64; 9] {
        self.kernel.map(|v| v as f64 * self.gain as f64)
    }

    fn check(&self, op: &'static str, s: Shape) -> Result<()> {
        if s.h < 2 || s.w < 2 {
            return Err(Error::invalid_shape(op, s, "reflect padding needs at least 2×2"));
        }
        Ok(())
    }

    pub fn apply(&self, z: &Tensor) -> Result<Tensor> {
        let s = z.shape();
        self.check("apply_p", s)?;
        let k = self.gained();
        Ok(per_plane(z, s, |src, dst| correlate_sample(src, s.h, s.w, &k, 1, dst)))
    }

    pub fn adjoint(&self, y: &Tensor) -> Result<Tensor> {
        let s = y.shape();
        self.check("apply_p_adjoint", s)?;
        let k = self.gained();
        Ok(per_plane(y, s, |src, dst| {
            correlate_sample_adjoint(src, s.h, s.w, &k, 1, dst)
        }))
    }

    pub(crate) fn apply_plane_f64(&self, z: &[f64], h: usize, w: usize) -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        correlate_sample(z, h, w, &self.gained(), 1, &mut out);
        out
    }

    pub(crate) fn adjoint_plane_f64(&self, y: &[f64], h: usize, w: usize) -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        correlate_sample_adjoint(y, h, w, &self.gained(), 1, &mut out);
        out
    }
}

pub fn apply_p(z: &Tensor, op: &LinearCrossModalOp) -> Result<Tensor> {
    op.apply(z)
}

pub fn apply_p_adjoint(y: &Tensor, op: &LinearCrossModalOp) -> Result<Tensor> {
    op.adjoint(y)
}

/// One reconstruction instance: LR target `x`, HR guide `y`, optional HR truth `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconProblem {
    pub x: Tensor,
    pub y: Tensor,
    pub z: Option<Tensor>,
    pub scale: usize,
}

impl ReconProblem {
    pub fn new(x: Tensor, y: Tensor, z: Option<Tensor>, scale: usize) -> Result<Self> {
        let (xs, ys) = (x.shape(), y.shape());
        if scale == 0 || xs.n != ys.n || xs.c != ys.c || ys.h != xs.h * scale || ys.w != xs.w * scale {
            return Err(Error::mismatch("recon_problem", xs, ys));
        }
        if let Some(z) = &z {
            if z.shape() != ys {
                return Err(Error::mismatch("recon_problem", z.shape(), ys));
            }
        }
        Ok(ReconProblem { x, y, z, scale })
    }

    pub fn hr_shape(&self) -> Shape {
        self.y.shape()
    }
}

/// Random ellipse phantom rendered in two contrasts that share geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub ellipses: usize,
    /// Tissue labels are `0..=levels`.
    pub levels: u8,
    /// `(offset, slope)`: intensity = offset + slope · label / levels.
    pub target_map: (f32, f32),
    pub guide_map: (f32, f32),
}

impl PhantomSpec {
    pub fn new(seed: u64, height: usize, width: usize) -> Self {
        PhantomSpec {
            seed,
            height,
            width,
            ellipses: 6,
            levels: 4,
            target_map: (0.1, 0.8),
            guide_map: (0.9, -0.7),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub labels: Vec<u8>,
    /// Target contrast, `(1, 1, h, w)`.
    pub target: Tensor,
    /// Guide contrast, same geometry, different intensity map.
    pub guide: Tensor,
}

impl Phantom {
    pub fn generate(spec: &PhantomSpec) -> Result<Phantom> {
        let (h, w) = (spec.height, spec.width);
        if h == 0 || w == 0 || spec.levels == 0 {
            return Err(Error::InvalidArgument("phantom needs positive size and levels".into()));
        }
        for (_, slope) in [spec.target_map, spec.guide_map] {
            if slope == 0.0 {
                return Err(Error::InvalidArgument("intensity maps must be injective".into()));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut labels = vec![0u8; h * w];
        for e in 0..spec.ellipses {
            // First ellipse is a large "head" outline, the rest are inclusions.
            let (cy, cx, ay, ax) = if e == 0 {
                (
                    rng.random_range(0.45..0.55),
                    rng.random_range(0.45..0.55),
                    rng.random_range(0.38..0.46),
                    rng.random_range(0.32..0.42),
                )
            } else {
                (
                    rng.random_range(0.25..0.75),
                    rng.random_range(0.25..0.75),
                    rng.random_range(0.06..0.22),
                    rng.random_range(0.06..0.22),
                )
            };
            let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let label = if e == 0 { 1 } else { rng.random_range(1..=spec.levels) };
            let (sin, cos) = theta.sin_cos();
            for i in 0..h {
                for j in 0..w {
                    let y = (i as f64 + 0.5) / h as f64 - cy;
                    let x = (j as f64 + 0.5) / w as f64 - cx;
                    let u = x * cos + y * sin;
                    let v = -x * sin + y * cos;
                    if (u / ax).powi(2) + (v / ay).powi(2) <= 1.0 {
                        labels[i * w + j] = label;
                    }
                }
            }
        }
        let render = |(offset, slope): (f32, f32)| {
            let data = labels
                .iter()
                .map(|&l| offset + slope * l as f32 / spec.levels as f32)
                .collect();
            Tensor::from_vec([1, 1, h, w], data)
        };
        Ok(Phantom {
            target: render(spec.target_map)?,
            guide: render(spec.guide_map)?,
            labels,
        })
    }
}

fn add_noise_clip(t: &Tensor, std: f32, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if std == 0.0 {
        return Ok(t.clamp(0.0, 1.0));
    }
    let normal = Normal::new(0.0f32, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let data = t
        .data()
        .iter()
        .map(|&v| (v + normal.sample(rng)).clamp(0.0, 1.0))
        .collect();
    Tensor::from_vec(t.shape(), data)
}

/// Builds `Z` (phantom target), `Y = PZ + N₂` and `X = DKZ + N₁`, both clipped to `[0, 1]`.
pub fn synth_problem(spec: &PhantomSpec, op: &DegradationOp, cross: &LinearCrossModalOp) -> Result<ReconProblem> {
    let z = Phantom::generate(spec)?.target;
    // Separate stream so noise does not perturb the geometry draws.
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9E37_79B9_7F4A_7C15);
    let y = add_noise_clip(&cross.apply(&z)?, cross.noise_std, &mut rng)?;
    let x = add_noise_clip(&op.apply(&z)?, op.noise_std, &mut rng)?;
    ReconProblem::new(x, y, Some(z), op.scale)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResizeDirection {
    Up,
    Down,
}

/// Catmull-Rom cubic (`a = -0.5`).
pub fn cubic_weight(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (A + 2.0) * t * t * t - (A + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        A * t * t * t - 5.0 * A * t * t + 8.0 * A * t - 4.0 * A
    } else {
        0.0
    }
}

/// Resamples a line of `src` to `out_len` samples with half-pixel centres and
/// clamped borders: `pos = (i + 0.5) · src_len / out_len − 0.5`.
fn resize_line(src: &[f64], out_len: usize, out: &mut [f64]) {
    let n = src.len() as isize;
    let ratio = src.len() as f64 / out_len as f64;
    for (i, o) in out.iter_mut().enumerate().take(out_len) {
        let pos = (i as f64 + 0.5) * ratio - 0.5;
        let base = pos.floor();
        let t = pos - base;
        let base = base as isize;
        let mut acc = 0.0;
        for m in -1..=2isize {
            let idx = (base + m).clamp(0, n - 1) as usize;
            acc += cubic_weight(m as f64 - t) * src[idx];
        }
        *o = acc;
    }
}

/// Separable bicubic resampling by an integer `factor ∈ {2, 4}`.
pub fn bicubic_resize(x: &Tensor, factor: usize, direction: ResizeDirection) -> Result<Tensor> {
    if factor != 2 && factor != 4 {
        return Err(Error::InvalidArgument(format!(
            "bicubic factor must be 2 or 4, got {factor}"
        )));
    }
    let s = x.shape();
    let (oh, ow) = match direction {
        ResizeDirection::Up => (s.h * factor, s.w * factor),
        ResizeDirection::Down => {
            if !s.h.is_multiple_of(factor) || !s.w.is_multiple_of(factor) {
                return Err(Error::invalid_shape(
                    "bicubic_resize",
                    s,
                    format!("not divisible by {factor}"),
                ));
            }
            (s.h / factor, s.w / factor)
        }
    };
    let out_shape = s.with_spatial(oh, ow);
    Ok(per_plane(x, out_shape, |src, dst| {
        // Rows first, then columns.
        let mut tmp = vec![0.0; s.h * ow];
        for r in 0..s.h {
            resize_line(&src[r * s.w..(r + 1) * s.w], ow, &mut tmp[r * ow..(r + 1) * ow]);
        }
        let mut col = vec![0.0; s.h];
        let mut col_out = vec![0.0; oh];
        for c in 0..ow {
            for r in 0..s.h {
                col[r] = tmp[r * ow + c];
            }
            resize_line(&col, oh, &mut col_out);
            for r in 0..oh {
                dst[r * ow + c] = col_out[r];
            }
        }
    }))
}
