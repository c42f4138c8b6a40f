//! Forward and backward kernels for the layer vocabulary used by the network.
//!
//! Convolution follows the cross-correlation convention (no kernel flip) and is
//! lowered to im2col followed by a single-precision GEMM per batch item.

use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::{Shape, Tensor};

/// Hyper-parameters of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
}

impl Default for ConvSpec {
    /// Stride 1, padding 1: shape preserving for 3×3 kernels.
    fn default() -> Self {
        ConvSpec { stride: 1, padding: 1 }
    }
}

struct ConvGeom {
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.ci * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

fn conv_geom(input: Shape, weight: Shape, bias_len: usize, spec: ConvSpec) -> Result<ConvGeom> {
    if weight.h.is_multiple_of(2) || weight.w.is_multiple_of(2) {
        return Err(Error::invalid_shape("conv2d", weight, "kernel dims must be odd"));
    }
    if spec.stride == 0 {
        return Err(Error::InvalidArgument("conv2d: stride must be positive".into()));
    }
    if input.c != weight.c {
        return Err(Error::mismatch("conv2d", input, weight));
    }
    if bias_len != weight.n {
        return Err(Error::InvalidArgument(format!(
            "conv2d: bias has {bias_len} entries for weight {weight}"
        )));
    }
    let ph = input.h + 2 * spec.padding;
    let pw = input.w + 2 * spec.padding;
    if ph < weight.h || pw < weight.w {
        return Err(Error::mismatch("conv2d", input, weight));
    }
    Ok(ConvGeom {
        ci: input.c,
        h: input.h,
        w: input.w,
        co: weight.n,
        kh: weight.h,
        kw: weight.w,
        oh: (ph - weight.h) / spec.stride + 1,
        ow: (pw - weight.w) / spec.stride + 1,
        stride: spec.stride,
        pad: spec.padding,
    })
}

fn im2col(x: &[f32], g: &ConvGeom, cols: &mut [f32]) {
    let p = g.cols();
    for c in 0..g.ci {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * p;
                let dst = &mut cols[row..row + p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *o = if ix >= 0 && ix < g.w as isize {
                            src[ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f32], g: &ConvGeom, x: &mut [f32]) {
    let p = g.cols();
    for c in 0..g.ci {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * p;
                let src = &cols[row..row + p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in src[oy * g.ow..(oy + 1) * g.ow].iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `c = a · b (+ c if accumulate)` for row-major `a: m×k`, `b: k×n`, with
/// arbitrary element strides so transposes come for free.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (isize, isize),
    b: &[f32],
    (rsb, csb): (isize, isize),
    c: &mut [f32],
    accumulate: bool,
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: every stride/extent pair describes an in-bounds view of the
    // slices handed in, checked by the debug assertion above and by callers.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// 2-D cross-correlation of `input (n, ci, h, w)` with `weight (co, ci, kh, kw)`.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: &Tensor, spec: ConvSpec) -> Result<Tensor> {
    let g = conv_geom(input.shape(), weight.shape(), bias.len(), spec)?;
    let s = input.shape();
    let out_shape = Shape::new(s.n, g.co, g.oh, g.ow);
    let mut out = vec![0.0f32; out_shape.len()];
    let (k, p) = (g.rows(), g.cols());
    let x = input.data();
    let wt = weight.data();
    let b = bias.data();
    parallel::for_each_chunk_mut(&mut out, g.co * p, |i, dst| {
        let mut cols = vec![0.0f32; k * p];
        im2col(&x[i * s.item()..(i + 1) * s.item()], &g, &mut cols);
        for (o, row) in dst.chunks_mut(p).enumerate() {
            row.fill(b[o]);
        }
        gemm(g.co, k, p, wt, (k as isize, 1), &cols, (p as isize, 1), dst, true);
    });
    Tensor::from_vec(out_shape, out)
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward(
    grad_out: &Tensor,
    input: &Tensor,
    weight: &Tensor,
    spec: ConvSpec,
) -> Result<(Tensor, Tensor, Tensor)> {
    let g = conv_geom(input.shape(), weight.shape(), weight.shape().n, spec)?;
    let s = input.shape();
    let expect = Shape::new(s.n, g.co, g.oh, g.ow);
    if grad_out.shape() != expect {
        return Err(Error::mismatch("conv2d_backward", grad_out.shape(), expect));
    }
    let (k, p) = (g.rows(), g.cols());
    let x = input.data();
    let wt = weight.data();
    let go = grad_out.data();

    let per_item = parallel::map_range(s.n, |i| {
        let gi = &go[i * g.co * p..(i + 1) * g.co * p];
        let mut cols = vec![0.0f32; k * p];
        im2col(&x[i * s.item()..(i + 1) * s.item()], &g, &mut cols);
        let mut dw = vec![0.0f32; g.co * k];
        // dW = dOut · colsᵀ
        gemm(g.co, p, k, gi, (p as isize, 1), &cols, (1, p as isize), &mut dw, false);
        // dcols = Wᵀ · dOut
        gemm(k, g.co, p, wt, (1, k as isize), gi, (p as isize, 1), &mut cols, false);
        let mut dx = vec![0.0f32; s.item()];
        col2im(&cols, &g, &mut dx);
        let db: Vec<f32> = gi
            .chunks(p)
            .map(|r| r.iter().map(|&v| v as f64).sum::<f64>() as f32)
            .collect();
        (dx, dw, db)
    });

    let mut dx = Vec::with_capacity(s.len());
    let mut dw = vec![0.0f32; g.co * k];
    let mut db = vec![0.0f32; g.co];
    for (x_i, w_i, b_i) in per_item {
        dx.extend_from_slice(&x_i);
        dw.iter_mut().zip(&w_i).for_each(|(a, b)| *a += b);
        db.iter_mut().zip(&b_i).for_each(|(a, b)| *a += b);
    }
    Ok((
        Tensor::from_vec(s, dx)?,
        Tensor::from_vec(weight.shape(), dw)?,
        Tensor::from_vec(Shape::new(1, g.co, 1, 1), db)?,
    ))
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

pub fn relu_backward(grad_out: &Tensor, input: &Tensor) -> Result<Tensor> {
    grad_out.zip_map(input, "relu_backward", |g, x| if x > 0.0 { g } else { 0.0 })
}

fn require_even(op: &'static str, s: Shape) -> Result<()> {
    if !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) {
        return Err(Error::invalid_shape(op, s, "spatial dims must be even"));
    }
    Ok(())
}

/// 2×2 non-overlapping max pooling. Also returns, for every output element,
/// the flat input index that produced it (first maximum on ties).
pub fn maxpool2(input: &Tensor) -> Result<(Tensor, Vec<u32>)> {
    let s = input.shape();
    require_even("maxpool2", s)?;
    let (oh, ow) = (s.h / 2, s.w / 2);
    let out_shape = s.with_spatial(oh, ow);
    let x = input.data();
    let mut out = Vec::with_capacity(out_shape.len());
    let mut arg = Vec::with_capacity(out_shape.len());
    for nc in 0..s.n * s.c {
        let base = nc * s.plane();
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * s.w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * s.w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best as u32);
            }
        }
    }
    Ok((Tensor::from_vec(out_shape, out)?, arg))
}

pub fn maxpool2_backward(grad_out: &Tensor, argmax: &[u32], input_shape: Shape) -> Result<Tensor> {
    if argmax.len() != grad_out.len() {
        return Err(Error::InvalidArgument("maxpool2_backward: argmax length".into()));
    }
    let mut dx = vec![0.0f32; input_shape.len()];
    for (&g, &i) in grad_out.data().iter().zip(argmax) {
        dx[i as usize] += g;
    }
    Tensor::from_vec(input_shape, dx)
}

/// Nearest-neighbour 2× upsampling: every pixel becomes a constant 2×2 block.
pub fn upsample_nearest2(input: &Tensor) -> Tensor {
    let s = input.shape();
    let (oh, ow) = (s.h * 2, s.w * 2);
    let x = input.data();
    let mut out = Vec::with_capacity(s.len() * 4);
    for nc in 0..s.n * s.c {
        let plane = &x[nc * s.plane()..(nc + 1) * s.plane()];
        for oy in 0..oh {
            let row = &plane[(oy / 2) * s.w..(oy / 2 + 1) * s.w];
            for ox in 0..ow {
                out.push(row[ox / 2]);
            }
        }
    }
    Tensor::from_vec(s.with_spatial(oh, ow), out).expect("upsample shape")
}

pub fn upsample_nearest2_backward(grad_out: &Tensor) -> Result<Tensor> {
    let s = grad_out.shape();
    require_even("upsample_nearest2_backward", s)?;
    let (h, w) = (s.h / 2, s.w / 2);
    let g = grad_out.data();
    let mut dx = vec![0.0f32; s.len() / 4];
    for nc in 0..s.n * s.c {
        for oy in 0..s.h {
            for ox in 0..s.w {
                dx[nc * h * w + (oy / 2) * w + ox / 2] += g[nc * s.plane() + oy * s.w + ox];
            }
        }
    }
    Tensor::from_vec(s.with_spatial(h, w), dx)
}

/// Space-to-depth: `(n, c, h, w) -> (n, 4c, h/2, w/2)` with
/// `out[c*4 + 2i + j][y][x] = in[c][2y + i][2x + j]`.
pub fn pixel_unshuffle2(input: &Tensor) -> Result<Tensor> {
    let s = input.shape();
    require_even("pixel_unshuffle2", s)?;
    let (h, w) = (s.h / 2, s.w / 2);
    let x = input.data();
    let mut out = vec![0.0f32; s.len()];
    for n in 0..s.n {
        for c in 0..s.c {
            for i in 0..2 {
                for j in 0..2 {
                    let oc = c * 4 + 2 * i + j;
                    for y in 0..h {
                        for xx in 0..w {
                            out[((n * 4 * s.c + oc) * h + y) * w + xx] =
                                x[((n * s.c + c) * s.h + 2 * y + i) * s.w + 2 * xx + j];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(Shape::new(s.n, s.c * 4, h, w), out)
}

/// Depth-to-space, the exact inverse of [`pixel_unshuffle2`].
pub fn pixel_shuffle2(input: &Tensor) -> Result<Tensor> {
    let s = input.shape();
    if !s.c.is_multiple_of(4) {
        return Err(Error::invalid_shape(
            "pixel_shuffle2",
            s,
            "channel count must be divisible by 4",
        ));
    }
    let c = s.c / 4;
    let (oh, ow) = (s.h * 2, s.w * 2);
    let x = input.data();
    let mut out = vec![0.0f32; s.len()];
    for n in 0..s.n {
        for ch in 0..c {
            for i in 0..2 {
                for j in 0..2 {
                    let ic = ch * 4 + 2 * i + j;
                    for y in 0..s.h {
                        for xx in 0..s.w {
                            out[((n * c + ch) * oh + 2 * y + i) * ow + 2 * xx + j] =
                                x[((n * s.c + ic) * s.h + y) * s.w + xx];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(Shape::new(s.n, c, oh, ow), out)
}

/// Concatenates along the channel axis.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if (sa.n, sa.h, sa.w) != (sb.n, sb.h, sb.w) {
        return Err(Error::mismatch("concat_channels", sa, sb));
    }
    let mut out = Vec::with_capacity(sa.len() + sb.len());
    for n in 0..sa.n {
        out.extend_from_slice(&a.data()[n * sa.item()..(n + 1) * sa.item()]);
        out.extend_from_slice(&b.data()[n * sb.item()..(n + 1) * sb.item()]);
    }
    Tensor::from_vec(sa.with_channels(sa.c + sb.c), out)
}

/// Channels `start..start + len`.
pub fn slice_channels(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let s = x.shape();
    if start + len > s.c || len == 0 {
        return Err(Error::invalid_shape(
            "slice_channels",
            s,
            format!("cannot take channels {start}..{}", start + len),
        ));
    }
    let p = s.plane();
    let mut out = Vec::with_capacity(s.n * len * p);
    for n in 0..s.n {
        let base = n * s.item() + start * p;
        out.extend_from_slice(&x.data()[base..base + len * p]);
    }
    Tensor::from_vec(s.with_channels(len), out)
}

/// Scatters `grad` (channels `start..start + len`) into a zero tensor of `full`.
pub fn slice_channels_backward(grad: &Tensor, full: Shape, start: usize) -> Result<Tensor> {
    let s = grad.shape();
    if (s.n, s.h, s.w) != (full.n, full.h, full.w) || start + s.c > full.c {
        return Err(Error::mismatch("slice_channels_backward", s, full));
    }
    let p = s.plane();
    let mut out = vec![0.0f32; full.len()];
    for n in 0..s.n {
        let base = n * full.item() + start * p;
        out[base..base + s.item()].copy_from_slice(&grad.data()[n * s.item()..(n + 1) * s.item()]);
    }
    Tensor::from_vec(full, out)
}

/// Zero-pads on the bottom/right up to `(h, w)`.
pub fn pad_to(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let s = x.shape();
    if h < s.h || w < s.w {
        return Err(Error::invalid_shape("pad_to", s, format!("cannot pad to {h}x{w}")));
    }
    let mut out = vec![0.0f32; s.n * s.c * h * w];
    for nc in 0..s.n * s.c {
        for y in 0..s.h {
            let src = &x.data()[nc * s.plane() + y * s.w..nc * s.plane() + (y + 1) * s.w];
            out[nc * h * w + y * w..nc * h * w + y * w + s.w].copy_from_slice(src);
        }
    }
    Tensor::from_vec(s.with_spatial(h, w), out)
}

/// Keeps the top-left `(h, w)` window. Adjoint of [`pad_to`].
pub fn crop_to(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let s = x.shape();
    if h > s.h || w > s.w {
        return Err(Error::invalid_shape("crop_to", s, format!("cannot crop to {h}x{w}")));
    }
    let mut out = Vec::with_capacity(s.n * s.c * h * w);
    for nc in 0..s.n * s.c {
        for y in 0..h {
            let start = nc * s.plane() + y * s.w;
            out.extend_from_slice(&x.data()[start..start + w]);
        }
    }
    Tensor::from_vec(s.with_spatial(h, w), out)
}
