//! Independent reference computations used to validate the fast paths:
//! naive `f64` layer implementations, dot-product adjoint tests and
//! finite-difference gradient checks.

use std::collections::HashMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::degradation::{
    bicubic_resize, synth_problem, DegradationOp, LinearCrossModalOp, PhantomSpec, ResizeDirection,
};
use crate::error::Result;
use crate::net::{MgdunModel, ModelConfig};
use crate::ops::ConvSpec;
use crate::tensor::{Shape, Tensor};

/// `|⟨Ax, y⟩ − ⟨x, Aᵀy⟩| / (‖Ax‖·‖y‖)` accumulated in `f64`.
pub fn adjoint_gap(
    apply: impl Fn(&Tensor) -> Result<Tensor>,
    adjoint: impl Fn(&Tensor) -> Result<Tensor>,
    x: &Tensor,
    y: &Tensor,
) -> Result<f64> {
    let ax = apply(x)?;
    let aty = adjoint(y)?;
    let lhs = ax.dot(y)?;
    let rhs = x.dot(&aty)?;
    let denom = ax.norm() * y.norm();
    Ok(if denom == 0.0 {
        (lhs - rhs).abs()
    } else {
        (lhs - rhs).abs() / denom
    })
}

/// Worst normalised adjoint gap of `DK` and `P` over `pairs` random draws
/// with HR sizes between 16 and 64 pixels.
pub fn operator_adjoint_gaps(
    dk: &DegradationOp,
    p: &LinearCrossModalOp,
    pairs: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst_dk, mut worst_p) = (0.0f64, 0.0f64);
    for _ in 0..pairs {
        let mult = 4 * dk.scale;
        let h = mult * rng.random_range(16usize.div_ceil(mult)..=64 / mult);
        let w = mult * rng.random_range(16usize.div_ceil(mult)..=64 / mult);
        let hr = Shape::new(1, 1, h, w);
        let z = Tensor::randn(hr, 1.0, &mut rng);
        let x = Tensor::randn(dk.lr_shape(hr), 1.0, &mut rng);
        worst_dk = worst_dk.max(adjoint_gap(|t| dk.apply(t), |t| dk.adjoint(t), &z, &x)?);
        let y = Tensor::randn(hr, 1.0, &mut rng);
        worst_p = worst_p.max(adjoint_gap(|t| p.apply(t), |t| p.adjoint(t), &z, &y)?);
    }
    Ok((worst_dk, worst_p))
}

/// Mirror index matching the observation operators' boundary rule.
fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * n - 2 - i;
    }
    i as usize
}

/// Blur with a dense 3×3 kernel and keep the top-left sample of each block,
/// written as a direct loop over output pixels.
pub fn naive_dk(z: &Tensor, kernel: &[f32; 9], scale: usize) -> Tensor {
    let s = z.shape();
    let (h, w) = (s.h / scale, s.w / scale);
    let mut out = Vec::with_capacity(s.n * s.c * h * w);
    for n in 0..s.n {
        for c in 0..s.c {
            for p in 0..h {
                for q in 0..w {
                    let mut acc = 0.0f64;
                    for a in 0..3 {
                        for b in 0..3 {
                            let yy = mirror((p * scale + a) as isize - 1, s.h);
                            let xx = mirror((q * scale + b) as isize - 1, s.w);
                            acc += kernel[a * 3 + b] as f64 * z.at(n, c, yy, xx) as f64;
                        }
                    }
                    out.push(acc as f32);
                }
            }
        }
    }
    Tensor::from_vec([s.n, s.c, h, w], out).expect("naive_dk shape")
}

/// A dense `f64` tensor used by the reference layer implementations.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub shape: Shape,
    pub data: Vec<f64>,
}

impl Dense {
    pub fn from_tensor(t: &Tensor) -> Self {
        Dense {
            shape: t.shape(),
            data: t.data().iter().map(|&v| v as f64).collect(),
        }
    }

    fn zeros(shape: Shape) -> Self {
        Dense {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let s = self.shape;
        ((n * s.c + c) * s.h + y) * s.w + x
    }

    fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(n, c, y, x)]
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Dense {
        Dense {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Direct-loop zero-padded cross-correlation.
pub fn ref_conv2d(x: &Dense, w: &Dense, b: &Dense, spec: ConvSpec) -> Dense {
    let (s, k) = (x.shape, w.shape);
    let oh = (s.h + 2 * spec.padding - k.h) / spec.stride + 1;
    let ow = (s.w + 2 * spec.padding - k.w) / spec.stride + 1;
    let mut out = Dense::zeros(Shape::new(s.n, k.n, oh, ow));
    for n in 0..s.n {
        for o in 0..k.n {
            for p in 0..oh {
                for q in 0..ow {
                    let mut acc = b.data[o];
                    for i in 0..k.c {
                        for a in 0..k.h {
                            for bb in 0..k.w {
                                let yy = (p * spec.stride + a) as isize - spec.padding as isize;
                                let xx = (q * spec.stride + bb) as isize - spec.padding as isize;
                                if yy >= 0 && xx >= 0 && (yy as usize) < s.h && (xx as usize) < s.w {
                                    acc += w.at(o, i, a, bb) * x.at(n, i, yy as usize, xx as usize);
                                }
                            }
                        }
                    }
                    let j = out.idx(n, o, p, q);
                    out.data[j] = acc;
                }
            }
        }
    }
    out
}

pub fn ref_maxpool2(x: &Dense) -> Dense {
    let s = x.shape;
    let mut out = Dense::zeros(Shape::new(s.n, s.c, s.h / 2, s.w / 2));
    for n in 0..s.n {
        for c in 0..s.c {
            for p in 0..s.h / 2 {
                for q in 0..s.w / 2 {
                    let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .iter()
                        .map(|&(a, b)| x.at(n, c, 2 * p + a, 2 * q + b))
                        .fold(f64::NEG_INFINITY, f64::max);
                    let j = out.idx(n, c, p, q);
                    out.data[j] = m;
                }
            }
        }
    }
    out
}

pub fn ref_upsample2(x: &Dense) -> Dense {
    let s = x.shape;
    let mut out = Dense::zeros(Shape::new(s.n, s.c, 2 * s.h, 2 * s.w));
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..2 * s.h {
                for xx in 0..2 * s.w {
                    let j = out.idx(n, c, y, xx);
                    out.data[j] = x.at(n, c, y / 2, xx / 2);
                }
            }
        }
    }
    out
}

/// Space-to-depth: output channel `4c + 2i + j` holds input pixels `(2y+i, 2x+j)`.
pub fn ref_unshuffle2(x: &Dense) -> Dense {
    let s = x.shape;
    let mut out = Dense::zeros(Shape::new(s.n, 4 * s.c, s.h / 2, s.w / 2));
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..s.h {
                for xx in 0..s.w {
                    let j = out.idx(n, 4 * c + 2 * (y % 2) + xx % 2, y / 2, xx / 2);
                    out.data[j] = x.at(n, c, y, xx);
                }
            }
        }
    }
    out
}

pub fn ref_shuffle2(x: &Dense) -> Dense {
    let s = x.shape;
    let mut out = Dense::zeros(Shape::new(s.n, s.c / 4, 2 * s.h, 2 * s.w));
    for n in 0..s.n {
        for c in 0..s.c / 4 {
            for y in 0..2 * s.h {
                for xx in 0..2 * s.w {
                    let j = out.idx(n, c, y, xx);
                    out.data[j] = x.at(n, 4 * c + 2 * (y % 2) + xx % 2, y / 2, xx / 2);
                }
            }
        }
    }
    out
}

fn ref_concat(a: &Dense, b: &Dense) -> Dense {
    let (sa, sb) = (a.shape, b.shape);
    let mut out = Dense::zeros(Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w));
    for n in 0..sa.n {
        for c in 0..sa.c + sb.c {
            for y in 0..sa.h {
                for x in 0..sa.w {
                    let v = if c < sa.c {
                        a.at(n, c, y, x)
                    } else {
                        b.at(n, c - sa.c, y, x)
                    };
                    let j = out.idx(n, c, y, x);
                    out.data[j] = v;
                }
            }
        }
    }
    out
}

fn ref_reframe(x: &Dense, h: usize, w: usize) -> Dense {
    let s = x.shape;
    let mut out = Dense::zeros(Shape::new(s.n, s.c, h, w));
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..h.min(s.h) {
                for xx in 0..w.min(s.w) {
                    let j = out.idx(n, c, y, xx);
                    out.data[j] = x.at(n, c, y, xx);
                }
            }
        }
    }
    out
}

/// Result of one finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    /// `‖g_autodiff − g_fd‖₂ / ‖g_fd‖₂` over the checked coordinates.
    pub rel_err: f64,
}

type RefFn = Box<dyn Fn(&[Dense]) -> Dense>;
type GraphFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

struct OpCase {
    name: &'static str,
    inputs: Vec<Tensor>,
    reference: RefFn,
    graph: GraphFn,
}

/// Compares autodiff gradients of `Σ r ⊙ op(inputs)` with central
/// differences of the `f64` reference.
fn check_op(case: &OpCase, rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let mut g = Graph::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = (case.graph)(&mut g, &vars)?;
    let out_shape = g.shape(out);
    let r = Tensor::uniform(out_shape, -1.0, 1.0, rng);
    let rv = g.leaf(r.clone());
    let prod = g.hadamard(out, rv)?;
    let loss = g.mean(prod);
    let grads = g.backward(loss)?;
    let count = out_shape.len() as f64;

    let dense: Vec<Dense> = case.inputs.iter().map(Dense::from_tensor).collect();
    let rd = Dense::from_tensor(&r);
    let objective = |ins: &[Dense]| -> f64 {
        let o = (case.reference)(ins);
        o.data.iter().zip(&rd.data).map(|(a, b)| a * b).sum::<f64>() / count
    };
    let h = 1e-6;
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for (k, v) in vars.iter().enumerate() {
        let ad = grads.get(*v).map(|t| t.data().to_vec()).unwrap_or_default();
        for i in 0..dense[k].data.len() {
            let mut plus = dense.clone();
            plus[k].data[i] += h;
            let mut minus = dense.clone();
            minus[k].data[i] -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let a = ad.get(i).copied().unwrap_or(0.0) as f64;
            num += (a - fd).powi(2);
            den += fd * fd;
        }
    }
    Ok(GradCheck {
        name: case.name.to_string(),
        rel_err: if den == 0.0 { num.sqrt() } else { (num / den).sqrt() },
    })
}

/// Values drawn with magnitude in `[0.1, 1]` and random sign, keeping
/// elementwise kinks (ReLU, |·|) out of finite-difference reach.
fn away_from_zero(shape: impl Into<Shape>, rng: &mut ChaCha8Rng) -> Tensor {
    let shape = shape.into();
    let data = (0..shape.len())
        .map(|_| {
            let m: f32 = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_vec(shape, data).expect("shape")
}

/// Distinct values so that every 2×2 pooling window has a unique maximum.
fn distinct(shape: impl Into<Shape>, rng: &mut ChaCha8Rng) -> Tensor {
    let shape = shape.into();
    let mut vals: Vec<f32> = (0..shape.len()).map(|i| i as f32 * 0.05).collect();
    for i in (1..vals.len()).rev() {
        vals.swap(i, rng.random_range(0..=i));
    }
    Tensor::from_vec(shape, vals).expect("shape")
}

/// Per-layer gradient checks for every differentiable graph operation.
pub fn layer_gradient_checks(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let cases = vec![
        OpCase {
            name: "conv2d",
            inputs: vec![
                Tensor::randn([2, 3, 6, 5], 1.0, r),
                Tensor::randn([4, 3, 3, 3], 0.5, r),
                Tensor::randn([1, 4, 1, 1], 0.5, r),
            ],
            reference: Box::new(|i| ref_conv2d(&i[0], &i[1], &i[2], ConvSpec::default())),
            graph: Box::new(|g, v| g.conv2d(v[0], v[1], v[2], ConvSpec::default())),
        },
        OpCase {
            name: "conv2d_stride2",
            inputs: vec![
                Tensor::randn([1, 2, 7, 6], 1.0, r),
                Tensor::randn([3, 2, 3, 3], 0.5, r),
                Tensor::randn([1, 3, 1, 1], 0.5, r),
            ],
            reference: Box::new(|i| ref_conv2d(&i[0], &i[1], &i[2], ConvSpec { stride: 2, padding: 1 })),
            graph: Box::new(|g, v| g.conv2d(v[0], v[1], v[2], ConvSpec { stride: 2, padding: 1 })),
        },
        OpCase {
            name: "relu",
            inputs: vec![away_from_zero([1, 2, 4, 4], r)],
            reference: Box::new(|i| i[0].map(|v| v.max(0.0))),
            graph: Box::new(|g, v| Ok(g.relu(v[0]))),
        },
        OpCase {
            name: "maxpool2",
            inputs: vec![distinct([1, 2, 6, 4], r)],
            reference: Box::new(|i| ref_maxpool2(&i[0])),
            graph: Box::new(|g, v| g.maxpool2(v[0])),
        },
        OpCase {
            name: "upsample2",
            inputs: vec![Tensor::randn([1, 2, 3, 4], 1.0, r)],
            reference: Box::new(|i| ref_upsample2(&i[0])),
            graph: Box::new(|g, v| Ok(g.upsample2(v[0]))),
        },
        OpCase {
            name: "pixel_unshuffle2",
            inputs: vec![Tensor::randn([1, 2, 4, 6], 1.0, r)],
            reference: Box::new(|i| ref_unshuffle2(&i[0])),
            graph: Box::new(|g, v| g.pixel_unshuffle2(v[0])),
        },
        OpCase {
            name: "pixel_shuffle2",
            inputs: vec![Tensor::randn([1, 8, 2, 3], 1.0, r)],
            reference: Box::new(|i| ref_shuffle2(&i[0])),
            graph: Box::new(|g, v| g.pixel_shuffle2(v[0])),
        },
        OpCase {
            name: "add",
            inputs: vec![Tensor::randn([1, 2, 3, 3], 1.0, r), Tensor::randn([1, 2, 3, 3], 1.0, r)],
            reference: Box::new(|i| Dense {
                shape: i[0].shape,
                data: i[0].data.iter().zip(&i[1].data).map(|(a, b)| a + b).collect(),
            }),
            graph: Box::new(|g, v| g.add(v[0], v[1])),
        },
        OpCase {
            name: "sub",
            inputs: vec![Tensor::randn([1, 2, 3, 3], 1.0, r), Tensor::randn([1, 2, 3, 3], 1.0, r)],
            reference: Box::new(|i| Dense {
                shape: i[0].shape,
                data: i[0].data.iter().zip(&i[1].data).map(|(a, b)| a - b).collect(),
            }),
            graph: Box::new(|g, v| g.sub(v[0], v[1])),
        },
        OpCase {
            name: "hadamard",
            inputs: vec![Tensor::randn([1, 2, 3, 3], 1.0, r), Tensor::randn([1, 2, 3, 3], 1.0, r)],
            reference: Box::new(|i| Dense {
                shape: i[0].shape,
                data: i[0].data.iter().zip(&i[1].data).map(|(a, b)| a * b).collect(),
            }),
            graph: Box::new(|g, v| g.hadamard(v[0], v[1])),
        },
        OpCase {
            name: "scale_by",
            inputs: vec![Tensor::randn([1, 2, 3, 3], 1.0, r), Tensor::scalar(0.7)],
            reference: Box::new(|i| i[0].map(|v| v * i[1].data[0])),
            graph: Box::new(|g, v| g.scale_by(v[0], v[1])),
        },
        OpCase {
            name: "exp",
            inputs: vec![Tensor::randn([1, 1, 4, 4], 1.0, r)],
            reference: Box::new(|i| i[0].map(f64::exp)),
            graph: Box::new(|g, v| Ok(g.exp(v[0]))),
        },
        OpCase {
            name: "neg",
            inputs: vec![Tensor::randn([1, 1, 4, 4], 1.0, r)],
            reference: Box::new(|i| i[0].map(|v| -v)),
            graph: Box::new(|g, v| Ok(g.neg(v[0]))),
        },
        OpCase {
            name: "clamp",
            inputs: vec![away_from_zero([1, 1, 4, 4], r).scale(2.0)],
            reference: Box::new(|i| i[0].map(|v| v.clamp(-1.0, 1.0))),
            graph: Box::new(|g, v| Ok(g.clamp(v[0], -1.0, 1.0))),
        },
        OpCase {
            name: "concat_channels",
            inputs: vec![Tensor::randn([2, 1, 3, 3], 1.0, r), Tensor::randn([2, 2, 3, 3], 1.0, r)],
            reference: Box::new(|i| ref_concat(&i[0], &i[1])),
            graph: Box::new(|g, v| g.concat_channels(v[0], v[1])),
        },
        OpCase {
            name: "slice_channels",
            inputs: vec![Tensor::randn([2, 4, 3, 3], 1.0, r)],
            reference: Box::new(|i| {
                let s = i[0].shape;
                let mut out = Dense::zeros(Shape::new(s.n, 2, s.h, s.w));
                for n in 0..s.n {
                    for c in 0..2 {
                        for y in 0..s.h {
                            for x in 0..s.w {
                                let j = out.idx(n, c, y, x);
                                out.data[j] = i[0].at(n, c + 1, y, x);
                            }
                        }
                    }
                }
                out
            }),
            graph: Box::new(|g, v| g.slice_channels(v[0], 1, 2)),
        },
        OpCase {
            name: "pad_to",
            inputs: vec![Tensor::randn([1, 2, 3, 5], 1.0, r)],
            reference: Box::new(|i| ref_reframe(&i[0], 4, 8)),
            graph: Box::new(|g, v| g.pad_to(v[0], 4, 8)),
        },
        OpCase {
            name: "crop_to",
            inputs: vec![Tensor::randn([1, 2, 5, 6], 1.0, r)],
            reference: Box::new(|i| ref_reframe(&i[0], 3, 4)),
            graph: Box::new(|g, v| g.crop_to(v[0], 3, 4)),
        },
        OpCase {
            name: "mean_abs",
            inputs: vec![away_from_zero([1, 2, 3, 3], r)],
            reference: Box::new(|i| Dense {
                shape: Shape::scalar(),
                data: vec![i[0].data.iter().map(|v| v.abs()).sum::<f64>() / i[0].data.len() as f64],
            }),
            graph: Box::new(|g, v| Ok(g.mean_abs(v[0]))),
        },
        OpCase {
            name: "mean",
            inputs: vec![Tensor::randn([1, 2, 3, 3], 1.0, r)],
            reference: Box::new(|i| Dense {
                shape: Shape::scalar(),
                data: vec![i[0].data.iter().sum::<f64>() / i[0].data.len() as f64],
            }),
            graph: Box::new(|g, v| Ok(g.mean(v[0]))),
        },
    ];
    cases.iter().map(|c| check_op(c, &mut rng)).collect()
}

/// One parameter coordinate compared in the end-to-end check.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradCheck {
    pub param: String,
    pub index: usize,
    pub autodiff: f64,
    pub finite_diff: f64,
    pub rel_err: f64,
}

/// Configuration of the end-to-end check: one stage on a 16×16 problem with a
/// two-level U-Net.
pub fn end_to_end_config(seed: u64) -> ModelConfig {
    ModelConfig {
        stages: 1,
        depth: 2,
        seed,
        ..ModelConfig::default()
    }
}

fn zip(a: &Dense, b: &Dense, f: impl Fn(f64, f64) -> f64) -> Dense {
    assert_eq!(a.shape, b.shape, "reference shapes");
    Dense {
        shape: a.shape,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

fn ref_slice(x: &Dense, start: usize, len: usize) -> Dense {
    let s = x.shape;
    let mut out = Dense::zeros(Shape::new(s.n, len, s.h, s.w));
    for n in 0..s.n {
        for c in 0..len {
            for y in 0..s.h {
                for xx in 0..s.w {
                    let j = out.idx(n, c, y, xx);
                    out.data[j] = x.at(n, start + c, y, xx);
                }
            }
        }
    }
    out
}

fn relu(x: &Dense) -> Dense {
    x.map(|v| v.max(0.0))
}

/// The unfolded network re-implemented in `f64` from the naive reference
/// layers, reading parameters by name.
#[derive(Debug, Clone)]
pub struct RefModel {
    config: ModelConfig,
    params: HashMap<String, Dense>,
}

impl RefModel {
    pub fn from_model(m: &MgdunModel) -> Self {
        RefModel {
            config: *m.config(),
            params: m
                .params()
                .iter()
                .map(|(n, t)| (n.to_string(), Dense::from_tensor(t)))
                .collect(),
        }
    }

    pub fn param_mut(&mut self, name: &str) -> &mut Dense {
        self.params.get_mut(name).expect("known parameter")
    }

    fn conv(&self, x: &Dense, name: &str) -> Dense {
        ref_conv2d(
            x,
            &self.params[&format!("{name}.weight")],
            &self.params[&format!("{name}.bias")],
            ConvSpec::default(),
        )
    }

    fn scalar(&self, name: &str) -> f64 {
        self.params[name].data[0]
    }

    fn unet(&self, x: &Dense) -> Dense {
        let s = x.shape;
        let mut depth = 0;
        while depth < self.config.depth && (2usize << depth) <= s.h.min(s.w) {
            depth += 1;
        }
        let m = 1usize << depth;
        let (ph, pw) = (s.h.div_ceil(m) * m, s.w.div_ceil(m) * m);
        let mut h = ref_reframe(x, ph, pw);
        let mut skips = Vec::new();
        for k in 0..depth {
            h = relu(&self.conv(&h, &format!("denoiser.enc{k}.conv0")));
            h = relu(&self.conv(&h, &format!("denoiser.enc{k}.conv1")));
            skips.push(h.clone());
            h = ref_maxpool2(&h);
        }
        for k in (0..depth).rev() {
            h = ref_concat(&ref_upsample2(&h), &skips[k]);
            h = relu(&self.conv(&h, &format!("denoiser.dec{k}.conv0")));
            h = self.conv(&h, &format!("denoiser.dec{k}.conv1"));
            if k > 0 {
                h = relu(&h);
            }
        }
        zip(x, &ref_reframe(&h, s.h, s.w), |a, b| a + b)
    }

    fn subnet(&self, x: &Dense, name: &str) -> Dense {
        self.conv(&relu(&self.conv(x, &format!("{name}.conv0"))), &format!("{name}.conv1"))
    }

    fn log_scale(&self, x: &Dense, name: &str) -> Dense {
        let lim = crate::net::EXP_CLAMP as f64;
        self.subnet(x, name).map(|v| v.clamp(-lim, lim))
    }

    pub fn inn_forward(&self, z: &Dense) -> Dense {
        let half = 2 * self.config.channels;
        let packed = ref_unshuffle2(z);
        let (mut a, mut b) = (ref_slice(&packed, 0, half), ref_slice(&packed, half, half));
        for k in 0..self.config.inn_blocks {
            let t1 = zip(&a, &self.subnet(&b, &format!("inn.block{k}.phi")), |x, y| x + y);
            let s = self.log_scale(&t1, &format!("inn.block{k}.rho"));
            let tau = self.subnet(&t1, &format!("inn.block{k}.tau"));
            let scaled = zip(&b, &s, |x, y| x * y.exp());
            b = zip(&scaled, &tau, |x, y| x + y);
            a = t1;
        }
        ref_shuffle2(&ref_concat(&a, &b))
    }

    pub fn inn_backward(&self, t: &Dense) -> Dense {
        let half = 2 * self.config.channels;
        let packed = ref_unshuffle2(t);
        let (mut a, mut b) = (ref_slice(&packed, 0, half), ref_slice(&packed, half, half));
        for k in (0..self.config.inn_blocks).rev() {
            let tau = self.subnet(&a, &format!("inn.block{k}.tau"));
            let s = self.log_scale(&a, &format!("inn.block{k}.rho"));
            let z2 = zip(&zip(&b, &tau, |x, y| x - y), &s, |x, y| x * (-y).exp());
            a = zip(&a, &self.subnet(&z2, &format!("inn.block{k}.phi")), |x, y| x - y);
            b = z2;
        }
        ref_shuffle2(&ref_concat(&a, &b))
    }

    fn levels(&self) -> usize {
        self.config.scale.trailing_zeros() as usize
    }

    fn down(&self, z: &Dense) -> Dense {
        let mut h = relu(&self.conv(z, "down.conv0"));
        for _ in 0..self.levels() {
            h = ref_maxpool2(&h);
        }
        self.conv(&relu(&self.conv(&h, "down.conv1")), "down.conv2")
    }

    fn up(&self, x: &Dense) -> Dense {
        let mut h = relu(&self.conv(x, "up.conv0"));
        for _ in 0..self.levels() {
            h = ref_upsample2(&h);
        }
        self.conv(&relu(&self.conv(&h, "up.conv1")), "up.conv2")
    }

    /// `Z⁽ᵀ⁾` from the bicubic initialisation `z0` and observations `x`, `y`.
    pub fn forward(&self, z0: &Dense, x: &Dense, y: &Dense) -> Dense {
        let (mut z, mut u, mut v) = (z0.clone(), z0.clone(), z0.clone());
        for t in 0..self.config.stages {
            let sc = |f: &str| self.scalar(&format!("stage{t}.{f}"));
            let (delta3, eta, beta1, beta2, xi1, xi2) =
                (sc("delta3"), sc("eta"), sc("beta1"), sc("beta2"), sc("xi1"), sc("xi2"));
            u = self.unet(&zip(&u, &z, |a, b| a + xi1 * b));
            v = self.unet(&zip(&v, &z, |a, b| a + xi2 * b));
            let data = self.up(&zip(&self.down(&z), x, |a, b| a - b));
            let guide = self.inn_backward(&zip(&self.inn_forward(&z), y, |a, b| a - b));
            let mut next = z.clone();
            for i in 0..next.data.len() {
                let g = data.data[i]
                    + eta * guide.data[i]
                    + beta1 * (z.data[i] - u.data[i])
                    + beta2 * (z.data[i] - v.data[i]);
                next.data[i] = z.data[i] - delta3 * g;
            }
            z = next;
        }
        z
    }
}

/// Autodiff against central differences of the `f64` reference network for
/// `count` randomly chosen scalar parameters of a seeded model. The loss is
/// the linear functional `⟨r, Z⟩` for a fixed random `r`.
///
/// Relative error is `|g_ad − g_fd| / (max(|g_ad|, |g_fd|) + 1e-8)`, so
/// parameters whose true gradient vanishes are compared absolutely.
pub fn end_to_end_gradient_check(seed: u64, count: usize) -> Result<Vec<ParamGradCheck>> {
    let mut model = MgdunModel::new(end_to_end_config(seed))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfd);
    // Zero biases over the phantom's zero background leave pre-activations
    // exactly on the ReLU kink, where one-sided differences disagree.
    let biases: Vec<usize> = (0..model.params().len())
        .filter(|&i| model.params().names()[i].ends_with(".bias"))
        .collect();
    for i in biases {
        let t = &mut model.params_mut().tensors_mut()[i];
        *t = Tensor::uniform(t.shape(), -0.05, 0.05, &mut rng);
    }
    let dk = DegradationOp::new(model.config().scale, 1.0, 0.0)?;
    let p = LinearCrossModalOp::gaussian(0.5, 0.8, 0.0)?;
    let prob = synth_problem(&PhantomSpec::new(seed, 16, 16), &dk, &p)?;
    let r = Tensor::uniform(prob.hr_shape(), -1.0, 1.0, &mut rng);

    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let (xv, yv, rv) = (g.leaf(prob.x.clone()), g.leaf(prob.y.clone()), g.leaf(r.clone()));
    let out = bound.forward(&mut g, xv, yv)?;
    let prod = g.hadamard(out, rv)?;
    let loss = g.mean(prod);
    let grads = g.backward(loss)?;
    let n_out = prob.hr_shape().len() as f64;

    let reference = RefModel::from_model(&model);
    let z0 = Dense::from_tensor(&bicubic_resize(&prob.x, model.config().scale, ResizeDirection::Up)?);
    let (xd, yd, rd) = (
        Dense::from_tensor(&prob.x),
        Dense::from_tensor(&prob.y),
        Dense::from_tensor(&r),
    );
    let objective = |m: &RefModel| -> f64 {
        m.forward(&z0, &xd, &yd)
            .data
            .iter()
            .zip(&rd.data)
            .map(|(a, b)| a * b)
            .sum()
    };

    // Draw uniformly over tensors, then over elements, so that small tensors
    // (biases, stage scalars) are represented.
    let n_params = model.params().len();
    let tensors = sample(&mut rng, n_params, count.min(n_params)).into_vec();
    let mut checks = Vec::with_capacity(tensors.len());
    for ti in tensors {
        let name = model.params().names()[ti].clone();
        let index = rng.random_range(0..model.params().tensors()[ti].len());
        let ad = grads
            .get(bound.param(ti))
            .map_or(0.0, |t| t.data()[index] as f64 * n_out);
        let base = reference.params[&name].data[index];
        let h = 1e-6 * base.abs().max(1.0);
        let eval = |delta: f64| {
            let mut m = reference.clone();
            m.param_mut(&name).data[index] = base + delta;
            objective(&m)
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        let rel_err = (ad - fd).abs() / (ad.abs().max(fd.abs()) + 1e-8);
        checks.push(ParamGradCheck {
            param: name,
            index,
            autodiff: ad,
            finite_diff: fd,
            rel_err,
        });
    }
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;

    #[test]
    fn reference_conv_matches_fast_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn([2, 3, 7, 5], 1.0, &mut rng);
        let w = Tensor::randn([4, 3, 3, 3], 1.0, &mut rng);
        let b = Tensor::randn([1, 4, 1, 1], 1.0, &mut rng);
        for spec in [
            ConvSpec::default(),
            ConvSpec { stride: 2, padding: 1 },
            ConvSpec { stride: 1, padding: 0 },
        ] {
            let fast = ops::conv2d(&x, &w, &b, spec).unwrap();
            let slow = ref_conv2d(
                &Dense::from_tensor(&x),
                &Dense::from_tensor(&w),
                &Dense::from_tensor(&b),
                spec,
            );
            assert_eq!(fast.shape(), slow.shape);
            for (a, e) in fast.data().iter().zip(&slow.data) {
                assert!((*a as f64 - e).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn reference_rearrangements_match_fast_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn([1, 2, 4, 6], 1.0, &mut rng);
        let dx = Dense::from_tensor(&x);
        assert_eq!(
            Dense::from_tensor(&ops::pixel_unshuffle2(&x).unwrap()),
            ref_unshuffle2(&dx)
        );
        assert_eq!(Dense::from_tensor(&ops::upsample_nearest2(&x)), ref_upsample2(&dx));
        assert_eq!(Dense::from_tensor(&ops::maxpool2(&x).unwrap().0), ref_maxpool2(&dx));
        let y = Tensor::randn([1, 8, 2, 3], 1.0, &mut rng);
        assert_eq!(
            Dense::from_tensor(&ops::pixel_shuffle2(&y).unwrap()),
            ref_shuffle2(&Dense::from_tensor(&y))
        );
    }

    #[test]
    fn adjoint_gap_detects_wrong_transpose() {
        let op = DegradationOp::new(2, 1.0, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = Tensor::randn([1, 1, 16, 16], 1.0, &mut rng);
        let x = Tensor::randn([1, 1, 8, 8], 1.0, &mut rng);
        assert!(adjoint_gap(|t| op.apply(t), |t| op.adjoint(t), &z, &x).unwrap() < 1e-6);
        let wrong = |t: &Tensor| Ok(op.adjoint(t)?.scale(1.1));
        assert!(adjoint_gap(|t| op.apply(t), wrong, &z, &x).unwrap() > 1e-3);
    }

    #[test]
    fn naive_dk_matches_operator() {
        let op = DegradationOp::new(4, 0.8, 0.0).unwrap();
        let z = Tensor::uniform([1, 2, 16, 12], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(4));
        let fast = op.apply(&z).unwrap();
        assert!(fast.max_abs_diff(&naive_dk(&z, &op.kernel, 4)).unwrap() < 1e-6);
    }

    #[test]
    fn reference_network_matches_fast_forward() {
        let m = MgdunModel::new(ModelConfig {
            stages: 2,
            width: 8,
            depth: 2,
            inn_hidden: 4,
            scale: 4,
            seed: 6,
            ..ModelConfig::default()
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::uniform([1, 1, 4, 6], 0.0, 1.0, &mut rng);
        let y = Tensor::uniform([1, 1, 16, 24], 0.0, 1.0, &mut rng);
        let fast = m.forward(&x, &y).unwrap();
        let z0 = Dense::from_tensor(&bicubic_resize(&x, 4, ResizeDirection::Up).unwrap());
        let slow = RefModel::from_model(&m).forward(&z0, &Dense::from_tensor(&x), &Dense::from_tensor(&y));
        for (a, e) in fast.data().iter().zip(&slow.data) {
            assert!((*a as f64 - e).abs() < 1e-4, "{a} vs {e}");
        }
        let z = Tensor::uniform([1, 1, 16, 24], 0.0, 1.0, &mut rng);
        let inv = RefModel::from_model(&m).inn_backward(&Dense::from_tensor(&m.inn_forward(&z).unwrap()));
        for (a, e) in z.data().iter().zip(&inv.data) {
            assert!((*a as f64 - e).abs() < 1e-5);
        }
    }

    #[test]
    fn layer_checks_pass() {
        for c in layer_gradient_checks(5).unwrap() {
            assert!(c.rel_err < 1e-3, "{}: {}", c.name, c.rel_err);
        }
    }
}
