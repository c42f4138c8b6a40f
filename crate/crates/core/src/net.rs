//! The unfolded network: a shared U-Net denoiser, an invertible cross-modal
//! transform, learned Up/Down blocks and a gradient-style reconstruction step
//! repeated for `T` stages.
//!
//! Every layer is expressed on an [`autodiff::Graph`](crate::autodiff::Graph)
//! so the same code serves inference and training. Plain-tensor entry points
//! build a throwaway graph.

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::degradation::{bicubic_resize, ResizeDirection};
use crate::error::{Error, Result};
use crate::ops::ConvSpec;
use crate::tensor::{Shape, Tensor};

/// Bound on the log-scale of the affine coupling, applied in both directions.
pub const EXP_CLAMP: f32 = 10.0;

/// Initial values of `(δ₃, η, β₁, β₂, ξ₁, ξ₂)`.
pub const STAGE_INIT: StageParams = StageParams {
    delta3: 0.1,
    eta: 0.1,
    beta1: 0.5,
    beta2: 0.5,
    xi1: 0.1,
    xi2: 0.1,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageParams {
    pub delta3: f32,
    pub eta: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub xi1: f32,
    pub xi2: f32,
}

const STAGE_FIELDS: [&str; 6] = ["delta3", "eta", "beta1", "beta2", "xi1", "xi2"];

impl StageParams {
    fn to_array(self) -> [f32; 6] {
        [self.delta3, self.eta, self.beta1, self.beta2, self.xi1, self.xi2]
    }

    fn from_array(a: [f32; 6]) -> Self {
        StageParams {
            delta3: a[0],
            eta: a[1],
            beta1: a[2],
            beta2: a[3],
            xi1: a[4],
            xi2: a[5],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    /// Number of unfolded stages `T`.
    pub stages: usize,
    pub inn_blocks: usize,
    /// Super-resolution factor, 2 or 4.
    pub scale: usize,
    /// Image channels `C`.
    pub channels: usize,
    /// Denoiser and Up/Down feature width `C′`.
    pub width: usize,
    /// U-Net pooling levels.
    pub depth: usize,
    /// Hidden width of the INN coupling subnets.
    pub inn_hidden: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            stages: 4,
            inn_blocks: 2,
            scale: 2,
            channels: 1,
            width: 64,
            depth: 4,
            inn_hidden: 16,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scale != 2 && self.scale != 4 {
            return Err(Error::InvalidArgument(format!(
                "scale must be 2 or 4, got {}",
                self.scale
            )));
        }
        for (name, v) in [
            ("channels", self.channels),
            ("width", self.width),
            ("depth", self.depth),
            ("inn_hidden", self.inn_hidden),
        ] {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

/// An ordered, named list of parameter tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Conv {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Coupling {
    phi: [Conv; 2],
    rho: [Conv; 2],
    tau: [Conv; 2],
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Layout {
    enc: Vec<[Conv; 2]>,
    dec: Vec<[Conv; 2]>,
    inn: Vec<Coupling>,
    down: [Conv; 3],
    up: [Conv; 3],
    stages: Vec<[usize; 6]>,
}

/// How a conv weight is initialised.
#[derive(Clone, Copy)]
enum Init {
    He,
    /// He-uniform scaled down, for the last layer of residual or coupling branches.
    HeSmall,
}

struct Builder<'a> {
    params: ParamSet,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl Builder<'_> {
    fn conv(&mut self, name: &str, ci: usize, co: usize, init: Init) -> Conv {
        let shape = Shape::new(co, ci, 3, 3);
        let w = match self.rng.as_deref_mut() {
            None => Tensor::zeros(shape),
            Some(rng) => {
                let t = Tensor::he_uniform(shape, rng);
                match init {
                    Init::He => t,
                    Init::HeSmall => t.scale(0.1),
                }
            }
        };
        Conv {
            w: self.params.push(format!("{name}.weight"), w),
            b: self.params.push(format!("{name}.bias"), Tensor::zeros([1, co, 1, 1])),
        }
    }

    fn scalar(&mut self, name: String, v: f32) -> usize {
        self.params.push(name, Tensor::scalar(v))
    }
}

fn build(cfg: &ModelConfig, rng: Option<&mut ChaCha8Rng>) -> (ParamSet, Layout) {
    let mut b = Builder {
        params: ParamSet::new(),
        rng,
    };
    let (c, f) = (cfg.channels, cfg.width);
    let enc = (0..cfg.depth)
        .map(|k| {
            let ci = if k == 0 { c } else { f };
            [
                b.conv(&format!("denoiser.enc{k}.conv0"), ci, f, Init::He),
                b.conv(&format!("denoiser.enc{k}.conv1"), f, f, Init::He),
            ]
        })
        .collect();
    let dec = (0..cfg.depth)
        .map(|k| {
            let co = if k == 0 { c } else { f };
            [
                b.conv(&format!("denoiser.dec{k}.conv0"), 2 * f, f, Init::He),
                b.conv(
                    &format!("denoiser.dec{k}.conv1"),
                    f,
                    co,
                    if k == 0 { Init::HeSmall } else { Init::He },
                ),
            ]
        })
        .collect();
    let half = 2 * c;
    let h = cfg.inn_hidden;
    let inn = (0..cfg.inn_blocks)
        .map(|k| {
            let mut sub = |name: &str| {
                [
                    b.conv(&format!("inn.block{k}.{name}.conv0"), half, h, Init::He),
                    b.conv(&format!("inn.block{k}.{name}.conv1"), h, half, Init::HeSmall),
                ]
            };
            Coupling {
                phi: sub("phi"),
                rho: sub("rho"),
                tau: sub("tau"),
            }
        })
        .collect();
    let down = [
        b.conv("down.conv0", c, f, Init::He),
        b.conv("down.conv1", f, f, Init::He),
        b.conv("down.conv2", f, c, Init::HeSmall),
    ];
    let up = [
        b.conv("up.conv0", c, f, Init::He),
        b.conv("up.conv1", f, f, Init::He),
        b.conv("up.conv2", f, c, Init::HeSmall),
    ];
    let init = STAGE_INIT.to_array();
    let stages = (0..cfg.stages)
        .map(|t| std::array::from_fn(|i| b.scalar(format!("stage{t}.{}", STAGE_FIELDS[i]), init[i])))
        .collect();
    (
        b.params,
        Layout {
            enc,
            dec,
            inn,
            down,
            up,
            stages,
        },
    )
}

/// All learnable parameters `Θ` and the configuration that shapes them.
#[derive(Debug, Clone, PartialEq)]
pub struct MgdunModel {
    config: ModelConfig,
    params: ParamSet,
    layout: Layout,
}

impl MgdunModel {
    /// Seeded He-uniform initialisation; biases start at zero and stage
    /// scalars at [`STAGE_INIT`].
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (params, layout) = build(&config, Some(&mut rng));
        Ok(MgdunModel { config, params, layout })
    }

    /// Every conv weight and bias zero; stage scalars at [`STAGE_INIT`].
    pub fn zeroed(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (params, layout) = build(&config, None);
        Ok(MgdunModel { config, params, layout })
    }

    /// Rebuilds a model from a configuration and an explicit parameter list,
    /// checking that names and shapes match the layout.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        let reference = Self::zeroed(config)?;
        if reference.params.len() != params.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        for ((rn, rt), (n, t)) in reference.params.iter().zip(params.iter()) {
            if rn != n {
                return Err(Error::Format(format!("expected parameter {rn}, found {n}")));
            }
            if rt.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "parameter {n}: expected {}, found {}",
                    rt.shape(),
                    t.shape()
                )));
            }
        }
        Ok(MgdunModel {
            config,
            params,
            layout: reference.layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn stage_params(&self, t: usize) -> StageParams {
        let idx = self.layout.stages[t];
        StageParams::from_array(idx.map(|i| self.params.tensors[i].data()[0]))
    }

    pub fn set_stage_params(&mut self, t: usize, sp: StageParams) {
        let idx = self.layout.stages[t];
        for (i, v) in idx.into_iter().zip(sp.to_array()) {
            self.params.tensors[i] = Tensor::scalar(v);
        }
    }

    /// Indices of the parameters holding `η` in every stage.
    pub fn eta_indices(&self) -> Vec<usize> {
        self.layout.stages.iter().map(|s| s[1]).collect()
    }

    /// Indices of the INN coupling parameters.
    pub fn inn_indices(&self) -> Vec<usize> {
        self.params
            .names()
            .iter()
            .enumerate()
            .filter(|(_, n)| n.starts_with("inn."))
            .map(|(i, _)| i)
            .collect()
    }

    /// Records every parameter as a graph leaf.
    pub fn bind<'m>(&'m self, g: &mut Graph) -> Bound<'m> {
        let vars = self.params.tensors.iter().map(|t| g.leaf(t.clone())).collect();
        Bound { model: self, vars }
    }

    /// `Z⁽ᵀ⁾` without recording gradients.
    pub fn forward(&self, x: &Tensor, y: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let (xv, yv) = (g.leaf(x.clone()), g.leaf(y.clone()));
        let out = b.forward(&mut g, xv, yv)?;
        Ok(g.value(out).clone())
    }

    pub fn denoise(&self, prev: &Tensor, z: &Tensor, xi: f32) -> Result<Tensor> {
        self.eval(&[prev.clone(), z.clone(), Tensor::scalar(xi)], |b, g, v| {
            b.denoise(g, v[0], v[1], v[2])
        })
    }

    pub fn inn_forward(&self, z: &Tensor) -> Result<Tensor> {
        self.eval(std::slice::from_ref(z), |b, g, v| b.inn_forward(g, v[0]))
    }

    pub fn inn_backward(&self, t: &Tensor) -> Result<Tensor> {
        self.eval(std::slice::from_ref(t), |b, g, v| b.inn_backward(g, v[0]))
    }

    pub fn down(&self, z: &Tensor) -> Result<Tensor> {
        self.eval(std::slice::from_ref(z), |b, g, v| b.down(g, v[0]))
    }

    pub fn up(&self, x: &Tensor) -> Result<Tensor> {
        self.eval(std::slice::from_ref(x), |b, g, v| b.up(g, v[0]))
    }

    /// One reconstruction update with the scalars of stage `t`.
    pub fn recon_step(
        &self,
        z: &Tensor,
        x: &Tensor,
        y: &Tensor,
        u: &Tensor,
        v: &Tensor,
        stage: usize,
    ) -> Result<Tensor> {
        if stage >= self.config.stages {
            return Err(Error::InvalidArgument(format!("stage {stage} out of range")));
        }
        let inputs = [z.clone(), x.clone(), y.clone(), u.clone(), v.clone()];
        self.eval(&inputs, |b, g, v| b.recon_step(g, v[0], v[1], v[2], v[3], v[4], stage))
    }

    fn eval(&self, inputs: &[Tensor], f: impl FnOnce(&Bound<'_>, &mut Graph, &[Var]) -> Result<Var>) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&b, &mut g, &vars)?;
        Ok(g.value(out).clone())
    }
}

/// A model whose parameters have been recorded on a graph.
pub struct Bound<'m> {
    model: &'m MgdunModel,
    vars: Vec<Var>,
}

fn check_same(g: &Graph, op: &'static str, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::mismatch(op, g.shape(a), g.shape(b)));
    }
    Ok(())
}

fn check_even(g: &Graph, op: &'static str, v: Var) -> Result<()> {
    let s = g.shape(v);
    if !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) {
        return Err(Error::invalid_shape(op, s, "spatial dims must be even"));
    }
    Ok(())
}

impl Bound<'_> {
    /// The graph variable of parameter `i`.
    pub fn param(&self, i: usize) -> Var {
        self.vars[i]
    }

    pub fn params(&self) -> &[Var] {
        &self.vars
    }

    fn conv(&self, g: &mut Graph, x: Var, c: Conv) -> Result<Var> {
        g.conv2d(x, self.vars[c.w], self.vars[c.b], ConvSpec::default())
    }

    fn conv_relu(&self, g: &mut Graph, x: Var, c: Conv) -> Result<Var> {
        let y = self.conv(g, x, c)?;
        Ok(g.relu(y))
    }

    /// Residual U-Net on `x`, padding to a multiple of `2^depth` and cropping back.
    pub fn unet(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.shape(x);
        let cfg = &self.model.config;
        if s.c != cfg.channels {
            return Err(Error::invalid_shape(
                "denoise",
                s,
                "channel count differs from the model",
            ));
        }
        let fit = (usize::BITS - 1 - s.h.min(s.w).max(1).leading_zeros()) as usize;
        let depth = cfg.depth.min(fit);
        if depth == 0 {
            return Err(Error::invalid_shape("denoise", s, "too small for one pooling level"));
        }
        if depth < cfg.depth {
            warn!("input {s} too small for U-Net depth {}, using {depth}", cfg.depth);
        }
        let m = 1usize << depth;
        let (ph, pw) = (s.h.div_ceil(m) * m, s.w.div_ceil(m) * m);
        let mut h = if (ph, pw) == (s.h, s.w) {
            x
        } else {
            g.pad_to(x, ph, pw)?
        };
        let mut skips = Vec::with_capacity(depth);
        for block in &self.model.layout.enc[..depth] {
            h = self.conv_relu(g, h, block[0])?;
            h = self.conv_relu(g, h, block[1])?;
            skips.push(h);
            h = g.maxpool2(h)?;
        }
        for k in (0..depth).rev() {
            let block = self.model.layout.dec[k];
            let upsampled = g.upsample2(h);
            h = g.concat_channels(upsampled, skips[k])?;
            h = self.conv_relu(g, h, block[0])?;
            h = self.conv(g, h, block[1])?;
            if k > 0 {
                h = g.relu(h);
            }
        }
        if (ph, pw) != (s.h, s.w) {
            h = g.crop_to(h, s.h, s.w)?;
        }
        g.add(x, h)
    }

    /// `DM(prev + ξ·z)` with the shared denoiser; `xi` is a one-element variable.
    pub fn denoise(&self, g: &mut Graph, prev: Var, z: Var, xi: Var) -> Result<Var> {
        check_same(g, "denoise", prev, z)?;
        let xz = g.scale_by(z, xi)?;
        let input = g.add(prev, xz)?;
        self.unet(g, input)
    }

    fn subnet(&self, g: &mut Graph, x: Var, s: [Conv; 2]) -> Result<Var> {
        let h = self.conv_relu(g, x, s[0])?;
        self.conv(g, h, s[1])
    }

    fn log_scale(&self, g: &mut Graph, t1: Var, s: [Conv; 2]) -> Result<Var> {
        let r = self.subnet(g, t1, s)?;
        Ok(g.clamp(r, -EXP_CLAMP, EXP_CLAMP))
    }

    fn split(&self, g: &mut Graph, x: Var) -> Result<(Var, Var)> {
        let half = 2 * self.model.config.channels;
        let a = g.slice_channels(x, 0, half)?;
        let b = g.slice_channels(x, half, half)?;
        Ok((a, b))
    }

    /// Affine coupling blocks between a pixel unshuffle and shuffle.
    pub fn inn_forward(&self, g: &mut Graph, z: Var) -> Result<Var> {
        check_even(g, "inn_forward", z)?;
        let packed = g.pixel_unshuffle2(z)?;
        let (mut a, mut b) = self.split(g, packed)?;
        for blk in &self.model.layout.inn {
            let phi = self.subnet(g, b, blk.phi)?;
            let t1 = g.add(a, phi)?;
            let s = self.log_scale(g, t1, blk.rho)?;
            let e = g.exp(s);
            let scaled = g.hadamard(b, e)?;
            let tau = self.subnet(g, t1, blk.tau)?;
            let t2 = g.add(scaled, tau)?;
            a = t1;
            b = t2;
        }
        let joined = g.concat_channels(a, b)?;
        g.pixel_shuffle2(joined)
    }

    /// The closed-form inverse of [`Bound::inn_forward`].
    pub fn inn_backward(&self, g: &mut Graph, t: Var) -> Result<Var> {
        check_even(g, "inn_backward", t)?;
        let packed = g.pixel_unshuffle2(t)?;
        let (mut a, mut b) = self.split(g, packed)?;
        for blk in self.model.layout.inn.iter().rev() {
            let tau = self.subnet(g, a, blk.tau)?;
            let diff = g.sub(b, tau)?;
            let s = self.log_scale(g, a, blk.rho)?;
            let ns = g.neg(s);
            let e = g.exp(ns);
            let z2 = g.hadamard(diff, e)?;
            let phi = self.subnet(g, z2, blk.phi)?;
            let z1 = g.sub(a, phi)?;
            a = z1;
            b = z2;
        }
        let joined = g.concat_channels(a, b)?;
        g.pixel_shuffle2(joined)
    }

    fn levels(&self) -> usize {
        self.model.config.scale.trailing_zeros() as usize
    }

    /// HR → LR: conv, `log₂(scale)` max-pools, two convs.
    pub fn down(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let s = g.shape(z);
        let k = self.model.config.scale;
        if !s.h.is_multiple_of(k) || !s.w.is_multiple_of(k) {
            return Err(Error::invalid_shape(
                "down",
                s,
                "spatial dims not divisible by the scale",
            ));
        }
        let [c0, c1, c2] = self.model.layout.down;
        let mut h = self.conv_relu(g, z, c0)?;
        for _ in 0..self.levels() {
            h = g.maxpool2(h)?;
        }
        h = self.conv_relu(g, h, c1)?;
        self.conv(g, h, c2)
    }

    /// LR → HR: conv, `log₂(scale)` nearest upsamplings, two convs.
    pub fn up(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let [c0, c1, c2] = self.model.layout.up;
        let mut h = self.conv_relu(g, x, c0)?;
        for _ in 0..self.levels() {
            h = g.upsample2(h);
        }
        h = self.conv_relu(g, h, c1)?;
        self.conv(g, h, c2)
    }

    /// `Z − δ₃·(Up(Down Z − X) + η·P⁻¹(P Z − Y) + β₁(Z − U) + β₂(Z − V))`.
    #[allow(clippy::too_many_arguments)]
    pub fn recon_step(&self, g: &mut Graph, z: Var, x: Var, y: Var, u: Var, v: Var, stage: usize) -> Result<Var> {
        check_same(g, "recon_step", z, y)?;
        check_same(g, "recon_step", z, u)?;
        check_same(g, "recon_step", z, v)?;
        let [delta3, eta, beta1, beta2, _, _] = self.model.layout.stages[stage].map(|i| self.vars[i]);

        let dz = self.down(g, z)?;
        check_same(g, "recon_step", dz, x)?;
        let rx = g.sub(dz, x)?;
        let data = self.up(g, rx)?;

        let pz = self.inn_forward(g, z)?;
        let ry = g.sub(pz, y)?;
        let back = self.inn_backward(g, ry)?;
        let guide = g.scale_by(back, eta)?;

        let zu = g.sub(z, u)?;
        let cu = g.scale_by(zu, beta1)?;
        let zv = g.sub(z, v)?;
        let cv = g.scale_by(zv, beta2)?;

        let mut total = g.add(data, guide)?;
        total = g.add(total, cu)?;
        total = g.add(total, cv)?;
        let step = g.scale_by(total, delta3)?;
        g.sub(z, step)
    }

    /// Runs all stages from the bicubic initialisation of `x`.
    pub fn forward(&self, g: &mut Graph, x: Var, y: Var) -> Result<Var> {
        let cfg = &self.model.config;
        let (xs, ys) = (g.shape(x), g.shape(y));
        if xs.c != cfg.channels || ys.c != cfg.channels {
            return Err(Error::mismatch("mgdun_forward", xs, ys));
        }
        if ys != xs.with_spatial(xs.h * cfg.scale, xs.w * cfg.scale) {
            return Err(Error::mismatch("mgdun_forward", xs, ys));
        }
        if ys.h % 2 != 0 || ys.w % 2 != 0 {
            return Err(Error::invalid_shape("mgdun_forward", ys, "HR dims must be even"));
        }
        let init = bicubic_resize(g.value(x), cfg.scale, ResizeDirection::Up)?;
        let z0 = g.leaf(init);
        let (mut z, mut u, mut v) = (z0, z0, z0);
        for t in 0..cfg.stages {
            let [_, _, _, _, xi1, xi2] = self.model.layout.stages[t].map(|i| self.vars[i]);
            u = self.denoise(g, u, z, xi1)?;
            v = self.denoise(g, v, z, xi2)?;
            z = self.recon_step(g, z, x, y, u, v, t)?;
        }
        Ok(z)
    }
}

/// `Z⁽ᵀ⁾` for the given observations.
pub fn mgdun_forward(x: &Tensor, y: &Tensor, model: &MgdunModel) -> Result<Tensor> {
    model.forward(x, y)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(stages: usize) -> ModelConfig {
        ModelConfig {
            stages,
            width: 8,
            depth: 2,
            inn_hidden: 4,
            seed: 3,
            ..ModelConfig::default()
        }
    }

    fn rand(shape: impl Into<Shape>, seed: u64) -> Tensor {
        Tensor::uniform(shape, 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn layout_names_are_unique_and_shared() {
        let m = MgdunModel::new(ModelConfig::default()).unwrap();
        let names = m.params().names();
        let mut sorted = names.to_vec();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        // Four encoder and four decoder blocks of two convs, weight + bias each.
        assert_eq!(names.iter().filter(|n| n.starts_with("denoiser.")).count(), 32);
        assert_eq!(names.iter().filter(|n| n.starts_with("stage")).count(), 24);
        assert!(!names.iter().any(|n| n.starts_with("stage") && n.contains("denoiser")));
    }

    #[test]
    fn stage_scalars_start_at_defaults() {
        let m = MgdunModel::new(small(3)).unwrap();
        for t in 0..3 {
            assert_eq!(m.stage_params(t), STAGE_INIT);
        }
        let mut m = m;
        let sp = StageParams { eta: 0.0, ..STAGE_INIT };
        m.set_stage_params(1, sp);
        assert_eq!(m.stage_params(1), sp);
        assert_eq!(m.stage_params(0), STAGE_INIT);
    }

    #[test]
    fn seeded_init_is_reproducible() {
        assert_eq!(MgdunModel::new(small(2)).unwrap(), MgdunModel::new(small(2)).unwrap());
        let other = MgdunModel::new(ModelConfig { seed: 4, ..small(2) }).unwrap();
        assert_ne!(MgdunModel::new(small(2)).unwrap(), other);
    }

    #[test]
    fn zero_denoiser_passes_input_through() {
        let m = MgdunModel::zeroed(small(1)).unwrap();
        let (p, z) = (rand([1, 1, 16, 16], 1), rand([1, 1, 16, 16], 2));
        let out = m.denoise(&p, &z, 0.3).unwrap();
        let mut expect = p.clone();
        expect.axpy(0.3, &z).unwrap();
        assert_eq!(out, expect);
        assert_eq!(m.denoise(&p, &z, 0.0).unwrap(), p);
    }

    #[test]
    fn denoiser_preserves_shape() {
        let m = MgdunModel::new(ModelConfig { depth: 4, ..small(1) }).unwrap();
        for size in [32, 40, 8, 18] {
            let x = rand([1, 1, size, size], 5);
            assert_eq!(m.denoise(&x, &x, 0.1).unwrap().shape(), x.shape());
        }
        let x = rand([2, 1, 32, 24], 6);
        assert_eq!(m.denoise(&x, &x, 0.1).unwrap().shape(), x.shape());
        assert!(m.denoise(&x, &rand([2, 1, 32, 32], 7), 0.1).is_err());
    }

    #[test]
    fn zero_inn_is_identity() {
        let m = MgdunModel::zeroed(small(1)).unwrap();
        let z = rand([1, 1, 8, 8], 8);
        assert_eq!(m.inn_forward(&z).unwrap(), z);
        assert_eq!(m.inn_backward(&z).unwrap(), z);
        assert!(m.inn_forward(&rand([1, 1, 7, 8], 9)).is_err());
        assert!(m.inn_backward(&rand([1, 1, 8, 5], 9)).is_err());
    }

    #[test]
    fn inn_round_trips_both_ways() {
        let m = MgdunModel::new(small(1)).unwrap();
        let z = rand([2, 1, 16, 12], 10);
        let t = m.inn_forward(&z).unwrap();
        assert_eq!(t.shape(), z.shape());
        assert!(m.inn_backward(&t).unwrap().max_abs_diff(&z).unwrap() < 1e-5);
        assert!(
            m.inn_forward(&m.inn_backward(&z).unwrap())
                .unwrap()
                .max_abs_diff(&z)
                .unwrap()
                < 1e-5
        );
        assert!(t.max_abs_diff(&z).unwrap() > 1e-4);
    }

    #[test]
    fn up_down_shapes_and_zero_output() {
        for scale in [2, 4] {
            let cfg = ModelConfig { scale, ..small(1) };
            let m = MgdunModel::new(cfg).unwrap();
            let z = rand([1, 1, 32, 32], 11);
            assert_eq!(m.down(&z).unwrap().shape(), Shape::new(1, 1, 32 / scale, 32 / scale));
            let x = rand([1, 1, 8, 8], 12);
            assert_eq!(m.up(&x).unwrap().shape(), Shape::new(1, 1, 8 * scale, 8 * scale));
            let zm = MgdunModel::zeroed(cfg).unwrap();
            assert!(zm.down(&z).unwrap().data().iter().all(|&v| v == 0.0));
            assert!(zm.up(&x).unwrap().data().iter().all(|&v| v == 0.0));
        }
        let m = MgdunModel::new(ModelConfig { scale: 4, ..small(1) }).unwrap();
        assert!(m.down(&rand([1, 1, 30, 32], 13)).is_err());
    }

    #[test]
    fn recon_step_zero_step_and_fixed_point() {
        let m = MgdunModel::new(ModelConfig { scale: 4, ..small(1) }).unwrap();
        let (z, u, v, y) = (
            rand([1, 1, 32, 32], 14),
            rand([1, 1, 32, 32], 15),
            rand([1, 1, 32, 32], 16),
            rand([1, 1, 32, 32], 17),
        );
        let x = rand([1, 1, 8, 8], 18);
        let out = m.recon_step(&z, &x, &y, &u, &v, 0).unwrap();
        assert_eq!(out.shape(), y.shape());

        let mut frozen = m.clone();
        frozen.set_stage_params(
            0,
            StageParams {
                delta3: 0.0,
                ..STAGE_INIT
            },
        );
        assert_eq!(frozen.recon_step(&z, &x, &y, &u, &v, 0).unwrap(), z);

        // Zero model: Down(Z) = 0 = X, P = identity so Y = P(Z) and P⁻¹(0) = 0.
        let zm = MgdunModel::zeroed(ModelConfig { scale: 4, ..small(1) }).unwrap();
        let zero_x = Tensor::zeros([1, 1, 8, 8]);
        let out = zm
            .recon_step(&z, &zero_x, &zm.inn_forward(&z).unwrap(), &z, &z, 0)
            .unwrap();
        assert_eq!(out, z);
    }

    #[test]
    fn zero_stages_return_bicubic() {
        let m = MgdunModel::new(small(0)).unwrap();
        let x = rand([1, 1, 8, 8], 19);
        let y = rand([1, 1, 16, 16], 20);
        let out = mgdun_forward(&x, &y, &m).unwrap();
        assert_eq!(out, bicubic_resize(&x, 2, ResizeDirection::Up).unwrap());
    }

    #[test]
    fn forward_shape_and_guards() {
        let m = MgdunModel::new(ModelConfig { scale: 4, ..small(2) }).unwrap();
        let x = rand([1, 1, 8, 8], 21);
        let y = rand([1, 1, 32, 32], 22);
        let out = mgdun_forward(&x, &y, &m).unwrap();
        assert_eq!(out.shape(), Shape::new(1, 1, 32, 32));
        assert!(out.all_finite());
        assert!(mgdun_forward(&x, &rand([1, 1, 16, 16], 23), &m).is_err());
    }

    #[test]
    fn zero_ladder() {
        let cfg = small(3);
        let mut m = MgdunModel::zeroed(cfg).unwrap();
        let x = rand([1, 1, 8, 8], 24);
        let y = rand([1, 1, 16, 16], 25);
        let bic = bicubic_resize(&x, 2, ResizeDirection::Up).unwrap();
        for t in 0..3 {
            m.set_stage_params(
                t,
                StageParams {
                    xi1: 0.0,
                    xi2: 0.0,
                    ..STAGE_INIT
                },
            );
        }
        // U and V stay at bicubic(X); the INN and Up/Down terms are identity and zero.
        let mut z = bic.clone();
        for _ in 0..3 {
            let r = z.sub(&y).unwrap().scale(0.1);
            let c = z.sub(&bic).unwrap().scale(0.5 + 0.5);
            z.axpy(-0.1, &r.add(&c).unwrap()).unwrap();
        }
        assert!(mgdun_forward(&x, &y, &m).unwrap().max_abs_diff(&z).unwrap() < 1e-6);
        for t in 0..3 {
            m.set_stage_params(
                t,
                StageParams {
                    xi1: 0.0,
                    xi2: 0.0,
                    eta: 0.0,
                    ..STAGE_INIT
                },
            );
        }
        assert_eq!(mgdun_forward(&x, &y, &m).unwrap(), bic);
    }

    #[test]
    fn from_params_validates() {
        let m = MgdunModel::new(small(2)).unwrap();
        let back = MgdunModel::from_params(*m.config(), m.params().clone()).unwrap();
        assert_eq!(back, m);
        let other = MgdunModel::new(small(3)).unwrap();
        assert!(MgdunModel::from_params(*m.config(), other.params().clone()).is_err());
    }
}
