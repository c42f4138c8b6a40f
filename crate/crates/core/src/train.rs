//! Supervised training of the unfolded network with an L1 loss and Adam.

use std::fs;
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::checkpoint;
use crate::degradation::ReconProblem;
use crate::error::{Error, Result};
use crate::metrics;
use crate::net::{MgdunModel, ParamSet, StageParams};
use crate::parallel;
use crate::tensor::Tensor;

/// Mean absolute error.
pub fn l1_loss(pred: &Tensor, gt: &Tensor) -> Result<f32> {
    if pred.shape() != gt.shape() {
        return Err(Error::mismatch("l1_loss", pred.shape(), gt.shape()));
    }
    Ok(pred.sub(gt)?.mean_abs())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Parameters with `frozen[i]` set are left
/// untouched along with their moments.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &AdamConfig,
    frozen: &[bool],
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::InvalidArgument(format!(
            "adam_step: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::mismatch("adam_step", p.shape(), g.shape()));
        }
        if !g.all_finite() {
            return Err(Error::Diverged {
                iter: state.step as usize + 1,
                reason: format!("non-finite gradient for parameter {i}"),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - (cfg.beta1 as f64).powi(t);
    let c2 = 1.0 - (cfg.beta2 as f64).powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if frozen.get(i).copied().unwrap_or(false) {
            continue;
        }
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (((pj, &gj), mj), vj) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mj = cfg.beta1 * *mj + (1.0 - cfg.beta1) * gj;
            *vj = cfg.beta2 * *vj + (1.0 - cfg.beta2) * gj * gj;
            let mhat = *mj as f64 / c1;
            let vhat = *vj as f64 / c2;
            *pj -= (cfg.lr as f64 * mhat / (vhat.sqrt() + cfg.eps as f64)) as f32;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many iterations even mid-epoch.
    pub max_iters: Option<usize>,
    pub seed: u64,
    /// Validation interval in iterations; the last iteration is always validated.
    pub val_every: usize,
    /// When false, `η` is pinned at zero in every stage and never updated.
    pub guide: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamConfig::default(),
            batch_size: 4,
            epochs: 200,
            max_iters: None,
            seed: 0,
            val_every: 50,
            guide: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.adam.lr >= 0.0) || !self.adam.lr.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "lr must be non-negative, got {}",
                self.adam.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
        }
        if self.val_every == 0 {
            return Err(Error::InvalidArgument("val_every must be at least 1".into()));
        }
        Ok(())
    }
}

/// Mean batch loss and mean parameter gradients.
pub fn batch_gradients(model: &MgdunModel, batch: &[&ReconProblem]) -> Result<(f32, Vec<Tensor>)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let per_sample = parallel::map(batch, |p| sample_gradients(model, p));
    let mut loss = 0.0f64;
    let mut total: Option<Vec<Tensor>> = None;
    for r in per_sample {
        let (l, grads) = r?;
        loss += l as f64;
        match &mut total {
            None => total = Some(grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&grads) {
                    a.add_assign(g)?;
                }
            }
        }
    }
    let n = batch.len() as f32;
    let grads = total
        .unwrap_or_default()
        .into_iter()
        .map(|g| g.scale(1.0 / n))
        .collect();
    Ok(((loss / batch.len() as f64) as f32, grads))
}

fn sample_gradients(model: &MgdunModel, p: &ReconProblem) -> Result<(f32, Vec<Tensor>)> {
    let truth =
        p.z.as_ref()
            .ok_or_else(|| Error::InvalidArgument("training pair without ground truth".into()))?;
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let x = g.leaf(p.x.clone());
    let y = g.leaf(p.y.clone());
    let gt = g.leaf(truth.clone());
    let out = bound.forward(&mut g, x, y)?;
    let diff = g.sub(out, gt)?;
    let loss = g.mean_abs(diff);
    let mut grads = g.backward(loss)?;
    let value = g.value(loss).item()?;
    let per_param = bound
        .params()
        .iter()
        .zip(model.params().tensors())
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((value, per_param))
}

/// Mean PSNR of the model over problems with ground truth.
pub fn evaluate_psnr(model: &MgdunModel, problems: &[ReconProblem]) -> Result<f64> {
    let scores = parallel::map(problems, |p| -> Result<f64> {
        let truth =
            p.z.as_ref()
                .ok_or_else(|| Error::InvalidArgument("evaluation pair without ground truth".into()))?;
        metrics::psnr(&model.forward(&p.x, &p.y)?, truth, 1.0)
    });
    let mut sum = 0.0;
    for s in scores {
        sum += s?;
    }
    Ok(sum / problems.len().max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub iter: usize,
    pub loss: f32,
    pub val_psnr: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub trace: Vec<LossRow>,
    pub best: MgdunModel,
    pub best_val_psnr: Option<f64>,
    pub adam: AdamState,
}

impl TrainReport {
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("iter,loss,val_psnr\n");
        for r in &self.trace {
            match r.val_psnr {
                Some(p) => out.push_str(&format!("{},{:.9e},{:.6}\n", r.iter, r.loss, p)),
                None => out.push_str(&format!("{},{:.9e},\n", r.iter, r.loss)),
            }
        }
        out
    }

    pub fn first_loss(&self) -> Option<f32> {
        self.trace.first().map(|r| r.loss)
    }

    /// Mean loss over the last `n` iterations.
    pub fn tail_loss(&self, n: usize) -> Option<f32> {
        let n = n.min(self.trace.len());
        if n == 0 {
            return None;
        }
        let tail = &self.trace[self.trace.len() - n..];
        Some((tail.iter().map(|r| r.loss as f64).sum::<f64>() / n as f64) as f32)
    }
}

/// Pins `η = 0` in every stage and returns the matching freeze mask.
pub fn disable_guide(model: &mut MgdunModel) -> Vec<bool> {
    for t in 0..model.config().stages {
        let sp = model.stage_params(t);
        model.set_stage_params(t, StageParams { eta: 0.0, ..sp });
    }
    let mut frozen = vec![false; model.params().len()];
    for i in model.eta_indices() {
        frozen[i] = true;
    }
    frozen
}

/// Trains `model` in place. With `out_dir`, writes `loss.csv`, `best.ckpt`
/// and `final.ckpt`; on divergence the last good state is saved as
/// `final.ckpt` before the error is returned.
pub fn train(
    cfg: &TrainConfig,
    model: &mut MgdunModel,
    data: &[ReconProblem],
    val: &[ReconProblem],
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let frozen = if cfg.guide {
        vec![false; model.params().len()]
    } else {
        disable_guide(model)
    };
    let mut adam = AdamState::new(model.params().tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let per_epoch = data.len().div_ceil(cfg.batch_size);
    let total = cfg
        .max_iters
        .map_or(cfg.epochs * per_epoch, |m| m.min(cfg.epochs * per_epoch));

    let mut trace = Vec::with_capacity(total);
    let mut best: Option<(f64, MgdunModel)> = None;
    let mut iter = 0;
    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if iter == total {
                break 'epochs;
            }
            iter += 1;
            let batch: Vec<&ReconProblem> = chunk.iter().map(|&i| &data[i]).collect();
            let (loss, grads) = batch_gradients(model, &batch)?;
            let step = if loss.is_finite() {
                adam_step(model.params_mut().tensors_mut(), &grads, &mut adam, &cfg.adam, &frozen)
            } else {
                Err(Error::Diverged {
                    iter,
                    reason: format!("loss is {loss}"),
                })
            };
            if let Err(e) = step {
                if let Some(dir) = out_dir {
                    write_outputs(dir, &trace, model, &adam, best.as_ref().map(|b| &b.1))?;
                }
                return Err(e);
            }
            let val_psnr = if !val.is_empty() && (iter % cfg.val_every == 0 || iter == total) {
                let p = evaluate_psnr(model, val)?;
                if best.as_ref().is_none_or(|(b, _)| p > *b) {
                    best = Some((p, model.clone()));
                }
                info!("epoch {epoch} iter {iter}: loss {loss:.6}, val PSNR {p:.3} dB");
                Some(p)
            } else {
                None
            };
            trace.push(LossRow { iter, loss, val_psnr });
        }
    }
    let (best_val_psnr, best) = match best {
        Some((p, m)) => (Some(p), m),
        None => (None, model.clone()),
    };
    if let Some(dir) = out_dir {
        write_outputs(dir, &trace, model, &adam, Some(&best))?;
    }
    Ok(TrainReport {
        trace,
        best,
        best_val_psnr,
        adam,
    })
}

fn write_outputs(
    dir: &Path,
    trace: &[LossRow],
    model: &MgdunModel,
    adam: &AdamState,
    best: Option<&MgdunModel>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let report = TrainReport {
        trace: trace.to_vec(),
        best: model.clone(),
        best_val_psnr: None,
        adam: adam.clone(),
    };
    fs::write(dir.join("loss.csv"), report.loss_csv())?;
    checkpoint::save(dir.join("final.ckpt"), model, Some(adam))?;
    if let Some(b) = best {
        checkpoint::save(dir.join("best.ckpt"), b, None)?;
    }
    Ok(())
}

/// Parameters whose gradient is identically zero.
pub fn dead_parameters(params: &ParamSet, grads: &[Tensor]) -> Vec<String> {
    params
        .names()
        .iter()
        .zip(grads)
        .filter(|(_, g)| g.data().iter().all(|v| v.abs() <= 1e-12))
        .map(|(n, _)| n.clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degradation::{synth_problem, DegradationOp, LinearCrossModalOp, PhantomSpec};
    use crate::net::ModelConfig;

    fn t(v: &[f32]) -> Tensor {
        Tensor::from_vec([1, 1, 1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn l1_examples() {
        let x = t(&[0.3, -1.0, 2.0]);
        assert_eq!(l1_loss(&x, &x).unwrap(), 0.0);
        assert_eq!(
            l1_loss(&Tensor::zeros([1, 1, 4, 4]), &Tensor::full([1, 1, 4, 4], 1.0)).unwrap(),
            1.0
        );
        assert!(l1_loss(&x, &t(&[1.0])).is_err());
    }

    #[test]
    fn l1_gradient_matches_finite_differences() {
        let pred = t(&[0.3, -1.0, 2.0, 0.7]);
        let gt = t(&[0.1, 0.5, 2.5, 0.0]);
        let mut g = Graph::new();
        let p = g.leaf(pred.clone());
        let q = g.leaf(gt.clone());
        let d = g.sub(p, q).unwrap();
        let l = g.mean_abs(d);
        let grads = g.backward(l).unwrap();
        let h = 1e-3f32;
        for i in 0..4 {
            let mut a = pred.clone();
            a.data_mut()[i] += h;
            let mut b = pred.clone();
            b.data_mut()[i] -= h;
            let fd = (l1_loss(&a, &gt).unwrap() - l1_loss(&b, &gt).unwrap()) / (2.0 * h);
            let sign = (pred.data()[i] - gt.data()[i]).signum() / 4.0;
            assert!((grads.get(p).unwrap().data()[i] - sign).abs() < 1e-7);
            assert!((fd - sign).abs() < 1e-3);
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_params_and_decays_moments() {
        let mut params = vec![t(&[1.0, -2.0])];
        let mut state = AdamState::new(&params);
        state.m[0] = t(&[0.5, 0.5]);
        state.v[0] = t(&[0.25, 0.25]);
        let before = params.clone();
        let cfg = AdamConfig::default();
        // A zero gradient with nonzero moments still moves parameters; with
        // zero moments it must not.
        let mut fresh = AdamState::new(&params);
        adam_step(&mut params, &[t(&[0.0, 0.0])], &mut fresh, &cfg, &[]).unwrap();
        assert_eq!(params, before);
        adam_step(&mut params, &[t(&[0.0, 0.0])], &mut state, &cfg, &[]).unwrap();
        assert!((state.m[0].data()[0] - 0.45).abs() < 1e-7);
        assert!((state.v[0].data()[0] - 0.24975).abs() < 1e-7);
    }

    #[test]
    fn adam_first_step_by_hand() {
        let mut params = vec![t(&[1.0])];
        let mut state = AdamState::new(&params);
        let cfg = AdamConfig {
            lr: 1e-3,
            ..AdamConfig::default()
        };
        adam_step(&mut params, &[t(&[1.0])], &mut state, &cfg, &[]).unwrap();
        // m̂ = 1, v̂ = 1, step = lr / (1 + eps).
        let expect = 1.0 - 1e-3 / (1.0 + 1e-8);
        assert!((params[0].data()[0] as f64 - expect).abs() < 1e-7);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_is_deterministic_and_respects_freeze() {
        let init = vec![t(&[1.0, 2.0]), t(&[3.0])];
        let grads = vec![t(&[0.1, -0.2]), t(&[0.3])];
        let cfg = AdamConfig::default();
        let run = || {
            let mut p = init.clone();
            let mut s = AdamState::new(&p);
            adam_step(&mut p, &grads, &mut s, &cfg, &[false, true]).unwrap();
            (p, s)
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        assert_eq!(a[1], init[1]);
        assert_ne!(a[0], init[0]);
    }

    #[test]
    fn adam_rejects_nan() {
        let mut params = vec![t(&[1.0])];
        let mut state = AdamState::new(&params);
        let err = adam_step(&mut params, &[t(&[f32::NAN])], &mut state, &AdamConfig::default(), &[]);
        assert!(matches!(err, Err(Error::Diverged { .. })));
        assert_eq!(state.step, 0);
    }

    #[test]
    fn adam_minimises_a_parabola() {
        let mut w = vec![t(&[1.0])];
        let mut state = AdamState::new(&w);
        let cfg = AdamConfig {
            lr: 1e-2,
            ..AdamConfig::default()
        };
        let mut steps = 0;
        while w[0].data()[0].abs() >= 0.5 && steps < 2000 {
            let g = t(&[2.0 * w[0].data()[0]]);
            adam_step(&mut w, &[g], &mut state, &cfg, &[]).unwrap();
            steps += 1;
        }
        assert!(w[0].data()[0].abs() < 0.5, "{steps}");
    }

    fn tiny_data(n: usize) -> Vec<ReconProblem> {
        let dk = DegradationOp::new(2, 1.0, 0.0).unwrap();
        let p = LinearCrossModalOp::gaussian(0.5, 0.8, 0.0).unwrap();
        (0..n)
            .map(|i| synth_problem(&PhantomSpec::new(i as u64, 16, 16), &dk, &p).unwrap())
            .collect()
    }

    fn tiny_model() -> MgdunModel {
        MgdunModel::new(ModelConfig {
            stages: 1,
            width: 4,
            depth: 2,
            inn_hidden: 4,
            seed: 1,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn zero_lr_leaves_weights_bit_identical() {
        let data = tiny_data(3);
        let mut model = tiny_model();
        let before = model.clone();
        let cfg = TrainConfig {
            adam: AdamConfig {
                lr: 0.0,
                ..AdamConfig::default()
            },
            batch_size: 2,
            epochs: 2,
            ..TrainConfig::default()
        };
        let report = train(&cfg, &mut model, &data, &data[..1], None).unwrap();
        assert_eq!(report.trace.len(), 4);
        assert_eq!(model, before);
    }

    #[test]
    fn guide_disabled_pins_eta() {
        let data = tiny_data(2);
        let mut model = tiny_model();
        let cfg = TrainConfig {
            adam: AdamConfig {
                lr: 1e-2,
                ..AdamConfig::default()
            },
            batch_size: 2,
            epochs: 2,
            guide: false,
            ..TrainConfig::default()
        };
        train(&cfg, &mut model, &data, &[], None).unwrap();
        assert_eq!(model.stage_params(0).eta, 0.0);
        assert_ne!(model.stage_params(0).delta3, 0.1);
    }

    #[test]
    fn batch_gradient_is_mean_of_samples() {
        let data = tiny_data(2);
        let model = tiny_model();
        let (l0, g0) = batch_gradients(&model, &[&data[0]]).unwrap();
        let (l1, g1) = batch_gradients(&model, &[&data[1]]).unwrap();
        let (l, g) = batch_gradients(&model, &[&data[0], &data[1]]).unwrap();
        assert!((l - (l0 + l1) / 2.0).abs() < 1e-7);
        for i in 0..g.len() {
            let mean = g0[i].add(&g1[i]).unwrap().scale(0.5);
            assert!(g[i].max_abs_diff(&mean).unwrap() <= 1e-6 * (1.0 + mean.norm() as f32));
        }
    }

    #[test]
    fn rejects_empty_data_and_bad_config() {
        let mut model = tiny_model();
        assert!(train(&TrainConfig::default(), &mut model, &[], &[], None).is_err());
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(train(&bad, &mut model, &tiny_data(1), &[], None).is_err());
    }
}
