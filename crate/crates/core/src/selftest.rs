//! The invariant suite run by `mgdun selftest`.
//!
//! Every property is evaluated against an independent reference (adjoint
//! dot-product identities, `f64` finite differences, a conjugate-gradient
//! solve of the normal equations, closed-form metric values) and reported
//! with its measured value and tolerance.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::degradation::{synth_problem, DegradationOp, LinearCrossModalOp, PhantomSpec};
use crate::error::Result;
use crate::metrics;
use crate::net::{MgdunModel, ModelConfig};
use crate::oracle;
use crate::solver::{cg_quadratic_oracle, solve, ObservationModel, SolverParams};
use crate::tensor::{Shape, Tensor};

pub const INN_TOL: f64 = 1e-4;
pub const ADJOINT_TOL: f64 = 1e-5;
pub const LAYER_GRAD_TOL: f64 = 1e-3;
pub const E2E_GRAD_TOL: f64 = 1e-2;
pub const CG_ORACLE_TOL: f64 = 1e-3;
/// Largest objective increase tolerated between consecutive solver iterations.
pub const MONOTONE_SLACK: f64 = 1e-8;
pub const METRIC_TOL: f64 = 1e-6;

/// Deliberate defects used to confirm that the suite catches regressions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// The blur adjoint correlates with a kernel rotated by one tap.
    BlurAdjoint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelftestConfig {
    pub seed: u64,
    pub fault: Option<Fault>,
    /// Random draws for the INN round trip.
    pub inn_draws: usize,
    pub adjoint_pairs: usize,
    /// Parameters sampled in the end-to-end gradient check.
    pub e2e_params: usize,
    pub pgd_iters: usize,
}

impl Default for SelftestConfig {
    fn default() -> Self {
        SelftestConfig {
            seed: 0,
            fault: None,
            inn_draws: 1000,
            adjoint_pairs: 100,
            e2e_params: 24,
            pgd_iters: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropertyResult {
    pub name: &'static str,
    pub passed: bool,
    /// Measured worst-case value; compared against `tolerance`.
    pub value: f64,
    pub tolerance: f64,
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for PropertyResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<24} {:.3e} (tol {:.0e}) {:>7.2}s",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.value,
            self.tolerance,
            self.seconds
        )?;
        if !self.detail.is_empty() {
            write!(f, "  {}", self.detail)?;
        }
        Ok(())
    }
}

pub fn all_passed(results: &[PropertyResult]) -> bool {
    results.iter().all(|r| r.passed)
}

fn check(name: &'static str, tolerance: f64, f: impl FnOnce() -> Result<(f64, String)>) -> PropertyResult {
    let start = Instant::now();
    let (passed, value, detail) = match f() {
        Ok((v, d)) => (v < tolerance, v, d),
        Err(e) => (false, f64::NAN, format!("error: {e}")),
    };
    PropertyResult {
        name,
        passed,
        value,
        tolerance,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// The operators used throughout the suite: 3×3 Gaussian blur with `σ = 1`
/// and a Gaussian cross-modal map with `σ = 0.5`, gain 0.8.
pub fn default_operators(scale: usize, noise_std: f32) -> Result<ObservationModel> {
    Ok(ObservationModel {
        dk: DegradationOp::new(scale, 1.0, noise_std)?,
        p: LinearCrossModalOp::gaussian(0.5, 0.8, noise_std)?,
    })
}

/// Worst adjoint gaps of `(DK, (DK)ᵀ)` and `(P, Pᵀ)` for scales 2 and 4.
/// With [`Fault::BlurAdjoint`] the blur adjoint is computed with a corrupted kernel.
pub fn adjoint_gaps(pairs: usize, seed: u64, fault: Option<Fault>) -> Result<(f64, f64)> {
    let (mut worst_dk, mut worst_p) = (0.0f64, 0.0f64);
    for scale in [2, 4] {
        let ops = default_operators(scale, 0.0)?;
        let (dk, p) = match fault {
            None => oracle::operator_adjoint_gaps(&ops.dk, &ops.p, pairs.div_ceil(2), seed ^ scale as u64)?,
            Some(Fault::BlurAdjoint) => {
                let mut bad = ops.dk.clone();
                bad.kernel.rotate_left(1);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut worst = 0.0f64;
                for _ in 0..pairs.div_ceil(2) {
                    let side = 8 * rng.random_range(2..=8usize);
                    let z = Tensor::randn([1, 1, side, side], 1.0, &mut rng);
                    let x = Tensor::randn(ops.dk.lr_shape(z.shape()), 1.0, &mut rng);
                    worst = worst.max(oracle::adjoint_gap(|t| ops.dk.apply(t), |t| bad.adjoint(t), &z, &x)?);
                }
                (
                    worst,
                    oracle::operator_adjoint_gaps(&ops.dk, &ops.p, pairs.div_ceil(2), seed)?.1,
                )
            }
        };
        worst_dk = worst_dk.max(dk);
        worst_p = worst_p.max(p);
    }
    Ok((worst_dk, worst_p))
}

/// Worst `max |inn_backward(inn_forward(z)) − z|` over `draws` random
/// parameter sets and inputs with sides between 2 and 64.
///
/// Each draw reseeds the coupling weights from the model's initialisation
/// distribution and draws biases from `U(−0.1, 0.1)`.
pub fn inn_round_trip_error(draws: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ModelConfig {
        stages: 1,
        width: 2,
        depth: 1,
        seed,
        ..ModelConfig::default()
    };
    let mut model = MgdunModel::new(cfg)?;
    let inn = model.inn_indices();
    let mut worst = 0.0f64;
    for _ in 0..draws {
        for &i in &inn {
            let name = &model.params().names()[i];
            let (bias, output) = (name.ends_with(".bias"), name.ends_with("conv1.weight"));
            let t = &mut model.params_mut().tensors_mut()[i];
            *t = if bias {
                Tensor::uniform(t.shape(), -0.1, 0.1, &mut rng)
            } else if output {
                Tensor::he_uniform(t.shape(), &mut rng).scale(0.1)
            } else {
                Tensor::he_uniform(t.shape(), &mut rng)
            };
        }
        let h = 2 * rng.random_range(1..=32usize);
        let w = 2 * rng.random_range(1..=32usize);
        let z = Tensor::uniform([1, 1, h, w], -1.0, 1.0, &mut rng);
        let back = model.inn_backward(&model.inn_forward(&z)?)?;
        worst = worst.max(back.max_abs_diff(&z)? as f64);
    }
    Ok(worst)
}

/// Outcome of comparing the splitting solver with the CG normal-equation solve.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleComparison {
    pub scale: usize,
    /// `‖Z_pgd − Z_cg‖ / ‖Z_cg‖`.
    pub rel_err: f64,
    /// Largest increase of the objective between consecutive iterations.
    pub max_increase: f64,
    pub delta3: f32,
}

/// Runs the solver with `λ₁ = λ₂ = 0` on a 32×32 phantom and compares its
/// final iterate with the joint quadratic minimiser computed by CG.
pub fn pgd_vs_cg(scale: usize, iters: usize, seed: u64) -> Result<OracleComparison> {
    let ops = default_operators(scale, 0.01)?;
    let problem = synth_problem(&PhantomSpec::new(seed, 32, 32), &ops.dk, &ops.p)?;
    let params = SolverParams {
        lambda1: 0.0,
        lambda2: 0.0,
        iters,
        ..SolverParams::default()
    };
    let out = solve(&problem, &ops, &params)?;
    let cg = cg_quadratic_oracle(&problem, &ops, &params, None)?;
    let rel_err = out.state.z.sub(&cg)?.norm() / cg.norm();
    let max_increase = out
        .trace
        .windows(2)
        .map(|w| w[1].objective - w[0].objective)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(OracleComparison {
        scale,
        rel_err,
        max_increase,
        delta3: out.delta3,
    })
}

/// One metric identity with its observed deviation from the expected value.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricIdentity {
    pub name: &'static str,
    pub deviation: f64,
}

/// Bicubic row of the published IXI 2× table: PSNR (dB) and the "MSE" column.
pub const PUBLISHED_BICUBIC_PSNR: f64 = 24.5537;
pub const PUBLISHED_BICUBIC_MSE_COLUMN: f64 = 15.4654;

/// `255 · 10^(−psnr/20)`: the RMSE in 0–255 units implied by a PSNR.
pub fn rmse255_from_psnr(psnr_db: f64) -> f64 {
    255.0 * 10f64.powf(-psnr_db / 20.0)
}

/// Closed-form metric cases, symmetry and the PSNR/RMSE identity. Each
/// deviation is zero when the identity holds exactly.
pub fn metric_identities(seed: u64) -> Result<Vec<MetricIdentity>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = Shape::new(1, 1, 24, 24);
    let a = Tensor::uniform(shape, 0.0, 1.0, &mut rng);
    let b = Tensor::uniform(shape, 0.0, 1.0, &mut rng);
    let zeros = Tensor::zeros(shape);
    let ones = Tensor::full(shape, 1.0);
    let half = Tensor::full(shape, 0.5);
    let shifted = half.map(|v| v + 0.1);
    let err = |x: f64, want: f64| (x - want).abs();
    let mut out = vec![
        MetricIdentity {
            name: "psnr(x,x)=inf",
            deviation: if metrics::psnr(&a, &a, 1.0)? == f64::INFINITY {
                0.0
            } else {
                1.0
            },
        },
        MetricIdentity {
            name: "psnr(0,1)=0dB",
            deviation: err(metrics::psnr(&zeros, &ones, 1.0)?, 0.0),
        },
        MetricIdentity {
            name: "psnr(err 0.1)=20dB",
            // 0.6f32 − 0.5f32 is not exactly 0.1; compare against the f32 difference.
            deviation: err(
                metrics::psnr(&half, &shifted, 1.0)?,
                -20.0 * ((0.5f32 + 0.1f32) as f64 - 0.5).log10(),
            ),
        },
        MetricIdentity {
            name: "rmse255(x,x)=0",
            deviation: metrics::rmse255(&a, &a)?,
        },
        MetricIdentity {
            name: "rmse255(err 0.1)=25.5",
            deviation: err(
                metrics::rmse255(&half, &shifted)?,
                255.0 * ((0.5f32 + 0.1f32) as f64 - 0.5),
            ),
        },
        MetricIdentity {
            name: "ssim(x,x)=1",
            deviation: err(metrics::ssim(&a, &a)?, 1.0),
        },
        MetricIdentity {
            name: "psnr symmetric",
            deviation: err(metrics::psnr(&a, &b, 1.0)?, metrics::psnr(&b, &a, 1.0)?),
        },
        MetricIdentity {
            name: "ssim symmetric",
            deviation: err(metrics::ssim(&a, &b)?, metrics::ssim(&b, &a)?),
        },
    ];
    let (ca, cb) = (0.3f64, 0.7f64);
    let c1 = (0.01f64).powi(2);
    out.push(MetricIdentity {
        name: "ssim constants",
        deviation: err(
            metrics::ssim(&Tensor::full(shape, ca as f32), &Tensor::full(shape, cb as f32))?,
            (2.0 * (ca as f32 as f64) * (cb as f32 as f64) + c1)
                / ((ca as f32 as f64).powi(2) + (cb as f32 as f64).powi(2) + c1),
        ),
    });
    let mut worst = 0.0f64;
    for _ in 0..16 {
        let noise = rng.random_range(0.001f32..0.3);
        let p = a.zip_map(&Tensor::randn(shape, noise, &mut rng), "noise", |x, n| {
            (x + n).clamp(0.0, 1.0)
        })?;
        let joint = metrics::ImageMetrics::compute(&p, &a)?;
        worst = worst.max(err(20.0 * (255.0 / joint.rmse255).log10(), joint.psnr_db));
    }
    out.push(MetricIdentity {
        name: "psnr<->rmse255",
        deviation: worst,
    });
    Ok(out)
}

/// Runs every property in a fixed order.
pub fn run(cfg: &SelftestConfig) -> Vec<PropertyResult> {
    let seed = cfg.seed;
    let mut results = Vec::new();
    results.push(check("inn_round_trip", INN_TOL, || {
        Ok((
            inn_round_trip_error(cfg.inn_draws, seed)?,
            format!("{} draws", cfg.inn_draws),
        ))
    }));
    let mut p_gap = None;
    results.push(check("blur_adjoint", ADJOINT_TOL, || {
        let (dk, p) = adjoint_gaps(cfg.adjoint_pairs, seed, cfg.fault)?;
        p_gap = Some(p);
        Ok((dk, format!("{} pairs", cfg.adjoint_pairs)))
    }));
    results.push(check("cross_modal_adjoint", ADJOINT_TOL, || match p_gap {
        Some(p) => Ok((p, format!("{} pairs", cfg.adjoint_pairs))),
        None => adjoint_gaps(cfg.adjoint_pairs, seed, None).map(|g| (g.1, format!("{} pairs", cfg.adjoint_pairs))),
    }));
    results.push(check("layer_gradients", LAYER_GRAD_TOL, || {
        let checks = oracle::layer_gradient_checks(seed)?;
        let worst = checks
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
            .expect("layer checks are non-empty");
        Ok((worst.rel_err, format!("{} ops, worst {}", checks.len(), worst.name)))
    }));
    results.push(check("end_to_end_gradient", E2E_GRAD_TOL, || {
        let checks = oracle::end_to_end_gradient_check(seed, cfg.e2e_params)?;
        let worst = checks
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
            .expect("at least one parameter is checked");
        Ok((worst.rel_err, format!("{} params, worst {}", checks.len(), worst.param)))
    }));
    for (scale, name, mono) in [
        (2, "pgd_vs_cg_x2", "objective_monotone_x2"),
        (4, "pgd_vs_cg_x4", "objective_monotone_x4"),
    ] {
        let mut increase = None;
        results.push(check(name, CG_ORACLE_TOL, || {
            let c = pgd_vs_cg(scale, cfg.pgd_iters, seed)?;
            increase = Some(c.max_increase);
            Ok((c.rel_err, format!("{} iters, delta3 {:.4}", cfg.pgd_iters, c.delta3)))
        }));
        results.push(check(mono, MONOTONE_SLACK, || match increase {
            Some(v) => Ok((v, "max objective increase".into())),
            None => pgd_vs_cg(scale, cfg.pgd_iters, seed).map(|c| (c.max_increase, "max objective increase".into())),
        }));
    }
    results.push(check("metric_identities", METRIC_TOL, || {
        let ids = metric_identities(seed)?;
        let worst = ids
            .iter()
            .max_by(|a, b| a.deviation.total_cmp(&b.deviation))
            .expect("identities are non-empty");
        Ok((worst.deviation, format!("{} cases, worst {}", ids.len(), worst.name)))
    }));
    results
}
