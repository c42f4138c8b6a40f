//! Acceptance criteria. Runs every criterion, prints one `ACn PASS|FAIL`
//! line each and exits non-zero if any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use mgdun::checkpoint;
use mgdun::dataset::{self, DatasetSpec};
use mgdun::degradation::{bicubic_resize, ReconProblem, ResizeDirection};
use mgdun::metrics;
use mgdun::net::{MgdunModel, ModelConfig};
use mgdun::oracle;
use mgdun::selftest::{self, PUBLISHED_BICUBIC_MSE_COLUMN, PUBLISHED_BICUBIC_PSNR};
use mgdun::train::{self, l1_loss, AdamConfig, TrainConfig, TrainReport};
use mgdun::Result;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { passed, detail })
}

/// `shared` is time spent on setup that counts against this criterion's budget.
fn run(id: u8, name: &str, budget: Duration, shared: Duration, f: impl FnOnce() -> Result<Outcome>) -> bool {
    let start = Instant::now();
    let result = f();
    let elapsed = start.elapsed() + shared;
    let (passed, detail) = match result {
        Ok(o) => (o.passed && elapsed <= budget, o.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    println!(
        "AC{id} {} {name}: {detail} [{:.1}s, budget {}s]",
        if passed { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        budget.as_secs()
    );
    passed
}

fn ac1_inn_round_trip() -> Result<Outcome> {
    let err = selftest::inn_round_trip_error(1000, 11)?;
    outcome(
        err < 1e-4,
        format!("max |inv(fwd(z)) - z| = {err:.3e} over 1000 draws (< 1e-4)"),
    )
}

fn ac2_adjoints() -> Result<Outcome> {
    let mut worst = (0.0f64, 0.0f64);
    for scale in [2, 4] {
        let ops = selftest::default_operators(scale, 0.0)?;
        let (dk, p) = oracle::operator_adjoint_gaps(&ops.dk, &ops.p, 100, 20 + scale as u64)?;
        worst = (worst.0.max(dk), worst.1.max(p));
    }
    outcome(
        worst.0 < 1e-5 && worst.1 < 1e-5,
        format!(
            "DK gap {:.3e}, P gap {:.3e} over 100 pairs per scale (< 1e-5)",
            worst.0, worst.1
        ),
    )
}

fn ac3_gradients() -> Result<Outcome> {
    let layers = oracle::layer_gradient_checks(31)?;
    let worst_layer = layers.iter().map(|c| c.rel_err).fold(0.0, f64::max);
    let mut worst_e2e = 0.0f64;
    let mut checked = 0;
    for seed in [32, 33] {
        let checks = oracle::end_to_end_gradient_check(seed, 24)?;
        checked += checks.len();
        worst_e2e = checks.iter().map(|c| c.rel_err).fold(worst_e2e, f64::max);
    }
    outcome(
        worst_layer < 1e-3 && worst_e2e < 1e-2,
        format!(
            "{} layer ops worst {worst_layer:.3e} (< 1e-3); {checked} end-to-end params worst {worst_e2e:.3e} (< 1e-2)",
            layers.len()
        ),
    )
}

fn ac4_classical_oracle() -> Result<Outcome> {
    let mut passed = true;
    let mut parts = Vec::new();
    for scale in [2, 4] {
        let c = selftest::pgd_vs_cg(scale, 2000, 41)?;
        passed &= c.rel_err < 1e-3 && c.max_increase <= 1e-8;
        parts.push(format!(
            "x{scale}: rel {:.3e}, max objective increase {:.2e}",
            c.rel_err, c.max_increase
        ));
    }
    outcome(passed, format!("{} (rel < 1e-3, increase <= 1e-8)", parts.join("; ")))
}

fn smoke_data() -> Result<(Vec<ReconProblem>, Vec<ReconProblem>)> {
    let train = DatasetSpec {
        seed: 1,
        ..DatasetSpec::default()
    }
    .generate()?;
    let val = DatasetSpec {
        count: 4,
        seed: 2,
        ..DatasetSpec::default()
    }
    .generate()?;
    Ok((train, val))
}

fn smoke_config(guide: bool) -> TrainConfig {
    TrainConfig {
        adam: AdamConfig {
            lr: 1e-4,
            ..AdamConfig::default()
        },
        batch_size: 4,
        epochs: 1000,
        max_iters: Some(200),
        val_every: 50,
        guide,
        seed: 3,
    }
}

struct SmokeRun {
    model: MgdunModel,
    report: TrainReport,
}

fn smoke_run(stages: usize, guide: bool, data: &[ReconProblem], val: &[ReconProblem]) -> Result<SmokeRun> {
    let mut model = MgdunModel::new(ModelConfig {
        stages,
        seed: 4,
        ..ModelConfig::default()
    })?;
    let report = train::train(&smoke_config(guide), &mut model, data, val, None)?;
    Ok(SmokeRun { model, report })
}

fn dataset_l1(model: &MgdunModel, data: &[ReconProblem]) -> Result<f64> {
    let mut total = 0.0;
    for p in data {
        let out = model.forward(&p.x, &p.y)?;
        total += l1_loss(&out, p.z.as_ref().expect("ground truth"))? as f64;
    }
    Ok(total / data.len() as f64)
}

fn bicubic_psnr(val: &[ReconProblem]) -> Result<f64> {
    let mut total = 0.0;
    for p in val {
        let up = bicubic_resize(&p.x, p.scale, ResizeDirection::Up)?;
        total += metrics::psnr(&up, p.z.as_ref().expect("ground truth"), 1.0)?;
    }
    Ok(total / val.len() as f64)
}

fn ac5_smoke(data: &[ReconProblem], val: &[ReconProblem], base: &SmokeRun) -> Result<Outcome> {
    let untrained = MgdunModel::new(*base.model.config())?;
    let initial = dataset_l1(&untrained, data)?;
    let fin = dataset_l1(&base.model, data)?;
    let drop = 1.0 - fin / initial;
    let trained = train::evaluate_psnr(&base.model, val)?;
    let bicubic = bicubic_psnr(val)?;
    let batch_first = base.report.first_loss().unwrap_or(f32::NAN);
    let batch_tail = base.report.tail_loss(4).unwrap_or(f32::NAN);
    outcome(
        drop >= 0.5 && trained - bicubic >= 1.0,
        format!(
            "training-set L1 {initial:.4} -> {fin:.4}, drop {:.1}% (>= 50%) [batch trace {batch_first:.4} -> {batch_tail:.4}]; \
             held-out PSNR {trained:.2} dB vs bicubic {bicubic:.2} dB, delta {:+.2} dB (>= +1)",
            100.0 * drop,
            trained - bicubic
        ),
    )
}

fn ac6_ablation(data: &[ReconProblem], val: &[ReconProblem], base: &SmokeRun) -> Result<Outcome> {
    let t2 = train::evaluate_psnr(&base.model, val)?;
    let t4 = train::evaluate_psnr(&smoke_run(4, true, data, val)?.model, val)?;
    let unguided = train::evaluate_psnr(&smoke_run(2, false, data, val)?.model, val)?;
    outcome(
        t4 >= t2 - 0.1 && t2 >= unguided - 0.1,
        format!(
            "PSNR T=4 {t4:.2} vs T=2 {t2:.2} dB; guided {t2:.2} vs unguided {unguided:.2} dB (each >= other - 0.1)"
        ),
    )
}

fn ac7_metrics() -> Result<Outcome> {
    let ids = selftest::metric_identities(71)?;
    let worst = ids.iter().map(|i| i.deviation).fold(0.0, f64::max);
    let implied = selftest::rmse255_from_psnr(PUBLISHED_BICUBIC_PSNR);
    let gap = PUBLISHED_BICUBIC_MSE_COLUMN / implied - 1.0;
    let arithmetic = (implied - 15.0958).abs() < 1e-4 && gap > 0.0 && gap < 0.03;
    outcome(
        worst < 1e-6 && arithmetic,
        format!(
            "{} identities worst deviation {worst:.2e} (< 1e-6); published bicubic {PUBLISHED_BICUBIC_PSNR} dB implies rmse255 {implied:.4} vs reported {PUBLISHED_BICUBIC_MSE_COLUMN} (gap {:.2}%)",
            ids.len(),
            100.0 * gap
        ),
    )
}

fn determinism_run(dir: &std::path::Path) -> Result<(String, String, Vec<u8>)> {
    let spec = DatasetSpec {
        count: 4,
        size: 16,
        seed: 81,
        ..DatasetSpec::default()
    };
    let data_dir = dir.join("data");
    std::fs::create_dir_all(&data_dir)?;
    let manifest = dataset::write(&data_dir, &spec)?.to_text();
    let (_, data) = dataset::read(&data_dir)?;
    let mut model = MgdunModel::new(ModelConfig {
        stages: 1,
        width: 8,
        depth: 2,
        seed: 82,
        ..ModelConfig::default()
    })?;
    let cfg = TrainConfig {
        adam: AdamConfig {
            lr: 1e-3,
            ..AdamConfig::default()
        },
        batch_size: 2,
        max_iters: Some(6),
        val_every: 3,
        seed: 83,
        ..TrainConfig::default()
    };
    let run_dir = dir.join("run");
    std::fs::create_dir_all(&run_dir)?;
    let report = train::train(&cfg, &mut model, &data, &data[..1], Some(&run_dir))?;
    let ckpt = std::fs::read(run_dir.join("final.ckpt"))?;
    checkpoint::decode(&ckpt)?;
    Ok((manifest, report.loss_csv(), ckpt))
}

fn ac8_determinism() -> Result<Outcome> {
    let (a, b) = (tempfile::tempdir()?, tempfile::tempdir()?);
    let ra = determinism_run(a.path())?;
    let rb = determinism_run(b.path())?;
    let same = [ra.0 == rb.0, ra.1 == rb.1, ra.2 == rb.2];
    outcome(
        same.iter().all(|&s| s),
        format!(
            "manifest identical: {}, loss trace identical: {}, checkpoint bytes identical: {} ({} bytes)",
            same[0],
            same[1],
            same[2],
            ra.2.len()
        ),
    )
}

fn main() -> ExitCode {
    let secs = Duration::from_secs;
    let mut ok = true;
    ok &= run(1, "INN round trip", secs(30), Duration::ZERO, ac1_inn_round_trip);
    ok &= run(2, "operator adjoints", secs(30), Duration::ZERO, ac2_adjoints);
    ok &= run(3, "gradient fidelity", secs(120), Duration::ZERO, ac3_gradients);
    ok &= run(
        4,
        "classical solver vs CG oracle",
        secs(120),
        Duration::ZERO,
        ac4_classical_oracle,
    );

    let start = Instant::now();
    let shared = smoke_data().and_then(|(data, val)| {
        let base = smoke_run(2, true, &data, &val)?;
        Ok((data, val, base))
    });
    let smoke_time = start.elapsed();
    match &shared {
        Ok((data, val, base)) => {
            ok &= run(5, "training smoke", secs(15 * 60), smoke_time, || {
                ac5_smoke(data, val, base)
            });
            ok &= run(6, "ablation trend", secs(45 * 60), smoke_time, || {
                ac6_ablation(data, val, base)
            });
        }
        Err(e) => {
            println!("AC5 FAIL training smoke: error: {e}");
            println!("AC6 FAIL ablation trend: error: {e}");
            ok = false;
        }
    }
    ok &= run(7, "metric identities", secs(5), Duration::ZERO, ac7_metrics);
    ok &= run(8, "determinism", secs(120), Duration::ZERO, ac8_determinism);
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
