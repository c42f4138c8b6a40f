use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use mgdun::checkpoint;
use mgdun::dataset::{self, DatasetSpec, Manifest};
use mgdun::degradation::{bicubic_resize, ReconProblem, ResizeDirection};
use mgdun::io;
use mgdun::metrics::{self, ImageMetrics, MetricReport};
use mgdun::net::{MgdunModel, ModelConfig};
use mgdun::parallel;
use mgdun::selftest::{self, Fault, SelftestConfig};
use mgdun::solver::{cg_quadratic_oracle, solve_batch};
use mgdun::train::{self, TrainConfig};
use mgdun::Tensor;

use crate::config::RunConfig;
use crate::error::CliError;

/// The only directory a command writes into.
pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    pub fn prepare(root: PathBuf, force: bool) -> Result<Self, CliError> {
        if root.exists() {
            if !root.is_dir() {
                return Err(CliError::Config(format!(
                    "{} exists and is not a directory",
                    root.display()
                )));
            }
            if !force && fs::read_dir(&root)?.next().is_some() {
                return Err(CliError::OutputNotEmpty(root));
            }
        } else {
            fs::create_dir_all(&root)?;
        }
        Ok(OutDir { root })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
        fs::write(self.path(name), contents)?;
        Ok(())
    }

    fn subdir(&self, name: &str) -> Result<OutDir, CliError> {
        let root = self.path(name);
        fs::create_dir_all(&root)?;
        Ok(OutDir { root })
    }

    /// Records the effective configuration for reruns.
    fn echo_config(&self, cfg: &RunConfig) -> Result<(), CliError> {
        info!(
            "seed {}; effective configuration written to {}",
            cfg.raw("seed"),
            self.path("config.txt").display()
        );
        self.write("config.txt", cfg.render())
    }
}

fn export_pgm(cfg: &RunConfig, dir: &OutDir, name: &str, t: &Tensor) -> Result<(), CliError> {
    if cfg.get::<bool>("export_pgm")? {
        fs::create_dir_all(dir.path("pgm"))?;
        io::save_pgm16(dir.path("pgm").join(name), t)?;
    }
    Ok(())
}

fn require_path(cfg: &RunConfig, key: &str) -> Result<PathBuf, CliError> {
    cfg.path(key)
        .ok_or_else(|| CliError::Config(format!("`{key}` must be set for this command")))
}

fn load_dataset(dir: &Path) -> Result<(Manifest, Vec<ReconProblem>), CliError> {
    let (m, p) = dataset::read(dir)?;
    info!(
        "loaded {} problems from {} (scale {}, seed {})",
        p.len(),
        dir.display(),
        m.spec.scale,
        m.spec.seed
    );
    Ok((m, p))
}

fn truth(p: &ReconProblem) -> Result<&Tensor, CliError> {
    p.z.as_ref()
        .ok_or_else(|| CliError::Config("dataset problem has no ground truth".into()))
}

fn bicubic(p: &ReconProblem) -> Result<Tensor, CliError> {
    Ok(bicubic_resize(&p.x, p.scale, ResizeDirection::Up)?)
}

fn report(label: &str, preds: &[Tensor], problems: &[ReconProblem]) -> Result<MetricReport, CliError> {
    let mut r = MetricReport::new(label);
    for (pred, p) in preds.iter().zip(problems) {
        r.push(ImageMetrics::compute(pred, truth(p)?)?);
    }
    Ok(r)
}

fn bicubic_report(problems: &[ReconProblem]) -> Result<MetricReport, CliError> {
    let preds = problems.iter().map(bicubic).collect::<Result<Vec<_>, _>>()?;
    report("bicubic", &preds, problems)
}

fn write_metrics(
    dir: &OutDir,
    reports: &[MetricReport],
    extra: Option<(&str, &[Option<f64>])>,
) -> Result<(), CliError> {
    let mut csv = String::from("method,image,psnr_db,ssim,rmse255");
    if let Some((name, _)) = extra {
        write!(csv, ",{name}").expect("writing to a String cannot fail");
    }
    csv.push('\n');
    for r in reports {
        let mut push = |image: String, m: &ImageMetrics, x: Option<f64>| {
            write!(
                csv,
                "{},{image},{:.6},{:.6},{:.6}",
                r.label, m.psnr_db, m.ssim, m.rmse255
            )
            .expect("writing to a String cannot fail");
            if extra.is_some() {
                match x {
                    Some(v) => write!(csv, ",{v:.6e}"),
                    None => write!(csv, ",NA"),
                }
                .expect("writing to a String cannot fail");
            }
            csv.push('\n');
        };
        let col = |i: usize| {
            extra
                .and_then(|(_, v)| v.get(i).copied().flatten())
                .filter(|_| r.label != "bicubic")
        };
        for (i, m) in r.per_image.iter().enumerate() {
            push(i.to_string(), m, col(i));
        }
        let mean_extra = extra.filter(|_| r.label != "bicubic").and_then(|(_, v)| {
            let vals: Vec<f64> = v.iter().flatten().copied().collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        });
        push("mean".into(), &r.mean(), mean_extra);
    }
    dir.write("metrics.csv", csv)?;
    let table = metrics::format_table(reports);
    dir.write("metrics.txt", &table)?;
    print!("{table}");
    Ok(())
}

pub fn synth(cfg: &RunConfig, out: &OutDir) -> Result<(), CliError> {
    let spec = cfg.dataset_spec()?;
    out.echo_config(cfg)?;
    let manifest = dataset::write(&out.root, &spec)?;
    let (_, problems) = dataset::read(&out.root)?;
    for (i, p) in problems.iter().enumerate() {
        export_pgm(cfg, out, &format!("{i:04}_x.pgm"), &p.x)?;
        export_pgm(cfg, out, &format!("{i:04}_y.pgm"), &p.y)?;
        export_pgm(cfg, out, &format!("{i:04}_z.pgm"), truth(p)?)?;
    }
    if spec.noiseless() {
        let residual = dataset::forward_model_residual(&spec, &problems)?;
        if residual != 0.0 {
            return Err(CliError::Incompatible(format!(
                "noiseless dataset fails X = DK·Z (max residual {residual:e})"
            )));
        }
        info!("noiseless dataset: X = DK·Z verified exactly on reload");
    }
    let lr = problems[0].x.shape();
    println!(
        "wrote {} triples to {} (X {}x{}, Y/Z {}x{}); manifest sha256 {}",
        spec.count,
        out.root.display(),
        lr.h,
        lr.w,
        spec.size,
        spec.size,
        dataset::sha256_hex(manifest.to_text().as_bytes())
    );
    Ok(())
}

pub fn classical(cfg: &RunConfig, out: &OutDir) -> Result<(), CliError> {
    let params = cfg.solver_params()?;
    out.echo_config(cfg)?;
    let (manifest, problems) = load_dataset(&require_path(cfg, "data")?)?;
    let ops = manifest.spec.operators()?;
    info!(
        "operators from the dataset manifest: blur sigma {}, guide sigma {} gain {}",
        manifest.spec.blur_sigma, manifest.spec.guide_sigma, manifest.spec.guide_gain
    );
    let mut solved = Vec::with_capacity(problems.len());
    for (i, r) in solve_batch(&problems, &ops, &params).into_iter().enumerate() {
        let s = r.map_err(|e| {
            warn!("problem {i}: {e}");
            e
        })?;
        solved.push(s);
    }
    let gaps: Vec<Option<f64>> = if params.lambda1 == 0.0 && params.lambda2 == 0.0 {
        let oracle = parallel::map(&problems, |p| cg_quadratic_oracle(p, &ops, &params, None));
        oracle
            .into_iter()
            .zip(&solved)
            .map(|(cg, s)| -> Result<Option<f64>, CliError> {
                let cg = cg?;
                Ok(Some(s.state.z.sub(&cg)?.norm() / cg.norm()))
            })
            .collect::<Result<_, _>>()?
    } else {
        info!("lambda1/lambda2 non-zero: no closed-form oracle, oracle_gap reported as NA");
        vec![None; problems.len()]
    };
    let mut preds = Vec::with_capacity(solved.len());
    for (i, s) in solved.into_iter().enumerate() {
        io::save(out.path(&format!("{i:04}_zhat.mgt")), &s.state.z)?;
        out.write(&format!("{i:04}_trace.csv"), s.trace_csv())?;
        export_pgm(cfg, out, &format!("{i:04}_zhat.pgm"), &s.state.z)?;
        preds.push(s.state.z);
    }
    let reports = [bicubic_report(&problems)?, report("classical", &preds, &problems)?];
    write_metrics(out, &reports, Some(("oracle_gap", &gaps)))
}

/// Training set and held-out set: `val_data` if configured, otherwise the
/// last pair of `data`.
fn split_data(cfg: &RunConfig) -> Result<(Manifest, Vec<ReconProblem>, Vec<ReconProblem>), CliError> {
    let (manifest, mut data) = load_dataset(&require_path(cfg, "data")?)?;
    let val = match cfg.path("val_data") {
        Some(dir) => {
            let (vm, v) = load_dataset(&dir)?;
            if vm.spec.scale != manifest.spec.scale {
                return Err(CliError::Incompatible("val_data scale differs from data".into()));
            }
            v
        }
        None => {
            if data.len() < 2 {
                return Err(CliError::Config("need val_data or at least two training pairs".into()));
            }
            let held = data.pop().expect("length checked");
            info!("holding out the last pair for validation");
            vec![held]
        }
    };
    Ok((manifest, data, val))
}

fn model_config_for(cfg: &RunConfig, spec: &DatasetSpec) -> Result<ModelConfig, CliError> {
    let mut mc = cfg.model_config()?;
    if cfg.is_explicit("scale") && mc.scale != spec.scale {
        return Err(CliError::Incompatible(format!(
            "configured scale {} does not match dataset scale {}",
            mc.scale, spec.scale
        )));
    }
    mc.scale = spec.scale;
    Ok(mc)
}

fn predict(model: &MgdunModel, problems: &[ReconProblem]) -> Result<Vec<Tensor>, CliError> {
    parallel::map(problems, |p| model.forward(&p.x, &p.y))
        .into_iter()
        .map(|r| r.map_err(CliError::from))
        .collect()
}

fn train_one(
    tc: &TrainConfig,
    mc: ModelConfig,
    data: &[ReconProblem],
    val: &[ReconProblem],
    dir: &OutDir,
) -> Result<MetricReport, CliError> {
    let mut model = MgdunModel::new(mc)?;
    info!(
        "training T={} inn_blocks={} ({} parameters) into {}",
        mc.stages,
        mc.inn_blocks,
        model.params().num_elements(),
        dir.root.display()
    );
    let rep = train::train(tc, &mut model, data, val, Some(&dir.root))?;
    if let (Some(first), Some(last)) = (rep.first_loss(), rep.tail_loss(1)) {
        info!(
            "loss {first:.5} -> {last:.5}; best validation PSNR {:?}",
            rep.best_val_psnr
        );
    }
    report(
        &format!("mgdun T={} inn={}", mc.stages, mc.inn_blocks),
        &predict(&model, val)?,
        val,
    )
}

pub fn train(cfg: &RunConfig, out: &OutDir) -> Result<(), CliError> {
    let tc = cfg.train_config()?;
    cfg.model_config()?;
    out.echo_config(cfg)?;
    let (manifest, data, val) = split_data(cfg)?;
    let base = model_config_for(cfg, &manifest.spec)?;
    let stages = cfg.list("sweep_stages")?;
    let inns = cfg.list("sweep_inn_blocks")?;
    let mut reports = vec![bicubic_report(&val)?];
    if stages.is_empty() && inns.is_empty() {
        reports.push(train_one(&tc, base, &data, &val, out)?);
        return write_metrics(out, &reports, None);
    }
    let stages = if stages.is_empty() { vec![base.stages] } else { stages };
    let inns = if inns.is_empty() { vec![base.inn_blocks] } else { inns };
    let mut sweep = String::from("stages,inn_blocks,psnr_db,ssim,rmse255\n");
    let mut table = format!(
        "{:>6} {:>10} {:>10} {:>8} {:>9}\n",
        "T", "inn_blocks", "PSNR(dB)", "SSIM", "RMSE255"
    );
    for &t in &stages {
        for &k in &inns {
            let mc = ModelConfig {
                stages: t,
                inn_blocks: k,
                ..base
            };
            mc.validate()?;
            let r = train_one(&tc, mc, &data, &val, &out.subdir(&format!("T{t}_inn{k}"))?)?;
            let m = r.mean();
            writeln!(sweep, "{t},{k},{:.6},{:.6},{:.6}", m.psnr_db, m.ssim, m.rmse255).expect("String write");
            writeln!(
                table,
                "{t:>6} {k:>10} {:>10.4} {:>8.4} {:>9.4}",
                m.psnr_db, m.ssim, m.rmse255
            )
            .expect("String write");
            reports.push(r);
        }
    }
    out.write("sweep.csv", sweep)?;
    out.write("sweep.txt", &table)?;
    print!("{table}");
    write_metrics(out, &reports, None)
}

pub fn eval(cfg: &RunConfig, out: &OutDir) -> Result<(), CliError> {
    let mode = cfg.raw("mode").to_string();
    if mode != "network" && mode != "bicubic" {
        return Err(CliError::Config(format!(
            "mode must be network or bicubic, got `{mode}`"
        )));
    }
    out.echo_config(cfg)?;
    let (manifest, problems) = load_dataset(&require_path(cfg, "data")?)?;
    let mut reports = vec![bicubic_report(&problems)?];
    let preds = if mode == "bicubic" {
        problems.iter().map(bicubic).collect::<Result<Vec<_>, _>>()?
    } else {
        let path = require_path(cfg, "checkpoint")?;
        let model = checkpoint::load(&path)?.model;
        let mc = model.config();
        if mc.scale != manifest.spec.scale {
            return Err(CliError::Incompatible(format!(
                "checkpoint scale {} does not match dataset scale {}",
                mc.scale, manifest.spec.scale
            )));
        }
        for (key, have) in [
            ("stages", mc.stages),
            ("inn_blocks", mc.inn_blocks),
            ("scale", mc.scale),
        ] {
            if cfg.is_explicit(key) && cfg.get::<usize>(key)? != have {
                return Err(CliError::Incompatible(format!(
                    "checkpoint has {key} = {have}, configuration asks for {}",
                    cfg.raw(key)
                )));
            }
        }
        let preds = predict(&model, &problems)?;
        reports.push(report(
            &format!("mgdun T={} inn={}", mc.stages, mc.inn_blocks),
            &preds,
            &problems,
        )?);
        preds
    };
    for (i, z) in preds.iter().enumerate() {
        io::save(out.path(&format!("{i:04}_zhat.mgt")), z)?;
        export_pgm(cfg, out, &format!("{i:04}_zhat.pgm"), z)?;
    }
    write_metrics(out, &reports, None)
}

pub fn selftest(cfg: &RunConfig, out: Option<&OutDir>, fault: Option<Fault>) -> Result<(), CliError> {
    let st = SelftestConfig {
        seed: cfg.seed()?,
        fault,
        ..SelftestConfig::default()
    };
    if let Some(f) = fault {
        warn!("fault injected: {f:?}");
    }
    let results = selftest::run(&st);
    let mut text = String::new();
    for r in &results {
        writeln!(text, "{r}").expect("writing to a String cannot fail");
    }
    print!("{text}");
    if let Some(dir) = out {
        dir.echo_config(cfg)?;
        dir.write("selftest.txt", &text)?;
    }
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.name.to_string())
        .collect();
    if failed.is_empty() {
        println!("all {} properties passed", results.len());
        Ok(())
    } else {
        Err(CliError::SelftestFailed(failed))
    }
}
