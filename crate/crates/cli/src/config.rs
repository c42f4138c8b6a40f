//! Flat `key = value` run configuration.
//!
//! One assignment per line, `#` starts a comment. Every key has a default;
//! unknown keys and malformed values are errors. The effective configuration
//! is rendered back in the same format so a run can be repeated from it.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use mgdun::dataset::DatasetSpec;
use mgdun::net::ModelConfig;
use mgdun::solver::SolverParams;
use mgdun::train::{AdamConfig, TrainConfig};

use crate::error::CliError;

/// `(key, default, description)`, in the order the effective config is echoed.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "master seed for data, initialisation and batching"),
    ("data", "", "dataset directory (classical, train, eval)"),
    (
        "val_data",
        "",
        "held-out dataset directory; empty holds out the last training pair",
    ),
    ("checkpoint", "", "checkpoint to evaluate (eval)"),
    ("mode", "network", "eval mode: network | bicubic"),
    ("export_pgm", "true", "also write 16-bit PGM images"),
    ("count", "16", "number of synthetic pairs (synth)"),
    ("size", "32", "HR side length in pixels (synth)"),
    ("scale", "2", "super-resolution factor: 2 or 4"),
    ("blur_sigma", "1", "sigma of the 3x3 Gaussian blur in DK"),
    ("noise_x", "0.01", "noise std on the LR target X"),
    ("noise_y", "0.01", "noise std on the HR guide Y"),
    ("guide_sigma", "0.5", "sigma of the cross-modal blur P"),
    ("guide_gain", "0.8", "gain of the cross-modal map P"),
    ("stages", "4", "unfolding stages T"),
    ("inn_blocks", "2", "affine coupling blocks in the INN"),
    ("width", "64", "U-Net feature width"),
    ("depth", "4", "U-Net pooling levels"),
    ("inn_hidden", "16", "hidden channels of the coupling sub-networks"),
    ("eta", "1", "guide fidelity weight (classical)"),
    ("lambda1", "0.001", "l1 weight on U (classical)"),
    ("lambda2", "0.001", "l1 weight on V (classical)"),
    ("beta1", "1", "U coupling weight (classical)"),
    ("beta2", "1", "V coupling weight (classical)"),
    ("delta1", "1", "U step size (classical)"),
    ("delta2", "1", "V step size (classical)"),
    ("delta3", "auto", "Z step size, or auto for 0.9/L (classical)"),
    ("iters", "100", "solver iterations (classical)"),
    ("lr", "1e-5", "Adam learning rate"),
    ("adam_beta1", "0.9", "Adam first-moment decay"),
    ("adam_beta2", "0.999", "Adam second-moment decay"),
    ("adam_eps", "1e-8", "Adam epsilon"),
    ("batch_size", "4", "training batch size"),
    ("epochs", "200", "training epochs"),
    ("max_iters", "0", "stop after this many iterations; 0 = no limit"),
    ("val_every", "50", "validation interval in iterations"),
    ("guide", "true", "use the guide branch; false pins eta = 0"),
    ("sweep_stages", "", "comma list of T values to sweep (train)"),
    ("sweep_inn_blocks", "", "comma list of INN depths to sweep (train)"),
];

/// Help text listing every key with its default.
pub fn keys_help() -> String {
    let mut s = String::from("Configuration keys (key = value, # comments; --config FILE and --set KEY=VALUE):\n");
    for (k, d, desc) in KEYS {
        let d = if d.is_empty() { "\"\"" } else { d };
        writeln!(s, "  {k:<18} {d:<9} {desc}").expect("writing to a String cannot fail");
    }
    s.push_str(
        "\nEnvironment:\n  MGDUN_THREADS      cap on worker threads\n  RUST_LOG           log filter (default info)\n",
    );
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
    /// Keys assigned by the user rather than defaulted.
    explicit: BTreeSet<&'static str>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: KEYS.iter().map(|(k, d, _)| (*k, d.to_string())).collect(),
            explicit: BTreeSet::new(),
        }
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let (k, _, _) = KEYS
            .iter()
            .find(|(k, _, _)| *k == key)
            .ok_or_else(|| config_err(format!("unknown key `{key}`")))?;
        self.values.insert(k, value.to_string());
        self.explicit.insert(k);
        Ok(())
    }

    /// Applies the assignments in `text`; later lines win.
    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| config_err(format!("line {}: expected key = value, found `{raw}`", no + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| config_err(format!("line {}: {e}", no + 1)))?;
        }
        Ok(())
    }

    pub fn apply_assignment(&mut self, kv: &str) -> Result<(), CliError> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| config_err(format!("expected KEY=VALUE, found `{kv}`")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("`{key}` is not a configuration key"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError> {
        let v = self.raw(key);
        v.parse()
            .map_err(|_| config_err(format!("invalid value `{v}` for `{key}`")))
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.raw(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    pub fn list(&self, key: &str) -> Result<Vec<usize>, CliError> {
        self.raw(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|_| config_err(format!("invalid entry `{s}` in `{key}`")))
            })
            .collect()
    }

    /// The effective configuration in loadable form.
    pub fn render(&self) -> String {
        let mut s = String::from("# effective configuration\n");
        for (k, _, _) in KEYS {
            writeln!(s, "{k} = {}", self.values[k]).expect("writing to a String cannot fail");
        }
        s
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.get("seed")
    }

    pub fn dataset_spec(&self) -> Result<DatasetSpec, CliError> {
        let spec = DatasetSpec {
            count: self.get("count")?,
            size: self.get("size")?,
            scale: self.get("scale")?,
            blur_sigma: self.get("blur_sigma")?,
            noise_x: self.get("noise_x")?,
            noise_y: self.get("noise_y")?,
            guide_sigma: self.get("guide_sigma")?,
            guide_gain: self.get("guide_gain")?,
            seed: self.seed()?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn model_config(&self) -> Result<ModelConfig, CliError> {
        let cfg = ModelConfig {
            stages: self.get("stages")?,
            inn_blocks: self.get("inn_blocks")?,
            scale: self.get("scale")?,
            channels: 1,
            width: self.get("width")?,
            depth: self.get("depth")?,
            inn_hidden: self.get("inn_hidden")?,
            seed: self.seed()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn solver_params(&self) -> Result<SolverParams, CliError> {
        let delta3 = match self.raw("delta3") {
            "auto" => None,
            _ => Some(self.get("delta3")?),
        };
        let p = SolverParams {
            eta: self.get("eta")?,
            lambda1: self.get("lambda1")?,
            lambda2: self.get("lambda2")?,
            beta1: self.get("beta1")?,
            beta2: self.get("beta2")?,
            delta1: self.get("delta1")?,
            delta2: self.get("delta2")?,
            delta3,
            iters: self.get("iters")?,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let max_iters: usize = self.get("max_iters")?;
        let cfg = TrainConfig {
            adam: AdamConfig {
                lr: self.get("lr")?,
                beta1: self.get("adam_beta1")?,
                beta2: self.get("adam_beta2")?,
                eps: self.get("adam_eps")?,
            },
            batch_size: self.get("batch_size")?,
            epochs: self.get("epochs")?,
            max_iters: (max_iters > 0).then_some(max_iters),
            seed: self.seed()?,
            val_every: self.get("val_every")?,
            guide: self.get("guide")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
