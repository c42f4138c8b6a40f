//! Deterministic synthetic datasets on disk.
//!
//! A dataset directory holds `NNNN_x.mgt`, `NNNN_y.mgt`, `NNNN_z.mgt` per
//! problem and a `manifest.txt` recording the generating spec and the
//! SHA-256 of every file:
//!
//! ```text
//! MGDUN-DATASET v1
//! count 16
//! ...
//! noiseless false
//! file 0000_x.mgt 3b1f...
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::degradation::{synth_problem, DegradationOp, LinearCrossModalOp, PhantomSpec, ReconProblem};
use crate::error::{Error, Result};
use crate::io;
use crate::solver::ObservationModel;

pub const HEADER: &str = "MGDUN-DATASET v1";
pub const MANIFEST: &str = "manifest.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub count: usize,
    /// Side of the square HR images.
    pub size: usize,
    pub scale: usize,
    pub blur_sigma: f64,
    pub noise_x: f32,
    pub noise_y: f32,
    pub guide_sigma: f64,
    pub guide_gain: f32,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            count: 16,
            size: 32,
            scale: 2,
            blur_sigma: 1.0,
            noise_x: 0.01,
            noise_y: 0.01,
            guide_sigma: 0.5,
            guide_gain: 0.8,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::InvalidArgument("dataset count must be positive".into()));
        }
        if self.scale < 2 || self.size == 0 || !self.size.is_multiple_of(self.scale) {
            return Err(Error::InvalidArgument(format!(
                "size {} must be a positive multiple of scale {} (scale >= 2)",
                self.size, self.scale
            )));
        }
        if !(self.noise_x >= 0.0 && self.noise_y >= 0.0) {
            return Err(Error::InvalidArgument("noise levels must be non-negative".into()));
        }
        Ok(())
    }

    pub fn noiseless(&self) -> bool {
        self.noise_x == 0.0 && self.noise_y == 0.0
    }

    pub fn operators(&self) -> Result<ObservationModel> {
        Ok(ObservationModel {
            dk: DegradationOp::new(self.scale, self.blur_sigma, self.noise_x)?,
            p: LinearCrossModalOp::gaussian(self.guide_sigma, self.guide_gain, self.noise_y)?,
        })
    }

    /// Per-problem phantom seeds, drawn from a stream keyed by `seed`.
    pub fn phantom_seeds(&self) -> Vec<u64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.count).map(|_| rng.random()).collect()
    }

    pub fn generate(&self) -> Result<Vec<ReconProblem>> {
        self.validate()?;
        let ops = self.operators()?;
        self.phantom_seeds()
            .into_iter()
            .map(|s| synth_problem(&PhantomSpec::new(s, self.size, self.size), &ops.dk, &ops.p))
            .collect()
    }

    fn header_text(&self) -> String {
        format!(
            "{HEADER}\ncount {}\nsize {}\nscale {}\nblur_sigma {}\nnoise_x {}\nnoise_y {}\nguide_sigma {}\nguide_gain {}\nseed {}\nnoiseless {}\n",
            self.count,
            self.size,
            self.scale,
            self.blur_sigma,
            self.noise_x,
            self.noise_y,
            self.guide_sigma,
            self.guide_gain,
            self.seed,
            self.noiseless()
        )
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub spec: DatasetSpec,
    /// `(file name, sha256)` in write order.
    pub files: Vec<(String, String)>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = self.spec.header_text();
        for (name, hash) in &self.files {
            writeln!(s, "file {name} {hash}").expect("writing to a String cannot fail");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Manifest> {
        let mut lines = text.lines();
        if lines.next() != Some(HEADER) {
            return Err(Error::Format(format!("not a dataset manifest: expected `{HEADER}`")));
        }
        let mut field = |key: &str| -> Result<String> {
            let line = lines.next().unwrap_or_default();
            line.strip_prefix(key)
                .and_then(|r| r.strip_prefix(' '))
                .map(str::to_string)
                .ok_or_else(|| Error::Format(format!("expected `{key} <value>`, found `{line}`")))
        };
        fn num<T: std::str::FromStr>(key: &str, v: String) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Format(format!("bad value for {key}: `{v}`")))
        }
        let spec = DatasetSpec {
            count: num("count", field("count")?)?,
            size: num("size", field("size")?)?,
            scale: num("scale", field("scale")?)?,
            blur_sigma: num("blur_sigma", field("blur_sigma")?)?,
            noise_x: num("noise_x", field("noise_x")?)?,
            noise_y: num("noise_y", field("noise_y")?)?,
            guide_sigma: num("guide_sigma", field("guide_sigma")?)?,
            guide_gain: num("guide_gain", field("guide_gain")?)?,
            seed: num("seed", field("seed")?)?,
        };
        let noiseless: bool = num("noiseless", field("noiseless")?)?;
        if noiseless != spec.noiseless() {
            return Err(Error::Format("noiseless flag disagrees with noise levels".into()));
        }
        let mut files = Vec::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next(), parts.next()) {
                (Some("file"), Some(name), Some(hash), None) => files.push((name.to_string(), hash.to_string())),
                _ => return Err(Error::Format(format!("bad manifest line `{line}`"))),
            }
        }
        if files.len() != 3 * spec.count {
            return Err(Error::Format(format!(
                "manifest lists {} files, expected {}",
                files.len(),
                3 * spec.count
            )));
        }
        Ok(Manifest { spec, files })
    }
}

fn file_names(i: usize) -> [String; 3] {
    ["x", "y", "z"].map(|k| format!("{i:04}_{k}.mgt"))
}

/// Generates the dataset and writes it to `dir`, which must exist.
pub fn write(dir: &Path, spec: &DatasetSpec) -> Result<Manifest> {
    let problems = spec.generate()?;
    let mut files = Vec::with_capacity(3 * problems.len());
    for (i, p) in problems.iter().enumerate() {
        let z = p.z.as_ref().expect("synthetic problems carry ground truth");
        for (name, t) in file_names(i).into_iter().zip([&p.x, &p.y, z]) {
            let bytes = io::encode(t);
            fs::write(dir.join(&name), &bytes)?;
            files.push((name, sha256_hex(&bytes)));
        }
    }
    let manifest = Manifest {
        spec: spec.clone(),
        files,
    };
    fs::write(dir.join(MANIFEST), manifest.to_text())?;
    Ok(manifest)
}

/// Reads a dataset, checking every file against its manifest hash.
pub fn read(dir: &Path) -> Result<(Manifest, Vec<ReconProblem>)> {
    let manifest = Manifest::parse(&fs::read_to_string(dir.join(MANIFEST))?)?;
    let mut tensors = Vec::with_capacity(manifest.files.len());
    for (name, hash) in &manifest.files {
        let bytes = fs::read(dir.join(name))?;
        if &sha256_hex(&bytes) != hash {
            return Err(Error::Format(format!("{name}: hash does not match manifest")));
        }
        tensors.push(io::read_tensor(bytes.as_slice())?);
    }
    let mut problems = Vec::with_capacity(manifest.spec.count);
    let mut it = tensors.into_iter();
    while let (Some(x), Some(y), Some(z)) = (it.next(), it.next(), it.next()) {
        problems.push(ReconProblem::new(x, y, Some(z), manifest.spec.scale)?);
    }
    Ok((manifest, problems))
}

/// Largest `|DK·Z − X|` over the dataset; zero for a noiseless dataset.
pub fn forward_model_residual(spec: &DatasetSpec, problems: &[ReconProblem]) -> Result<f32> {
    let ops = spec.operators()?;
    let mut worst = 0.0f32;
    for p in problems {
        let z =
            p.z.as_ref()
                .ok_or_else(|| Error::InvalidArgument("problem without ground truth".into()))?;
        worst = worst.max(ops.dk.apply(z)?.max_abs_diff(&p.x)?);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> DatasetSpec {
        DatasetSpec {
            count: 3,
            size: 16,
            seed,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn write_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = write(dir.path(), &small(7)).unwrap();
        let (back, problems) = read(dir.path()).unwrap();
        assert_eq!(back, m);
        assert_eq!(problems, small(7).generate().unwrap());
        assert_eq!(problems[0].x.shape().h, 8);
    }

    #[test]
    fn manifests_are_deterministic() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ma = write(a.path(), &small(7)).unwrap().to_text();
        let mb = write(b.path(), &small(7)).unwrap().to_text();
        assert_eq!(ma, mb);
        let c = tempfile::tempdir().unwrap();
        assert_ne!(write(c.path(), &small(8)).unwrap().to_text(), ma);
    }

    #[test]
    fn tampering_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), &small(1)).unwrap();
        let path = dir.path().join("0001_y.mgt");
        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(read(dir.path()), Err(Error::Format(_))));
    }

    #[test]
    fn noiseless_flag_and_forward_model() {
        let spec = DatasetSpec {
            noise_x: 0.0,
            noise_y: 0.0,
            ..small(2)
        };
        let m = Manifest::parse(&spec.header_text()).unwrap_err();
        assert!(matches!(m, Error::Format(_)));
        assert!(spec.header_text().contains("noiseless true"));
        let problems = spec.generate().unwrap();
        assert_eq!(forward_model_residual(&spec, &problems).unwrap(), 0.0);
        assert!(forward_model_residual(&small(2), &small(2).generate().unwrap()).unwrap() > 0.0);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(DatasetSpec { count: 0, ..small(0) }.validate().is_err());
        assert!(DatasetSpec { size: 15, ..small(0) }.validate().is_err());
        assert!(DatasetSpec {
            noise_x: -1.0,
            ..small(0)
        }
        .validate()
        .is_err());
    }
}
