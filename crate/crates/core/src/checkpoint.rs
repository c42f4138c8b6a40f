//! Model checkpoints: a text manifest followed by `MGT1` tensor blobs.
//!
//! ```text
//! MGDUN-CKPT v1
//! stages 4
//! inn_blocks 2
//! ...
//! param denoiser.enc0.conv0.weight
//! ...
//! adam_step 200          (optional)
//! adam.m denoiser.enc0.conv0.weight
//! adam.v denoiser.enc0.conv0.weight
//! ...
//! end
//! <one MGT1 tensor per param / adam line, in manifest order>
//! ```

use std::fs;
use std::io::{BufRead, Cursor, Read};
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{read_tensor, write_tensor};
use crate::net::{MgdunModel, ModelConfig, ParamSet};
use crate::train::AdamState;

pub const HEADER: &str = "MGDUN-CKPT v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: MgdunModel,
    pub adam: Option<AdamState>,
}

pub fn encode(model: &MgdunModel, adam: Option<&AdamState>) -> Vec<u8> {
    let c = model.config();
    let mut text = format!(
        "{HEADER}\nstages {}\ninn_blocks {}\nscale {}\nchannels {}\nwidth {}\ndepth {}\ninn_hidden {}\nseed {}\n",
        c.stages, c.inn_blocks, c.scale, c.channels, c.width, c.depth, c.inn_hidden, c.seed
    );
    let names = model.params().names();
    for n in names {
        text.push_str(&format!("param {n}\n"));
    }
    if let Some(a) = adam {
        text.push_str(&format!("adam_step {}\n", a.step));
        for n in names {
            text.push_str(&format!("adam.m {n}\nadam.v {n}\n"));
        }
    }
    text.push_str("end\n");
    let mut out = text.into_bytes();
    let write = |out: &mut Vec<u8>, t| write_tensor(out, t).expect("writing to a Vec cannot fail");
    for t in model.params().tensors() {
        write(&mut out, t);
    }
    if let Some(a) = adam {
        for (m, v) in a.m.iter().zip(&a.v) {
            write(&mut out, m);
            write(&mut out, v);
        }
    }
    out
}

fn parse_field<T: std::str::FromStr>(line: &str, key: &str) -> Result<T> {
    line.strip_prefix(key)
        .and_then(|r| r.strip_prefix(' '))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Format(format!("expected `{key} <value>`, found `{line}`")))
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Cursor::new(bytes);
    let mut lines = Vec::new();
    loop {
        let mut line = String::new();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::Format("checkpoint manifest has no `end` line".into()));
        }
        let line = line.trim_end_matches('\n').to_string();
        if line == "end" {
            break;
        }
        lines.push(line);
    }
    if lines.first().map(String::as_str) != Some(HEADER) {
        return Err(Error::Format(format!("not a checkpoint: expected header `{HEADER}`")));
    }
    let keys = [
        "stages",
        "inn_blocks",
        "scale",
        "channels",
        "width",
        "depth",
        "inn_hidden",
    ];
    if lines.len() < keys.len() + 2 {
        return Err(Error::Format("truncated checkpoint manifest".into()));
    }
    let mut vals = [0usize; 7];
    for (i, k) in keys.iter().enumerate() {
        vals[i] = parse_field(&lines[i + 1], k)?;
    }
    let config = ModelConfig {
        stages: vals[0],
        inn_blocks: vals[1],
        scale: vals[2],
        channels: vals[3],
        width: vals[4],
        depth: vals[5],
        inn_hidden: vals[6],
        seed: parse_field(&lines[8], "seed")?,
    };
    let rest = &lines[9..];
    let n_params = rest.iter().take_while(|l| l.starts_with("param ")).count();
    let names: Vec<&str> = rest[..n_params].iter().map(|l| &l["param ".len()..]).collect();
    let tail = &rest[n_params..];
    let mut params = ParamSet::new();
    for n in &names {
        params.push(*n, read_tensor(&mut r)?);
    }
    let model = MgdunModel::from_params(config, params)?;
    let adam = if tail.is_empty() {
        None
    } else {
        let step = parse_field(&tail[0], "adam_step")?;
        if tail.len() != 1 + 2 * names.len() {
            return Err(Error::Format("optimizer section does not cover every parameter".into()));
        }
        let mut m = Vec::with_capacity(names.len());
        let mut v = Vec::with_capacity(names.len());
        for (i, n) in names.iter().enumerate() {
            if tail[1 + 2 * i] != format!("adam.m {n}") || tail[2 + 2 * i] != format!("adam.v {n}") {
                return Err(Error::Format(format!("optimizer section out of order at {n}")));
            }
            let (mt, vt) = (read_tensor(&mut r)?, read_tensor(&mut r)?);
            let shape = model.params().tensors()[i].shape();
            if mt.shape() != shape || vt.shape() != shape {
                return Err(Error::Format(format!("optimizer moment shape mismatch for {n}")));
            }
            m.push(mt);
            v.push(vt);
        }
        Some(AdamState { m, v, step })
    };
    let mut trailing = Vec::new();
    r.read_to_end(&mut trailing)?;
    if !trailing.is_empty() {
        return Err(Error::Format(format!(
            "{} trailing bytes after checkpoint",
            trailing.len()
        )));
    }
    Ok(Checkpoint { model, adam })
}

pub fn save(path: impl AsRef<Path>, model: &MgdunModel, adam: Option<&AdamState>) -> Result<()> {
    fs::write(path, encode(model, adam))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}
