//! The `MGT1` binary tensor container.
//!
//! Layout: the 4-byte magic `MGT1`, four little-endian `u32` dims `(n, c, h, w)`,
//! then `n·c·h·w` little-endian `f32` values in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"MGT1";

pub fn write_tensor<W: Write>(mut w: W, t: &Tensor) -> Result<()> {
    w.write_all(MAGIC)?;
    for d in t.shape().dims() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 4);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor<R: Read>(mut r: R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad tensor magic {magic:?}, expected MGT1")));
    }
    let mut dims = [0usize; 4];
    for d in &mut dims {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        *d = u32::from_le_bytes(b) as usize;
    }
    let shape = Shape::from(dims);
    let len = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("tensor {shape} too large")))?;
    let mut bytes = vec![0u8; len * 4];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor::from_vec(shape, data)
}

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + t.len() * 4);
    write_tensor(&mut out, t).expect("writing to a Vec cannot fail");
    out
}

pub fn save(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
    read_tensor(BufReader::new(File::open(path)?))
}

/// Binary 16-bit PGM of a single-channel image, values clamped to `[0, 1]`.
pub fn encode_pgm16(t: &Tensor) -> Result<Vec<u8>> {
    let s = t.shape();
    if s.n != 1 || s.c != 1 {
        return Err(Error::invalid_shape(
            "encode_pgm16",
            s,
            "expected a single (1, 1, h, w) image",
        ));
    }
    let mut out = format!("P5\n{} {}\n65535\n", s.w, s.h).into_bytes();
    for &v in t.data() {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    Ok(out)
}

pub fn save_pgm16(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    std::fs::write(path, encode_pgm16(t)?)?;
    Ok(())
}
