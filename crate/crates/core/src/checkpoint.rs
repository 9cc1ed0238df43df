//! Binary checkpoint format.
//!
//! ```text
//! "SDLM0001"                          8 bytes magic
//! version, precision, V, E, H, L      u32 little-endian each
//! embedding (V×E)
//! per layer: W (in×4H), U (H×4H), b (4H)
//! head (H×V), head_bias (V)
//! ```
//!
//! Arrays are row-major; elements are little-endian `f32` or `f64` per the
//! precision code (4 or 8).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::lstm::{LstmParams, GATES};
use crate::model::ModelParams;
use crate::scalar::{Precision, Scalar};
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 8] = b"SDLM0001";
pub const VERSION: u32 = 1;

/// Header fields of a checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Header {
    pub version: u32,
    pub precision: Precision,
    pub vocab: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub layers: usize,
}

pub fn to_bytes<T: Scalar>(params: &ModelParams<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + params.num_params() * std::mem::size_of::<T>());
    out.extend_from_slice(MAGIC);
    for v in [
        VERSION,
        T::PRECISION.code(),
        params.vocab() as u32,
        params.embed_dim() as u32,
        params.hidden() as u32,
        params.layers() as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for s in params.slices() {
        for &v in s {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn values<T: Scalar>(&mut self, n: usize) -> Result<Vec<T>> {
        let width = std::mem::size_of::<T>();
        let raw = self.take(
            n.checked_mul(width)
                .ok_or_else(|| Error::Checkpoint("array size overflows".into()))?,
        )?;
        Ok(raw.chunks_exact(width).map(T::read_le).collect())
    }

    fn matrix<T: Scalar>(&mut self, rows: usize, cols: usize) -> Result<Matrix<T>> {
        Matrix::from_vec(rows, cols, self.values(rows * cols)?)
    }
}

pub fn read_header(bytes: &[u8]) -> Result<Header> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let code = r.u32()?;
    let precision = Precision::from_code(code)
        .ok_or_else(|| Error::Checkpoint(format!("unknown precision code {code}")))?;
    Ok(Header {
        version,
        precision,
        vocab: r.u32()? as usize,
        embed_dim: r.u32()? as usize,
        hidden: r.u32()? as usize,
        layers: r.u32()? as usize,
    })
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<ModelParams<T>> {
    let header = read_header(bytes)?;
    if header.precision != T::PRECISION {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} values, requested {}",
            header.precision,
            T::PRECISION
        )));
    }
    let Header {
        vocab: v,
        embed_dim: e,
        hidden: h,
        layers,
        ..
    } = header;
    let mut r = Reader { bytes, pos: 32 };
    let embedding = r.matrix(v, e)?;
    let mut lstm = Vec::with_capacity(layers);
    for l in 0..layers {
        let input = if l == 0 { e } else { h };
        lstm.push(LstmParams {
            w: r.matrix(input, GATES * h)?,
            u: r.matrix(h, GATES * h)?,
            b: r.values(GATES * h)?,
        });
    }
    let head = r.matrix(h, v)?;
    let head_bias = r.values(v)?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(ModelParams {
        embedding,
        lstm,
        head,
        head_bias,
    })
}

pub fn save<T: Scalar>(params: &ModelParams<T>, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(params))?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<ModelParams<T>> {
    from_bytes(&fs::read(path)?)
}
