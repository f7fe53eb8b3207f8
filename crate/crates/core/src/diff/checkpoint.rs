//! Binary checkpoint: `"DSCK"`, `u32` version, then for every parameter
//! `u32` name length, name bytes, `u32` rank, `u32` dims, `f32` payload.
//! Little-endian throughout; entries run to end of file.

use std::fs;
use std::path::Path;

use crate::diff::params::ParameterStore;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode<T: Scalar>(store: &ParameterStore<T>) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for (_, p) in store.iter() {
        buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.extend_from_slice(&2u32.to_le_bytes());
        buf.extend_from_slice(&(p.value.rows() as u32).to_le_bytes());
        buf.extend_from_slice(&(p.value.cols() as u32).to_le_bytes());
        for x in p.value.data() {
            buf.extend_from_slice(&(x.f64() as f32).to_le_bytes());
        }
    }
    buf
}

pub fn save<T: Scalar>(path: &Path, store: &ParameterStore<T>) -> Result<()> {
    fs::write(path, encode(store)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::DimensionMismatch {
                path: self.path.to_path_buf(),
                reason: format!("truncated checkpoint at byte {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode<T: Scalar>(bytes: &[u8], path: &Path) -> Result<Vec<(String, Matrix<T>)>> {
    if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "DSCK",
        });
    }
    let mut r = Reader {
        bytes,
        pos: 4,
        path,
    };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::schema("version", format!("unsupported checkpoint version {version}")));
    }
    let mut out = Vec::new();
    while r.pos < bytes.len() {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::schema("name", "parameter name is not utf-8"))?;
        let rank = r.u32()? as usize;
        let dims: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let (rows, cols) = match dims.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [r0, rest @ ..] => (*r0, rest.iter().product()),
        };
        let mut data = Vec::with_capacity(rows * cols);
        for (i, chunk) in r.take(rows * cols * 4)?.chunks_exact(4).enumerate() {
            let x = f32::from_le_bytes(chunk.try_into().unwrap());
            if !x.is_finite() {
                return Err(Error::NonFiniteEntry {
                    path: path.to_path_buf(),
                    index: i,
                });
            }
            data.push(T::of(x as f64));
        }
        out.push((name, Matrix::from_vec(rows, cols, data)?));
    }
    Ok(out)
}

pub fn load<T: Scalar>(path: &Path) -> Result<Vec<(String, Matrix<T>)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
