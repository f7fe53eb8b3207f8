//! Feature files: `"DSAF"`, `u32` version (1), `u32` N, `u32` D, then
//! `N·D` little-endian `f32` values, row-major.

use std::fs;
use std::path::Path;

use crate::datamodel::manifest::VideoRecord;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const FEATURE_MAGIC: &[u8; 4] = b"DSAF";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// One video's frame features, `N×D`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence<T> {
    pub video_id: String,
    pub frames: Matrix<T>,
}

impl<T: Scalar> FeatureSequence<T> {
    pub fn n_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }
}

pub fn encode_features<T: Scalar>(frames: &Matrix<T>) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + frames.len() * 4);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(frames.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(frames.cols() as u32).to_le_bytes());
    for x in frames.data() {
        buf.extend_from_slice(&(x.f64() as f32).to_le_bytes());
    }
    buf
}

pub fn write_features<T: Scalar>(path: &Path, frames: &Matrix<T>) -> Result<()> {
    fs::write(path, encode_features(frames)).map_err(|e| Error::io(path, e))
}

pub fn decode_features<T: Scalar>(bytes: &[u8], path: &Path) -> Result<Matrix<T>> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "DSAF",
        });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let version = word(4);
    if version != FEATURE_VERSION as usize {
        return Err(Error::schema("version", format!("unsupported feature file version {version}")));
    }
    let (n, d) = (word(8), word(12));
    let payload = &bytes[HEADER_LEN..];
    if n == 0 || d == 0 || payload.len() != n * d * 4 {
        return Err(Error::DimensionMismatch {
            path: path.to_path_buf(),
            reason: format!(
                "header says {n}x{d} ({} floats), payload holds {} bytes",
                n * d,
                payload.len()
            ),
        });
    }
    let mut data = Vec::with_capacity(n * d);
    for (index, chunk) in payload.chunks_exact(4).enumerate() {
        let x = f32::from_le_bytes(chunk.try_into().unwrap());
        if !x.is_finite() {
            return Err(Error::NonFiniteEntry {
                path: path.to_path_buf(),
                index,
            });
        }
        data.push(T::of(x as f64));
    }
    Matrix::from_vec(n, d, data)
}

pub fn read_features<T: Scalar>(path: &Path) -> Result<Matrix<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes, path)
}

/// Loads a record's features and checks them against its declared shape.
pub fn load_features<T: Scalar>(record: &VideoRecord) -> Result<FeatureSequence<T>> {
    let frames = read_features(&record.feature_path)?;
    if frames.shape() != (record.n_frames, record.dim) {
        return Err(Error::DimensionMismatch {
            path: record.feature_path.clone(),
            reason: format!(
                "file is {}x{}, manifest declares {}x{}",
                frames.rows(),
                frames.cols(),
                record.n_frames,
                record.dim
            ),
        });
    }
    Ok(FeatureSequence {
        video_id: record.id.clone(),
        frames,
    })
}
