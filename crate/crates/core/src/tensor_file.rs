//! Raw little-endian tensor files with JSON sidecars.
//!
//! Used by the feature cache, the embedding and pseudo-label stores and the
//! k-means centroids. Each tensor is a flat `.bin` file; shape and dtype live in
//! JSON next to it.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    U32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub shape: Vec<usize>,
    pub dtype: DType,
}

pub fn write_f32(path: &Path, data: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(path, &bytes)
}

pub fn write_u32(path: &Path, data: &[u32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(path, &bytes)
}

fn read_words(path: &Path, expected: usize) -> Result<Vec<[u8; 4]>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected * 4 {
        return Err(Error::Shape(format!(
            "{}: expected {} elements, file holds {} bytes",
            path.display(),
            expected,
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| [c[0], c[1], c[2], c[3]])
        .collect())
}

pub fn read_f32(path: &Path, expected: usize) -> Result<Vec<f32>> {
    Ok(read_words(path, expected)?
        .into_iter()
        .map(f32::from_le_bytes)
        .collect())
}

pub fn read_u32(path: &Path, expected: usize) -> Result<Vec<u32>> {
    Ok(read_words(path, expected)?
        .into_iter()
        .map(u32::from_le_bytes)
        .collect())
}

pub fn write_matrix(path: &Path, m: &Array2<f32>) -> Result<TensorMeta> {
    let data: Vec<f32> = m.iter().copied().collect();
    write_f32(path, &data)?;
    Ok(TensorMeta {
        shape: vec![m.nrows(), m.ncols()],
        dtype: DType::F32,
    })
}

pub fn read_matrix(path: &Path, meta: &TensorMeta) -> Result<Array2<f32>> {
    if meta.dtype != DType::F32 || meta.shape.len() != 2 {
        return Err(Error::Shape(format!(
            "{}: expected a 2-d f32 tensor, sidecar says {:?} {:?}",
            path.display(),
            meta.dtype,
            meta.shape
        )));
    }
    let data = read_f32(path, meta.shape[0] * meta.shape[1])?;
    Array2::from_shape_vec((meta.shape[0], meta.shape[1]), data)
        .map_err(|e| Error::Shape(e.to_string()))
}

/// Write-temp-then-rename so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let tmp = path.with_extension("tmp~");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&s)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Array2::from_shape_fn((3, 5), |(i, j)| i as f32 * 0.5 - j as f32);
        let p = dir.path().join("m.bin");
        let meta = write_matrix(&p, &m).unwrap();
        assert_eq!(read_matrix(&p, &meta).unwrap(), m);
    }

    #[test]
    fn wrong_size_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        write_u32(&p, &[1, 2, 3]).unwrap();
        assert!(read_u32(&p, 4).is_err());
        assert_eq!(read_u32(&p, 3).unwrap(), vec![1, 2, 3]);
    }
}
