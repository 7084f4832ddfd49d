//! File formats and on-disk artifacts.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Write `bytes` to a sibling temp file, fsync, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let res = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if let Err(e) = res {
        let _ = std::fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

pub mod font;
pub mod image;
pub mod manifest;
pub mod shapes;

pub use image::{export_png, import_png, montage, Montage};
pub use manifest::{OutputFile, RunManifest};
pub use shapes::{generate_shapes, render_shape, ShapeKind, ShapeParams, ShapesDataset, ShapesSpec, Texture};

const ARRAY_MAGIC: &[u8; 8] = b"MMXARRAY";
const DTYPE_F32_LE: u32 = 1;

/// Serializes an f32 array: magic, `u32` dtype code, `u32` rank, `u64` dims,
/// then little-endian values in row-major order.
pub fn encode_array(dims: &[usize], values: &[f32]) -> Result<Vec<u8>> {
    let n: usize = dims.iter().product();
    if n != values.len() {
        return Err(Error::ShapeMismatch {
            expected: dims.to_vec(),
            actual: vec![values.len()],
        });
    }
    let mut out = Vec::with_capacity(16 + 8 * dims.len() + 4 * n);
    out.extend_from_slice(ARRAY_MAGIC);
    out.extend_from_slice(&DTYPE_F32_LE.to_le_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_array(bytes: &[u8], origin: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let bad = |why: &str| Error::malformed(origin, why.to_string());
    if bytes.len() < 16 || &bytes[..8] != ARRAY_MAGIC {
        return Err(bad("not an array file (bad magic)"));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    if word(8) != DTYPE_F32_LE {
        return Err(bad("unsupported dtype"));
    }
    let rank = word(12) as usize;
    let head = 16 + 8 * rank;
    if bytes.len() < head {
        return Err(bad("truncated header"));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| u64::from_le_bytes(bytes[16 + 8 * i..24 + 8 * i].try_into().unwrap()) as usize)
        .collect();
    let n = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| bad("dimension overflow"))?;
    if bytes.len() - head != n.checked_mul(4).ok_or_else(|| bad("dimension overflow"))? {
        return Err(bad("payload size does not match dims"));
    }
    let values = bytes[head..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((dims, values))
}

pub fn write_array(path: &Path, dims: &[usize], values: &[f32]) -> Result<()> {
    write_atomic(path, &encode_array(dims, values)?)
}

pub fn read_array(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_array(&bytes, path)
}

/// Stacks same-shape samples into one `[n, ...shape]` array file.
pub fn write_samples(path: &Path, samples: &[crate::sample::Sample]) -> Result<()> {
    let shape = samples.first().map(|s| s.shape().to_vec()).unwrap_or_default();
    let mut dims = vec![samples.len()];
    dims.extend_from_slice(&shape);
    let mut values = Vec::with_capacity(samples.iter().map(|s| s.len()).sum());
    for s in samples {
        if s.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch {
                expected: shape.clone(),
                actual: s.shape().to_vec(),
            });
        }
        values.extend(s.data().iter().map(|&v| v as f32));
    }
    write_array(path, &dims, &values)
}

pub fn read_samples(path: &Path) -> Result<Vec<crate::sample::Sample>> {
    let (dims, values) = read_array(path)?;
    let (&n, shape) = dims
        .split_first()
        .ok_or_else(|| Error::malformed(path, "rank-0 array"))?;
    let per: usize = shape.iter().product();
    if n == 0 {
        return Ok(Vec::new());
    }
    values
        .chunks_exact(per.max(1))
        .map(|c| crate::sample::Sample::new(shape.to_vec(), c.iter().map(|&v| v as f64).collect()))
        .collect()
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}
