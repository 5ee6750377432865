//! IDX image/label files, optionally gzip-compressed.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use ars_core::data::{one_hot_matrix, Dataset};
use ars_core::Matrix;
use flate2::read::GzDecoder;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;
pub const CLASSES: usize = 10;

#[derive(Debug, thiserror::Error)]
pub enum IdxError {
    #[error("{path}: bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic { path: PathBuf, expected: u32, found: u32 },
    #[error("{path}: truncated file ({found} bytes, need {expected})")]
    Truncated { path: PathBuf, expected: usize, found: usize },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("{path}: label {label} at index {index} is not a digit")]
    BadLabel { path: PathBuf, index: usize, label: u8 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, IdxError> {
    let io = |source| IdxError::Io {
        path: path.to_path_buf(),
        source,
    };
    let raw = fs::read(path).map_err(io)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out).map_err(io)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

fn header(path: &Path, bytes: &[u8], magic: u32, dims: usize) -> Result<Vec<usize>, IdxError> {
    let need = 4 + 4 * dims;
    if bytes.len() < need {
        return Err(IdxError::Truncated {
            path: path.to_path_buf(),
            expected: need,
            found: bytes.len(),
        });
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(IdxError::BadMagic {
            path: path.to_path_buf(),
            expected: magic,
            found,
        });
    }
    Ok((0..dims).map(|i| be_u32(bytes, 4 + 4 * i) as usize).collect())
}

fn body<'a>(path: &Path, bytes: &'a [u8], offset: usize, len: usize) -> Result<&'a [u8], IdxError> {
    bytes.get(offset..offset + len).ok_or(IdxError::Truncated {
        path: path.to_path_buf(),
        expected: offset + len,
        found: bytes.len(),
    })
}

/// Reads raw pixels: `(count, rows, cols, pixels)`.
pub fn read_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>), IdxError> {
    let bytes = read_bytes(path)?;
    let h = header(path, &bytes, IMAGES_MAGIC, 3)?;
    let (n, r, c) = (h[0], h[1], h[2]);
    let px = body(path, &bytes, 16, n * r * c)?;
    Ok((n, r, c, px.to_vec()))
}

pub fn read_labels(path: &Path) -> Result<Vec<u8>, IdxError> {
    let bytes = read_bytes(path)?;
    let n = header(path, &bytes, LABELS_MAGIC, 1)?[0];
    Ok(body(path, &bytes, 8, n)?.to_vec())
}

/// Pixels scaled to `[0, 1]`, labels one-hot over ten digits.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset, IdxError> {
    let (n, r, c, px) = read_images(images)?;
    let ys = read_labels(labels)?;
    if ys.len() != n {
        return Err(IdxError::CountMismatch {
            images: n,
            labels: ys.len(),
        });
    }
    let classes = ys
        .iter()
        .enumerate()
        .map(|(index, &label)| {
            if (label as usize) < CLASSES {
                Ok(label as usize)
            } else {
                Err(IdxError::BadLabel {
                    path: labels.to_path_buf(),
                    index,
                    label,
                })
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    let x = Matrix::from_vec(n, r * c, px.iter().map(|&p| p as f64 / 255.0).collect());
    Ok(Dataset::new(x, Some(one_hot_matrix(&classes, CLASSES)), Vec::new(), None).expect("pixels are finite"))
}
