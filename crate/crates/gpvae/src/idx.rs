//! IDX image and label files, optionally gzip-compressed.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use gpvae_core::data::Dataset;
use gpvae_core::linalg::Matrix;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, thiserror::Error)]
pub enum IdxError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: magic number 0x{found:08x}, expected 0x{expected:08x}")]
    Magic { path: PathBuf, found: u32, expected: u32 },
    #[error("{path}: header promises {expected} bytes, file holds {found}")]
    Length { path: PathBuf, expected: usize, found: usize },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
}

/// File contents, inflated when the file starts with the gzip signature.
pub fn read_bytes(path: &Path) -> Result<Vec<u8>, IdxError> {
    let io = |source| IdxError::Io { path: path.to_owned(), source };
    let raw = fs::read(path).map_err(io)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out).map_err(io)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32, IdxError> {
    bytes.get(at..at + 4).map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]])).ok_or(IdxError::Length {
        path: path.to_owned(),
        expected: at + 4,
        found: bytes.len(),
    })
}

/// Header dimensions and payload of an IDX file with the given magic.
pub fn parse<'a>(bytes: &'a [u8], expected_magic: u32, path: &Path) -> Result<(Vec<usize>, &'a [u8]), IdxError> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != expected_magic {
        return Err(IdxError::Magic { path: path.to_owned(), found: magic, expected: expected_magic });
    }
    let ndim = (magic & 0xff) as usize;
    let dims = (0..ndim).map(|i| be_u32(bytes, 4 + 4 * i, path).map(|v| v as usize)).collect::<Result<Vec<_>, _>>()?;
    let start = 4 + 4 * ndim;
    let expected = start + dims.iter().product::<usize>();
    if bytes.len() != expected {
        return Err(IdxError::Length { path: path.to_owned(), expected, found: bytes.len() });
    }
    Ok((dims, &bytes[start..]))
}

/// Images scaled by 1/255, one flattened image per row, with optional labels.
pub fn load_idx(images: &Path, labels: Option<&Path>) -> Result<Dataset, IdxError> {
    let bytes = read_bytes(images)?;
    let (dims, payload) = parse(&bytes, IMAGES_MAGIC, images)?;
    let n = dims[0];
    let width = dims[1] * dims[2];
    let data = payload.iter().map(|&b| f64::from(b) / 255.0).collect();
    let inputs = Matrix::from_vec(n, width, data).expect("payload length checked against header");
    let labels = match labels {
        Some(path) => {
            let bytes = read_bytes(path)?;
            let (dims, payload) = parse(&bytes, LABELS_MAGIC, path)?;
            if dims[0] != n {
                return Err(IdxError::CountMismatch { images: n, labels: dims[0] });
            }
            Some(payload.to_vec())
        }
        None => None,
    };
    let name = images.file_name().map_or_else(|| "idx".to_owned(), |f| f.to_string_lossy().into_owned());
    Ok(Dataset::new(name, inputs, labels).expect("byte pixels lie in [0, 1]"))
}

/// Serializes `n` images of `rows × cols` bytes.
pub fn encode_images(n: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), n * rows * cols, "pixel count");
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}
