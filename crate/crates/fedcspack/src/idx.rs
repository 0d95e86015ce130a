//! MNIST-style IDX files: big-endian headers, one unsigned byte per pixel or label.

use std::fs;
use std::path::{Path, PathBuf};

use fedcspack_core::{Batch, Dataset};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, thiserror::Error)]
pub enum IdxError {
    #[error("{}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: wrong magic 0x{found:08x} at offset 0, expected 0x{expected:08x}", path.display())]
    BadMagic {
        path: PathBuf,
        found: u32,
        expected: u32,
    },
    #[error("{}: truncated at offset {offset}, needed {needed} more bytes", path.display())]
    Truncated {
        path: PathBuf,
        offset: usize,
        needed: usize,
    },
    #[error(
        "count mismatch: {} holds {images} images but {} holds {labels} labels (count field at offset 4)",
        images_path.display(),
        labels_path.display()
    )]
    CountMismatch {
        images_path: PathBuf,
        labels_path: PathBuf,
        images: usize,
        labels: usize,
    },
    #[error("{}: {message}", path.display())]
    Invalid { path: PathBuf, message: String },
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IdxError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(IdxError::Truncated {
                path: self.path.to_path_buf(),
                offset: self.bytes.len(),
                needed: self.pos + n - self.bytes.len(),
            });
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, IdxError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn magic(&mut self, expected: u32) -> Result<(), IdxError> {
        let found = self.u32()?;
        if found != expected {
            return Err(IdxError::BadMagic {
                path: self.path.to_path_buf(),
                found,
                expected,
            });
        }
        Ok(())
    }
}

fn read(path: &Path) -> Result<Vec<u8>, IdxError> {
    fs::read(path).map_err(|source| IdxError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Decode an image file into `(count, rows * cols, pixels)`.
pub fn parse_images(path: &Path, bytes: &[u8]) -> Result<(usize, usize, Vec<u8>), IdxError> {
    let mut r = Reader {
        path,
        bytes,
        pos: 0,
    };
    r.magic(IMAGE_MAGIC)?;
    let count = r.u32()? as usize;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let dim = rows * cols;
    let total = count.checked_mul(dim).ok_or_else(|| IdxError::Invalid {
        path: path.to_path_buf(),
        message: format!("header at offset 4 declares {count} x {rows} x {cols} bytes"),
    })?;
    let pixels = r.take(total)?.to_vec();
    Ok((count, dim, pixels))
}

pub fn parse_labels(path: &Path, bytes: &[u8]) -> Result<Vec<u8>, IdxError> {
    let mut r = Reader {
        path,
        bytes,
        pos: 0,
    };
    r.magic(LABEL_MAGIC)?;
    let count = r.u32()? as usize;
    Ok(r.take(count)?.to_vec())
}

/// Load an image/label pair. Pixels are scaled to `[0, 1]`; the class count is
/// one past the largest label.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, IdxError> {
    let (count, dim, pixels) = parse_images(images_path, &read(images_path)?)?;
    let labels = parse_labels(labels_path, &read(labels_path)?)?;
    if labels.len() != count {
        return Err(IdxError::CountMismatch {
            images_path: images_path.to_path_buf(),
            labels_path: labels_path.to_path_buf(),
            images: count,
            labels: labels.len(),
        });
    }
    let invalid = |message: String| IdxError::Invalid {
        path: images_path.to_path_buf(),
        message,
    };
    if count == 0 || dim == 0 {
        return Err(invalid("no samples".into()));
    }
    let features = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    let labels: Vec<u32> = labels.into_iter().map(u32::from).collect();
    let num_classes = labels.iter().max().map_or(0, |&m| m as usize + 1);
    let batch = Batch::new(features, dim, labels).map_err(|e| invalid(e.to_string()))?;
    let name = images_path
        .file_stem()
        .map_or_else(|| "idx".to_string(), |s| s.to_string_lossy().into_owned());
    Dataset::new(batch, num_classes, name).map_err(|e| invalid(e.to_string()))
}

pub fn encode_images(count: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), count * rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGE_MAGIC, count as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Write a dataset as an IDX pair, one `1 x dim` image per row.
///
/// Features are min-max scaled over the whole dataset into `0..=255`, so a
/// reloaded dataset matches the original up to that affine map and 8-bit rounding.
pub fn write_idx(data: &Dataset, images_path: &Path, labels_path: &Path) -> Result<(), IdxError> {
    let feats = data.batch.features();
    let (lo, hi) = feats
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        });
    let span = if hi > lo { hi - lo } else { 1.0 };
    let pixels: Vec<u8> = feats
        .iter()
        .map(|&x| ((x - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let mut labels = Vec::with_capacity(data.len());
    for &l in data.labels() {
        let l = u8::try_from(l).map_err(|_| IdxError::Invalid {
            path: labels_path.to_path_buf(),
            message: format!("label {l} does not fit in a byte"),
        })?;
        labels.push(l);
    }
    let write = |path: &Path, bytes: Vec<u8>| {
        fs::write(path, bytes).map_err(|source| IdxError::Io {
            path: path.to_path_buf(),
            source,
        })
    };
    write(
        images_path,
        encode_images(data.len(), 1, data.dim(), &pixels),
    )?;
    write(labels_path, encode_labels(&labels))
}
