//! IDX binary container: big-endian magic and dimension header, uint8
//! payload (2051 for images, 2049 for labels).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::Batch;

pub const IMAGES_MAGIC: u32 = 2051;
pub const LABELS_MAGIC: u32 = 2049;

/// How labels become target rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelMode {
    /// One-hot rows with the given class count.
    OneHot(usize),
    /// Single raw column.
    Raw,
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn read_u32_be(reader: &mut impl Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    reader.read_exact(&mut buf).map_err(|e| io_err(path, e))?;
    Ok(u32::from_be_bytes(buf))
}

/// Raw uint8 image payload with its dimensions.
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

pub fn read_idx_images(path: &Path) -> Result<IdxImages> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut reader = BufReader::new(file);
    let magic = read_u32_be(&mut reader, path)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Format {
            context: format!(
                "{}: expected image magic {IMAGES_MAGIC}, found {magic}",
                path.display()
            ),
        });
    }
    let count = read_u32_be(&mut reader, path)? as usize;
    let rows = read_u32_be(&mut reader, path)? as usize;
    let cols = read_u32_be(&mut reader, path)? as usize;
    let mut pixels = vec![0u8; count * rows * cols];
    reader
        .read_exact(&mut pixels)
        .map_err(|e| io_err(path, e))?;
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels,
    })
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut reader = BufReader::new(file);
    let magic = read_u32_be(&mut reader, path)?;
    if magic != LABELS_MAGIC {
        return Err(Error::Format {
            context: format!(
                "{}: expected label magic {LABELS_MAGIC}, found {magic}",
                path.display()
            ),
        });
    }
    let count = read_u32_be(&mut reader, path)? as usize;
    let mut labels = vec![0u8; count];
    reader
        .read_exact(&mut labels)
        .map_err(|e| io_err(path, e))?;
    Ok(labels)
}

/// Load an image/label pair into a batch: pixels scaled to [0, 1], labels
/// one-hot or raw per `mode`.
pub fn load_idx(images_path: &Path, labels_path: &Path, mode: LabelMode) -> Result<Batch> {
    let images = read_idx_images(images_path)?;
    let labels = read_idx_labels(labels_path)?;
    if images.count != labels.len() {
        return Err(Error::Inconsistent {
            context: format!(
                "{} images vs {} labels",
                images.count,
                labels.len()
            ),
        });
    }
    let dim = images.rows * images.cols;
    let x = Matrix::from_raw(
        images.count,
        dim,
        images.pixels.iter().map(|&p| p as f64 / 255.0).collect(),
    );
    let y = match mode {
        LabelMode::OneHot(classes) => {
            let mut y = Matrix::zeros(images.count, classes);
            for (i, &l) in labels.iter().enumerate() {
                if (l as usize) >= classes {
                    return Err(Error::Format {
                        context: format!(
                            "{}: label {l} out of range for {classes} classes",
                            labels_path.display()
                        ),
                    });
                }
                y.set(i, l as usize, 1.0);
            }
            y
        }
        LabelMode::Raw => {
            let mut y = Matrix::zeros(images.count, 1);
            for (i, &l) in labels.iter().enumerate() {
                y.set(i, 0, l as f64);
            }
            y
        }
    };
    Batch::new(x, y)
}

pub fn write_idx_images(
    path: &Path,
    pixels: &[u8],
    count: usize,
    rows: usize,
    cols: usize,
) -> Result<()> {
    if pixels.len() != count * rows * cols {
        return Err(Error::Inconsistent {
            context: format!(
                "{} pixels for {count}x{rows}x{cols} images",
                pixels.len()
            ),
        });
    }
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut writer = BufWriter::new(file);
    for v in [IMAGES_MAGIC, count as u32, rows as u32, cols as u32] {
        writer
            .write_all(&v.to_be_bytes())
            .map_err(|e| io_err(path, e))?;
    }
    writer.write_all(pixels).map_err(|e| io_err(path, e))?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut writer = BufWriter::new(file);
    for v in [LABELS_MAGIC, labels.len() as u32] {
        writer
            .write_all(&v.to_be_bytes())
            .map_err(|e| io_err(path, e))?;
    }
    writer.write_all(labels).map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Quantize [0, 1] floats back to uint8 (inverse of the load scaling).
pub fn quantize_pixels(values: &[f64]) -> Vec<u8> {
    values
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Average-pool square images by an integer factor (e.g. 28×28 → 14×14 at
/// factor 2); inputs whose side is not divisible by the factor are rejected.
pub fn average_pool(x: &Matrix, side: usize, factor: usize) -> Result<Matrix> {
    if factor == 0 || side % factor != 0 {
        return Err(Error::InvalidInput {
            context: format!("cannot pool side {side} by factor {factor}"),
        });
    }
    if x.cols() != side * side {
        return Err(Error::ShapeMismatch {
            context: "average_pool".into(),
            expected: (x.rows(), side * side),
            got: (x.rows(), x.cols()),
        });
    }
    let out_side = side / factor;
    let mut out = Matrix::zeros(x.rows(), out_side * out_side);
    let inv = 1.0 / (factor * factor) as f64;
    for r in 0..x.rows() {
        let src = x.row(r);
        let dst = out.row_mut(r);
        for oy in 0..out_side {
            for ox in 0..out_side {
                let mut acc = 0.0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += src[(oy * factor + dy) * side + ox * factor + dx];
                    }
                }
                dst[oy * out_side + ox] = acc * inv;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let images_path = dir.path().join("img.idx");
        let labels_path = dir.path().join("lbl.idx");
        let pixels: Vec<u8> = (0..4 * 2 * 2).map(|i| (i * 13 % 256) as u8).collect();
        let labels = vec![0u8, 3, 7, 9];
        write_idx_images(&images_path, &pixels, 4, 2, 2).unwrap();
        write_idx_labels(&labels_path, &labels).unwrap();
        let batch = load_idx(&images_path, &labels_path, LabelMode::Raw).unwrap();
        assert_eq!(batch.x.rows(), 4);
        assert_eq!(batch.x.cols(), 4);
        // re-quantize and compare bytes
        let back = quantize_pixels(batch.x.data());
        assert_eq!(back, pixels);
        for (i, &l) in labels.iter().enumerate() {
            assert_eq!(batch.y.get(i, 0), l as f64);
        }
    }

    #[test]
    fn wrong_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let images_path = dir.path().join("img.idx");
        let labels_path = dir.path().join("lbl.idx");
        write_idx_images(&images_path, &[0u8; 4], 1, 2, 2).unwrap();
        write_idx_labels(&labels_path, &[1u8]).unwrap();
        // labels file passed where images are expected
        let err = load_idx(&labels_path, &labels_path, LabelMode::Raw).unwrap_err();
        match err {
            Error::Format { context } => assert!(context.contains("lbl.idx")),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn count_mismatch_is_inconsistent() {
        let dir = tempfile::tempdir().unwrap();
        let images_path = dir.path().join("img.idx");
        let labels_path = dir.path().join("lbl.idx");
        write_idx_images(&images_path, &[0u8; 8], 2, 2, 2).unwrap();
        write_idx_labels(&labels_path, &[1u8]).unwrap();
        assert!(matches!(
            load_idx(&images_path, &labels_path, LabelMode::Raw),
            Err(Error::Inconsistent { .. })
        ));
    }

    #[test]
    fn one_hot_labels() {
        let dir = tempfile::tempdir().unwrap();
        let images_path = dir.path().join("img.idx");
        let labels_path = dir.path().join("lbl.idx");
        write_idx_images(&images_path, &[128u8; 2 * 4], 2, 2, 2).unwrap();
        write_idx_labels(&labels_path, &[1u8, 3]).unwrap();
        let batch = load_idx(&images_path, &labels_path, LabelMode::OneHot(4)).unwrap();
        assert_eq!(batch.y.row(0), &[0.0, 1.0, 0.0, 0.0]);
        assert_eq!(batch.y.row(1), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn pooling_halves_each_side() {
        let mut x = Matrix::zeros(1, 16);
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            *v = i as f64;
        }
        let pooled = average_pool(&x, 4, 2).unwrap();
        assert_eq!(pooled.cols(), 4);
        // top-left 2×2 block of a row-major 4×4 ramp: (0 + 1 + 4 + 5)/4
        assert!((pooled.get(0, 0) - 2.5).abs() < 1e-12);
        assert!(average_pool(&x, 4, 3).is_err());
    }
}
