//! Dataset ingestion: the big-endian IDX image/label format, pixel
//! normalization into `[0, 1]`, and a small synthetic set generator for
//! demos and tests that should not depend on the real files.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CdlError, Result};
use crate::tensor::Tensor;

const IMAGE_MAGIC: u32 = 2051;
const LABEL_MAGIC: u32 = 2049;

/// Standard MNIST file names under a data directory.
pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// A labeled image set. Pixels are scaled into `[0, 1]`; labels index
/// classes from zero.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Loads an image/label file pair, cross-checking the counts.
    pub fn from_idx_files(images_path: &Path, labels_path: &Path) -> Result<Self> {
        let images = load_idx_images(images_path)?;
        let labels = load_idx_labels(labels_path)?;
        if images.len() != labels.len() {
            return Err(CdlError::CountMismatch {
                images: images.len(),
                labels: labels.len(),
            });
        }
        Ok(Dataset { images, labels })
    }

    /// The training split under a standard MNIST data directory.
    pub fn mnist_train(dir: &Path) -> Result<Self> {
        Dataset::from_idx_files(&dir.join(TRAIN_IMAGES), &dir.join(TRAIN_LABELS))
    }

    /// The test split under a standard MNIST data directory.
    pub fn mnist_test(dir: &Path) -> Result<Self> {
        Dataset::from_idx_files(&dir.join(TEST_IMAGES), &dir.join(TEST_LABELS))
    }

    /// Keeps only the first `n` samples.
    pub fn truncate(&mut self, n: usize) {
        self.images.truncate(n);
        self.labels.truncate(n);
    }

    /// Deterministic synthetic set: each class is a blurred bar at a
    /// class-specific position plus noise. Classes are interleaved so any
    /// prefix stays roughly balanced. Useful for demos and fast end-to-end
    /// tests; the classes are easy to separate by design.
    pub fn synthetic(classes: usize, per_class: usize, side: usize, seed: u64) -> Self {
        assert!(classes >= 2 && side >= classes + 2, "classes must fit in the image");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut images = Vec::with_capacity(classes * per_class);
        let mut labels = Vec::with_capacity(classes * per_class);
        for _ in 0..per_class {
            for class in 0..classes {
                let mut data = vec![0.0f64; side * side];
                for v in &mut data {
                    *v = rng.random_range(0.0..0.15);
                }
                let row = 1 + class * (side - 2) / classes;
                for x in 1..side - 1 {
                    data[row * side + x] = rng.random_range(0.85..1.0);
                    data[(row + 1) * side + x] = rng.random_range(0.4..0.6);
                }
                images.push(Tensor::new(vec![1, side, side], data).expect("shape matches payload"));
                labels.push(class);
            }
        }
        Dataset { images, labels }
    }
}

struct IdxReader<'a> {
    bytes: &'a [u8],
    offset: usize,
    path: PathBuf,
}

impl<'a> IdxReader<'a> {
    fn err(&self, reason: impl Into<String>) -> CdlError {
        CdlError::IdxParse {
            path: self.path.clone(),
            offset: self.offset,
            reason: reason.into(),
        }
    }

    fn read_u32(&mut self) -> Result<u32> {
        let end = self.offset + 4;
        if end > self.bytes.len() {
            return Err(self.err(format!(
                "need 4 bytes for a big-endian u32, file has {} left",
                self.bytes.len() - self.offset
            )));
        }
        let v = u32::from_be_bytes(self.bytes[self.offset..end].try_into().expect("4 bytes"));
        self.offset = end;
        Ok(v)
    }

    fn payload(&mut self, expected: usize) -> Result<&'a [u8]> {
        let end = self.offset + expected;
        if end > self.bytes.len() {
            return Err(self.err(format!(
                "payload of {expected} bytes truncated, file has {} left",
                self.bytes.len() - self.offset
            )));
        }
        let slice = &self.bytes[self.offset..end];
        self.offset = end;
        Ok(slice)
    }
}

/// Parses an IDX image file: big-endian magic 2051, image count, rows,
/// columns, then one byte per pixel. Pixels are scaled by 1/255.
pub fn load_idx_images(path: &Path) -> Result<Vec<Tensor>> {
    let bytes = std::fs::read(path).map_err(|e| CdlError::io(path, e))?;
    let mut r = IdxReader {
        bytes: &bytes,
        offset: 0,
        path: path.to_path_buf(),
    };
    let magic = r.read_u32()?;
    if magic != IMAGE_MAGIC {
        r.offset = 0;
        return Err(r.err(format!("bad image magic {magic}, expected {IMAGE_MAGIC}")));
    }
    let count = r.read_u32()? as usize;
    let rows = r.read_u32()? as usize;
    let cols = r.read_u32()? as usize;
    if rows == 0 || cols == 0 {
        return Err(r.err(format!("degenerate image dimensions {rows}x{cols}")));
    }
    let pixels = r.payload(count * rows * cols)?;
    Ok(pixels
        .chunks_exact(rows * cols)
        .map(|chunk| {
            let data: Vec<f64> = chunk.iter().map(|&b| b as f64 / 255.0).collect();
            Tensor::new(vec![1, rows, cols], data).expect("shape matches payload")
        })
        .collect())
}

/// Parses an IDX label file: big-endian magic 2049, count, one byte per label.
pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = std::fs::read(path).map_err(|e| CdlError::io(path, e))?;
    let mut r = IdxReader {
        bytes: &bytes,
        offset: 0,
        path: path.to_path_buf(),
    };
    let magic = r.read_u32()?;
    if magic != LABEL_MAGIC {
        r.offset = 0;
        return Err(r.err(format!("bad label magic {magic}, expected {LABEL_MAGIC}")));
    }
    let count = r.read_u32()? as usize;
    let payload = r.payload(count)?;
    Ok(payload.iter().map(|&b| b as usize).collect())
}

/// Encodes images (quantized to bytes) in the IDX layout. The inverse of
/// [`load_idx_images`] up to pixel quantization; used to produce fixtures.
pub fn write_idx_images(path: &Path, images: &[Tensor]) -> Result<()> {
    let (rows, cols) = match images.first().map(|t| t.shape()) {
        Some([1, r, c]) => (*r, *c),
        _ => {
            return Err(CdlError::InvalidArgument {
                op: "write_idx_images",
                reason: "need at least one [1, rows, cols] image".into(),
            })
        }
    };
    let mut bytes = Vec::with_capacity(16 + images.len() * rows * cols);
    bytes.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(images.len() as u32).to_be_bytes());
    bytes.extend_from_slice(&(rows as u32).to_be_bytes());
    bytes.extend_from_slice(&(cols as u32).to_be_bytes());
    for img in images {
        bytes.extend(img.data().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    }
    std::fs::write(path, bytes).map_err(|e| CdlError::io(path, e))
}

/// Encodes labels in the IDX layout.
pub fn write_idx_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 + labels.len());
    bytes.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    bytes.extend(labels.iter().map(|&l| l as u8));
    std::fs::write(path, bytes).map_err(|e| CdlError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(name: &str, bytes: &[u8]) -> PathBuf {
        let path = std::env::temp_dir().join(format!("cdl-data-test-{name}-{}", std::process::id()));
        std::fs::write(&path, bytes).unwrap();
        path
    }

    #[test]
    fn parses_hand_encoded_image_fixture() {
        // magic 2051, one 2x2 image, pixel bytes 0, 128, 255, 0.
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&2051u32.to_be_bytes());
        bytes.extend_from_slice(&1u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&[0, 128, 255, 0]);
        let path = write_tmp("img", &bytes);
        let images = load_idx_images(&path).unwrap();
        std::fs::remove_file(&path).ok();
        assert_eq!(images.len(), 1);
        assert_eq!(images[0].shape(), [1, 2, 2]);
        assert_eq!(images[0].data(), [0.0, 128.0 / 255.0, 1.0, 0.0]);
    }

    #[test]
    fn parses_hand_encoded_label_fixture() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&2049u32.to_be_bytes());
        bytes.extend_from_slice(&3u32.to_be_bytes());
        bytes.extend_from_slice(&[7, 0, 9]);
        let path = write_tmp("lbl", &bytes);
        let labels = load_idx_labels(&path).unwrap();
        std::fs::remove_file(&path).ok();
        assert_eq!(labels, vec![7, 0, 9]);
    }

    #[test]
    fn truncated_payload_error_carries_offset() {
        // Header promises 2 images of 2x2 but the payload is missing.
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&2051u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        let path = write_tmp("trunc", &bytes);
        let err = load_idx_images(&path).unwrap_err();
        std::fs::remove_file(&path).ok();
        match err {
            CdlError::IdxParse { offset, reason, .. } => {
                assert_eq!(offset, 16, "payload starts right after the 16-byte header");
                assert!(reason.contains("truncated"));
            }
            other => panic!("expected IdxParse, got {other}"),
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&1234u32.to_be_bytes());
        bytes.extend_from_slice(&0u32.to_be_bytes());
        let path = write_tmp("magic", &bytes);
        let err = load_idx_labels(&path).unwrap_err();
        std::fs::remove_file(&path).ok();
        assert!(err.to_string().contains("bad label magic 1234"));
    }

    #[test]
    fn count_mismatch_is_rejected() {
        let mut img = Vec::new();
        img.extend_from_slice(&2051u32.to_be_bytes());
        img.extend_from_slice(&1u32.to_be_bytes());
        img.extend_from_slice(&1u32.to_be_bytes());
        img.extend_from_slice(&1u32.to_be_bytes());
        img.push(42);
        let mut lbl = Vec::new();
        lbl.extend_from_slice(&2049u32.to_be_bytes());
        lbl.extend_from_slice(&2u32.to_be_bytes());
        lbl.extend_from_slice(&[1, 2]);
        let img_path = write_tmp("mismatch-img", &img);
        let lbl_path = write_tmp("mismatch-lbl", &lbl);
        let err = Dataset::from_idx_files(&img_path, &lbl_path).unwrap_err();
        std::fs::remove_file(&img_path).ok();
        std::fs::remove_file(&lbl_path).ok();
        match err {
            CdlError::CountMismatch { images, labels } => {
                assert_eq!((images, labels), (1, 2));
            }
            other => panic!("expected CountMismatch, got {other}"),
        }
    }

    #[test]
    fn synthetic_is_deterministic_and_normalized() {
        let a = Dataset::synthetic(4, 3, 16, 9);
        let b = Dataset::synthetic(4, 3, 16, 9);
        assert_eq!(a.len(), 12);
        assert_eq!(a.labels, b.labels);
        for (x, y) in a.images.iter().zip(&b.images) {
            assert_eq!(x.data(), y.data());
        }
        for img in &a.images {
            assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn idx_round_trip_preserves_quantized_pixels() {
        let set = Dataset::synthetic(3, 2, 12, 5);
        let dir = std::env::temp_dir();
        let img_path = dir.join(format!("cdl-rt-img-{}", std::process::id()));
        let lbl_path = dir.join(format!("cdl-rt-lbl-{}", std::process::id()));
        write_idx_images(&img_path, &set.images).unwrap();
        write_idx_labels(&lbl_path, &set.labels).unwrap();
        let loaded = Dataset::from_idx_files(&img_path, &lbl_path).unwrap();
        std::fs::remove_file(&img_path).ok();
        std::fs::remove_file(&lbl_path).ok();
        assert_eq!(loaded.labels, set.labels);
        for (orig, back) in set.images.iter().zip(&loaded.images) {
            for (&o, &b) in orig.data().iter().zip(back.data()) {
                assert!((o - b).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
    }
}
