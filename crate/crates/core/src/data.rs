//! CIFAR-10 binary loading and a synthetic stand-in generator.
//!
//! The on-disk layout is the standard `cifar-10-batches-bin` one: 3073-byte
//! records, one label byte followed by 3072 pixel bytes stored as the full
//! red plane, then green, then blue, each 32x32 row-major. Decoding maps a
//! pixel byte `b` to `b / 255.0` exactly; `encode_record` is its inverse and
//! round-trips bytes.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Result, StepError};
use crate::rng::PatternRng;
use crate::scalar::Scalar;
use crate::tensor::{Shape4, Tensor4};

pub const IMAGE_SIDE: usize = 32;
pub const IMAGE_CHANNELS: usize = 3;
pub const RECORD_BYTES: usize = 1 + IMAGE_CHANNELS * IMAGE_SIDE * IMAGE_SIDE;
pub const NUM_CLASSES: usize = 10;

pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_FILE: &str = "test_batch.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Decoded image set: NCHW floats in [0, 1] plus labels in [0, 10).
#[derive(Debug, Clone)]
pub struct LabeledImageBatch<F> {
    pub images: Tensor4<F>,
    pub labels: Vec<u8>,
}

impl<F: Scalar> LabeledImageBatch<F> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn decode_records<F: Scalar>(
    bytes: &[u8],
    path: &Path,
    images: &mut Vec<F>,
    labels: &mut Vec<u8>,
    remaining: usize,
) -> Result<usize> {
    if bytes.len() % RECORD_BYTES != 0 {
        return Err(StepError::Format(format!(
            "{}: {} bytes is not a whole number of {RECORD_BYTES}-byte records",
            path.display(),
            bytes.len()
        )));
    }
    let scale = F::from_f64_c(1.0 / 255.0);
    let mut taken = 0;
    for record in bytes.chunks_exact(RECORD_BYTES) {
        if taken == remaining {
            break;
        }
        let label = record[0];
        if label as usize >= NUM_CLASSES {
            return Err(StepError::Format(format!(
                "{}: label {label} out of range",
                path.display()
            )));
        }
        labels.push(label);
        images.extend(record[1..].iter().map(|&b| F::from_f64_c(b as f64) * scale));
        taken += 1;
    }
    Ok(taken)
}

/// Load a CIFAR-10 split from a `cifar-10-batches-bin` style directory.
/// `subset` caps the number of records, reading files in their standard
/// order; train batch files beyond the first may be absent.
pub fn load_cifar10<F: Scalar>(
    dir: &Path,
    split: Split,
    subset: Option<usize>,
) -> Result<LabeledImageBatch<F>> {
    let files: Vec<PathBuf> = match split {
        Split::Train => TRAIN_FILES.iter().map(|f| dir.join(f)).collect(),
        Split::Test => vec![dir.join(TEST_FILE)],
    };
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut remaining = subset.unwrap_or(usize::MAX);
    let mut any = false;
    for path in &files {
        if !path.exists() {
            if any {
                continue;
            }
            return Err(StepError::Format(format!("missing dataset file {}", path.display())));
        }
        any = true;
        if remaining == 0 {
            break;
        }
        let bytes = fs::read(path)?;
        remaining -= decode_records(&bytes, path, &mut images, &mut labels, remaining)?;
    }
    let n = labels.len();
    let images = Tensor4::from_vec(Shape4::new(n, IMAGE_CHANNELS, IMAGE_SIDE, IMAGE_SIDE), images)?;
    Ok(LabeledImageBatch { images, labels })
}

/// Re-encode one decoded image to its exact 3073 source bytes.
pub fn encode_record<F: Scalar>(batch: &LabeledImageBatch<F>, index: usize) -> Vec<u8> {
    let plane = IMAGE_CHANNELS * IMAGE_SIDE * IMAGE_SIDE;
    let mut record = Vec::with_capacity(RECORD_BYTES);
    record.push(batch.labels[index]);
    for &v in &batch.images.data()[index * plane..(index + 1) * plane] {
        record.push((v.as_f64() * 255.0).round().clamp(0.0, 255.0) as u8);
    }
    record
}

/// Deterministic synthetic dataset in the exact CIFAR-10 binary layout:
/// ten classes of oriented gratings with class-specific angle, frequency
/// and color tint under additive noise. A stand-in for environments where
/// the real dataset is not on disk; it exercises the identical loader,
/// training and evaluation paths.
pub fn write_synthetic_cifar(dir: &Path, train_n: usize, test_n: usize, seed: u64) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut rng = PatternRng::new(PatternRng::derive(seed, &[0x5D47A]));
    let write_split = |files: &[&str], total: usize, rng: &mut PatternRng| -> Result<()> {
        let per_file = total.div_ceil(files.len()).max(1);
        let mut left = total;
        for name in files {
            if left == 0 {
                break;
            }
            let count = left.min(per_file);
            let mut bytes = Vec::with_capacity(count * RECORD_BYTES);
            for _ in 0..count {
                let label = rng.int_inclusive(0, NUM_CLASSES as u32 - 1) as u8;
                bytes.push(label);
                synth_image(label, rng, &mut bytes);
            }
            fs::write(dir.join(name), bytes)?;
            left -= count;
        }
        Ok(())
    };
    write_split(&TRAIN_FILES, train_n, &mut rng)?;
    write_split(&[TEST_FILE], test_n, &mut rng)?;
    Ok(())
}

fn synth_image(label: u8, rng: &mut PatternRng, out: &mut Vec<u8>) {
    let class = label as f64;
    let angle = std::f64::consts::PI * class / NUM_CLASSES as f64;
    let freq = 2.0 + (label % 5) as f64 * 0.9;
    let phase = rng.unit_f64() * std::f64::consts::TAU;
    // Fixed per-class tint so color carries class information too.
    let tint = [
        0.55 + 0.45 * (class * 1.3).sin(),
        0.55 + 0.45 * (class * 2.1 + 1.0).sin(),
        0.55 + 0.45 * (class * 3.7 + 2.0).sin(),
    ];
    let (dy, dx) = (angle.sin(), angle.cos());
    let mut pixels = [0.0f64; IMAGE_SIDE * IMAGE_SIDE];
    for r in 0..IMAGE_SIDE {
        for c in 0..IMAGE_SIDE {
            let t = (dx * c as f64 + dy * r as f64) / IMAGE_SIDE as f64;
            pixels[r * IMAGE_SIDE + c] = (std::f64::consts::TAU * freq * t + phase).sin();
        }
    }
    for color in tint {
        for &p in pixels.iter() {
            let noise = (rng.unit_f64() - 0.5) * 0.55;
            let v = 0.5 + 0.32 * p * color + noise;
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_set_round_trips_through_loader() {
        let dir = tempfile::tempdir().unwrap();
        write_synthetic_cifar(dir.path(), 64, 16, 3).unwrap();
        let train = load_cifar10::<f32>(dir.path(), Split::Train, None).unwrap();
        assert_eq!(train.len(), 64);
        assert_eq!(train.images.shape(), Shape4::new(64, 3, 32, 32));
        assert!(train.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let test = load_cifar10::<f32>(dir.path(), Split::Test, Some(10)).unwrap();
        assert_eq!(test.len(), 10);
    }

    #[test]
    fn records_reencode_to_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        write_synthetic_cifar(dir.path(), 8, 2, 11).unwrap();
        let raw = fs::read(dir.path().join(TRAIN_FILES[0])).unwrap();
        let batch = load_cifar10::<f32>(dir.path(), Split::Train, None).unwrap();
        let in_first_file = raw.len() / RECORD_BYTES;
        assert!(in_first_file >= 2);
        for i in 0..in_first_file {
            let rec = encode_record(&batch, i);
            assert_eq!(rec, &raw[i * RECORD_BYTES..(i + 1) * RECORD_BYTES], "record {i}");
        }
    }

    #[test]
    fn zero_pixels_decode_to_zero_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let mut record = vec![0u8; RECORD_BYTES];
        record[0] = 7;
        fs::write(dir.path().join(TEST_FILE), &record).unwrap();
        let batch = load_cifar10::<f64>(dir.path(), Split::Test, None).unwrap();
        assert_eq!(batch.labels, vec![7]);
        assert!(batch.images.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(TEST_FILE), vec![0u8; RECORD_BYTES - 1]).unwrap();
        assert!(matches!(
            load_cifar10::<f32>(dir.path(), Split::Test, None),
            Err(StepError::Format(_))
        ));
    }

    #[test]
    fn out_of_range_label_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut record = vec![0u8; RECORD_BYTES];
        record[0] = 10;
        fs::write(dir.path().join(TEST_FILE), &record).unwrap();
        assert!(matches!(
            load_cifar10::<f32>(dir.path(), Split::Test, None),
            Err(StepError::Format(_))
        ));
    }

    #[test]
    fn missing_directory_reports_first_file() {
        let err = load_cifar10::<f32>(Path::new("/nonexistent"), Split::Train, None);
        assert!(matches!(err, Err(StepError::Format(_))));
    }

    #[test]
    fn subset_caps_across_files() {
        let dir = tempfile::tempdir().unwrap();
        write_synthetic_cifar(dir.path(), 50, 5, 1).unwrap();
        let batch = load_cifar10::<f32>(dir.path(), Split::Train, Some(13)).unwrap();
        assert_eq!(batch.len(), 13);
    }

    #[test]
    fn synthetic_generation_is_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_synthetic_cifar(a.path(), 10, 4, 9).unwrap();
        write_synthetic_cifar(b.path(), 10, 4, 9).unwrap();
        for name in [TRAIN_FILES[0], TEST_FILE] {
            assert_eq!(
                fs::read(a.path().join(name)).unwrap(),
                fs::read(b.path().join(name)).unwrap()
            );
        }
    }
}
