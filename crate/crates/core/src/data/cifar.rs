//! CIFAR-10 binary batches: 3073-byte records (label, then 1024 R, G, B bytes).

use std::path::Path;

use super::LabeledDataset;
use crate::container::read_file;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const RECORD_LEN: usize = 3073;
pub const TRAIN_BATCHES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_BATCH: &str = "test_batch.bin";

pub fn parse_batch<T: Scalar>(bytes: &[u8], images: &mut Vec<T>, labels: &mut Vec<usize>) -> Result<()> {
    if bytes.len() % RECORD_LEN != 0 {
        return Err(Error::Format(format!("CIFAR batch length {} is not a multiple of {RECORD_LEN}", bytes.len())));
    }
    let scale = T::lit(255.0);
    for rec in bytes.chunks_exact(RECORD_LEN) {
        if rec[0] > 9 {
            return Err(Error::Format(format!("CIFAR label {} outside 0..=9", rec[0])));
        }
        labels.push(rec[0] as usize);
        images.extend(rec[1..].iter().map(|&p| T::lit(p as f64) / scale));
    }
    Ok(())
}

/// Concatenates one or more batch files into a `N x 3 x 32 x 32` dataset.
pub fn load_cifar10<T: Scalar>(paths: &[&Path]) -> Result<LabeledDataset<T>> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for p in paths {
        parse_batch(&read_file(p)?, &mut images, &mut labels)?;
    }
    LabeledDataset::new(Tensor::new(vec![labels.len(), 3, 32, 32], images)?, labels, "cifar10")
}

pub fn load_cifar10_dir<T: Scalar>(dir: &Path, train: bool) -> Result<LabeledDataset<T>> {
    let paths: Vec<_> = if train {
        TRAIN_BATCHES.iter().map(|f| dir.join(f)).collect()
    } else {
        vec![dir.join(TEST_BATCH)]
    };
    let refs: Vec<&Path> = paths.iter().map(|p| p.as_path()).collect();
    let mut ds = load_cifar10(&refs)?;
    ds.name = if train { "cifar10-train".into() } else { "cifar10-test".into() };
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_records_channel_major() {
        let mut rec = vec![0u8; RECORD_LEN * 2];
        rec[0] = 6;
        rec[1] = 255; // first red pixel
        rec[1 + 1024] = 51; // first green pixel
        rec[RECORD_LEN] = 2;
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.bin");
        std::fs::write(&p, &rec).unwrap();
        let ds = load_cifar10::<f32>(&[&p]).unwrap();
        assert_eq!(ds.labels, vec![6, 2]);
        assert_eq!(ds.images.shape(), &[2, 3, 32, 32]);
        assert_eq!(ds.image(0)[0], 1.0);
        assert_eq!(ds.image(0)[1024], 0.2);
    }

    #[test]
    fn rejects_partial_record() {
        let mut images: Vec<f32> = Vec::new();
        let mut labels = Vec::new();
        assert!(parse_batch(&[0u8; 100], &mut images, &mut labels).is_err());
    }
}
