//! CIFAR-10 binary batches: fixed 3073-byte records of one label byte
//! followed by 3072 pixel bytes (R, G and B planes of 32×32, row-major).

use std::path::Path;

use super::{LabeledDataset, Provenance};
use crate::error::{Error, Result};

pub const CIFAR10_RECORD_BYTES: usize = 3073;
const PIXELS: usize = 3072;
const CLASSES: usize = 10;

/// Parses one or more concatenated records.
pub fn parse_cifar10(bytes: &[u8]) -> Result<(Vec<f32>, Vec<usize>)> {
    if bytes.len() % CIFAR10_RECORD_BYTES != 0 {
        return Err(Error::Dataset(format!(
            "truncated CIFAR-10 data: {} bytes is not a multiple of {CIFAR10_RECORD_BYTES}",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR10_RECORD_BYTES;
    let mut features = Vec::with_capacity(n * PIXELS);
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(CIFAR10_RECORD_BYTES).enumerate() {
        let label = rec[0] as usize;
        if label >= CLASSES {
            return Err(Error::Dataset(format!("record {i}: label byte {label} > 9")));
        }
        labels.push(label);
        features.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok((features, labels))
}

/// Loads and concatenates binary batch files.
pub fn load_cifar10<P: AsRef<Path>>(paths: &[P]) -> Result<LabeledDataset> {
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for p in paths {
        let p = p.as_ref();
        let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
        let (f, l) = parse_cifar10(&bytes).map_err(|e| Error::Dataset(format!("{}: {e}", p.display())))?;
        features.extend(f);
        labels.extend(l);
    }
    if labels.is_empty() {
        return Err(Error::Dataset("CIFAR-10 input holds no records".into()));
    }
    LabeledDataset::new(features, labels, [3, 32, 32], CLASSES, Provenance::Cifar10Binary)
}

/// Encodes one record; handy for fixtures.
pub fn encode_cifar10_record(label: u8, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), PIXELS, "a record holds 3072 pixel bytes");
    let mut out = Vec::with_capacity(CIFAR10_RECORD_BYTES);
    out.push(label);
    out.extend_from_slice(pixels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> Vec<u8> {
        let a: Vec<u8> = (0..PIXELS).map(|i| (i % 256) as u8).collect();
        let b: Vec<u8> = (0..PIXELS).map(|i| 255 - (i % 7) as u8).collect();
        let mut bytes = encode_cifar10_record(3, &a);
        bytes.extend(encode_cifar10_record(9, &b));
        bytes
    }

    #[test]
    fn two_records_exact_pixels() {
        let (f, l) = parse_cifar10(&fixture()).unwrap();
        assert_eq!(l, vec![3, 9]);
        assert_eq!(f.len(), 2 * PIXELS);
        assert_eq!(f[0], 0.0);
        assert_eq!(f[255], 1.0);
        assert_eq!(f[1024], (1024 % 256) as f32 / 255.0);
        // second record, green plane, row 0 col 5
        assert_eq!(f[PIXELS + 1024 + 5], (255 - ((1024 + 5) % 7)) as f32 / 255.0);
    }

    #[test]
    fn truncated_and_bad_label() {
        let bytes = fixture();
        assert!(parse_cifar10(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = 10;
        assert!(parse_cifar10(&bad).is_err());
    }

    #[test]
    fn empty_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.bin");
        std::fs::write(&p, b"").unwrap();
        assert!(load_cifar10(&[p]).is_err());
    }
}
