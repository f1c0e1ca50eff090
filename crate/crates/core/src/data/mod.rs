//! Labeled image datasets, CIFAR-10 ingestion, a synthetic generator and
//! non-IID label-skew partitioning.

mod cifar;
mod partition;
mod synthetic;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub use cifar::{encode_cifar10_record, load_cifar10, parse_cifar10, CIFAR10_RECORD_BYTES};
pub use partition::{partition, partition_labels, ClientShard, PartitionSpec, Scenario};
pub use synthetic::{dump_synthetic, generate_synthetic, load_synthetic, SyntheticSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Cifar10Binary,
    Synthetic,
}

/// Images stored contiguously as `f32` in `[0, 1]`, one label per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Vec<f32>,
    labels: Vec<usize>,
    sample_shape: [usize; 3],
    num_classes: usize,
    provenance: Provenance,
}

impl LabeledDataset {
    pub fn new(
        features: Vec<f32>,
        labels: Vec<usize>,
        sample_shape: [usize; 3],
        num_classes: usize,
        provenance: Provenance,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Dataset("num_classes must be at least 2".into()));
        }
        let per: usize = sample_shape.iter().product();
        if features.len() != per * labels.len() {
            return Err(Error::Dataset(format!(
                "{} feature values for {} samples of {per}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label: l,
                classes: num_classes,
            });
        }
        if features.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Dataset("feature values must lie in [0, 1]".into()));
        }
        Ok(Self {
            features,
            labels,
            sample_shape,
            num_classes,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn sample_shape(&self) -> [usize; 3] {
        self.sample_shape
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn features(&self, i: usize) -> &[f32] {
        let per = self.sample_len();
        &self.features[i * per..(i + 1) * per]
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    /// `[m, C, H, W]` tensor plus labels for the given sample indices.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let per = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend(self.features(i).iter().map(|&v| v as f64));
        }
        let [c, h, w] = self.sample_shape;
        let t = Tensor::new(vec![indices.len(), c, h, w], data).expect("batch shape");
        (t, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        let per = self.sample_len();
        let mut features = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            features.extend_from_slice(self.features(i));
        }
        LabeledDataset {
            features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            sample_shape: self.sample_shape,
            num_classes: self.num_classes,
            provenance: self.provenance,
        }
    }

    /// Indices of samples whose label is in `labels`.
    pub fn indices_with_labels(&self, labels: &[usize]) -> Vec<usize> {
        (0..self.len()).filter(|&i| labels.contains(&self.labels[i])).collect()
    }

    /// Splits off a class-stratified holdout of `per_class` samples per class.
    pub fn split_holdout(&self, per_class: usize, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
        let mut rng = rng::stream(seed, &[rng::tag::HOLDOUT]);
        let mut held = vec![false; self.len()];
        for class in 0..self.num_classes {
            let mut idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == class).collect();
            if idx.len() < per_class {
                return Err(Error::Dataset(format!(
                    "class {class} has {} samples; holdout needs {per_class}",
                    idx.len()
                )));
            }
            idx.shuffle(&mut rng);
            for &i in &idx[..per_class] {
                held[i] = true;
            }
        }
        let train: Vec<usize> = (0..self.len()).filter(|&i| !held[i]).collect();
        let hold: Vec<usize> = (0..self.len()).filter(|&i| held[i]).collect();
        Ok((self.subset(&train), self.subset(&hold)))
    }

    /// Fixed-size random holdout drawn without stratification.
    pub fn sample_subset(&self, size: usize, seed: u64) -> LabeledDataset {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut rng::stream(seed, &[rng::tag::HOLDOUT]));
        idx.truncate(size);
        idx.sort_unstable();
        self.subset(&idx)
    }

    pub(crate) fn raw_features(&self) -> &[f32] {
        &self.features
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_labels_and_ranges() {
        assert!(LabeledDataset::new(vec![0.5; 2], vec![0, 3], [1, 1, 1], 3, Provenance::Synthetic).is_err());
        assert!(LabeledDataset::new(vec![1.5; 2], vec![0, 1], [1, 1, 1], 3, Provenance::Synthetic).is_err());
        assert!(LabeledDataset::new(vec![0.5; 2], vec![0, 1], [1, 1, 1], 1, Provenance::Synthetic).is_err());
    }

    #[test]
    fn stratified_holdout() {
        let ds = generate_synthetic(&SyntheticSpec {
            per_class: 12,
            ..SyntheticSpec::small(4, 1)
        })
        .unwrap();
        let (train, hold) = ds.split_holdout(3, 5).unwrap();
        assert_eq!(hold.class_counts(), vec![3; 4]);
        assert_eq!(train.class_counts(), vec![9; 4]);
        assert!(ds.split_holdout(13, 5).is_err());
    }
}
