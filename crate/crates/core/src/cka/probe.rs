use rand::seq::index::sample;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// One class-stratified probe minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeBatch {
    /// Indices into the validation set, grouped by class in ascending order.
    pub indices: Vec<usize>,
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

/// `k` minibatches of `per_class` samples from every class. Each minibatch
/// draws without replacement within itself; different minibatches are
/// drawn independently.
pub fn build_probe_minibatches(
    validation: &LabeledDataset,
    per_class: usize,
    k: usize,
    seed: u64,
) -> Result<Vec<ProbeBatch>> {
    if per_class == 0 || k == 0 {
        return Err(Error::Cka("probe per_class and k must be positive".into()));
    }
    let classes = validation.num_classes();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in validation.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    if let Some((c, pool)) = by_class.iter().enumerate().find(|(_, p)| p.len() < per_class) {
        return Err(Error::Cka(format!(
            "class {c} has {} validation samples; probes need {per_class}",
            pool.len()
        )));
    }
    if per_class * classes < super::MIN_EXAMPLES {
        return Err(Error::Cka(format!(
            "probe minibatch of {} examples is below the estimator minimum of {}",
            per_class * classes,
            super::MIN_EXAMPLES
        )));
    }
    Ok((0..k)
        .map(|b| {
            let mut r = rng::stream(seed, &[rng::tag::PROBE, b as u64]);
            let indices: Vec<usize> = by_class
                .iter()
                .flat_map(|pool| {
                    let mut pick: Vec<usize> = sample(&mut r, pool.len(), per_class).into_iter().map(|j| pool[j]).collect();
                    pick.sort_unstable();
                    pick
                })
                .collect();
            let (inputs, labels) = validation.batch(&indices);
            ProbeBatch {
                indices,
                inputs,
                labels,
            }
        })
        .collect())
}
