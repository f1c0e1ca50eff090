//! Shared fixtures for the kernel benchmarks.

use fedcka::cka::{gram_linear, ActivationMatrix, GramMatrix};
use fedcka::data::{generate_synthetic, LabeledDataset, SyntheticSpec};
use fedcka::model::{build_model, Model, ModelSpec};
use fedcka::params::ModelParams;
use fedcka::rng;
use fedcka::tensor::Tensor;

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    Tensor::randn(&[rows, cols], 1.0, &mut rng::stream(seed, &[]))
}

/// Linear Gram matrices of two random `n × d` activation matrices.
pub fn gram_pair(n: usize, d: usize) -> (GramMatrix, GramMatrix) {
    let g = |seed| {
        let a = ActivationMatrix::new("x", random_matrix(n, d, seed), 0).expect("valid activations");
        gram_linear(&a).expect("gram")
    };
    (g(1), g(2))
}

/// `count` perturbed copies of one model's parameters.
pub fn client_updates(spec: &ModelSpec, count: usize) -> Vec<(ModelParams, usize)> {
    let base = build_model(spec, 0).expect("model").params;
    (0..count)
        .map(|c| {
            let mut p = base.clone();
            let mut r = rng::stream(c as u64, &[]);
            for t in p.iter_mut() {
                let noise = Tensor::randn(t.value.shape(), 1e-2, &mut r);
                for (v, n) in t.value.data_mut().iter_mut().zip(noise.data()) {
                    *v += n;
                }
            }
            (p, 100 + c)
        })
        .collect()
}

/// A model with a matching synthetic training set.
pub struct TrainFixture {
    pub model: Model,
    pub data: LabeledDataset,
}

pub fn train_fixture(spec: ModelSpec) -> TrainFixture {
    let mut ds = SyntheticSpec::new(spec.num_classes, 4, 7);
    ds.shape = spec.input_shape;
    TrainFixture {
        model: build_model(&spec, 0).expect("model"),
        data: generate_synthetic(&ds).expect("synthetic data"),
    }
}
