use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::params::{ParamKind, ParamTensor};
use crate::tensor::Tensor;

/// Normal samples rejected outside ±2 standard deviations.
pub(crate) fn trunc_normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// He-normal scaled by fan-in.
pub(crate) fn fan_in_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut R) -> Tensor {
    Tensor::randn(shape, gain * (1.0 / fan_in as f64).sqrt(), rng)
}

/// Collects parameters in creation order.
pub(crate) struct ParamBuilder {
    pub params: Vec<ParamTensor>,
}

impl ParamBuilder {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor, layer: usize) {
        self.params
            .push(ParamTensor::new(name, value, ParamKind::Trainable, layer));
    }

    pub fn buffer(&mut self, name: impl Into<String>, value: Tensor, layer: usize) {
        self.params.push(ParamTensor::new(name, value, ParamKind::Buffer, layer));
    }

    pub fn layer_norm(&mut self, prefix: &str, d: usize, layer: usize) {
        self.push(format!("{prefix}.gamma"), Tensor::full(&[d], 1.0), layer);
        self.push(format!("{prefix}.beta"), Tensor::zeros(&[d]), layer);
    }

    pub fn batch_norm(&mut self, prefix: &str, c: usize, layer: usize) {
        self.push(format!("{prefix}.gamma"), Tensor::full(&[c], 1.0), layer);
        self.push(format!("{prefix}.beta"), Tensor::zeros(&[c]), layer);
        self.buffer(format!("{prefix}.running_mean"), Tensor::zeros(&[c]), layer);
        self.buffer(format!("{prefix}.running_var"), Tensor::full(&[c], 1.0), layer);
    }

    pub fn linear(&mut self, prefix: &str, din: usize, dout: usize, w: Tensor, layer: usize) {
        debug_assert_eq!(w.shape(), [din, dout]);
        self.push(format!("{prefix}.w"), w, layer);
        self.push(format!("{prefix}.b"), Tensor::zeros(&[dout]), layer);
    }
}
