//! Linear Gram matrices, the unbiased HSIC estimator and the minibatch
//! CKA accumulator.

use crate::error::{Error, Result};
use crate::tensor::{gemm_nt, Tensor};

/// Smallest minibatch the unbiased estimator accepts (its `n(n-3)` denominator).
pub const MIN_EXAMPLES: usize = 4;

/// One layer's activations over a probe minibatch, flattened to `m × p`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMatrix {
    pub layer_name: String,
    pub values: Tensor,
    pub minibatch_index: usize,
}

impl ActivationMatrix {
    pub fn new(layer_name: &str, values: Tensor, minibatch_index: usize) -> Result<Self> {
        if values.shape().len() != 2 {
            return Err(Error::Cka(format!(
                "activation matrix must be rank 2, got {:?}",
                values.shape()
            )));
        }
        if values.rows() < MIN_EXAMPLES {
            return Err(Error::Cka(format!(
                "activation matrix for `{layer_name}` has {} rows; need at least {MIN_EXAMPLES}",
                values.rows()
            )));
        }
        if !values.is_finite() {
            return Err(Error::NonFinite {
                op: format!("activations of `{layer_name}`"),
            });
        }
        Ok(Self {
            layer_name: layer_name.to_string(),
            values,
            minibatch_index,
        })
    }

    pub fn examples(&self) -> usize {
        self.values.rows()
    }
}

/// Symmetric `m × m` matrix `X·Xᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    n: usize,
    values: Vec<f64>,
}

impl GramMatrix {
    /// Wraps an arbitrary square matrix, e.g. a hand-built kernel.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 2 || s[0] != s[1] {
            return Err(Error::Cka(format!("Gram matrix must be square, got {s:?}")));
        }
        if s[0] < MIN_EXAMPLES {
            return Err(Error::Cka(format!("Gram matrix of size {} < {MIN_EXAMPLES}", s[0])));
        }
        Ok(Self {
            n: s[0],
            values: t.data().to_vec(),
        })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.n, self.n], self.values.clone()).expect("square")
    }
}

/// `K = X·Xᵀ`.
pub fn gram_linear(x: &ActivationMatrix) -> Result<GramMatrix> {
    let m = x.values.rows();
    if m < MIN_EXAMPLES {
        return Err(Error::Cka(format!("{m} examples; need at least {MIN_EXAMPLES}")));
    }
    let p = x.values.row_len();
    let mut k = vec![0.0; m * m];
    gemm_nt(x.values.data(), x.values.data(), &mut k, m, p, m);
    // exact symmetry
    for i in 0..m {
        for j in 0..i {
            k[j * m + i] = k[i * m + j];
        }
    }
    Ok(GramMatrix { n: m, values: k })
}

/// Unbiased HSIC estimator of two `n × n` Gram matrices, `n ≥ 4`.
pub fn hsic1_unbiased(k: &GramMatrix, l: &GramMatrix) -> Result<f64> {
    hsic1_with_cross_coefficient(k, l, 2.0)
}

/// The estimator with the `1ᵀK̃L̃1` coefficient numerator exposed, so the
/// verification suite can check that it detects a perturbed coefficient.
#[doc(hidden)]
pub fn hsic1_with_cross_coefficient(k: &GramMatrix, l: &GramMatrix, cross: f64) -> Result<f64> {
    let n = k.n;
    if n != l.n {
        return Err(Error::Cka(format!("Gram sizes differ: {n} vs {}", l.n)));
    }
    if n < MIN_EXAMPLES {
        return Err(Error::Cka(format!("{n} examples; need at least {MIN_EXAMPLES}")));
    }
    let (kv, lv) = (&k.values, &l.values);
    let mut trace = 0.0;
    let mut sum_k = 0.0;
    let mut sum_l = 0.0;
    let mut col_k = vec![0.0; n];
    let mut row_l = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let kij = kv[i * n + j];
            let lij = lv[i * n + j];
            trace += kij * lv[j * n + i];
            sum_k += kij;
            sum_l += lij;
            col_k[j] += kij;
            row_l[i] += lij;
        }
    }
    let cross_term: f64 = col_k.iter().zip(&row_l).map(|(a, b)| a * b).sum();
    let nf = n as f64;
    let value = (trace + sum_k * sum_l / ((nf - 1.0) * (nf - 2.0)) - cross / (nf - 2.0) * cross_term)
        / (nf * (nf - 3.0));
    Ok(value)
}

/// Finalized CKA, or `Undefined` when a denominator mean is not positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CkaScore {
    Value(f64),
    Undefined,
}

impl CkaScore {
    pub fn value(self) -> Option<f64> {
        match self {
            CkaScore::Value(v) => Some(v),
            CkaScore::Undefined => None,
        }
    }
}

/// Running sums of the three HSIC terms over `k` minibatches.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CkaAccumulator {
    pub k: usize,
    pub sum_xy: f64,
    pub sum_xx: f64,
    pub sum_yy: f64,
}

impl CkaAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn accumulate(&mut self, x: &ActivationMatrix, y: &ActivationMatrix) -> Result<()> {
        if x.examples() != y.examples() {
            return Err(Error::Cka(format!(
                "minibatch sizes differ: {} vs {}",
                x.examples(),
                y.examples()
            )));
        }
        self.accumulate_grams(&gram_linear(x)?, &gram_linear(y)?)
    }

    pub fn accumulate_grams(&mut self, k: &GramMatrix, l: &GramMatrix) -> Result<()> {
        let xy = hsic1_unbiased(k, l)?;
        let xx = hsic1_unbiased(k, k)?;
        let yy = hsic1_unbiased(l, l)?;
        self.add_terms(xy, xx, yy);
        Ok(())
    }

    /// Adds precomputed `(HSIC(K,L), HSIC(K,K), HSIC(L,L))`.
    pub fn add_terms(&mut self, xy: f64, xx: f64, yy: f64) {
        self.k += 1;
        self.sum_xy += xy;
        self.sum_xx += xx;
        self.sum_yy += yy;
    }

    pub fn finalize(&self) -> Result<CkaScore> {
        if self.k == 0 {
            return Err(Error::Cka("no minibatches accumulated".into()));
        }
        let k = self.k as f64;
        let (xy, xx, yy) = (self.sum_xy / k, self.sum_xx / k, self.sum_yy / k);
        if !(xx > 0.0 && yy > 0.0) {
            return Ok(CkaScore::Undefined);
        }
        Ok(CkaScore::Value(xy / (xx.sqrt() * yy.sqrt())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn act(t: Tensor) -> ActivationMatrix {
        ActivationMatrix::new("x", t, 0).unwrap()
    }

    #[test]
    fn gram_identity_and_zero() {
        let k = gram_linear(&act(Tensor::eye(4))).unwrap();
        assert_eq!(k.to_tensor(), Tensor::eye(4));
        let z = gram_linear(&act(Tensor::zeros(&[4, 3]))).unwrap();
        assert!(z.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gram_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[6, 3], 1.0, &mut rng);
        let k = gram_linear(&act(x.clone())).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let mut s = 0.0;
                for p in 0..3 {
                    s += x.at2(i, p) * x.at2(j, p);
                }
                assert!((k.values()[i * 6 + j] - s).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn small_inputs_rejected() {
        assert!(ActivationMatrix::new("x", Tensor::zeros(&[3, 2]), 0).is_err());
        let k = GramMatrix::from_tensor(&Tensor::eye(4)).unwrap();
        let l = GramMatrix::from_tensor(&Tensor::eye(5)).unwrap();
        assert!(hsic1_unbiased(&k, &l).is_err());
        assert!(GramMatrix::from_tensor(&Tensor::eye(3)).is_err());
    }

    #[test]
    fn zero_kernel_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = GramMatrix::from_tensor(&Tensor::zeros(&[6, 6])).unwrap();
        let l = gram_linear(&act(Tensor::randn(&[6, 2], 1.0, &mut rng))).unwrap();
        assert_eq!(hsic1_unbiased(&k, &l).unwrap(), 0.0);
    }

    /// Hand evaluation for K = L = c·11ᵀ, n = 4: tr = 12c², product term
    /// 144c²/6 = 24c², cross term 36c²; total 0.
    #[test]
    fn constant_kernel_is_independent() {
        let c = 1.7;
        let k = GramMatrix::from_tensor(&Tensor::full(&[4, 4], c)).unwrap();
        assert!(hsic1_unbiased(&k, &k).unwrap().abs() < 1e-12);
    }

    #[test]
    fn empty_accumulator_errors() {
        assert!(CkaAccumulator::new().finalize().is_err());
    }

    #[test]
    fn zero_activations_are_undefined() {
        let mut acc = CkaAccumulator::new();
        let z = act(Tensor::zeros(&[5, 2]));
        acc.accumulate(&z, &z).unwrap();
        assert_eq!(acc.finalize().unwrap(), CkaScore::Undefined);
    }

    #[test]
    fn self_pair_sums_equal() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut acc = CkaAccumulator::new();
        for _ in 0..3 {
            let x = act(Tensor::randn(&[7, 4], 1.0, &mut rng));
            acc.accumulate(&x, &x).unwrap();
            assert_eq!(acc.sum_xy, acc.sum_xx);
            assert_eq!(acc.sum_xx, acc.sum_yy);
        }
    }

    #[test]
    fn identical_minibatches_scale_linearly() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = act(Tensor::randn(&[8, 5], 1.0, &mut rng));
        let y = act(Tensor::randn(&[8, 3], 1.0, &mut rng));
        let mut one = CkaAccumulator::new();
        one.accumulate(&x, &y).unwrap();
        let mut many = CkaAccumulator::new();
        for _ in 0..4 {
            many.accumulate(&x, &y).unwrap();
        }
        assert!((many.sum_xy - 4.0 * one.sum_xy).abs() < 1e-12 * one.sum_xy.abs().max(1.0));
        assert!((many.sum_xx - 4.0 * one.sum_xx).abs() < 1e-12 * one.sum_xx.abs().max(1.0));
    }

    #[test]
    fn mismatched_minibatch_sizes() {
        let mut acc = CkaAccumulator::new();
        let x = act(Tensor::eye(4));
        let y = act(Tensor::eye(5));
        assert!(acc.accumulate(&x, &y).is_err());
    }
}
