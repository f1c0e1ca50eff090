use crate::error::{Error, Result};
use crate::exact::ExactSum;
use crate::params::{ModelParams, ParamTensor};

/// `Dₙ / D` for every client.
pub fn aggregation_weights(sizes: &[usize]) -> Result<Vec<f64>> {
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(Error::Aggregation("total sample count is zero".into()));
    }
    Ok(sizes.iter().map(|&d| d as f64 / total as f64).collect())
}

/// Sample-size-weighted average of parameter sets, matched by name.
///
/// Every element is computed from the exact numerator `Σ Dₙ·θₙ` followed by
/// a corrected division by `D`, so the result does not depend on client
/// order and identical inputs are returned bit-for-bit. Buffers (batch-norm
/// statistics) are averaged like every other tensor.
pub fn fedavg_aggregate(updates: &[(&ModelParams, usize)]) -> Result<ModelParams> {
    let Some(&(first, _)) = updates.first() else {
        return Err(Error::Aggregation("no updates to aggregate".into()));
    };
    for (p, _) in &updates[1..] {
        first.check_same_layout(p)?;
    }
    let total: u64 = updates.iter().map(|&(_, d)| d as u64).sum();
    if total == 0 {
        return Err(Error::Aggregation("total sample count is zero".into()));
    }
    let d = total as f64;
    let mut out = Vec::with_capacity(first.len());
    let mut acc = ExactSum::new();
    for (t, tensor) in first.iter().enumerate() {
        let mut value = tensor.value.clone();
        for (e, slot) in value.data_mut().iter_mut().enumerate() {
            acc.clear();
            for &(p, dn) in updates {
                acc.add_product(dn as f64, p.as_slice()[t].value.data()[e]);
            }
            let q0 = acc.value() / d;
            acc.add_product(-q0, d);
            *slot = q0 + acc.value() / d;
        }
        out.push(ParamTensor::new(tensor.name.clone(), value, tensor.kind, tensor.layer));
    }
    ModelParams::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn params(vals: &[f64]) -> ModelParams {
        ModelParams::new(vec![ParamTensor::new(
            "w",
            Tensor::new(vec![vals.len()], vals.to_vec()).unwrap(),
            ParamKind::Trainable,
            0,
        )])
        .unwrap()
    }

    #[test]
    fn midpoint_and_fixed_point() {
        let a = params(&[1.0, 0.25, -3.0]);
        let b = params(&[3.0, 0.75, 5.0]);
        let m = fedavg_aggregate(&[(&a, 10), (&b, 10)]).unwrap();
        assert_eq!(m.as_slice()[0].value.data(), &[2.0, 0.5, 1.0]);
        let same = fedavg_aggregate(&[(&a, 3), (&a, 7), (&a, 11)]).unwrap();
        assert!(same.values_bitwise_eq(&a));
    }

    #[test]
    fn errors() {
        let a = params(&[1.0]);
        let b = params(&[1.0, 2.0]);
        assert!(fedavg_aggregate(&[(&a, 1), (&b, 1)]).is_err());
        assert!(fedavg_aggregate(&[(&a, 0)]).is_err());
        assert!(fedavg_aggregate(&[]).is_err());
        assert!(aggregation_weights(&[0, 0]).is_err());
    }

    proptest! {
        #[test]
        fn weights_sum_to_one(sizes in prop::collection::vec(0usize..10_000, 1..100)) {
            prop_assume!(sizes.iter().sum::<usize>() > 0);
            let w = aggregation_weights(&sizes).unwrap();
            prop_assert!((crate::exact::fsum(w) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn linearity(vals in prop::collection::vec(-10.0f64..10.0, 3), alpha in -4.0f64..4.0) {
            let ps: Vec<ModelParams> = vals.iter().map(|&v| params(&[v])).collect();
            let scaled: Vec<ModelParams> = vals.iter().map(|&v| params(&[alpha * v])).collect();
            let sizes = [5usize, 9, 2];
            let a: Vec<_> = ps.iter().zip(sizes).collect();
            let b: Vec<_> = scaled.iter().zip(sizes).collect();
            let x = fedavg_aggregate(&a).unwrap().as_slice()[0].value.data()[0];
            let y = fedavg_aggregate(&b).unwrap().as_slice()[0].value.data()[0];
            prop_assert!((alpha * x - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
    }
}
