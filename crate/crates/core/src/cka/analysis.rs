//! Client-vs-server same-layer matrices, within-model layer×layer matrices
//! and model×model matrices.
//!
//! Gram matrices and their self-HSIC terms are computed once per
//! (model, probe, layer) and reused for every pairing.

use rayon::prelude::*;

use super::export::CkaMatrix;
use super::hsic::{gram_linear, hsic1_unbiased, CkaAccumulator, GramMatrix};
use super::probe::ProbeBatch;
use crate::error::{Error, Result};
use crate::model::Model;

/// Gram matrix plus `HSIC₁(K, K)`.
struct Kernel {
    gram: GramMatrix,
    self_term: f64,
}

/// `kernels[layer][probe]` for one model.
fn kernels(model: &Model, probes: &[ProbeBatch], layers: &[&str]) -> Result<Vec<Vec<Kernel>>> {
    let mut out: Vec<Vec<Kernel>> = layers.iter().map(|_| Vec::with_capacity(probes.len())).collect();
    for (b, probe) in probes.iter().enumerate() {
        let (_, acts) = model.forward_with_capture(&probe.inputs, layers)?;
        for (slot, mut act) in out.iter_mut().zip(acts) {
            act.minibatch_index = b;
            let gram = gram_linear(&act)?;
            let self_term = hsic1_unbiased(&gram, &gram)?;
            slot.push(Kernel { gram, self_term });
        }
    }
    Ok(out)
}

fn pair(a: &[Kernel], b: &[Kernel]) -> Result<super::CkaScore> {
    let mut acc = CkaAccumulator::new();
    for (x, y) in a.iter().zip(b) {
        acc.add_terms(hsic1_unbiased(&x.gram, &y.gram)?, x.self_term, y.self_term);
    }
    acc.finalize()
}

fn check_specs<'a>(reference: &Model, others: impl IntoIterator<Item = &'a Model>) -> Result<()> {
    for m in others {
        if m.spec() != reference.spec() {
            return Err(Error::ParamMismatch(format!(
                "model spec {} differs from {}",
                m.spec().arch.name(),
                reference.spec().arch.name()
            )));
        }
        reference.params.check_same_layout(&m.params)?;
    }
    Ok(())
}

fn check_probes(probes: &[ProbeBatch]) -> Result<()> {
    if probes.is_empty() {
        Err(Error::Cka("no probe minibatches".into()))
    } else {
        Ok(())
    }
}

/// Rows are clients, columns are `layers` in the given order.
pub fn same_layer_similarity(
    clients: &[Model],
    server: &Model,
    probes: &[ProbeBatch],
    layers: &[&str],
) -> Result<CkaMatrix> {
    check_probes(probes)?;
    check_specs(server, clients)?;
    let server_k = kernels(server, probes, layers)?;
    let rows = clients
        .par_iter()
        .map(|c| {
            let ck = kernels(c, probes, layers)?;
            ck.iter().zip(&server_k).map(|(a, b)| pair(a, b)).collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CkaMatrix::new(
        (0..clients.len()).map(|i| format!("client{i}")).collect(),
        layers.iter().map(|s| s.to_string()).collect(),
        rows.into_iter().flatten().collect(),
        0,
    ))
}

/// Entry `(i, j)` compares model `i` of `models_a` with model `j` of
/// `models_b` at one capture point.
pub fn cross_model_similarity(
    models_a: &[Model],
    models_b: &[Model],
    layer: &str,
    probes: &[ProbeBatch],
) -> Result<CkaMatrix> {
    check_probes(probes)?;
    let Some(reference) = models_a.first().or(models_b.first()) else {
        return Err(Error::Cka("no models to compare".into()));
    };
    check_specs(reference, models_a.iter().chain(models_b))?;
    let layers = [layer];
    let ka = models_a
        .par_iter()
        .map(|m| kernels(m, probes, &layers).map(|mut v| v.remove(0)))
        .collect::<Result<Vec<_>>>()?;
    let kb = models_b
        .par_iter()
        .map(|m| kernels(m, probes, &layers).map(|mut v| v.remove(0)))
        .collect::<Result<Vec<_>>>()?;
    let values = ka
        .par_iter()
        .map(|a| kb.iter().map(|b| pair(a, b)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    Ok(CkaMatrix::new(
        (0..models_a.len()).map(|i| format!("a{i}")).collect(),
        (0..models_b.len()).map(|j| format!("b{j}")).collect(),
        values.into_iter().flatten().collect(),
        0,
    ))
}

/// Layer×layer similarity within one model.
pub fn layer_similarity(model: &Model, probes: &[ProbeBatch], layers: &[&str]) -> Result<CkaMatrix> {
    check_probes(probes)?;
    let k = kernels(model, probes, layers)?;
    let mut values = Vec::with_capacity(layers.len() * layers.len());
    for a in &k {
        for b in &k {
            values.push(pair(a, b)?);
        }
    }
    let labels: Vec<String> = layers.iter().map(|s| s.to_string()).collect();
    Ok(CkaMatrix::new(labels.clone(), labels, values, 0))
}
