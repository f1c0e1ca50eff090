//! Adaptive local aggregation.
//!
//! Before local training a client blends the incoming global model into its
//! previous local model element-wise:
//!
//! ```text
//! merged = A ⊙ global + (1 − A) ⊙ local      (layers ≥ start_layer)
//! merged = global                             (layers < start_layer, buffers)
//! ```
//!
//! which equals `local + (global − local) ⊙ A` and is exact at `A = 0` and
//! `A = 1`. `A` is fitted by gradient descent on the training loss over a
//! sample of the shard, clipped to `[0, 1]`, and persists across rounds.

use rand::seq::SliceRandom;

use super::TrainContext;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::Mode;
use crate::params::{ModelParams, ParamKind, ParamTensor};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AlaOutcome {
    pub merged: ModelParams,
    /// Passes over the sample; 0 when the weights are frozen.
    pub iterations: usize,
    pub converged: bool,
}

fn adaptive(p: &ParamTensor, start_layer: usize) -> bool {
    p.kind == ParamKind::Trainable && p.layer >= start_layer
}

/// All-ones weights for every adaptive tensor of `params`.
pub fn initial_ala_weights(params: &ModelParams, start_layer: usize) -> ModelParams {
    let v = params
        .iter()
        .filter(|p| adaptive(p, start_layer))
        .map(|p| ParamTensor::new(p.name.clone(), Tensor::full(p.value.shape(), 1.0), ParamKind::Buffer, p.layer))
        .collect();
    ModelParams::new(v).expect("names are unique")
}

/// Blends `global` into `local` with fixed weights.
pub fn ala_merge(
    local: &ModelParams,
    global: &ModelParams,
    weights: &ModelParams,
    start_layer: usize,
) -> Result<ModelParams> {
    local.check_same_layout(global)?;
    let mut out = global.clone();
    for (o, l) in out.iter_mut().zip(local.iter()) {
        if !adaptive(o, start_layer) {
            continue;
        }
        let a = weights
            .get(&o.name)
            .ok_or_else(|| Error::ParamMismatch(format!("no adaptive weights for `{}`", o.name)))?;
        if a.value.shape() != o.value.shape() {
            return Err(Error::ParamMismatch(format!("adaptive weights for `{}` have the wrong shape", o.name)));
        }
        for ((m, &lv), &av) in o.value.data_mut().iter_mut().zip(l.value.data()).zip(a.value.data()) {
            *m = av * *m + (1.0 - av) * lv;
        }
    }
    Ok(out)
}

/// Fits the weights in place and returns the merged start point.
pub fn ala_adapt(
    ctx: &TrainContext<'_>,
    client_id: usize,
    shard_indices: &[usize],
    local: &ModelParams,
    global: &ModelParams,
    weights: &mut ModelParams,
    round: usize,
) -> Result<AlaOutcome> {
    let cfg = ctx.ala;
    if shard_indices.is_empty() {
        return Err(Error::ClientAborted {
            client: client_id,
            reason: "empty shard".into(),
        });
    }
    if cfg.frozen {
        return Ok(AlaOutcome {
            merged: ala_merge(local, global, weights, cfg.start_layer)?,
            iterations: 0,
            converged: true,
        });
    }
    let take = ((cfg.sample_percent / 100.0 * shard_indices.len() as f64).ceil() as usize).clamp(1, shard_indices.len());
    let mut sample = shard_indices.to_vec();
    let mut r = rng::stream(ctx.cfg.seed, &[rng::tag::ALA, round as u64, client_id as u64]);
    sample.shuffle(&mut r);
    sample.truncate(take);
    sample.sort_unstable();

    // (param index, weight index) for adaptive tensors, with global − local
    let slots: Vec<(usize, usize, Vec<f64>)> = global
        .iter()
        .enumerate()
        .filter(|(_, p)| adaptive(p, cfg.start_layer))
        .map(|(i, p)| {
            let w = weights
                .index_of(&p.name)
                .ok_or_else(|| Error::ParamMismatch(format!("no adaptive weights for `{}`", p.name)))?;
            let diff = p.value.data().iter().zip(local.as_slice()[i].value.data()).map(|(g, l)| g - l).collect();
            Ok((i, w, diff))
        })
        .collect::<Result<_>>()?;
    let entries: usize = slots.iter().map(|s| s.2.len()).sum::<usize>().max(1);

    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        iterations += 1;
        let before = weights.clone();
        for chunk in sample.chunks(ctx.cfg.batch_size) {
            let merged = ala_merge(local, global, weights, cfg.start_layer)?;
            let (x, labels) = ctx.train.batch(chunk);
            let mut g = Graph::with_precision(ctx.cfg.precision);
            let vars = merged.bind(&mut g, true);
            let xv = g.constant(x);
            let out = ctx.arch.forward(&mut g, &vars, xv, Mode::Train)?;
            let loss = g.cross_entropy(out.logits, &labels)?;
            g.backward(loss)?;
            let mut wslice: Vec<&mut ParamTensor> = weights.iter_mut().collect();
            for (pi, wi, diff) in &slots {
                let Some(grad) = g.grad(vars[*pi]) else { continue };
                let a = wslice[*wi].value.data_mut();
                for ((av, gv), dv) in a.iter_mut().zip(grad).zip(diff) {
                    *av = (*av - cfg.learning_rate * gv * dv).clamp(0.0, 1.0);
                }
            }
        }
        let sq: f64 = weights
            .iter()
            .zip(before.iter())
            .flat_map(|(a, b)| a.value.data().iter().zip(b.value.data()).map(|(x, y)| (x - y) * (x - y)))
            .sum();
        let spread = (sq / entries as f64).sqrt();
        if spread < cfg.std_threshold {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("client {client_id}: adaptive aggregation hit the {}-iteration cap", cfg.max_iters);
    }
    Ok(AlaOutcome {
        merged: ala_merge(local, global, weights, cfg.start_layer)?,
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelSpec};

    fn spec() -> ModelSpec {
        let mut s = ModelSpec::tiny_mlp();
        s.input_shape = [3, 8, 8];
        s
    }

    #[test]
    fn frozen_extremes() {
        let l = build_model(&spec(), 1).unwrap().params;
        let g = build_model(&spec(), 2).unwrap().params;
        let ones = initial_ala_weights(&l, 1);
        assert!(ala_merge(&l, &g, &ones, 1).unwrap().values_bitwise_eq(&g));
        let mut zeros = ones.clone();
        zeros.iter_mut().for_each(|p| p.value.fill(0.0));
        let m = ala_merge(&l, &g, &zeros, 1).unwrap();
        for ((mp, lp), gp) in m.iter().zip(l.iter()).zip(g.iter()) {
            let expect = if mp.layer >= 1 { lp } else { gp };
            assert_eq!(mp.value, expect.value, "{}", mp.name);
        }
    }
}
