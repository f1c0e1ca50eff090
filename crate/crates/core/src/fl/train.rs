use rand::seq::SliceRandom;

use super::{Strategy, TrainContext};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{Architecture, Mode};
use crate::optim::Optimizer;
use crate::params::ModelParams;
use crate::rng;
use crate::tensor::Tensor;

/// Norm regularizer inside the cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;

/// Result of one client's local training phase.
#[derive(Debug, Clone)]
pub struct LocalOutcome {
    pub params: ModelParams,
    /// Mean objective over all minibatches.
    pub mean_loss: f64,
    pub steps: usize,
    pub samples_seen: usize,
}

/// Records the contrastive loss: per-sample cross-entropy of the logits
/// `[cos(z, z_glob)/τ, cos(z, z_prev)/τ]` against the first column.
pub fn moon_loss_node(g: &mut Graph, z: Var, z_glob: Var, z_prev: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::config("moon.temperature", "must be positive"));
    }
    let pos = g.cosine_rows(z, z_glob, COSINE_EPS)?;
    let neg = g.cosine_rows(z, z_prev, COSINE_EPS)?;
    let pos = g.scale(pos, 1.0 / tau);
    let neg = g.scale(neg, 1.0 / tau);
    let logits = g.stack_cols(pos, neg)?;
    let m = g.shape(z)[0];
    g.cross_entropy(logits, &vec![0; m])
}

/// Contrastive loss of three `[m, d]` representation batches.
pub fn moon_loss(z: &Tensor, z_glob: &Tensor, z_prev: &Tensor, tau: f64) -> Result<f64> {
    let mut g = Graph::new();
    let z = g.constant(z.clone());
    let zg = g.constant(z_glob.clone());
    let zp = g.constant(z_prev.clone());
    let l = moon_loss_node(&mut g, z, zg, zp, tau)?;
    Ok(g.value(l).data()[0])
}

/// Eval-mode projected representation of a frozen parameter set.
pub(crate) fn frozen_representation(arch: &Architecture, params: &ModelParams, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let out = arch.forward(&mut g, &vars, xv, Mode::Eval)?;
    let z = arch.project(&mut g, &vars, out.features)?;
    Ok(g.value(z).clone())
}

/// Runs `client_epochs` shuffled passes over the shard starting from `start`.
///
/// `global` and `prev` are the frozen reference models of the contrastive
/// term; they are ignored unless the strategy is MOON with `μ > 0`.
pub fn local_train(
    ctx: &TrainContext<'_>,
    client_id: usize,
    shard_indices: &[usize],
    start: ModelParams,
    global: &ModelParams,
    prev: Option<&ModelParams>,
    round: usize,
) -> Result<LocalOutcome> {
    let cfg = ctx.cfg;
    if shard_indices.is_empty() {
        return Err(Error::ClientAborted {
            client: client_id,
            reason: "empty shard".into(),
        });
    }
    let abort = |e: Error| match e {
        Error::ClientAborted { .. } => e,
        other => Error::ClientAborted {
            client: client_id,
            reason: other.to_string(),
        },
    };
    let contrastive = cfg.strategy == Strategy::Moon && ctx.moon.mu != 0.0;
    let prev = prev.unwrap_or(global);
    let mut params = start;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.precision);
    let mut rng = rng::stream(cfg.seed, &[rng::tag::SHUFFLE, round as u64, client_id as u64]);
    let mut order = shard_indices.to_vec();
    let (mut loss_sum, mut steps, mut seen) = (0.0, 0usize, 0usize);
    for _ in 0..cfg.client_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, labels) = ctx.train.batch(chunk);
            let mut g = Graph::with_precision(cfg.precision);
            let vars = params.bind(&mut g, true);
            let xv = g.constant(x.clone());
            let out = ctx.arch.forward(&mut g, &vars, xv, Mode::Train).map_err(abort)?;
            let mut loss = g.cross_entropy(out.logits, &labels).map_err(abort)?;
            if contrastive {
                let z = ctx.arch.project(&mut g, &vars, out.features).map_err(abort)?;
                let zg = frozen_representation(ctx.arch, global, &x).map_err(abort)?;
                let zp = frozen_representation(ctx.arch, prev, &x).map_err(abort)?;
                let zg = g.constant(zg);
                let zp = g.constant(zp);
                let m = moon_loss_node(&mut g, z, zg, zp, ctx.moon.temperature).map_err(abort)?;
                let m = g.scale(m, ctx.moon.mu);
                loss = g.add(loss, m).map_err(abort)?;
            }
            let lv = g.value(loss).data()[0];
            if !lv.is_finite() {
                return Err(Error::ClientAborted {
                    client: client_id,
                    reason: format!("non-finite loss {lv} at step {steps}"),
                });
            }
            g.backward(loss).map_err(abort)?;
            params.zero_grad();
            params.accumulate_grads(&g, &vars);
            ctx.arch.apply_bn_updates(&g, &out, &mut params);
            opt.step(&mut params).map_err(abort)?;
            loss_sum += lv;
            steps += 1;
            seen += chunk.len();
        }
    }
    Ok(LocalOutcome {
        params,
        mean_loss: loss_sum / steps as f64,
        steps,
        samples_seen: seen,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_contrast_is_ln2() {
        let z = Tensor::new(vec![2, 3], vec![0.3, -1.0, 2.0, 0.0, 0.5, 0.1]).unwrap();
        let r = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -4.0, 0.2, 7.0]).unwrap();
        assert_eq!(moon_loss(&z, &r, &r, 0.5).unwrap(), std::f64::consts::LN_2);
    }

    #[test]
    fn aligned_versus_opposed() {
        let z = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let zg = Tensor::new(vec![1, 2], vec![2.0, 0.0]).unwrap();
        let zp = Tensor::new(vec![1, 2], vec![-3.0, 0.0]).unwrap();
        let expect = -(2f64.exp() / (2f64.exp() + (-2f64).exp())).ln();
        assert!((moon_loss(&z, &zg, &zp, 0.5).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 0.01815).abs() < 1e-5);
        assert!(moon_loss(&z, &zg, &zp, 0.0).is_err());
    }

    #[test]
    fn zero_vectors_stay_finite() {
        let z = Tensor::zeros(&[2, 4]);
        assert!(moon_loss(&z, &z, &z, 0.5).unwrap().is_finite());
    }
}
