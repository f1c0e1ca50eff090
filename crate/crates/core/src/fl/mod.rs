//! Federated rounds: broadcast, optional adaptive local aggregation, local
//! training, sample-size-weighted aggregation and evaluation.

mod aggregate;
mod ala;
mod metrics;
mod train;

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClientShard, LabeledDataset};
use crate::error::{Error, Result};
use crate::graph::{Graph, Precision};
use crate::model::{Architecture, Mode, ModelSpec};
use crate::optim::OptimizerConfig;
use crate::params::ModelParams;

pub use aggregate::{aggregation_weights, fedavg_aggregate};
pub use ala::{ala_adapt, ala_merge, initial_ala_weights, AlaOutcome};
pub use metrics::{metrics_rows, METRICS_HEADER, METRICS_SCHEMA_VERSION};
pub use train::{local_train, moon_loss, moon_loss_node, LocalOutcome, COSINE_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    FedAvg,
    Moon,
    FedAla,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::FedAvg => "fedavg",
            Strategy::Moon => "moon",
            Strategy::FedAla => "fedala",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlConfig {
    pub rounds: usize,
    pub client_epochs: usize,
    pub batch_size: usize,
    pub strategy: Strategy,
    pub optimizer: OptimizerConfig,
    pub precision: Precision,
    pub seed: u64,
    /// Evaluate every client model after training (costs one pass over the
    /// validation set per client).
    pub client_eval: bool,
}

impl FlConfig {
    /// 100 rounds, 1 client epoch, batch 32, with the optimizer default for
    /// the architecture family.
    pub fn for_spec(spec: &ModelSpec) -> Self {
        Self {
            rounds: 100,
            client_epochs: 1,
            batch_size: 32,
            strategy: Strategy::FedAvg,
            optimizer: if spec.arch.is_transformer() {
                OptimizerConfig::adamw_default()
            } else {
                OptimizerConfig::sgd_default()
            },
            precision: Precision::F64,
            seed: 0,
            client_eval: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (k, v) in [
            ("fl.rounds", self.rounds),
            ("fl.client_epochs", self.client_epochs),
            ("fl.batch_size", self.batch_size),
        ] {
            if v == 0 {
                return Err(Error::config(k, "must be positive"));
            }
        }
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MoonConfig {
    pub temperature: f64,
    pub mu: f64,
}

impl Default for MoonConfig {
    fn default() -> Self {
        Self {
            temperature: 0.5,
            mu: 5.0,
        }
    }
}

impl MoonConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::config("moon.temperature", "must be positive"));
        }
        if !(self.mu >= 0.0) {
            return Err(Error::config("moon.mu", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlaConfig {
    /// Percentage of the shard used to fit the weights, in `(0, 100]`.
    pub sample_percent: f64,
    /// Layers with a smaller ordering index are copied from the global model.
    pub start_layer: usize,
    /// Convergence threshold on the RMS change of the weights over one pass.
    pub std_threshold: f64,
    pub learning_rate: f64,
    pub max_iters: usize,
    /// Keep the weights at their current values (all ones initially).
    pub frozen: bool,
}

impl Default for AlaConfig {
    fn default() -> Self {
        Self {
            sample_percent: 100.0,
            start_layer: 1,
            std_threshold: 0.05,
            learning_rate: 1.0,
            max_iters: 50,
            frozen: false,
        }
    }
}

impl AlaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sample_percent > 0.0 && self.sample_percent <= 100.0) {
            return Err(Error::config("ala.sample_percent", "must lie in (0, 100]"));
        }
        if !(self.std_threshold > 0.0) {
            return Err(Error::config("ala.std_threshold", "must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("ala.learning_rate", "must be positive"));
        }
        if self.max_iters == 0 {
            return Err(Error::config("ala.max_iters", "must be positive"));
        }
        Ok(())
    }
}

/// Borrowed inputs shared by every client in a round.
#[derive(Clone, Copy)]
pub struct TrainContext<'a> {
    pub arch: &'a Architecture,
    pub train: &'a LabeledDataset,
    pub validation: &'a LabeledDataset,
    pub cfg: &'a FlConfig,
    pub moon: &'a MoonConfig,
    pub ala: &'a AlaConfig,
}

/// Per-client state carried across rounds.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: usize,
    pub shard: ClientShard,
    /// Model after the last local training (FedALA).
    pub local_params: Option<ModelParams>,
    /// Snapshot taken at the end of the last local training (MOON).
    pub prev_round_params: Option<ModelParams>,
    /// Adaptive aggregation weights in `[0, 1]` (FedALA).
    pub ala_weights: Option<ModelParams>,
}

impl ClientState {
    /// Fresh state: local and previous models start at `initial`.
    pub fn new(shard: ClientShard, initial: &ModelParams, strategy: Strategy, ala: &AlaConfig) -> Self {
        let fedala = strategy == Strategy::FedAla;
        Self {
            client_id: shard.client_id,
            shard,
            local_params: fedala.then(|| initial.clone()),
            prev_round_params: (strategy == Strategy::Moon).then(|| initial.clone()),
            ala_weights: fedala.then(|| initial_ala_weights(initial, ala.start_layer)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientReport {
    pub client_id: usize,
    /// Mean training objective; `None` if the client failed.
    pub loss: Option<f64>,
    /// Accuracy on validation samples whose label is in the client's window.
    pub local_accuracy: Option<f64>,
    /// Accuracy on the whole validation set.
    pub global_accuracy: Option<f64>,
    pub samples: usize,
    pub steps: usize,
    pub ala_iterations: Option<usize>,
    pub wall_ms: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub clients: Vec<ClientReport>,
    pub server_loss: f64,
    pub server_accuracy: f64,
    /// `Σ Dₙ` over the clients that were aggregated.
    pub aggregated_samples: usize,
    pub wall_ms: f64,
    pub seed: u64,
}

/// Mean cross-entropy and argmax accuracy (ties go to the lowest class index).
pub fn evaluate_indices(
    arch: &Architecture,
    params: &ModelParams,
    dataset: &LabeledDataset,
    indices: &[usize],
) -> Result<(f64, f64)> {
    if indices.is_empty() {
        return Err(Error::Dataset("evaluation set is empty".into()));
    }
    const CHUNK: usize = 250;
    let (mut loss, mut correct) = (0.0, 0usize);
    for chunk in indices.chunks(CHUNK) {
        let (x, labels) = dataset.batch(chunk);
        let mut g = Graph::new();
        let vars = params.bind(&mut g, false);
        let xv = g.constant(x);
        let out = arch.forward(&mut g, &vars, xv, Mode::Eval)?;
        let ce = g.cross_entropy(out.logits, &labels)?;
        loss += g.value(ce).data()[0] * chunk.len() as f64;
        let logits = g.value(out.logits);
        let c = logits.row_len();
        for (r, &l) in labels.iter().enumerate() {
            let row = &logits.data()[r * c..(r + 1) * c];
            let mut best = 0;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            correct += usize::from(best == l);
        }
    }
    let n = indices.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Accuracy over a whole dataset.
pub fn evaluate(arch: &Architecture, params: &ModelParams, dataset: &LabeledDataset) -> Result<f64> {
    let idx: Vec<usize> = (0..dataset.len()).collect();
    Ok(evaluate_indices(arch, params, dataset, &idx)?.1)
}

struct ClientResult {
    report: ClientReport,
    params: Option<ModelParams>,
}

fn client_round(ctx: &TrainContext<'_>, state: &mut ClientState, global: &ModelParams, round: usize) -> ClientResult {
    let t0 = Instant::now();
    let id = state.client_id;
    let mut report = ClientReport {
        client_id: id,
        loss: None,
        local_accuracy: None,
        global_accuracy: None,
        samples: state.shard.size(),
        steps: 0,
        ala_iterations: None,
        wall_ms: 0.0,
        error: None,
    };
    let result = (|| -> Result<(LocalOutcome, Option<ModelParams>)> {
        let mut new_weights = None;
        let start = match ctx.cfg.strategy {
            Strategy::FedAla => {
                let local = state.local_params.as_ref().unwrap_or(global);
                let mut w = match &state.ala_weights {
                    Some(w) => w.clone(),
                    None => initial_ala_weights(global, ctx.ala.start_layer),
                };
                let out = ala_adapt(ctx, id, &state.shard.indices, local, global, &mut w, round)?;
                report.ala_iterations = Some(out.iterations);
                new_weights = Some(w);
                out.merged
            }
            _ => global.clone(),
        };
        let out = local_train(
            ctx,
            id,
            &state.shard.indices,
            start,
            global,
            state.prev_round_params.as_ref(),
            round,
        )?;
        Ok((out, new_weights))
    })();
    let params = match result {
        Ok((out, weights)) => {
            report.loss = Some(out.mean_loss);
            report.steps = out.steps;
            if ctx.cfg.client_eval {
                let local_idx = ctx.validation.indices_with_labels(&state.shard.label_window);
                if !local_idx.is_empty() {
                    report.local_accuracy = evaluate_indices(ctx.arch, &out.params, ctx.validation, &local_idx)
                        .ok()
                        .map(|r| r.1);
                }
                report.global_accuracy = evaluate(ctx.arch, &out.params, ctx.validation).ok();
            }
            match ctx.cfg.strategy {
                Strategy::FedAla => {
                    state.local_params = Some(out.params.clone());
                    state.ala_weights = weights;
                }
                Strategy::Moon => state.prev_round_params = Some(out.params.clone()),
                Strategy::FedAvg => {}
            }
            Some(out.params)
        }
        Err(e) => {
            log::warn!("round {round}: client {id} excluded from aggregation: {e}");
            report.error = Some(e.to_string());
            None
        }
    };
    report.wall_ms = t0.elapsed().as_secs_f64() * 1e3;
    ClientResult { report, params }
}

/// One communication round. Clients train concurrently; failed clients are
/// excluded and their `Dₙ` leaves the denominator.
pub fn run_round(
    ctx: &TrainContext<'_>,
    server: &ModelParams,
    clients: &mut [ClientState],
    round: usize,
) -> Result<(ModelParams, RoundReport)> {
    run_round_with_clients(ctx, server, clients, round).map(|(s, r, _)| (s, r))
}

/// [`run_round`] that also returns each client's trained model (`None` for
/// failed clients), in client order.
pub fn run_round_with_clients(
    ctx: &TrainContext<'_>,
    server: &ModelParams,
    clients: &mut [ClientState],
    round: usize,
) -> Result<(ModelParams, RoundReport, Vec<Option<ModelParams>>)> {
    if clients.is_empty() {
        return Err(Error::Aggregation("a round needs at least one client".into()));
    }
    let t0 = Instant::now();
    let results: Vec<ClientResult> = clients
        .par_iter_mut()
        .map(|c| client_round(ctx, c, server, round))
        .collect();
    let updates: Vec<(&ModelParams, usize)> = results
        .iter()
        .filter_map(|r| r.params.as_ref().map(|p| (p, r.report.samples)))
        .collect();
    if updates.is_empty() {
        return Err(Error::Aggregation(format!("round {round}: every client failed")));
    }
    let aggregated_samples = updates.iter().map(|u| u.1).sum();
    let new_server = fedavg_aggregate(&updates)?;
    let all: Vec<usize> = (0..ctx.validation.len()).collect();
    let (server_loss, server_accuracy) = evaluate_indices(ctx.arch, &new_server, ctx.validation, &all)?;
    let (reports, client_params): (Vec<_>, Vec<_>) = results.into_iter().map(|r| (r.report, r.params)).unzip();
    let report = RoundReport {
        round,
        clients: reports,
        server_loss,
        server_accuracy,
        aggregated_samples,
        wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        seed: ctx.cfg.seed,
    };
    Ok((new_server, report, client_params))
}
