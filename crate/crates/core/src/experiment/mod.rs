//! Config-driven experiments: run directories, resume, analysis and export.

mod analyze;
mod config;
mod export;
mod run;

use sha2::{Digest, Sha256};

use crate::data::{generate_synthetic, load_cifar10, partition, LabeledDataset};
use crate::error::{Error, Result};
use crate::fl::{run_round_with_clients, AlaConfig, ClientState, MoonConfig, RoundReport, TrainContext};
use crate::model::{build_model, Architecture, Model};
use crate::params::ModelParams;
use crate::rng;

pub use analyze::{analyze_run, AnalyzeOptions, AnalyzeSummary, SnapshotAnalysis};
pub use config::{AnalysisConfig, DatasetConfig, DatasetSource, ExperimentConfig, RunConfig};
pub use export::{export_checkpoint_text, export_dataset, render_heatmap};
pub use run::{read_manifest, run_experiment, snapshot_dir, RunManifest, RunOptions, RunStatus, RunSummary, MANIFEST_SCHEMA_VERSION};

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Training and validation sets for a configuration.
pub fn load_datasets(cfg: &ExperimentConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    let holdout_seed = rng::derive_seed(cfg.run.seed, &[rng::tag::HOLDOUT]);
    let (full, test) = match &cfg.dataset.source {
        DatasetSource::Synthetic(s) => (generate_synthetic(s)?, None),
        DatasetSource::Cifar10 { paths, test_paths } => {
            let train = load_cifar10(paths)?;
            let test = if test_paths.is_empty() {
                None
            } else {
                Some(load_cifar10(test_paths)?)
            };
            (train, test)
        }
    };
    match test {
        Some(t) => {
            if t.len() < cfg.dataset.validation {
                return Err(Error::config(
                    "dataset.validation",
                    format!("the test files hold only {} samples", t.len()),
                ));
            }
            let val = t.sample_subset(cfg.dataset.validation, holdout_seed);
            Ok((full, val))
        }
        None => {
            let per_class = cfg.dataset.validation / full.num_classes();
            if per_class == 0 {
                return Err(Error::config("dataset.validation", "smaller than the number of classes"));
            }
            full.split_holdout(per_class, holdout_seed)
        }
    }
}

/// In-memory federated run driven by an [`ExperimentConfig`].
pub struct Simulation {
    pub cfg: ExperimentConfig,
    pub arch: Architecture,
    pub train: LabeledDataset,
    pub validation: LabeledDataset,
    pub server: ModelParams,
    pub clients: Vec<ClientState>,
    /// Completed rounds.
    pub round: usize,
    moon: MoonConfig,
    ala: AlaConfig,
}

impl Simulation {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let (train, validation) = load_datasets(cfg)?;
        Self::with_data(cfg, train, validation)
    }

    /// Uses already loaded data; `train` is partitioned per the config.
    pub fn with_data(cfg: &ExperimentConfig, train: LabeledDataset, validation: LabeledDataset) -> Result<Self> {
        let Model { arch, params } = build_model(&cfg.model, rng::derive_seed(cfg.run.seed, &[rng::tag::INIT]))?;
        let shards = partition(&train, &cfg.partition)?;
        let (moon, ala) = (cfg.moon_or_default(), cfg.ala_or_default());
        let clients = shards
            .into_iter()
            .map(|s| ClientState::new(s, &params, cfg.fl.strategy, &ala))
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            arch,
            train,
            validation,
            server: params,
            clients,
            round: 0,
            moon,
            ala,
        })
    }

    /// Runs the next round and returns its report and the trained client models.
    pub fn step(&mut self) -> Result<(RoundReport, Vec<Option<ModelParams>>)> {
        let ctx = TrainContext {
            arch: &self.arch,
            train: &self.train,
            validation: &self.validation,
            cfg: &self.cfg.fl,
            moon: &self.moon,
            ala: &self.ala,
        };
        let round = self.round + 1;
        let (server, report, clients) = run_round_with_clients(&ctx, &self.server, &mut self.clients, round)?;
        self.server = server;
        self.round = round;
        Ok((report, clients))
    }

    /// Server and per-client carried state as one parameter set.
    pub fn state(&self) -> Result<ModelParams> {
        let mut all = self.server.prefixed("server/");
        for c in &self.clients {
            let id = c.client_id;
            for (tag, p) in [
                ("local", &c.local_params),
                ("prev", &c.prev_round_params),
                ("ala", &c.ala_weights),
            ] {
                if let Some(p) = p {
                    all = all.concat(p.prefixed(&format!("c{id}/{tag}/")))?;
                }
            }
        }
        Ok(all)
    }

    /// Restores a state written by [`Self::state`] after `round` rounds.
    pub fn restore(&mut self, state: &ModelParams, round: usize) -> Result<()> {
        let server = state.strip_prefix("server/");
        server.check_same_layout(&self.server)?;
        self.server = server;
        for c in &mut self.clients {
            let id = c.client_id;
            for (tag, slot) in [
                ("local", &mut c.local_params),
                ("prev", &mut c.prev_round_params),
                ("ala", &mut c.ala_weights),
            ] {
                if let Some(p) = slot {
                    let saved = state.strip_prefix(&format!("c{id}/{tag}/"));
                    saved.check_same_layout(p)?;
                    *p = saved;
                }
            }
        }
        self.round = round;
        Ok(())
    }
}
