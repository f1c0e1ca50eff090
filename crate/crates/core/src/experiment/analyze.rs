//! Offline CKA analysis of a run directory's snapshots.
//!
//! For every requested round writes `analysis/same_layer_round_XXXX.{csv,pgm}`
//! (clients × capture points, each client against the server). With
//! `cross_model` it also writes `analysis/cross_model_round_XXXX.{csv,pgm}`
//! (server and clients against each other at one capture point) and
//! `analysis/cross_model_all.{csv,pgm}` spanning every requested round.

use std::path::{Path, PathBuf};

use super::run::read_manifest;
use super::{load_datasets, snapshot_dir, ExperimentConfig};
use crate::cka::{build_probe_minibatches, cross_model_similarity, same_layer_similarity, CkaMatrix};
use crate::error::{Error, Result};
use crate::model::{build_model, Model};
use crate::params::ModelParams;
use crate::rng;

#[derive(Debug, Clone)]
pub struct AnalyzeOptions {
    /// Rounds to analyze; `None` uses the configured snapshot rounds.
    pub epochs: Option<Vec<usize>>,
    /// Capture points for same-layer matrices; `None` uses the config.
    pub layers: Option<Vec<String>>,
    pub cross_model: bool,
    /// Heatmap pixels per cell.
    pub cell: usize,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        Self {
            epochs: None,
            layers: None,
            cross_model: false,
            cell: 8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SnapshotAnalysis {
    pub round: usize,
    pub same_layer: CkaMatrix,
    pub cross_model: Option<CkaMatrix>,
}

#[derive(Debug, Clone)]
pub struct AnalyzeSummary {
    pub snapshots: Vec<SnapshotAnalysis>,
    pub files: Vec<PathBuf>,
}

fn load_snapshot(run_dir: &Path, round: usize, base: &Model, clients: usize) -> Result<(Model, Vec<Model>)> {
    let dir = snapshot_dir(run_dir, round);
    let server_path = dir.join("server.ckpt");
    if !server_path.exists() {
        return Err(Error::MissingCheckpoint {
            round,
            path: server_path,
        });
    }
    let server = base.with_params(ModelParams::load(&server_path)?)?;
    let mut out = Vec::new();
    for c in 0..clients {
        let p = dir.join(format!("client_{c:03}.ckpt"));
        // failed clients have no snapshot
        if p.exists() {
            out.push(base.with_params(ModelParams::load(&p)?)?);
        }
    }
    Ok((server, out))
}

pub fn analyze_run(run_dir: &Path, opts: &AnalyzeOptions) -> Result<AnalyzeSummary> {
    let cfg = ExperimentConfig::parse_file(&run_dir.join("config.txt"))?;
    let manifest = read_manifest(run_dir)?;
    let epochs = opts.epochs.clone().unwrap_or_else(|| cfg.analysis.snapshot_epochs.clone());
    for &e in &epochs {
        let path = snapshot_dir(run_dir, e).join("server.ckpt");
        if !path.exists() {
            return Err(Error::MissingCheckpoint { round: e, path });
        }
    }
    let base = build_model(&cfg.model, 0)?;
    let layers: Vec<String> = match &opts.layers {
        Some(l) if !l.is_empty() => l.clone(),
        _ if !cfg.analysis.capture.is_empty() => cfg.analysis.capture.clone(),
        _ => base.arch.capture_points().iter().map(|c| c.layer_name.clone()).collect(),
    };
    let layer_refs: Vec<&str> = layers.iter().map(String::as_str).collect();
    for l in &layer_refs {
        base.arch.capture_index(l)?;
    }
    let cross_layer = cfg.analysis.cross_layer.clone().unwrap_or_else(|| {
        base.arch
            .capture_points()
            .last()
            .map(|c| c.layer_name.clone())
            .unwrap_or_default()
    });

    let (_, validation) = load_datasets(&cfg)?;
    let probes = build_probe_minibatches(
        &validation,
        cfg.analysis.per_class,
        cfg.analysis.k,
        rng::derive_seed(cfg.run.seed, &[rng::tag::PROBE]),
    )?;
    let out_dir = run_dir.join("analysis");
    let mut files = Vec::new();
    let mut snapshots = Vec::new();
    let mut all_models = Vec::new();
    let mut all_labels = Vec::new();
    for &round in &epochs {
        let (server, clients) = load_snapshot(run_dir, round, &base, manifest.num_clients)?;
        let same = same_layer_similarity(&clients, &server, &probes, &layer_refs)?.with_epoch_tag(round);
        let stem = out_dir.join(format!("same_layer_round_{round:04}"));
        same.write_csv(&stem.with_extension("csv"))?;
        same.write_pgm(&stem.with_extension("pgm"), opts.cell)?;
        files.push(stem.with_extension("csv"));
        files.push(stem.with_extension("pgm"));
        let cross = if opts.cross_model {
            let mut models = vec![server];
            models.extend(clients);
            let labels: Vec<String> = std::iter::once("server".to_string())
                .chain((1..models.len()).map(|i| format!("client{}", i - 1)))
                .collect();
            let m = cross_model_similarity(&models, &models, &cross_layer, &probes)?
                .with_labels(labels.clone(), labels.clone())
                .with_epoch_tag(round);
            let stem = out_dir.join(format!("cross_model_round_{round:04}"));
            m.write_csv(&stem.with_extension("csv"))?;
            m.write_pgm(&stem.with_extension("pgm"), opts.cell)?;
            files.push(stem.with_extension("csv"));
            files.push(stem.with_extension("pgm"));
            all_labels.extend(labels.iter().map(|l| format!("r{round}/{l}")));
            all_models.extend(models);
            Some(m)
        } else {
            None
        };
        log::info!("round {round}: mean same-layer CKA {:?}", same.mean());
        snapshots.push(SnapshotAnalysis {
            round,
            same_layer: same,
            cross_model: cross,
        });
    }
    if opts.cross_model && epochs.len() > 1 {
        let m = cross_model_similarity(&all_models, &all_models, &cross_layer, &probes)?
            .with_labels(all_labels.clone(), all_labels);
        let stem = out_dir.join("cross_model_all");
        m.write_csv(&stem.with_extension("csv"))?;
        m.write_pgm(&stem.with_extension("pgm"), opts.cell)?;
        files.push(stem.with_extension("csv"));
        files.push(stem.with_extension("pgm"));
    }
    Ok(AnalyzeSummary { snapshots, files })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::{run_experiment, RunOptions};

    #[test]
    fn snapshots_and_missing_round() {
        let cfg = ExperimentConfig::parse_str(
            "dataset.kind = synthetic\ndataset.per_class = 40\ndataset.shape = [3, 8, 8]\n\
             dataset.validation = 200\npartition.participants = 2\nmodel.arch = tiny_mlp\n\
             model.hidden = [16, 8]\nfl.rounds = 3\nanalysis.snapshot_epochs = [1, 2, 3]\nanalysis.k = 2\n",
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        run_experiment(&cfg, dir.path(), &RunOptions::default()).unwrap();
        let s = analyze_run(dir.path(), &AnalyzeOptions::default()).unwrap();
        let count = |ext: &str| s.files.iter().filter(|f| f.extension().unwrap() == ext).count();
        assert_eq!((count("csv"), count("pgm")), (3, 3));
        assert_eq!(s.snapshots[0].same_layer.rows.len(), 2);

        let csv = &s.files[0];
        let m = CkaMatrix::read_csv(csv).unwrap();
        assert_eq!(m.to_pgm(8), std::fs::read(csv.with_extension("pgm")).unwrap());

        let err = analyze_run(
            dir.path(),
            &AnalyzeOptions {
                epochs: Some(vec![20]),
                ..Default::default()
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::MissingCheckpoint { round: 20, .. }));

        let x = analyze_run(
            dir.path(),
            &AnalyzeOptions {
                epochs: Some(vec![1, 3]),
                cross_model: true,
                ..Default::default()
            },
        )
        .unwrap();
        let cm = x.snapshots[1].cross_model.as_ref().unwrap();
        assert_eq!(cm.rows, vec!["server", "client0", "client1"]);
        assert!((cm.value(0, 0).unwrap() - 1.0).abs() < 1e-10);
        assert!(dir.path().join("analysis/cross_model_all.csv").exists());
    }
}
