//! Run directories.
//!
//! ```text
//! <out>/config.txt                       effective configuration
//! <out>/manifest.json                    progress, config hash, file hashes
//! <out>/metrics.csv                      one row per client plus SERVER per round
//! <out>/state.ckpt                       server and carried client state
//! <out>/checkpoints/round_XXXX/server.ckpt
//! <out>/checkpoints/round_XXXX/client_XXX.ckpt
//! ```
//!
//! The manifest is rewritten after every round, last, so a crash leaves the
//! previous round's manifest in place; resume truncates the metrics file back
//! to the rounds the manifest records.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{sha256_hex, ExperimentConfig, Simulation};
use crate::error::{Error, Result};
use crate::fl::{metrics_rows, RoundReport, METRICS_HEADER, METRICS_SCHEMA_VERSION};
use crate::params::{write_atomic, ModelParams};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    /// Stopped before the last round; resumable.
    Partial,
    Completed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub metrics_schema_version: u32,
    pub crate_version: String,
    pub config_hash: String,
    pub strategy: String,
    pub arch: String,
    pub seed: u64,
    pub num_clients: usize,
    pub rounds_total: usize,
    pub rounds_completed: usize,
    pub status: RunStatus,
    pub snapshots: Vec<usize>,
    /// Relative path to hex SHA-256.
    pub files: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Discard an existing run directory instead of resuming it.
    pub fresh: bool,
    /// Stop after this many completed rounds (the run stays resumable).
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub rounds_completed: usize,
    pub status: RunStatus,
    /// Rounds executed by this invocation.
    pub reports: Vec<RoundReport>,
    pub final_accuracy: Option<f64>,
}

pub fn snapshot_dir(out: &Path, round: usize) -> PathBuf {
    out.join("checkpoints").join(format!("round_{round:04}"))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&read(path)?))
}

fn write_manifest(out: &Path, m: &RunManifest) -> Result<()> {
    let json = serde_json::to_string_pretty(m).map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(&out.join("manifest.json"), format!("{json}\n").as_bytes())
}

pub fn read_manifest(out: &Path) -> Result<RunManifest> {
    let path = out.join("manifest.json");
    serde_json::from_slice(&read(&path)?).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Keeps the header and the rows of rounds `1..=rounds`.
fn truncate_metrics(path: &Path, rounds: usize) -> Result<()> {
    let text = String::from_utf8(read(path)?).map_err(|e| Error::Format(e.to_string()))?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Format(format!("{} has an unexpected header", path.display())));
    }
    let mut out = format!("{METRICS_HEADER}\n");
    for line in lines {
        let round: usize = line
            .split(',')
            .next()
            .and_then(|r| r.parse().ok())
            .ok_or_else(|| Error::Format(format!("bad metrics row `{line}`")))?;
        if round <= rounds {
            out.push_str(line);
            out.push('\n');
        }
    }
    write_atomic(path, out.as_bytes())
}

fn clear_run_dir(out: &Path) -> Result<()> {
    for f in ["config.txt", "manifest.json", "metrics.csv", "state.ckpt"] {
        let p = out.join(f);
        if p.exists() {
            fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
        }
    }
    for d in ["checkpoints", "analysis"] {
        let p = out.join(d);
        if p.exists() {
            fs::remove_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
    }
    Ok(())
}

fn rel(out: &Path, p: &Path) -> String {
    p.strip_prefix(out).unwrap_or(p).to_string_lossy().replace('\\', "/")
}

/// Runs (or resumes) the configured experiment into `out`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path, opts: &RunOptions) -> Result<RunSummary> {
    let hash = cfg.hash();
    let manifest_path = out.join("manifest.json");
    let existing = if manifest_path.exists() && !opts.fresh {
        let m = read_manifest(out)?;
        if m.config_hash != hash {
            return Err(Error::config(
                "run.output_dir",
                format!("{} holds a run with a different configuration; use a fresh run", out.display()),
            ));
        }
        Some(m)
    } else {
        None
    };
    if existing.is_none() {
        clear_run_dir(out)?;
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let mut sim = Simulation::new(cfg)?;
    let mut manifest = match existing {
        Some(m) => {
            if m.rounds_completed > 0 {
                let state_path = out.join("state.ckpt");
                let bytes = read(&state_path)?;
                if m.files.get("state.ckpt") != Some(&sha256_hex(&bytes)) {
                    return Err(Error::Format("state.ckpt does not match the manifest hash".into()));
                }
                sim.restore(&ModelParams::from_bytes(&bytes)?, m.rounds_completed)?;
            }
            truncate_metrics(&out.join("metrics.csv"), m.rounds_completed)?;
            log::info!("resuming {} after round {}", out.display(), m.rounds_completed);
            m
        }
        None => {
            write_atomic(&out.join("config.txt"), cfg.to_text().as_bytes())?;
            write_atomic(&out.join("metrics.csv"), format!("{METRICS_HEADER}\n").as_bytes())?;
            let mut files = BTreeMap::new();
            files.insert("config.txt".to_string(), file_hash(&out.join("config.txt"))?);
            RunManifest {
                schema_version: MANIFEST_SCHEMA_VERSION,
                metrics_schema_version: METRICS_SCHEMA_VERSION,
                crate_version: env!("CARGO_PKG_VERSION").to_string(),
                config_hash: hash,
                strategy: cfg.fl.strategy.name().to_string(),
                arch: cfg.model.arch.name().to_string(),
                seed: cfg.run.seed,
                num_clients: sim.clients.len(),
                rounds_total: cfg.fl.rounds,
                rounds_completed: 0,
                status: RunStatus::Partial,
                snapshots: Vec::new(),
                files,
            }
        }
    };

    let metrics_path = out.join("metrics.csv");
    let mut reports = Vec::new();
    let stop = opts.stop_after.unwrap_or(cfg.fl.rounds).min(cfg.fl.rounds);
    while sim.round < stop {
        let (report, client_params) = sim.step()?;
        let round = sim.round;
        log::info!(
            "round {round}/{}: server accuracy {:.4}, loss {:.4}",
            cfg.fl.rounds,
            report.server_accuracy,
            report.server_loss
        );
        let mut f = fs::OpenOptions::new()
            .append(true)
            .open(&metrics_path)
            .map_err(|e| Error::io(&metrics_path, e))?;
        f.write_all(metrics_rows(&report, cfg.run.wall_clock).as_bytes())
            .map_err(|e| Error::io(&metrics_path, e))?;
        drop(f);

        let every = cfg.run.checkpoint_every;
        if cfg.analysis.snapshot_epochs.contains(&round) || (every > 0 && round % every == 0) {
            let dir = snapshot_dir(out, round);
            let server_path = dir.join("server.ckpt");
            sim.server.save(&server_path)?;
            manifest.files.insert(rel(out, &server_path), file_hash(&server_path)?);
            for (c, p) in sim.clients.iter().zip(&client_params) {
                if let Some(p) = p {
                    let path = dir.join(format!("client_{:03}.ckpt", c.client_id));
                    p.save(&path)?;
                    manifest.files.insert(rel(out, &path), file_hash(&path)?);
                }
            }
            if !manifest.snapshots.contains(&round) {
                manifest.snapshots.push(round);
            }
        }
        let state_path = out.join("state.ckpt");
        let state = sim.state()?.to_bytes();
        write_atomic(&state_path, &state)?;
        manifest.files.insert("state.ckpt".into(), sha256_hex(&state));
        manifest.files.insert("metrics.csv".into(), file_hash(&metrics_path)?);
        manifest.rounds_completed = round;
        if round == cfg.fl.rounds {
            manifest.status = RunStatus::Completed;
        }
        write_manifest(out, &manifest)?;
        reports.push(report);
    }
    if manifest.rounds_completed == 0 {
        write_manifest(out, &manifest)?;
    }
    Ok(RunSummary {
        out_dir: out.to_path_buf(),
        rounds_completed: manifest.rounds_completed,
        status: manifest.status,
        final_accuracy: reports.last().map(|r| r.server_accuracy),
        reports,
    })
}
