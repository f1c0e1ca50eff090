use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use fedcka::experiment::{
    analyze_run, export_checkpoint_text, export_dataset, render_heatmap, run_experiment, AnalyzeOptions,
    ExperimentConfig, RunOptions,
};
use fedcka::verify::{run_verify, VerifyOptions, SUITES};

/// Desk-scale federated-learning simulator with minibatch CKA analysis.
#[derive(Parser)]
#[command(name = "fedcka", version)]
struct Cli {
    /// Root for relative output directories.
    #[arg(long, global = true, env = "FEDCKA_OUTPUT_ROOT")]
    output_root: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train per a config file; resumes an interrupted run in the same directory.
    Run {
        config: PathBuf,
        /// Output directory (default: run.output_dir from the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Discard any existing run in the output directory.
        #[arg(long)]
        fresh: bool,
        /// Stop after this many completed rounds.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Compute CKA matrices from a run directory's snapshots.
    Analyze {
        run_dir: PathBuf,
        /// Comma-separated rounds (default: the configured snapshots).
        #[arg(long, value_delimiter = ',')]
        epochs: Option<Vec<usize>>,
        /// Comma-separated capture points (default: the configured ones).
        #[arg(long, value_delimiter = ',')]
        layers: Option<Vec<String>>,
        /// Also write model×model matrices.
        #[arg(long)]
        cross_model: bool,
        /// Heatmap pixels per cell.
        #[arg(long, default_value_t = 8)]
        cell: usize,
    },
    /// Run the built-in correctness suites and print a JSON summary.
    Verify {
        /// Suites to run (default: all).
        #[arg(long = "suite", value_parser = clap::builder::PossibleValuesParser::new(SUITES))]
        suites: Vec<String>,
        #[arg(long, default_value_t = 20)]
        gradient_seeds: u64,
        /// Replace the HSIC cross-term coefficient numerator (self-test of the suite).
        #[arg(long, hide = true, default_value_t = 2.0)]
        mutate_hsic_coefficient: f64,
    },
    /// Convert artifacts.
    #[command(subcommand)]
    Export(Export),
}

#[derive(Subcommand)]
enum Export {
    /// Re-render a CKA CSV as a PGM heatmap.
    Heatmap {
        csv: PathBuf,
        pgm: PathBuf,
        #[arg(long, default_value_t = 8)]
        cell: usize,
    },
    /// Dump a checkpoint as text, one tensor per line.
    Checkpoint { ckpt: PathBuf, out: PathBuf },
    /// Write the synthetic dataset of a config in binary form.
    Dataset { config: PathBuf, out: PathBuf },
}

fn resolve(root: Option<&Path>, dir: &Path) -> PathBuf {
    match root {
        Some(r) if dir.is_relative() => r.join(dir),
        _ => dir.to_path_buf(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    let root = cli.output_root.as_deref();
    match cli.command {
        Command::Run {
            config,
            out,
            fresh,
            stop_after,
        } => {
            let cfg = ExperimentConfig::parse_file(&config).with_context(|| format!("reading {}", config.display()))?;
            let out = resolve(root, out.as_deref().unwrap_or(&cfg.run.output_dir));
            let s = run_experiment(&cfg, &out, &RunOptions { fresh, stop_after })?;
            println!(
                "{}: {} of {} rounds, final server accuracy {}",
                out.display(),
                s.rounds_completed,
                cfg.fl.rounds,
                s.final_accuracy.map_or("-".into(), |a| format!("{a:.4}"))
            );
        }
        Command::Analyze {
            run_dir,
            epochs,
            layers,
            cross_model,
            cell,
        } => {
            if cell == 0 {
                bail!("--cell must be positive");
            }
            let run_dir = resolve(root, &run_dir);
            let s = analyze_run(
                &run_dir,
                &AnalyzeOptions {
                    epochs,
                    layers,
                    cross_model,
                    cell,
                },
            )?;
            for a in &s.snapshots {
                println!(
                    "round {}: mean same-layer CKA {}",
                    a.round,
                    a.same_layer.mean().map_or("UNDEFINED".into(), |m| format!("{m:.6}"))
                );
            }
            for f in &s.files {
                println!("wrote {}", f.display());
            }
        }
        Command::Verify {
            suites,
            gradient_seeds,
            mutate_hsic_coefficient,
        } => {
            let report = run_verify(&VerifyOptions {
                suites,
                gradient_seeds,
                hsic_cross_coefficient: mutate_hsic_coefficient,
            });
            println!("{}", serde_json::to_string_pretty(&report)?);
            if !report.ok {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Export(e) => match e {
            Export::Heatmap { csv, pgm, cell } => {
                if cell == 0 {
                    bail!("--cell must be positive");
                }
                let m = render_heatmap(&csv, &pgm, cell)?;
                println!("wrote {} ({}×{} cells)", pgm.display(), m.rows.len(), m.cols.len());
            }
            Export::Checkpoint { ckpt, out } => {
                let n = export_checkpoint_text(&ckpt, &out)?;
                println!("wrote {} ({n} tensors)", out.display());
            }
            Export::Dataset { config, out } => {
                let cfg = ExperimentConfig::parse_file(&config)?;
                let n = export_dataset(&cfg, &out)?;
                println!("wrote {} ({n} samples)", out.display());
            }
        },
    }
    Ok(ExitCode::SUCCESS)
}
