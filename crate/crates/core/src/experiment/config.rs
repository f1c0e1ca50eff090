//! Experiment configuration files.
//!
//! Grammar, one statement per line:
//!
//! ```text
//! # comment
//! [section]            optional; later keys are read as `section.key`
//! key = value          dotted keys (`fl.rounds = 40`) work with or without sections
//! list = [20, 40, 80]  comma-separated, brackets required
//! ```
//!
//! Blank lines and `#` comments are ignored, values may be wrapped in double
//! quotes. Parsing is strict: unknown or duplicated keys, keys that do not
//! apply to the chosen dataset kind, architecture or strategy, bad values and
//! constraint violations are errors naming the key. [`ExperimentConfig::to_text`]
//! writes every key with its effective value; parsing that text yields the
//! same configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{PartitionSpec, Scenario, SyntheticSpec};
use crate::error::{Error, Result};
use crate::fl::{AlaConfig, FlConfig, MoonConfig, Strategy};
use crate::graph::Precision;
use crate::model::{ArchSpec, ModelSpec};
use crate::optim::{OptimizerConfig, OptimizerKind};

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    /// CIFAR-10 binary batch files; validation comes from `test_paths` when
    /// given, otherwise from a stratified holdout of the training files.
    Cifar10 {
        paths: Vec<PathBuf>,
        test_paths: Vec<PathBuf>,
    },
    Synthetic(SyntheticSpec),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub source: DatasetSource,
    /// Size of the global validation holdout.
    pub validation: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisConfig {
    /// Probe images per class and minibatch.
    pub per_class: usize,
    /// Probe minibatch count.
    pub k: usize,
    /// Capture points for same-layer matrices; empty means all.
    pub capture: Vec<String>,
    /// Rounds at which client and server models are saved for analysis.
    pub snapshot_epochs: Vec<usize>,
    /// Capture point for model×model matrices; `None` means the last one.
    pub cross_layer: Option<String>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            per_class: 5,
            k: 10,
            capture: Vec::new(),
            snapshot_epochs: vec![20, 40, 80],
            cross_layer: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub seed: u64,
    /// Extra checkpoint interval in rounds; 0 disables.
    pub checkpoint_every: usize,
    /// Record real timings in the metrics CSV (breaks byte-identical reruns).
    pub wall_clock: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub partition: PartitionSpec,
    pub model: ModelSpec,
    pub fl: FlConfig,
    /// Present exactly when the strategy is MOON.
    pub moon: Option<MoonConfig>,
    /// Present exactly when the strategy is FedALA.
    pub ala: Option<AlaConfig>,
    pub analysis: AnalysisConfig,
    pub run: RunConfig,
}

struct Entry {
    value: String,
    line: usize,
}

struct Reader {
    entries: BTreeMap<String, Entry>,
}

fn parse_value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{raw}` as {}", std::any::type_name::<T>())))
}

fn parse_list<T: FromStr>(key: &str, raw: &str) -> Result<Vec<T>> {
    let inner = raw
        .strip_prefix('[')
        .and_then(|r| r.strip_suffix(']'))
        .ok_or_else(|| Error::config(key, format!("expected a bracketed list, got `{raw}`")))?;
    inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s.trim_matches('"')))
        .collect()
}

impl Reader {
    fn new(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(s) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                if !s.contains(',') && !s.contains('=') {
                    section = s.trim().to_string();
                    continue;
                }
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", n + 1), format!("expected `key = value`, got `{line}`")))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::config(format!("line {}", n + 1), "empty key"));
            }
            let key = if section.is_empty() {
                k.to_string()
            } else {
                format!("{section}.{k}")
            };
            let v = v.trim();
            let v = v.strip_prefix('"').and_then(|s| s.strip_suffix('"')).unwrap_or(v);
            if let Some(prev) = entries.insert(
                key.clone(),
                Entry {
                    value: v.to_string(),
                    line: n + 1,
                },
            ) {
                return Err(Error::config(key, format!("duplicated (first on line {})", prev.line)));
            }
        }
        Ok(Self { entries })
    }

    fn raw(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key).map(|e| e.value)
    }

    fn get<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        match self.raw(key) {
            Some(v) => parse_value(key, &v),
            None => Ok(default),
        }
    }

    fn opt<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        self.raw(key).map(|v| parse_value(key, &v)).transpose()
    }

    fn list<T: FromStr>(&mut self, key: &str, default: Vec<T>) -> Result<Vec<T>> {
        match self.raw(key) {
            Some(v) => parse_list(key, &v),
            None => Ok(default),
        }
    }

    fn bool(&mut self, key: &str, default: bool) -> Result<bool> {
        match self.raw(key).as_deref() {
            None => Ok(default),
            Some("true") => Ok(true),
            Some("false") => Ok(false),
            Some(v) => Err(Error::config(key, format!("expected true or false, got `{v}`"))),
        }
    }

    fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((k, e)) => Err(Error::config(k, format!("unknown key (line {})", e.line))),
        }
    }
}

fn choice<'a>(key: &str, raw: &str, options: &[&'a str]) -> Result<&'a str> {
    options
        .iter()
        .find(|o| **o == raw)
        .copied()
        .ok_or_else(|| Error::config(key, format!("`{raw}` is not one of {}", options.join(", "))))
}

fn fmt_list<T: ToString>(v: &[T]) -> String {
    format!("[{}]", v.iter().map(T::to_string).collect::<Vec<_>>().join(", "))
}

fn fmt_paths(v: &[PathBuf]) -> String {
    format!(
        "[{}]",
        v.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", ")
    )
}

impl ExperimentConfig {
    pub fn parse_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut r = Reader::new(text)?;
        let seed: u64 = r.get("run.seed", 0)?;

        let kind = r.raw("dataset.kind").ok_or_else(|| Error::config("dataset.kind", "required"))?;
        let kind = choice("dataset.kind", &kind, &["synthetic", "cifar10"])?;
        let source = if kind == "synthetic" {
            let shape: Vec<usize> = r.list("dataset.shape", vec![3, 32, 32])?;
            let shape: [usize; 3] = shape
                .try_into()
                .map_err(|_| Error::config("dataset.shape", "expected [channels, height, width]"))?;
            DatasetSource::Synthetic(SyntheticSpec {
                num_classes: r.get("dataset.num_classes", 10)?,
                per_class: r.get("dataset.per_class", 600)?,
                seed: r.get("dataset.seed", seed)?,
                shape,
                noise: r.get("dataset.noise", 0.25)?,
            })
        } else {
            let paths: Vec<PathBuf> = r.list("dataset.paths", Vec::new())?;
            if paths.is_empty() {
                return Err(Error::config("dataset.paths", "at least one CIFAR-10 batch file is required"));
            }
            DatasetSource::Cifar10 {
                paths,
                test_paths: r.list("dataset.test_paths", Vec::new())?,
            }
        };
        let (input_shape, num_classes) = match &source {
            DatasetSource::Synthetic(s) => (s.shape, s.num_classes),
            DatasetSource::Cifar10 { .. } => ([3, 32, 32], 10),
        };
        let dataset = DatasetConfig {
            source,
            validation: r.get("dataset.validation", 1000)?,
        };

        let scenario = r.get::<String>("partition.scenario", "s1".into())?;
        let scenario = match choice("partition.scenario", &scenario, &["s1", "s2"])? {
            "s1" => Scenario::S1,
            _ => Scenario::S2,
        };
        let participants = r
            .opt("partition.participants")?
            .ok_or_else(|| Error::config("partition.participants", "required"))?;
        let partition = PartitionSpec {
            scenario,
            num_participants: participants,
            labels_per_client: r.get("partition.labels_per_client", 4)?,
            per_client_volume: if scenario == Scenario::S2 {
                Some(r.get("partition.per_client_volume", 500)?)
            } else {
                None
            },
            allow_overlap: r.bool("partition.allow_overlap", true)?,
            seed,
        };
        partition
            .validate(num_classes)
            .map_err(|e| Error::config("partition", e.to_string()))?;

        let arch = r.get::<String>("model.arch", "tiny_vit".into())?;
        let arch = match choice("model.arch", &arch, &["tiny_vit", "tiny_cnn", "tiny_mlp"])? {
            "tiny_vit" => {
                let ArchSpec::TinyVit {
                    patch_size,
                    embed_dim,
                    num_heads,
                    num_blocks,
                    mlp_ratio,
                } = ModelSpec::tiny_vit().arch
                else {
                    unreachable!()
                };
                ArchSpec::TinyVit {
                    patch_size: r.get("model.patch_size", patch_size)?,
                    embed_dim: r.get("model.embed_dim", embed_dim)?,
                    num_heads: r.get("model.num_heads", num_heads)?,
                    num_blocks: r.get("model.num_blocks", num_blocks)?,
                    mlp_ratio: r.get("model.mlp_ratio", mlp_ratio)?,
                }
            }
            "tiny_cnn" => {
                let ArchSpec::TinyCnn {
                    num_stages,
                    base_channels,
                } = ModelSpec::tiny_cnn().arch
                else {
                    unreachable!()
                };
                ArchSpec::TinyCnn {
                    num_stages: r.get("model.num_stages", num_stages)?,
                    base_channels: r.get("model.base_channels", base_channels)?,
                }
            }
            _ => ArchSpec::TinyMlp {
                hidden: r.list("model.hidden", vec![128, 64])?,
            },
        };
        let model = ModelSpec {
            arch,
            input_shape,
            num_classes,
            proj_dim: r.get("model.proj_dim", 32)?,
        };
        model.validate().map_err(|e| Error::config("model", e.to_string()))?;

        let mut fl = FlConfig::for_spec(&model);
        fl.seed = seed;
        fl.rounds = r.get("fl.rounds", fl.rounds)?;
        fl.client_epochs = r.get("fl.client_epochs", fl.client_epochs)?;
        fl.batch_size = r.get("fl.batch_size", fl.batch_size)?;
        let strategy = r.get::<String>("fl.strategy", "fedavg".into())?;
        fl.strategy = match choice("fl.strategy", &strategy, &["fedavg", "moon", "fedala"])? {
            "fedavg" => Strategy::FedAvg,
            "moon" => Strategy::Moon,
            _ => Strategy::FedAla,
        };
        let precision = r.get::<String>("fl.precision", "f64".into())?;
        fl.precision = match choice("fl.precision", &precision, &["f64", "f32"])? {
            "f64" => Precision::F64,
            _ => Precision::F32,
        };
        fl.client_eval = r.bool("fl.client_eval", true)?;

        let default_opt = fl.optimizer;
        let okind = r.get::<String>(
            "optimizer.kind",
            match default_opt.kind {
                OptimizerKind::Sgd => "sgd".into(),
                OptimizerKind::AdamW => "adamw".into(),
            },
        )?;
        let base = match choice("optimizer.kind", &okind, &["sgd", "adamw"])? {
            "sgd" if default_opt.kind == OptimizerKind::Sgd => default_opt,
            "sgd" => OptimizerConfig::sgd_default(),
            _ if default_opt.kind == OptimizerKind::AdamW => default_opt,
            _ => OptimizerConfig::adamw_default(),
        };
        fl.optimizer = OptimizerConfig {
            kind: base.kind,
            learning_rate: r.get("optimizer.lr", base.learning_rate)?,
            weight_decay: r.get("optimizer.weight_decay", base.weight_decay)?,
            momentum: r.get("optimizer.momentum", base.momentum)?,
            beta2: if base.kind == OptimizerKind::AdamW {
                r.get("optimizer.beta2", base.beta2)?
            } else {
                base.beta2
            },
            epsilon: if base.kind == OptimizerKind::AdamW {
                r.get("optimizer.epsilon", base.epsilon)?
            } else {
                base.epsilon
            },
        };
        fl.validate()?;

        let moon = if fl.strategy == Strategy::Moon {
            let d = MoonConfig::default();
            let m = MoonConfig {
                temperature: r.get("moon.temperature", d.temperature)?,
                mu: r.get("moon.mu", d.mu)?,
            };
            m.validate()?;
            Some(m)
        } else {
            None
        };
        let ala = if fl.strategy == Strategy::FedAla {
            let d = AlaConfig::default();
            let a = AlaConfig {
                sample_percent: r.get("ala.sample_percent", d.sample_percent)?,
                start_layer: r.get("ala.start_layer", d.start_layer)?,
                std_threshold: r.get("ala.std_threshold", d.std_threshold)?,
                learning_rate: r.get("ala.learning_rate", d.learning_rate)?,
                max_iters: r.get("ala.max_iters", d.max_iters)?,
                frozen: r.bool("ala.frozen", d.frozen)?,
            };
            a.validate()?;
            Some(a)
        } else {
            None
        };

        let d = AnalysisConfig::default();
        let capture = match r.raw("analysis.capture") {
            None => d.capture,
            Some(v) if v == "all" => Vec::new(),
            Some(v) => parse_list("analysis.capture", &v)?,
        };
        let analysis = AnalysisConfig {
            per_class: r.get("analysis.per_class", d.per_class)?,
            k: r.get("analysis.k", d.k)?,
            capture,
            snapshot_epochs: r.list("analysis.snapshot_epochs", d.snapshot_epochs)?,
            cross_layer: match r.raw("analysis.cross_layer") {
                None => None,
                Some(v) if v == "last" => None,
                Some(v) => Some(v),
            },
        };
        if analysis.per_class == 0 || analysis.k == 0 {
            return Err(Error::config("analysis", "per_class and k must be positive"));
        }
        if let Some(&e) = analysis.snapshot_epochs.iter().find(|&&e| e == 0 || e > fl.rounds) {
            return Err(Error::config(
                "analysis.snapshot_epochs",
                format!("round {e} is outside [1, {}]", fl.rounds),
            ));
        }
        let mut sorted = analysis.snapshot_epochs.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted != analysis.snapshot_epochs {
            return Err(Error::config("analysis.snapshot_epochs", "must be strictly increasing"));
        }

        let run = RunConfig {
            output_dir: r.get("run.output_dir", PathBuf::from("run"))?,
            seed,
            checkpoint_every: r.get("run.checkpoint_every", 0)?,
            wall_clock: r.bool("run.wall_clock", false)?,
        };
        r.finish()?;
        let cfg = ExperimentConfig {
            dataset,
            partition,
            model,
            fl,
            moon,
            ala,
            analysis,
            run,
        };
        cfg.check_capture_names()?;
        Ok(cfg)
    }

    fn check_capture_names(&self) -> Result<()> {
        let arch = crate::model::build_model(&self.model, 0)?.arch;
        for name in self.analysis.capture.iter().chain(&self.analysis.cross_layer) {
            arch.capture_index(name)
                .map_err(|e| Error::config("analysis.capture", e.to_string()))?;
        }
        Ok(())
    }

    /// Every key with its effective value.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        match &self.dataset.source {
            DatasetSource::Synthetic(sp) => {
                kv("dataset.kind", "synthetic".into());
                kv("dataset.num_classes", sp.num_classes.to_string());
                kv("dataset.per_class", sp.per_class.to_string());
                kv("dataset.seed", sp.seed.to_string());
                kv("dataset.shape", fmt_list(&sp.shape));
                kv("dataset.noise", sp.noise.to_string());
            }
            DatasetSource::Cifar10 { paths, test_paths } => {
                kv("dataset.kind", "cifar10".into());
                kv("dataset.paths", fmt_paths(paths));
                kv("dataset.test_paths", fmt_paths(test_paths));
            }
        }
        kv("dataset.validation", self.dataset.validation.to_string());
        let p = &self.partition;
        kv(
            "partition.scenario",
            match p.scenario {
                Scenario::S1 => "s1".into(),
                Scenario::S2 => "s2".into(),
            },
        );
        kv("partition.participants", p.num_participants.to_string());
        kv("partition.labels_per_client", p.labels_per_client.to_string());
        if let Some(v) = p.per_client_volume {
            kv("partition.per_client_volume", v.to_string());
        }
        kv("partition.allow_overlap", p.allow_overlap.to_string());
        kv("model.arch", self.model.arch.name().into());
        match &self.model.arch {
            ArchSpec::TinyVit {
                patch_size,
                embed_dim,
                num_heads,
                num_blocks,
                mlp_ratio,
            } => {
                kv("model.patch_size", patch_size.to_string());
                kv("model.embed_dim", embed_dim.to_string());
                kv("model.num_heads", num_heads.to_string());
                kv("model.num_blocks", num_blocks.to_string());
                kv("model.mlp_ratio", mlp_ratio.to_string());
            }
            ArchSpec::TinyCnn {
                num_stages,
                base_channels,
            } => {
                kv("model.num_stages", num_stages.to_string());
                kv("model.base_channels", base_channels.to_string());
            }
            ArchSpec::TinyMlp { hidden } => kv("model.hidden", fmt_list(hidden)),
        }
        kv("model.proj_dim", self.model.proj_dim.to_string());
        let f = &self.fl;
        kv("fl.rounds", f.rounds.to_string());
        kv("fl.client_epochs", f.client_epochs.to_string());
        kv("fl.batch_size", f.batch_size.to_string());
        kv("fl.strategy", f.strategy.name().into());
        kv(
            "fl.precision",
            match f.precision {
                Precision::F64 => "f64".into(),
                Precision::F32 => "f32".into(),
            },
        );
        kv("fl.client_eval", f.client_eval.to_string());
        let o = &f.optimizer;
        kv(
            "optimizer.kind",
            match o.kind {
                OptimizerKind::Sgd => "sgd".into(),
                OptimizerKind::AdamW => "adamw".into(),
            },
        );
        kv("optimizer.lr", o.learning_rate.to_string());
        kv("optimizer.weight_decay", o.weight_decay.to_string());
        kv("optimizer.momentum", o.momentum.to_string());
        if o.kind == OptimizerKind::AdamW {
            kv("optimizer.beta2", o.beta2.to_string());
            kv("optimizer.epsilon", o.epsilon.to_string());
        }
        if let Some(m) = &self.moon {
            kv("moon.temperature", m.temperature.to_string());
            kv("moon.mu", m.mu.to_string());
        }
        if let Some(a) = &self.ala {
            kv("ala.sample_percent", a.sample_percent.to_string());
            kv("ala.start_layer", a.start_layer.to_string());
            kv("ala.std_threshold", a.std_threshold.to_string());
            kv("ala.learning_rate", a.learning_rate.to_string());
            kv("ala.max_iters", a.max_iters.to_string());
            kv("ala.frozen", a.frozen.to_string());
        }
        let an = &self.analysis;
        kv("analysis.per_class", an.per_class.to_string());
        kv("analysis.k", an.k.to_string());
        kv(
            "analysis.capture",
            if an.capture.is_empty() {
                "all".into()
            } else {
                fmt_list(&an.capture)
            },
        );
        kv("analysis.snapshot_epochs", fmt_list(&an.snapshot_epochs));
        kv("analysis.cross_layer", an.cross_layer.clone().unwrap_or_else(|| "last".into()));
        kv("run.output_dir", self.run.output_dir.display().to_string());
        kv("run.seed", self.run.seed.to_string());
        kv("run.checkpoint_every", self.run.checkpoint_every.to_string());
        kv("run.wall_clock", self.run.wall_clock.to_string());
        s
    }

    /// Hex SHA-256 of [`Self::to_text`].
    pub fn hash(&self) -> String {
        crate::experiment::sha256_hex(self.to_text().as_bytes())
    }

    pub fn moon_or_default(&self) -> MoonConfig {
        self.moon.unwrap_or_default()
    }

    pub fn ala_or_default(&self) -> AlaConfig {
        self.ala.unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "dataset.kind = synthetic\npartition.participants = 10\n";

    #[test]
    fn minimal_is_fully_defaulted() {
        let c = ExperimentConfig::parse_str(MINIMAL).unwrap();
        assert_eq!(c.fl.rounds, 100);
        assert_eq!(c.fl.batch_size, 32);
        assert_eq!(c.fl.client_epochs, 1);
        assert_eq!(c.model.arch.name(), "tiny_vit");
        assert_eq!(c.fl.optimizer, OptimizerConfig::adamw_default());
        assert_eq!(c.partition.labels_per_client, 4);
        assert_eq!(c.analysis.snapshot_epochs, vec![20, 40, 80]);
        assert!(c.moon.is_none() && c.ala.is_none());
    }

    #[test]
    fn sections_and_round_trip() {
        let text = "\
# desk run
[dataset]
kind = synthetic
per_class = 40
shape = [3, 8, 8]
[partition]
participants = 4
scenario = s2
per_client_volume = 50
[model]
arch = tiny_cnn
base_channels = 8
[fl]
strategy = moon
rounds = 30
[moon]
mu = 1.5
[analysis]
snapshot_epochs = [10, 30]
capture = [stage0, pooled]
";
        let c = ExperimentConfig::parse_str(text).unwrap();
        assert_eq!(c.fl.optimizer.kind, OptimizerKind::Sgd);
        assert_eq!(c.moon.unwrap().mu, 1.5);
        assert_eq!(c.partition.per_client_volume, Some(50));
        let again = ExperimentConfig::parse_str(&c.to_text()).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.to_text(), c.to_text());
    }

    fn err_key(text: &str) -> String {
        match ExperimentConfig::parse_str(text) {
            Err(Error::Config { key, .. }) => key,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn strictness() {
        assert_eq!(err_key(&format!("{MINIMAL}optimiser = adamw\n")), "optimiser");
        assert_eq!(err_key(&format!("{MINIMAL}fl.rounds = ten\n")), "fl.rounds");
        assert_eq!(err_key(&format!("{MINIMAL}fl.rounds = 3\nfl.rounds = 4\n")), "fl.rounds");
        assert_eq!(err_key(&format!("{MINIMAL}moon.mu = 1\n")), "moon.mu");
        assert_eq!(err_key(&format!("{MINIMAL}model.base_channels = 8\n")), "model.base_channels");
        assert_eq!(err_key(&format!("{MINIMAL}fl.rounds = 10\n")), "analysis.snapshot_epochs");
        assert_eq!(err_key(&format!("{MINIMAL}fl.strategy = fedprox\n")), "fl.strategy");
        assert_eq!(err_key("partition.participants = 3\n"), "dataset.kind");
        assert_eq!(err_key(&format!("{MINIMAL}analysis.capture = [nope]\n")), "analysis.capture");
        assert_eq!(err_key(&format!("{MINIMAL}optimizer.momentum = 1.5\n")), "optimizer.momentum");
    }
}
