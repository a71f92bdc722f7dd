//! Flat key-value experiment configs with dotted sections, e.g.
//! `benchmark.tasks=5` or `fl.alpha_p=0.01`. Lines starting with `#` are
//! comments. Unknown keys are errors, so typos surface immediately.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::hosts::HostConfig;
use crate::knowledge::{Category, FisherMode};
use crate::losses::AlignmentSpace;
use crate::model::ArchSpec;
use crate::tasks::SyntheticSpec;
use crate::training::{FlConfig, Mode};

/// Evaluation regime: class-incremental or task-incremental.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    Ci,
    Ti,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::Ci => "CI",
            Regime::Ti => "TI",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "CI" | "ci" => Ok(Regime::Ci),
            "TI" | "ti" => Ok(Regime::Ti),
            other => Err(Error::InvalidArgument(format!("unknown regime '{other}'"))),
        }
    }
}

/// Where the task stream comes from.
#[derive(Clone, Debug)]
pub enum BenchmarkSpec {
    Synthetic {
        spec: SyntheticSpec,
        /// When unset, the stream seed derives from each run seed.
        pinned_seed: Option<u64>,
    },
    Csv {
        train: PathBuf,
        test: Option<PathBuf>,
        partition: Vec<Vec<usize>>,
    },
}

/// A full experiment: benchmark, hosts, modes, seeds and output layout.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub benchmark: BenchmarkSpec,
    pub hosts: Vec<HostConfig>,
    pub fl: FlConfig,
    pub modes: Vec<Mode>,
    pub seeds: Vec<u64>,
    pub regimes: Vec<Regime>,
    pub output_dir: PathBuf,
    pub workers: usize,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
}

impl ExperimentConfig {
    pub fn arch(&self, input_dim: usize) -> ArchSpec {
        ArchSpec {
            input_dim,
            hidden: self.hidden.clone(),
            embed_dim: self.embed_dim,
        }
    }
}

fn bad(key: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        msg: msg.into(),
    }
}

struct Raw {
    map: BTreeMap<String, String>,
}

impl Raw {
    fn take(&mut self, key: &str) -> Option<String> {
        self.map.remove(key)
    }

    fn parse<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| bad(key, format!("cannot parse '{v}'"))),
        }
    }

    fn parse_opt<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.take(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| bad(key, format!("cannot parse '{v}'"))),
        }
    }

    fn list<T: std::str::FromStr>(&mut self, key: &str, default: Vec<T>) -> Result<Vec<T>> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v
                .split(',')
                .map(|f| {
                    f.trim()
                        .parse()
                        .map_err(|_| bad(key, format!("cannot parse element '{f}'")))
                })
                .collect(),
        }
    }
}

/// Parse the config text. Every`section.key=value` must be known.
pub fn parse_config(text: &str, path: &str) -> Result<ExperimentConfig> {
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: path.to_string(),
            line: i + 1,
            msg: format!("expected 'key=value', got '{line}'"),
        })?;
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    let mut raw = Raw { map };

    // Benchmark: synthetic by default, CSV when train_csv given.
    let benchmark = if let Some(train) = raw.take("benchmark.train_csv") {
        let test = raw.take("benchmark.test_csv").map(PathBuf::from);
        let partition_text = raw
            .take("benchmark.partition")
            .ok_or_else(|| bad("benchmark.partition", "required for CSV benchmarks"))?;
        let partition: Vec<Vec<usize>> = partition_text
            .split(';')
            .map(|set| {
                set.split(',')
                    .map(|c| {
                        c.trim().parse().map_err(|_| {
                            bad("benchmark.partition", format!("bad class id '{c}'"))
                        })
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        BenchmarkSpec::Csv {
            train: PathBuf::from(train),
            test,
            partition,
        }
    } else {
        let spec = SyntheticSpec {
            tasks: raw.parse("benchmark.tasks", 5usize)?,
            classes_per_task: raw.parse("benchmark.classes_per_task", 2usize)?,
            input_dim: raw.parse("benchmark.input_dim", 20usize)?,
            train_per_class: raw.parse("benchmark.train_per_class", 100usize)?,
            test_per_class: raw.parse("benchmark.test_per_class", 100usize)?,
            separation: raw.parse("benchmark.separation", 4.0f64)?,
            seed: 0,
        };
        spec.validate()
            .map_err(|e| bad("benchmark", e.to_string()))?;
        BenchmarkSpec::Synthetic {
            spec,
            pinned_seed: raw.parse_opt("benchmark.seed")?,
        }
    };

    // Hosts: shared knobs, one config per listed category.
    let host_names: Vec<String> = raw.list(
        "hosts",
        vec![
            "distill".into(),
            "replay".into(),
            "reg".into(),
            "dyn".into(),
        ],
    )?;
    let alpha_s = raw.parse("host.alpha_s", 1.0f64)?;
    let learning_rate = raw.parse("host.learning_rate", 0.01f64)?;
    let batch_size = raw.parse("host.batch_size", 32usize)?;
    let epochs_cl = raw.parse("host.epochs", 30usize)?;
    let buffer_capacity = raw.parse("host.buffer_capacity", 200usize)?;
    let gamma = raw.parse("host.gamma", 0.9f64)?;
    let tau = raw.parse("host.tau", 2.0f64)?;
    let lambda_weights: Option<Vec<f64>> = match raw.take("host.lambda_weights") {
        None => None,
        Some(v) => Some(
            v.split(',')
                .map(|f| {
                    f.trim().parse().map_err(|_| {
                        bad("host.lambda_weights", format!("cannot parse '{f}'"))
                    })
                })
                .collect::<Result<_>>()?,
        ),
    };
    let alignment = match raw.take("host.alignment").as_deref() {
        None | Some("logits") => AlignmentSpace::Logits,
        Some("embeddings") => AlignmentSpace::Embeddings,
        Some(other) => {
            return Err(bad(
                "host.alignment",
                format!("expected 'logits' or 'embeddings', got '{other}'"),
            ))
        }
    };
    let hosts: Vec<HostConfig> = host_names
        .iter()
        .map(|name| {
            let category = Category::parse(name).map_err(|e| bad("hosts", e.to_string()))?;
            let mut cfg = HostConfig::new(category);
            cfg.alpha_s = alpha_s;
            cfg.learning_rate = learning_rate;
            cfg.batch_size = batch_size;
            cfg.epochs_cl = epochs_cl;
            cfg.buffer_capacity = buffer_capacity;
            cfg.gamma = gamma;
            cfg.tau = tau;
            cfg.lambda_weights = lambda_weights.clone();
            cfg.alignment = alignment;
            cfg.fisher_mode = FisherMode::Diag;
            cfg.validate().map_err(|e| bad("host", e.to_string()))?;
            Ok(cfg)
        })
        .collect::<Result<_>>()?;
    if hosts.is_empty() {
        return Err(bad("hosts", "at least one host required"));
    }

    let fl = FlConfig {
        e1: raw.parse("fl.e1", 5usize)?,
        e2: raw.parse("fl.e2", 25usize)?,
        alpha_p: raw.parse("fl.alpha_p", 0.3f64)?,
    };
    fl.validate().map_err(|e| bad("fl", e.to_string()))?;

    let mode_names: Vec<String> = raw.list("modes", vec!["CL".into(), "FL".into()])?;
    let modes: Vec<Mode> = mode_names
        .iter()
        .map(|m| Mode::parse(m).map_err(|e| bad("modes", e.to_string())))
        .collect::<Result<_>>()?;
    if modes.is_empty() {
        return Err(bad("modes", "at least one mode required"));
    }

    let seeds: Vec<u64> = raw.list("seeds", vec![0])?;
    if seeds.is_empty() {
        return Err(bad("seeds", "at least one seed required"));
    }

    let regime_names: Vec<String> = raw.list("regimes", vec!["CI".into(), "TI".into()])?;
    let regimes: Vec<Regime> = regime_names
        .iter()
        .map(|r| Regime::parse(r).map_err(|e| bad("regimes", e.to_string())))
        .collect::<Result<_>>()?;
    if regimes.is_empty() {
        return Err(bad("regimes", "at least one regime required"));
    }

    let output_dir = PathBuf::from(raw.take("output_dir").unwrap_or_else(|| "out".into()));
    let workers = raw.parse("workers", 0usize)?; // 0 = auto
    let hidden: Vec<usize> = raw.list("model.hidden", vec![64, 64])?;
    let embed_dim = raw.parse("model.embed_dim", 16usize)?;

    if let Some(key) = raw.map.keys().next() {
        return Err(bad(key, "unknown config key"));
    }

    Ok(ExperimentConfig {
        benchmark,
        hosts,
        fl,
        modes,
        seeds,
        regimes,
        output_dir,
        workers,
        hidden,
        embed_dim,
    })
}

/// Parse a config file from disk.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_config(&text, &path.display().to_string())
}
