//! Flat `key = value` experiment configuration.
//!
//! Keys are `section.name`. A `[section]` line sets a prefix for the keys
//! that follow it; keys already containing a dot are taken as written. `#`
//! starts a comment. Lists are comma-separated. Unknown keys are errors.
//!
//! | key | default |
//! |-----|---------|
//! | `dataset.kind` | `blobs` (`blobs`, `sine`, `linear`, `csv`, `idx`) |
//! | `dataset.n` | 5000 |
//! | `dataset.classes` / `dataset.dim` / `dataset.separation` | 10 / 20 / 3.0 |
//! | `dataset.noise_std` | 0.1 |
//! | `dataset.seed` | 0 |
//! | `dataset.path`, `dataset.delimiter`, `dataset.header` | CSV source, `,`, `true` |
//! | `dataset.features`, `dataset.target`, `dataset.task` | all but target, last column, `regression` |
//! | `dataset.images`, `dataset.labels` | IDX files |
//! | `dataset.test_fraction` | 0.2 |
//! | `experiment.n_clients` | 5 |
//! | `experiment.heterogeneity` | `0, 0.7, 0.9` (`0` for regression) |
//! | `experiment.methods` | all four |
//! | `experiment.seeds` | `0, 1, 2` |
//! | `experiment.output_dir` | none |
//! | `experiment.save_ensembles` | `false` |
//! | `experiment.parallel_clients` / `experiment.parallel_cells` | `false` |
//! | `model.hidden` | `100` |
//! | `model.prior_variance` / `model.noise_variance` | 1.0 / 0.1 |
//! | `sampler.*` | fields of [`CsghmcConfig`] except `seed` |
//! | `sgd.learning_rate` / `momentum` / `epochs` / `batch_size` / `rounds` | 0.01 / 0.9 / 25 / 64 / 5 |
//! | `prior.mode` | `auto` (`uniform`, `fixed`, `sampled`) |
//! | `prior.mean` / `prior.variance` / `prior.samples` | 0 / 100 / 20 |
//! | `aggregation.sign` | `minus` (or `plus`) |
//! | `aggregation.precision_floor` / `aggregation.prob_floor` | 1e-6 / 1e-6 |
//! | `ep_mcmc.samples` | 10 |
//!
//! Relative paths resolve against the directory holding the config file.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::aggregation::{AggregationConfig, SignConvention};
use crate::data::{ClassificationKind, RegressionKind};
use crate::error::{Error, Result};
use crate::federation::Method;
use crate::nn::{LikelihoodSpec, Task};
use crate::posterior::{PriorPredictiveConfig, PriorPredictiveMode};
use crate::sampler::{CsghmcConfig, SgdConfig};

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    Classification {
        kind: ClassificationKind,
        n: usize,
        classes: usize,
        dim: usize,
        separation: f64,
    },
    Regression {
        kind: RegressionKind,
        n: usize,
        noise_std: f64,
    },
    Csv {
        path: PathBuf,
        delimiter: u8,
        header: bool,
        features: Option<Vec<usize>>,
        target: Option<usize>,
        task: Task,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub source: DatasetSource,
    /// Seed of the synthetic generators; ignored for files.
    pub seed: u64,
    pub test_fraction: f64,
}

/// `None` picks uniform classes for classification and a fixed Gaussian for
/// regression.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorSpec {
    pub mode: Option<PriorPredictiveMode>,
    pub mean: f64,
    pub variance: f64,
    pub samples: usize,
}

impl PriorSpec {
    pub fn resolve(&self, task: Task, output_dim: usize) -> PriorPredictiveConfig {
        let mode = self.mode.unwrap_or(match task {
            Task::Classification => PriorPredictiveMode::UniformClasses,
            Task::Regression => PriorPredictiveMode::FixedGaussian,
        });
        match mode {
            PriorPredictiveMode::UniformClasses => PriorPredictiveConfig::uniform(),
            PriorPredictiveMode::FixedGaussian => {
                PriorPredictiveConfig::fixed(vec![self.mean; output_dim], vec![self.variance; output_dim])
            }
            PriorPredictiveMode::SampledPrior => PriorPredictiveConfig::sampled(self.samples),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub n_clients: usize,
    /// `None` means the task default.
    pub heterogeneity: Option<Vec<f64>>,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub hidden: Vec<usize>,
    pub lik: LikelihoodSpec,
    pub sampler: CsghmcConfig,
    pub sgd: SgdConfig,
    pub fedavg_rounds: usize,
    pub prior: PriorSpec,
    pub aggregation: AggregationConfig,
    pub ep_samples: usize,
    pub output_dir: Option<PathBuf>,
    pub save_ensembles: bool,
    pub parallel_clients: bool,
    pub parallel_cells: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec {
                source: DatasetSource::Classification {
                    kind: ClassificationKind::GaussianBlobs,
                    n: 5000,
                    classes: 10,
                    dim: 20,
                    separation: 3.0,
                },
                seed: 0,
                test_fraction: 0.2,
            },
            n_clients: 5,
            heterogeneity: None,
            methods: Method::ALL.to_vec(),
            seeds: vec![0, 1, 2],
            hidden: vec![100],
            lik: LikelihoodSpec::default(),
            sampler: CsghmcConfig::default(),
            sgd: SgdConfig::default(),
            fedavg_rounds: 5,
            prior: PriorSpec {
                mode: None,
                mean: 0.0,
                variance: 100.0,
                samples: 20,
            },
            aggregation: AggregationConfig::default(),
            ep_samples: 10,
            output_dir: None,
            save_ensembles: false,
            parallel_clients: false,
            parallel_cells: false,
        }
    }
}

impl ExperimentConfig {
    pub fn task(&self) -> Task {
        match &self.dataset.source {
            DatasetSource::Classification { .. } | DatasetSource::Idx { .. } => Task::Classification,
            DatasetSource::Regression { .. } => Task::Regression,
            DatasetSource::Csv { task, .. } => *task,
        }
    }

    pub fn heterogeneity_levels(&self) -> Vec<f64> {
        match (&self.heterogeneity, self.task()) {
            (Some(h), _) => h.clone(),
            (None, Task::Classification) => vec![0.0, 0.7, 0.9],
            (None, Task::Regression) => vec![0.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.methods.is_empty() {
            return bad("experiment.methods is empty");
        }
        if self.seeds.is_empty() {
            return bad("experiment.seeds is empty");
        }
        if self.n_clients == 0 {
            return bad("experiment.n_clients must be at least 1");
        }
        if self
            .heterogeneity_levels()
            .iter()
            .any(|h| !(0.0..=1.0).contains(h))
        {
            return bad("heterogeneity values must lie in [0, 1]");
        }
        if !(self.dataset.test_fraction > 0.0 && self.dataset.test_fraction < 1.0) {
            return bad("dataset.test_fraction must lie in (0, 1)");
        }
        if self.fedavg_rounds == 0 {
            return bad("sgd.rounds must be at least 1");
        }
        if self.ep_samples == 0 {
            return bad("ep_mcmc.samples must be at least 1");
        }
        self.lik.validate()?;
        self.sampler.validate()?;
        self.sgd.validate()?;
        self.aggregation.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::parse(&text, base)
    }

    /// Parse config text; relative paths are joined onto `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut raw = RawDataset::default();
        let mut cfg = ExperimentConfig::default();
        let mut section = String::new();
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| Error::Config {
                    line: line_no,
                    key: line.to_string(),
                    message: "unterminated section header".into(),
                })?;
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                line: line_no,
                key: line.to_string(),
                message: "expected `key = value`".into(),
            })?;
            let key = key.trim();
            let full = if key.contains('.') || section.is_empty() {
                key.to_string()
            } else {
                format!("{section}.{key}")
            };
            let entry = Entry {
                line: line_no,
                key: &full,
                value: value.trim(),
            };
            apply(&mut cfg, &mut raw, &entry, base)?;
        }
        cfg.dataset.source = raw.build(base)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

struct Entry<'a> {
    line: usize,
    key: &'a str,
    value: &'a str,
}

impl Entry<'_> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Config {
            line: self.line,
            key: self.key.to_string(),
            message: message.into(),
        }
    }

    fn parse<T: FromStr>(&self) -> Result<T> {
        self.value
            .parse()
            .map_err(|_| self.err(format!("cannot parse `{}`", self.value)))
    }

    fn list<T: FromStr>(&self) -> Result<Vec<T>> {
        self.value
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|_| self.err(format!("cannot parse list item `{s}`")))
            })
            .collect()
    }

    fn flag(&self) -> Result<bool> {
        match self.value {
            "true" | "yes" | "1" => Ok(true),
            "false" | "no" | "0" => Ok(false),
            other => Err(self.err(format!("expected a boolean, got `{other}`"))),
        }
    }
}

/// Dataset keys are gathered first and checked once the kind is known.
#[derive(Default)]
struct RawDataset {
    kind: Option<String>,
    n: Option<usize>,
    classes: Option<usize>,
    dim: Option<usize>,
    separation: Option<f64>,
    noise_std: Option<f64>,
    path: Option<String>,
    delimiter: Option<u8>,
    header: Option<bool>,
    features: Option<Vec<usize>>,
    target: Option<usize>,
    task: Option<Task>,
    images: Option<String>,
    labels: Option<String>,
}

impl RawDataset {
    fn build(self, base: &Path) -> Result<DatasetSource> {
        let missing =
            |k: &str| Error::InvalidConfig(format!("dataset.{k} is required for this dataset kind"));
        let kind = self.kind.as_deref().unwrap_or("blobs");
        Ok(match kind {
            "blobs" => DatasetSource::Classification {
                kind: ClassificationKind::GaussianBlobs,
                n: self.n.unwrap_or(5000),
                classes: self.classes.unwrap_or(10),
                dim: self.dim.unwrap_or(20),
                separation: self.separation.unwrap_or(3.0),
            },
            "sine" | "linear" => DatasetSource::Regression {
                kind: if kind == "sine" {
                    RegressionKind::Sine
                } else {
                    RegressionKind::Linear
                },
                n: self.n.unwrap_or(1000),
                noise_std: self.noise_std.unwrap_or(0.1),
            },
            "csv" => DatasetSource::Csv {
                path: base.join(self.path.ok_or_else(|| missing("path"))?),
                delimiter: self.delimiter.unwrap_or(b','),
                header: self.header.unwrap_or(true),
                features: self.features,
                target: self.target,
                task: self.task.unwrap_or(Task::Regression),
            },
            "idx" => DatasetSource::Idx {
                images: base.join(self.images.ok_or_else(|| missing("images"))?),
                labels: base.join(self.labels.ok_or_else(|| missing("labels"))?),
            },
            other => return Err(Error::InvalidConfig(format!("unknown dataset.kind `{other}`"))),
        })
    }
}

fn apply(cfg: &mut ExperimentConfig, raw: &mut RawDataset, e: &Entry<'_>, base: &Path) -> Result<()> {
    match e.key {
        "dataset.kind" => raw.kind = Some(e.value.to_string()),
        "dataset.n" => raw.n = Some(e.parse()?),
        "dataset.classes" => raw.classes = Some(e.parse()?),
        "dataset.dim" => raw.dim = Some(e.parse()?),
        "dataset.separation" => raw.separation = Some(e.parse()?),
        "dataset.noise_std" => raw.noise_std = Some(e.parse()?),
        "dataset.seed" => cfg.dataset.seed = e.parse()?,
        "dataset.path" => raw.path = Some(e.value.to_string()),
        "dataset.delimiter" => {
            let d = match e.value {
                "tab" | "\\t" => b'\t',
                "space" => b' ',
                "comma" => b',',
                "semicolon" => b';',
                v if v.len() == 1 => v.as_bytes()[0],
                v => return Err(e.err(format!("delimiter must be one byte, got `{v}`"))),
            };
            raw.delimiter = Some(d);
        }
        "dataset.header" => raw.header = Some(e.flag()?),
        "dataset.features" => raw.features = Some(e.list()?),
        "dataset.target" => raw.target = Some(e.parse()?),
        "dataset.task" => {
            raw.task = Some(match e.value {
                "regression" => Task::Regression,
                "classification" => Task::Classification,
                v => return Err(e.err(format!("unknown task `{v}`"))),
            })
        }
        "dataset.images" => raw.images = Some(e.value.to_string()),
        "dataset.labels" => raw.labels = Some(e.value.to_string()),
        "dataset.test_fraction" => cfg.dataset.test_fraction = e.parse()?,

        "experiment.n_clients" => cfg.n_clients = e.parse()?,
        "experiment.heterogeneity" => cfg.heterogeneity = Some(e.list()?),
        "experiment.methods" => {
            cfg.methods = e
                .value
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| Method::parse(s).ok_or_else(|| e.err(format!("unknown method `{s}`"))))
                .collect::<Result<_>>()?
        }
        "experiment.seeds" => cfg.seeds = e.list()?,
        "experiment.output_dir" => cfg.output_dir = Some(base.join(e.value)),
        "experiment.save_ensembles" => cfg.save_ensembles = e.flag()?,
        "experiment.parallel_clients" => cfg.parallel_clients = e.flag()?,
        "experiment.parallel_cells" => cfg.parallel_cells = e.flag()?,

        "model.hidden" => cfg.hidden = e.list()?,
        "model.prior_variance" => cfg.lik.prior_variance = e.parse()?,
        "model.noise_variance" => cfg.lik.noise_variance = e.parse()?,

        "sampler.cycles" => cfg.sampler.cycles = e.parse()?,
        "sampler.epochs_per_cycle" => cfg.sampler.epochs_per_cycle = e.parse()?,
        "sampler.initial_step" => cfg.sampler.initial_step = e.parse()?,
        "sampler.exploration_fraction" => cfg.sampler.exploration_fraction = e.parse()?,
        "sampler.friction" => cfg.sampler.friction = e.parse()?,
        "sampler.batch_size" => cfg.sampler.batch_size = e.parse()?,
        "sampler.samples_per_cycle" => cfg.sampler.samples_per_cycle = e.parse()?,

        "sgd.learning_rate" => cfg.sgd.learning_rate = e.parse()?,
        "sgd.momentum" => cfg.sgd.momentum = e.parse()?,
        "sgd.epochs" => cfg.sgd.epochs = e.parse()?,
        "sgd.batch_size" => cfg.sgd.batch_size = e.parse()?,
        "sgd.rounds" => cfg.fedavg_rounds = e.parse()?,

        "prior.mode" => {
            cfg.prior.mode = match e.value {
                "auto" => None,
                "uniform" => Some(PriorPredictiveMode::UniformClasses),
                "fixed" => Some(PriorPredictiveMode::FixedGaussian),
                "sampled" => Some(PriorPredictiveMode::SampledPrior),
                v => return Err(e.err(format!("unknown prior mode `{v}`"))),
            }
        }
        "prior.mean" => cfg.prior.mean = e.parse()?,
        "prior.variance" => cfg.prior.variance = e.parse()?,
        "prior.samples" => cfg.prior.samples = e.parse()?,

        "aggregation.sign" => {
            cfg.aggregation.sign_convention = match e.value {
                "minus" => SignConvention::Minus,
                "plus" => SignConvention::Plus,
                v => return Err(e.err(format!("unknown sign convention `{v}`"))),
            }
        }
        "aggregation.precision_floor" => cfg.aggregation.precision_floor = e.parse()?,
        "aggregation.prob_floor" => cfg.aggregation.prob_floor = e.parse()?,

        "ep_mcmc.samples" => cfg.ep_samples = e.parse()?,

        _ => return Err(e.err("unknown key")),
    }
    Ok(())
}
