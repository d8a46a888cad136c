//! Experiment cells: split, normalize, partition, train, evaluate.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{mpsc, Arc};
use std::time::Instant;

use rayon::prelude::*;

use super::config::{DatasetSource, ExperimentConfig};
use super::metrics::{metric_accuracy, metric_categorical_nll, metric_ece, metric_gaussian_nll, metric_mse};
use super::results::{write_summary_files, ResultsWriter, RunResult};
use crate::data::{
    apply_normalizer, class_histogram, fit_normalizer, load_csv, load_idx, partition_indices, split_indices,
    synth_classification, synth_regression, CsvSchema, Dataset, NormalizerStats, PartitionSpec,
};
use crate::error::{Error, Result};
use crate::federation::{
    clients_from_partition, run_ep_mcmc, run_fedavg, run_predictive_bayes, CommLedger, EnsembleMembers,
    Execution, GlobalEnsemble, Method,
};
use crate::nn::{init_params, Architecture, InitMode, Targets};
use crate::posterior::PredictiveSummary;
use crate::rng::{derive_seed, stream};
use crate::sampler::{sgd_train, SgdConfig};

pub const ECE_BINS: usize = 15;
pub const NORMALIZER_FILE: &str = "normalizer.json";
pub const TEST_FILE: &str = "test.csv";

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let seed = cfg.dataset.seed;
    match &cfg.dataset.source {
        DatasetSource::Classification {
            kind,
            n,
            classes,
            dim,
            separation,
        } => synth_classification(*kind, *n, *classes, *dim, *separation, seed),
        DatasetSource::Regression { kind, n, noise_std } => synth_regression(*kind, *n, *noise_std, seed),
        DatasetSource::Csv {
            path,
            delimiter,
            header,
            features,
            target,
            task,
        } => {
            let target = match target {
                Some(t) => *t,
                None => csv_width(path, *delimiter, *header)?.saturating_sub(1),
            };
            let schema = CsvSchema {
                features: features.clone(),
                target,
                task: *task,
                has_header: *header,
                delimiter: *delimiter,
            };
            Ok(load_csv(path, &schema)?.0)
        }
        DatasetSource::Idx { images, labels } => load_idx(images, labels),
    }
}

/// Column count of the first record (or the header).
fn csv_width(path: &Path, delimiter: u8, header: bool) -> Result<usize> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(header)
        .delimiter(delimiter)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
    if header {
        return Ok(reader.headers()?.len());
    }
    match reader.records().next() {
        Some(r) => Ok(r?.len()),
        None => Err(Error::EmptyDataset(path.display().to_string())),
    }
}

/// Train/test data for one seed. `train` and `test` are normalized with
/// statistics fitted on the training part; `raw_test` keeps original units.
#[derive(Debug, Clone)]
pub struct PreparedSplit {
    pub train: Dataset,
    pub test: Dataset,
    pub raw_test: Dataset,
    pub stats: NormalizerStats,
}

pub fn prepare_split(cfg: &ExperimentConfig, ds: &Dataset, seed: u64) -> Result<PreparedSplit> {
    let (train_idx, test_idx) = split_indices(
        ds.len(),
        cfg.dataset.test_fraction,
        derive_seed(seed, stream::SPLIT),
    )?;
    let raw_train = ds.subset(&train_idx);
    let raw_test = ds.subset(&test_idx);
    let stats = fit_normalizer(&raw_train);
    Ok(PreparedSplit {
        train: apply_normalizer(&stats, &raw_train)?,
        test: apply_normalizer(&stats, &raw_test)?,
        raw_test,
        stats,
    })
}

pub fn architecture(cfg: &ExperimentConfig, ds: &Dataset) -> Result<Arc<Architecture>> {
    Ok(Arc::new(Architecture::mlp(
        ds.dim(),
        &cfg.hidden,
        ds.output_dim(),
        ds.task(),
    )?))
}

fn execution(cfg: &ExperimentConfig) -> Execution {
    if cfg.parallel_clients {
        Execution::Parallel
    } else {
        Execution::Sequential
    }
}

/// Train one method on a partitioned training set.
pub fn run_method(
    cfg: &ExperimentConfig,
    method: Method,
    train: &Dataset,
    heterogeneity: f64,
    seed: u64,
) -> Result<(GlobalEnsemble, CommLedger)> {
    let arch = architecture(cfg, train)?;
    let partition = partition_indices(
        train,
        &PartitionSpec {
            n_clients: cfg.n_clients,
            heterogeneity,
            seed: derive_seed(seed, stream::PARTITION),
        },
    )?;
    let clients = clients_from_partition(partition.materialize(train), derive_seed(seed, stream::CLIENT));
    let exec = execution(cfg);
    match method {
        Method::PredictiveBayes => {
            let prior = cfg.prior.resolve(train.task(), train.output_dim());
            run_predictive_bayes(
                &clients,
                &arch,
                &cfg.lik,
                &cfg.sampler,
                &cfg.aggregation,
                &prior,
                seed,
                exec,
            )
        }
        Method::EpMcmc => run_ep_mcmc(
            &clients,
            &arch,
            &cfg.lik,
            &cfg.sampler,
            &cfg.aggregation,
            cfg.ep_samples,
            seed,
            exec,
        ),
        Method::Fedavg => run_fedavg(&clients, &arch, &cfg.lik, &cfg.sgd, cfg.fedavg_rounds, seed, exec),
        Method::FedavgOneRound => run_fedavg(&clients, &arch, &cfg.lik, &cfg.sgd, 1, seed, exec),
    }
}

/// Non-federated reference: `sgd_train` on the pooled training set with the
/// FedAvg initialization and epoch budget.
pub fn run_centralized(cfg: &ExperimentConfig, train: &Dataset, seed: u64) -> Result<GlobalEnsemble> {
    let arch = architecture(cfg, train)?;
    let start = init_params(
        &arch,
        derive_seed(seed, stream::INIT),
        InitMode::KaimingLike,
        cfg.lik.prior_variance,
    );
    let sgd = SgdConfig {
        seed: derive_seed(seed, stream::SHUFFLE),
        ..cfg.sgd
    };
    let params = sgd_train(&start, train, &cfg.lik, &sgd)?;
    Ok(GlobalEnsemble {
        method: Method::FedavgOneRound,
        arch,
        lik: cfg.lik,
        members: EnsembleMembers::Single(params),
        prior: crate::posterior::PriorPredictiveConfig::uniform(),
        aggregation: cfg.aggregation,
        prior_seed: 0,
        build_events: 0,
    })
}

/// Test metrics for `ensemble` on (normalized) `test`, plus the number of
/// clamp/floor events incurred while predicting.
pub fn evaluate(ensemble: &GlobalEnsemble, test: &Dataset) -> Result<(BTreeMap<String, f64>, usize)> {
    let prediction = ensemble.predict(test.features.view())?;
    let mut metrics = BTreeMap::new();
    match &test.targets {
        Targets::Labels { labels, .. } => {
            let probs: Vec<Vec<f64>> = prediction
                .summaries
                .iter()
                .map(|s| s.probs().map(<[f64]>::to_vec))
                .collect::<Option<_>>()
                .ok_or_else(|| Error::InvalidConfig("expected classification predictions".into()))?;
            metrics.insert("accuracy".into(), metric_accuracy(&probs, labels)?);
            metrics.insert(
                "nll".into(),
                metric_categorical_nll(&probs, labels, ensemble.aggregation.prob_floor)?,
            );
            metrics.insert("ece".into(), metric_ece(&probs, labels, ECE_BINS)?);
        }
        Targets::Continuous(y) => {
            let targets: Vec<Vec<f64>> = y.rows().into_iter().map(|r| r.to_vec()).collect();
            let means: Vec<Vec<f64>> = prediction
                .summaries
                .iter()
                .map(|s| match s {
                    PredictiveSummary::Regression { mean, .. } => Ok(mean.clone()),
                    PredictiveSummary::Classification { .. } => {
                        Err(Error::InvalidConfig("expected regression predictions".into()))
                    }
                })
                .collect::<Result<_>>()?;
            metrics.insert("mse".into(), metric_mse(&means, &targets)?);
            metrics.insert(
                "nll".into(),
                metric_gaussian_nll(&prediction.summaries, &targets)?,
            );
        }
    }
    Ok((metrics, prediction.events))
}

/// One (method, seed, heterogeneity) cell. Failures are recorded in the
/// result instead of being returned.
pub fn run_cell(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    method: Method,
    seed: u64,
    heterogeneity: f64,
) -> RunResult {
    let started = Instant::now();
    let mut result = RunResult::empty(method, seed, heterogeneity);
    let outcome = (|| -> Result<()> {
        let split = prepare_split(cfg, ds, seed)?;
        let (ensemble, ledger) = run_method(cfg, method, &split.train, heterogeneity, seed)?;
        let (metrics, events) = evaluate(&ensemble, &split.test)?;
        result.metrics = metrics;
        result.rounds = ledger.rounds;
        result.uplink_bytes = ledger.total_uplink();
        result.downlink_bytes = ledger.total_downlink();
        result.events = events + ensemble.build_events;
        if cfg.save_ensembles {
            if let Some(out) = &cfg.output_dir {
                save_cell(&out.join("ensembles").join(result.cell_name()), &ensemble, &split)?;
            }
        }
        Ok(())
    })();
    if let Err(e) = outcome {
        result.metrics.clear();
        result.error = Some(e.to_string());
    }
    result.wall_seconds = started.elapsed().as_secs_f64();
    result
}

fn save_cell(dir: &Path, ensemble: &GlobalEnsemble, split: &PreparedSplit) -> Result<()> {
    ensemble.save(dir)?;
    let path = dir.join(NORMALIZER_FILE);
    fs::write(&path, serde_json::to_string_pretty(&split.stats)?).map_err(|e| Error::io(&path, e))?;
    write_dataset_csv(&dir.join(TEST_FILE), &split.raw_test)
}

/// Features followed by the target column(s), with a header row. Values use
/// shortest round-trip formatting so a reload is exact.
pub fn write_dataset_csv(path: &Path, ds: &Dataset) -> Result<()> {
    let mut out = String::new();
    let mut header: Vec<String> = (0..ds.dim()).map(|j| format!("x{j}")).collect();
    match &ds.targets {
        Targets::Labels { .. } => header.push("y".into()),
        Targets::Continuous(y) if y.ncols() == 1 => header.push("y".into()),
        Targets::Continuous(y) => header.extend((0..y.ncols()).map(|j| format!("y{j}"))),
    }
    out.push_str(&header.join(","));
    out.push('\n');
    for i in 0..ds.len() {
        let mut fields: Vec<String> = ds.features.row(i).iter().map(|v| v.to_string()).collect();
        match &ds.targets {
            Targets::Labels { labels, .. } => fields.push(labels[i].to_string()),
            Targets::Continuous(y) => fields.extend(y.row(i).iter().map(|v| v.to_string())),
        }
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Score a saved ensemble on a comma-separated file with a header row and
/// the target in the last column. A `normalizer.json` next to the manifest
/// is applied first.
pub fn evaluate_saved(ensemble_path: &Path, data_path: &Path) -> Result<BTreeMap<String, f64>> {
    let ensemble = GlobalEnsemble::load(ensemble_path)?;
    let dir = if ensemble_path.is_dir() {
        ensemble_path.to_path_buf()
    } else {
        ensemble_path.parent().map(Path::to_path_buf).unwrap_or_default()
    };
    let task = ensemble.arch.task();
    let width = csv_width(data_path, b',', true)?;
    let schema = CsvSchema {
        features: None,
        target: width.saturating_sub(1),
        task,
        has_header: true,
        delimiter: b',',
    };
    let (mut data, _) = load_csv(data_path, &schema)?;
    if let Targets::Labels { labels, .. } = &data.targets {
        // The file may not contain every class; the ensemble decides the width.
        let classes = ensemble.arch.output_dim();
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidConfig(format!(
                "label {bad} outside the ensemble's {classes} classes"
            )));
        }
        data = Dataset::new(
            data.name.clone(),
            data.features.clone(),
            Targets::Labels {
                labels: labels.clone(),
                classes,
            },
        )?;
    }
    let norm_path = dir.join(NORMALIZER_FILE);
    if norm_path.exists() {
        let text = fs::read_to_string(&norm_path).map_err(|e| Error::io(&norm_path, e))?;
        let stats: NormalizerStats = serde_json::from_str(&text)?;
        data = apply_normalizer(&stats, &data)?;
    }
    Ok(evaluate(&ensemble, &data)?.0)
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub results: Vec<RunResult>,
    pub output_dir: Option<PathBuf>,
}

impl ExperimentReport {
    pub fn failures(&self) -> usize {
        self.results.iter().filter(|r| r.error.is_some()).count()
    }
}

/// All (method, seed, heterogeneity) cells in that nesting order.
pub fn cells(cfg: &ExperimentConfig) -> Vec<(Method, u64, f64)> {
    let levels = cfg.heterogeneity_levels();
    let mut out = Vec::new();
    for &method in &cfg.methods {
        for &seed in &cfg.seeds {
            for &h in &levels {
                out.push((method, seed, h));
            }
        }
    }
    out
}

/// Run every cell. With an output directory, results are appended to
/// `results.csv` / `results.jsonl` as cells finish and the summary files are
/// written at the end.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let ds = load_dataset(cfg)?;
    let cells = cells(cfg);

    let writer = match &cfg.output_dir {
        Some(dir) => Some(ResultsWriter::create(dir)?),
        None => None,
    };
    let (tx, rx) = mpsc::channel::<RunResult>();
    let sink = std::thread::spawn(move || -> Result<()> {
        let mut writer = writer;
        for r in rx {
            if let Some(w) = writer.as_mut() {
                w.append(&r)?;
            }
        }
        Ok(())
    });

    let results: Vec<RunResult> = if cfg.parallel_cells {
        cells
            .par_iter()
            .map_with(tx.clone(), |tx, &(m, s, h)| {
                let r = run_cell(cfg, &ds, m, s, h);
                let _ = tx.send(r.clone());
                r
            })
            .collect()
    } else {
        cells
            .iter()
            .map(|&(m, s, h)| {
                let r = run_cell(cfg, &ds, m, s, h);
                let _ = tx.send(r.clone());
                r
            })
            .collect()
    };
    drop(tx);
    sink.join().expect("results writer thread")?;

    if let Some(dir) = &cfg.output_dir {
        write_summary_files(dir, &results)?;
    }
    Ok(ExperimentReport {
        results,
        output_dir: cfg.output_dir.clone(),
    })
}

/// Per-heterogeneity client class histograms (or client sizes, for
/// regression, as single-bin histograms) of the full dataset, partitioned
/// with the first seed.
pub fn inspect_partitions(cfg: &ExperimentConfig) -> Result<Vec<(f64, Vec<Vec<usize>>)>> {
    cfg.validate()?;
    let ds = load_dataset(cfg)?;
    let seed = cfg.seeds[0];
    cfg.heterogeneity_levels()
        .into_iter()
        .map(|h| {
            let part = partition_indices(
                &ds,
                &PartitionSpec {
                    n_clients: cfg.n_clients,
                    heterogeneity: h,
                    seed: derive_seed(seed, stream::PARTITION),
                },
            )?;
            let hists = match &ds.targets {
                Targets::Labels { labels, classes } => part
                    .client_indices
                    .iter()
                    .map(|idx| {
                        let ls: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
                        class_histogram(&ls, *classes)
                    })
                    .collect(),
                Targets::Continuous(_) => part.sizes().into_iter().map(|s| vec![s]).collect(),
            };
            Ok((h, hists))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::config::ExperimentConfig;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig::parse(
            "\
dataset.kind = blobs
dataset.n = 200
dataset.classes = 4
dataset.dim = 4
experiment.methods = predictive_bayes, fedavg_1round
experiment.seeds = 0
experiment.heterogeneity = 0.5
model.hidden = 8
sampler.cycles = 2
sampler.epochs_per_cycle = 2
sgd.epochs = 2
",
            Path::new(""),
        )
        .unwrap()
    }

    #[test]
    fn cells_nest_method_seed_level() {
        let mut cfg = tiny();
        cfg.seeds = vec![0, 1];
        cfg.heterogeneity = Some(vec![0.0, 0.9]);
        let c = cells(&cfg);
        assert_eq!(c.len(), 8);
        assert_eq!(c[0], (Method::PredictiveBayes, 0, 0.0));
        assert_eq!(c[1], (Method::PredictiveBayes, 0, 0.9));
        assert_eq!(c[2], (Method::PredictiveBayes, 1, 0.0));
    }

    #[test]
    fn tiny_experiment_reports_metrics() {
        let report = run_experiment(&tiny()).unwrap();
        assert_eq!(report.results.len(), 2);
        for r in &report.results {
            assert!(r.error.is_none(), "{:?}", r.error);
            assert_eq!(r.rounds, 1);
            for key in ["accuracy", "nll", "ece"] {
                assert!(r.metrics[key].is_finite());
            }
        }
    }

    #[test]
    fn failing_cell_is_recorded() {
        let mut cfg = tiny();
        cfg.n_clients = 10_000;
        let report = run_experiment(&cfg).unwrap();
        assert_eq!(report.failures(), 2);
        assert!(report.results.iter().all(|r| r.metrics.is_empty()));
    }
}
