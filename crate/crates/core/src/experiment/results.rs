//! Run results on disk and their per-cell summaries.
//!
//! `results.csv` has the header
//!
//! ```text
//! method,seed,heterogeneity,accuracy,mse,nll,ece,rounds,uplink_bytes,downlink_bytes,wall_seconds,events,error
//! ```
//!
//! with metrics that do not apply to the task left empty. Floats are written
//! in shortest round-trip form, so parsing the file recovers the values
//! exactly. `results.jsonl` mirrors it with one JSON object per line.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::Method;

pub const RESULTS_CSV: &str = "results.csv";
pub const RESULTS_JSONL: &str = "results.jsonl";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const CURVES_CSV: &str = "curves.csv";

pub const METRICS: [&str; 4] = ["accuracy", "mse", "nll", "ece"];

const HEADER: [&str; 13] = [
    "method",
    "seed",
    "heterogeneity",
    "accuracy",
    "mse",
    "nll",
    "ece",
    "rounds",
    "uplink_bytes",
    "downlink_bytes",
    "wall_seconds",
    "events",
    "error",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub method: Method,
    pub seed: u64,
    pub heterogeneity: f64,
    pub metrics: BTreeMap<String, f64>,
    pub rounds: usize,
    pub uplink_bytes: u64,
    pub downlink_bytes: u64,
    pub wall_seconds: f64,
    /// Clamp and floor events during aggregation and prediction.
    pub events: usize,
    pub error: Option<String>,
}

impl RunResult {
    pub fn empty(method: Method, seed: u64, heterogeneity: f64) -> Self {
        Self {
            method,
            seed,
            heterogeneity,
            metrics: BTreeMap::new(),
            rounds: 0,
            uplink_bytes: 0,
            downlink_bytes: 0,
            wall_seconds: 0.0,
            events: 0,
            error: None,
        }
    }

    /// Directory-safe cell label, e.g. `predictive_bayes_h0.7_s2`.
    pub fn cell_name(&self) -> String {
        format!("{}_h{}_s{}", self.method, self.heterogeneity, self.seed)
    }

    fn to_record(&self) -> Vec<String> {
        let mut rec = vec![
            self.method.to_string(),
            self.seed.to_string(),
            self.heterogeneity.to_string(),
        ];
        for m in METRICS {
            rec.push(self.metrics.get(m).map(f64::to_string).unwrap_or_default());
        }
        rec.extend([
            self.rounds.to_string(),
            self.uplink_bytes.to_string(),
            self.downlink_bytes.to_string(),
            self.wall_seconds.to_string(),
            self.events.to_string(),
            self.error.clone().unwrap_or_default(),
        ]);
        rec
    }

    fn from_record(rec: &csv::StringRecord, line: usize) -> Result<Self> {
        let field = |i: usize| rec.get(i).unwrap_or("");
        let bad = |i: usize| Error::Config {
            line,
            key: HEADER[i].to_string(),
            message: format!("cannot parse `{}`", field(i)),
        };
        if rec.len() != HEADER.len() {
            return Err(Error::Config {
                line,
                key: "record".into(),
                message: format!("expected {} fields, found {}", HEADER.len(), rec.len()),
            });
        }
        let method = Method::parse(field(0)).ok_or_else(|| bad(0))?;
        let mut metrics = BTreeMap::new();
        for (k, name) in METRICS.iter().enumerate() {
            let raw = field(3 + k);
            if !raw.is_empty() {
                metrics.insert(name.to_string(), raw.parse().map_err(|_| bad(3 + k))?);
            }
        }
        let error = match field(12) {
            "" => None,
            e => Some(e.to_string()),
        };
        Ok(Self {
            method,
            seed: field(1).parse().map_err(|_| bad(1))?,
            heterogeneity: field(2).parse().map_err(|_| bad(2))?,
            metrics,
            rounds: field(7).parse().map_err(|_| bad(7))?,
            uplink_bytes: field(8).parse().map_err(|_| bad(8))?,
            downlink_bytes: field(9).parse().map_err(|_| bad(9))?,
            wall_seconds: field(10).parse().map_err(|_| bad(10))?,
            events: field(11).parse().map_err(|_| bad(11))?,
            error,
        })
    }
}

/// Appends results to `results.csv` and `results.jsonl`, flushing after
/// every record.
pub struct ResultsWriter {
    csv: csv::Writer<File>,
    jsonl: File,
}

impl ResultsWriter {
    /// Create (truncating) both files in `dir` and write the CSV header.
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join(RESULTS_CSV);
        let json_path = dir.join(RESULTS_JSONL);
        let file = File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        let mut csv = csv::Writer::from_writer(file);
        csv.write_record(HEADER)?;
        csv.flush().map_err(|e| Error::io(&csv_path, e))?;
        let jsonl = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(&json_path)
            .map_err(|e| Error::io(&json_path, e))?;
        Ok(Self { csv, jsonl })
    }

    pub fn append(&mut self, r: &RunResult) -> Result<()> {
        self.csv.write_record(r.to_record())?;
        self.csv.flush().map_err(|e| Error::io(RESULTS_CSV, e))?;
        let mut line = serde_json::to_string(r)?;
        line.push('\n');
        self.jsonl
            .write_all(line.as_bytes())
            .map_err(|e| Error::io(RESULTS_JSONL, e))
    }
}

pub fn read_results_csv(path: &Path) -> Result<Vec<RunResult>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::InvalidConfig(format!("{}: {other:?}", path.display())),
    })?;
    reader
        .records()
        .enumerate()
        .map(|(i, rec)| RunResult::from_record(&rec?, i + 2))
        .collect()
}

pub fn read_results_jsonl(path: &Path) -> Result<Vec<RunResult>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: Method,
    pub heterogeneity: f64,
    pub metric: String,
    pub mean: f64,
    /// Sample standard deviation (n − 1); 0 for a single seed.
    pub std: f64,
    pub n: usize,
    pub min: f64,
    pub max: f64,
}

/// Mean ± sample std over seeds for every (method, heterogeneity, metric).
/// Failed cells are left out. Rows are ordered by method, heterogeneity,
/// then metric name.
pub fn summarize(results: &[RunResult]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(Method, u64, String), Vec<(u64, f64)>> = BTreeMap::new();
    for r in results.iter().filter(|r| r.error.is_none()) {
        for (metric, &v) in &r.metrics {
            groups
                .entry((r.method, r.heterogeneity.to_bits(), metric.clone()))
                .or_default()
                .push((r.seed, v));
        }
    }
    groups
        .into_iter()
        .map(|((method, h_bits, metric), mut values)| {
            // Seed order fixes the summation order.
            values.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
            let xs: Vec<f64> = values.into_iter().map(|(_, v)| v).collect();
            let n = xs.len();
            // Deviations from the first value keep duplicate seeds exact.
            let pivot = xs[0];
            let offset = xs.iter().map(|x| x - pivot).sum::<f64>() / n as f64;
            let mean = pivot + offset;
            let std = if n > 1 {
                let ss: f64 = xs.iter().map(|x| (x - pivot - offset).powi(2)).sum();
                (ss / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            let min = xs.iter().copied().fold(f64::INFINITY, f64::min);
            let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            SummaryRow {
                method,
                heterogeneity: f64::from_bits(h_bits),
                metric,
                // The clamp guards against rounding pushing the mean outside the data.
                mean: mean.clamp(min, max),
                std,
                n,
                min,
                max,
            }
        })
        .collect()
}

pub fn summary_csv(rows: &[SummaryRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "method",
        "heterogeneity",
        "metric",
        "mean",
        "std",
        "n",
        "min",
        "max",
    ])?;
    for r in rows {
        w.write_record([
            r.method.to_string(),
            r.heterogeneity.to_string(),
            r.metric.clone(),
            r.mean.to_string(),
            r.std.to_string(),
            r.n.to_string(),
            r.min.to_string(),
            r.max.to_string(),
        ])?;
    }
    into_string(w)
}

/// Wide table with one row per heterogeneity level and `mean`/`std`
/// columns per (method, metric), for plotting metric-versus-heterogeneity
/// curves.
pub fn curves_csv(rows: &[SummaryRow]) -> Result<String> {
    let mut levels: Vec<f64> = rows.iter().map(|r| r.heterogeneity).collect();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    let mut series: Vec<(Method, String)> = rows.iter().map(|r| (r.method, r.metric.clone())).collect();
    series.sort();
    series.dedup();

    let mut header = vec!["heterogeneity".to_string()];
    for (m, metric) in &series {
        header.push(format!("{m}_{metric}_mean"));
        header.push(format!("{m}_{metric}_std"));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header)?;
    for &h in &levels {
        let mut rec = vec![h.to_string()];
        for (m, metric) in &series {
            match rows
                .iter()
                .find(|r| r.method == *m && r.metric == *metric && r.heterogeneity == h)
            {
                Some(r) => {
                    rec.push(r.mean.to_string());
                    rec.push(r.std.to_string());
                }
                None => rec.extend([String::new(), String::new()]),
            }
        }
        w.write_record(&rec)?;
    }
    into_string(w)
}

fn into_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| Error::InvalidConfig(format!("CSV buffer: {e}")))?;
    Ok(String::from_utf8(bytes).expect("CSV output is UTF-8"))
}

/// Write `summary.csv` and `curves.csv` into `dir`.
pub fn write_summary_files(dir: &Path, results: &[RunResult]) -> Result<Vec<SummaryRow>> {
    let rows = summarize(results);
    for (name, text) in [
        (SUMMARY_CSV, summary_csv(&rows)?),
        (CURVES_CSV, curves_csv(&rows)?),
    ] {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(rows)
}

/// Re-read `results.csv` in `dir` and regenerate the summary files.
pub fn compare(dir: &Path) -> Result<Vec<SummaryRow>> {
    let results = read_results_csv(&dir.join(RESULTS_CSV))?;
    write_summary_files(dir, &results)
}
