//! Metrics files written next to each run.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use fedcspack_core::report::summarize;
use fedcspack_core::{RoundMetrics, RunConfig, RunSummary};
use serde::{Deserialize, Serialize};

pub const METRICS_CSV: &str = "metrics.csv";
pub const RUN_JSON: &str = "run.json";
pub const ACC_SERIES: &str = "acc_vs_round.csv";
pub const BYTES_SERIES: &str = "bytes_vs_round.csv";
pub const PER_CLIENT: &str = "per_client_acc.csv";

#[derive(Debug, thiserror::Error)]
pub enum ExportError {
    #[error("{}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}", path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Summary(#[from] fedcspack_core::Error),
}

/// One line of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub round: u32,
    pub method: String,
    pub global_acc: f64,
    pub personalized_acc: f64,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub wall_ms: f64,
    pub participants: usize,
    pub violations: u32,
}

impl From<&RoundMetrics> for MetricsRow {
    fn from(m: &RoundMetrics) -> Self {
        MetricsRow {
            round: m.round,
            method: m.method.clone(),
            global_acc: m.global_test_accuracy,
            personalized_acc: m.mean_personalized_accuracy,
            bytes_up: m.bytes_up,
            bytes_down: m.bytes_down,
            wall_ms: m.wall_ms,
            participants: m.participating.len(),
            violations: m.protocol_violations,
        }
    }
}

impl MetricsRow {
    /// The round record as far as the CSV carries it; client lists stay empty.
    pub fn to_round_metrics(&self) -> RoundMetrics {
        RoundMetrics {
            round: self.round,
            method: self.method.clone(),
            global_test_accuracy: self.global_acc,
            mean_personalized_accuracy: self.personalized_acc,
            bytes_up: self.bytes_up,
            bytes_down: self.bytes_down,
            wall_ms: self.wall_ms,
            sampled: Vec::new(),
            participating: Vec::new(),
            protocol_violations: self.violations,
            per_client_personalized: Vec::new(),
            per_client_global: Vec::new(),
        }
    }
}

#[derive(Debug, Serialize)]
struct AccRow {
    round: u32,
    global_acc: f64,
    personalized_acc: f64,
}

#[derive(Debug, Serialize)]
struct BytesRow {
    round: u32,
    bytes_up: u64,
    bytes_down: u64,
    cumulative_up: u64,
    cumulative_down: u64,
}

#[derive(Debug, Serialize)]
struct ClientRow {
    client: usize,
    personalized_acc: f64,
    global_acc: f64,
}

#[derive(Serialize)]
struct RunRecord<'a> {
    config: &'a RunConfig,
    rounds: &'a [RoundMetrics],
    #[serde(skip_serializing_if = "Option::is_none")]
    summary: Option<&'a RunSummary>,
}

fn create_dir(dir: &Path) -> Result<(), ExportError> {
    fs::create_dir_all(dir).map_err(|source| ExportError::Io {
        path: dir.to_path_buf(),
        source,
    })
}

/// Write serde rows as CSV; the header comes from `header` so empty inputs still get one.
fn write_csv<T: Serialize>(
    path: &Path,
    header: &[&str],
    rows: impl IntoIterator<Item = T>,
) -> Result<(), ExportError> {
    let csv_err = |source| ExportError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(|source| ExportError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(file);
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|source| ExportError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_metrics_csv(path: &Path, metrics: &[RoundMetrics]) -> Result<(), ExportError> {
    write_csv(
        path,
        &[
            "round",
            "method",
            "global_acc",
            "personalized_acc",
            "bytes_up",
            "bytes_down",
            "wall_ms",
            "participants",
            "violations",
        ],
        metrics.iter().map(MetricsRow::from),
    )
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>, ExportError> {
    let csv_err = |source| ExportError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().collect::<Result<_, _>>().map_err(csv_err)
}

/// Rebuild a summary from an exported `metrics.csv`.
pub fn summarize_csv(path: &Path, dense_bytes_per_round: u64) -> Result<RunSummary, ExportError> {
    let rows: Vec<RoundMetrics> = read_metrics_csv(path)?
        .iter()
        .map(MetricsRow::to_round_metrics)
        .collect();
    Ok(summarize(&rows, dense_bytes_per_round)?)
}

/// Plot-ready series: accuracy and bytes per round, and per-client accuracy after the last round.
pub fn emit_series(metrics: &[RoundMetrics], out_dir: &Path) -> Result<Vec<PathBuf>, ExportError> {
    create_dir(out_dir)?;
    let acc = out_dir.join(ACC_SERIES);
    write_csv(
        &acc,
        &["round", "global_acc", "personalized_acc"],
        metrics.iter().map(|m| AccRow {
            round: m.round,
            global_acc: m.global_test_accuracy,
            personalized_acc: m.mean_personalized_accuracy,
        }),
    )?;

    let bytes = out_dir.join(BYTES_SERIES);
    let (mut up, mut down) = (0u64, 0u64);
    write_csv(
        &bytes,
        &[
            "round",
            "bytes_up",
            "bytes_down",
            "cumulative_up",
            "cumulative_down",
        ],
        metrics.iter().map(|m| {
            up += m.bytes_up;
            down += m.bytes_down;
            BytesRow {
                round: m.round,
                bytes_up: m.bytes_up,
                bytes_down: m.bytes_down,
                cumulative_up: up,
                cumulative_down: down,
            }
        }),
    )?;

    let clients = out_dir.join(PER_CLIENT);
    let last = metrics.last();
    write_csv(
        &clients,
        &["client", "personalized_acc", "global_acc"],
        last.into_iter().flat_map(|m| {
            m.per_client_personalized
                .iter()
                .zip(&m.per_client_global)
                .enumerate()
                .map(|(client, (&p, &g))| ClientRow {
                    client,
                    personalized_acc: p,
                    global_acc: g,
                })
        }),
    )?;
    Ok(vec![acc, bytes, clients])
}

/// Everything a run leaves behind: `metrics.csv`, `run.json` and the series files.
pub fn write_run(
    out_dir: &Path,
    config: &RunConfig,
    metrics: &[RoundMetrics],
) -> Result<Option<RunSummary>, ExportError> {
    create_dir(out_dir)?;
    write_metrics_csv(&out_dir.join(METRICS_CSV), metrics)?;
    let summary = if metrics.is_empty() {
        None
    } else {
        Some(summarize(metrics, config.dense_bytes_per_round())?)
    };
    let path = out_dir.join(RUN_JSON);
    let io_err = |source| ExportError::Io {
        path: path.clone(),
        source,
    };
    let mut w = BufWriter::new(File::create(&path).map_err(io_err)?);
    let record = RunRecord {
        config,
        rounds: metrics,
        summary: summary.as_ref(),
    };
    serde_json::to_writer_pretty(&mut w, &record).map_err(|source| ExportError::Json {
        path: path.clone(),
        source,
    })?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(io_err)?;
    emit_series(metrics, out_dir)?;
    Ok(summary)
}
