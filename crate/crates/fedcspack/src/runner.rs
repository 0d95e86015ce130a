use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use fedcspack_core::partition::partition;
use fedcspack_core::{RoundMetrics, RunConfig, RunSummary, Simulation};

use crate::config::{cartesian, ConfigDoc, ConfigError};
use crate::export::{write_run, ExportError};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Export(#[from] ExportError),
    #[error("simulation failed: {0}")]
    Sim(#[from] fedcspack_core::Error),
}

fn now_ms() -> f64 {
    static START: OnceLock<Instant> = OnceLock::new();
    START.get_or_init(Instant::now).elapsed().as_secs_f64() * 1e3
}

#[derive(Debug, Clone, Copy)]
pub struct RunOptions {
    /// Record per-round wall time. Off gives byte-identical exports across runs.
    pub wall_clock: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { wall_clock: true }
    }
}

pub struct RunOutput {
    pub config: RunConfig,
    pub metrics: Vec<RoundMetrics>,
    pub summary: Option<RunSummary>,
}

/// Resolve, simulate and export one run into `out_dir`.
pub fn run(doc: &ConfigDoc, out_dir: &Path, opts: RunOptions) -> Result<RunOutput, RunError> {
    let config = doc.resolve()?;
    let data = doc.dataset(&config)?;
    let mut sim = Simulation::new(config.clone(), &data)?;
    if opts.wall_clock {
        sim = sim.with_clock(now_ms);
    }
    let mut metrics = Vec::with_capacity(config.rounds as usize);
    while !sim.is_finished() {
        let m = sim.step()?;
        log::info!(
            "round {} {}: global {:.4} personalized {:.4} up {} B",
            m.round,
            m.method,
            m.global_test_accuracy,
            m.mean_personalized_accuracy,
            m.bytes_up
        );
        metrics.push(m);
    }
    let summary = write_run(out_dir, &config, &metrics)?;
    Ok(RunOutput {
        config,
        metrics,
        summary,
    })
}

pub struct SweepCell {
    pub name: String,
    pub assignments: Vec<(String, String)>,
    pub dir: PathBuf,
    pub summary: RunSummary,
}

/// Directory-safe name for one grid cell.
pub fn cell_name(assignments: &[(String, String)]) -> String {
    assignments
        .iter()
        .map(|(k, v)| {
            let v: String = v
                .chars()
                .map(|c| {
                    if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_') {
                        c
                    } else {
                        '-'
                    }
                })
                .collect();
            format!("{k}={v}")
        })
        .collect::<Vec<_>>()
        .join("__")
}

/// Run every cell of the cartesian grid, each into its own directory under `out_dir`,
/// then write `summary.csv` there.
pub fn sweep(
    doc: &ConfigDoc,
    axes: &[(String, Vec<String>)],
    out_dir: &Path,
    opts: RunOptions,
) -> Result<Vec<SweepCell>, RunError> {
    let mut cells = Vec::new();
    for assignments in cartesian(axes) {
        let mut cell_doc = doc.clone();
        for (k, v) in &assignments {
            cell_doc.set(k, v)?;
        }
        let name = if assignments.is_empty() {
            "base".to_string()
        } else {
            cell_name(&assignments)
        };
        let dir = out_dir.join(&name);
        log::info!("sweep cell {name}");
        let out = run(&cell_doc, &dir, opts)?;
        let summary = out
            .summary
            .expect("validated configs run at least one round");
        cells.push(SweepCell {
            name,
            assignments,
            dir,
            summary,
        });
    }
    write_summary_csv(&out_dir.join("summary.csv"), axes, &cells)?;
    Ok(cells)
}

const SUMMARY_COLUMNS: [&str; 7] = [
    "label",
    "rounds",
    "final_global_acc",
    "best_global_acc",
    "mean_personalized_acc",
    "total_bytes_up",
    "compression_vs_dense",
];

fn summary_fields(s: &RunSummary) -> [String; 7] {
    [
        s.method.clone(),
        s.rounds.to_string(),
        s.final_global_acc.to_string(),
        s.best_global_acc.to_string(),
        s.mean_personalized_acc.to_string(),
        s.total_bytes_up.to_string(),
        s.compression_vs_dense.to_string(),
    ]
}

fn write_summary_csv(
    path: &Path,
    axes: &[(String, Vec<String>)],
    cells: &[SweepCell],
) -> Result<(), ExportError> {
    let err = |source| ExportError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    let header: Vec<&str> = std::iter::once("cell")
        .chain(axes.iter().map(|(k, _)| k.as_str()))
        .chain(SUMMARY_COLUMNS)
        .collect();
    w.write_record(&header).map_err(err)?;
    for c in cells {
        let mut rec = vec![c.name.clone()];
        rec.extend(c.assignments.iter().map(|(_, v)| v.clone()));
        rec.extend(summary_fields(&c.summary));
        w.write_record(&rec).map_err(err)?;
    }
    w.flush().map_err(|source| ExportError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Fixed-width table of sweep results for the terminal.
pub fn format_sweep_table(axes: &[(String, Vec<String>)], cells: &[SweepCell]) -> String {
    let mut header: Vec<String> = axes.iter().map(|(k, _)| k.clone()).collect();
    header.extend(
        [
            "label",
            "final_acc",
            "best_acc",
            "pers_acc",
            "bytes_up",
            "compression",
        ]
        .map(String::from),
    );
    let rows: Vec<Vec<String>> = cells
        .iter()
        .map(|c| {
            let s = &c.summary;
            let mut r: Vec<String> = c.assignments.iter().map(|(_, v)| v.clone()).collect();
            r.extend([
                s.method.clone(),
                format!("{:.4}", s.final_global_acc),
                format!("{:.4}", s.best_global_acc),
                format!("{:.4}", s.mean_personalized_acc),
                s.total_bytes_up.to_string(),
                format!("{:.3}", s.compression_vs_dense),
            ]);
            r
        })
        .collect();
    render_table(&header, &rows)
}

fn render_table(header: &[String], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(String::len).collect();
    for r in rows {
        for (w, cell) in widths.iter_mut().zip(r) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    for r in std::iter::once(header).chain(rows.iter().map(Vec::as_slice)) {
        let line: Vec<String> = r
            .iter()
            .zip(&widths)
            .map(|(c, &w)| format!("{c:<w$}"))
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
    }
    out
}

/// Per-client row counts and label histograms of the configured partition.
pub fn partition_report(doc: &ConfigDoc) -> Result<String, RunError> {
    let config = doc.resolve()?;
    let data = doc.dataset(&config)?;
    let p = partition(&data, &config.partition)?;
    let mut header: Vec<String> = ["client", "rows", "train", "test"]
        .map(String::from)
        .to_vec();
    header.extend((0..data.num_classes).map(|c| format!("c{c}")));
    let rows: Vec<Vec<String>> = p
        .clients
        .iter()
        .zip(p.label_histograms(&data))
        .enumerate()
        .map(|(i, (c, h))| {
            let mut r = vec![
                i.to_string(),
                c.rows.len().to_string(),
                c.train.len().to_string(),
                c.test.len().to_string(),
            ];
            r.extend(h.iter().map(usize::to_string));
            r
        })
        .collect();
    Ok(render_table(&header, &rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_names_are_path_safe() {
        let a = vec![
            ("cpr".to_string(), "0.3".to_string()),
            (
                "method".to_string(),
                r#"{"fedprox":{"mu":0.1}}"#.to_string(),
            ),
        ];
        assert_eq!(cell_name(&a), "cpr=0.3__method=--fedprox----mu--0.1--");
    }

    #[test]
    fn table_alignment() {
        let t = render_table(
            &["a".into(), "bb".into()],
            &[vec!["123".into(), "x".into()]],
        );
        assert_eq!(t, "a    bb\n123  x\n");
    }
}
