//! Statistics and plot-ready artifacts over sweep records.
//!
//! `aggregate` reduces raw records to per-cell mean/median/population
//! standard deviation; `emit_plots` writes one whitespace-separated data
//! file per (mode, cca, latency) curve plus a gnuplot command file, and
//! `emit_tables` writes the summary and exclusion tables. All outputs are
//! deterministic: identical records produce byte-identical bundles, and
//! every number is recomputable from the record log alone.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::TransferMode;
use crate::sweep::{CellStatus, SweepRecord, ORDERING_NOTE};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("output directory {0} is not writable: {1}")]
    Unwritable(PathBuf, std::io::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Aggregation key; ordered the way tables are sorted: mode, cca, latency,
/// size.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub mode: TransferMode,
    pub cca: String,
    pub latency_ms: u64,
    pub size: u64,
}

/// Per-cell throughput statistics in bits per second.
///
/// The standard deviation is the population form: the iterations of a run
/// are the entire population of that run, not a sample from something
/// larger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub key: CellKey,
    pub mean_bps: f64,
    pub median_bps: f64,
    pub stddev_bps: f64,
    pub n: u64,
}

/// A failed cell excluded from statistics; surfaced so reliability is
/// visible rather than silently flattering the numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub key: CellKey,
    pub iteration: u32,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Aggregate {
    pub cells: Vec<CellStats>,
    pub exclusions: Vec<Exclusion>,
}

pub fn mean(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().sum::<f64>() / samples.len() as f64
}

/// Middle order statistic; the average of the two middles for even counts.
pub fn median(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Population standard deviation.
pub fn stddev(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let m = mean(samples);
    (samples.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / samples.len() as f64).sqrt()
}

/// Group records by (mode, cca, latency, size) and reduce each group's
/// successful iterations to statistics. Failed records land in the
/// exclusions list. Empty input produces an empty aggregate.
pub fn aggregate(records: &[SweepRecord]) -> Aggregate {
    use std::collections::BTreeMap;
    let mut groups: BTreeMap<CellKey, Vec<f64>> = BTreeMap::new();
    let mut exclusions = Vec::new();
    for r in records {
        let key = CellKey {
            mode: r.mode,
            cca: r.cca.clone(),
            latency_ms: r.latency_ms,
            size: r.size,
        };
        match (r.status, &r.result) {
            (CellStatus::Ok, Some(result)) => {
                groups.entry(key).or_default().push(result.throughput_bps);
            }
            _ => exclusions.push(Exclusion {
                key,
                iteration: r.iteration,
                error: r.error.clone().unwrap_or_else(|| "failed".into()),
            }),
        }
    }
    let cells = groups
        .into_iter()
        .map(|(key, samples)| CellStats {
            key,
            mean_bps: mean(&samples),
            median_bps: median(&samples),
            stddev_bps: stddev(&samples),
            n: samples.len() as u64,
        })
        .collect();
    Aggregate { cells, exclusions }
}

/// Artifacts produced for one sweep: per-curve data files, the plotting
/// command file, and the summary tables.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotBundle {
    pub data_files: Vec<PathBuf>,
    pub command_file: PathBuf,
    pub summary_table: PathBuf,
    pub exclusions_table: PathBuf,
    pub metadata_file: PathBuf,
}

fn curve_name(mode: TransferMode, cca: &str, latency_ms: u64) -> String {
    format!("{mode}_{cca}_{latency_ms}ms")
}

fn ensure_dir(dir: &Path) -> Result<(), ReportError> {
    fs::create_dir_all(dir).map_err(|e| ReportError::Unwritable(dir.to_path_buf(), e))?;
    let probe = dir.join(".wanlab-write-probe");
    fs::write(&probe, b"").map_err(|e| ReportError::Unwritable(dir.to_path_buf(), e))?;
    let _ = fs::remove_file(probe);
    Ok(())
}

/// Emit one data file per (mode, cca, latency) curve (size ascending, one
/// row per size) plus a gnuplot command file that draws every curve with a
/// log2 size axis.
pub fn emit_plots(agg: &Aggregate, output_dir: &Path) -> Result<PlotBundle, ReportError> {
    ensure_dir(output_dir)?;

    use std::collections::BTreeMap;
    let mut curves: BTreeMap<(TransferMode, String, u64), Vec<&CellStats>> = BTreeMap::new();
    for cell in &agg.cells {
        curves
            .entry((cell.key.mode, cell.key.cca.clone(), cell.key.latency_ms))
            .or_default()
            .push(cell);
    }

    let mut data_files = Vec::new();
    let mut plot_clauses = Vec::new();
    for ((mode, cca, latency_ms), mut cells) in curves {
        cells.sort_by_key(|c| c.key.size);
        let name = curve_name(mode, &cca, latency_ms);
        let file = output_dir.join(format!("{name}.dat"));
        let mut text = String::from("# size_bytes mean_bps median_bps stddev_bps n\n");
        for c in cells {
            let _ = writeln!(
                text,
                "{} {:.3} {:.3} {:.3} {}",
                c.key.size, c.mean_bps, c.median_bps, c.stddev_bps, c.n
            );
        }
        fs::write(&file, text)?;
        plot_clauses.push(format!(
            "'{name}.dat' using 1:2 with linespoints title '{mode} {cca} {latency_ms} ms'"
        ));
        data_files.push(file);
    }

    let command_file = output_dir.join("plot.gp");
    let mut gp = String::new();
    gp.push_str("set terminal pngcairo size 1400,900\n");
    gp.push_str("set output 'sweep.png'\n");
    gp.push_str("set logscale x 2\n");
    gp.push_str("set format x '2^{%L}'\n");
    gp.push_str("set xlabel 'File size (bytes)'\n");
    gp.push_str("set ylabel 'Mean throughput (bit/s)'\n");
    gp.push_str("set key left top\n");
    gp.push_str("set grid\n");
    if plot_clauses.is_empty() {
        gp.push_str("# no curves: no successful cells in the record log\n");
    } else {
        gp.push_str("plot \\\n    ");
        gp.push_str(&plot_clauses.join(", \\\n    "));
        gp.push('\n');
    }
    fs::write(&command_file, gp)?;

    let tables = emit_tables(agg, output_dir)?;
    Ok(PlotBundle {
        data_files,
        command_file,
        summary_table: tables.0,
        exclusions_table: tables.1,
        metadata_file: tables.2,
    })
}

/// Emit the summary table (rows sorted by mode, cca, latency, size), the
/// exclusions table, and the metadata note.
pub fn emit_tables(agg: &Aggregate, output_dir: &Path) -> Result<(PathBuf, PathBuf, PathBuf), ReportError> {
    ensure_dir(output_dir)?;

    let summary = output_dir.join("summary.tsv");
    let mut text = String::from("mode\tcca\tlatency_ms\tsize_bytes\tn\tmean_bps\tmedian_bps\tstddev_bps\n");
    let mut cells: Vec<&CellStats> = agg.cells.iter().collect();
    cells.sort_by(|a, b| a.key.cmp(&b.key));
    for c in cells {
        let _ = writeln!(
            text,
            "{}\t{}\t{}\t{}\t{}\t{:.3}\t{:.3}\t{:.3}",
            c.key.mode, c.key.cca, c.key.latency_ms, c.key.size, c.n, c.mean_bps, c.median_bps, c.stddev_bps
        );
    }
    fs::write(&summary, text)?;

    let exclusions = output_dir.join("exclusions.tsv");
    let mut text = String::from("mode\tcca\tlatency_ms\tsize_bytes\titeration\terror\n");
    let mut rows: Vec<&Exclusion> = agg.exclusions.iter().collect();
    rows.sort_by(|a, b| (&a.key, a.iteration).cmp(&(&b.key, b.iteration)));
    for e in rows {
        let _ = writeln!(
            text,
            "{}\t{}\t{}\t{}\t{}\t{}",
            e.key.mode,
            e.key.cca,
            e.key.latency_ms,
            e.key.size,
            e.iteration,
            e.error.replace(['\t', '\n'], " ")
        );
    }
    fs::write(&exclusions, text)?;

    let metadata = output_dir.join("metadata.txt");
    let mut text = String::new();
    let _ = writeln!(text, "statistic definitions: mean = arithmetic mean; median = middle order statistic (average of the two middles for even n); stddev = population standard deviation");
    let _ = writeln!(text, "execution ordering: {ORDERING_NOTE}");
    let _ = writeln!(text, "failed cells are excluded from statistics and listed in exclusions.tsv");
    fs::write(&metadata, text)?;

    Ok((summary, exclusions, metadata))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mover::{IntegrityStatus, TransferResult};
    use crate::sweep::SweepRecord;
    use chrono::TimeZone;
    use std::time::Duration;
    use tempfile::TempDir;

    fn record(size: u64, latency: u64, cca: &str, mode: TransferMode, iteration: u32, bps: f64) -> SweepRecord {
        // wall time chosen so throughput_bps == bps for 1000 bytes
        let wall = Duration::from_secs_f64(1000.0 * 8.0 / bps);
        SweepRecord {
            size,
            latency_ms: latency,
            cca: cca.into(),
            mode,
            iteration,
            status: CellStatus::Ok,
            error: None,
            result: Some(TransferResult::new(
                1000,
                wall,
                1,
                0,
                IntegrityStatus::Verified,
                vec![1000],
                vec![],
            )),
            timestamp: chrono::Utc.timestamp_opt(1_700_000_000, 0).unwrap(),
            host_tuning: crate::tuning::Overall::Untuned,
        }
    }

    fn failed(size: u64, iteration: u32) -> SweepRecord {
        SweepRecord {
            size,
            latency_ms: 0,
            cca: "cubic".into(),
            mode: TransferMode::Bulk,
            iteration,
            status: CellStatus::Failed,
            error: Some("peer unreachable".into()),
            result: None,
            timestamp: chrono::Utc.timestamp_opt(1_700_000_000, 0).unwrap(),
            host_tuning: crate::tuning::Overall::Untuned,
        }
    }

    #[test]
    fn aggregate_matches_hand_arithmetic() {
        let recs = vec![
            record(1024, 0, "cubic", TransferMode::Bulk, 1, 10.0),
            record(1024, 0, "cubic", TransferMode::Bulk, 2, 20.0),
            record(1024, 0, "cubic", TransferMode::Bulk, 3, 30.0),
        ];
        let agg = aggregate(&recs);
        assert_eq!(agg.cells.len(), 1);
        let c = &agg.cells[0];
        assert_eq!(c.n, 3);
        assert!((c.mean_bps - 20.0).abs() < 1e-9);
        assert!((c.median_bps - 20.0).abs() < 1e-9);
        assert!((c.stddev_bps - 8.16496580927726).abs() < 1e-9);
    }

    #[test]
    fn single_sample_has_zero_stddev() {
        let recs = vec![record(1024, 0, "cubic", TransferMode::Bulk, 1, 42.0)];
        let agg = aggregate(&recs);
        let c = &agg.cells[0];
        assert!((c.mean_bps - 42.0).abs() < 1e-9);
        assert!((c.median_bps - 42.0).abs() < 1e-9);
        assert_eq!(c.stddev_bps, 0.0);
    }

    #[test]
    fn median_resists_outliers() {
        let samples = [1.0, 1.0, 1.0, 100.0];
        assert!((median(&samples) - 1.0).abs() < 1e-12);
        assert!((mean(&samples) - 25.75).abs() < 1e-12);
    }

    #[test]
    fn empty_input_is_an_empty_aggregate() {
        let agg = aggregate(&[]);
        assert!(agg.cells.is_empty());
        assert!(agg.exclusions.is_empty());
    }

    #[test]
    fn failed_cells_are_excluded_but_listed() {
        let recs = vec![
            record(1024, 0, "cubic", TransferMode::Bulk, 1, 10.0),
            failed(1024, 2),
        ];
        let agg = aggregate(&recs);
        assert_eq!(agg.cells.len(), 1);
        assert_eq!(agg.cells[0].n, 1);
        assert_eq!(agg.exclusions.len(), 1);
        assert_eq!(agg.exclusions[0].error, "peer unreachable");
    }

    #[test]
    fn every_record_lands_in_exactly_one_bucket() {
        let mut recs = Vec::new();
        for (i, (size, cca)) in [(1024u64, "cubic"), (2048, "cubic"), (1024, "bbr")].iter().enumerate() {
            for iter in 1..=3u32 {
                recs.push(record(*size, 0, cca, TransferMode::Bulk, iter, 10.0 * (i + 1) as f64));
            }
        }
        recs.push(failed(1024, 4));
        let agg = aggregate(&recs);
        let stats_n: u64 = agg.cells.iter().map(|c| c.n).sum();
        assert_eq!(stats_n as usize + agg.exclusions.len(), recs.len());
    }

    #[test]
    fn plot_bundle_is_deterministic_and_complete() {
        let recs = vec![
            record(1024, 10, "cubic", TransferMode::Bulk, 1, 10.0),
            record(2048, 10, "cubic", TransferMode::Bulk, 1, 20.0),
            record(4096, 10, "cubic", TransferMode::Bulk, 1, 30.0),
            record(1024, 50, "cubic", TransferMode::Bulk, 1, 5.0),
            record(1024, 100, "cubic", TransferMode::Bulk, 1, 2.0),
        ];
        let agg = aggregate(&recs);
        let tmp = TempDir::new().unwrap();
        let a_dir = tmp.path().join("a");
        let b_dir = tmp.path().join("b");
        let bundle_a = emit_plots(&agg, &a_dir).unwrap();
        let bundle_b = emit_plots(&agg, &b_dir).unwrap();
        assert_eq!(bundle_a.data_files.len(), 3, "one file per (latency) curve");

        // one curve (10ms) carries three sizes, three rows
        let ten = fs::read_to_string(a_dir.join("bulk_cubic_10ms.dat")).unwrap();
        assert_eq!(ten.lines().count(), 4, "header plus three rows");

        // identical inputs, byte-identical bundles
        for f in ["bulk_cubic_10ms.dat", "bulk_cubic_50ms.dat", "bulk_cubic_100ms.dat", "plot.gp", "summary.tsv", "exclusions.tsv", "metadata.txt"] {
            let a = fs::read(a_dir.join(f)).unwrap();
            let b = fs::read(b_dir.join(f)).unwrap();
            assert_eq!(a, b, "{f} differs between identical runs");
        }
        let gp = fs::read_to_string(&bundle_a.command_file).unwrap();
        assert!(gp.contains("set logscale x 2"));
        assert!(gp.contains("bulk_cubic_10ms.dat"));
        assert!(gp.contains("bulk_cubic_100ms.dat"));
    }

    #[test]
    fn tables_sort_and_handle_empty_stats() {
        let tmp = TempDir::new().unwrap();
        let (summary, _, _) = emit_tables(&Aggregate::default(), tmp.path()).unwrap();
        let text = fs::read_to_string(&summary).unwrap();
        assert_eq!(text.lines().count(), 1, "header-only for empty stats");

        let recs = vec![
            record(2048, 50, "cubic", TransferMode::Bulk, 1, 1.0),
            record(1024, 50, "cubic", TransferMode::Bulk, 1, 1.0),
            record(1024, 10, "bbr", TransferMode::Bulk, 1, 1.0),
            record(1024, 10, "cubic", TransferMode::Streaming, 1, 1.0),
        ];
        let agg = aggregate(&recs);
        let (summary, _, _) = emit_tables(&agg, tmp.path()).unwrap();
        let text = fs::read_to_string(&summary).unwrap();
        let rows: Vec<&str> = text.lines().skip(1).collect();
        // sorted by (mode, cca, latency, size): bulk before streaming,
        // bbr before cubic, 1024 before 2048
        assert!(rows[0].starts_with("bulk\tbbr\t10\t1024"));
        assert!(rows[1].starts_with("bulk\tcubic\t50\t1024"));
        assert!(rows[2].starts_with("bulk\tcubic\t50\t2048"));
        assert!(rows[3].starts_with("streaming\tcubic\t10\t1024"));
    }
}
