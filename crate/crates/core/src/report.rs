//! Metric reports on disk and on screen: per-experiment CSVs, aligned
//! tables, and the combined grid that slash-joins bucket values into
//! "(S/N/L)"-style columns.

use crate::metrics::{MetricReport, OVERALL_BUCKET};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Csv { path: String, message: String },
    #[error("{0}")]
    Shape(String),
}

pub type Result<T> = std::result::Result<T, ReportError>;

/// Serializes via serde, so the column set tracks [`MetricReport`] and
/// `None` becomes an empty field. Floats use shortest-round-trip form;
/// identical runs give identical bytes.
pub fn write_metrics_csv(reports: &[MetricReport], path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| ReportError::Csv { path: path.display().to_string(), message: e.to_string() })?;
    for report in reports {
        writer
            .serialize(report)
            .map_err(|e| ReportError::Csv { path: path.display().to_string(), message: e.to_string() })?;
    }
    writer
        .flush()
        .map_err(|e| ReportError::Io { path: path.display().to_string(), source: e })
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricReport>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| ReportError::Csv { path: path.display().to_string(), message: e.to_string() })?;
    let mut reports = Vec::new();
    for row in reader.deserialize() {
        let report: MetricReport = row.map_err(|e| ReportError::Csv {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        reports.push(report);
    }
    Ok(reports)
}

fn cell(value: Option<f64>) -> String {
    match value {
        Some(v) => format!("{v:.3}"),
        None => "-".into(),
    }
}

fn pad(text: &str, width: usize) -> String {
    format!("{text:<width$}")
}

fn render_rows(header: &[String], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let mut out = String::new();
    let line = |cells: &[String], widths: &[usize]| -> String {
        cells
            .iter()
            .zip(widths)
            .map(|(c, w)| pad(c, *w))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    out.push_str(&line(header, &widths));
    out.push('\n');
    let rule: usize = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
    out.push_str(&"-".repeat(rule));
    out.push('\n');
    for row in rows {
        out.push_str(&line(row, &widths));
        out.push('\n');
    }
    out
}

const METRIC_COLUMNS: [&str; 9] = [
    "tokens", "cr", "coverage", "density", "overlap", "rouge1", "rouge2", "rougeL", "spec",
];

fn metric_cells(report: &MetricReport) -> Vec<Option<f64>> {
    vec![
        Some(report.mean_length),
        Some(report.mean_compression),
        report.coverage,
        report.density,
        report.overlap,
        Some(report.rouge1),
        Some(report.rouge2),
        Some(report.rouge_l),
        report.specificity,
    ]
}

/// One experiment's report as an aligned text table, one row per bucket.
pub fn metrics_table(reports: &[MetricReport]) -> String {
    let mut header: Vec<String> = vec!["bucket".into(), "n".into()];
    header.extend(METRIC_COLUMNS.iter().map(|c| c.to_string()));
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            let mut row = vec![r.bucket.clone(), r.n.to_string()];
            row.extend(metric_cells(r).into_iter().map(cell));
            row
        })
        .collect();
    render_rows(&header, &rows)
}

/// Bucket initial for grid headers: "short" -> "S", "full" -> "F".
fn initial(bucket: &str) -> String {
    bucket.chars().next().map(|c| c.to_ascii_uppercase().to_string()).unwrap_or_default()
}

fn bucket_order(reports: &[MetricReport]) -> Vec<String> {
    reports.iter().filter(|r| r.bucket != OVERALL_BUCKET).map(|r| r.bucket.clone()).collect()
}

fn grid_rows(entries: &[(String, Vec<MetricReport>)]) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let Some((_, first)) = entries.first() else {
        return Err(ReportError::Shape("no reports to combine".into()));
    };
    let buckets = bucket_order(first);
    if buckets.is_empty() {
        return Err(ReportError::Shape("reports contain no buckets".into()));
    }
    let letters =
        format!("({})", buckets.iter().map(|b| initial(b)).collect::<Vec<_>>().join("/"));

    let mut header: Vec<String> = vec!["method".into(), format!("n{letters}")];
    header.extend(METRIC_COLUMNS.iter().map(|c| format!("{c}{letters}")));

    let mut rows = Vec::new();
    for (label, reports) in entries {
        if bucket_order(reports) != buckets {
            return Err(ReportError::Shape(format!(
                "{label}: buckets {:?} do not match {:?}",
                bucket_order(reports),
                buckets
            )));
        }
        let picked: Vec<&MetricReport> = buckets
            .iter()
            .map(|b| reports.iter().find(|r| &r.bucket == b).expect("bucket checked above"))
            .collect();
        let mut row = vec![label.clone()];
        row.push(picked.iter().map(|r| r.n.to_string()).collect::<Vec<_>>().join("/"));
        for i in 0..METRIC_COLUMNS.len() {
            row.push(
                picked
                    .iter()
                    .map(|r| {
                        let mut c = cell(metric_cells(r)[i]);
                        if c != "-" {
                            c = format!("{:.2}", metric_cells(r)[i].unwrap());
                        }
                        c
                    })
                    .collect::<Vec<_>>()
                    .join("/"),
            );
        }
        rows.push(row);
    }
    Ok((header, rows))
}

/// The combined grid, one row per method, bucket values slash-joined per
/// metric. All entries must carry the same buckets in the same order.
pub fn combined_table(entries: &[(String, Vec<MetricReport>)]) -> Result<String> {
    let (header, rows) = grid_rows(entries)?;
    Ok(render_rows(&header, &rows))
}

/// Same grid as CSV, for machines.
pub fn combined_csv(entries: &[(String, Vec<MetricReport>)]) -> Result<String> {
    let (header, rows) = grid_rows(entries)?;
    let mut writer = csv::Writer::from_writer(Vec::new());
    let to_csv = |e: csv::Error| ReportError::Csv { path: "<memory>".into(), message: e.to_string() };
    writer.write_record(&header).map_err(to_csv)?;
    for row in &rows {
        writer.write_record(row).map_err(to_csv)?;
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| ReportError::Csv { path: "<memory>".into(), message: e.to_string() })?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(bucket: &str, n: usize, tokens: f64) -> MetricReport {
        MetricReport {
            bucket: bucket.into(),
            n,
            mean_length: tokens,
            mean_compression: tokens / 40.0,
            coverage: Some(1.0),
            coverage_n: n,
            density: Some(4.0),
            density_n: n,
            overlap: None,
            overlap_n: 0,
            rouge1: 0.5,
            rouge2: 0.25,
            rouge_l: 0.5,
            specificity: Some(0.0),
            specificity_n: n,
        }
    }

    #[test]
    fn csv_round_trips_and_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let reports = vec![report("short", 8, 8.0), report("long", 8, 32.0), report("Overall", 16, 20.0)];
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        write_metrics_csv(&reports, &a).unwrap();
        write_metrics_csv(&reports, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let loaded = read_metrics_csv(&a).unwrap();
        assert_eq!(loaded, reports);
    }

    #[test]
    fn grid_header_carries_bucket_initials() {
        let entries = vec![(
            "lora".to_string(),
            vec![
                report("short", 8, 8.0),
                report("normal", 8, 16.0),
                report("long", 8, 32.0),
                report("Overall", 24, 18.7),
            ],
        )];
        let table = combined_table(&entries).unwrap();
        assert!(table.contains("tokens(S/N/L)"), "{table}");
        assert!(table.contains("8.00/16.00/32.00"), "{table}");
        assert!(!table.contains("Overall"), "grid rows are per bucket only:\n{table}");
    }

    #[test]
    fn grid_rejects_mismatched_buckets() {
        let entries = vec![
            ("a".to_string(), vec![report("short", 1, 8.0)]),
            ("b".to_string(), vec![report("long", 1, 32.0)]),
        ];
        let err = combined_table(&entries).unwrap_err();
        assert!(matches!(err, ReportError::Shape(_)));
    }

    #[test]
    fn undefined_metrics_render_as_dash() {
        let table = metrics_table(&[report("short", 2, 8.0)]);
        let data_line = table.lines().nth(2).unwrap();
        assert!(data_line.contains(" - "), "{table}");
    }
}
