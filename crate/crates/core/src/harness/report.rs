use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GiftError, Result};
use crate::harness::bench::BenchReport;
use crate::harness::eval::{summarize, EvalRecord, EvalReport, EvalSummary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = GiftError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            _ => Err(GiftError::Config(format!("unknown report format {s:?}"))),
        }
    }
}

/// Everything a run produced; absent parts are omitted from JSON.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bench: Option<BenchReport>,
}

/// First column of the CSV footer row.
pub const FOOTER_TAG: &str = "mean";

const COLUMNS: [&str; 8] = [
    "id",
    "static_score",
    "shift_score",
    "static_sink_mean",
    "shift_sink_mean",
    "static_sink_top_decile",
    "shift_degenerate",
    "win",
];

/// CSV: one row per fixture, then a footer with means, counts and the win
/// rate in the `win` column.
pub fn write_csv(report: &EvalReport, out: impl std::io::Write) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(COLUMNS)?;
    for r in &report.records {
        w.serialize(r)?;
    }
    let s = &report.summary;
    w.write_record([
        FOOTER_TAG.to_string(),
        s.mean_static_score.to_string(),
        s.mean_shift_score.to_string(),
        s.mean_static_sink.to_string(),
        s.mean_shift_sink.to_string(),
        s.static_sink_top_decile.to_string(),
        s.shift_degenerate.to_string(),
        s.win_rate.to_string(),
    ])?;
    w.flush()?;
    Ok(())
}

/// Parse a CSV report back into records; the footer is recomputed from
/// them and checked against the file.
pub fn read_csv(input: impl std::io::Read) -> Result<(Vec<EvalRecord>, EvalSummary)> {
    let mut rdr = csv::Reader::from_reader(input);
    let headers = rdr.headers()?.clone();
    if headers.iter().ne(COLUMNS) {
        return Err(GiftError::InvalidInput("unexpected report columns".into()));
    }
    let mut records = Vec::new();
    let mut footer = None;
    for row in rdr.records() {
        let row = row?;
        if row.get(0) == Some(FOOTER_TAG) {
            footer = Some(row);
            continue;
        }
        records.push(row.deserialize::<EvalRecord>(Some(&headers))?);
    }
    let summary = summarize(&records);
    let footer = footer.ok_or_else(|| GiftError::InvalidInput("report has no footer row".into()))?;
    let win_rate: f64 = footer[7].parse().map_err(|_| GiftError::InvalidInput("bad footer win rate".into()))?;
    if win_rate != summary.win_rate {
        return Err(GiftError::InvalidInput("footer disagrees with rows".into()));
    }
    Ok((records, summary))
}

pub fn emit_report(report: &MetricReport, format: ReportFormat, path: &Path) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    match format {
        ReportFormat::Json => serde_json::to_writer_pretty(file, report)?,
        ReportFormat::Csv => match (&report.eval, &report.bench) {
            (Some(e), _) => write_csv(e, file)?,
            (None, Some(b)) => {
                let mut w = csv::Writer::from_writer(file);
                w.serialize(b)?;
                w.flush()?;
            }
            (None, None) => return Err(GiftError::EmptyInput("report")),
        },
    }
    Ok(())
}
