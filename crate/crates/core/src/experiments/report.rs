//! Writing metric reports as CSV or JSON.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MetricsReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(Error::Config(format!("unknown report format '{other}'"))),
        }
    }
}

/// `Thousands` divides the trace IF by 1000 on output only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Presentation {
    #[default]
    Raw,
    Thousands,
}

impl Presentation {
    pub fn if_scale(self) -> f64 {
        match self {
            Presentation::Raw => 1.0,
            Presentation::Thousands => 1000.0,
        }
    }
}

/// Writes one row per report with a fixed column order.
pub fn emit_report(reports: &[MetricsReport], format: ReportFormat, presentation: Presentation, path: &Path) -> Result<()> {
    if reports.is_empty() {
        return Err(Error::Contract("no results to report".into()));
    }
    let scale = presentation.if_scale();
    match format {
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_path(path)?;
            w.write_record(MetricsReport::CSV_HEADER)?;
            for r in reports {
                w.write_record(r.csv_row(scale))?;
            }
            w.flush()?;
        }
        ReportFormat::Json => {
            let shown: Vec<MetricsReport> = reports
                .iter()
                .map(|r| MetricsReport {
                    if_trace: r.if_trace / scale,
                    ..r.clone()
                })
                .collect();
            fs::write(path, serde_json::to_vec_pretty(&shown)?)?;
        }
    }
    Ok(())
}

/// Reads a JSON array written by [`emit_report`].
pub fn read_json_reports(path: &Path) -> Result<Vec<MetricsReport>> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}
