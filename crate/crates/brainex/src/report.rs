//! Evaluation reports on disk and the paired statistics over them.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use brainex_core::metrics::{bonferroni, wilcoxon_signed_rank, MetricsReport, WilcoxonResult};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::csv_io;

/// A report tagged with the mask it was computed for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedReport {
    pub name: String,
    #[serde(flatten)]
    pub report: MetricsReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Dice,
    HdMm,
    AssdMm,
    Sensitivity,
    Specificity,
    TotalUncertainty,
}

impl Metric {
    pub const ALL: [Metric; 6] =
        [Metric::Dice, Metric::HdMm, Metric::AssdMm, Metric::Sensitivity, Metric::Specificity, Metric::TotalUncertainty];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Dice => "dice",
            Metric::HdMm => "hd_mm",
            Metric::AssdMm => "assd_mm",
            Metric::Sensitivity => "sensitivity",
            Metric::Specificity => "specificity",
            Metric::TotalUncertainty => "total_uncertainty",
        }
    }

    pub fn of(self, r: &MetricsReport) -> Option<f64> {
        match self {
            Metric::Dice => Some(r.dice),
            Metric::HdMm => Some(r.hd_mm),
            Metric::AssdMm => Some(r.assd_mm),
            Metric::Sensitivity => Some(r.sensitivity),
            Metric::Specificity => Some(r.specificity),
            Metric::TotalUncertainty => r.total_uncertainty,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown metric `{s}`")))
    }
}

/// Mean and sample standard deviation; the deviation is 0 for one value.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

pub fn write_json<T: Serialize + ?Sized>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Reads a single report object or an array of them.
pub fn read_reports(path: &Path) -> Result<Vec<MetricsReport>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::from(e).in_file(path))?;
    let parsed = if value.is_array() {
        serde_json::from_value::<Vec<MetricsReport>>(value)
    } else {
        serde_json::from_value::<MetricsReport>(value).map(|r| vec![r])
    };
    parsed.map_err(|e| Error::from(e).in_file(path))
}

/// Per-mask rows followed by `mean` and `std` rows. The uncertainty column
/// is empty when any report lacks it.
pub fn write_summary_csv(reports: &[NamedReport], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(e, path))?;
    let mut header = vec!["name"];
    header.extend(Metric::ALL.iter().map(|m| m.name()));
    header.extend(["tp", "tn", "fp", "fn"]);
    w.write_record(&header)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in reports {
        let mut row = vec![r.name.clone()];
        row.extend(Metric::ALL.iter().map(|m| opt(m.of(&r.report))));
        let c = r.report.counts();
        row.extend([c.tp, c.tn, c.fp, c.fn_].map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    if !reports.is_empty() {
        let columns: Vec<Option<Vec<f64>>> =
            Metric::ALL.iter().map(|m| reports.iter().map(|r| m.of(&r.report)).collect()).collect();
        for (label, pick) in [("mean", 0), ("std", 1)] {
            let mut row = vec![label.to_string()];
            for col in &columns {
                row.push(opt(col.as_ref().map(|v| {
                    let (m, s) = mean_std(v);
                    if pick == 0 { m } else { s }
                })));
            }
            row.extend(std::iter::repeat_n(String::new(), 4));
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub metric: Metric,
    pub pairs: usize,
    pub comparisons: usize,
    #[serde(flatten)]
    pub test: WilcoxonResult,
    pub signed_statistic: f64,
    pub p_adjusted: f64,
}

/// Two-sided Wilcoxon signed-rank test on a metric of paired reports, with
/// the p-value Bonferroni-adjusted for `comparisons` tests.
pub fn compare(a: &[MetricsReport], b: &[MetricsReport], metric: Metric, comparisons: usize) -> Result<StatsReport> {
    if a.len() != b.len() {
        return Err(Error::Invalid(format!("report sets are not paired: {} vs {} entries", a.len(), b.len())));
    }
    let column = |set: &[MetricsReport]| -> Result<Vec<f64>> {
        set.iter()
            .map(|r| metric.of(r).ok_or_else(|| Error::Invalid(format!("a report has no `{metric}` value"))))
            .collect()
    };
    let test = wilcoxon_signed_rank(&column(a)?, &column(b)?)?;
    let p_adjusted = bonferroni(&[test.p_value], comparisons)?[0];
    Ok(StatsReport {
        metric,
        pairs: a.len(),
        comparisons,
        signed_statistic: test.signed_statistic(),
        test,
        p_adjusted,
    })
}
