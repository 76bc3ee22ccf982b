use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LossVariant;
use crate::metrics::MetricReport;
use crate::models::ModelKind;
use crate::train::{Phase, Scheme};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold_id: usize,
    pub test_subject: String,
    pub windows: usize,
    pub metrics: MetricReport,
    /// Metrics of always predicting 0 on the same windows.
    pub baseline: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub model: ModelKind,
    pub scheme: Scheme,
    pub loss: LossVariant,
    pub seed: u64,
    pub selected_epoch: usize,
    pub selected_phase: Phase,
    /// Across-fold mean validation loss per supervised epoch.
    pub mean_val_loss: Vec<f64>,
    /// Unweighted mean of the per-fold metrics.
    pub aggregate: MetricReport,
    pub baseline: MetricReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pooled: Option<MetricReport>,
    pub folds: Vec<FoldReport>,
}

impl RunReport {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub const COLUMNS: [&str; 8] = ["Model", "MAE", "MSE", "Acc-7", "Acc-9", "F1-7", "F1-9", "Acc±1"];

/// Row name: `FCN++` for the custom loss, `FCN++ (r)` with relaxation and
/// `FCN++ (l2)` for the squared loss.
pub fn row_label(model: ModelKind, loss: LossVariant) -> String {
    let name = model.display_name();
    match loss {
        LossVariant::Custom => name.to_string(),
        LossVariant::CustomRelaxed => format!("{name} (r)"),
        LossVariant::L2 => format!("{name} (l2)"),
    }
}

fn scheme_title(scheme: Scheme) -> &'static str {
    match scheme {
        Scheme::None => "Results without pre- and post-training",
        Scheme::Pre => "Results with pre-training",
        Scheme::Post => "Results with post-training",
        Scheme::Pp => "Results with pre- and post-training (pp)",
    }
}

fn line(cells: &[String], widths: &[usize]) -> String {
    let mut out = String::new();
    for (i, (c, w)) in cells.iter().zip(widths).enumerate() {
        if i > 0 {
            out.push_str(" | ");
        }
        let pad = w.saturating_sub(c.chars().count());
        if i == 0 {
            out.push_str(c);
            out.push_str(&" ".repeat(pad));
        } else {
            out.push_str(&" ".repeat(pad));
            out.push_str(c);
        }
    }
    out.trim_end().to_string()
}

fn widths(rows: &[Vec<String>]) -> Vec<usize> {
    (0..COLUMNS.len())
        .map(|i| {
            rows.iter()
                .map(|r| r[i].chars().count())
                .chain([COLUMNS[i].chars().count()])
                .max()
                .unwrap_or(0)
        })
        .collect()
}

pub fn table_header() -> String {
    COLUMNS.join(" | ")
}

/// One table per scheme, one row per (model, loss variant) in model order
/// then loss order, three decimals per metric.
pub fn render_table(reports: &[RunReport]) -> String {
    let mut sorted: Vec<&RunReport> = reports.iter().collect();
    sorted.sort_by_key(|r| (r.scheme, r.model, loss_order(r.loss)));
    let mut out = String::new();
    let mut schemes: Vec<Scheme> = sorted.iter().map(|r| r.scheme).collect();
    schemes.dedup();
    for (k, scheme) in schemes.into_iter().enumerate() {
        if k > 0 {
            out.push('\n');
        }
        let rows: Vec<Vec<String>> = sorted
            .iter()
            .filter(|r| r.scheme == scheme)
            .map(|r| {
                let mut row = vec![row_label(r.model, r.loss)];
                row.extend(r.aggregate.values().iter().map(|v| format!("{v:.3}")));
                row
            })
            .collect();
        let w = widths(&rows);
        let header: Vec<String> = COLUMNS.iter().map(|s| s.to_string()).collect();
        let rule = "-".repeat(line(&header, &w).chars().count());
        let _ = writeln!(out, "{}", scheme_title(scheme));
        let _ = writeln!(out, "{}", line(&header, &w));
        let _ = writeln!(out, "{rule}");
        for row in &rows {
            let _ = writeln!(out, "{}", line(row, &w));
        }
    }
    out
}

fn loss_order(l: LossVariant) -> u8 {
    match l {
        LossVariant::Custom => 0,
        LossVariant::CustomRelaxed => 1,
        LossVariant::L2 => 2,
    }
}
