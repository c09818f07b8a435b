//! Side-by-side comparison of runs that share a dataset.

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::run::run_experiment;
use super::RunError;
use crate::metrics::report::{Party, Report};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub mode: String,
    pub cut: usize,
    pub clients: usize,
    pub final_acc: Option<f64>,
    /// Cut-layer tensor payload over the whole run, both directions.
    pub tensor_bytes: u64,
    /// Largest per-epoch client peak.
    pub client_peak_mem_bytes: u64,
    /// Client forward, backward and comm time over the whole run.
    pub client_time_ms: f64,
    /// The first row's value divided by this row's value.
    pub comm_ratio: Option<f64>,
    pub peak_mem_ratio: Option<f64>,
    pub time_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
}

pub const COMPARISON_HEADER: [&str; 11] = [
    "label",
    "mode",
    "cut",
    "clients",
    "final_acc",
    "tensor_bytes",
    "client_peak_mem_bytes",
    "client_time_ms",
    "comm_ratio",
    "peak_mem_ratio",
    "time_ratio",
];

fn ratio(first: f64, this: f64) -> Option<f64> {
    (this > 0.0).then(|| first / this)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

fn dataset_key(config: &ExperimentConfig) -> Result<String, RunError> {
    let text = toml::to_string(&config.dataset).map_err(|e| RunError::Config(e.to_string()))?;
    Ok(format!("{text}|seed={}", config.seed))
}

fn summarize(label: String, report: &Report) -> ComparisonRow {
    let client: Vec<_> = report.rows_for(Party::Client).collect();
    let first = client.first();
    ComparisonRow {
        label,
        mode: first.map(|r| r.mode.clone()).unwrap_or_default(),
        cut: first.map(|r| r.cut).unwrap_or_default(),
        clients: first.map(|r| r.clients).unwrap_or_default(),
        final_acc: client.last().and_then(|r| r.acc),
        tensor_bytes: client.iter().map(|r| r.tensor_bytes).sum(),
        client_peak_mem_bytes: client.iter().map(|r| r.peak_mem_bytes).max().unwrap_or(0),
        client_time_ms: client.iter().map(|r| r.t_fwd_ms + r.t_bwd_ms + r.t_comm_ms).sum(),
        comm_ratio: None,
        peak_mem_ratio: None,
        time_ratio: None,
    }
}

impl Comparison {
    /// Builds the table from finished reports; `labels` name the rows.
    pub fn from_reports(labels: Vec<String>, reports: &[Report]) -> Result<Comparison, RunError> {
        if reports.len() < 2 {
            return Err(RunError::Config("need ≥2 configs".into()));
        }
        let mut rows: Vec<ComparisonRow> = labels.into_iter().zip(reports).map(|(l, r)| summarize(l, r)).collect();
        let base = rows[0].clone();
        for r in &mut rows {
            r.comm_ratio = ratio(base.tensor_bytes as f64, r.tensor_bytes as f64);
            r.peak_mem_ratio = ratio(base.client_peak_mem_bytes as f64, r.client_peak_mem_bytes as f64);
            r.time_ratio = ratio(base.client_time_ms, r.client_time_ms);
        }
        Ok(Comparison { rows })
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(COMPARISON_HEADER).expect("in-memory write");
        for r in &self.rows {
            w.write_record([
                r.label.clone(),
                r.mode.clone(),
                r.cut.to_string(),
                r.clients.to_string(),
                opt(r.final_acc),
                r.tensor_bytes.to_string(),
                r.client_peak_mem_bytes.to_string(),
                format!("{:.3}", r.client_time_ms),
                opt(r.comm_ratio),
                opt(r.peak_mem_ratio),
                opt(r.time_ratio),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("comparison serializes")
    }
}

/// Runs every config in-process and tabulates them. All configs must use the
/// same dataset and seed so the runs see the same samples.
pub fn compare(labels: Vec<String>, configs: &[ExperimentConfig]) -> Result<Comparison, RunError> {
    if configs.len() < 2 {
        return Err(RunError::Config("need ≥2 configs".into()));
    }
    let key = dataset_key(&configs[0])?;
    for (label, c) in labels.iter().zip(configs).skip(1) {
        if dataset_key(c)? != key {
            return Err(RunError::Config(format!(
                "{label}: dataset or seed differs from {}",
                labels[0]
            )));
        }
    }
    let reports = configs
        .iter()
        .map(|c| run_experiment(c).map(|a| a.report))
        .collect::<Result<Vec<_>, _>>()?;
    Comparison::from_reports(labels, &reports)
}
