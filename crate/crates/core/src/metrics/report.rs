//! Per-epoch, per-party result rows and their CSV/JSON forms.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::comm::{CommSnapshot, Direction, Kind, Phase, Tally};

pub const SCHEMA_VERSION: u32 = 1;

pub const CSV_HEADER: [&str; 14] = [
    "epoch",
    "party",
    "mode",
    "cut",
    "clients",
    "acc",
    "loss",
    "fwd_bytes",
    "bwd_bytes",
    "label_bytes",
    "peak_mem_bytes",
    "t_fwd_ms",
    "t_bwd_ms",
    "t_comm_ms",
];

/// Columns that hold wall-clock measurements.
pub const TIME_COLUMNS: [&str; 3] = ["t_fwd_ms", "t_bwd_ms", "t_comm_ms"];

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("cannot write {path}: {source}")]
    Write { path: PathBuf, source: std::io::Error },
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("malformed report {path}: {detail}")]
    Parse { path: PathBuf, detail: String },
    #[error("report schema version {found} is not supported (expected {SCHEMA_VERSION})")]
    Schema { found: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Party {
    Client,
    Server,
}

impl std::fmt::Display for Party {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Party::Client => "client",
            Party::Server => "server",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: u32,
    pub party: Party,
    pub mode: String,
    pub cut: usize,
    pub clients: usize,
    /// Test accuracy of the composed model M_t ∘ M_b.
    pub acc: Option<f64>,
    /// Mean training loss: L_aux on the client (absent in CSL), L on the server.
    pub loss: Option<f64>,
    pub fwd_bytes: u64,
    pub bwd_bytes: u64,
    pub label_bytes: u64,
    /// Raw tensor scalars across the cut in both directions.
    pub tensor_bytes: u64,
    pub peak_mem_bytes: u64,
    pub t_fwd_ms: f64,
    pub t_bwd_ms: f64,
    pub t_comm_ms: f64,
    /// Server: training accuracy of the composed model during the epoch.
    pub train_acc: Option<f64>,
    /// Client: test accuracy of the auxiliary head.
    pub aux_acc: Option<f64>,
}

/// Ledger totals for one (direction, phase, kind).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommEntry {
    pub direction: Direction,
    pub phase: Phase,
    pub kind: Kind,
    #[serde(flatten)]
    pub tally: Tally,
}

pub fn comm_entries(s: &CommSnapshot) -> Vec<CommEntry> {
    s.entries()
        .map(|(&(direction, phase, kind), &tally)| CommEntry {
            direction,
            phase,
            kind,
            tally,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    /// Canonical TOML of the experiment configuration.
    pub config: String,
    pub config_sha256: String,
    /// False when the run aborted; rows then cover the finished epochs only.
    pub complete: bool,
    pub failure: Option<String>,
    pub rows: Vec<EpochRow>,
    /// Whole-run frame totals per party.
    pub client_comm: Vec<CommEntry>,
    pub server_comm: Vec<CommEntry>,
    /// SHA-256 over the final parameters, in declaration order.
    pub client_params_sha256: Option<String>,
    pub server_params_sha256: Option<String>,
    /// Client steps that ran their forward pass.
    #[serde(default)]
    pub client_steps_started: u64,
    /// Client steps that also finished their parameter update.
    #[serde(default)]
    pub client_steps_finished: u64,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl Report {
    pub fn rows_for(&self, party: Party) -> impl Iterator<Item = &EpochRow> {
        self.rows.iter().filter(move |r| r.party == party)
    }

    pub fn final_row(&self, party: Party) -> Option<&EpochRow> {
        self.rows_for(party).last()
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_HEADER).expect("in-memory write");
        for r in &self.rows {
            w.write_record([
                r.epoch.to_string(),
                r.party.to_string(),
                r.mode.clone(),
                r.cut.to_string(),
                r.clients.to_string(),
                opt(r.acc),
                opt(r.loss),
                r.fwd_bytes.to_string(),
                r.bwd_bytes.to_string(),
                r.label_bytes.to_string(),
                r.peak_mem_bytes.to_string(),
                r.t_fwd_ms.to_string(),
                r.t_bwd_ms.to_string(),
                r.t_comm_ms.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Report, String> {
        let r: Report = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if r.schema_version != SCHEMA_VERSION {
            return Err(format!("schema version {} is not supported", r.schema_version));
        }
        Ok(r)
    }

    pub fn write(&self, path: &Path, format: ReportFormat) -> Result<(), ReportError> {
        let text = match format {
            ReportFormat::Csv => self.to_csv(),
            ReportFormat::Json => self.to_json(),
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|source| ReportError::Write {
                path: path.to_path_buf(),
                source,
            })?;
        }
        fs::write(path, text).map_err(|source| ReportError::Write {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn read_json(path: &Path) -> Result<Report, ReportError> {
        let text = fs::read_to_string(path).map_err(|source| ReportError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Report::from_json(&text).map_err(|detail| ReportError::Parse {
            path: path.to_path_buf(),
            detail,
        })
    }
}

/// Reads a CSV report back as header-keyed string records.
pub fn read_csv(path: &Path) -> Result<Vec<Vec<(String, String)>>, ReportError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| ReportError::Parse {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| ReportError::Parse {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?
        .iter()
        .map(str::to_string)
        .collect();
    if header != CSV_HEADER {
        return Err(ReportError::Parse {
            path: path.to_path_buf(),
            detail: format!("unexpected header {header:?}"),
        });
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| ReportError::Parse {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        rows.push(header.iter().cloned().zip(rec.iter().map(str::to_string)).collect());
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    #[default]
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(format!("format must be csv or json, got '{other}'")),
        }
    }
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample() -> Report {
        let row = |party, acc: Option<f64>| EpochRow {
            epoch: 1,
            party,
            mode: "dsl".into(),
            cut: 2,
            clients: 1,
            acc,
            loss: Some(0.25),
            fwd_bytes: 100,
            bwd_bytes: 0,
            label_bytes: 8,
            tensor_bytes: 64,
            peak_mem_bytes: 4096,
            t_fwd_ms: 1.5,
            t_bwd_ms: 2.0,
            t_comm_ms: 0.0,
            train_acc: None,
            aux_acc: Some(0.5),
        };
        Report {
            schema_version: SCHEMA_VERSION,
            config: "mode = \"dsl\"\n".into(),
            config_sha256: "ab".into(),
            complete: true,
            failure: None,
            rows: vec![row(Party::Client, Some(0.9)), row(Party::Server, None)],
            client_comm: vec![],
            server_comm: vec![],
            client_params_sha256: Some("00".into()),
            server_params_sha256: None,
            client_steps_started: 3,
            client_steps_finished: 3,
        }
    }

    #[test]
    fn csv_header_is_fixed() {
        let csv = sample().to_csv();
        assert_eq!(
            csv.lines().next().unwrap(),
            "epoch,party,mode,cut,clients,acc,loss,fwd_bytes,bwd_bytes,label_bytes,peak_mem_bytes,t_fwd_ms,t_bwd_ms,t_comm_ms"
        );
        assert_eq!(csv.lines().nth(2).unwrap(), "1,server,dsl,2,1,,0.25,100,0,8,4096,1.5,2,0");
    }

    #[test]
    fn json_round_trip() {
        let r = sample();
        assert_eq!(Report::from_json(&r.to_json()).unwrap(), r);
        let mut bad = r.clone();
        bad.schema_version = 99;
        assert!(Report::from_json(&bad.to_json()).is_err());
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let r = sample();
        let p = dir.path().join("sub/report.json");
        r.write(&p, ReportFormat::Json).unwrap();
        assert_eq!(Report::read_json(&p).unwrap(), r);
        let p = dir.path().join("report.csv");
        r.write(&p, ReportFormat::Csv).unwrap();
        let rows = read_csv(&p).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0][5], ("acc".to_string(), "0.9".to_string()));
    }

    #[test]
    fn unwritable_path_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, b"x").unwrap();
        let err = sample().write(&blocker.join("r.json"), ReportFormat::Json).unwrap_err();
        assert!(matches!(err, ReportError::Write { .. }));
    }
}
