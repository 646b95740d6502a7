use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::protocol::RoundLog;

use super::{HarnessError, Result};

/// Column order of the round log.
pub const COLUMNS: [&str; 11] = [
    "round",
    "role",
    "client",
    "direction",
    "bytes_raw",
    "bytes_compressed",
    "sparsity",
    "scaling_accepted",
    "best_sub_epoch",
    "test_accuracy",
    "cumulative_bytes",
];

/// One CSV row: either a client transfer or the per-round server summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub round: usize,
    pub role: String,
    pub client: Option<usize>,
    pub direction: Option<String>,
    pub bytes_raw: Option<u64>,
    pub bytes_compressed: Option<u64>,
    pub sparsity: Option<f64>,
    pub scaling_accepted: Option<bool>,
    pub best_sub_epoch: Option<usize>,
    pub test_accuracy: Option<f64>,
    pub cumulative_bytes: Option<u64>,
}

pub const ROLE_CLIENT: &str = "client";
pub const ROLE_SERVER: &str = "server";

/// Client rows in transfer order followed by one server row.
pub fn rows(log: &RoundLog) -> Vec<Row> {
    let mut out: Vec<Row> = log
        .transfers
        .iter()
        .map(|t| Row {
            round: log.round,
            role: ROLE_CLIENT.into(),
            client: Some(t.client),
            direction: Some(t.direction.to_string()),
            bytes_raw: Some(t.bytes_raw),
            bytes_compressed: Some(t.bytes_compressed),
            sparsity: Some(t.sparsity),
            scaling_accepted: t.scaling_accepted,
            best_sub_epoch: t.best_sub_epoch,
            test_accuracy: None,
            cumulative_bytes: None,
        })
        .collect();
    out.push(Row {
        round: log.round,
        role: ROLE_SERVER.into(),
        client: None,
        direction: None,
        bytes_raw: None,
        bytes_compressed: None,
        sparsity: None,
        scaling_accepted: None,
        best_sub_epoch: None,
        test_accuracy: Some(log.test_accuracy),
        cumulative_bytes: Some(log.cumulative_bytes),
    });
    out
}

/// Writes round logs as they arrive; every round is flushed to the sink.
pub struct LogWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl LogWriter<File> {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| HarnessError::Io(dir.display().to_string(), e))?;
        }
        let file = File::create(path).map_err(|e| HarnessError::Io(path.display().to_string(), e))?;
        Self::new(file)
    }
}

impl<W: Write> LogWriter<W> {
    pub fn new(sink: W) -> Result<Self> {
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(sink);
        inner.write_record(COLUMNS)?;
        inner.flush().map_err(|e| HarnessError::Io("round log".into(), e))?;
        Ok(Self { inner })
    }

    pub fn write_round(&mut self, log: &RoundLog) -> Result<()> {
        for row in rows(log) {
            self.inner.serialize(row)?;
        }
        self.inner.flush().map_err(|e| HarnessError::Io("round log".into(), e))
    }

    pub fn into_inner(self) -> Result<W> {
        self.inner
            .into_inner()
            .map_err(|e| HarnessError::Io("round log".into(), e.into_error()))
    }
}

pub fn read_rows(path: &Path) -> Result<Vec<Row>> {
    let file = File::open(path).map_err(|e| HarnessError::Io(path.display().to_string(), e))?;
    parse_rows(file)
}

pub fn parse_rows(source: impl std::io::Read) -> Result<Vec<Row>> {
    let mut reader = csv::Reader::from_reader(source);
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header != COLUMNS {
        return Err(HarnessError::Log(format!("unexpected header {header:?}")));
    }
    Ok(reader.deserialize().collect::<std::result::Result<Vec<Row>, _>>()?)
}

/// Round at which the server metric first reaches `target`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Milestone {
    pub round: usize,
    pub test_accuracy: f64,
    pub cumulative_bytes: u64,
}

/// Scans server rows in order; `None` when the target is never reached.
pub fn summarize(rows: &[Row], target: f64) -> Result<Option<Milestone>> {
    for row in rows.iter().filter(|r| r.role == ROLE_SERVER) {
        let (Some(acc), Some(bytes)) = (row.test_accuracy, row.cumulative_bytes) else {
            return Err(HarnessError::Log(format!(
                "server row of round {} lacks metrics",
                row.round
            )));
        };
        if acc >= target {
            return Ok(Some(Milestone {
                round: row.round,
                test_accuracy: acc,
                cumulative_bytes: bytes,
            }));
        }
    }
    Ok(None)
}
