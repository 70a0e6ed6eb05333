use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::{IngestError, Result};

/// One completion. Exactly one of `answer` / `scores` is set on scored
/// records; raw collected records may carry neither until post-processed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogRecord {
    pub prompt_id: String,
    pub query_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f64>>,
    pub tokens: u64,
    /// `"ok"` or `"error: <reason>"`.
    #[serde(default = "ok")]
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

fn ok() -> String {
    "ok".into()
}

impl LogRecord {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

/// Reads JSON lines; blank lines are skipped and errors carry the line number.
pub fn read_log<R: BufRead>(r: R) -> Result<Vec<LogRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| IngestError::Json {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_log<W: Write>(mut w: W, records: &[LogRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| IngestError::Json {
            line: 0,
            message: e.to_string(),
        })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
