//! JSON-lines run traces.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::scenario::Scenario;
use crate::consensus::{Decision, Message, PhaseEvent, Removal, Timeout};
use crate::eov::AbortRecord;
use crate::types::{Height, NodeId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RunStatus {
    Completed,
    MaxTimeExceeded,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TraceBody {
    Header {
        scenario: Box<Scenario>,
        seed: u64,
    },
    /// A message leaving its author. Relays are not recorded.
    Send {
        msg_id: u64,
        msg: Message,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        targets: Option<Vec<NodeId>>,
    },
    /// First receipt of a message at `node`, with the hop it came over.
    Deliver {
        msg_id: u64,
        from: NodeId,
        sent_at: u64,
    },
    Timer {
        timeout: Timeout,
    },
    Phase {
        event: PhaseEvent,
    },
    Decide {
        decision: Decision,
    },
    Remove {
        height: Height,
        removal: Removal,
    },
    Abort {
        record: AbortRecord,
    },
    Crash,
    End {
        status: RunStatus,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub time: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node: Option<NodeId>,
    #[serde(flatten)]
    pub body: TraceBody,
}

#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error("TRACE_CORRUPT: line {line}: {message}")]
    Corrupt { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn write_trace(records: &[TraceRecord], mut w: impl Write) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn trace_to_string(records: &[TraceRecord]) -> String {
    let mut buf = Vec::new();
    write_trace(records, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("json is utf-8")
}

pub fn read_trace(r: impl BufRead) -> Result<Vec<TraceRecord>, TraceError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| TraceError::Corrupt { line: i + 1, message: e.to_string() })?;
        out.push(rec);
    }
    Ok(out)
}
