//! Trace event stream: JSONL codec, synthetic generation and per-step
//! dataset snapshots.

mod generate;
mod snapshot;

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::covv::{AttributeKey, Constraint, ConstraintRecord, TaskConstraintSet, ValueToken};
use crate::error::{Error, Result};
use crate::oracle::NodeId;

pub use generate::{generate_events, generate_trace, GrowthInjection, SyntheticTraceConfig};
pub use snapshot::{build_snapshot, DatasetSnapshot, SnapshotBuild};

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEvent {
    /// Microseconds since trace start.
    pub time: u64,
    pub body: EventBody,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EventBody {
    /// `value == None` removes the attribute.
    Machine {
        node: NodeId,
        attribute: AttributeKey,
        value: Option<ValueToken>,
    },
    Task {
        task: TaskConstraintSet,
        /// Microseconds.
        duration: u64,
    },
}

#[derive(Serialize)]
struct MachineLine<'a> {
    t: u64,
    kind: &'static str,
    node: u64,
    attr: &'a str,
    val: Option<&'a str>,
}

#[derive(Serialize)]
struct TaskLine {
    t: u64,
    kind: &'static str,
    id: u64,
    dur: u64,
    cons: Vec<ConstraintRecord>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLine {
    t: u64,
    kind: String,
    node: Option<u64>,
    attr: Option<String>,
    #[serde(default, deserialize_with = "present_or_null")]
    val: Option<Option<String>>,
    id: Option<u64>,
    dur: Option<u64>,
    cons: Option<Vec<ConstraintRecord>>,
}

/// Distinguishes `"val": null` (Some(None)) from a missing key (None).
fn present_or_null<'de, D>(d: D) -> std::result::Result<Option<Option<String>>, D::Error>
where
    D: serde::Deserializer<'de>,
{
    Option::<String>::deserialize(d).map(Some)
}

impl TraceEvent {
    pub fn to_json_line(&self) -> String {
        match &self.body {
            EventBody::Machine { node, attribute, value } => serde_json::to_string(&MachineLine {
                t: self.time,
                kind: "machine",
                node: node.0,
                attr: attribute.as_str(),
                val: value.as_ref().map(ValueToken::as_str),
            }),
            EventBody::Task { task, duration } => serde_json::to_string(&TaskLine {
                t: self.time,
                kind: "task",
                id: task.task_id,
                dur: *duration,
                cons: task.constraints.iter().map(ConstraintRecord::from).collect(),
            }),
        }
        .expect("trace lines always serialize")
    }

    fn from_raw(raw: RawLine, line: usize) -> Result<Self> {
        let err = |message: String| Error::Trace { line, message };
        let missing = |field: &str| err(format!("missing field `{field}` for kind {:?}", raw.kind));
        let body = match raw.kind.as_str() {
            "machine" => {
                let attr = raw.attr.clone().ok_or_else(|| missing("attr"))?;
                let value = raw.val.clone().ok_or_else(|| missing("val"))?;
                EventBody::Machine {
                    node: NodeId(raw.node.ok_or_else(|| missing("node"))?),
                    attribute: AttributeKey::new(attr).map_err(|e| err(e.to_string()))?,
                    value: value.map(ValueToken::new),
                }
            }
            "task" => {
                let records = raw.cons.clone().ok_or_else(|| missing("cons"))?;
                let mut constraints = Vec::with_capacity(records.len());
                for rec in records {
                    let op = rec.op.clone();
                    let c = Constraint::try_from(rec).map_err(|e| match e {
                        Error::UnknownOperator(_) => err(format!("unknown operator {op:?}")),
                        other => err(other.to_string()),
                    })?;
                    constraints.push(c);
                }
                EventBody::Task {
                    task: TaskConstraintSet::new(raw.id.ok_or_else(|| missing("id"))?, constraints),
                    duration: raw.dur.ok_or_else(|| missing("dur"))?,
                }
            }
            other => return Err(err(format!("unknown event kind {other:?}"))),
        };
        Ok(TraceEvent { time: raw.t, body })
    }
}

/// Parses a JSONL trace. Blank lines are skipped; line numbers are 1-based.
pub fn parse_events<R: BufRead>(input: R) -> Result<Vec<TraceEvent>> {
    let mut events = Vec::new();
    let mut last_time = 0u64;
    for (i, line) in input.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawLine = serde_json::from_str(&line).map_err(|e| Error::Trace {
            line: line_no,
            message: e.to_string(),
        })?;
        let event = TraceEvent::from_raw(raw, line_no)?;
        if event.time < last_time {
            return Err(Error::Trace {
                line: line_no,
                message: format!("time went backwards: {} < {}", event.time, last_time),
            });
        }
        last_time = event.time;
        events.push(event);
    }
    Ok(events)
}

pub fn write_events<W: Write>(events: &[TraceEvent], mut out: W) -> Result<()> {
    for e in events {
        out.write_all(e.to_json_line().as_bytes())?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_trace_file(path: &std::path::Path) -> Result<Vec<TraceEvent>> {
    let file = std::fs::File::open(path).map_err(|e| Error::file(path, e))?;
    parse_events(std::io::BufReader::new(file))
}
