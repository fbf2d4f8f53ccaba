//! Run transcripts.
//!
//! A trace is a sequence of line records:
//!
//! ```text
//! <timestamp_ms> TX <endpoint> <hex frame>
//! <timestamp_ms> RX <receiver><-<sender> <hex frame>
//! <timestamp_ms> ACT <endpoint> <actuator>
//! <timestamp_ms> STATE <endpoint> <state>
//! ```
//!
//! Frames are hex-encoded exactly as they appear on the wire. Lines starting
//! with `#` are comments; `# param <key> <value>` lines carry the policy
//! parameters the auditor checks against. Endpoints whose name starts with
//! `adv.` are adversary-controlled.

use std::any::Any;
use std::fmt::{self, Write as _};
use std::rc::Rc;

use thiserror::Error;

use crate::devices::{ActuatorKind, Millis};
use crate::wire::{DecodeError, Frame};

pub const ADVERSARY_PREFIX: &str = "adv.";

pub fn is_adversary(endpoint: &str) -> bool {
    endpoint.starts_with(ADVERSARY_PREFIX)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RecordKind {
    Tx {
        endpoint: Rc<str>,
        frame: Rc<Frame>,
    },
    Rx {
        endpoint: Rc<str>,
        from: Rc<str>,
        frame: Rc<Frame>,
    },
    Act {
        endpoint: Rc<str>,
        actuator: ActuatorKind,
    },
    State {
        endpoint: Rc<str>,
        state: Rc<str>,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceRecord {
    pub at: Millis,
    pub kind: RecordKind,
}

impl TraceRecord {
    pub fn endpoint(&self) -> &str {
        match &self.kind {
            RecordKind::Tx { endpoint, .. }
            | RecordKind::Rx { endpoint, .. }
            | RecordKind::Act { endpoint, .. }
            | RecordKind::State { endpoint, .. } => endpoint,
        }
    }
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            RecordKind::Tx { endpoint, frame } => {
                write!(f, "{} TX {} {}", self.at, endpoint, hex::encode(frame.encode()))
            }
            RecordKind::Rx {
                endpoint,
                from,
                frame,
            } => write!(
                f,
                "{} RX {}<-{} {}",
                self.at,
                endpoint,
                from,
                hex::encode(frame.encode())
            ),
            RecordKind::Act { endpoint, actuator } => {
                write!(f, "{} ACT {} {}", self.at, endpoint, actuator.name())
            }
            RecordKind::State { endpoint, state } => {
                write!(f, "{} STATE {} {}", self.at, endpoint, state)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TraceFormatError {
    #[error("line {line}: expected 4 fields, got {got}")]
    FieldCount { line: usize, got: usize },
    #[error("line {line}: bad timestamp `{value}`")]
    Timestamp { line: usize, value: String },
    #[error("line {line}: timestamp {at} goes back in time")]
    TimeReversal { line: usize, at: Millis },
    #[error("line {line}: unknown record kind `{kind}`")]
    Kind { line: usize, kind: String },
    #[error("line {line}: bad endpoint `{value}`")]
    Endpoint { line: usize, value: String },
    #[error("line {line}: bad hex frame")]
    Hex { line: usize },
    #[error("line {line}: frame does not decode: {source}")]
    Frame { line: usize, source: DecodeError },
    #[error("line {line}: unknown actuator `{name}`")]
    Actuator { line: usize, name: String },
    #[error("line {line}: bad parameter line")]
    Param { line: usize },
}

fn check_name(line: usize, name: &str) -> Result<Rc<str>, TraceFormatError> {
    let valid = !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-' | '/'));
    if valid {
        Ok(Rc::from(name))
    } else {
        Err(TraceFormatError::Endpoint {
            line,
            value: name.to_string(),
        })
    }
}

/// Parses one line. Comments and blank lines yield `None`.
pub fn parse_line(line_no: usize, line: &str) -> Result<Option<TraceRecord>, TraceFormatError> {
    let trimmed = line.trim();
    if trimmed.is_empty() || trimmed.starts_with('#') {
        return Ok(None);
    }
    let fields: Vec<&str> = trimmed.split_ascii_whitespace().collect();
    if fields.len() != 4 {
        return Err(TraceFormatError::FieldCount {
            line: line_no,
            got: fields.len(),
        });
    }
    let at: Millis = fields[0].parse().map_err(|_| TraceFormatError::Timestamp {
        line: line_no,
        value: fields[0].to_string(),
    })?;
    let frame = |hex_text: &str| -> Result<Rc<Frame>, TraceFormatError> {
        let bytes = hex::decode(hex_text).map_err(|_| TraceFormatError::Hex { line: line_no })?;
        Frame::decode(&bytes)
            .map(Rc::new)
            .map_err(|source| TraceFormatError::Frame {
                line: line_no,
                source,
            })
    };
    let kind = match fields[1] {
        "TX" => RecordKind::Tx {
            endpoint: check_name(line_no, fields[2])?,
            frame: frame(fields[3])?,
        },
        "RX" => {
            let (to, from) =
                fields[2]
                    .split_once("<-")
                    .ok_or_else(|| TraceFormatError::Endpoint {
                        line: line_no,
                        value: fields[2].to_string(),
                    })?;
            RecordKind::Rx {
                endpoint: check_name(line_no, to)?,
                from: check_name(line_no, from)?,
                frame: frame(fields[3])?,
            }
        }
        "ACT" => RecordKind::Act {
            endpoint: check_name(line_no, fields[2])?,
            actuator: ActuatorKind::from_name(fields[3]).ok_or_else(|| {
                TraceFormatError::Actuator {
                    line: line_no,
                    name: fields[3].to_string(),
                }
            })?,
        },
        "STATE" => RecordKind::State {
            endpoint: check_name(line_no, fields[2])?,
            state: check_name(line_no, fields[3])?,
        },
        other => {
            return Err(TraceFormatError::Kind {
                line: line_no,
                kind: other.to_string(),
            })
        }
    };
    Ok(Some(TraceRecord { at, kind }))
}

/// Parses a whole trace: `(line number, record)` pairs plus `# param` values.
pub fn parse_trace(text: &str) -> Result<ParsedTrace, TraceFormatError> {
    let mut out = ParsedTrace::default();
    let mut last = 0;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if let Some(rest) = line.trim().strip_prefix("# param ") {
            let mut parts = rest.split_ascii_whitespace();
            match (parts.next(), parts.next(), parts.next()) {
                (Some(k), Some(v), None) => out.params.push((k.to_string(), v.to_string())),
                _ => return Err(TraceFormatError::Param { line: line_no }),
            }
            continue;
        }
        if let Some(rec) = parse_line(line_no, line)? {
            if rec.at < last {
                return Err(TraceFormatError::TimeReversal {
                    line: line_no,
                    at: rec.at,
                });
            }
            last = rec.at;
            out.records.push((line_no, rec));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParsedTrace {
    pub params: Vec<(String, String)>,
    pub records: Vec<(usize, TraceRecord)>,
}

impl ParsedTrace {
    pub fn param(&self, key: &str) -> Option<&str> {
        self.params
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }
}

/// Receives every record the simulator produces, in order.
pub trait TraceSink: Any {
    fn record(&mut self, rec: &TraceRecord);
    fn as_any(&self) -> &dyn Any;
    fn as_any_mut(&mut self) -> &mut dyn Any;
}

/// Keeps every record in memory.
#[derive(Default, Debug)]
pub struct TraceBuffer {
    pub records: Vec<TraceRecord>,
}

impl TraceSink for TraceBuffer {
    fn record(&mut self, rec: &TraceRecord) {
        self.records.push(rec.clone());
    }
    fn as_any(&self) -> &dyn Any {
        self
    }
    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}

/// Renders records to the line format as they arrive.
#[derive(Default, Debug)]
pub struct TextTrace {
    text: String,
    lines: usize,
}

impl TextTrace {
    pub fn with_header(params: &[(&str, String)]) -> Self {
        let mut t = TextTrace::default();
        t.text.push_str("# rkesim trace v1\n");
        t.lines += 1;
        for (k, v) in params {
            let _ = writeln!(t.text, "# param {k} {v}");
            t.lines += 1;
        }
        t
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn into_text(self) -> String {
        self.text
    }

    /// Number of lines written so far, header included.
    pub fn lines(&self) -> usize {
        self.lines
    }
}

impl TraceSink for TextTrace {
    fn record(&mut self, rec: &TraceRecord) {
        let _ = writeln!(self.text, "{rec}");
        self.lines += 1;
    }
    fn as_any(&self) -> &dyn Any {
        self
    }
    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}
