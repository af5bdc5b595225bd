//! Line-delimited JSON traces.
//!
//! The first line is the header `{"v":1}`; every following non-blank line is
//! one event:
//!
//! ```text
//! {"seq":1,"op":"alloc","object_id":0,"size":24,"level":"user"}
//! {"seq":2,"op":"access","object_id":0,"offset":8,"size":4,"kind":"load","label":"benign"}
//! {"seq":3,"op":"raw_access","word":"0x9800000000402fff","offset":0,"size":1,"kind":"store"}
//! {"seq":4,"op":"free","object_id":0}
//! ```

use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::descriptor_store::Level;
use crate::dgu::AccessKind;
use crate::ptr_codec::Mode;

pub const TRACE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Benign,
    SpatialViolation,
    TemporalViolation,
}

impl Label {
    pub fn is_violation(self) -> bool {
        self != Label::Benign
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Op {
    Alloc {
        object_id: u64,
        size: u64,
        #[serde(default)]
        level: Level,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        mode_override: Option<Mode>,
    },
    Free {
        object_id: u64,
    },
    Access {
        object_id: u64,
        offset: i64,
        size: u64,
        kind: AccessKind,
    },
    RawAccess {
        #[serde(with = "crate::hex")]
        word: u64,
        offset: i64,
        size: u64,
        kind: AccessKind,
    },
}

impl Op {
    pub fn object_id(&self) -> Option<u64> {
        match *self {
            Op::Alloc { object_id, .. } | Op::Free { object_id } | Op::Access { object_id, .. } => {
                Some(object_id)
            }
            Op::RawAccess { .. } => None,
        }
    }

    pub fn is_access(&self) -> bool {
        matches!(self, Op::Access { .. } | Op::RawAccess { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub seq: u64,
    #[serde(flatten)]
    pub op: Op,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
}

impl TraceEvent {
    pub fn new(seq: u64, op: Op) -> Self {
        Self {
            seq,
            op,
            label: None,
        }
    }

    pub fn labeled(seq: u64, op: Op, label: Label) -> Self {
        Self {
            seq,
            op,
            label: Some(label),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TraceError {
    #[error("trace is empty: expected a {{\"v\":{TRACE_VERSION}}} header line")]
    MissingHeader,
    #[error("line 1: bad header: {0}")]
    BadHeader(String),
    #[error("unsupported trace version {0}")]
    UnsupportedVersion(u32),
    #[error("line {line}{}: {message}", seq.map(|s| format!(" (seq {s})")).unwrap_or_default())]
    Parse {
        line: usize,
        seq: Option<u64>,
        message: String,
    },
    #[error("seq {seq}: not greater than previous seq {previous}")]
    NonMonotonicSeq { seq: u64, previous: u64 },
    #[error("seq {seq}: object {object_id} used before any alloc")]
    UnknownObject { seq: u64, object_id: u64 },
    #[error("seq {seq}: object {object_id} allocated twice")]
    DuplicateAlloc { seq: u64, object_id: u64 },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct Header {
    v: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Trace {
    pub events: Vec<TraceEvent>,
}

impl Trace {
    pub fn new(events: Vec<TraceEvent>) -> Self {
        Self { events }
    }

    /// Parses and validates JSONL text.
    pub fn parse(text: &str) -> Result<Self, TraceError> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or(TraceError::MissingHeader)?;
        let header: Header =
            serde_json::from_str(header).map_err(|e| TraceError::BadHeader(e.to_string()))?;
        if header.v != TRACE_VERSION {
            return Err(TraceError::UnsupportedVersion(header.v));
        }
        let mut events = Vec::new();
        for (idx, line) in lines {
            let event: TraceEvent = serde_json::from_str(line).map_err(|e| TraceError::Parse {
                line: idx + 1,
                seq: salvage_seq(line),
                message: e.to_string(),
            })?;
            events.push(event);
        }
        let trace = Self { events };
        trace.validate()?;
        Ok(trace)
    }

    /// Checks seq ordering and that every referenced object was allocated earlier.
    pub fn validate(&self) -> Result<(), TraceError> {
        let mut allocated = HashSet::new();
        let mut previous: Option<u64> = None;
        for e in &self.events {
            if let Some(p) = previous {
                if e.seq <= p {
                    return Err(TraceError::NonMonotonicSeq {
                        seq: e.seq,
                        previous: p,
                    });
                }
            }
            previous = Some(e.seq);
            match e.op {
                Op::Alloc { object_id, .. } => {
                    if !allocated.insert(object_id) {
                        return Err(TraceError::DuplicateAlloc {
                            seq: e.seq,
                            object_id,
                        });
                    }
                }
                Op::Free { object_id } | Op::Access { object_id, .. } => {
                    if !allocated.contains(&object_id) {
                        return Err(TraceError::UnknownObject {
                            seq: e.seq,
                            object_id,
                        });
                    }
                }
                Op::RawAccess { .. } => {}
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut out =
            serde_json::to_string(&Header { v: TRACE_VERSION }).expect("header serializes");
        out.push('\n');
        for e in &self.events {
            let line = serde_json::to_string(e).expect("event serializes");
            let _ = writeln!(out, "{line}");
        }
        out
    }

    /// Rewrites seq as 1, 2, 3, ...
    pub fn renumber(&mut self) {
        for (i, e) in self.events.iter_mut().enumerate() {
            e.seq = i as u64 + 1;
        }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn count_label(&self, label: Label) -> usize {
        self.events
            .iter()
            .filter(|e| e.label == Some(label))
            .count()
    }
}

fn salvage_seq(line: &str) -> Option<u64> {
    let value: serde_json::Value = serde_json::from_str(line).ok()?;
    value.get("seq")?.as_u64()
}
