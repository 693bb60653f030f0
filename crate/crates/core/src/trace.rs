//! Run artifacts: the protocol trace (round opens, INVs, ACKs, commits,
//! subtree lock windows) and the client operation history, both written
//! as JSON lines, plus the per-request trace rows.
//!
//! The verifier consumes these files; they are the only interface
//! between a run and its offline checkers.

use std::io::{BufRead, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::kernel::Micros;
use crate::store::{EntryKind, INodeId, RequestId, SubtreeOpId};
use crate::workload::OpKind;

/// One protocol-level event with its virtual timestamp.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum ProtoEvent {
    RoundOpen {
        t: Micros,
        round: u64,
        leader: u32,
        targets: Vec<u32>,
        prefix: Option<Arc<str>>,
        fanout: u32,
    },
    Inv {
        t: Micros,
        round: u64,
        deployment: u32,
        instance: u32,
    },
    Ack {
        t: Micros,
        round: u64,
        instance: u32,
    },
    /// A committed mutation, in store commit order. Carries everything a
    /// reference replayer needs.
    Commit {
        t: Micros,
        commit_seq: u64,
        rid: RequestId,
        op: OpKind,
        path: Arc<str>,
        dst: Option<Arc<str>>,
        created_id: Option<INodeId>,
        created_kind: Option<EntryKind>,
        perms: Option<u16>,
        mtime: Micros,
        /// For subtree commits: paths relative to the root ("" = root),
        /// recorded when history recording is on.
        suffixes: Option<Vec<Arc<str>>>,
    },
    SubtreeLock {
        t: Micros,
        op_id: SubtreeOpId,
        rid: RequestId,
        root: Arc<str>,
    },
    SubtreeClear {
        t: Micros,
        op_id: SubtreeOpId,
        rid: RequestId,
        root: Arc<str>,
        completed: bool,
    },
    InstanceJoin {
        t: Micros,
        instance: u32,
        deployment: u32,
    },
    InstanceLeave {
        t: Micros,
        instance: u32,
        deployment: u32,
        crashed: bool,
    },
}

impl ProtoEvent {
    pub fn timestamp(&self) -> Micros {
        match self {
            ProtoEvent::RoundOpen { t, .. }
            | ProtoEvent::Inv { t, .. }
            | ProtoEvent::Ack { t, .. }
            | ProtoEvent::Commit { t, .. }
            | ProtoEvent::SubtreeLock { t, .. }
            | ProtoEvent::SubtreeClear { t, .. }
            | ProtoEvent::InstanceJoin { t, .. }
            | ProtoEvent::InstanceLeave { t, .. } => *t,
        }
    }
}

/// Value observed by (or written to) a path register.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "v", rename_all = "lowercase")]
pub enum RegValue {
    /// The request id of the last mutation affecting the path.
    Present { writer: RequestId },
    Absent,
}

/// Client-visible final outcome of one operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistoryOutcome {
    Ok,
    NotFound,
    AlreadyExists,
    NotADirectory,
    /// Transport attempts exhausted; the op is possibly applied.
    GaveUp,
    /// Still in flight when the run ended; possibly applied.
    Unresolved,
}

/// One client operation, invoke to final response.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HistoryEvent {
    pub client: u32,
    pub rid: RequestId,
    pub op: OpKind,
    pub path: Arc<str>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dst: Option<Arc<str>>,
    pub invoke_us: Micros,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub response_us: Option<Micros>,
    pub outcome: HistoryOutcome,
    /// Observed register value, for reads.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub value: Option<RegValue>,
    /// Subtree ops: affected paths relative to the root ("" = root).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub suffixes: Option<Vec<Arc<str>>>,
    pub attempts: u32,
}

/// One completed (or abandoned) request for the per-request trace.
#[derive(Debug, Clone, Serialize)]
pub struct RequestTraceRow {
    pub rid: RequestId,
    pub client: u32,
    pub op: OpKind,
    pub via: &'static str,
    pub attempts: u32,
    pub issued_us: Micros,
    pub completed_us: Option<Micros>,
    pub total_us: Option<Micros>,
    pub outcome: &'static str,
}

pub fn write_jsonl<T: Serialize, W: Write>(items: &[T], mut w: W) -> std::io::Result<()> {
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>, R: BufRead>(r: R) -> std::io::Result<Vec<T>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        out.push(item);
    }
    Ok(out)
}

pub fn request_trace_csv<W: Write>(rows: &[RequestTraceRow], mut w: W) -> std::io::Result<()> {
    writeln!(
        w,
        "rid,client,op,via,attempts,issued_us,completed_us,total_us,outcome"
    )?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.rid,
            r.client,
            r.op.label(),
            r.via,
            r.attempts,
            r.issued_us,
            r.completed_us.map(|v| v.to_string()).unwrap_or_default(),
            r.total_us.map(|v| v.to_string()).unwrap_or_default(),
            r.outcome,
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip() {
        let events = vec![
            ProtoEvent::RoundOpen {
                t: 5,
                round: 1,
                leader: 2,
                targets: vec![0, 3],
                prefix: None,
                fanout: 4,
            },
            ProtoEvent::Commit {
                t: 9,
                commit_seq: 1,
                rid: 77,
                op: OpKind::Create,
                path: "/a/f".into(),
                dst: None,
                created_id: Some(12),
                created_kind: Some(EntryKind::File),
                perms: None,
                mtime: 8,
                suffixes: None,
            },
        ];
        let mut buf = Vec::new();
        write_jsonl(&events, &mut buf).unwrap();
        let back: Vec<ProtoEvent> = read_jsonl(&buf[..]).unwrap();
        assert_eq!(back.len(), 2);
        match &back[1] {
            ProtoEvent::Commit { rid, path, .. } => {
                assert_eq!(*rid, 77);
                assert_eq!(&**path, "/a/f");
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
