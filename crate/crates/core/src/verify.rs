//! Independent correctness checkers: a single-node reference namespace
//! replaying the committed-write order, a per-path linearizability
//! checker over recorded histories (Wing-Gong style search), and
//! structural comparators against the exported store snapshot.
//!
//! Nothing here calls into the engine or the store implementation; the
//! only inputs are the protocol trace, the client history, and the
//! snapshot file.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::kernel::Micros;
use crate::path;
use crate::store::{EntryKind, INodeId, RequestId};
use crate::trace::{HistoryEvent, HistoryOutcome, ProtoEvent, RegValue};
use crate::workload::OpKind;

// ---------------------------------------------------------------------
// Reference tree replay
// ---------------------------------------------------------------------

#[derive(Debug, Clone)]
struct RefNode {
    id: INodeId,
    kind: EntryKind,
    perms: u16,
    mtime: Micros,
    last_writer: RequestId,
    children: BTreeMap<Box<str>, usize>,
}

/// Plain in-memory namespace applying committed operations sequentially.
#[derive(Debug)]
pub struct ReferenceTree {
    nodes: Vec<Option<RefNode>>,
    root: usize,
}

impl ReferenceTree {
    pub fn new() -> Self {
        ReferenceTree {
            nodes: vec![Some(RefNode {
                id: 1,
                kind: EntryKind::Directory,
                perms: 0o755,
                mtime: 0,
                last_writer: 0,
                children: BTreeMap::new(),
            })],
            root: 0,
        }
    }

    fn find(&self, p: &str) -> Option<usize> {
        let mut cur = self.root;
        for comp in path::components(p) {
            cur = *self.nodes[cur].as_ref()?.children.get(comp)?;
        }
        Some(cur)
    }

    fn insert(&mut self, parent: usize, name: &str, node: RefNode) -> usize {
        let idx = self.nodes.len();
        self.nodes.push(Some(node));
        self.nodes[parent]
            .as_mut()
            .expect("live parent")
            .children
            .insert(name.into(), idx);
        idx
    }

    fn remove_subtree(&mut self, p: &str) {
        let Some(idx) = self.find(p) else { return };
        let parent_path = path::parent_dir(p);
        let name = path::leaf_name(p);
        if let Some(pidx) = self.find(parent_path) {
            self.nodes[pidx]
                .as_mut()
                .expect("live parent")
                .children
                .remove(name);
        }
        let mut stack = vec![idx];
        while let Some(i) = stack.pop() {
            if let Some(node) = self.nodes[i].take() {
                stack.extend(node.children.values());
            }
        }
    }

    fn touch(&mut self, p: &str, mtime: Micros, rid: RequestId) {
        if let Some(idx) = self.find(p) {
            let n = self.nodes[idx].as_mut().expect("live node");
            n.mtime = mtime;
            n.last_writer = rid;
        }
    }

    /// All live `(path, id, kind, perms, mtime, last_writer)` rows.
    pub fn rows(&self) -> Vec<(String, INodeId, EntryKind, u16, Micros, RequestId)> {
        let mut out = Vec::new();
        let mut stack: Vec<(usize, String)> = vec![(self.root, "/".to_string())];
        while let Some((idx, p)) = stack.pop() {
            let node = self.nodes[idx].as_ref().expect("reachable node is live");
            out.push((
                p.clone(),
                node.id,
                node.kind,
                node.perms,
                node.mtime,
                node.last_writer,
            ));
            for (name, child) in &node.children {
                let cp = path::join(if idx == self.root { "/" } else { &p }, name);
                stack.push((*child, cp));
            }
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn len(&self) -> usize {
        self.nodes.iter().flatten().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Apply one committed mutation.
    pub fn apply_commit(&mut self, ev: &ProtoEvent) -> Result<(), String> {
        let ProtoEvent::Commit {
            rid,
            op,
            path: p,
            dst,
            created_id,
            created_kind,
            perms,
            mtime,
            suffixes,
            ..
        } = ev
        else {
            return Ok(());
        };
        match op {
            OpKind::Create | OpKind::Mkdir => {
                let parent = self
                    .find(path::parent_dir(p))
                    .ok_or_else(|| format!("create {p}: missing parent"))?;
                let kind = created_kind.ok_or("create without kind")?;
                let id = created_id.ok_or("create without id")?;
                self.insert(
                    parent,
                    path::leaf_name(p),
                    RefNode {
                        id,
                        kind,
                        perms: match kind {
                            EntryKind::File => 0o644,
                            EntryKind::Directory => 0o755,
                        },
                        mtime: *mtime,
                        last_writer: *rid,
                        children: BTreeMap::new(),
                    },
                );
                self.touch(path::parent_dir(p), *mtime, *rid);
            }
            OpKind::Delete => {
                self.remove_subtree(p);
                self.touch(path::parent_dir(p), *mtime, *rid);
            }
            OpKind::SetAttr => {
                let idx = self.find(p).ok_or_else(|| format!("setattr {p}: missing"))?;
                let n = self.nodes[idx].as_mut().expect("live");
                n.perms = perms.ok_or("setattr without perms")?;
                n.mtime = *mtime;
                n.last_writer = *rid;
            }
            OpKind::Mv => {
                let dst = dst.as_ref().ok_or("mv without dst")?;
                let src_idx = self.find(p).ok_or_else(|| format!("mv {p}: missing"))?;
                // Detach from the old parent, attach under the new one.
                let src_parent = self
                    .find(path::parent_dir(p))
                    .ok_or_else(|| format!("mv {p}: missing src parent"))?;
                self.nodes[src_parent]
                    .as_mut()
                    .expect("live")
                    .children
                    .remove(path::leaf_name(p));
                let dst_parent = self
                    .find(path::parent_dir(dst))
                    .ok_or_else(|| format!("mv {p}: missing dst parent {dst}"))?;
                self.nodes[dst_parent]
                    .as_mut()
                    .expect("live")
                    .children
                    .insert(path::leaf_name(dst).into(), src_idx);
                {
                    let n = self.nodes[src_idx].as_mut().expect("live");
                    n.mtime = *mtime;
                    n.last_writer = *rid;
                }
                // Subtree moves rewrite every moved row's register.
                if let Some(sfx) = suffixes {
                    for suffix in sfx {
                        if suffix.is_empty() {
                            continue;
                        }
                        let moved = path::join(dst, suffix);
                        if let Some(idx) = self.find(&moved) {
                            self.nodes[idx].as_mut().expect("live").last_writer = *rid;
                        }
                    }
                }
                self.touch(path::parent_dir(p), *mtime, *rid);
                self.touch(path::parent_dir(dst), *mtime, *rid);
            }
            _ => return Err(format!("unexpected committed op {op:?}")),
        }
        Ok(())
    }
}

impl Default for ReferenceTree {
    fn default() -> Self {
        Self::new()
    }
}

/// Replay every commit in the protocol trace, in commit-sequence order.
pub fn replay_commits(proto: &[ProtoEvent]) -> Result<ReferenceTree, String> {
    let mut commits: Vec<&ProtoEvent> = proto
        .iter()
        .filter(|e| matches!(e, ProtoEvent::Commit { .. }))
        .collect();
    commits.sort_by_key(|e| match e {
        ProtoEvent::Commit { commit_seq, .. } => *commit_seq,
        _ => 0,
    });
    let mut tree = ReferenceTree::new();
    for c in commits {
        tree.apply_commit(c)?;
    }
    Ok(tree)
}

/// One parsed snapshot row.
#[derive(Debug, Deserialize)]
struct SnapshotRow {
    id: INodeId,
    parent: INodeId,
    name: String,
    kind: EntryKind,
    #[allow(dead_code)]
    perms: u16,
    #[allow(dead_code)]
    mtime: Micros,
    last_writer: RequestId,
}

/// Compare the reference tree with the exported store snapshot; returns
/// the first divergent path on mismatch.
pub fn compare_snapshot(tree: &ReferenceTree, snapshot_jsonl: &str) -> Result<(), String> {
    let mut rows: Vec<SnapshotRow> = Vec::new();
    for line in snapshot_jsonl.lines() {
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(line).map_err(|e| format!("bad snapshot line: {e}"))?);
    }
    // Rebuild paths from (parent, name) pairs.
    let by_id: HashMap<INodeId, &SnapshotRow> = rows.iter().map(|r| (r.id, r)).collect();
    let path_of = |mut id: INodeId| -> Result<String, String> {
        let mut comps: Vec<&str> = Vec::new();
        let mut hops = 0;
        while id != 1 {
            let row = by_id.get(&id).ok_or_else(|| format!("dangling id {id}"))?;
            comps.push(&row.name);
            id = row.parent;
            hops += 1;
            if hops > rows.len() {
                return Err(format!("cycle at id {id}"));
            }
        }
        let mut out = String::new();
        for c in comps.iter().rev() {
            out.push('/');
            out.push_str(c);
        }
        if out.is_empty() {
            out.push('/');
        }
        Ok(out)
    };
    let mut snap: BTreeMap<String, (INodeId, EntryKind, RequestId)> = BTreeMap::new();
    for r in &rows {
        snap.insert(path_of(r.id)?, (r.id, r.kind, r.last_writer));
    }
    let mut reference: BTreeMap<String, (INodeId, EntryKind, RequestId)> = BTreeMap::new();
    for (p, id, kind, _perms, _mtime, rid) in tree.rows() {
        reference.insert(p, (id, kind, rid));
    }
    for (p, want) in &reference {
        match snap.get(p) {
            None => return Err(format!("missing from snapshot: {p}")),
            Some(got) if got != want => {
                return Err(format!("diverged at {p}: reference {want:?}, snapshot {got:?}"))
            }
            _ => {}
        }
    }
    for p in snap.keys() {
        if !reference.contains_key(p) {
            return Err(format!("extra path in snapshot: {p}"));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------
// Per-path register linearizability (Wing-Gong style)
// ---------------------------------------------------------------------

/// One register operation extracted from the history.
#[derive(Debug, Clone)]
struct RegOp {
    rid: RequestId,
    invoke: Micros,
    /// `None` models an unbounded interval (possibly applied).
    response: Option<Micros>,
    action: RegAction,
    /// Optional ops may be placed anywhere after invoke, or dropped.
    optional: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum RegAction {
    Read(RegValue),
    Write(RegValue),
}

/// A linearizability violation on one path register.
#[derive(Debug, Clone, Serialize)]
pub struct Counterexample {
    pub path: String,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize, Default)]
pub struct VerifyReport {
    pub linearizable: bool,
    pub counterexamples: Vec<Counterexample>,
    pub stale_reads: Vec<Counterexample>,
    pub replay_ok: bool,
    pub replay_error: Option<String>,
    pub subtree_isolation_ok: bool,
    pub subtree_violations: Vec<String>,
    pub paths_checked: usize,
    pub ops_checked: usize,
    /// Registers whose search exhausted its budget (reported, not failed).
    pub undetermined_paths: usize,
}

impl VerifyReport {
    pub fn ok(&self) -> bool {
        self.linearizable
            && self.stale_reads.is_empty()
            && self.replay_ok
            && self.subtree_isolation_ok
    }
}

/// Expand history events into per-path register operations.
fn per_path_ops(history: &[HistoryEvent]) -> BTreeMap<Arc<str>, Vec<RegOp>> {
    // Registers only matter for paths something read or wrote directly.
    let mut map: BTreeMap<Arc<str>, Vec<RegOp>> = BTreeMap::new();
    let mut push = |p: Arc<str>, op: RegOp| map.entry(p).or_default().push(op);

    // Paths mentioned anywhere, for expanding possibly-applied subtree
    // ops whose affected set is unknown.
    let mut known_paths: HashSet<Arc<str>> = HashSet::new();
    for ev in history {
        known_paths.insert(ev.path.clone());
        if let Some(d) = &ev.dst {
            known_paths.insert(d.clone());
        }
    }

    for ev in history {
        let optional = matches!(
            ev.outcome,
            HistoryOutcome::GaveUp | HistoryOutcome::Unresolved
        );
        let completed_ok = ev.outcome == HistoryOutcome::Ok;
        let is_read = ev.op.is_read();
        // Reads participate whenever they observed a value (a NotFound
        // is an observation of Absent); failed writes had no effect.
        if is_read {
            if ev.value.is_none() {
                continue;
            }
        } else if !completed_ok && !optional {
            continue;
        }
        let rid = ev.rid;
        let base = RegOp {
            rid,
            invoke: ev.invoke_us,
            response: ev.response_us,
            action: RegAction::Read(RegValue::Absent),
            optional,
        };
        let write = |v: RegValue| RegOp {
            action: RegAction::Write(v),
            ..base.clone()
        };
        let present = RegValue::Present { writer: rid };
        match ev.op {
            OpKind::Read | OpKind::Stat | OpKind::Ls => {
                if let Some(v) = ev.value {
                    push(
                        ev.path.clone(),
                        RegOp {
                            action: RegAction::Read(v),
                            ..base.clone()
                        },
                    );
                }
            }
            OpKind::Create | OpKind::Mkdir => {
                push(ev.path.clone(), write(present));
                push(path::parent_dir(&ev.path).into(), write(present));
            }
            OpKind::SetAttr => {
                push(ev.path.clone(), write(present));
            }
            OpKind::Delete => {
                match &ev.suffixes {
                    Some(sfx) => {
                        for s in sfx.iter() {
                            let p: Arc<str> = if s.is_empty() {
                                ev.path.clone()
                            } else {
                                path::join(&ev.path, s).into()
                            };
                            push(p, write(RegValue::Absent));
                        }
                    }
                    None => {
                        push(ev.path.clone(), write(RegValue::Absent));
                        if optional {
                            // Possibly-applied subtree delete: expand over
                            // observed paths under the prefix; optional
                            // writes can always be dropped.
                            for p in &known_paths {
                                if *p != ev.path && path::starts_with_prefix(p, &ev.path) {
                                    push(p.clone(), write(RegValue::Absent));
                                }
                            }
                        }
                    }
                }
                push(path::parent_dir(&ev.path).into(), write(present));
            }
            OpKind::Mv => {
                let dst = ev.dst.clone().expect("mv has dst");
                match &ev.suffixes {
                    Some(sfx) => {
                        for s in sfx.iter() {
                            let (src_p, dst_p): (Arc<str>, Arc<str>) = if s.is_empty() {
                                (ev.path.clone(), dst.clone())
                            } else {
                                (
                                    path::join(&ev.path, s).into(),
                                    path::join(&dst, s).into(),
                                )
                            };
                            push(src_p, write(RegValue::Absent));
                            push(dst_p, write(present));
                        }
                    }
                    None => {
                        push(ev.path.clone(), write(RegValue::Absent));
                        push(dst.clone(), write(present));
                        if optional {
                            for p in &known_paths {
                                if *p != ev.path && path::starts_with_prefix(p, &ev.path) {
                                    push(p.clone(), write(RegValue::Absent));
                                    let suffix = &p[ev.path.len()..];
                                    let moved: Arc<str> =
                                        format!("{dst}{suffix}").into();
                                    push(moved, write(present));
                                }
                            }
                        }
                    }
                }
                push(path::parent_dir(&ev.path).into(), write(present));
                push(path::parent_dir(&dst).into(), write(present));
            }
        }
    }
    map
}

/// Quick stale-read detector: a read that begins after a write's
/// response must not observe a value the register could no longer hold.
///
/// Sound but not complete: it only flags observations that no legal
/// linearization can produce, leaving subtler interleavings to the
/// Wing-Gong search.
fn detect_stale_reads(path_str: &str, ops: &[RegOp]) -> Vec<Counterexample> {
    let mut out = Vec::new();
    // Completed writes ordered by response time.
    let mut writes: Vec<&RegOp> = ops
        .iter()
        .filter(|o| !o.optional && o.response.is_some() && matches!(o.action, RegAction::Write(_)))
        .collect();
    writes.sort_by_key(|w| w.response.unwrap());
    for r in ops.iter().filter(|o| matches!(o.action, RegAction::Read(_))) {
        let RegAction::Read(seen) = &r.action else {
            continue;
        };
        let Some(r_resp) = r.response else { continue };
        // Latest write that finished before this read began: it (or a
        // later write) defines what the read may observe.
        let mut last: Option<&RegOp> = None;
        for w in &writes {
            if w.response.unwrap() < r.invoke {
                last = Some(w);
            } else {
                break;
            }
        }
        let Some(last) = last else { continue };
        let RegAction::Write(expect) = &last.action else {
            continue;
        };
        if seen == expect {
            continue;
        }
        // A write of the observed value explains the read only if it can
        // linearize after `last` (not wholly before it) and before the
        // read's response.
        let explained = ops.iter().any(|w| {
            if let RegAction::Write(v) = &w.action {
                v == seen
                    && !matches!(w.response, Some(resp) if resp < last.invoke)
                    && w.invoke < r_resp
            } else {
                false
            }
        });
        if !explained {
            out.push(Counterexample {
                path: path_str.to_string(),
                detail: format!(
                    "read rid={} invoked at {} observed {:?}, but write rid={} completed at {} wrote {:?}",
                    r.rid,
                    r.invoke,
                    seen,
                    last.rid,
                    last.response.unwrap(),
                    expect
                ),
            });
        }
    }
    out
}

/// Wing-Gong style search for a legal linearization of one register.
///
/// Operations linearize within their invoke/response windows; optional
/// (possibly-applied) writes may be placed anywhere after their invoke
/// or dropped. Memoizes visited (linearized-set, value) states; a step
/// budget keeps pathological histories bounded.
enum WgOutcome {
    Linearizable,
    Violation,
    Undetermined,
}

fn wing_gong(ops: &[RegOp], budget: usize) -> WgOutcome {
    let n = ops.len();
    if n == 0 {
        return WgOutcome::Linearizable;
    }

    #[derive(Clone, PartialEq, Eq, Hash)]
    struct BitSet(Box<[u64]>);
    impl BitSet {
        fn new(n: usize) -> Self {
            BitSet(vec![0; n.div_ceil(64)].into_boxed_slice())
        }
        fn get(&self, i: usize) -> bool {
            self.0[i / 64] & (1 << (i % 64)) != 0
        }
        fn set(&self, i: usize) -> Self {
            let mut b = self.clone();
            b.0[i / 64] |= 1 << (i % 64);
            b
        }
        fn count(&self) -> usize {
            self.0.iter().map(|w| w.count_ones() as usize).sum()
        }
    }

    fn legal(action: &RegAction, value: &Option<RegValue>) -> bool {
        match action {
            RegAction::Write(_) => true,
            // The register's initial value is unknown; the first placed
            // read pins it.
            RegAction::Read(v) => match value {
                None => true,
                Some(cur) => cur == v,
            },
        }
    }

    fn apply(action: &RegAction, value: &Option<RegValue>) -> Option<RegValue> {
        match action {
            RegAction::Write(v) => Some(*v),
            RegAction::Read(v) => match value {
                None => Some(*v),
                Some(cur) => Some(*cur),
            },
        }
    }

    struct Ctx<'a> {
        ops: &'a [RegOp],
        visited: HashSet<(BitSet, Option<RegValue>)>,
        steps: usize,
        budget: usize,
    }

    fn search(ctx: &mut Ctx<'_>, done: &BitSet, value: Option<RegValue>) -> Option<bool> {
        let n = ctx.ops.len();
        if done.count() == n {
            return Some(true);
        }
        ctx.steps += 1;
        if ctx.steps > ctx.budget {
            return None;
        }
        if !ctx.visited.insert((done.clone(), value)) {
            return Some(false);
        }
        // Real-time order: nothing may linearize after the earliest
        // response among pending mandatory operations.
        let frontier = ctx
            .ops
            .iter()
            .enumerate()
            .filter(|(i, o)| !done.get(*i) && !o.optional)
            .filter_map(|(_, o)| o.response)
            .min()
            .unwrap_or(Micros::MAX);
        for i in 0..n {
            if done.get(i) {
                continue;
            }
            let op = &ctx.ops[i];
            if op.invoke > frontier {
                continue;
            }
            let next = done.set(i);
            if legal(&op.action, &value) {
                match search(ctx, &next, apply(&op.action, &value)) {
                    Some(true) => return Some(true),
                    Some(false) => {}
                    None => return None,
                }
            }
            if op.optional {
                match search(ctx, &next, value) {
                    Some(true) => return Some(true),
                    Some(false) => {}
                    None => return None,
                }
            }
        }
        Some(false)
    }

    let mut ctx = Ctx {
        ops,
        visited: HashSet::new(),
        steps: 0,
        budget,
    };
    match search(&mut ctx, &BitSet::new(n), None) {
        Some(true) => WgOutcome::Linearizable,
        Some(false) => WgOutcome::Violation,
        None => WgOutcome::Undetermined,
    }
}

/// Check every path register in the history.
pub fn check_per_path_linearizable(history: &[HistoryEvent]) -> VerifyReport {
    let per_path = per_path_ops(history);
    let mut report = VerifyReport {
        linearizable: true,
        replay_ok: true,
        subtree_isolation_ok: true,
        ..Default::default()
    };
    for (p, mut ops) in per_path {
        ops.sort_by_key(|o| (o.invoke, o.response.unwrap_or(Micros::MAX)));
        report.paths_checked += 1;
        report.ops_checked += ops.len();
        report.stale_reads.extend(detect_stale_reads(&p, &ops));
        match wing_gong(&ops, 2_000_000) {
            WgOutcome::Linearizable => {}
            WgOutcome::Violation => report.counterexamples.push(Counterexample {
                path: p.to_string(),
                detail: format!("no legal linearization over {} operations", ops.len()),
            }),
            WgOutcome::Undetermined => report.undetermined_paths += 1,
        }
    }
    report.linearizable = report.counterexamples.is_empty() && report.stale_reads.is_empty();
    report
}

// ---------------------------------------------------------------------
// Subtree isolation
// ---------------------------------------------------------------------

/// No two overlapping subtree operations' lock windows may intersect,
/// and no read may observe a subtree mutation before its clear.
pub fn check_subtree_isolation(
    history: &[HistoryEvent],
    proto: &[ProtoEvent],
) -> (bool, Vec<String>) {
    let mut violations = Vec::new();
    // Reconstruct [lock, clear] windows per op id.
    struct Window {
        root: Arc<str>,
        rid: RequestId,
        start: Micros,
        end: Option<Micros>,
        completed: bool,
        clear_seen: bool,
    }
    let mut windows: BTreeMap<u64, Window> = BTreeMap::new();
    for ev in proto {
        match ev {
            ProtoEvent::SubtreeLock { t, op_id, rid, root } => {
                windows.insert(
                    *op_id,
                    Window {
                        root: root.clone(),
                        rid: *rid,
                        start: *t,
                        end: None,
                        completed: false,
                        clear_seen: false,
                    },
                );
            }
            ProtoEvent::SubtreeClear {
                t,
                op_id,
                completed,
                ..
            } => {
                if let Some(w) = windows.get_mut(op_id) {
                    w.end = Some(*t);
                    w.completed = *completed;
                    w.clear_seen = true;
                } else {
                    violations.push(format!("clear for unknown subtree op {op_id}"));
                }
            }
            _ => {}
        }
    }
    let wins: Vec<&Window> = windows.values().collect();
    for (i, a) in wins.iter().enumerate() {
        for b in wins.iter().skip(i + 1) {
            let overlap_paths = path::starts_with_prefix(&a.root, &b.root)
                || path::starts_with_prefix(&b.root, &a.root);
            if !overlap_paths {
                continue;
            }
            let a_end = a.end.unwrap_or(Micros::MAX);
            let b_end = b.end.unwrap_or(Micros::MAX);
            if a.start < b_end && b.start < a_end {
                violations.push(format!(
                    "overlapping subtree ops on {} and {} intersect in time ([{}, {a_end}] vs [{}, {b_end}])",
                    a.root, b.root, a.start, b.start
                ));
            }
        }
    }
    // A read must never observe a subtree op's register value before the
    // operation's clear event.
    for w in windows.values() {
        if !w.completed {
            continue;
        }
        let end = w.end.expect("completed window has an end");
        for ev in history {
            if !ev.op.is_read() {
                continue;
            }
            if let Some(RegValue::Present { writer }) = ev.value {
                if writer == w.rid {
                    if let Some(resp) = ev.response_us {
                        if resp < end {
                            violations.push(format!(
                                "read of {} observed subtree op rid={} before its clear at {end}",
                                ev.path, w.rid
                            ));
                        }
                    }
                }
            }
        }
    }
    (violations.is_empty(), violations)
}

// ---------------------------------------------------------------------
// Whole-run verification
// ---------------------------------------------------------------------

/// Run every checker over a run's recorded artifacts.
pub fn verify_artifacts(
    history: &[HistoryEvent],
    proto: &[ProtoEvent],
    snapshot_jsonl: &str,
) -> VerifyReport {
    let mut report = check_per_path_linearizable(history);
    match replay_commits(proto) {
        Ok(tree) => match compare_snapshot(&tree, snapshot_jsonl) {
            Ok(()) => report.replay_ok = true,
            Err(e) => {
                report.replay_ok = false;
                report.replay_error = Some(e);
            }
        },
        Err(e) => {
            report.replay_ok = false;
            report.replay_error = Some(e);
        }
    }
    let (iso_ok, viols) = check_subtree_isolation(history, proto);
    report.subtree_isolation_ok = iso_ok;
    report.subtree_violations = viols;
    report
}

/// Verify a run directory written by `RunResult::write_to_dir`.
pub fn verify_dir(dir: &std::path::Path) -> std::io::Result<VerifyReport> {
    use std::io::BufReader;
    let missing = |name: &str| {
        std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("missing trace file {name}; run with tracing enabled"),
        )
    };
    let hist_path = dir.join("history.jsonl");
    if !hist_path.exists() {
        return Err(missing("history.jsonl"));
    }
    let proto_path = dir.join("protocol_trace.jsonl");
    if !proto_path.exists() {
        return Err(missing("protocol_trace.jsonl"));
    }
    let snap_path = dir.join("snapshot.jsonl");
    if !snap_path.exists() {
        return Err(missing("snapshot.jsonl"));
    }
    let history: Vec<HistoryEvent> =
        crate::trace::read_jsonl(BufReader::new(std::fs::File::open(hist_path)?))?;
    let proto: Vec<ProtoEvent> =
        crate::trace::read_jsonl(BufReader::new(std::fs::File::open(proto_path)?))?;
    let snapshot = std::fs::read_to_string(snap_path)?;
    Ok(verify_artifacts(&history, &proto, &snapshot))
}
