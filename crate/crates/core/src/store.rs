//! The persistent metadata store: a hierarchical INode table with ACID
//! single-shot transactions, exclusive per-INode locks, subtree-lock
//! flags, and an active-subtree-operations table.
//!
//! The store is in-memory; round-trip latency is simulated by the engine
//! around each call. Blocking is cooperative: calls that would wait
//! return a `Blocked` outcome and the caller registers a waiter that the
//! store hands back on release, so the simulation can reschedule it.
//!
//! Lock acquisition follows a single global order (ascending INodeId),
//! which rules out deadlock among writers. Reads respect exclusive
//! locks: a path resolution that crosses a write-locked or
//! subtree-locked row waits until the lock clears. That is what keeps a
//! freshly started cache from reading (and retaining) a value that a
//! concurrent writer is about to replace.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::Micros;
use crate::path;

pub type INodeId = u64;
pub type TxnId = u64;
pub type RequestId = u64;
pub type SubtreeOpId = u64;
/// Instance that owns a transaction or subtree op; 0 marks the harness.
pub type OwnerId = u64;

pub const ROOT_ID: INodeId = 1;
/// `last_writer` value for rows created by pre-population.
pub const INITIAL_WRITER: RequestId = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryKind {
    File,
    Directory,
}

/// One file/directory metadata entry; the unit of caching, locking, and
/// invalidation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct INodeRecord {
    pub id: INodeId,
    pub parent: INodeId,
    pub name: Box<str>,
    pub kind: EntryKind,
    pub perms: u16,
    pub mtime: Micros,
    pub subtree_lock: Option<SubtreeOpId>,
    pub last_writer: RequestId,
}

pub const DEFAULT_PERMS: u16 = 0o644;
pub const DEFAULT_DIR_PERMS: u16 = 0o755;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum StoreError {
    #[error("transaction is not open")]
    TxnNotOpen,
    #[error("transaction was aborted while waiting")]
    TxnAborted,
    #[error("an overlapping subtree operation is live")]
    SubtreeConflict,
}

/// Continuation owed a wake-up when a lock or subtree flag clears.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Waiter {
    /// A transaction that should re-attempt `lock_exclusive`.
    Txn(TxnId),
    /// An engine continuation token (blocked resolve, usually).
    Observer(u64),
}

/// Why a call could not complete immediately.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Blocked {
    /// Waiting on an exclusive row lock.
    Lock(INodeId),
    /// Waiting on a subtree operation to clear.
    Subtree(SubtreeOpId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TxnState {
    Open,
    Committed,
    Aborted,
}

#[derive(Debug)]
pub struct StoreTxn {
    pub id: TxnId,
    pub owner: OwnerId,
    pub locked: BTreeSet<INodeId>,
    writes: Vec<RowWrite>,
    pub state: TxnState,
    waiting_on: Option<INodeId>,
}

#[derive(Debug, Clone)]
enum RowWrite {
    Insert(INodeRecord),
    Delete(INodeId),
    Touch {
        id: INodeId,
        mtime: Micros,
        last_writer: RequestId,
    },
    SetAttr {
        id: INodeId,
        perms: u16,
        mtime: Micros,
        last_writer: RequestId,
    },
    Reparent {
        id: INodeId,
        new_parent: INodeId,
        new_name: Box<str>,
        mtime: Micros,
        last_writer: RequestId,
    },
    /// Per-row rewrite during a subtree move; bumps the row's register.
    Rewrite {
        id: INodeId,
        last_writer: RequestId,
    },
    /// Record a completed mutation for exactly-once re-execution.
    MarkApplied {
        request: RequestId,
        outcome: AppliedOutcome,
    },
    ClearSubtreeFlag(INodeId),
}

/// Durable record of a mutation that committed, keyed by request id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AppliedOutcome {
    Created(INodeId),
    Mutated,
    /// A subtree operation, with the affected paths relative to its
    /// root (recorded so re-executions can answer re-submissions).
    Subtree(std::sync::Arc<[std::sync::Arc<str>]>),
}

/// One live subtree operation.
#[derive(Debug, Clone)]
pub struct SubtreeOpEntry {
    pub op_id: SubtreeOpId,
    pub owner: OwnerId,
    pub root: INodeId,
    pub root_path: Box<str>,
    pub kind: SubtreeOpKind,
    pub started_at: Micros,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SubtreeOpKind {
    Mv,
    Delete,
}

/// Result of a path resolution: records root-to-leaf, or the longest
/// resolvable prefix plus the depth of the first missing component.
#[derive(Debug, Clone)]
pub struct Resolution {
    pub records: Vec<INodeRecord>,
    /// `None` when fully resolved; otherwise the 0-based depth (within
    /// the component list) at which resolution failed.
    pub missing_at: Option<usize>,
}

impl Resolution {
    pub fn complete(&self) -> bool {
        self.missing_at.is_none()
    }

    pub fn leaf(&self) -> Option<&INodeRecord> {
        if self.complete() {
            self.records.last()
        } else {
            None
        }
    }
}

/// In-memory description of a quiesced subtree.
#[derive(Debug, Clone)]
pub struct SubtreeDesc {
    pub root: INodeId,
    pub root_path: Box<str>,
    /// `(id, parent, path, kind)` for every entry, root included,
    /// in ascending id order.
    pub nodes: Vec<(INodeId, INodeId, Box<str>, EntryKind)>,
}

impl SubtreeDesc {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

#[derive(Debug, Default)]
struct LockQueue {
    owner: Option<TxnId>,
    waiters: VecDeque<Waiter>,
}

#[derive(Debug)]
pub struct MetadataStore {
    records: HashMap<INodeId, INodeRecord>,
    children: HashMap<INodeId, BTreeMap<Box<str>, INodeId>>,
    locks: HashMap<INodeId, LockQueue>,
    txns: HashMap<TxnId, StoreTxn>,
    subtree_ops: Vec<SubtreeOpEntry>,
    subtree_waiters: HashMap<SubtreeOpId, VecDeque<Waiter>>,
    applied: HashMap<RequestId, AppliedOutcome>,
    next_inode: INodeId,
    next_txn: TxnId,
    next_subtree_op: SubtreeOpId,
    /// Rows written by committed transactions (bookkeeping for tests
    /// and traces).
    pub rows_written: u64,
    commit_seq: u64,
}

/// A committed-write description handed to the trace layer.
#[derive(Debug, Clone, Serialize)]
pub struct CommitInfo {
    pub commit_seq: u64,
    pub txn: TxnId,
    pub rows: u64,
}

impl Default for MetadataStore {
    fn default() -> Self {
        Self::new()
    }
}

impl MetadataStore {
    pub fn new() -> Self {
        let mut store = MetadataStore {
            records: HashMap::new(),
            children: HashMap::new(),
            locks: HashMap::new(),
            txns: HashMap::new(),
            subtree_ops: Vec::new(),
            subtree_waiters: HashMap::new(),
            applied: HashMap::new(),
            next_inode: ROOT_ID + 1,
            next_txn: 1,
            next_subtree_op: 1,
            rows_written: 0,
            commit_seq: 0,
        };
        store.records.insert(
            ROOT_ID,
            INodeRecord {
                id: ROOT_ID,
                parent: ROOT_ID,
                name: "".into(),
                kind: EntryKind::Directory,
                perms: DEFAULT_DIR_PERMS,
                mtime: 0,
                subtree_lock: None,
                last_writer: INITIAL_WRITER,
            },
        );
        store.children.insert(ROOT_ID, BTreeMap::new());
        store
    }

    // ---- reads -----------------------------------------------------

    pub fn record(&self, id: INodeId) -> Option<&INodeRecord> {
        self.records.get(&id)
    }

    pub fn child_of(&self, parent: INodeId, name: &str) -> Option<INodeId> {
        self.children.get(&parent).and_then(|m| m.get(name).copied())
    }

    pub fn children_of(&self, id: INodeId) -> impl Iterator<Item = (&str, INodeId)> {
        self.children
            .get(&id)
            .into_iter()
            .flat_map(|m| m.iter().map(|(k, v)| (&**k, *v)))
    }

    pub fn record_count(&self) -> usize {
        self.records.len()
    }

    /// Resolve a normalized absolute path, honoring exclusive locks and
    /// subtree flags. `exempt_txn` / `exempt_op` see through their own
    /// locks. Registration of the returned waiter is the caller's job
    /// via [`MetadataStore::wait_on`].
    pub fn resolve_path_batch(
        &self,
        p: &str,
        exempt_txn: Option<TxnId>,
        exempt_op: Option<SubtreeOpId>,
    ) -> Result<Result<Resolution, Blocked>, path::PathError> {
        path::validate(p)?;
        let mut records = Vec::with_capacity(path::depth(p) + 1);
        let root = self.records[&ROOT_ID].clone();
        if let Some(b) = self.row_barrier(&root, exempt_txn, exempt_op) {
            return Ok(Err(b));
        }
        records.push(root);
        let mut cur = ROOT_ID;
        for (depth, comp) in path::components(p).enumerate() {
            match self.child_of(cur, comp) {
                Some(next) => {
                    let rec = self.records[&next].clone();
                    if let Some(b) = self.row_barrier(&rec, exempt_txn, exempt_op) {
                        return Ok(Err(b));
                    }
                    cur = next;
                    records.push(rec);
                }
                None => {
                    return Ok(Ok(Resolution {
                        records,
                        missing_at: Some(depth),
                    }))
                }
            }
        }
        Ok(Ok(Resolution {
            records,
            missing_at: None,
        }))
    }

    fn row_barrier(
        &self,
        rec: &INodeRecord,
        exempt_txn: Option<TxnId>,
        exempt_op: Option<SubtreeOpId>,
    ) -> Option<Blocked> {
        if let Some(op) = rec.subtree_lock {
            if exempt_op != Some(op) {
                return Some(Blocked::Subtree(op));
            }
        }
        if let Some(q) = self.locks.get(&rec.id) {
            if let Some(owner) = q.owner {
                if exempt_txn != Some(owner) {
                    return Some(Blocked::Lock(rec.id));
                }
            }
        }
        None
    }

    /// Register a waiter for a blocked outcome.
    pub fn wait_on(&mut self, blocked: Blocked, waiter: Waiter) {
        match blocked {
            Blocked::Lock(id) => self
                .locks
                .entry(id)
                .or_default()
                .waiters
                .push_back(waiter),
            Blocked::Subtree(op) => self
                .subtree_waiters
                .entry(op)
                .or_default()
                .push_back(waiter),
        }
    }

    /// Direct insertion for pre-population, outside any transaction.
    pub fn seed_insert(&mut self, parent: INodeId, name: &str, kind: EntryKind) -> INodeId {
        let id = self.next_inode;
        self.next_inode += 1;
        let perms = match kind {
            EntryKind::File => DEFAULT_PERMS,
            EntryKind::Directory => DEFAULT_DIR_PERMS,
        };
        self.apply(RowWrite::Insert(INodeRecord {
            id,
            parent,
            name: name.into(),
            kind,
            perms,
            mtime: 0,
            subtree_lock: None,
            last_writer: INITIAL_WRITER,
        }));
        id
    }

    // ---- transactions ----------------------------------------------

    pub fn begin(&mut self, owner: OwnerId) -> TxnId {
        let id = self.next_txn;
        self.next_txn += 1;
        self.txns.insert(
            id,
            StoreTxn {
                id,
                owner,
                locked: BTreeSet::new(),
                writes: Vec::new(),
                state: TxnState::Open,
                waiting_on: None,
            },
        );
        id
    }

    pub fn txn_open(&self, txn: TxnId) -> bool {
        matches!(self.txns.get(&txn), Some(t) if t.state == TxnState::Open)
    }

    /// Acquire exclusive locks on `ids` in ascending order. Re-entrant
    /// for ids the transaction already holds. On contention the txn is
    /// queued (FIFO) on the conflicting row and `Blocked` is returned;
    /// the release path re-grants and wakes it.
    pub fn lock_exclusive(
        &mut self,
        txn: TxnId,
        ids: &[INodeId],
    ) -> Result<Result<(), Blocked>, StoreError> {
        if !self.txn_open(txn) {
            return Err(StoreError::TxnAborted);
        }
        let mut sorted: Vec<INodeId> = ids.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        for id in sorted {
            let t = self.txns.get(&txn).expect("open txn");
            if t.locked.contains(&id) {
                continue;
            }
            let q = self.locks.entry(id).or_default();
            match q.owner {
                None => {
                    q.owner = Some(txn);
                    self.txns.get_mut(&txn).expect("open txn").locked.insert(id);
                }
                Some(owner) if owner == txn => {
                    self.txns.get_mut(&txn).expect("open txn").locked.insert(id);
                }
                Some(_) => {
                    q.waiters.push_back(Waiter::Txn(txn));
                    self.txns.get_mut(&txn).expect("open txn").waiting_on = Some(id);
                    return Ok(Err(Blocked::Lock(id)));
                }
            }
        }
        self.txns.get_mut(&txn).expect("open txn").waiting_on = None;
        Ok(Ok(()))
    }

    pub fn stage_create(
        &mut self,
        txn: TxnId,
        parent: INodeId,
        name: &str,
        kind: EntryKind,
        now: Micros,
        rid: RequestId,
    ) -> INodeId {
        let id = self.next_inode;
        self.next_inode += 1;
        let perms = match kind {
            EntryKind::File => DEFAULT_PERMS,
            EntryKind::Directory => DEFAULT_DIR_PERMS,
        };
        self.stage(
            txn,
            RowWrite::Insert(INodeRecord {
                id,
                parent,
                name: name.into(),
                kind,
                perms,
                mtime: now,
                subtree_lock: None,
                last_writer: rid,
            }),
        );
        id
    }

    pub fn stage_delete(&mut self, txn: TxnId, id: INodeId) {
        self.stage(txn, RowWrite::Delete(id));
    }

    pub fn stage_touch(&mut self, txn: TxnId, id: INodeId, now: Micros, rid: RequestId) {
        self.stage(
            txn,
            RowWrite::Touch {
                id,
                mtime: now,
                last_writer: rid,
            },
        );
    }

    pub fn stage_setattr(
        &mut self,
        txn: TxnId,
        id: INodeId,
        perms: u16,
        now: Micros,
        rid: RequestId,
    ) {
        self.stage(
            txn,
            RowWrite::SetAttr {
                id,
                perms,
                mtime: now,
                last_writer: rid,
            },
        );
    }

    pub fn stage_reparent(
        &mut self,
        txn: TxnId,
        id: INodeId,
        new_parent: INodeId,
        new_name: &str,
        now: Micros,
        rid: RequestId,
    ) {
        self.stage(
            txn,
            RowWrite::Reparent {
                id,
                new_parent,
                new_name: new_name.into(),
                mtime: now,
                last_writer: rid,
            },
        );
    }

    pub fn stage_rewrite(&mut self, txn: TxnId, id: INodeId, rid: RequestId) {
        self.stage(txn, RowWrite::Rewrite { id, last_writer: rid });
    }

    pub fn stage_mark_applied(&mut self, txn: TxnId, request: RequestId, outcome: AppliedOutcome) {
        self.stage(txn, RowWrite::MarkApplied { request, outcome });
    }

    pub fn stage_clear_subtree_flag(&mut self, txn: TxnId, id: INodeId) {
        self.stage(txn, RowWrite::ClearSubtreeFlag(id));
    }

    fn stage(&mut self, txn: TxnId, write: RowWrite) {
        let t = self.txns.get_mut(&txn).expect("staging on open txn");
        assert!(t.state == TxnState::Open, "staging on open txn");
        t.writes.push(write);
    }

    /// Atomically apply the transaction's writes and release its locks.
    /// Returns the waiters freed by the release.
    pub fn commit(&mut self, txn: TxnId) -> Result<(CommitInfo, Vec<Waiter>), StoreError> {
        let t = self.txns.get_mut(&txn).ok_or(StoreError::TxnNotOpen)?;
        if t.state != TxnState::Open {
            return Err(StoreError::TxnNotOpen);
        }
        t.state = TxnState::Committed;
        let writes = std::mem::take(&mut t.writes);
        let mut rows = 0u64;
        for w in writes {
            rows += self.apply(w);
        }
        self.rows_written += rows;
        self.commit_seq += 1;
        let info = CommitInfo {
            commit_seq: self.commit_seq,
            txn,
            rows,
        };
        let woken = self.release_locks(txn);
        Ok((info, woken))
    }

    pub fn abort(&mut self, txn: TxnId) -> Result<Vec<Waiter>, StoreError> {
        let t = self.txns.get_mut(&txn).ok_or(StoreError::TxnNotOpen)?;
        if t.state != TxnState::Open {
            return Err(StoreError::TxnNotOpen);
        }
        t.state = TxnState::Aborted;
        t.writes.clear();
        if let Some(id) = t.waiting_on.take() {
            if let Some(q) = self.locks.get_mut(&id) {
                q.waiters.retain(|w| *w != Waiter::Txn(txn));
            }
        }
        Ok(self.release_locks(txn))
    }

    /// Abort every open transaction owned by a crashed instance and
    /// clear its live subtree operations.
    pub fn abort_owned_by(&mut self, owner: OwnerId) -> Vec<Waiter> {
        let txns: Vec<TxnId> = self
            .txns
            .values()
            .filter(|t| t.owner == owner && t.state == TxnState::Open)
            .map(|t| t.id)
            .collect();
        let mut woken = Vec::new();
        for t in txns {
            woken.extend(self.abort(t).expect("open txn"));
        }
        let ops: Vec<SubtreeOpId> = self
            .subtree_ops
            .iter()
            .filter(|e| e.owner == owner)
            .map(|e| e.op_id)
            .collect();
        for op in ops {
            woken.extend(self.clear_subtree_lock(op));
        }
        woken
    }

    fn release_locks(&mut self, txn: TxnId) -> Vec<Waiter> {
        let locked = {
            let t = self.txns.get_mut(&txn).expect("txn exists");
            std::mem::take(&mut t.locked)
        };
        let mut woken = Vec::new();
        for id in locked {
            let q = self.locks.get_mut(&id).expect("held lock has a queue");
            debug_assert_eq!(q.owner, Some(txn));
            q.owner = None;
            // Wake observers in FIFO order until the next writer, which
            // is granted the lock directly.
            while let Some(w) = q.waiters.pop_front() {
                match w {
                    Waiter::Observer(_) => woken.push(w),
                    Waiter::Txn(next) => {
                        q.owner = Some(next);
                        if let Some(t) = self.txns.get_mut(&next) {
                            t.locked.insert(id);
                            t.waiting_on = None;
                        }
                        woken.push(w);
                        break;
                    }
                }
            }
            if q.owner.is_none() && q.waiters.is_empty() {
                self.locks.remove(&id);
            }
        }
        self.txns.remove(&txn);
        woken
    }

    fn apply(&mut self, w: RowWrite) -> u64 {
        match w {
            RowWrite::Insert(rec) => {
                let id = rec.id;
                let parent = rec.parent;
                let name = rec.name.clone();
                if rec.kind == EntryKind::Directory {
                    self.children.entry(id).or_default();
                }
                self.children
                    .entry(parent)
                    .or_default()
                    .insert(name, id);
                self.records.insert(id, rec);
                1
            }
            RowWrite::Delete(id) => {
                if let Some(rec) = self.records.remove(&id) {
                    if let Some(sibs) = self.children.get_mut(&rec.parent) {
                        sibs.remove(&rec.name);
                    }
                    self.children.remove(&id);
                    1
                } else {
                    0
                }
            }
            RowWrite::Touch {
                id,
                mtime,
                last_writer,
            } => {
                if let Some(rec) = self.records.get_mut(&id) {
                    rec.mtime = mtime;
                    rec.last_writer = last_writer;
                    1
                } else {
                    0
                }
            }
            RowWrite::SetAttr {
                id,
                perms,
                mtime,
                last_writer,
            } => {
                if let Some(rec) = self.records.get_mut(&id) {
                    rec.perms = perms;
                    rec.mtime = mtime;
                    rec.last_writer = last_writer;
                    1
                } else {
                    0
                }
            }
            RowWrite::Reparent {
                id,
                new_parent,
                new_name,
                mtime,
                last_writer,
            } => {
                if let Some(rec) = self.records.get_mut(&id) {
                    let old_parent = rec.parent;
                    let old_name = rec.name.clone();
                    rec.parent = new_parent;
                    rec.name = new_name.clone();
                    rec.mtime = mtime;
                    rec.last_writer = last_writer;
                    if let Some(sibs) = self.children.get_mut(&old_parent) {
                        sibs.remove(&old_name);
                    }
                    self.children
                        .entry(new_parent)
                        .or_default()
                        .insert(new_name, id);
                    1
                } else {
                    0
                }
            }
            RowWrite::Rewrite { id, last_writer } => {
                if let Some(rec) = self.records.get_mut(&id) {
                    rec.last_writer = last_writer;
                    1
                } else {
                    0
                }
            }
            RowWrite::MarkApplied { request, outcome } => {
                self.applied.insert(request, outcome);
                0
            }
            RowWrite::ClearSubtreeFlag(id) => {
                if let Some(rec) = self.records.get_mut(&id) {
                    rec.subtree_lock = None;
                }
                0
            }
        }
    }

    // ---- exactly-once bookkeeping -----------------------------------

    pub fn applied_outcome(&self, request: RequestId) -> Option<AppliedOutcome> {
        self.applied.get(&request).cloned()
    }

    /// Committed mutation request ids, for duplicate-application audits.
    pub fn applied_count(&self) -> usize {
        self.applied.len()
    }

    // ---- subtree operations ------------------------------------------

    /// Phase 1: persist the subtree-lock flag and record the operation,
    /// failing if any live operation overlaps this subtree (or, for
    /// moves, the destination checked by the caller).
    pub fn set_subtree_lock(
        &mut self,
        root: INodeId,
        owner: OwnerId,
        root_path: &str,
        kind: SubtreeOpKind,
        now: Micros,
    ) -> Result<SubtreeOpId, StoreError> {
        if self.overlaps_live_subtree(root_path) {
            return Err(StoreError::SubtreeConflict);
        }
        let op_id = self.next_subtree_op;
        self.next_subtree_op += 1;
        let rec = self.records.get_mut(&root).expect("subtree root exists");
        rec.subtree_lock = Some(op_id);
        self.subtree_ops.push(SubtreeOpEntry {
            op_id,
            owner,
            root,
            root_path: root_path.into(),
            kind,
            started_at: now,
        });
        Ok(op_id)
    }

    pub fn overlaps_live_subtree(&self, p: &str) -> bool {
        self.subtree_ops.iter().any(|e| {
            path::starts_with_prefix(p, &e.root_path) || path::starts_with_prefix(&e.root_path, p)
        })
    }

    pub fn live_subtree_ops(&self) -> &[SubtreeOpEntry] {
        &self.subtree_ops
    }

    /// Drop the subtree entry, clear the flag if still present, and
    /// free whoever was blocked behind it.
    pub fn clear_subtree_lock(&mut self, op_id: SubtreeOpId) -> Vec<Waiter> {
        if let Some(idx) = self.subtree_ops.iter().position(|e| e.op_id == op_id) {
            let entry = self.subtree_ops.remove(idx);
            if let Some(rec) = self.records.get_mut(&entry.root) {
                if rec.subtree_lock == Some(op_id) {
                    rec.subtree_lock = None;
                }
            }
        }
        self.subtree_waiters
            .remove(&op_id)
            .map(|q| q.into_iter().collect())
            .unwrap_or_default()
    }

    /// All ids in the subtree rooted at `root` (inclusive), ascending —
    /// the total order used for quiescing and batching.
    pub fn subtree_ids(&self, root: INodeId) -> Vec<INodeId> {
        let mut ids = Vec::new();
        let mut stack = vec![root];
        while let Some(id) = stack.pop() {
            ids.push(id);
            if let Some(kids) = self.children.get(&id) {
                stack.extend(kids.values().copied());
            }
        }
        ids.sort_unstable();
        ids
    }

    /// Build the in-memory subtree description used by phase 3 and by
    /// the prefix-invalidation target computation.
    pub fn describe_subtree(&self, root: INodeId, root_path: &str) -> SubtreeDesc {
        let mut nodes = Vec::new();
        let mut stack = vec![(root, root_path.to_string())];
        while let Some((id, p)) = stack.pop() {
            let rec = &self.records[&id];
            nodes.push((id, rec.parent, p.clone().into_boxed_str(), rec.kind));
            if let Some(kids) = self.children.get(&id) {
                for (name, kid) in kids {
                    stack.push((*kid, path::join(&p, name)));
                }
            }
        }
        nodes.sort_unstable_by_key(|(id, ..)| *id);
        SubtreeDesc {
            root,
            root_path: root_path.into(),
            nodes,
        }
    }

    // ---- export -------------------------------------------------------

    /// Full INode table as JSON lines, ascending id order.
    pub fn export_snapshot<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut ids: Vec<INodeId> = self.records.keys().copied().collect();
        ids.sort_unstable();
        for id in ids {
            let r = &self.records[&id];
            let line = serde_json::json!({
                "id": r.id,
                "parent": r.parent,
                "name": &*r.name,
                "kind": r.kind,
                "perms": r.perms,
                "mtime": r.mtime,
                "last_writer": r.last_writer,
            });
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    /// Tree-shape sanity: every record reaches the root through live
    /// directories, and the children index matches the rows.
    pub fn check_tree_shape(&self) -> Result<(), String> {
        for rec in self.records.values() {
            if rec.id == ROOT_ID {
                if rec.parent != ROOT_ID {
                    return Err("root must be its own parent".into());
                }
                continue;
            }
            let mut cur = rec.id;
            let mut hops = 0;
            while cur != ROOT_ID {
                let r = self
                    .records
                    .get(&cur)
                    .ok_or_else(|| format!("dangling id {cur}"))?;
                let p = self
                    .records
                    .get(&r.parent)
                    .ok_or_else(|| format!("record {} has dead parent {}", r.id, r.parent))?;
                if p.kind != EntryKind::Directory {
                    return Err(format!("parent {} of {} is not a directory", p.id, r.id));
                }
                if self.child_of(p.id, &r.name) != Some(r.id) {
                    return Err(format!("children index missing ({}, {})", p.id, r.name));
                }
                cur = r.parent;
                hops += 1;
                if hops > self.records.len() {
                    return Err(format!("cycle reached from id {}", rec.id));
                }
            }
        }
        for (parent, kids) in &self.children {
            for (name, kid) in kids {
                let r = self
                    .records
                    .get(kid)
                    .ok_or_else(|| format!("children index points at dead id {kid}"))?;
                if r.parent != *parent || &r.name != name {
                    return Err(format!("children index disagrees with row {kid}"));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resolve(store: &MetadataStore, p: &str) -> Resolution {
        store
            .resolve_path_batch(p, None, None)
            .unwrap()
            .expect("not blocked")
    }

    /// Create an entry through the normal txn flow.
    fn mk(store: &mut MetadataStore, p: &str, kind: EntryKind, rid: RequestId) -> INodeId {
        let parent_path = path::parent_dir(p);
        let parent = resolve(store, parent_path).leaf().unwrap().id;
        let txn = store.begin(0);
        assert!(matches!(store.lock_exclusive(txn, &[parent]), Ok(Ok(()))));
        let id = store.stage_create(txn, parent, path::leaf_name(p), kind, 0, rid);
        store.stage_touch(txn, parent, 0, rid);
        store.commit(txn).unwrap();
        id
    }

    #[test]
    fn resolve_root() {
        let store = MetadataStore::new();
        let r = resolve(&store, "/");
        assert!(r.complete());
        assert_eq!(r.records.len(), 1);
        assert_eq!(r.records[0].id, ROOT_ID);
    }

    #[test]
    fn resolve_after_mkdir_and_create() {
        let mut store = MetadataStore::new();
        mk(&mut store, "/a", EntryKind::Directory, 1);
        mk(&mut store, "/a/b", EntryKind::File, 2);
        let r = resolve(&store, "/a/b");
        assert!(r.complete());
        assert_eq!(r.records.len(), 3);
        assert_eq!(r.leaf().unwrap().kind, EntryKind::File);
        assert_eq!(r.leaf().unwrap().last_writer, 2);
    }

    #[test]
    fn resolve_longest_prefix_with_miss_marker() {
        let mut store = MetadataStore::new();
        mk(&mut store, "/a", EntryKind::Directory, 1);
        let r = resolve(&store, "/a/x");
        assert_eq!(r.missing_at, Some(1));
        assert_eq!(r.records.len(), 2); // root, a
    }

    #[test]
    fn malformed_paths_rejected() {
        let store = MetadataStore::new();
        assert!(store.resolve_path_batch("a/b", None, None).is_err());
        assert!(store.resolve_path_batch("/a//b", None, None).is_err());
    }

    #[test]
    fn relock_is_idempotent() {
        let mut store = MetadataStore::new();
        let txn = store.begin(0);
        assert!(matches!(store.lock_exclusive(txn, &[5]), Ok(Ok(()))));
        assert!(matches!(store.lock_exclusive(txn, &[5]), Ok(Ok(()))));
    }

    #[test]
    fn exclusive_lock_blocks_second_txn_until_release() {
        let mut store = MetadataStore::new();
        let a = store.begin(0);
        let b = store.begin(0);
        assert!(matches!(store.lock_exclusive(a, &[5]), Ok(Ok(()))));
        assert!(matches!(
            store.lock_exclusive(b, &[5]),
            Ok(Err(Blocked::Lock(5)))
        ));
        let (_, woken) = store.commit(a).unwrap();
        // b was granted the lock on release.
        assert_eq!(woken, vec![Waiter::Txn(b)]);
        assert!(matches!(store.lock_exclusive(b, &[5]), Ok(Ok(()))));
    }

    #[test]
    fn ascending_order_prevents_deadlock() {
        let mut store = MetadataStore::new();
        let a = store.begin(0);
        let b = store.begin(0);
        // Both ask for {3,7} and {7,3}; both acquire in order 3,7.
        assert!(matches!(store.lock_exclusive(a, &[3, 7]), Ok(Ok(()))));
        assert!(matches!(
            store.lock_exclusive(b, &[7, 3]),
            Ok(Err(Blocked::Lock(3)))
        ));
        let (_, woken) = store.commit(a).unwrap();
        assert!(woken.contains(&Waiter::Txn(b)));
        assert!(matches!(store.lock_exclusive(b, &[7, 3]), Ok(Ok(()))));
    }

    #[test]
    fn commit_makes_writes_visible_and_abort_discards() {
        let mut store = MetadataStore::new();
        mk(&mut store, "/a", EntryKind::Directory, 1);
        mk(&mut store, "/a/f", EntryKind::File, 2);
        assert!(resolve(&store, "/a/f").complete());

        let f = resolve(&store, "/a/f").leaf().unwrap().id;
        let txn = store.begin(0);
        store.lock_exclusive(txn, &[f]).unwrap().unwrap();
        store.stage_delete(txn, f);
        store.abort(txn).unwrap();
        assert!(resolve(&store, "/a/f").complete(), "aborted delete kept record");
    }

    #[test]
    fn owner_crash_aborts_and_releases() {
        let mut store = MetadataStore::new();
        let a = store.begin(42);
        let b = store.begin(7);
        store.lock_exclusive(a, &[5]).unwrap().unwrap();
        assert!(matches!(
            store.lock_exclusive(b, &[5]),
            Ok(Err(Blocked::Lock(5)))
        ));
        let woken = store.abort_owned_by(42);
        assert!(woken.contains(&Waiter::Txn(b)));
        assert!(matches!(store.lock_exclusive(b, &[5]), Ok(Ok(()))));
    }

    #[test]
    fn reads_block_on_write_locked_rows() {
        let mut store = MetadataStore::new();
        mk(&mut store, "/a", EntryKind::Directory, 1);
        let a_id = resolve(&store, "/a").leaf().unwrap().id;
        let txn = store.begin(0);
        store.lock_exclusive(txn, &[a_id]).unwrap().unwrap();
        let blocked = store
            .resolve_path_batch("/a", None, None)
            .unwrap()
            .unwrap_err();
        assert_eq!(blocked, Blocked::Lock(a_id));
        // The writer itself sees through its own lock.
        assert!(store
            .resolve_path_batch("/a", Some(txn), None)
            .unwrap()
            .is_ok());
        store.commit(txn).unwrap();
        assert!(store.resolve_path_batch("/a", None, None).unwrap().is_ok());
    }

    #[test]
    fn subtree_lock_overlap_rules() {
        let mut store = MetadataStore::new();
        let a = mk(&mut store, "/a", EntryKind::Directory, 1);
        let b = mk(&mut store, "/b", EntryKind::Directory, 2);
        let ab = mk(&mut store, "/a/b", EntryKind::Directory, 3);

        let op = store
            .set_subtree_lock(a, 0, "/a", SubtreeOpKind::Delete, 0)
            .unwrap();
        // Resolving into the locked subtree blocks; a nested root conflicts.
        assert!(store
            .resolve_path_batch("/a/b", None, None)
            .unwrap()
            .is_err());
        assert_eq!(
            store
                .set_subtree_lock(ab, 0, "/a/b", SubtreeOpKind::Mv, 0)
                .unwrap_err(),
            StoreError::SubtreeConflict
        );
        // Disjoint sibling succeeds.
        let op_b = store
            .set_subtree_lock(b, 0, "/b", SubtreeOpKind::Delete, 0)
            .unwrap();
        store.clear_subtree_lock(op);
        store.clear_subtree_lock(op_b);
        // After clearing, the nested lock is allowed.
        assert!(store
            .set_subtree_lock(ab, 0, "/a/b", SubtreeOpKind::Mv, 0)
            .is_ok());
    }

    #[test]
    fn resolve_blocks_on_subtree_flag() {
        let mut store = MetadataStore::new();
        let a = mk(&mut store, "/a", EntryKind::Directory, 1);
        mk(&mut store, "/a/f", EntryKind::File, 2);
        let op = store
            .set_subtree_lock(a, 0, "/a", SubtreeOpKind::Delete, 0)
            .unwrap();
        let blocked = store
            .resolve_path_batch("/a/f", None, None)
            .unwrap()
            .unwrap_err();
        assert_eq!(blocked, Blocked::Subtree(op));
        store.wait_on(blocked, Waiter::Observer(9));
        let woken = store.clear_subtree_lock(op);
        assert_eq!(woken, vec![Waiter::Observer(9)]);
        assert!(store
            .resolve_path_batch("/a/f", None, None)
            .unwrap()
            .is_ok());
    }

    #[test]
    fn subtree_description_matches_reference_walk() {
        let mut store = MetadataStore::new();
        // Balanced tree of 7 inodes under /t.
        mk(&mut store, "/t", EntryKind::Directory, 1);
        for d in ["/t/x", "/t/y"] {
            mk(&mut store, d, EntryKind::Directory, 1);
            mk(&mut store, &format!("{d}/1"), EntryKind::File, 1);
            mk(&mut store, &format!("{d}/2"), EntryKind::File, 1);
        }
        let t = resolve(&store, "/t").leaf().unwrap().id;
        let desc = store.describe_subtree(t, "/t");
        assert_eq!(desc.len(), 7);
        // Reference walk: resolve each described path and compare ids.
        for (id, _, p, _) in &desc.nodes {
            let r = resolve(&store, p);
            assert_eq!(r.leaf().unwrap().id, *id, "path {p} mismatched");
        }
        assert_eq!(store.subtree_ids(t).len(), 7);

        // Empty directory degenerates to the root alone.
        mk(&mut store, "/empty", EntryKind::Directory, 1);
        let e = resolve(&store, "/empty").leaf().unwrap().id;
        assert_eq!(store.describe_subtree(e, "/empty").len(), 1);
    }

    #[test]
    fn snapshot_export_is_sorted_json_lines() {
        let mut store = MetadataStore::new();
        mk(&mut store, "/a", EntryKind::Directory, 1);
        mk(&mut store, "/a/f", EntryKind::File, 2);
        let mut buf = Vec::new();
        store.export_snapshot(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        let first: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(first["id"], 1);
        assert_eq!(first["kind"], "directory");
    }

    #[test]
    fn tree_shape_holds_after_mutations() {
        let mut store = MetadataStore::new();
        mk(&mut store, "/a", EntryKind::Directory, 1);
        mk(&mut store, "/a/f", EntryKind::File, 2);
        let f = resolve(&store, "/a/f").leaf().unwrap().id;
        let b = mk(&mut store, "/b", EntryKind::Directory, 3);

        let txn = store.begin(0);
        store.lock_exclusive(txn, &[f, b]).unwrap().unwrap();
        store.stage_reparent(txn, f, b, "g", 5, 4);
        store.commit(txn).unwrap();

        store.check_tree_shape().unwrap();
        assert!(resolve(&store, "/b/g").complete());
        assert!(!resolve(&store, "/a/f").complete());
    }
}
