//! Per-NameNode in-memory metadata cache: all INodes along cached paths
//! are stored in a trie, with point and prefix invalidation and
//! capacity-bounded LRU eviction over record-bearing nodes.
//!
//! Evicting a node that still has cached descendants demotes it to a
//! structural (record-free) node so the descendants stay reachable.
//! Capacity is counted in records; record sizes are uniform here.

use std::collections::HashMap;

use crate::kernel::Micros;
use crate::path;
use crate::store::{EntryKind, INodeId, RequestId};

/// Cached copy of a store row (the name lives in the trie edge).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CachedRecord {
    pub id: INodeId,
    pub kind: EntryKind,
    pub perms: u16,
    pub mtime: Micros,
    pub last_writer: RequestId,
}

const NONE: u32 = u32::MAX;
const ROOT: u32 = 0;

#[derive(Debug)]
struct Node {
    name: Box<str>,
    parent: u32,
    children: HashMap<Box<str>, u32>,
    record: Option<CachedRecord>,
    // Intrusive LRU list over record-bearing nodes.
    lru_prev: u32,
    lru_next: u32,
    pin: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lookup {
    /// Every component root-to-leaf holds a cached record.
    Hit,
    /// Depth of the deepest cached prefix (number of cached records
    /// along the path, root included).
    Miss { cached_depth: usize },
}

#[derive(Debug)]
pub struct CacheTrie {
    nodes: Vec<Node>,
    free: Vec<u32>,
    records: usize,
    capacity: Option<usize>,
    lru_head: u32,
    lru_tail: u32,
    pin_gen: u64,
}

impl CacheTrie {
    /// `capacity = None` means unbounded.
    pub fn new(capacity: Option<usize>) -> Self {
        CacheTrie {
            nodes: vec![Node {
                name: "".into(),
                parent: NONE,
                children: HashMap::new(),
                record: None,
                lru_prev: NONE,
                lru_next: NONE,
                pin: 0,
            }],
            free: Vec::new(),
            records: 0,
            capacity,
            lru_head: NONE,
            lru_tail: NONE,
            pin_gen: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.records
    }

    pub fn is_empty(&self) -> bool {
        self.records == 0
    }

    pub fn capacity(&self) -> Option<usize> {
        self.capacity
    }

    /// Look up a normalized path; on a hit, append all prefix records
    /// (root first) to `out`. Refreshes recency of every record-bearing
    /// node it walks through.
    pub fn lookup_into(&mut self, p: &str, out: &mut Vec<CachedRecord>) -> Lookup {
        let mut cached_depth = 0usize;
        let mut idx = ROOT;
        let start = out.len();
        match self.nodes[ROOT as usize].record {
            Some(rec) => {
                self.touch(ROOT);
                cached_depth += 1;
                out.push(rec);
            }
            None => {
                return Lookup::Miss { cached_depth: 0 };
            }
        }
        for comp in path::components(p) {
            let next = match self.nodes[idx as usize].children.get(comp) {
                Some(n) => *n,
                None => {
                    out.truncate(start);
                    return Lookup::Miss { cached_depth };
                }
            };
            match self.nodes[next as usize].record {
                Some(rec) => {
                    self.touch(next);
                    cached_depth += 1;
                    out.push(rec);
                    idx = next;
                }
                None => {
                    out.truncate(start);
                    return Lookup::Miss { cached_depth };
                }
            }
        }
        Lookup::Hit
    }

    pub fn lookup(&mut self, p: &str) -> (Lookup, Vec<CachedRecord>) {
        let mut out = Vec::new();
        let res = self.lookup_into(p, &mut out);
        (res, out)
    }

    /// Cache the record chain for `p` (root record first). Returns the
    /// number of previously cached records evicted to make room. Records
    /// inserted by this call are never evicted by it; when the chain is
    /// longer than the capacity, only the deepest `capacity` components
    /// are kept.
    pub fn insert_path(&mut self, p: &str, records: &[CachedRecord]) -> usize {
        let comps: Vec<&str> = std::iter::once("").chain(path::components(p)).collect();
        assert_eq!(
            comps.len(),
            records.len(),
            "records must cover every component plus the root"
        );
        let skip = match self.capacity {
            Some(cap) => records.len().saturating_sub(cap),
            None => 0,
        };
        self.pin_gen += 1;
        let pin = self.pin_gen;
        let mut idx = ROOT;
        for (depth, (comp, rec)) in comps.iter().zip(records.iter()).enumerate() {
            if depth > 0 {
                idx = self.child_or_create(idx, comp);
            }
            if depth < skip {
                continue;
            }
            let node = &mut self.nodes[idx as usize];
            node.pin = pin;
            if node.record.is_some() {
                node.record = Some(*rec);
                self.touch(idx);
            } else {
                node.record = Some(*rec);
                self.records += 1;
                self.lru_push_front(idx);
            }
        }
        let mut evicted = 0;
        if let Some(cap) = self.capacity {
            while self.records > cap {
                if !self.evict_one(pin) {
                    break;
                }
                evicted += 1;
            }
            debug_assert!(self.records <= cap);
        }
        evicted
    }

    /// Remove the cached record at exactly `p` (point invalidation:
    /// directories do not lose their cached descendants). Returns the
    /// number of records removed (0 or 1).
    pub fn invalidate(&mut self, p: &str) -> usize {
        let Some(idx) = self.find(p) else { return 0 };
        if self.nodes[idx as usize].record.is_none() {
            return 0;
        }
        self.drop_record(idx);
        self.prune_up(idx);
        1
    }

    /// Remove every cached record whose path starts with `prefix` at a
    /// component boundary, the prefix node included. Prunes the trie
    /// subtree in one walk rather than scanning all cached paths.
    pub fn invalidate_prefix(&mut self, prefix: &str) -> usize {
        let Some(idx) = self.find(prefix) else { return 0 };
        let parent = self.nodes[idx as usize].parent;
        let removed = self.remove_subtree(idx);
        if idx != ROOT {
            self.prune_up(parent);
        }
        removed
    }

    /// Cached paths in lexicographic order, one per line.
    pub fn debug_dump(&self) -> String {
        let mut paths = Vec::new();
        self.collect_paths(ROOT, String::new(), &mut paths);
        paths.sort();
        let mut out = String::new();
        for p in paths {
            out.push_str(&p);
            out.push('\n');
        }
        out
    }

    pub fn cached_paths(&self) -> Vec<String> {
        let mut paths = Vec::new();
        self.collect_paths(ROOT, String::new(), &mut paths);
        paths.sort();
        paths
    }

    fn collect_paths(&self, idx: u32, prefix: String, out: &mut Vec<String>) {
        let node = &self.nodes[idx as usize];
        let here = if idx == ROOT {
            "/".to_string()
        } else {
            path::join(&prefix, &node.name)
        };
        if node.record.is_some() {
            out.push(here.clone());
        }
        let next_prefix = if idx == ROOT { String::new() } else { here };
        for child in node.children.values() {
            self.collect_paths(*child, next_prefix.clone(), out);
        }
    }

    fn find(&self, p: &str) -> Option<u32> {
        if p == "/" {
            return Some(ROOT);
        }
        let mut idx = ROOT;
        for comp in path::components(p) {
            idx = *self.nodes[idx as usize].children.get(comp)?;
        }
        Some(idx)
    }

    fn child_or_create(&mut self, parent: u32, name: &str) -> u32 {
        if let Some(c) = self.nodes[parent as usize].children.get(name) {
            return *c;
        }
        let idx = match self.free.pop() {
            Some(i) => {
                self.nodes[i as usize] = Node {
                    name: name.into(),
                    parent,
                    children: HashMap::new(),
                    record: None,
                    lru_prev: NONE,
                    lru_next: NONE,
                    pin: 0,
                };
                i
            }
            None => {
                self.nodes.push(Node {
                    name: name.into(),
                    parent,
                    children: HashMap::new(),
                    record: None,
                    lru_prev: NONE,
                    lru_next: NONE,
                    pin: 0,
                });
                (self.nodes.len() - 1) as u32
            }
        };
        self.nodes[parent as usize]
            .children
            .insert(name.into(), idx);
        idx
    }

    /// Evict the least-recently-used record not pinned by the current
    /// insert. Nodes with cached descendants are demoted in place.
    fn evict_one(&mut self, pin: u64) -> bool {
        let mut idx = self.lru_tail;
        while idx != NONE {
            if self.nodes[idx as usize].pin == pin {
                idx = self.nodes[idx as usize].lru_prev;
                continue;
            }
            self.drop_record(idx);
            self.prune_up(idx);
            return true;
        }
        false
    }

    fn drop_record(&mut self, idx: u32) {
        debug_assert!(self.nodes[idx as usize].record.is_some());
        self.lru_unlink(idx);
        self.nodes[idx as usize].record = None;
        self.records -= 1;
    }

    /// Remove structural nodes that no longer hold a record or children,
    /// walking toward the root.
    fn prune_up(&mut self, mut idx: u32) {
        while idx != ROOT && idx != NONE {
            let node = &self.nodes[idx as usize];
            if node.record.is_some() || !node.children.is_empty() {
                break;
            }
            let parent = node.parent;
            let name = node.name.clone();
            self.nodes[parent as usize].children.remove(&name);
            self.free.push(idx);
            idx = parent;
        }
    }

    fn remove_subtree(&mut self, idx: u32) -> usize {
        let mut removed = 0;
        // Detach the subtree root from its parent first so descendants
        // can be freed without touching live edges.
        if idx != ROOT {
            let parent = self.nodes[idx as usize].parent;
            let name = self.nodes[idx as usize].name.clone();
            if parent != NONE {
                self.nodes[parent as usize].children.remove(&name);
            }
        }
        let mut stack = vec![idx];
        while let Some(i) = stack.pop() {
            let children: Vec<u32> = self.nodes[i as usize].children.values().copied().collect();
            stack.extend(children);
            if self.nodes[i as usize].record.is_some() {
                self.drop_record(i);
                removed += 1;
            }
            self.nodes[i as usize].children.clear();
            if i != ROOT {
                self.free.push(i);
            }
        }
        removed
    }

    fn touch(&mut self, idx: u32) {
        if self.lru_head == idx {
            return;
        }
        self.lru_unlink(idx);
        self.lru_push_front(idx);
    }

    fn lru_push_front(&mut self, idx: u32) {
        let old = self.lru_head;
        self.nodes[idx as usize].lru_prev = NONE;
        self.nodes[idx as usize].lru_next = old;
        if old != NONE {
            self.nodes[old as usize].lru_prev = idx;
        }
        self.lru_head = idx;
        if self.lru_tail == NONE {
            self.lru_tail = idx;
        }
    }

    fn lru_unlink(&mut self, idx: u32) {
        let (prev, next) = {
            let n = &self.nodes[idx as usize];
            (n.lru_prev, n.lru_next)
        };
        if prev != NONE {
            self.nodes[prev as usize].lru_next = next;
        } else if self.lru_head == idx {
            self.lru_head = next;
        }
        if next != NONE {
            self.nodes[next as usize].lru_prev = prev;
        } else if self.lru_tail == idx {
            self.lru_tail = prev;
        }
        self.nodes[idx as usize].lru_prev = NONE;
        self.nodes[idx as usize].lru_next = NONE;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: INodeId, kind: EntryKind) -> CachedRecord {
        CachedRecord {
            id,
            kind,
            perms: 0o644,
            mtime: 0,
            last_writer: 0,
        }
    }

    fn dir(id: INodeId) -> CachedRecord {
        rec(id, EntryKind::Directory)
    }

    fn file(id: INodeId) -> CachedRecord {
        rec(id, EntryKind::File)
    }

    /// Build the record chain for a path with ids 1..=depth+1.
    fn chain(p: &str) -> Vec<CachedRecord> {
        let n = path::depth(p);
        let mut v = vec![dir(1)];
        for i in 0..n {
            let is_leaf = i + 1 == n;
            v.push(if is_leaf { file(i as u64 + 2) } else { dir(i as u64 + 2) });
        }
        v
    }

    #[test]
    fn empty_cache_misses_at_depth_zero() {
        let mut c = CacheTrie::new(None);
        let (res, _) = c.lookup("/x/y");
        assert_eq!(res, Lookup::Miss { cached_depth: 0 });
    }

    #[test]
    fn insert_then_lookup_hits_with_all_prefix_records() {
        let mut c = CacheTrie::new(None);
        c.insert_path("/nts/notes.txt", &chain("/nts/notes.txt"));
        let (res, recs) = c.lookup("/nts/notes.txt");
        assert_eq!(res, Lookup::Hit);
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[0].id, 1);
        assert_eq!(recs[2].kind, EntryKind::File);
    }

    #[test]
    fn fully_cached_prefix_is_a_hit() {
        let mut c = CacheTrie::new(None);
        c.insert_path("/a/b/c", &[dir(1), dir(2), dir(3), file(4)]);
        let (res, recs) = c.lookup("/a/b");
        assert_eq!(res, Lookup::Hit);
        assert_eq!(recs.len(), 3);
    }

    #[test]
    fn partial_prefix_reports_cached_depth() {
        let mut c = CacheTrie::new(None);
        c.insert_path("/a", &[dir(1), dir(2)]);
        let (res, _) = c.lookup("/a/x");
        assert_eq!(res, Lookup::Miss { cached_depth: 2 });
    }

    #[test]
    fn over_capacity_insert_trims_to_deepest_records() {
        let mut c = CacheTrie::new(Some(2));
        let evicted = c.insert_path("/a/b", &[dir(1), dir(2), file(3)]);
        assert_eq!(evicted, 0);
        assert_eq!(c.len(), 2);
        // Root was trimmed from the insert; deepest two are cached.
        assert_eq!(c.cached_paths(), vec!["/a".to_string(), "/a/b".to_string()]);
    }

    #[test]
    fn insert_evicts_lru_but_never_its_own_records() {
        let mut c = CacheTrie::new(Some(2));
        c.insert_path("/old", &[dir(1), file(10)]);
        assert_eq!(c.len(), 2);
        let evicted = c.insert_path("/new", &[dir(1), file(11)]);
        // Root is re-inserted (refresh); "/old" must be the victim.
        assert_eq!(evicted, 1);
        assert_eq!(c.cached_paths(), vec!["/".to_string(), "/new".to_string()]);
    }

    #[test]
    fn reinsert_same_path_evicts_nothing() {
        let mut c = CacheTrie::new(Some(3));
        c.insert_path("/a/b", &chain("/a/b"));
        let evicted = c.insert_path("/a/b", &chain("/a/b"));
        assert_eq!(evicted, 0);
        assert_eq!(c.len(), 3);
    }

    #[test]
    fn unbounded_capacity_never_evicts() {
        let mut c = CacheTrie::new(None);
        for i in 0..100 {
            let p = format!("/f{i}");
            assert_eq!(c.insert_path(&p, &[dir(1), file(i + 2)]), 0);
        }
        assert_eq!(c.len(), 101);
    }

    #[test]
    fn point_invalidation_semantics() {
        let mut c = CacheTrie::new(None);
        assert_eq!(c.invalidate("/missing"), 0);
        c.insert_path("/a/f", &chain("/a/f"));
        assert_eq!(c.invalidate("/a/f"), 1);
        let (res, _) = c.lookup("/a/f");
        assert!(matches!(res, Lookup::Miss { .. }));
        let (res, _) = c.lookup("/a");
        assert_eq!(res, Lookup::Hit, "parent keeps its record");
        assert_eq!(c.invalidate("/a/f"), 0, "double invalidate is a no-op");
    }

    #[test]
    fn point_invalidation_of_directory_keeps_descendants() {
        let mut c = CacheTrie::new(None);
        c.insert_path("/a/b/x", &[dir(1), dir(2), dir(3), file(4)]);
        assert_eq!(c.invalidate("/a/b"), 1);
        // /a/b/x stays cached (structurally reachable), /a/b itself misses.
        let (res, _) = c.lookup("/a/b/x");
        assert!(matches!(res, Lookup::Miss { cached_depth: 2 }));
        assert!(c.cached_paths().contains(&"/a/b/x".to_string()));
    }

    #[test]
    fn prefix_invalidation_removes_whole_subtree_in_one_call() {
        let mut c = CacheTrie::new(None);
        for i in 0..1000 {
            let p = format!("/foo/sub{}/f{}", i % 10, i);
            c.insert_path(&p, &[dir(1), dir(2), dir((i % 10) + 3), file(i + 100)]);
        }
        let before = c.len();
        let removed = c.invalidate_prefix("/foo");
        // /foo + 10 subdirs + 1000 files.
        assert_eq!(removed, 1011);
        assert_eq!(c.len(), before - 1011);
        let (res, _) = c.lookup("/foo");
        assert!(matches!(res, Lookup::Miss { .. }));
    }

    #[test]
    fn prefix_invalidation_of_root_empties_the_cache() {
        let mut c = CacheTrie::new(None);
        c.insert_path("/a/b", &chain("/a/b"));
        c.insert_path("/c", &[dir(1), file(9)]);
        let removed = c.invalidate_prefix("/");
        assert_eq!(removed, 4);
        assert!(c.is_empty());
    }

    #[test]
    fn prefix_invalidation_of_uncached_region_is_zero() {
        let mut c = CacheTrie::new(None);
        c.insert_path("/a", &[dir(1), dir(2)]);
        assert_eq!(c.invalidate_prefix("/zzz"), 0);
    }

    #[test]
    fn eviction_demotes_nodes_with_cached_descendants() {
        let mut c = CacheTrie::new(Some(3));
        // Cache /d/x fully (root, d, x), then touch deeper entries so the
        // structural ancestors go stale first.
        c.insert_path("/d/x", &[dir(1), dir(2), file(3)]);
        c.lookup("/d/x");
        // Inserting /d/y (3 records: root, d refreshed, y new) must evict
        // exactly one record; root/d were refreshed, so x is the victim.
        let evicted = c.insert_path("/d/y", &[dir(1), dir(2), file(4)]);
        assert_eq!(evicted, 1);
        assert_eq!(
            c.cached_paths(),
            vec!["/".to_string(), "/d".to_string(), "/d/y".to_string()]
        );
    }

    #[test]
    fn debug_dump_is_lexicographic() {
        let mut c = CacheTrie::new(None);
        c.insert_path("/b", &[dir(1), file(2)]);
        c.insert_path("/a", &[dir(1), file(3)]);
        assert_eq!(c.debug_dump(), "/\n/a\n/b\n");
    }
}
