//! Bursty workload generation: the industrial operation mix, Pareto
//! distributed per-interval throughput targets with per-second rollover,
//! microbenchmark modes, namespace pre-population, and fault-injection
//! schedules.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::kernel::{Micros, SECOND};
use crate::path;
use crate::store::EntryKind;

/// Namespace operations a client can issue.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpKind {
    Create,
    Mkdir,
    Delete,
    Mv,
    Read,
    Stat,
    Ls,
    SetAttr,
}

impl OpKind {
    pub const ALL: [OpKind; 8] = [
        OpKind::Create,
        OpKind::Mkdir,
        OpKind::Delete,
        OpKind::Mv,
        OpKind::Read,
        OpKind::Stat,
        OpKind::Ls,
        OpKind::SetAttr,
    ];

    pub fn is_read(self) -> bool {
        matches!(self, OpKind::Read | OpKind::Stat | OpKind::Ls)
    }

    pub fn label(self) -> &'static str {
        match self {
            OpKind::Create => "create",
            OpKind::Mkdir => "mkdir",
            OpKind::Delete => "delete",
            OpKind::Mv => "mv",
            OpKind::Read => "read",
            OpKind::Stat => "stat",
            OpKind::Ls => "ls",
            OpKind::SetAttr => "setattr",
        }
    }
}

/// Relative operation frequencies, in percent.
///
/// Defaults follow the Spotify trace mix: reads dominate at 95.23%
/// aggregate (read 69.22 + stat 17 + ls 9.01).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OpMix {
    pub create: f64,
    pub mkdir: f64,
    pub delete: f64,
    pub mv: f64,
    pub read: f64,
    pub stat: f64,
    pub ls: f64,
    pub setattr: f64,
}

impl Default for OpMix {
    fn default() -> Self {
        OpMix {
            create: 2.7,
            mkdir: 0.02,
            delete: 0.75,
            mv: 1.3,
            read: 69.22,
            stat: 17.0,
            ls: 9.01,
            setattr: 0.0,
        }
    }
}

impl OpMix {
    pub fn read_only() -> Self {
        OpMix {
            create: 0.0,
            mkdir: 0.0,
            delete: 0.0,
            mv: 0.0,
            read: 100.0,
            stat: 0.0,
            ls: 0.0,
            setattr: 0.0,
        }
    }

    pub fn weights(&self) -> [(OpKind, f64); 8] {
        [
            (OpKind::Create, self.create),
            (OpKind::Mkdir, self.mkdir),
            (OpKind::Delete, self.delete),
            (OpKind::Mv, self.mv),
            (OpKind::Read, self.read),
            (OpKind::Stat, self.stat),
            (OpKind::Ls, self.ls),
            (OpKind::SetAttr, self.setattr),
        ]
    }

    pub fn total(&self) -> f64 {
        self.weights().iter().map(|(_, w)| w).sum()
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.weights().iter().any(|(_, w)| *w < 0.0) {
            return Err("op mix weights must be non-negative".into());
        }
        let total = self.total();
        if (total - 100.0).abs() > 1e-9 {
            return Err(format!("op mix must sum to 100% (got {total})"));
        }
        Ok(())
    }

    pub fn draw(&self, rng: &mut ChaCha8Rng) -> OpKind {
        let mut x = rng.gen::<f64>() * self.total();
        for (kind, w) in self.weights() {
            if x < w {
                return kind;
            }
            x -= w;
        }
        OpKind::Read
    }
}

/// How the per-interval throughput target is produced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum RateMode {
    /// A fresh Pareto draw every interval (the bursty default).
    ParetoBursts,
    /// The scale value, every interval.
    Constant,
    /// Square wave: scale for `on_s` seconds, zero for `off_s`.
    Pulse { on_s: u64, off_s: u64 },
    /// No rate target: every client issues `ops` operations back to
    /// back and the run ends when all clients finish.
    FixedOpsPerClient { ops: u64 },
}

/// Throughput schedule for a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BurstSchedule {
    pub duration_s: u64,
    pub interval_s: u64,
    pub pareto_alpha: f64,
    /// Base throughput x_t in ops/sec.
    pub pareto_scale: f64,
    /// Bursts clamp at this multiple of the scale.
    pub burst_cap: f64,
    pub n_client_vms: u32,
    pub clients_per_vm: u32,
    pub mode: RateMode,
}

impl Default for BurstSchedule {
    fn default() -> Self {
        BurstSchedule {
            duration_s: 300,
            interval_s: 15,
            pareto_alpha: 2.0,
            pareto_scale: 25_000.0,
            burst_cap: 7.0,
            n_client_vms: 8,
            clients_per_vm: 128,
            mode: RateMode::ParetoBursts,
        }
    }
}

impl BurstSchedule {
    pub fn validate(&self) -> Result<(), String> {
        if self.pareto_alpha <= 1.0 {
            return Err("pareto alpha must be > 1 (finite mean)".into());
        }
        if self.burst_cap < 1.0 {
            return Err("burst cap must be >= 1".into());
        }
        if self.n_client_vms == 0 || self.clients_per_vm == 0 {
            return Err("client counts must be >= 1".into());
        }
        if self.duration_s == 0 || self.interval_s == 0 {
            return Err("duration and interval must be > 0".into());
        }
        Ok(())
    }

    pub fn total_clients(&self) -> u32 {
        self.n_client_vms * self.clients_per_vm
    }

    /// Next per-interval throughput target in ops/sec.
    ///
    /// Pareto draws use the inverse CDF `x_t * U^(-1/alpha)` and clamp
    /// at `burst_cap * x_t`. `interval_index` drives the pulse phase.
    pub fn next_interval_target(&self, rng: &mut ChaCha8Rng, interval_index: u64) -> f64 {
        match self.mode {
            RateMode::ParetoBursts => {
                let raw = sample_pareto(rng, self.pareto_alpha, self.pareto_scale);
                raw.min(self.burst_cap * self.pareto_scale)
            }
            RateMode::Constant => self.pareto_scale,
            RateMode::Pulse { on_s, off_s } => {
                let period = on_s + off_s;
                if period == 0 {
                    return self.pareto_scale;
                }
                let pos = (interval_index * self.interval_s) % period;
                if pos < on_s {
                    self.pareto_scale
                } else {
                    0.0
                }
            }
            RateMode::FixedOpsPerClient { .. } => f64::INFINITY,
        }
    }
}

/// Unclamped Pareto draw via the inverse CDF.
pub fn sample_pareto(rng: &mut ChaCha8Rng, alpha: f64, scale: f64) -> f64 {
    // 1 - gen::<f64>() lies in (0, 1], avoiding a zero base.
    let u = 1.0 - rng.gen::<f64>();
    scale * u.powf(-1.0 / alpha)
}

/// Per-VM issuance ledger: unmet per-second targets roll over.
#[derive(Debug, Clone, Copy, Default)]
pub struct VmLedger {
    pending: f64,
    current_target: f64,
}

impl VmLedger {
    /// Begin a second with a per-VM rate of `delta` ops/sec; returns the
    /// number of operations to attempt this second.
    pub fn begin_second(&mut self, delta: f64) -> u64 {
        self.current_target = delta + self.pending;
        self.current_target.floor().max(0.0) as u64
    }

    /// Close out a second given how many operations completed in it.
    pub fn end_second(&mut self, completed: u64) {
        self.pending = (self.current_target - completed as f64).max(0.0);
    }

    pub fn pending(&self) -> f64 {
        self.pending
    }
}

/// Split an interval target across VMs: each VM sustains delta/n.
pub fn per_vm_rate(interval_target: f64, n_vms: u32) -> f64 {
    assert!(n_vms >= 1);
    interval_target / f64::from(n_vms)
}

/// Shape of the pre-populated directory tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NamespaceSeed {
    /// Maximum path depth, files included.
    pub depth: u32,
    pub fanout: u32,
    pub files: u64,
}

impl Default for NamespaceSeed {
    fn default() -> Self {
        NamespaceSeed {
            depth: 4,
            fanout: 10,
            files: 10_000,
        }
    }
}

impl NamespaceSeed {
    /// Number of directories the seed creates (root excluded).
    pub fn dir_count(&self) -> u64 {
        let mut total = 0u64;
        let mut level = 1u64;
        for _ in 1..self.depth {
            level *= u64::from(self.fanout);
            total += level;
        }
        total
    }

    /// Total records in the seeded namespace (root included): the
    /// working set size of a uniform read workload.
    pub fn working_set_size(&self) -> u64 {
        1 + self.dir_count() + self.files
    }
}

/// Timestamps of fault-injection events for a run.
pub fn failure_times(period: Micros, duration: Micros) -> Vec<Micros> {
    assert!(period > 0);
    let mut out = Vec::new();
    let mut t = period;
    while t <= duration {
        out.push(t);
        t += period;
    }
    out
}

// ---------------------------------------------------------------------
// Generator-side namespace view
// ---------------------------------------------------------------------

const VIEW_NONE: u32 = u32::MAX;

#[derive(Debug)]
struct ViewNode {
    name: Box<str>,
    parent: u32,
    kind: EntryKind,
    alive: bool,
}

/// Reference to a node in the generator view.
pub type ViewNodeId = u32;

/// The generator's own picture of the namespace, updated as its
/// mutations complete. Target paths are drawn from here so the workload
/// only references entries it believes exist.
#[derive(Debug)]
pub struct NamespaceView {
    nodes: Vec<ViewNode>,
    files: Vec<u32>,
    dirs: Vec<u32>, // root included
    name_seq: u64,
}

impl NamespaceView {
    pub const ROOT: ViewNodeId = 0;

    pub fn new() -> Self {
        NamespaceView {
            nodes: vec![ViewNode {
                name: "".into(),
                parent: VIEW_NONE,
                kind: EntryKind::Directory,
                alive: true,
            }],
            files: Vec::new(),
            dirs: vec![0],
            name_seq: 0,
        }
    }

    pub fn add(&mut self, parent: ViewNodeId, name: &str, kind: EntryKind) -> ViewNodeId {
        let idx = self.nodes.len() as u32;
        self.nodes.push(ViewNode {
            name: name.into(),
            parent,
            kind,
            alive: true,
        });
        match kind {
            EntryKind::File => self.files.push(idx),
            EntryKind::Directory => self.dirs.push(idx),
        }
        idx
    }

    pub fn mark_deleted(&mut self, node: ViewNodeId) {
        self.nodes[node as usize].alive = false;
    }

    pub fn reparent(&mut self, node: ViewNodeId, new_parent: ViewNodeId) {
        self.nodes[node as usize].parent = new_parent;
    }

    pub fn kind(&self, node: ViewNodeId) -> EntryKind {
        self.nodes[node as usize].kind
    }

    /// A node is live iff it and every ancestor is undeleted.
    pub fn is_live(&self, node: ViewNodeId) -> bool {
        let mut cur = node;
        loop {
            let n = &self.nodes[cur as usize];
            if !n.alive {
                return false;
            }
            if n.parent == VIEW_NONE {
                return true;
            }
            cur = n.parent;
        }
    }

    /// True when `anc` is `node` or one of its ancestors.
    pub fn is_ancestor_or_self(&self, anc: ViewNodeId, node: ViewNodeId) -> bool {
        let mut cur = node;
        loop {
            if cur == anc {
                return true;
            }
            let p = self.nodes[cur as usize].parent;
            if p == VIEW_NONE {
                return false;
            }
            cur = p;
        }
    }

    pub fn path_of(&self, node: ViewNodeId) -> String {
        if node == Self::ROOT {
            return "/".to_string();
        }
        let mut comps = Vec::new();
        let mut cur = node;
        while cur != Self::ROOT {
            let n = &self.nodes[cur as usize];
            comps.push(&*n.name);
            cur = n.parent;
        }
        let mut out = String::with_capacity(comps.iter().map(|c| c.len() + 1).sum());
        for c in comps.iter().rev() {
            out.push('/');
            out.push_str(c);
        }
        out
    }

    fn pick_live(&mut self, list: ListKind, rng: &mut ChaCha8Rng) -> Option<ViewNodeId> {
        loop {
            let len = match list {
                ListKind::Files => self.files.len(),
                ListKind::Dirs => self.dirs.len(),
            };
            if len == 0 {
                return None;
            }
            let i = rng.gen_range(0..len);
            let node = match list {
                ListKind::Files => self.files[i],
                ListKind::Dirs => self.dirs[i],
            };
            if self.is_live(node) {
                return Some(node);
            }
            // Lazily drop stale references.
            match list {
                ListKind::Files => {
                    self.files.swap_remove(i);
                }
                ListKind::Dirs => {
                    self.dirs.swap_remove(i);
                }
            }
        }
    }

    pub fn pick_file(&mut self, rng: &mut ChaCha8Rng) -> Option<ViewNodeId> {
        self.pick_live(ListKind::Files, rng)
    }

    pub fn pick_dir(&mut self, rng: &mut ChaCha8Rng) -> Option<ViewNodeId> {
        self.pick_live(ListKind::Dirs, rng)
    }

    /// Any live entry other than the root.
    pub fn pick_entry(&mut self, rng: &mut ChaCha8Rng) -> Option<ViewNodeId> {
        let files = self.files.len();
        let dirs = self.dirs.len().saturating_sub(1);
        if files + dirs == 0 {
            return None;
        }
        // Weight by list sizes; retry across lists on stale picks.
        for _ in 0..16 {
            let x = rng.gen_range(0..files + dirs);
            let pick = if x < files {
                self.pick_file(rng)
            } else {
                let d = self.pick_dir(rng)?;
                if d == Self::ROOT {
                    continue;
                }
                Some(d)
            };
            if let Some(n) = pick {
                if n != Self::ROOT {
                    return Some(n);
                }
            }
        }
        self.pick_file(rng)
    }

    pub fn fresh_name(&mut self, prefix: &str) -> String {
        self.name_seq += 1;
        format!("{prefix}{}", self.name_seq)
    }

    pub fn live_counts(&self) -> (usize, usize) {
        (self.files.len(), self.dirs.len())
    }

    pub fn node_indices(&self) -> std::ops::Range<u32> {
        0..self.nodes.len() as u32
    }

    pub fn parent_of(&self, node: ViewNodeId) -> ViewNodeId {
        self.nodes[node as usize].parent
    }

    pub fn name_of(&self, node: ViewNodeId) -> &str {
        &self.nodes[node as usize].name
    }
}

impl Default for NamespaceView {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Copy)]
enum ListKind {
    Files,
    Dirs,
}

/// One generated operation: kind, target path(s), and the view nodes
/// needed to update the generator's picture when the op completes.
#[derive(Debug, Clone)]
pub struct GenOp {
    pub kind: OpKind,
    pub path: Arc<str>,
    /// Move destination (full new path), when applicable.
    pub dst_path: Option<Arc<str>>,
    pub target: ViewNodeId,
    pub dst_dir: Option<ViewNodeId>,
    /// Leaf name for creates (fresh) and moves (carried over).
    pub leaf: Option<Arc<str>>,
}

/// Draw the next operation per the mix, with targets drawn uniformly
/// from live entries of the appropriate kind.
pub fn pick_operation(
    rng: &mut ChaCha8Rng,
    mix: &OpMix,
    view: &mut NamespaceView,
) -> Option<GenOp> {
    let kind = mix.draw(rng);
    build_operation(kind, rng, view)
}

pub fn build_operation(
    kind: OpKind,
    rng: &mut ChaCha8Rng,
    view: &mut NamespaceView,
) -> Option<GenOp> {
    match kind {
        OpKind::Read | OpKind::Stat | OpKind::SetAttr => {
            let f = view.pick_file(rng)?;
            Some(GenOp {
                kind,
                path: view.path_of(f).into(),
                dst_path: None,
                target: f,
                dst_dir: None,
                leaf: None,
            })
        }
        OpKind::Ls => {
            let d = view.pick_dir(rng)?;
            Some(GenOp {
                kind,
                path: view.path_of(d).into(),
                dst_path: None,
                target: d,
                dst_dir: None,
                leaf: None,
            })
        }
        OpKind::Create | OpKind::Mkdir => {
            let d = view.pick_dir(rng)?;
            let name = view.fresh_name(if kind == OpKind::Create { "f" } else { "d" });
            let p = path::join(&view.path_of(d), &name);
            Some(GenOp {
                kind,
                path: p.into(),
                dst_path: None,
                target: d,
                dst_dir: None,
                leaf: Some(name.into()),
            })
        }
        OpKind::Delete => {
            let e = view.pick_entry(rng)?;
            Some(GenOp {
                kind,
                path: view.path_of(e).into(),
                dst_path: None,
                target: e,
                dst_dir: None,
                leaf: None,
            })
        }
        OpKind::Mv => {
            let e = view.pick_entry(rng)?;
            // Destination must not lie inside the moved subtree.
            let mut dst = None;
            for _ in 0..8 {
                if let Some(d) = view.pick_dir(rng) {
                    if !view.is_ancestor_or_self(e, d) {
                        dst = Some(d);
                        break;
                    }
                }
            }
            let dst = dst?;
            let src_path = view.path_of(e);
            let name = path::leaf_name(&src_path).to_string();
            let dst_path = path::join(&view.path_of(dst), &name);
            if dst_path == src_path {
                return None;
            }
            Some(GenOp {
                kind,
                path: src_path.into(),
                dst_path: Some(dst_path.into()),
                target: e,
                dst_dir: Some(dst),
                leaf: Some(name.into()),
            })
        }
    }
}

/// Build the seeded directory tree in the generator view; the engine
/// mirrors it into the store before the measured window starts.
pub fn seed_view(seed: &NamespaceSeed, rng: &mut ChaCha8Rng) -> NamespaceView {
    let mut view = NamespaceView::new();
    let mut level = vec![NamespaceView::ROOT];
    for depth in 1..seed.depth {
        let mut next = Vec::new();
        for parent in &level {
            for i in 0..seed.fanout {
                let name = format!("d{depth}_{i}");
                next.push(view.add(*parent, &name, EntryKind::Directory));
            }
        }
        level = next;
    }
    let dir_pool: Vec<ViewNodeId> = view.dirs.clone();
    for i in 0..seed.files {
        let parent = dir_pool[rng.gen_range(0..dir_pool.len())];
        view.add(parent, &format!("seed{i}"), EntryKind::File);
    }
    view
}

pub fn duration_micros(schedule: &BurstSchedule) -> Micros {
    schedule.duration_s * SECOND
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn default_mix_sums_to_one_hundred() {
        let mix = OpMix::default();
        mix.validate().unwrap();
        assert!((mix.read + mix.stat + mix.ls - 95.23).abs() < 1e-9);
    }

    #[test]
    fn single_op_mix_draws_only_that_op() {
        let mix = OpMix::read_only();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            assert_eq!(mix.draw(&mut rng), OpKind::Read);
        }
    }

    #[test]
    fn mix_fractions_converge() {
        let mix = OpMix::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut counts = std::collections::BTreeMap::new();
        let n = 200_000;
        for _ in 0..n {
            *counts.entry(mix.draw(&mut rng)).or_insert(0u64) += 1;
        }
        for (kind, want) in mix.weights() {
            let got = 100.0 * *counts.get(&kind).unwrap_or(&0) as f64 / n as f64;
            assert!(
                (got - want).abs() <= 1.0,
                "{kind:?}: got {got:.3}%, want {want}%"
            );
        }
    }

    #[test]
    fn pareto_support_and_cap() {
        let sched = BurstSchedule {
            pareto_scale: 10_000.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for i in 0..100_000 {
            let v = sched.next_interval_target(&mut rng, i);
            assert!(v >= sched.pareto_scale, "below scale: {v}");
            assert!(v <= 7.0 * sched.pareto_scale, "above cap: {v}");
        }
    }

    #[test]
    fn pareto_uncapped_mean_near_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (alpha, scale) = (2.0, 1000.0);
        let n = 200_000;
        let sum: f64 = (0..n).map(|_| sample_pareto(&mut rng, alpha, scale)).sum();
        let mean = sum / n as f64;
        let expect = alpha * scale / (alpha - 1.0);
        assert!(
            (mean - expect).abs() / expect < 0.07,
            "mean {mean} vs {expect}"
        );
    }

    #[test]
    fn quota_split_and_rollover() {
        assert_eq!(per_vm_rate(25_000.0, 8), 3_125.0);
        let mut ledger = VmLedger::default();
        assert_eq!(ledger.begin_second(3_125.0), 3_125);
        ledger.end_second(3_025); // 100 short
        assert_eq!(ledger.begin_second(3_125.0), 3_225);
        ledger.end_second(4_000); // caught up; no banking ahead
        assert_eq!(ledger.begin_second(3_125.0), 3_125);
    }

    #[test]
    fn zero_rate_issues_nothing_and_keeps_ledger() {
        let mut ledger = VmLedger::default();
        assert_eq!(ledger.begin_second(0.0), 0);
        ledger.end_second(0);
        assert_eq!(ledger.pending(), 0.0);
    }

    #[test]
    fn failure_schedule_counts() {
        use crate::kernel::secs;
        assert_eq!(failure_times(secs(30), secs(300)).len(), 10);
        assert!(failure_times(secs(400), secs(300)).is_empty());
    }

    #[test]
    fn pulse_mode_alternates() {
        let sched = BurstSchedule {
            interval_s: 1,
            pareto_scale: 500.0,
            mode: RateMode::Pulse { on_s: 1, off_s: 1 },
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let vals: Vec<f64> = (0..4)
            .map(|i| sched.next_interval_target(&mut rng, i))
            .collect();
        assert_eq!(vals, vec![500.0, 0.0, 500.0, 0.0]);
    }

    #[test]
    fn seeded_view_matches_shape_parameters() {
        let seed = NamespaceSeed::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let view = seed_view(&seed, &mut rng);
        let (files, dirs) = view.live_counts();
        assert_eq!(files as u64, seed.files);
        assert_eq!(dirs as u64, 1 + seed.dir_count());
        assert_eq!(seed.working_set_size(), 11_111);
    }

    #[test]
    fn generated_paths_are_normalized_and_reproducible() {
        let seed = NamespaceSeed {
            depth: 3,
            fanout: 3,
            files: 50,
        };
        let run = |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let mut view = seed_view(&seed, &mut rng);
            let mix = OpMix::default();
            let mut ops = Vec::new();
            for _ in 0..500 {
                if let Some(op) = pick_operation(&mut rng, &mix, &mut view) {
                    path::validate(&op.path).unwrap();
                    if let Some(d) = &op.dst_path {
                        path::validate(d).unwrap();
                    }
                    // Keep the view evolving the way the engine would.
                    match op.kind {
                        OpKind::Create => {
                            view.add(op.target, op.leaf.as_ref().unwrap(), EntryKind::File);
                        }
                        OpKind::Mkdir => {
                            view.add(op.target, op.leaf.as_ref().unwrap(), EntryKind::Directory);
                        }
                        OpKind::Delete => view.mark_deleted(op.target),
                        OpKind::Mv => view.reparent(op.target, op.dst_dir.unwrap()),
                        _ => {}
                    }
                    ops.push(format!("{:?} {}", op.kind, op.path));
                }
            }
            ops
        };
        assert_eq!(run(7), run(7), "same seed must give the same op sequence");
        assert_ne!(run(7), run(8));
    }

    #[test]
    fn mv_never_targets_a_descendant_destination() {
        let seed = NamespaceSeed {
            depth: 4,
            fanout: 2,
            files: 20,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut view = seed_view(&seed, &mut rng);
        for _ in 0..2000 {
            if let Some(op) = build_operation(OpKind::Mv, &mut rng, &mut view) {
                let dst = op.dst_path.as_ref().unwrap();
                assert!(
                    !path::starts_with_prefix(dst, &op.path),
                    "mv {} -> {} moves into itself",
                    op.path,
                    dst
                );
            }
        }
    }
}
