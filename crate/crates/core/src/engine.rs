//! The simulation engine: wires the FaaS platform, the client RPC layer,
//! the coherence protocol, the namespace store, and the workload
//! generator into one deterministic event loop.
//!
//! Everything in a run is an event: request legs, store round trips,
//! cold starts, INV/ACK deliveries, timeouts, reclaim scans, failure
//! injections, and the per-second issuance ticks. A run is a pure
//! function of the scenario and the seed.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cache::{CacheTrie, CachedRecord, Lookup};
use crate::client::{
    self, request_id, Channel, LatencyWindow, ModeState, StragglerVerdict,
};
use crate::coherence::{assign_batches, plan_batches, Coordinator, InvPayload, RoundId};
use crate::kernel::{actor_rng, secs, stream, EventHandle, EventQueue, LatencyKind, Micros, SECOND};
use crate::metrics::{
    cost_serverful, perf_per_cost, request_fees, BusyTracker, LatencyHistogram, MetricSeries,
};
use crate::partition::{deployment_for, deployments_for_subtree, DeploymentId};
use crate::path;
use crate::scenario::{InjectFault, Scenario};
use crate::store::{
    AppliedOutcome, Blocked, EntryKind, INodeId, MetadataStore, RequestId, SubtreeOpId,
    SubtreeOpKind, TxnId, Waiter,
};
use crate::trace::{
    HistoryEvent, HistoryOutcome, ProtoEvent, RegValue, RequestTraceRow, write_jsonl,
};
use crate::workload::{
    self, pick_operation, seed_view, GenOp, NamespaceView, OpKind, RateMode, VmLedger,
};

// ---------------------------------------------------------------------
// Events
// ---------------------------------------------------------------------

#[derive(Debug, Clone)]
enum Ev {
    IntervalTick,
    SecondTick,
    VmIssue { vm: u32 },
    ClientKick { client: u32 },
    HttpAtInvoker { req: u32, gen: u32 },
    RequestArrive { req: u32, gen: u32, inst: u32 },
    ResponseArrive { req: u32, gen: u32, outcome: RespOutcome },
    RequestTimeout { req: u32, gen: u32 },
    StragglerCheck { req: u32, gen: u32 },
    RetryFire { req: u32, gen: u32 },
    ExecStep { exec: u32, gen: u32 },
    WaitTimeout { exec: u32, gen: u32 },
    InvDeliver { round: RoundId, inst: u32 },
    AckArrive { round: RoundId, inst: u32 },
    RoundTimeout { round: RoundId, exec: u32, gen: u32 },
    ColdStartDone { inst: u32 },
    ReclaimCheck { inst: u32 },
    ConnEstablish { inst: u32, server: u32 },
    FailureTick { k: u32 },
}

/// Server response as delivered to the client.
#[derive(Debug, Clone)]
enum RespOutcome {
    /// Reads: observed register value. Writes: the request's own id.
    Ok { value: RegValue },
    /// Subtree mutation completed; suffixes only when history is kept.
    OkSubtree { suffixes: Arc<[Arc<str>]> },
    Domain(DomainErr),
    /// Overlapping subtree operation; retry after backoff.
    Conflict,
    /// Lock-wait or round timeout surfaced server-side; retry.
    Transport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum DomainErr {
    NotFound,
    AlreadyExists,
    NotADirectory,
}

impl DomainErr {
    fn history(self) -> HistoryOutcome {
        match self {
            DomainErr::NotFound => HistoryOutcome::NotFound,
            DomainErr::AlreadyExists => HistoryOutcome::AlreadyExists,
            DomainErr::NotADirectory => HistoryOutcome::NotADirectory,
        }
    }
}

// ---------------------------------------------------------------------
// Actors
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum InstanceState {
    ColdStarting,
    Warm,
    Terminated,
}

#[derive(Debug)]
struct Instance {
    id: u32,
    deployment: u32,
    state: InstanceState,
    slots_used: u32,
    cold_reserved: u32,
    local_queue: VecDeque<(u32, u32)>, // (req, gen) awaiting a slot
    pending_cold: Vec<(u32, u32)>,     // reserved HTTP requests
    cache: CacheTrie,
    rng: ChaCha8Rng,
    started_at: Micros,
    terminated_at: Option<Micros>,
    last_active: Micros,
    busy: BusyTracker,
    tcp_peers: BTreeSet<u32>,
    result_cache: HashMap<RequestId, (RespOutcome, Micros)>,
    result_order: VecDeque<(Micros, RequestId)>,
}

#[derive(Debug, Default)]
struct Deployment {
    instances: BTreeSet<u32>,
    invoker_queue: VecDeque<(u32, u32)>,
}

#[derive(Debug, Default)]
struct TcpServer {
    conns: BTreeMap<u32, BTreeSet<u32>>, // deployment -> instances
}

#[derive(Debug)]
struct Vm {
    servers: Vec<u32>,
    ledger: VmLedger,
    budget: u64,
    issued_this_second: u64,
    completed_this_second: u64,
    issue_gap: Micros,
    idle_clients: VecDeque<u32>,
}

#[derive(Debug)]
struct Client {
    vm: u32,
    server: u32,
    rng: ChaCha8Rng,
    window: LatencyWindow,
    mode: ModeState,
    busy: bool,
    ops_left: u64,
    issued: u64,
    completed: u64,
}

#[derive(Debug)]
struct Request {
    gen: u32,
    alive: bool,
    client: u32,
    rid: RequestId,
    op: GenOp,
    attempt: u32,
    issued_at: Micros,
    dispatch_at: Micros,
    via: Channel,
    first_via: Option<Channel>,
    target_dep: u32,
    cur_inst: Option<u32>,
    timeout_h: Option<EventHandle>,
    straggler_h: Option<EventHandle>,
    tcp_attempts: u32,
    http_attempts: u32,
}

// ---------------------------------------------------------------------
// Server-side executions
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Proc,
    ReadStore,
    WriteValidate,
    WriteLocking,
    WriteLockRtt,
    WriteRound,
    WriteCommitRtt,
    SubLockRtt,
    SubQuiesce,
    SubRound,
    SubBatchWait,
    SubFinalLocking,
    SubFinalRtt,
    BatchLocking,
    BatchLockRtt,
    BatchCommitRtt,
}

#[derive(Debug)]
struct WriteCtx {
    parent_id: INodeId,
    parent_path: Arc<str>,
    target_id: Option<INodeId>,
    dst_parent_id: Option<INodeId>,
    dst_parent_path: Option<Arc<str>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BatchAction {
    DeleteRows,
    RewriteRows,
}

#[derive(Debug)]
struct SubCtx {
    op_id: SubtreeOpId,
    root_id: INodeId,
    kind: SubtreeOpKind,
    parent_id: INodeId,
    parent_path: Arc<str>,
    dst_parent_id: Option<INodeId>,
    dst_parent_path: Option<Arc<str>>,
    leaf_name: Option<Arc<str>>,
    quiesce_ids: Vec<INodeId>,
    quiesce_next: usize,
    sub_op_count: u64,
    /// Per-executor batch queues (instance, id batches).
    executor_queues: Vec<(u32, VecDeque<Vec<INodeId>>)>,
    outstanding: u32,
    failed: bool,
    suffixes: Vec<Arc<str>>,
}

#[derive(Debug)]
struct BatchCtx {
    parent: (u32, u32),
    executor_idx: usize,
    ids: Vec<INodeId>,
    action: BatchAction,
}

#[derive(Debug)]
struct Exec {
    gen: u32,
    alive: bool,
    inst: u32,
    req: Option<(u32, u32)>,
    rid: RequestId,
    client_server: u32,
    via: Channel,
    wrong_deployment: bool,
    op: OpKind,
    path: Arc<str>,
    dst: Option<Arc<str>>,
    phase: Phase,
    txn: Option<TxnId>,
    round: Option<RoundId>,
    round_done: bool,
    round_to_h: Option<EventHandle>,
    wait_to_h: Option<EventHandle>,
    holds_slot: bool,
    wctx: Option<Box<WriteCtx>>,
    sub: Option<Box<SubCtx>>,
    batch: Option<Box<BatchCtx>>,
}

// ---------------------------------------------------------------------
// Counters and summary
// ---------------------------------------------------------------------

#[derive(Debug, Default, Clone, Serialize)]
pub struct Counters {
    pub issued: u64,
    pub completed_ok: u64,
    pub completed_domain_err: u64,
    pub gave_up: u64,
    pub in_flight_at_end: u64,
    pub retries: u64,
    pub straggler_resubmits: u64,
    pub anti_thrash_entries: u64,
    pub tcp_dispatches: u64,
    pub http_dispatches: u64,
    pub tcp_dispatches_post_warmup: u64,
    pub http_dispatches_post_warmup: u64,
    pub http_invocations: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub cache_hits_post_warmup: u64,
    pub cache_misses_post_warmup: u64,
    pub cold_starts: u64,
    pub cold_start_denials: u64,
    pub evictions_for_admission: u64,
    pub reclaims: u64,
    pub kills: u64,
    pub peak_instances: u32,
    pub peak_vcpu: f64,
    pub rounds_opened: u64,
    pub inv_messages: u64,
    pub ack_messages: u64,
    pub round_timeouts: u64,
    pub commit_barrier_violations: u64,
    pub store_commits: u64,
    pub store_aborts: u64,
    pub lock_wait_timeouts: u64,
    pub subtree_ops_started: u64,
    pub subtree_ops_completed: u64,
    pub subtree_conflicts: u64,
    pub subtree_batches: u64,
    pub subtree_offloaded_batches: u64,
    pub read_ops_completed: u64,
    pub duplicate_commits: u64,
    pub completed_reads_post_warmup: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct OpLatencySummary {
    pub count: u64,
    pub mean_us: f64,
    pub p50_us: Micros,
    pub p90_us: Micros,
    pub p99_us: Micros,
    pub p999_us: Micros,
}

#[derive(Debug, Clone, Serialize)]
pub struct CostSummary {
    pub pay_per_use: f64,
    pub simplified: f64,
    pub serverful: f64,
    pub billed_busy_seconds: f64,
    pub provisioned_seconds: f64,
    pub http_invocations: u64,
    pub perf_per_cost_pay_per_use: Option<f64>,
    pub perf_per_cost_simplified: Option<f64>,
    pub perf_per_cost_serverful: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub schema_version: u32,
    pub scenario: String,
    pub seed: u64,
    pub duration_s: f64,
    pub counters: Counters,
    pub avg_throughput_ops_per_s: f64,
    pub read_throughput_ops_per_s: f64,
    pub peak_second_ops: u64,
    pub http_fraction_post_warmup: Option<f64>,
    pub cache_hit_rate_post_warmup: Option<f64>,
    pub latency: OpLatencySummary,
    pub read_latency: OpLatencySummary,
    pub per_op_latency: BTreeMap<String, OpLatencySummary>,
    pub cost: CostSummary,
    pub avg_instances: f64,
    pub tree_shape_ok: bool,
    pub exactly_once_ok: bool,
}

/// Everything a finished run hands back.
pub struct RunResult {
    pub summary: Summary,
    pub series: MetricSeries,
    pub proto: Vec<ProtoEvent>,
    pub history: Vec<HistoryEvent>,
    pub request_rows: Vec<RequestTraceRow>,
    pub snapshot_jsonl: String,
    pub committed_rids: Vec<RequestId>,
}

fn hist_summary(h: &LatencyHistogram) -> OpLatencySummary {
    OpLatencySummary {
        count: h.count(),
        mean_us: h.mean(),
        p50_us: h.quantile(0.50),
        p90_us: h.quantile(0.90),
        p99_us: h.quantile(0.99),
        p999_us: h.quantile(0.999),
    }
}

// ---------------------------------------------------------------------
// The simulation
// ---------------------------------------------------------------------

pub struct Sim {
    sc: Scenario,
    q: EventQueue<Ev>,
    store: MetadataStore,
    coord: Coordinator,
    deployments: Vec<Deployment>,
    instances: Vec<Instance>,
    vcpu_used: f64,
    next_instance: u32,
    vms: Vec<Vm>,
    clients: Vec<Client>,
    servers: Vec<TcpServer>,
    view: NamespaceView,
    wl_rng: ChaCha8Rng,
    plat_rng: ChaCha8Rng,
    coord_rng: ChaCha8Rng,
    current_vm_rate: f64,
    interval_index: u64,
    fixed_ops: Option<u64>,
    clients_done: u32,
    requests: Vec<Request>,
    req_free: Vec<u32>,
    execs: Vec<Exec>,
    exec_free: Vec<u32>,
    metrics: MetricSeries,
    counters: Counters,
    proto: Vec<ProtoEvent>,
    history: Vec<HistoryEvent>,
    req_rows: Vec<RequestTraceRow>,
    committed_rids: Vec<RequestId>,
    duration: Micros,
    warmup: Micros,
    inject_armed: bool,
    instance_seconds_acc: f64,
    round_payloads: HashMap<RoundId, InvPayload>,
    txn_exec: HashMap<TxnId, (u32, u32)>,
    per_second_busy_units: Vec<u64>,
    result_cache_cap: usize,
}

impl Sim {
    pub fn new(sc: &Scenario) -> Self {
        sc.validate().expect("scenario must validate before running");
        let seed = sc.seed;
        let n_dep = sc.platform.n_deployments;
        let mut wl_rng = actor_rng(seed, stream::WORKLOAD, 0);
        let view = seed_view(&sc.workload.namespace, &mut wl_rng);
        let schedule = sc.workload.schedule;

        let mut sim = Sim {
            sc: sc.clone(),
            q: EventQueue::new(),
            store: MetadataStore::new(),
            coord: Coordinator::new(),
            deployments: (0..n_dep).map(|_| Deployment::default()).collect(),
            instances: Vec::new(),
            vcpu_used: 0.0,
            next_instance: 0,
            vms: Vec::new(),
            clients: Vec::new(),
            servers: Vec::new(),
            view,
            wl_rng,
            plat_rng: actor_rng(seed, stream::PLATFORM, 0),
            coord_rng: actor_rng(seed, stream::COORDINATOR, 0),
            current_vm_rate: 0.0,
            interval_index: 0,
            fixed_ops: match schedule.mode {
                RateMode::FixedOpsPerClient { ops } => Some(ops),
                _ => None,
            },
            clients_done: 0,
            requests: Vec::new(),
            req_free: Vec::new(),
            execs: Vec::new(),
            exec_free: Vec::new(),
            metrics: MetricSeries::new(),
            counters: Counters::default(),
            proto: Vec::new(),
            history: Vec::new(),
            req_rows: Vec::new(),
            committed_rids: Vec::new(),
            duration: workload::duration_micros(&schedule),
            warmup: secs(sc.measurement_warmup_s),
            inject_armed: sc.inject == Some(InjectFault::StaleRead),
            instance_seconds_acc: 0.0,
            round_payloads: HashMap::new(),
            txn_exec: HashMap::new(),
            per_second_busy_units: Vec::new(),
            result_cache_cap: 50_000,
        };
        sim.seed_store();
        sim.build_clients();
        sim.q.schedule(0, Ev::IntervalTick);
        sim.q.schedule(0, Ev::SecondTick);
        if let Some(period) = sc.failure.period_s {
            sim.q.schedule(secs(period), Ev::FailureTick { k: 0 });
        }
        sim
    }

    fn seed_store(&mut self) {
        // Mirror the generator view into the store, as pre-population
        // completed before the measured window.
        let mut stack: Vec<(u32, INodeId)> = vec![(NamespaceView::ROOT, crate::store::ROOT_ID)];
        let mut children: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        for idx in self.view.node_indices() {
            if idx != NamespaceView::ROOT {
                children.entry(self.view.parent_of(idx)).or_default().push(idx);
            }
        }
        while let Some((vnode, store_id)) = stack.pop() {
            if let Some(kids) = children.get(&vnode) {
                for kid in kids {
                    let name = self.view.name_of(*kid).to_string();
                    let kind = self.view.kind(*kid);
                    let id = self.store.seed_insert(store_id, &name, kind);
                    if kind == EntryKind::Directory {
                        stack.push((*kid, id));
                    }
                }
            }
        }
        debug_assert!(self.store.check_tree_shape().is_ok());
    }

    fn build_clients(&mut self) {
        let schedule = self.sc.workload.schedule;
        let per_server = self
            .sc
            .client
            .max_clients_per_tcp_server
            .unwrap_or(schedule.clients_per_vm)
            .max(1);
        for vm_idx in 0..schedule.n_client_vms {
            let n_servers = schedule.clients_per_vm.div_ceil(per_server);
            let mut servers = Vec::new();
            for _ in 0..n_servers {
                servers.push(self.servers.len() as u32);
                self.servers.push(TcpServer::default());
            }
            let mut idle = VecDeque::new();
            for c in 0..schedule.clients_per_vm {
                let client_id = self.clients.len() as u32;
                idle.push_back(client_id);
                self.clients.push(Client {
                    vm: vm_idx,
                    server: servers[(c / per_server) as usize],
                    rng: actor_rng(self.sc.seed, stream::CLIENT, u64::from(client_id)),
                    window: LatencyWindow::new(self.sc.client.latency_window),
                    mode: ModeState::new(),
                    busy: false,
                    ops_left: self.fixed_ops.unwrap_or(0),
                    issued: 0,
                    completed: 0,
                });
            }
            self.vms.push(Vm {
                servers,
                ledger: VmLedger::default(),
                budget: 0,
                issued_this_second: 0,
                completed_this_second: 0,
                issue_gap: SECOND,
                idle_clients: idle,
            });
        }
        if self.fixed_ops.is_some() {
            // Closed-loop microbenchmark: everyone starts immediately,
            // staggered across the first millisecond.
            for c in 0..self.clients.len() as u32 {
                let stagger = u64::from(c % 1024);
                self.q.schedule(stagger, Ev::ClientKick { client: c });
            }
        }
    }

    /// Run to completion and produce the result bundle.
    pub fn run(mut self) -> RunResult {
        loop {
            if self.fixed_ops.is_some() && self.clients_done == self.clients.len() as u32 {
                break;
            }
            match self.q.pop_next(self.duration) {
                Some(ev) => self.dispatch(ev.payload),
                None => break,
            }
        }
        let end = if self.fixed_ops.is_some() {
            self.q.now()
        } else {
            self.q.advance_to(self.duration);
            self.duration
        };
        self.finalize(end)
    }

    fn dispatch(&mut self, ev: Ev) {
        match ev {
            Ev::IntervalTick => self.on_interval_tick(),
            Ev::SecondTick => self.on_second_tick(),
            Ev::VmIssue { vm } => self.on_vm_issue(vm),
            Ev::ClientKick { client } => {
                self.client_issue(client);
            }
            Ev::HttpAtInvoker { req, gen } => self.on_http_at_invoker(req, gen),
            Ev::RequestArrive { req, gen, inst } => self.on_request_arrive(req, gen, inst),
            Ev::ResponseArrive { req, gen, outcome } => self.on_response(req, gen, outcome),
            Ev::RequestTimeout { req, gen } => self.on_request_timeout(req, gen),
            Ev::StragglerCheck { req, gen } => self.on_straggler_check(req, gen),
            Ev::RetryFire { req, gen } => self.on_retry_fire(req, gen),
            Ev::ExecStep { exec, gen } => self.exec_step(exec, gen),
            Ev::WaitTimeout { exec, gen } => self.on_wait_timeout(exec, gen),
            Ev::InvDeliver { round, inst } => self.on_inv_deliver(round, inst),
            Ev::AckArrive { round, inst } => self.on_ack_arrive(round, inst),
            Ev::RoundTimeout { round, exec, gen } => self.on_round_timeout(round, exec, gen),
            Ev::ColdStartDone { inst } => self.on_cold_start_done(inst),
            Ev::ReclaimCheck { inst } => self.on_reclaim_check(inst),
            Ev::ConnEstablish { inst, server } => self.on_conn_establish(inst, server),
            Ev::FailureTick { k } => self.on_failure_tick(k),
        }
    }
}

// ---------------------------------------------------------------------
// Issuance
// ---------------------------------------------------------------------

impl Sim {
    fn on_interval_tick(&mut self) {
        let schedule = self.sc.workload.schedule;
        if self.fixed_ops.is_none() {
            let target = schedule.next_interval_target(&mut self.wl_rng, self.interval_index);
            self.current_vm_rate = workload::per_vm_rate(target, schedule.n_client_vms);
        }
        self.interval_index += 1;
        let next = secs(schedule.interval_s);
        if self.q.now() + next < self.duration {
            self.q.schedule(next, Ev::IntervalTick);
        }
    }

    fn on_second_tick(&mut self) {
        // Sample platform gauges.
        let live = self.live_instance_count();
        let bucket = self.metrics.bucket_at(self.q.now());
        bucket.active_instances = live;
        bucket.vcpu_in_use = self.vcpu_used;
        bucket.queued_invocations = self
            .deployments
            .iter()
            .map(|d| d.invoker_queue.len() as u64)
            .sum();
        self.instance_seconds_acc += f64::from(live);
        self.counters.peak_instances = self.counters.peak_instances.max(live);
        self.counters.peak_vcpu = self.counters.peak_vcpu.max(self.vcpu_used);

        if self.fixed_ops.is_none() {
            for vm_idx in 0..self.vms.len() as u32 {
                let rate = self.current_vm_rate;
                let vm = &mut self.vms[vm_idx as usize];
                let completed = vm.completed_this_second;
                vm.ledger.end_second(completed);
                vm.completed_this_second = 0;
                vm.issued_this_second = 0;
                vm.budget = vm.ledger.begin_second(rate);
                vm.issue_gap = if vm.budget == 0 {
                    SECOND
                } else {
                    (SECOND / vm.budget).max(1)
                };
                if vm.budget > 0 {
                    self.q.schedule(0, Ev::VmIssue { vm: vm_idx });
                }
            }
        }
        if self.q.now() + SECOND <= self.duration {
            self.q.schedule(SECOND, Ev::SecondTick);
        }
    }

    fn on_vm_issue(&mut self, vm_idx: u32) {
        let vm = &mut self.vms[vm_idx as usize];
        if vm.issued_this_second >= vm.budget {
            return;
        }
        let Some(client) = vm.idle_clients.pop_front() else {
            // No idle client; completions will pick the budget back up.
            return;
        };
        let gap = vm.issue_gap;
        if self.client_issue(client) {
            let vm = &mut self.vms[vm_idx as usize];
            vm.issued_this_second += 1;
            if vm.issued_this_second < vm.budget {
                self.q.schedule(gap, Ev::VmIssue { vm: vm_idx });
            }
        } else {
            self.vms[vm_idx as usize].idle_clients.push_back(client);
        }
    }

    /// Have `client` pick and submit its next operation. Returns false
    /// when nothing could be issued.
    fn client_issue(&mut self, client_id: u32) -> bool {
        let c = &mut self.clients[client_id as usize];
        if c.busy {
            return false;
        }
        if self.fixed_ops.is_some() && c.ops_left == 0 {
            return false;
        }
        let mix = self.sc.workload.mix;
        let Some(op) = pick_operation(&mut self.wl_rng, &mix, &mut self.view) else {
            return false;
        };
        let c = &mut self.clients[client_id as usize];
        c.busy = true;
        c.issued += 1;
        if self.fixed_ops.is_some() {
            c.ops_left -= 1;
        }
        let seq = c.issued as u32;
        let rid = request_id(client_id, seq);
        let slot = self.alloc_request(client_id, rid, op);
        self.counters.issued += 1;
        let t = self.q.now();
        self.metrics.bucket_at(t).issued += 1;
        self.submit_attempt(slot);
        true
    }

    fn alloc_request(&mut self, client: u32, rid: RequestId, op: GenOp) -> u32 {
        let issued_at = self.q.now();
        let kind = op.kind;
        let target_dep = self.responsible_deployment(&op.path);
        let mk = |gen: u32| Request {
            gen,
            alive: true,
            client,
            rid,
            op,
            attempt: 0,
            issued_at,
            dispatch_at: issued_at,
            via: Channel::Http,
            first_via: None,
            target_dep,
            cur_inst: None,
            timeout_h: None,
            straggler_h: None,
            tcp_attempts: 0,
            http_attempts: 0,
        };
        let _ = kind;
        match self.req_free.pop() {
            Some(idx) => {
                let gen = self.requests[idx as usize].gen.wrapping_add(1);
                self.requests[idx as usize] = mk(gen);
                idx
            }
            None => {
                self.requests.push(mk(0));
                (self.requests.len() - 1) as u32
            }
        }
    }

    fn responsible_deployment(&self, p: &str) -> u32 {
        deployment_for(p, self.sc.platform.n_deployments)
            .expect("generated paths are normalized")
            .0
    }
}

// ---------------------------------------------------------------------
// Client submit / retry / completion
// ---------------------------------------------------------------------

impl Sim {
    /// Run one submission attempt of the request's channel state machine.
    fn submit_attempt(&mut self, req_idx: u32) {
        let now = self.q.now();
        let (client_id, dep, rid) = {
            let r = &self.requests[req_idx as usize];
            (r.client, r.target_dep, r.rid)
        };
        let _ = rid;
        let c = &self.clients[client_id as usize];
        let own_server = c.server;
        let vm = c.vm;
        let mode = c.mode.mode();

        // Connection discovery: own server, then siblings (sharing).
        let own_conn = self.pick_conn(own_server, dep);
        let shared_conn = if own_conn.is_none() {
            self.find_shared_connection(vm, own_server, dep)
        } else {
            None
        };
        let any_conn = own_conn.is_some()
            || shared_conn.is_some()
            || self.any_conn_on_vm(vm);

        let cfg = self.sc.client;
        let c = &mut self.clients[client_id as usize];
        let channel = client::choose_channel(
            &cfg,
            mode,
            own_conn.is_some() || shared_conn.is_some(),
            any_conn,
            &mut c.rng,
        );

        let r = &mut self.requests[req_idx as usize];
        r.attempt += 1;
        r.dispatch_at = now;
        r.via = channel;
        if r.first_via.is_none() {
            r.first_via = Some(channel);
        }
        let gen = r.gen;

        match channel {
            Channel::Tcp => {
                // Pick the concrete instance: own conns, shared, or (in
                // anti-thrash) any connection on the VM.
                let inst = own_conn
                    .or(shared_conn)
                    .or_else(|| self.pick_any_conn_on_vm(vm));
                let Some(inst) = inst else {
                    // Lost the race for a connection; fall back to HTTP.
                    return self.dispatch_http(req_idx);
                };
                self.counters.tcp_dispatches += 1;
                if now >= self.warmup {
                    self.counters.tcp_dispatches_post_warmup += 1;
                }
                self.metrics.bucket_at(now).tcp += 1;
                let r = &mut self.requests[req_idx as usize];
                r.tcp_attempts += 1;
                r.cur_inst = Some(inst);
                let leg = {
                    let c = &mut self.clients[client_id as usize];
                    self.sc.latency.sample(LatencyKind::Tcp, &mut c.rng) / 2
                };
                self.q.schedule(leg, Ev::RequestArrive { req: req_idx, gen, inst });
                self.arm_timeout_and_straggler(req_idx, true);
            }
            Channel::Http => self.dispatch_http(req_idx),
        }
    }

    fn dispatch_http(&mut self, req_idx: u32) {
        let now = self.q.now();
        self.counters.http_dispatches += 1;
        if now >= self.warmup {
            self.counters.http_dispatches_post_warmup += 1;
        }
        self.metrics.bucket_at(now).http += 1;
        let (client_id, gen) = {
            let r = &mut self.requests[req_idx as usize];
            r.via = Channel::Http;
            r.http_attempts += 1;
            r.cur_inst = None;
            (r.client, r.gen)
        };
        let leg = {
            let c = &mut self.clients[client_id as usize];
            self.sc.latency.sample(LatencyKind::Http, &mut c.rng) / 2
        };
        self.q.schedule(leg, Ev::HttpAtInvoker { req: req_idx, gen });
        self.arm_timeout_and_straggler(req_idx, false);
    }

    fn arm_timeout_and_straggler(&mut self, req_idx: u32, tcp: bool) {
        let cfg = self.sc.client;
        let (gen, client_id) = {
            let r = &self.requests[req_idx as usize];
            (r.gen, r.client)
        };
        self.cancel_request_timers(req_idx);
        let timeout_h = self
            .q
            .schedule(cfg.request_timeout, Ev::RequestTimeout { req: req_idx, gen });
        let mut straggler_h = None;
        if tcp {
            if let Some(avg) = self.clients[client_id as usize].window.average() {
                let thresh = (cfg.straggler_factor * avg) as Micros;
                if thresh >= 1 && thresh < cfg.request_timeout {
                    straggler_h =
                        Some(self.q.schedule(thresh, Ev::StragglerCheck { req: req_idx, gen }));
                }
            }
        }
        let r = &mut self.requests[req_idx as usize];
        r.timeout_h = Some(timeout_h);
        r.straggler_h = straggler_h;
    }

    fn pick_conn(&mut self, server: u32, dep: u32) -> Option<u32> {
        let set = self.servers[server as usize].conns.get(&dep)?;
        if set.is_empty() {
            return None;
        }
        // Deterministic uniform pick via the platform-wide stream would
        // couple clients; use length-indexed choice from the set order.
        let n = set.len();
        let k = (self.coord_rng.gen::<u64>() as usize) % n;
        set.iter().nth(k).copied()
    }

    /// Connection sharing: find a live connection to `dep` on a sibling
    /// TCP server of the same VM.
    fn find_shared_connection(&mut self, vm: u32, own_server: u32, dep: u32) -> Option<u32> {
        let servers = self.vms[vm as usize].servers.clone();
        for s in servers {
            if s == own_server {
                continue;
            }
            if let Some(found) = self.pick_conn(s, dep) {
                return Some(found);
            }
        }
        None
    }

    fn any_conn_on_vm(&self, vm: u32) -> bool {
        self.vms[vm as usize].servers.iter().any(|s| {
            self.servers[*s as usize]
                .conns
                .values()
                .any(|set| !set.is_empty())
        })
    }

    fn pick_any_conn_on_vm(&mut self, vm: u32) -> Option<u32> {
        let servers = self.vms[vm as usize].servers.clone();
        for s in servers {
            let server = &self.servers[s as usize];
            for set in server.conns.values() {
                if let Some(first) = set.iter().next() {
                    return Some(*first);
                }
            }
        }
        None
    }
}

// ---------------------------------------------------------------------
// Platform: invoker, instances, cold starts, reclaim, failures
// ---------------------------------------------------------------------

impl Sim {
    fn live_instance_count(&self) -> u32 {
        self.instances
            .iter()
            .filter(|i| i.state != InstanceState::Terminated)
            .count() as u32
    }

    /// HTTP request reaches the platform invoker for its deployment.
    fn on_http_at_invoker(&mut self, req: u32, gen: u32) {
        if !self.request_live(req, gen) {
            return;
        }
        self.counters.http_invocations += 1;
        let dep = self.requests[req as usize].target_dep;
        self.invoker_route(dep, req, gen);
    }

    fn invoker_route(&mut self, dep: u32, req: u32, gen: u32) {
        // Warm instance with a free slot?
        let limit = self.sc.platform.concurrency_level;
        let ids: Vec<u32> = self.deployments[dep as usize].instances.iter().copied().collect();
        for id in &ids {
            let inst = &self.instances[*id as usize];
            if inst.state == InstanceState::Warm && inst.slots_used < limit {
                self.begin_service(*id, req, gen);
                return;
            }
        }
        // Cold-starting instance with spare reserved capacity?
        for id in &ids {
            let inst = &mut self.instances[*id as usize];
            if inst.state == InstanceState::ColdStarting
                && inst.cold_reserved + inst.slots_used < limit
            {
                inst.cold_reserved += 1;
                inst.pending_cold.push((req, gen));
                return;
            }
        }
        // Scale out if the budget and the scaling policy allow it.
        if let Some(id) = self.try_spawn(dep) {
            let inst = &mut self.instances[id as usize];
            inst.cold_reserved += 1;
            inst.pending_cold.push((req, gen));
            return;
        }
        // Backpressure: FIFO queue per deployment.
        self.deployments[dep as usize].invoker_queue.push_back((req, gen));
    }

    fn can_spawn(&self, dep: u32) -> bool {
        let p = &self.sc.platform;
        if let Some(cap) = p.autoscaling.max_per_deployment() {
            let live = self.deployments[dep as usize]
                .instances
                .iter()
                .filter(|i| self.instances[**i as usize].state != InstanceState::Terminated)
                .count() as u32;
            if live >= cap {
                return false;
            }
        }
        self.vcpu_used + p.per_instance_vcpu <= p.vcpu_budget
    }

    fn try_spawn(&mut self, dep: u32) -> Option<u32> {
        if !self.can_spawn(dep) {
            // Optionally evict a warm-idle instance to admit the cold
            // start (reproduces the thrashing pathology; off by default).
            if self.sc.platform.evict_to_admit {
                if let Some(victim) = self.pick_idle_victim() {
                    self.terminate_instance(victim, false);
                    self.counters.evictions_for_admission += 1;
                } else {
                    self.counters.cold_start_denials += 1;
                    return None;
                }
            } else {
                self.counters.cold_start_denials += 1;
                return None;
            }
        }
        if !self.can_spawn(dep) {
            self.counters.cold_start_denials += 1;
            return None;
        }
        Some(self.spawn_instance(dep))
    }

    fn pick_idle_victim(&self) -> Option<u32> {
        self.instances
            .iter()
            .filter(|i| {
                i.state == InstanceState::Warm
                    && i.slots_used == 0
                    && i.local_queue.is_empty()
                    && i.pending_cold.is_empty()
            })
            .min_by_key(|i| (i.last_active, i.id))
            .map(|i| i.id)
    }

    fn spawn_instance(&mut self, dep: u32) -> u32 {
        let p = &self.sc.platform;
        self.next_instance += 1;
        let id = self.next_instance;
        let idx = id as usize;
        if self.instances.len() <= idx {
            // Instance ids are 1-based and never reused.
            while self.instances.len() < idx {
                self.instances.push(Self::dead_slot(self.instances.len() as u32));
            }
        }
        let now = self.q.now();
        let inst = Instance {
            id,
            deployment: dep,
            state: InstanceState::ColdStarting,
            slots_used: 0,
            cold_reserved: 0,
            local_queue: VecDeque::new(),
            pending_cold: Vec::new(),
            cache: CacheTrie::new(self.sc.cache_capacity),
            rng: actor_rng(self.sc.seed, stream::INSTANCE, u64::from(id)),
            started_at: now,
            terminated_at: None,
            last_active: now,
            busy: BusyTracker::default(),
            tcp_peers: BTreeSet::new(),
            result_cache: HashMap::new(),
            result_order: VecDeque::new(),
        };
        self.instances.push(inst);
        debug_assert_eq!(self.instances.len() - 1, idx);
        self.vcpu_used += p.per_instance_vcpu;
        debug_assert!(self.vcpu_used <= p.vcpu_budget + 1e-9);
        self.deployments[dep as usize].instances.insert(id);
        self.counters.cold_starts += 1;
        let delay = self
            .sc
            .latency
            .sample(LatencyKind::ColdStart, &mut self.plat_rng);
        self.q.schedule(delay, Ev::ColdStartDone { inst: id });
        id
    }

    fn dead_slot(id: u32) -> Instance {
        Instance {
            id,
            deployment: 0,
            state: InstanceState::Terminated,
            slots_used: 0,
            cold_reserved: 0,
            local_queue: VecDeque::new(),
            pending_cold: Vec::new(),
            cache: CacheTrie::new(Some(0)),
            rng: actor_rng(0, stream::INSTANCE, u64::from(id)),
            started_at: 0,
            terminated_at: Some(0),
            last_active: 0,
            busy: BusyTracker::default(),
            tcp_peers: BTreeSet::new(),
            result_cache: HashMap::new(),
            result_order: VecDeque::new(),
        }
    }

    fn on_cold_start_done(&mut self, inst_id: u32) {
        let now = self.q.now();
        let inst = &mut self.instances[inst_id as usize];
        if inst.state != InstanceState::ColdStarting {
            return;
        }
        inst.state = InstanceState::Warm;
        inst.last_active = now;
        let dep = inst.deployment;
        let pending = std::mem::take(&mut inst.pending_cold);
        inst.cold_reserved = 0;
        // Exactly one liveness join per cold start.
        self.coord.join(DeploymentId(dep), inst_id);
        if self.sc.record_protocol_trace {
            self.proto.push(ProtoEvent::InstanceJoin {
                t: now,
                instance: inst_id,
                deployment: dep,
            });
        }
        for (req, gen) in pending {
            if self.request_live(req, gen) {
                self.begin_service(inst_id, req, gen);
            }
        }
        self.drain_invoker(dep);
        self.maybe_schedule_reclaim(inst_id);
    }

    fn drain_invoker(&mut self, dep: u32) {
        let limit = self.sc.platform.concurrency_level;
        loop {
            let Some((req, gen)) = self.deployments[dep as usize].invoker_queue.front().copied()
            else {
                return;
            };
            if !self.request_live(req, gen) {
                self.deployments[dep as usize].invoker_queue.pop_front();
                continue;
            }
            let slot = self.deployments[dep as usize]
                .instances
                .iter()
                .copied()
                .find(|id| {
                    let i = &self.instances[*id as usize];
                    i.state == InstanceState::Warm && i.slots_used < limit
                });
            match slot {
                Some(id) => {
                    self.deployments[dep as usize].invoker_queue.pop_front();
                    self.begin_service(id, req, gen);
                }
                None => return,
            }
        }
    }

    /// TCP request reaches its instance.
    fn on_request_arrive(&mut self, req: u32, gen: u32, inst_id: u32) {
        if !self.request_live(req, gen) {
            return;
        }
        let limit = self.sc.platform.concurrency_level;
        let inst = &mut self.instances[inst_id as usize];
        if inst.state != InstanceState::Warm {
            // Terminated (or still cold): the request is lost; the
            // client's timeout will discover it.
            return;
        }
        if inst.slots_used < limit {
            self.begin_service(inst_id, req, gen);
        } else {
            inst.local_queue.push_back((req, gen));
        }
    }

    fn on_reclaim_check(&mut self, inst_id: u32) {
        let timeout = self.sc.platform.idle_timeout();
        let now = self.q.now();
        let inst = &self.instances[inst_id as usize];
        if inst.state != InstanceState::Warm
            || inst.slots_used > 0
            || !inst.local_queue.is_empty()
        {
            return;
        }
        if now.saturating_sub(inst.last_active) >= timeout {
            self.counters.reclaims += 1;
            self.terminate_instance(inst_id, false);
        } else {
            let again = inst.last_active + timeout - now;
            self.q.schedule(again, Ev::ReclaimCheck { inst: inst_id });
        }
    }

    fn maybe_schedule_reclaim(&mut self, inst_id: u32) {
        let inst = &self.instances[inst_id as usize];
        if inst.state == InstanceState::Warm && inst.slots_used == 0 && inst.local_queue.is_empty()
        {
            let timeout = self.sc.platform.idle_timeout();
            self.q.schedule(timeout, Ev::ReclaimCheck { inst: inst_id });
        }
    }

    /// Terminate an instance. `crashed` distinguishes fault injection
    /// (in-flight work lost, clients time out) from graceful reclaim
    /// (peers notified immediately).
    fn terminate_instance(&mut self, inst_id: u32, crashed: bool) {
        let now = self.q.now();
        let model = self.sc.cost;
        let inst = &mut self.instances[inst_id as usize];
        if inst.state == InstanceState::Terminated {
            return;
        }
        let was_cold = inst.state == InstanceState::ColdStarting;
        inst.state = InstanceState::Terminated;
        inst.terminated_at = Some(now);
        inst.busy.finalize(now, &model);
        let dep = inst.deployment;
        let peers = std::mem::take(&mut inst.tcp_peers);
        let orphans: Vec<(u32, u32)> = inst
            .local_queue
            .drain(..)
            .chain(inst.pending_cold.drain(..))
            .collect();
        self.deployments[dep as usize].instances.remove(&inst_id);
        self.vcpu_used -= self.sc.platform.per_instance_vcpu;

        // Exactly one liveness leave per termination (cold starts that
        // never joined have nothing to leave).
        if !was_cold {
            let completed = self.coord.leave(inst_id);
            for exec_token in completed {
                self.on_round_complete(exec_token);
            }
        }
        if self.sc.record_protocol_trace {
            self.proto.push(ProtoEvent::InstanceLeave {
                t: now,
                instance: inst_id,
                deployment: dep,
                crashed,
            });
        }
        // Rounds this instance was leading die with it.
        for round in self.coord.rounds_led_by(inst_id) {
            self.coord.cancel_round(round);
        }
        // Open transactions and subtree operations abort; waiters wake.
        let woken = self.store.abort_owned_by(u64::from(inst_id));
        self.wake_waiters(woken);

        // Executions on this instance die. Batch executions notify the
        // subtree leader, which fails the whole operation.
        let dead: Vec<u32> = self
            .execs
            .iter()
            .enumerate()
            .filter(|(_, e)| e.alive && e.inst == inst_id)
            .map(|(i, _)| i as u32)
            .collect();
        for e in dead {
            let parent = self.execs[e as usize].batch.as_ref().map(|b| b.parent);
            self.drop_exec(e);
            if let Some((pe, pg)) = parent {
                self.batch_failed(pe, pg);
            }
        }

        if crashed {
            // Peers discover the dead connection via timeouts.
            let _ = orphans;
        } else {
            for server in peers {
                if let Some(set) = self.servers[server as usize].conns.get_mut(&dep) {
                    set.remove(&inst_id);
                }
            }
            // Graceful reclaim happens only when idle, so no orphans.
        }
    }

    fn on_failure_tick(&mut self, k: u32) {
        let n = self.sc.platform.n_deployments;
        // Round-robin over deployments, skipping those with nothing live.
        for probe in 0..n {
            let dep = (k + probe) % n;
            let candidates: Vec<u32> = self.deployments[dep as usize]
                .instances
                .iter()
                .copied()
                .filter(|id| self.instances[*id as usize].state == InstanceState::Warm)
                .collect();
            if candidates.is_empty() {
                continue;
            }
            let pick = candidates[self.plat_rng.gen_range(0..candidates.len())];
            self.counters.kills += 1;
            self.terminate_instance(pick, true);
            break;
        }
        if let Some(period) = self.sc.failure.period_s {
            let next = secs(period);
            if self.q.now() + next <= self.duration {
                self.q.schedule(next, Ev::FailureTick { k: k + 1 });
            }
        }
    }

    fn on_conn_establish(&mut self, inst_id: u32, server: u32) {
        let inst = &mut self.instances[inst_id as usize];
        if inst.state == InstanceState::Terminated {
            return;
        }
        inst.tcp_peers.insert(server);
        let dep = inst.deployment;
        self.servers[server as usize]
            .conns
            .entry(dep)
            .or_default()
            .insert(inst_id);
    }
}

// ---------------------------------------------------------------------
// Instance service and operation execution
// ---------------------------------------------------------------------

fn pack_token(idx: u32, gen: u32) -> u64 {
    (u64::from(idx) << 32) | u64::from(gen)
}

fn unpack_token(token: u64) -> (u32, u32) {
    ((token >> 32) as u32, token as u32)
}

impl Sim {
    fn request_live(&self, req: u32, gen: u32) -> bool {
        let r = &self.requests[req as usize];
        r.alive && r.gen == gen
    }

    fn exec_live(&self, exec: u32, gen: u32) -> bool {
        let e = &self.execs[exec as usize];
        e.alive && e.gen == gen
    }

    fn begin_service(&mut self, inst_id: u32, req: u32, gen: u32) {
        debug_assert!(self.request_live(req, gen));
        let now = self.q.now();
        let (rid, via, client, op, path, dst, target_dep) = {
            let r = &self.requests[req as usize];
            (
                r.rid,
                r.via,
                r.client,
                r.op.kind,
                r.op.path.clone(),
                r.op.dst_path.clone(),
                r.target_dep,
            )
        };
        let client_server = self.clients[client as usize].server;
        let inst = &mut self.instances[inst_id as usize];
        debug_assert_eq!(inst.state, InstanceState::Warm);
        inst.slots_used += 1;
        inst.busy.request_started(now);
        inst.last_active = now;
        let wrong_deployment = inst.deployment != target_dep;
        let proc = self.sc.latency.sample(LatencyKind::Proc, &mut inst.rng);
        let exec = self.alloc_exec(Exec {
            gen: 0,
            alive: true,
            inst: inst_id,
            req: Some((req, gen)),
            rid,
            client_server,
            via,
            wrong_deployment,
            op,
            path,
            dst,
            phase: Phase::Proc,
            txn: None,
            round: None,
            round_done: false,
            round_to_h: None,
            wait_to_h: None,
            holds_slot: true,
            wctx: None,
            sub: None,
            batch: None,
        });
        let egen = self.execs[exec as usize].gen;
        self.q.schedule(proc, Ev::ExecStep { exec, gen: egen });
    }

    fn alloc_exec(&mut self, mut e: Exec) -> u32 {
        match self.exec_free.pop() {
            Some(idx) => {
                e.gen = self.execs[idx as usize].gen.wrapping_add(1);
                self.execs[idx as usize] = e;
                idx
            }
            None => {
                self.execs.push(e);
                (self.execs.len() - 1) as u32
            }
        }
    }

    fn free_exec(&mut self, idx: u32) {
        let e = &mut self.execs[idx as usize];
        e.alive = false;
        if let Some(txn) = e.txn.take() {
            self.txn_exec.remove(&txn);
        }
        if let Some(h) = e.wait_to_h.take() {
            self.q.cancel(h);
        }
        if let Some(h) = e.round_to_h.take() {
            self.q.cancel(h);
        }
        self.exec_free.push(idx);
    }

    /// Crash-path removal: no response, no instance bookkeeping.
    fn drop_exec(&mut self, idx: u32) {
        if let Some(round) = self.execs[idx as usize].round.take() {
            self.round_payloads.remove(&round);
        }
        self.free_exec(idx);
    }

    fn store_rt(&mut self, exec: u32) {
        let inst = self.execs[exec as usize].inst;
        let d = self
            .sc
            .latency
            .sample(LatencyKind::Store, &mut self.instances[inst as usize].rng);
        let gen = self.execs[exec as usize].gen;
        self.q.schedule(d, Ev::ExecStep { exec, gen });
    }

    /// Register an observer wake-up for a blocked store read and arm
    /// the wait timeout. Transaction lock waits are queued inside the
    /// store by `lock_exclusive` itself; they only need the timeout.
    fn block_exec_observer(&mut self, exec: u32, blocked: Blocked) {
        let gen = self.execs[exec as usize].gen;
        self.store
            .wait_on(blocked, Waiter::Observer(pack_token(exec, gen)));
        self.arm_wait_timeout(exec);
    }

    fn arm_wait_timeout(&mut self, exec: u32) {
        if self.execs[exec as usize].wait_to_h.is_none() {
            let gen = self.execs[exec as usize].gen;
            let h = self.q.schedule(
                secs(self.sc.store.lock_wait_timeout_s),
                Ev::WaitTimeout { exec, gen },
            );
            self.execs[exec as usize].wait_to_h = Some(h);
        }
    }

    fn clear_wait(&mut self, exec: u32) {
        if let Some(h) = self.execs[exec as usize].wait_to_h.take() {
            self.q.cancel(h);
        }
    }

    fn wake_waiters(&mut self, woken: Vec<Waiter>) {
        for w in woken {
            match w {
                Waiter::Observer(token) => {
                    let (exec, gen) = unpack_token(token);
                    if self.exec_live(exec, gen) {
                        self.q.schedule(0, Ev::ExecStep { exec, gen });
                    }
                }
                Waiter::Txn(txn) => {
                    if let Some((exec, gen)) = self.txn_exec.get(&txn).copied() {
                        if self.exec_live(exec, gen) {
                            self.q.schedule(0, Ev::ExecStep { exec, gen });
                        }
                    }
                }
            }
        }
    }

    fn begin_txn(&mut self, exec: u32) -> TxnId {
        let inst = self.execs[exec as usize].inst;
        let txn = self.store.begin(u64::from(inst));
        let gen = self.execs[exec as usize].gen;
        self.execs[exec as usize].txn = Some(txn);
        self.txn_exec.insert(txn, (exec, gen));
        txn
    }

    fn abort_txn(&mut self, exec: u32) {
        if let Some(txn) = self.execs[exec as usize].txn.take() {
            self.txn_exec.remove(&txn);
            if let Ok(woken) = self.store.abort(txn) {
                self.counters.store_aborts += 1;
                self.wake_waiters(woken);
            }
        }
    }

    fn on_wait_timeout(&mut self, exec: u32, gen: u32) {
        if !self.exec_live(exec, gen) {
            return;
        }
        self.execs[exec as usize].wait_to_h = None;
        self.counters.lock_wait_timeouts += 1;
        if self.execs[exec as usize].batch.is_some() {
            self.batch_exec_failed(exec);
        } else {
            self.fail_exec(exec, RespOutcome::Transport);
        }
    }

    /// Abandon an execution server-side (timeout paths), cleaning up any
    /// transaction, round, or subtree state it holds.
    fn fail_exec(&mut self, exec: u32, outcome: RespOutcome) {
        if let Some(round) = self.execs[exec as usize].round.take() {
            self.coord.cancel_round(round);
            self.round_payloads.remove(&round);
        }
        self.abort_txn(exec);
        if let Some(sub) = self.execs[exec as usize].sub.take() {
            let woken = self.store.clear_subtree_lock(sub.op_id);
            if self.sc.record_protocol_trace {
                self.proto.push(ProtoEvent::SubtreeClear {
                    t: self.q.now(),
                    op_id: sub.op_id,
                    rid: self.execs[exec as usize].rid,
                    root: self.execs[exec as usize].path.clone(),
                    completed: false,
                });
            }
            self.wake_waiters(woken);
        }
        self.respond(exec, outcome);
    }

    /// Finish service: bookkeeping on the instance, response leg back to
    /// the client, slot turnover.
    fn respond(&mut self, exec: u32, outcome: RespOutcome) {
        let now = self.q.now();
        let model = self.sc.cost;
        let (inst_id, req, via, rid, client_server, holds_slot) = {
            let e = &self.execs[exec as usize];
            (e.inst, e.req, e.via, e.rid, e.client_server, e.holds_slot)
        };
        let cacheable = matches!(
            outcome,
            RespOutcome::Ok { .. } | RespOutcome::OkSubtree { .. } | RespOutcome::Domain(_)
        );
        let dep = self.instances[inst_id as usize].deployment;
        {
            let inst = &mut self.instances[inst_id as usize];
            let mut closed = None;
            if holds_slot {
                inst.slots_used -= 1;
                closed = inst.busy.request_finished(now, &model);
                inst.last_active = now;
            }
            if let Some(interval) = closed {
                self.per_second_busy(interval);
            }
            let inst = &mut self.instances[inst_id as usize];
            if cacheable {
                let ttl = self.sc.client.result_cache_ttl;
                inst.result_cache.insert(rid, (outcome.clone(), now + ttl));
                inst.result_order.push_back((now + ttl, rid));
                while inst.result_order.len() > self.result_cache_cap {
                    if let Some((_, old)) = inst.result_order.pop_front() {
                        inst.result_cache.remove(&old);
                    }
                }
                while let Some((exp, old)) = inst.result_order.front().copied() {
                    if exp <= now {
                        inst.result_order.pop_front();
                        inst.result_cache.remove(&old);
                    } else {
                        break;
                    }
                }
            }
        }
        if let Some((req_idx, rgen)) = req {
            if self.request_live(req_idx, rgen) {
                let leg_kind = match via {
                    Channel::Tcp => LatencyKind::Tcp,
                    Channel::Http => LatencyKind::Http,
                };
                let leg = self
                    .sc
                    .latency
                    .sample(leg_kind, &mut self.instances[inst_id as usize].rng)
                    / 2;
                self.q.schedule(
                    leg,
                    Ev::ResponseArrive {
                        req: req_idx,
                        gen: rgen,
                        outcome,
                    },
                );
                // Proactive connect-back to the caller's own TCP server
                // after HTTP or borrowed-connection service.
                if !self.instances[inst_id as usize]
                    .tcp_peers
                    .contains(&client_server)
                {
                    let d = self
                        .sc
                        .latency
                        .sample(LatencyKind::Tcp, &mut self.instances[inst_id as usize].rng)
                        / 2;
                    self.q.schedule(
                        d,
                        Ev::ConnEstablish {
                            inst: inst_id,
                            server: client_server,
                        },
                    );
                }
            }
        }
        self.free_exec(exec);
        // Hand the slot to queued work: local TCP queue first, then the
        // deployment's invoker queue.
        if holds_slot && self.instances[inst_id as usize].state == InstanceState::Warm {
            loop {
                let next = self.instances[inst_id as usize].local_queue.pop_front();
                match next {
                    Some((r, g)) => {
                        if self.request_live(r, g) {
                            self.begin_service(inst_id, r, g);
                            break;
                        }
                    }
                    None => {
                        self.drain_invoker(dep);
                        self.maybe_schedule_reclaim(inst_id);
                        break;
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------
// The per-operation state machine
// ---------------------------------------------------------------------

impl Sim {
    fn exec_step(&mut self, exec: u32, gen: u32) {
        if !self.exec_live(exec, gen) {
            return;
        }
        match self.execs[exec as usize].phase {
            Phase::Proc => self.step_proc(exec),
            Phase::ReadStore => self.step_read_store(exec),
            Phase::WriteValidate => self.step_write_validate(exec),
            Phase::WriteLocking => self.step_write_locking(exec),
            Phase::WriteLockRtt => self.step_write_lock_rtt(exec),
            Phase::WriteRound => {} // advanced by round completion
            Phase::WriteCommitRtt => self.step_write_commit(exec),
            Phase::SubLockRtt => self.step_sub_lock_rtt(exec),
            Phase::SubQuiesce => self.step_sub_quiesce(exec),
            Phase::SubFinalLocking => self.step_sub_shield_lock(exec),
            Phase::SubRound => self.step_sub_round_open(exec),
            Phase::SubBatchWait => {} // advanced by batch completions
            Phase::SubFinalRtt => self.step_sub_final(exec),
            Phase::BatchLocking => self.step_batch_locking(exec),
            Phase::BatchLockRtt => self.step_batch_lock_rtt(exec),
            Phase::BatchCommitRtt => self.step_batch_commit(exec),
        }
    }

    /// Initial compute slice done: consult the result cache, then branch
    /// by operation class.
    fn step_proc(&mut self, exec: u32) {
        let now = self.q.now();
        let (inst_id, rid, op) = {
            let e = &self.execs[exec as usize];
            (e.inst, e.rid, e.op)
        };
        // Request dedup fast path: return the cached result of a
        // previous execution of this same request id.
        let cached = {
            let inst = &self.instances[inst_id as usize];
            inst.result_cache
                .get(&rid)
                .filter(|(_, exp)| *exp > now)
                .map(|(o, _)| o.clone())
        };
        if let Some(outcome) = cached {
            self.respond(exec, outcome);
            return;
        }
        match op {
            OpKind::Read | OpKind::Stat => {
                let wrong = self.execs[exec as usize].wrong_deployment;
                if !wrong {
                    let path = self.execs[exec as usize].path.clone();
                    let mut records: Vec<CachedRecord> = Vec::new();
                    let hit = {
                        let inst = &mut self.instances[inst_id as usize];
                        inst.cache.lookup_into(&path, &mut records)
                    };
                    if let Lookup::Hit = hit {
                        self.counters.cache_hits += 1;
                        if now >= self.warmup {
                            self.counters.cache_hits_post_warmup += 1;
                        }
                        self.metrics.bucket_at(now).cache_hits += 1;
                        let leaf = records.last().expect("hit has records");
                        let value = RegValue::Present {
                            writer: leaf.last_writer,
                        };
                        self.respond(exec, RespOutcome::Ok { value });
                        return;
                    }
                    self.counters.cache_misses += 1;
                    if now >= self.warmup {
                        self.counters.cache_misses_post_warmup += 1;
                    }
                    self.metrics.bucket_at(now).cache_misses += 1;
                }
                self.execs[exec as usize].phase = Phase::ReadStore;
                self.store_rt(exec);
            }
            OpKind::Ls => {
                // Listings are always answered from the store (one batch
                // query for the directory row and its children).
                self.execs[exec as usize].phase = Phase::ReadStore;
                self.store_rt(exec);
            }
            OpKind::Create | OpKind::Mkdir | OpKind::Delete | OpKind::Mv | OpKind::SetAttr => {
                self.execs[exec as usize].phase = Phase::WriteValidate;
                self.store_rt(exec);
            }
        }
    }

    fn step_read_store(&mut self, exec: u32) {
        let path = self.execs[exec as usize].path.clone();
        let res = self
            .store
            .resolve_path_batch(&path, None, None)
            .expect("generated paths are normalized");
        match res {
            Err(blocked) => {
                self.block_exec_observer(exec, blocked);
            }
            Ok(resolution) => {
                self.clear_wait(exec);
                if !resolution.complete() {
                    self.respond(exec, RespOutcome::Domain(DomainErr::NotFound));
                    return;
                }
                let leaf = resolution.leaf().expect("complete resolution");
                let value = RegValue::Present {
                    writer: leaf.last_writer,
                };
                let wrong = self.execs[exec as usize].wrong_deployment;
                if !wrong {
                    let records: Vec<CachedRecord> = resolution
                        .records
                        .iter()
                        .map(|r| CachedRecord {
                            id: r.id,
                            kind: r.kind,
                            perms: r.perms,
                            mtime: r.mtime,
                            last_writer: r.last_writer,
                        })
                        .collect();
                    let inst_id = self.execs[exec as usize].inst;
                    self.instances[inst_id as usize]
                        .cache
                        .insert_path(&path, &records);
                }
                self.respond(exec, RespOutcome::Ok { value });
            }
        }
    }

    /// Validation round trip done: read the rows, check domain errors,
    /// and either start locking (single-INode) or enter the subtree
    /// protocol.
    fn step_write_validate(&mut self, exec: u32) {
        let (op, path, dst, rid, inst_id) = {
            let e = &self.execs[exec as usize];
            (e.op, e.path.clone(), e.dst.clone(), e.rid, e.inst)
        };
        // Authoritative dedup: this mutation may already have committed.
        if let Some(applied) = self.store.applied_outcome(rid) {
            self.clear_wait(exec);
            self.respond(exec, applied_response(rid, &applied));
            return;
        }
        let parent_path: Arc<str> = path::parent_dir(&path).into();
        let target = match self.store.resolve_path_batch(&path, None, None) {
            Ok(Ok(r)) => r,
            Ok(Err(blocked)) => {
                self.block_exec_observer(exec, blocked);
                return;
            }
            Err(_) => {
                self.clear_wait(exec);
                self.respond(exec, RespOutcome::Domain(DomainErr::NotFound));
                return;
            }
        };
        self.clear_wait(exec);
        // records[0] is the root; the parent of a depth-d path sits at
        // index d-1 when the parent chain resolved.
        let d = path::depth(&path);
        if target.records.len() < d {
            self.respond(exec, RespOutcome::Domain(DomainErr::NotFound));
            return;
        }
        let parent_rec = target.records[d - 1].clone();
        match op {
            OpKind::Create | OpKind::Mkdir => {
                if target.complete() {
                    self.respond(exec, RespOutcome::Domain(DomainErr::AlreadyExists));
                    return;
                }
                if target.missing_at != Some(path::depth(&path) - 1) {
                    self.respond(exec, RespOutcome::Domain(DomainErr::NotFound));
                    return;
                }
                if parent_rec.kind != EntryKind::Directory {
                    self.respond(exec, RespOutcome::Domain(DomainErr::NotADirectory));
                    return;
                }
                self.execs[exec as usize].wctx = Some(Box::new(WriteCtx {
                    parent_id: parent_rec.id,
                    parent_path,
                    target_id: None,
                    dst_parent_id: None,
                    dst_parent_path: None,
                }));
                self.start_locking(exec);
            }
            OpKind::SetAttr => {
                let Some(leaf) = target.leaf() else {
                    self.respond(exec, RespOutcome::Domain(DomainErr::NotFound));
                    return;
                };
                self.execs[exec as usize].wctx = Some(Box::new(WriteCtx {
                    parent_id: parent_rec.id,
                    parent_path,
                    target_id: Some(leaf.id),
                    dst_parent_id: None,
                    dst_parent_path: None,
                }));
                self.start_locking(exec);
            }
            OpKind::Delete => {
                let Some(leaf) = target.leaf() else {
                    self.respond(exec, RespOutcome::Domain(DomainErr::NotFound));
                    return;
                };
                let leaf_id = leaf.id;
                let is_dir = leaf.kind == EntryKind::Directory;
                let has_children = is_dir && self.store.children_of(leaf_id).next().is_some();
                if has_children {
                    self.enter_subtree(exec, SubtreeOpKind::Delete, leaf_id, parent_rec.id, parent_path, None, None);
                } else {
                    // Files and empty directories take the single-INode path.
                    self.execs[exec as usize].wctx = Some(Box::new(WriteCtx {
                        parent_id: parent_rec.id,
                        parent_path,
                        target_id: Some(leaf_id),
                        dst_parent_id: None,
                        dst_parent_path: None,
                    }));
                    self.start_locking(exec);
                }
            }
            OpKind::Mv => {
                let Some(leaf) = target.leaf() else {
                    self.respond(exec, RespOutcome::Domain(DomainErr::NotFound));
                    return;
                };
                let leaf_id = leaf.id;
                let is_dir = leaf.kind == EntryKind::Directory;
                let dst = dst.expect("mv carries a destination");
                let dst_parent_path: Arc<str> = path::parent_dir(&dst).into();
                let dst_parent = match self.store.resolve_path_batch(&dst_parent_path, None, None) {
                    Ok(Ok(r)) if r.complete() => r.leaf().expect("complete").clone(),
                    Ok(Ok(_)) => {
                        self.respond(exec, RespOutcome::Domain(DomainErr::NotFound));
                        return;
                    }
                    Ok(Err(blocked)) => {
                        self.block_exec_observer(exec, blocked);
                        return;
                    }
                    Err(_) => {
                        self.respond(exec, RespOutcome::Domain(DomainErr::NotFound));
                        return;
                    }
                };
                if dst_parent.kind != EntryKind::Directory {
                    self.respond(exec, RespOutcome::Domain(DomainErr::NotADirectory));
                    return;
                }
                if self
                    .store
                    .child_of(dst_parent.id, path::leaf_name(&dst))
                    .is_some()
                {
                    self.respond(exec, RespOutcome::Domain(DomainErr::AlreadyExists));
                    return;
                }
                let has_children = is_dir && self.store.children_of(leaf_id).next().is_some();
                if has_children {
                    self.enter_subtree(
                        exec,
                        SubtreeOpKind::Mv,
                        leaf_id,
                        parent_rec.id,
                        parent_path,
                        Some(dst_parent.id),
                        Some(dst_parent_path),
                    );
                } else {
                    self.execs[exec as usize].wctx = Some(Box::new(WriteCtx {
                        parent_id: parent_rec.id,
                        parent_path,
                        target_id: Some(leaf_id),
                        dst_parent_id: Some(dst_parent.id),
                        dst_parent_path: Some(dst_parent_path),
                    }));
                    self.start_locking(exec);
                }
            }
            _ => unreachable!("reads do not validate"),
        }
        let _ = inst_id;
    }

    fn write_lock_set(&self, exec: u32) -> Vec<INodeId> {
        let e = &self.execs[exec as usize];
        let w = e.wctx.as_ref().expect("write context");
        let mut ids = vec![w.parent_id];
        if let Some(t) = w.target_id {
            ids.push(t);
        }
        if let Some(d) = w.dst_parent_id {
            ids.push(d);
        }
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    fn start_locking(&mut self, exec: u32) {
        let txn = self.begin_txn(exec);
        let ids = self.write_lock_set(exec);
        match self.store.lock_exclusive(txn, &ids) {
            Ok(Ok(())) => {
                self.clear_wait(exec);
                self.execs[exec as usize].phase = Phase::WriteLockRtt;
                self.store_rt(exec);
            }
            Ok(Err(_)) => {
                self.execs[exec as usize].phase = Phase::WriteLocking;
                self.arm_wait_timeout(exec);
            }
            Err(_) => self.fail_exec(exec, RespOutcome::Transport),
        }
    }

    fn step_write_locking(&mut self, exec: u32) {
        let txn = self.execs[exec as usize].txn.expect("locking txn");
        let ids = self.write_lock_set(exec);
        match self.store.lock_exclusive(txn, &ids) {
            Ok(Ok(())) => {
                self.clear_wait(exec);
                self.execs[exec as usize].phase = Phase::WriteLockRtt;
                self.store_rt(exec);
            }
            Ok(Err(_)) => { /* still queued; the wait timeout stands */ }
            Err(_) => self.fail_exec(exec, RespOutcome::Transport),
        }
    }

    /// Locks held and the locking round trip paid: re-validate against
    /// the now-stable rows, then open the coherence round.
    fn step_write_lock_rtt(&mut self, exec: u32) {
        let (op, path, rid) = {
            let e = &self.execs[exec as usize];
            (e.op, e.path.clone(), e.rid)
        };
        if let Some(applied) = self.store.applied_outcome(rid) {
            self.abort_txn(exec);
            self.respond(exec, applied_response(rid, &applied));
            return;
        }
        let w = self.execs[exec as usize].wctx.as_ref().expect("write ctx");
        let parent_id = w.parent_id;
        let target_id = w.target_id;
        let dst_parent_id = w.dst_parent_id;
        // Rows may have changed between validation and lock grant.
        if self.store.record(parent_id).is_none() {
            self.abort_txn(exec);
            self.respond(exec, RespOutcome::Domain(DomainErr::NotFound));
            return;
        }
        let leaf_name = path::leaf_name(&path).to_string();
        match op {
            OpKind::Create | OpKind::Mkdir => {
                if self.store.child_of(parent_id, &leaf_name).is_some() {
                    self.abort_txn(exec);
                    self.respond(exec, RespOutcome::Domain(DomainErr::AlreadyExists));
                    return;
                }
            }
            OpKind::Delete | OpKind::SetAttr | OpKind::Mv => {
                let tid = target_id.expect("target resolved");
                let still_there = self.store.record(tid).is_some()
                    && self.store.child_of(parent_id, &leaf_name) == Some(tid);
                if !still_there {
                    self.abort_txn(exec);
                    self.respond(exec, RespOutcome::Domain(DomainErr::NotFound));
                    return;
                }
                if op == OpKind::Delete {
                    // A concurrent create may have filled the directory.
                    if self.store.children_of(tid).next().is_some() {
                        self.abort_txn(exec);
                        self.respond(exec, RespOutcome::Conflict);
                        return;
                    }
                }
                if op == OpKind::Mv {
                    let dp = dst_parent_id.expect("dst parent resolved");
                    let dst = self.execs[exec as usize].dst.clone().expect("dst");
                    if self.store.record(dp).is_none() {
                        self.abort_txn(exec);
                        self.respond(exec, RespOutcome::Domain(DomainErr::NotFound));
                        return;
                    }
                    if self.store.child_of(dp, path::leaf_name(&dst)).is_some() {
                        self.abort_txn(exec);
                        self.respond(exec, RespOutcome::Domain(DomainErr::AlreadyExists));
                        return;
                    }
                }
            }
            _ => {}
        }
        // Point invalidations: the entry itself (when it already exists
        // and may be cached) plus every parent whose register changes.
        let w = self.execs[exec as usize].wctx.as_ref().expect("write ctx");
        let parent_path = w.parent_path.clone();
        let dst_parent_path = w.dst_parent_path.clone();
        let mut points: Vec<Arc<str>> = Vec::new();
        match op {
            OpKind::Create | OpKind::Mkdir => points.push(parent_path),
            OpKind::Delete => {
                points.push(path.clone());
                points.push(parent_path);
            }
            OpKind::SetAttr => points.push(path.clone()),
            OpKind::Mv => {
                points.push(path.clone());
                points.push(parent_path);
                points.push(dst_parent_path.expect("mv dst parent"));
            }
            _ => {}
        }
        let n = self.sc.platform.n_deployments;
        let mut targets: Vec<DeploymentId> = points
            .iter()
            .map(|p| deployment_for(p, n).expect("normalized"))
            .collect();
        targets.sort();
        targets.dedup();
        self.execs[exec as usize].phase = Phase::WriteRound;
        let complete = self.open_round(exec, targets, InvPayload::Point { entries: points });
        if complete {
            self.execs[exec as usize].round_done = true;
            self.execs[exec as usize].phase = Phase::WriteCommitRtt;
            self.store_rt(exec);
        }
    }

    /// Commit round trip done: apply the staged mutation atomically.
    fn step_write_commit(&mut self, exec: u32) {
        let now = self.q.now();
        let (op, path, dst, rid) = {
            let e = &self.execs[exec as usize];
            (e.op, e.path.clone(), e.dst.clone(), e.rid)
        };
        // Commit barrier: the coherence round must have completed.
        if !self.execs[exec as usize].round_done {
            self.counters.commit_barrier_violations += 1;
        }
        let txn = self.execs[exec as usize].txn.expect("open txn");
        let w = self.execs[exec as usize].wctx.as_ref().expect("write ctx");
        let parent_id = w.parent_id;
        let target_id = w.target_id;
        let dst_parent_id = w.dst_parent_id;
        let leaf_name = path::leaf_name(&path).to_string();
        let mut created_id = None;
        let mut created_kind = None;
        let mut perms = None;
        match op {
            OpKind::Create | OpKind::Mkdir => {
                let kind = if op == OpKind::Create {
                    EntryKind::File
                } else {
                    EntryKind::Directory
                };
                let id = self.store.stage_create(txn, parent_id, &leaf_name, kind, now, rid);
                self.store.stage_touch(txn, parent_id, now, rid);
                self.store
                    .stage_mark_applied(txn, rid, AppliedOutcome::Created(id));
                created_id = Some(id);
                created_kind = Some(kind);
            }
            OpKind::Delete => {
                let tid = target_id.expect("target");
                self.store.stage_delete(txn, tid);
                self.store.stage_touch(txn, parent_id, now, rid);
                self.store
                    .stage_mark_applied(txn, rid, AppliedOutcome::Mutated);
            }
            OpKind::SetAttr => {
                let tid = target_id.expect("target");
                let new_perms = self
                    .store
                    .record(tid)
                    .map(|r| (r.perms ^ 0o020) | 0o400)
                    .unwrap_or(0o644);
                self.store.stage_setattr(txn, tid, new_perms, now, rid);
                self.store
                    .stage_mark_applied(txn, rid, AppliedOutcome::Mutated);
                perms = Some(new_perms);
            }
            OpKind::Mv => {
                let tid = target_id.expect("target");
                let dp = dst_parent_id.expect("dst parent");
                let dst_path = dst.clone().expect("dst path");
                self.store
                    .stage_reparent(txn, tid, dp, path::leaf_name(&dst_path), now, rid);
                self.store.stage_touch(txn, parent_id, now, rid);
                self.store.stage_touch(txn, dp, now, rid);
                self.store
                    .stage_mark_applied(txn, rid, AppliedOutcome::Mutated);
            }
            _ => unreachable!(),
        }
        self.execs[exec as usize].txn = None;
        self.txn_exec.remove(&txn);
        let (info, woken) = self.store.commit(txn).expect("open txn commits");
        self.counters.store_commits += 1;
        self.committed_rids.push(rid);
        if self.sc.record_protocol_trace {
            self.proto.push(ProtoEvent::Commit {
                t: now,
                commit_seq: info.commit_seq,
                rid,
                op,
                path: path.clone(),
                dst,
                created_id,
                created_kind,
                perms,
                mtime: now,
                suffixes: None,
            });
        }
        self.wake_waiters(woken);
        self.respond(
            exec,
            RespOutcome::Ok {
                value: RegValue::Present { writer: rid },
            },
        );
    }
}

fn applied_response(rid: RequestId, applied: &AppliedOutcome) -> RespOutcome {
    match applied {
        AppliedOutcome::Created(_) | AppliedOutcome::Mutated => RespOutcome::Ok {
            value: RegValue::Present { writer: rid },
        },
        AppliedOutcome::Subtree(suffixes) => RespOutcome::OkSubtree {
            suffixes: suffixes.clone(),
        },
    }
}

// ---------------------------------------------------------------------
// Subtree operations (three-phase protocol with batched offloading)
// ---------------------------------------------------------------------

impl Sim {
    /// Phase 1: record the operation and persist the subtree-lock flag,
    /// failing with a retryable conflict if any live subtree operation
    /// overlaps the source (or, for moves, the destination).
    #[allow(clippy::too_many_arguments)]
    fn enter_subtree(
        &mut self,
        exec: u32,
        kind: SubtreeOpKind,
        root_id: INodeId,
        parent_id: INodeId,
        parent_path: Arc<str>,
        dst_parent_id: Option<INodeId>,
        dst_parent_path: Option<Arc<str>>,
    ) {
        let now = self.q.now();
        let (path, rid, inst_id) = {
            let e = &self.execs[exec as usize];
            (e.path.clone(), e.rid, e.inst)
        };
        if kind == SubtreeOpKind::Mv {
            let dpp = dst_parent_path.as_ref().expect("mv dst parent path");
            if self.store.overlaps_live_subtree(dpp) {
                self.counters.subtree_conflicts += 1;
                self.respond(exec, RespOutcome::Conflict);
                return;
            }
        }
        match self
            .store
            .set_subtree_lock(root_id, u64::from(inst_id), &path, kind, now)
        {
            Err(_) => {
                self.counters.subtree_conflicts += 1;
                self.respond(exec, RespOutcome::Conflict);
            }
            Ok(op_id) => {
                self.counters.subtree_ops_started += 1;
                if self.sc.record_protocol_trace {
                    self.proto.push(ProtoEvent::SubtreeLock {
                        t: now,
                        op_id,
                        rid,
                        root: path.clone(),
                    });
                }
                let leaf_name: Option<Arc<str>> = self
                    .execs[exec as usize]
                    .dst
                    .as_ref()
                    .map(|d| path::leaf_name(d).into());
                self.execs[exec as usize].sub = Some(Box::new(SubCtx {
                    op_id,
                    root_id,
                    kind,
                    parent_id,
                    parent_path,
                    dst_parent_id,
                    dst_parent_path,
                    leaf_name,
                    quiesce_ids: Vec::new(),
                    quiesce_next: 0,
                    sub_op_count: 0,
                    executor_queues: Vec::new(),
                    outstanding: 0,
                    failed: false,
                    suffixes: Vec::new(),
                }));
                self.execs[exec as usize].phase = Phase::SubLockRtt;
                self.store_rt(exec);
            }
        }
    }

    /// Flag persisted; walk the subtree and start quiescing.
    fn step_sub_lock_rtt(&mut self, exec: u32) {
        let root_id = self.execs[exec as usize].sub.as_ref().expect("sub").root_id;
        let ids = self.store.subtree_ids(root_id);
        let sub = self.execs[exec as usize].sub.as_mut().expect("sub");
        sub.quiesce_ids = ids;
        sub.quiesce_next = 0;
        self.execs[exec as usize].phase = Phase::SubQuiesce;
        self.q.schedule(
            0,
            Ev::ExecStep {
                exec,
                gen: self.execs[exec as usize].gen,
            },
        );
    }

    /// Phase 2: take and release write locks over the subtree in batches
    /// (one store round trip each), in ascending-id order.
    fn step_sub_quiesce(&mut self, exec: u32) {
        let batch_size = self.sc.coherence.batch_size as usize;
        let (start, ids_len) = {
            let sub = self.execs[exec as usize].sub.as_ref().expect("sub");
            (sub.quiesce_next * batch_size, sub.quiesce_ids.len())
        };
        if start >= ids_len {
            // Quiesce finished. Acquire and hold the shield locks (root
            // and the parents the final commit mutates) before opening
            // the invalidation round.
            self.execs[exec as usize].phase = Phase::SubFinalLocking;
            self.step_sub_shield_lock(exec);
            return;
        }
        let txn = match self.execs[exec as usize].txn {
            Some(t) => t,
            None => self.begin_txn(exec),
        };
        let batch: Vec<INodeId> = {
            let sub = self.execs[exec as usize].sub.as_ref().expect("sub");
            sub.quiesce_ids[start..(start + batch_size).min(ids_len)].to_vec()
        };
        match self.store.lock_exclusive(txn, &batch) {
            Ok(Ok(())) => {
                self.clear_wait(exec);
                // Locks taken; release them immediately (take-and-release
                // quiesce) and pay the round trip.
                self.execs[exec as usize].txn = None;
                self.txn_exec.remove(&txn);
                let (_, woken) = self.store.commit(txn).expect("quiesce txn");
                self.wake_waiters(woken);
                let sub = self.execs[exec as usize].sub.as_mut().expect("sub");
                sub.quiesce_next += 1;
                self.store_rt(exec);
            }
            Ok(Err(_)) => {
                self.arm_wait_timeout(exec);
            }
            Err(_) => self.fail_exec(exec, RespOutcome::Transport),
        }
    }

    /// Acquire the locks held across phase 3: subtree root, source
    /// parent, and (for moves) destination parent, in ascending order.
    fn step_sub_shield_lock(&mut self, exec: u32) {
        let txn = match self.execs[exec as usize].txn {
            Some(t) => t,
            None => self.begin_txn(exec),
        };
        let ids = {
            let sub = self.execs[exec as usize].sub.as_ref().expect("sub");
            let mut ids = vec![sub.root_id, sub.parent_id];
            if let Some(dp) = sub.dst_parent_id {
                ids.push(dp);
            }
            ids.sort_unstable();
            ids.dedup();
            ids
        };
        match self.store.lock_exclusive(txn, &ids) {
            Ok(Ok(())) => {
                self.clear_wait(exec);
                // Destination re-validation happens before any row is
                // touched, so a failed move leaves no trace.
                let sub = self.execs[exec as usize].sub.as_ref().expect("sub");
                if sub.kind == SubtreeOpKind::Mv {
                    let dp = sub.dst_parent_id.expect("mv dst");
                    let name = sub.leaf_name.clone().expect("mv leaf");
                    let ok = self
                        .store
                        .record(dp)
                        .map(|r| r.kind == EntryKind::Directory)
                        .unwrap_or(false)
                        && self.store.child_of(dp, &name).is_none();
                    if !ok {
                        self.fail_exec(exec, RespOutcome::Domain(DomainErr::NotFound));
                        return;
                    }
                }
                self.execs[exec as usize].phase = Phase::SubRound;
                self.store_rt(exec);
            }
            Ok(Err(_)) => {
                self.execs[exec as usize].phase = Phase::SubFinalLocking;
                self.arm_wait_timeout(exec);
            }
            Err(_) => self.fail_exec(exec, RespOutcome::Transport),
        }
    }

    /// One prefix invalidation round for the whole subtree.
    fn step_sub_round_open(&mut self, exec: u32) {
        let (root_id, path) = {
            let e = &self.execs[exec as usize];
            (e.sub.as_ref().expect("sub").root_id, e.path.clone())
        };
        let desc = self.store.describe_subtree(root_id, &path);
        let n = self.sc.platform.n_deployments;
        let record_suffixes = self.sc.record_history || self.sc.record_protocol_trace;
        {
            let sub = self.execs[exec as usize].sub.as_mut().expect("sub");
            sub.sub_op_count = desc.len() as u64;
            if record_suffixes {
                sub.suffixes = desc
                    .nodes
                    .iter()
                    .map(|(_, _, p, _)| {
                        let rel = p
                            .strip_prefix(&*path)
                            .unwrap_or("")
                            .trim_start_matches('/');
                        Arc::from(rel)
                    })
                    .collect();
            }
        }
        let mut targets = deployments_for_subtree(desc.nodes.iter().map(|(_, _, p, _)| &**p), n);
        let sub = self.execs[exec as usize].sub.as_ref().expect("sub");
        let parent_path = sub.parent_path.clone();
        let dst_parent_path = sub.dst_parent_path.clone();
        let mut extra_points = vec![parent_path.clone()];
        let mut extra_deps = vec![deployment_for(&parent_path, n).expect("normalized")];
        if let Some(dpp) = dst_parent_path {
            extra_points.push(dpp.clone());
            extra_deps.push(deployment_for(&dpp, n).expect("normalized"));
        }
        if let Some(dst) = self.execs[exec as usize].dst.clone() {
            extra_deps.push(deployment_for(&dst, n).expect("normalized"));
        }
        for d in extra_deps {
            if !targets.contains(&d) {
                targets.push(d);
            }
        }
        targets.sort();
        // Remember the ids for phase 3 before the round fires.
        let batch_ids: Vec<INodeId> = desc.nodes.iter().map(|(id, ..)| *id).collect();
        self.execs[exec as usize]
            .sub
            .as_mut()
            .expect("sub")
            .quiesce_ids = batch_ids;
        self.execs[exec as usize].phase = Phase::SubBatchWait;
        let complete = self.open_round(
            exec,
            targets,
            InvPayload::Prefix {
                prefix: path,
                extra_points,
            },
        );
        if complete {
            self.execs[exec as usize].round_done = true;
            self.launch_batches(exec);
        }
    }

    /// Phase 3: partition into sub-operations and execute them in
    /// batches, offloaded round-robin to warm helpers from other
    /// deployments.
    fn launch_batches(&mut self, exec: u32) {
        let egen = self.execs[exec as usize].gen;
        let (ids, kind, leader, m) = {
            let e = &self.execs[exec as usize];
            let sub = e.sub.as_ref().expect("sub");
            (sub.quiesce_ids.clone(), sub.kind, e.inst, sub.sub_op_count)
        };
        let batch_size = self.sc.coherence.batch_size;
        let sizes = plan_batches(m, batch_size);
        self.counters.subtree_batches += sizes.len() as u64;
        // Helpers come from other deployments, warm instances only,
        // rotating deployments; a single batch stays on the leader.
        let helpers = if sizes.len() > 1 {
            self.pick_helpers(leader)
        } else {
            Vec::new()
        };
        let mut executors = vec![leader];
        executors.extend(helpers);
        let assignment = assign_batches(sizes.len(), &executors);
        let mut queues: Vec<(u32, VecDeque<Vec<INodeId>>)> =
            executors.iter().map(|e| (*e, VecDeque::new())).collect();
        let mut offset = 0usize;
        for (i, size) in sizes.iter().enumerate() {
            let ids_slice = ids[offset..offset + *size as usize].to_vec();
            offset += *size as usize;
            let who = assignment[i];
            let q = queues
                .iter_mut()
                .find(|(e, _)| *e == who)
                .expect("executor present");
            q.1.push_back(ids_slice);
            if who != leader {
                self.counters.subtree_offloaded_batches += 1;
            }
        }
        let action = match kind {
            SubtreeOpKind::Delete => BatchAction::DeleteRows,
            SubtreeOpKind::Mv => BatchAction::RewriteRows,
        };
        {
            let sub = self.execs[exec as usize].sub.as_mut().expect("sub");
            sub.outstanding = sizes.len() as u32;
            sub.executor_queues = queues;
        }
        let n_exec = self.execs[exec as usize]
            .sub
            .as_ref()
            .expect("sub")
            .executor_queues
            .len();
        for slot in 0..n_exec {
            self.kick_executor(exec, egen, slot, action);
        }
    }

    fn pick_helpers(&mut self, leader: u32) -> Vec<u32> {
        let n = self.sc.platform.n_deployments;
        let max = self.sc.coherence.max_offload_helpers as usize;
        let leader_dep = self.instances[leader as usize].deployment;
        let mut out = Vec::new();
        for i in 1..n {
            if out.len() >= max {
                break;
            }
            let dep = (leader_dep + i) % n;
            let warm = self.deployments[dep as usize]
                .instances
                .iter()
                .copied()
                .find(|id| self.instances[*id as usize].state == InstanceState::Warm);
            if let Some(w) = warm {
                out.push(w);
            }
        }
        // No warm helper anywhere: add capacity for next time if the
        // budget allows, but run this operation on the leader.
        if out.is_empty() {
            let dep = (leader_dep + 1) % n;
            if self.can_spawn(dep) {
                self.spawn_instance(dep);
            }
        }
        out
    }

    /// Start the next queued batch on one executor, if it is idle.
    fn kick_executor(&mut self, exec: u32, egen: u32, slot: usize, action: BatchAction) {
        if !self.exec_live(exec, egen) {
            return;
        }
        let (executor, ids) = {
            let sub = self.execs[exec as usize].sub.as_mut().expect("sub");
            if sub.failed {
                return;
            }
            let (inst, queue) = &mut sub.executor_queues[slot];
            match queue.pop_front() {
                Some(ids) => (*inst, ids),
                None => return,
            }
        };
        if self.instances[executor as usize].state != InstanceState::Warm {
            // Executor died or never warmed: the whole operation fails.
            self.batch_failed(exec, egen);
            return;
        }
        let rid = self.execs[exec as usize].rid;
        let root_path = self.execs[exec as usize].path.clone();
        let batch_exec = self.alloc_exec(Exec {
            gen: 0,
            alive: true,
            inst: executor,
            req: None,
            rid,
            client_server: 0,
            via: Channel::Tcp,
            wrong_deployment: false,
            op: OpKind::Delete,
            path: root_path,
            dst: None,
            phase: Phase::BatchLocking,
            txn: None,
            round: None,
            round_done: false,
            round_to_h: None,
            wait_to_h: None,
            holds_slot: false,
            wctx: None,
            sub: None,
            batch: Some(Box::new(BatchCtx {
                parent: (exec, egen),
                executor_idx: slot,
                ids,
                action,
            })),
        });
        let now = self.q.now();
        self.instances[executor as usize].busy.request_started(now);
        self.instances[executor as usize].last_active = now;
        let bgen = self.execs[batch_exec as usize].gen;
        self.q.schedule(0, Ev::ExecStep { exec: batch_exec, gen: bgen });
    }

    fn step_batch_locking(&mut self, exec: u32) {
        let txn = match self.execs[exec as usize].txn {
            Some(t) => t,
            None => self.begin_txn(exec),
        };
        // The subtree root is excluded: the leader's shield transaction
        // holds it for the whole of phase 3 and mutates it at the final
        // commit.
        let ids = {
            let b = self.execs[exec as usize].batch.as_ref().expect("batch");
            let root = self.batch_root(exec);
            b.ids
                .iter()
                .copied()
                .filter(|id| Some(*id) != root)
                .collect::<Vec<_>>()
        };
        if ids.is_empty() {
            self.execs[exec as usize].phase = Phase::BatchLockRtt;
            self.store_rt(exec);
            return;
        }
        match self.store.lock_exclusive(txn, &ids) {
            Ok(Ok(())) => {
                self.clear_wait(exec);
                self.execs[exec as usize].phase = Phase::BatchLockRtt;
                self.store_rt(exec);
            }
            Ok(Err(_)) => self.arm_wait_timeout(exec),
            Err(_) => self.batch_exec_failed(exec),
        }
    }

    fn batch_root(&self, exec: u32) -> Option<INodeId> {
        let (pe, pg) = self.execs[exec as usize].batch.as_ref().expect("batch").parent;
        if self.exec_live(pe, pg) {
            self.execs[pe as usize].sub.as_ref().map(|s| s.root_id)
        } else {
            None
        }
    }

    fn step_batch_lock_rtt(&mut self, exec: u32) {
        let txn = self.execs[exec as usize].txn.expect("batch txn");
        let rid = self.execs[exec as usize].rid;
        let (ids, action) = {
            let b = self.execs[exec as usize].batch.as_ref().expect("batch");
            (b.ids.clone(), b.action)
        };
        let root_id = self.batch_root(exec);
        for id in &ids {
            // The root row stays until the final commit: it carries the
            // subtree-lock flag that shields readers.
            if Some(*id) == root_id {
                continue;
            }
            match action {
                BatchAction::DeleteRows => self.store.stage_delete(txn, *id),
                BatchAction::RewriteRows => self.store.stage_rewrite(txn, *id, rid),
            }
        }
        self.execs[exec as usize].phase = Phase::BatchCommitRtt;
        self.store_rt(exec);
    }

    fn step_batch_commit(&mut self, exec: u32) {
        let now = self.q.now();
        let model = self.sc.cost;
        let txn = self.execs[exec as usize].txn.take().expect("batch txn");
        self.txn_exec.remove(&txn);
        let (_, woken) = self.store.commit(txn).expect("batch commit");
        self.counters.store_commits += 1;
        self.wake_waiters(woken);
        let (parent, slot, inst_id) = {
            let e = &self.execs[exec as usize];
            let b = e.batch.as_ref().expect("batch");
            (b.parent, b.executor_idx, e.inst)
        };
        if let Some(interval) = self.instances[inst_id as usize]
            .busy
            .request_finished(now, &model)
        {
            self.per_second_busy(interval);
        }
        self.instances[inst_id as usize].last_active = now;
        self.free_exec(exec);
        let (pe, pg) = parent;
        if self.exec_live(pe, pg) {
            let action = {
                let sub = self.execs[pe as usize].sub.as_ref().expect("sub");
                match sub.kind {
                    SubtreeOpKind::Delete => BatchAction::DeleteRows,
                    SubtreeOpKind::Mv => BatchAction::RewriteRows,
                }
            };
            self.kick_executor(pe, pg, slot, action);
            self.batch_done(pe, pg);
        }
    }

    /// A batch transaction could not proceed (executor-side failure).
    fn batch_exec_failed(&mut self, exec: u32) {
        let now = self.q.now();
        let model = self.sc.cost;
        let parent = self.execs[exec as usize].batch.as_ref().map(|b| b.parent);
        let inst_id = self.execs[exec as usize].inst;
        if self.instances[inst_id as usize].state != InstanceState::Terminated {
            if let Some(interval) = self.instances[inst_id as usize]
                .busy
                .request_finished(now, &model)
            {
                self.per_second_busy(interval);
            }
        }
        self.abort_txn(exec);
        self.free_exec(exec);
        if let Some((pe, pg)) = parent {
            self.batch_failed(pe, pg);
        }
    }

    fn batch_done(&mut self, exec: u32, gen: u32) {
        if !self.exec_live(exec, gen) {
            return;
        }
        let done = {
            let sub = self.execs[exec as usize].sub.as_mut().expect("sub");
            sub.outstanding -= 1;
            sub.outstanding == 0 && !sub.failed
        };
        if done {
            self.execs[exec as usize].phase = Phase::SubFinalRtt;
            self.store_rt(exec);
        }
    }

    /// Any failed batch fails the whole subtree operation; the client
    /// resubmits it and re-execution is idempotent.
    fn batch_failed(&mut self, exec: u32, gen: u32) {
        if !self.exec_live(exec, gen) {
            return;
        }
        let already = {
            let sub = self.execs[exec as usize].sub.as_mut().expect("sub");
            let was = sub.failed;
            sub.failed = true;
            was
        };
        if !already {
            self.fail_exec(exec, RespOutcome::Transport);
        }
    }

    /// Final commit: root mutation, parent register bumps, the applied
    /// marker, and the subtree-flag clear, in one transaction.
    fn step_sub_final(&mut self, exec: u32) {
        let now = self.q.now();
        let (rid, path, dst) = {
            let e = &self.execs[exec as usize];
            (e.rid, e.path.clone(), e.dst.clone())
        };
        if !self.execs[exec as usize].round_done {
            self.counters.commit_barrier_violations += 1;
        }
        let txn = self.execs[exec as usize].txn.expect("shield txn");
        let (op_id, kind, root_id, parent_id, dst_parent_id, leaf_name, suffixes) = {
            let sub = self.execs[exec as usize].sub.as_ref().expect("sub");
            (
                sub.op_id,
                sub.kind,
                sub.root_id,
                sub.parent_id,
                sub.dst_parent_id,
                sub.leaf_name.clone(),
                sub.suffixes.clone(),
            )
        };
        let suffixes: Arc<[Arc<str>]> = suffixes.into();
        match kind {
            SubtreeOpKind::Delete => {
                self.store.stage_delete(txn, root_id);
                self.store.stage_touch(txn, parent_id, now, rid);
            }
            SubtreeOpKind::Mv => {
                let dp = dst_parent_id.expect("mv dst parent");
                let name = leaf_name.expect("mv leaf name");
                self.store.stage_reparent(txn, root_id, dp, &name, now, rid);
                self.store.stage_touch(txn, parent_id, now, rid);
                self.store.stage_touch(txn, dp, now, rid);
            }
        }
        self.store.stage_clear_subtree_flag(txn, root_id);
        self.store
            .stage_mark_applied(txn, rid, AppliedOutcome::Subtree(suffixes.clone()));
        self.execs[exec as usize].txn = None;
        self.txn_exec.remove(&txn);
        let (info, woken) = self.store.commit(txn).expect("final commit");
        self.counters.store_commits += 1;
        self.counters.subtree_ops_completed += 1;
        self.committed_rids.push(rid);
        let cleared = self.store.clear_subtree_lock(op_id);
        if self.sc.record_protocol_trace {
            self.proto.push(ProtoEvent::Commit {
                t: now,
                commit_seq: info.commit_seq,
                rid,
                op: match kind {
                    SubtreeOpKind::Delete => OpKind::Delete,
                    SubtreeOpKind::Mv => OpKind::Mv,
                },
                path: path.clone(),
                dst,
                created_id: None,
                created_kind: None,
                perms: None,
                mtime: now,
                suffixes: Some(suffixes.to_vec()),
            });
            self.proto.push(ProtoEvent::SubtreeClear {
                t: now,
                op_id,
                rid,
                root: path,
                completed: true,
            });
        }
        self.execs[exec as usize].sub = None;
        self.wake_waiters(woken);
        self.wake_waiters(cleared);
        self.respond(exec, RespOutcome::OkSubtree { suffixes });
    }
}

// ---------------------------------------------------------------------
// Coherence round driving
// ---------------------------------------------------------------------

impl Sim {
    /// Open a coherence round; returns true when it completed instantly
    /// (no live instance needs invalidating).
    fn open_round(&mut self, exec: u32, targets: Vec<DeploymentId>, payload: InvPayload) -> bool {
        let now = self.q.now();
        let egen = self.execs[exec as usize].gen;
        let leader = self.execs[exec as usize].inst;
        let token = pack_token(exec, egen);
        let is_prefix = matches!(payload, InvPayload::Prefix { .. });
        let opened = self.coord.open_round(leader, token, &targets, is_prefix, now);
        self.counters.rounds_opened += 1;
        self.counters.inv_messages += targets.len() as u64;
        if self.sc.record_protocol_trace {
            self.proto.push(ProtoEvent::RoundOpen {
                t: now,
                round: opened.round,
                leader,
                targets: targets.iter().map(|d| d.0).collect(),
                prefix: match &payload {
                    InvPayload::Prefix { prefix, .. } => Some(prefix.clone()),
                    InvPayload::Point { .. } => None,
                },
                fanout: opened.fanout.len() as u32,
            });
        }
        if opened.complete {
            return true;
        }
        for inst in &opened.fanout {
            let d = self
                .sc
                .latency
                .sample(LatencyKind::Tcp, &mut self.coord_rng);
            self.q.schedule(
                d,
                Ev::InvDeliver {
                    round: opened.round,
                    inst: *inst,
                },
            );
        }
        self.round_payloads.insert(opened.round, payload);
        self.execs[exec as usize].round = Some(opened.round);
        let h = self.q.schedule(
            secs(self.sc.coherence.round_timeout_s),
            Ev::RoundTimeout {
                round: opened.round,
                exec,
                gen: egen,
            },
        );
        self.execs[exec as usize].round_to_h = Some(h);
        false
    }

    fn on_inv_deliver(&mut self, round: RoundId, inst_id: u32) {
        if !self.coord.round_open(round) {
            return;
        }
        let inst = &self.instances[inst_id as usize];
        if inst.state == InstanceState::Terminated {
            return;
        }
        let payload = self
            .round_payloads
            .get(&round)
            .expect("open round has payload")
            .clone();
        let now = self.q.now();
        if self.sc.record_protocol_trace {
            self.proto.push(ProtoEvent::Inv {
                t: now,
                round,
                deployment: self.instances[inst_id as usize].deployment,
                instance: inst_id,
            });
        }
        // Debug fault: one instance skips the cache purge but still
        // acknowledges, planting a stale entry for the verifier to find.
        let mut skip = false;
        if self.inject_armed && self.would_invalidate(inst_id, &payload) {
            self.inject_armed = false;
            skip = true;
        }
        if !skip {
            self.apply_invalidation(inst_id, &payload);
        }
        // Invalidation is applied before the ACK is sent.
        let d = self
            .sc
            .latency
            .sample(LatencyKind::Tcp, &mut self.coord_rng);
        self.q.schedule(d, Ev::AckArrive { round, inst: inst_id });
    }

    fn would_invalidate(&mut self, inst_id: u32, payload: &InvPayload) -> bool {
        let cache = &mut self.instances[inst_id as usize].cache;
        match payload {
            InvPayload::Point { entries } => entries.iter().any(|p| {
                let (res, _) = cache.lookup(p);
                matches!(res, Lookup::Hit)
            }),
            InvPayload::Prefix { .. } => true,
        }
    }

    fn apply_invalidation(&mut self, inst_id: u32, payload: &InvPayload) {
        let cache = &mut self.instances[inst_id as usize].cache;
        match payload {
            InvPayload::Point { entries } => {
                for p in entries {
                    cache.invalidate(p);
                }
            }
            InvPayload::Prefix {
                prefix,
                extra_points,
            } => {
                cache.invalidate_prefix(prefix);
                for p in extra_points {
                    cache.invalidate(p);
                }
            }
        }
    }

    fn on_ack_arrive(&mut self, round: RoundId, inst_id: u32) {
        if !self.coord.round_open(round) {
            return;
        }
        self.counters.ack_messages += 1;
        if self.sc.record_protocol_trace {
            self.proto.push(ProtoEvent::Ack {
                t: self.q.now(),
                round,
                instance: inst_id,
            });
        }
        if let Some(token) = self.coord.ack(round, inst_id) {
            self.round_payloads.remove(&round);
            self.on_round_complete(token);
        }
    }

    fn on_round_complete(&mut self, token: u64) {
        let (exec, gen) = unpack_token(token);
        if !self.exec_live(exec, gen) {
            return;
        }
        if let Some(h) = self.execs[exec as usize].round_to_h.take() {
            self.q.cancel(h);
        }
        if let Some(r) = self.execs[exec as usize].round.take() {
            self.round_payloads.remove(&r);
        }
        self.execs[exec as usize].round_done = true;
        match self.execs[exec as usize].phase {
            Phase::WriteRound => {
                self.execs[exec as usize].phase = Phase::WriteCommitRtt;
                self.store_rt(exec);
            }
            Phase::SubBatchWait => self.launch_batches(exec),
            other => debug_assert!(false, "round completed in phase {other:?}"),
        }
    }

    fn on_round_timeout(&mut self, round: RoundId, exec: u32, gen: u32) {
        if !self.coord.round_open(round) {
            return;
        }
        self.coord.cancel_round(round);
        self.round_payloads.remove(&round);
        self.counters.round_timeouts += 1;
        if self.exec_live(exec, gen) {
            self.execs[exec as usize].round = None;
            self.execs[exec as usize].round_to_h = None;
            self.fail_exec(exec, RespOutcome::Transport);
        }
    }
}

// ---------------------------------------------------------------------
// Client response, retry, straggler, timeout
// ---------------------------------------------------------------------

impl Sim {
    fn on_response(&mut self, req: u32, gen: u32, outcome: RespOutcome) {
        if !self.request_live(req, gen) {
            return; // late duplicate from a superseded attempt
        }
        match outcome {
            RespOutcome::Conflict | RespOutcome::Transport => {
                let attempt = self.requests[req as usize].attempt;
                if attempt >= self.sc.client.attempt_cap {
                    self.give_up(req);
                } else {
                    self.schedule_retry(req);
                }
            }
            RespOutcome::Ok { value } => {
                let kind = self.requests[req as usize].op.kind;
                let (out, val) = if kind.is_read() {
                    (HistoryOutcome::Ok, Some(value))
                } else {
                    (HistoryOutcome::Ok, None)
                };
                self.complete_request(req, out, val, None);
            }
            RespOutcome::OkSubtree { suffixes } => {
                self.complete_request(req, HistoryOutcome::Ok, None, Some(suffixes));
            }
            RespOutcome::Domain(err) => {
                let kind = self.requests[req as usize].op.kind;
                let val = if kind.is_read() && err == DomainErr::NotFound {
                    Some(RegValue::Absent)
                } else {
                    None
                };
                self.complete_request(req, err.history(), val, None);
            }
        }
    }

    fn cancel_request_timers(&mut self, req: u32) {
        let r = &mut self.requests[req as usize];
        if let Some(h) = r.timeout_h.take() {
            self.q.cancel(h);
        }
        if let Some(h) = r.straggler_h.take() {
            self.q.cancel(h);
        }
    }

    fn schedule_retry(&mut self, req: u32) {
        self.cancel_request_timers(req);
        self.counters.retries += 1;
        let (client, attempt, gen) = {
            let r = &self.requests[req as usize];
            (r.client, r.attempt, r.gen)
        };
        let cfg = self.sc.client;
        let delay = {
            let c = &mut self.clients[client as usize];
            client::next_backoff(&cfg, attempt, &mut c.rng)
        };
        self.q.schedule(delay, Ev::RetryFire { req, gen });
    }

    fn on_retry_fire(&mut self, req: u32, gen: u32) {
        if !self.request_live(req, gen) {
            return;
        }
        self.submit_attempt(req);
    }

    fn on_request_timeout(&mut self, req: u32, gen: u32) {
        if !self.request_live(req, gen) {
            return;
        }
        self.requests[req as usize].timeout_h = None;
        // The attempt's connection is presumed dead: purge it from every
        // server on the VM so siblings stop borrowing it.
        let (via, inst, client, dep) = {
            let r = &self.requests[req as usize];
            (r.via, r.cur_inst, r.client, r.target_dep)
        };
        if via == Channel::Tcp {
            if let Some(inst) = inst {
                let vm = self.clients[client as usize].vm;
                let servers = self.vms[vm as usize].servers.clone();
                for s in servers {
                    if let Some(set) = self.servers[s as usize].conns.get_mut(&dep) {
                        set.remove(&inst);
                    }
                }
            }
        }
        let attempt = self.requests[req as usize].attempt;
        if attempt >= self.sc.client.attempt_cap {
            self.give_up(req);
        } else {
            self.schedule_retry(req);
        }
    }

    fn on_straggler_check(&mut self, req: u32, gen: u32) {
        if !self.request_live(req, gen) {
            return;
        }
        self.requests[req as usize].straggler_h = None;
        let now = self.q.now();
        let cfg = self.sc.client;
        let (client, dispatch_at, attempt, dep, cur) = {
            let r = &self.requests[req as usize];
            (r.client, r.dispatch_at, r.attempt, r.target_dep, r.cur_inst)
        };
        let avg = self.clients[client as usize].window.average();
        let elapsed = now - dispatch_at;
        match client::check_straggler(&cfg, elapsed, avg) {
            StragglerVerdict::Keep => {
                // The baseline moved; re-arm at the new threshold.
                if let Some(a) = avg {
                    let thresh = (cfg.straggler_factor * a) as Micros;
                    if thresh > elapsed && dispatch_at + thresh < dispatch_at + cfg.request_timeout
                    {
                        let h = self
                            .q
                            .schedule(thresh - elapsed, Ev::StragglerCheck { req, gen });
                        self.requests[req as usize].straggler_h = Some(h);
                    }
                }
            }
            StragglerVerdict::CancelAndResubmit => {
                if attempt >= self.sc.client.attempt_cap {
                    return; // let the timeout decide
                }
                self.counters.straggler_resubmits += 1;
                // Resubmit to a different instance of the same
                // deployment when one is connected, else over HTTP. The
                // original attempt stays in flight; responses dedup.
                let vm = self.clients[client as usize].vm;
                let alt = self.pick_conn_excluding(vm, dep, cur);
                let r = &mut self.requests[req as usize];
                r.attempt += 1;
                r.dispatch_at = now;
                match alt {
                    Some(inst) => {
                        r.via = Channel::Tcp;
                        r.tcp_attempts += 1;
                        r.cur_inst = Some(inst);
                        let rgen = r.gen;
                        self.counters.tcp_dispatches += 1;
                        if now >= self.warmup {
                            self.counters.tcp_dispatches_post_warmup += 1;
                        }
                        self.metrics.bucket_at(now).tcp += 1;
                        let leg = {
                            let c = &mut self.clients[client as usize];
                            self.sc.latency.sample(LatencyKind::Tcp, &mut c.rng) / 2
                        };
                        self.q.schedule(leg, Ev::RequestArrive { req, gen: rgen, inst });
                        self.arm_timeout_and_straggler(req, true);
                    }
                    None => self.dispatch_http(req),
                }
            }
        }
    }

    fn pick_conn_excluding(&mut self, vm: u32, dep: u32, exclude: Option<u32>) -> Option<u32> {
        let servers = self.vms[vm as usize].servers.clone();
        for s in servers {
            if let Some(set) = self.servers[s as usize].conns.get(&dep) {
                for inst in set {
                    if Some(*inst) != exclude {
                        return Some(*inst);
                    }
                }
            }
        }
        None
    }

    fn give_up(&mut self, req: u32) {
        self.counters.gave_up += 1;
        self.complete_request(req, HistoryOutcome::GaveUp, None, None);
    }

    fn complete_request(
        &mut self,
        req: u32,
        outcome: HistoryOutcome,
        value: Option<RegValue>,
        suffixes: Option<Arc<[Arc<str>]>>,
    ) {
        let now = self.q.now();
        self.cancel_request_timers(req);
        let (client_id, rid, issued_at, attempts, kind, first_via) = {
            let r = &self.requests[req as usize];
            (
                r.client,
                r.rid,
                r.issued_at,
                r.attempt,
                r.op.kind,
                r.first_via,
            )
        };
        let latency = now - issued_at;
        let completed = outcome != HistoryOutcome::GaveUp;
        if completed {
            match outcome {
                HistoryOutcome::Ok => self.counters.completed_ok += 1,
                _ => self.counters.completed_domain_err += 1,
            }
            if kind.is_read() {
                self.counters.read_ops_completed += 1;
                if now >= self.warmup {
                    self.counters.completed_reads_post_warmup += 1;
                }
            }
            self.metrics.record_completion(now, kind, latency);
            // Anti-thrashing observes every completed latency.
            let cfg = self.sc.client;
            let c = &mut self.clients[client_id as usize];
            let before = c.mode.entries();
            let mut window = std::mem::replace(&mut c.window, LatencyWindow::new(1));
            c.mode.observe(&cfg, &mut window, latency);
            c.window = window;
            self.counters.anti_thrash_entries += c.mode.entries() - before;
        }
        // Keep the generator's view in step with acknowledged mutations.
        if outcome == HistoryOutcome::Ok {
            let op = self.requests[req as usize].op.clone();
            match op.kind {
                OpKind::Create => {
                    self.view
                        .add(op.target, op.leaf.as_deref().expect("create leaf"), EntryKind::File);
                }
                OpKind::Mkdir => {
                    self.view.add(
                        op.target,
                        op.leaf.as_deref().expect("mkdir leaf"),
                        EntryKind::Directory,
                    );
                }
                OpKind::Delete => self.view.mark_deleted(op.target),
                OpKind::Mv => self.view.reparent(op.target, op.dst_dir.expect("mv dst")),
                _ => {}
            }
        }
        if self.sc.record_history {
            let r = &self.requests[req as usize];
            self.history.push(HistoryEvent {
                client: client_id,
                rid,
                op: kind,
                path: r.op.path.clone(),
                dst: r.op.dst_path.clone(),
                invoke_us: issued_at,
                response_us: completed.then_some(now),
                outcome,
                value,
                suffixes: suffixes.as_ref().map(|s| s.to_vec()),
                attempts,
            });
        }
        if self.sc.record_request_trace {
            self.req_rows.push(RequestTraceRow {
                rid,
                client: client_id,
                op: kind,
                via: match first_via {
                    Some(Channel::Tcp) => "tcp",
                    Some(Channel::Http) => "http",
                    None => "none",
                },
                attempts,
                issued_us: issued_at,
                completed_us: completed.then_some(now),
                total_us: completed.then_some(latency),
                outcome: match outcome {
                    HistoryOutcome::Ok => "ok",
                    HistoryOutcome::NotFound => "not_found",
                    HistoryOutcome::AlreadyExists => "already_exists",
                    HistoryOutcome::NotADirectory => "not_a_directory",
                    HistoryOutcome::GaveUp => "gave_up",
                    HistoryOutcome::Unresolved => "unresolved",
                },
            });
        }
        // Free the slot and let the client pull its next operation.
        self.requests[req as usize].alive = false;
        self.req_free.push(req);
        let c = &mut self.clients[client_id as usize];
        c.busy = false;
        c.completed += 1;
        let vm_idx = c.vm;
        if self.fixed_ops.is_some() {
            if c.ops_left > 0 {
                let _ = self.client_issue(client_id);
            } else {
                self.clients_done += 1;
            }
        } else {
            let vm = &mut self.vms[vm_idx as usize];
            if completed {
                vm.completed_this_second += 1;
            }
            if vm.issued_this_second < vm.budget {
                vm.issued_this_second += 1;
                if !self.client_issue(client_id) {
                    let vm = &mut self.vms[vm_idx as usize];
                    vm.issued_this_second -= 1;
                    vm.idle_clients.push_back(client_id);
                }
            } else {
                vm.idle_clients.push_back(client_id);
            }
        }
    }
}

// ---------------------------------------------------------------------
// Finalization, summary, outputs
// ---------------------------------------------------------------------

impl Sim {
    fn per_second_busy(&mut self, interval: (Micros, Micros)) {
        let (s, e) = interval;
        let units = (e - s).div_ceil(self.sc.cost.billing_granularity_us);
        let sec = (e / SECOND) as usize;
        if self.per_second_busy_units.len() <= sec {
            self.per_second_busy_units.resize(sec + 1, 0);
        }
        self.per_second_busy_units[sec] += units;
    }

    fn finalize(mut self, end: Micros) -> RunResult {
        let model = self.sc.cost;
        // Close open busy intervals and provision windows.
        let mut billed_units = 0u64;
        let mut provisioned_units = 0u64;
        let mut closing: Vec<(Micros, Micros)> = Vec::new();
        for inst in &mut self.instances {
            if inst.state != InstanceState::Terminated {
                if let Some(interval) = inst.busy.finalize_interval(end, &model) {
                    closing.push(interval);
                }
            }
            billed_units += inst.busy.billed_units();
            let until = inst.terminated_at.unwrap_or(end);
            if until > inst.started_at {
                provisioned_units +=
                    (until - inst.started_at).div_ceil(model.billing_granularity_us);
            }
        }
        for interval in closing {
            self.per_second_busy(interval);
        }
        // Unresolved in-flight operations are possibly applied.
        for idx in 0..self.requests.len() {
            if !self.requests[idx].alive {
                continue;
            }
            self.counters.in_flight_at_end += 1;
            if self.sc.record_history {
                let r = &self.requests[idx];
                self.history.push(HistoryEvent {
                    client: r.client,
                    rid: r.rid,
                    op: r.op.kind,
                    path: r.op.path.clone(),
                    dst: r.op.dst_path.clone(),
                    invoke_us: r.issued_at,
                    response_us: None,
                    outcome: HistoryOutcome::Unresolved,
                    value: None,
                    suffixes: None,
                    attempts: r.attempt,
                });
            }
        }
        // Duplicate-application audit over committed request ids.
        let mut rids = self.committed_rids.clone();
        rids.sort_unstable();
        let dups = rids.windows(2).filter(|w| w[0] == w[1]).count() as u64;
        self.counters.duplicate_commits = dups;

        let gran_s = model.billing_granularity_us as f64 / SECOND as f64;
        let busy_seconds = billed_units as f64 * gran_s;
        let provisioned_seconds = provisioned_units as f64 * gran_s;
        let mem = self.sc.platform.mem_gb;
        let fees = request_fees(&model, self.counters.http_invocations);
        let ppu = busy_seconds * mem * model.gb_second_price + fees;
        let simplified = provisioned_seconds * mem * model.gb_second_price + fees;
        let serverful = cost_serverful(&model, self.sc.platform.vcpu_budget, end);

        let duration_s = end as f64 / SECOND as f64;
        let completed_total =
            self.counters.completed_ok + self.counters.completed_domain_err;
        let avg_tp = if duration_s > 0.0 {
            completed_total as f64 / duration_s
        } else {
            0.0
        };
        let read_tp = if duration_s > 0.0 {
            self.counters.read_ops_completed as f64 / duration_s
        } else {
            0.0
        };
        let ticks = self
            .metrics
            .seconds
            .iter()
            .filter(|b| b.active_instances > 0 || b.completed > 0 || b.issued > 0)
            .count()
            .max(1);
        let http_pw = self.counters.http_dispatches_post_warmup;
        let tcp_pw = self.counters.tcp_dispatches_post_warmup;
        let hit_pw = self.counters.cache_hits_post_warmup;
        let miss_pw = self.counters.cache_misses_post_warmup;

        let mut per_op_latency = BTreeMap::new();
        for kind in OpKind::ALL {
            let h = self.metrics.op_hist(kind);
            if h.count() > 0 {
                per_op_latency.insert(kind.label().to_string(), hist_summary(h));
            }
        }
        let snapshot_jsonl = if self.sc.record_protocol_trace {
            let mut buf = Vec::new();
            self.store.export_snapshot(&mut buf).expect("vec write");
            String::from_utf8(buf).expect("snapshot is utf8")
        } else {
            String::new()
        };
        let summary = Summary {
            schema_version: self.sc.schema_version,
            scenario: self.sc.name.clone(),
            seed: self.sc.seed,
            duration_s,
            avg_throughput_ops_per_s: avg_tp,
            read_throughput_ops_per_s: read_tp,
            peak_second_ops: self
                .metrics
                .seconds
                .iter()
                .map(|b| b.completed)
                .max()
                .unwrap_or(0),
            http_fraction_post_warmup: if http_pw + tcp_pw > 0 {
                Some(http_pw as f64 / (http_pw + tcp_pw) as f64)
            } else {
                None
            },
            cache_hit_rate_post_warmup: if hit_pw + miss_pw > 0 {
                Some(hit_pw as f64 / (hit_pw + miss_pw) as f64)
            } else {
                None
            },
            latency: hist_summary(&self.metrics.all_hist),
            read_latency: hist_summary(&self.metrics.read_hist),
            per_op_latency,
            cost: CostSummary {
                pay_per_use: ppu,
                simplified,
                serverful,
                billed_busy_seconds: busy_seconds,
                provisioned_seconds,
                http_invocations: self.counters.http_invocations,
                perf_per_cost_pay_per_use: perf_per_cost(avg_tp, ppu),
                perf_per_cost_simplified: perf_per_cost(avg_tp, simplified),
                perf_per_cost_serverful: perf_per_cost(avg_tp, serverful),
            },
            avg_instances: self.instance_seconds_acc / ticks as f64,
            tree_shape_ok: self.store.check_tree_shape().is_ok(),
            exactly_once_ok: dups == 0,
            counters: self.counters,
        };
        RunResult {
            summary,
            series: self.metrics,
            proto: self.proto,
            history: self.history,
            request_rows: self.req_rows,
            snapshot_jsonl,
            committed_rids: self.committed_rids,
        }
    }
}

/// Run a scenario to completion.
pub fn run_scenario(sc: &Scenario) -> RunResult {
    Sim::new(sc).run()
}

impl RunResult {
    /// Write the run's artifacts into `dir`:
    /// `summary.json`, `throughput.csv`, `latency_cdf_<op>.csv`, and —
    /// when tracing was enabled — `protocol_trace.jsonl`,
    /// `history.jsonl`, `snapshot.jsonl`, `requests.csv`.
    pub fn write_to_dir(&self, dir: &std::path::Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("summary.json"), self.summary_json())?;

        let mut tp = String::from("t_s,ops,instances,vcpu_in_use,queued,tcp,http,hits,misses\n");
        for (t, b) in self.series.seconds.iter().enumerate() {
            tp.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                t,
                b.completed,
                b.active_instances,
                b.vcpu_in_use,
                b.queued_invocations,
                b.tcp,
                b.http,
                b.cache_hits,
                b.cache_misses
            ));
        }
        std::fs::write(dir.join("throughput.csv"), tp)?;

        for kind in OpKind::ALL {
            let h = self.series.op_hist(kind);
            if h.count() == 0 {
                continue;
            }
            let mut csv = String::from("latency_us,cumulative_fraction\n");
            for (v, f) in h.cdf_rows() {
                csv.push_str(&format!("{v},{f}\n"));
            }
            std::fs::write(dir.join(format!("latency_cdf_{}.csv", kind.label())), csv)?;
        }

        if !self.proto.is_empty() {
            let mut f = std::fs::File::create(dir.join("protocol_trace.jsonl"))?;
            write_jsonl(&self.proto, &mut f)?;
        }
        if !self.history.is_empty() {
            let mut f = std::fs::File::create(dir.join("history.jsonl"))?;
            write_jsonl(&self.history, &mut f)?;
        }
        if !self.snapshot_jsonl.is_empty() {
            std::fs::write(dir.join("snapshot.jsonl"), &self.snapshot_jsonl)?;
        }
        if !self.request_rows.is_empty() {
            let mut f = std::fs::File::create(dir.join("requests.csv"))?;
            crate::trace::request_trace_csv(&self.request_rows, &mut f)?;
        }
        Ok(())
    }

    /// Canonical summary serialization; byte-identical across runs with
    /// the same seed and scenario.
    pub fn summary_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.summary).expect("summary serializes");
        s.push('\n');
        s
    }
}
