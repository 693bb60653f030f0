//! End-to-end engine checks on small scenarios.

use mdsim_core::engine::run_scenario;
use mdsim_core::scenario::{Autoscaling, Scenario};
use mdsim_core::workload::{NamespaceSeed, OpMix, RateMode};

fn small_scenario() -> Scenario {
    let mut sc = Scenario::default();
    sc.name = "smoke".into();
    sc.seed = 1;
    sc.platform.n_deployments = 4;
    sc.workload.schedule.duration_s = 20;
    sc.workload.schedule.n_client_vms = 2;
    sc.workload.schedule.clients_per_vm = 8;
    sc.workload.schedule.pareto_scale = 200.0;
    sc.workload.namespace = NamespaceSeed {
        depth: 3,
        fanout: 4,
        files: 200,
    };
    sc.measurement_warmup_s = 5;
    sc.record_history = true;
    sc.record_protocol_trace = true;
    sc
}

#[test]
fn small_mixed_run_completes_and_balances() {
    let sc = small_scenario();
    let out = run_scenario(&sc);
    let c = &out.summary.counters;
    assert!(c.issued > 1000, "issued {}", c.issued);
    // Issued-op accounting: everything issued is accounted for.
    assert_eq!(
        c.issued,
        c.completed_ok + c.completed_domain_err + c.gave_up + c.in_flight_at_end,
        "op accounting must balance: {c:#?}"
    );
    assert_eq!(c.gave_up, 0, "no retries should exhaust in a quiet run");
    assert!(c.completed_ok > 0);
    assert!(out.summary.tree_shape_ok);
    assert!(out.summary.exactly_once_ok);
    assert_eq!(c.commit_barrier_violations, 0);
    assert!(c.cold_starts >= 1);
    assert!(!out.proto.is_empty());
    assert!(!out.history.is_empty());
    // Budget invariant.
    assert!(out.summary.counters.peak_vcpu <= sc.platform.vcpu_budget + 1e-9);
}

#[test]
fn determinism_byte_identical_summary() {
    let sc = small_scenario();
    let a = run_scenario(&sc).summary_json();
    let b = run_scenario(&sc).summary_json();
    assert_eq!(a, b, "same seed and scenario must be byte-identical");
    let mut sc2 = sc.clone();
    sc2.seed = 2;
    let c = run_scenario(&sc2).summary_json();
    assert_ne!(a, c, "different seeds should differ");
}

#[test]
fn fixed_ops_mode_runs_every_client_to_completion() {
    let mut sc = small_scenario();
    sc.record_history = false;
    sc.record_protocol_trace = false;
    sc.workload.mix = OpMix::read_only();
    sc.workload.schedule.mode = RateMode::FixedOpsPerClient { ops: 50 };
    sc.workload.schedule.duration_s = 300;
    let out = run_scenario(&sc);
    let c = &out.summary.counters;
    assert_eq!(c.issued, 2 * 8 * 50);
    assert_eq!(c.issued, c.completed_ok + c.completed_domain_err);
    assert!(out.summary.duration_s < 300.0, "should finish early");
}

#[test]
fn disabled_autoscaling_keeps_one_instance_per_deployment() {
    let mut sc = small_scenario();
    sc.record_history = false;
    sc.record_protocol_trace = false;
    sc.platform.autoscaling = Autoscaling::Disabled;
    let out = run_scenario(&sc);
    assert!(
        out.summary.counters.peak_instances <= sc.platform.n_deployments,
        "peak {} exceeds deployments",
        out.summary.counters.peak_instances
    );
}

#[test]
fn crashes_are_survived_with_exactly_once_effects() {
    let mut sc = small_scenario();
    sc.failure.period_s = Some(3);
    sc.workload.schedule.duration_s = 30;
    let out = run_scenario(&sc);
    let c = &out.summary.counters;
    assert!(c.kills >= 5, "kills {}", c.kills);
    assert_eq!(c.duplicate_commits, 0);
    assert!(out.summary.exactly_once_ok);
    assert!(out.summary.tree_shape_ok);
    assert_eq!(
        c.issued,
        c.completed_ok + c.completed_domain_err + c.gave_up + c.in_flight_at_end
    );
}
