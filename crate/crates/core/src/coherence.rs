//! The serverless memory coherence machinery: coordinator-side liveness
//! tracking and INV/ACK round bookkeeping, invalidation payloads, and
//! the batch planning used when subtree sub-operations are offloaded to
//! helper NameNodes.
//!
//! A round opens with a snapshot of the live instances in its target
//! deployments; instances that terminate mid-round are dropped from the
//! required set, so their ACKs are never awaited. The engine delivers
//! the INV and ACK messages with sampled latencies and commits the write
//! only after the round completes.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use serde::Serialize;

use crate::kernel::Micros;
use crate::partition::DeploymentId;

pub type InstanceId = u32;
pub type RoundId = u64;

/// What a round invalidates in the target caches.
#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum InvPayload {
    /// Individual entries, named by path.
    Point { entries: Vec<Arc<str>> },
    /// Everything under a path prefix (subtree operations only), plus
    /// point entries for rows outside the prefix (such as the parent
    /// directory of the subtree root).
    Prefix {
        prefix: Arc<str>,
        extra_points: Vec<Arc<str>>,
    },
}

/// An invalidation round in flight.
#[derive(Debug, Clone)]
pub struct Invalidation {
    pub round: RoundId,
    pub issuer: InstanceId,
    pub targets: Vec<DeploymentId>,
    pub payload: InvPayload,
}

#[derive(Debug)]
struct Round {
    leader: InstanceId,
    /// Engine continuation resumed when the round completes.
    exec: u64,
    required: BTreeSet<InstanceId>,
    acked: BTreeSet<InstanceId>,
    opened_at: Micros,
}

/// Tracks NameNode liveness and pending coherence rounds.
#[derive(Debug, Default)]
pub struct Coordinator {
    live: BTreeMap<DeploymentId, BTreeSet<InstanceId>>,
    instance_deployment: HashMap<InstanceId, DeploymentId>,
    rounds: HashMap<RoundId, Round>,
    next_round: RoundId,
    pub joins: u64,
    pub leaves: u64,
    /// Deployment-level invalidation messages issued (one per target
    /// deployment per round).
    pub invalidations_issued: u64,
    /// Prefix invalidations among those.
    pub prefix_invalidations_issued: u64,
}

/// Outcome of opening a round.
#[derive(Debug)]
pub struct OpenedRound {
    pub round: RoundId,
    /// Live instances that must be sent an INV and ACK it.
    pub fanout: Vec<InstanceId>,
    /// True when nothing needs invalidating (commit may proceed).
    pub complete: bool,
}

impl Coordinator {
    pub fn new() -> Self {
        Coordinator::default()
    }

    pub fn join(&mut self, deployment: DeploymentId, instance: InstanceId) {
        let inserted = self.live.entry(deployment).or_default().insert(instance);
        debug_assert!(inserted, "instance joined twice");
        self.instance_deployment.insert(instance, deployment);
        self.joins += 1;
    }

    /// Remove a terminated instance from the liveness set and from the
    /// required set of every pending round. Returns the engine tokens of
    /// rounds that completed because of the departure.
    pub fn leave(&mut self, instance: InstanceId) -> Vec<u64> {
        let Some(dep) = self.instance_deployment.remove(&instance) else {
            return Vec::new();
        };
        if let Some(set) = self.live.get_mut(&dep) {
            set.remove(&instance);
        }
        self.leaves += 1;
        let mut completed = Vec::new();
        let mut done_ids = Vec::new();
        for (id, round) in self.rounds.iter_mut() {
            if round.required.remove(&instance) && round.required.is_subset(&round.acked) {
                done_ids.push(*id);
            }
        }
        done_ids.sort_unstable();
        for id in done_ids {
            let round = self.rounds.remove(&id).expect("round present");
            completed.push(round.exec);
        }
        completed
    }

    pub fn is_live(&self, instance: InstanceId) -> bool {
        self.instance_deployment.contains_key(&instance)
    }

    pub fn live_in(&self, deployment: DeploymentId) -> impl Iterator<Item = InstanceId> + '_ {
        self.live
            .get(&deployment)
            .into_iter()
            .flat_map(|s| s.iter().copied())
    }

    pub fn live_counts(&self) -> BTreeMap<DeploymentId, usize> {
        self.live
            .iter()
            .map(|(d, s)| (*d, s.len()))
            .filter(|(_, n)| *n > 0)
            .collect()
    }

    pub fn total_live(&self) -> usize {
        self.live.values().map(|s| s.len()).sum()
    }

    /// Open a round against the current liveness snapshot.
    pub fn open_round(
        &mut self,
        leader: InstanceId,
        exec: u64,
        targets: &[DeploymentId],
        is_prefix: bool,
        now: Micros,
    ) -> OpenedRound {
        self.next_round += 1;
        let id = self.next_round;
        let mut required = BTreeSet::new();
        for d in targets {
            if let Some(set) = self.live.get(d) {
                required.extend(set.iter().copied());
            }
        }
        self.invalidations_issued += targets.len() as u64;
        if is_prefix {
            self.prefix_invalidations_issued += targets.len() as u64;
        }
        let fanout: Vec<InstanceId> = required.iter().copied().collect();
        if required.is_empty() {
            return OpenedRound {
                round: id,
                fanout,
                complete: true,
            };
        }
        self.rounds.insert(
            id,
            Round {
                leader,
                exec,
                required,
                acked: BTreeSet::new(),
                opened_at: now,
            },
        );
        OpenedRound {
            round: id,
            fanout,
            complete: false,
        }
    }

    /// Record an ACK; returns the engine token when the round is done.
    pub fn ack(&mut self, round: RoundId, instance: InstanceId) -> Option<u64> {
        let r = self.rounds.get_mut(&round)?;
        r.acked.insert(instance);
        if r.required.is_subset(&r.acked) {
            let r = self.rounds.remove(&round).expect("round present");
            Some(r.exec)
        } else {
            None
        }
    }

    /// Abandon a round (timeout or leader failure).
    pub fn cancel_round(&mut self, round: RoundId) -> bool {
        self.rounds.remove(&round).is_some()
    }

    pub fn round_open(&self, round: RoundId) -> bool {
        self.rounds.contains_key(&round)
    }

    pub fn round_age(&self, round: RoundId, now: Micros) -> Option<Micros> {
        self.rounds.get(&round).map(|r| now - r.opened_at)
    }

    pub fn round_leader(&self, round: RoundId) -> Option<InstanceId> {
        self.rounds.get(&round).map(|r| r.leader)
    }

    /// Rounds led by a crashed instance; the engine aborts their writes.
    pub fn rounds_led_by(&self, leader: InstanceId) -> Vec<RoundId> {
        let mut ids: Vec<RoundId> = self
            .rounds
            .iter()
            .filter(|(_, r)| r.leader == leader)
            .map(|(id, _)| *id)
            .collect();
        ids.sort_unstable();
        ids
    }
}

/// Split `n_sub_ops` into batches of at most `batch_size`.
pub fn plan_batches(n_sub_ops: u64, batch_size: u64) -> Vec<u64> {
    assert!(batch_size >= 1);
    if n_sub_ops == 0 {
        return Vec::new();
    }
    let full = n_sub_ops / batch_size;
    let rem = n_sub_ops % batch_size;
    let mut out = vec![batch_size; full as usize];
    if rem > 0 {
        out.push(rem);
    }
    out
}

/// Round-robin batch assignment across executors (leader plus helpers).
pub fn assign_batches(n_batches: usize, executors: &[InstanceId]) -> Vec<InstanceId> {
    assert!(!executors.is_empty());
    (0..n_batches).map(|i| executors[i % executors.len()]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dep(i: u32) -> DeploymentId {
        DeploymentId(i)
    }

    #[test]
    fn empty_targets_complete_immediately_with_zero_messages() {
        let mut c = Coordinator::new();
        c.join(dep(0), 1);
        let opened = c.open_round(1, 99, &[], false, 0);
        assert!(opened.complete);
        assert!(opened.fanout.is_empty());
        assert_eq!(c.invalidations_issued, 0);
    }

    #[test]
    fn round_with_three_ackers_completes_on_last_ack() {
        let mut c = Coordinator::new();
        for i in 1..=3 {
            c.join(dep(0), i);
        }
        let opened = c.open_round(1, 42, &[dep(0)], false, 0);
        assert!(!opened.complete);
        assert_eq!(opened.fanout, vec![1, 2, 3]);
        assert_eq!(c.ack(opened.round, 1), None);
        assert_eq!(c.ack(opened.round, 2), None);
        assert_eq!(c.ack(opened.round, 3), Some(42));
        assert!(!c.round_open(opened.round));
    }

    #[test]
    fn terminating_acker_is_excused() {
        let mut c = Coordinator::new();
        for i in 1..=3 {
            c.join(dep(0), i);
        }
        let opened = c.open_round(1, 7, &[dep(0)], false, 0);
        assert_eq!(c.ack(opened.round, 1), None);
        assert_eq!(c.ack(opened.round, 2), None);
        // Instance 3 terminates mid-round: the round completes with 2 ACKs.
        let completed = c.leave(3);
        assert_eq!(completed, vec![7]);
    }

    #[test]
    fn joins_and_leaves_are_counted_once_each() {
        let mut c = Coordinator::new();
        c.join(dep(0), 1);
        c.join(dep(1), 2);
        c.leave(1);
        c.leave(1); // unknown now; not counted
        assert_eq!(c.joins, 2);
        assert_eq!(c.leaves, 1);
        assert_eq!(c.total_live(), 1);
    }

    #[test]
    fn late_joiners_are_not_required() {
        let mut c = Coordinator::new();
        c.join(dep(0), 1);
        let opened = c.open_round(9, 1, &[dep(0)], false, 0);
        c.join(dep(0), 2); // joins mid-round
        assert_eq!(c.ack(opened.round, 1), Some(1));
    }

    #[test]
    fn deployment_level_message_accounting() {
        let mut c = Coordinator::new();
        c.join(dep(2), 1);
        c.join(dep(5), 2);
        let opened = c.open_round(1, 0, &[dep(2), dep(5)], true, 0);
        assert_eq!(opened.fanout.len(), 2);
        assert_eq!(c.invalidations_issued, 2);
        assert_eq!(c.prefix_invalidations_issued, 2);
    }

    #[test]
    fn batch_planning_is_ceiling_division() {
        assert_eq!(plan_batches(1300, 512), vec![512, 512, 276]);
        assert_eq!(plan_batches(1, 512), vec![1]);
        assert_eq!(plan_batches(0, 512), Vec::<u64>::new());
        assert_eq!(plan_batches(1024, 512), vec![512, 512]);
    }

    #[test]
    fn batch_assignment_round_robins() {
        assert_eq!(assign_batches(5, &[10, 20]), vec![10, 20, 10, 20, 10]);
        assert_eq!(assign_batches(2, &[3]), vec![3, 3]);
    }
}
