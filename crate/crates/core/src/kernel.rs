//! Discrete-event kernel: virtual clock, ordered event queue, seeded
//! randomness, and latency sampling.
//!
//! Virtual time is an integer count of microseconds. Events with equal
//! fire times dispatch in scheduling order (a monotonically increasing
//! sequence number breaks ties), so a run is a deterministic function of
//! the seed and the scenario.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::collections::HashSet;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Virtual time in microseconds.
pub type Micros = u64;

pub const MILLISECOND: Micros = 1_000;
pub const SECOND: Micros = 1_000_000;

pub fn ms(v: u64) -> Micros {
    v * MILLISECOND
}

pub fn secs(v: u64) -> Micros {
    v * SECOND
}

/// Handle returned by [`EventQueue::schedule`]; allows cancellation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EventHandle(u64);

/// A scheduled event: fire time, tiebreaking sequence number, payload.
#[derive(Debug)]
pub struct SimEvent<P> {
    pub fire_at: Micros,
    pub seq: u64,
    pub payload: P,
}

/// Time-ordered event queue with a monotone virtual clock.
///
/// Cancellation is lazy: cancelled handles are skipped on pop.
#[derive(Debug)]
pub struct EventQueue<P> {
    now: Micros,
    next_seq: u64,
    heap: BinaryHeap<Reverse<HeapEntry>>,
    payloads: Vec<Option<P>>,
    free: Vec<u32>,
    cancelled: HashSet<u64>,
}

#[derive(Debug, PartialEq, Eq, PartialOrd, Ord)]
struct HeapEntry {
    fire_at: Micros,
    seq: u64,
    slot: u32,
}

impl<P> Default for EventQueue<P> {
    fn default() -> Self {
        Self::new()
    }
}

impl<P> EventQueue<P> {
    pub fn new() -> Self {
        EventQueue {
            now: 0,
            next_seq: 0,
            heap: BinaryHeap::new(),
            payloads: Vec::new(),
            free: Vec::new(),
            cancelled: HashSet::new(),
        }
    }

    pub fn now(&self) -> Micros {
        self.now
    }

    /// Enqueue `payload` to fire `delay` microseconds from now.
    pub fn schedule(&mut self, delay: Micros, payload: P) -> EventHandle {
        let seq = self.next_seq;
        self.next_seq += 1;
        let slot = match self.free.pop() {
            Some(s) => {
                self.payloads[s as usize] = Some(payload);
                s
            }
            None => {
                self.payloads.push(Some(payload));
                (self.payloads.len() - 1) as u32
            }
        };
        self.heap.push(Reverse(HeapEntry {
            fire_at: self.now + delay,
            seq,
            slot,
        }));
        EventHandle(seq)
    }

    /// Cancel a scheduled event. Cancelling an already-dispatched or
    /// already-cancelled handle is a no-op.
    pub fn cancel(&mut self, handle: EventHandle) {
        self.cancelled.insert(handle.0);
    }

    /// Pop the next event with `fire_at <= limit`, advancing the clock to
    /// its fire time. Returns `None` when nothing fires within the limit
    /// (the clock is left untouched; `run_until`-style drivers set it to
    /// the limit themselves).
    pub fn pop_next(&mut self, limit: Micros) -> Option<SimEvent<P>> {
        while let Some(Reverse(entry)) = self.heap.peek() {
            if entry.fire_at > limit {
                return None;
            }
            let Reverse(entry) = self.heap.pop().expect("peeked entry");
            let payload = self.payloads[entry.slot as usize]
                .take()
                .expect("payload present for scheduled event");
            self.free.push(entry.slot);
            if self.cancelled.remove(&entry.seq) {
                continue;
            }
            debug_assert!(entry.fire_at >= self.now, "clock must not go backwards");
            self.now = entry.fire_at;
            return Some(SimEvent {
                fire_at: entry.fire_at,
                seq: entry.seq,
                payload,
            });
        }
        None
    }

    /// Force the clock forward (used by drivers after draining to a limit).
    pub fn advance_to(&mut self, t: Micros) {
        debug_assert!(t >= self.now);
        self.now = t;
    }

    pub fn is_empty(&self) -> bool {
        self.heap.len() == self.cancelled.len()
    }
}

/// Inclusive uniform range in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencyRange {
    pub min: Micros,
    pub max: Micros,
}

impl LatencyRange {
    pub const fn new(min: Micros, max: Micros) -> Self {
        LatencyRange { min, max }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.min == 0 {
            return Err("latency range min must be > 0".into());
        }
        if self.min > self.max {
            return Err(format!("latency range min {} > max {}", self.min, self.max));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Micros {
        if self.min == self.max {
            return self.min;
        }
        rng.gen_range(self.min..=self.max)
    }

    pub fn midpoint(&self) -> f64 {
        (self.min + self.max) as f64 / 2.0
    }
}

/// Which latency distribution a message or action samples from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatencyKind {
    Tcp,
    Http,
    Store,
    ColdStart,
    Proc,
}

/// Uniform latency ranges for every simulated delay source.
///
/// TCP 1-2 ms and HTTP 8-20 ms are measured end-to-end figures; the
/// store round trip, cold start, and per-request processing ranges are
/// model parameters with configurable defaults.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatencyModel {
    pub tcp_rpc: LatencyRange,
    pub http_rpc: LatencyRange,
    pub store_roundtrip: LatencyRange,
    pub cold_start: LatencyRange,
    /// Instance-side compute per request; occupies a concurrency slot.
    pub proc: LatencyRange,
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel {
            tcp_rpc: LatencyRange::new(1_000, 2_000),
            http_rpc: LatencyRange::new(8_000, 20_000),
            store_roundtrip: LatencyRange::new(1_000, 3_000),
            cold_start: LatencyRange::new(300_000, 800_000),
            proc: LatencyRange::new(150, 350),
        }
    }
}

impl LatencyModel {
    pub fn range(&self, kind: LatencyKind) -> LatencyRange {
        match kind {
            LatencyKind::Tcp => self.tcp_rpc,
            LatencyKind::Http => self.http_rpc,
            LatencyKind::Store => self.store_roundtrip,
            LatencyKind::ColdStart => self.cold_start,
            LatencyKind::Proc => self.proc,
        }
    }

    /// Sample a duration for `kind`, uniform in its configured range.
    pub fn sample(&self, kind: LatencyKind, rng: &mut ChaCha8Rng) -> Micros {
        self.range(kind).sample(rng)
    }

    pub fn validate(&self) -> Result<(), String> {
        self.tcp_rpc.validate()?;
        self.http_rpc.validate()?;
        self.store_roundtrip.validate()?;
        self.cold_start.validate()?;
        self.proc.validate()
    }
}

/// Derive an independent RNG stream for one actor from the master seed.
///
/// Streams are keyed by an actor-kind tag plus index so that adding or
/// removing actors of one kind does not perturb the draws of another.
pub fn actor_rng(master_seed: u64, kind_tag: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(
        master_seed ^ splitmix64(kind_tag.wrapping_add(0x9e37_79b9_7f4a_7c15)) ^ index,
    ))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// RNG stream tags, one per actor family.
pub mod stream {
    pub const CLIENT: u64 = 1;
    pub const INSTANCE: u64 = 2;
    pub const PLATFORM: u64 = 3;
    pub const WORKLOAD: u64 = 4;
    pub const COORDINATOR: u64 = 5;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_delay_fires_before_later_events() {
        let mut q = EventQueue::new();
        q.schedule(10, "later");
        q.schedule(0, "now");
        let first = q.pop_next(u64::MAX).unwrap();
        assert_eq!(first.payload, "now");
        assert_eq!(first.fire_at, 0);
    }

    #[test]
    fn equal_fire_times_dispatch_in_insertion_order() {
        let mut q = EventQueue::new();
        q.schedule(5, 1);
        q.schedule(5, 2);
        q.schedule(5, 3);
        let order: Vec<i32> = std::iter::from_fn(|| q.pop_next(u64::MAX).map(|e| e.payload)).collect();
        assert_eq!(order, vec![1, 2, 3]);
    }

    #[test]
    fn schedule_is_relative_to_now() {
        let mut q = EventQueue::new();
        q.schedule(500, "a");
        q.pop_next(u64::MAX).unwrap();
        assert_eq!(q.now(), 500);
        q.schedule(1000, "b");
        let ev = q.pop_next(u64::MAX).unwrap();
        assert_eq!(ev.fire_at, 1500);
        assert_eq!(q.now(), 1500);
    }

    #[test]
    fn cancelled_event_never_dispatches() {
        let mut q = EventQueue::new();
        let h = q.schedule(5, "cancel me");
        q.schedule(6, "keep");
        q.cancel(h);
        let ev = q.pop_next(u64::MAX).unwrap();
        assert_eq!(ev.payload, "keep");
        assert!(q.pop_next(u64::MAX).is_none());
    }

    #[test]
    fn empty_queue_run_until_leaves_no_events() {
        let mut q: EventQueue<()> = EventQueue::new();
        assert!(q.pop_next(secs(10)).is_none());
        q.advance_to(secs(10));
        assert_eq!(q.now(), secs(10));
    }

    #[test]
    fn pop_respects_limit() {
        let mut q = EventQueue::new();
        q.schedule(100, "early");
        q.schedule(5_000, "late");
        assert_eq!(q.pop_next(1_000).unwrap().payload, "early");
        assert!(q.pop_next(1_000).is_none());
        assert_eq!(q.pop_next(10_000).unwrap().payload, "late");
    }

    #[test]
    fn clock_monotone_over_a_million_dispatches() {
        let mut q = EventQueue::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            q.schedule(rng.gen_range(0..1000), ());
        }
        let mut last = 0;
        let mut dispatched = 0u64;
        while dispatched < 1_000_000 {
            let ev = q.pop_next(u64::MAX).unwrap();
            assert!(ev.fire_at >= last);
            last = ev.fire_at;
            dispatched += 1;
            q.schedule(rng.gen_range(0..1000), ());
        }
    }

    #[test]
    fn degenerate_range_always_returns_the_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = LatencyRange::new(5_000, 5_000);
        for _ in 0..100 {
            assert_eq!(r.sample(&mut rng), 5_000);
        }
    }

    #[test]
    fn default_ranges_match_measured_figures() {
        let m = LatencyModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let t = m.sample(LatencyKind::Tcp, &mut rng);
            assert!((1_000..=2_000).contains(&t));
            let h = m.sample(LatencyKind::Http, &mut rng);
            assert!((8_000..=20_000).contains(&h));
        }
    }

    #[test]
    fn sample_statistics_within_two_percent_of_midpoint() {
        let m = LatencyModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for kind in [
            LatencyKind::Tcp,
            LatencyKind::Http,
            LatencyKind::Store,
            LatencyKind::ColdStart,
        ] {
            let range = m.range(kind);
            let mut sum = 0u64;
            let mut lo = u64::MAX;
            let mut hi = 0u64;
            const N: u64 = 100_000;
            for _ in 0..N {
                let v = m.sample(kind, &mut rng);
                sum += v;
                lo = lo.min(v);
                hi = hi.max(v);
            }
            assert!(lo >= range.min && hi <= range.max);
            let mean = sum as f64 / N as f64;
            let mid = range.midpoint();
            assert!(
                (mean - mid).abs() <= 0.02 * mid,
                "kind {kind:?}: mean {mean} vs midpoint {mid}"
            );
        }
    }

    #[test]
    fn actor_streams_are_stable_and_distinct() {
        let mut a = actor_rng(42, stream::CLIENT, 0);
        let mut a2 = actor_rng(42, stream::CLIENT, 0);
        let mut b = actor_rng(42, stream::CLIENT, 1);
        let mut c = actor_rng(42, stream::INSTANCE, 0);
        let draw = |r: &mut ChaCha8Rng| (0..4).map(|_| r.gen::<u64>()).collect::<Vec<_>>();
        let da = draw(&mut a);
        assert_eq!(da, draw(&mut a2));
        assert_ne!(da, draw(&mut b));
        assert_ne!(da, draw(&mut c));
    }
}
