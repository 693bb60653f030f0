//! Per-second throughput/latency recorders, latency CDFs, and the three
//! cost accountings (pay-per-use, simplified/provisioned, serverful
//! cluster) plus the operations-per-second-per-dollar metric.

use serde::{Deserialize, Serialize};

use crate::kernel::{Micros, MILLISECOND, SECOND};
use crate::workload::OpKind;

/// FaaS and VM price points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostModel {
    /// Dollars per GB-second of active memory.
    pub gb_second_price: f64,
    /// Dollars per million platform invocations (HTTP requests).
    pub per_million_requests: f64,
    /// Billing granularity in microseconds (1 ms).
    pub billing_granularity_us: u64,
    /// Hourly price of one 16-vCPU serverful VM.
    pub vm_hour_price: f64,
    pub vm_vcpus: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            gb_second_price: 0.000_016_666_7,
            per_million_requests: 0.20,
            billing_granularity_us: 1_000,
            vm_hour_price: 1.008,
            vm_vcpus: 16.0,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<(), String> {
        if self.gb_second_price < 0.0 || self.per_million_requests < 0.0 || self.vm_hour_price < 0.0
        {
            return Err("prices must be non-negative".into());
        }
        if self.billing_granularity_us == 0 || self.vm_vcpus <= 0.0 {
            return Err("billing granularity and vm size must be positive".into());
        }
        Ok(())
    }

    /// Round a busy interval up to the billing granularity, in
    /// granularity units.
    fn billed_units(&self, start: Micros, end: Micros) -> u64 {
        debug_assert!(end >= start);
        (end - start).div_ceil(self.billing_granularity_us)
    }

    /// Dollars for one instance-second of `mem_gb` memory.
    fn gb_rate(&self, mem_gb: f64) -> f64 {
        mem_gb * self.gb_second_price
    }
}

/// Pay-per-use: bill only the 1 ms slices during which an instance was
/// actively serving at least one request, plus per-invocation fees.
/// `busy` holds maximal busy intervals per instance; overlapping
/// requests inside one interval are billed once.
pub fn cost_pay_per_use(
    model: &CostModel,
    busy: &[Vec<(Micros, Micros)>],
    mem_gb: f64,
    invocations: u64,
) -> f64 {
    let mut billed_units = 0u64;
    for intervals in busy {
        for (s, e) in intervals {
            billed_units += model.billed_units(*s, *e);
        }
    }
    let seconds = billed_units as f64 * model.billing_granularity_us as f64 / SECOND as f64;
    seconds * model.gb_rate(mem_gb) + request_fees(model, invocations)
}

/// Simplified/provisioned: bill the full provisioned lifetime of each
/// instance at the same memory rate (plus the same invocation fees), the
/// way a VM would be charged.
pub fn cost_simplified(
    model: &CostModel,
    provisioned: &[(Micros, Micros)],
    mem_gb: f64,
    invocations: u64,
) -> f64 {
    let mut billed_units = 0u64;
    for (s, e) in provisioned {
        billed_units += model.billed_units(*s, *e);
    }
    let seconds = billed_units as f64 * model.billing_granularity_us as f64 / SECOND as f64;
    seconds * model.gb_rate(mem_gb) + request_fees(model, invocations)
}

/// Serverful baseline: the whole cluster's vCPUs are billed for the
/// whole run at the hourly VM rate, irrespective of utilization.
pub fn cost_serverful(model: &CostModel, cluster_vcpus: f64, duration: Micros) -> f64 {
    let hours = duration as f64 / (3600.0 * SECOND as f64);
    model.vm_hour_price * (cluster_vcpus / model.vm_vcpus) * hours
}

pub fn request_fees(model: &CostModel, invocations: u64) -> f64 {
    invocations as f64 / 1_000_000.0 * model.per_million_requests
}

/// Performance-per-cost: ops/sec per dollar. `None` when cost is zero.
pub fn perf_per_cost(throughput_ops_per_s: f64, cost_dollars: f64) -> Option<f64> {
    if cost_dollars <= 0.0 {
        None
    } else {
        Some(throughput_ops_per_s / cost_dollars)
    }
}

/// Nearest-rank quantile over raw latency samples.
///
/// Input need not be sorted; the function sorts a copy. Exact for the
/// fixture-style inputs used in tests; the streaming recorders below use
/// histograms instead.
pub fn latency_quantiles(samples: &[Micros], qs: &[f64]) -> Vec<Micros> {
    assert!(!samples.is_empty(), "quantiles need at least one sample");
    let mut sorted = samples.to_vec();
    sorted.sort_unstable();
    qs.iter()
        .map(|q| {
            let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
            sorted[rank - 1]
        })
        .collect()
}

/// Full empirical CDF as (latency, cumulative fraction) steps.
pub fn latency_cdf(samples: &[Micros]) -> Vec<(Micros, f64)> {
    let mut sorted = samples.to_vec();
    sorted.sort_unstable();
    let n = sorted.len() as f64;
    let mut out: Vec<(Micros, f64)> = Vec::new();
    for (i, v) in sorted.iter().enumerate() {
        let frac = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == *v => last.1 = frac,
            _ => out.push((*v, frac)),
        }
    }
    out
}

// ---------------------------------------------------------------------
// Streaming recorders
// ---------------------------------------------------------------------

const HIST_TIERS: usize = 20;
const HIST_BUCKETS_PER_TIER: usize = 64;

/// Log-linear latency histogram: 64 linear buckets per power-of-two
/// tier, covering 1 us to ~65 s with <= 1/64 relative error.
#[derive(Debug, Clone)]
pub struct LatencyHistogram {
    buckets: Vec<u64>,
    count: u64,
    sum: u128,
    max: Micros,
    min: Micros,
}

impl Default for LatencyHistogram {
    fn default() -> Self {
        Self::new()
    }
}

impl LatencyHistogram {
    pub fn new() -> Self {
        LatencyHistogram {
            buckets: vec![0; HIST_TIERS * HIST_BUCKETS_PER_TIER],
            count: 0,
            sum: 0,
            max: 0,
            min: Micros::MAX,
        }
    }

    fn index(v: Micros) -> usize {
        let v = v.max(1);
        if v < 64 {
            // Values below 64 us land in the first tier, exactly.
            return (v - 1) as usize;
        }
        let t = 63 - v.leading_zeros() as usize; // floor(log2 v), >= 6
        let tier = t - 5;
        if tier >= HIST_TIERS {
            return HIST_TIERS * HIST_BUCKETS_PER_TIER - 1;
        }
        let base = tier * HIST_BUCKETS_PER_TIER;
        let offset = ((v >> (t - 5)) - 32) as usize;
        base + offset
    }

    /// Lower bound of a bucket.
    fn bucket_value(idx: usize) -> Micros {
        let tier = idx / HIST_BUCKETS_PER_TIER;
        let off = (idx % HIST_BUCKETS_PER_TIER) as u64;
        if tier == 0 {
            off + 1
        } else {
            (off + 32) << tier
        }
    }

    pub fn record(&mut self, v: Micros) {
        self.buckets[Self::index(v)] += 1;
        self.count += 1;
        self.sum += u128::from(v);
        self.max = self.max.max(v);
        self.min = self.min.min(v);
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum as f64 / self.count as f64
        }
    }

    pub fn quantile(&self, q: f64) -> Micros {
        if self.count == 0 {
            return 0;
        }
        let rank = ((q * self.count as f64).ceil() as u64).clamp(1, self.count);
        let mut seen = 0u64;
        for (i, c) in self.buckets.iter().enumerate() {
            seen += c;
            if seen >= rank {
                return Self::bucket_value(i).min(self.max).max(self.min);
            }
        }
        self.max
    }

    /// Bucketed CDF rows `(latency_us, cumulative_fraction)`.
    pub fn cdf_rows(&self) -> Vec<(Micros, f64)> {
        let mut rows = Vec::new();
        let mut seen = 0u64;
        for (i, c) in self.buckets.iter().enumerate() {
            if *c == 0 {
                continue;
            }
            seen += c;
            rows.push((
                Self::bucket_value(i).min(self.max),
                seen as f64 / self.count as f64,
            ));
        }
        rows
    }
}

/// Per-second bucket of the run-wide metric series.
#[derive(Debug, Clone, Default, Serialize)]
pub struct SecondBucket {
    pub completed: u64,
    pub issued: u64,
    pub failed: u64,
    pub tcp: u64,
    pub http: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub active_instances: u32,
    pub vcpu_in_use: f64,
    pub queued_invocations: u64,
}

/// Streaming run metrics: per-second buckets plus per-op histograms.
#[derive(Debug)]
pub struct MetricSeries {
    pub seconds: Vec<SecondBucket>,
    pub per_op: Vec<LatencyHistogram>,
    pub read_hist: LatencyHistogram,
    pub all_hist: LatencyHistogram,
}

impl MetricSeries {
    pub fn new() -> Self {
        MetricSeries {
            seconds: Vec::new(),
            per_op: (0..OpKind::ALL.len())
                .map(|_| LatencyHistogram::new())
                .collect(),
            read_hist: LatencyHistogram::new(),
            all_hist: LatencyHistogram::new(),
        }
    }

    pub fn bucket_at(&mut self, t: Micros) -> &mut SecondBucket {
        let idx = (t / SECOND) as usize;
        if idx >= self.seconds.len() {
            self.seconds.resize(idx + 1, SecondBucket::default());
        }
        &mut self.seconds[idx]
    }

    pub fn record_completion(&mut self, t: Micros, kind: OpKind, latency: Micros) {
        self.bucket_at(t).completed += 1;
        let idx = OpKind::ALL.iter().position(|k| *k == kind).expect("known op");
        self.per_op[idx].record(latency);
        self.all_hist.record(latency);
        if kind.is_read() {
            self.read_hist.record(latency);
        }
    }

    pub fn total_completed(&self) -> u64 {
        self.seconds.iter().map(|b| b.completed).sum()
    }

    pub fn op_hist(&self, kind: OpKind) -> &LatencyHistogram {
        let idx = OpKind::ALL.iter().position(|k| *k == kind).expect("known op");
        &self.per_op[idx]
    }
}

impl Default for MetricSeries {
    fn default() -> Self {
        Self::new()
    }
}

/// Tracks the busy intervals of one instance for pay-per-use billing:
/// an instance is busy while it has at least one in-flight request.
#[derive(Debug, Default, Clone)]
pub struct BusyTracker {
    in_flight: u32,
    busy_since: Micros,
    billed_units: u64,
    intervals: u64,
}

impl BusyTracker {
    pub fn request_started(&mut self, now: Micros) {
        if self.in_flight == 0 {
            self.busy_since = now;
        }
        self.in_flight += 1;
    }

    /// Returns the maximal busy interval that just closed, if any.
    pub fn request_finished(&mut self, now: Micros, model: &CostModel) -> Option<(Micros, Micros)> {
        debug_assert!(self.in_flight > 0);
        self.in_flight -= 1;
        if self.in_flight == 0 {
            self.billed_units += model.billed_units(self.busy_since, now);
            self.intervals += 1;
            Some((self.busy_since, now))
        } else {
            None
        }
    }

    /// Close any open interval (instance terminated or run ended).
    pub fn finalize(&mut self, now: Micros, model: &CostModel) {
        self.finalize_interval(now, model);
    }

    pub fn finalize_interval(
        &mut self,
        now: Micros,
        model: &CostModel,
    ) -> Option<(Micros, Micros)> {
        if self.in_flight > 0 {
            self.billed_units += model.billed_units(self.busy_since, now);
            self.intervals += 1;
            self.in_flight = 0;
            Some((self.busy_since, now))
        } else {
            None
        }
    }

    pub fn billed_units(&self) -> u64 {
        self.billed_units
    }

    pub fn billed_seconds(&self, model: &CostModel) -> f64 {
        self.billed_units as f64 * model.billing_granularity_us as f64 / SECOND as f64
    }
}

pub fn micros_to_ms(v: Micros) -> f64 {
    v as f64 / MILLISECOND as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::secs;

    #[test]
    fn pay_per_use_fixture_one_second_of_30gb() {
        let m = CostModel::default();
        // One 30 GB instance busy exactly 1000 ms, no billed requests.
        let cost = cost_pay_per_use(&m, &[vec![(0, 1_000_000)]], 30.0, 0);
        assert!((cost - 0.000_500_001).abs() < 1e-12, "got {cost}");
    }

    #[test]
    fn one_million_requests_cost_twenty_cents() {
        let m = CostModel::default();
        let cost = cost_pay_per_use(&m, &[], 30.0, 1_000_000);
        assert!((cost - 0.20).abs() < 1e-12);
    }

    #[test]
    fn idle_instance_costs_nothing() {
        let m = CostModel::default();
        assert_eq!(cost_pay_per_use(&m, &[vec![]], 30.0, 0), 0.0);
    }

    #[test]
    fn busy_time_rounds_up_to_the_millisecond() {
        let m = CostModel::default();
        // 1 us of work bills one full 1 ms slice.
        let c1 = cost_pay_per_use(&m, &[vec![(0, 1)]], 1.0, 0);
        let c2 = cost_pay_per_use(&m, &[vec![(0, 1_000)]], 1.0, 0);
        assert!((c1 - c2).abs() < 1e-15);
    }

    #[test]
    fn simplified_is_at_least_pay_per_use() {
        let m = CostModel::default();
        // Provisioned 10 s, busy 5 s.
        let busy = vec![vec![(secs(1), secs(6))]];
        let prov = vec![(secs(0), secs(10))];
        let ppu = cost_pay_per_use(&m, &busy, 30.0, 100);
        let simpl = cost_simplified(&m, &prov, 30.0, 100);
        assert!(simpl >= ppu);
        assert!((simpl - ppu - 5.0 * 30.0 * m.gb_second_price).abs() < 1e-12);
    }

    #[test]
    fn simplified_with_no_instances_is_zero() {
        let m = CostModel::default();
        assert_eq!(cost_simplified(&m, &[], 30.0, 0), 0.0);
    }

    #[test]
    fn fifty_percent_duty_doubles_cost() {
        let m = CostModel::default();
        let busy: Vec<(Micros, Micros)> = (0..50).map(|i| (secs(2 * i), secs(2 * i + 1))).collect();
        let ppu = cost_pay_per_use(&m, &[busy], 30.0, 0);
        let simpl = cost_simplified(&m, &[(0, secs(100))], 30.0, 0);
        let ratio = simpl / ppu;
        assert!((ratio - 2.0).abs() < 1e-9, "ratio {ratio}");
    }

    #[test]
    fn serverful_cluster_price_scales_with_vcpus_and_time() {
        let m = CostModel::default();
        let c = cost_serverful(&m, 512.0, secs(3600));
        assert!((c - 1.008 * 32.0).abs() < 1e-9);
    }

    #[test]
    fn perf_per_cost_definitions() {
        assert_eq!(perf_per_cost(1000.0, 0.0), None);
        let a = perf_per_cost(1000.0, 0.5).unwrap();
        let b = perf_per_cost(1000.0, 1.0).unwrap();
        assert!((a / b - 2.0).abs() < 1e-12, "doubling cost halves the metric");
        // Aggregate form: average throughput over total cost.
        let agg = perf_per_cost(45_690.0, 0.35).unwrap();
        assert!((agg - 45_690.0 / 0.35).abs() < 1e-9);
    }

    #[test]
    fn single_sample_quantiles_are_that_sample() {
        let qs = latency_quantiles(&[1234], &[0.5, 0.9, 0.99, 0.999]);
        assert_eq!(qs, vec![1234, 1234, 1234, 1234]);
    }

    #[test]
    fn uniform_synthetic_quantiles() {
        // 1..100 ms uniform: p50 should be ~50 ms within 2 ms.
        let samples: Vec<Micros> = (1..=100).map(|i| i * 1000).collect();
        let qs = latency_quantiles(&samples, &[0.5]);
        assert!((qs[0] as i64 - 50_000).abs() <= 2_000);
    }

    #[test]
    fn cdf_is_monotone_and_ends_at_one() {
        let samples = vec![5, 1, 3, 3, 9];
        let cdf = latency_cdf(&samples);
        assert_eq!(cdf.last().unwrap().1, 1.0);
        for w in cdf.windows(2) {
            assert!(w[0].0 < w[1].0);
            assert!(w[0].1 < w[1].1);
        }
    }

    #[test]
    fn histogram_quantiles_close_to_exact() {
        let mut h = LatencyHistogram::new();
        let samples: Vec<Micros> = (1..=10_000).collect();
        for s in &samples {
            h.record(*s);
        }
        let exact = latency_quantiles(&samples, &[0.5])[0];
        let approx = h.quantile(0.5);
        let err = (approx as f64 - exact as f64).abs() / exact as f64;
        assert!(err <= 0.02, "p50 {approx} vs {exact}");
        assert_eq!(h.count(), 10_000);
    }

    #[test]
    fn throughput_buckets_sum_to_total() {
        let mut s = MetricSeries::new();
        s.record_completion(100, OpKind::Read, 1500);
        s.record_completion(secs(1) + 5, OpKind::Stat, 900);
        s.record_completion(secs(1) + 6, OpKind::Create, 4000);
        assert_eq!(s.total_completed(), 3);
        assert_eq!(s.seconds[0].completed, 1);
        assert_eq!(s.seconds[1].completed, 2);
        assert_eq!(s.op_hist(OpKind::Read).count(), 1);
        assert_eq!(s.read_hist.count(), 2);
    }

    #[test]
    fn busy_tracker_merges_overlapping_requests() {
        let m = CostModel::default();
        let mut b = BusyTracker::default();
        b.request_started(0);
        b.request_started(500); // overlaps; no double billing
        b.request_finished(800, &m);
        b.request_finished(2_000, &m);
        assert_eq!(b.billed_units(), 2); // [0, 2000 us) = 2 ms
        b.request_started(10_000);
        b.finalize(10_500, &m);
        assert_eq!(b.billed_units(), 3);
    }
}
