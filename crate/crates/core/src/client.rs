//! Client-side RPC policies: exponential backoff with full jitter,
//! moving-window latency tracking, straggler cancel-and-resubmit, and
//! the anti-thrashing mode that suppresses HTTP invocations when latency
//! spikes suggest platform container churn.
//!
//! These are pure, reentrant policy functions and small state machines;
//! the connection tables and the submit/retry loop live in the engine.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::kernel::{ms, secs, Micros};

/// Pack (client, sequence) into the globally unique request id that
/// stays stable across resubmissions.
pub fn request_id(client: u32, seq: u32) -> u64 {
    (u64::from(client) << 32) | u64::from(seq)
}

pub fn request_client(rid: u64) -> u32 {
    (rid >> 32) as u32
}

/// Tunables for the client library.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClientConfig {
    /// Probability that a would-be TCP RPC is routed over HTTP so the
    /// platform can observe load (the fine-grained auto-scaling knob).
    pub replacement_probability: f64,
    pub backoff_base: Micros,
    pub backoff_cap: Micros,
    /// Transport-level attempts per request before giving up.
    pub attempt_cap: u32,
    /// Straggler threshold K: cancel and resubmit at K x window average.
    pub straggler_factor: f64,
    /// Anti-thrashing entry threshold T (sensible range 2-3).
    pub anti_thrash_threshold: f64,
    /// Completed-latency window size W.
    pub latency_window: usize,
    pub request_timeout: Micros,
    pub result_cache_ttl: Micros,
    /// Clients per TCP server on a VM; `None` puts every client on the
    /// VM behind one shared server.
    pub max_clients_per_tcp_server: Option<u32>,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            replacement_probability: 0.01,
            backoff_base: ms(50),
            backoff_cap: secs(5),
            attempt_cap: 8,
            straggler_factor: 10.0,
            anti_thrash_threshold: 2.5,
            latency_window: 100,
            request_timeout: secs(2),
            result_cache_ttl: secs(30),
            max_clients_per_tcp_server: None,
        }
    }
}

impl ClientConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.replacement_probability) {
            return Err("replacement probability must be in [0, 1]".into());
        }
        if self.attempt_cap == 0 || self.latency_window == 0 {
            return Err("attempt cap and latency window must be >= 1".into());
        }
        if self.straggler_factor <= 1.0 || self.anti_thrash_threshold <= 1.0 {
            return Err("straggler and anti-thrash thresholds must exceed 1".into());
        }
        Ok(())
    }
}

/// Full-jitter exponential backoff: uniform in
/// `[0, base * 2^(attempt-1)]`, capped.
pub fn next_backoff(cfg: &ClientConfig, attempt: u32, rng: &mut ChaCha8Rng) -> Micros {
    debug_assert!(attempt >= 1);
    let ceiling = cfg
        .backoff_base
        .saturating_mul(1u64.checked_shl(attempt - 1).unwrap_or(u64::MAX))
        .min(cfg.backoff_cap);
    rng.gen_range(0..=ceiling)
}

/// Straggler verdict for an in-flight TCP request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StragglerVerdict {
    Keep,
    CancelAndResubmit,
}

pub fn check_straggler(
    cfg: &ClientConfig,
    elapsed: Micros,
    window_avg: Option<f64>,
) -> StragglerVerdict {
    match window_avg {
        // No baseline yet: keep waiting.
        None => StragglerVerdict::Keep,
        Some(avg) => {
            if elapsed as f64 >= cfg.straggler_factor * avg {
                StragglerVerdict::CancelAndResubmit
            } else {
                StragglerVerdict::Keep
            }
        }
    }
}

/// Ring buffer over the last W completed-request latencies.
#[derive(Debug, Clone)]
pub struct LatencyWindow {
    buf: Vec<Micros>,
    next: usize,
    filled: usize,
    sum: u64,
}

impl LatencyWindow {
    pub fn new(size: usize) -> Self {
        assert!(size > 0);
        LatencyWindow {
            buf: vec![0; size],
            next: 0,
            filled: 0,
            sum: 0,
        }
    }

    pub fn push(&mut self, v: Micros) {
        if self.filled == self.buf.len() {
            self.sum -= self.buf[self.next];
        } else {
            self.filled += 1;
        }
        self.buf[self.next] = v;
        self.sum += v;
        self.next = (self.next + 1) % self.buf.len();
    }

    pub fn average(&self) -> Option<f64> {
        if self.filled == 0 {
            None
        } else {
            Some(self.sum as f64 / self.filled as f64)
        }
    }

    pub fn len(&self) -> usize {
        self.filled
    }

    pub fn is_empty(&self) -> bool {
        self.filled == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Normal,
    AntiThrash,
}

/// Per-client mode state machine.
///
/// Entry: a completed latency at least T x the moving average. Exit:
/// the moving average stays below T x the pre-entry average for one
/// full window of completions (hysteresis).
#[derive(Debug, Clone)]
pub struct ModeState {
    mode: Mode,
    pre_entry_avg: f64,
    below_streak: usize,
    entries: u64,
}

impl ModeState {
    pub fn new() -> Self {
        ModeState {
            mode: Mode::Normal,
            pre_entry_avg: 0.0,
            below_streak: 0,
            entries: 0,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn entries(&self) -> u64 {
        self.entries
    }

    /// Feed one completed latency; updates the window and the mode.
    pub fn observe(&mut self, cfg: &ClientConfig, window: &mut LatencyWindow, latency: Micros) {
        if self.mode == Mode::Normal {
            if let Some(avg) = window.average() {
                if latency as f64 >= cfg.anti_thrash_threshold * avg {
                    self.mode = Mode::AntiThrash;
                    self.pre_entry_avg = avg;
                    self.below_streak = 0;
                    self.entries += 1;
                }
            }
        }
        window.push(latency);
        if self.mode == Mode::AntiThrash {
            let avg = window.average().unwrap_or(f64::MAX);
            if avg < cfg.anti_thrash_threshold * self.pre_entry_avg {
                self.below_streak += 1;
                if self.below_streak >= cfg.latency_window {
                    self.mode = Mode::Normal;
                    self.below_streak = 0;
                }
            } else {
                self.below_streak = 0;
            }
        }
    }
}

impl Default for ModeState {
    fn default() -> Self {
        Self::new()
    }
}

/// Channel decision for one submission attempt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Tcp,
    Http,
}

/// Decide the channel given connection availability and mode.
///
/// Normal mode: use TCP when a connection to the target deployment
/// exists (own table first, then a sibling server's), then flip the
/// replacement coin. Anti-thrash mode: never replace, and fall back to
/// any TCP connection on the VM before touching HTTP.
pub fn choose_channel(
    cfg: &ClientConfig,
    mode: Mode,
    has_conn_to_target: bool,
    has_any_conn_on_vm: bool,
    rng: &mut ChaCha8Rng,
) -> Channel {
    match mode {
        Mode::Normal => {
            if !has_conn_to_target {
                return Channel::Http;
            }
            if cfg.replacement_probability > 0.0 && rng.gen::<f64>() < cfg.replacement_probability {
                Channel::Http
            } else {
                Channel::Tcp
            }
        }
        Mode::AntiThrash => {
            if has_conn_to_target || has_any_conn_on_vm {
                Channel::Tcp
            } else {
                Channel::Http
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn cfg() -> ClientConfig {
        ClientConfig::default()
    }

    #[test]
    fn request_ids_pack_and_unpack() {
        let rid = request_id(7, 42);
        assert_eq!(request_client(rid), 7);
        assert_ne!(request_id(7, 43), rid);
        assert_ne!(request_id(8, 42), rid);
    }

    #[test]
    fn backoff_attempt_one_is_within_base() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            assert!(next_backoff(&c, 1, &mut rng) <= ms(50));
        }
    }

    #[test]
    fn backoff_attempt_three_is_within_four_times_base() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut hit_upper_half = false;
        for _ in 0..1000 {
            let b = next_backoff(&c, 3, &mut rng);
            assert!(b <= ms(200));
            hit_upper_half |= b > ms(100);
        }
        assert!(hit_upper_half, "jitter should cover the full range");
    }

    #[test]
    fn backoff_caps_at_five_seconds() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            assert!(next_backoff(&c, 20, &mut rng) <= secs(5));
        }
        assert!(next_backoff(&c, 64, &mut rng) <= secs(5));
    }

    #[test]
    fn straggler_threshold_is_inclusive() {
        let c = cfg();
        assert_eq!(
            check_straggler(&c, ms(50), Some(5_000.0)),
            StragglerVerdict::CancelAndResubmit
        );
        assert_eq!(
            check_straggler(&c, ms(49), Some(5_000.0)),
            StragglerVerdict::Keep
        );
        assert_eq!(check_straggler(&c, secs(10), None), StragglerVerdict::Keep);
    }

    #[test]
    fn window_average_tracks_last_w() {
        let mut w = LatencyWindow::new(3);
        assert_eq!(w.average(), None);
        w.push(10);
        w.push(20);
        assert_eq!(w.average(), Some(15.0));
        w.push(30);
        w.push(100); // evicts 10
        assert_eq!(w.average(), Some(50.0));
        assert_eq!(w.len(), 3);
    }

    #[test]
    fn anti_thrash_entry_at_threshold() {
        let c = cfg(); // T = 2.5
        let mut w = LatencyWindow::new(c.latency_window);
        let mut m = ModeState::new();
        // Average 4 ms.
        for _ in 0..10 {
            m.observe(&c, &mut w, 4_000);
        }
        assert_eq!(m.mode(), Mode::Normal);
        // 11 ms >= 2.5 * 4 ms: enter anti-thrash.
        m.observe(&c, &mut w, 11_000);
        assert_eq!(m.mode(), Mode::AntiThrash);
    }

    #[test]
    fn anti_thrash_does_not_enter_below_threshold() {
        let c = cfg();
        let mut w = LatencyWindow::new(c.latency_window);
        let mut m = ModeState::new();
        for _ in 0..10 {
            m.observe(&c, &mut w, 4_000);
        }
        m.observe(&c, &mut w, 9_900); // 9.9 < 10
        assert_eq!(m.mode(), Mode::Normal);
    }

    #[test]
    fn anti_thrash_exits_after_a_full_quiet_window() {
        let c = ClientConfig {
            latency_window: 5,
            ..cfg()
        };
        let mut w = LatencyWindow::new(c.latency_window);
        let mut m = ModeState::new();
        for _ in 0..5 {
            m.observe(&c, &mut w, 4_000);
        }
        m.observe(&c, &mut w, 50_000);
        assert_eq!(m.mode(), Mode::AntiThrash);
        // The spike inflates the average until it leaves the window
        // (4 pushes), then a full quiet window (5 more) is required.
        for _ in 0..8 {
            m.observe(&c, &mut w, 4_000);
        }
        assert_eq!(m.mode(), Mode::AntiThrash);
        m.observe(&c, &mut w, 4_000);
        assert_eq!(m.mode(), Mode::Normal);
    }

    #[test]
    fn channel_choice_boundaries() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p0 = ClientConfig {
            replacement_probability: 0.0,
            ..cfg()
        };
        let p1 = ClientConfig {
            replacement_probability: 1.0,
            ..cfg()
        };
        for _ in 0..200 {
            assert_eq!(
                choose_channel(&p0, Mode::Normal, true, true, &mut rng),
                Channel::Tcp
            );
            assert_eq!(
                choose_channel(&p1, Mode::Normal, true, true, &mut rng),
                Channel::Http
            );
            assert_eq!(
                choose_channel(&p0, Mode::Normal, false, true, &mut rng),
                Channel::Http
            );
        }
    }

    #[test]
    fn anti_thrash_suppresses_replacement_and_prefers_any_conn() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p1 = ClientConfig {
            replacement_probability: 1.0,
            ..cfg()
        };
        for _ in 0..200 {
            assert_eq!(
                choose_channel(&p1, Mode::AntiThrash, true, true, &mut rng),
                Channel::Tcp
            );
            assert_eq!(
                choose_channel(&p1, Mode::AntiThrash, false, true, &mut rng),
                Channel::Tcp
            );
            assert_eq!(
                choose_channel(&p1, Mode::AntiThrash, false, false, &mut rng),
                Channel::Http
            );
        }
    }

    #[test]
    fn threshold_range_is_configurable() {
        for t in [2.0, 2.5, 3.0] {
            let c = ClientConfig {
                anti_thrash_threshold: t,
                ..cfg()
            };
            c.validate().unwrap();
        }
        assert!(ClientConfig {
            anti_thrash_threshold: 0.5,
            ..cfg()
        }
        .validate()
        .is_err());
    }
}
