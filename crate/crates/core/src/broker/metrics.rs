//! Broker counters, re-encryption latency histogram and the 1 Hz sampler
//! producing per-client outbound throughput and process CPU usage.

use std::collections::HashMap;
use std::io::{self, Write};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use super::session::Session;

pub const SAMPLE_PERIOD: Duration = Duration::from_secs(1);
pub const CSV_HEADER: &str = "unix_ts,client_id,bytes_out,cpu_user_pct,cpu_sys_pct";

/// Log2 buckets of re-encryption round-trip time in microseconds:
/// bucket i counts latencies in [2^(i-1), 2^i) us, bucket 0 is < 1 us.
pub const LATENCY_BUCKETS: usize = 24;

#[derive(Default)]
pub struct Counters {
    pub received: AtomicU64,
    pub forwarded: AtomicU64,
    /// Per-subscriber deliveries that failed in the trusted core.
    pub dropped: AtomicU64,
    pub acl_denied: AtomicU64,
    pub malformed: AtomicU64,
    pub origin_mismatch: AtomicU64,
    pub oversize: AtomicU64,
    pub queue_overflow: AtomicU64,
    pub handshakes_ok: AtomicU64,
    pub handshakes_failed: AtomicU64,
    pub protocol_errors: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CounterSnapshot {
    pub received: u64,
    pub forwarded: u64,
    pub dropped: u64,
    pub acl_denied: u64,
    pub malformed: u64,
    pub origin_mismatch: u64,
    pub oversize: u64,
    pub queue_overflow: u64,
    pub handshakes_ok: u64,
    pub handshakes_failed: u64,
    pub protocol_errors: u64,
}

impl Counters {
    pub fn bump(counter: &AtomicU64) {
        counter.fetch_add(1, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> CounterSnapshot {
        let g = |c: &AtomicU64| c.load(Ordering::Relaxed);
        CounterSnapshot {
            received: g(&self.received),
            forwarded: g(&self.forwarded),
            dropped: g(&self.dropped),
            acl_denied: g(&self.acl_denied),
            malformed: g(&self.malformed),
            origin_mismatch: g(&self.origin_mismatch),
            oversize: g(&self.oversize),
            queue_overflow: g(&self.queue_overflow),
            handshakes_ok: g(&self.handshakes_ok),
            handshakes_failed: g(&self.handshakes_failed),
            protocol_errors: g(&self.protocol_errors),
        }
    }
}

pub struct LatencyHistogram {
    buckets: [AtomicU64; LATENCY_BUCKETS],
}

impl Default for LatencyHistogram {
    fn default() -> Self {
        LatencyHistogram { buckets: std::array::from_fn(|_| AtomicU64::new(0)) }
    }
}

impl LatencyHistogram {
    pub fn record(&self, d: Duration) {
        let us = d.as_micros() as u64;
        let idx = (64 - us.leading_zeros() as usize).min(LATENCY_BUCKETS - 1);
        self.buckets[idx].fetch_add(1, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> Vec<u64> {
        self.buckets.iter().map(|b| b.load(Ordering::Relaxed)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CpuUsage {
    pub user_pct: f64,
    pub sys_pct: f64,
}

/// One 1-second window.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsSample {
    pub unix_ts: u64,
    /// Outbound bytes per live client during the window.
    pub per_client: Vec<(String, u64)>,
    /// `None` when CPU sampling is unsupported on this platform.
    pub cpu: Option<CpuUsage>,
}

impl MetricsSample {
    pub fn total_bytes(&self) -> u64 {
        self.per_client.iter().map(|(_, b)| b).sum()
    }

    /// One aggregate row with blank client id, then one row per client. CPU
    /// columns repeat on every row and are blank if unavailable.
    pub fn write_csv(&self, out: &mut impl Write) -> io::Result<()> {
        let cpu = match self.cpu {
            Some(c) => format!("{:.2},{:.2}", c.user_pct, c.sys_pct),
            None => ",".to_string(),
        };
        writeln!(out, "{},,{},{}", self.unix_ts, self.total_bytes(), cpu)?;
        for (client, bytes) in &self.per_client {
            writeln!(out, "{},{},{},{}", self.unix_ts, client, bytes, cpu)?;
        }
        Ok(())
    }
}

/// Snapshot returned by the broker's `sample_metrics`.
#[derive(Debug, Clone, Default)]
pub struct BrokerMetrics {
    pub samples: Vec<MetricsSample>,
    pub counters: CounterSnapshot,
    pub reencrypt_latency_us_log2: Vec<u64>,
}

/// Process CPU time (user, system) consumed so far.
pub fn process_cpu_time() -> Option<(Duration, Duration)> {
    #[cfg(unix)]
    {
        // SAFETY: getrusage only writes into the provided struct.
        let mut usage: libc::rusage = unsafe { std::mem::zeroed() };
        let rc = unsafe { libc::getrusage(libc::RUSAGE_SELF, &mut usage) };
        if rc != 0 {
            return None;
        }
        let tv = |t: libc::timeval| Duration::new(t.tv_sec as u64, (t.tv_usec as u32) * 1000);
        Some((tv(usage.ru_utime), tv(usage.ru_stime)))
    }
    #[cfg(not(unix))]
    {
        None
    }
}

/// Differences consecutive readings of session byte counters and CPU time.
pub struct Sampler {
    last_bytes: HashMap<u64, u64>,
    last_cpu: Option<(Instant, Duration, Duration)>,
}

impl Default for Sampler {
    fn default() -> Self {
        Self::new()
    }
}

impl Sampler {
    pub fn new() -> Self {
        let last_cpu = process_cpu_time().map(|(u, s)| (Instant::now(), u, s));
        Sampler { last_bytes: HashMap::new(), last_cpu }
    }

    pub fn sample<'a>(&mut self, sessions: impl IntoIterator<Item = &'a Session>) -> MetricsSample {
        let unix_ts = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default().as_secs();
        let mut seen = HashMap::new();
        let mut per_client = Vec::new();
        for s in sessions {
            let total = s.bytes_out();
            let prev = self.last_bytes.get(&s.conn_id).copied().unwrap_or(0);
            per_client.push((s.client_id.to_string(), total.saturating_sub(prev)));
            seen.insert(s.conn_id, total);
        }
        per_client.sort();
        self.last_bytes = seen;

        let cpu = match (process_cpu_time(), self.last_cpu) {
            (Some((u, s)), Some((t0, u0, s0))) => {
                let now = Instant::now();
                let wall = now.duration_since(t0).as_secs_f64().max(1e-9);
                self.last_cpu = Some((now, u, s));
                Some(CpuUsage {
                    user_pct: 100.0 * u.saturating_sub(u0).as_secs_f64() / wall,
                    sys_pct: 100.0 * s.saturating_sub(s0).as_secs_f64() / wall,
                })
            }
            _ => None,
        };
        MetricsSample { unix_ts, per_client, cpu }
    }
}
