//! Multi-publisher ECG streaming workload against a live broker.

use std::collections::BTreeMap;
use std::io::{self, Write};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tokio::sync::{mpsc, watch};
use tokio::task::JoinSet;
use tokio::time::Instant;

use super::ecg::{decode_batch, encode_batch, generate_ecg, BatchHeader, Profile, PAPER_SAMPLE_RATE_HZ};
use super::stats::{median, percentile};
use super::BenchError;
use crate::client::{Client, ClientConfig, ClientError, SymmetricKey, TransportSecurity};
use crate::ids::ClientId;

pub const WORKLOAD_CSV_HEADER: &str = "second,client_id,publish_bytes,delivered_bytes,batches";
pub const LATENCY_CSV_HEADER: &str = "client_id,seq,latency_us";

/// Worst-case per-publisher wire rate, bytes per second.
pub const MAX_PUBLISHER_RATE: f64 = 350.0;
/// Aggregate band of 3 to 5 kB/s widened by 20%.
pub const AGGREGATE_BAND: (f64, f64) = (2400.0, 6000.0);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DutyCycle {
    AlwaysOn,
    /// On and off period lengths in seconds, each drawn uniformly from its
    /// range.
    Random {
        on: (f64, f64),
        off: (f64, f64),
    },
}

impl DutyCycle {
    pub fn fraction(&self) -> f64 {
        match *self {
            DutyCycle::AlwaysOn => 1.0,
            DutyCycle::Random { on, off } => {
                let (m_on, m_off) = ((on.0 + on.1) / 2.0, (off.0 + off.1) / 2.0);
                m_on / (m_on + m_off)
            }
        }
    }

    /// Whether the publisher is emitting at each of the `at` instants
    /// (seconds, ascending).
    fn schedule(&self, at: &[f64], rng: &mut ChaCha8Rng) -> Vec<bool> {
        let (on, off) = match *self {
            DutyCycle::AlwaysOn => return vec![true; at.len()],
            DutyCycle::Random { on, off } => (on, off),
        };
        let draw = |rng: &mut ChaCha8Rng, r: (f64, f64)| if r.1 > r.0 { rng.gen_range(r.0..r.1) } else { r.0 };
        // Start at a random point of a stationary on/off cycle.
        let mut state = rng.gen_bool(self.fraction());
        let mut until = draw(rng, if state { on } else { off }) * rng.gen_range(0.0..1.0);
        at.iter()
            .map(|&t| {
                while t >= until {
                    state = !state;
                    until += draw(rng, if state { on } else { off });
                }
                state
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct EcgWorkloadPlan {
    pub publishers: usize,
    pub sample_rate_hz: f64,
    pub profile: Profile,
    pub duty: DutyCycle,
    pub batch_interval: Duration,
    pub duration: Duration,
    pub subscribers_per_topic: usize,
    pub seed: u64,
    /// How long to wait for outstanding deliveries after the last send.
    pub drain: Duration,
}

impl EcgWorkloadPlan {
    /// 50 publishers, 4-bit delta packing, roughly 30% duty.
    pub fn paper() -> Self {
        EcgWorkloadPlan {
            publishers: 50,
            sample_rate_hz: PAPER_SAMPLE_RATE_HZ,
            profile: Profile::Paper,
            duty: DutyCycle::Random { on: (2.0, 6.0), off: (6.0, 12.0) },
            batch_interval: Duration::from_secs(1),
            duration: Duration::from_secs(60),
            subscribers_per_topic: 1,
            seed: 1,
            drain: Duration::from_secs(5),
        }
    }

    /// Unpacked samples, 5 s on / 5 s off on average.
    pub fn raw() -> Self {
        EcgWorkloadPlan {
            profile: Profile::Raw,
            duty: DutyCycle::Random { on: (4.0, 6.0), off: (4.0, 6.0) },
            ..Self::paper()
        }
    }

    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Paper => Self::paper(),
            Profile::Raw => Self::raw(),
        }
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: String| Err(BenchError::PlanInvalid(m));
        if self.publishers == 0 || self.publishers > 999 {
            return bad(format!("publisher count must be in 1..=999, got {}", self.publishers));
        }
        if !(self.sample_rate_hz > 0.0 && self.sample_rate_hz.is_finite()) {
            return bad(format!("sample rate must be positive, got {}", self.sample_rate_hz));
        }
        if self.duration < Duration::from_secs(10) {
            return bad(format!("duration must be at least 10 s, got {:?}", self.duration));
        }
        if self.batch_interval.is_zero() || self.batch_interval > self.duration {
            return bad(format!("batch interval {:?} out of range", self.batch_interval));
        }
        if self.subscribers_per_topic == 0 {
            return bad("need at least one subscriber per topic".into());
        }
        let per_batch = self.sample_rate_hz * self.batch_interval.as_secs_f64();
        if per_batch >= f64::from(u16::MAX) {
            return bad("batch holds too many samples".into());
        }
        Ok(())
    }

    pub fn slots(&self) -> usize {
        (self.duration.as_secs_f64() / self.batch_interval.as_secs_f64()).ceil() as usize
    }

    /// Whether this plan is the paper-matched configuration whose rate
    /// gates apply.
    pub fn paper_matched(&self) -> bool {
        self.profile == Profile::Paper && self.publishers == 50 && self.sample_rate_hz == PAPER_SAMPLE_RATE_HZ
    }

    pub fn describe(&self) -> String {
        let duty = match self.duty {
            DutyCycle::AlwaysOn => "always on".to_string(),
            DutyCycle::Random { on, off } => {
                format!(
                    "on U[{},{}] s / off U[{},{}] s ({:.0}%)",
                    on.0,
                    on.1,
                    off.0,
                    off.1,
                    100.0 * self.duty.fraction()
                )
            }
        };
        let packing = match self.profile {
            Profile::Paper => "4-bit delta nibbles with 16-bit escape",
            Profile::Raw => "raw 16-bit samples",
        };
        format!(
            "profile={} ({packing}); publishers={}; rate={} Hz; batch={:?}; duration={:?}; duty {duty}; subscribers/topic={}; seed={}",
            self.profile, self.publishers, self.sample_rate_hz, self.batch_interval, self.duration, self.subscribers_per_topic, self.seed
        )
    }
}

pub fn publisher_id(i: usize) -> ClientId {
    ClientId::new(format!("p{:02}", i + 1)).expect("valid id")
}

pub fn subscriber_id(i: usize, j: usize, per_topic: usize) -> ClientId {
    let s = if per_topic == 1 { format!("s{:02}", i + 1) } else { format!("s{:02}-{}", i + 1, j + 1) };
    ClientId::new(s).expect("valid id")
}

pub fn topic_for(publisher: &ClientId) -> String {
    format!("ecg/{publisher}")
}

/// How the harness reaches the broker.
#[derive(Debug, Clone)]
pub struct WorkloadTarget {
    pub broker: String,
    pub tee_public: [u8; 32],
    pub security: TransportSecurity,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SecondRow {
    pub publish_bytes: u64,
    pub delivered_bytes: u64,
    pub batches: u64,
}

#[derive(Debug, Clone, Default)]
pub struct PublisherStats {
    pub batches_sent: u64,
    pub wire_bytes: u64,
    pub plain_bytes: u64,
    /// Per subscriber: batches received and plaintext bytes received.
    pub received: Vec<(u64, u64)>,
}

#[derive(Debug, Clone)]
pub struct WorkloadReport {
    pub description: String,
    pub paper_matched: bool,
    pub slots: usize,
    pub publishers: Vec<(ClientId, PublisherStats)>,
    /// Indexed by second since streaming started, then by publisher.
    pub seconds: Vec<Vec<SecondRow>>,
    pub latencies_us: Vec<(usize, u32, u64)>,
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl WorkloadReport {
    pub fn lost(&self) -> u64 {
        self.publishers
            .iter()
            .map(|(_, s)| s.received.iter().map(|(n, _)| s.batches_sent.saturating_sub(*n)).sum::<u64>())
            .sum()
    }

    /// Largest number of publish bytes any publisher wrote in one second.
    pub fn max_publisher_rate(&self) -> u64 {
        self.seconds.iter().flatten().map(|r| r.publish_bytes).max().unwrap_or(0)
    }

    /// Delivered bytes per second over the streaming window.
    pub fn aggregate_rates(&self) -> Vec<f64> {
        self.seconds[..self.slots.min(self.seconds.len())]
            .iter()
            .map(|row| row.iter().map(|r| r.delivered_bytes).sum::<u64>() as f64)
            .collect()
    }

    pub fn mean_aggregate_rate(&self) -> f64 {
        let r = self.aggregate_rates();
        if r.is_empty() {
            0.0
        } else {
            r.iter().sum::<f64>() / r.len() as f64
        }
    }

    pub fn conserved(&self) -> bool {
        self.publishers.iter().all(|(_, s)| s.received.iter().all(|(_, bytes)| *bytes == s.plain_bytes))
    }

    pub fn checks(&self) -> Vec<Check> {
        let mut out = vec![
            Check { name: "zero loss", passed: self.lost() == 0, detail: format!("{} batches lost", self.lost()) },
            Check {
                name: "verification",
                passed: self.errors.is_empty(),
                detail: match self.errors.first() {
                    None => "all batches decrypted, in order and equal to the source".into(),
                    Some(e) => format!("{} errors, first: {e}", self.errors.len()),
                },
            },
            Check {
                name: "conservation",
                passed: self.conserved(),
                detail: "received plaintext bytes equal sent per topic".into(),
            },
        ];
        if self.paper_matched {
            let max = self.max_publisher_rate() as f64;
            out.push(Check {
                name: "per-publisher wire rate",
                passed: max <= MAX_PUBLISHER_RATE,
                detail: format!("worst case {max} B/s, limit {MAX_PUBLISHER_RATE} B/s"),
            });
            let mean = self.mean_aggregate_rate();
            out.push(Check {
                name: "aggregate rate",
                passed: (AGGREGATE_BAND.0..=AGGREGATE_BAND.1).contains(&mean),
                detail: format!("mean {mean:.0} B/s, band {}..{} B/s", AGGREGATE_BAND.0, AGGREGATE_BAND.1),
            });
        }
        out
    }

    pub fn passed(&self) -> bool {
        self.checks().iter().all(|c| c.passed)
    }

    pub fn summary(&self) -> String {
        let rates = self.aggregate_rates();
        let lat: Vec<f64> = self.latencies_us.iter().map(|l| l.2 as f64).collect();
        let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.0}"));
        let sent: u64 = self.publishers.iter().map(|(_, s)| s.batches_sent).sum();
        let mut s = format!("# {}\n", self.description);
        s += &format!("batches sent: {sent}, lost: {}\n", self.lost());
        s += &format!("max per-publisher wire rate: {} B/s\n", self.max_publisher_rate());
        s += &format!(
            "aggregate delivered: mean {:.0} B/s, p5 {} B/s, p95 {} B/s\n",
            self.mean_aggregate_rate(),
            fmt(percentile(rates.iter().copied(), 5.0)),
            fmt(percentile(rates.iter().copied(), 95.0))
        );
        s += &format!(
            "latency: p50 {} us, p99 {} us, max {} us\n",
            fmt(median(lat.iter().copied())),
            fmt(percentile(lat.iter().copied(), 99.0)),
            fmt(lat.iter().copied().reduce(f64::max))
        );
        for c in self.checks() {
            s += &format!("{} {}: {}\n", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        }
        s
    }

    /// Per-second rows per publisher plus one aggregate row with a blank
    /// client id, after a `#` line describing the plan. Seconds at or past
    /// `slots` are the drain period.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> io::Result<()> {
        writeln!(out, "# {}; slots={}; paper_matched={}", self.description, self.slots, self.paper_matched)?;
        writeln!(out, "{WORKLOAD_CSV_HEADER}")?;
        for (sec, row) in self.seconds.iter().enumerate() {
            let total = row.iter().fold(SecondRow::default(), |a, r| SecondRow {
                publish_bytes: a.publish_bytes + r.publish_bytes,
                delivered_bytes: a.delivered_bytes + r.delivered_bytes,
                batches: a.batches + r.batches,
            });
            writeln!(out, "{sec},,{},{},{}", total.publish_bytes, total.delivered_bytes, total.batches)?;
            for ((id, _), r) in self.publishers.iter().zip(row) {
                writeln!(out, "{sec},{id},{},{},{}", r.publish_bytes, r.delivered_bytes, r.batches)?;
            }
        }
        Ok(())
    }

    pub fn write_latency_csv<W: Write>(&self, out: &mut W) -> io::Result<()> {
        writeln!(out, "{LATENCY_CSV_HEADER}")?;
        for (p, seq, us) in &self.latencies_us {
            writeln!(out, "{},{seq},{us}", self.publishers[*p].0)?;
        }
        Ok(())
    }
}

enum Event {
    Sent { publisher: usize, second: usize, wire: u64, plain: u64 },
    Received { publisher: usize, subscriber: usize, second: usize, wire: u64, plain: u64, seq: u32, latency_us: u64 },
    Error(String),
}

fn unix_us() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default().as_micros() as u64
}

fn row(seconds: &mut BTreeMap<usize, Vec<SecondRow>>, sec: usize, publisher: usize, n: usize) -> &mut SecondRow {
    &mut seconds.entry(sec).or_insert_with(|| vec![SecondRow::default(); n])[publisher]
}

fn sample_range(plan: &EcgWorkloadPlan, slot: usize) -> (usize, usize) {
    let per = plan.sample_rate_hz * plan.batch_interval.as_secs_f64();
    ((slot as f64 * per).round() as usize, ((slot + 1) as f64 * per).round() as usize)
}

async fn start_client(target: &WorkloadTarget, id: ClientId) -> Result<Client, BenchError> {
    let mut config = ClientConfig::new(target.broker.clone(), id.clone(), SymmetricKey::generate(), target.tee_public);
    config.security = target.security.clone();
    let mut client = Client::connect(config).await.map_err(|e| match e {
        ClientError::Io(_) | ClientError::Timeout | ClientError::Tls(_) => {
            BenchError::BrokerUnreachable(format!("{id}: {e}"))
        }
        other => BenchError::HandshakeFailure(format!("{id}: {other}")),
    })?;
    client.handshake().await.map_err(|e| BenchError::HandshakeFailure(format!("{id}: {e}")))?;
    Ok(client)
}

/// Connects and provisions every client, streams for the plan's duration
/// and verifies each delivery against the generated source.
pub async fn run_ecg_workload(plan: &EcgWorkloadPlan, target: &WorkloadTarget) -> Result<WorkloadReport, BenchError> {
    plan.validate()?;
    let n = plan.publishers;
    let per_topic = plan.subscribers_per_topic;
    let slots = plan.slots();
    let interval = plan.batch_interval;
    let total_s = slots as f64 * interval.as_secs_f64();
    let sources: Vec<Arc<Vec<i16>>> = (0..n)
        .map(|i| {
            Arc::new(generate_ecg(plan.sample_rate_hz, total_s, plan.seed.wrapping_mul(1000).wrapping_add(i as u64)))
        })
        .collect();

    let mut setup = JoinSet::new();
    for i in 0..n {
        for j in 0..per_topic {
            let target = target.clone();
            setup.spawn(async move {
                let mut c = start_client(&target, subscriber_id(i, j, per_topic)).await?;
                c.subscribe_decrypting(&topic_for(&publisher_id(i)))
                    .await
                    .map_err(|e| BenchError::HandshakeFailure(format!("{}: subscribe: {e}", c.client_id())))?;
                Ok::<_, BenchError>((Some((i, j)), c))
            });
        }
        let target = target.clone();
        setup.spawn(async move { Ok((None, start_client(&target, publisher_id(i)).await?)) });
    }
    let mut subscribers = Vec::new();
    let mut publishers = Vec::new();
    while let Some(res) = setup.join_next().await {
        match res.map_err(|e| BenchError::Setup(e.to_string()))?? {
            (Some((i, j)), c) => subscribers.push((i, j, c)),
            (None, c) => publishers.push(c),
        }
    }
    publishers.sort_by(|a, b| a.client_id().as_str().cmp(b.client_id().as_str()));

    let start = Instant::now() + Duration::from_millis(500);
    let (tx, mut rx) = mpsc::unbounded_channel();
    let (stop_tx, stop_rx) = watch::channel(false);
    let received_total = Arc::new(AtomicU64::new(0));
    let second_of =
        move |t: Instant| (t.saturating_duration_since(start).as_secs_f64() / interval.as_secs_f64()) as usize;

    let mut sub_tasks = JoinSet::new();
    for (i, j, mut client) in subscribers {
        let tx = tx.clone();
        let source = sources[i].clone();
        let mut stop = stop_rx.clone();
        let received_total = received_total.clone();
        let topic = topic_for(&publisher_id(i));
        sub_tasks.spawn(async move {
            let mut expected_seq = 0u32;
            loop {
                let delivery = tokio::select! {
                    d = client.recv() => d,
                    _ = stop.changed() => break,
                };
                let Some(d) = delivery else {
                    let _ = tx.send(Event::Error(format!("{}: connection closed", client.client_id())));
                    break;
                };
                let now = Instant::now();
                let at_us = unix_us();
                let who = client.client_id().to_string();
                let check = || -> Result<(u32, u64, u64), String> {
                    if d.topic != topic {
                        return Err(format!("{who}: unexpected topic {}", d.topic));
                    }
                    let plain = d.payload.as_ref().map_err(|e| format!("{who}: {e}"))?;
                    let (h, samples) = decode_batch(plain).map_err(|e| format!("{who}: {e}"))?;
                    if h.seq != expected_seq {
                        return Err(format!("{who}: sequence {} where {expected_seq} was expected", h.seq));
                    }
                    let s = h.start as usize;
                    if source.get(s..s + samples.len()) != Some(&samples[..]) {
                        return Err(format!("{who}: batch {} differs from the source", h.seq));
                    }
                    Ok((h.seq, plain.len() as u64, at_us.saturating_sub(h.sent_at_us)))
                };
                match check() {
                    Ok((seq, plain, latency_us)) => {
                        expected_seq = seq + 1;
                        received_total.fetch_add(1, Ordering::Relaxed);
                        let _ = tx.send(Event::Received {
                            publisher: i,
                            subscriber: j,
                            second: second_of(now),
                            wire: d.wire_len as u64,
                            plain,
                            seq,
                            latency_us,
                        });
                    }
                    Err(e) => {
                        let _ = tx.send(Event::Error(e));
                        if let Ok(plain) = &d.payload {
                            if let Ok((h, _)) = decode_batch(plain) {
                                expected_seq = h.seq.wrapping_add(1);
                            }
                        }
                    }
                }
            }
            let _ = client.disconnect().await;
        });
    }

    let sent_total = Arc::new(AtomicU64::new(0));
    let mut pub_tasks = JoinSet::new();
    for (i, mut client) in publishers.into_iter().enumerate() {
        let tx = tx.clone();
        let source = sources[i].clone();
        let sent_total = sent_total.clone();
        let phase = interval.mul_f64(0.25 + 0.5 * i as f64 / n as f64);
        let instants: Vec<f64> =
            (0..slots).map(|k| (k as f64 * interval.as_secs_f64()) + phase.as_secs_f64()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(plan.seed ^ (0x5eed_0000 + i as u64));
        let on = plan.duty.schedule(&instants, &mut rng);
        let plan = plan.clone();
        pub_tasks.spawn(async move {
            let topic = topic_for(client.client_id());
            let mut seq = 0u32;
            for (k, _) in on.iter().enumerate().filter(|(_, &on)| on) {
                tokio::time::sleep_until(start + interval * k as u32 + phase).await;
                let (a, b) = sample_range(&plan, k);
                let header = BatchHeader {
                    profile: plan.profile,
                    seq,
                    start: a as u32,
                    count: (b - a) as u16,
                    sent_at_us: unix_us(),
                };
                let plain = encode_batch(&header, &source[a..b]);
                let when = Instant::now();
                match client.publish_encrypted(&topic, &plain).await {
                    Ok(wire) => {
                        seq += 1;
                        sent_total.fetch_add(u64::from(per_topic as u32), Ordering::Relaxed);
                        let _ = tx.send(Event::Sent {
                            publisher: i,
                            second: second_of(when),
                            wire: wire as u64,
                            plain: plain.len() as u64,
                        });
                    }
                    Err(e) => {
                        let _ = tx.send(Event::Error(format!("{}: publish failed: {e}", client.client_id())));
                        break;
                    }
                }
            }
            client
        });
    }
    drop(tx);

    let mut finished = Vec::new();
    while let Some(res) = pub_tasks.join_next().await {
        finished.push(res.map_err(|e| BenchError::Setup(e.to_string()))?);
    }
    // Publishers whose tail slots are all off finish early; the run still
    // spans the whole window so broker-side samples line up with it.
    tokio::time::sleep_until(start + interval * slots as u32).await;
    let deadline = Instant::now() + plan.drain;
    while received_total.load(Ordering::Relaxed) < sent_total.load(Ordering::Relaxed) && Instant::now() < deadline {
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    let _ = stop_tx.send(true);
    while sub_tasks.join_next().await.is_some() {}
    for c in finished {
        let _ = c.disconnect().await;
    }

    let mut stats: Vec<PublisherStats> =
        (0..n).map(|_| PublisherStats { received: vec![(0, 0); per_topic], ..Default::default() }).collect();
    let mut seconds: BTreeMap<usize, Vec<SecondRow>> = BTreeMap::new();
    let mut latencies = Vec::new();
    let mut errors = Vec::new();
    while let Some(ev) = rx.recv().await {
        match ev {
            Event::Sent { publisher, second, wire, plain } => {
                let s = &mut stats[publisher];
                s.batches_sent += 1;
                s.wire_bytes += wire;
                s.plain_bytes += plain;
                let r = row(&mut seconds, second, publisher, n);
                r.publish_bytes += wire;
                r.batches += 1;
            }
            Event::Received { publisher, subscriber, second, wire, plain, seq, latency_us } => {
                let got = &mut stats[publisher].received[subscriber];
                got.0 += 1;
                got.1 += plain;
                row(&mut seconds, second, publisher, n).delivered_bytes += wire;
                latencies.push((publisher, seq, latency_us));
            }
            Event::Error(e) => errors.push(e),
        }
    }
    let last = seconds.keys().next_back().copied().unwrap_or(0).max(slots.saturating_sub(1));
    let seconds = (0..=last).map(|s| seconds.remove(&s).unwrap_or_else(|| vec![SecondRow::default(); n])).collect();
    Ok(WorkloadReport {
        description: plan.describe(),
        paper_matched: plan.paper_matched(),
        slots,
        publishers: (0..n).map(publisher_id).zip(stats).collect(),
        seconds,
        latencies_us: latencies,
        errors,
    })
}
