//! The untrusted broker.
//!
//! Routes QoS-0 publishes between sessions, enforces ACLs and answers the
//! key-provisioning handshake. Payloads are handled only as opaque
//! envelopes: for every matching subscriber the broker asks the trusted core
//! to re-encrypt the envelope and forwards whatever comes back.

pub mod acl;
pub mod metrics;
pub mod server;
pub mod session;
pub mod subscriptions;

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant};

use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};
use tracing::{debug, warn};

use crate::ids::ClientId;
use crate::trusted_core::{TrustedCore, TrustedCoreError};
use crate::wire::envelope::{decode_envelope, ENVELOPE_OVERHEAD};
use crate::wire::packet::{
    decode_packet, encode_packet, frame_length, reason, ConnAck, Connect, DecodeError, Disconnect, Packet, PropertySet,
    Publish, SubAck, Subscribe,
};
use crate::wire::topic::{response_topic_for, TopicFilter, HANDSHAKE_TOPIC};

pub use acl::{AclRuleSet, Action, Decision};
pub use metrics::{BrokerMetrics, CounterSnapshot, MetricsSample, Sampler};
pub use server::{run, BrokerConfig, BrokerError, RootKeySource, Server, TlsFiles};
pub use session::{Session, DEFAULT_QUEUE_CAPACITY};
pub use subscriptions::SubscriptionTable;

use metrics::{Counters, LatencyHistogram};

/// Handshake reply status bytes.
pub mod status {
    pub const OK: u8 = 0x00;
    pub const BAD_BLOB: u8 = 0x01;
    pub const INTERNAL_ERROR: u8 = 0x02;
}

pub const DEFAULT_MAX_PAYLOAD: usize = 1 << 20;
const CONNECT_TIMEOUT: Duration = Duration::from_secs(10);
const MAX_SAMPLES_KEPT: usize = 3600;

#[derive(Debug, Clone, Copy)]
pub struct BrokerOptions {
    pub max_payload: usize,
    pub queue_capacity: usize,
}

impl Default for BrokerOptions {
    fn default() -> Self {
        BrokerOptions { max_payload: DEFAULT_MAX_PAYLOAD, queue_capacity: DEFAULT_QUEUE_CAPACITY }
    }
}

#[derive(Debug)]
pub enum PublishOutcome {
    /// Re-encrypted and queued for `delivered`; `failed` subscribers were
    /// skipped individually.
    Forwarded {
        delivered: Vec<ClientId>,
        failed: Vec<(ClientId, TrustedCoreError)>,
    },
    Handshake(HandshakeOutcome),
    AclDenied,
    TooLarge,
    EnvelopeMalformed,
    OriginMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HandshakeOutcome {
    Replied(u8),
    MissingResponseTopic,
    ResponseTopicMismatch,
}

struct Inner {
    acl: AclRuleSet,
    core: TrustedCore,
    options: BrokerOptions,
    sessions: Mutex<HashMap<ClientId, Arc<Session>>>,
    subscriptions: RwLock<SubscriptionTable>,
    next_conn: AtomicU64,
    counters: Counters,
    latency: LatencyHistogram,
    samples: Mutex<Vec<MetricsSample>>,
    /// Sessions that ended since the last sample; their final bytes still
    /// belong to the current window.
    ended: Mutex<Vec<Arc<Session>>>,
}

#[derive(Clone)]
pub struct Broker {
    inner: Arc<Inner>,
}

fn encode(packet: &Packet) -> Arc<Vec<u8>> {
    // Only broker-built packets pass through here, all of which are valid.
    Arc::new(encode_packet(packet).expect("broker packets are well formed"))
}

impl Broker {
    pub fn new(acl: AclRuleSet, core: TrustedCore, options: BrokerOptions) -> Self {
        Broker {
            inner: Arc::new(Inner {
                acl,
                core,
                options,
                sessions: Mutex::new(HashMap::new()),
                subscriptions: RwLock::new(SubscriptionTable::default()),
                next_conn: AtomicU64::new(1),
                counters: Counters::default(),
                latency: LatencyHistogram::default(),
                samples: Mutex::new(Vec::new()),
                ended: Mutex::new(Vec::new()),
            }),
        }
    }

    pub fn trusted_core(&self) -> &TrustedCore {
        &self.inner.core
    }

    pub fn acl(&self) -> &AclRuleSet {
        &self.inner.acl
    }

    pub fn counters(&self) -> CounterSnapshot {
        self.inner.counters.snapshot()
    }

    pub fn session(&self, id: &ClientId) -> Option<Arc<Session>> {
        self.inner.sessions.lock().expect("sessions lock").get(id).cloned()
    }

    pub fn live_sessions(&self) -> Vec<Arc<Session>> {
        self.inner.sessions.lock().expect("sessions lock").values().cloned().collect()
    }

    /// Filters currently granted to `id`.
    pub fn granted_filters(&self, id: &ClientId) -> Vec<String> {
        self.inner.subscriptions.read().expect("subs lock").filters_of(id).into_iter().collect()
    }

    /// Validates the client id and registers a session, replacing (and
    /// closing) any live session with the same id. On failure returns the
    /// CONNACK reason code.
    pub fn handle_connect(&self, connect: &Connect) -> Result<Arc<Session>, u8> {
        let id = ClientId::new(connect.client_id.as_str()).map_err(|_| reason::CLIENT_ID_NOT_VALID)?;
        let conn_id = self.inner.next_conn.fetch_add(1, Ordering::Relaxed);
        let session = Session::new(id.clone(), conn_id, self.inner.options.queue_capacity);
        let replaced = {
            let mut sessions = self.inner.sessions.lock().expect("sessions lock");
            let old = sessions.insert(id.clone(), session.clone());
            if old.is_some() {
                self.inner.subscriptions.write().expect("subs lock").remove_client(&id);
            }
            old
        };
        if let Some(old) = replaced {
            debug!(client = %id, "session taken over");
            old.queue.push(encode(&Packet::Disconnect(Disconnect { reason: reason::SESSION_TAKEN_OVER })));
            old.queue.close();
            old.kicked.notify_one();
        }
        Ok(session)
    }

    fn is_current(sessions: &HashMap<ClientId, Arc<Session>>, session: &Session) -> bool {
        sessions.get(&session.client_id).is_some_and(|s| s.conn_id == session.conn_id)
    }

    pub fn handle_subscribe(&self, session: &Session, subscribe: &Subscribe) -> SubAck {
        let sessions = self.inner.sessions.lock().expect("sessions lock");
        let live = Self::is_current(&sessions, session);
        let mut table = self.inner.subscriptions.write().expect("subs lock");
        let reasons = subscribe
            .filters
            .iter()
            .map(|(filter, _qos)| {
                if TopicFilter::parse(filter.as_str()).is_err() {
                    return reason::TOPIC_FILTER_INVALID;
                }
                if self.inner.acl.check(session.client_id.as_str(), Action::Subscribe, filter) == Decision::Deny {
                    Counters::bump(&self.inner.counters.acl_denied);
                    return reason::NOT_AUTHORIZED;
                }
                if !live {
                    return reason::UNSPECIFIED_ERROR;
                }
                table.subscribe(filter, &session.client_id);
                reason::GRANTED_QOS0
            })
            .collect();
        SubAck { packet_id: subscribe.packet_id, reasons }
    }

    fn deliver(&self, client: &ClientId, packet: Arc<Vec<u8>>) -> bool {
        let Some(session) = self.session(client) else {
            return false;
        };
        if !session.queue.push(packet) {
            Counters::bump(&self.inner.counters.queue_overflow);
        }
        true
    }

    pub async fn handle_publish(&self, session: &Session, publish: Publish) -> PublishOutcome {
        let c = &self.inner.counters;
        Counters::bump(&c.received);
        let origin = &session.client_id;

        if publish.topic == HANDSHAKE_TOPIC {
            return PublishOutcome::Handshake(self.handle_handshake(session, publish).await);
        }
        if self.inner.acl.check(origin.as_str(), Action::Publish, &publish.topic) == Decision::Deny {
            Counters::bump(&c.acl_denied);
            return PublishOutcome::AclDenied;
        }
        if publish.payload.len() > self.inner.options.max_payload {
            Counters::bump(&c.oversize);
            return PublishOutcome::TooLarge;
        }
        let Ok(envelope) = decode_envelope(&publish.payload) else {
            Counters::bump(&c.malformed);
            return PublishOutcome::EnvelopeMalformed;
        };
        if origin.padded() != Some(envelope.origin) {
            Counters::bump(&c.origin_mismatch);
            return PublishOutcome::OriginMismatch;
        }

        let subscribers = self.inner.subscriptions.read().expect("subs lock").lookup(&publish.topic);
        let mut delivered = Vec::with_capacity(subscribers.len());
        let mut failed = Vec::new();
        for dest in subscribers {
            let started = Instant::now();
            match self.inner.core.reencrypt(origin, &dest, envelope.clone()).await {
                Ok((out, _timings)) => {
                    self.inner.latency.record(started.elapsed());
                    let packet = encode(&Packet::Publish(Publish {
                        topic: publish.topic.clone(),
                        properties: PropertySet::default(),
                        payload: out.encode(),
                    }));
                    if self.deliver(&dest, packet) {
                        Counters::bump(&c.forwarded);
                        delivered.push(dest);
                    }
                }
                Err(e) => {
                    debug!(origin = %origin, dest = %dest, error = %e, "delivery dropped");
                    Counters::bump(&c.dropped);
                    failed.push((dest, e));
                }
            }
        }
        PublishOutcome::Forwarded { delivered, failed }
    }

    /// Provisions the wrapped key in the publish for the session's own id
    /// and answers on `$mqttz/resp/<id>`.
    pub async fn handle_handshake(&self, session: &Session, publish: Publish) -> HandshakeOutcome {
        let c = &self.inner.counters;
        let expected = response_topic_for(session.client_id.as_str());
        match publish.properties.response_topic.as_deref() {
            None => {
                Counters::bump(&c.handshakes_failed);
                return HandshakeOutcome::MissingResponseTopic;
            }
            Some(t) if t != expected => {
                Counters::bump(&c.handshakes_failed);
                return HandshakeOutcome::ResponseTopicMismatch;
            }
            Some(_) => {}
        }

        let code = match self.inner.core.provision_key(&session.client_id, &publish.payload).await {
            Ok(()) => status::OK,
            Err(
                TrustedCoreError::BadBlobLength(_) | TrustedCoreError::AuthFailure | TrustedCoreError::IdTooLong(_),
            ) => status::BAD_BLOB,
            Err(e) => {
                warn!(client = %session.client_id, error = %e, "provisioning failed");
                status::INTERNAL_ERROR
            }
        };
        Counters::bump(if code == status::OK { &c.handshakes_ok } else { &c.handshakes_failed });

        let reply = encode(&Packet::Publish(Publish {
            topic: expected.clone(),
            properties: PropertySet { response_topic: None, correlation_data: publish.properties.correlation_data },
            payload: vec![code],
        }));
        let receivers = self.inner.subscriptions.read().expect("subs lock").lookup(&expected);
        for r in receivers {
            self.deliver(&r, reply.clone());
        }
        HandshakeOutcome::Replied(code)
    }

    /// Drops the session and its subscriptions unless another connection
    /// has already taken over the id.
    pub fn remove_session(&self, session: &Session) {
        {
            let mut sessions = self.inner.sessions.lock().expect("sessions lock");
            if Self::is_current(&sessions, session) {
                sessions.remove(&session.client_id);
                self.inner.subscriptions.write().expect("subs lock").remove_client(&session.client_id);
            }
        }
        session.queue.close();
    }

    /// Disconnects every session.
    pub fn shutdown(&self) {
        for s in self.live_sessions() {
            s.queue.push(encode(&Packet::Disconnect(Disconnect { reason: 0x8B })));
            s.queue.close();
            s.kicked.notify_one();
        }
    }

    /// Takes one 1 Hz sample and appends it to the retained history.
    pub fn record_sample(&self, sampler: &mut Sampler) -> MetricsSample {
        let mut sessions = std::mem::take(&mut *self.inner.ended.lock().expect("ended lock"));
        sessions.extend(self.live_sessions());
        sessions.sort_by_key(|s| s.conn_id);
        sessions.dedup_by_key(|s| s.conn_id);
        let sample = sampler.sample(sessions.iter().map(|s| &**s));
        let mut samples = self.inner.samples.lock().expect("samples lock");
        if samples.len() == MAX_SAMPLES_KEPT {
            samples.remove(0);
        }
        samples.push(sample.clone());
        sample
    }

    pub fn sample_metrics(&self) -> BrokerMetrics {
        BrokerMetrics {
            samples: self.inner.samples.lock().expect("samples lock").clone(),
            counters: self.counters(),
            reencrypt_latency_us_log2: self.inner.latency.snapshot(),
        }
    }

    fn max_frame(&self) -> usize {
        // topic, properties and fixed header on top of the payload
        self.inner.options.max_payload.max(ENVELOPE_OVERHEAD) + u16::MAX as usize + 1024
    }

    /// Runs one client connection to completion. The transport is already
    /// established (TLS handshake done when enabled).
    pub async fn serve_connection<S>(&self, stream: S) -> std::io::Result<()>
    where
        S: AsyncRead + AsyncWrite + Unpin + Send + 'static,
    {
        let (mut rd, mut wr) = tokio::io::split(stream);
        let mut buf = Vec::with_capacity(4096);
        let max_frame = self.max_frame();

        let first = match tokio::time::timeout(CONNECT_TIMEOUT, read_packet(&mut rd, &mut buf, max_frame)).await {
            Ok(Ok(Some(p))) => p,
            Ok(Ok(None)) | Err(_) => return Ok(()),
            Ok(Err(ReadError::Io(e))) => return Err(e),
            Ok(Err(ReadError::Decode(DecodeError::UnsupportedProtocol(_)))) => {
                let ack = encode(&Packet::ConnAck(ConnAck {
                    session_present: false,
                    reason: reason::UNSUPPORTED_PROTOCOL_VERSION,
                }));
                wr.write_all(&ack).await?;
                return wr.shutdown().await;
            }
            Ok(Err(_)) => {
                Counters::bump(&self.inner.counters.protocol_errors);
                return Ok(());
            }
        };
        let Packet::Connect(connect) = first else {
            Counters::bump(&self.inner.counters.protocol_errors);
            return Ok(());
        };
        let session = match self.handle_connect(&connect) {
            Ok(s) => s,
            Err(code) => {
                let ack = encode(&Packet::ConnAck(ConnAck { session_present: false, reason: code }));
                wr.write_all(&ack).await?;
                return wr.shutdown().await;
            }
        };
        let ack = encode(&Packet::ConnAck(ConnAck { session_present: false, reason: reason::SUCCESS }));
        if let Err(e) = wr.write_all(&ack).await {
            self.remove_session(&session);
            return Err(e);
        }
        session.record_sent(ack.len());

        let writer = tokio::spawn(write_loop(session.clone(), wr));
        let idle = match connect.keep_alive {
            0 => None,
            k => Some(Duration::from_millis(k as u64 * 1500)),
        };

        loop {
            let read = read_packet(&mut rd, &mut buf, max_frame);
            let next = tokio::select! {
                r = async {
                    match idle {
                        Some(d) => tokio::time::timeout(d, read).await.unwrap_or(Ok(None)),
                        None => read.await,
                    }
                } => r,
                _ = session.kicked.notified() => break,
            };
            let packet = match next {
                Ok(Some(p)) => p,
                Ok(None) => break,
                Err(ReadError::Io(_)) => break,
                Err(ReadError::TooLarge) => {
                    Counters::bump(&self.inner.counters.oversize);
                    session.queue.push(encode(&Packet::Disconnect(Disconnect { reason: reason::PACKET_TOO_LARGE })));
                    break;
                }
                Err(ReadError::Decode(e)) => {
                    debug!(client = %session.client_id, error = %e, "closing on decode error");
                    Counters::bump(&self.inner.counters.protocol_errors);
                    session.queue.push(encode(&Packet::Disconnect(Disconnect { reason: reason::MALFORMED_PACKET })));
                    break;
                }
            };
            match packet {
                Packet::Publish(p) => {
                    self.handle_publish(&session, p).await;
                }
                Packet::Subscribe(s) => {
                    let ack = self.handle_subscribe(&session, &s);
                    session.queue.push(encode(&Packet::SubAck(ack)));
                }
                Packet::PingReq => {
                    session.queue.push(encode(&Packet::PingResp));
                }
                Packet::Disconnect(_) => break,
                _ => {
                    Counters::bump(&self.inner.counters.protocol_errors);
                    session.queue.push(encode(&Packet::Disconnect(Disconnect { reason: reason::PROTOCOL_ERROR })));
                    break;
                }
            }
        }

        self.remove_session(&session);
        let _ = writer.await;
        self.inner.ended.lock().expect("ended lock").push(session);
        Ok(())
    }
}

#[derive(Debug)]
enum ReadError {
    Io(std::io::Error),
    Decode(DecodeError),
    TooLarge,
}

/// Reads until one full packet is buffered. `Ok(None)` on clean EOF.
async fn read_packet<R: AsyncRead + Unpin>(
    rd: &mut R,
    buf: &mut Vec<u8>,
    max_frame: usize,
) -> Result<Option<Packet>, ReadError> {
    loop {
        match decode_packet(buf) {
            Ok(Some((packet, used))) => {
                buf.drain(..used);
                return Ok(Some(packet));
            }
            Ok(None) => {}
            Err(e) => return Err(ReadError::Decode(e)),
        }
        if let Ok(Some(len)) = frame_length(buf) {
            if len > max_frame {
                return Err(ReadError::TooLarge);
            }
        }
        let n = rd.read_buf(buf).await.map_err(ReadError::Io)?;
        if n == 0 {
            return Ok(None);
        }
    }
}

async fn write_loop<W: AsyncWrite + Unpin>(session: Arc<Session>, mut wr: W) {
    while let Some(packet) = session.queue.pop().await {
        if wr.write_all(&packet).await.is_err() {
            break;
        }
        session.record_sent(packet.len());
        if session.queue.is_empty() && wr.flush().await.is_err() {
            break;
        }
    }
    let _ = wr.shutdown().await;
}
