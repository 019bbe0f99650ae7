//! Client library: key provisioning, payload sealing and an async MQTT
//! session over TCP or TLS.

mod keys;

use std::collections::VecDeque;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use rand::RngCore;
use thiserror::Error;
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt, ReadHalf, WriteHalf};
use tokio::net::TcpStream;
use tokio::sync::{mpsc, Mutex};
use tokio::task::JoinHandle;
use tokio::time::timeout;
use tokio_rustls::rustls::{self, pki_types::ServerName};

pub use keys::{open_payload, seal_payload, wrap_key, SymmetricKey};

use crate::ids::ClientId;
use crate::wire::envelope::EnvelopeError;
use crate::wire::packet::{
    decode_packet, encode_packet, reason, Connect, DecodeError, Disconnect, EncodeError, Packet, PropertySet, Publish,
    SubAck, Subscribe,
};
use crate::wire::topic::{response_topic_for, HANDSHAKE_TOPIC};

pub const DEFAULT_HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(5);
pub const DEFAULT_KEEP_ALIVE: u16 = 60;
/// Largest envelope the client will publish. Matches the broker default.
pub const DEFAULT_MAX_PAYLOAD: usize = 1 << 20;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("symmetric key must be 32 bytes, got {0}")]
    BadKeyLength(usize),
    #[error("symmetric key is not valid hex")]
    BadKeyEncoding,
    #[error("client id longer than 16 bytes cannot be provisioned")]
    IdTooLong,
    #[error("timed out waiting for the broker")]
    Timeout,
    #[error("broker rejected the handshake with status {0:#04x}")]
    Rejected(u8),
    #[error("broker refused the connection with reason {0:#04x}")]
    ConnectRefused(u8),
    #[error("broker refused the subscription with reason {0:#04x}")]
    SubscribeRefused(u8),
    #[error("no key has been provisioned on this connection")]
    NotProvisioned,
    #[error("payload of {0} bytes exceeds the limit")]
    PayloadTooLarge(usize),
    #[error("malformed envelope: {0}")]
    Envelope(#[from] EnvelopeError),
    #[error("payload failed authentication")]
    AuthFailure,
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("connection closed")]
    Closed,
    #[error("TLS error: {0}")]
    Tls(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<EncodeError> for ClientError {
    fn from(e: EncodeError) -> Self {
        ClientError::Protocol(e.to_string())
    }
}

/// Anything a session can run over.
pub trait Transport: AsyncRead + AsyncWrite + Unpin + Send + 'static {}
impl<T: AsyncRead + AsyncWrite + Unpin + Send + 'static> Transport for T {}

#[derive(Debug, Clone)]
pub enum TransportSecurity {
    Plaintext,
    /// Verify the broker against the PEM certificates in `ca`.
    Tls {
        ca: PathBuf,
        server_name: Option<String>,
    },
}

#[derive(Debug, Clone)]
pub struct ClientConfig {
    /// `host:port`
    pub broker: String,
    pub client_id: ClientId,
    pub key: SymmetricKey,
    pub tee_public: [u8; 32],
    pub security: TransportSecurity,
    pub handshake_timeout: Duration,
    pub keep_alive: u16,
    pub max_payload: usize,
}

impl ClientConfig {
    pub fn new(broker: impl Into<String>, client_id: ClientId, key: SymmetricKey, tee_public: [u8; 32]) -> Self {
        ClientConfig {
            broker: broker.into(),
            client_id,
            key,
            tee_public,
            security: TransportSecurity::Plaintext,
            handshake_timeout: DEFAULT_HANDSHAKE_TIMEOUT,
            keep_alive: DEFAULT_KEEP_ALIVE,
            max_payload: DEFAULT_MAX_PAYLOAD,
        }
    }
}

/// A decrypted (or rejected) message.
#[derive(Debug)]
pub struct Delivery {
    pub topic: String,
    pub wire_len: usize,
    pub payload: Result<Vec<u8>, ClientError>,
}

enum Incoming {
    SubAck(SubAck),
    Publish(Publish, usize),
    Closed(Option<String>),
}

type Writer = Arc<Mutex<WriteHalf<Box<dyn Transport>>>>;

pub struct Client {
    id: ClientId,
    key: SymmetricKey,
    tee_public: [u8; 32],
    handshake_timeout: Duration,
    max_payload: usize,
    writer: Writer,
    events: mpsc::UnboundedReceiver<Incoming>,
    pending: VecDeque<(Publish, usize)>,
    closed: Option<String>,
    tasks: Vec<JoinHandle<()>>,
    next_packet_id: u16,
    provisioned: bool,
    response_subscribed: bool,
    bytes_written: Arc<AtomicU64>,
}

impl Client {
    /// Opens the transport and completes CONNECT. Does not provision a key.
    pub async fn connect(config: ClientConfig) -> Result<Client, ClientError> {
        let wait = config.handshake_timeout;
        let tcp = timeout(wait, TcpStream::connect(&config.broker)).await.map_err(|_| ClientError::Timeout)??;
        tcp.set_nodelay(true)?;
        let stream: Box<dyn Transport> = match &config.security {
            TransportSecurity::Plaintext => Box::new(tcp),
            TransportSecurity::Tls { ca, server_name } => {
                let host = server_name.clone().unwrap_or_else(|| host_of(&config.broker));
                let connector = tls_connector(ca)?;
                let name = ServerName::try_from(host).map_err(|e| ClientError::Tls(e.to_string()))?;
                let tls = timeout(wait, connector.connect(name, tcp))
                    .await
                    .map_err(|_| ClientError::Timeout)?
                    .map_err(|e| ClientError::Tls(e.to_string()))?;
                Box::new(tls)
            }
        };
        Self::connect_with_stream(stream, config).await
    }

    /// Runs the session over an already established stream.
    pub async fn connect_with_stream(stream: Box<dyn Transport>, config: ClientConfig) -> Result<Client, ClientError> {
        let (mut rd, mut wr) = tokio::io::split(stream);
        let connect = Packet::Connect(Connect {
            client_id: config.client_id.as_str().to_owned(),
            keep_alive: config.keep_alive,
            clean_start: true,
        });
        let bytes = encode_packet(&connect)?;
        wr.write_all(&bytes).await?;
        wr.flush().await?;
        let mut buf = Vec::with_capacity(4096);
        let first = timeout(config.handshake_timeout, read_packet(&mut rd, &mut buf))
            .await
            .map_err(|_| ClientError::Timeout)??;
        match first {
            Some((Packet::ConnAck(ack), _)) if ack.reason == reason::SUCCESS => {}
            Some((Packet::ConnAck(ack), _)) => return Err(ClientError::ConnectRefused(ack.reason)),
            Some((other, _)) => return Err(ClientError::Protocol(format!("expected CONNACK, got {other:?}"))),
            None => return Err(ClientError::Closed),
        }

        let bytes_written = Arc::new(AtomicU64::new(bytes.len() as u64));
        let writer: Writer = Arc::new(Mutex::new(wr));
        let (tx, events) = mpsc::unbounded_channel();
        let mut tasks = vec![tokio::spawn(reader_task(rd, buf, tx, writer.clone()))];
        if config.keep_alive > 0 {
            let period = Duration::from_secs(u64::from(config.keep_alive)) / 2;
            tasks.push(tokio::spawn(ping_task(writer.clone(), period, bytes_written.clone())));
        }
        Ok(Client {
            id: config.client_id,
            key: config.key,
            tee_public: config.tee_public,
            handshake_timeout: config.handshake_timeout,
            max_payload: config.max_payload,
            writer,
            events,
            pending: VecDeque::new(),
            closed: None,
            tasks,
            next_packet_id: 1,
            provisioned: false,
            response_subscribed: false,
            bytes_written,
        })
    }

    pub fn client_id(&self) -> &ClientId {
        &self.id
    }

    pub fn is_provisioned(&self) -> bool {
        self.provisioned
    }

    /// Total bytes this client has written to the transport.
    pub fn bytes_written(&self) -> u64 {
        self.bytes_written.load(Ordering::Relaxed)
    }

    /// Wraps the symmetric key to the trusted core and waits for the
    /// broker's status reply.
    pub async fn handshake(&mut self) -> Result<(), ClientError> {
        let blob = wrap_key(self.key.as_bytes(), &self.tee_public, &self.id)?;
        let response_topic = response_topic_for(self.id.as_str());
        if !self.response_subscribed {
            let code = self.subscribe(&response_topic).await?;
            if code != reason::GRANTED_QOS0 {
                return Err(ClientError::SubscribeRefused(code));
            }
            self.response_subscribed = true;
        }
        let mut correlation = vec![0u8; 8];
        rand::thread_rng().fill_bytes(&mut correlation);
        let publish = Publish {
            topic: HANDSHAKE_TOPIC.to_owned(),
            properties: PropertySet {
                response_topic: Some(response_topic.clone()),
                correlation_data: Some(correlation.clone()),
            },
            payload: blob.to_vec(),
        };
        self.send(&Packet::Publish(publish)).await?;

        let deadline = tokio::time::Instant::now() + self.handshake_timeout;
        loop {
            let incoming =
                tokio::time::timeout_at(deadline, self.next_event()).await.map_err(|_| ClientError::Timeout)?;
            match incoming {
                Incoming::Publish(p, len) => {
                    if p.topic != response_topic {
                        self.pending.push_back((p, len));
                        continue;
                    }
                    if p.properties.correlation_data.as_deref() != Some(&correlation[..]) {
                        continue;
                    }
                    let status =
                        *p.payload.first().ok_or_else(|| ClientError::Protocol("empty handshake reply".into()))?;
                    if status == 0 {
                        self.provisioned = true;
                        return Ok(());
                    }
                    return Err(ClientError::Rejected(status));
                }
                Incoming::SubAck(_) => {}
                Incoming::Closed(why) => return Err(self.closed_error(why)),
            }
        }
    }

    /// Replaces the key and provisions it again.
    pub async fn rekey(&mut self, key: SymmetricKey) -> Result<(), ClientError> {
        self.key = key;
        self.provisioned = false;
        self.handshake().await
    }

    /// Sends one subscription and returns the granted reason code.
    pub async fn subscribe(&mut self, filter: &str) -> Result<u8, ClientError> {
        let packet_id = self.next_packet_id;
        self.next_packet_id = self.next_packet_id.checked_add(1).unwrap_or(1);
        self.send(&Packet::Subscribe(Subscribe { packet_id, filters: vec![(filter.to_owned(), 0)] })).await?;
        let deadline = tokio::time::Instant::now() + self.handshake_timeout;
        loop {
            let incoming =
                tokio::time::timeout_at(deadline, self.next_event()).await.map_err(|_| ClientError::Timeout)?;
            match incoming {
                Incoming::SubAck(ack) if ack.packet_id == packet_id => {
                    return ack.reasons.first().copied().ok_or_else(|| ClientError::Protocol("empty SUBACK".into()));
                }
                Incoming::SubAck(_) => {}
                Incoming::Publish(p, len) => self.pending.push_back((p, len)),
                Incoming::Closed(why) => return Err(self.closed_error(why)),
            }
        }
    }

    /// Subscribes and fails unless the broker granted the filter.
    pub async fn subscribe_decrypting(&mut self, filter: &str) -> Result<(), ClientError> {
        match self.subscribe(filter).await? {
            reason::GRANTED_QOS0 => Ok(()),
            code => Err(ClientError::SubscribeRefused(code)),
        }
    }

    /// Seals `plaintext` and publishes it. Returns the number of bytes
    /// written to the transport.
    pub async fn publish_encrypted(&mut self, topic: &str, plaintext: &[u8]) -> Result<usize, ClientError> {
        if !self.provisioned {
            return Err(ClientError::NotProvisioned);
        }
        let envelope = seal_payload(&self.key, &self.id, plaintext)?;
        if envelope.encoded_len() > self.max_payload {
            return Err(ClientError::PayloadTooLarge(envelope.encoded_len()));
        }
        self.publish_raw(topic, envelope.encode(), PropertySet::default()).await
    }

    /// Publishes `payload` as is.
    pub async fn publish_raw(
        &mut self,
        topic: &str,
        payload: Vec<u8>,
        properties: PropertySet,
    ) -> Result<usize, ClientError> {
        let packet = Packet::Publish(Publish { topic: topic.to_owned(), properties, payload });
        self.send(&packet).await
    }

    /// Next application message, decrypted under this client's key.
    /// Returns `None` once the connection is closed.
    pub async fn recv(&mut self) -> Option<Delivery> {
        let response_topic = response_topic_for(self.id.as_str());
        loop {
            let (publish, wire_len) = if let Some(p) = self.pending.pop_front() {
                p
            } else {
                match self.next_event().await {
                    Incoming::Publish(p, len) => (p, len),
                    Incoming::SubAck(_) => continue,
                    Incoming::Closed(_) => return None,
                }
            };
            if publish.topic == response_topic {
                continue;
            }
            let payload = open_payload(&self.key, &publish.payload);
            return Some(Delivery { topic: publish.topic, wire_len, payload });
        }
    }

    /// Like [`Client::recv`] but gives up after `wait`.
    pub async fn recv_timeout(&mut self, wait: Duration) -> Option<Delivery> {
        timeout(wait, self.recv()).await.ok().flatten()
    }

    /// Sends DISCONNECT and closes the transport.
    pub async fn disconnect(mut self) -> Result<(), ClientError> {
        let res = self.send(&Packet::Disconnect(Disconnect { reason: reason::SUCCESS })).await;
        let _ = self.writer.lock().await.shutdown().await;
        res.map(|_| ())
    }

    async fn send(&mut self, packet: &Packet) -> Result<usize, ClientError> {
        let bytes = encode_packet(packet)?;
        let mut wr = self.writer.lock().await;
        wr.write_all(&bytes).await?;
        wr.flush().await?;
        self.bytes_written.fetch_add(bytes.len() as u64, Ordering::Relaxed);
        Ok(bytes.len())
    }

    async fn next_event(&mut self) -> Incoming {
        if let Some(why) = &self.closed {
            return Incoming::Closed(Some(why.clone()));
        }
        let ev = self.events.recv().await.unwrap_or(Incoming::Closed(None));
        if let Incoming::Closed(why) = &ev {
            self.closed = Some(why.clone().unwrap_or_else(|| "closed".into()));
        }
        ev
    }

    fn closed_error(&self, why: Option<String>) -> ClientError {
        match why {
            Some(w) if w != "closed" => ClientError::Protocol(w),
            _ => ClientError::Closed,
        }
    }
}

impl Drop for Client {
    fn drop(&mut self) {
        for t in &self.tasks {
            t.abort();
        }
    }
}

async fn read_packet<R: AsyncRead + Unpin>(
    rd: &mut R,
    buf: &mut Vec<u8>,
) -> Result<Option<(Packet, usize)>, ClientError> {
    loop {
        match decode_packet(buf) {
            Ok(Some((packet, used))) => {
                buf.drain(..used);
                return Ok(Some((packet, used)));
            }
            Ok(None) => {}
            Err(e) => return Err(decode_error(e)),
        }
        if rd.read_buf(buf).await? == 0 {
            return Ok(None);
        }
    }
}

fn decode_error(e: DecodeError) -> ClientError {
    ClientError::Protocol(e.to_string())
}

async fn reader_task(
    mut rd: ReadHalf<Box<dyn Transport>>,
    mut buf: Vec<u8>,
    tx: mpsc::UnboundedSender<Incoming>,
    writer: Writer,
) {
    let why = loop {
        match read_packet(&mut rd, &mut buf).await {
            Ok(Some((Packet::Publish(p), len))) => {
                if tx.send(Incoming::Publish(p, len)).is_err() {
                    return;
                }
            }
            Ok(Some((Packet::SubAck(a), _))) => {
                let _ = tx.send(Incoming::SubAck(a));
            }
            Ok(Some((Packet::PingResp, _))) => {}
            Ok(Some((Packet::PingReq, _))) => {
                if let Ok(bytes) = encode_packet(&Packet::PingResp) {
                    let _ = writer.lock().await.write_all(&bytes).await;
                }
            }
            Ok(Some((Packet::Disconnect(d), _))) => break Some(format!("broker sent DISCONNECT {:#04x}", d.reason)),
            Ok(Some((other, _))) => break Some(format!("unexpected packet from broker: {other:?}")),
            Ok(None) => break None,
            Err(e) => break Some(e.to_string()),
        }
    };
    let _ = tx.send(Incoming::Closed(why));
}

async fn ping_task(writer: Writer, period: Duration, counter: Arc<AtomicU64>) {
    let Ok(bytes) = encode_packet(&Packet::PingReq) else { return };
    let mut tick = tokio::time::interval(period);
    tick.tick().await;
    loop {
        tick.tick().await;
        let mut wr = writer.lock().await;
        if wr.write_all(&bytes).await.is_err() || wr.flush().await.is_err() {
            return;
        }
        counter.fetch_add(bytes.len() as u64, Ordering::Relaxed);
    }
}

fn host_of(addr: &str) -> String {
    if let Some(rest) = addr.strip_prefix('[') {
        if let Some(end) = rest.find(']') {
            return rest[..end].to_owned();
        }
    }
    match addr.rsplit_once(':') {
        Some((host, _)) => host.to_owned(),
        None => addr.to_owned(),
    }
}

fn tls_connector(ca: &PathBuf) -> Result<tokio_rustls::TlsConnector, ClientError> {
    let file = std::fs::File::open(ca).map_err(|e| ClientError::Tls(format!("{}: {e}", ca.display())))?;
    let mut roots = rustls::RootCertStore::empty();
    for cert in rustls_pemfile::certs(&mut std::io::BufReader::new(file)) {
        let cert = cert.map_err(|e| ClientError::Tls(format!("{}: {e}", ca.display())))?;
        roots.add(cert).map_err(|e| ClientError::Tls(e.to_string()))?;
    }
    if roots.is_empty() {
        return Err(ClientError::Tls(format!("no certificates in {}", ca.display())));
    }
    let provider = Arc::new(rustls::crypto::ring::default_provider());
    let config = rustls::ClientConfig::builder_with_provider(provider)
        .with_safe_default_protocol_versions()
        .map_err(|e| ClientError::Tls(e.to_string()))?
        .with_root_certificates(roots)
        .with_no_client_auth();
    Ok(tokio_rustls::TlsConnector::from(Arc::new(config)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn host_parsing() {
        assert_eq!(host_of("localhost:8883"), "localhost");
        assert_eq!(host_of("[::1]:8883"), "::1");
        assert_eq!(host_of("broker"), "broker");
    }

    #[tokio::test]
    async fn silent_broker_times_out() {
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        let hold = tokio::spawn(async move {
            let (s, _) = listener.accept().await.unwrap();
            tokio::time::sleep(Duration::from_secs(5)).await;
            drop(s);
        });
        let mut cfg =
            ClientConfig::new(addr.to_string(), ClientId::new("p01").unwrap(), SymmetricKey::generate(), [9; 32]);
        cfg.handshake_timeout = Duration::from_millis(200);
        assert!(matches!(Client::connect(cfg).await, Err(ClientError::Timeout)));
        hold.abort();
    }
}
