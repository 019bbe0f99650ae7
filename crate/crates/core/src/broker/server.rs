//! Listener, TLS setup, metrics collection and process lifecycle.

use std::fs::File;
use std::future::Future;
use std::io::{BufReader, BufWriter, Write};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use thiserror::Error;
use tokio::net::TcpListener;
use tokio_rustls::rustls::{self, pki_types::PrivateKeyDer};
use tokio_rustls::TlsAcceptor;
use tracing::{debug, info, warn};
use zeroize::Zeroizing;

use super::acl::AclRuleSet;
use super::metrics::{Sampler, CSV_HEADER, SAMPLE_PERIOD};
use super::{Broker, BrokerOptions, DEFAULT_MAX_PAYLOAD, DEFAULT_QUEUE_CAPACITY};
use crate::trusted_core::{DeviceRootKey, TrustedCore, TrustedCoreError, ROOT_KEY_ENV};
use crate::wire::envelope::ENVELOPE_OVERHEAD;

pub const DEFAULT_CACHE_CAPACITY: usize = 64;

#[derive(Debug, Error)]
pub enum BrokerError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("TLS configuration error: {0}")]
    Tls(String),
    #[error("trusted core failed to start: {0}")]
    TrustedCore(#[from] TrustedCoreError),
    #[error("cannot bind listener: {0}")]
    Bind(std::io::Error),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl BrokerError {
    /// 1 for configuration problems, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            BrokerError::Config(_) | BrokerError::Tls(_) | BrokerError::TrustedCore(_) => 1,
            BrokerError::Bind(_) | BrokerError::Io(_) => 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TlsFiles {
    pub cert: PathBuf,
    pub key: PathBuf,
}

pub enum RootKeySource {
    /// File holding 64 hex characters.
    File(PathBuf),
    /// The `MQTTZ_ROOT_KEY` environment variable.
    Env,
    Hex(Zeroizing<String>),
}

impl RootKeySource {
    pub fn load(&self) -> Result<DeviceRootKey, BrokerError> {
        let key = match self {
            RootKeySource::File(p) => DeviceRootKey::from_file(p)
                .map_err(|e| BrokerError::Config(format!("root key {}: {e}", p.display())))?,
            RootKeySource::Env => DeviceRootKey::from_env()
                .ok_or_else(|| BrokerError::Config(format!("{ROOT_KEY_ENV} is not set")))?
                .map_err(|e| BrokerError::Config(format!("{ROOT_KEY_ENV}: {e}")))?,
            RootKeySource::Hex(h) => DeviceRootKey::from_hex(h).map_err(|e| BrokerError::Config(e.to_string()))?,
        };
        Ok(key)
    }
}

pub struct BrokerConfig {
    pub listen: String,
    pub tls: Option<TlsFiles>,
    pub plaintext: bool,
    pub acl: PathBuf,
    pub root_key: RootKeySource,
    pub storage: PathBuf,
    pub cache_capacity: usize,
    pub max_payload: usize,
    pub queue_capacity: usize,
    pub metrics_out: Option<PathBuf>,
}

impl BrokerConfig {
    /// Plaintext listener with default limits; callers switch on TLS
    /// explicitly.
    pub fn plaintext(listen: impl Into<String>, acl: PathBuf, root_key: RootKeySource, storage: PathBuf) -> Self {
        BrokerConfig {
            listen: listen.into(),
            tls: None,
            plaintext: true,
            acl,
            root_key,
            storage,
            cache_capacity: DEFAULT_CACHE_CAPACITY,
            max_payload: DEFAULT_MAX_PAYLOAD,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            metrics_out: None,
        }
    }

    pub fn validate(&self) -> Result<(), BrokerError> {
        match (&self.tls, self.plaintext) {
            (None, false) => {
                return Err(BrokerError::Tls("either TLS certificate/key or plaintext mode is required".into()))
            }
            (Some(_), true) => return Err(BrokerError::Config("TLS and plaintext mode are exclusive".into())),
            _ => {}
        }
        if self.max_payload < ENVELOPE_OVERHEAD {
            return Err(BrokerError::Config(format!("max payload must be at least {ENVELOPE_OVERHEAD} bytes")));
        }
        if self.cache_capacity == 0 {
            return Err(BrokerError::Config("cache capacity must be at least 1".into()));
        }
        Ok(())
    }
}

fn load_tls(files: &TlsFiles) -> Result<TlsAcceptor, BrokerError> {
    let open =
        |p: &PathBuf| File::open(p).map(BufReader::new).map_err(|e| BrokerError::Tls(format!("{}: {e}", p.display())));
    let certs = rustls_pemfile::certs(&mut open(&files.cert)?)
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| BrokerError::Tls(format!("certificate: {e}")))?;
    if certs.is_empty() {
        return Err(BrokerError::Tls(format!("no certificate in {}", files.cert.display())));
    }
    let key: PrivateKeyDer<'static> = rustls_pemfile::private_key(&mut open(&files.key)?)
        .map_err(|e| BrokerError::Tls(format!("private key: {e}")))?
        .ok_or_else(|| BrokerError::Tls(format!("no private key in {}", files.key.display())))?;
    let provider = Arc::new(rustls::crypto::ring::default_provider());
    let config = rustls::ServerConfig::builder_with_provider(provider)
        .with_safe_default_protocol_versions()
        .map_err(|e| BrokerError::Tls(e.to_string()))?
        .with_no_client_auth()
        .with_single_cert(certs, key)
        .map_err(|e| BrokerError::Tls(e.to_string()))?;
    Ok(TlsAcceptor::from(Arc::new(config)))
}

pub struct Server {
    listener: TcpListener,
    tls: Option<TlsAcceptor>,
    broker: Broker,
    metrics_out: Option<PathBuf>,
}

impl Server {
    /// Loads ACLs, TLS material and the root key, starts the trusted core and
    /// binds the listener. Nothing is accepted until [`Server::run_until`].
    pub async fn bind(config: &BrokerConfig) -> Result<Server, BrokerError> {
        config.validate()?;
        let acl =
            AclRuleSet::load(&config.acl).map_err(|e| BrokerError::Config(format!("{}: {e}", config.acl.display())))?;
        let tls = config.tls.as_ref().map(load_tls).transpose()?;
        let root = config.root_key.load()?;
        let core = TrustedCore::init(&root, &config.storage, config.cache_capacity)?;
        drop(root);
        let broker = Broker::new(
            acl,
            core,
            BrokerOptions { max_payload: config.max_payload, queue_capacity: config.queue_capacity },
        );
        let listener = TcpListener::bind(&config.listen).await.map_err(BrokerError::Bind)?;
        Ok(Server { listener, tls, broker, metrics_out: config.metrics_out.clone() })
    }

    pub fn local_addr(&self) -> std::io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    pub fn broker(&self) -> &Broker {
        &self.broker
    }

    /// Accepts connections and samples metrics once per second until
    /// `shutdown` resolves, then disconnects everyone and flushes metrics.
    pub async fn run_until(self, shutdown: impl Future<Output = ()>) -> Result<(), BrokerError> {
        let Server { listener, tls, broker, metrics_out } = self;
        let mut csv = match &metrics_out {
            Some(p) => {
                let mut w = BufWriter::new(File::create(p)?);
                writeln!(w, "{CSV_HEADER}")?;
                Some(w)
            }
            None => None,
        };
        let mut sampler = Sampler::new();
        let mut ticker = tokio::time::interval(SAMPLE_PERIOD);
        ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        ticker.tick().await;
        tokio::pin!(shutdown);

        loop {
            tokio::select! {
                _ = &mut shutdown => break,
                _ = ticker.tick() => {
                    let sample = broker.record_sample(&mut sampler);
                    if let Some(w) = csv.as_mut() {
                        sample.write_csv(w)?;
                        w.flush()?;
                    }
                }
                accepted = listener.accept() => {
                    let (tcp, peer) = match accepted {
                        Ok(a) => a,
                        Err(e) => {
                            warn!(error = %e, "accept failed");
                            continue;
                        }
                    };
                    let _ = tcp.set_nodelay(true);
                    let broker = broker.clone();
                    let tls = tls.clone();
                    tokio::spawn(async move {
                        let result = match tls {
                            Some(acceptor) => match acceptor.accept(tcp).await {
                                Ok(stream) => broker.serve_connection(stream).await,
                                Err(e) => {
                                    debug!(%peer, error = %e, "TLS handshake failed");
                                    Ok(())
                                }
                            },
                            None => broker.serve_connection(tcp).await,
                        };
                        if let Err(e) = result {
                            debug!(%peer, error = %e, "connection ended with error");
                        }
                    });
                }
            }
        }

        info!("shutting down");
        broker.shutdown();
        let sample = broker.record_sample(&mut sampler);
        if let Some(mut w) = csv {
            sample.write_csv(&mut w)?;
            w.flush()?;
        }
        Ok(())
    }
}

async fn termination() {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        match signal(SignalKind::terminate()) {
            Ok(mut term) => {
                tokio::select! {
                    _ = tokio::signal::ctrl_c() => {}
                    _ = term.recv() => {}
                }
            }
            Err(_) => {
                let _ = tokio::signal::ctrl_c().await;
            }
        }
    }
    #[cfg(not(unix))]
    {
        let _ = tokio::signal::ctrl_c().await;
    }
}

/// Binds and serves until SIGINT/SIGTERM.
pub async fn run(config: BrokerConfig) -> Result<(), BrokerError> {
    let server = Server::bind(&config).await?;
    let identity = server.broker().trusted_core().public_identity();
    info!(addr = %server.local_addr()?, identity = %hex::encode(identity), "listening");
    server.run_until(termination()).await
}
