#![allow(dead_code)]

use std::io;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::pin::Pin;
use std::sync::{Arc, Mutex};
use std::task::{Context, Poll};

use mqttz_core::broker::{AclRuleSet, Broker, BrokerOptions};
use mqttz_core::client::{Client, ClientConfig, SymmetricKey};
use mqttz_core::ids::ClientId;
use mqttz_core::trusted_core::{DeviceRootKey, TrustedCore};
use tokio::io::{AsyncRead, AsyncWrite, ReadBuf};
use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

pub mod oracles;

pub const OPEN_ACL: &str = "* pubsub #\n";

/// Records every byte that passes through a stream in either direction.
pub struct Tap<S> {
    inner: S,
    log: Arc<Mutex<Vec<u8>>>,
}

impl<S> Tap<S> {
    pub fn new(inner: S, log: Arc<Mutex<Vec<u8>>>) -> Self {
        Tap { inner, log }
    }
}

impl<S: AsyncRead + Unpin> AsyncRead for Tap<S> {
    fn poll_read(mut self: Pin<&mut Self>, cx: &mut Context<'_>, buf: &mut ReadBuf<'_>) -> Poll<io::Result<()>> {
        let before = buf.filled().len();
        let res = Pin::new(&mut self.inner).poll_read(cx, buf);
        if let Poll::Ready(Ok(())) = res {
            let new = buf.filled()[before..].to_vec();
            self.log.lock().unwrap().extend_from_slice(&new);
        }
        res
    }
}

impl<S: AsyncWrite + Unpin> AsyncWrite for Tap<S> {
    fn poll_write(mut self: Pin<&mut Self>, cx: &mut Context<'_>, data: &[u8]) -> Poll<io::Result<usize>> {
        let res = Pin::new(&mut self.inner).poll_write(cx, data);
        if let Poll::Ready(Ok(n)) = res {
            self.log.lock().unwrap().extend_from_slice(&data[..n]);
        }
        res
    }

    fn poll_flush(mut self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<io::Result<()>> {
        Pin::new(&mut self.inner).poll_flush(cx)
    }

    fn poll_shutdown(mut self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<io::Result<()>> {
        Pin::new(&mut self.inner).poll_shutdown(cx)
    }
}

/// A broker served in-process on a loopback port. Every accepted
/// connection runs through a [`Tap`] feeding `wire`.
pub struct TestBroker {
    pub addr: SocketAddr,
    pub broker: Broker,
    pub root: DeviceRootKey,
    pub wire: Arc<Mutex<Vec<u8>>>,
    pub storage: PathBuf,
    _dir: tempfile::TempDir,
    stop: Option<oneshot::Sender<()>>,
    task: JoinHandle<()>,
}

impl TestBroker {
    pub async fn start(acl: &str) -> TestBroker {
        Self::start_with(acl, DeviceRootKey::generate(), 64, BrokerOptions::default(), None).await
    }

    pub async fn start_with(
        acl: &str,
        root: DeviceRootKey,
        cache_capacity: usize,
        options: BrokerOptions,
        storage: Option<&Path>,
    ) -> TestBroker {
        let dir = tempfile::tempdir().unwrap();
        let storage = storage.map(Path::to_path_buf).unwrap_or_else(|| dir.path().join("store"));
        std::fs::create_dir_all(&storage).unwrap();
        let acl = AclRuleSet::parse(acl).unwrap();
        let core = TrustedCore::init(&root, &storage, cache_capacity).unwrap();
        let broker = Broker::new(acl, core, options);
        let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        let wire = Arc::new(Mutex::new(Vec::new()));
        let (stop, mut stopped) = oneshot::channel();
        let task = {
            let broker = broker.clone();
            let wire = wire.clone();
            tokio::spawn(async move {
                loop {
                    tokio::select! {
                        _ = &mut stopped => break,
                        acc = listener.accept() => {
                            let Ok((tcp, _)) = acc else { continue };
                            let _ = tcp.set_nodelay(true);
                            let broker = broker.clone();
                            let tap = Tap::new(tcp, wire.clone());
                            tokio::spawn(async move { let _ = broker.serve_connection(tap).await; });
                        }
                    }
                }
                broker.shutdown();
            })
        };
        TestBroker { addr, broker, root, wire, storage, _dir: dir, stop: Some(stop), task }
    }

    pub fn tee_public(&self) -> [u8; 32] {
        self.broker.trusted_core().public_identity()
    }

    pub fn config(&self, id: &str) -> ClientConfig {
        ClientConfig::new(
            self.addr.to_string(),
            ClientId::new(id).unwrap(),
            SymmetricKey::generate(),
            self.tee_public(),
        )
    }

    /// Connected and provisioned client.
    pub async fn client(&self, id: &str) -> Client {
        let mut c = Client::connect(self.config(id)).await.unwrap();
        c.handshake().await.unwrap();
        c
    }

    pub fn take_wire(&self) -> Vec<u8> {
        std::mem::take(&mut *self.wire.lock().unwrap())
    }

    pub async fn stop(mut self) {
        if let Some(s) = self.stop.take() {
            let _ = s.send(());
        }
        let _ = (&mut self.task).await;
    }
}

pub fn contains(haystack: &[u8], needle: &[u8]) -> bool {
    needle.is_empty() || memchr::memmem::find(haystack, needle).is_some()
}
