mod common;

use std::time::Duration;

use common::{TestBroker, OPEN_ACL};
use mqttz_core::client::{seal_payload, Client, ClientError, SymmetricKey};
use mqttz_core::ids::ClientId;
use mqttz_core::trusted_core::DeviceRootKey;
use mqttz_core::wire::PropertySet;

const WAIT: Duration = Duration::from_secs(5);

#[tokio::test]
async fn publish_reaches_subscriber_as_plaintext() {
    let b = TestBroker::start(OPEN_ACL).await;
    let mut p01 = b.client("p01").await;
    let mut p02 = b.client("p02").await;
    p02.subscribe_decrypting("ecg/#").await.unwrap();
    p01.publish_encrypted("ecg/p01", b"lead I sample").await.unwrap();
    let d = p02.recv_timeout(WAIT).await.unwrap();
    assert_eq!(d.topic, "ecg/p01");
    assert_eq!(d.payload.unwrap(), b"lead I sample");
    assert!(!common::contains(&b.take_wire(), b"lead I sample"));
    b.stop().await;
}

#[tokio::test]
async fn publisher_does_not_receive_for_foreign_filter() {
    let b = TestBroker::start(OPEN_ACL).await;
    let mut p01 = b.client("p01").await;
    let mut p02 = b.client("p02").await;
    p02.subscribe_decrypting("other/#").await.unwrap();
    p01.publish_encrypted("ecg/p01", b"x").await.unwrap();
    assert!(p02.recv_timeout(Duration::from_millis(300)).await.is_none());
    b.stop().await;
}

#[tokio::test]
async fn garbage_payload_is_dropped_and_stream_continues() {
    let b = TestBroker::start(OPEN_ACL).await;
    let mut p01 = b.client("p01").await;
    let mut p02 = b.client("p02").await;
    p02.subscribe_decrypting("t").await.unwrap();
    p01.publish_raw("t", b"not an envelope".to_vec(), PropertySet::default()).await.unwrap();
    p01.publish_encrypted("t", b"after").await.unwrap();
    let d = p02.recv_timeout(WAIT).await.unwrap();
    assert_eq!(d.payload.unwrap(), b"after");
    assert_eq!(b.broker.counters().malformed, 1);
    b.stop().await;
}

/// Bare MQTT peer that acknowledges CONNECT and SUBSCRIBE and then pushes
/// the given payloads on topic "t", bypassing any broker logic.
async fn scripted_peer(payloads: Vec<Vec<u8>>) -> std::net::SocketAddr {
    use mqttz_core::wire::{decode_packet, encode_packet, ConnAck, Packet, Publish, SubAck};
    use tokio::io::{AsyncReadExt, AsyncWriteExt};
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move {
        let (mut s, _) = listener.accept().await.unwrap();
        let mut buf = Vec::new();
        loop {
            while let Ok(Some((packet, used))) = decode_packet(&buf) {
                buf.drain(..used);
                let reply = match packet {
                    Packet::Connect(_) => vec![Packet::ConnAck(ConnAck { session_present: false, reason: 0 })],
                    Packet::Subscribe(sub) => {
                        let mut out = vec![Packet::SubAck(SubAck { packet_id: sub.packet_id, reasons: vec![0] })];
                        out.extend(payloads.iter().map(|p| {
                            Packet::Publish(Publish {
                                topic: "t".into(),
                                properties: Default::default(),
                                payload: p.clone(),
                            })
                        }));
                        out
                    }
                    _ => vec![],
                };
                for p in reply {
                    s.write_all(&encode_packet(&p).unwrap()).await.unwrap();
                }
            }
            if s.read_buf(&mut buf).await.unwrap_or(0) == 0 {
                return;
            }
        }
    });
    addr
}

#[tokio::test]
async fn subscriber_reports_failures_per_message() {
    let key = SymmetricKey::generate();
    let me = ClientId::new("p02").unwrap();
    let foreign = seal_payload(&SymmetricKey::generate(), &me, b"foreign").unwrap().encode();
    let good = seal_payload(&key, &me, b"good").unwrap().encode();
    let addr = scripted_peer(vec![b"garbage".to_vec(), foreign, good]).await;
    let mut cfg = mqttz_core::client::ClientConfig::new(addr.to_string(), me, key, [0; 32]);
    cfg.keep_alive = 0;
    let mut c = Client::connect(cfg).await.unwrap();
    c.subscribe_decrypting("t").await.unwrap();
    assert!(matches!(c.recv_timeout(WAIT).await.unwrap().payload, Err(ClientError::Envelope(_))));
    assert!(matches!(c.recv_timeout(WAIT).await.unwrap().payload, Err(ClientError::AuthFailure)));
    assert_eq!(c.recv_timeout(WAIT).await.unwrap().payload.unwrap(), b"good");
}

#[tokio::test]
async fn spoofed_origin_is_dropped() {
    let b = TestBroker::start(OPEN_ACL).await;
    let mut p01 = b.client("p01").await;
    let _p03 = b.client("p03").await;
    let mut p02 = b.client("p02").await;
    p02.subscribe_decrypting("t").await.unwrap();
    let key = SymmetricKey::generate();
    let spoof = seal_payload(&key, &ClientId::new("p03").unwrap(), b"claimed").unwrap();
    p01.publish_raw("t", spoof.encode(), PropertySet::default()).await.unwrap();
    p01.publish_encrypted("t", b"genuine").await.unwrap();
    assert_eq!(p02.recv_timeout(WAIT).await.unwrap().payload.unwrap(), b"genuine");
    assert_eq!(b.broker.counters().origin_mismatch, 1);
    b.stop().await;
}

#[tokio::test]
async fn not_provisioned_and_oversize() {
    let b = TestBroker::start(OPEN_ACL).await;
    let mut c = Client::connect(b.config("p01")).await.unwrap();
    assert!(matches!(c.publish_encrypted("t", b"x").await, Err(ClientError::NotProvisioned)));
    c.handshake().await.unwrap();
    let big = vec![0u8; (1 << 20) - 46];
    assert!(matches!(c.publish_encrypted("t", &big).await, Err(ClientError::PayloadTooLarge(_))));
    c.publish_encrypted("t", &big[..(1 << 20) - 47]).await.unwrap();
    b.stop().await;
}

#[tokio::test]
async fn rekey_keeps_the_session_usable() {
    let b = TestBroker::start(OPEN_ACL).await;
    let mut p01 = b.client("p01").await;
    let mut p02 = b.client("p02").await;
    p02.subscribe_decrypting("t").await.unwrap();
    p01.handshake().await.unwrap();
    p01.rekey(SymmetricKey::generate()).await.unwrap();
    p02.rekey(SymmetricKey::generate()).await.unwrap();
    p01.publish_encrypted("t", b"fresh keys").await.unwrap();
    assert_eq!(p02.recv_timeout(WAIT).await.unwrap().payload.unwrap(), b"fresh keys");
    b.stop().await;
}

#[tokio::test]
async fn changed_root_key_rejects_handshake() {
    let b = TestBroker::start(OPEN_ACL).await;
    let pinned = b.tee_public();
    b.stop().await;
    let b2 = TestBroker::start_with(OPEN_ACL, DeviceRootKey::generate(), 4, Default::default(), None).await;
    let mut cfg = b2.config("p01");
    cfg.tee_public = pinned;
    let mut c = Client::connect(cfg).await.unwrap();
    assert!(matches!(c.handshake().await, Err(ClientError::Rejected(0x01))));
    b2.stop().await;
}

#[tokio::test]
async fn long_client_id_cannot_provision() {
    let b = TestBroker::start(OPEN_ACL).await;
    let mut c = Client::connect(b.config("abcdefghijklmnopq")).await.unwrap();
    assert!(matches!(c.handshake().await, Err(ClientError::IdTooLong)));
    b.stop().await;
}

#[tokio::test]
async fn keys_survive_restart_via_storage() {
    let dir = tempfile::tempdir().unwrap();
    let root = || DeviceRootKey::from_bytes(&[3; 32]).unwrap();
    let b = TestBroker::start_with(OPEN_ACL, root(), 4, Default::default(), Some(dir.path())).await;
    let (k1, k2) = (SymmetricKey::generate(), SymmetricKey::generate());
    for (id, key) in [("p01", &k1), ("p02", &k2)] {
        let mut cfg = b.config(id);
        cfg.key = key.clone();
        Client::connect(cfg).await.unwrap().handshake().await.unwrap();
    }
    b.stop().await;

    let b = TestBroker::start_with(OPEN_ACL, root(), 4, Default::default(), Some(dir.path())).await;
    let core = b.broker.trusted_core();
    assert_eq!(core.export_counters().await.stored_keys, 2);
    let (p01, p02) = (ClientId::new("p01").unwrap(), ClientId::new("p02").unwrap());
    let env = seal_payload(&k1, &p01, b"persisted").unwrap();
    let (out, timings) = core.reencrypt(&p01, &p02, env).await.unwrap();
    assert!(!timings.dec_key_cached && !timings.enc_key_cached);
    assert_eq!(mqttz_core::client::open_payload(&k2, &out.encode()).unwrap(), b"persisted");
    b.stop().await;
}

#[tokio::test]
async fn acl_denied_publish_is_not_delivered() {
    let b = TestBroker::start("* sub #\np01 pub ecg/p01\n").await;
    let mut p01 = b.client("p01").await;
    let mut p02 = b.client("p02").await;
    p02.subscribe_decrypting("#").await.unwrap();
    p01.publish_encrypted("ecg/p02", b"denied").await.unwrap();
    p01.publish_encrypted("ecg/p01", b"allowed").await.unwrap();
    let d = p02.recv_timeout(WAIT).await.unwrap();
    assert_eq!((d.topic.as_str(), d.payload.unwrap()), ("ecg/p01", b"allowed".to_vec()));
    assert_eq!(b.broker.counters().acl_denied, 1);
    b.stop().await;
}

#[tokio::test]
async fn handshake_topic_is_not_subscribable() {
    let b = TestBroker::start(OPEN_ACL).await;
    let mut c = b.client("p01").await;
    assert_eq!(c.subscribe("$mqttz/handshake").await.unwrap(), 0x87);
    assert_eq!(c.subscribe("$mqttz/resp/p02").await.unwrap(), 0x87);
    assert_eq!(c.subscribe("a/#/b").await.unwrap(), 0x8F);
    b.stop().await;
}

#[tokio::test]
async fn session_takeover_disconnects_old_client() {
    let b = TestBroker::start(OPEN_ACL).await;
    let mut old = b.client("p01").await;
    let _new = b.client("p01").await;
    assert!(old.recv_timeout(WAIT).await.is_none());
    b.stop().await;
}

#[tokio::test]
async fn bytes_of_a_session_that_ended_mid_window_are_sampled() {
    let b = TestBroker::start(OPEN_ACL).await;
    let mut sampler = mqttz_core::broker::Sampler::new();
    let mut p01 = b.client("p01").await;
    let mut p02 = b.client("p02").await;
    p02.subscribe_decrypting("t").await.unwrap();
    b.broker.record_sample(&mut sampler);

    p01.publish_encrypted("t", &[7u8; 100]).await.unwrap();
    assert!(p02.recv_timeout(WAIT).await.unwrap().payload.is_ok());
    p02.disconnect().await.unwrap();
    for _ in 0..100 {
        if b.broker.session(&ClientId::new("p02").unwrap()).is_none() {
            break;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    let sample = b.broker.record_sample(&mut sampler);
    let p02_bytes = sample.per_client.iter().find(|(c, _)| c == "p02").map(|(_, n)| *n);
    // 147 B envelope + topic "t" (3) + empty properties (1) + fixed header (3)
    assert_eq!(p02_bytes, Some(154));
    let next = b.broker.record_sample(&mut sampler);
    assert!(next.per_client.iter().all(|(c, _)| c != "p02"));
    b.stop().await;
}
