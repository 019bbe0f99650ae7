use std::collections::HashSet;
use std::path::Path;

use mqttz_core::bench::{CacheMode, MicrobenchFixture};
use mqttz_core::client::{open_payload, seal_payload, SymmetricKey};

fn sources(dir: &str) -> Vec<(String, String)> {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join(dir);
    let mut out = Vec::new();
    for entry in std::fs::read_dir(&root).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "rs") {
            out.push((path.display().to_string(), std::fs::read_to_string(&path).unwrap()));
        }
    }
    assert!(!out.is_empty(), "no sources under {}", root.display());
    out
}

#[test]
fn broker_sources_never_touch_crypto() {
    let forbidden = [
        "crypto::",
        "aes_gcm",
        "hkdf",
        "x25519",
        "open_envelope",
        "seal_envelope",
        "open_payload",
        "seal_payload",
        "SymmetricKey",
        "SecretKey",
        "DeviceRootKey::bytes",
        "client::",
    ];
    for (path, text) in sources("src/broker") {
        for (n, raw) in text.lines().enumerate() {
            // TLS transport crypto is allowed; envelope crypto is not.
            let line = raw.replace("rustls::crypto::", "");
            for f in forbidden {
                assert!(!line.contains(f), "{path}:{}: broker code mentions `{f}`: {raw}", n + 1);
            }
        }
    }
}

#[test]
fn trusted_core_surface_returns_no_key_material() {
    let text = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("src/trusted_core/mod.rs")).unwrap();
    for private in ["mod cache;", "mod state;", "mod storage;"] {
        assert!(text.lines().any(|l| l.trim() == private), "{private} must stay private");
    }
    // Collapse multi-line signatures, then inspect every public function.
    let flat = text.split_whitespace().collect::<Vec<_>>().join(" ");
    let mut seen = 0;
    for sig in flat.split("pub ").skip(1).filter(|s| s.starts_with("fn ") || s.starts_with("async fn ")) {
        let sig = &sig[..sig.find('{').unwrap_or(sig.len())];
        let ret = sig.rsplit_once("->").map_or("", |(_, r)| r.trim());
        seen += 1;
        assert!(!ret.contains("SecretKey") && !ret.contains("Zeroizing<[u8"), "{sig}");
        if ret.contains("[u8; 32]") {
            assert!(sig.starts_with("fn public_identity"), "only the public identity is 32 raw bytes: {sig}");
        }
    }
    assert!(seen >= 10, "parsed only {seen} signatures");
}

#[test]
fn reencryption_always_draws_a_fresh_nonce() {
    let dir = tempfile::tempdir().unwrap();
    let fx = MicrobenchFixture::new(CacheMode::Warm, dir.path()).unwrap();
    let env = seal_payload(&fx.origin_key, &fx.origin, b"same plaintext every time").unwrap();
    let mut nonces = HashSet::new();
    nonces.insert(env.nonce);
    for _ in 0..20_000 {
        let (out, _) = fx.core.reencrypt_blocking(&fx.origin, &fx.dest, env.clone()).unwrap();
        assert!(nonces.insert(out.nonce), "nonce repeated");
        assert_eq!(out.origin_id().unwrap(), fx.dest);
    }
    // the origin's key cannot open what was re-encrypted for the destination
    let (out, _) = fx.core.reencrypt_blocking(&fx.origin, &fx.dest, env).unwrap();
    assert!(open_payload(&fx.origin_key, &out.encode()).is_err());
    assert!(open_payload(&SymmetricKey::generate(), &out.encode()).is_err());
}
