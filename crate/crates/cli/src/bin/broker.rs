use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use mqttz_cli::{fail, init_logging, parse_args, EXIT_CONFIG, EXIT_RUNTIME};
use mqttz_core::broker::server::DEFAULT_CACHE_CAPACITY;
use mqttz_core::broker::{BrokerConfig, RootKeySource, TlsFiles, DEFAULT_MAX_PAYLOAD, DEFAULT_QUEUE_CAPACITY};

/// MQTT broker whose payloads are re-encrypted inside an emulated trusted core.
#[derive(Debug, Parser)]
#[command(name = "mqtz-broker", version)]
struct Args {
    /// Address to listen on.
    #[arg(long, value_name = "ADDR:PORT", required_unless_present = "print_identity")]
    listen: Option<String>,
    #[arg(long, value_name = "PEM", requires = "tls_key")]
    tls_cert: Option<PathBuf>,
    #[arg(long, value_name = "PEM", requires = "tls_cert")]
    tls_key: Option<PathBuf>,
    /// Accept plain TCP instead of TLS.
    #[arg(long, conflicts_with = "tls_cert")]
    plaintext: bool,
    /// ACL file: `<client-id|*> <pub|sub|pubsub> <topic-filter>` per line.
    #[arg(long, value_name = "FILE", required_unless_present = "print_identity")]
    acl: Option<PathBuf>,
    /// File holding the 64-hex-character device root key. Without it the
    /// key is read from MQTTZ_ROOT_KEY.
    #[arg(long, value_name = "FILE")]
    root_key: Option<PathBuf>,
    /// Directory for the sealed key store.
    #[arg(long, value_name = "DIR", required_unless_present = "print_identity")]
    storage: Option<PathBuf>,
    #[arg(long, value_name = "N", default_value_t = DEFAULT_CACHE_CAPACITY)]
    cache_capacity: usize,
    /// Largest accepted publish payload in bytes.
    #[arg(long, value_name = "BYTES", default_value_t = DEFAULT_MAX_PAYLOAD)]
    max_payload: usize,
    /// Outbound messages buffered per session before the oldest is dropped.
    #[arg(long, value_name = "N", default_value_t = DEFAULT_QUEUE_CAPACITY)]
    queue_capacity: usize,
    /// Append 1 Hz per-client throughput and CPU samples here.
    #[arg(long, value_name = "CSV")]
    metrics_out: Option<PathBuf>,
    /// Print the trusted core's public key as hex and exit.
    #[arg(long)]
    print_identity: bool,
}

impl Args {
    fn root_key(&self) -> RootKeySource {
        match &self.root_key {
            Some(p) => RootKeySource::File(p.clone()),
            None => RootKeySource::Env,
        }
    }

    fn into_config(self) -> BrokerConfig {
        let root_key = self.root_key();
        BrokerConfig {
            listen: self.listen.unwrap_or_default(),
            tls: self.tls_cert.zip(self.tls_key).map(|(cert, key)| TlsFiles { cert, key }),
            plaintext: self.plaintext,
            acl: self.acl.unwrap_or_default(),
            root_key,
            storage: self.storage.unwrap_or_default(),
            cache_capacity: self.cache_capacity,
            max_payload: self.max_payload,
            queue_capacity: self.queue_capacity,
            metrics_out: self.metrics_out,
        }
    }
}

fn main() -> ExitCode {
    let args: Args = parse_args();
    init_logging("info");

    if args.print_identity {
        return match args.root_key().load() {
            Ok(root) => {
                println!("{}", hex::encode(root.public_identity()));
                ExitCode::SUCCESS
            }
            Err(e) => fail(EXIT_CONFIG, e),
        };
    }

    let config = args.into_config();
    let rt = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => return fail(EXIT_RUNTIME, e),
    };
    match rt.block_on(mqttz_core::broker::run(config)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.exit_code() as u8, e),
    }
}
