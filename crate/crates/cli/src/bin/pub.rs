use std::io::Read;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use mqttz_cli::{fail, init_logging, parse_args, parse_tee_public, TransportArgs, EXIT_CONFIG, EXIT_RUNTIME};
use mqttz_core::client::{Client, ClientConfig, SymmetricKey};
use mqttz_core::ids::ClientId;

/// Provision a key with the broker's trusted core and publish one encrypted
/// message.
#[derive(Debug, Parser)]
#[command(name = "mqtz-pub", version)]
struct Args {
    #[arg(long, value_name = "HOST:PORT")]
    broker: String,
    #[arg(long)]
    id: String,
    /// Symmetric key file (64 hex characters); created if missing.
    #[arg(long, value_name = "FILE")]
    key: PathBuf,
    /// The broker's trusted-core public key, as printed by
    /// `mqtz-broker --print-identity`.
    #[arg(long, value_name = "HEX", value_parser = parse_tee_public)]
    tee_pub: [u8; 32],
    #[arg(long)]
    topic: String,
    #[arg(long, conflicts_with = "stdin", required_unless_present = "stdin")]
    message: Option<String>,
    /// Publish all of standard input as a single message.
    #[arg(long)]
    stdin: bool,
    #[command(flatten)]
    transport: TransportArgs,
}

fn main() -> ExitCode {
    let args: Args = parse_args();
    init_logging("warn");

    let security = match args.transport.security() {
        Ok(s) => s,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    let id = match ClientId::new(args.id.as_str()) {
        Ok(id) => id,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    let key = match SymmetricKey::load_or_generate(&args.key) {
        Ok(k) => k,
        Err(e) => return fail(EXIT_CONFIG, format!("{}: {e}", args.key.display())),
    };
    let payload = match args.message {
        Some(m) => m.into_bytes(),
        None => {
            let mut buf = Vec::new();
            if let Err(e) = std::io::stdin().read_to_end(&mut buf) {
                return fail(EXIT_RUNTIME, format!("reading stdin: {e}"));
            }
            buf
        }
    };

    let config = ClientConfig { security, ..ClientConfig::new(args.broker, id, key, args.tee_pub) };
    let rt = match tokio::runtime::Builder::new_current_thread().enable_all().build() {
        Ok(rt) => rt,
        Err(e) => return fail(EXIT_RUNTIME, e),
    };
    let result = rt.block_on(async {
        let mut client = Client::connect(config).await?;
        client.handshake().await?;
        client.publish_encrypted(&args.topic, &payload).await?;
        client.disconnect().await
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(EXIT_RUNTIME, e),
    }
}
