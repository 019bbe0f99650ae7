use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use mqttz_cli::{fail, init_logging, parse_args, parse_tee_public, TransportArgs, EXIT_CONFIG, EXIT_RUNTIME};
use mqttz_core::client::{Client, ClientConfig, ClientError, SymmetricKey};
use mqttz_core::ids::ClientId;

/// Provision a key with the broker's trusted core, subscribe and print
/// decrypted messages.
#[derive(Debug, Parser)]
#[command(name = "mqtz-sub", version)]
struct Args {
    #[arg(long, value_name = "HOST:PORT")]
    broker: String,
    #[arg(long)]
    id: String,
    /// Symmetric key file (64 hex characters); created if missing.
    #[arg(long, value_name = "FILE")]
    key: PathBuf,
    #[arg(long, value_name = "HEX", value_parser = parse_tee_public)]
    tee_pub: [u8; 32],
    #[arg(long)]
    filter: String,
    /// Write each plaintext as a 4-byte big-endian length followed by the
    /// bytes. Without it, messages are printed as `topic: text` lines.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Exit after this many messages have been decrypted.
    #[arg(long, value_name = "N")]
    count: Option<u64>,
    #[command(flatten)]
    transport: TransportArgs,
}

enum Sink {
    Framed(BufWriter<File>),
    Text(io::Stdout),
}

impl Sink {
    fn write(&mut self, topic: &str, plaintext: &[u8]) -> io::Result<()> {
        match self {
            Sink::Framed(w) => {
                let len = u32::try_from(plaintext.len()).map_err(|_| io::Error::other("message too long to frame"))?;
                w.write_all(&len.to_be_bytes())?;
                w.write_all(plaintext)?;
                w.flush()
            }
            Sink::Text(out) => {
                let mut out = out.lock();
                writeln!(out, "{topic}: {}", String::from_utf8_lossy(plaintext))?;
                out.flush()
            }
        }
    }
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
    let mut sink = match &args.out {
        Some(p) => match File::create(p) {
            Ok(f) => Sink::Framed(BufWriter::new(f)),
            Err(e) => return fail(EXIT_CONFIG, format!("{}: {e}", p.display())),
        },
        None => Sink::Text(io::stdout()),
    };

    let config = ClientConfig { security, ..ClientConfig::new(args.broker, id, key, args.tee_pub) };
    let rt = match tokio::runtime::Builder::new_current_thread().enable_all().build() {
        Ok(rt) => rt,
        Err(e) => return fail(EXIT_RUNTIME, e),
    };
    let result: Result<(), ClientError> = rt.block_on(async {
        let mut client = Client::connect(config).await?;
        client.handshake().await?;
        client.subscribe_decrypting(&args.filter).await?;
        eprintln!("subscribed to {}", args.filter);
        let mut received = 0u64;
        while !matches!(args.count, Some(n) if received >= n) {
            let delivery = tokio::select! {
                d = client.recv() => d,
                _ = tokio::signal::ctrl_c() => break,
            };
            let Some(d) = delivery else { return Err(ClientError::Closed) };
            match d.payload {
                Ok(plaintext) => {
                    sink.write(&d.topic, &plaintext)?;
                    received += 1;
                }
                Err(e) => tracing::warn!(topic = %d.topic, error = %e, "message rejected"),
            }
        }
        client.disconnect().await
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(EXIT_RUNTIME, e),
    }
}
