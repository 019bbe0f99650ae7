//! Argument helpers shared by the command line tools.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Args;
use mqttz_core::client::TransportSecurity;

/// Configuration or usage problem.
pub const EXIT_CONFIG: u8 = 1;
/// Failure after startup: broker unreachable, handshake rejected, I/O.
pub const EXIT_RUNTIME: u8 = 2;

/// Logs to stderr; `RUST_LOG` overrides the default level.
pub fn init_logging(default: &str) {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default));
    let _ = tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).try_init();
}

/// Like `Parser::parse`, but usage errors exit with [`EXIT_CONFIG`].
pub fn parse_args<P: clap::Parser>() -> P {
    match P::try_parse() {
        Ok(p) => p,
        Err(e) => {
            let code = if e.use_stderr() { i32::from(EXIT_CONFIG) } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    }
}

pub fn fail(code: u8, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(code)
}

/// 64 hex characters.
pub fn parse_tee_public(s: &str) -> Result<[u8; 32], String> {
    let bytes = hex::decode(s.trim()).map_err(|e| format!("not hex: {e}"))?;
    bytes.try_into().map_err(|b: Vec<u8>| format!("expected 32 bytes, got {}", b.len()))
}

/// How to reach the broker: TLS against a pinned CA, or plain TCP.
#[derive(Debug, Clone, Args)]
pub struct TransportArgs {
    /// PEM file with the CA certificate(s) that sign the broker certificate.
    #[arg(long, value_name = "PEM", conflicts_with = "plaintext_transport")]
    pub ca: Option<PathBuf>,
    /// TLS server name, if it differs from the host in `--broker`.
    #[arg(long, value_name = "NAME", requires = "ca")]
    pub server_name: Option<String>,
    /// Plain TCP. Only for loopback testing.
    #[arg(long)]
    pub plaintext_transport: bool,
}

impl TransportArgs {
    pub fn security(&self) -> Result<TransportSecurity, String> {
        match (&self.ca, self.plaintext_transport) {
            (Some(ca), false) => Ok(TransportSecurity::Tls { ca: ca.clone(), server_name: self.server_name.clone() }),
            (None, true) => Ok(TransportSecurity::Plaintext),
            _ => Err("either --ca <pem> or --plaintext-transport is required".into()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tee_public_hex() {
        let hex = "ab".repeat(32);
        assert_eq!(parse_tee_public(&hex).unwrap(), [0xAB; 32]);
        assert!(parse_tee_public("abcd").unwrap_err().contains("32 bytes"));
        assert!(parse_tee_public(&"zz".repeat(32)).is_err());
    }
}
