use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};
use mqttz_cli::{fail, init_logging, parse_args, parse_tee_public, TransportArgs, EXIT_CONFIG, EXIT_RUNTIME};
use mqttz_core::bench::microbench::{default_sizes, write_microbench_csv};
use mqttz_core::bench::{
    emit_report, microbench_shape, run_ecg_workload, run_microbench, BenchError, CacheMode, EcgWorkloadPlan,
    MicrobenchFixture, MicrobenchPlan, Profile, WorkloadTarget, PAPER_SAMPLE_RATE_HZ,
};

/// Re-encryption microbenchmark, ECG streaming workload and CSV reports.
#[derive(Debug, Parser)]
#[command(name = "mqtz-bench", version)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Time each re-encryption phase over a sweep of block sizes.
    Microbench {
        /// Block sizes in bytes, ascending.
        #[arg(long, value_delimiter = ',', num_args = 1.., default_values_t = default_sizes())]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 100)]
        iters: usize,
        #[arg(long, default_value = "warm")]
        mode: CacheMode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for the trusted core's key store; a temporary one by
        /// default.
        #[arg(long, value_name = "DIR")]
        storage: Option<PathBuf>,
        #[arg(long, value_name = "CSV")]
        out: PathBuf,
    },
    /// Stream synthetic ECGs through a running broker and verify delivery.
    Ecg {
        #[arg(long, value_name = "HOST:PORT")]
        broker: String,
        #[arg(long, value_name = "HEX", value_parser = parse_tee_public)]
        tee_pub: [u8; 32],
        #[arg(long, default_value = "paper")]
        profile: Profile,
        #[arg(long, default_value_t = 50)]
        publishers: usize,
        /// Samples per second per publisher.
        #[arg(long, default_value_t = PAPER_SAMPLE_RATE_HZ)]
        rate: f64,
        /// Streaming time in seconds.
        #[arg(long, default_value_t = 60)]
        duration: u64,
        #[arg(long, default_value_t = 1)]
        subscribers_per_topic: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Per-second throughput CSV.
        #[arg(long, value_name = "CSV")]
        out: PathBuf,
        /// Per-batch end-to-end latency CSV.
        #[arg(long, value_name = "CSV")]
        latency_out: Option<PathBuf>,
        #[command(flatten)]
        transport: TransportArgs,
    },
    /// Summarise CSVs written by `microbench`, `ecg` or the broker and check
    /// them against the acceptance thresholds.
    Report {
        #[arg(required = true, value_name = "CSV")]
        paths: Vec<PathBuf>,
    },
}

fn exit_for(e: &BenchError) -> u8 {
    match e {
        BenchError::PlanInvalid(_) | BenchError::MissingInput(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, BenchError> {
    File::create(path).map(BufWriter::new).map_err(|e| BenchError::Setup(format!("{}: {e}", path.display())))
}

fn verdict(passed: bool) -> ExitCode {
    if passed {
        ExitCode::SUCCESS
    } else {
        eprintln!("one or more checks failed");
        ExitCode::from(EXIT_CONFIG)
    }
}

fn microbench(plan: MicrobenchPlan, storage: Option<PathBuf>, out: &Path) -> Result<bool, BenchError> {
    plan.validate()?;
    let tmp;
    let dir = match storage {
        Some(d) => d,
        None => {
            tmp = tempfile::tempdir()?;
            tmp.path().to_path_buf()
        }
    };
    let fixture = MicrobenchFixture::new(plan.mode, &dir)?;
    let records = run_microbench(&plan, &fixture)?;
    write_microbench_csv(&mut create(out)?, &records)?;

    let warm = plan.mode == CacheMode::Warm;
    let flag_errors =
        records.iter().filter(|r| r.timings.dec_key_cached != warm || r.timings.enc_key_cached != warm).count();
    let medians = mqttz_core::bench::microbench::summarize(&records);
    println!("size,mode,retrieve_dec_key_ns,decrypt_ns,retrieve_enc_key_ns,encrypt_ns (medians)");
    for m in &medians {
        println!(
            "{},{},{},{},{},{}",
            m.size,
            m.mode.as_str(),
            m.retrieve_dec_key_ns,
            m.decrypt_ns,
            m.retrieve_enc_key_ns,
            m.encrypt_ns
        );
    }
    let checks = microbench_shape(&medians, true);
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    println!(
        "{} cache flag: {flag_errors} of {} records disagree with {} mode",
        if flag_errors == 0 { "PASS" } else { "FAIL" },
        records.len(),
        plan.mode.as_str()
    );
    Ok(flag_errors == 0 && checks.iter().all(|c| c.passed))
}

async fn ecg(
    plan: EcgWorkloadPlan,
    target: WorkloadTarget,
    out: &Path,
    latency_out: Option<&Path>,
) -> Result<bool, BenchError> {
    plan.validate()?;
    eprintln!("streaming for {:?} after setup", plan.duration);
    let report = run_ecg_workload(&plan, &target).await?;
    report.write_csv(&mut create(out)?)?;
    if let Some(p) = latency_out {
        report.write_latency_csv(&mut create(p)?)?;
    }
    print!("{}", report.summary());
    Ok(report.passed())
}

fn main() -> ExitCode {
    let args: Args = parse_args();
    init_logging("warn");

    let result = match args.command {
        Command::Microbench { sizes, iters, mode, seed, storage, out } => {
            let plan = MicrobenchPlan { sizes, iterations: iters, mode, seed };
            microbench(plan, storage, &out)
        }
        Command::Ecg {
            broker,
            tee_pub,
            profile,
            publishers,
            rate,
            duration,
            subscribers_per_topic,
            seed,
            out,
            latency_out,
            transport,
        } => {
            let security = match transport.security() {
                Ok(s) => s,
                Err(e) => return fail(EXIT_CONFIG, e),
            };
            let plan = EcgWorkloadPlan {
                publishers,
                sample_rate_hz: rate,
                duration: Duration::from_secs(duration),
                subscribers_per_topic,
                seed,
                ..EcgWorkloadPlan::for_profile(profile)
            };
            let target = WorkloadTarget { broker, tee_public: tee_pub, security };
            match tokio::runtime::Runtime::new() {
                Ok(rt) => rt.block_on(ecg(plan, target, &out, latency_out.as_deref())),
                Err(e) => return fail(EXIT_RUNTIME, e),
            }
        }
        Command::Report { paths } => emit_report(&paths).map(|r| {
            print!("{}", r.text);
            r.passed()
        }),
    };
    match result {
        Ok(passed) => verdict(passed),
        Err(e) => fail(exit_for(&e), e),
    }
}
