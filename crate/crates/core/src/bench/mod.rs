//! Experiment harnesses: the re-encryption microbenchmark and the ECG
//! streaming workload, plus CSV reporting.

pub mod ecg;
pub mod microbench;
pub mod report;
pub mod stats;
pub mod workload;

use thiserror::Error;

pub use ecg::{generate_ecg, Profile, PAPER_SAMPLE_RATE_HZ};
pub use microbench::{run_microbench, CacheMode, MicrobenchFixture, MicrobenchPlan, MicrobenchRecord, PhaseMedians};
pub use report::{emit_report, microbench_shape, ReportSummary};
pub use workload::{run_ecg_workload, Check, DutyCycle, EcgWorkloadPlan, WorkloadReport, WorkloadTarget};

use crate::trusted_core::TrustedCoreError;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid plan: {0}")]
    PlanInvalid(String),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("broker unreachable: {0}")]
    BrokerUnreachable(String),
    #[error("handshake failed: {0}")]
    HandshakeFailure(String),
    #[error("verification failed: {0}")]
    VerificationFailure(String),
    #[error("setup failed: {0}")]
    Setup(String),
    #[error("trusted core: {0}")]
    TrustedCore(#[from] TrustedCoreError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}
