//! Re-encryption microbenchmark with a per-phase breakdown.

use std::io::{self, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::stats::median;
use super::BenchError;
use crate::client::{seal_payload, wrap_key, SymmetricKey};
use crate::ids::ClientId;
use crate::trusted_core::{DeviceRootKey, PhaseTimings, TrustedCore};

pub const MICROBENCH_CSV_HEADER: &str =
    "size,iter,cache_mode,retrieve_dec_key_ns,decrypt_ns,retrieve_enc_key_ns,encrypt_ns";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CacheMode {
    Warm,
    /// Cache capacity 1 with alternating keys, so every retrieval reads
    /// secure storage.
    Cold,
}

impl CacheMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CacheMode::Warm => "warm",
            CacheMode::Cold => "cold",
        }
    }

    pub fn cache_capacity(self) -> usize {
        match self {
            CacheMode::Warm => 2,
            CacheMode::Cold => 1,
        }
    }
}

impl std::str::FromStr for CacheMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "warm" => Ok(CacheMode::Warm),
            "cold" => Ok(CacheMode::Cold),
            other => Err(format!("unknown cache mode {other:?}, expected warm or cold")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MicrobenchPlan {
    pub sizes: Vec<usize>,
    pub iterations: usize,
    pub mode: CacheMode,
    pub seed: u64,
}

impl Default for MicrobenchPlan {
    fn default() -> Self {
        MicrobenchPlan { sizes: default_sizes(), iterations: 100, mode: CacheMode::Warm, seed: 0 }
    }
}

/// 16 B to 1 MiB in powers of two.
pub fn default_sizes() -> Vec<usize> {
    (4..=20).map(|p| 1usize << p).collect()
}

impl MicrobenchPlan {
    pub fn validate(&self) -> Result<(), BenchError> {
        if self.iterations < 10 {
            return Err(BenchError::PlanInvalid(format!("iterations must be at least 10, got {}", self.iterations)));
        }
        if self.sizes.is_empty() {
            return Err(BenchError::PlanInvalid("no block sizes".into()));
        }
        if self.sizes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(BenchError::PlanInvalid("block sizes must be strictly ascending".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MicrobenchRecord {
    pub size: usize,
    pub iter: usize,
    pub mode: CacheMode,
    pub timings: PhaseTimings,
}

/// Per-size medians of the four phases.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseMedians {
    pub size: usize,
    pub mode: CacheMode,
    pub retrieve_dec_key_ns: f64,
    pub decrypt_ns: f64,
    pub retrieve_enc_key_ns: f64,
    pub encrypt_ns: f64,
}

/// A trusted core with two provisioned clients, `b01` sending to `b02`.
pub struct MicrobenchFixture {
    pub core: TrustedCore,
    pub origin: ClientId,
    pub origin_key: SymmetricKey,
    pub dest: ClientId,
}

impl MicrobenchFixture {
    pub fn new(mode: CacheMode, storage_dir: &Path) -> Result<Self, BenchError> {
        let root = DeviceRootKey::generate();
        let core = TrustedCore::init(&root, storage_dir, mode.cache_capacity())?;
        let origin = ClientId::new("b01").expect("valid id");
        let dest = ClientId::new("b02").expect("valid id");
        let origin_key = SymmetricKey::generate();
        for (id, key) in [(&origin, origin_key.clone()), (&dest, SymmetricKey::generate())] {
            let blob =
                wrap_key(key.as_bytes(), &core.public_identity(), id).map_err(|e| BenchError::Setup(e.to_string()))?;
            core.provision_key_blocking(id, &blob)?;
        }
        Ok(MicrobenchFixture { core, origin, origin_key, dest })
    }
}

/// Runs the plan. Every round visits each size once in a fresh random
/// order, so neither drift nor the cache state left by the previous size
/// favours any size; one unrecorded warm-up round precedes the measured
/// ones.
pub fn run_microbench(plan: &MicrobenchPlan, fixture: &MicrobenchFixture) -> Result<Vec<MicrobenchRecord>, BenchError> {
    plan.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut buf = vec![0u8; *plan.sizes.last().expect("validated")];
    let mut records = Vec::with_capacity(plan.sizes.len() * plan.iterations);
    let mut order = plan.sizes.clone();
    for round in 0..=plan.iterations {
        order.shuffle(&mut rng);
        for &size in &order {
            let plain = &mut buf[..size];
            rng.fill_bytes(plain);
            let envelope = seal_payload(&fixture.origin_key, &fixture.origin, plain)
                .map_err(|e| BenchError::Setup(e.to_string()))?;
            let (_, timings) = fixture.core.reencrypt_blocking(&fixture.origin, &fixture.dest, envelope)?;
            if round > 0 {
                records.push(MicrobenchRecord { size, iter: round - 1, mode: plan.mode, timings });
            }
        }
    }
    records.sort_by_key(|r| (r.size, r.iter));
    Ok(records)
}

pub fn summarize(records: &[MicrobenchRecord]) -> Vec<PhaseMedians> {
    let mut keys: Vec<(usize, &'static str, CacheMode)> =
        records.iter().map(|r| (r.size, r.mode.as_str(), r.mode)).collect();
    keys.sort_by_key(|k| (k.1, k.0));
    keys.dedup();
    keys.into_iter()
        .map(|(size, _, mode)| {
            let rows: Vec<&PhaseTimings> =
                records.iter().filter(|r| r.size == size && r.mode == mode).map(|r| &r.timings).collect();
            let med = |f: fn(&PhaseTimings) -> u64| median(rows.iter().map(|t| f(t) as f64)).unwrap_or(0.0);
            PhaseMedians {
                size,
                mode,
                retrieve_dec_key_ns: med(|t| t.retrieve_dec_key_ns),
                decrypt_ns: med(|t| t.decrypt_ns),
                retrieve_enc_key_ns: med(|t| t.retrieve_enc_key_ns),
                encrypt_ns: med(|t| t.encrypt_ns),
            }
        })
        .collect()
}

/// One row per record, then one `median` row per size.
pub fn write_microbench_csv<W: Write>(out: &mut W, records: &[MicrobenchRecord]) -> io::Result<()> {
    writeln!(out, "{MICROBENCH_CSV_HEADER}")?;
    for r in records {
        let t = &r.timings;
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.size,
            r.iter,
            r.mode.as_str(),
            t.retrieve_dec_key_ns,
            t.decrypt_ns,
            t.retrieve_enc_key_ns,
            t.encrypt_ns
        )?;
    }
    for m in summarize(records) {
        writeln!(
            out,
            "{},median,{},{},{},{},{}",
            m.size,
            m.mode.as_str(),
            m.retrieve_dec_key_ns,
            m.decrypt_ns,
            m.retrieve_enc_key_ns,
            m.encrypt_ns
        )?;
    }
    Ok(())
}
