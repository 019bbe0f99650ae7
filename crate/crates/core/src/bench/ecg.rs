//! Synthetic ECG source, sample packing and the batch payload format.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const PAPER_SAMPLE_RATE_HZ: f64 = 321.25;

/// Mean beat rate of the synthetic waveform.
const BEAT_HZ: f64 = 1.2;
/// ADC counts per millivolt.
const COUNTS_PER_MV: f64 = 200.0;

/// (centre as a fraction of the beat, width in seconds, amplitude in mV)
const WAVES: [(f64, f64, f64); 5] = [
    (0.20, 0.025, 0.12),  // P
    (0.34, 0.008, -0.10), // Q
    (0.36, 0.010, 1.00),  // R
    (0.38, 0.008, -0.22), // S
    (0.62, 0.045, 0.28),  // T
];

pub fn sample_count(rate_hz: f64, duration_s: f64) -> usize {
    (rate_hz * duration_s).round() as usize
}

/// Deterministic synthetic 1-lead ECG: a PQRST template repeating near
/// 1.2 Hz plus small uniform noise, all derived from `seed`.
pub fn generate_ecg(rate_hz: f64, duration_s: f64, seed: u64) -> Vec<i16> {
    assert!(rate_hz > 0.0, "sample rate must be positive");
    let n = sample_count(rate_hz, duration_s.max(0.0));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let beat_hz = BEAT_HZ * rng.gen_range(0.95..1.05);
    let period = 1.0 / beat_hz;
    let offset = rng.gen_range(0.0..period);
    (0..n)
        .map(|i| {
            let t = i as f64 / rate_hz + offset;
            let phase = (t % period) / period;
            let mut mv = 0.0;
            for (centre, width, amp) in WAVES {
                // Distance in seconds, wrapped to the nearest beat.
                let mut d = (phase - centre) * period;
                if d > period / 2.0 {
                    d -= period;
                } else if d < -period / 2.0 {
                    d += period;
                }
                mv += amp * (-(d * d) / (2.0 * width * width)).exp();
            }
            let noise: i32 = rng.gen_range(-2..=2);
            ((mv * COUNTS_PER_MV).round() as i32 + noise).clamp(i16::MIN as i32, i16::MAX as i32) as i16
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Profile {
    /// 4-bit deltas with an escape to a full 16-bit sample.
    Paper,
    /// Unpacked big-endian 16-bit samples.
    Raw,
}

impl Profile {
    pub fn as_str(self) -> &'static str {
        match self {
            Profile::Paper => "paper",
            Profile::Raw => "raw",
        }
    }

    fn code(self) -> u8 {
        match self {
            Profile::Paper => 1,
            Profile::Raw => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            1 => Some(Profile::Paper),
            2 => Some(Profile::Raw),
            _ => None,
        }
    }
}

impl std::str::FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "paper" => Ok(Profile::Paper),
            "raw" => Ok(Profile::Raw),
            other => Err(format!("unknown profile {other:?}, expected paper or raw")),
        }
    }
}

impl std::fmt::Display for Profile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BatchError {
    #[error("batch truncated")]
    Truncated,
    #[error("unknown profile code {0}")]
    UnknownProfile(u8),
    #[error("trailing bytes after samples")]
    Trailing,
}

const ESCAPE: u8 = 0x8;

/// Paper profile layout: the first sample as 16 bits, then one nibble per
/// sample holding the delta in -7..=7, or `ESCAPE` followed by four nibbles
/// of the full sample. Nibbles are packed high first; an odd tail is padded.
pub fn pack_samples(profile: Profile, samples: &[i16]) -> Vec<u8> {
    match profile {
        Profile::Raw => samples.iter().flat_map(|s| s.to_be_bytes()).collect(),
        Profile::Paper => {
            let Some((&first, rest)) = samples.split_first() else { return Vec::new() };
            let mut nibbles = Vec::with_capacity(rest.len());
            let mut prev = first;
            for &s in rest {
                let d = s as i32 - prev as i32;
                if (-7..=7).contains(&d) {
                    nibbles.push((d as u8) & 0xF);
                } else {
                    nibbles.push(ESCAPE);
                    let v = s as u16;
                    nibbles.extend([(v >> 12) as u8, (v >> 8) as u8 & 0xF, (v >> 4) as u8 & 0xF, v as u8 & 0xF]);
                }
                prev = s;
            }
            let mut out = first.to_be_bytes().to_vec();
            for pair in nibbles.chunks(2) {
                out.push(pair[0] << 4 | pair.get(1).copied().unwrap_or(0));
            }
            out
        }
    }
}

pub fn unpack_samples(profile: Profile, bytes: &[u8], count: usize) -> Result<Vec<i16>, BatchError> {
    match profile {
        Profile::Raw => {
            if bytes.len() != count * 2 {
                return Err(if bytes.len() < count * 2 { BatchError::Truncated } else { BatchError::Trailing });
            }
            Ok(bytes.chunks_exact(2).map(|c| i16::from_be_bytes([c[0], c[1]])).collect())
        }
        Profile::Paper => {
            if count == 0 {
                return if bytes.is_empty() { Ok(Vec::new()) } else { Err(BatchError::Trailing) };
            }
            if bytes.len() < 2 {
                return Err(BatchError::Truncated);
            }
            let mut nibbles = bytes[2..].iter().flat_map(|b| [b >> 4, b & 0xF]);
            let mut next = || nibbles.next().ok_or(BatchError::Truncated);
            let mut out = Vec::with_capacity(count);
            let mut prev = i16::from_be_bytes([bytes[0], bytes[1]]);
            out.push(prev);
            let mut used = 0usize;
            while out.len() < count {
                let n = next()?;
                used += 1;
                prev = if n == ESCAPE {
                    let mut v = 0u16;
                    for _ in 0..4 {
                        v = v << 4 | next()? as u16;
                    }
                    used += 4;
                    v as i16
                } else {
                    // Sign-extend the nibble.
                    let d = ((n << 4) as i8 >> 4) as i16;
                    prev.wrapping_add(d)
                };
                out.push(prev);
            }
            if bytes.len() - 2 != used.div_ceil(2) {
                return Err(BatchError::Trailing);
            }
            Ok(out)
        }
    }
}

/// Plaintext batch header: profile, sequence number, index of the first
/// sample in the publisher's stream, sample count and send time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchHeader {
    pub profile: Profile,
    pub seq: u32,
    pub start: u32,
    pub count: u16,
    pub sent_at_us: u64,
}

pub const BATCH_HEADER_LEN: usize = 19;

pub fn encode_batch(header: &BatchHeader, samples: &[i16]) -> Vec<u8> {
    debug_assert_eq!(samples.len(), header.count as usize);
    let mut out = Vec::with_capacity(BATCH_HEADER_LEN + samples.len() * 2);
    out.push(header.profile.code());
    out.extend(header.seq.to_be_bytes());
    out.extend(header.start.to_be_bytes());
    out.extend(header.count.to_be_bytes());
    out.extend(header.sent_at_us.to_be_bytes());
    out.extend(pack_samples(header.profile, samples));
    out
}

pub fn decode_batch(bytes: &[u8]) -> Result<(BatchHeader, Vec<i16>), BatchError> {
    if bytes.len() < BATCH_HEADER_LEN {
        return Err(BatchError::Truncated);
    }
    let profile = Profile::from_code(bytes[0]).ok_or(BatchError::UnknownProfile(bytes[0]))?;
    let be32 = |i: usize| u32::from_be_bytes(bytes[i..i + 4].try_into().unwrap());
    let header = BatchHeader {
        profile,
        seq: be32(1),
        start: be32(5),
        count: u16::from_be_bytes([bytes[9], bytes[10]]),
        sent_at_us: u64::from_be_bytes(bytes[11..19].try_into().unwrap()),
    };
    let samples = unpack_samples(profile, &bytes[BATCH_HEADER_LEN..], header.count as usize)?;
    Ok((header, samples))
}
