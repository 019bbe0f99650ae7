//! Summaries and pass/fail checks over the CSV files the harness and the
//! broker write.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::microbench::{CacheMode, PhaseMedians, MICROBENCH_CSV_HEADER};
use super::stats::{median, percentile};
use super::workload::{Check, AGGREGATE_BAND, LATENCY_CSV_HEADER, MAX_PUBLISHER_RATE, WORKLOAD_CSV_HEADER};
use super::BenchError;
use crate::broker::metrics::CSV_HEADER as METRICS_CSV_HEADER;

#[derive(Debug, Clone)]
pub struct ReportSummary {
    pub text: String,
    pub checks: Vec<Check>,
}

impl ReportSummary {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Shape properties of a microbenchmark: every phase present, crypto
/// medians non-decreasing in block size, and cold retrieval no faster than
/// warm when both modes were run.
pub fn microbench_shape(medians: &[PhaseMedians], all_phases_reported: bool) -> Vec<Check> {
    let mut checks = vec![Check {
        name: "all four phases reported",
        passed: all_phases_reported && !medians.is_empty(),
        detail: format!("{} size/mode groups", medians.len()),
    }];
    for mode in [CacheMode::Warm, CacheMode::Cold] {
        let rows: Vec<&PhaseMedians> = medians.iter().filter(|m| m.mode == mode).collect();
        if rows.is_empty() {
            continue;
        }
        for (name, f) in [
            ("decrypt", (|m: &PhaseMedians| m.decrypt_ns) as fn(&PhaseMedians) -> f64),
            ("encrypt", |m| m.encrypt_ns),
            ("decrypt+encrypt", |m| m.decrypt_ns + m.encrypt_ns),
        ] {
            let bad: Vec<String> = rows
                .windows(2)
                .filter(|w| f(w[1]) < f(w[0]))
                .map(|w| format!("{} B {} ns > {} B {} ns", w[0].size, f(w[0]), w[1].size, f(w[1])))
                .collect();
            checks.push(Check {
                name: "crypto median non-decreasing in size",
                passed: bad.is_empty(),
                detail: if bad.is_empty() {
                    format!("{} {name}: {} sizes", mode.as_str(), rows.len())
                } else {
                    format!("{} {name}: {}", mode.as_str(), bad.join("; "))
                },
            });
        }
    }
    let pooled =
        |mode: CacheMode, f: fn(&PhaseMedians) -> f64| median(medians.iter().filter(|m| m.mode == mode).map(f));
    for (name, f) in [
        ("retrieve_dec_key", (|m: &PhaseMedians| m.retrieve_dec_key_ns) as fn(&PhaseMedians) -> f64),
        ("retrieve_enc_key", |m| m.retrieve_enc_key_ns),
    ] {
        if let (Some(warm), Some(cold)) = (pooled(CacheMode::Warm, f), pooled(CacheMode::Cold, f)) {
            checks.push(Check {
                name: "cold retrieval >= warm retrieval",
                passed: cold >= warm,
                detail: format!("{name}: cold {cold} ns, warm {warm} ns"),
            });
        }
    }
    checks
}

/// Leading `#` lines, header and data rows.
fn read_rows(path: &Path) -> Result<(Vec<String>, String, Vec<csv::StringRecord>), BenchError> {
    let missing = |why: String| BenchError::MissingInput(format!("{}: {why}", path.display()));
    let content = std::fs::read_to_string(path).map_err(|e| missing(e.to_string()))?;
    let meta: Vec<String> = content
        .lines()
        .take_while(|l| l.starts_with('#'))
        .map(|l| l.trim_start_matches('#').trim().to_string())
        .collect();
    let mut rd = csv::ReaderBuilder::new().has_headers(true).comment(Some(b'#')).from_reader(content.as_bytes());
    let header = rd.headers().map_err(|e| missing(e.to_string()))?.iter().collect::<Vec<_>>().join(",");
    let rows = rd.records().collect::<Result<Vec<_>, _>>().map_err(|e| missing(e.to_string()))?;
    if header.is_empty() || rows.is_empty() {
        return Err(missing("no data rows".into()));
    }
    Ok((meta, header, rows))
}

/// Value of `key=value` among the `;`-separated fields of the `#` lines.
fn meta_value<'a>(meta: &'a [String], key: &str) -> Option<&'a str> {
    meta.iter().flat_map(|l| l.split(';')).find_map(|f| f.trim().strip_prefix(key)?.strip_prefix('='))
}

fn num(r: &csv::StringRecord, i: usize) -> Option<f64> {
    r.get(i).and_then(|s| s.trim().parse().ok())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |x| format!("{x:.1}"))
}

/// Reads each CSV, recognises it by its header and appends a summary
/// section and its checks.
pub fn emit_report(paths: &[PathBuf]) -> Result<ReportSummary, BenchError> {
    if paths.is_empty() {
        return Err(BenchError::MissingInput("no input files".into()));
    }
    let mut text = String::new();
    let mut checks = Vec::new();
    let mut medians = Vec::new();
    let mut microbench_complete = None;
    for path in paths {
        let (meta, header, rows) = read_rows(path)?;
        let _ = writeln!(text, "== {}", path.display());
        for m in &meta {
            let _ = writeln!(text, "# {m}");
        }
        if header == MICROBENCH_CSV_HEADER {
            let complete = microbench_section(&rows, &mut text, &mut medians);
            microbench_complete = Some(microbench_complete.unwrap_or(true) && complete);
        } else if header == WORKLOAD_CSV_HEADER {
            workload_section(&rows, &meta, &mut text, &mut checks);
        } else if header == LATENCY_CSV_HEADER {
            let lat: Vec<f64> = rows.iter().filter_map(|r| num(r, 2)).collect();
            let _ = writeln!(
                text,
                "latency_us: n={} p50={} p99={} max={}",
                lat.len(),
                fmt_opt(median(lat.iter().copied())),
                fmt_opt(percentile(lat.iter().copied(), 99.0)),
                fmt_opt(lat.iter().copied().reduce(f64::max))
            );
        } else if header == METRICS_CSV_HEADER {
            metrics_section(&rows, &mut text);
        } else {
            return Err(BenchError::MissingInput(format!("{}: unrecognised header {header:?}", path.display())));
        }
    }
    // Microbenchmark files are judged together so warm and cold runs in
    // separate files are compared.
    if let Some(complete) = microbench_complete {
        checks.splice(0..0, microbench_shape(&medians, complete));
    }
    for c in &checks {
        let _ = writeln!(text, "{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    Ok(ReportSummary { text, checks })
}

/// Appends per-size medians; returns whether every row carried all four
/// phases.
fn microbench_section(rows: &[csv::StringRecord], text: &mut String, medians: &mut Vec<PhaseMedians>) -> bool {
    let mut groups: BTreeMap<(String, usize), Vec<[f64; 4]>> = BTreeMap::new();
    let mut complete = true;
    for r in rows.iter().filter(|r| r.get(1) != Some("median")) {
        let (Some(size), Some(mode)) = (num(r, 0), r.get(2)) else {
            complete = false;
            continue;
        };
        match (num(r, 3), num(r, 4), num(r, 5), num(r, 6)) {
            (Some(a), Some(b), Some(c), Some(d)) => {
                groups.entry((mode.to_string(), size as usize)).or_default().push([a, b, c, d])
            }
            _ => complete = false,
        }
    }
    let _ = writeln!(text, "mode,size,n,retrieve_dec_key_ns,decrypt_ns,retrieve_enc_key_ns,encrypt_ns (medians)");
    for ((mode, size), v) in &groups {
        let m = |i: usize| median(v.iter().map(|x| x[i])).unwrap_or(0.0);
        let _ = writeln!(text, "{mode},{size},{},{},{},{},{}", v.len(), m(0), m(1), m(2), m(3));
        if let Ok(mode) = mode.parse::<CacheMode>() {
            medians.push(PhaseMedians {
                size: *size,
                mode,
                retrieve_dec_key_ns: m(0),
                decrypt_ns: m(1),
                retrieve_enc_key_ns: m(2),
                encrypt_ns: m(3),
            });
        } else {
            complete = false;
        }
    }
    complete
}

/// Rate gates apply to paper-matched runs, and to files that do not say.
fn workload_section(rows: &[csv::StringRecord], meta: &[String], text: &mut String, checks: &mut Vec<Check>) {
    let slots = meta_value(meta, "slots").and_then(|v| v.parse::<usize>().ok());
    let gated = meta_value(meta, "paper_matched") != Some("false");
    let mut aggregate = Vec::new();
    let mut clients: BTreeMap<String, (f64, f64, f64)> = BTreeMap::new();
    for r in rows {
        let (Some(sec), Some(pb), Some(db)) = (num(r, 0), num(r, 2), num(r, 3)) else { continue };
        match r.get(1) {
            Some("") if !matches!(slots, Some(n) if sec as usize >= n) => aggregate.push(db),
            Some("") => {}
            Some(id) => {
                let e = clients.entry(id.to_string()).or_default();
                e.0 += pb;
                e.1 += db;
                e.2 = e.2.max(pb);
            }
            None => {}
        }
    }
    let secs = aggregate.len().max(1) as f64;
    let _ = writeln!(text, "client_id,mean_publish_Bps,mean_delivered_Bps,max_publish_Bps");
    for (id, (pb, db, max)) in &clients {
        let _ = writeln!(text, "{id},{:.1},{:.1},{max}", pb / secs, db / secs);
    }
    let mean = aggregate.iter().sum::<f64>() / secs;
    let worst = clients.values().map(|c| c.2).fold(0.0, f64::max);
    let _ = writeln!(
        text,
        "aggregate delivered over {} s: mean {mean:.1} B/s, p5 {}, p95 {}",
        aggregate.len(),
        fmt_opt(percentile(aggregate.iter().copied(), 5.0)),
        fmt_opt(percentile(aggregate.iter().copied(), 95.0))
    );
    if !gated {
        let _ = writeln!(text, "rate thresholds not applied: run is not paper-matched");
        return;
    }
    checks.push(Check {
        name: "per-publisher wire rate",
        passed: worst <= MAX_PUBLISHER_RATE,
        detail: format!("worst case {worst} B/s, limit {MAX_PUBLISHER_RATE} B/s"),
    });
    checks.push(Check {
        name: "aggregate rate",
        passed: (AGGREGATE_BAND.0..=AGGREGATE_BAND.1).contains(&mean),
        detail: format!("mean {mean:.0} B/s, band {}..{} B/s", AGGREGATE_BAND.0, AGGREGATE_BAND.1),
    });
}

fn metrics_section(rows: &[csv::StringRecord], text: &mut String) {
    let agg: Vec<&csv::StringRecord> = rows.iter().filter(|r| r.get(1) == Some("")).collect();
    let bytes: Vec<f64> = agg.iter().filter_map(|r| num(r, 2)).collect();
    let user: Vec<f64> = agg.iter().filter_map(|r| num(r, 3)).collect();
    let sys: Vec<f64> = agg.iter().filter_map(|r| num(r, 4)).collect();
    let mean = |v: &[f64]| if v.is_empty() { None } else { Some(v.iter().sum::<f64>() / v.len() as f64) };
    let _ = writeln!(
        text,
        "broker: {} samples, bytes_out mean {} B/s, max {}; cpu user mean {}%, sys mean {}%",
        agg.len(),
        fmt_opt(mean(&bytes)),
        fmt_opt(bytes.iter().copied().reduce(f64::max)),
        fmt_opt(mean(&user)),
        fmt_opt(mean(&sys))
    );
}
