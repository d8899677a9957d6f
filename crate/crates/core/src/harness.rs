//! Latency benchmark and offline trace verification behind the CLI.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::firmware::{Endpoint, HttpLink, LinkError};
use crate::pneumodel::{PneumaticConfig, CHANNELS};
use crate::protocol::{BatchCommand, Command};
use crate::telemetry::{read_telemetry, BatchCause, EventKind, TelemetrySample, TraceError};

/// Mean and SD of the published wifi round-trips, seconds. Comparison only.
pub const REFERENCE_SET_BATCH: (f64, f64) = (0.019, 0.033);
pub const REFERENCE_SET_SERVO: (f64, f64) = (0.023, 0.088);

/// The request each benchmark iteration sends.
pub const BENCH_SET_BATCH: &str = "/setBatch?pin=1918&state=10";
pub const BENCH_SET_SERVO: &str = "/setServo?pin=10&state=0";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Link(#[from] LinkError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transport {
    Loopback,
    Remote,
}

impl Transport {
    /// Loopback when the URL's host is localhost or a loopback address.
    pub fn of_url(url: &str) -> Transport {
        let rest = url.split_once("://").map_or(url, |(_, r)| r);
        let authority = rest.split('/').next().unwrap_or_default();
        let host = if let Some(v6) = authority.strip_prefix('[') {
            v6.split(']').next().unwrap_or_default()
        } else {
            authority.rsplit_once(':').map_or(authority, |(h, _)| h)
        };
        let loopback =
            host.eq_ignore_ascii_case("localhost") || host.parse::<std::net::IpAddr>().is_ok_and(|ip| ip.is_loopback());
        if loopback {
            Transport::Loopback
        } else {
            Transport::Remote
        }
    }
}

impl fmt::Display for Transport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Transport::Loopback => "loopback",
            Transport::Remote => "remote",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub endpoint: Endpoint,
    pub transport: Transport,
    pub n: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std_dev: f64,
    pub p50: f64,
    pub p95: f64,
    pub p99: f64,
}

impl LatencyStats {
    pub fn from_samples(endpoint: Endpoint, transport: Transport, samples: &[f64]) -> Result<Self, HarnessError> {
        if samples.is_empty() {
            return Err(HarnessError::Usage("need at least one sample".into()));
        }
        let n = samples.len();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n as f64;
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        Ok(LatencyStats {
            endpoint,
            transport,
            n,
            mean,
            std_dev: var.sqrt(),
            p50: nearest_rank(&sorted, 50.0),
            p95: nearest_rank(&sorted, 95.0),
            p99: nearest_rank(&sorted, 99.0),
        })
    }

    pub fn reference(&self) -> (f64, f64) {
        match self.endpoint {
            Endpoint::SetBatch => REFERENCE_SET_BATCH,
            Endpoint::SetServo => REFERENCE_SET_SERVO,
        }
    }

    /// Human-readable summary. The published figures were measured over wifi
    /// and are printed for comparison only.
    pub fn report(&self) -> String {
        let (ref_mean, ref_sd) = self.reference();
        format!(
            "{} over {} (n={}): mean {:.6} s, sd {:.6} s, p50 {:.6} s, p95 {:.6} s, p99 {:.6} s\n\
             reference only (wifi, not reproduced here): mean {ref_mean} s, sd {ref_sd} s",
            self.endpoint, self.transport, self.n, self.mean, self.std_dev, self.p50, self.p95, self.p99,
        )
    }
}

/// `sorted` must be ascending and non-empty.
fn nearest_rank(sorted: &[f64], pct: f64) -> f64 {
    let rank = (pct / 100.0 * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub fn bench_target(endpoint: Endpoint) -> &'static str {
    match endpoint {
        Endpoint::SetBatch => BENCH_SET_BATCH,
        Endpoint::SetServo => BENCH_SET_SERVO,
    }
}

/// Sends `n` sequential requests and returns each round-trip in seconds.
pub fn measure(link: &HttpLink, endpoint: Endpoint, n: usize) -> Result<Vec<f64>, HarnessError> {
    if n == 0 {
        return Err(HarnessError::Usage("--n must be at least 1".into()));
    }
    let target = bench_target(endpoint);
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let start = Instant::now();
        let (status, body) = link.get(target)?;
        samples.push(start.elapsed().as_secs_f64());
        if status != 200 {
            return Err(LinkError::Rejected {
                target: target.to_string(),
                status,
                reason: body,
            }
            .into());
        }
    }
    Ok(samples)
}

pub fn bench(link: &HttpLink, endpoint: Endpoint, n: usize) -> Result<(LatencyStats, Vec<f64>), HarnessError> {
    let samples = measure(link, endpoint, n)?;
    let stats = LatencyStats::from_samples(endpoint, Transport::of_url(link.base_url()), &samples)?;
    Ok((stats, samples))
}

/// Writes `index,seconds` rows.
pub fn write_samples<W: Write>(out: W, samples: &[f64]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["index", "seconds"]).map_err(TraceError::from)?;
    for (i, s) in samples.iter().enumerate() {
        w.write_record([i.to_string(), s.to_string()])
            .map_err(TraceError::from)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub time: f64,
    pub check: &'static str,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t={} {}: {}", self.time, self.check, self.detail)
    }
}

#[derive(Debug, Clone, Default)]
pub struct VerifyReport {
    pub samples: usize,
    pub violations: Vec<Violation>,
    pub warnings: Vec<String>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

const EPS: f64 = 1e-9;

/// Re-checks the emulator and controller invariants over a recorded trace.
pub fn verify_samples(samples: &[TelemetrySample], config: &PneumaticConfig) -> VerifyReport {
    let mut report = VerifyReport {
        samples: samples.len(),
        ..Default::default()
    };
    if samples.is_empty() {
        report.warnings.push("trace is empty".into());
        return report;
    }
    let mut v = |time: f64, check: &'static str, detail: String| {
        report.violations.push(Violation { time, check, detail });
    };

    let mut held: Option<u32> = None;
    let mut last_inflation: BTreeMap<u8, BatchCommand> = BTreeMap::new();
    let mut prev: Option<&TelemetrySample> = None;

    for s in samples {
        let t = s.time;
        for ch in 0..CHANNELS {
            let fill = s.fills[ch];
            if !(0.0..=1.0).contains(&fill) {
                v(t, "fill-bounds", format!("channel {} fill {fill}", ch + 1));
            } else {
                let expected = fill * config.max_pressure;
                if (s.pressures[ch] - expected).abs() > EPS * config.max_pressure.max(1.0) {
                    v(
                        t,
                        "pressure-map",
                        format!("channel {} pressure {} for fill {fill}", ch + 1, s.pressures[ch]),
                    );
                }
            }
            let angle = s.servo_angles[ch];
            if !(0.0..=180.0).contains(&angle) {
                v(t, "servo-bounds", format!("channel {} angle {angle}", ch + 1));
            }
        }
        if let Some(p) = prev {
            let dt = t - p.time;
            if dt <= 0.0 {
                v(t, "time-order", format!("time {t} does not follow {}", p.time));
            } else {
                for ch in 0..CHANNELS {
                    let moved = (s.servo_angles[ch] - p.servo_angles[ch]).abs();
                    if moved > config.servo_angular_rate * dt + EPS {
                        v(
                            t,
                            "servo-rate",
                            format!("channel {} moved {moved} deg in {dt} s", ch + 1),
                        );
                    }
                    let df = s.fills[ch] - p.fills[ch];
                    if df > config.inflate_rate() * dt + EPS || -df > config.deflate_rate() * dt + EPS {
                        v(
                            t,
                            "fill-rate",
                            format!("channel {} fill changed {df} in {dt} s", ch + 1),
                        );
                    }
                }
            }
        }

        let released_now: Vec<u32> = s
            .events
            .iter()
            .filter(|e| e.kind == EventKind::Released)
            .filter_map(|e| e.object)
            .collect();
        for e in &s.events {
            match e.kind {
                EventKind::Grabbed => {
                    if let Some(h) = held {
                        v(
                            t,
                            "single-presentation",
                            format!("object {:?} grabbed while {h} is held", e.object),
                        );
                    }
                    held = e.object;
                }
                EventKind::Released => {
                    if held.is_none() || held != e.object {
                        v(
                            t,
                            "causality",
                            format!("object {:?} released but {held:?} is held", e.object),
                        );
                    }
                    held = None;
                }
                EventKind::InflateStart | EventKind::DeflateStart => {
                    let Some((cause, wire)) = BatchCause::split_detail(&e.detail) else {
                        v(t, "event-format", format!("unparseable detail {:?}", e.detail));
                        continue;
                    };
                    let ok = match cause {
                        BatchCause::Grab | BatchCause::Track => held.is_some() && held == e.object,
                        BatchCause::Release => e.object.is_some_and(|o| released_now.contains(&o)),
                    };
                    if !ok {
                        v(
                            t,
                            "causality",
                            format!(
                                "{} ({}) for object {:?} while {held:?} is held",
                                e.kind,
                                cause.as_str(),
                                e.object
                            ),
                        );
                    }
                    let batch = match Command::parse_request(wire) {
                        Ok(Command::Batch(b)) => b,
                        _ => {
                            v(t, "event-format", format!("not a batch command: {wire:?}"));
                            continue;
                        }
                    };
                    let Some(channel) = e.channel else {
                        v(t, "event-format", format!("{} without channel", e.kind));
                        continue;
                    };
                    if e.kind == EventKind::InflateStart {
                        last_inflation.insert(channel, batch);
                    } else if let Some(inflate) = last_inflation.get(&channel) {
                        if !batch.is_complement_of(inflate) {
                            v(
                                t,
                                "inversion",
                                format!("{} is not the complement of {}", batch.encode(), inflate.encode()),
                            );
                        }
                    }
                }
                _ => {}
            }
        }
        prev = Some(s);
    }
    report
}

pub fn verify_trace(path: &Path, config: &PneumaticConfig) -> Result<VerifyReport, HarnessError> {
    let file = std::fs::File::open(path)?;
    let samples = read_telemetry(std::io::BufReader::new(file))?;
    Ok(verify_samples(&samples, config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::telemetry::EventRecord;

    #[test]
    fn single_sample_has_zero_spread() {
        let s = LatencyStats::from_samples(Endpoint::SetBatch, Transport::Loopback, &[0.004]).unwrap();
        assert_eq!((s.n, s.mean, s.std_dev, s.p50, s.p99), (1, 0.004, 0.0, 0.004, 0.004));
    }

    #[test]
    fn empty_samples_are_a_usage_error() {
        let e = LatencyStats::from_samples(Endpoint::SetServo, Transport::Remote, &[]).unwrap_err();
        assert!(matches!(e, HarnessError::Usage(_)));
    }

    #[test]
    fn stats_match_hand_computation() {
        let samples: Vec<f64> = (1..=100).map(|i| i as f64 / 1000.0).collect();
        let s = LatencyStats::from_samples(Endpoint::SetBatch, Transport::Loopback, &samples).unwrap();
        assert!((s.mean - 0.0505).abs() < 1e-12);
        // population variance of 1..=100 is (100^2 - 1) / 12
        assert!((s.std_dev - (9999.0f64 / 12.0).sqrt() / 1000.0).abs() < 1e-12);
        assert_eq!((s.p50, s.p95, s.p99), (0.05, 0.095, 0.099));
    }

    #[test]
    fn report_labels_reference_values() {
        let s = LatencyStats::from_samples(Endpoint::SetServo, Transport::Loopback, &[0.001, 0.002]).unwrap();
        let r = s.report();
        assert!(r.contains("loopback"));
        assert!(r.contains("reference only"));
        assert!(r.contains("0.023"));
    }

    #[test]
    fn transport_detection() {
        assert_eq!(Transport::of_url("http://127.0.0.1:8080"), Transport::Loopback);
        assert_eq!(Transport::of_url("http://localhost:1"), Transport::Loopback);
        assert_eq!(Transport::of_url("http://[::1]:80/"), Transport::Loopback);
        assert_eq!(Transport::of_url("http://192.168.4.1"), Transport::Remote);
        assert_eq!(Transport::of_url("http://device.local:80"), Transport::Remote);
    }

    #[test]
    fn samples_csv() {
        let mut out = Vec::new();
        write_samples(&mut out, &[0.5, 0.25]).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "index,seconds\n0,0.5\n1,0.25\n");
    }

    fn sample(time: f64, fill: f64, angle: f64) -> TelemetrySample {
        TelemetrySample {
            time,
            fills: [fill, 0.0, 0.0],
            pressures: [fill * 16.0, 0.0, 0.0],
            servo_angles: [angle, 0.0, 0.0],
            servo_targets: [angle, 0.0, 0.0],
            pins: vec![],
            events: vec![],
        }
    }

    fn checks(r: &VerifyReport) -> Vec<&'static str> {
        r.violations.iter().map(|v| v.check).collect()
    }

    #[test]
    fn empty_trace_warns_only() {
        let r = verify_samples(&[], &PneumaticConfig::default());
        assert!(r.passed());
        assert_eq!(r.warnings.len(), 1);
    }

    #[test]
    fn overfilled_trace_is_flagged() {
        let mut s = sample(0.005, 1.2, 0.0);
        s.pressures[0] = 1.2 * 16.0;
        let r = verify_samples(&[sample(0.0, 1.0, 0.0), s], &PneumaticConfig::default());
        assert!(checks(&r).contains(&"fill-bounds"));
    }

    #[test]
    fn servo_jump_is_flagged() {
        let r = verify_samples(
            &[sample(0.0, 0.0, 0.0), sample(0.005, 0.0, 1.0)],
            &PneumaticConfig::default(),
        );
        assert_eq!(checks(&r), ["servo-rate"]);
    }

    #[test]
    fn time_must_increase() {
        let r = verify_samples(
            &[sample(0.01, 0.0, 0.0), sample(0.01, 0.0, 0.0)],
            &PneumaticConfig::default(),
        );
        assert_eq!(checks(&r), ["time-order"]);
    }

    #[test]
    fn double_grab_and_bad_inversion_are_flagged() {
        let mut a = sample(0.0, 0.0, 0.0);
        a.events = vec![
            EventRecord::new(0.0, EventKind::Grabbed).object(1).channel(1),
            EventRecord::new(0.0, EventKind::InflateStart)
                .object(1)
                .channel(1)
                .detail("grab /setBatch?pin=040506&state=010"),
        ];
        let mut b = sample(0.005, 0.0, 0.0);
        b.events = vec![EventRecord::new(0.005, EventKind::Grabbed).object(2).channel(2)];
        let mut c = sample(0.01, 0.0, 0.0);
        c.events = vec![
            EventRecord::new(0.01, EventKind::Released).object(2).channel(2),
            EventRecord::new(0.01, EventKind::DeflateStart)
                .object(2)
                .channel(1)
                .detail("release /setBatch?pin=040506&state=111"),
        ];
        let r = verify_samples(&[a, b, c], &PneumaticConfig::default());
        assert_eq!(checks(&r), ["single-presentation", "inversion"]);
    }
}
