//! Trace rows, event records and their CSV encodings.
//!
//! Telemetry CSV columns, in order:
//!
//! ```text
//! time,fill1,fill2,fill3,pressure1,pressure2,pressure3,
//! angle1,angle2,angle3,target1,target2,target3,pins,events
//! ```
//!
//! `pins` is a space-separated list of `PP=S` (two-digit pin, 0/1).
//! `events` is a `|`-separated list of `kind:object:channel:detail` for the
//! events raised during the step that produced the row; empty fields are
//! left blank. Read back, each event takes the row's time; the event log
//! keeps the time it was raised. Floats use the shortest representation
//! that round-trips.
//!
//! Event log CSV columns: `time,kind,object,channel,detail`.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pneumodel::CHANNELS;

pub const TELEMETRY_HEADER: [&str; 15] = [
    "time",
    "fill1",
    "fill2",
    "fill3",
    "pressure1",
    "pressure2",
    "pressure3",
    "angle1",
    "angle2",
    "angle3",
    "target1",
    "target2",
    "target3",
    "pins",
    "events",
];

pub const EVENT_HEADER: [&str; 5] = ["time", "kind", "object", "channel", "detail"];

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    ReadyEntered,
    Grabbed,
    Released,
    InflateStart,
    InflateStop,
    DeflateStart,
    ServoArrived,
    PulseEnd,
    Warning,
}

impl EventKind {
    pub const ALL: [EventKind; 9] = [
        EventKind::ReadyEntered,
        EventKind::Grabbed,
        EventKind::Released,
        EventKind::InflateStart,
        EventKind::InflateStop,
        EventKind::DeflateStart,
        EventKind::ServoArrived,
        EventKind::PulseEnd,
        EventKind::Warning,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::ReadyEntered => "ready_entered",
            EventKind::Grabbed => "grabbed",
            EventKind::Released => "released",
            EventKind::InflateStart => "inflate_start",
            EventKind::InflateStop => "inflate_stop",
            EventKind::DeflateStart => "deflate_start",
            EventKind::ServoArrived => "servo_arrived",
            EventKind::PulseEnd => "pulse_end",
            EventKind::Warning => "warning",
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EventKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EventKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown event kind {s:?}"))
    }
}

/// Why a pump batch was sent; prefixed to inflate/deflate event details.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchCause {
    /// Inflation batch sent when an object is grabbed.
    Grab,
    /// Inverted inflation batch sent on withdrawal.
    Release,
    /// Squeeze tracking or a level change while grabbed.
    Track,
}

impl BatchCause {
    pub fn as_str(self) -> &'static str {
        match self {
            BatchCause::Grab => "grab",
            BatchCause::Release => "release",
            BatchCause::Track => "track",
        }
    }

    /// Splits `"<cause> <wire>"`.
    pub fn split_detail(detail: &str) -> Option<(BatchCause, &str)> {
        let (cause, wire) = detail.split_once(' ')?;
        let cause = match cause {
            "grab" => BatchCause::Grab,
            "release" => BatchCause::Release,
            "track" => BatchCause::Track,
            _ => return None,
        };
        Some((cause, wire))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub time: f64,
    pub kind: EventKind,
    pub object: Option<u32>,
    /// 1-based servo or inflatable channel the event concerns.
    pub channel: Option<u8>,
    pub detail: String,
}

impl EventRecord {
    pub fn new(time: f64, kind: EventKind) -> Self {
        EventRecord {
            time,
            kind,
            object: None,
            channel: None,
            detail: String::new(),
        }
    }

    pub fn object(mut self, id: u32) -> Self {
        self.object = Some(id);
        self
    }

    pub fn channel(mut self, channel: u8) -> Self {
        self.channel = Some(channel);
        self
    }

    pub fn detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = detail.into();
        self
    }

    fn annotation(&self) -> String {
        format!(
            "{}:{}:{}:{}",
            self.kind,
            opt(self.object),
            opt(self.channel),
            self.detail
        )
    }

    fn from_annotation(time: f64, text: &str) -> Result<Self, String> {
        let mut parts = text.splitn(4, ':');
        let kind = parts.next().unwrap_or_default().parse()?;
        let object = parse_opt(parts.next().unwrap_or_default())?;
        let channel = parse_opt(parts.next().unwrap_or_default())?;
        let detail = parts.next().unwrap_or_default().to_string();
        Ok(EventRecord {
            time,
            kind,
            object,
            channel,
            detail,
        })
    }
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn parse_opt<T: FromStr>(s: &str) -> Result<Option<T>, String> {
    if s.is_empty() {
        Ok(None)
    } else {
        s.parse().map(Some).map_err(|_| format!("bad number {s:?}"))
    }
}

/// One row of the trace, taken after each physics step.
#[derive(Debug, Clone, PartialEq)]
pub struct TelemetrySample {
    pub time: f64,
    pub fills: [f64; CHANNELS],
    pub pressures: [f64; CHANNELS],
    pub servo_angles: [f64; CHANNELS],
    pub servo_targets: [f64; CHANNELS],
    /// (pin, level) sorted by pin.
    pub pins: Vec<(u8, bool)>,
    pub events: Vec<EventRecord>,
}

impl TelemetrySample {
    fn record(&self) -> Vec<String> {
        let mut row = Vec::with_capacity(TELEMETRY_HEADER.len());
        row.push(self.time.to_string());
        for group in [&self.fills, &self.pressures, &self.servo_angles, &self.servo_targets] {
            row.extend(group.iter().map(f64::to_string));
        }
        row.push(
            self.pins
                .iter()
                .map(|(p, on)| format!("{p:02}={}", *on as u8))
                .collect::<Vec<_>>()
                .join(" "),
        );
        row.push(
            self.events
                .iter()
                .map(EventRecord::annotation)
                .collect::<Vec<_>>()
                .join("|"),
        );
        row
    }

    fn from_record(record: &csv::StringRecord, line: usize) -> Result<Self, TraceError> {
        let bad = |reason: String| TraceError::Malformed { line, reason };
        if record.len() != TELEMETRY_HEADER.len() {
            return Err(bad(format!(
                "expected {} columns, got {}",
                TELEMETRY_HEADER.len(),
                record.len()
            )));
        }
        let num = |i: usize| -> Result<f64, TraceError> {
            record[i].parse::<f64>().map_err(|_| {
                bad(format!(
                    "column {} is not a number: {:?}",
                    TELEMETRY_HEADER[i], &record[i]
                ))
            })
        };
        let triple = |start: usize| -> Result<[f64; CHANNELS], TraceError> {
            Ok([num(start)?, num(start + 1)?, num(start + 2)?])
        };
        let time = num(0)?;
        let pins = record[13]
            .split_whitespace()
            .map(|tok| {
                let (p, s) = tok
                    .split_once('=')
                    .ok_or_else(|| bad(format!("bad pin entry {tok:?}")))?;
                let p = p.parse::<u8>().map_err(|_| bad(format!("bad pin {p:?}")))?;
                match s {
                    "0" => Ok((p, false)),
                    "1" => Ok((p, true)),
                    _ => Err(bad(format!("bad pin level {s:?}"))),
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        let events = record[14]
            .split('|')
            .filter(|s| !s.is_empty())
            .map(|s| EventRecord::from_annotation(time, s).map_err(bad))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(TelemetrySample {
            time,
            fills: triple(1)?,
            pressures: triple(4)?,
            servo_angles: triple(7)?,
            servo_targets: triple(10)?,
            pins,
            events,
        })
    }
}

pub fn write_telemetry<W: Write>(out: W, samples: &[TelemetrySample]) -> Result<(), TraceError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TELEMETRY_HEADER)?;
    for s in samples {
        w.write_record(s.record())?;
    }
    w.flush()?;
    Ok(())
}

pub fn telemetry_csv(samples: &[TelemetrySample]) -> String {
    let mut buf = Vec::new();
    write_telemetry(&mut buf, samples).expect("writing to memory cannot fail");
    String::from_utf8(buf).expect("csv output is utf-8")
}

pub fn read_telemetry<R: Read>(input: R) -> Result<Vec<TelemetrySample>, TraceError> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = r.headers()?.clone();
    if header.iter().ne(TELEMETRY_HEADER) {
        return Err(TraceError::Malformed {
            line: 1,
            reason: format!("unexpected header {:?}", header.iter().collect::<Vec<_>>()),
        });
    }
    r.records()
        .enumerate()
        .map(|(i, rec)| TelemetrySample::from_record(&rec?, i + 2))
        .collect()
}

pub fn write_events<W: Write>(out: W, events: &[EventRecord]) -> Result<(), TraceError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(EVENT_HEADER)?;
    for e in events {
        w.write_record([
            e.time.to_string(),
            e.kind.to_string(),
            opt(e.object),
            opt(e.channel),
            e.detail.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TelemetrySample {
        TelemetrySample {
            time: 0.005,
            fills: [0.025, 0.0, 1.0],
            pressures: [0.4, 0.0, 16.0],
            servo_angles: [0.3333333333333333, 0.0, 60.0],
            servo_targets: [60.0, 0.0, 60.0],
            pins: vec![(1, true), (2, false), (5, true)],
            events: vec![
                EventRecord::new(0.0, EventKind::Grabbed).object(3).channel(1),
                EventRecord::new(0.0, EventKind::InflateStart)
                    .object(3)
                    .channel(1)
                    .detail("grab /setBatch?pin=040506&state=010"),
            ],
        }
    }

    #[test]
    fn golden_header_and_row() {
        let csv = telemetry_csv(&[sample()]);
        let expected = "time,fill1,fill2,fill3,pressure1,pressure2,pressure3,angle1,angle2,angle3,target1,target2,target3,pins,events\n\
0.005,0.025,0,1,0.4,0,16,0.3333333333333333,0,60,60,0,60,01=1 02=0 05=1,grabbed:3:1:|inflate_start:3:1:grab /setBatch?pin=040506&state=010\n";
        assert_eq!(csv, expected);
    }

    #[test]
    fn reads_back_what_it_writes() {
        let csv = telemetry_csv(&[sample()]);
        let back = read_telemetry(csv.as_bytes()).unwrap();
        let mut expected = sample();
        // annotations carry the row's time
        for e in &mut expected.events {
            e.time = expected.time;
        }
        assert_eq!(back, vec![expected]);
    }

    #[test]
    fn rejects_bad_header_and_cells() {
        assert!(read_telemetry("a,b\n1,2\n".as_bytes()).is_err());
        let csv = telemetry_csv(&[sample()]).replace("0.025", "oops");
        assert!(matches!(
            read_telemetry(csv.as_bytes()),
            Err(TraceError::Malformed { line: 2, .. })
        ));
    }

    #[test]
    fn event_log_format() {
        let mut buf = Vec::new();
        write_events(&mut buf, &sample().events).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "time,kind,object,channel,detail\n0,grabbed,3,1,\n0,inflate_start,3,1,grab /setBatch?pin=040506&state=010\n"
        );
    }

    #[test]
    fn cause_prefix() {
        assert_eq!(
            BatchCause::split_detail("release /setBatch?pin=04&state=1"),
            Some((BatchCause::Release, "/setBatch?pin=04&state=1"))
        );
        assert_eq!(BatchCause::split_detail("nope"), None);
    }
}
