//! Wire format of the device's two GET endpoints.
//!
//! ```text
//! /setBatch?pin=<2-digit pin ids, concatenated>&state=<one 0/1 per pin>
//! /setServo?pin=<2-digit pin id>&state=<angle 0-180>
//! ```
//!
//! Parsing is strict: the query is percent-decoded first, only `pin` and
//! `state` are accepted, each exactly once.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SET_BATCH_PATH: &str = "/setBatch";
pub const SET_SERVO_PATH: &str = "/setServo";

pub const MAX_ANGLE: u16 = 180;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("pin string has {pin_digits} digits but state string has {states} entries (expected {pin_digits} == 2 x {states})")]
    MismatchedLength { pin_digits: usize, states: usize },
    #[error("pin string contains a non-digit character")]
    NonDigitPin,
    #[error("servo pin must be exactly two digits, got {0}")]
    InvalidPinWidth(usize),
    #[error("state character {0:?} is not 0 or 1")]
    InvalidStateChar(char),
    #[error("batch contains no pins")]
    EmptyCommand,
    #[error("missing query parameter `{0}`")]
    MissingParameter(&'static str),
    #[error("unknown query parameter `{0}`")]
    UnknownParameter(String),
    #[error("query parameter `{0}` given more than once")]
    DuplicateParameter(String),
    #[error("angle {0} outside 0..=180")]
    AngleOutOfRange(String),
    #[error("angle {0:?} is not an integer")]
    InvalidAngle(String),
    #[error("pin {0} outside 0..=99")]
    PinOutOfRange(u32),
    #[error("unknown endpoint {0}")]
    UnknownEndpoint(String),
}

impl ProtocolError {
    /// Stable machine-readable name, used as the first token of a 400 body.
    pub fn code(&self) -> &'static str {
        match self {
            ProtocolError::MismatchedLength { .. } => "MismatchedLength",
            ProtocolError::NonDigitPin => "NonDigitPin",
            ProtocolError::InvalidPinWidth(_) => "InvalidPinWidth",
            ProtocolError::InvalidStateChar(_) => "InvalidStateChar",
            ProtocolError::EmptyCommand => "EmptyCommand",
            ProtocolError::MissingParameter(_) => "MissingParameter",
            ProtocolError::UnknownParameter(_) => "UnknownParameter",
            ProtocolError::DuplicateParameter(_) => "DuplicateParameter",
            ProtocolError::AngleOutOfRange(_) => "AngleOutOfRange",
            ProtocolError::InvalidAngle(_) => "InvalidAngle",
            ProtocolError::PinOutOfRange(_) => "PinOutOfRange",
            ProtocolError::UnknownEndpoint(_) => "UnknownEndpoint",
        }
    }
}

/// A digital pin on the microcontroller, 0..=99.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct PinId(u8);

impl PinId {
    pub const fn new_const(value: u8) -> Self {
        assert!(value <= 99);
        PinId(value)
    }

    pub fn new(value: u32) -> Result<Self, ProtocolError> {
        if value <= 99 {
            Ok(PinId(value as u8))
        } else {
            Err(ProtocolError::PinOutOfRange(value))
        }
    }

    pub fn value(self) -> u8 {
        self.0
    }

    fn from_digits(tens: u8, ones: u8) -> Result<Self, ProtocolError> {
        if !tens.is_ascii_digit() || !ones.is_ascii_digit() {
            return Err(ProtocolError::NonDigitPin);
        }
        Ok(PinId((tens - b'0') * 10 + (ones - b'0')))
    }
}

impl TryFrom<u32> for PinId {
    type Error = ProtocolError;

    fn try_from(value: u32) -> Result<Self, Self::Error> {
        PinId::new(value)
    }
}

impl From<PinId> for u32 {
    fn from(pin: PinId) -> u32 {
        pin.0 as u32
    }
}

impl fmt::Display for PinId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:02}", self.0)
    }
}

/// Ordered (pin, state) pairs written in one `/setBatch` request.
///
/// Duplicate pins are legal; the last occurrence wins when applied.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BatchCommand {
    entries: Vec<(PinId, bool)>,
}

impl BatchCommand {
    pub fn new(entries: Vec<(PinId, bool)>) -> Result<Self, ProtocolError> {
        if entries.is_empty() {
            return Err(ProtocolError::EmptyCommand);
        }
        Ok(BatchCommand { entries })
    }

    pub fn entries(&self) -> &[(PinId, bool)] {
        &self.entries
    }

    /// Same pins, every state flipped.
    pub fn inverted(&self) -> BatchCommand {
        BatchCommand {
            entries: self.entries.iter().map(|&(p, s)| (p, !s)).collect(),
        }
    }

    /// True when `other` addresses the same pins in the same order with
    /// every state complemented.
    pub fn is_complement_of(&self, other: &BatchCommand) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.0 == b.0 && a.1 != b.1)
    }

    pub fn encode(&self) -> String {
        encode_batch(self)
    }

    pub fn pin_string(&self) -> String {
        self.entries.iter().map(|(p, _)| p.to_string()).collect()
    }

    pub fn state_string(&self) -> String {
        self.entries.iter().map(|&(_, s)| if s { '1' } else { '0' }).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ServoCommand {
    pin: PinId,
    angle: u16,
}

impl ServoCommand {
    pub fn new(pin: PinId, angle: u16) -> Result<Self, ProtocolError> {
        if angle > MAX_ANGLE {
            return Err(ProtocolError::AngleOutOfRange(angle.to_string()));
        }
        Ok(ServoCommand { pin, angle })
    }

    pub fn pin(&self) -> PinId {
        self.pin
    }

    pub fn angle(&self) -> u16 {
        self.angle
    }

    pub fn encode(&self) -> String {
        encode_servo(self)
    }
}

/// Either wire command.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Command {
    Batch(BatchCommand),
    Servo(ServoCommand),
}

impl Command {
    /// Path plus query, e.g. `/setServo?pin=10&state=60`.
    pub fn encode(&self) -> String {
        match self {
            Command::Batch(b) => encode_batch(b),
            Command::Servo(s) => encode_servo(s),
        }
    }

    /// Decodes a request target (path and optional query).
    pub fn parse_request(target: &str) -> Result<Command, ProtocolError> {
        let (path, query) = split_target(target);
        match path {
            SET_BATCH_PATH => parse_batch(query).map(Command::Batch),
            SET_SERVO_PATH => parse_servo(query).map(Command::Servo),
            other => Err(ProtocolError::UnknownEndpoint(other.to_string())),
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.encode())
    }
}

pub fn split_target(target: &str) -> (&str, &str) {
    match target.split_once('?') {
        Some((path, query)) => (path, query),
        None => (target, ""),
    }
}

pub fn encode_batch(cmd: &BatchCommand) -> String {
    format!("{SET_BATCH_PATH}?pin={}&state={}", cmd.pin_string(), cmd.state_string())
}

pub fn encode_servo(cmd: &ServoCommand) -> String {
    format!("{SET_SERVO_PATH}?pin={}&state={}", cmd.pin, cmd.angle)
}

struct PinState {
    pin: String,
    state: String,
}

fn pin_and_state(query: &str) -> Result<PinState, ProtocolError> {
    let mut pin = None;
    let mut state = None;
    for (key, value) in form_urlencoded::parse(query.as_bytes()) {
        let slot = match key.as_ref() {
            "pin" => &mut pin,
            "state" => &mut state,
            _ => return Err(ProtocolError::UnknownParameter(key.into_owned())),
        };
        if slot.is_some() {
            return Err(ProtocolError::DuplicateParameter(key.into_owned()));
        }
        *slot = Some(value.into_owned());
    }
    Ok(PinState {
        pin: pin.ok_or(ProtocolError::MissingParameter("pin"))?,
        state: state.ok_or(ProtocolError::MissingParameter("state"))?,
    })
}

/// Decodes the query part of a `/setBatch` request (`pin=1918&state=10`).
pub fn parse_batch(query: &str) -> Result<BatchCommand, ProtocolError> {
    let PinState { pin, state } = pin_and_state(query)?;

    if !pin.bytes().all(|b| b.is_ascii_digit()) {
        return Err(ProtocolError::NonDigitPin);
    }
    let states = state
        .chars()
        .map(|c| match c {
            '0' => Ok(false),
            '1' => Ok(true),
            other => Err(ProtocolError::InvalidStateChar(other)),
        })
        .collect::<Result<Vec<_>, _>>()?;

    if pin.is_empty() && states.is_empty() {
        return Err(ProtocolError::EmptyCommand);
    }
    if pin.len() != 2 * states.len() {
        return Err(ProtocolError::MismatchedLength {
            pin_digits: pin.len(),
            states: states.len(),
        });
    }

    let entries = pin
        .as_bytes()
        .chunks_exact(2)
        .zip(states)
        .map(|(pair, s)| PinId::from_digits(pair[0], pair[1]).map(|p| (p, s)))
        .collect::<Result<Vec<_>, _>>()?;
    BatchCommand::new(entries)
}

/// Decodes the query part of a `/setServo` request (`pin=10&state=60`).
pub fn parse_servo(query: &str) -> Result<ServoCommand, ProtocolError> {
    let PinState { pin, state } = pin_and_state(query)?;

    if !pin.bytes().all(|b| b.is_ascii_digit()) {
        return Err(ProtocolError::NonDigitPin);
    }
    if pin.len() != 2 {
        return Err(ProtocolError::InvalidPinWidth(pin.len()));
    }
    let pin_bytes = pin.as_bytes();
    let pin = PinId::from_digits(pin_bytes[0], pin_bytes[1])?;

    let digits = state.strip_prefix('-').unwrap_or(&state);
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return Err(ProtocolError::InvalidAngle(state));
    }
    // Anything that is an integer but not in 0..=180, however long, is out of range.
    match state.parse::<i64>() {
        Ok(angle) if (0..=MAX_ANGLE as i64).contains(&angle) => ServoCommand::new(pin, angle as u16),
        _ => Err(ProtocolError::AngleOutOfRange(state)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pin(v: u8) -> PinId {
        PinId::new(v as u32).unwrap()
    }

    fn batch(pairs: &[(u8, bool)]) -> BatchCommand {
        BatchCommand::new(pairs.iter().map(|&(p, s)| (pin(p), s)).collect()).unwrap()
    }

    #[test]
    fn encodes_documented_batches() {
        assert_eq!(
            encode_batch(&batch(&[(19, true), (18, false)])),
            "/setBatch?pin=1918&state=10"
        );
        assert_eq!(
            encode_batch(&batch(&[(1, true), (2, false), (3, false)])),
            "/setBatch?pin=010203&state=100"
        );
        assert_eq!(encode_batch(&batch(&[(0, false)])), "/setBatch?pin=00&state=0");
    }

    #[test]
    fn parses_documented_batch() {
        assert_eq!(
            parse_batch("pin=1918&state=10").unwrap(),
            batch(&[(19, true), (18, false)])
        );
    }

    #[test]
    fn batch_length_errors() {
        assert!(matches!(
            parse_batch("pin=19&state="),
            Err(ProtocolError::MismatchedLength {
                pin_digits: 2,
                states: 0
            })
        ));
        assert!(matches!(
            parse_batch("pin=191&state=1"),
            Err(ProtocolError::MismatchedLength { .. })
        ));
        assert_eq!(parse_batch("pin=&state="), Err(ProtocolError::EmptyCommand));
    }

    #[test]
    fn batch_rejections() {
        assert_eq!(parse_batch("pin=1a&state=1"), Err(ProtocolError::NonDigitPin));
        assert_eq!(parse_batch("pin=19&state=2"), Err(ProtocolError::InvalidStateChar('2')));
        assert_eq!(parse_batch("pin=19"), Err(ProtocolError::MissingParameter("state")));
        assert_eq!(parse_batch("state=1"), Err(ProtocolError::MissingParameter("pin")));
        assert_eq!(parse_batch(""), Err(ProtocolError::MissingParameter("pin")));
        assert_eq!(
            parse_batch("pin=19&state=1&x=2"),
            Err(ProtocolError::UnknownParameter("x".into()))
        );
        assert_eq!(
            parse_batch("pin=19&pin=18&state=1"),
            Err(ProtocolError::DuplicateParameter("pin".into()))
        );
    }

    #[test]
    fn percent_decoding_happens_before_validation() {
        assert_eq!(parse_batch("pin=%31%39&state=1").unwrap(), batch(&[(19, true)]));
        assert_eq!(parse_batch("%70in=19&state=1").unwrap(), batch(&[(19, true)]));
    }

    #[test]
    fn duplicate_pins_are_kept_in_order() {
        assert_eq!(
            parse_batch("pin=0505&state=10").unwrap(),
            batch(&[(5, true), (5, false)])
        );
    }

    #[test]
    fn servo_encoding() {
        let enc = |a| encode_servo(&ServoCommand::new(pin(5), a).unwrap());
        assert_eq!(enc(60), "/setServo?pin=05&state=60");
        assert_eq!(enc(0), "/setServo?pin=05&state=0");
        assert_eq!(enc(180), "/setServo?pin=05&state=180");
        assert!(ServoCommand::new(pin(5), 181).is_err());
    }

    #[test]
    fn servo_parsing() {
        assert_eq!(
            parse_servo("pin=05&state=180").unwrap(),
            ServoCommand::new(pin(5), 180).unwrap()
        );
        assert!(matches!(
            parse_servo("pin=05&state=181"),
            Err(ProtocolError::AngleOutOfRange(_))
        ));
        assert!(matches!(
            parse_servo("pin=05&state=-1"),
            Err(ProtocolError::AngleOutOfRange(_))
        ));
        assert!(matches!(
            parse_servo("pin=05&state=99999999999999999999999"),
            Err(ProtocolError::AngleOutOfRange(_))
        ));
        assert!(matches!(
            parse_servo("pin=05&state=6o"),
            Err(ProtocolError::InvalidAngle(_))
        ));
        assert!(matches!(
            parse_servo("pin=05&state="),
            Err(ProtocolError::InvalidAngle(_))
        ));
        assert_eq!(parse_servo("pin=x5&state=1"), Err(ProtocolError::NonDigitPin));
        assert_eq!(parse_servo("pin=5&state=1"), Err(ProtocolError::InvalidPinWidth(1)));
        assert_eq!(parse_servo("pin=05"), Err(ProtocolError::MissingParameter("state")));
    }

    #[test]
    fn request_dispatch() {
        assert_eq!(
            Command::parse_request("/setBatch?pin=010203&state=100").unwrap(),
            Command::Batch(batch(&[(1, true), (2, false), (3, false)]))
        );
        assert!(matches!(
            Command::parse_request("/unknown"),
            Err(ProtocolError::UnknownEndpoint(_))
        ));
        assert_eq!(
            Command::parse_request("/setServo"),
            Err(ProtocolError::MissingParameter("pin"))
        );
    }

    #[test]
    fn inversion() {
        let b = batch(&[(1, true), (2, false), (3, false)]);
        assert_eq!(b.inverted(), batch(&[(1, false), (2, true), (3, true)]));
        assert!(b.inverted().is_complement_of(&b));
        assert!(!b.is_complement_of(&b));
    }

    fn arb_batch(max: usize) -> impl Strategy<Value = BatchCommand> {
        prop::collection::vec((0u8..=99, any::<bool>()), 1..=max)
            .prop_map(|v| BatchCommand::new(v.into_iter().map(|(p, s)| (pin(p), s)).collect()).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]

        #[test]
        fn batch_round_trip(cmd in arb_batch(50)) {
            let wire = encode_batch(&cmd);
            let (path, query) = split_target(&wire);
            prop_assert_eq!(path, SET_BATCH_PATH);
            prop_assert_eq!(query.len(), "pin=&state=".len() + 3 * cmd.entries().len());
            let back = parse_batch(query).unwrap();
            for (i, (a, b)) in cmd.entries().iter().zip(back.entries()).enumerate() {
                prop_assert_eq!(a, b, "entry {} reordered", i);
            }
            prop_assert_eq!(back, cmd);
        }

        #[test]
        fn servo_round_trip(p in 0u8..=99, angle in 0u16..=180) {
            let cmd = ServoCommand::new(pin(p), angle).unwrap();
            prop_assert_eq!(Command::parse_request(&encode_servo(&cmd)).unwrap(), Command::Servo(cmd));
        }

        #[test]
        fn pin_rendering_is_two_chars(p in 0u8..=99) {
            let s = pin(p).to_string();
            prop_assert_eq!(s.len(), 2);
            prop_assert_eq!(s.parse::<u8>().unwrap(), p);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100_000))]

        #[test]
        fn parsers_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..40)) {
            let s = String::from_utf8_lossy(&bytes);
            let _ = parse_batch(&s);
            let _ = parse_servo(&s);
            let _ = Command::parse_request(&s);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(20_000))]

        #[test]
        fn near_miss_queries_parse_or_reject_cleanly(
            s in "/set(Batch|Servo|batch)\\?((pin|state|pins|)=[0-9a-f%+-]{0,9}&?){0,3}"
        ) {
            if let Ok(cmd) = Command::parse_request(&s) {
                let wire = cmd.encode();
                prop_assert_eq!(Command::parse_request(&wire).unwrap(), cmd);
            }
        }
    }
}
