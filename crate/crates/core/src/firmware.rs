//! Device emulator: the two command endpoints plus `/telemetry` and the
//! manual-clock `/step` hook, served over HTTP or driven in-process.

use std::collections::BTreeMap;
use std::fmt;
use std::net::SocketAddr;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pneumodel::{DeviceState, PhysicsError, PneumaticConfig, StepEvent, TopologyError, CHANNELS, MAX_DT};
use crate::protocol::{self, Command, ProtocolError};

pub const TELEMETRY_PATH: &str = "/telemetry";
pub const STEP_PATH: &str = "/step";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "factor")]
pub enum ClockMode {
    Realtime,
    Accelerated(f64),
    ManualStep,
}

impl ClockMode {
    /// Simulated seconds per wall-clock second, if the clock runs by itself.
    pub fn speed(self) -> Option<f64> {
        match self {
            ClockMode::Realtime => Some(1.0),
            ClockMode::Accelerated(f) => Some(f),
            ClockMode::ManualStep => None,
        }
    }
}

impl FromStr for ClockMode {
    type Err = String;

    /// `realtime`, `manual`, or `xN` for an N-times accelerated clock.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "realtime" => Ok(ClockMode::Realtime),
            "manual" => Ok(ClockMode::ManualStep),
            _ => {
                let factor = s
                    .strip_prefix('x')
                    .and_then(|f| f.parse::<f64>().ok())
                    .ok_or_else(|| format!("unknown clock mode {s:?} (expected realtime, manual or xN)"))?;
                if factor > 0.0 && factor.is_finite() {
                    Ok(ClockMode::Accelerated(factor))
                } else {
                    Err(format!("clock factor must be positive, got {factor}"))
                }
            }
        }
    }
}

impl fmt::Display for ClockMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClockMode::Realtime => f.write_str("realtime"),
            ClockMode::Accelerated(x) => write!(f, "x{x}"),
            ClockMode::ManualStep => f.write_str("manual"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Endpoint {
    #[serde(rename = "setBatch")]
    SetBatch,
    #[serde(rename = "setServo")]
    SetServo,
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Endpoint::SetBatch => "setBatch",
            Endpoint::SetServo => "setServo",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "reason")]
pub enum Outcome {
    Applied,
    Rejected(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandLogEntry {
    /// Simulated clock at receipt.
    pub receive_time: f64,
    pub endpoint: Endpoint,
    pub raw_query: String,
    pub outcome: Outcome,
}

/// Read-only view of the device served at `/telemetry`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceSnapshot {
    pub clock: f64,
    pub fills: [f64; CHANNELS],
    pub pressures: [f64; CHANNELS],
    pub servo_angles: [f64; CHANNELS],
    pub servo_targets: [f64; CHANNELS],
    /// Actuator pins plus any pin written so far, keyed by two-digit id.
    pub pins: BTreeMap<String, u8>,
    pub clock_mode: ClockMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "channel")]
pub enum DeviceEvent {
    /// 1-based servo channel reached its commanded angle.
    ServoArrived(u8),
    /// 1-based inflatable saw inflate and deflate flow at once.
    ConflictingFlow(u8),
}

impl From<StepEvent> for DeviceEvent {
    fn from(e: StepEvent) -> Self {
        match e {
            StepEvent::ServoArrived(i) => DeviceEvent::ServoArrived(i as u8 + 1),
            StepEvent::ConflictingFlow(i) => DeviceEvent::ConflictingFlow(i as u8 + 1),
        }
    }
}

/// Body of a `/step` response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReply {
    pub events: Vec<DeviceEvent>,
    pub telemetry: DeviceSnapshot,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reply {
    pub status: u16,
    pub content_type: &'static str,
    pub body: String,
}

impl Reply {
    fn text(status: u16, body: impl Into<String>) -> Self {
        Reply {
            status,
            content_type: "text/plain; charset=utf-8",
            body: body.into(),
        }
    }

    fn json<T: Serialize>(value: &T) -> Self {
        Reply {
            status: 200,
            content_type: "application/json",
            body: serde_json::to_string(value).expect("telemetry serializes"),
        }
    }

    fn rejected(code: &str, detail: impl fmt::Display) -> Self {
        Reply::text(400, format!("{code}: {detail}"))
    }
}

#[derive(Debug, Error)]
pub enum FirmwareError {
    #[error("invalid device configuration: {0}")]
    Config(#[from] TopologyError),
    #[error("physics timestep {0} s outside (0, 0.01]")]
    Timestep(f64),
    #[error("could not bind port {port}: {reason}")]
    BindFailure { port: u16, reason: String },
}

/// The single logical actor behind the endpoints. Every mutation of the
/// device goes through `&mut self`, so commands never interleave with a step.
#[derive(Debug, Clone)]
pub struct Emulator {
    device: DeviceState,
    clock_mode: ClockMode,
    dt: f64,
    log: Vec<CommandLogEntry>,
}

impl Emulator {
    pub fn new(config: PneumaticConfig, clock_mode: ClockMode, dt: f64) -> Result<Self, FirmwareError> {
        if !(dt > 0.0 && dt <= MAX_DT) {
            return Err(FirmwareError::Timestep(dt));
        }
        Ok(Emulator {
            device: DeviceState::new(config)?,
            clock_mode,
            dt,
            log: Vec::new(),
        })
    }

    pub fn device(&self) -> &DeviceState {
        &self.device
    }

    pub fn clock_mode(&self) -> ClockMode {
        self.clock_mode
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn log(&self) -> &[CommandLogEntry] {
        &self.log
    }

    pub fn into_log(self) -> Vec<CommandLogEntry> {
        self.log
    }

    /// Routes one GET request target.
    pub fn handle(&mut self, target: &str) -> Reply {
        let (path, query) = protocol::split_target(target);
        match path {
            protocol::SET_BATCH_PATH => self.command(Endpoint::SetBatch, target, query),
            protocol::SET_SERVO_PATH => self.command(Endpoint::SetServo, target, query),
            TELEMETRY_PATH => Reply::json(&self.telemetry()),
            STEP_PATH => self.step_request(query),
            _ => Reply::text(404, format!("NotFound: {path}")),
        }
    }

    fn command(&mut self, endpoint: Endpoint, target: &str, query: &str) -> Reply {
        let result = Command::parse_request(target)
            .map_err(|e| (e.code(), e.to_string()))
            .and_then(|cmd| self.apply(&cmd).map_err(|e| ("UnknownServoPin", e.to_string())));
        let (outcome, reply) = match result {
            Ok(()) => (Outcome::Applied, Reply::text(200, "OK")),
            Err((code, detail)) => (
                Outcome::Rejected(format!("{code}: {detail}")),
                Reply::rejected(code, detail),
            ),
        };
        self.log.push(CommandLogEntry {
            receive_time: self.device.clock(),
            endpoint,
            raw_query: query.to_string(),
            outcome,
        });
        reply
    }

    /// Applies a decoded command without touching the log.
    pub fn apply(&mut self, cmd: &Command) -> Result<(), PhysicsError> {
        match cmd {
            Command::Batch(b) => {
                self.device.apply_batch(b);
                Ok(())
            }
            Command::Servo(s) => self.device.apply_servo(s),
        }
    }

    fn step_request(&mut self, query: &str) -> Reply {
        if self.clock_mode != ClockMode::ManualStep {
            return Reply::text(409, "StepUnavailable: clock is not in manual mode");
        }
        let mut dt = None;
        for (key, value) in form_urlencoded::parse(query.as_bytes()) {
            if key != "dt" || dt.is_some() {
                return Reply::rejected("BadStepQuery", "expected exactly one `dt` parameter");
            }
            dt = Some(value.into_owned());
        }
        let Some(Ok(dt)) = dt.map(|v| v.parse::<f64>()) else {
            return Reply::rejected("BadStepQuery", "`dt` must be a number of seconds");
        };
        match self.advance(dt) {
            Ok(events) => Reply::json(&StepReply {
                events,
                telemetry: self.telemetry(),
            }),
            Err(e) => Reply::rejected("InvalidTimestep", e),
        }
    }

    /// Advances the clock by `duration`, split into equal substeps no
    /// longer than the configured physics timestep.
    pub fn advance(&mut self, duration: f64) -> Result<Vec<DeviceEvent>, PhysicsError> {
        if !(duration > 0.0 && duration.is_finite()) {
            return Err(PhysicsError::InvalidTimestep(duration));
        }
        let substeps = (duration / self.dt - 1e-9).ceil().max(1.0) as u64;
        let sub = duration / substeps as f64;
        let mut events = Vec::new();
        for _ in 0..substeps {
            events.extend(self.device.step(sub)?.into_iter().map(DeviceEvent::from));
        }
        Ok(events)
    }

    pub fn telemetry(&self) -> DeviceSnapshot {
        let d = &self.device;
        let manifold = &d.config().manifold;
        let mut pins: BTreeMap<String, u8> = manifold
            .valves
            .iter()
            .map(|v| v.pin)
            .chain([manifold.inflate_pump_pin, manifold.deflate_pump_pin])
            .map(|p| (p.to_string(), d.pins().get(p) as u8))
            .collect();
        pins.extend(d.pins().written().map(|(p, on)| (p.to_string(), on as u8)));
        DeviceSnapshot {
            clock: d.clock(),
            fills: d.inflatables().map(|c| c.fill),
            pressures: d.inflatables().map(|c| c.pressure),
            servo_angles: d.servos().map(|s| s.angle),
            servo_targets: d.servos().map(|s| s.target),
            pins,
            clock_mode: self.clock_mode,
        }
    }
}

/// A running HTTP emulator. Dropping it without [`FirmwareHandle::shutdown`]
/// leaves the server threads running until process exit.
pub struct FirmwareHandle {
    addr: SocketAddr,
    emulator: Arc<Mutex<Emulator>>,
    server: Arc<tiny_http::Server>,
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
}

fn lock(emulator: &Mutex<Emulator>) -> MutexGuard<'_, Emulator> {
    emulator.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

/// Binds `host:port` (port 0 picks a free one) and starts serving.
pub fn serve(
    config: PneumaticConfig,
    clock: ClockMode,
    dt: f64,
    host: &str,
    port: u16,
) -> Result<FirmwareHandle, FirmwareError> {
    let emulator = Arc::new(Mutex::new(Emulator::new(config, clock, dt)?));
    let server = tiny_http::Server::http((host, port)).map_err(|e| FirmwareError::BindFailure {
        port,
        reason: e.to_string(),
    })?;
    let addr = server.server_addr().to_ip().expect("tcp listener has an ip address");
    let server = Arc::new(server);
    let stop = Arc::new(AtomicBool::new(false));
    let mut threads = Vec::new();

    {
        let server = Arc::clone(&server);
        let emulator = Arc::clone(&emulator);
        threads.push(thread::spawn(move || {
            // One request at a time, in arrival order.
            for request in server.incoming_requests() {
                let reply = if *request.method() == tiny_http::Method::Get {
                    let target = request.url().to_string();
                    lock(&emulator).handle(&target)
                } else {
                    Reply::text(405, "MethodNotAllowed: only GET is supported")
                };
                let header =
                    tiny_http::Header::from_bytes("Content-Type", reply.content_type).expect("static header is valid");
                let response = tiny_http::Response::from_string(reply.body)
                    .with_status_code(reply.status)
                    .with_header(header);
                if let Err(e) = request.respond(response) {
                    log::debug!("client went away: {e}");
                }
            }
        }));
    }

    if let Some(speed) = clock.speed() {
        let emulator = Arc::clone(&emulator);
        let stop = Arc::clone(&stop);
        threads.push(thread::spawn(move || {
            let start = Instant::now();
            while !stop.load(Ordering::Relaxed) {
                {
                    let mut emu = lock(&emulator);
                    let target = start.elapsed().as_secs_f64() * speed;
                    let dt = emu.dt;
                    while emu.device.clock() + dt <= target {
                        emu.device.step(dt).expect("configured timestep is valid");
                    }
                }
                thread::sleep(Duration::from_millis(1));
            }
        }));
    }

    log::info!("firmware emulator listening on http://{addr} (clock {clock})");
    Ok(FirmwareHandle {
        addr,
        emulator,
        server,
        stop,
        threads,
    })
}

impl FirmwareHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn telemetry(&self) -> DeviceSnapshot {
        lock(&self.emulator).telemetry()
    }

    /// Blocks until the server threads exit (i.e. forever, for `serve`).
    pub fn wait(mut self) {
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }

    /// Stops accepting requests and returns the full command log.
    pub fn shutdown(mut self) -> Vec<CommandLogEntry> {
        self.stop.store(true, Ordering::Relaxed);
        self.server.unblock();
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
        let log = lock(&self.emulator).log.clone();
        log
    }
}

#[derive(Debug, Error)]
pub enum LinkError {
    #[error("device endpoint unreachable: {0}")]
    Unreachable(String),
    #[error("device rejected {target} with {status}: {reason}")]
    Rejected {
        target: String,
        status: u16,
        reason: String,
    },
    #[error("malformed reply from device: {0}")]
    Decode(String),
}

/// Anything the controller can talk to: the in-process emulator or a
/// remote one over HTTP.
pub trait DeviceLink {
    fn send(&mut self, cmd: &Command) -> Result<(), LinkError>;
    fn step(&mut self, dt: f64) -> Result<StepReply, LinkError>;
    fn telemetry(&mut self) -> Result<DeviceSnapshot, LinkError>;
}

/// In-process emulator. Commands still travel as wire strings.
pub struct LocalLink {
    emulator: Emulator,
}

impl LocalLink {
    pub fn new(emulator: Emulator) -> Self {
        LocalLink { emulator }
    }

    pub fn emulator(&self) -> &Emulator {
        &self.emulator
    }

    pub fn into_emulator(self) -> Emulator {
        self.emulator
    }
}

impl DeviceLink for LocalLink {
    fn send(&mut self, cmd: &Command) -> Result<(), LinkError> {
        let target = cmd.encode();
        let reply = self.emulator.handle(&target);
        if reply.status == 200 {
            Ok(())
        } else {
            Err(LinkError::Rejected {
                target,
                status: reply.status,
                reason: reply.body,
            })
        }
    }

    fn step(&mut self, dt: f64) -> Result<StepReply, LinkError> {
        if self.emulator.clock_mode != ClockMode::ManualStep {
            return Err(LinkError::Rejected {
                target: STEP_PATH.into(),
                status: 409,
                reason: "StepUnavailable".into(),
            });
        }
        let events = self.emulator.advance(dt).map_err(|e| LinkError::Rejected {
            target: format!("{STEP_PATH}?dt={dt}"),
            status: 400,
            reason: e.to_string(),
        })?;
        Ok(StepReply {
            events,
            telemetry: self.emulator.telemetry(),
        })
    }

    fn telemetry(&mut self) -> Result<DeviceSnapshot, LinkError> {
        Ok(self.emulator.telemetry())
    }
}

/// Blocking HTTP client for a remote emulator (or the real device, for the
/// two command endpoints).
pub struct HttpLink {
    base: String,
    agent: ureq::Agent,
}

impl HttpLink {
    pub fn new(base_url: &str) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(10)))
            .build()
            .into();
        HttpLink {
            base: base_url.trim_end_matches('/').to_string(),
            agent,
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    /// Issues one GET and returns (status, body).
    pub fn get(&self, target: &str) -> Result<(u16, String), LinkError> {
        let url = format!("{}{}", self.base, target);
        let mut response = self
            .agent
            .get(&url)
            .call()
            .map_err(|e| LinkError::Unreachable(format!("{url}: {e}")))?;
        let status = response.status().as_u16();
        let body = response
            .body_mut()
            .read_to_string()
            .map_err(|e| LinkError::Decode(e.to_string()))?;
        Ok((status, body))
    }

    fn get_ok(&self, target: &str) -> Result<String, LinkError> {
        let (status, body) = self.get(target)?;
        if status == 200 {
            Ok(body)
        } else {
            Err(LinkError::Rejected {
                target: target.to_string(),
                status,
                reason: body,
            })
        }
    }
}

impl DeviceLink for HttpLink {
    fn send(&mut self, cmd: &Command) -> Result<(), LinkError> {
        self.get_ok(&cmd.encode()).map(drop)
    }

    fn step(&mut self, dt: f64) -> Result<StepReply, LinkError> {
        let body = self.get_ok(&format!("{STEP_PATH}?dt={dt}"))?;
        serde_json::from_str(&body).map_err(|e| LinkError::Decode(e.to_string()))
    }

    fn telemetry(&mut self) -> Result<DeviceSnapshot, LinkError> {
        let body = self.get_ok(TELEMETRY_PATH)?;
        serde_json::from_str(&body).map_err(|e| LinkError::Decode(e.to_string()))
    }
}

/// Maps a parse failure to the reason string the server would send.
pub fn rejection_reason(err: &ProtocolError) -> String {
    format!("{}: {}", err.code(), err)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manual() -> Emulator {
        Emulator::new(PneumaticConfig::default(), ClockMode::ManualStep, 0.005).unwrap()
    }

    #[test]
    fn clock_mode_parsing() {
        assert_eq!("manual".parse::<ClockMode>().unwrap(), ClockMode::ManualStep);
        assert_eq!("realtime".parse::<ClockMode>().unwrap(), ClockMode::Realtime);
        assert_eq!("x10".parse::<ClockMode>().unwrap(), ClockMode::Accelerated(10.0));
        assert!("x0".parse::<ClockMode>().is_err());
        assert!("x-2".parse::<ClockMode>().is_err());
        assert!("fast".parse::<ClockMode>().is_err());
    }

    #[test]
    fn documented_batch_is_applied() {
        let mut emu = manual();
        let reply = emu.handle("/setBatch?pin=1918&state=10");
        assert_eq!(reply, Reply::text(200, "OK"));
        let t = emu.telemetry();
        assert_eq!(t.pins["19"], 1);
        assert_eq!(t.pins["18"], 0);
    }

    #[test]
    fn rejections_and_not_found() {
        let mut emu = manual();
        let reply = emu.handle("/setServo?pin=05&state=300");
        assert_eq!(reply.status, 400);
        assert!(reply.body.starts_with("AngleOutOfRange"));
        assert_eq!(emu.handle("/unknown").status, 404);
        // wired pins only
        let reply = emu.handle("/setServo?pin=05&state=30");
        assert_eq!(reply.status, 400);
        assert!(reply.body.starts_with("UnknownServoPin"));
    }

    #[test]
    fn fresh_boot_telemetry() {
        let t = manual().telemetry();
        assert_eq!(t.clock, 0.0);
        assert_eq!(t.fills, [0.0; 3]);
        assert_eq!(t.servo_angles, [0.0; 3]);
        assert!(t.pins.values().all(|&v| v == 0));
        assert_eq!(t.pins.len(), 6);
    }

    #[test]
    fn inflation_then_telemetry() {
        let mut emu = manual();
        assert_eq!(emu.handle("/setBatch?pin=010203&state=100").status, 200);
        assert_eq!(emu.handle("/setBatch?pin=0405&state=01").status, 200);
        // 0.2 s closed form plus one physics step of slack
        assert_eq!(emu.handle("/step?dt=0.205").status, 200);
        assert_eq!(emu.telemetry().fills[0], 1.0);
        assert_eq!(emu.telemetry().fills[1], 0.0);
    }

    #[test]
    fn servo_then_telemetry() {
        let mut emu = manual();
        emu.handle("/setServo?pin=10&state=60");
        let reply = emu.handle("/step?dt=0.9");
        let step: StepReply = serde_json::from_str(&reply.body).unwrap();
        assert!((step.telemetry.servo_angles[0] - 60.0).abs() < 1e-9);
        let reply = emu.handle("/step?dt=0.005");
        let step: StepReply = serde_json::from_str(&reply.body).unwrap();
        assert_eq!(step.telemetry.servo_angles[0], 60.0);
    }

    #[test]
    fn step_hook_validation() {
        let mut emu = manual();
        assert_eq!(emu.handle("/step?dt=abc").status, 400);
        assert_eq!(emu.handle("/step?dt=-1").status, 400);
        assert_eq!(emu.handle("/step").status, 400);
        assert_eq!(emu.handle("/step?dt=0.01&x=1").status, 400);
        assert_eq!(emu.telemetry().clock, 0.0);

        let mut rt = Emulator::new(PneumaticConfig::default(), ClockMode::Realtime, 0.005).unwrap();
        assert_eq!(rt.handle("/step?dt=0.01").status, 409);
    }

    #[test]
    fn resending_a_batch_is_idempotent() {
        let mut emu = manual();
        emu.handle("/setBatch?pin=010405&state=101");
        let before = emu.device().clone();
        emu.handle("/setBatch?pin=010405&state=101");
        assert_eq!(emu.device(), &before);
    }

    #[test]
    fn rejected_commands_have_no_side_effects() {
        let mut emu = manual();
        let before = emu.device().clone();
        for bad in [
            "/setBatch?pin=01&state=2",
            "/setBatch?pin=0102&state=1",
            "/setServo?pin=10&state=181",
        ] {
            assert_eq!(emu.handle(bad).status, 400);
        }
        assert_eq!(emu.device(), &before);
    }

    #[test]
    fn log_records_outcomes() {
        let mut emu = manual();
        assert!(emu.log().is_empty());
        emu.handle("/setBatch?pin=01&state=1");
        emu.handle("/setBatch?pin=01&state=x");
        emu.handle("/telemetry");
        let log = emu.into_log();
        assert_eq!(log.len(), 2);
        assert_eq!(log[0].outcome, Outcome::Applied);
        assert_eq!(log[0].raw_query, "pin=01&state=1");
        let expected = rejection_reason(&protocol::parse_batch("pin=01&state=x").unwrap_err());
        assert_eq!(log[1].outcome, Outcome::Rejected(expected));
    }

    #[test]
    fn snapshot_round_trips_through_json() {
        let snap = manual().telemetry();
        let text = serde_json::to_string(&snap).unwrap();
        assert_eq!(serde_json::from_str::<DeviceSnapshot>(&text).unwrap(), snap);
    }
}
