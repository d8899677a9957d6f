//! Host-side policy: turns hand pose and scene objects into wire commands.
//!
//! Per update the controller
//!
//! 1. integrates its open-loop fill estimate from the pins it has commanded,
//! 2. ends any timed pump pulses that are due,
//! 3. parks the servos of objects inside the ready radius at the ready angle,
//! 4. grabs the closest object within `interaction_radius + delta_distance`
//!    (ties go to the lowest id), releasing whatever was held before,
//! 5. keeps the held object's inflation on target for its mode.
//!
//! The inflation batch for a channel opens the inflate side of the
//! manifold; on release exactly that batch is sent again with every state
//! inverted, which turns the same pins over to the deflate pump.
//! Gate valves shared by both directions are set by a separate routing batch.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pneumodel::{GateDirection, ManifoldTopology, PinLevels, CHANNELS};
use crate::protocol::{BatchCommand, Command, PinId, ServoCommand, MAX_ANGLE};
use crate::telemetry::{BatchCause, EventKind, EventRecord};

/// Slack for comparing pulse deadlines against sampled clock times.
const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ControllerError {
    #[error("object id {0} appears more than once")]
    DuplicateObjectId(u32),
    #[error("variable inflation level {0} outside [0, 1]")]
    LevelOutOfRange(f64),
    #[error("update at {now} s is earlier than the previous one at {previous} s")]
    TimeWentBackwards { now: f64, previous: f64 },
    #[error("object {id}: {reason}")]
    InvalidObject { id: u32, reason: String },
    #[error("invalid controller config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    /// Meters beyond an object's interaction radius that still trigger delivery.
    pub delta_distance: f64,
    /// Meters; objects this close get their servo parked at the ready angle.
    pub ready_radius: f64,
    pub ready_angle: u16,
    pub grasp_angle: u16,
    /// Seconds the controller assumes for empty to full.
    pub full_inflate_time: f64,
    /// Seconds the controller assumes for full to empty.
    pub full_deflate_time: f64,
    /// Fill error tolerated by squeeze tracking before the pumps run.
    pub deadband: f64,
    /// Seconds between updates.
    pub control_period: f64,
    /// Extra degrees past the grasp angle for the pluck cue.
    pub pluck_nudge: u16,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            delta_distance: 0.01,
            ready_radius: 0.10,
            ready_angle: 0,
            grasp_angle: 60,
            full_inflate_time: 0.2,
            full_deflate_time: 1.0,
            deadband: 0.05,
            control_period: 0.01,
            pluck_nudge: 2,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<(), ControllerError> {
        let fail = |m: &str| Err(ControllerError::InvalidConfig(m.to_string()));
        if !(self.delta_distance > 0.0 && self.delta_distance < self.ready_radius) {
            return fail("need 0 < delta_distance < ready_radius");
        }
        if self.ready_angle > MAX_ANGLE || self.grasp_angle > MAX_ANGLE {
            return fail("servo angles must lie in 0..=180");
        }
        if !(self.full_inflate_time > 0.0 && self.full_deflate_time > 0.0 && self.control_period > 0.0) {
            return fail("times must be positive");
        }
        if !(0.0..1.0).contains(&self.deadband) {
            return fail("deadband must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InflationMode {
    /// Inflate fully while held.
    Binary,
    /// Timed pulse to a designer-chosen fill in [0, 1].
    Variable { level: f64 },
    /// Fill follows finger curl: open hand full, closed hand empty.
    Squeeze { open_distance: f64, closed_distance: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VirtualObject {
    pub id: u32,
    pub interaction_name: String,
    /// Meters.
    pub position: [f64; 3],
    /// Meters.
    pub interaction_radius: f64,
    /// 1..=3
    pub servo_channel: u8,
    /// 1..=3
    pub inflatable_channel: u8,
    pub mode: InflationMode,
    #[serde(default)]
    pub pluckable: bool,
}

impl VirtualObject {
    pub fn validate(&self) -> Result<(), ControllerError> {
        let fail = |reason: &str| {
            Err(ControllerError::InvalidObject {
                id: self.id,
                reason: reason.to_string(),
            })
        };
        if !(1..=3).contains(&self.servo_channel) || !(1..=3).contains(&self.inflatable_channel) {
            return fail("channels must be 1, 2 or 3");
        }
        if self.interaction_radius.is_nan() || self.interaction_radius <= 0.0 {
            return fail("interaction_radius must be positive");
        }
        match self.mode {
            InflationMode::Variable { level } if !(0.0..=1.0).contains(&level) => {
                fail("variable level must lie in [0, 1]")
            }
            InflationMode::Squeeze {
                open_distance,
                closed_distance,
            } if !(open_distance > closed_distance && closed_distance > 0.0) => {
                fail("squeeze needs open_distance > closed_distance > 0")
            }
            _ => Ok(()),
        }
    }

    pub fn distance_to(&self, point: [f64; 3]) -> f64 {
        distance(self.position, point)
    }
}

pub fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HandPose {
    pub time: f64,
    pub position: [f64; 3],
    /// Index fingertip to knuckle, meters.
    pub index_tip_knuckle_distance: f64,
    #[serde(default = "tracked_default")]
    pub tracked: bool,
}

fn tracked_default() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Intent {
    Inflate,
    Deflate,
    Hold,
}

/// Bang-bang decision with a symmetric deadband.
pub fn track_to_target(estimate: f64, target: f64, deadband: f64) -> Intent {
    if target - estimate > deadband {
        Intent::Inflate
    } else if estimate - target > deadband {
        Intent::Deflate
    } else {
        Intent::Hold
    }
}

/// Target fill for a fingertip-to-knuckle distance: `1 - curl`, where curl
/// runs linearly from 0 at `open_distance` to 1 at `closed_distance`.
pub fn squeeze_target(tip_knuckle_distance: f64, open_distance: f64, closed_distance: f64) -> f64 {
    let curl = ((open_distance - tip_knuckle_distance) / (open_distance - closed_distance)).clamp(0.0, 1.0);
    1.0 - curl
}

/// Servo command for the pluck cue: a few degrees past the grasp angle,
/// never past 180.
pub fn pluck_nudge(servo_pin: PinId, config: &ControllerConfig) -> ServoCommand {
    let angle = (config.grasp_angle + config.pluck_nudge).min(MAX_ANGLE);
    ServoCommand::new(servo_pin, angle).expect("clamped angle is in range")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PulseKind {
    Inflate,
    Deflate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pulse {
    /// 1-based inflatable channel.
    pub channel: u8,
    pub end_time: f64,
    pub kind: PulseKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grab {
    pub object: u32,
    pub servo_channel: u8,
    pub inflatable_channel: u8,
    /// Pins and states that inflate this object's channel.
    pub inflation_batch: BatchCommand,
    /// Level currently targeted in variable mode.
    pub level: Option<f64>,
    pub pluckable: bool,
    /// Last squeeze tracking decision.
    pub intent: Option<Intent>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
enum PluckPhase {
    #[default]
    Idle,
    Requested,
    Nudged,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ControllerState {
    /// Object ids inside the ready radius, per servo channel.
    pub ready_objects: [BTreeSet<u32>; CHANNELS],
    pub grabbed: Option<Grab>,
    /// Pin levels as last commanded.
    pub pin_state_cache: PinLevels,
    pub last_batch: Option<BatchCommand>,
    pub servo_cache: [Option<u16>; CHANNELS],
    pub pending_pulses: Vec<Pulse>,
    /// Open-loop fill estimate per inflatable.
    pub estimates: [f64; CHANNELS],
    pub last_update: Option<f64>,
    pluck: PluckPhase,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct UpdateOutput {
    pub commands: Vec<Command>,
    pub events: Vec<EventRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Controller {
    config: ControllerConfig,
    manifold: ManifoldTopology,
    state: ControllerState,
}

impl Controller {
    pub fn new(config: ControllerConfig, manifold: ManifoldTopology) -> Result<Self, ControllerError> {
        config.validate()?;
        manifold
            .validate()
            .map_err(|e| ControllerError::InvalidConfig(e.to_string()))?;
        Ok(Controller {
            config,
            manifold,
            state: ControllerState::default(),
        })
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    pub fn state(&self) -> &ControllerState {
        &self.state
    }

    pub fn grabbed(&self) -> Option<u32> {
        self.state.grabbed.as_ref().map(|g| g.object)
    }

    /// Asks for a pluck cue on the next update; ignored unless a pluckable
    /// object is held by then.
    pub fn request_pluck(&mut self) {
        if self.state.pluck == PluckPhase::Idle {
            self.state.pluck = PluckPhase::Requested;
        }
    }

    pub fn servo_pin(&self, channel: u8) -> PinId {
        self.manifold.servo_pins[channel as usize - 1]
    }

    /// Batch that turns the manifold over to the inflate pump for `channel`.
    /// Its complement hands the same pins to the deflate pump.
    pub fn inflation_batch(&self, channel: u8) -> BatchCommand {
        let m = &self.manifold;
        let mut entries = Vec::new();
        if let Some(sel) = m.selector_pin() {
            entries.push((sel, false));
        }
        for valve in &m.valves {
            if let crate::pneumodel::ValveRole::Gate { inflatables, direction } = &valve.role {
                match direction {
                    GateDirection::Inflate if inflatables.contains(&channel) => entries.push((valve.pin, true)),
                    GateDirection::Deflate if inflatables.contains(&channel) => entries.push((valve.pin, false)),
                    _ => {}
                }
            }
        }
        entries.push((m.inflate_pump_pin, true));
        entries.push((m.deflate_pump_pin, false));
        BatchCommand::new(entries).expect("pump pins are always present")
    }

    /// Opens the two-way gates of `channel` and closes every other one.
    pub fn routing_batch(&self, channel: u8) -> Option<BatchCommand> {
        let entries: Vec<_> = self
            .manifold
            .valves
            .iter()
            .filter_map(|v| match &v.role {
                crate::pneumodel::ValveRole::Gate {
                    inflatables,
                    direction: GateDirection::Both,
                } => Some((v.pin, inflatables.contains(&channel))),
                _ => None,
            })
            .collect();
        BatchCommand::new(entries).ok()
    }

    pub fn pumps_off_batch(&self) -> BatchCommand {
        BatchCommand::new(vec![
            (self.manifold.inflate_pump_pin, false),
            (self.manifold.deflate_pump_pin, false),
        ])
        .expect("two entries")
    }

    /// Inflation pulse reaching `level` from empty: the batch to send now and
    /// when to stop. `None` for level 0.
    pub fn plan_variable_inflation(
        &self,
        channel: u8,
        level: f64,
        now: f64,
    ) -> Result<Option<(BatchCommand, f64)>, ControllerError> {
        if !(0.0..=1.0).contains(&level) {
            return Err(ControllerError::LevelOutOfRange(level));
        }
        let duration = level * self.config.full_inflate_time;
        if duration <= 0.0 {
            return Ok(None);
        }
        Ok(Some((self.inflation_batch(channel), now + duration)))
    }

    pub fn update(
        &mut self,
        hand: &HandPose,
        objects: &[VirtualObject],
        now: f64,
    ) -> Result<UpdateOutput, ControllerError> {
        let mut ids = BTreeSet::new();
        for obj in objects {
            if !ids.insert(obj.id) {
                return Err(ControllerError::DuplicateObjectId(obj.id));
            }
            obj.validate()?;
        }
        if let Some(previous) = self.state.last_update {
            if now < previous {
                return Err(ControllerError::TimeWentBackwards { now, previous });
            }
            self.integrate_estimates(now - previous);
        }
        self.state.last_update = Some(now);

        let mut out = UpdateOutput::default();
        self.finish_pulses(now, &mut out);

        // Tracking lost: hold everything as it is.
        if !hand.tracked {
            return Ok(out);
        }

        let distances: Vec<f64> = objects.iter().map(|o| o.distance_to(hand.position)).collect();
        let candidate = objects
            .iter()
            .zip(&distances)
            .filter(|(o, &d)| d <= o.interaction_radius + self.config.delta_distance)
            .min_by(|(a, da), (b, db)| da.total_cmp(db).then(a.id.cmp(&b.id)))
            .map(|(o, _)| o);

        let held = self.state.grabbed.as_ref().map(|g| g.object);
        if held.is_some() && held != candidate.map(|o| o.id) {
            self.release(now, &mut out);
        }

        let delivering = candidate.map(|o| o.servo_channel);
        self.update_ready(objects, &distances, delivering, now, &mut out);

        if let Some(obj) = candidate {
            if self.state.grabbed.is_none() {
                self.grab(obj, hand, now, &mut out)?;
            } else {
                self.hold(obj, hand, now, &mut out)?;
            }
        } else if self.state.pluck == PluckPhase::Requested {
            self.state.pluck = PluckPhase::Idle;
        }
        Ok(out)
    }

    fn integrate_estimates(&mut self, elapsed: f64) {
        if elapsed <= 0.0 {
            return;
        }
        let pins = &self.state.pin_state_cache;
        let inflate_on = pins.get(self.manifold.inflate_pump_pin);
        let deflate_on = pins.get(self.manifold.deflate_pump_pin);
        let up = 1.0 / self.config.full_inflate_time;
        let down = 1.0 / self.config.full_deflate_time;
        for (est, path) in self.state.estimates.iter_mut().zip(self.manifold.paths(pins)) {
            let mut rate = 0.0;
            if inflate_on && path.inflate_open {
                rate += up;
            }
            if deflate_on && path.deflate_open {
                rate -= down;
            }
            *est = (*est + rate * elapsed).clamp(0.0, 1.0);
        }
    }

    fn finish_pulses(&mut self, now: f64, out: &mut UpdateOutput) {
        let (due, pending): (Vec<_>, Vec<_>) = self
            .state
            .pending_pulses
            .iter()
            .partition(|p| p.end_time <= now + TIME_EPS);
        self.state.pending_pulses = pending;
        if due.is_empty() {
            return;
        }
        let stop = self.pumps_off_batch();
        let detail = stop.encode();
        self.send_batch(stop, out);
        let object = self.state.grabbed.as_ref().map(|g| (g.object, g.inflatable_channel));
        for pulse in due {
            let mut ev = EventRecord::new(now, EventKind::PulseEnd).channel(pulse.channel);
            if let Some((id, _)) = object.filter(|&(_, ch)| ch == pulse.channel) {
                ev = ev.object(id);
            }
            if pulse.kind == PulseKind::Inflate {
                out.events.push(EventRecord {
                    kind: EventKind::InflateStop,
                    detail: detail.clone(),
                    ..ev.clone()
                });
            }
            out.events.push(ev);
        }
        if let Some(g) = self.state.grabbed.as_mut() {
            g.intent = None;
        }
    }

    fn update_ready(
        &mut self,
        objects: &[VirtualObject],
        distances: &[f64],
        delivering: Option<u8>,
        now: f64,
        out: &mut UpdateOutput,
    ) {
        let mut inside: [BTreeSet<u32>; CHANNELS] = Default::default();
        for (obj, &d) in objects.iter().zip(distances) {
            if d <= self.config.ready_radius {
                inside[obj.servo_channel as usize - 1].insert(obj.id);
            }
        }
        for (i, ids) in inside.iter().enumerate() {
            let channel = i as u8 + 1;
            for &id in ids.difference(&self.state.ready_objects[i]) {
                out.events.push(
                    EventRecord::new(now, EventKind::ReadyEntered)
                        .object(id)
                        .channel(channel),
                );
            }
            if !ids.is_empty() && delivering != Some(channel) {
                self.send_servo(channel, self.config.ready_angle, out);
            }
        }
        self.state.ready_objects = inside;
    }

    fn grab(
        &mut self,
        obj: &VirtualObject,
        hand: &HandPose,
        now: f64,
        out: &mut UpdateOutput,
    ) -> Result<(), ControllerError> {
        let channel = obj.inflatable_channel;
        out.events.push(
            EventRecord::new(now, EventKind::Grabbed)
                .object(obj.id)
                .channel(obj.servo_channel),
        );

        // A pulse on another channel would otherwise stop the shared pumps mid-inflation.
        let interrupted: Vec<Pulse> = self.state.pending_pulses.drain(..).collect();
        if !interrupted.is_empty() {
            self.send_batch(self.pumps_off_batch(), out);
        }
        for p in interrupted.iter().filter(|p| p.channel != channel) {
            out.events.push(
                EventRecord::new(now, EventKind::Warning)
                    .channel(p.channel)
                    .detail(format!(
                        "pulse on channel {} interrupted by grab of object {}",
                        p.channel, obj.id
                    )),
            );
        }

        self.send_servo(obj.servo_channel, self.config.grasp_angle, out);
        if let Some(route) = self.routing_batch(channel) {
            self.send_batch(route, out);
        }
        self.state.grabbed = Some(Grab {
            object: obj.id,
            servo_channel: obj.servo_channel,
            inflatable_channel: channel,
            inflation_batch: self.inflation_batch(channel),
            level: None,
            pluckable: obj.pluckable,
            intent: None,
        });

        match obj.mode {
            InflationMode::Binary => self.retarget(1.0, BatchCause::Grab, now, out),
            InflationMode::Variable { level } => self.retarget(level, BatchCause::Grab, now, out),
            InflationMode::Squeeze { .. } => self.track_squeeze(obj, hand, BatchCause::Grab, now, out),
        }
        Ok(())
    }

    fn hold(
        &mut self,
        obj: &VirtualObject,
        hand: &HandPose,
        now: f64,
        out: &mut UpdateOutput,
    ) -> Result<(), ControllerError> {
        let grab = self.state.grabbed.as_ref().expect("hold requires a grab");
        let (servo_channel, pluckable, level) = (grab.servo_channel, grab.pluckable, grab.level);
        match obj.mode {
            InflationMode::Variable { level: wanted } if level != Some(wanted) => {
                self.retarget(wanted, BatchCause::Track, now, out)
            }
            InflationMode::Squeeze { .. } => self.track_squeeze(obj, hand, BatchCause::Track, now, out),
            _ => {}
        }

        match self.state.pluck {
            PluckPhase::Requested if pluckable => {
                let cmd = pluck_nudge(self.servo_pin(servo_channel), &self.config);
                self.send_servo(servo_channel, cmd.angle(), out);
                self.state.pluck = PluckPhase::Nudged;
            }
            PluckPhase::Requested => self.state.pluck = PluckPhase::Idle,
            PluckPhase::Nudged => {
                self.send_servo(servo_channel, self.config.grasp_angle, out);
                self.state.pluck = PluckPhase::Idle;
            }
            PluckPhase::Idle => {}
        }
        Ok(())
    }

    fn release(&mut self, now: f64, out: &mut UpdateOutput) {
        let grab = self.state.grabbed.take().expect("release requires a grab");
        let channel = grab.inflatable_channel;
        out.events.push(
            EventRecord::new(now, EventKind::Released)
                .object(grab.object)
                .channel(grab.servo_channel),
        );

        let had_pulse = self.state.pending_pulses.iter().any(|p| p.channel == channel);
        self.state.pending_pulses.retain(|p| p.channel != channel);
        let estimate = self.state.estimates[channel as usize - 1];
        if estimate > 0.0 || had_pulse {
            let deflate = grab.inflation_batch.inverted();
            out.events.push(
                EventRecord::new(now, EventKind::DeflateStart)
                    .object(grab.object)
                    .channel(channel)
                    .detail(format!("{} {}", BatchCause::Release.as_str(), deflate.encode())),
            );
            self.send_batch(deflate, out);
            // Draining past empty is harmless and guarantees an empty inflatable.
            let duration = estimate * self.config.full_deflate_time + self.config.control_period;
            self.state.pending_pulses.push(Pulse {
                channel,
                end_time: now + duration,
                kind: PulseKind::Deflate,
            });
        }
        self.send_servo(grab.servo_channel, self.config.ready_angle, out);
        if self.state.pluck != PluckPhase::Idle {
            self.state.pluck = PluckPhase::Idle;
        }
    }

    /// Timed pulse from the current estimate to `level`.
    fn retarget(&mut self, level: f64, cause: BatchCause, now: f64, out: &mut UpdateOutput) {
        let grab = self.state.grabbed.as_mut().expect("retarget requires a grab");
        grab.level = Some(level);
        let (object, channel) = (grab.object, grab.inflatable_channel);
        let inflate = grab.inflation_batch.clone();
        let estimate = self.state.estimates[channel as usize - 1];
        self.state.pending_pulses.retain(|p| p.channel != channel);

        let delta = level - estimate;
        let (batch, kind, duration, event) = if delta > 0.0 {
            (
                inflate,
                PulseKind::Inflate,
                delta * self.config.full_inflate_time,
                EventKind::InflateStart,
            )
        } else if delta < 0.0 {
            (
                inflate.inverted(),
                PulseKind::Deflate,
                -delta * self.config.full_deflate_time,
                EventKind::DeflateStart,
            )
        } else {
            return;
        };
        out.events.push(
            EventRecord::new(now, event)
                .object(object)
                .channel(channel)
                .detail(format!("{} {}", cause.as_str(), batch.encode())),
        );
        self.send_batch(batch, out);
        self.state.pending_pulses.push(Pulse {
            channel,
            end_time: now + duration,
            kind,
        });
    }

    fn track_squeeze(
        &mut self,
        obj: &VirtualObject,
        hand: &HandPose,
        cause: BatchCause,
        now: f64,
        out: &mut UpdateOutput,
    ) {
        let InflationMode::Squeeze {
            open_distance,
            closed_distance,
        } = obj.mode
        else {
            return;
        };
        let grab = self.state.grabbed.as_ref().expect("tracking requires a grab");
        let channel = grab.inflatable_channel;
        let estimate = self.state.estimates[channel as usize - 1];
        let target = squeeze_target(hand.index_tip_knuckle_distance, open_distance, closed_distance);
        // At the ends of the range run into the clamp instead of stopping short.
        let at_bound = target <= 0.0 || target >= 1.0;
        let deadband = if at_bound { 0.0 } else { self.config.deadband };
        // Once moving, keep going until within half a control period of the
        // target rather than stopping at the deadband edge.
        let settle = |full_time: f64| {
            if at_bound {
                0.0
            } else {
                0.5 * self.config.control_period / full_time
            }
        };
        let intent = match grab.intent {
            Some(Intent::Inflate) if target - estimate > settle(self.config.full_inflate_time) => Intent::Inflate,
            Some(Intent::Deflate) if estimate - target > settle(self.config.full_deflate_time) => Intent::Deflate,
            _ => track_to_target(estimate, target, deadband),
        };
        if grab.intent == Some(intent) {
            return;
        }
        let (object, inflate) = (grab.object, grab.inflation_batch.clone());
        self.state.grabbed.as_mut().unwrap().intent = Some(intent);

        let ev = EventRecord::new(now, EventKind::Warning)
            .object(object)
            .channel(channel);
        match intent {
            Intent::Inflate => {
                let wire = inflate.encode();
                if self.send_batch(inflate, out) {
                    out.events.push(EventRecord {
                        kind: EventKind::InflateStart,
                        detail: format!("{} {wire}", cause.as_str()),
                        ..ev
                    });
                }
            }
            Intent::Deflate => {
                let deflate = inflate.inverted();
                let wire = deflate.encode();
                if self.send_batch(deflate, out) {
                    out.events.push(EventRecord {
                        kind: EventKind::DeflateStart,
                        detail: format!("{} {wire}", BatchCause::Track.as_str()),
                        ..ev
                    });
                }
            }
            Intent::Hold => {
                let was_inflating = self.state.pin_state_cache.get(self.manifold.inflate_pump_pin);
                let stop = self.pumps_off_batch();
                let wire = stop.encode();
                if self.send_batch(stop, out) && was_inflating {
                    out.events.push(EventRecord {
                        kind: EventKind::InflateStop,
                        detail: wire,
                        ..ev
                    });
                }
            }
        }
    }

    /// Sends `batch` unless every pin already holds the requested level.
    fn send_batch(&mut self, batch: BatchCommand, out: &mut UpdateOutput) -> bool {
        let cache = &mut self.state.pin_state_cache;
        if batch.entries().iter().all(|&(p, s)| cache.get(p) == s) {
            return false;
        }
        for &(p, s) in batch.entries() {
            cache.set(p, s);
        }
        self.state.last_batch = Some(batch.clone());
        out.commands.push(Command::Batch(batch));
        true
    }

    fn send_servo(&mut self, channel: u8, angle: u16, out: &mut UpdateOutput) {
        let slot = &mut self.state.servo_cache[channel as usize - 1];
        if *slot == Some(angle) {
            return;
        }
        *slot = Some(angle);
        let cmd = ServoCommand::new(self.servo_pin(channel), angle).expect("configured angles are in range");
        out.commands.push(Command::Servo(cmd));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn controller() -> Controller {
        Controller::new(ControllerConfig::default(), ManifoldTopology::default()).unwrap()
    }

    fn object(id: u32, x: f64, channel: u8, mode: InflationMode) -> VirtualObject {
        VirtualObject {
            id,
            interaction_name: format!("obj{id}"),
            position: [x, 0.0, 0.0],
            interaction_radius: 0.03,
            servo_channel: channel,
            inflatable_channel: channel,
            mode,
            pluckable: false,
        }
    }

    fn hand_at(x: f64) -> HandPose {
        HandPose {
            time: 0.0,
            position: [x, 0.0, 0.0],
            index_tip_knuckle_distance: 0.08,
            tracked: true,
        }
    }

    fn wires(out: &UpdateOutput) -> Vec<String> {
        out.commands.iter().map(Command::encode).collect()
    }

    fn kinds(out: &UpdateOutput) -> Vec<EventKind> {
        out.events.iter().map(|e| e.kind).collect()
    }

    #[test]
    fn empty_scene_is_silent() {
        let out = controller().update(&hand_at(0.0), &[], 0.0).unwrap();
        assert!(out.commands.is_empty() && out.events.is_empty());
    }

    #[test]
    fn grab_within_delta_distance() {
        let mut c = controller();
        // 0.5 cm beyond the surface
        let obj = object(1, 0.0, 1, InflationMode::Binary);
        let out = c.update(&hand_at(0.035), &[obj], 0.0).unwrap();
        assert_eq!(
            wires(&out),
            [
                "/setServo?pin=10&state=60",
                "/setBatch?pin=010203&state=100",
                "/setBatch?pin=040506&state=010",
            ]
        );
        assert_eq!(
            kinds(&out),
            [EventKind::ReadyEntered, EventKind::Grabbed, EventKind::InflateStart]
        );
        assert_eq!(c.grabbed(), Some(1));
    }

    #[test]
    fn outside_delta_distance_only_readies() {
        let mut c = controller();
        let obj = object(1, 0.0, 1, InflationMode::Binary);
        let out = c.update(&hand_at(0.045), &[obj], 0.0).unwrap();
        assert_eq!(wires(&out), ["/setServo?pin=10&state=0"]);
        assert_eq!(kinds(&out), [EventKind::ReadyEntered]);
        assert_eq!(c.grabbed(), None);
    }

    #[test]
    fn closer_object_wins() {
        let mut c = controller();
        let a = object(1, 0.0, 1, InflationMode::Binary);
        let b = object(2, 0.06, 2, InflationMode::Binary);
        // hand 0.036 from A, 0.024 from B
        let out = c.update(&hand_at(0.036), &[a, b], 0.0).unwrap();
        assert_eq!(c.grabbed(), Some(2));
        assert!(wires(&out).contains(&"/setServo?pin=10&state=0".to_string()));
        assert!(wires(&out).contains(&"/setServo?pin=11&state=60".to_string()));
        assert_eq!(c.state().ready_objects[0].iter().copied().collect::<Vec<_>>(), [1]);
    }

    #[test]
    fn equal_distances_go_to_lowest_id() {
        let mut c = controller();
        let a = object(7, -0.03, 1, InflationMode::Binary);
        let b = object(3, 0.03, 2, InflationMode::Binary);
        c.update(&hand_at(0.0), &[a, b], 0.0).unwrap();
        assert_eq!(c.grabbed(), Some(3));
    }

    #[test]
    fn withdrawal_inverts_the_inflation_batch() {
        let mut c = controller();
        let obj = object(1, 0.0, 1, InflationMode::Binary);
        c.update(&hand_at(0.03), std::slice::from_ref(&obj), 0.0).unwrap();
        let out = c.update(&hand_at(0.5), &[obj], 0.05).unwrap();
        assert_eq!(
            wires(&out),
            ["/setBatch?pin=040506&state=101", "/setServo?pin=10&state=0"]
        );
        assert_eq!(kinds(&out), [EventKind::Released, EventKind::DeflateStart]);
        assert_eq!(c.grabbed(), None);
    }

    #[test]
    fn binary_mode_stops_pump_at_full_estimate() {
        let mut c = controller();
        let obj = object(1, 0.0, 1, InflationMode::Binary);
        let objs = [obj];
        c.update(&hand_at(0.03), &objs, 0.0).unwrap();
        let mut stop_time = None;
        for i in 1..=30 {
            let now = i as f64 * 0.01;
            let out = c.update(&hand_at(0.03), &objs, now).unwrap();
            if wires(&out) == ["/setBatch?pin=0506&state=00"] {
                stop_time = Some(now);
                assert_eq!(kinds(&out), [EventKind::InflateStop, EventKind::PulseEnd]);
            }
        }
        assert!((stop_time.unwrap() - 0.2).abs() < 1e-9);
        assert_eq!(c.state().estimates[0], 1.0);
    }

    #[test]
    fn unchanged_intent_emits_nothing() {
        let mut c = controller();
        let objs = [object(1, 0.0, 1, InflationMode::Binary)];
        c.update(&hand_at(0.03), &objs, 0.0).unwrap();
        for i in 1..=50 {
            let now = 0.3 + i as f64 * 0.01;
            let out = c.update(&hand_at(0.03), &objs, now).unwrap();
            if i > 1 {
                assert!(out.commands.is_empty(), "traffic at {now}");
            }
        }
    }

    #[test]
    fn variable_inflation_plans() {
        let c = controller();
        let (batch, end) = c.plan_variable_inflation(1, 1.0, 2.0).unwrap().unwrap();
        assert_eq!(batch.encode(), "/setBatch?pin=040506&state=010");
        assert!((end - 2.2).abs() < 1e-12);
        let (_, end) = c.plan_variable_inflation(1, 0.5, 0.0).unwrap().unwrap();
        assert!((end - 0.1).abs() < 1e-12);
        assert_eq!(c.plan_variable_inflation(1, 0.0, 0.0).unwrap(), None);
        assert_eq!(
            c.plan_variable_inflation(1, 1.5, 0.0),
            Err(ControllerError::LevelOutOfRange(1.5))
        );
    }

    #[test]
    fn variable_level_zero_sends_no_pump_batch() {
        let mut c = controller();
        let objs = [object(1, 0.0, 1, InflationMode::Variable { level: 0.0 })];
        let out = c.update(&hand_at(0.03), &objs, 0.0).unwrap();
        assert!(!kinds(&out).contains(&EventKind::InflateStart));
        let out = c.update(&hand_at(0.5), &objs, 0.5).unwrap();
        assert_eq!(wires(&out), ["/setServo?pin=10&state=0"]);
    }

    #[test]
    fn squeeze_target_examples() {
        assert_eq!(squeeze_target(0.08, 0.08, 0.04), 1.0);
        assert_eq!(squeeze_target(0.04, 0.08, 0.04), 0.0);
        // curl 0.25
        assert!((squeeze_target(0.07, 0.08, 0.04) - 0.75).abs() < 1e-12);
        assert_eq!(squeeze_target(0.2, 0.08, 0.04), 1.0);
        assert_eq!(squeeze_target(0.0, 0.08, 0.04), 0.0);
    }

    #[test]
    fn tracking_decisions() {
        assert_eq!(track_to_target(0.2, 0.8, 0.05), Intent::Inflate);
        assert_eq!(track_to_target(0.8, 0.2, 0.05), Intent::Deflate);
        assert_eq!(track_to_target(0.5, 0.5, 0.05), Intent::Hold);
        assert_eq!(track_to_target(0.5, 0.54, 0.05), Intent::Hold);
    }

    #[test]
    fn pluck_nudge_clamps() {
        let cfg = ControllerConfig::default();
        assert_eq!(pluck_nudge(PinId::new_const(10), &cfg).angle(), 62);
        let cfg = ControllerConfig {
            grasp_angle: 180,
            ..Default::default()
        };
        assert_eq!(pluck_nudge(PinId::new_const(10), &cfg).angle(), 180);
    }

    #[test]
    fn pluck_nudges_then_returns() {
        let mut c = controller();
        let mut obj = object(1, 0.0, 1, InflationMode::Binary);
        obj.pluckable = true;
        let objs = [obj];
        c.update(&hand_at(0.03), &objs, 0.0).unwrap();
        c.request_pluck();
        let out = c.update(&hand_at(0.03), &objs, 0.01).unwrap();
        assert_eq!(wires(&out), ["/setServo?pin=10&state=62"]);
        let out = c.update(&hand_at(0.03), &objs, 0.02).unwrap();
        assert_eq!(wires(&out), ["/setServo?pin=10&state=60"]);
    }

    #[test]
    fn pluck_without_grab_is_ignored() {
        let mut c = controller();
        let mut obj = object(1, 0.0, 1, InflationMode::Binary);
        obj.pluckable = true;
        let objs = [obj];
        c.request_pluck();
        let out = c.update(&hand_at(0.5), &objs, 0.0).unwrap();
        assert!(out.commands.is_empty());
        let out = c.update(&hand_at(0.03), &objs, 0.01).unwrap();
        assert!(!wires(&out).contains(&"/setServo?pin=10&state=62".to_string()));
    }

    #[test]
    fn lost_tracking_freezes_outputs() {
        let mut c = controller();
        let objs = [object(1, 0.0, 1, InflationMode::Binary)];
        c.update(&hand_at(0.03), &objs, 0.0).unwrap();
        let mut lost = hand_at(1.0);
        lost.tracked = false;
        let out = c.update(&lost, &objs, 0.05).unwrap();
        assert!(out.commands.is_empty());
        assert_eq!(c.grabbed(), Some(1));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let objs = [
            object(1, 0.0, 1, InflationMode::Binary),
            object(1, 0.5, 2, InflationMode::Binary),
        ];
        assert_eq!(
            controller().update(&hand_at(0.0), &objs, 0.0),
            Err(ControllerError::DuplicateObjectId(1))
        );
    }

    #[test]
    fn alternate_topology_still_inverts_cleanly() {
        use crate::pneumodel::{Valve, ValveRole};
        let gate = |pin, inflatables: Vec<u8>, direction| Valve {
            pin: PinId::new_const(pin),
            role: ValveRole::Gate { inflatables, direction },
        };
        let manifold = ManifoldTopology {
            valves: vec![
                gate(1, vec![1], GateDirection::Inflate),
                gate(2, vec![2], GateDirection::Inflate),
                gate(3, vec![3], GateDirection::Inflate),
                gate(4, vec![1, 2, 3], GateDirection::Deflate),
            ],
            ..Default::default()
        };
        let c = Controller::new(ControllerConfig::default(), manifold.clone()).unwrap();
        assert_eq!(c.routing_batch(2), None);
        let inflate = c.inflation_batch(2);
        assert_eq!(inflate.encode(), "/setBatch?pin=02040506&state=1010");

        let mut pins = PinLevels::default();
        for &(p, s) in inflate.entries() {
            pins.set(p, s);
        }
        assert!(manifold.paths(&pins)[1].inflate_open);
        for &(p, s) in inflate.inverted().entries() {
            pins.set(p, s);
        }
        assert!(manifold.paths(&pins)[1].deflate_open);
    }

    /// Brute-force reference for arbitration, written independently of `update`.
    fn brute_force_grab(hand: [f64; 3], objects: &[VirtualObject], delta: f64) -> Option<u32> {
        let mut best: Option<(f64, u32)> = None;
        for o in objects {
            let dx = o.position[0] - hand[0];
            let dy = o.position[1] - hand[1];
            let dz = o.position[2] - hand[2];
            let d = (dx * dx + dy * dy + dz * dz).sqrt();
            if d > o.interaction_radius + delta {
                continue;
            }
            best = match best {
                Some((bd, bid)) if bd < d || (bd == d && bid < o.id) => Some((bd, bid)),
                _ => Some((d, o.id)),
            };
        }
        best.map(|(_, id)| id)
    }

    fn arb_scene() -> impl Strategy<Value = (Vec<VirtualObject>, Vec<[f64; 3]>)> {
        let obj = (0u32..1000, prop::array::uniform3(-0.2f64..0.2), 0.01f64..0.06, 1u8..=3);
        (
            prop::collection::vec(obj, 0..6),
            prop::collection::vec(prop::array::uniform3(-0.25f64..0.25), 1..8),
        )
            .prop_map(|(raw, hands)| {
                let mut seen = BTreeSet::new();
                let objs = raw
                    .into_iter()
                    .filter(|(id, ..)| seen.insert(*id))
                    .map(|(id, pos, r, ch)| VirtualObject {
                        id,
                        interaction_name: String::new(),
                        position: pos,
                        interaction_radius: r,
                        servo_channel: ch,
                        inflatable_channel: ch,
                        mode: InflationMode::Binary,
                        pluckable: false,
                    })
                    .collect();
                (objs, hands)
            })
    }

    proptest! {
        #[test]
        fn arbitration_matches_brute_force((objects, hands) in arb_scene()) {
            let mut c = controller();
            for (i, h) in hands.iter().enumerate() {
                let hand = HandPose { position: *h, ..hand_at(0.0) };
                c.update(&hand, &objects, i as f64 * 0.01).unwrap();
                prop_assert_eq!(c.grabbed(), brute_force_grab(*h, &objects, 0.01));
            }
        }

        #[test]
        fn updates_are_deterministic((objects, hands) in arb_scene()) {
            let mut c = controller();
            for (i, h) in hands.iter().enumerate() {
                let hand = HandPose { position: *h, ..hand_at(0.0) };
                let mut twin = c.clone();
                let a = c.update(&hand, &objects, i as f64 * 0.01).unwrap();
                let b = twin.update(&hand, &objects, i as f64 * 0.01).unwrap();
                prop_assert_eq!(a, b);
                prop_assert_eq!(&c, &twin);
            }
        }

        #[test]
        fn squeeze_target_is_monotone(open in 0.05f64..0.12, span in 0.005f64..0.04, a in 0.0f64..0.15, b in 0.0f64..0.15) {
            let closed = open - span;
            let (near, far) = if a < b { (a, b) } else { (b, a) };
            // smaller distance = more curl = lower target
            prop_assert!(squeeze_target(near, open, closed) <= squeeze_target(far, open, closed));
            if near > closed && far < open && near < far {
                prop_assert!(squeeze_target(near, open, closed) < squeeze_target(far, open, closed));
            }
        }
    }
}
