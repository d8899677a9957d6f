//! Fixed-timestep model of the actuation hardware: two pumps, four valves,
//! three servo arms and three inflatables.
//!
//! All dynamics are linear ramps, so explicit Euler is exact between clamps.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{BatchCommand, PinId, ServoCommand};

pub const CHANNELS: usize = 3;
pub const VALVES: usize = 4;
pub const MAX_DT: f64 = 0.01;
pub const DEFAULT_DT: f64 = 0.005;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PhysicsError {
    #[error("timestep {0} s outside (0, 0.01]")]
    InvalidTimestep(f64),
    #[error("pin {0} is not wired to a servo")]
    UnknownServoPin(PinId),
    #[error("fill {0} outside [0, 1]")]
    OutOfRangeFill(f64),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TopologyError {
    #[error("expected exactly 4 valves, got {0}")]
    ValveCount(usize),
    #[error("more than one selector valve")]
    MultipleSelectors,
    #[error("inflatable {0} is not a valid channel (1..=3)")]
    BadChannel(u8),
    #[error("inflatable {channel} cannot be reached by the {pump} pump")]
    Unreachable { channel: u8, pump: &'static str },
    #[error("pin {0} is assigned to more than one device")]
    PinConflict(PinId),
    #[error("{0} must be positive")]
    NonPositive(&'static str),
}

/// Which pump flows a gate valve admits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateDirection {
    #[default]
    Both,
    Inflate,
    Deflate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "role", rename_all = "snake_case")]
pub enum ValveRole {
    /// Opens the path between the shared manifold and the listed inflatables.
    Gate {
        inflatables: Vec<u8>,
        #[serde(default)]
        direction: GateDirection,
    },
    /// Off connects the inflate pump to the manifold, on connects the deflate pump.
    Selector,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Valve {
    pub pin: PinId,
    #[serde(flatten)]
    pub role: ValveRole,
}

/// Routing of the two pumps through four valves to three inflatables.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifoldTopology {
    pub inflate_pump_pin: PinId,
    pub deflate_pump_pin: PinId,
    pub servo_pins: [PinId; CHANNELS],
    pub valves: Vec<Valve>,
}

impl Default for ManifoldTopology {
    /// Valves 01-03 gate inflatables 1-3, valve 04 selects the pump,
    /// pumps on 05 (inflate) and 06 (deflate), servos on 10-12.
    fn default() -> Self {
        let gate = |pin, channel| Valve {
            pin: PinId::new_const(pin),
            role: ValveRole::Gate {
                inflatables: vec![channel],
                direction: GateDirection::Both,
            },
        };
        ManifoldTopology {
            inflate_pump_pin: PinId::new_const(5),
            deflate_pump_pin: PinId::new_const(6),
            servo_pins: [PinId::new_const(10), PinId::new_const(11), PinId::new_const(12)],
            valves: vec![
                gate(1, 1),
                gate(2, 2),
                gate(3, 3),
                Valve {
                    pin: PinId::new_const(4),
                    role: ValveRole::Selector,
                },
            ],
        }
    }
}

/// Which pumps can currently move air in or out of one inflatable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PathState {
    pub inflate_open: bool,
    pub deflate_open: bool,
}

impl ManifoldTopology {
    pub fn validate(&self) -> Result<(), TopologyError> {
        if self.valves.len() != VALVES {
            return Err(TopologyError::ValveCount(self.valves.len()));
        }
        let selectors = self.valves.iter().filter(|v| v.role == ValveRole::Selector).count();
        if selectors > 1 {
            return Err(TopologyError::MultipleSelectors);
        }

        let mut seen = [false; 100];
        let pins = self
            .valves
            .iter()
            .map(|v| v.pin)
            .chain([self.inflate_pump_pin, self.deflate_pump_pin])
            .chain(self.servo_pins);
        for pin in pins {
            let slot = &mut seen[pin.value() as usize];
            if *slot {
                return Err(TopologyError::PinConflict(pin));
            }
            *slot = true;
        }

        for valve in &self.valves {
            if let ValveRole::Gate { inflatables, .. } = &valve.role {
                if let Some(&bad) = inflatables.iter().find(|&&c| !(1..=3).contains(&c)) {
                    return Err(TopologyError::BadChannel(bad));
                }
            }
        }
        for channel in 1..=CHANNELS as u8 {
            if self.gates(channel, GateDirection::Inflate).next().is_none() {
                return Err(TopologyError::Unreachable {
                    channel,
                    pump: "inflate",
                });
            }
            if self.gates(channel, GateDirection::Deflate).next().is_none() {
                return Err(TopologyError::Unreachable {
                    channel,
                    pump: "deflate",
                });
            }
        }
        Ok(())
    }

    pub fn selector_pin(&self) -> Option<PinId> {
        self.valves
            .iter()
            .find(|v| v.role == ValveRole::Selector)
            .map(|v| v.pin)
    }

    /// Gate valves that must be open for `flow` to reach `channel` (1-based).
    pub fn gates(&self, channel: u8, flow: GateDirection) -> impl Iterator<Item = PinId> + '_ {
        self.valves.iter().filter_map(move |v| match &v.role {
            ValveRole::Gate { inflatables, direction }
                if inflatables.contains(&channel) && (*direction == GateDirection::Both || *direction == flow) =>
            {
                Some(v.pin)
            }
            _ => None,
        })
    }

    /// Gate pins in valve order, deduplicated.
    pub fn gate_pins(&self) -> Vec<PinId> {
        self.valves
            .iter()
            .filter(|v| matches!(v.role, ValveRole::Gate { .. }))
            .map(|v| v.pin)
            .collect()
    }

    /// Pump/selector routing for every inflatable given the current pin levels.
    pub fn paths(&self, pins: &PinLevels) -> [PathState; CHANNELS] {
        let (inflate_connected, deflate_connected) = match self.selector_pin() {
            Some(sel) => (!pins.get(sel), pins.get(sel)),
            None => (true, true),
        };
        let all_open = |channel, flow| {
            let mut gates = self.gates(channel, flow).peekable();
            gates.peek().is_some() && gates.all(|p| pins.get(p))
        };
        std::array::from_fn(|i| {
            let channel = i as u8 + 1;
            PathState {
                inflate_open: inflate_connected && all_open(channel, GateDirection::Inflate),
                deflate_open: deflate_connected && all_open(channel, GateDirection::Deflate),
            }
        })
    }

    pub fn servo_channel(&self, pin: PinId) -> Option<usize> {
        self.servo_pins.iter().position(|&p| p == pin)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PneumaticConfig {
    /// Liters per minute, per pump.
    pub pump_flow_rate: f64,
    /// Liters, per inflatable.
    pub inflatable_volume: f64,
    /// Seconds from full to empty with the deflate path open.
    pub deflate_full_time: f64,
    /// Kilopascals. Recorded only.
    pub pump_stall_pressure: f64,
    /// PSI at fill 1.0.
    pub max_pressure: f64,
    /// Degrees per second.
    pub servo_angular_rate: f64,
    /// Servo angle at power-on, degrees.
    pub initial_servo_angle: f64,
    pub manifold: ManifoldTopology,
}

impl Default for PneumaticConfig {
    fn default() -> Self {
        PneumaticConfig {
            pump_flow_rate: 2.5,
            inflatable_volume: 0.008334,
            deflate_full_time: 1.0,
            pump_stall_pressure: -55.0,
            max_pressure: 16.0,
            servo_angular_rate: 60.0 / 0.9,
            initial_servo_angle: 0.0,
            manifold: ManifoldTopology::default(),
        }
    }
}

impl PneumaticConfig {
    pub fn validate(&self) -> Result<(), TopologyError> {
        let positive = [
            (self.pump_flow_rate, "pump_flow_rate"),
            (self.inflatable_volume, "inflatable_volume"),
            (self.deflate_full_time, "deflate_full_time"),
            (self.max_pressure, "max_pressure"),
            (self.servo_angular_rate, "servo_angular_rate"),
        ];
        for (value, name) in positive {
            if !(value > 0.0 && value.is_finite()) {
                return Err(TopologyError::NonPositive(name));
            }
        }
        if !(0.0..=180.0).contains(&self.initial_servo_angle) {
            return Err(TopologyError::NonPositive("initial_servo_angle"));
        }
        self.manifold.validate()
    }

    /// Fill fraction gained per second with the inflate path open.
    pub fn inflate_rate(&self) -> f64 {
        self.pump_flow_rate / 60.0 / self.inflatable_volume
    }

    /// Fill fraction lost per second with the deflate path open.
    pub fn deflate_rate(&self) -> f64 {
        1.0 / self.deflate_full_time
    }

    /// Seconds from empty to full.
    pub fn full_inflate_time(&self) -> f64 {
        self.inflatable_volume / (self.pump_flow_rate / 60.0)
    }

    /// Linear map from fill to PSI.
    pub fn pressure_of(&self, fill: f64) -> Result<f64, PhysicsError> {
        if !(0.0..=1.0).contains(&fill) {
            return Err(PhysicsError::OutOfRangeFill(fill));
        }
        Ok(self.max_pressure * fill)
    }
}

/// Digital output levels of all 100 pins.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PinLevels {
    level: [bool; 100],
    written: [bool; 100],
}

impl Default for PinLevels {
    fn default() -> Self {
        PinLevels {
            level: [false; 100],
            written: [false; 100],
        }
    }
}

impl PinLevels {
    pub fn get(&self, pin: PinId) -> bool {
        self.level[pin.value() as usize]
    }

    pub fn set(&mut self, pin: PinId, on: bool) {
        self.level[pin.value() as usize] = on;
        self.written[pin.value() as usize] = true;
    }

    /// Pins written at least once, ascending.
    pub fn written(&self) -> impl Iterator<Item = (PinId, bool)> + '_ {
        (0..100u8)
            .filter(|&i| self.written[i as usize])
            .map(|i| (PinId::new_const(i), self.level[i as usize]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ServoModel {
    pub angle: f64,
    pub target: f64,
}

impl ServoModel {
    /// Moves toward the target by at most `max_delta`; true on the step it arrives.
    fn advance(&mut self, max_delta: f64) -> bool {
        let delta = self.target - self.angle;
        if delta == 0.0 {
            return false;
        }
        if delta.abs() <= max_delta {
            self.angle = self.target;
            true
        } else {
            self.angle = (self.angle + max_delta.copysign(delta)).clamp(0.0, 180.0);
            false
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct InflatableState {
    pub fill: f64,
    pub pressure: f64,
}

/// Something notable that happened during one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepEvent {
    /// Servo channel (0-based) reached its target.
    ServoArrived(usize),
    /// Inflate and deflate both active on one inflatable (0-based).
    ConflictingFlow(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceState {
    clock: f64,
    pins: PinLevels,
    servos: [ServoModel; CHANNELS],
    inflatables: [InflatableState; CHANNELS],
    config: PneumaticConfig,
}

impl DeviceState {
    pub fn new(config: PneumaticConfig) -> Result<Self, TopologyError> {
        config.validate()?;
        let servo = ServoModel {
            angle: config.initial_servo_angle,
            target: config.initial_servo_angle,
        };
        Ok(DeviceState {
            clock: 0.0,
            pins: PinLevels::default(),
            servos: [servo; CHANNELS],
            inflatables: [InflatableState::default(); CHANNELS],
            config,
        })
    }

    pub fn clock(&self) -> f64 {
        self.clock
    }

    pub fn pins(&self) -> &PinLevels {
        &self.pins
    }

    pub fn servos(&self) -> &[ServoModel; CHANNELS] {
        &self.servos
    }

    pub fn inflatables(&self) -> &[InflatableState; CHANNELS] {
        &self.inflatables
    }

    pub fn config(&self) -> &PneumaticConfig {
        &self.config
    }

    /// Test hook: start from an arbitrary fill.
    pub fn set_fill(&mut self, channel: usize, fill: f64) -> Result<(), PhysicsError> {
        let pressure = self.config.pressure_of(fill)?;
        self.inflatables[channel] = InflatableState { fill, pressure };
        Ok(())
    }

    pub fn paths(&self) -> [PathState; CHANNELS] {
        self.config.manifold.paths(&self.pins)
    }

    pub fn apply_batch(&mut self, cmd: &BatchCommand) {
        for &(pin, on) in cmd.entries() {
            self.pins.set(pin, on);
        }
    }

    pub fn apply_servo(&mut self, cmd: &ServoCommand) -> Result<(), PhysicsError> {
        let channel = self
            .config
            .manifold
            .servo_channel(cmd.pin())
            .ok_or(PhysicsError::UnknownServoPin(cmd.pin()))?;
        self.servos[channel].target = cmd.angle() as f64;
        Ok(())
    }

    pub fn step(&mut self, dt: f64) -> Result<Vec<StepEvent>, PhysicsError> {
        if !(dt > 0.0 && dt <= MAX_DT) {
            return Err(PhysicsError::InvalidTimestep(dt));
        }
        let mut events = Vec::new();
        let manifold = &self.config.manifold;
        let inflate_on = self.pins.get(manifold.inflate_pump_pin);
        let deflate_on = self.pins.get(manifold.deflate_pump_pin);
        let paths = manifold.paths(&self.pins);
        let (up, down) = (self.config.inflate_rate(), self.config.deflate_rate());

        for (i, (cell, path)) in self.inflatables.iter_mut().zip(paths).enumerate() {
            let inflating = inflate_on && path.inflate_open;
            let deflating = deflate_on && path.deflate_open;
            if inflating && deflating {
                events.push(StepEvent::ConflictingFlow(i));
            }
            let rate = if inflating { up } else { 0.0 } - if deflating { down } else { 0.0 };
            cell.fill = (cell.fill + rate * dt).clamp(0.0, 1.0);
            cell.pressure = self.config.max_pressure * cell.fill;
        }

        let max_delta = self.config.servo_angular_rate * dt;
        for (i, servo) in self.servos.iter_mut().enumerate() {
            if servo.advance(max_delta) {
                events.push(StepEvent::ServoArrived(i));
            }
        }

        self.clock += dt;
        Ok(events)
    }
}
