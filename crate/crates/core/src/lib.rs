//! Software twin of a wrist-worn pneumatic haptic device: its HTTP command
//! protocol, a physics emulator of the pumps, valves, servos and
//! inflatables, and the host-side controller that delivers inflatable
//! proxies into a tracked hand.

pub mod config;
pub mod controller;
pub mod firmware;
pub mod harness;
pub mod pneumodel;
pub mod protocol;
pub mod scenesim;
pub mod telemetry;

pub use config::{Config, ConfigError, FirmwareSettings};
pub use controller::{Controller, ControllerConfig, HandPose, InflationMode, VirtualObject};
pub use firmware::{ClockMode, DeviceLink, DeviceSnapshot, Emulator, FirmwareHandle, HttpLink, LinkError, LocalLink};
pub use harness::{LatencyStats, Transport, VerifyReport};
pub use pneumodel::{DeviceState, ManifoldTopology, PneumaticConfig};
pub use protocol::{BatchCommand, Command, PinId, ProtocolError, ServoCommand};
pub use scenesim::{run_scenario, Scenario, ScenarioRun, SceneError};
pub use telemetry::{EventKind, EventRecord, TelemetrySample};
