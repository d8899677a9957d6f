//! Scripted scenarios: object layouts, hand keyframes and timed actions,
//! played through the controller against a device link in lock-step.

mod builtin;

pub use builtin::{builtin, builtin_scenarios, BUILTIN_NAMES, SQUEEZE_PLATEAUS, SQUEEZE_RELEASE};

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{Controller, ControllerConfig, ControllerError, HandPose, InflationMode, VirtualObject};
use crate::firmware::{DeviceEvent, DeviceLink, DeviceSnapshot, LinkError};
use crate::pneumodel::ManifoldTopology;
use crate::protocol::Command;
use crate::telemetry::{EventKind, EventRecord, TelemetrySample};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("{0}")]
    EndpointUnreachable(LinkError),
    #[error("device refused a command: {0}")]
    Device(LinkError),
    #[error("invalid scenario: {0}")]
    ScenarioInvalid(String),
    #[error(transparent)]
    Controller(#[from] ControllerError),
}

impl From<LinkError> for SceneError {
    fn from(e: LinkError) -> Self {
        match e {
            LinkError::Unreachable(_) => SceneError::EndpointUnreachable(e),
            other => SceneError::Device(other),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum ActionKind {
    /// Pluck cue on the held object.
    Pluck,
    /// Change a variable-mode object's level (shape change).
    SetLevel { object: u32, level: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioAction {
    pub time: f64,
    #[serde(flatten)]
    pub kind: ActionKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectedEvent {
    /// Inclusive [start, end] in seconds.
    pub window: [f64; 2],
    pub event: EventKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object: Option<u32>,
}

impl ExpectedEvent {
    pub fn matches(&self, e: &EventRecord) -> bool {
        e.kind == self.event
            && (self.window[0]..=self.window[1]).contains(&e.time)
            && self.object.is_none_or(|id| e.object == Some(id))
    }
}

/// Scenario file schema (JSON).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub objects: Vec<VirtualObject>,
    /// Hand keyframes, sorted by time; interpolated linearly.
    pub trajectory: Vec<HandPose>,
    pub duration: f64,
    #[serde(default)]
    pub controller_config: ControllerConfig,
    #[serde(default)]
    pub actions: Vec<ScenarioAction>,
    #[serde(default)]
    pub expected_events: Vec<ExpectedEvent>,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, SceneError> {
        let s: Scenario = serde_json::from_str(text).map_err(|e| SceneError::ScenarioInvalid(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, SceneError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SceneError::ScenarioInvalid(format!("{}: {e}", path.display())))?;
        Scenario::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let invalid = |m: String| Err(SceneError::ScenarioInvalid(m));
        if !(self.duration >= 0.0 && self.duration.is_finite()) {
            return invalid(format!("duration {} must be a non-negative number", self.duration));
        }
        if self.trajectory.windows(2).any(|w| w[1].time < w[0].time) {
            return invalid("trajectory keyframes are not time-sorted".into());
        }
        if let Some(last) = self.trajectory.last() {
            if self.duration < last.time {
                return invalid(format!(
                    "duration {} ends before the last keyframe at {}",
                    self.duration, last.time
                ));
            }
        }
        if self
            .trajectory
            .iter()
            .any(|k| k.index_tip_knuckle_distance.is_nan() || k.index_tip_knuckle_distance < 0.0)
        {
            return invalid("fingertip distance must be non-negative".into());
        }
        let mut ids = BTreeSet::new();
        for o in &self.objects {
            if !ids.insert(o.id) {
                return Err(ControllerError::DuplicateObjectId(o.id).into());
            }
            o.validate()?;
        }
        self.controller_config.validate()?;
        for a in &self.actions {
            if let ActionKind::SetLevel { object, level } = a.kind {
                if !ids.contains(&object) {
                    return invalid(format!("action refers to unknown object {object}"));
                }
                if !(0.0..=1.0).contains(&level) {
                    return invalid(format!("level {level} outside [0, 1]"));
                }
            }
        }
        Ok(())
    }

    /// Hand pose at `t`, holding the first/last keyframe outside the script.
    pub fn hand_at(&self, t: f64) -> Option<HandPose> {
        interpolate(&self.trajectory, t)
    }
}

pub fn interpolate(keys: &[HandPose], t: f64) -> Option<HandPose> {
    let first = keys.first()?;
    let last = keys.last()?;
    if t <= first.time {
        return Some(HandPose { time: t, ..*first });
    }
    if t >= last.time {
        return Some(HandPose { time: t, ..*last });
    }
    let i = keys.partition_point(|k| k.time <= t);
    let (a, b) = (&keys[i - 1], &keys[i]);
    let span = b.time - a.time;
    let u = if span > 0.0 { (t - a.time) / span } else { 1.0 };
    let lerp = |x: f64, y: f64| x + (y - x) * u;
    Some(HandPose {
        time: t,
        position: std::array::from_fn(|j| lerp(a.position[j], b.position[j])),
        index_tip_knuckle_distance: lerp(a.index_tip_knuckle_distance, b.index_tip_knuckle_distance),
        tracked: a.tracked,
    })
}

/// Everything a scenario run produced.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScenarioRun {
    pub samples: Vec<TelemetrySample>,
    pub events: Vec<EventRecord>,
    /// Commands as sent, with the controller time they were issued at.
    pub commands: Vec<(f64, Command)>,
}

impl ScenarioRun {
    pub fn events_of(&self, kind: EventKind) -> impl Iterator<Item = &EventRecord> {
        self.events.iter().filter(move |e| e.kind == kind)
    }

    /// Expected events with no matching record.
    pub fn missed<'a>(&self, scenario: &'a Scenario) -> Vec<&'a ExpectedEvent> {
        scenario
            .expected_events
            .iter()
            .filter(|x| !self.events.iter().any(|e| x.matches(e)))
            .collect()
    }

    /// Last sample at or before `t`.
    pub fn sample_at(&self, t: f64) -> Option<&TelemetrySample> {
        let i = self.samples.partition_point(|s| s.time <= t + 1e-9);
        i.checked_sub(1).map(|i| &self.samples[i])
    }
}

fn sample_from(snapshot: DeviceSnapshot, events: Vec<EventRecord>) -> TelemetrySample {
    TelemetrySample {
        time: snapshot.clock,
        fills: snapshot.fills,
        pressures: snapshot.pressures,
        servo_angles: snapshot.servo_angles,
        servo_targets: snapshot.servo_targets,
        pins: snapshot
            .pins
            .iter()
            .filter_map(|(p, &v)| p.parse::<u8>().ok().map(|p| (p, v != 0)))
            .collect(),
        events,
    }
}

/// Plays `scenario` in lock-step: the controller runs every control period,
/// the device advances by `dt` per sample.
pub fn run_scenario(
    scenario: &Scenario,
    link: &mut dyn DeviceLink,
    manifold: &ManifoldTopology,
    dt: f64,
) -> Result<ScenarioRun, SceneError> {
    scenario.validate()?;
    if !(dt > 0.0 && dt <= crate::pneumodel::MAX_DT) {
        return Err(SceneError::ScenarioInvalid(format!("timestep {dt} outside (0, 0.01]")));
    }
    let period = scenario.controller_config.control_period;
    let ratio = period / dt;
    if ratio < 1.0 - 1e-9 || (ratio - ratio.round()).abs() > 1e-6 {
        return Err(SceneError::ScenarioInvalid(format!(
            "control period {period} s is not a whole multiple of dt {dt} s"
        )));
    }
    let control_every = ratio.round() as u64;
    let steps = (scenario.duration / dt - 1e-9).ceil().max(0.0) as u64;

    let mut controller = Controller::new(scenario.controller_config.clone(), manifold.clone())?;
    let mut objects = scenario.objects.clone();
    let mut actions = scenario.actions.clone();
    actions.sort_by(|a, b| a.time.total_cmp(&b.time));
    let mut next_action = 0;

    let mut run = ScenarioRun::default();
    for i in 0..steps {
        let t = i as f64 * dt;
        let mut step_events = Vec::new();

        while next_action < actions.len() && actions[next_action].time <= t + 1e-9 {
            match actions[next_action].kind {
                ActionKind::Pluck => controller.request_pluck(),
                ActionKind::SetLevel { object, level } => {
                    if let Some(o) = objects.iter_mut().find(|o| o.id == object) {
                        o.mode = InflationMode::Variable { level };
                    }
                }
            }
            next_action += 1;
        }

        if i % control_every == 0 {
            if let Some(hand) = scenario.hand_at(t) {
                let out = controller.update(&hand, &objects, t)?;
                for cmd in out.commands {
                    link.send(&cmd)?;
                    run.commands.push((t, cmd));
                }
                step_events.extend(out.events);
            }
        }

        let reply = link.step(dt)?;
        let time = reply.telemetry.clock;
        for ev in reply.events {
            step_events.push(match ev {
                DeviceEvent::ServoArrived(ch) => EventRecord::new(time, EventKind::ServoArrived).channel(ch),
                DeviceEvent::ConflictingFlow(ch) => EventRecord::new(time, EventKind::Warning)
                    .channel(ch)
                    .detail("inflate and deflate flow at once"),
            });
        }
        run.events.extend(step_events.iter().cloned());
        run.samples.push(sample_from(reply.telemetry, step_events));
    }
    Ok(run)
}
