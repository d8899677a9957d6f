//! Built-in scenarios reconstructing the study minigames. Table layouts and
//! object spacing are plausible reconstructions, not measured values.

use crate::controller::{ControllerConfig, HandPose, InflationMode, VirtualObject};
use crate::telemetry::EventKind;

use super::{ActionKind, ExpectedEvent, Scenario, ScenarioAction};

pub const BUILTIN_NAMES: [&str; 6] = [
    "variable-stiffness",
    "squeeze",
    "sorting",
    "overhand-throw",
    "underhand-throw",
    "magic-garden",
];

/// Open and closed fingertip-to-knuckle distances, meters.
const OPEN_HAND: f64 = 0.08;
const CLOSED_HAND: f64 = 0.04;

/// Hand height above an object while reaching for it.
const HOVER: f64 = 0.25;
/// Hand offset from an object's center while holding it: 5 mm past a 4 cm surface.
const HOLD: f64 = 0.045;

pub fn builtin_scenarios() -> Vec<Scenario> {
    BUILTIN_NAMES.iter().map(|n| builtin(n).expect("listed name")).collect()
}

pub fn builtin(name: &str) -> Option<Scenario> {
    Some(match name {
        "variable-stiffness" => variable_stiffness(),
        "squeeze" => squeeze(),
        "sorting" => sorting(),
        "overhand-throw" => throw("overhand-throw", [0.0, 0.6, 0.8]),
        "underhand-throw" => throw("underhand-throw", [0.0, 0.9, -0.4]),
        "magic-garden" => magic_garden(),
        _ => return None,
    })
}

fn object(id: u32, name: &str, position: [f64; 3], channel: u8, mode: InflationMode) -> VirtualObject {
    VirtualObject {
        id,
        interaction_name: name.to_string(),
        position,
        interaction_radius: 0.04,
        servo_channel: channel,
        inflatable_channel: channel,
        mode,
        pluckable: false,
    }
}

fn key(time: f64, position: [f64; 3], tip_knuckle: f64) -> HandPose {
    HandPose {
        time,
        position,
        index_tip_knuckle_distance: tip_knuckle,
        tracked: true,
    }
}

fn above(p: [f64; 3], dz: f64) -> [f64; 3] {
    [p[0], p[1], p[2] + dz]
}

fn expect(event: EventKind, object: Option<u32>, from: f64, to: f64) -> ExpectedEvent {
    ExpectedEvent {
        window: [from, to],
        event,
        object,
    }
}

/// Keyframes for one reach: hover at `start`, descend over 0.6 s, hold until
/// `release`, rise back over 0.4 s. The grab fires ~0.585 s after `start`
/// and the release ~0.01 s after `release`.
fn reach(keys: &mut Vec<HandPose>, target: [f64; 3], start: f64, release: f64) {
    keys.push(key(start, above(target, HOVER), OPEN_HAND));
    keys.push(key(start + 0.6, above(target, HOLD), OPEN_HAND));
    keys.push(key(release, above(target, HOLD), OPEN_HAND));
    keys.push(key(release + 0.4, above(target, HOVER), OPEN_HAND));
}

fn reach_expectations(id: u32, start: f64, release: f64) -> [ExpectedEvent; 4] {
    [
        expect(EventKind::ReadyEntered, Some(id), start, start + 0.6),
        expect(EventKind::Grabbed, Some(id), start + 0.5, start + 0.65),
        expect(EventKind::InflateStart, Some(id), start + 0.5, start + 0.65),
        expect(EventKind::Released, Some(id), release, release + 0.1),
    ]
}

/// Four identical spheres at levels 1.0, 0.5, 0.1 and 0.0 (16/8/1.6/0 PSI),
/// reached for one after another.
fn variable_stiffness() -> Scenario {
    let levels = [1.0, 0.5, 0.1, 0.0];
    let mut objects = Vec::new();
    let mut trajectory = Vec::new();
    let mut expected_events = Vec::new();
    for (i, &level) in levels.iter().enumerate() {
        let id = i as u32 + 1;
        let center = [-0.225 + 0.15 * i as f64, 0.3, 0.0];
        objects.push(object(
            id,
            &format!("sphere-{level}"),
            center,
            (i % 3) as u8 + 1,
            InflationMode::Variable { level },
        ));
        let start = 0.5 + 3.5 * i as f64;
        reach(&mut trajectory, center, start, start + 2.2);
        expected_events.extend(reach_expectations(id, start, start + 2.2));
    }
    // level 0 never inflates
    expected_events.retain(|e| !(e.event == EventKind::InflateStart && e.object == Some(4)));
    Scenario {
        name: "variable-stiffness".into(),
        description: "Four spheres at inflation levels 1.0, 0.5, 0.1 and 0.0, grabbed in turn".into(),
        objects,
        trajectory,
        duration: 15.0,
        controller_config: ControllerConfig::default(),
        actions: vec![],
        expected_events,
    }
}

/// Hold one ball and curl the index finger through a series of plateaus.
/// Each `(time, curl)` entry starts a plateau that lasts until the next.
pub const SQUEEZE_PLATEAUS: [(f64, f64); 7] = [
    (1.0, 0.0),
    (2.5, 0.25),
    (4.5, 0.5),
    (6.5, 0.0),
    (8.5, 1.0),
    (10.5, 0.32),
    (12.5, 0.0),
];

/// When the hand lets go of the squeeze ball.
pub const SQUEEZE_RELEASE: f64 = 14.5;

/// Seconds taken to move the finger between plateaus.
const CURL_RAMP: f64 = 0.02;

fn squeeze() -> Scenario {
    let center = [0.0, 0.3, 0.0];
    let hold = above(center, HOLD);
    let tip = |curl: f64| OPEN_HAND - curl * (OPEN_HAND - CLOSED_HAND);
    let mut trajectory = vec![key(0.0, above(center, 0.5), OPEN_HAND), key(1.0, hold, OPEN_HAND)];
    let mut curl = 0.0;
    for &(t, next) in &SQUEEZE_PLATEAUS[1..] {
        trajectory.push(key(t, hold, tip(curl)));
        trajectory.push(key(t + CURL_RAMP, hold, tip(next)));
        curl = next;
    }
    trajectory.push(key(SQUEEZE_RELEASE, hold, tip(curl)));
    trajectory.push(key(SQUEEZE_RELEASE + 0.5, above(center, 0.5), OPEN_HAND));

    Scenario {
        name: "squeeze".into(),
        description: "Ball whose inflation follows finger curl: open hand full, closed hand empty".into(),
        objects: vec![object(
            1,
            "squeeze-ball",
            center,
            1,
            InflationMode::Squeeze {
                open_distance: OPEN_HAND,
                closed_distance: CLOSED_HAND,
            },
        )],
        trajectory,
        duration: 16.5,
        controller_config: ControllerConfig::default(),
        actions: vec![],
        expected_events: vec![
            expect(EventKind::Grabbed, Some(1), 0.9, 1.0),
            expect(EventKind::InflateStart, Some(1), 0.9, 1.0),
            expect(EventKind::DeflateStart, Some(1), 2.5, 2.6),
            expect(EventKind::InflateStart, Some(1), 6.5, 6.6),
            expect(EventKind::DeflateStart, Some(1), 8.5, 8.6),
            expect(EventKind::Released, Some(1), SQUEEZE_RELEASE, SQUEEZE_RELEASE + 0.1),
        ],
    }
}

/// Cube, sphere and rod on their own channels, picked up one at a time.
fn sorting() -> Scenario {
    let shapes = [("cube", -0.15), ("sphere", 0.0), ("rod", 0.15)];
    let mut objects = Vec::new();
    let mut trajectory = Vec::new();
    let mut expected_events = Vec::new();
    for (i, &(name, x)) in shapes.iter().enumerate() {
        let id = i as u32 + 1;
        let center = [x, 0.3, 0.0];
        objects.push(object(id, name, center, i as u8 + 1, InflationMode::Binary));
        let start = 0.5 + 3.0 * i as f64;
        reach(&mut trajectory, center, start, start + 1.8);
        expected_events.extend(reach_expectations(id, start, start + 1.8));
    }
    Scenario {
        name: "sorting".into(),
        description: "Three shapes on three channels, grabbed and put down in sequence".into(),
        objects,
        trajectory,
        duration: 10.0,
        controller_config: ControllerConfig::default(),
        actions: vec![],
        expected_events,
    }
}

/// Grab a ball, hold it, then accelerate away along `direction`.
fn throw(name: &str, direction: [f64; 3]) -> Scenario {
    let center = [0.0, 0.3, 0.0];
    let norm = direction.iter().map(|d| d * d).sum::<f64>().sqrt();
    let along = |dist: f64| {
        let h = above(center, HOLD);
        std::array::from_fn(|i| h[i] + direction[i] / norm * dist)
    };
    let mut trajectory = Vec::new();
    reach(&mut trajectory, center, 0.5, 2.5);
    trajectory.truncate(3);
    // Distance grows with the square of time: constant acceleration.
    for (dt, dist) in [
        (0.05, 0.004),
        (0.1, 0.016),
        (0.15, 0.036),
        (0.2, 0.064),
        (0.3, 0.144),
        (0.4, 0.256),
    ] {
        trajectory.push(key(2.5 + dt, along(dist), OPEN_HAND));
    }
    Scenario {
        name: name.into(),
        description: "Grab a ball, then throw it; the proxy must leave the palm".into(),
        objects: vec![object(1, "ball", center, 1, InflationMode::Binary)],
        trajectory,
        duration: 4.5,
        controller_config: ControllerConfig::default(),
        actions: vec![],
        expected_events: vec![
            expect(EventKind::Grabbed, Some(1), 1.0, 1.15),
            expect(EventKind::InflateStart, Some(1), 1.0, 1.15),
            expect(EventKind::Released, Some(1), 2.5, 2.75),
            expect(EventKind::DeflateStart, Some(1), 2.5, 2.75),
            expect(EventKind::ServoArrived, None, 2.6, 3.7),
        ],
    }
}

/// Two pluckable produce on a plant: a tomato that shrinks from normal to
/// skinny and a carrot that grows from skinny to normal.
fn magic_garden() -> Scenario {
    let tomato = [-0.075, 0.3, 0.2];
    let carrot = [0.075, 0.3, 0.2];
    let mut objects = vec![
        object(1, "tomato", tomato, 1, InflationMode::Variable { level: 1.0 }),
        object(2, "carrot", carrot, 2, InflationMode::Variable { level: 0.5 }),
    ];
    for o in &mut objects {
        o.pluckable = true;
    }
    let mut trajectory = Vec::new();
    reach(&mut trajectory, tomato, 0.5, 4.0);
    reach(&mut trajectory, carrot, 5.5, 9.0);
    let mut expected_events = Vec::new();
    expected_events.extend(reach_expectations(1, 0.5, 4.0));
    expected_events.extend(reach_expectations(2, 5.5, 9.0));
    expected_events.push(expect(EventKind::DeflateStart, Some(1), 2.8, 2.9));
    expected_events.push(expect(EventKind::InflateStart, Some(2), 7.8, 7.9));

    let at = |time, kind| ScenarioAction { time, kind };
    Scenario {
        name: "magic-garden".into(),
        description: "Pluck produce (2 degree servo nudge) and change its shape between two inflation levels".into(),
        objects,
        trajectory,
        duration: 11.0,
        controller_config: ControllerConfig::default(),
        actions: vec![
            at(1.8, ActionKind::Pluck),
            at(2.8, ActionKind::SetLevel { object: 1, level: 0.5 }),
            at(6.8, ActionKind::Pluck),
            at(7.8, ActionKind::SetLevel { object: 2, level: 1.0 }),
        ],
        expected_events,
    }
}
