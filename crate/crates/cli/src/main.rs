use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use pneutwin_core::config::Config;
use pneutwin_core::firmware::{self, ClockMode, Emulator, Endpoint, FirmwareError, HttpLink, LocalLink};
use pneutwin_core::harness::{self, HarnessError};
use pneutwin_core::pneumodel::{PneumaticConfig, ValveRole};
use pneutwin_core::scenesim::{self, Scenario, SceneError};
use pneutwin_core::telemetry::{write_events, write_telemetry};
use pneutwin_core::LinkError;

/// Exit codes shared by every subcommand.
const EXIT_MISS: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_NETWORK: u8 = 3;

#[derive(Parser)]
#[command(
    name = "pneutwin",
    version,
    about = "Emulator, controller and test harness for a pneumatic haptic wristband"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Serve the device emulator over HTTP.
    Serve {
        #[arg(long, env = "PNEUTWIN_PORT")]
        port: Option<u16>,
        #[arg(long, env = "PNEUTWIN_HOST")]
        host: Option<String>,
        /// realtime, manual or xN (accelerated by N).
        #[arg(long, env = "PNEUTWIN_CLOCK", default_value = "realtime")]
        clock: ClockMode,
        #[arg(long, env = "PNEUTWIN_CONFIG")]
        config: Option<PathBuf>,
    },
    /// Play a scenario in lock-step and write its trace.
    Run {
        /// Scenario file, or builtin:<name>.
        scenario: String,
        /// `local` for an in-process emulator, or the base URL of a manual-clock server.
        #[arg(long, env = "PNEUTWIN_ENDPOINT", default_value = "local")]
        endpoint: String,
        #[arg(long, env = "PNEUTWIN_OUT", default_value = "trace.csv")]
        out: PathBuf,
        /// Event log; defaults to <out stem>.events.csv next to the trace.
        #[arg(long, env = "PNEUTWIN_EVENTS")]
        events: Option<PathBuf>,
        #[arg(long, env = "PNEUTWIN_CONFIG")]
        config: Option<PathBuf>,
    },
    /// Time sequential command round-trips.
    Bench {
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        #[arg(long, value_enum, default_value = "set-batch")]
        kind: Kind,
        /// Base URL to measure; a loopback emulator is started when omitted.
        #[arg(long, env = "PNEUTWIN_ENDPOINT")]
        endpoint: Option<String>,
        /// Raw samples CSV (one file per endpoint; the name gains a suffix for `both`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-check invariants over a recorded trace.
    Verify {
        trace: PathBuf,
        #[arg(long, env = "PNEUTWIN_CONFIG")]
        config: Option<PathBuf>,
    },
    /// List built-in scenarios, optionally writing them out as JSON.
    Scenarios {
        #[arg(long)]
        export: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    SetBatch,
    SetServo,
    Both,
}

/// Failure with the exit code it maps to.
struct Failure(u8, String);

impl Failure {
    fn config(msg: impl ToString) -> Self {
        Failure(EXIT_CONFIG, msg.to_string())
    }
}

impl From<LinkError> for Failure {
    fn from(e: LinkError) -> Self {
        match e {
            LinkError::Unreachable(_) => Failure(EXIT_NETWORK, e.to_string()),
            _ => Failure(EXIT_CONFIG, e.to_string()),
        }
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Link(l) => l.into(),
            other => Failure::config(other),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::Serve {
            port,
            host,
            clock,
            config,
        } => serve(port, host, clock, config.as_deref()),
        Cmd::Run {
            scenario,
            endpoint,
            out,
            events,
            config,
        } => run(&scenario, &endpoint, &out, events, config.as_deref()),
        Cmd::Bench { n, kind, endpoint, out } => bench(n, kind, endpoint, out),
        Cmd::Verify { trace, config } => verify(&trace, config.as_deref()),
        Cmd::Scenarios { export } => scenarios(export.as_deref()),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(Failure(code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<Config, Failure> {
    match path {
        Some(p) => Config::load(p).map_err(Failure::config),
        None => Ok(Config::default()),
    }
}

fn print_pin_map(config: &PneumaticConfig) {
    let m = &config.manifold;
    println!("pin map:");
    for v in &m.valves {
        match &v.role {
            ValveRole::Gate { inflatables, direction } => {
                println!("  {} valve, gate {direction:?} for inflatables {inflatables:?}", v.pin)
            }
            ValveRole::Selector => println!("  {} valve, pump selector (0 inflate, 1 deflate)", v.pin),
        }
    }
    println!("  {} inflate pump", m.inflate_pump_pin);
    println!("  {} deflate pump", m.deflate_pump_pin);
    for (i, p) in m.servo_pins.iter().enumerate() {
        println!("  {p} servo {}", i + 1);
    }
}

fn serve(port: Option<u16>, host: Option<String>, clock: ClockMode, config: Option<&Path>) -> Result<u8, Failure> {
    let config = load_config(config)?;
    let host = host.unwrap_or(config.firmware.host.clone());
    let port = port.unwrap_or(config.firmware.port);
    let handle =
        firmware::serve(config.pneumatic.clone(), clock, config.firmware.dt, &host, port).map_err(|e| match e {
            FirmwareError::BindFailure { .. } => Failure(EXIT_NETWORK, e.to_string()),
            other => Failure::config(other),
        })?;
    println!(
        "listening on {} (clock {clock}, dt {})",
        handle.base_url(),
        config.firmware.dt
    );
    print_pin_map(&config.pneumatic);
    handle.wait();
    Ok(0)
}

fn load_scenario(source: &str) -> Result<Scenario, Failure> {
    if let Some(name) = source.strip_prefix("builtin:") {
        return scenesim::builtin(name).ok_or_else(|| {
            Failure::config(format!(
                "no built-in scenario {name:?}; try one of {}",
                scenesim::BUILTIN_NAMES.join(", ")
            ))
        });
    }
    Scenario::load(Path::new(source)).map_err(Failure::config)
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::config(format!("cannot write {}: {e}", path.display())))
}

fn run(
    source: &str,
    endpoint: &str,
    out: &Path,
    events: Option<PathBuf>,
    config: Option<&Path>,
) -> Result<u8, Failure> {
    let config = load_config(config)?;
    // Controller settings come from the scenario; the config file supplies the device side.
    let scenario = load_scenario(source)?;
    let manifold = config.pneumatic.manifold.clone();
    let dt = config.firmware.dt;
    let result = if endpoint == "local" {
        let emulator = Emulator::new(config.pneumatic.clone(), ClockMode::ManualStep, dt).map_err(Failure::config)?;
        scenesim::run_scenario(&scenario, &mut LocalLink::new(emulator), &manifold, dt)
    } else {
        scenesim::run_scenario(&scenario, &mut HttpLink::new(endpoint), &manifold, dt)
    };
    let run = result.map_err(|e| match e {
        SceneError::EndpointUnreachable(_) => Failure(EXIT_NETWORK, e.to_string()),
        other => Failure::config(other),
    })?;

    let events_path = events.unwrap_or_else(|| {
        let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("trace");
        out.with_file_name(format!("{stem}.events.csv"))
    });
    write_telemetry(create(out)?, &run.samples).map_err(Failure::config)?;
    write_events(create(&events_path)?, &run.events).map_err(Failure::config)?;
    println!(
        "{}: {} samples, {} events -> {}, {}",
        scenario.name,
        run.samples.len(),
        run.events.len(),
        out.display(),
        events_path.display()
    );
    let missed = run.missed(&scenario);
    for m in &missed {
        println!(
            "missed: {} object {:?} in [{}, {}]",
            m.event, m.object, m.window[0], m.window[1]
        );
    }
    println!(
        "expected events matched: {}/{}",
        scenario.expected_events.len() - missed.len(),
        scenario.expected_events.len()
    );
    Ok(if missed.is_empty() { 0 } else { EXIT_MISS })
}

fn bench(n: usize, kind: Kind, endpoint: Option<String>, out: Option<PathBuf>) -> Result<u8, Failure> {
    if n == 0 {
        return Err(Failure::config("--n must be at least 1"));
    }
    let (handle, url) = match endpoint {
        Some(url) => (None, url),
        None => {
            let handle = firmware::serve(
                PneumaticConfig::default(),
                ClockMode::Realtime,
                pneutwin_core::pneumodel::DEFAULT_DT,
                "127.0.0.1",
                0,
            )
            .map_err(|e| Failure(EXIT_NETWORK, e.to_string()))?;
            let url = handle.base_url();
            (Some(handle), url)
        }
    };
    let endpoints: &[Endpoint] = match kind {
        Kind::SetBatch => &[Endpoint::SetBatch],
        Kind::SetServo => &[Endpoint::SetServo],
        Kind::Both => &[Endpoint::SetBatch, Endpoint::SetServo],
    };
    let link = HttpLink::new(&url);
    let mut result = Ok(0);
    for &ep in endpoints {
        match harness::bench(&link, ep, n) {
            Ok((stats, samples)) => {
                println!("{}", stats.report());
                if let Some(path) = &out {
                    let path = if endpoints.len() > 1 {
                        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("bench");
                        path.with_file_name(format!("{stem}.{ep}.csv"))
                    } else {
                        path.clone()
                    };
                    harness::write_samples(create(&path)?, &samples)?;
                }
            }
            Err(e) => {
                result = Err(e.into());
                break;
            }
        }
    }
    if let Some(h) = handle {
        h.shutdown();
    }
    result
}

fn verify(trace: &Path, config: Option<&Path>) -> Result<u8, Failure> {
    let config = load_config(config)?;
    let report = harness::verify_trace(trace, &config.pneumatic).map_err(Failure::config)?;
    for w in &report.warnings {
        println!("warning: {w}");
    }
    for v in &report.violations {
        println!("violation: {v}");
    }
    println!("{} samples, {} violations", report.samples, report.violations.len());
    Ok(if report.passed() { 0 } else { EXIT_MISS })
}

fn scenarios(export: Option<&Path>) -> Result<u8, Failure> {
    if let Some(dir) = export {
        std::fs::create_dir_all(dir).map_err(|e| Failure::config(format!("cannot create {}: {e}", dir.display())))?;
    }
    for s in scenesim::builtin_scenarios() {
        println!("{:<20} {}", s.name, s.description);
        if let Some(dir) = export {
            let path = dir.join(format!("{}.json", s.name));
            std::fs::write(&path, s.to_json())
                .map_err(|e| Failure::config(format!("cannot write {}: {e}", path.display())))?;
        }
    }
    Ok(0)
}
