mod render;

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use gridswarm_core::robot::{step_response, PidGains, RobotParams};
use gridswarm_fleet::endpoint::{serve, serve_replay, Endpoint};
use gridswarm_fleet::scenario::{load_scenario, Scenario};
use gridswarm_fleet::server::FleetServer;
use gridswarm_fleet::telemetry::{read_log, Recorder, TelemetryFrame};

const DEFAULT_LISTEN: &str = "127.0.0.1:8470";

#[derive(Parser)]
#[command(name = "gridswarm", version, about = "Overhead-camera fleet simulator and server")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and print a TOML report.
    Run(RunArgs),
    /// Validate a recorded log and optionally stream it to operator clients.
    Replay(ReplayArgs),
    /// Draw one frame's grid overlay and robots to a PNG.
    Render(RenderArgs),
    /// Print the closed-loop wheel step response for a set of gains.
    Tune(TuneArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Scenario TOML; defaults to the bundled four-robot arena.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Tick limit; defaults to the scenario's max_ticks.
    #[arg(long)]
    ticks: Option<u64>,
    /// Run as fast as possible without the operator endpoint.
    #[arg(long)]
    headless: bool,
    /// Operator endpoint address (ignored when headless).
    #[arg(long, default_value = DEFAULT_LISTEN)]
    listen: String,
    /// Append every telemetry frame to this JSON-lines log.
    #[arg(long)]
    record: Option<PathBuf>,
    /// Real-time multiplier when serving.
    #[arg(long, default_value_t = 1.0)]
    speed: f64,
}

#[derive(Args)]
struct ReplayArgs {
    /// Log written by `run --record`.
    #[arg(long)]
    replay: PathBuf,
    /// Scenario used for the endpoint greeting.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Stream frames to the first client that connects here.
    #[arg(long)]
    listen: Option<String>,
    #[arg(long, default_value_t = 1.0)]
    speed: f64,
}

#[derive(Args)]
struct RenderArgs {
    /// Log to take the frame from; without it, the scenario's first tick.
    #[arg(long)]
    replay: Option<PathBuf>,
    /// Scenario providing the camera; defaults to the bundled arena.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Zero-based frame index within the log.
    #[arg(long, default_value_t = 0)]
    frame: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TuneArgs {
    #[arg(long, default_value_t = PidGains::default().kp)]
    kp: f64,
    #[arg(long, default_value_t = PidGains::default().ki)]
    ki: f64,
    #[arg(long, default_value_t = PidGains::default().kd)]
    kd: f64,
    /// Step size in encoder ticks.
    #[arg(long, default_value_t = 720)]
    target: i64,
    /// Simulated seconds.
    #[arg(long, default_value_t = 3.0)]
    duration: f64,
    /// Print every n-th control step.
    #[arg(long, default_value_t = 10)]
    every: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Replay(a) => replay(a).map(|()| true),
        Command::Render(a) => render_cmd(a).map(|()| true),
        Command::Tune(a) => tune(a).map(|()| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn scenario_or_default(path: Option<&PathBuf>) -> Result<Scenario> {
    match path {
        Some(p) => Ok(load_scenario(p)?),
        None => Ok(Scenario::bundled_arena()),
    }
}

fn pace(period: f64, speed: f64) -> Result<Option<Duration>> {
    if !(speed > 0.0 && speed.is_finite()) {
        bail!("--speed must be a positive number, got {speed}");
    }
    Ok(Some(Duration::from_secs_f64(period / speed)))
}

/// Returns whether the run passed.
fn run(args: RunArgs) -> Result<bool> {
    let mut scenario = scenario_or_default(args.scenario.as_ref())?;
    if let Some(seed) = args.seed {
        scenario = scenario.with_seed(seed);
    }
    let max_ticks = args.ticks.unwrap_or(scenario.file.max_ticks);
    let period = scenario.tick_period();
    let mut recorder = match &args.record {
        Some(p) => Some(Recorder::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        ))),
        None => None,
    };
    let mut record_error = None;
    let mut on_frame = |f: &TelemetryFrame| {
        if let Some(r) = recorder.as_mut() {
            if let Err(e) = r.record(f) {
                record_error.get_or_insert(e);
            }
        }
    };

    let mut server = FleetServer::new(scenario);
    let started = Instant::now();
    if args.headless {
        server.run(max_ticks, &mut on_frame);
    } else {
        let endpoint = Endpoint::bind(&args.listen, server.hello())
            .with_context(|| format!("binding {}", args.listen))?;
        eprintln!("listening on {}", endpoint.local_addr());
        serve(&mut server, &endpoint, max_ticks, pace(period, args.speed)?, &mut on_frame);
    }
    let wall = started.elapsed();
    if let Some(e) = record_error {
        return Err(e).context("writing telemetry log");
    }

    let report = server.report();
    print!("{}", toml::to_string(&report).context("encoding report")?);
    eprintln!(
        "wall time {:.3} s for {} ticks ({:.1} simulated s)",
        wall.as_secs_f64(),
        report.fleet.ticks,
        report.fleet.ticks as f64 * period
    );
    Ok(report.passed)
}

fn load_log(path: &PathBuf) -> Result<Vec<(String, TelemetryFrame)>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_log(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))
}

fn replay(args: ReplayArgs) -> Result<()> {
    let frames = load_log(&args.replay)?;
    let first = &frames[0].1;
    let last = &frames[frames.len() - 1].1;
    let violations: usize = frames.iter().map(|(_, f)| f.violations.len()).sum();
    let events: usize = frames.iter().map(|(_, f)| f.events.len()).sum();
    println!("frames = {}", frames.len());
    println!("first_tick = {}", first.tick);
    println!("last_tick = {}", last.tick);
    println!("events = {events}");
    println!("violations = {violations}");

    let Some(listen) = args.listen else {
        return Ok(());
    };
    let scenario = scenario_or_default(args.scenario.as_ref())?;
    let server = FleetServer::new(scenario);
    let endpoint = Endpoint::bind(&listen, server.hello()).with_context(|| format!("binding {listen}"))?;
    eprintln!("listening on {}, waiting for a client", endpoint.local_addr());
    while endpoint.client_count() == 0 {
        std::thread::sleep(Duration::from_millis(20));
    }
    let period = if frames.len() > 1 {
        (last.time - first.time) / (frames.len() - 1) as f64
    } else {
        server.scenario().tick_period()
    };
    let lines: Vec<String> = frames.into_iter().map(|(l, _)| l).collect();
    serve_replay(&endpoint, &lines, pace(period, args.speed)?);
    Ok(())
}

fn render_cmd(args: RenderArgs) -> Result<()> {
    let scenario = scenario_or_default(args.scenario.as_ref())?;
    let frame = match &args.replay {
        Some(path) => {
            let mut frames = load_log(path)?;
            if args.frame >= frames.len() {
                bail!("frame {} out of range: log has {} frames", args.frame, frames.len());
            }
            frames.swap_remove(args.frame).1
        }
        None => FleetServer::new(scenario.clone()).tick(),
    };
    let image = render::draw(&scenario, &frame)?;
    image
        .save(&args.out)
        .with_context(|| format!("writing {}", args.out.display()))?;
    eprintln!("wrote {} (tick {})", args.out.display(), frame.tick);
    Ok(())
}

fn tune(args: TuneArgs) -> Result<()> {
    if args.every == 0 {
        bail!("--every must be at least 1");
    }
    let gains = PidGains {
        kp: args.kp,
        ki: args.ki,
        kd: args.kd,
        ..PidGains::default()
    };
    gains.validate()?;
    let params = RobotParams::default();
    let response = step_response(&gains, &params, args.target, args.duration);
    println!("{:>8} {:>8} {:>10}", "t", "error", "command");
    for s in response.samples.iter().step_by(args.every) {
        println!("{:>8.3} {:>8} {:>10.4}", s.t, s.error, s.command);
    }
    match response.settling_time {
        Some(t) => println!("settling_time = {t:.3}"),
        None => println!("settling_time = none"),
    }
    println!("overshoot = {:.4}", response.overshoot);
    Ok(())
}
