use std::io::{BufRead, BufReader};
use std::net::TcpStream;
use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::time::Duration;

use gridswarm_fleet::scenario::{Fault, Scenario, ScriptedFault};

fn gridswarm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gridswarm"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn headless_run_prints_passing_report() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("run.jsonl");
    let out = gridswarm(&["run", "--headless", "--seed", "11", "--record", path(&log)]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let report: toml::Table = toml::from_str(&text(&out.stdout)).unwrap();
    assert_eq!(report["passed"].as_bool(), Some(true));
    assert_eq!(report["seed"].as_integer(), Some(11));
    assert_eq!(report["fleet"]["violations"].as_integer(), Some(0));
    assert_eq!(report["robots"].as_array().unwrap().len(), 4);
    assert!(text(&out.stderr).contains("wall time"));
    assert!(!text(&out.stdout).contains("wall time"));

    let replay = gridswarm(&["replay", "--replay", path(&log)]);
    assert_eq!(replay.status.code(), Some(0));
    assert!(text(&replay.stdout).contains("violations = 0"));
}

#[test]
fn same_seed_same_report_and_log() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    let ra = gridswarm(&["run", "--headless", "--record", path(&a)]);
    let rb = gridswarm(&["run", "--headless", "--record", path(&b)]);
    assert_eq!(ra.stdout, rb.stdout);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn failing_run_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let mut file = Scenario::bundled_arena().file;
    file.faults.push(ScriptedFault {
        at_tick: 20,
        fault: Fault::Hardware { robot: 2 },
    });
    let scenario = file.validate().unwrap();
    let toml_path = dir.path().join("fault.toml");
    std::fs::write(&toml_path, scenario.to_toml()).unwrap();
    let out = gridswarm(&["run", "--headless", "--scenario", path(&toml_path)]);
    assert_eq!(out.status.code(), Some(1));
    let report: toml::Table = toml::from_str(&text(&out.stdout)).unwrap();
    assert_eq!(report["passed"].as_bool(), Some(false));
}

#[test]
fn invalid_scenario_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let mut text_toml = Scenario::bundled_arena().to_toml();
    text_toml = text_toml.replace("cell_size = 0.3048", "cell_size = 0.1");
    let p = dir.path().join("bad.toml");
    std::fs::write(&p, text_toml).unwrap();
    let out = gridswarm(&["run", "--headless", "--scenario", path(&p)]);
    assert_eq!(out.status.code(), Some(2));
    let err = text(&out.stderr);
    assert!(err.contains("footprint") || err.contains("cell_size"), "{err}");
}

#[test]
fn truncated_replay_reports_last_valid_frame() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("run.jsonl");
    gridswarm(&["run", "--headless", "--ticks", "20", "--record", path(&log)]);
    let mut bytes = std::fs::read(&log).unwrap();
    bytes.truncate(bytes.len() - 40);
    std::fs::write(&log, bytes).unwrap();
    let out = gridswarm(&["replay", "--replay", path(&log)]);
    assert_eq!(out.status.code(), Some(2));
    let err = text(&out.stderr);
    assert!(err.contains("last valid frame 18 (tick 18)"), "{err}");
}

#[test]
fn render_writes_png_and_rejects_bad_frames() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("run.jsonl");
    gridswarm(&["run", "--headless", "--ticks", "10", "--record", path(&log)]);
    let png = dir.path().join("f.png");
    let out = gridswarm(&["render", "--replay", path(&log), "--frame", "5", "--out", path(&png)]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let img = image::open(&png).unwrap().to_rgb8();
    assert_eq!(img.dimensions(), (1920, 1080));
    assert!(img.pixels().any(|p| p.0 == [90, 200, 120]));

    let out = gridswarm(&["render", "--replay", path(&log), "--frame", "10", "--out", path(&png)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("out of range"));

    // A camera pointed away from the grid has nothing to draw.
    let mut file = Scenario::bundled_arena().file;
    file.cameras[0].target = [1.524, -5.0, 0.0];
    let toml_path = dir.path().join("away.toml");
    std::fs::write(&toml_path, toml::to_string(&file).unwrap()).unwrap();
    let out = gridswarm(&["render", "--scenario", path(&toml_path), "--out", path(&png)]);
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn tune_prints_table_and_metrics() {
    let out = gridswarm(&["tune", "--every", "50"]);
    assert_eq!(out.status.code(), Some(0));
    let s = text(&out.stdout);
    let mut lines = s.lines();
    let header: Vec<&str> = lines.next().unwrap().split_whitespace().collect();
    assert_eq!(header, ["t", "error", "command"]);
    assert!(s.contains("settling_time = 1."));
    assert!(s.contains("overshoot = "));
    let overshoot = |out: &str| -> f64 {
        out.lines()
            .find_map(|l| l.strip_prefix("overshoot = "))
            .unwrap()
            .parse()
            .unwrap()
    };
    let hot = gridswarm(&["tune", "--kp", "5"]);
    assert!(overshoot(&text(&hot.stdout)) > 5.0 * overshoot(&s));
    let short = gridswarm(&["tune", "--duration", "0.2"]);
    assert!(text(&short.stdout).contains("settling_time = none"));
}

#[test]
fn live_run_serves_hello_and_frames() {
    let mut child = Command::new(env!("CARGO_BIN_EXE_gridswarm"))
        .args(["run", "--listen", "127.0.0.1:0", "--ticks", "30", "--speed", "1"])
        .stdout(Stdio::null())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut stderr = BufReader::new(child.stderr.take().unwrap());
    let mut first = String::new();
    stderr.read_line(&mut first).unwrap();
    let addr = first.trim().strip_prefix("listening on ").expect("address line").to_owned();
    let stream = TcpStream::connect(&addr).unwrap();
    stream.set_read_timeout(Some(Duration::from_secs(10))).unwrap();
    let mut reader = BufReader::new(stream);
    let mut line = String::new();
    reader.read_line(&mut line).unwrap();
    assert!(line.starts_with(r#"{"type":"hello""#), "{line}");
    line.clear();
    reader.read_line(&mut line).unwrap();
    assert!(line.starts_with(r#"{"type":"frame""#), "{line}");
    assert!(child.wait().unwrap().code().is_some());
}
