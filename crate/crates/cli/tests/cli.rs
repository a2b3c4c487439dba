//! End-to-end runs of the `latentplan` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_latentplan"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn latentplan")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Dataset and trained model shared across tests.
struct Fixture {
    _dir: TempDir,
    data: PathBuf,
    model: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data.csv");
        let model = dir.path().join("model").join("model.json");
        ok(&["synth-data", "--kind", "circle", "--dim", "8", "--frames-per-cycle", "20", "--cycles", "3", "--noise", "0.01", "--turn-amplitude", "0.5", "--frame-rate", "10", "--out", s(&data)]);
        ok(&["train", "--data", s(&data), "--latent-dim", "3", "--iterations", "80", "--out", s(&model)]);
        Fixture { _dir: dir, data, model }
    })
}

fn write_task(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

const OPEN_TASK: &str = r#"{"horizon": 20, "domain": {"min": [-2, -5], "max": [10, 5]},
  "goal": {"center": [2.0, 0.0], "radius": 1.0}, "cost": {"family": "goal", "goal_weight": 0.1},
  "resolution": 0.1, "obstacles": []}"#;

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn help_for_every_subcommand() {
    for sub in ["synth-data", "train", "plan", "guide", "eval", "verify-duality", "replay"] {
        let out = ok(&[sub, "--help"]);
        assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"), "{sub}");
    }
    ok(&["--help"]);
}

#[test]
fn train_writes_manifest_curve_and_is_reproducible() {
    let f = fixture();
    let dir = f.model.parent().unwrap();
    let m = manifest(dir);
    assert_eq!(m["subcommand"], "train");
    assert_eq!(m["config"]["latent_dim"], 3);
    assert_eq!(m["seed"], 0);
    assert!(m["git_describe"].is_string());
    assert!(m["timings"]["train"].as_f64().unwrap() >= 0.0);
    let curve = std::fs::read_to_string(dir.join("training_curve.csv")).unwrap();
    let values: Vec<f64> = curve.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert!(values.windows(2).all(|w| w[1] >= w[0]), "objective must not decrease");

    let again = tempfile::tempdir().unwrap();
    let other = again.path().join("model.json");
    ok(&["train", "--data", s(&f.data), "--latent-dim", "3", "--iterations", "80", "--out", s(&other)]);
    assert_eq!(std::fs::read(&f.model).unwrap(), std::fs::read(&other).unwrap());
}

#[test]
fn malformed_dataset_reports_line_and_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    let text = std::fs::read_to_string(&fixture().data).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    lines[4] = lines[4].replacen(|c: char| c.is_ascii_digit(), "x", 1);
    std::fs::write(&bad, lines.join("\n")).unwrap();
    let out = run(&["train", "--data", s(&bad), "--out", s(&dir.path().join("m.json"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 5"), "{err}");
}

#[test]
fn missing_file_and_bad_schedule_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["train", "--data", s(&dir.path().join("nope.csv")), "--out", s(&dir.path().join("m.json"))]);
    assert_eq!(out.status.code(), Some(2));
    let task = write_task(dir.path(), "task.json", OPEN_TASK);
    let out = run(&["guide", "--model", s(&fixture().model), "--task", s(&task), "--multiscale", "3:10", "--out", s(&dir.path().join("u.csv"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn plan_in_open_field_writes_trajectory_svg_and_manifest() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let task = write_task(dir.path(), "task.json", OPEN_TASK);
    let traj = dir.path().join("out").join("traj.csv");
    let svg = dir.path().join("out").join("plot.svg");
    ok(&["plan", "--model", s(&f.model), "--task", s(&task), "--particles", "30", "--out", s(&traj), "--svg", s(&svg)]);

    let mut rdr = csv::Reader::from_path(&traj).unwrap();
    let header = rdr.headers().unwrap().clone();
    assert_eq!(&header[0], "step");
    assert_eq!(&header[header.len() - 1], "delta");
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 20);
    assert_eq!(&rows[0][0], "1");

    let text = std::fs::read_to_string(&svg).unwrap();
    let doc = roxmltree::Document::parse(&text).expect("well-formed SVG");
    assert_eq!(doc.root_element().tag_name().name(), "svg");
    assert!(doc.descendants().any(|n| n.attribute("class") == Some("trajectory")));
    assert!(doc.descendants().any(|n| n.attribute("class") == Some("goal")));

    let m = manifest(traj.parent().unwrap());
    assert_eq!(m["subcommand"], "plan");
    assert_eq!(m["resolved"]["horizon"], 20);
}

#[test]
fn trajectory_costs_round_trip_through_the_task() {
    use latentplan::tasks::Task;
    use nalgebra::{DVector, Vector3};

    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let body = r#"{"horizon": 20, "domain": {"min": [-2, -5], "max": [10, 5]},
      "goal": {"center": [2.0, 0.0], "radius": 1.0}, "cost": {"family": "goal", "goal_weight": 0.1},
      "resolution": 0.1, "obstacles": [{"kind": "circle", "center": [1.0, 1.2], "radius": 0.5}]}"#;
    let task_path = write_task(dir.path(), "task.json", body);
    let traj = dir.path().join("traj.csv");
    ok(&["plan", "--model", s(&f.model), "--task", s(&task_path), "--particles", "25", "--seed", "4", "--out", s(&traj)]);

    let task = Task::load(&task_path).unwrap();
    let mut rdr = csv::Reader::from_path(&traj).unwrap();
    let header = rdr.headers().unwrap().clone();
    let pose_cols: Vec<usize> = (0..header.len()).filter(|&i| header[i].starts_with("y_")).collect();
    let cost_col = header.iter().position(|h| h == "cost").unwrap();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec.unwrap();
        let v = |i: usize| rec[i].parse::<f64>().unwrap();
        let g = Vector3::new(v(1), v(2), v(3));
        let y = DVector::from_iterator(pose_cols.len(), pose_cols.iter().map(|&i| v(i)));
        let q = task.cost(&y, &g, k + 1);
        assert!((q - v(cost_col)).abs() <= 1e-9 * (1.0 + q.abs()), "step {}: {q} vs {}", k + 1, v(cost_col));
    }
}

#[test]
fn sealed_start_exits_3() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let body = r#"{"horizon": 10, "domain": {"min": [-2, -2], "max": [2, 2]},
      "goal": {"center": [1.5, 0.0], "radius": 0.3}, "cost": {"family": "goal"}, "resolution": 0.1,
      "forbidden_strips": [{"axis": "x", "min": -2.0, "max": 2.0}]}"#;
    let task = write_task(dir.path(), "box.json", body);
    let out = run(&["plan", "--model", s(&f.model), "--task", s(&task), "--out", s(&dir.path().join("t.csv"))]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn guide_then_plan_with_guidance_file() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let task = write_task(dir.path(), "task.json", OPEN_TASK);
    let u = dir.path().join("u.csv");
    ok(&["guide", "--model", s(&f.model), "--task", s(&task), "--multiscale", "2:50,4:50", "--out", s(&u)]);
    let text = std::fs::read_to_string(&u).unwrap();
    assert_eq!(text.lines().count(), 21);
    ok(&["plan", "--model", s(&f.model), "--task", s(&task), "--guidance", s(&u), "--out", s(&dir.path().join("t.csv"))]);

    // wrong length is an input error
    let short = dir.path().join("short.csv");
    std::fs::write(&short, text.lines().take(5).collect::<Vec<_>>().join("\n")).unwrap();
    let out = run(&["plan", "--model", s(&f.model), "--task", s(&task), "--guidance", s(&short), "--out", s(&dir.path().join("t2.csv"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn replay_reproduces_plan_outputs() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let task = write_task(dir.path(), "task.json", OPEN_TASK);
    let first = dir.path().join("a");
    ok(&["plan", "--model", s(&f.model), "--task", s(&task), "--particles", "20", "--multiscale", "4:40", "--seed", "6", "--out", s(&first.join("traj.csv")), "--svg", s(&first.join("p.svg"))]);
    let second = dir.path().join("b");
    ok(&["replay", "--manifest", s(&first.join("manifest.json")), "--out-dir", s(&second)]);
    for name in ["traj.csv", "p.svg"] {
        assert_eq!(std::fs::read(first.join(name)).unwrap(), std::fs::read(second.join(name)).unwrap(), "{name}");
    }
    let (a, b) = (manifest(&first), manifest(&second));
    assert_eq!(a["resolved"], b["resolved"]);
}

#[test]
fn eval_is_deterministic_and_open_field_always_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_task(
        dir.path(),
        "bench.json",
        r#"{"horizon": 64, "seeds": [0, 1, 2], "cases": [{"particles": 20}, {"name": "ms", "particles": 20, "multiscale": "4:40,2:40"}]}"#,
    );
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    ok(&["eval", "--config", s(&config), "--no-wallclock", "--out", s(&a)]);
    ok(&["eval", "--config", s(&config), "--no-wallclock", "--out", s(&b)]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let mut rdr = csv::Reader::from_path(&a).unwrap();
    assert_eq!(rdr.headers().unwrap().iter().collect::<Vec<_>>(), ["case", "env", "successes", "trials", "rate", "mean_wallclock_s", "dp_operations"]);
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 4);
    for r in rows.iter().filter(|r| &r[1] == "open") {
        assert_eq!(&r[4], "1.0", "{r:?}");
        assert_eq!(&r[3], "3");
    }
    assert!(rows.iter().any(|r| &r[0] == "ms"));
}

#[test]
fn verify_duality_passes_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a").join("r.csv");
    let b = dir.path().join("b").join("r.csv");
    let out = ok(&["verify-duality", "--instances", "20", "--seed", "5", "--out", s(&a)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS"));
    ok(&["verify-duality", "--instances", "20", "--seed", "5", "--out", s(&b)]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(std::fs::read_to_string(&a).unwrap().lines().count(), 21);

    // no instances: nothing can fail
    ok(&["verify-duality", "--instances", "0"]);
    let out = run(&["verify-duality", "--max-states", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn synth_latent_output_and_bad_thread_setting() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    let latent = dir.path().join("z.csv");
    ok(&["synth-data", "--kind", "two-gait", "--dim", "6", "--frames-per-cycle", "10", "--cycles", "2", "--out", s(&data), "--latent-out", s(&latent)]);
    let z = std::fs::read_to_string(&latent).unwrap();
    assert!(z.starts_with("z0,z1,gait"));
    // the dataset carries an extra `# frame_rate=` line
    let frames = std::fs::read_to_string(&data).unwrap().lines().filter(|l| !l.starts_with('#')).count();
    assert_eq!(z.lines().count(), frames);

    let out = bin().args(["verify-duality", "--instances", "1"]).env("LATENTPLAN_THREADS", "zero").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}
