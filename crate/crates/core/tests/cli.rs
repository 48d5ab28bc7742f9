use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use metromodel::cli::{read_config, CalibrateConfig, PropagateConfig, RedundancyConfig, ReportConfig, SimulateConfig, TrainConfig, PredictConfig};
use metromodel::sim::{forging_process, forging_sensors, greybox_process, greybox_sensors};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_metromodel")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn shipped_configs_parse_and_match_presets() {
    let c = configs();
    let sim: SimulateConfig = read_config(&c.join("simulate_forging.toml")).unwrap();
    assert_eq!(sim.resolve().unwrap(), (forging_process(), forging_sensors()));
    assert_eq!(sim.runs, 81);
    let sim: SimulateConfig = read_config(&c.join("simulate_greybox.toml")).unwrap();
    assert_eq!(sim.resolve().unwrap(), (greybox_process(), greybox_sensors()));
    let t: TrainConfig = read_config(&c.join("train.toml")).unwrap();
    assert_eq!((t.test_runs, t.folds, t.target.as_str()), (21, 5, "energy"));
    read_config::<CalibrateConfig>(&c.join("calibrate.toml")).unwrap();
    read_config::<PropagateConfig>(&c.join("propagate.toml")).unwrap();
    read_config::<PredictConfig>(&c.join("predict.toml")).unwrap();
    read_config::<RedundancyConfig>(&c.join("redundancy.toml")).unwrap();
    read_config::<ReportConfig>(&c.join("report.toml")).unwrap();
}

#[test]
fn propagate_sum_of_three_and_four() {
    let out = tempfile::tempdir().unwrap();
    let o = bin(&["propagate", "--config", s(&configs().join("propagate.toml")), "--out", s(out.path()), "--quiet"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(o.stdout.is_empty());
    let r = json(&out.path().join("propagate.json"));
    for m in ["lpu", "mc"] {
        let u = r[m]["std_uncertainty"].as_f64().unwrap();
        assert!((u - 5.0).abs() < 0.05, "{m}: {u}");
    }
    assert_eq!(r["manifest"]["seed"], 2021);
    assert_eq!(r["manifest"]["trials"], 100000);
    assert_eq!(r["mc"]["trials"], 100000);
    assert_eq!(r["manifest"]["config_sha256"].as_str().unwrap().len(), 64);

    let again = tempfile::tempdir().unwrap();
    bin(&["propagate", "--config", s(&configs().join("propagate.toml")), "--out", s(again.path()), "--quiet"]);
    assert_eq!(fs::read(out.path().join("propagate.json")).unwrap(), fs::read(again.path().join("propagate.json")).unwrap());
}

#[test]
fn seed_and_trials_flags_override_the_config() {
    let out = tempfile::tempdir().unwrap();
    let o = bin(&["propagate", "--config", s(&configs().join("propagate.toml")), "--out", s(out.path()), "--seed", "5", "--trials", "2000"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r = json(&out.path().join("propagate.json"));
    assert_eq!(r["mc"]["seed"], 5);
    assert_eq!(r["mc"]["trials"], 2000);
}

#[test]
fn parse_error_reports_position() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "expression = \"X1*\"\n[[inputs]]\nname = \"X1\"\nkind = \"normal\"\nmean = 1\nstd = 1\n").unwrap();
    let o = bin(&["propagate", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("position 3"), "{}", stderr(&o));
}

#[test]
fn config_problems_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.toml");
    let o = bin(&["simulate", "--config", s(&missing)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(s(&missing)));

    let cfg = dir.path().join("sim.toml");
    fs::write(&cfg, "preset = \"forging\"\nrunz = 3\n").unwrap();
    let o = bin(&["simulate", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("runz"), "{}", stderr(&o));

    let cfg = dir.path().join("train.toml");
    fs::write(&cfg, "benchmark = \"absent\"\ntarget = \"energy\"\npreset = \"forging\"\n").unwrap();
    let o = bin(&["train", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("absent"));

    assert_eq!(bin(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(bin(&["--help"]).status.code(), Some(0));
}

fn simulate_small(dir: &Path, runs: usize) -> PathBuf {
    let cfg = dir.join("sim.toml");
    fs::write(&cfg, format!("preset = \"forging\"\nruns = {runs}\n")).unwrap();
    let bench = dir.join("bench");
    let o = bin(&["simulate", "--config", s(&cfg), "--out", s(&bench), "--quiet"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    bench
}

#[test]
fn default_simulation_writes_81_runs() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin(&["simulate", "--out", s(dir.path()), "--quiet"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csvs = fs::read_dir(dir.path())
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("run_"))
        .count();
    assert_eq!(csvs, 81);
    let targets = fs::read_to_string(dir.path().join("targets.csv")).unwrap();
    assert_eq!(targets.lines().count(), 82);
    assert!(dir.path().join("manifest.json").exists());
    assert_eq!(json(&dir.path().join("simulate.json"))["manifest"]["config_sha256"], serde_json::Value::Null);
}

#[test]
fn single_candidate_train_and_predict() {
    let dir = tempfile::tempdir().unwrap();
    simulate_small(dir.path(), 20);
    let cfg = dir.path().join("train.toml");
    fs::write(
        &cfg,
        r#"
benchmark = "bench"
target = "energy"
test_runs = 5
folds = 3

[[candidates]]
name = "power-moments-ridge"
[[candidates.extraction]]
sensor = "power"
features = [{ method = "moments" }]
[candidates.learner]
family = "ridge"
lambda = 1e-3
"#,
    )
    .unwrap();
    let out = dir.path().join("model");
    let o = bin(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r = json(&out.join("train.json"));
    assert_eq!(r["selection"]["ranking"].as_array().unwrap().len(), 1);
    assert!(r["held_out_r2"].is_f64());
    assert_eq!(r["test_runs"].as_array().unwrap().len(), 5);

    let pcfg = dir.path().join("predict.toml");
    fs::write(&pcfg, "model = \"model/model.json\"\nbenchmark = \"bench\"\n[noise]\npower = 0.2\n").unwrap();
    let pout = dir.path().join("pred");
    let o = bin(&["predict", "--config", s(&pcfg), "--out", s(&pout), "--trials", "1000"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(pout.join("predictions.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("run_id,prediction,mc_mean,std_uncertainty"));
    assert_eq!(lines.count(), 20);
}

#[test]
fn failing_candidates_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    simulate_small(dir.path(), 12);
    let cfg = dir.path().join("train.toml");
    fs::write(
        &cfg,
        r#"
benchmark = "bench"
target = "energy"
test_runs = 3
folds = 3

[[candidates]]
name = "ghost-a"
[[candidates.extraction]]
sensor = "ghost"
features = [{ method = "moments" }]
[candidates.learner]
family = "mean"

[[candidates]]
name = "ghost-b"
[[candidates.extraction]]
sensor = "phantom"
features = [{ method = "moments" }]
[candidates.learner]
family = "mean"
"#,
    )
    .unwrap();
    let o = bin(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("m"))]);
    assert_eq!(o.status.code(), Some(1));
    let e = stderr(&o);
    assert!(e.contains("ghost-a") && e.contains("ghost") && e.contains("ghost-b") && e.contains("phantom"), "{e}");
}

#[test]
fn corrupt_row_names_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let bench = simulate_small(dir.path(), 4);
    let path = bench.join("targets.csv");
    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    lines[2] = lines[2].replacen(',', ",oops", 2);
    fs::write(&path, lines.join("\n") + "\n").unwrap();
    let cfg = dir.path().join("red.toml");
    fs::write(&cfg, "benchmark = \"bench\"\n").unwrap();
    let o = bin(&["redundancy", "--config", s(&cfg), "--out", s(&dir.path().join("r"))]);
    assert_eq!(o.status.code(), Some(1));
    let e = stderr(&o);
    assert!(e.contains("targets.csv:3"), "{e}");
}

#[test]
fn calibrate_and_report_outputs() {
    let out = tempfile::tempdir().unwrap();
    let o = bin(&["calibrate", "--config", s(&configs().join("calibrate.toml")), "--out", s(out.path()), "--quiet"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r = json(&out.path().join("calibrate.json"));
    assert!((r["parameters"][0].as_f64().unwrap() - 2.0).abs() < 0.01);
    assert!(r["converged"].as_bool().unwrap());
    let y = r["readings"][0]["stimulus"].as_f64().unwrap();
    let b = &r["parameters"];
    assert!((b[0].as_f64().unwrap() * y + b[1].as_f64().unwrap() - 7.0).abs() < 1e-9);

    let dir = tempfile::tempdir().unwrap();
    simulate_small(dir.path(), 6);
    let cfg = dir.path().join("report.toml");
    fs::write(&cfg, "benchmark = \"bench\"\ntarget = \"energy\"\npipeline_name = \"moments-top12-forest\"\n").unwrap();
    let o = bin(&["report", "--config", s(&cfg), "--out", s(&dir.path().join("rep"))]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let features = fs::read_to_string(dir.path().join("rep/features.csv")).unwrap();
    assert_eq!(features.lines().count(), 7);
    let summary = json(&dir.path().join("rep/summary.json"));
    assert_eq!(summary["features"].as_array().unwrap().len(), 48);
}
