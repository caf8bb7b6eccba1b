//! End-to-end tests of the `reach` binary: exit codes, artifact layout,
//! determinism of reruns, and the served wire protocol.

use std::fs;
use std::io::{BufRead, BufReader};
use std::net::TcpListener;
use std::path::Path;
use std::process::{Child, Command, Stdio};

use reach_core::environment::EnvHandle;
use reach_core::kinematics::JointVector;
use reach_core::envservice::RemoteEnv;
use reach_core::training::RunConfig;

fn reach() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_reach"));
    // Keep test output quiet and unaffected by the caller's environment.
    cmd.env("REACH_LOG_LEVEL", "error");
    cmd
}

/// Kills the spawned server even when an assertion panics first.
struct KillOnDrop(Child);

impl Drop for KillOnDrop {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

#[test]
fn help_lists_every_command_and_flag() {
    let out = reach().arg("--help").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for command in ["train", "eval", "serve", "vision-demo", "selfcheck", "config"] {
        assert!(text.contains(command), "--help does not mention {command}");
    }

    let out = reach().args(["train", "--help"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for flag in [
        "--config", "--seed", "--episodes", "--algo", "--stage", "--her", "--reward", "--remote",
        "--out",
    ] {
        assert!(text.contains(flag), "train --help does not mention {flag}");
    }
}

#[test]
fn unknown_flags_and_bad_values_exit_2() {
    let out = reach().args(["train", "--no-such-flag"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    let out = reach().args(["train", "--algo", "a2c"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    let out = reach()
        .args(["selfcheck"])
        .env("REACH_LOG_LEVEL", "chatty")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_config_files_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");

    fs::write(&path, "not json").unwrap();
    let out = reach()
        .args(["train", "--config", path.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    fs::write(&path, r#"{"episodes":0}"#).unwrap();
    let out = reach()
        .args(["train", "--config", path.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn selfcheck_passes_on_a_fresh_build() {
    let started = std::time::Instant::now();
    let out = reach().arg("selfcheck").output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(started.elapsed().as_secs() < 60, "selfcheck exceeded its time budget");
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.matches("\nok   ").count() + text.starts_with("ok   ") as usize, 5);
    assert!(text.contains("0 failed"));
}

#[test]
fn show_defaults_prints_the_default_run_configuration() {
    let out = reach().args(["config", "show-defaults"]).output().unwrap();
    assert!(out.status.success());
    let parsed: RunConfig = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(parsed, RunConfig::default());
}

/// A run configuration small enough for test-speed training.
fn tiny_config_json(out_dir: &Path) -> String {
    format!(
        r#"{{
            "episodes": 10,
            "master_seed": 5,
            "agent": {{"hidden": [16, 16], "batch_size": 4, "learn_start": 4}},
            "eval": {{"every_steps": 0, "episodes": 10, "final_episodes": 10, "thresholds": [0.2, 0.1]}},
            "out_dir": {:?}
        }}"#,
        out_dir.to_str().unwrap()
    )
}

#[test]
fn training_produces_logs_checkpoint_and_matching_table_row() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let config_path = dir.path().join("config.json");
    fs::write(&config_path, tiny_config_json(&run_dir)).unwrap();

    let out = reach()
        .args(["train", "--config", config_path.to_str().unwrap()])
        .args(["--algo", "td3", "--her", "on", "--reward", "sparse", "--stage", "a1"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let episodes = fs::read_to_string(run_dir.join("episodes.csv")).unwrap();
    assert_eq!(episodes.lines().count(), 1 + 10, "one header plus one row per episode");
    assert!(run_dir.join("checkpoint_final.bin").exists());

    let table = fs::read_to_string(run_dir.join("table_row.csv")).unwrap();
    let row = table.lines().nth(1).unwrap();
    assert!(
        row.starts_with("td3,1-3,sparse,yes,10,"),
        "table row should carry the requested algorithm, joints, reward, and relabeling: {row}"
    );
}

#[test]
fn identical_train_invocations_write_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let run_dir = dir.path().join(name);
        let config_path = dir.path().join(format!("{name}.json"));
        fs::write(&config_path, tiny_config_json(&run_dir)).unwrap();
        let out = reach()
            .args(["train", "--config", config_path.to_str().unwrap()])
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(0));
        runs.push(run_dir);
    }
    for name in ["episodes.csv", "updates.csv", "summary.json", "checkpoint_final.bin"] {
        let a = fs::read(runs[0].join(name)).unwrap();
        let b = fs::read(runs[1].join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }
}

#[test]
fn eval_exports_reports_and_reruns_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let config_path = dir.path().join("config.json");
    fs::write(&config_path, tiny_config_json(&run_dir)).unwrap();
    let out = reach()
        .args(["train", "--config", config_path.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let checkpoint = run_dir.join("checkpoint_final.bin");

    let eval_a = dir.path().join("eval_a");
    let eval_b = dir.path().join("eval_b");
    for out_dir in [&eval_a, &eval_b] {
        let out = reach()
            .arg("eval")
            .arg(checkpoint.to_str().unwrap())
            .args(["--episodes", "20", "--seed", "11"])
            .args(["--out", out_dir.to_str().unwrap()])
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for name in ["summary.json", "scatter.csv", "table_row.csv"] {
        assert_eq!(
            fs::read(eval_a.join(name)).unwrap(),
            fs::read(eval_b.join(name)).unwrap(),
            "{name} differs between identical evaluations"
        );
    }

    // Success rates cannot grow as the radius shrinks.
    let summary = fs::read_to_string(eval_a.join("summary.json")).unwrap();
    let report: serde_json::Value = serde_json::from_str(&summary).unwrap();
    let rates: Vec<f64> = report["rates"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["rate"].as_f64().unwrap())
        .collect();
    assert!(rates.windows(2).all(|w| w[0] >= w[1]), "rates grew on tightening: {rates:?}");

    let out = reach().args(["eval", "no/such/checkpoint.bin"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn vision_demo_measures_accurate_extraction_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out_dir in [&out_a, &out_b] {
        let out = reach()
            .args(["vision-demo", "--scenes", "20", "--seed", "4"])
            .args(["--out", out_dir.to_str().unwrap()])
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let scenes = fs::read_to_string(out_a.join("scenes.csv")).unwrap();
    assert_eq!(scenes.lines().count(), 1 + 20);

    let aggregate = fs::read_to_string(out_a.join("aggregate.csv")).unwrap();
    let row: Vec<&str> = aggregate.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[1].parse::<u64>().unwrap(), 0, "extraction failed on a plain scene");
    for axis in [2, 3] {
        let mean: f64 = row[axis].parse().unwrap();
        assert!(mean <= 0.02, "mean extraction error {mean} m exceeds 0.02 m");
    }

    for name in ["scenes.csv", "aggregate.csv"] {
        assert_eq!(
            fs::read(out_a.join(name)).unwrap(),
            fs::read(out_b.join(name)).unwrap(),
            "{name} differs between identical demos"
        );
    }
}

#[test]
fn serve_answers_the_wire_protocol() {
    let child = reach()
        .args(["serve", "--bind", "127.0.0.1:0"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut guard = KillOnDrop(child);

    let stdout = guard.0.stdout.take().unwrap();
    let mut line = String::new();
    BufReader::new(stdout).read_line(&mut line).unwrap();
    let addr = line
        .trim()
        .strip_prefix("listening on ")
        .unwrap_or_else(|| panic!("unexpected banner {line:?}"))
        .to_string();

    let mut env = RemoteEnv::connect(&addr).unwrap();
    let obs = env.reset().unwrap();
    let outcome = env.step(&JointVector(obs.joint_angles)).unwrap();
    assert!(outcome.info.distance.is_finite());
    env.close().unwrap();
}

#[test]
fn serve_refuses_an_occupied_port_with_exit_1() {
    let holder = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = holder.local_addr().unwrap().to_string();
    let out = reach().args(["serve", "--bind", &addr]).output().unwrap();
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
}
