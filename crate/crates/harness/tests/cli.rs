use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kinloop::model::load_model;
use kinloop_harness::trajfile::read_trajectory;

fn kinloop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kinloop")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn scratch(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("kinloop-cli-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

const POSTURE: &str = "task = \"squat\"\ndt = 0.02\nhorizon = 15\n[squat]\nrelative_elevation = 1.0\n";

#[test]
fn check_derivatives_exit_codes() {
    let ok = kinloop(&["check-derivatives", "--model", "fourbar", "--samples", "5"]);
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("passed"));

    let bad = kinloop(&["check-derivatives", "--model", "toybiped", "--samples", "3", "--flip-gamma3"]);
    assert_eq!(code(&bad), 1);
    assert!(String::from_utf8_lossy(&bad.stderr).contains("∂a_c/∂q"));

    let free = kinloop(&["check-derivatives", "--model", "pendulum", "--samples", "5"]);
    assert_eq!(code(&free), 0);
    let out = String::from_utf8_lossy(&free.stdout);
    assert!(out.contains("∂τ/∂q") && !out.contains("∂a_c"));
}

#[test]
fn bad_input_exits_with_two() {
    assert_eq!(code(&kinloop(&["check-derivatives", "--model", "no-such-model"])), 2);
    assert_eq!(code(&kinloop(&["model-info", "--model", "/nonexistent/model.toml"])), 2);
    assert_eq!(code(&kinloop(&["frobnicate"])), 2);
    let dir = scratch("bad");
    let task = write(&dir, "bad.toml", "task = \"squat\"\ndt = -1.0\nhorizon = 5\n[squat]\nrelative_elevation = 1.0\n");
    assert_eq!(code(&kinloop(&["run-task", "--model", "toybiped", "--task", &task])), 2);
    let typo = write(&dir, "typo.toml", "task = \"squat\"\ndt = 0.02\nhorizn = 5\n");
    assert_eq!(code(&kinloop(&["run-task", "--model", "toybiped", "--task", &typo])), 2);
    let posture = write(&dir, "posture.toml", POSTURE);
    let refused = kinloop(&["run-task", "--model", "parallel-leg", "--task", &posture, "--serial"]);
    assert_eq!(code(&refused), 2);
}

#[test]
fn run_task_then_lift() {
    let dir = scratch("run");
    let task = write(&dir, "posture.toml", POSTURE);
    let closed_dir = dir.join("closed");
    let o = kinloop(&["run-task", "--model", "toybiped", "--task", &task, "--out-dir", closed_dir.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["trajectory.txt", "nodes.csv", "controls.csv", "report.txt"] {
        assert!(closed_dir.join(f).exists(), "missing {f}");
    }
    let file = read_trajectory(&closed_dir.join("trajectory.txt")).unwrap();
    let model = load_model("toybiped").unwrap();
    file.check_model(&model).unwrap();
    assert_eq!(file.trajectory.xs.len(), 16);
    let nodes = std::fs::read_to_string(closed_dir.join("nodes.csv")).unwrap();
    assert!(nodes.starts_with("k,t,com_x,com_y,com_z,l_sole_x"));
    assert_eq!(nodes.lines().count(), 17);
    let controls = std::fs::read_to_string(closed_dir.join("controls.csv")).unwrap();
    assert!(controls.starts_with("joint,max_abs,mean_abs"));
    assert_eq!(controls.lines().count(), 1 + model.nu());

    let serial_dir = dir.join("serial");
    let o = kinloop(&["run-task", "--model", "toybiped", "--task", &task, "--serial", "--out-dir", serial_dir.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let serial_traj = serial_dir.join("trajectory.txt");

    // the closed trajectory is not a serial one
    let wrong = kinloop(&[
        "lift", "--model", "toybiped", "--task", &task,
        "--trajectory", closed_dir.join("trajectory.txt").to_str().unwrap(),
        "--out-dir", dir.join("wrong").to_str().unwrap(),
    ]);
    assert_eq!(code(&wrong), 2);

    let lift_dir = dir.join("lift");
    let o = kinloop(&[
        "lift", "--model", "toybiped", "--task", &task,
        "--trajectory", serial_traj.to_str().unwrap(),
        "--out-dir", lift_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let lifted = read_trajectory(&lift_dir.join("lifted.txt")).unwrap();
    lifted.check_model(&model).unwrap();
    let report = std::fs::read_to_string(lift_dir.join("lift-report.txt")).unwrap();
    assert!(report.contains("success true"));
}

#[test]
fn compare_serial_writes_csv_in_sweep_order() {
    let dir = scratch("compare");
    let task = write(&dir, "posture.toml", POSTURE);
    let csv = dir.join("sweep.csv");
    let o = kinloop(&[
        "compare-serial", "--model", "toybiped", "--task", &task,
        "--sweep", "squat.relative_elevation=1.0,0.98",
        "--out", csv.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("value,closed_converged"));
    let values: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(values, ["1.0", "0.98"]);

    let bad = kinloop(&["compare-serial", "--model", "toybiped", "--task", &task, "--sweep", "squat.depth=1"]);
    assert_eq!(code(&bad), 2);
}

#[test]
fn simulate_fourbar() {
    let dir = scratch("sim");
    let log = dir.join("log.csv");
    let o = kinloop(&["simulate", "--model", "fourbar", "--duration", "0.5", "--log", log.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&log).unwrap();
    assert!(text.starts_with("t,residual,energy"));
    assert_eq!(text.lines().count(), 502);
    assert_eq!(code(&kinloop(&["simulate", "--model", "fourbar", "--dt", "0"])), 2);
}
