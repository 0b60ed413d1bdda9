//! End-to-end tests for the `bal` binary: exit codes, directory safety,
//! and a full gen-data → run → report round trip on a tiny configuration.

use std::path::Path;
use std::process::{Command, Output};

fn bal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bal"))
        .args(args)
        .output()
        .expect("failed to spawn bal")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Overrides that shrink everything enough for a test-speed round trip.
const TINY: &[&str] = &[
    "--set", "phantom.volumes=8",
    "--set", "phantom.height=32",
    "--set", "phantom.width=32",
    "--set", "phantom.depth=4",
    "--set", "experiment.split=1,4,1,2",
    "--set", "experiment.iterations=2",
    "--set", "train.steps=120",
    "--set", "train.eval_every=40",
    "--set", "train.hidden=24",
    "--set", "train.batch_size=128",
];

fn with_tiny<'a>(front: &[&'a str]) -> Vec<&'a str> {
    let mut v = front.to_vec();
    v.extend_from_slice(TINY);
    v
}

#[test]
fn usage_errors_exit_2() {
    let out = bal(&["no-such-command"]);
    assert_eq!(out.status.code(), Some(2));
    let out = bal(&[]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn version_and_help_exit_0() {
    assert_eq!(bal(&["--version"]).status.code(), Some(0));
    let out = bal(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    for sub in ["gen-data", "run", "suite", "report", "oracle-check"] {
        assert!(text.contains(sub), "--help should list `{sub}`");
    }
}

#[test]
fn refuses_nonempty_out_dir_without_force() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("existing.txt"), "keep me").unwrap();
    let out = bal(&["gen-data", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("--force"), "error should mention --force");
    assert_eq!(
        std::fs::read_to_string(dir.path().join("existing.txt")).unwrap(),
        "keep me"
    );
}

#[test]
fn bad_override_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = bal(&[
        "gen-data",
        "--out",
        dir.path().to_str().unwrap(),
        "--set",
        "phantom.no_such_field=3",
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn oracle_check_passes_clean_and_fails_unperturbed() {
    let out = bal(&["oracle-check"]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    assert!(stdout(&out).lines().filter(|l| l.starts_with("PASS")).count() >= 5);

    let out = bal(&["oracle-check", "--perturb"]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "perturbed battery must detect the injected bias; stderr: {}",
        stderr(&out)
    );
    assert!(stdout(&out).contains("FAIL"), "perturbed run should print FAIL lines");
}

#[test]
fn gen_run_report_round_trip() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    let run1 = root.path().join("run1");
    let run2 = root.path().join("run2");

    let out = bal(&with_tiny(&["gen-data", "--out", data.to_str().unwrap()]));
    assert_eq!(out.status.code(), Some(0), "gen-data failed: {}", stderr(&out));
    assert!(data.join("manifest.tsv").is_file());
    assert!(data.join("config.toml").is_file());

    let run_args = |out_dir: &Path| {
        with_tiny(&[
            "run",
            "--data",
            data.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ])
        .iter()
        .map(|s| s.to_string())
        .collect::<Vec<_>>()
    };
    for dir in [&run1, &run2] {
        let args: Vec<String> = run_args(dir);
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        let out = bal(&refs);
        assert_eq!(out.status.code(), Some(0), "run failed: {}", stderr(&out));
    }

    // The two runs used the same config and seed: identical apart from wall_ms.
    let strip_wall = |path: &Path| -> String {
        let csv = std::fs::read_dir(path)
            .unwrap()
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .find(|p| p.extension().is_some_and(|x| x == "csv"))
            .expect("run directory should contain a results CSV");
        std::fs::read_to_string(csv)
            .unwrap()
            .lines()
            .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head).to_string())
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(strip_wall(&run1), strip_wall(&run2));

    // The frozen config re-runs to the same results.
    let frozen = run1.join("config.toml");
    assert!(frozen.is_file(), "run should freeze its resolved config");
    let run3 = root.path().join("run3");
    let out = bal(&[
        "run",
        "--data",
        data.to_str().unwrap(),
        "--out",
        run3.to_str().unwrap(),
        "--config",
        frozen.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "frozen-config run failed: {}", stderr(&out));
    assert_eq!(strip_wall(&run1), strip_wall(&run3));

    let out = bal(&["report", "--results", run1.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "report failed: {}", stderr(&out));
    let summary = std::fs::read_to_string(run1.join("summary.csv")).unwrap();
    assert!(summary.starts_with("strategy,rule,iteration,seeds,"));
    assert!(summary.lines().count() >= 2, "summary should contain data rows");
}

#[test]
fn report_on_empty_dir_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = bal(&["report", "--results", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}
