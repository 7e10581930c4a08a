//! Integration tests for the `dmaplane` binary surface: argument
//! validation, output shapes, and the documented queue-depth sweep
//! behavior.

use std::process::Command;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_dmaplane")
}

fn run(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(bin()).args(args).output().expect("spawn");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn qd_sweep_throughput_is_monotone_from_depth_1_to_4() {
    let (code, stdout, _) = run(&[
        "qd-sweep",
        "--depths",
        "1,4",
        "--ops",
        "1000",
        "--payload",
        "4096",
        "--format",
        "csv",
    ]);
    assert_eq!(code, 0, "stdout: {stdout}");
    let mut rows = stdout
        .lines()
        .filter(|l| l.chars().next().is_some_and(|c| c.is_ascii_digit()));
    let parse = |line: &str| -> (u32, f64) {
        let mut cols = line.split(',');
        let depth = cols.next().unwrap().parse().unwrap();
        let mbps = cols.next().unwrap().parse().unwrap();
        (depth, mbps)
    };
    let (d1, m1) = parse(rows.next().expect("depth-1 row"));
    let (d4, m4) = parse(rows.next().expect("depth-4 row"));
    assert_eq!((d1, d4), (1, 4));
    assert!(
        m4 >= m1,
        "throughput should not degrade from depth 1 ({m1} MB/s) to depth 4 ({m4} MB/s)"
    );
}

#[test]
fn qd_sweep_rejects_out_of_range_depths() {
    for bad in ["0", "65", "1,0,4"] {
        let (code, _, stderr) = run(&["qd-sweep", "--depths", bad, "--ops", "10"]);
        assert_eq!(code, 1, "depth list {bad:?} should be rejected");
        assert!(
            stderr.contains("invalid argument"),
            "stderr for {bad:?}: {stderr}"
        );
    }
}

#[test]
fn unknown_subcommand_exits_with_usage_error() {
    let (code, _, _) = run(&["no-such-command"]);
    assert_eq!(code, 2);
}

#[test]
fn selftest_reports_all_pass() {
    let (code, stdout, _) = run(&["selftest"]);
    assert_eq!(code, 0, "stdout: {stdout}");
    let pass = stdout.lines().filter(|l| l.starts_with("PASS")).count();
    let fail = stdout.lines().filter(|l| l.starts_with("FAIL")).count();
    assert!(pass >= 5, "expected at least 5 checks, saw {pass}");
    assert_eq!(fail, 0, "stdout: {stdout}");
}

#[test]
fn stats_prints_all_five_sections() {
    let (code, stdout, _) = run(&["stats"]);
    assert_eq!(code, 0);
    for section in ["stats", "buffers", "rdma", "flow", "histogram"] {
        assert!(
            stdout.contains(&format!("=== {section} ===")),
            "missing section {section}: {stdout}"
        );
    }
    assert!(stdout.contains("dmaplane-stats v1"));
}

#[test]
fn seed_makes_stress_runs_reproducible() {
    let args = [
        "--seed",
        "42",
        "stress",
        "--seconds",
        "1",
        "--max-credits",
        "4",
        "--high",
        "3",
        "--low",
        "1",
    ];
    let (code, stdout, _) = run(&args);
    assert_eq!(code, 0, "stdout: {stdout}");
    let totals = stdout
        .lines()
        .find(|l| l.starts_with("totals:"))
        .expect("totals line");
    assert!(totals.contains("overflows=0"), "{totals}");
    assert!(totals.contains("receiver_not_ready=0"), "{totals}");
}
