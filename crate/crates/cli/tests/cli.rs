use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fluxshard"))
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = bin().args(args).current_dir(cwd).output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn fail(args: &[&str], cwd: &Path) -> Output {
    let out = bin().args(args).current_dir(cwd).output().unwrap();
    assert!(!out.status.success(), "{args:?} should fail");
    out
}

fn datagen(dir: &Path, scenario: &str, frames: &str) {
    ok(&["datagen", "--scenario", scenario, "--frames", frames, "--size", "64x64", "--seed", "3", "--out", "seq"], dir);
}

fn column(csv: &str, name: &str) -> Vec<String> {
    let mut lines = csv.lines();
    let idx = lines.next().unwrap().split(',').position(|h| h == name).unwrap();
    lines
        .filter(|l| !l.starts_with("mean,"))
        .map(|l| l.split(',').nth(idx).unwrap().to_string())
        .collect()
}

#[test]
fn run_csv_shape_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    datagen(d, "pan:0,2", "8");
    ok(&["trace", "--tier", "low", "--seed", "1", "--out", "low.csv"], d);
    let a = ok(&["run", "--seq", "seq", "--trace", "low.csv"], d);
    let b = ok(&["run", "--seq", "seq", "--trace", "low.csv"], d);
    assert_eq!(a, b);
    let lines: Vec<&str> = a.lines().collect();
    assert_eq!(lines[0], "frame,mode,endpoint,rho_e,rho_c,reuse,compute_ratio,tx_bytes,T_est_ms,T_realized_ms,fidelity");
    assert_eq!(lines.len(), 1 + 8 + 1);
    assert!(lines[9].starts_with("mean,fluxshard,cloud="));
    for f in column(&a, "fidelity") {
        assert!(f.parse::<f64>().unwrap() > 0.9999, "{f}");
    }
}

#[test]
fn dense_and_no_sparse_are_full_compute() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    datagen(d, "static", "5");
    let dense = ok(&["run", "--seq", "seq", "--mode", "dense", "--tier", "high"], d);
    assert!(column(&dense, "compute_ratio").iter().all(|c| c == "1.000000"));
    let ns = ok(&["run", "--seq", "seq", "--no-sparse", "--tier", "high"], d);
    assert!(column(&ns, "compute_ratio").iter().all(|c| c == "1.000000"));
    let fx = ok(&["run", "--seq", "seq", "--tier", "high"], d);
    assert_eq!(column(&fx, "reuse")[1..].iter().filter(|r| *r != "1.000000").count(), 0);
}

#[test]
fn ablation_flags_parse_and_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    datagen(d, "two_region", "4");
    for flags in [&["--no-rfap"][..], &["--per-layer-rfap"], &["--no-remap"], &["--edge-only"], &["--loopback-tcp"]] {
        let mut args = vec!["run", "--seq", "seq"];
        args.extend_from_slice(flags);
        let out = ok(&args, d);
        assert_eq!(out.lines().count(), 6, "{flags:?}");
    }
    let edge = ok(&["run", "--seq", "seq", "--edge-only"], d);
    assert!(column(&edge, "endpoint").iter().all(|e| e == "edge"));
    fail(&["run", "--seq", "seq", "--no-rfap", "--per-layer-rfap"], d);
}

#[test]
fn calibrate_then_run_with_thresholds() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    datagen(d, "two_region", "6");
    ok(&["calibrate", "--seq", "seq", "--alpha", "0.97", "--out", "t.txt"], d);
    let t = std::fs::read_to_string(d.join("t.txt")).unwrap();
    assert!(t.starts_with("tau0="), "{t}");
    assert!(t.contains("alpha=0.97"));
    let out = ok(&["run", "--seq", "seq", "--thresholds", "t.txt", "--edge-only"], d);
    let mean = out.lines().last().unwrap();
    let fid: f64 = mean.rsplit(',').next().unwrap().parse().unwrap();
    assert!(fid >= 0.97, "{mean}");
}

#[test]
fn profile_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let p = ok(&["profile", "--size", "64x64", "--isotonic"], d);
    let lat: Vec<f64> = p.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(lat.len(), 5);
    assert!(lat.windows(2).all(|w| w[0] <= w[1]));
    assert!((lat[4] - 446.8).abs() < 1e-9);

    datagen(d, "static", "4");
    ok(&["run", "--seq", "seq", "--out", "one.csv"], d);
    let r = ok(&["report", "one.csv"], d);
    let line = r.lines().nth(1).unwrap();
    assert!(line.starts_with("one,fluxshard,3,"), "{line}");
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(fail(&["datagen", "--scenario", "wobble", "--out", "x"], d).status.code(), Some(2));
    assert_eq!(fail(&["report"], d).status.code(), Some(2));
    assert_eq!(fail(&["run", "--seq", "missing"], d).status.code(), Some(1));
}

#[test]
fn serve_and_remote_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    datagen(d, "pan:0,2", "6");
    let mut server = bin()
        .args(["serve", "--listen", "127.0.0.1:0", "--size", "64x64"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(server.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on ").unwrap().to_string();

    let remote = ok(&["run", "--seq", "seq", "--server", &addr, "--tier", "high"], d);
    let local = ok(&["run", "--seq", "seq", "--tier", "high"], d);
    // Mismatched configuration is refused at the handshake.
    let refused = fail(&["run", "--seq", "seq", "--server", &addr, "--client-id", "2", "--no-remap"], d);
    server.kill().unwrap();
    server.wait().unwrap();

    assert_eq!(remote, local);
    assert!(column(&remote, "endpoint").iter().any(|e| e == "cloud"));
    assert!(String::from_utf8_lossy(&refused.stderr).contains("handshake"));
}
