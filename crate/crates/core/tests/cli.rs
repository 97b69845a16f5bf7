use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn icl_lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_icl-lab"))
        .args(args)
        .env("ICL_LAB_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_owned()
}

fn simulate_config(out: &Path) -> String {
    format!(
        "dist = balanced(2)\nN = 2\neta = 1\nmax_iters = 5\nestimator = exact\nstop = never\nrecord_every = 1\nemit = trajectory_csv, phase_json, loss_json, plotdata\noutput_dir = {}\n",
        out.display()
    )
}

#[test]
fn simulate_first_step_matches_hand_gradient() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = write_config(tmp.path(), "run.cfg", &simulate_config(&out));
    let o = icl_lab(&["simulate", &cfg]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));

    let csv = fs::read_to_string(out.join("trajectory.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(header[0], "t");
    let a1 = header.iter().position(|h| *h == "A_1").unwrap();
    let row1: Vec<&str> = lines.nth(1).unwrap().split(',').collect();
    assert_eq!(row1[0], "1");
    let value: f64 = row1[a1].parse().unwrap();
    assert!((value - 1.0 / 16.0).abs() < 1e-15);

    for f in ["phases.json", "loss.json"] {
        let text = fs::read_to_string(out.join(f)).unwrap();
        serde_json::from_str::<serde_json::Value>(&text).unwrap();
    }
    assert!(out.join("plotdata").is_dir());

    let o = icl_lab(&["report", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert!(!o.stdout.is_empty());
}

#[test]
fn simulate_is_byte_identical_across_runs_and_threads() {
    let tmp = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for (i, threads) in ["1", "4"].iter().enumerate() {
        let out = tmp.path().join(format!("run{i}"));
        let body = format!(
            "dist = imbalanced(3, 0.6)\nN = 40\neta = 2\nmax_iters = 20\nestimator = mc(3000)\nseed = 7\noutput_dir = {}\n",
            out.display()
        );
        let cfg = write_config(tmp.path(), &format!("run{i}.cfg"), &body);
        let o = Command::new(env!("CARGO_BIN_EXE_icl-lab"))
            .args(["simulate", &cfg])
            .env("ICL_LAB_THREADS", threads)
            .output()
            .unwrap();
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        outputs.push(out);
    }
    for f in ["trajectory.csv", "phases.json", "loss.json"] {
        let a = fs::read(outputs[0].join(f)).unwrap();
        let b = fs::read(outputs[1].join(f)).unwrap();
        assert_eq!(a, b, "{f} differs");
    }
}

#[test]
fn config_errors_exit_with_usage_code_and_line() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "bad.cfg", "dist = balanced(3)\nN = 10\neta = fast\n");
    let o = icl_lab(&["simulate", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"));

    let o = icl_lab(&["verify", "everything"]);
    assert_eq!(o.status.code(), Some(2));

    let o = icl_lab(&["simulate", "/nonexistent/config"]);
    assert_eq!(o.status.code(), Some(2));

    let o = icl_lab(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn verify_all_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("verify.json");
    let o = icl_lab(&["verify", "all", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out).unwrap()).unwrap();
    assert_eq!(report["passed"], serde_json::Value::Bool(true));
}

#[test]
fn halving_eta_roughly_doubles_phase_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sweep");
    let body = format!(
        "dist = balanced(3)\nN = 144\nmax_iters = 2000\neta = 1\nestimator = exact\nstop = phase_one\nsweep.eta = 1, 0.5\noutput_dir = {}\n",
        out.display()
    );
    let cfg = write_config(tmp.path(), "sweep.cfg", &body);
    let o = icl_lab(&["sweep", &cfg]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("sweep.json")).unwrap()).unwrap();
    let rows = report["rows"].as_array().unwrap();
    let t1 = |eta: f64| {
        rows.iter()
            .find(|r| r["eta"].as_f64() == Some(eta))
            .and_then(|r| r["t1_max"].as_u64())
            .unwrap() as f64
    };
    let ratio = t1(0.5) / t1(1.0);
    assert!((1.8..=2.2).contains(&ratio), "T1 ratio {ratio}");
    assert!(out.join("sweep.csv").exists());
}
