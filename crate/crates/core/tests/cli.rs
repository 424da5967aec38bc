use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_benign-lab");

fn run(args: &[&str]) -> Output {
    let out = Command::new(BIN).args(args).output().expect("binary runs");
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn header(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

#[test]
fn train_writes_every_requested_output() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    run(&[
        "train", "--d", "200", "--n", "20", "--m", "4", "--iters", "40", "--eta", "0.05", "--seed", "3", "--n-test", "100",
        "--out", &p("traj.csv"), "--report", &p("report.json"), "--checkpoint", &p("ckpt.csv"), "--decomp", &p("coeffs.csv"),
        "--dataset-dir", &p("data"),
    ]);
    assert_eq!(
        header(&dir.path().join("traj.csv")),
        "iter,loss,lmin,lmax,signal_inner_max,noise_inner_max,v1_max,v2_max,ratio_noise,ratio_signal"
    );
    assert_eq!(fs::read_to_string(dir.path().join("traj.csv")).unwrap().lines().count(), 42);
    assert_eq!(header(&dir.path().join("ckpt.csv")), "kind,j,r,index,value");
    assert_eq!(header(&dir.path().join("coeffs.csv")), "iter,j,r,gamma,rho_bar_sum,rho_under_sum,rho_max,rho_min");
    assert_eq!(header(&dir.path().join("data/points.csv")), "index,label,signal_slot");
    assert!(header(&dir.path().join("data/noise.csv")).starts_with("index,xi_0,xi_1"));

    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["iterations"], 40);
    assert_eq!(report["conditions"]["checks"].as_array().unwrap().len(), 7);
    assert!(report["stage"]["window_ok"].is_array());
}

#[test]
fn train_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for out in [&a, &b] {
        run(&["train", "--d", "100", "--n", "10", "--m", "3", "--iters", "20", "--seed", "11", "--out", out.to_str().unwrap()]);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn diagnose_reads_a_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let traj = dir.path().join("traj.csv");
    run(&["train", "--d", "200", "--n", "20", "--m", "4", "--iters", "60", "--eta", "0.1", "--out", traj.to_str().unwrap()]);
    let window = dir.path().join("window.csv");
    let out = run(&["diagnose", traj.to_str().unwrap(), "--csv", window.to_str().unwrap()]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["window_ok"].as_array().unwrap().len(), 61);
    assert!(report["stage1_end"].is_null());
    assert_eq!(header(&window), "iter,window_ok,ratio_noise");
}

#[test]
fn seqsim_prints_and_writes() {
    let out = run(&["seqsim", "--a0", "0", "--b0", "1", "--A", "0.04", "--B", "0.01", "--steps", "100"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().next().unwrap(), "t,a,b,ratio");
    assert_eq!(text.lines().count(), 102);
    assert!(String::from_utf8_lossy(&out.stderr).contains("balancing_time=74"));
}

#[test]
fn sweep_writes_cells_boundary_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("grid.toml");
    fs::write(
        &spec,
        r#"
seeds = [5]
truncation = 0.7

[x]
param = "d"
values = [100, 200]

[y]
param = "mu_norm"
values = [0.5, 3.0]

[fixed]
d = 100
n = 10
m = 3
mu_norm = 1.0
sigma_p = 1.0
sigma_0 = 0.01
v_0 = 0.2
eta = 0.05
max_iters = 20
n_test = 100
"#,
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    run(&["sweep", "--spec", spec.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    let cells = fs::read_to_string(out_dir.join("cells.csv")).unwrap();
    assert_eq!(cells.lines().next().unwrap(), "row,col,axis1,axis2,acc_mean,acc_std,loss_final,flags");
    assert_eq!(cells.lines().count(), 5);
    assert_eq!(header(&out_dir.join("boundary.csv")), "col,axis1,crossing,x,y");
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["child_seeds"].as_array().unwrap().len(), 4);
}

#[test]
fn bad_spec_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("bad.toml");
    fs::write(&spec, "seeds = []\n").unwrap();
    let out = Command::new(BIN).args(["sweep", "--spec", spec.to_str().unwrap(), "--out", "unused"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}
