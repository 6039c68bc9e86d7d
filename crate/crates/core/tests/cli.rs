use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn volfn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_volfn")).args(args).output().expect("spawn volfn")
}

fn tmp(name: &str) -> PathBuf {
    let p = std::env::temp_dir().join(format!("volfn-cli-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&p);
    std::fs::create_dir_all(&p).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const DN: &str = "1.6958350291683626e-7"; // 1/(252·23400)

fn simulated(dir: &Path) -> PathBuf {
    let out = volfn(&["simulate", "--days", "3", "--seed", "11", "--out", s(dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    dir.join("grid.csv")
}

#[test]
fn kernel_constants_passthrough() {
    let d = tmp("kc");
    let out = volfn(&["kernel-constants", "--kernel", "minmax", "--out", s(&d)]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let c = &v["constants"];
    assert!((c["phi0_at_0"].as_f64().unwrap() - 1.0 / 12.0).abs() < 1e-8);
    assert!((c["phi11"].as_f64().unwrap() - 1.0 / 6.0).abs() < 1e-8);
    assert!(d.join("manifest.json").exists());
}

#[test]
fn estimate_end_to_end_and_reproducible() {
    let d = tmp("est");
    let grid = simulated(&d.join("sim"));
    let run = |o: &Path| {
        let out = volfn(&[
            "estimate", "--input", s(&grid), "--delta-n", DN, "--functional", "square", "--mode", "hat",
            "--theta", "0.5", "--varrho", "0.3", "--out", s(o),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        out.stdout
    };
    let a = run(&d.join("a"));
    let b = run(&d.join("b"));
    assert_eq!(a, b);
    let v: serde_json::Value = serde_json::from_slice(&a).unwrap();
    let value = v["value"][0].as_f64().unwrap();
    let ci = &v["ci"][0];
    assert!(ci[0].as_f64().unwrap() <= value && value <= ci[1].as_f64().unwrap());
    let ma = std::fs::read(d.join("a/manifest.json")).unwrap();
    let mb = std::fs::read(d.join("b/manifest.json")).unwrap();
    let (ma, mb): (serde_json::Value, serde_json::Value) =
        (serde_json::from_slice(&ma).unwrap(), serde_json::from_slice(&mb).unwrap());
    assert_eq!(ma["inputs"], mb["inputs"]);
    assert_eq!(ma["outputs"], mb["outputs"]);
    assert_eq!(ma["inputs"][0]["blob_sha1"].as_str().unwrap().len(), 40);
}

#[test]
fn config_file_with_flag_override() {
    let d = tmp("cfg");
    let grid = simulated(&d.join("sim"));
    let cfg = d.join("run.toml");
    std::fs::write(
        &cfg,
        format!("input = {:?}\ndelta_n = {DN}\nfunctional = \"trace\"\ntheta = 0.5\nvarrho = 0.3\n", s(&grid)),
    )
    .unwrap();
    let out = volfn(&["--config", s(&cfg), "estimate", "--theta", "0.4", "--out", s(&d.join("o"))]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("o/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["config"]["theta"].as_f64(), Some(0.4));
    assert_eq!(m["config"]["varrho"].as_f64(), Some(0.3));
}

#[test]
fn exit_codes() {
    let d = tmp("codes");
    let grid = simulated(&d.join("sim"));
    let code = |args: &[&str]| volfn(args).status.code().unwrap();
    // psd-only flag in hat mode
    assert_eq!(code(&["estimate", "--input", s(&grid), "--delta-n", DN, "--functional", "square", "--mode", "hat", "--delta", "0.2", "--out", s(&d)]), 2);
    // hat-only flag in psd mode
    assert_eq!(code(&["estimate", "--input", s(&grid), "--delta-n", DN, "--functional", "square", "--psd", "--theta-prime", "1", "--out", s(&d)]), 2);
    // tuning outside the admissible range
    assert_eq!(code(&["estimate", "--input", s(&grid), "--delta-n", DN, "--functional", "square", "--kappa", "0.8", "--out", s(&d)]), 2);
    // missing input file
    assert_eq!(code(&["estimate", "--input", s(&d.join("none.csv")), "--delta-n", DN, "--functional", "square", "--out", s(&d)]), 3);
    // malformed data
    let bad = d.join("bad.csv");
    std::fs::write(&bad, "a,b\n1,2\n3\n").unwrap();
    assert_eq!(code(&["estimate", "--input", s(&bad), "--delta-n", DN, "--functional", "trace", "--out", s(&d)]), 3);
    // scalar functional on two assets
    let two = d.join("two.csv");
    let mut text = String::from("a,b\n");
    for i in 0..2000 {
        text.push_str(&format!("{},{}\n", (i as f64 * 0.37).sin() * 1e-3, (i as f64 * 0.11).cos() * 1e-3));
    }
    std::fs::write(&two, text).unwrap();
    assert_eq!(code(&["estimate", "--input", s(&two), "--delta-n", "1e-4", "--functional", "log", "--theta", "0.2", "--varrho", "0.2", "--out", s(&d)]), 2);
    // a flat price path makes log c undefined
    let flat = d.join("flat.csv");
    std::fs::write(&flat, format!("a\n{}", "0.0\n".repeat(3000))).unwrap();
    assert_eq!(code(&["estimate", "--input", s(&flat), "--delta-n", "1e-4", "--functional", "log", "--theta", "0.2", "--varrho", "0.2", "--trunc-mode", "off", "--out", s(&d)]), 4);
    // unknown subcommand flag is a usage error
    assert_eq!(code(&["estimate", "--no-such-flag"]), 2);
}

#[test]
fn pca_and_mc_artifacts() {
    let d = tmp("pca");
    let sim = d.join("sim");
    let out = volfn(&["simulate", "--model", "factor", "--d", "5", "--r", "2", "--obs-per-day", "2340", "--days", "10", "--seed", "2", "--out", s(&sim)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(sim.join("latent.csv").exists());
    let out = volfn(&[
        "pca", "--input", s(&sim.join("grid.csv")), "--delta-n", "1.6958350291683625e-6", "--clusters", "1,1,3",
        "--vectors", "1", "--theta", "0.2", "--varrho", "0.3", "--kappa", "0.78", "--out", s(&d.join("p")),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["eigenvalues"]["values"].as_array().unwrap().len(), 3);
    assert_eq!(v["eigenvectors"][0]["vector"].as_array().unwrap().len(), 5);

    let study = d.join("study.toml");
    std::fs::write(
        &study,
        r#"
replications = 3
master_seed = 1
[model]
kind = "scalar"
[clock]
obs_per_day = 2340
days = 5
[[estimators]]
label = "sq"
target = { kind = "functional", name = "square" }
[estimators.config]
plan = { mode = "rate-optimal", theta = 0.3, varrho = 0.1, kappa = 0.7, rho = 0.47 }
truncation = { mode = "elementwise", alpha_mult = 1.5, rho = 0.47, scale = "volatility" }
"#,
    )
    .unwrap();
    let m = d.join("mc");
    let out = volfn(&["--config", s(&study), "mc", "--plot-data", "--out", s(&m)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["records.csv", "summary.json", "density.csv", "manifest.json"] {
        assert!(m.join(f).exists(), "{f}");
    }
    let rec = std::fs::read_to_string(m.join("records.csv")).unwrap();
    assert_eq!(rec.lines().count(), 4);
}
