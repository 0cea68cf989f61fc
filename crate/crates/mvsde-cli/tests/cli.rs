use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn mvsde(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvsde"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

/// Every output listed in the report exists; JSON outputs parse.
fn assert_outputs(out: &Path) -> Value {
    let report = json(&out.join("report.json"));
    for o in report["outputs"].as_array().unwrap() {
        let p = Path::new(o.as_str().unwrap());
        assert!(p.exists(), "{p:?} missing");
        if p.extension().is_some_and(|e| e == "json") {
            json(p);
        }
    }
    report
}

#[test]
fn rate_order_preserving() {
    let dir = tempfile::tempdir().unwrap();
    let o = mvsde(dir.path(), &["rate", "--scenario", "orderpreserving"]);
    assert_eq!(code(&o), 0);
    let cert = json(&dir.path().join("certificate.json"));
    assert!((cert["theorem_rate"].as_f64().unwrap() - 0.6).abs() < 1e-12);
    assert_outputs(dir.path());

    let o = mvsde(
        dir.path(),
        &["rate", "--scenario", "orderpreserving", "--set", "model.strength=0.6"],
    );
    assert_eq!(code(&o), 1);
    let cert = json(&dir.path().join("certificate.json"));
    assert!((cert["theorem_rate"].as_f64().unwrap() + 0.2).abs() < 1e-12);

    let cert_path = dir.path().join("c.json");
    let o = mvsde(
        dir.path(),
        &[
            "rate",
            "--scenario",
            "orderpreserving",
            "--set",
            "model.strength=0.6",
            "--allow-noncontractive",
            "--emit-cert",
            cert_path.to_str().unwrap(),
        ],
    );
    assert_eq!(code(&o), 0);
    assert_eq!(json(&cert_path)["contractive"], false);
}

#[test]
fn rate_granular_certificate() {
    let dir = tempfile::tempdir().unwrap();
    let o = mvsde(dir.path(), &["rate", "--scenario", "granular", "--json"]);
    assert_eq!(code(&o), 0);
    let report: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["scenario"], "granular");
    let cert = json(&dir.path().join("certificate.json"));
    let g2 = &cert["g2"];
    let k = g2["k"].as_f64().unwrap();
    assert!(k > 0.0);
    assert!((k - (g2["q"].as_f64().unwrap() - g2["theta"].as_f64().unwrap())).abs() < 1e-15);
    let lambda0 = cert["constants"]["lambda0"].as_f64().unwrap();
    assert!(cert["puncture"]["kappa"].as_f64().unwrap() <= 4.0 * lambda0 + 1e-6);
}

#[test]
fn check_ou_lyapunov() {
    let dir = tempfile::tempdir().unwrap();
    let o = mvsde(dir.path(), &["check", "--scenario", "ou", "--hypotheses", "h1"]);
    assert_eq!(code(&o), 0);
    let report = assert_outputs(dir.path());
    assert_eq!(report["checks"][0]["detail"]["max_residual"].as_f64().unwrap(), 0.0);
}

#[test]
fn check_granular_full_and_integrability_failure() {
    let dir = tempfile::tempdir().unwrap();
    let o = mvsde(dir.path(), &["check", "--scenario", "granular"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let report = assert_outputs(dir.path());
    let h3 = report["checks"]
        .as_array()
        .unwrap()
        .iter()
        .find(|c| c["name"] == "h3")
        .unwrap();
    assert!(h3["detail"]["kappa"].as_f64().unwrap() <= h3["detail"]["four_lambda0"].as_f64().unwrap() + 1e-6);

    // theta0 = sigma_hat^2 / 2 = 0.5 exceeds theta2.
    let o = mvsde(
        dir.path(),
        &[
            "check",
            "--scenario",
            "granular",
            "--hypotheses",
            "h3",
            "--set",
            "model.sigma_hat=1.0",
            "--set",
            "model.theta2=0.1",
        ],
    );
    assert_eq!(code(&o), 1);
    let report = json(&dir.path().join("report.json"));
    let msg = report["checks"][0]["detail"]["integrability"].as_str().unwrap();
    assert!(msg.contains("theta2"), "{msg}");
}

fn write_curve(path: &Path, rows: &[(f64, f64)]) {
    let mut s = String::from("t,distance,ci_half,n_coupled\n");
    for (t, d) in rows {
        s.push_str(&format!("{t:.16e},{d:.16e},0,0\n"));
    }
    std::fs::write(path, s).unwrap();
}

#[test]
fn fit_exact_and_zero_rows() {
    let dir = tempfile::tempdir().unwrap();
    let curve = dir.path().join("curve.csv");
    let rows: Vec<(f64, f64)> = (0..10)
        .map(|i| (i as f64 * 0.5, (-2.0 * i as f64 * 0.5).exp()))
        .collect();
    write_curve(&curve, &rows);
    let o = mvsde(dir.path(), &["fit", curve.to_str().unwrap(), "--window", "0,4.5"]);
    assert_eq!(code(&o), 0);
    let fit = json(&dir.path().join("fit.json"));
    assert!((fit["rate"].as_f64().unwrap() - 2.0).abs() < 1e-12);
    assert!(fit["residual"].as_f64().unwrap() < 1e-12);

    let mut with_zero = rows.clone();
    with_zero[5].1 = 0.0;
    write_curve(&curve, &with_zero);
    let o = mvsde(dir.path(), &["fit", curve.to_str().unwrap(), "--window", "0,4.5"]);
    assert_eq!(code(&o), 0);
    let fit = json(&dir.path().join("fit.json"));
    assert_eq!(fit["n_zero_excluded"], 1);
    assert!((fit["rate"].as_f64().unwrap() - 2.0).abs() < 1e-12);

    let zeros: Vec<(f64, f64)> = rows.iter().map(|r| (r.0, 0.0)).collect();
    write_curve(&curve, &zeros);
    let o = mvsde(dir.path(), &["fit", curve.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
}

const SMALL_OU: [&str; 6] = ["--set", "sim.n=400", "--set", "sim.t=3.0", "--set", "sim.bootstrap=200"];

#[test]
fn simulate_ou_synchronous_rate() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec![
        "simulate",
        "--scenario",
        "ou",
        "--coupling",
        "synchronous",
        "--cost",
        "w1",
    ];
    args.extend(SMALL_OU);
    let o = mvsde(dir.path(), &args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_outputs(dir.path());
    let fit = json(&dir.path().join("fit.json"));
    assert!((fit["fit"]["rate"].as_f64().unwrap() - 1.0).abs() < 0.02);
}

#[test]
fn simulate_identical_laws_is_degenerate() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec![
        "simulate",
        "--scenario",
        "ou",
        "--set",
        "init.nu={kind=\"normal\",mean=1.0,std=0.5}",
    ];
    args.extend(SMALL_OU);
    let o = mvsde(dir.path(), &args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(json(&dir.path().join("fit.json"))["degenerate"], true);
}

#[test]
fn decay_csv_is_reproducible_across_threads() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let base = [
        "simulate",
        "--scenario",
        "ou",
        "--coupling",
        "reflection",
        "--seed",
        "11",
    ];
    let mut args = base.to_vec();
    args.extend(SMALL_OU);
    let mut a_args = args.clone();
    a_args.extend(["--threads", "1"]);
    let mut b_args = args.clone();
    b_args.extend(["--threads", "4"]);
    assert_eq!(code(&mvsde(a.path(), &a_args)), 0);
    assert_eq!(code(&mvsde(b.path(), &b_args)), 0);
    let ra = std::fs::read(a.path().join("decay.csv")).unwrap();
    let rb = std::fs::read(b.path().join("decay.csv")).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(json(&a.path().join("report.json"))["seed"], 11);
}

#[test]
fn fpe_and_psi_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let o = mvsde(dir.path(), &["fpe", "--scenario", "ou", "--set", "fpe.t=0.5"]);
    assert_eq!(code(&o), 0);
    assert_outputs(dir.path());
    let rho = std::fs::read_to_string(dir.path().join("rho_final.csv")).unwrap();
    assert!(rho.starts_with("x,rho\n"));
    let fpe = json(&dir.path().join("fpe.json"));
    assert!(fpe["mass_error"].as_f64().unwrap() <= 1e-12);

    let o = mvsde(dir.path(), &["psi", "--scenario", "granular"]);
    assert_eq!(code(&o), 0);
    let psi = std::fs::read_to_string(dir.path().join("psi.csv")).unwrap();
    assert!(psi.starts_with("r,psi,dpsi,ddpsi\n"));
    assert!(psi.lines().count() > 100);
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&mvsde(dir.path(), &["rate", "--bogus"])), 2);
    assert_eq!(code(&mvsde(dir.path(), &["rate", "--scenario", "nope"])), 2);
    assert_eq!(code(&mvsde(dir.path(), &["simulate", "--cost", "l7"])), 2);
    assert_eq!(code(&mvsde(dir.path(), &["check", "--hypotheses", "h9"])), 2);
    assert_eq!(code(&mvsde(dir.path(), &["fpe", "--scenario", "example21"])), 2);
}

#[test]
fn numerical_failure_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    // An explosive linear drift overflows the blow-up guard.
    let o = mvsde(
        dir.path(),
        &[
            "simulate",
            "--scenario",
            "ou",
            "--set",
            "model.rate=-400.0",
            "--set",
            "sim.n=10",
            "--set",
            "sim.t=1.0",
        ],
    );
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}
