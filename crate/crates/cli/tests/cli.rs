use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use itr_core::estimators::{EstimatorKind, EstimatorOptions, Functional};
use itr_core::io::{save_source, save_target};
use itr_core::pipeline::{fit_rules, ModelSpec};
use itr_core::policy::GaConfig;
use itr_core::simulation::{generate_replicate, DgpConfig};
use serde_json::Value;
use tempfile::TempDir;

fn itr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_itr"))
        .args(args)
        .env_remove("ITR_WORKERS")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_dgp() -> DgpConfig {
    DgpConfig {
        population_size: 40_000,
        target_size: 400,
        oracle_size: 5000,
        ..DgpConfig::default()
    }
}

/// Writes one simulated replicate and returns (dir, source path, target path).
fn simulated_files() -> (TempDir, PathBuf, PathBuf) {
    let dir = TempDir::new().unwrap();
    let rep = generate_replicate(&small_dgp(), 11).unwrap();
    let s = dir.path().join("source.csv");
    let t = dir.path().join("target.csv");
    save_source(&rep.source, &s).unwrap();
    save_target(&rep.target, &t).unwrap();
    (dir, s, t)
}

fn json(o: &Output) -> Value {
    assert!(o.status.success(), "{}", stderr(o));
    serde_json::from_slice(&o.stdout).expect("json report")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn simulate_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let run = |tag: &str| {
        let out = dir.path().join(format!("{tag}.csv"));
        let o = itr(&[
            "simulate", "--scenario", "tttt", "--reps", "1", "--seed", "7", "--population-size", "40000",
            "--target-size", "400", "--oracle-size", "5000", "-B", "0", "--generations", "5",
            "--ga-population", "12", "--out", p(&out), "--quiet",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        let table = std::fs::read(&out).unwrap();
        let reps = std::fs::read(dir.path().join(format!("{tag}_replicates.csv"))).unwrap();
        (table, reps)
    };
    let a = run("a");
    let b = run("b");
    assert_eq!(a, b);
    let table = String::from_utf8(a.0).unwrap();
    assert!(table.lines().count() >= 7, "{table}");
}

#[test]
fn malformed_scenario_is_a_usage_error() {
    let o = itr(&["simulate", "--scenario", "txq", "--reps", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("txq"), "{}", stderr(&o));
    let o = itr(&["fit", "--frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_target_column_is_named() {
    let (dir, s, _) = simulated_files();
    let t = dir.path().join("bad_target.csv");
    std::fs::write(&t, "x1,x3,design_weight\n0.1,0.2,25\n0.3,-0.1,25\n").unwrap();
    let o = itr(&["fit", "--source", p(&s), "--target", p(&t), "--estimators", "acw"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("x2"), "{}", stderr(&o));
}

#[test]
fn fit_matches_in_memory_pipeline() {
    let (_dir, s, t) = simulated_files();
    let o = itr(&[
        "fit", "--source", p(&s), "--target", p(&t), "--estimators", "acw,cw-or", "--generations", "6",
        "--ga-population", "16", "--seed", "3", "--json",
    ]);
    let report = json(&o);

    let rep = generate_replicate(&small_dgp(), 11).unwrap();
    let ga = GaConfig {
        population_size: 16,
        generations: 6,
        seed: 3,
        ..GaConfig::default()
    };
    let kinds = [EstimatorKind::Acw, EstimatorKind::CwOr];
    let expected = fit_rules(
        &rep.source,
        &rep.target,
        &ModelSpec::default(),
        Functional::Rmst(4.0),
        &kinds,
        &ga,
        None,
        &EstimatorOptions::default(),
    )
    .unwrap();
    let rows = report["estimates"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    for (row, exp) in rows.iter().zip(&expected) {
        assert_eq!(row["estimator"], exp.kind.to_string());
        let est = row["estimate"].as_f64().unwrap();
        assert!((est - exp.estimate).abs() <= 1e-12, "{est} vs {}", exp.estimate);
        let eta: Vec<f64> = row["eta"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        assert_eq!(eta.len(), exp.rule.eta().len());
        assert!(eta.iter().zip(exp.rule.eta()).all(|(a, b)| (a - b).abs() <= 1e-12 * (1.0 + b.abs())));
    }
    let acw = &rows[0];
    let (lo, hi) = (acw["ci"][0].as_f64().unwrap(), acw["ci"][1].as_f64().unwrap());
    let est = acw["estimate"].as_f64().unwrap();
    assert!(lo <= est && est <= hi);
    assert_eq!(report["config"]["seed"], 3);
    assert!(report["runtime"]["workers"].as_u64().unwrap() >= 1);
}

#[test]
fn five_covariate_rule_is_normalized() {
    let dir = TempDir::new().unwrap();
    let names = ["age", "sofa", "lactate", "bmi", "creat"];
    let mut src = format!("{},a,u,delta\n", names.join(","));
    let mut tgt = format!("{},design_weight\n", names.join(","));
    let mut state: u64 = 42;
    let mut unif = || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((state >> 11) as f64 + 0.5) / (1u64 << 53) as f64
    };
    for i in 0..400 {
        let x: Vec<f64> = (0..5).map(|_| unif() * 2.0 - 1.0).collect();
        let a = u8::from(unif() < 0.5);
        let rate = (0.3 * x[0] - 0.5 * x[1] * if a == 1 { -1.0 } else { 1.0 }).exp();
        let t = -unif().ln() / rate;
        let c = -unif().ln() / 0.2;
        let cols: Vec<String> = x.iter().map(|v| v.to_string()).collect();
        src.push_str(&format!("{},{a},{},{}\n", cols.join(","), t.min(c), u8::from(t <= c)));
        if i < 300 {
            let z: Vec<String> = (0..5).map(|_| (unif() * 2.0 - 0.8).to_string()).collect();
            tgt.push_str(&format!("{},10\n", z.join(",")));
        }
    }
    let s = dir.path().join("s.csv");
    let t = dir.path().join("t.csv");
    std::fs::write(&s, src).unwrap();
    std::fs::write(&t, tgt).unwrap();
    let o = itr(&[
        "fit", "--source", p(&s), "--target", p(&t), "--estimators", "acw", "--generations", "5",
        "--ga-population", "12", "--horizon", "2", "--json",
    ]);
    let report = json(&o);
    let row = &report["estimates"][0];
    let eta = row["eta"].as_array().unwrap();
    assert_eq!(eta.len(), 6);
    assert_eq!(eta[5].as_f64().unwrap().abs(), 1.0);
    assert_eq!(row["covariates"][4], "creat");
}

#[test]
fn bootstrap_is_deterministic() {
    let (_dir, s, t) = simulated_files();
    let args = [
        "bootstrap", "--source", p(&s), "--target", p(&t), "--estimators", "acw,ort", "--eta",
        "-1,0.5,-2,1", "-B", "2", "--seed", "5", "--json",
    ];
    let a = json(&itr(&args));
    let b = json(&itr(&args));
    assert_eq!(a["estimates"], b["estimates"]);
    assert_eq!(a["bootstrap"], b["bootstrap"]);
    let rows = a["bootstrap"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    for r in rows {
        assert_eq!(r["requested"], 2);
        assert!(r["std_error"].as_f64().unwrap() >= 0.0);
    }
    // the supplied rule is used as given, after normalization
    assert_eq!(a["estimates"][0]["eta"][2].as_f64().unwrap(), -2.0);
}

#[test]
fn infeasible_calibration_is_a_numerical_failure() {
    let dir = TempDir::new().unwrap();
    let mut src = String::from("x1,a,u,delta\n");
    for i in 0..60 {
        let x = i as f64 / 60.0;
        src.push_str(&format!("{x},{},{},{}\n", i % 2, 1.0 + x + (i % 7) as f64 * 0.1, u8::from(i % 3 != 0)));
    }
    let s = dir.path().join("s.csv");
    let t = dir.path().join("t.csv");
    std::fs::write(&s, src).unwrap();
    std::fs::write(&t, "x1,design_weight\n5,10\n6,10\n").unwrap();
    let o = itr(&[
        "fit", "--source", p(&s), "--target", p(&t), "--estimators", "acw", "--eta", "0,1", "--horizon", "1.5",
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn flags_override_config_file() {
    let (dir, s, t) = simulated_files();
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        format!(
            "seed = 9\nestimators = [\"naive\"]\neta = [-1.0, 0.5, -2.0, 1.0]\n[data]\nsource = {:?}\ntarget = {:?}\n",
            p(&s),
            p(&t)
        ),
    )
    .unwrap();
    let report = json(&itr(&["fit", "--config", p(&cfg), "--json"]));
    assert_eq!(report["estimates"][0]["estimator"], "naive");
    assert_eq!(report["seed"], 9);
    let report = json(&itr(&["fit", "--config", p(&cfg), "--estimators", "ort", "--json"]));
    assert_eq!(report["estimates"][0]["estimator"], "ort");
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "estimatorz = []\n").unwrap();
    assert_eq!(itr(&["fit", "--config", p(&bad)]).status.code(), Some(2));
}
