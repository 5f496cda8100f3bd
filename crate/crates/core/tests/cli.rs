use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

use slope_synth::estimators::wls_univariate;
use slope_synth::io::sig6;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_slope-synth"))
}

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("data").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", stdout(o)))
}

#[test]
fn synthesize_json_has_stable_keys() {
    let path = data("three_schools.json");
    let out = run(&["synthesize", path.to_str().unwrap(), "--report", "json"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&out);
    for key in ["method", "params", "q_e", "q_e_slopes_only", "q_b", "diagnostics"] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
    assert_eq!(v["method"], "gls");
    for key in ["label", "estimate", "variance", "z", "p", "ci"] {
        assert!(v["params"][0].get(key).is_some(), "missing params[].{key}");
    }
    for key in ["stat", "df", "p"] {
        assert!(v["q_e"].get(key).is_some(), "missing q_e.{key}");
    }
    for key in ["condition_number", "pooled_mse", "cochran_c", "f_max", "warnings"] {
        assert!(v["diagnostics"].get(key).is_some(), "missing diagnostics.{key}");
    }
    assert_eq!(v["q_e"]["df"], 6);
    assert_eq!(v["q_e_slopes_only"]["df"], 4);
    assert!(v.get("seed").is_none());
}

#[test]
fn text_and_json_carry_the_same_numbers() {
    let path = data("three_schools.json");
    let text = stdout(&run(&["synthesize", path.to_str().unwrap()]));
    let v = json(&run(&["synthesize", path.to_str().unwrap(), "--report", "json"]));
    for p in v["params"].as_array().unwrap() {
        let label = p["label"].as_str().unwrap();
        let line = text
            .lines()
            .find(|l| l.split_whitespace().next() == Some(label))
            .unwrap_or_else(|| panic!("no row for {label}"));
        let cells: Vec<&str> = line.split_whitespace().skip(1).collect();
        let expected: Vec<String> = [&p["estimate"], &p["variance"], &p["z"], &p["p"], &p["ci"][0], &p["ci"][1]]
            .iter()
            .map(|x| sig6(x.as_f64().unwrap()))
            .collect();
        assert_eq!(cells, expected, "{label}");
    }
    let q = &v["q_e"];
    let line = text.lines().find(|l| l.starts_with("Q_E ")).unwrap();
    assert!(line.contains(&sig6(q["stat"].as_f64().unwrap())));
    assert!(line.contains(&sig6(q["p"].as_f64().unwrap())));
    let c = sig6(v["diagnostics"]["cochran_c"].as_f64().unwrap());
    assert!(text.lines().any(|l| l.starts_with("Cochran's C") && l.ends_with(&c)));
}

#[test]
fn csv_weighted_synthesis_is_the_univariate_formula() {
    let path = data("slopes.csv");
    let out = run(&["synthesize", path.to_str().unwrap(), "--method", "wls", "--report", "json"]);
    assert!(out.status.success());
    let v = json(&out);
    let se = [0.0762f64, 0.0529, 0.0906];
    let (est, var) = wls_univariate(&[0.219, 0.246, 0.040], &se.map(|s| s * s)).unwrap();
    assert_eq!(v["method"], "wls");
    assert_eq!(v["params"][0]["estimate"].as_f64().unwrap(), est);
    assert_eq!(v["params"][0]["variance"].as_f64().unwrap(), var);
}

#[test]
fn corr_fill_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("se_only.json");
    std::fs::write(
        &path,
        r#"{"catalog": ["intercept", "math", "reading"], "studies": [
            {"id": "a", "n": 60, "coefficients": {"intercept": 3.1, "math": 0.22, "reading": 0.31},
             "cov": {"se": [1.2, 0.07, 0.09]}},
            {"id": "b", "n": 55, "coefficients": {"intercept": 2.7, "math": 0.25, "reading": 0.36},
             "cov": {"se": [1.1, 0.06, 0.1]}}]}"#,
    )
    .unwrap();
    let out = run(&["synthesize", path.to_str().unwrap(), "--corr-fill", "0.2", "--report", "json"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&out);
    for p in v["diagnostics"]["provenance"].as_array().unwrap() {
        assert_eq!(p["provenance"], "corr-filled(0.2)");
    }
    let bare = json(&run(&["synthesize", path.to_str().unwrap(), "--report", "json"]));
    assert_eq!(bare["diagnostics"]["provenance"][0]["provenance"], "diagonal-only");
    assert!(bare["diagnostics"]["warnings"].as_array().unwrap().iter().any(|w| w.as_str().unwrap().contains("off-diagonal")));
}

#[test]
fn slopes_only_drops_the_intercept() {
    let path = data("three_schools.json");
    let v = json(&run(&["synthesize", path.to_str().unwrap(), "--slopes-only", "--report", "json"]));
    let labels: Vec<&str> = v["params"].as_array().unwrap().iter().map(|p| p["label"].as_str().unwrap()).collect();
    assert_eq!(labels, ["math", "reading"]);
    assert_eq!(v["q_e"]["df"], 4);
    assert!(v["q_e_slopes_only"].is_null());
}

#[test]
fn pooled_method_reports_pooled_mse() {
    let path = data("three_schools.json");
    let v = json(&run(&["synthesize", path.to_str().unwrap(), "--method", "pooled", "--report", "json"]));
    let expected = (61.0 * 17.46 + 56.0 * 14.24 + 64.0 * 14.05) / 181.0;
    assert!((v["diagnostics"]["pooled_mse"].as_f64().unwrap() - expected).abs() < 1e-12);
    assert_eq!(v["method"], "pooled");
}

#[test]
fn variance_check_p_values_on_request() {
    let path = data("three_schools.json");
    let v = json(&run(&[
        "synthesize",
        path.to_str().unwrap(),
        "--variance-p-reps",
        "500",
        "--seed",
        "4",
        "--report",
        "json",
    ]));
    assert_eq!(v["seed"], 4);
    let p = v["diagnostics"]["f_max_p"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&p));
    assert_eq!(v["diagnostics"]["group_sizes"], serde_json::json!([64, 59, 67]));
}

#[test]
fn verify_preset_passes() {
    let out = run(&["verify", "--preset", "paper-shape", "--seed", "7", "--report", "json"]);
    assert!(out.status.success());
    let v = json(&out);
    assert_eq!(v["seed"], 7);
    assert_eq!(v["equivalence"]["pass"], true);
    assert!(v["equivalence"]["max_coefficient_discrepancy"].as_f64().unwrap() < 1e-10);
    let text = stdout(&run(&["verify", "--seed", "7"]));
    assert!(text.starts_with("PASS"), "{text}");
}

#[test]
fn verify_reads_raw_data() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("raw.csv");
    let mut csv = String::from("study,y,x1\n");
    for (i, s) in ["a", "b", "c"].iter().enumerate() {
        for j in 0..12 {
            let x = j as f64 * 0.7 + i as f64;
            let noise = ((j * 7 + i * 3) % 5) as f64 * 0.1 - 0.2;
            csv.push_str(&format!("{s},{},{x}\n", 1.0 + 0.5 * x + noise));
        }
    }
    std::fs::write(&path, csv).unwrap();
    let v = json(&run(&["verify", "--data", path.to_str().unwrap(), "--report", "json"]));
    assert_eq!(v["equivalence"]["pass"], true);
    assert_eq!(v["equivalence"]["studies"], 3);
    assert!(v.get("seed").is_none());
}

#[test]
fn simulate_records_seed_and_ratio() {
    let out = run(&["simulate", "--reps", "60", "--seed", "12", "--methods", "pooled", "--report", "json"]);
    assert!(out.status.success());
    let v = json(&out);
    assert_eq!(v["seed"], 12);
    let p = &v["methods"][0]["params"][1];
    assert!(p["variance_ratio"].as_f64().unwrap() > 0.0);
    assert!(p["variance_ratio_se"].as_f64().unwrap() > 0.0);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();

    let empty = dir.path().join("empty.json");
    std::fs::write(&empty, r#"{"catalog": ["x"], "intercept": false, "studies": []}"#).unwrap();
    let out = run(&["synthesize", empty.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("at least one study required"));

    let cov_csv = dir.path().join("cov.csv");
    std::fs::write(&cov_csv, "study_id,slope,se,n,cov_x2\nA,0.2,0.1,40,0.01\n").unwrap();
    let out = run(&["synthesize", cov_csv.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unsupported"));

    // no study reports x2
    let unidentified = dir.path().join("unidentified.json");
    std::fs::write(
        &unidentified,
        r#"{"catalog": ["x1", "x2"], "intercept": false,
            "studies": [
              {"id": "a", "n": 40, "coefficients": {"x1": 0.3}, "cov": {"full": [[0.01]]}},
              {"id": "b", "n": 40, "coefficients": {"x1": 0.2}, "cov": {"full": [[0.02]]}}]}"#,
    )
    .unwrap();
    let out = run(&["synthesize", unidentified.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("x2"));

    let out = run(&["synthesize", data("three_schools.json").to_str().unwrap(), "--alpha", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
}
