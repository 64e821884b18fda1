use assert_cmd::Command;
use predicates::prelude::*;

fn bin() -> Command {
    Command::cargo_bin("savi-alloc").unwrap()
}

fn write_config(dir: &std::path::Path, name: &str, body: serde_json::Value) -> std::path::PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(&body).unwrap()).unwrap();
    path
}

fn base_config(out: &std::path::Path) -> serde_json::Value {
    serde_json::json!({
        "graph": "chain",
        "frame_count": 3,
        "latent_dim": 2,
        "pixel_count": 2,
        "steps": 5,
        "learning_rate": 0.05,
        "window": 1,
        "seeds": [0, 1, 2, 3, 4, 5, 6, 7, 8, 9],
        "output_path": out.join("out")
    })
}

#[test]
fn compare_variants_emits_forty_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.json", base_config(dir.path()));
    bin()
        .arg("compare-variants")
        .arg("--config")
        .arg(&cfg)
        .assert()
        .success();
    let csv = std::fs::read_to_string(dir.path().join("out.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 41, "header plus 4 variants x 10 seeds");
    assert_eq!(
        lines[0],
        "suite,seed,variant,steps,learning_rate,window,final_objective,gop_cost,eval_count,wall_time_ms"
    );
    assert!(csv.ends_with('\n'));
    // Rows are sorted by (seed, variant).
    let keys: Vec<(u64, String)> = lines[1..]
        .iter()
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[1].parse().unwrap(), f[2].to_string())
        })
        .collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);
    // JSON sidecar holds the same rows.
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out.json")).unwrap())
            .unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), 40);
}

#[test]
fn trace_suite_matches_golden() {
    let dir = tempfile::tempdir().unwrap();
    let mut body = base_config(dir.path());
    body["steps"] = serde_json::json!(2);
    body["seeds"] = serde_json::json!([0]);
    let cfg = write_config(dir.path(), "cfg.json", body);
    bin().arg("trace").arg("--config").arg(&cfg).assert().success();
    let trace = std::fs::read_to_string(dir.path().join("out.trace")).unwrap();
    let golden = include_str!("../../savi-alloc/tests/golden/fig9_chain3_k2.trace");
    assert_eq!(trace, golden);
    assert_eq!(trace.lines().count(), 27);
}

#[test]
fn runs_are_deterministic_modulo_wall_time() {
    let dir = tempfile::tempdir().unwrap();
    let mut body = base_config(dir.path());
    body["seeds"] = serde_json::json!([4, 5]);
    let cfg = write_config(dir.path(), "cfg.json", body);
    let strip = |path: &std::path::Path| -> String {
        std::fs::read_to_string(path)
            .unwrap()
            .lines()
            .map(|l| l.rsplit_once(',').unwrap().0.to_string())
            .collect::<Vec<_>>()
            .join("\n")
    };
    bin()
        .arg("compare-variants")
        .arg("--config")
        .arg(&cfg)
        .assert()
        .success();
    let first = strip(&dir.path().join("out.csv"));
    bin()
        .arg("compare-variants")
        .arg("--config")
        .arg(&cfg)
        .assert()
        .success();
    let second = strip(&dir.path().join("out.csv"));
    assert_eq!(first, second);
}

#[test]
fn missing_field_is_named_with_exit_code_one() {
    let dir = tempfile::tempdir().unwrap();
    let mut body = base_config(dir.path());
    body.as_object_mut().unwrap().remove("learning_rate");
    let cfg = write_config(dir.path(), "cfg.json", body);
    bin()
        .arg("compare-variants")
        .arg("--config")
        .arg(&cfg)
        .assert()
        .code(1)
        .stderr(predicate::str::contains("missing field `learning_rate`"))
        .stderr(predicate::str::contains("compare-variants"));
}

#[test]
fn unknown_suite_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.json", base_config(dir.path()));
    bin()
        .arg("frobnicate")
        .arg("--config")
        .arg(&cfg)
        .assert()
        .code(1)
        .stderr(predicate::str::contains("unknown suite `frobnicate`"));
}

#[test]
fn unreadable_config_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    bin()
        .arg("compare-variants")
        .arg("--config")
        .arg(dir.path().join("nope.json"))
        .assert()
        .code(1)
        .stderr(predicate::str::contains("config error"));
}

#[test]
fn divergent_run_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let mut body = base_config(dir.path());
    body["learning_rate"] = serde_json::json!(1e6);
    body["steps"] = serde_json::json!(50);
    body["seeds"] = serde_json::json!([0]);
    let cfg = write_config(dir.path(), "cfg.json", body);
    bin()
        .arg("compare-variants")
        .arg("--config")
        .arg(&cfg)
        .assert()
        .code(2)
        .stderr(predicate::str::contains("numerical error"));
    assert!(!dir.path().join("out.csv").exists());
}

#[test]
fn cli_overrides_take_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.json", base_config(dir.path()));
    let out2 = dir.path().join("alt");
    bin()
        .arg("compare-variants")
        .arg("--config")
        .arg(&cfg)
        .arg("--seed")
        .arg("7")
        .arg("--steps")
        .arg("3")
        .arg("--out")
        .arg(&out2)
        .assert()
        .success();
    let csv = std::fs::read_to_string(out2.with_extension("csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 5, "one seed, four variants");
    for line in &lines[1..] {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f[1], "7");
        assert_eq!(f[3], "3");
    }
}

#[test]
fn window_sweep_covers_every_window() {
    let dir = tempfile::tempdir().unwrap();
    let mut body = base_config(dir.path());
    body["frame_count"] = serde_json::json!(4);
    body["seeds"] = serde_json::json!([3]);
    body["steps"] = serde_json::json!(4);
    body["learning_rate"] = serde_json::json!(0.02);
    let cfg = write_config(dir.path(), "cfg.json", body);
    bin()
        .arg("window-sweep")
        .arg("--config")
        .arg(&cfg)
        .assert()
        .success();
    let csv = std::fs::read_to_string(dir.path().join("out.csv")).unwrap();
    let windows: Vec<&str> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(5).unwrap())
        .collect();
    assert_eq!(windows, ["0", "1", "2", "3"]);
}

#[test]
fn density_analog_ordering_holds_on_most_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let body = serde_json::json!({
        "steps": 8,
        "learning_rate": 0.1,
        "seeds": (0u64..50).collect::<Vec<_>>(),
        "output_path": dir.path().join("out")
    });
    let cfg = write_config(dir.path(), "cfg.json", body);
    bin()
        .arg("density-analog")
        .arg("--config")
        .arg(&cfg)
        .assert()
        .success();
    let csv = std::fs::read_to_string(dir.path().join("out.csv")).unwrap();
    let mut per_seed: std::collections::BTreeMap<u64, std::collections::HashMap<String, f64>> =
        Default::default();
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        per_seed
            .entry(f[1].parse().unwrap())
            .or_default()
            .insert(f[2].to_string(), f[6].parse().unwrap());
    }
    assert_eq!(per_seed.len(), 50);
    let mut hold = 0;
    for m in per_seed.values() {
        assert_eq!(m.len(), 4);
        if m["favi"] <= m["naive"] && m["naive"] <= m["approx"] && m["approx"] <= m["accurate"] {
            hold += 1;
        }
    }
    assert!(hold >= 40, "ordering held on {hold}/50 seeds");
}

#[test]
fn verify_gradients_reports_small_errors() {
    let dir = tempfile::tempdir().unwrap();
    let mut body = base_config(dir.path());
    body["seeds"] = serde_json::json!([0, 1]);
    body["nonlinearity"] = serde_json::json!("tanh");
    let cfg = write_config(dir.path(), "cfg.json", body);
    bin()
        .arg("verify-gradients")
        .arg("--config")
        .arg(&cfg)
        .assert()
        .success();
    let csv = std::fs::read_to_string(dir.path().join("out.csv")).unwrap();
    for line in csv.lines().skip(1) {
        let worst: f64 = line.split(',').nth(6).unwrap().parse().unwrap();
        assert!(worst < 1e-3, "worst rel err {worst}");
    }
}
