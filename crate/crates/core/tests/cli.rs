use serde_json::Value;
use std::path::Path;
use std::process::{Command, Output};

fn mice(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mice")).args(args).env("MICE_THREADS", "1").output().expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_report(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Checks `v` against the subset of JSON Schema used by the shipped report schema.
fn conforms(v: &Value, schema: &Value, at: &str) -> Result<(), String> {
    let fail = |what: &str| Err(format!("{at}: {what}"));
    if let Some(c) = schema.get("const") {
        if v != c {
            return fail("const mismatch");
        }
    }
    if let Some(options) = schema.get("enum").and_then(Value::as_array) {
        if !options.contains(v) {
            return fail("not in enum");
        }
    }
    if let Some(t) = schema.get("type") {
        let types: Vec<&str> = match t {
            Value::String(s) => vec![s.as_str()],
            Value::Array(a) => a.iter().filter_map(Value::as_str).collect(),
            _ => vec![],
        };
        let ok = types.iter().any(|t| match *t {
            "object" => v.is_object(),
            "array" => v.is_array(),
            "string" => v.is_string(),
            "boolean" => v.is_boolean(),
            "null" => v.is_null(),
            "number" => v.is_number(),
            "integer" => v.is_u64() || v.is_i64(),
            _ => false,
        });
        if !ok {
            return fail(&format!("expected {types:?}, found {v}"));
        }
    }
    if let Some(x) = v.as_f64() {
        let bound = |k: &str| schema.get(k).and_then(Value::as_f64);
        if bound("minimum").is_some_and(|m| x < m)
            || bound("maximum").is_some_and(|m| x > m)
            || bound("exclusiveMinimum").is_some_and(|m| x <= m)
            || bound("exclusiveMaximum").is_some_and(|m| x >= m)
        {
            return fail(&format!("{x} out of range"));
        }
    }
    if let Some(obj) = v.as_object() {
        let props = schema.get("properties").and_then(Value::as_object);
        for key in schema.get("required").and_then(Value::as_array).into_iter().flatten() {
            if !obj.contains_key(key.as_str().unwrap()) {
                return fail(&format!("missing {key}"));
            }
        }
        for (k, child) in obj {
            match props.and_then(|p| p.get(k)) {
                Some(s) => conforms(child, s, &format!("{at}.{k}"))?,
                None if schema.get("additionalProperties") == Some(&Value::Bool(false)) => {
                    return fail(&format!("unexpected key {k}"))
                }
                None => {}
            }
        }
    }
    if let (Some(items), Some(arr)) = (schema.get("items"), v.as_array()) {
        for (i, child) in arr.iter().enumerate() {
            conforms(child, items, &format!("{at}[{i}]"))?;
        }
    }
    Ok(())
}

fn assert_schema_valid(report: &Value) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/run_report.schema.json");
    let schema: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    if let Err(e) = conforms(report, &schema, "$") {
        panic!("report does not match schema: {e}");
    }
}

fn strip_clock(mut v: Value) -> Value {
    v["wall_clock_seconds"] = Value::Null;
    v
}

fn setup(dir: &Path) {
    std::fs::write(
        dir.join("spec.txt"),
        "n_clusters = 3\nd_input = 6\nn_per_cluster = 30\nconcentration = 40\nseed = 2\n",
    )
    .unwrap();
    std::fs::write(
        dir.join("train.cfg"),
        "n_clusters = 3\nhidden = 16\nembed_dim = 6\nqueue_size = 32\nbatch_size = 16\nepochs = 4\nseed = 9\nkmeans_restarts = 2\n",
    )
    .unwrap();
    let out = mice(&["gen-data", "--spec", p(&dir.join("spec.txt")), "--out", p(&dir.join("data.csv"))]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn train_then_eval_reports_scores() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    let args = |ckpt: &str, report: &str| {
        vec![
            "train".to_string(),
            "--config".into(),
            p(&d.join("train.cfg")).into(),
            "--data".into(),
            p(&d.join("data.csv")).into(),
            "--out".into(),
            p(&d.join(ckpt)).into(),
            "--report".into(),
            p(&d.join(report)).into(),
        ]
    };
    let a = args("a.ckpt", "a.json");
    let mut a: Vec<&str> = a.iter().map(String::as_str).collect();
    let metrics = d.join("metrics.ndjson");
    a.extend(["--metrics", p(&metrics)]);
    assert!(mice(&a).status.success());
    let b = args("b.ckpt", "b.json");
    assert!(mice(&b.iter().map(String::as_str).collect::<Vec<_>>()).status.success());

    let report = read_report(&d.join("a.json"));
    assert_schema_valid(&report);
    assert_eq!(report["command"], "train");
    assert_eq!(report["epochs"].as_array().unwrap().len(), 4);
    assert_eq!(report["labels"].as_array().unwrap().len(), 90);
    let acc = report["final_metrics"]["acc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(std::fs::read_to_string(&metrics).unwrap().lines().count(), 4);

    // same seed, same data: identical report apart from timing, identical checkpoint
    assert_eq!(strip_clock(report.clone()), strip_clock(read_report(&d.join("b.json"))));
    assert_eq!(std::fs::read(d.join("a.ckpt")).unwrap(), std::fs::read(d.join("b.ckpt")).unwrap());

    let out = mice(&[
        "eval",
        "--ckpt",
        p(&d.join("a.ckpt")),
        "--data",
        p(&d.join("data.csv")),
        "--report",
        p(&d.join("e.json")),
    ]);
    assert!(out.status.success());
    let eval = read_report(&d.join("e.json"));
    assert_schema_valid(&eval);
    assert_eq!(eval["command"], "eval");
    assert_eq!(eval["labels"], report["labels"]);
    assert_eq!(eval["final_metrics"], report["final_metrics"]);
}

#[test]
fn baselines_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    for which in ["skmeans", "two-stage"] {
        let report = d.join(format!("{which}.json"));
        let out = mice(&[
            "baseline",
            "--which",
            which,
            "--config",
            p(&d.join("train.cfg")),
            "--data",
            p(&d.join("data.csv")),
            "--report",
            p(&report),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let r = read_report(&report);
        assert_schema_valid(&r);
        assert_eq!(r["command"], format!("baseline-{which}"));
        let acc = r["final_metrics"]["acc"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
}

#[test]
fn schema_rejects_malformed_reports() {
    let good = serde_json::to_value(mice::report::RunReport::new("eval", None, 0)).unwrap();
    assert_schema_valid(&good);
    let schema: Value = serde_json::from_str(include_str!("../../../docs/run_report.schema.json")).unwrap();
    let mut bad = good.clone();
    bad["labels"] = serde_json::json!([0]);
    assert!(conforms(&bad, &schema, "$").is_err());
    let mut bad = good;
    bad["extra"] = Value::Bool(true);
    assert!(conforms(&bad, &schema, "$").is_err());
}

#[test]
fn verify_mmd_succeeds() {
    let out = mice(&["verify", "--suite", "mmd"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("PASS"));
}

#[test]
fn exit_codes() {
    assert_eq!(mice(&[]).status.code(), Some(2));
    assert_eq!(mice(&["verify", "--suite", "everything"]).status.code(), Some(2));
    assert_eq!(mice(&["train", "--config", "x"]).status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "tau = -1\n").unwrap();
    let out =
        mice(&["baseline", "--which", "skmeans", "--config", p(&bad), "--data", "missing.csv", "--report", "r.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("tau"));
    let out = mice(&["eval", "--ckpt", p(&bad), "--data", "missing.csv", "--report", "r.json"]);
    assert_eq!(out.status.code(), Some(1));
}
