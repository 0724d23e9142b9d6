use std::io::Write as _;
use std::process::Command;

use actplan_cli::{run, EXIT_INFEASIBLE, EXIT_INVALID, EXIT_OK, EXIT_USAGE};
use serde_json::Value;

fn actplan(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = run(std::iter::once("actplan").chain(args.iter().copied()), &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn json(args: &[&str]) -> Value {
    let mut full = args.to_vec();
    full.extend(["--format", "json"]);
    let (code, out, err) = actplan(&full);
    assert_eq!(code, EXIT_OK, "{err}");
    serde_json::from_str(&out).unwrap()
}

fn schema(name: &str) -> jsonschema::Validator {
    let path = format!("{}/schemas/{name}.schema.json", env!("CARGO_MANIFEST_DIR"));
    let schema: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    jsonschema::validator_for(&schema).unwrap()
}

fn assert_valid(name: &str, doc: &Value) {
    let v = schema(name);
    let errors: Vec<String> = v.iter_errors(doc).map(|e| format!("{} at {}", e, e.instance_path)).collect();
    assert!(errors.is_empty(), "{name}: {errors:?}");
}

fn config_file(text: &str) -> tempfile::NamedTempFile {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    f.write_all(text.as_bytes()).unwrap();
    f
}

const SMALL: &str = r#"{"a":4,"h":64,"L":8,"s":32,"v":100,"t":2,"p":4,"b":1,"n_mb":9,"device_mem_bytes":1000000000,"peak_flops":1000000000000}"#;

#[test]
fn memory_json_matches_schema_and_hand_count() {
    let doc = json(&["memory", "--preset", "530b", "--strategy", "seq+selective"]);
    assert_valid("memory", &doc);
    // s·b·h·34/t with s=2048, b=1, h=20480, t=8
    assert_eq!(doc["per_layer"], 2048 * 20480 * 34 / 8);
    assert_eq!(doc["strategy"], "selective+seq");
}

#[test]
fn flops_json_matches_schema() {
    let doc = json(&["flops", "--preset", "175b", "--iter-time", "13.75"]);
    assert_valid("flops", &doc);
    assert_eq!(format!("{:.1}", 100.0 * doc["mfu"]["value"].as_f64().unwrap()), "51.4");
    let plain = json(&["flops", "--preset", "175b"]);
    assert_valid("flops", &plain);
    assert!(plain["mfu"].is_null());
}

#[test]
fn text_selective_flops_are_smaller() {
    let eq = json(&["flops", "--preset", "530b", "--strategy", "selective"]);
    let text = json(&["flops", "--preset", "530b", "--strategy", "selective", "--flops-selective", "text"]);
    assert_eq!(eq["model_flops_per_iter"], text["model_flops_per_iter"]);
    assert!(eq["hardware_flops_per_iter"].as_f64() > text["hardware_flops_per_iter"].as_f64());
}

#[test]
fn pipeline_json_matches_schema() {
    let f = config_file(SMALL);
    let path = f.path().to_str().unwrap();
    for strategy in ["none", "selective+seq", "full+seq+mblevel"] {
        let doc = json(&["pipeline-sim", "--config", path, "--strategy", strategy]);
        assert_valid("pipeline-sim", &doc);
        assert_eq!(doc["peak_per_rank"].as_array().unwrap().len(), 4);
    }
    let interleaved = json(&["pipeline-sim", "--preset", "175b", "--dealloc", "off"]);
    assert_valid("pipeline-sim", &interleaved);
}

#[test]
fn pipeline_csv_has_fixed_columns() {
    let f = config_file(SMALL);
    // four ranks, nine microbatches: forward and backward, plus a recompute when recomputing
    for (strategy, events) in [("none", 2), ("selective+seq", 3), ("full", 3)] {
        let (code, out, _) =
            actplan(&["pipeline-sim", "--config", f.path().to_str().unwrap(), "--strategy", strategy, "--format", "csv"]);
        assert_eq!(code, EXIT_OK);
        let mut lines = out.lines();
        assert_eq!(lines.next(), Some("rank,step,event,microbatch,stored_mode,bytes_after_event"));
        assert_eq!(lines.count(), 4 * 9 * events, "{strategy}");
    }
}

#[test]
fn pipeline_window_rows_carry_recompute_events() {
    let f = config_file(SMALL);
    let (code, out, _) =
        actplan(&["pipeline-sim", "--config", f.path().to_str().unwrap(), "--strategy", "full+mblevel", "--format", "csv"]);
    assert_eq!(code, EXIT_OK);
    let mut reader = csv::Reader::from_reader(out.as_bytes());
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    let recomputes = rows.iter().filter(|r| &r[2] == "recompute").count();
    let checkpointed_forwards = rows.iter().filter(|r| &r[2] == "forward" && &r[4] == "checkpointed").count();
    assert_eq!(recomputes, checkpointed_forwards);
}

#[test]
fn plan_json_matches_schema_and_respects_top() {
    let doc = json(&["plan", "--preset", "530b", "--top", "5"]);
    assert_valid("plan", &doc);
    assert_eq!(doc["candidates"].as_array().unwrap().len(), 5);
    assert!(doc["evaluated"].as_u64().unwrap() > 5);
    assert_eq!(doc["candidates"][0]["feasible"], true);
}

#[test]
fn verify_rejects_bad_seed() {
    let out = Command::new(env!("CARGO_BIN_EXE_actplan")).arg("verify").env("ACTPLAN_SEED", "x").output().unwrap();
    assert_eq!(out.status.code(), Some(EXIT_USAGE));
}

#[test]
fn verify_report_matches_schema() {
    let out = Command::new(env!("CARGO_BIN_EXE_actplan")).arg("verify").env("ACTPLAN_SEED", "7").output().unwrap();
    assert_eq!(out.status.code(), Some(EXIT_OK), "{}", String::from_utf8_lossy(&out.stdout));
    let doc: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_valid("verify", &doc);
    assert_eq!(doc["seed"], 7);
}

#[test]
fn outputs_are_byte_identical_across_runs() {
    let f = config_file(SMALL);
    let path = f.path().to_str().unwrap();
    for args in [
        vec!["plan", "--preset", "175b", "--format", "json"],
        vec!["plan", "--config", path, "--format", "csv"],
        vec!["pipeline-sim", "--config", path, "--strategy", "selective+seq+mblevel", "--format", "csv"],
        vec!["memory", "--preset", "1t", "--format", "table"],
        vec!["flops", "--preset", "22b", "--iter-time", "1.10", "--format", "json"],
    ] {
        assert_eq!(actplan(&args), actplan(&args), "{args:?}");
    }
}

#[test]
fn table_output_uses_two_decimal_gib() {
    let (code, out, _) = actplan(&["memory", "--preset", "530b"]);
    assert_eq!(code, EXIT_OK);
    assert!(out.contains("2936012800") && out.contains("2.73"), "{out}");
}

#[test]
fn usage_errors_exit_64() {
    for args in [
        vec!["memory"],
        vec!["memory", "--preset", "530b", "--bogus"],
        vec!["memory", "--preset", "530b", "--format", "xml"],
        vec!["memory", "--preset", "530b", "--strategy", "none+mblevel"],
        vec!["memory", "--preset", "9b"],
        vec!["memory", "--preset", "530b", "--config", "x.json"],
        vec!["flops", "--preset", "530b", "--iter-time", "-1"],
        vec!["frobnicate"],
        vec![],
    ] {
        let (code, _, err) = actplan(&args);
        assert_eq!(code, EXIT_USAGE, "{args:?}: {err}");
        assert!(!err.is_empty());
    }
}

#[test]
fn help_exits_zero() {
    let (code, out, _) = actplan(&["--help"]);
    assert_eq!(code, EXIT_OK);
    assert!(out.contains("pipeline-sim"));
}

#[test]
fn invalid_configs_exit_1() {
    let bad_divisibility = config_file(&SMALL.replace(r#""t":2"#, r#""t":3"#));
    let unknown_key = config_file(&SMALL.replace(r#""a":4"#, r#""a":4,"q":1"#));
    let missing = std::env::temp_dir().join("actplan-no-such-config.json");
    for path in [bad_divisibility.path(), unknown_key.path(), missing.as_path()] {
        let (code, _, err) = actplan(&["memory", "--config", path.to_str().unwrap()]);
        assert_eq!(code, EXIT_INVALID, "{err}");
    }
    let (code, _, _) = actplan(&["flops", "--preset", "175b", "--iter-time", "0"]);
    assert_eq!(code, EXIT_INVALID);
}

#[test]
fn infeasible_plans_exit_2() {
    let tiny = config_file(&SMALL.replace("1000000000", "1000"));
    let path = tiny.path().to_str().unwrap();
    let (code, out, _) = actplan(&["plan", "--config", path, "--format", "json"]);
    assert_eq!(code, EXIT_INFEASIBLE);
    let doc: Value = serde_json::from_str(&out).unwrap();
    assert_valid("plan", &doc);
    assert_eq!(doc["feasible_count"], 0);
    assert!(doc["min_shortfall"].as_u64().unwrap() > 0);
    let (code, _, err) = actplan(&["pipeline-sim", "--config", path, "--strategy", "selective+mblevel"]);
    assert_eq!(code, EXIT_INFEASIBLE, "{err}");
}

#[test]
fn optimizer_bytes_flag_changes_totals() {
    let default = json(&["memory", "--preset", "175b"]);
    let lean = json(&["memory", "--preset", "175b", "--optimizer-bytes", "0"]);
    assert_eq!(lean["optimizer_state"], 0);
    assert_eq!(default["params"], lean["params"]);
    assert_eq!(
        default["grand_total"].as_u64().unwrap() - default["optimizer_state"].as_u64().unwrap(),
        lean["grand_total"].as_u64().unwrap()
    );
}

#[test]
fn dealloc_off_raises_rank0_peak() {
    let on = json(&["pipeline-sim", "--preset", "22b", "--strategy", "selective+seq"]);
    let off = json(&["pipeline-sim", "--preset", "22b", "--strategy", "selective+seq", "--dealloc", "off"]);
    assert!(off["rank0_peak"].as_u64() >= on["rank0_peak"].as_u64());
    let f = config_file(SMALL);
    let path = f.path().to_str().unwrap();
    let on = json(&["pipeline-sim", "--config", path]);
    let off = json(&["pipeline-sim", "--config", path, "--dealloc", "off"]);
    assert!(off["rank0_peak"].as_u64() > on["rank0_peak"].as_u64());
}
