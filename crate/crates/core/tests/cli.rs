use std::path::Path;
use std::process::{Command, Output};

fn questkv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_questkv"))
        .args(args)
        .env("QUESTKV_THREADS", "2")
        .output()
        .expect("spawn questkv")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

/// Rows of a CSV as header -> value maps.
fn records(text: &str) -> Vec<std::collections::HashMap<String, String>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let headers = r.headers().unwrap().clone();
    r.records()
        .map(|rec| {
            headers
                .iter()
                .zip(rec.unwrap().iter())
                .map(|(h, v)| (h.to_string(), v.to_string()))
                .collect()
        })
        .collect()
}

#[test]
fn verify_default_passes() {
    let o = questkv(&["verify", "--scale", "0.05"]);
    let text = stdout(&o);
    assert!(o.status.success(), "{text}");
    for suite in [
        "metadata_scan",
        "upper_bound",
        "full_budget",
        "oracle",
        "traffic",
    ] {
        assert!(
            text.lines()
                .any(|l| l.starts_with(suite) && l.contains("PASS")),
            "{text}"
        );
    }
}

#[test]
fn verify_detects_injected_fault() {
    let o = questkv(&["verify", "--scale", "0.05", "--inject-fault"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn verify_single_suite() {
    let o = questkv(&["verify", "--suite", "upper_bound", "--scale", "0.05"]);
    let text = stdout(&o);
    assert!(o.status.success());
    assert!(text.contains("upper_bound"));
    assert!(!text.contains("metadata_scan"));
}

#[test]
fn config_errors_use_their_own_exit_code() {
    assert_eq!(
        questkv(&["verify", "--suite", "nope"]).status.code(),
        Some(2)
    );
    let o = questkv(&[
        "recall",
        "--length",
        "64",
        "--budget",
        "128",
        "--head-dim",
        "8",
    ]);
    assert_eq!(o.status.code(), Some(2));
    let o = questkv(&["recall", "--policy", "fastgen", "--length", "64"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn full_policy_recall_is_one() {
    let o = questkv(&[
        "recall",
        "--policy",
        "full",
        "--budget",
        "32,64",
        "--length",
        "256",
        "--head-dim",
        "16",
        "--summary",
    ]);
    assert!(o.status.success());
    let rows = records(&stdout(&o));
    assert!(!rows.is_empty());
    for r in rows {
        assert_eq!(r["recall"].parse::<f64>().unwrap(), 1.0);
    }
}

#[test]
fn quest_full_budget_recall_is_one() {
    let o = questkv(&[
        "recall",
        "--policy",
        "quest",
        "--budget",
        "300",
        "--length",
        "300",
        "--head-dim",
        "16",
        "--summary",
    ]);
    assert!(o.status.success());
    for r in records(&stdout(&o)) {
        assert_eq!(r["recall"].parse::<f64>().unwrap(), 1.0);
        assert!(r["output_error"].parse::<f64>().unwrap() == 0.0);
    }
}

#[test]
fn recall_grid_shape_and_determinism() {
    let args = [
        "recall",
        "--policy",
        "quest,h2o,tova,streaming",
        "--budget",
        "32,64,128,256,512",
        "--length",
        "1024",
        "--head-dim",
        "16",
        "--seed",
        "3",
    ];
    let a = questkv(&args);
    let b = questkv(&args);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let text = stdout(&a);
    assert!(text.starts_with("seed,step,policy,budget,recall,traffic_fraction,output_error\n"));
    let rows = records(&text);
    let means = rows
        .iter()
        .filter(|r| r["step"] == "mean" && r["seed"] == "all")
        .count();
    assert_eq!(means, 4 * 5);
    assert!(rows
        .iter()
        .any(|r| r["step"] == "1023" && r["policy"] == "tova"));
}

#[test]
fn recall_reads_trace_file() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t.qkv");
    let meta = dir.path().join("meta.csv");
    let o = questkv(&[
        "gen",
        "--kind",
        "needle",
        "--length",
        "200",
        "--head-dim",
        "8",
        "--seed",
        "4",
        "--out",
        trace.to_str().unwrap(),
        "--meta",
        meta.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(Path::new(&trace).exists());
    let m = records(&std::fs::read_to_string(&meta).unwrap());
    assert_eq!(m[0]["kind"], "needle");
    assert_eq!(m[0]["needle_position"], "100");

    let o = questkv(&[
        "recall",
        "--trace",
        trace.to_str().unwrap(),
        "--policy",
        "quest,streaming",
        "--budget",
        "32",
        "--summary",
    ]);
    assert!(o.status.success());
    assert_eq!(records(&stdout(&o)).len(), 2 * 2);
}

#[test]
fn traffic_worked_example() {
    let o = questkv(&[
        "traffic",
        "--page-size",
        "16",
        "--length",
        "65536",
        "--budget",
        "4096",
    ]);
    assert!(o.status.success());
    let rows = records(&stdout(&o));
    assert_eq!(rows[0]["fraction_model"].parse::<f64>().unwrap(), 0.125);
    assert_eq!(rows[0]["counted_fraction"].parse::<f64>().unwrap(), 0.125);
}

#[test]
fn traffic_full_budget_warns() {
    let o = questkv(&[
        "traffic",
        "--page-size",
        "16",
        "--length",
        "1024",
        "--budget",
        "1024",
    ]);
    assert!(o.status.success());
    let rows = records(&stdout(&o));
    assert_eq!(
        rows[0]["fraction_model"].parse::<f64>().unwrap(),
        1.0 + 1.0 / 16.0
    );
    assert_eq!(rows[0]["exceeds_dense"], "true");
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning"));
}

#[test]
fn traffic_page_size_sweep() {
    let o = questkv(&[
        "traffic",
        "--page-size",
        "8,16,32,64,128",
        "--length",
        "4096",
        "--budget",
        "1024",
        "--head-dim",
        "16",
    ]);
    assert!(o.status.success());
    let est: Vec<f64> = records(&stdout(&o))
        .iter()
        .map(|r| r["estimation_term"].parse().unwrap())
        .collect();
    assert_eq!(est.len(), 5);
    assert!(est.windows(2).all(|w| w[1] < w[0]));
}

#[test]
fn bench_reports_bytes_and_overhead() {
    let o = questkv(&[
        "bench",
        "--length",
        "2048",
        "--budget",
        "2048,256",
        "--head-dim",
        "32",
        "--reps",
        "3",
        "--warmup",
        "1",
    ]);
    assert!(o.status.success());
    let rows = records(&stdout(&o));
    assert_eq!(rows.len(), 10);
    let get = |budget: &str, stage: &str| {
        rows.iter()
            .find(|r| r["token_budget"] == budget && r["stage"] == stage)
            .unwrap()
            .clone()
    };
    // no sparsity: quest reads the metadata on top of everything dense reads
    let full = get("2048", "full")["bytes_touched"].parse::<u64>().unwrap();
    let total = get("2048", "quest-total")["bytes_touched"]
        .parse::<u64>()
        .unwrap();
    assert!(total > full);
    let ratio: f64 = get("256", "quest-total")["bytes_ratio"].parse().unwrap();
    assert_eq!(ratio, 1.0 / 16.0 + 256.0 / 2048.0);
    assert_eq!(get("256", "full")["reps"], "3");

    let again = questkv(&[
        "bench",
        "--length",
        "2048",
        "--budget",
        "2048,256",
        "--head-dim",
        "32",
        "--reps",
        "3",
        "--warmup",
        "1",
    ]);
    let bytes = |out: &Output| -> Vec<String> {
        records(&stdout(out))
            .iter()
            .map(|r| r["bytes_touched"].clone())
            .collect()
    };
    assert_eq!(bytes(&o), bytes(&again));
}
