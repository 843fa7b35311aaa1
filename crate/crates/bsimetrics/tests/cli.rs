use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use bsimetrics::core::engine::TableSource;
use bsimetrics::core::model::{Date, MetricId, PartitionKey};
use bsimetrics::Store;

fn bsm(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bsimetrics"))
        .env("BSIMETRICS_ROOT", root)
        .args(args)
        .output()
        .unwrap()
}

fn ok(root: &Path, args: &[&str]) -> String {
    let out = bsm(root, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fail(root: &Path, args: &[&str]) -> String {
    let out = bsm(root, args);
    assert!(!out.status.success(), "{args:?} should fail");
    String::from_utf8(out.stderr).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn ingest_three_rows_reads_back() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("root");
    ok(&root, &["init", "--segments", "4", "--metric", "9=100"]);
    let f = write(
        tmp.path(),
        "m.tsv",
        "date\tmetric-id\tanalysis-unit-id\tvalue\n20240105\t9\ta\t1.25\n20240105\t9\tb\t2\n20240105\t9\tc\t0.5\n",
    );
    let out = ok(&root, &["ingest", "metric", &f]);
    assert!(out.contains("stored\t3\tdropped_zero\t0"), "{out}");

    let store = Store::open(&root).unwrap();
    let day = Date::parse("20240105").unwrap();
    let mut total = 0;
    let mut count = 0;
    for seg in 0..4 {
        let b = store.metric(MetricId(9), day, seg).unwrap();
        total += b.sum();
        count += b.count();
    }
    assert_eq!((count, total), (3, 125 + 200 + 50));
    assert!(store
        .manifest()
        .partitions
        .contains_key(&PartitionKey::Metric(MetricId(9), day)));
}

#[test]
fn ingest_errors_name_the_line() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("root");
    ok(&root, &["init", "--segments", "4"]);
    let dup = write(tmp.path(), "d.tsv", "20240105\t1\ta\t1\n20240105\t1\tb\t2\n20240105\t1\ta\t3\n");
    let err = fail(&root, &["ingest", "metric", &dup]);
    assert!(err.contains("line 3"), "{err}");

    let short = write(tmp.path(), "s.tsv", "20240105\t1\ta\n");
    assert!(fail(&root, &["ingest", "metric", &short]).contains("line 1"));

    // Nothing was written by the failed runs.
    assert!(Store::open(&root).unwrap().manifest().partitions.is_empty());
}

#[test]
fn empty_ingest_warns_and_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("root");
    ok(&root, &["init", "--segments", "4"]);
    let empty = write(tmp.path(), "e.tsv", "date\tmetric-id\tanalysis-unit-id\tvalue\n");
    let out = bsm(&root, &["ingest", "metric", &empty]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
    assert!(Store::open(&root).unwrap().manifest().partitions.is_empty());
}

#[test]
fn aa_on_a_cloned_strategy_gives_p_one() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("root");
    ok(&root, &["init", "--segments", "4"]);
    let mut expose = String::new();
    let mut metric = String::new();
    for i in 0..400 {
        for s in [1, 2] {
            expose.push_str(&format!("{s}\tu{i}\tu{i}\t20240101\n"));
        }
        metric.push_str(&format!("20240101\t1\tu{i}\t{}\n", i % 7));
    }
    ok(&root, &["ingest", "expose", &write(tmp.path(), "x.tsv", &expose)]);
    ok(&root, &["ingest", "metric", &write(tmp.path(), "m.tsv", &metric)]);
    let out = ok(
        &root,
        &["scorecard", "--strategy", "1", "--control", "2", "--metric", "1", "--date", "20240101"],
    );
    let row: Vec<&str> = out.lines().nth(2).unwrap().split('\t').collect();
    assert_eq!(row[0], "1");
    assert_eq!(row[5].parse::<f64>().unwrap(), 0.0);
    assert_eq!(row[8], "1.000000", "{out}");
}

#[test]
fn missing_partitions_are_listed() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("root");
    ok(&root, &["init", "--segments", "2"]);
    ok(&root, &["ingest", "expose", &write(tmp.path(), "x.tsv", "1\tu\tu\t20240101\n")]);
    ok(&root, &["ingest", "metric", &write(tmp.path(), "m.tsv", "20240101\t1\tu\t1\n")]);
    let err = fail(
        &root,
        &["scorecard", "--strategy", "1", "--metric", "1", "--from", "20240101", "--to", "20240103"],
    );
    assert!(err.contains("metric/1_20240102") && err.contains("metric/1_20240103"), "{err}");
    assert!(!err.contains("metric/1_20240101"));
}

#[test]
fn inspect_reports_corruption() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("root");
    ok(&root, &["init", "--segments", "1"]);
    ok(&root, &["ingest", "metric", &write(tmp.path(), "m.tsv", "20240101\t1\tu\t5\n20240101\t1\tv\t3\n")]);
    let seg = root.join("metric/1_20240101/seg0000.bsi");
    let out = ok(&root, &["inspect", seg.to_str().unwrap()]);
    assert!(out.starts_with("segment 0\tslices=3\tcount=2\tsum=8"), "{out}");

    let mut bytes = fs::read(&seg).unwrap();
    let n = bytes.len();
    bytes[n - 1] ^= 1;
    fs::write(&seg, bytes).unwrap();
    assert!(fail(&root, &["inspect", seg.to_str().unwrap()]).contains("checksum"));
}

#[test]
fn flags_are_checked() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("root");
    assert!(fail(&root, &["init", "--segmnets", "4"]).contains("--segmnets"));
    for cmd in ["init", "ingest", "scorecard", "precompute", "deepdive", "generate", "bench", "inspect"] {
        let out = ok(&root, &[cmd, "--help"]);
        assert!(out.contains("Usage"), "{cmd}");
    }
    let out = tmp.path().join("gen");
    let args = ["generate", "--seed", "1", "--alpha", "0", "--out", out.to_str().unwrap()];
    assert!(fail(&root, &args).contains("alpha"));
    assert!(!out.exists());
}

#[test]
fn config_file_supplies_the_root() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("from-config");
    let cfg = write(tmp.path(), "c.tsv", &format!("root\t{}\nthreads\t2\n", root.display()));
    let out = Command::new(env!("CARGO_BIN_EXE_bsimetrics"))
        .env_remove("BSIMETRICS_ROOT")
        .args(["--config", &cfg, "init", "--segments", "2"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(root.join("manifest.tsv").is_file());
}
