//! End-to-end exercises of the command line binary: exit codes, the CSV
//! contract, the seed override, and snapshot round trips.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kmig::guest::layout;
use kmig::memory::{GuestAddress, MemoryImage, PAGE_SIZE};
use kmig::profile::dentry;

fn kmig() -> Command {
    Command::new(env!("CARGO_BIN_EXE_kmig"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary runs");
    assert!(
        out.status.success(),
        "expected success, got {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn exit_code(cmd: &mut Command) -> i32 {
    cmd.output().expect("binary runs").status.code().expect("exit code")
}

/// A small but fully featured spec: 8 files, both processes, churn
/// headroom for the workload.
fn small_spec(dir: &Path, seed: u64) -> PathBuf {
    let path = dir.join(format!("spec_{seed}.json"));
    let json = format!(
        r#"{{
  "guest": {{ "num_files": 8, "churn_headroom": 16, "seed": {seed} }},
  "k": 4,
  "workload": {{ "churn_per_process": 2 }}
}}"#
    );
    fs::write(&path, json).expect("spec written");
    path
}

#[test]
fn bench_writes_csv_with_pinned_header() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec(dir.path(), 3);
    let out = dir.path().join("results.csv");
    run_ok(kmig().args([
        "bench",
        "--spec",
        spec.to_str().unwrap(),
        "--ks",
        "2,4",
        "--repeats",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]));

    let csv = fs::read_to_string(&out).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("k,mode,repeat,events_total,events_false,modeled_time,pages_used")
    );
    let rows: Vec<&str> = lines.collect();
    // 2 off baselines + 2 ks x 2 modes x 2 repeats.
    assert_eq!(rows.len(), 10);
    for row in rows {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols.len(), 7, "row {row}");
        assert!(["0", "2", "4"].contains(&cols[0]), "k column in {row}");
        assert!(["off", "in-place", "migrated"].contains(&cols[1]), "mode column in {row}");
        for numeric in [cols[2], cols[3], cols[4], cols[5], cols[6]] {
            numeric.parse::<u64>().unwrap_or_else(|_| panic!("numeric column in {row}"));
        }
    }
}

#[test]
fn bench_rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec(dir.path(), 11);
    let first = dir.path().join("a.csv");
    let second = dir.path().join("b.csv");
    for out in [&first, &second] {
        run_ok(kmig().args([
            "bench",
            "--spec",
            spec.to_str().unwrap(),
            "--ks",
            "2,4",
            "--repeats",
            "2",
            "--out",
            out.to_str().unwrap(),
        ]));
    }
    assert_eq!(fs::read(&first).unwrap(), fs::read(&second).unwrap());
}

#[test]
fn kmig_seed_env_overrides_spec_seed() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec(dir.path(), 3);
    let args = |out: &Path| {
        vec![
            "bench".to_string(),
            "--spec".into(),
            spec.to_str().unwrap().into(),
            "--ks".into(),
            "4".into(),
            "--repeats".into(),
            "2".into(),
            "--out".into(),
            out.to_str().unwrap().into(),
        ]
    };

    let plain = dir.path().join("plain.csv");
    run_ok(kmig().args(args(&plain)).env_remove("KMIG_SEED"));

    // The same seed through the environment reproduces the run exactly.
    let same = dir.path().join("same.csv");
    run_ok(kmig().args(args(&same)).env("KMIG_SEED", "3"));
    assert_eq!(fs::read(&plain).unwrap(), fs::read(&same).unwrap());

    // A different seed changes the measured workload.
    let other = dir.path().join("other.csv");
    run_ok(kmig().args(args(&other)).env("KMIG_SEED", "99"));
    assert_ne!(fs::read(&plain).unwrap(), fs::read(&other).unwrap());
}

#[test]
fn scenario_dentry_reports_pass() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec(dir.path(), 5);
    let out = run_ok(kmig().args(["scenario", "--spec", spec.to_str().unwrap(), "--case", "dentry"]));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("dentry: pass"), "got: {text}");

    let out = run_ok(kmig().args([
        "scenario",
        "--spec",
        spec.to_str().unwrap(),
        "--case",
        "fdt",
        "--json",
    ]));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["case"], "fdt");
    assert_eq!(report["pass"], true);
    assert!(report["checks"].as_array().unwrap().len() >= 4);
}

#[test]
fn failed_scenario_exits_one() {
    // With both trap kinds disabled the second open cannot produce an
    // event, so the dentry case honestly fails.
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("untrapped.json");
    fs::write(
        &path,
        r#"{
  "guest": { "num_files": 8, "churn_headroom": 16 },
  "k": 4,
  "workload": { "churn_per_process": 2 },
  "watch": { "read": false, "write": false }
}"#,
    )
    .unwrap();
    let out = kmig()
        .args(["scenario", "--spec", path.to_str().unwrap(), "--case", "dentry"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("FAIL"), "got: {text}");
    assert!(text.contains("dentry: fail"), "got: {text}");
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out_csv = dir.path().join("never.csv");

    let missing = dir.path().join("missing.json");
    assert_eq!(
        exit_code(kmig().args(["validate", "--spec", missing.to_str().unwrap()])),
        2
    );

    let broken = dir.path().join("broken.json");
    fs::write(&broken, "{ nope").unwrap();
    assert_eq!(
        exit_code(kmig().args(["validate", "--spec", broken.to_str().unwrap()])),
        2
    );

    let oversized = dir.path().join("oversized.json");
    fs::write(&oversized, r#"{ "guest": { "num_files": 8 }, "k": 20 }"#).unwrap();
    assert_eq!(
        exit_code(kmig().args(["validate", "--spec", oversized.to_str().unwrap()])),
        2
    );

    let spec = small_spec(dir.path(), 3);
    assert_eq!(
        exit_code(
            kmig()
                .args([
                    "bench",
                    "--spec",
                    spec.to_str().unwrap(),
                    "--ks",
                    "4",
                    "--repeats",
                    "1",
                    "--out",
                    out_csv.to_str().unwrap(),
                ])
                .env("KMIG_SEED", "not-a-number")
        ),
        2
    );
    assert!(!out_csv.exists());

    // An unparseable k ladder is configuration, not assertion.
    assert_eq!(
        exit_code(kmig().args([
            "bench",
            "--spec",
            spec.to_str().unwrap(),
            "--ks",
            "4,zap",
            "--repeats",
            "1",
            "--out",
            out_csv.to_str().unwrap(),
        ])),
        2
    );
}

#[test]
fn validate_plain_and_dry_run() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec(dir.path(), 7);
    let out = run_ok(kmig().args(["validate", "--spec", spec.to_str().unwrap()]));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("spec ok"), "got: {text}");

    let out = run_ok(kmig().args(["validate", "--spec", spec.to_str().unwrap(), "--dry-run"]));
    let verdict: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(verdict["pass"], true);
    assert_eq!(verdict["diagnostics"].as_array().unwrap().len(), 0);
}

#[test]
fn gen_snapshot_restores_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec(dir.path(), 9);
    let img = dir.path().join("guest.img");
    let out = run_ok(kmig()
        .args(["gen", "--spec", spec.to_str().unwrap(), "--out", img.to_str().unwrap()])
        .env_remove("KMIG_SEED"));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("wrote"), "got: {text}");

    let sidecar = img.with_extension("json");
    assert!(img.exists() && sidecar.exists());

    let image = MemoryImage::restore_from_files(&img, &sidecar).unwrap();
    assert_eq!(image.size(), 4096 * PAGE_SIZE);
    // Fresh guest: the LRU list is empty, so the sentinel links to itself.
    let next = image
        .peek_word(GuestAddress(layout::LRU_SENTINEL + dentry::D_LRU_NEXT))
        .unwrap();
    assert_eq!(next, layout::LRU_SENTINEL);

    // The snapshot matches an in-process build of the same spec bit for bit.
    let rebuilt_spec = kmig::guest::GuestSpec {
        num_files: 8,
        churn_headroom: 16,
        seed: 9,
        ..kmig::guest::GuestSpec::default()
    };
    let (_, rebuilt) = kmig::guest::build_guest(&rebuilt_spec).unwrap();
    assert_eq!(image.bytes(), rebuilt.bytes());
}

#[test]
fn bench_json_flag_emits_summary() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec(dir.path(), 3);
    let out_csv = dir.path().join("rows.csv");
    let out = run_ok(kmig().args([
        "bench",
        "--spec",
        spec.to_str().unwrap(),
        "--ks",
        "2",
        "--repeats",
        "1",
        "--out",
        out_csv.to_str().unwrap(),
        "--json",
    ]));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let rows = summary["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 3); // off + in-place + migrated
    assert_eq!(summary["oracle_totals"].as_array().unwrap().len(), 3);
    assert!(summary["averages"].as_array().unwrap().len() >= 3);
}
