use cemoe::report::{param_table, run_dir, sweep_csv, write_atomic, write_manifest};
use cemoe_core::accounting::{param_report, phi_moe};
use cemoe_core::sweep::{SeedResult, SweepReport, SweepRow};

#[test]
fn atomic_write_replaces_whole_files_and_leaves_no_temporaries() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/out.txt");
    write_atomic(&path, b"first version, longer").unwrap();
    write_atomic(&path, b"second").unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), b"second");
    let names: Vec<_> = std::fs::read_dir(path.parent().unwrap())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert_eq!(names, vec!["out.txt"]);
}

#[test]
fn run_directories_are_named_by_hash() {
    let d = run_dir(std::path::Path::new("runs"), "sweep", "0123456789abcdef0123");
    assert_eq!(d, std::path::Path::new("runs/sweep-0123456789ab"));
}

#[test]
fn manifest_records_hash_seed_and_versions() {
    let dir = tempfile::tempdir().unwrap();
    write_manifest(dir.path(), "train", "abc", Some(7), &["losses.csv"]).unwrap();
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["config_hash"], "abc");
    assert_eq!(m["seed"], 7);
    assert_eq!(m["format_versions"]["config"], 1);
    assert_eq!(m["files"][0], "losses.csv");
    assert!(m["crate_version"].is_string() && m["created_unix"].is_u64());
}

fn row(k_main: usize, with_ce: bool, metric: Option<f64>) -> SweepRow {
    SweepRow {
        k_main,
        with_ce,
        applicable: !(with_ce && k_main == 8),
        results: vec![SeedResult {
            seed: 0,
            metric,
            final_loss: Some(0.5),
            error: None,
        }],
        median_metric: metric,
        median_final_loss: Some(0.5),
        normalized: metric.map(|m| m / 0.8),
    }
}

#[test]
fn sweep_csv_has_reference_plus_one_line_per_row() {
    let report = SweepReport {
        k_active: 8,
        reference: row(8, false, Some(0.8)),
        rows: vec![row(4, false, Some(0.7)), row(4, true, Some(0.75)), row(8, false, Some(0.8)), row(8, true, None)],
    };
    let bytes = sweep_csv(&report).unwrap();
    let mut r = csv::Reader::from_reader(&bytes[..]);
    let records: Vec<csv::StringRecord> = r.records().map(|x| x.unwrap()).collect();
    assert_eq!(records.len(), 5);
    assert_eq!(&records[0][0], "top-8");
    assert_eq!(&records[2][0], "top-4+ce");
    assert_eq!(&records[4][4], "false");
    assert_eq!(&records[4][5], "");
}

#[test]
fn parameter_table_groups_digits() {
    let t = param_table(&param_report(&phi_moe()).unwrap());
    assert!(t.contains("5,033,164,800"));
    assert!(t.contains("2,517,983,232"));
    assert!(t.contains("33.8%"));
}
