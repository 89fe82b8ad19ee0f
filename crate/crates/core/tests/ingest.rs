use std::fs;

use hpaf_core::ingest::{
    encode_format16, encode_format212, load_csv, load_record, CsvOptions, IdPattern,
};
use hpaf_core::Error;

#[test]
fn fixture_record_converts_to_mv() {
    let dir = tempfile::tempdir().unwrap();
    let hea = dir.path().join("alice_s1.hea");
    let dat = dir.path().join("alice_s1.dat");
    fs::write(
        &hea,
        "alice_s1 1 200 3\nalice_s1.dat 212 200 12 0 0 0 0 I\n",
    )
    .unwrap();
    fs::write(&dat, encode_format212(&[400, -200, 0]).unwrap()).unwrap();
    let rec = load_record(&hea, &dat, 0, &IdPattern::default()).unwrap();
    assert_eq!(rec.samples, vec![2.0, -1.0, 0.0]);
    assert_eq!(rec.subject_id, "alice");
    assert_eq!(rec.session_id, "s1");
    assert_eq!(rec.sampling_rate, 200.0);
    assert_eq!(rec.lead_label, "I");
}

#[test]
fn multi_signal_lead_selection() {
    let dir = tempfile::tempdir().unwrap();
    let hea = dir.path().join("r.hea");
    let dat = dir.path().join("r.dat");
    fs::write(
        &hea,
        "r 2 360 3\nr.dat 16 100(10) 16 0 0 0 0 MLII\nr.dat 16 50 16 0 0 0 0 V5\n",
    )
    .unwrap();
    // frames: (lead0, lead1) interleaved
    fs::write(
        &dat,
        encode_format16(&[110, 50, 210, 100, 10, -50]).unwrap(),
    )
    .unwrap();
    let ids = IdPattern::default();
    let lead0 = load_record(&hea, &dat, 0, &ids).unwrap();
    let lead1 = load_record(&hea, &dat, 1, &ids).unwrap();
    assert_eq!(lead0.samples, vec![1.0, 2.0, 0.0]);
    assert_eq!(lead1.samples, vec![1.0, 2.0, -1.0]);
    assert_eq!(lead1.lead_label, "V5");
    assert!(load_record(&hea, &dat, 2, &ids).is_err());
}

#[test]
fn empty_record_rejected_at_load() {
    let dir = tempfile::tempdir().unwrap();
    let hea = dir.path().join("e.hea");
    fs::write(&hea, "e 1 200 0\ne.dat 16\n").unwrap();
    let err = load_record(&hea, &dir.path().join("e.dat"), 0, &IdPattern::default()).unwrap_err();
    assert!(matches!(err, Error::EmptyRecord(_)));
}

#[test]
fn missing_signal_file_names_path() {
    let dir = tempfile::tempdir().unwrap();
    let hea = dir.path().join("m.hea");
    fs::write(&hea, "m 1 200 4\nm.dat 16\n").unwrap();
    let dat = dir.path().join("m.dat");
    match load_record(&hea, &dat, 0, &IdPattern::default()) {
        Err(Error::Io { path, .. }) => assert_eq!(path, dat),
        other => panic!("expected I/O error, got {other:?}"),
    }
}

#[test]
fn truncated_signal_file() {
    let dir = tempfile::tempdir().unwrap();
    let hea = dir.path().join("t.hea");
    let dat = dir.path().join("t.dat");
    fs::write(&hea, "t 1 200 4\nt.dat 212\n").unwrap();
    fs::write(&dat, [0u8, 0, 0]).unwrap();
    assert!(load_record(&hea, &dat, 0, &IdPattern::default()).is_err());
}

#[test]
fn csv_columns() {
    let dir = tempfile::tempdir().unwrap();
    let two = dir.path().join("p1_1.csv");
    fs::write(&two, "0.1,0.01\n0.2,0.02\n0.3,0.03\n").unwrap();
    let ids = IdPattern::default();
    let opts = CsvOptions {
        column: 1,
        ..CsvOptions::default()
    };
    let rec = load_csv(&two, &opts, &ids).unwrap();
    assert_eq!(rec.samples, vec![0.01, 0.02, 0.03]);
    assert_eq!(rec.sampling_rate, 500.0);
    assert_eq!(
        (rec.subject_id.as_str(), rec.session_id.as_str()),
        ("p1", "1")
    );

    let one = dir.path().join("single.csv");
    fs::write(&one, "1.5\n-2.5\n").unwrap();
    let rec = load_csv(&one, &CsvOptions::default(), &ids).unwrap();
    assert_eq!(rec.samples, vec![1.5, -2.5]);
    match load_csv(&one, &opts, &ids) {
        Err(Error::ColumnOutOfRange {
            column: 1,
            row: 1,
            available: 1,
        }) => {}
        other => panic!("expected ColumnOutOfRange, got {other:?}"),
    }
}

#[test]
fn csv_non_numeric_cell_reports_row() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.csv");
    fs::write(&p, "1.0\n2.0\nabc\n").unwrap();
    match load_csv(&p, &CsvOptions::default(), &IdPattern::default()) {
        Err(Error::Parse { line: 3, .. }) => {}
        other => panic!("expected parse error on row 3, got {other:?}"),
    }
}

#[test]
fn csv_header_row_skipped_when_declared() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("h.csv");
    fs::write(&p, "raw,filtered\n1,2\n3,4\n").unwrap();
    let opts = CsvOptions {
        column: 1,
        has_header: true,
        ..CsvOptions::default()
    };
    let rec = load_csv(&p, &opts, &IdPattern::default()).unwrap();
    assert_eq!(rec.samples, vec![2.0, 4.0]);
}
