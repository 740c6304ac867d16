use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use chrono::{Duration, NaiveDate};

use sampled_rnn::config::CsvData;
use sampled_rnn::ingest::{ingest_csv, read_series, Split};
use sampled_rnn_core::dynamics::RangeScaler;
use sampled_rnn_core::embedding::{DelayConfig, Granularity};
use sampled_rnn_core::DMatrix;

const DELAY: DelayConfig = DelayConfig {
    delays: 3,
    pca_components: None,
};

/// Hourly records whose `value` column holds the row index.
fn write_csv(path: &Path, rows: usize) {
    let start = NaiveDate::from_ymd_opt(2011, 3, 30).unwrap().and_hms_opt(20, 0, 0).unwrap();
    let mut text = String::from("time,value,other\n");
    for r in 0..rows {
        let t = start + Duration::hours(r as i64);
        writeln!(text, "{},{r},{}", t.format("%Y-%m-%d %H:%M:%S"), (r as f64 * 0.1).sin()).unwrap();
    }
    fs::write(path, text).unwrap();
}

fn csv_config(path: &Path) -> CsvData {
    serde_json::from_value(serde_json::json!({
        "path": path,
        "time_column": "time",
        "value_columns": ["value"],
        "time_features": ["hour", "day", "month"],
    }))
    .unwrap()
}

#[test]
fn chronological_70_20_10_split() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("series.csv");
    write_csv(&path, 100);
    let ing = ingest_csv(&csv_config(&path), &DELAY).unwrap();
    assert_eq!(ing.train.rows, 0..70);
    assert_eq!(ing.validation.as_ref().unwrap().rows, 70..90);
    assert_eq!(ing.test.rows, 90..100);
    assert_eq!(ing.train.series.nrows(), 70);
    assert_eq!(ing.test.series.nrows(), 10);
    // One value column plus sin/cos for three granularities.
    assert_eq!(ing.value_dims, 1);
    assert_eq!(ing.train.series.ncols(), 7);
    let windows = |s: &Split| s.embedded.trajectories[0].len();
    assert_eq!(windows(&ing.train), 70 - DELAY.delays + 1);
    assert_eq!(windows(&ing.test), 10 - DELAY.delays + 1);
}

#[test]
fn embedded_windows_stay_inside_their_split() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("series.csv");
    write_csv(&path, 100);
    let ing = ingest_csv(&csv_config(&path), &DELAY).unwrap();
    let obs_dim = ing.train.series.ncols();
    let splits = [Some(&ing.train), ing.validation.as_ref(), Some(&ing.test)];
    for split in splits.into_iter().flatten() {
        let states = &split.embedded.trajectories[0].states;
        for r in 0..states.nrows() {
            for k in 0..DELAY.delays {
                let row = states[(r, k * obs_dim)] as usize;
                assert!(split.rows.contains(&row), "row {row} leaked into {:?}", split.rows);
                // Oldest observation first.
                assert_eq!(row, split.rows.start + r + k);
            }
        }
    }
}

#[test]
fn calendar_features_are_bounded() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("series.csv");
    write_csv(&path, 100);
    let ing = ingest_csv(&csv_config(&path), &DELAY).unwrap();
    let features = ing.train.series.columns(1, 6);
    assert!(features.iter().all(|v| (-1.0..=1.0).contains(v)));
    // sin² + cos² = 1 for every granularity.
    for r in 0..features.nrows() {
        for g in 0..3 {
            let (s, c) = (features[(r, 2 * g)], features[(r, 2 * g + 1)]);
            assert!((s * s + c * c - 1.0).abs() < 1e-12);
        }
    }
    // Row 4 is midnight: hour phase zero.
    assert_eq!(features[(4, 0)], 0.0);
    assert_eq!(features[(4, 1)], 1.0);
}

#[test]
fn scaler_sees_training_rows_only() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("series.csv");
    write_csv(&path, 100);
    let mut cfg = csv_config(&path);
    cfg.normalize = Some((-1.0, 1.0));
    cfg.value_columns.push("other".into());
    let ing = ingest_csv(&cfg, &DELAY).unwrap();
    let (_, values) = read_series(&cfg).unwrap();
    let expected = RangeScaler::fit(&values.rows(0, 70).into_owned(), -1.0, 1.0).unwrap();
    assert_eq!(ing.scaler.as_ref().unwrap(), &expected);
    let train_values: DMatrix<f64> = ing.train.series.columns(0, 2).into_owned();
    assert!(train_values.iter().all(|v| (-1.0 - 1e-12..=1.0 + 1e-12).contains(v)));
    // The index column keeps growing past the training range.
    assert!(ing.test.series[(0, 0)] > 1.0);
}

#[test]
fn missing_column_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("series.csv");
    write_csv(&path, 30);
    let mut cfg = csv_config(&path);
    cfg.value_columns = vec!["pressure".into()];
    let err = ingest_csv(&cfg, &DELAY).unwrap_err();
    assert!(err.to_string().contains("pressure"), "{err}");
}

#[test]
fn non_monotone_time_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("series.csv");
    fs::write(
        &path,
        "time,value,other\n2020-01-01 00:00:00,1,0\n2020-01-01 02:00:00,2,0\n2020-01-01 01:00:00,3,0\n",
    )
    .unwrap();
    let err = ingest_csv(&csv_config(&path), &DELAY).unwrap_err();
    assert!(err.to_string().contains("increasing"), "{err}");
}

#[test]
fn too_short_series_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("series.csv");
    write_csv(&path, 20);
    assert!(ingest_csv(&csv_config(&path), &DELAY).is_err());
}

#[test]
fn granularity_names_parse() {
    let g: Vec<Granularity> = serde_json::from_str(r#"["hour","day","month"]"#).unwrap();
    assert_eq!(g, [Granularity::Hour, Granularity::Day, Granularity::Month]);
}
