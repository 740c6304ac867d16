//! Real-world time series: chronological splits, calendar features and
//! per-split delay embedding.

use std::path::Path;

use chrono::{Datelike, NaiveDate, NaiveDateTime, Timelike};

use sampled_rnn_core::dynamics::{RangeScaler, Trajectory, TrajectoryDataset};
use sampled_rnn_core::embedding::{
    embed_dataset, embed_with, time_features, CalendarPhase, DelayConfig, EmbeddingMap,
};
use sampled_rnn_core::DMatrix;

use crate::config::CsvData;
use crate::error::{Error, Result};

/// One split of an ingested series.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    /// Normalized values followed by calendar features, one row per record.
    pub series: DMatrix<f64>,
    /// Delay-embedded single-trajectory dataset.
    pub embedded: TrajectoryDataset,
    /// Row range of the split in the source file.
    pub rows: std::ops::Range<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ingested {
    pub train: Split,
    pub validation: Option<Split>,
    pub test: Split,
    pub map: EmbeddingMap,
    pub scaler: Option<RangeScaler>,
    /// Number of leading value columns; the rest are calendar features.
    pub value_dims: usize,
}

fn parse_time(raw: &str, format: &str) -> Option<NaiveDateTime> {
    let raw = raw.trim();
    NaiveDateTime::parse_from_str(raw, format)
        .ok()
        .or_else(|| NaiveDate::parse_from_str(raw, format).ok().map(|d| d.and_time(Default::default())))
}

fn days_in_month(t: &NaiveDateTime) -> u32 {
    let (y, m) = (t.year(), t.month());
    let next = if m == 12 {
        NaiveDate::from_ymd_opt(y + 1, 1, 1)
    } else {
        NaiveDate::from_ymd_opt(y, m + 1, 1)
    };
    let first = NaiveDate::from_ymd_opt(y, m, 1);
    match (first, next) {
        (Some(a), Some(b)) => (b - a).num_days() as u32,
        _ => 30,
    }
}

pub fn calendar_phase(t: &NaiveDateTime) -> CalendarPhase {
    CalendarPhase {
        hour_of_day: f64::from(t.hour()) + f64::from(t.minute()) / 60.0 + f64::from(t.second()) / 3600.0,
        day_of_month: f64::from(t.day0()) + f64::from(t.hour()) / 24.0,
        days_in_month: f64::from(days_in_month(t)),
        month_of_year: f64::from(t.month0()),
    }
}

/// Read the configured columns and timestamps.
pub fn read_series(cfg: &CsvData) -> Result<(Vec<NaiveDateTime>, DMatrix<f64>)> {
    let path: &Path = &cfg.path;
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let headers = r.headers().map_err(|e| Error::csv(path, e))?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Format(format!("{}: missing column {name:?}", path.display())))
    };
    let time_col = find(&cfg.time_column)?;
    let value_cols = cfg
        .value_columns
        .iter()
        .map(|c| find(c))
        .collect::<Result<Vec<_>>>()?;

    let mut stamps = Vec::new();
    let mut values = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let stamp = parse_time(&rec[time_col], &cfg.time_format).ok_or_else(|| {
            Error::Format(format!(
                "{}:{line}: timestamp {:?} does not match {:?}",
                path.display(),
                &rec[time_col],
                cfg.time_format
            ))
        })?;
        if stamps.last().is_some_and(|prev| *prev >= stamp) {
            return Err(Error::Format(format!(
                "{}:{line}: timestamps must be strictly increasing",
                path.display()
            )));
        }
        stamps.push(stamp);
        for &c in &value_cols {
            let cell = &rec[c];
            values.push(cell.trim().parse::<f64>().map_err(|_| {
                Error::Format(format!("{}:{line}: bad number {cell:?}", path.display()))
            })?);
        }
    }
    let n = stamps.len();
    Ok((stamps, DMatrix::from_row_slice(n, value_cols.len(), &values)))
}

/// Record counts of the train, validation and test splits.
pub fn split_counts(n: usize, fractions: (f64, f64, f64)) -> (usize, usize, usize) {
    let train = ((fractions.0 * n as f64).round() as usize).min(n);
    let val = ((fractions.1 * n as f64).round() as usize).min(n - train);
    (train, val, n - train - val)
}

fn as_dataset(series: &DMatrix<f64>, dt: f64) -> Result<TrajectoryDataset> {
    let times = (0..series.nrows()).map(|t| t as f64 * dt).collect();
    Ok(TrajectoryDataset::new(
        vec![Trajectory {
            times,
            states: series.clone(),
            inputs: None,
            outputs: None,
        }],
        dt,
        0,
    )?)
}

/// Chronological split, train-only normalization and PCA, per-split delay
/// embedding.
pub fn ingest_csv(cfg: &CsvData, delay: &DelayConfig) -> Result<Ingested> {
    let (stamps, values) = read_series(cfg)?;
    let (n_train, n_val, n_test) = split_counts(stamps.len(), cfg.splits);
    let window = delay.delays + 1;
    if n_train < window || n_test < window {
        return Err(Error::Format(format!(
            "{} records give splits of {n_train}/{n_val}/{n_test}, each needs at least {window}",
            stamps.len()
        )));
    }

    let scaler = match cfg.normalize {
        Some((lo, hi)) => Some(RangeScaler::fit(&values.rows(0, n_train).into_owned(), lo, hi)?),
        None => None,
    };
    let scaled = match &scaler {
        Some(s) => s.apply_rows(&values)?,
        None => values.clone(),
    };
    let phases: Vec<CalendarPhase> = stamps.iter().map(calendar_phase).collect();
    let features = time_features(&phases, &cfg.time_features);
    let v = scaled.ncols();
    let mut series = DMatrix::zeros(stamps.len(), v + features.ncols());
    series.columns_mut(0, v).copy_from(&scaled);
    series.columns_mut(v, features.ncols()).copy_from(&features);

    let part = |start: usize, len: usize| series.rows(start, len).into_owned();
    let train_series = part(0, n_train);
    let (train_emb, map) = embed_dataset(&as_dataset(&train_series, cfg.dt)?, delay)?;
    let make = |start: usize, len: usize| -> Result<Split> {
        let s = part(start, len);
        Ok(Split {
            embedded: embed_with(&as_dataset(&s, cfg.dt)?, &map)?,
            series: s,
            rows: start..start + len,
        })
    };
    let validation = if n_val >= window {
        Some(make(n_train, n_val)?)
    } else {
        None
    };
    let test = make(n_train + n_val, n_test)?;
    Ok(Ingested {
        train: Split {
            series: train_series,
            embedded: train_emb,
            rows: 0..n_train,
        },
        validation,
        test,
        map,
        scaler,
        value_dims: v,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_counts_round() {
        assert_eq!(split_counts(100, (0.7, 0.2, 0.1)), (70, 20, 10));
        assert_eq!(split_counts(10, (0.7, 0.2, 0.1)), (7, 2, 1));
    }

    #[test]
    fn calendar_phases() {
        let t = NaiveDateTime::parse_from_str("2012-02-15 06:30:00", "%Y-%m-%d %H:%M:%S").unwrap();
        let p = calendar_phase(&t);
        assert_eq!(p.hour_of_day, 6.5);
        assert_eq!(p.days_in_month, 29.0);
        assert_eq!(p.month_of_year, 1.0);
        assert_eq!(p.day_of_month, 14.25);
        let d = parse_time("2013-12-31", "%Y-%m-%d").unwrap();
        assert_eq!(days_in_month(&d), 31);
    }
}
