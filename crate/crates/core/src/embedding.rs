//! Delay embedding of partial observations, optional PCA reduction, and
//! periodic calendar features.
//!
//! Windows are concatenated oldest-first: row `t` of an embedding with `L`
//! delays is `(s[t], s[t+1], …, s[t+L-1])`.

use alloc::vec::Vec;
use core::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dynamics::{Trajectory, TrajectoryDataset};
use crate::error::{check_dim, Error, Result};
use crate::linalg::Pca;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DelayConfig {
    pub delays: usize,
    #[serde(default)]
    pub pca_components: Option<usize>,
}

impl DelayConfig {
    pub fn validate(&self, obs_dim: usize) -> Result<()> {
        if self.delays == 0 {
            return Err(Error::InvalidArgument("delay window must be at least 1".into()));
        }
        if let Some(k) = self.pca_components {
            if k == 0 || k > self.delays * obs_dim {
                return Err(Error::InvalidArgument(alloc::format!(
                    "{k} PCA components for an embedding of dimension {}",
                    self.delays * obs_dim
                )));
            }
        }
        Ok(())
    }
}

/// Stack `delays` consecutive rows of `series` (`T × d`) into each output row.
pub fn delay_embed(series: &DMatrix<f64>, delays: usize) -> Result<DMatrix<f64>> {
    let (t, d) = series.shape();
    if delays == 0 {
        return Err(Error::InvalidArgument("delay window must be at least 1".into()));
    }
    if t < delays {
        return Err(Error::InvalidArgument(alloc::format!(
            "series of length {t} is shorter than the delay window {delays}"
        )));
    }
    let rows = t - delays + 1;
    Ok(DMatrix::from_fn(rows, delays * d, |r, c| {
        series[(r + c / d, c % d)]
    }))
}

/// Maps raw observation windows to model coordinates and back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMap {
    pub delays: usize,
    pub obs_dim: usize,
    pub pca: Option<Pca>,
}

impl EmbeddingMap {
    pub fn state_dim(&self) -> usize {
        self.pca
            .as_ref()
            .map_or(self.delays * self.obs_dim, Pca::n_components)
    }

    /// Model state for a window of exactly `delays` observations (`L × d`).
    pub fn embed_window(&self, window: &DMatrix<f64>) -> Result<Vec<f64>> {
        check_dim("window length", self.delays, window.nrows())?;
        let rows = self.embed_series(window)?;
        Ok(rows.row(0).iter().copied().collect())
    }

    /// Embed every full window of `series` (`T × d`).
    pub fn embed_series(&self, series: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim("observation dimension", self.obs_dim, series.ncols())?;
        let raw = delay_embed(series, self.delays)?;
        match &self.pca {
            Some(p) => p.transform(&raw),
            None => Ok(raw),
        }
    }

    /// Latest observation encoded in model states (`* × state_dim`), i.e.
    /// the newest block of the reconstructed window.
    pub fn latest_observation(&self, states: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim("embedded state dimension", self.state_dim(), states.ncols())?;
        let windows = match &self.pca {
            Some(p) => p.inverse_transform(states)?,
            None => states.clone(),
        };
        let start = (self.delays - 1) * self.obs_dim;
        Ok(windows.columns(start, self.obs_dim).into_owned())
    }
}

fn embed_trajectory(t: &Trajectory, map: &EmbeddingMap, raw: DMatrix<f64>) -> Result<Trajectory> {
    let states = match &map.pca {
        Some(p) => p.transform(&raw)?,
        None => raw,
    };
    let shift = map.delays - 1;
    let len = states.nrows();
    Ok(Trajectory {
        times: t.times[shift..].to_vec(),
        states,
        inputs: t.inputs.as_ref().map(|x| x.rows(shift, len - 1).into_owned()),
        outputs: t.outputs.as_ref().map(|y| y.rows(shift, len).into_owned()),
    })
}

fn raw_windows(data: &TrajectoryDataset, delays: usize) -> Result<Vec<DMatrix<f64>>> {
    data.trajectories
        .iter()
        .map(|t| {
            if t.len() < delays + 1 {
                return Err(Error::InvalidArgument(alloc::format!(
                    "trajectory of length {} too short for {delays} delays",
                    t.len()
                )));
            }
            delay_embed(&t.states, delays)
        })
        .collect()
}

/// Embed every trajectory separately, fit the PCA (if requested) on the
/// stacked training windows, and return the dataset in model coordinates.
pub fn embed_dataset(
    data: &TrajectoryDataset,
    config: &DelayConfig,
) -> Result<(TrajectoryDataset, EmbeddingMap)> {
    let obs_dim = data.state_dim();
    config.validate(obs_dim)?;
    let windows = raw_windows(data, config.delays)?;
    let pca = match config.pca_components {
        Some(k) => {
            let rows: usize = windows.iter().map(|w| w.nrows()).sum();
            let mut stacked = DMatrix::zeros(rows, config.delays * obs_dim);
            let mut r = 0;
            for w in &windows {
                stacked.rows_mut(r, w.nrows()).copy_from(w);
                r += w.nrows();
            }
            Some(Pca::fit(&stacked, k)?)
        }
        None => None,
    };
    let map = EmbeddingMap {
        delays: config.delays,
        obs_dim,
        pca,
    };
    let embedded = apply_windows(data, &map, windows)?;
    Ok((embedded, map))
}

/// Embed a held-out dataset with a map fitted elsewhere; nothing is refit.
pub fn embed_with(data: &TrajectoryDataset, map: &EmbeddingMap) -> Result<TrajectoryDataset> {
    check_dim("observation dimension", map.obs_dim, data.state_dim())?;
    let windows = raw_windows(data, map.delays)?;
    apply_windows(data, map, windows)
}

fn apply_windows(
    data: &TrajectoryDataset,
    map: &EmbeddingMap,
    windows: Vec<DMatrix<f64>>,
) -> Result<TrajectoryDataset> {
    let trajectories = data
        .trajectories
        .iter()
        .zip(windows)
        .map(|(t, w)| embed_trajectory(t, map, w))
        .collect::<Result<Vec<_>>>()?;
    TrajectoryDataset::new(trajectories, data.dt, data.seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Hour,
    Day,
    Month,
}

/// Position of a timestamp within its day, month and year.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalendarPhase {
    /// Hours since midnight, in `[0, 24)`.
    pub hour_of_day: f64,
    /// Days since the start of the month, in `[0, days_in_month)`.
    pub day_of_month: f64,
    pub days_in_month: f64,
    /// Months since the start of the year, in `[0, 12)`.
    pub month_of_year: f64,
}

impl CalendarPhase {
    fn phase(&self, g: Granularity) -> f64 {
        match g {
            Granularity::Hour => self.hour_of_day / 24.0,
            Granularity::Day => self.day_of_month / self.days_in_month,
            Granularity::Month => self.month_of_year / 12.0,
        }
    }
}

/// Columns `sin(2π τ/P), cos(2π τ/P)` for each requested granularity.
pub fn time_features(stamps: &[CalendarPhase], granularities: &[Granularity]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(stamps.len(), 2 * granularities.len());
    for (r, stamp) in stamps.iter().enumerate() {
        for (g, &gran) in granularities.iter().enumerate() {
            let angle = 2.0 * PI * stamp.phase(gran);
            out[(r, 2 * g)] = libm::sin(angle);
            out[(r, 2 * g + 1)] = libm::cos(angle);
        }
    }
    out
}
