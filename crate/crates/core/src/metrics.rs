//! Forecast error measures.

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::ensure_finite;
use crate::rng::{stream, Stream};

/// Mean of all squared entry-wise errors.
pub fn mse(pred: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<f64> {
    check_dim("prediction rows", truth.nrows(), pred.nrows())?;
    check_dim("prediction columns", truth.ncols(), pred.ncols())?;
    if truth.is_empty() {
        return Err(Error::InvalidArgument("mean squared error of an empty set".into()));
    }
    let total: f64 = pred.iter().zip(truth.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(total / truth.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EklConfig {
    pub sigma2: f64,
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for EklConfig {
    fn default() -> Self {
        Self {
            sigma2: 1.0,
            n_samples: 1000,
            seed: 0,
        }
    }
}

impl EklConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return Err(Error::InvalidArgument("GMM variance must be positive".into()));
        }
        if self.n_samples == 0 {
            return Err(Error::InvalidArgument("at least one Monte Carlo sample".into()));
        }
        Ok(())
    }
}

/// Monte Carlo estimate of `KL(p̂ ‖ q̂)` between Gaussian mixtures placed on
/// the rows of `truth` and `pred`, with samples drawn from `p̂`.
pub fn ekl(truth: &DMatrix<f64>, pred: &DMatrix<f64>, cfg: &EklConfig) -> Result<f64> {
    cfg.validate()?;
    check_dim("prediction dimension", truth.ncols(), pred.ncols())?;
    if truth.nrows() == 0 || pred.nrows() == 0 {
        return Err(Error::InvalidArgument("empty snapshot set".into()));
    }
    ensure_finite(truth, "reference snapshots")?;
    ensure_finite(pred, "predicted snapshots")?;

    // Row-major copies keep the inner distance loops contiguous.
    let truth_rows = truth.transpose();
    let pred_rows = pred.transpose();
    let d = truth.ncols();
    let sigma = libm::sqrt(cfg.sigma2);
    let inv = 0.5 / cfg.sigma2;
    let mut rng = stream(cfg.seed, Stream::Metric);
    let mut x = alloc::vec![0.0; d];
    let mut buf_p = alloc::vec![0.0; truth.nrows()];
    let mut buf_q = alloc::vec![0.0; pred.nrows()];
    let mut total = 0.0;
    for _ in 0..cfg.n_samples {
        let c = rng.random_range(0..truth.nrows());
        for (k, xk) in x.iter_mut().enumerate() {
            let noise: f64 = rng.sample(StandardNormal);
            *xk = truth_rows[(k, c)] + sigma * noise;
        }
        let log_p = log_mixture_density(&truth_rows, &x, inv, &mut buf_p);
        let log_q = log_mixture_density(&pred_rows, &x, inv, &mut buf_q);
        total += log_p - log_q;
    }
    let value = total / cfg.n_samples as f64;
    if !value.is_finite() {
        return Err(Error::NonFinite("EKL estimate"));
    }
    Ok(value)
}

/// Log-density, up to the shared normalizing constant, of a uniform
/// isotropic mixture with one centre per column of `centres`.
fn log_mixture_density(centres: &DMatrix<f64>, x: &[f64], inv_two_sigma2: f64, buf: &mut [f64]) -> f64 {
    let mut peak = f64::NEG_INFINITY;
    for (slot, col) in buf.iter_mut().zip(centres.column_iter()) {
        let dist: f64 = col.iter().zip(x).map(|(c, v)| (v - c) * (v - c)).sum();
        *slot = -dist * inv_two_sigma2;
        peak = peak.max(*slot);
    }
    let sum: f64 = buf.iter().map(|v| libm::exp(v - peak)).sum();
    peak + libm::log(sum) - libm::log(buf.len() as f64)
}
