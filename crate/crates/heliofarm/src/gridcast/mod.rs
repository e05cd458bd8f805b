//! Spatio-temporal irradiance forecasting pipeline: standardization,
//! nearest-neighbor mesh-grid interpolation, a small convolutional
//! recurrent network with hand-written gradients, training and
//! multi-horizon inference.

pub mod checkpoint;
pub mod grid;
pub mod net;
pub mod train;

pub use grid::{coverage_check, from_grid, to_grid, GridSpec, Location};
pub use net::{ForecastModel, ModelConfig};
pub use train::{build_day_frames, day_window_indices, predict, train, Dataset, EpochMetrics};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GridcastError {
    #[error("degenerate data: standard deviation is zero")]
    DegenerateData,
    #[error("all readings missing for a frame")]
    AllMissing,
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("insufficient history: need {need} frames, got {got}")]
    InsufficientHistory { need: usize, got: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("training aborted: non-finite loss at step {0}")]
    NonFiniteLoss(usize),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("undefined metrics: empty overlap between prediction and truth")]
    EmptyOverlap,
    #[error("training aborted by caller after epoch {0}")]
    Aborted(usize),
}

/// Per-farm standardization parameters: `x̂ = (x − μ)/σ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mu: f64,
    pub sigma: f64,
}

impl Standardizer {
    /// Fits μ and σ (population) over the non-null values of a set.
    pub fn fit<'a>(values: impl Iterator<Item = &'a f64>) -> Result<Self, GridcastError> {
        let vals: Vec<f64> = values.copied().collect();
        if vals.is_empty() {
            return Err(GridcastError::InsufficientData(
                "no values to standardize".into(),
            ));
        }
        let mu = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / vals.len() as f64;
        let sigma = var.sqrt();
        if sigma <= 0.0 {
            return Err(GridcastError::DegenerateData);
        }
        Ok(Self { mu, sigma })
    }

    pub fn standardize(&self, x: f64) -> f64 {
        (x - self.mu) / self.sigma
    }

    pub fn destandardize(&self, xhat: f64) -> f64 {
        xhat * self.sigma + self.mu
    }
}

/// Forecast error metrics over the non-null truth subset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub mae: f64,
    pub mse: f64,
    pub mape: f64,
    pub count: usize,
}

/// MAE/MSE/MAPE with an ε = 1 W/m² denominator guard for MAPE.
/// Null truth entries are skipped; an empty overlap is an error.
pub fn metrics(pred: &[f64], truth: &[Option<f64>]) -> Result<Metrics, GridcastError> {
    assert_eq!(pred.len(), truth.len(), "metrics length mismatch");
    let mut mae = 0.0;
    let mut mse = 0.0;
    let mut mape = 0.0;
    let mut n = 0usize;
    for (p, t) in pred.iter().zip(truth) {
        if let Some(t) = t {
            let d = p - t;
            mae += d.abs();
            mse += d * d;
            mape += d.abs() / t.abs().max(1.0);
            n += 1;
        }
    }
    if n == 0 {
        return Err(GridcastError::EmptyOverlap);
    }
    Ok(Metrics {
        mae: mae / n as f64,
        mse: mse / n as f64,
        mape: mape / n as f64,
        count: n,
    })
}
