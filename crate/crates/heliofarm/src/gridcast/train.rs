//! Dataset windowing, Adam training loop and multi-horizon inference.
//!
//! A farm-day covers 05:00–20:00 at 1-minute granularity: 901 frames.
//! Every index `t` with `n_x` history and `max(horizon)` future inside the
//! day yields one sample `(X = frames[t-n_x+1..=t], Y = frames[t+h])`.

use chrono::{DateTime, Timelike, Utc};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::grid::{from_grid, to_grid, GridSpec, Location};
use super::net::ForecastModel;
use super::{GridcastError, Standardizer};

/// Frames per farm-day: 15 hours of 60 readings plus the final 20:00 one.
pub const FRAMES_PER_DAY: usize = 901;

/// Daylight window start/end, minutes from midnight.
pub const DAY_START_MIN: u32 = 5 * 60;
pub const DAY_END_MIN: u32 = 20 * 60;

pub fn is_daylight(at: DateTime<Utc>) -> bool {
    let m = at.hour() * 60 + at.minute();
    (DAY_START_MIN..=DAY_END_MIN).contains(&m)
}

/// Converts one day of per-minute, per-sensor raw readings into
/// standardized mesh-grid frames. `day_values[m][s]` is sensor `s` at
/// minute `m` of the daylight window. A frame with every sensor null is
/// substituted with the previous frame (or a standardized-zero fill for
/// the first frame).
pub fn build_day_frames(
    day_values: &[Vec<Option<f64>>],
    locs: &[Location],
    spec: &GridSpec,
    scaler: &Standardizer,
) -> Result<Vec<Vec<f64>>, GridcastError> {
    let mut frames: Vec<Vec<f64>> = Vec::with_capacity(day_values.len());
    for row in day_values {
        let std_row: Vec<Option<f64>> = row.iter().map(|v| v.map(|v| scaler.standardize(v))).collect();
        match to_grid(&std_row, locs, spec) {
            Ok(g) => frames.push(g),
            Err(GridcastError::AllMissing) => {
                let fallback = frames
                    .last()
                    .cloned()
                    .unwrap_or_else(|| vec![scaler.standardize(0.0); spec.pixels()]);
                frames.push(fallback);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(frames)
}

/// Indices `t` within a day that admit a full sample.
pub fn day_window_indices(frames: usize, n_x: usize, horizons: &[u32]) -> Vec<usize> {
    let max_h = *horizons.iter().max().unwrap_or(&0) as usize;
    if frames < n_x + max_h {
        return Vec::new();
    }
    (n_x - 1..frames - max_h).collect()
}

/// Standardized training data: mesh-grid frames grouped by day.
pub struct Dataset {
    pub days: Vec<Vec<Vec<f64>>>,
}

impl Dataset {
    pub fn sample_count(&self, n_x: usize, horizons: &[u32]) -> usize {
        self.days
            .iter()
            .map(|d| day_window_indices(d.len(), n_x, horizons).len())
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    /// Standardized mean absolute error over the epoch's samples.
    pub mae: f64,
    /// Standardized mean squared error over the epoch's samples.
    pub mse: f64,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// Trains the model in place with per-sample Adam steps. Sample order is
/// shuffled per epoch from `seed`, so identical seed/config/data yield
/// identical weights. Returns standardized MAE/MSE per epoch.
pub fn train(
    model: &mut ForecastModel,
    data: &Dataset,
    epochs: usize,
    seed: u64,
) -> Result<Vec<EpochMetrics>, GridcastError> {
    train_with_progress(model, data, epochs, seed, &mut |_, _| true)
}

/// Like [`train`] but invokes `on_epoch(epoch, metrics)` after each epoch
/// (1-based). A `false` return aborts training with
/// [`GridcastError::Aborted`], leaving the model at its post-epoch state.
pub fn train_with_progress(
    model: &mut ForecastModel,
    data: &Dataset,
    epochs: usize,
    seed: u64,
    on_epoch: &mut dyn FnMut(usize, EpochMetrics) -> bool,
) -> Result<Vec<EpochMetrics>, GridcastError> {
    assert!(epochs >= 1, "epochs must be >= 1");
    let n_x = model.config.n_x;
    let horizons = model.config.horizons.clone();
    let mut samples: Vec<(usize, usize)> = Vec::new();
    for (di, day) in data.days.iter().enumerate() {
        for t in day_window_indices(day.len(), n_x, &horizons) {
            samples.push((di, t));
        }
    }
    if samples.is_empty() {
        return Err(GridcastError::InsufficientData(
            "dataset smaller than one window".into(),
        ));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut adam = Adam::new(model.params.len());
    let mut report = Vec::with_capacity(epochs);
    let mut step = 0usize;
    for epoch in 1..=epochs {
        samples.shuffle(&mut rng);
        let mut mae_sum = 0.0;
        let mut mse_sum = 0.0;
        for &(di, t) in &samples {
            let day = &data.days[di];
            let frames: Vec<Vec<f64>> = day[t + 1 - n_x..=t].to_vec();
            let truth: Vec<Vec<f64>> = horizons
                .iter()
                .map(|&h| day[t + h as usize].clone())
                .collect();
            let (loss, grads) = model.loss_and_grads(&frames, &truth)?;
            step += 1;
            if !loss.is_finite() {
                return Err(GridcastError::NonFiniteLoss(step));
            }
            // standardized MAE on this sample
            let pred = model.forward(&frames)?;
            let mut mae = 0.0;
            let mut n = 0usize;
            for (p, tr) in pred.iter().zip(&truth) {
                for (pv, tv) in p.iter().zip(tr) {
                    mae += (pv - tv).abs();
                    n += 1;
                }
            }
            mae_sum += mae / n as f64;
            mse_sum += loss;
            adam.step(&mut model.params, &grads);
        }
        let em = EpochMetrics {
            mae: mae_sum / samples.len() as f64,
            mse: mse_sum / samples.len() as f64,
        };
        report.push(em);
        if !on_epoch(epoch, em) {
            return Err(GridcastError::Aborted(epoch));
        }
    }
    Ok(report)
}

/// Per-sensor forecast values for one horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct HorizonForecast {
    pub horizon_min: u32,
    pub at: DateTime<Utc>,
    /// Values aligned to the location list used for inference, in W/m².
    pub values: Vec<f64>,
    /// False when the target timestamp falls outside the daylight window;
    /// such values are fixed to zero and excluded from error metrics.
    pub daylight: bool,
}

/// Runs the full inference chain: standardize → to_grid per frame →
/// stack n_x → forward → from_grid per horizon frame → destandardize.
/// `history[m][s]` holds raw per-sensor readings for the n_x minutes
/// ending at `at` (oldest first).
pub fn predict(
    model: &ForecastModel,
    history: &[Vec<Option<f64>>],
    locs: &[Location],
    at: DateTime<Utc>,
) -> Result<Vec<HorizonForecast>, GridcastError> {
    let n_x = model.config.n_x;
    if history.len() < n_x {
        return Err(GridcastError::InsufficientHistory {
            need: n_x,
            got: history.len(),
        });
    }
    let recent = &history[history.len() - n_x..];
    let frames = build_day_frames(recent, locs, &model.grid, &model.scaler)?;
    let out = model.forward(&frames)?;
    let mut forecasts = Vec::with_capacity(model.config.horizons.len());
    for (hi, &h) in model.config.horizons.iter().enumerate() {
        let target = at + chrono::Duration::minutes(h as i64);
        let daylight = is_daylight(target);
        let values: Vec<f64> = if daylight {
            from_grid(&out[hi], locs, &model.grid)
                .into_iter()
                .map(|v| model.scaler.destandardize(v))
                .collect()
        } else {
            vec![0.0; locs.len()]
        };
        forecasts.push(HorizonForecast {
            horizon_min: h,
            at: target,
            values,
            daylight,
        });
    }
    Ok(forecasts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridcast::ModelConfig;
    use chrono::TimeZone;

    fn spec() -> GridSpec {
        GridSpec::new(4, 4, (0.0, 1.0, 0.0, 1.0))
    }

    fn locs(n: usize) -> Vec<Location> {
        (0..n)
            .map(|i| Location {
                id: format!("s{i:02}"),
                lat: 0.1 + 0.8 * (i as f64 / n as f64),
                lon: 0.9 - 0.8 * (i as f64 / n as f64),
            })
            .collect()
    }

    #[test]
    fn window_indices_match_daylight_semantics() {
        let idx = day_window_indices(FRAMES_PER_DAY, 10, &[1, 11, 31, 61]);
        // first sample input ends at minute 9 (05:09), last at 839 (18:59)
        assert_eq!(*idx.first().unwrap(), 9);
        assert_eq!(*idx.last().unwrap(), 839);
        assert_eq!(idx.len(), 831);
    }

    #[test]
    fn forecast_targets_for_first_and_last_window() {
        let cfg = ModelConfig {
            cells: 1,
            hidden: 1,
            kernel: 1,
            dense: 1,
            n_x: 10,
            horizons: vec![1, 11, 31, 61],
        };
        let scaler = Standardizer { mu: 400.0, sigma: 200.0 };
        let model = ForecastModel::new(cfg, spec(), scaler, 1);
        let ls = locs(4);
        let history: Vec<Vec<Option<f64>>> = (0..10)
            .map(|_| vec![Some(400.0); 4])
            .collect();
        let at = Utc.with_ymd_and_hms(2010, 6, 27, 5, 9, 0).unwrap();
        let fc = predict(&model, &history, &ls, at).unwrap();
        let times: Vec<String> = fc.iter().map(|f| f.at.format("%H:%M").to_string()).collect();
        assert_eq!(times, ["05:10", "05:20", "05:40", "06:10"]);
        let at = Utc.with_ymd_and_hms(2010, 6, 27, 18, 59, 0).unwrap();
        let fc = predict(&model, &history, &ls, at).unwrap();
        let times: Vec<String> = fc.iter().map(|f| f.at.format("%H:%M").to_string()).collect();
        assert_eq!(times, ["19:00", "19:10", "19:30", "20:00"]);
        assert!(fc.iter().all(|f| f.daylight));
    }

    #[test]
    fn night_targets_are_zero_filled() {
        let cfg = ModelConfig {
            cells: 1,
            hidden: 1,
            kernel: 1,
            dense: 1,
            n_x: 10,
            horizons: vec![1, 61],
        };
        let scaler = Standardizer { mu: 400.0, sigma: 200.0 };
        let model = ForecastModel::new(cfg, spec(), scaler, 1);
        let ls = locs(4);
        let history: Vec<Vec<Option<f64>>> = (0..10).map(|_| vec![Some(500.0); 4]).collect();
        // 19:29 + 61min = 20:30, after the daylight window
        let at = Utc.with_ymd_and_hms(2010, 6, 27, 19, 29, 0).unwrap();
        let fc = predict(&model, &history, &ls, at).unwrap();
        assert!(fc[0].daylight); // 19:30
        assert!(!fc[1].daylight); // 20:30
        assert!(fc[1].values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn short_history_is_an_error() {
        let cfg = ModelConfig {
            cells: 1,
            hidden: 1,
            kernel: 1,
            dense: 1,
            n_x: 10,
            horizons: vec![1],
        };
        let model = ForecastModel::new(cfg, spec(), Standardizer { mu: 0.0, sigma: 1.0 }, 1);
        let history: Vec<Vec<Option<f64>>> = (0..5).map(|_| vec![Some(1.0); 4]).collect();
        let at = Utc.with_ymd_and_hms(2010, 6, 27, 12, 0, 0).unwrap();
        assert!(matches!(
            predict(&model, &history, &locs(4), at),
            Err(GridcastError::InsufficientHistory { need: 10, got: 5 })
        ));
    }

    #[test]
    fn all_null_frame_falls_back_to_previous() {
        let scaler = Standardizer { mu: 100.0, sigma: 50.0 };
        let ls = locs(2);
        let day = vec![
            vec![Some(150.0), Some(150.0)],
            vec![None, None],
        ];
        let frames = build_day_frames(&day, &ls, &spec(), &scaler).unwrap();
        assert_eq!(frames[0], frames[1]);
        // first frame all-null -> standardized zero fill
        let day = vec![vec![None, None]];
        let frames = build_day_frames(&day, &ls, &spec(), &scaler).unwrap();
        assert!(frames[0].iter().all(|&v| v == scaler.standardize(0.0)));
    }

    #[test]
    fn training_drives_constant_dataset_mse_to_zero() {
        let cfg = ModelConfig {
            cells: 1,
            hidden: 2,
            kernel: 3,
            dense: 1,
            n_x: 3,
            horizons: vec![1, 2],
        };
        let grid = spec();
        let scaler = Standardizer { mu: 500.0, sigma: 100.0 };
        let mut model = ForecastModel::new(cfg, grid, scaler, 5);
        // constant standardized field 0.5 on every frame
        let day: Vec<Vec<f64>> = (0..30).map(|_| vec![0.5; 16]).collect();
        let data = Dataset { days: vec![day] };
        let metrics = train(&mut model, &data, 50, 9).unwrap();
        assert!(
            metrics.last().unwrap().mse < 1e-3,
            "final mse {}",
            metrics.last().unwrap().mse
        );
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = ModelConfig {
            cells: 1,
            hidden: 2,
            kernel: 3,
            dense: 1,
            n_x: 3,
            horizons: vec![1, 2],
        };
        let scaler = Standardizer { mu: 0.0, sigma: 1.0 };
        let day: Vec<Vec<f64>> = (0..20)
            .map(|t| (0..16).map(|i| ((t * 16 + i) as f64 * 0.05).sin()).collect())
            .collect();
        let run = || {
            let mut model = ForecastModel::new(cfg.clone(), spec(), scaler, 5);
            let data = Dataset {
                days: vec![day.clone()],
            };
            let m = train(&mut model, &data, 2, 42).unwrap();
            (model.params, m)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn empty_dataset_is_insufficient() {
        let cfg = ModelConfig {
            cells: 1,
            hidden: 1,
            kernel: 1,
            dense: 1,
            n_x: 10,
            horizons: vec![61],
        };
        let mut model =
            ForecastModel::new(cfg, spec(), Standardizer { mu: 0.0, sigma: 1.0 }, 1);
        let data = Dataset {
            days: vec![vec![vec![0.0; 16]; 20]], // 20 frames < n_x + 61
        };
        assert!(matches!(
            train(&mut model, &data, 1, 0),
            Err(GridcastError::InsufficientData(_))
        ));
    }
}
