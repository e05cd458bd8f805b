//! Sensor atomic: replays a dataset series with configurable period,
//! emission delay, saturation bounds, quantization and Gaussian noise.

use std::collections::HashMap;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use super::{Msg, SensorConfig};
use crate::devs::{Atomic, Bag, Output, SimTime};
use crate::farm::command::CommandKind;
use crate::store::RawRow;

/// Per-sensor series resolvable by dataset id.
pub type SensorSeries = Arc<Vec<(DateTime<Utc>, Option<f64>)>>;
pub type DatasetMap = Arc<HashMap<String, SensorSeries>>;

/// Clamp to the sensor's saturation bounds, then quantize to the precision
/// step with ties rounding to even (platform-stable).
pub fn condition(raw: f64, cfg: &SensorConfig) -> f64 {
    let clamped = raw.clamp(cfg.v_min, cfg.v_max);
    if cfg.precision > 0.0 {
        (clamped / cfg.precision).round_ties_even() * cfg.precision
    } else {
        clamped
    }
}

enum Phase {
    Passive,
    Active {
        series: SensorSeries,
        cursor: usize,
        /// Conditioned reading to emit, prepared at the previous transition
        /// so λ stays pure.
        pending: RawRow,
        emit_at: SimTime,
    },
    /// Emit one fault message, then go passive.
    Faulting { reason: String },
}

pub struct Sensor {
    cfg: SensorConfig,
    datasets: DatasetMap,
    epoch: DateTime<Utc>,
    now: SimTime,
    rng: ChaCha20Rng,
    phase: Phase,
}

impl Sensor {
    pub fn new(cfg: SensorConfig, datasets: DatasetMap, epoch: DateTime<Utc>, seed: u64) -> Self {
        Self {
            cfg,
            datasets,
            epoch,
            now: 0.0,
            rng: ChaCha20Rng::seed_from_u64(seed),
            phase: Phase::Passive,
        }
    }

    fn sim_time(&self, at: DateTime<Utc>) -> SimTime {
        (at - self.epoch).num_milliseconds() as f64 / 1000.0
    }

    fn prepare(&mut self, series: &SensorSeries, cursor: usize) -> Phase {
        match series.get(cursor) {
            None => Phase::Faulting {
                reason: "exhausted".into(),
            },
            Some(&(at, raw)) => {
                let ghi = raw.map(|v| {
                    let noisy = if self.cfg.noise_sigma > 0.0 {
                        let n = Normal::new(0.0, self.cfg.noise_sigma).expect("valid sigma");
                        v + n.sample(&mut self.rng)
                    } else {
                        v
                    };
                    condition(noisy, &self.cfg)
                });
                Phase::Active {
                    series: series.clone(),
                    cursor,
                    pending: RawRow {
                        at,
                        sensor: self.cfg.id.clone(),
                        ghi,
                    },
                    emit_at: self.sim_time(at) + self.cfg.delay as f64,
                }
            }
        }
    }

    fn activate(&mut self, dataset_id: &str) {
        match self.datasets.get(dataset_id) {
            None => {
                self.phase = Phase::Faulting {
                    reason: format!("unknown dataset '{dataset_id}'"),
                };
            }
            Some(series) => {
                // First sample at or after the activation instant.
                let cursor = series.partition_point(|&(at, _)| self.sim_time(at) < self.now);
                let series = series.clone();
                self.phase = self.prepare(&series, cursor);
            }
        }
    }
}

impl Atomic<Msg> for Sensor {
    fn ta(&self) -> SimTime {
        match &self.phase {
            Phase::Passive => f64::INFINITY,
            Phase::Active { emit_at, .. } => (emit_at - self.now).max(0.0),
            Phase::Faulting { .. } => 0.0,
        }
    }

    fn output(&self, out: &mut Output<Msg>) {
        match &self.phase {
            Phase::Passive => {}
            Phase::Active { pending, .. } => out.push(
                "out",
                Msg::Reading {
                    farm: self.cfg.farm.clone(),
                    row: pending.clone(),
                },
            ),
            Phase::Faulting { reason } => out.push(
                "fault",
                Msg::Fault {
                    farm: self.cfg.farm.clone(),
                    sensor: self.cfg.id.clone(),
                    reason: reason.clone(),
                },
            ),
        }
    }

    fn delta_int(&mut self) {
        self.now += self.ta();
        self.phase = match std::mem::replace(&mut self.phase, Phase::Passive) {
            Phase::Active { series, cursor, .. } => self.prepare(&series, cursor + 1),
            _ => Phase::Passive,
        };
    }

    fn delta_ext(&mut self, e: SimTime, bag: &Bag<Msg>) {
        self.now += e;
        for msg in bag.on_port("ctl") {
            if let Msg::Command(cmd) = msg {
                match cmd.kind {
                    CommandKind::ActivateSensors if cmd.farm() == Some(&self.cfg.farm) => {
                        self.activate(&cmd.args[1]);
                    }
                    CommandKind::PassivateSensors if cmd.farm() == Some(&self.cfg.farm) => {
                        self.phase = Phase::Passive;
                    }
                    CommandKind::Passivate => {
                        self.phase = Phase::Passive;
                    }
                    _ => {}
                }
            }
        }
    }
}
