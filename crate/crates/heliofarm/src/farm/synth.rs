//! Synthetic clear-sky irradiance generator used to seed desk-scale farms.

use chrono::{Duration, NaiveDate, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use super::SensorConfig;
use crate::gridcast::train::{DAY_END_MIN, DAY_START_MIN};
use crate::store::RawRow;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("empty date range")]
    EmptyRange,
    #[error("farm needs at least one sensor")]
    NoSensors,
}

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub farm: String,
    pub sensors: usize,
    /// (lat_min, lat_max, lon_min, lon_max)
    pub bbox: (f64, f64, f64, f64),
    /// Seconds between samples.
    pub period: u64,
    /// Random dips emulating passing clouds.
    pub cloud_dips: bool,
    /// Number of outlier spikes injected across the whole range.
    pub spikes: usize,
    /// Fraction of readings dropped to null (sensor dropout).
    pub dropout: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            farm: "farm".into(),
            sensors: 18,
            bbox: (37.05, 37.15, -2.40, -2.30),
            period: 60,
            cloud_dips: false,
            spikes: 0,
            dropout: 0.0,
        }
    }
}

/// Clear-sky GHI at `minute_of_day` for daily amplitude `amp`:
/// `amp · max(0, sin(π·(t−sunrise)/(sunset−sunrise)))` with sunrise 05:00
/// and sunset 20:00.
pub fn clear_sky(minute_of_day: f64, amp: f64) -> f64 {
    let sunrise = DAY_START_MIN as f64;
    let sunset = DAY_END_MIN as f64;
    let x = (minute_of_day - sunrise) / (sunset - sunrise);
    amp * (std::f64::consts::PI * x).sin().max(0.0)
}

/// Deterministically generates sensor placements and a per-minute GHI
/// dataset over `[start, start + days)`.
pub fn synth_generate(
    spec: &SynthSpec,
    start: NaiveDate,
    days: u32,
    seed: u64,
) -> Result<(Vec<SensorConfig>, Vec<RawRow>), SynthError> {
    if days == 0 {
        return Err(SynthError::EmptyRange);
    }
    if spec.sensors == 0 {
        return Err(SynthError::NoSensors);
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let (lat_min, lat_max, lon_min, lon_max) = spec.bbox;
    let mut sensors = Vec::with_capacity(spec.sensors);
    // Per-sensor multiplicative shading factor so the field is not flat.
    let mut factors = Vec::with_capacity(spec.sensors);
    for i in 0..spec.sensors {
        sensors.push(SensorConfig {
            id: format!("s{i:02}"),
            farm: spec.farm.clone(),
            lat: rng.gen_range(lat_min..lat_max),
            lon: rng.gen_range(lon_min..lon_max),
            period: spec.period,
            delay: 0,
            v_min: 0.0,
            v_max: 1400.0,
            precision: 0.01,
            noise_sigma: 0.0,
        });
        factors.push(rng.gen_range(0.92..1.08));
    }

    let mut rows = Vec::new();
    for d in 0..days {
        let date = start + Duration::days(d as i64);
        let amp = rng.gen_range(600.0..1100.0);
        let day_start = Utc.from_utc_datetime(&date.and_hms_opt(0, 0, 0).unwrap());
        let samples = 86_400 / spec.period;
        for k in 0..samples {
            let at = day_start + Duration::seconds((k * spec.period) as i64);
            let minute = (k * spec.period) as f64 / 60.0;
            let base = clear_sky(minute, amp);
            let dip = if spec.cloud_dips && base > 0.0 && rng.gen_bool(0.05) {
                rng.gen_range(0.3..0.9)
            } else {
                1.0
            };
            for (s, cfg) in sensors.iter().enumerate() {
                let dropped = spec.dropout > 0.0 && rng.gen_bool(spec.dropout);
                let ghi = if dropped {
                    None
                } else {
                    Some(base * dip * factors[s])
                };
                rows.push(RawRow {
                    at,
                    sensor: cfg.id.clone(),
                    ghi,
                });
            }
        }
    }
    // Spikes replace daylight readings with out-of-band values.
    let daylight: Vec<usize> = rows
        .iter()
        .enumerate()
        .filter(|(_, r)| matches!(r.ghi, Some(v) if v > 0.0))
        .map(|(i, _)| i)
        .collect();
    for _ in 0..spec.spikes {
        if daylight.is_empty() {
            break;
        }
        let idx = daylight[rng.gen_range(0..daylight.len())];
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        if let Some(v) = rows[idx].ghi {
            rows[idx].ghi = Some((v + sign * rng.gen_range(300.0..600.0)).max(0.0));
        }
    }
    Ok((sensors, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sine_peak_at_solar_noon() {
        // Midpoint of the 05:00–20:00 window is 12:30.
        let v = clear_sky(12.0 * 60.0 + 30.0, 1000.0);
        assert!((v - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn night_clamps_to_zero() {
        assert_eq!(clear_sky(4.0 * 60.0, 1000.0), 0.0);
        assert_eq!(clear_sky(21.0 * 60.0, 1000.0), 0.0);
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = SynthSpec {
            sensors: 3,
            cloud_dips: true,
            spikes: 5,
            dropout: 0.01,
            ..SynthSpec::default()
        };
        let start = NaiveDate::from_ymd_opt(2010, 6, 1).unwrap();
        let a = synth_generate(&spec, start, 2, 7).unwrap();
        let b = synth_generate(&spec, start, 2, 7).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        let c = synth_generate(&spec, start, 2, 8).unwrap();
        assert_ne!(a.1, c.1);
    }

    #[test]
    fn empty_range_rejected() {
        let start = NaiveDate::from_ymd_opt(2010, 6, 1).unwrap();
        assert!(matches!(
            synth_generate(&SynthSpec::default(), start, 0, 1),
            Err(SynthError::EmptyRange)
        ));
    }

    #[test]
    fn row_count_and_bounds() {
        let spec = SynthSpec {
            sensors: 2,
            ..SynthSpec::default()
        };
        let start = NaiveDate::from_ymd_opt(2010, 6, 1).unwrap();
        let (sensors, rows) = synth_generate(&spec, start, 1, 3).unwrap();
        assert_eq!(sensors.len(), 2);
        assert_eq!(rows.len(), 2 * 1440);
        for r in &rows {
            if let Some(v) = r.ghi {
                assert!((0.0..=1400.0).contains(&v));
            }
        }
        for s in &sensors {
            assert!((spec.bbox.0..spec.bbox.1).contains(&s.lat));
            assert!((spec.bbox.2..spec.bbox.3).contains(&s.lon));
        }
    }
}
