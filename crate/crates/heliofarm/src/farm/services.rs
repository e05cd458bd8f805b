//! Fog-layer service atomics: outlier repair and model inference. Both are
//! passive until the fog forwards them a command, read the fog datastore
//! from disk, and hand results back to the fog as estimated rows.

use std::collections::BTreeMap;
use std::path::PathBuf;

use chrono::{DateTime, Duration, NaiveDate, TimeZone, Utc};

use super::command::{Command, CommandKind};
use super::{load_sensor_configs, Msg};
use crate::anomaly::{self, FitConfig, RepairMethod};
use crate::devs::{Atomic, Bag, Output, SimTime};
use crate::gridcast::checkpoint;
use crate::gridcast::grid::Location;
use crate::gridcast::train::{predict, DAY_END_MIN, DAY_START_MIN, FRAMES_PER_DAY};
use crate::store::{Datastore, EstRow, Quality};

fn day_bounds(date: NaiveDate) -> (DateTime<Utc>, DateTime<Utc>) {
    let start = Utc.from_utc_datetime(&date.and_hms_opt(0, 0, 0).unwrap());
    let end = Utc.from_utc_datetime(&date.and_hms_opt(23, 59, 59).unwrap());
    (start, end)
}

fn parse_date(s: &str) -> Option<NaiveDate> {
    NaiveDate::parse_from_str(s, "%Y-%m-%d").ok()
}

/// Shared "reply on next cycle" plumbing for both services.
struct ReplyQueue {
    queue: Vec<Msg>,
}

impl ReplyQueue {
    fn new() -> Self {
        Self { queue: Vec::new() }
    }

    fn ta(&self) -> SimTime {
        if self.queue.is_empty() {
            f64::INFINITY
        } else {
            0.0
        }
    }

    fn emit(&self, out: &mut Output<Msg>) {
        for msg in &self.queue {
            out.push("out", msg.clone());
        }
    }
}

pub struct OutlierService {
    farm: String,
    fog_root: PathBuf,
    reply: ReplyQueue,
}

impl OutlierService {
    pub fn new(farm: &str, fog_root: impl Into<PathBuf>) -> Self {
        Self {
            farm: farm.to_string(),
            fog_root: fog_root.into(),
            reply: ReplyQueue::new(),
        }
    }

    /// CMD_FIX_OUTLIERS: farm;sensor;start_date;end_date;method;band_level
    fn handle(&mut self, cmd: &Command) -> anyhow::Result<()> {
        let sensor = &cmd.args[1];
        let start = parse_date(&cmd.args[2])
            .ok_or_else(|| anyhow::anyhow!("bad start date '{}'", cmd.args[2]))?;
        let end = parse_date(&cmd.args[3])
            .ok_or_else(|| anyhow::anyhow!("bad end date '{}'", cmd.args[3]))?;
        let method = RepairMethod::parse(&cmd.args[4])?;
        let band_level: f64 = cmd.args[5].parse()?;

        let store = Datastore::open(&self.fog_root);
        let (from, _) = day_bounds(start);
        let (_, to) = day_bounds(end);
        let rows = store.read_raw(&self.farm, from, to)?;
        let mut timestamps = Vec::new();
        let mut values = Vec::new();
        for r in rows.iter().filter(|r| &r.sensor == sensor) {
            if timestamps.last() == Some(&r.at) {
                continue;
            }
            timestamps.push(r.at);
            values.push(r.ghi);
        }
        if timestamps.is_empty() {
            anyhow::bail!("no readings for sensor '{sensor}' in interval");
        }
        let cfg = FitConfig {
            band_level,
            ..FitConfig::default()
        };
        let (_, report) = anomaly::fix_outliers(&timestamps, &values, &cfg, method)?;

        let reports = store.reports_dir(&self.farm);
        std::fs::create_dir_all(&reports)?;
        let path = reports.join(format!(
            "outliers_{sensor}_{}_{}.csv",
            cmd.args[2], cmd.args[3]
        ));
        std::fs::write(&path, report.to_csv())?;
        log::info!(
            "outlier service {}: {} flagged of {} points -> {}",
            self.farm,
            report.flagged_count,
            report.points.len(),
            path.display()
        );

        let est: Vec<EstRow> = report
            .points
            .iter()
            .filter_map(|p| {
                p.repaired.map(|v| EstRow {
                    at: p.at,
                    sensor: sensor.clone(),
                    quality: Quality::Repaired,
                    horizon_min: 0,
                    ghi: v,
                })
            })
            .collect();
        if !est.is_empty() {
            self.reply.queue.push(Msg::Estimated {
                farm: self.farm.clone(),
                rows: est,
            });
        }
        Ok(())
    }
}

impl Atomic<Msg> for OutlierService {
    fn ta(&self) -> SimTime {
        self.reply.ta()
    }

    fn output(&self, out: &mut Output<Msg>) {
        self.reply.emit(out);
    }

    fn delta_int(&mut self) {
        self.reply.queue.clear();
    }

    fn delta_ext(&mut self, _e: SimTime, bag: &Bag<Msg>) {
        for msg in bag.on_port("cmd") {
            if let Msg::Command(cmd) = msg {
                if cmd.kind == CommandKind::FixOutliers && cmd.farm() == Some(&self.farm) {
                    if let Err(e) = self.handle(cmd) {
                        log::warn!("outlier service {}: {e}", self.farm);
                    }
                }
            }
        }
    }
}

pub struct InferenceService {
    farm: String,
    fog_root: PathBuf,
    reply: ReplyQueue,
}

impl InferenceService {
    pub fn new(farm: &str, fog_root: impl Into<PathBuf>) -> Self {
        Self {
            farm: farm.to_string(),
            fog_root: fog_root.into(),
            reply: ReplyQueue::new(),
        }
    }

    /// CMD_RUN_PREDICTION: farm;date;horizons;in_db;out_db
    fn handle(&mut self, cmd: &Command) -> anyhow::Result<()> {
        let date = parse_date(&cmd.args[1])
            .ok_or_else(|| anyhow::anyhow!("bad date '{}'", cmd.args[1]))?;
        let wanted: Vec<u32> = cmd.args[2]
            .split(',')
            .map(|h| h.trim().parse::<u32>())
            .collect::<Result<_, _>>()?;
        let in_db = &cmd.args[3];

        let store = Datastore::open(&self.fog_root);
        let bytes = store.load_checkpoint(&self.farm, "latest")?;
        let model = checkpoint::decode(&bytes)?;
        for h in &wanted {
            if !model.config.horizons.contains(h) {
                log::warn!(
                    "inference {}: horizon {h} not in trained set {:?}; skipping",
                    self.farm,
                    model.config.horizons
                );
            }
        }

        let sensors = load_sensor_configs(&self.fog_root, &self.farm)?;
        let locs: Vec<Location> = sensors
            .iter()
            .map(|s| Location {
                id: s.id.clone(),
                lat: s.lat,
                lon: s.lon,
            })
            .collect();

        let (from, to) = day_bounds(date);
        let rows = if in_db == "raw" {
            store.read_raw(&self.farm, from, to)?
        } else {
            store
                .read_dataset(&self.farm, in_db)?
                .into_iter()
                .filter(|r| r.at >= from && r.at <= to)
                .collect()
        };

        // Daylight-window matrix: minute index (from 05:00) × sensor.
        let sensor_idx: BTreeMap<&str, usize> = locs
            .iter()
            .enumerate()
            .map(|(i, l)| (l.id.as_str(), i))
            .collect();
        let mut matrix = vec![vec![None; locs.len()]; FRAMES_PER_DAY];
        let mut truth = vec![vec![None; locs.len()]; FRAMES_PER_DAY];
        let window_start =
            Utc.from_utc_datetime(&date.and_hms_opt(DAY_START_MIN / 60, 0, 0).unwrap());
        for r in &rows {
            let Some(&si) = sensor_idx.get(r.sensor.as_str()) else {
                continue;
            };
            let mins = (r.at - window_start).num_minutes();
            if (0..FRAMES_PER_DAY as i64).contains(&mins) && r.at.timestamp() % 60 == 0 {
                matrix[mins as usize][si] = r.ghi;
                truth[mins as usize][si] = r.ghi;
            }
        }

        let n_x = model.config.n_x;
        let mut est = Vec::new();
        let mut abs_err_sum = 0.0;
        let mut err_count = 0usize;
        for t in (n_x - 1)..FRAMES_PER_DAY {
            let history = &matrix[t + 1 - n_x..=t];
            if history.iter().all(|f| f.iter().all(|v| v.is_none())) {
                continue;
            }
            let at = window_start + Duration::minutes(t as i64);
            let forecasts = match predict(&model, history, &locs, at) {
                Ok(f) => f,
                Err(e) => {
                    log::warn!("inference {} at {at}: {e}", self.farm);
                    continue;
                }
            };
            for f in &forecasts {
                if !wanted.contains(&f.horizon_min) {
                    continue;
                }
                for (si, &v) in f.values.iter().enumerate() {
                    est.push(EstRow {
                        at: f.at,
                        sensor: locs[si].id.clone(),
                        quality: Quality::Predicted,
                        horizon_min: f.horizon_min,
                        ghi: v,
                    });
                    if f.daylight {
                        let target_min = (f.at - window_start).num_minutes();
                        if (0..FRAMES_PER_DAY as i64).contains(&target_min) {
                            if let Some(actual) = truth[target_min as usize][si] {
                                abs_err_sum += (v - actual).abs();
                                err_count += 1;
                            }
                        }
                    }
                }
            }
        }
        if est.is_empty() {
            anyhow::bail!("no predictions produced for {date}");
        }
        self.reply.queue.push(Msg::Estimated {
            farm: self.farm.clone(),
            rows: est,
        });
        if err_count > 0 {
            let mae = abs_err_sum / err_count as f64;
            log::info!("inference {}: day {date} MAE {mae:.2} W/m2", self.farm);
            let window_end = window_start + Duration::minutes(DAY_END_MIN as i64 - DAY_START_MIN as i64);
            self.reply.queue.push(Msg::ErrorReport {
                farm: self.farm.clone(),
                mae,
                start: window_start,
                end: window_end,
            });
        }
        Ok(())
    }
}

impl Atomic<Msg> for InferenceService {
    fn ta(&self) -> SimTime {
        self.reply.ta()
    }

    fn output(&self, out: &mut Output<Msg>) {
        self.reply.emit(out);
    }

    fn delta_int(&mut self) {
        self.reply.queue.clear();
    }

    fn delta_ext(&mut self, _e: SimTime, bag: &Bag<Msg>) {
        for msg in bag.on_port("cmd") {
            if let Msg::Command(cmd) = msg {
                if cmd.kind == CommandKind::RunPrediction && cmd.farm() == Some(&self.farm) {
                    if let Err(e) = self.handle(cmd) {
                        log::warn!("inference service {}: {e}", self.farm);
                    }
                }
            }
        }
    }
}
