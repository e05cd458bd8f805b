//! Cloud atomic: global storage, training dispatch (local or remote with
//! retry/fallback), error-threshold retrain triggering, and report
//! generation.

use std::path::PathBuf;

use chrono::{Duration, NaiveDate, TimeZone, Utc};

use super::command::{Command, CommandKind};
use super::{load_sensor_configs, Msg};
use crate::devs::{derive_seed, Atomic, Bag, Output, SimTime};
use crate::gridcast::grid::{GridSpec, Location};
use crate::gridcast::net::ModelConfig;
use crate::gridcast::train::{DAY_START_MIN, FRAMES_PER_DAY};
use crate::store::Datastore;
use crate::trainsvc::{remote_train, TrainRequest};

pub const DEFAULT_RETRAIN_THRESHOLD: f64 = 150.0;
const RETRY_ATTEMPTS: u32 = 3;

pub struct CloudServer {
    store: Datastore,
    fog_root: PathBuf,
    pub retrain_threshold: f64,
    seed: u64,
    model_config: ModelConfig,
    train_count: usize,
    /// Number of threshold-triggered retrains; observable in tests.
    pub auto_triggered: usize,
    /// Backoff base for remote retries; shrunk in tests.
    pub retry_backoff_ms: u64,
}

impl CloudServer {
    pub fn new(
        cloud_root: impl Into<PathBuf>,
        fog_root: impl Into<PathBuf>,
        seed: u64,
        retrain_threshold: f64,
    ) -> Self {
        Self {
            store: Datastore::open(cloud_root),
            fog_root: fog_root.into(),
            retrain_threshold,
            seed,
            model_config: ModelConfig::default(),
            train_count: 0,
            auto_triggered: 0,
            retry_backoff_ms: 250,
        }
    }

    pub fn with_model_config(mut self, config: ModelConfig) -> Self {
        self.model_config = config;
        self
    }

    fn flush(&mut self) {
        if let Err(e) = self.store.flush() {
            panic!("cloud datastore write failed: {e}");
        }
    }

    /// Assembles the inline training payload from the cloud raw tables:
    /// one daylight-window matrix (901 minutes × sensors) per day.
    fn training_payload(
        &self,
        farm: &str,
        start: NaiveDate,
        end: NaiveDate,
    ) -> anyhow::Result<(Vec<Location>, GridSpec, Vec<Vec<Vec<Option<f64>>>>)> {
        let sensors = load_sensor_configs(&self.fog_root, farm)?;
        let locs: Vec<Location> = sensors
            .iter()
            .map(|s| Location {
                id: s.id.clone(),
                lat: s.lat,
                lon: s.lon,
            })
            .collect();
        anyhow::ensure!(!locs.is_empty(), "farm '{farm}' has no sensors");
        let lat_min = locs.iter().map(|l| l.lat).fold(f64::INFINITY, f64::min);
        let lat_max = locs.iter().map(|l| l.lat).fold(f64::NEG_INFINITY, f64::max);
        let lon_min = locs.iter().map(|l| l.lon).fold(f64::INFINITY, f64::min);
        let lon_max = locs.iter().map(|l| l.lon).fold(f64::NEG_INFINITY, f64::max);
        let margin = 0.01;
        let grid = GridSpec::new(
            10,
            10,
            (
                lat_min - margin,
                lat_max + margin,
                lon_min - margin,
                lon_max + margin,
            ),
        );

        let mut days = Vec::new();
        let mut date = start;
        while date <= end {
            let window_start =
                Utc.from_utc_datetime(&date.and_hms_opt(DAY_START_MIN / 60, 0, 0).unwrap());
            let window_end = window_start + Duration::minutes(FRAMES_PER_DAY as i64 - 1);
            let rows = self.store.read_raw(farm, window_start, window_end)?;
            let mut matrix = vec![vec![None; locs.len()]; FRAMES_PER_DAY];
            for r in &rows {
                let Some(si) = locs.iter().position(|l| l.id == r.sensor) else {
                    continue;
                };
                let mins = (r.at - window_start).num_minutes();
                if (0..FRAMES_PER_DAY as i64).contains(&mins) && r.at.timestamp() % 60 == 0 {
                    matrix[mins as usize][si] = r.ghi;
                }
            }
            days.push(matrix);
            date += Duration::days(1);
        }
        Ok((locs, grid, days))
    }

    /// Dispatches a training job and persists the resulting checkpoint in
    /// the cloud store plus as the farm's fog-side `latest` model.
    pub fn run_training(
        &mut self,
        endpoint: &str,
        farm: &str,
        start: NaiveDate,
        end: NaiveDate,
        epochs: u32,
        label: &str,
    ) -> anyhow::Result<()> {
        let (locations, grid, days) = self.training_payload(farm, start, end)?;
        let req = TrainRequest {
            id: label.to_string(),
            farm: farm.to_string(),
            start_date: start,
            end_date: end,
            epochs,
            seed: derive_seed(self.seed, &format!("train/{farm}/{label}")),
            config: self.model_config.clone(),
            grid,
            locations,
            days,
            resume: None,
        };
        let result = if endpoint == "local" {
            remote_train("local", &req)?
        } else {
            let mut last_err = None;
            let mut outcome = None;
            for attempt in 0..RETRY_ATTEMPTS {
                match remote_train(endpoint, &req) {
                    Ok(r) => {
                        outcome = Some(r);
                        break;
                    }
                    Err(e) => {
                        log::warn!(
                            "training endpoint '{endpoint}' attempt {}/{RETRY_ATTEMPTS} failed: {e}",
                            attempt + 1
                        );
                        last_err = Some(e);
                        std::thread::sleep(std::time::Duration::from_millis(
                            self.retry_backoff_ms << attempt,
                        ));
                    }
                }
            }
            match outcome {
                Some(r) => r,
                None => {
                    log::warn!(
                        "training endpoint '{endpoint}' unreachable ({}); falling back to local",
                        last_err.map(|e| e.to_string()).unwrap_or_default()
                    );
                    remote_train("local", &req)?
                }
            }
        };
        let final_mae = result.metrics.last().map(|m| m.mae).unwrap_or(f64::NAN);
        log::info!(
            "cloud: trained {farm} [{start}..{end}] x{epochs} epochs ({label}); final standardized MAE {final_mae:.4}"
        );
        self.store.save_checkpoint(farm, label, &result.checkpoint)?;
        Datastore::open(&self.fog_root).save_checkpoint(farm, "latest", &result.checkpoint)?;
        Ok(())
    }

    fn handle_command(&mut self, cmd: &Command) {
        match cmd.kind {
            CommandKind::TrainModel => {
                // endpoint;farm;start_date;end_date;epochs
                let parsed = (
                    NaiveDate::parse_from_str(&cmd.args[2], "%Y-%m-%d"),
                    NaiveDate::parse_from_str(&cmd.args[3], "%Y-%m-%d"),
                    cmd.args[4].parse::<u32>(),
                );
                match parsed {
                    (Ok(start), Ok(end), Ok(epochs)) => {
                        self.train_count += 1;
                        let label = format!("train{}", self.train_count);
                        if let Err(e) = self.run_training(
                            &cmd.args[0],
                            &cmd.args[1],
                            start,
                            end,
                            epochs,
                            &label,
                        ) {
                            log::warn!("cloud: training failed: {e}");
                        }
                    }
                    _ => log::warn!("cloud: malformed CMD_TRAIN_MODEL args {:?}", cmd.args),
                }
            }
            CommandKind::GenerateReports => {
                // farm;start_date;end_date;out_dir
                let start = NaiveDate::parse_from_str(&cmd.args[1], "%Y-%m-%d");
                let end = NaiveDate::parse_from_str(&cmd.args[2], "%Y-%m-%d");
                let (Ok(start), Ok(end)) = (start, end) else {
                    log::warn!("cloud: malformed CMD_GENERATE_REPORTS args {:?}", cmd.args);
                    return;
                };
                self.flush();
                let out = PathBuf::from(&cmd.args[3]);
                let out_dir = if out.is_absolute() {
                    out
                } else {
                    self.store.root().join(out)
                };
                if let Err(e) = crate::report::render_reports(
                    self.store.root(),
                    &cmd.args[0],
                    start,
                    end,
                    &out_dir,
                ) {
                    log::warn!("cloud: report generation failed: {e}");
                }
            }
            CommandKind::Passivate => self.flush(),
            _ => {}
        }
    }
}

impl Atomic<Msg> for CloudServer {
    fn ta(&self) -> SimTime {
        f64::INFINITY
    }

    fn output(&self, _out: &mut Output<Msg>) {}

    fn delta_int(&mut self) {}

    fn delta_ext(&mut self, _e: SimTime, bag: &Bag<Msg>) {
        for entry in bag.entries() {
            match &entry.payload {
                Msg::DailyPacket { farm, rows } => {
                    for r in rows {
                        self.store.append_raw(farm, r.clone());
                    }
                    self.flush();
                }
                Msg::Estimated { farm, rows } => {
                    for r in rows {
                        self.store.append_est(farm, r.clone());
                    }
                    self.flush();
                }
                Msg::ErrorReport {
                    farm, mae, start, ..
                } => {
                    if *mae > self.retrain_threshold {
                        self.auto_triggered += 1;
                        let label = format!("auto{}", self.auto_triggered);
                        log::info!(
                            "cloud: farm {farm} MAE {mae:.1} exceeds threshold {}; retraining ({label})",
                            self.retrain_threshold
                        );
                        let date = start.date_naive();
                        if let Err(e) =
                            self.run_training("local", farm, date, date, 1, &label)
                        {
                            log::warn!("cloud: auto retrain failed: {e}");
                        }
                    }
                }
                Msg::Command(cmd) => self.handle_command(cmd),
                Msg::Reading { .. } | Msg::Fault { .. } => {}
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::devs::BagEntry;
    use crate::farm::save_sensor_configs;
    use crate::farm::synth::{synth_generate, SynthSpec};
    use crate::store::RawRow;
    use chrono::DateTime;

    fn bag_of(msgs: Vec<Msg>) -> Bag<Msg> {
        Bag::from_entries(
            msgs.into_iter()
                .enumerate()
                .map(|(i, payload)| BagEntry {
                    src: "t".into(),
                    src_port: "o".into(),
                    emission: i as u32,
                    port: "in".into(),
                    payload,
                })
                .collect(),
        )
    }

    fn epoch() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2010, 6, 1, 0, 0, 0).unwrap()
    }

    #[test]
    fn daily_packet_lands_in_cloud_raw_table() {
        let cloud = tempfile::tempdir().unwrap();
        let fog = tempfile::tempdir().unwrap();
        let mut c = CloudServer::new(cloud.path(), fog.path(), 1, 150.0);
        let rows: Vec<RawRow> = (0..5)
            .map(|i| RawRow {
                at: epoch() + Duration::seconds(60 * i),
                sensor: format!("s{i}"),
                ghi: Some(100.0),
            })
            .collect();
        c.delta_ext(
            0.0,
            &bag_of(vec![Msg::DailyPacket {
                farm: "Oahu".into(),
                rows: rows.clone(),
            }]),
        );
        let stored = Datastore::open(cloud.path())
            .read_raw("Oahu", epoch(), epoch() + Duration::days(1))
            .unwrap();
        assert_eq!(stored.len(), 5);
    }

    #[test]
    fn error_above_threshold_triggers_exactly_one_retrain() {
        let cloud = tempfile::tempdir().unwrap();
        let fog = tempfile::tempdir().unwrap();
        let farm = "Almeria";
        // Seed one synthetic day so the auto-retrain has data.
        let spec = SynthSpec {
            farm: farm.into(),
            sensors: 4,
            ..SynthSpec::default()
        };
        let (sensors, rows) =
            synth_generate(&spec, NaiveDate::from_ymd_opt(2010, 6, 1).unwrap(), 1, 3).unwrap();
        save_sensor_configs(fog.path(), farm, &sensors).unwrap();
        let mut store = Datastore::open(cloud.path());
        for r in rows {
            store.append_raw(farm, r);
        }
        store.flush().unwrap();

        let mut c = CloudServer::new(cloud.path(), fog.path(), 1, 150.0).with_model_config(
            ModelConfig {
                cells: 1,
                hidden: 2,
                kernel: 1,
                dense: 1,
                n_x: 3,
                horizons: vec![1],
            },
        );
        let report = Msg::ErrorReport {
            farm: farm.into(),
            mae: 151.0,
            start: epoch() + Duration::minutes(DAY_START_MIN as i64),
            end: epoch() + Duration::minutes(1200),
        };
        c.delta_ext(0.0, &bag_of(vec![report.clone()]));
        assert_eq!(c.auto_triggered, 1);
        assert!(cloud.path().join(farm).join("models/auto1.ckpt").exists());
        assert!(fog.path().join(farm).join("models/latest.ckpt").exists());

        // Below threshold: no further trigger.
        let quiet = Msg::ErrorReport {
            farm: farm.into(),
            mae: 149.0,
            start: epoch() + Duration::minutes(DAY_START_MIN as i64),
            end: epoch() + Duration::minutes(1200),
        };
        c.delta_ext(0.0, &bag_of(vec![quiet]));
        assert_eq!(c.auto_triggered, 1);
    }

    #[test]
    fn unreachable_endpoint_falls_back_to_local() {
        let cloud = tempfile::tempdir().unwrap();
        let fog = tempfile::tempdir().unwrap();
        let farm = "Oahu";
        let spec = SynthSpec {
            farm: farm.into(),
            sensors: 3,
            ..SynthSpec::default()
        };
        let (sensors, rows) =
            synth_generate(&spec, NaiveDate::from_ymd_opt(2010, 6, 1).unwrap(), 1, 5).unwrap();
        save_sensor_configs(fog.path(), farm, &sensors).unwrap();
        let mut store = Datastore::open(cloud.path());
        for r in rows {
            store.append_raw(farm, r);
        }
        store.flush().unwrap();

        let mut c = CloudServer::new(cloud.path(), fog.path(), 1, 150.0).with_model_config(
            ModelConfig {
                cells: 1,
                hidden: 2,
                kernel: 1,
                dense: 1,
                n_x: 3,
                horizons: vec![1],
            },
        );
        c.retry_backoff_ms = 1;
        let date = NaiveDate::from_ymd_opt(2010, 6, 1).unwrap();
        // Port 1 on loopback refuses connections instantly.
        c.run_training("127.0.0.1:1", farm, date, date, 1, "fallback")
            .unwrap();
        assert!(cloud.path().join(farm).join("models/fallback.ckpt").exists());
    }
}
