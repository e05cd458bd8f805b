//! The edge/fog/cloud farm model graph: a simulation-script event source,
//! sensor atomics, per-farm fog server and service atomics, plus the cloud.

pub mod cloud;
pub mod command;
pub mod fog;
pub mod sensor;
pub mod services;
pub mod synth;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};

use crate::devs::{derive_seed, Atomic, AtomicSpec, Bag, Coupled, Output, SimTime};
use crate::store::{EstRow, RawRow};
use command::Command;

/// The message alphabet flowing through the model graph.
#[derive(Debug, Clone)]
pub enum Msg {
    Command(Command),
    Reading {
        farm: String,
        row: RawRow,
    },
    /// One virtual day of buffered readings, fog → cloud.
    DailyPacket {
        farm: String,
        rows: Vec<RawRow>,
    },
    Estimated {
        farm: String,
        rows: Vec<EstRow>,
    },
    Fault {
        farm: String,
        sensor: String,
        reason: String,
    },
    /// Farm-level prediction error over a daylight window, fog → cloud.
    ErrorReport {
        farm: String,
        mae: f64,
        start: DateTime<Utc>,
        end: DateTime<Utc>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorConfig {
    pub id: String,
    pub farm: String,
    pub lat: f64,
    pub lon: f64,
    /// Seconds between readings.
    pub period: u64,
    /// Seconds between the nominal sample time and emission.
    pub delay: u64,
    pub v_min: f64,
    pub v_max: f64,
    /// Quantization step in W/m²; 0 disables quantization.
    pub precision: f64,
    /// Gaussian noise standard deviation in W/m².
    pub noise_sigma: f64,
}

const SENSORS_HEADER: &str = "id,lat,lon,period,delay,v_min,v_max,precision,noise_sigma";

pub fn save_sensor_configs(
    root: &Path,
    farm: &str,
    sensors: &[SensorConfig],
) -> std::io::Result<PathBuf> {
    let dir = root.join(farm);
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("sensors.csv");
    let mut text = String::from(SENSORS_HEADER);
    text.push('\n');
    for s in sensors {
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            s.id, s.lat, s.lon, s.period, s.delay, s.v_min, s.v_max, s.precision, s.noise_sigma
        ));
    }
    std::fs::write(&path, text)?;
    Ok(path)
}

pub fn load_sensor_configs(root: &Path, farm: &str) -> anyhow::Result<Vec<SensorConfig>> {
    let path = root.join(farm).join("sensors.csv");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| anyhow::anyhow!("cannot read {}: {e}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            anyhow::ensure!(line == SENSORS_HEADER, "bad sensors.csv header");
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        anyhow::ensure!(f.len() == 9, "bad sensors.csv line {}", i + 1);
        out.push(SensorConfig {
            id: f[0].to_string(),
            farm: farm.to_string(),
            lat: f[1].parse()?,
            lon: f[2].parse()?,
            period: f[3].parse()?,
            delay: f[4].parse()?,
            v_min: f[5].parse()?,
            v_max: f[6].parse()?,
            precision: f[7].parse()?,
            noise_sigma: f[8].parse()?,
        });
    }
    Ok(out)
}

/// Replays a parsed simulation script, emitting each command at its
/// virtual time on port `cmd`.
pub struct ScriptSource {
    commands: Vec<Command>,
    epoch: DateTime<Utc>,
    cursor: usize,
    now: SimTime,
}

impl ScriptSource {
    pub fn new(commands: Vec<Command>, epoch: DateTime<Utc>) -> Self {
        Self {
            commands,
            epoch,
            cursor: 0,
            now: 0.0,
        }
    }

    fn due(&self, i: usize) -> SimTime {
        (self.commands[i].at - self.epoch).num_milliseconds() as f64 / 1000.0
    }
}

impl Atomic<Msg> for ScriptSource {
    fn ta(&self) -> SimTime {
        if self.cursor < self.commands.len() {
            (self.due(self.cursor) - self.now).max(0.0)
        } else {
            f64::INFINITY
        }
    }

    fn output(&self, out: &mut Output<Msg>) {
        let t = self.due(self.cursor);
        let mut i = self.cursor;
        while i < self.commands.len() && self.due(i) == t {
            out.push("cmd", Msg::Command(self.commands[i].clone()));
            i += 1;
        }
    }

    fn delta_int(&mut self) {
        self.now = self.due(self.cursor);
        let t = self.due(self.cursor);
        while self.cursor < self.commands.len() && self.due(self.cursor) == t {
            self.cursor += 1;
        }
    }

    fn delta_ext(&mut self, e: SimTime, _bag: &Bag<Msg>) {
        self.now += e;
    }
}

/// Everything needed to instantiate one farm's coupled model.
pub struct FarmSetup {
    pub name: String,
    pub sensors: Vec<SensorConfig>,
    /// Loaded datasets, keyed by the (opaque) dataset id the script uses.
    pub datasets: HashMap<String, Vec<RawRow>>,
}

pub struct BuildConfig {
    pub fog_root: PathBuf,
    pub cloud_root: PathBuf,
    pub seed: u64,
    pub retrain_threshold: f64,
    pub model_config: crate::gridcast::net::ModelConfig,
}

/// Builds the full coupled model: script source, one coupled model per
/// farm (sensors + fog + services), and the cloud.
pub fn build_model(
    commands: Vec<Command>,
    farms: &[FarmSetup],
    cfg: &BuildConfig,
) -> (Coupled<Msg>, DateTime<Utc>) {
    let epoch = commands
        .first()
        .map(|c| c.at)
        .unwrap_or_else(|| Utc::now());

    let mut root = Coupled::new("caide");
    root.add_atomic(AtomicSpec::new(
        "source",
        &[],
        &["cmd"],
        Box::new(ScriptSource::new(commands, epoch)),
    ));

    for farm in farms {
        let fname = format!("farm_{}", farm.name);
        let mut fc = Coupled::new(&fname);
        fc.add_input("cmd");
        fc.add_output("to_cloud");
        fc.add_atomic(AtomicSpec::new(
            "fog",
            &["cmd", "from_sensors", "from_services"],
            &["to_sensors", "to_outlier", "to_inference", "to_cloud"],
            Box::new(fog::FogServer::new(&farm.name, &cfg.fog_root, epoch)),
        ));
        fc.add_atomic(AtomicSpec::new(
            "outliersvc",
            &["cmd"],
            &["out"],
            Box::new(services::OutlierService::new(&farm.name, &cfg.fog_root)),
        ));
        fc.add_atomic(AtomicSpec::new(
            "inferencesvc",
            &["cmd"],
            &["out"],
            Box::new(services::InferenceService::new(&farm.name, &cfg.fog_root)),
        ));

        // Pre-partition datasets per sensor so each atomic owns its series.
        let mut per_sensor: HashMap<String, HashMap<String, sensor::SensorSeries>> = farm
            .sensors
            .iter()
            .map(|s| (s.id.clone(), HashMap::new()))
            .collect();
        for (dsid, rows) in &farm.datasets {
            let mut split: HashMap<String, Vec<(DateTime<Utc>, Option<f64>)>> = HashMap::new();
            for r in rows {
                split.entry(r.sensor.clone()).or_default().push((r.at, r.ghi));
            }
            for (sid, mut series) in split {
                if let Some(map) = per_sensor.get_mut(&sid) {
                    series.sort_by_key(|&(at, _)| at);
                    map.insert(dsid.clone(), Arc::new(series));
                }
            }
        }

        for s in &farm.sensors {
            let datasets: sensor::DatasetMap =
                Arc::new(per_sensor.remove(&s.id).unwrap_or_default());
            let seed = derive_seed(cfg.seed, &format!("caide.{fname}.{}", s.id));
            fc.add_atomic(AtomicSpec::new(
                &s.id,
                &["ctl"],
                &["out", "fault"],
                Box::new(sensor::Sensor::new(s.clone(), datasets, epoch, seed)),
            ));
            fc.couple(("fog", "to_sensors"), (&s.id, "ctl"));
            fc.couple((&s.id, "out"), ("fog", "from_sensors"));
            fc.couple((&s.id, "fault"), ("fog", "from_sensors"));
        }

        fc.couple_input("cmd", ("fog", "cmd"));
        fc.couple(("fog", "to_outlier"), ("outliersvc", "cmd"));
        fc.couple(("fog", "to_inference"), ("inferencesvc", "cmd"));
        fc.couple(("outliersvc", "out"), ("fog", "from_services"));
        fc.couple(("inferencesvc", "out"), ("fog", "from_services"));
        fc.couple_output(("fog", "to_cloud"), "to_cloud");

        root.add_coupled(fc);
        root.couple(("source", "cmd"), (&fname, "cmd"));
    }

    root.add_atomic(AtomicSpec::new(
        "cloud",
        &["in"],
        &[],
        Box::new(
            cloud::CloudServer::new(
                &cfg.cloud_root,
                &cfg.fog_root,
                cfg.seed,
                cfg.retrain_threshold,
            )
            .with_model_config(cfg.model_config.clone()),
        ),
    ));
    root.couple(("source", "cmd"), ("cloud", "in"));
    for farm in farms {
        root.couple((&format!("farm_{}", farm.name), "to_cloud"), ("cloud", "in"));
    }
    (root, epoch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::devs::{Coordinator, Mode};
    use crate::store::Datastore;
    use chrono::TimeZone;

    fn epoch() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2010, 6, 1, 0, 0, 0).unwrap()
    }

    fn monitoring_script(days: i64) -> Vec<Command> {
        let text = format!(
            "DATETIME;COMMAND;ARGUMENTS\n\
             2010-06-01 00:00:00;ACTIVATE\n\
             2010-06-01 00:00:00;CMD_ACTIVATE_SENSORS;Oahu;d1\n\
             2010-06-{:02} 00:00:30;PASSIVATE\n",
            1 + days
        );
        command::parse_simulation_file(&text).unwrap()
    }

    fn setup(sensors: usize, days: u32) -> FarmSetup {
        let spec = synth::SynthSpec {
            farm: "Oahu".into(),
            sensors,
            ..synth::SynthSpec::default()
        };
        let (cfgs, rows) = synth::synth_generate(
            &spec,
            chrono::NaiveDate::from_ymd_opt(2010, 6, 1).unwrap(),
            days,
            11,
        )
        .unwrap();
        let mut datasets = HashMap::new();
        datasets.insert("d1".to_string(), rows);
        FarmSetup {
            name: "Oahu".into(),
            sensors: cfgs,
            datasets,
        }
    }

    fn run(mode: Mode, fog: &Path, cloud_dir: &Path) -> crate::devs::SimulationStats {
        let farm = setup(3, 1);
        save_sensor_configs(fog, "Oahu", &farm.sensors).unwrap();
        let cfg = BuildConfig {
            fog_root: fog.to_path_buf(),
            cloud_root: cloud_dir.to_path_buf(),
            seed: 5,
            retrain_threshold: 150.0,
            model_config: Default::default(),
        };
        let (model, ep) = build_model(monitoring_script(1), &[farm], &cfg);
        let mut coord = Coordinator::initialize(model, ep).unwrap();
        coord.set_mode(mode);
        coord.simulate_until(f64::INFINITY).unwrap()
    }

    #[test]
    fn monitoring_run_conserves_readings() {
        let fog = tempfile::tempdir().unwrap();
        let cloud_dir = tempfile::tempdir().unwrap();
        run(Mode::Sequential, fog.path(), cloud_dir.path());
        let from = epoch();
        let to = epoch() + chrono::Duration::days(2);
        let fog_rows = Datastore::open(fog.path()).read_raw("Oahu", from, to).unwrap();
        let cloud_rows = Datastore::open(cloud_dir.path())
            .read_raw("Oahu", from, to)
            .unwrap();
        // 3 sensors × 1440 minutes, conserved fog and cloud.
        assert_eq!(fog_rows.len(), 3 * 1440);
        assert_eq!(fog_rows, cloud_rows);
    }

    #[test]
    fn replay_is_byte_identical() {
        let hash = |dir: &Path| {
            let mut entries: Vec<(String, Vec<u8>)> = walk_files(dir)
                .into_iter()
                .map(|p| {
                    (
                        p.strip_prefix(dir).unwrap().display().to_string(),
                        std::fs::read(&p).unwrap(),
                    )
                })
                .collect();
            entries.sort();
            entries
        };
        let (f1, c1) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let (f2, c2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        run(Mode::Sequential, f1.path(), c1.path());
        run(Mode::Sequential, f2.path(), c2.path());
        assert_eq!(hash(f1.path()), hash(f2.path()));
        assert_eq!(hash(c1.path()), hash(c2.path()));
    }

    #[test]
    fn parallel_matches_sequential_datastore() {
        let (f1, c1) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let (f2, c2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        run(Mode::Sequential, f1.path(), c1.path());
        run(Mode::Parallel(4), f2.path(), c2.path());
        let read = |d: &Path| {
            Datastore::open(d)
                .read_raw("Oahu", epoch(), epoch() + chrono::Duration::days(2))
                .unwrap()
        };
        assert_eq!(read(f1.path()), read(f2.path()));
        assert_eq!(read(c1.path()), read(c2.path()));
    }

    pub(super) fn walk_files(dir: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            if let Ok(entries) = std::fs::read_dir(&d) {
                for e in entries.flatten() {
                    let p = e.path();
                    if p.is_dir() {
                        stack.push(p);
                    } else {
                        out.push(p);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn sensors_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let sensors = setup(4, 1).sensors;
        save_sensor_configs(dir.path(), "Oahu", &sensors).unwrap();
        let back = load_sensor_configs(dir.path(), "Oahu").unwrap();
        assert_eq!(back, sensors);
    }
}
