//! Per-farm fog server atomic: local persistence of sensor readings,
//! daily-packet flushes to the cloud, and service-request routing.

use chrono::{DateTime, Timelike, Utc};

use super::command::CommandKind;
use super::Msg;
use crate::devs::{Atomic, Bag, Output, SimTime};
use crate::store::{Datastore, RawRow};

const DAY_SECONDS: f64 = 86_400.0;

pub struct FogServer {
    farm: String,
    store: Datastore,
    now: SimTime,
    /// Readings accumulated since the last daily flush.
    buffer: Vec<RawRow>,
    /// Immediate (ta = 0) outputs: (port, message).
    queue: Vec<(String, Msg)>,
    next_midnight: SimTime,
    active: bool,
}

impl FogServer {
    pub fn new(farm: &str, fog_root: impl Into<std::path::PathBuf>, epoch: DateTime<Utc>) -> Self {
        let since_midnight = epoch.num_seconds_from_midnight() as f64;
        Self {
            farm: farm.to_string(),
            store: Datastore::open(fog_root),
            now: 0.0,
            buffer: Vec::new(),
            queue: Vec::new(),
            next_midnight: DAY_SECONDS - since_midnight,
            active: true,
        }
    }

    fn flush_store(&mut self) {
        if let Err(e) = self.store.flush() {
            // The kernel has no error channel out of an atomic; a failing
            // datastore is unrecoverable mid-simulation.
            panic!("fog '{}' datastore write failed: {e}", self.farm);
        }
    }

    fn packet(&self) -> Option<Msg> {
        if self.buffer.is_empty() {
            None
        } else {
            Some(Msg::DailyPacket {
                farm: self.farm.clone(),
                rows: self.buffer.clone(),
            })
        }
    }
}

impl Atomic<Msg> for FogServer {
    fn ta(&self) -> SimTime {
        if !self.queue.is_empty() {
            0.0
        } else if self.active {
            (self.next_midnight - self.now).max(0.0)
        } else {
            f64::INFINITY
        }
    }

    fn output(&self, out: &mut Output<Msg>) {
        if self.queue.is_empty() {
            // Midnight: ship the daily packet.
            if let Some(packet) = self.packet() {
                out.push("to_cloud", packet);
            }
        } else {
            for (port, msg) in &self.queue {
                out.push(port, msg.clone());
            }
        }
    }

    fn delta_int(&mut self) {
        self.now += self.ta();
        if self.queue.is_empty() {
            self.buffer.clear();
            self.flush_store();
            self.next_midnight += DAY_SECONDS;
        } else {
            self.queue.clear();
        }
    }

    fn delta_ext(&mut self, e: SimTime, bag: &Bag<Msg>) {
        self.now += e;
        for entry in bag.entries() {
            match &entry.payload {
                Msg::Reading { farm, row } if farm == &self.farm => {
                    self.store.append_raw(&self.farm, row.clone());
                    self.buffer.push(row.clone());
                }
                Msg::Reading { .. } => {}
                Msg::Fault { sensor, reason, .. } => {
                    log::warn!("fog {}: sensor {sensor} fault: {reason}", self.farm);
                }
                Msg::Estimated { farm, rows } if farm == &self.farm => {
                    for r in rows {
                        self.store.append_est(&self.farm, r.clone());
                    }
                    self.queue
                        .push(("to_cloud".into(), entry.payload.clone()));
                }
                Msg::Estimated { .. } => {}
                Msg::ErrorReport { farm, .. } if farm == &self.farm => {
                    self.queue.push(("to_cloud".into(), entry.payload.clone()));
                }
                Msg::ErrorReport { .. } | Msg::DailyPacket { .. } => {}
                Msg::Command(cmd) => {
                    let mine = cmd.farm() == Some(&self.farm);
                    match cmd.kind {
                        CommandKind::ActivateSensors | CommandKind::PassivateSensors if mine => {
                            self.queue
                                .push(("to_sensors".into(), entry.payload.clone()));
                        }
                        CommandKind::FixOutliers if mine => {
                            // Services read from disk; make sure they see
                            // everything appended so far.
                            self.flush_store();
                            self.queue
                                .push(("to_outlier".into(), entry.payload.clone()));
                        }
                        CommandKind::RunPrediction if mine => {
                            self.flush_store();
                            self.queue
                                .push(("to_inference".into(), entry.payload.clone()));
                        }
                        CommandKind::Passivate => {
                            // Finalize: last (partial) daily packet, local
                            // flush, passivate sensors, then go quiet.
                            if let Some(packet) = self.packet() {
                                self.queue.push(("to_cloud".into(), packet));
                            }
                            self.buffer.clear();
                            self.flush_store();
                            self.queue
                                .push(("to_sensors".into(), entry.payload.clone()));
                            self.active = false;
                        }
                        _ => {}
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::farm::command::Command;
    use crate::store::Quality;
    use chrono::TimeZone;

    fn epoch() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2010, 6, 1, 0, 0, 0).unwrap()
    }

    fn reading(at_s: i64, sensor: &str, v: f64) -> Msg {
        Msg::Reading {
            farm: "Oahu".into(),
            row: RawRow {
                at: epoch() + chrono::Duration::seconds(at_s),
                sensor: sensor.into(),
                ghi: Some(v),
            },
        }
    }

    fn bag_of(msgs: Vec<Msg>) -> Bag<Msg> {
        let entries = msgs
            .into_iter()
            .enumerate()
            .map(|(i, payload)| crate::devs::BagEntry {
                src: "test".into(),
                src_port: "out".into(),
                emission: i as u32,
                port: "from_sensors".into(),
                payload,
            })
            .collect();
        Bag::from_entries(entries)
    }

    #[test]
    fn readings_buffer_until_midnight() {
        let dir = tempfile::tempdir().unwrap();
        let mut fog = FogServer::new("Oahu", dir.path(), epoch());
        // 17 readings at one timestamp: all buffered, nothing queued.
        let msgs: Vec<Msg> = (0..17).map(|i| reading(60, &format!("s{i}"), 100.0)).collect();
        fog.delta_ext(60.0, &bag_of(msgs));
        assert_eq!(fog.buffer.len(), 17);
        assert!(fog.queue.is_empty());
        assert_eq!(fog.ta(), DAY_SECONDS - 60.0);

        // Midnight fires: λ carries one packet with all 17 rows.
        let mut out = Vec::new();
        {
            let mut o = crate::devs::Output::new();
            fog.now = DAY_SECONDS;
            fog.next_midnight = DAY_SECONDS;
            fog.output(&mut o);
            out.extend(o.into_items());
        }
        assert_eq!(out.len(), 1);
        match &out[0].1 {
            Msg::DailyPacket { farm, rows } => {
                assert_eq!(farm, "Oahu");
                assert_eq!(rows.len(), 17);
            }
            other => panic!("expected packet, got {other:?}"),
        }
        fog.delta_int();
        assert!(fog.buffer.is_empty());
        // Raw rows are on disk after the midnight flush.
        let rows = Datastore::open(dir.path())
            .read_raw("Oahu", epoch(), epoch() + chrono::Duration::days(1))
            .unwrap();
        assert_eq!(rows.len(), 17);
    }

    #[test]
    fn foreign_farm_command_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let mut fog = FogServer::new("Almeria", dir.path(), epoch());
        let cmd = Command {
            at: epoch(),
            kind: CommandKind::RunPrediction,
            args: vec![
                "Oahu".into(),
                "2010-06-01".into(),
                "1,11".into(),
                "raw".into(),
                "estimated".into(),
            ],
        };
        fog.delta_ext(0.0, &bag_of(vec![Msg::Command(cmd)]));
        assert!(fog.queue.is_empty());
        assert!(fog.buffer.is_empty());
    }

    #[test]
    fn estimated_rows_stored_and_forwarded() {
        let dir = tempfile::tempdir().unwrap();
        let mut fog = FogServer::new("Oahu", dir.path(), epoch());
        let rows = vec![crate::store::EstRow {
            at: epoch() + chrono::Duration::hours(6),
            sensor: "s1".into(),
            quality: Quality::Repaired,
            horizon_min: 0,
            ghi: 123.0,
        }];
        fog.delta_ext(
            0.0,
            &bag_of(vec![Msg::Estimated {
                farm: "Oahu".into(),
                rows: rows.clone(),
            }]),
        );
        assert_eq!(fog.ta(), 0.0);
        assert_eq!(fog.queue.len(), 1);
        fog.flush_store();
        let est = Datastore::open(dir.path())
            .read_est("Oahu", epoch(), epoch() + chrono::Duration::days(1))
            .unwrap();
        assert_eq!(est, rows);
    }

    #[test]
    fn passivate_emits_final_packet_and_goes_quiet() {
        let dir = tempfile::tempdir().unwrap();
        let mut fog = FogServer::new("Oahu", dir.path(), epoch());
        fog.delta_ext(10.0, &bag_of(vec![reading(10, "s1", 42.0)]));
        let cmd = Command {
            at: epoch() + chrono::Duration::seconds(20),
            kind: CommandKind::Passivate,
            args: vec![],
        };
        fog.delta_ext(10.0, &bag_of(vec![Msg::Command(cmd)]));
        assert_eq!(fog.ta(), 0.0);
        let packets: Vec<_> = fog
            .queue
            .iter()
            .filter(|(_, m)| matches!(m, Msg::DailyPacket { .. }))
            .collect();
        assert_eq!(packets.len(), 1);
        fog.delta_int();
        assert_eq!(fog.ta(), f64::INFINITY);
    }
}
