//! Columnar text datastore.
//!
//! Layout under a root directory:
//! `<root>/<farm>/raw/<YYYY-MM-DD>.csv`, `<root>/<farm>/estimated/<YYYY-MM-DD>.csv`,
//! `<root>/<farm>/models/<id>.ckpt`, `<root>/<farm>/reports/`,
//! `<root>/<farm>/datasets/<id>.csv`, `<root>/<farm>/sensors.csv`.
//!
//! Raw tables hold only measured readings; estimated tables hold repaired
//! and predicted values. Appends are buffered in memory and become visible
//! to readers after `flush`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDate, NaiveDateTime, TimeZone, Utc};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("datastore I/O failure at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed row in {path} line {line}: {reason}")]
    Malformed {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("unknown dataset '{0}'")]
    UnknownDataset(String),
    #[error("unknown checkpoint '{0}'")]
    UnknownCheckpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Quality {
    Measured,
    Repaired,
    Predicted,
}

impl Quality {
    pub fn as_str(self) -> &'static str {
        match self {
            Quality::Measured => "measured",
            Quality::Repaired => "repaired",
            Quality::Predicted => "predicted",
        }
    }
}

/// One measured sensor reading; `ghi` is `None` for sensor dropout.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRow {
    pub at: DateTime<Utc>,
    pub sensor: String,
    pub ghi: Option<f64>,
}

/// One estimated (repaired or predicted) value. `horizon_min` is zero for
/// repaired rows and the forecast lead time in minutes for predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct EstRow {
    pub at: DateTime<Utc>,
    pub sensor: String,
    pub quality: Quality,
    pub horizon_min: u32,
    pub ghi: f64,
}

pub fn format_ts(at: DateTime<Utc>) -> String {
    at.format("%Y-%m-%dT%H:%M:%SZ").to_string()
}

/// Parses `YYYY-MM-DDTHH:MM:SSZ` or `YYYY-MM-DD HH:MM:SS` (both UTC).
pub fn parse_ts(s: &str) -> Option<DateTime<Utc>> {
    let fmts = ["%Y-%m-%dT%H:%M:%SZ", "%Y-%m-%d %H:%M:%S"];
    for f in fmts {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, f) {
            return Some(Utc.from_utc_datetime(&dt));
        }
    }
    None
}

fn format_ghi(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v}"),
        None => String::new(),
    }
}

pub struct Datastore {
    root: PathBuf,
    raw_buf: BTreeMap<(String, NaiveDate), Vec<RawRow>>,
    est_buf: BTreeMap<(String, NaiveDate), Vec<EstRow>>,
}

impl Datastore {
    pub fn open(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            raw_buf: BTreeMap::new(),
            est_buf: BTreeMap::new(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn farm_dir(&self, farm: &str) -> PathBuf {
        self.root.join(farm)
    }

    pub fn reports_dir(&self, farm: &str) -> PathBuf {
        self.farm_dir(farm).join("reports")
    }

    pub fn append_raw(&mut self, farm: &str, row: RawRow) {
        let date = row.at.date_naive();
        self.raw_buf
            .entry((farm.to_string(), date))
            .or_default()
            .push(row);
    }

    pub fn append_est(&mut self, farm: &str, row: EstRow) {
        let date = row.at.date_naive();
        self.est_buf
            .entry((farm.to_string(), date))
            .or_default()
            .push(row);
    }

    /// Writes all buffered appends to disk. Rows are sorted by
    /// (at, sensor, quality, horizon) per file so repeated runs with the
    /// same inputs produce byte-identical tables.
    pub fn flush(&mut self) -> Result<(), StoreError> {
        let raw = std::mem::take(&mut self.raw_buf);
        for ((farm, date), mut rows) in raw {
            rows.sort_by(|a, b| (a.at, &a.sensor).cmp(&(b.at, &b.sensor)));
            let path = self.farm_dir(&farm).join("raw").join(format!("{date}.csv"));
            append_csv(&path, "at,sensor,ghi", rows.iter().map(|r| {
                format!("{},{},{}", format_ts(r.at), r.sensor, format_ghi(r.ghi))
            }))?;
        }
        let est = std::mem::take(&mut self.est_buf);
        for ((farm, date), mut rows) in est {
            rows.sort_by(|a, b| {
                (a.at, &a.sensor, a.quality, a.horizon_min)
                    .cmp(&(b.at, &b.sensor, b.quality, b.horizon_min))
            });
            let path = self
                .farm_dir(&farm)
                .join("estimated")
                .join(format!("{date}.csv"));
            append_csv(&path, "at,sensor,quality,horizon_min,ghi", rows.iter().map(|r| {
                format!(
                    "{},{},{},{},{}",
                    format_ts(r.at),
                    r.sensor,
                    r.quality.as_str(),
                    r.horizon_min,
                    r.ghi
                )
            }))?;
        }
        Ok(())
    }

    pub fn read_raw(
        &self,
        farm: &str,
        from: DateTime<Utc>,
        to: DateTime<Utc>,
    ) -> Result<Vec<RawRow>, StoreError> {
        let dir = self.farm_dir(farm).join("raw");
        let mut rows = Vec::new();
        for path in csv_files_sorted(&dir)? {
            for (line_no, line) in read_body(&path)? {
                let mut f = line.split(',');
                let at = f.next().and_then(parse_ts).ok_or_else(|| StoreError::Malformed {
                    path: path.clone(),
                    line: line_no,
                    reason: "bad timestamp".into(),
                })?;
                if at < from || at > to {
                    continue;
                }
                let sensor = f.next().unwrap_or("").to_string();
                let ghi = parse_opt_f64(f.next().unwrap_or(""), &path, line_no)?;
                rows.push(RawRow { at, sensor, ghi });
            }
        }
        rows.sort_by(|a, b| (a.at, &a.sensor).cmp(&(b.at, &b.sensor)));
        Ok(rows)
    }

    pub fn read_est(
        &self,
        farm: &str,
        from: DateTime<Utc>,
        to: DateTime<Utc>,
    ) -> Result<Vec<EstRow>, StoreError> {
        let dir = self.farm_dir(farm).join("estimated");
        let mut rows = Vec::new();
        for path in csv_files_sorted(&dir)? {
            for (line_no, line) in read_body(&path)? {
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != 5 {
                    return Err(StoreError::Malformed {
                        path: path.clone(),
                        line: line_no,
                        reason: "expected 5 fields".into(),
                    });
                }
                let at = parse_ts(f[0]).ok_or_else(|| StoreError::Malformed {
                    path: path.clone(),
                    line: line_no,
                    reason: "bad timestamp".into(),
                })?;
                if at < from || at > to {
                    continue;
                }
                let quality = match f[2] {
                    "repaired" => Quality::Repaired,
                    "predicted" => Quality::Predicted,
                    other => {
                        return Err(StoreError::Malformed {
                            path: path.clone(),
                            line: line_no,
                            reason: format!("bad quality '{other}'"),
                        })
                    }
                };
                rows.push(EstRow {
                    at,
                    sensor: f[1].to_string(),
                    quality,
                    horizon_min: f[3].parse().map_err(|_| StoreError::Malformed {
                        path: path.clone(),
                        line: line_no,
                        reason: "bad horizon".into(),
                    })?,
                    ghi: f[4].parse().map_err(|_| StoreError::Malformed {
                        path: path.clone(),
                        line: line_no,
                        reason: "bad ghi".into(),
                    })?,
                });
            }
        }
        rows.sort_by(|a, b| {
            (a.at, &a.sensor, a.quality, a.horizon_min)
                .cmp(&(b.at, &b.sensor, b.quality, b.horizon_min))
        });
        Ok(rows)
    }

    /// Resolves a dataset id (opaque name, extension ignored) to rows.
    pub fn read_dataset(&self, farm: &str, dataset_id: &str) -> Result<Vec<RawRow>, StoreError> {
        let stem = dataset_stem(dataset_id);
        let path = self
            .farm_dir(farm)
            .join("datasets")
            .join(format!("{stem}.csv"));
        if !path.exists() {
            return Err(StoreError::UnknownDataset(dataset_id.to_string()));
        }
        let mut rows = Vec::new();
        for (line_no, line) in read_body(&path)? {
            let mut f = line.split(',');
            let at = f.next().and_then(parse_ts).ok_or_else(|| StoreError::Malformed {
                path: path.clone(),
                line: line_no,
                reason: "bad timestamp".into(),
            })?;
            let sensor = f.next().unwrap_or("").to_string();
            let ghi = parse_opt_f64(f.next().unwrap_or(""), &path, line_no)?;
            rows.push(RawRow { at, sensor, ghi });
        }
        Ok(rows)
    }

    pub fn write_dataset(
        &self,
        farm: &str,
        dataset_id: &str,
        rows: &[RawRow],
    ) -> Result<PathBuf, StoreError> {
        let stem = dataset_stem(dataset_id);
        let path = self
            .farm_dir(farm)
            .join("datasets")
            .join(format!("{stem}.csv"));
        write_csv(
            &path,
            "at,sensor,ghi",
            rows.iter()
                .map(|r| format!("{},{},{}", format_ts(r.at), r.sensor, format_ghi(r.ghi))),
        )?;
        Ok(path)
    }

    pub fn save_checkpoint(
        &self,
        farm: &str,
        id: &str,
        bytes: &[u8],
    ) -> Result<PathBuf, StoreError> {
        let path = self
            .farm_dir(farm)
            .join("models")
            .join(format!("{id}.ckpt"));
        ensure_parent(&path)?;
        fs::write(&path, bytes).map_err(|e| StoreError::Io {
            path: path.clone(),
            source: e,
        })?;
        Ok(path)
    }

    pub fn load_checkpoint(&self, farm: &str, id: &str) -> Result<Vec<u8>, StoreError> {
        let path = self
            .farm_dir(farm)
            .join("models")
            .join(format!("{id}.ckpt"));
        if !path.exists() {
            return Err(StoreError::UnknownCheckpoint(id.to_string()));
        }
        fs::read(&path).map_err(|e| StoreError::Io { path, source: e })
    }
}

/// Dataset ids from simulation scripts may carry container extensions
/// (e.g. `.h5` in historical scripts); treat the stem as the name.
fn dataset_stem(id: &str) -> &str {
    id.rsplit_once('.')
        .filter(|(_, ext)| matches!(*ext, "h5" | "csv"))
        .map(|(stem, _)| stem)
        .unwrap_or(id)
}

fn ensure_parent(path: &Path) -> Result<(), StoreError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| StoreError::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    Ok(())
}

fn append_csv(
    path: &Path,
    header: &str,
    rows: impl Iterator<Item = String>,
) -> Result<(), StoreError> {
    ensure_parent(path)?;
    let fresh = !path.exists();
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| StoreError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
    let mut buf = String::new();
    if fresh {
        buf.push_str(header);
        buf.push('\n');
    }
    for row in rows {
        buf.push_str(&row);
        buf.push('\n');
    }
    file.write_all(buf.as_bytes()).map_err(|e| StoreError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_csv(
    path: &Path,
    header: &str,
    rows: impl Iterator<Item = String>,
) -> Result<(), StoreError> {
    ensure_parent(path)?;
    let mut buf = String::from(header);
    buf.push('\n');
    for row in rows {
        buf.push_str(&row);
        buf.push('\n');
    }
    fs::write(path, buf).map_err(|e| StoreError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn csv_files_sorted(dir: &Path) -> Result<Vec<PathBuf>, StoreError> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| StoreError::Io {
            path: dir.to_path_buf(),
            source: e,
        })?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map(|x| x == "csv").unwrap_or(false))
        .collect();
    files.sort();
    Ok(files)
}

fn read_body(path: &Path) -> Result<Vec<(usize, String)>, StoreError> {
    let text = fs::read_to_string(path).map_err(|e| StoreError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(text
        .lines()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.to_string()))
        .collect())
}

fn parse_opt_f64(s: &str, path: &Path, line: usize) -> Result<Option<f64>, StoreError> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| StoreError::Malformed {
            path: path.to_path_buf(),
            line,
            reason: format!("bad value '{s}'"),
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn ts(s: &str) -> DateTime<Utc> {
        parse_ts(s).unwrap()
    }

    #[test]
    fn round_trip_raw_rows_after_flush() {
        let dir = TempDir::new().unwrap();
        let mut ds = Datastore::open(dir.path());
        ds.append_raw(
            "Oahu",
            RawRow {
                at: ts("2010-06-01 12:00:00"),
                sensor: "s01".into(),
                ghi: Some(512.25),
            },
        );
        ds.append_raw(
            "Oahu",
            RawRow {
                at: ts("2010-06-01 12:00:01"),
                sensor: "s02".into(),
                ghi: None,
            },
        );
        ds.flush().unwrap();
        let rows = ds
            .read_raw("Oahu", ts("2010-06-01 00:00:00"), ts("2010-06-02 00:00:00"))
            .unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].ghi, Some(512.25));
        assert_eq!(rows[1].ghi, None);
    }

    #[test]
    fn missing_value_encoded_as_empty_field() {
        let dir = TempDir::new().unwrap();
        let mut ds = Datastore::open(dir.path());
        ds.append_raw(
            "Oahu",
            RawRow {
                at: ts("2010-06-01 12:00:00"),
                sensor: "s01".into(),
                ghi: None,
            },
        );
        ds.flush().unwrap();
        let text =
            fs::read_to_string(dir.path().join("Oahu/raw/2010-06-01.csv")).unwrap();
        assert!(text.contains("s01,\n"));
    }

    #[test]
    fn dataset_id_extension_is_opaque() {
        let dir = TempDir::new().unwrap();
        let ds = Datastore::open(dir.path());
        let rows = vec![RawRow {
            at: ts("2010-06-01 00:00:00"),
            sensor: "a".into(),
            ghi: Some(1.0),
        }];
        ds.write_dataset("Oahu", "oahu", &rows).unwrap();
        assert_eq!(ds.read_dataset("Oahu", "oahu.h5").unwrap(), rows);
        assert_eq!(ds.read_dataset("Oahu", "oahu.csv").unwrap(), rows);
        assert!(matches!(
            ds.read_dataset("Oahu", "nope.h5"),
            Err(StoreError::UnknownDataset(_))
        ));
    }

    #[test]
    fn flushes_are_byte_deterministic() {
        let write = |root: &Path| {
            let mut ds = Datastore::open(root);
            for i in 0..50 {
                ds.append_est(
                    "A",
                    EstRow {
                        at: ts("2010-06-01 10:00:00"),
                        sensor: format!("s{:02}", 49 - i),
                        quality: Quality::Predicted,
                        horizon_min: 11,
                        ghi: i as f64 * 0.5,
                    },
                );
            }
            ds.flush().unwrap();
            fs::read(root.join("A/estimated/2010-06-01.csv")).unwrap()
        };
        let d1 = TempDir::new().unwrap();
        let d2 = TempDir::new().unwrap();
        assert_eq!(write(d1.path()), write(d2.path()));
    }
}
