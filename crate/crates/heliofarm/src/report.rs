//! Offline reporting over a datastore: per-sensor and per-farm summary
//! statistics, forecast accuracy by horizon, and averaged irradiance
//! heatmaps rendered as self-contained HTML with inline SVG. Output is
//! byte-deterministic for a given datastore so reports can be diffed.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDate, Timelike, Utc};

use crate::farm::load_sensor_configs;
use crate::gridcast::grid::{to_grid, GridSpec, Location};
use crate::gridcast::train::{DAY_END_MIN, DAY_START_MIN};
use crate::store::{Datastore, Quality, RawRow};

/// Mean / population standard deviation over the non-null values of a
/// series, plus how many entries were null.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ValueStats {
    pub count: usize,
    pub nulls: usize,
    pub mean: f64,
    pub std: f64,
}

impl ValueStats {
    pub fn from_values(values: impl Iterator<Item = Option<f64>>) -> Self {
        let mut xs = Vec::new();
        let mut nulls = 0usize;
        for v in values {
            match v {
                Some(x) => xs.push(x),
                None => nulls += 1,
            }
        }
        if xs.is_empty() {
            return Self {
                nulls,
                ..Self::default()
            };
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self {
            count: xs.len(),
            nulls,
            mean,
            std: var.sqrt(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SensorBlock {
    pub sensor: String,
    pub measured: ValueStats,
    pub repaired: ValueStats,
    pub predicted: ValueStats,
}

/// Forecast error for one lead time, from joining predicted rows against
/// measured rows on (sensor, timestamp). MAPE is a fraction (0.1 = 10%)
/// and only averages points where the measured value exceeds 1 W/m².
#[derive(Debug, Clone, Copy)]
pub struct HorizonAccuracy {
    pub horizon_min: u32,
    pub n: usize,
    pub mae: f64,
    pub mse: f64,
    pub mape: f64,
}

#[derive(Debug, Clone)]
pub struct FarmSummary {
    pub farm: String,
    pub sensors: Vec<SensorBlock>,
    pub measured: ValueStats,
    pub repaired: ValueStats,
    pub predicted: ValueStats,
    pub accuracy: Vec<HorizonAccuracy>,
}

impl FarmSummary {
    pub fn is_empty(&self) -> bool {
        self.measured.count + self.measured.nulls == 0
            && self.repaired.count == 0
            && self.predicted.count == 0
    }
}

fn day_bounds(start: NaiveDate, end: NaiveDate) -> (DateTime<Utc>, DateTime<Utc>) {
    let from = start.and_hms_opt(0, 0, 0).unwrap().and_utc();
    let to = (end + chrono::Duration::days(1))
        .and_hms_opt(0, 0, 0)
        .unwrap()
        .and_utc();
    (from, to)
}

pub fn summarize(
    store: &Datastore,
    farm: &str,
    start: NaiveDate,
    end: NaiveDate,
) -> anyhow::Result<FarmSummary> {
    let (from, to) = day_bounds(start, end);
    let raw = store.read_raw(farm, from, to).unwrap_or_default();
    let est = store.read_est(farm, from, to).unwrap_or_default();

    let mut ids: BTreeSet<&str> = raw.iter().map(|r| r.sensor.as_str()).collect();
    ids.extend(est.iter().map(|r| r.sensor.as_str()));

    let mut sensors = Vec::new();
    for id in &ids {
        sensors.push(SensorBlock {
            sensor: id.to_string(),
            measured: ValueStats::from_values(
                raw.iter().filter(|r| r.sensor == *id).map(|r| r.ghi),
            ),
            repaired: ValueStats::from_values(
                est.iter()
                    .filter(|r| r.sensor == *id && r.quality == Quality::Repaired)
                    .map(|r| Some(r.ghi)),
            ),
            predicted: ValueStats::from_values(
                est.iter()
                    .filter(|r| r.sensor == *id && r.quality == Quality::Predicted)
                    .map(|r| Some(r.ghi)),
            ),
        });
    }

    // Accuracy: join predictions against the measured table.
    let truth: BTreeMap<(&str, DateTime<Utc>), f64> = raw
        .iter()
        .filter_map(|r| r.ghi.map(|v| ((r.sensor.as_str(), r.at), v)))
        .collect();
    let mut by_horizon: BTreeMap<u32, Vec<(f64, f64)>> = BTreeMap::new();
    for r in &est {
        if r.quality != Quality::Predicted {
            continue;
        }
        if let Some(&t) = truth.get(&(r.sensor.as_str(), r.at)) {
            by_horizon.entry(r.horizon_min).or_default().push((r.ghi, t));
        }
    }
    let accuracy = by_horizon
        .into_iter()
        .map(|(h, pairs)| {
            let n = pairs.len() as f64;
            let mae = pairs.iter().map(|(p, t)| (p - t).abs()).sum::<f64>() / n;
            let mse = pairs.iter().map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n;
            let mape_pts: Vec<f64> = pairs
                .iter()
                .filter(|(_, t)| t.abs() > 1.0)
                .map(|(p, t)| (p - t).abs() / t.abs())
                .collect();
            let mape = if mape_pts.is_empty() {
                f64::NAN
            } else {
                mape_pts.iter().sum::<f64>() / mape_pts.len() as f64
            };
            HorizonAccuracy {
                horizon_min: h,
                n: pairs.len(),
                mae,
                mse,
                mape,
            }
        })
        .collect();

    Ok(FarmSummary {
        farm: farm.to_string(),
        measured: ValueStats::from_values(raw.iter().map(|r| r.ghi)),
        repaired: ValueStats::from_values(
            est.iter()
                .filter(|r| r.quality == Quality::Repaired)
                .map(|r| Some(r.ghi)),
        ),
        predicted: ValueStats::from_values(
            est.iter()
                .filter(|r| r.quality == Quality::Predicted)
                .map(|r| Some(r.ghi)),
        ),
        sensors,
        accuracy,
    })
}

/// Averages nearest-sensor rasterized frames over a window. Each distinct
/// timestamp becomes one frame; frames where every sensor is null are
/// skipped. Returns `None` when no frame survives.
pub fn heatmap(
    rows: &[RawRow],
    locs: &[Location],
    spec: &GridSpec,
    daylight_only: bool,
) -> Option<Vec<f64>> {
    let mut frames: BTreeMap<DateTime<Utc>, Vec<Option<f64>>> = BTreeMap::new();
    let index: BTreeMap<&str, usize> = locs
        .iter()
        .enumerate()
        .map(|(i, l)| (l.id.as_str(), i))
        .collect();
    for r in rows {
        if daylight_only {
            let minute = r.at.hour() * 60 + r.at.minute();
            if minute < DAY_START_MIN || minute > DAY_END_MIN {
                continue;
            }
        }
        if let Some(&i) = index.get(r.sensor.as_str()) {
            frames.entry(r.at).or_insert_with(|| vec![None; locs.len()])[i] = r.ghi;
        }
    }
    let mut acc = vec![0.0; spec.pixels()];
    let mut n = 0usize;
    for values in frames.values() {
        if let Ok(grid) = to_grid(values, locs, spec) {
            for (a, g) in acc.iter_mut().zip(&grid) {
                *a += g;
            }
            n += 1;
        }
    }
    if n == 0 {
        return None;
    }
    for a in &mut acc {
        *a /= n as f64;
    }
    Some(acc)
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn fmt(x: f64) -> String {
    if x.is_nan() {
        "-".to_string()
    } else {
        format!("{x:.3}")
    }
}

/// Blue→yellow ramp for the SVG heatmap; t in [0, 1].
fn ramp(t: f64) -> (u8, u8, u8) {
    let t = t.clamp(0.0, 1.0);
    (
        (255.0 * t).round() as u8,
        (64.0 + 178.0 * t).round() as u8,
        (192.0 * (1.0 - t) + 32.0).round() as u8,
    )
}

fn heatmap_svg(grid: &[f64], spec: &GridSpec) -> String {
    let cell = 24usize;
    let (w, h) = (spec.width * cell, spec.height * cell);
    let lo = grid.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = grid.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if (hi - lo).abs() < 1e-12 { 1.0 } else { hi - lo };
    let mut svg = format!(r#"<svg width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    for row in 0..spec.height {
        for col in 0..spec.width {
            let v = grid[row * spec.width + col];
            let (r, g, b) = ramp((v - lo) / span);
            let _ = write!(
                svg,
                r#"<rect x="{}" y="{}" width="{cell}" height="{cell}" fill="rgb({r},{g},{b})"><title>{}</title></rect>"#,
                col * cell,
                row * cell,
                fmt(v)
            );
        }
    }
    svg.push_str("</svg>");
    let _ = write!(
        svg,
        "<p>range {} – {} W/m² over daylight frames</p>",
        fmt(lo),
        fmt(hi)
    );
    svg
}

/// One time-series chart per sensor: measured values as a line, repaired
/// values as markers, predictions (shortest horizon) as a second line.
fn series_svg(
    raw: &[RawRow],
    est: &[crate::store::EstRow],
    sensor: &str,
) -> Option<String> {
    let measured: Vec<(DateTime<Utc>, f64)> = raw
        .iter()
        .filter(|r| r.sensor == sensor)
        .filter_map(|r| r.ghi.map(|v| (r.at, v)))
        .collect();
    let repaired: Vec<(DateTime<Utc>, f64)> = est
        .iter()
        .filter(|r| r.sensor == sensor && r.quality == Quality::Repaired)
        .map(|r| (r.at, r.ghi))
        .collect();
    let min_h = est
        .iter()
        .filter(|r| r.sensor == sensor && r.quality == Quality::Predicted)
        .map(|r| r.horizon_min)
        .min();
    let predicted: Vec<(DateTime<Utc>, f64)> = min_h
        .map(|h| {
            est.iter()
                .filter(|r| {
                    r.sensor == sensor && r.quality == Quality::Predicted && r.horizon_min == h
                })
                .map(|r| (r.at, r.ghi))
                .collect()
        })
        .unwrap_or_default();
    let all: Vec<&(DateTime<Utc>, f64)> =
        measured.iter().chain(&repaired).chain(&predicted).collect();
    if all.is_empty() {
        return None;
    }
    let t0 = all.iter().map(|p| p.0).min().unwrap();
    let t1 = all.iter().map(|p| p.0).max().unwrap();
    let span_s = ((t1 - t0).num_seconds() as f64).max(1.0);
    let (lo, hi) = all
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p.1), hi.max(p.1))
        });
    let vspan = if (hi - lo).abs() < 1e-9 { 1.0 } else { hi - lo };
    const W: f64 = 720.0;
    const H: f64 = 180.0;
    let xy = |&(at, v): &(DateTime<Utc>, f64)| {
        let x = (at - t0).num_seconds() as f64 / span_s * (W - 20.0) + 10.0;
        let y = H - 10.0 - (v - lo) / vspan * (H - 20.0);
        format!("{x:.2},{y:.2}")
    };
    let mut svg = format!(
        r#"<svg width="{W}" height="{H}" viewBox="0 0 {W} {H}" class="series" data-sensor="{}">"#,
        esc(sensor)
    );
    let polyline = |pts: &[(DateTime<Utc>, f64)], color: &str| {
        if pts.len() < 2 {
            return String::new();
        }
        let path: Vec<String> = pts.iter().map(xy).collect();
        format!(
            r#"<polyline fill="none" stroke="{color}" stroke-width="1" points="{}"/>"#,
            path.join(" ")
        )
    };
    svg.push_str(&polyline(&measured, "#4477aa"));
    svg.push_str(&polyline(&predicted, "#228833"));
    for p in &repaired {
        let pos = xy(p);
        let (x, y) = pos.split_once(',').unwrap();
        let _ = write!(svg, r##"<circle cx="{x}" cy="{y}" r="2" fill="#ee6677"/>"##);
    }
    svg.push_str("</svg>");
    Some(format!(
        "<h4>{}</h4>{} <p>measured (blue), predicted (green), repaired (red); \
         range {} – {} W/m²</p>",
        esc(sensor),
        svg,
        fmt(lo),
        fmt(hi)
    ))
}

fn stats_row(label: &str, s: &ValueStats) -> String {
    format!(
        "<tr><td>{}</td><td>{}</td><td>{}</td><td>{}</td><td>{}</td></tr>",
        esc(label),
        s.count,
        s.nulls,
        fmt(s.mean),
        fmt(s.std)
    )
}

fn summary_html(s: &FarmSummary) -> String {
    if s.is_empty() {
        return format!("<h2>{}</h2><p>no data</p>", esc(&s.farm));
    }
    let mut html = format!("<h2>{}</h2>", esc(&s.farm));
    html.push_str("<h3>Measured</h3><table><tr><th>sensor</th><th>count</th><th>nulls</th><th>mean</th><th>std</th></tr>");
    for b in &s.sensors {
        if b.measured.count + b.measured.nulls > 0 {
            html.push_str(&stats_row(&b.sensor, &b.measured));
        }
    }
    html.push_str(&stats_row("all", &s.measured));
    html.push_str("</table>");
    for (title, total, pick) in [
        (
            "Repaired",
            &s.repaired,
            Box::new(|b: &SensorBlock| b.repaired) as Box<dyn Fn(&SensorBlock) -> ValueStats>,
        ),
        ("Predicted", &s.predicted, Box::new(|b: &SensorBlock| b.predicted)),
    ] {
        if total.count == 0 {
            continue;
        }
        let _ = write!(
            html,
            "<h3>{title}</h3><table><tr><th>sensor</th><th>count</th><th>nulls</th><th>mean</th><th>std</th></tr>"
        );
        for b in &s.sensors {
            let st = pick(b);
            if st.count > 0 {
                html.push_str(&stats_row(&b.sensor, &st));
            }
        }
        html.push_str(&stats_row("all", total));
        html.push_str("</table>");
    }
    if !s.accuracy.is_empty() {
        html.push_str("<h3>Forecast accuracy</h3><table><tr><th>horizon (min)</th><th>n</th><th>MAE</th><th>MSE</th><th>MAPE</th></tr>");
        for a in &s.accuracy {
            let _ = write!(
                html,
                "<tr><td>{}</td><td>{}</td><td>{}</td><td>{}</td><td>{}</td></tr>",
                a.horizon_min,
                a.n,
                fmt(a.mae),
                fmt(a.mse),
                fmt(a.mape)
            );
        }
        html.push_str("</table>");
    }
    html
}

fn page(title: &str, body: &str) -> String {
    format!(
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>{}</title>\
         <style>body{{font-family:sans-serif;margin:2em}}table{{border-collapse:collapse}}\
         td,th{{border:1px solid #999;padding:2px 8px;text-align:right}}\
         th{{background:#eee}}td:first-child{{text-align:left}}</style>\
         </head><body><h1>{}</h1>{}</body></html>\n",
        esc(title),
        esc(title),
        body
    )
}

fn farm_heatmap_html(root: &Path, farm: &str, start: NaiveDate, end: NaiveDate) -> String {
    let locs: Vec<Location> = match load_sensor_configs(root, farm) {
        Ok(cfgs) => cfgs
            .into_iter()
            .map(|c| Location {
                id: c.id,
                lat: c.lat,
                lon: c.lon,
            })
            .collect(),
        Err(_) => return "<p>no sensor locations available</p>".to_string(),
    };
    if locs.is_empty() {
        return "<p>no sensor locations available</p>".to_string();
    }
    let (mut lat_lo, mut lat_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut lon_lo, mut lon_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for l in &locs {
        lat_lo = lat_lo.min(l.lat);
        lat_hi = lat_hi.max(l.lat);
        lon_lo = lon_lo.min(l.lon);
        lon_hi = lon_hi.max(l.lon);
    }
    let spec = GridSpec::new(
        10,
        10,
        (lat_lo - 0.01, lat_hi + 0.01, lon_lo - 0.01, lon_hi + 0.01),
    );
    let (from, to) = day_bounds(start, end);
    let rows = Datastore::open(root)
        .read_raw(farm, from, to)
        .unwrap_or_default();
    match heatmap(&rows, &locs, &spec, true) {
        Some(grid) => format!("<h3>Mean daylight irradiance</h3>{}", heatmap_svg(&grid, &spec)),
        None => "<p>no daylight frames in range</p>".to_string(),
    }
}

fn summary_csv(summaries: &[FarmSummary]) -> String {
    let mut csv =
        String::from("farm,sensor,kind,horizon_min,count,nulls,mean,std,mae,mse,mape\n");
    let num = |x: f64| if x.is_nan() { String::new() } else { format!("{x:.6}") };
    for s in summaries {
        let mut push_stats = |sensor: &str, kind: &str, st: &ValueStats| {
            let _ = writeln!(
                csv,
                "{},{},{},,{},{},{},{},,,",
                s.farm,
                sensor,
                kind,
                st.count,
                st.nulls,
                num(st.mean),
                num(st.std)
            );
        };
        for b in &s.sensors {
            if b.measured.count + b.measured.nulls > 0 {
                push_stats(&b.sensor, "measured", &b.measured);
            }
            if b.repaired.count > 0 {
                push_stats(&b.sensor, "repaired", &b.repaired);
            }
            if b.predicted.count > 0 {
                push_stats(&b.sensor, "predicted", &b.predicted);
            }
        }
        push_stats("all", "measured", &s.measured);
        if s.repaired.count > 0 {
            push_stats("all", "repaired", &s.repaired);
        }
        if s.predicted.count > 0 {
            push_stats("all", "predicted", &s.predicted);
        }
        for a in &s.accuracy {
            let _ = writeln!(
                csv,
                "{},all,accuracy,{},{},0,,,{},{},{}",
                s.farm,
                a.horizon_min,
                a.n,
                num(a.mae),
                num(a.mse),
                num(a.mape)
            );
        }
    }
    csv
}

/// Renders the farm-level report, the cross-farm report and the summary
/// CSV under `out_dir`. Farms are discovered as subdirectories of the
/// datastore root; the named farm additionally gets its own page.
pub fn render_reports(
    store_root: &Path,
    farm: &str,
    start: NaiveDate,
    end: NaiveDate,
    out_dir: &Path,
) -> anyhow::Result<Vec<PathBuf>> {
    let store = Datastore::open(store_root);
    let mut written = Vec::new();

    let own = summarize(&store, farm, start, end)?;
    let mut body = summary_html(&own);
    if !own.is_empty() {
        let (from, to) = day_bounds(start, end);
        let raw = store.read_raw(farm, from, to).unwrap_or_default();
        let est = store.read_est(farm, from, to).unwrap_or_default();
        body.push_str("<h3>Sensor series</h3>");
        for b in &own.sensors {
            if let Some(chart) = series_svg(&raw, &est, &b.sensor) {
                body.push_str(&chart);
            }
        }
        body.push_str(&farm_heatmap_html(store_root, farm, start, end));
    }
    let farm_dir = out_dir.join(farm);
    std::fs::create_dir_all(&farm_dir)?;
    let fog_path = farm_dir.join("fog_report.html");
    std::fs::write(
        &fog_path,
        page(&format!("Farm report: {farm} {start} – {end}"), &body),
    )?;
    written.push(fog_path);

    let mut farms: Vec<String> = std::fs::read_dir(store_root)?
        .flatten()
        .filter(|e| {
            let p = e.path();
            // A farm directory holds at least one datastore table or layout file.
            p.is_dir()
                && (p.join("raw").is_dir()
                    || p.join("estimated").is_dir()
                    || p.join("datasets").is_dir()
                    || p.join("sensors.csv").is_file())
        })
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    farms.sort();
    let mut summaries = Vec::new();
    for f in &farms {
        summaries.push(summarize(&store, f, start, end)?);
    }
    if summaries.is_empty() {
        summaries.push(own);
    }

    let cloud_body: String = summaries.iter().map(summary_html).collect();
    let cloud_path = out_dir.join("cloud_report.html");
    std::fs::write(
        &cloud_path,
        page(&format!("Fleet report {start} – {end}"), &cloud_body),
    )?;
    written.push(cloud_path);

    let csv_path = out_dir.join("summary.csv");
    std::fs::write(&csv_path, summary_csv(&summaries))?;
    written.push(csv_path);
    Ok(written)
}
