//! Mesh-grid interpolation between scattered sensors and a 2-D pixel grid.
//!
//! Distances use an equirectangular projection (longitude scaled by the
//! cosine of the bounding box's mean latitude); farms span at most tens of
//! kilometres so the projection error is negligible.

use serde::{Deserialize, Serialize};

use super::GridcastError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub height: usize,
    pub width: usize,
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

impl GridSpec {
    pub fn new(height: usize, width: usize, bbox: (f64, f64, f64, f64)) -> Self {
        assert!(height >= 2 && width >= 2, "grid must be at least 2x2");
        Self {
            height,
            width,
            lat_min: bbox.0,
            lat_max: bbox.1,
            lon_min: bbox.2,
            lon_max: bbox.3,
        }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    fn mean_lat(&self) -> f64 {
        0.5 * (self.lat_min + self.lat_max)
    }

    /// Projected planar coordinates of a lat/lon point.
    pub fn project(&self, lat: f64, lon: f64) -> (f64, f64) {
        (lon * self.mean_lat().to_radians().cos(), lat)
    }

    /// Center of pixel (row, col); row 0 is at `lat_min`.
    pub fn pixel_center(&self, row: usize, col: usize) -> (f64, f64) {
        let dlat = (self.lat_max - self.lat_min) / self.height as f64;
        let dlon = (self.lon_max - self.lon_min) / self.width as f64;
        (
            self.lat_min + (row as f64 + 0.5) * dlat,
            self.lon_min + (col as f64 + 0.5) * dlon,
        )
    }

    /// Pixel index (row-major) containing a location, clamped to the grid.
    pub fn pixel_of(&self, lat: f64, lon: f64) -> usize {
        let dlat = (self.lat_max - self.lat_min) / self.height as f64;
        let dlon = (self.lon_max - self.lon_min) / self.width as f64;
        let row = (((lat - self.lat_min) / dlat).floor() as i64)
            .clamp(0, self.height as i64 - 1) as usize;
        let col = (((lon - self.lon_min) / dlon).floor() as i64)
            .clamp(0, self.width as i64 - 1) as usize;
        row * self.width + col
    }

    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        lat >= self.lat_min && lat <= self.lat_max && lon >= self.lon_min && lon <= self.lon_max
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub id: String,
    pub lat: f64,
    pub lon: f64,
}

fn dist2(a: (f64, f64), b: (f64, f64)) -> f64 {
    let dx = a.0 - b.0;
    let dy = a.1 - b.1;
    dx * dx + dy * dy
}

/// Interpolates scattered sensor values onto the mesh-grid: each pixel
/// takes the value of the nearest sensor with a non-null reading, ties
/// broken by lower sensor id. Null sensors are excluded from the
/// nearest-neighbor set, so the grid stays complete under sensor dropout.
pub fn to_grid(
    values: &[Option<f64>],
    locs: &[Location],
    spec: &GridSpec,
) -> Result<Vec<f64>, GridcastError> {
    assert_eq!(values.len(), locs.len(), "values/locations mismatch");
    let live: Vec<(usize, (f64, f64))> = locs
        .iter()
        .enumerate()
        .filter(|(i, _)| values[*i].is_some())
        .map(|(i, l)| (i, spec.project(l.lat, l.lon)))
        .collect();
    if live.is_empty() {
        return Err(GridcastError::AllMissing);
    }
    let mut grid = vec![0.0; spec.pixels()];
    for row in 0..spec.height {
        for col in 0..spec.width {
            let (clat, clon) = spec.pixel_center(row, col);
            let center = spec.project(clat, clon);
            let mut best: Option<(f64, &str, usize)> = None;
            for (i, p) in &live {
                let d = dist2(center, *p);
                let candidate = (d, locs[*i].id.as_str(), *i);
                match &best {
                    Some((bd, bid, _)) if (d, locs[*i].id.as_str()) >= (*bd, *bid) => {}
                    _ => best = Some(candidate),
                }
            }
            let (_, _, idx) = best.expect("live set non-empty");
            grid[row * spec.width + col] = values[idx].expect("live value");
        }
    }
    Ok(grid)
}

/// Reverses the interpolation: each sensor receives the value of the
/// pixel whose center is nearest its location (ties to the lower
/// row-major pixel index).
pub fn from_grid(grid: &[f64], locs: &[Location], spec: &GridSpec) -> Vec<f64> {
    assert_eq!(grid.len(), spec.pixels(), "grid shape mismatch");
    locs.iter()
        .map(|l| {
            let p = spec.project(l.lat, l.lon);
            let mut best = (f64::INFINITY, 0usize);
            for row in 0..spec.height {
                for col in 0..spec.width {
                    let (clat, clon) = spec.pixel_center(row, col);
                    let d = dist2(p, spec.project(clat, clon));
                    let idx = row * spec.width + col;
                    if d < best.0 {
                        best = (d, idx);
                    }
                }
            }
            grid[best.1]
        })
        .collect()
}

/// Fraction of grid pixels containing at least one sensor, with the 20%
/// adequacy threshold. Failing the check is a warning condition for the
/// caller, not an abort.
pub fn coverage_check(locs: &[Location], spec: &GridSpec) -> (f64, bool) {
    let mut occupied = std::collections::HashSet::new();
    for l in locs {
        occupied.insert(spec.pixel_of(l.lat, l.lon));
    }
    let fraction = occupied.len() as f64 / spec.pixels() as f64;
    (fraction, fraction >= 0.20)
}
