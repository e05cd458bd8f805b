//! Checkpoint serialization: versioned binary header followed by the flat
//! little-endian f64 parameter vector, with the grid spec and standardizer
//! embedded so a checkpoint is portable between farms.

use super::grid::GridSpec;
use super::net::{param_count, ForecastModel, ModelConfig};
use super::{GridcastError, Standardizer};

const MAGIC: &[u8; 4] = b"HFCK";
const VERSION: u32 = 1;

pub fn encode(model: &ForecastModel) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + model.params.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(model.grid.height as u32).to_le_bytes());
    out.extend_from_slice(&(model.grid.width as u32).to_le_bytes());
    for v in [
        model.grid.lat_min,
        model.grid.lat_max,
        model.grid.lon_min,
        model.grid.lon_max,
        model.scaler.mu,
        model.scaler.sigma,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in [
        model.config.cells as u32,
        model.config.hidden as u32,
        model.config.kernel as u32,
        model.config.dense as u32,
        model.config.n_x as u32,
        model.config.horizons.len() as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for h in &model.config.horizons {
        out.extend_from_slice(&h.to_le_bytes());
    }
    out.extend_from_slice(&(model.params.len() as u64).to_le_bytes());
    for p in &model.params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], GridcastError> {
        if self.pos + n > self.buf.len() {
            return Err(GridcastError::BadCheckpoint("truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, GridcastError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, GridcastError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, GridcastError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ForecastModel, GridcastError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(GridcastError::BadCheckpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(GridcastError::BadCheckpoint(format!(
            "unsupported version {version}"
        )));
    }
    let height = r.u32()? as usize;
    let width = r.u32()? as usize;
    let lat_min = r.f64()?;
    let lat_max = r.f64()?;
    let lon_min = r.f64()?;
    let lon_max = r.f64()?;
    let mu = r.f64()?;
    let sigma = r.f64()?;
    let cells = r.u32()? as usize;
    let hidden = r.u32()? as usize;
    let kernel = r.u32()? as usize;
    let dense = r.u32()? as usize;
    let n_x = r.u32()? as usize;
    let n_h = r.u32()? as usize;
    let mut horizons = Vec::with_capacity(n_h);
    for _ in 0..n_h {
        horizons.push(r.u32()?);
    }
    let config = ModelConfig {
        cells,
        hidden,
        kernel,
        dense,
        n_x,
        horizons,
    };
    let grid = GridSpec {
        height,
        width,
        lat_min,
        lat_max,
        lon_min,
        lon_max,
    };
    let count = r.u64()? as usize;
    if count != param_count(&config, &grid) {
        return Err(GridcastError::BadCheckpoint(format!(
            "parameter count {count} does not match architecture"
        )));
    }
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        params.push(r.f64()?);
    }
    if r.pos != bytes.len() {
        return Err(GridcastError::BadCheckpoint("trailing bytes".into()));
    }
    Ok(ForecastModel {
        config,
        grid,
        scaler: Standardizer { mu, sigma },
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> ForecastModel {
        ForecastModel::new(
            ModelConfig {
                cells: 1,
                hidden: 2,
                kernel: 3,
                dense: 1,
                n_x: 4,
                horizons: vec![1, 11],
            },
            GridSpec::new(3, 3, (21.0, 21.4, -158.2, -157.9)),
            Standardizer { mu: 312.0, sigma: 144.5 },
            99,
        )
    }

    #[test]
    fn encode_decode_round_trip() {
        let m = model();
        let d = decode(&encode(&m)).unwrap();
        assert_eq!(d.params, m.params);
        assert_eq!(d.config, m.config);
        assert_eq!(d.grid, m.grid);
        assert_eq!(d.scaler, m.scaler);
    }

    #[test]
    fn truncated_checkpoint_rejected() {
        let bytes = encode(&model());
        assert!(matches!(
            decode(&bytes[..bytes.len() - 3]),
            Err(GridcastError::BadCheckpoint(_))
        ));
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = encode(&model());
        bytes[0] = b'X';
        assert!(decode(&bytes).is_err());
    }

    #[test]
    fn identical_seeds_give_identical_checkpoints() {
        assert_eq!(encode(&model()), encode(&model()));
    }
}
