//! Convolutional-recurrent forecasting network with hand-written
//! reverse-mode gradients.
//!
//! Architecture: `C` convolutional LSTM cells (gates i, f, g, o; each gate
//! is a convolution over the input frame plus a convolution over the
//! hidden state plus a bias, no peephole terms) scan the `n_x` input
//! frames; the final hidden state is flattened and passed through `D`
//! dense stages (tanh on hidden stages, identity on the output stage) and
//! reshaped to `(n_y, H, W)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::grid::GridSpec;
use super::{GridcastError, Standardizer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of convolutional LSTM cells (C).
    pub cells: usize,
    /// Hidden channels per cell (F).
    pub hidden: usize,
    /// Convolution kernel size (k, odd).
    pub kernel: usize,
    /// Number of dense stages (D).
    pub dense: usize,
    /// Input frames per sample (n_x).
    pub n_x: usize,
    /// Forecast horizons in minutes; n_y = horizons.len().
    pub horizons: Vec<u32>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            cells: 1,
            hidden: 4,
            kernel: 3,
            dense: 1,
            n_x: 10,
            horizons: vec![1, 11, 31, 61],
        }
    }
}

impl ModelConfig {
    pub fn n_y(&self) -> usize {
        self.horizons.len()
    }
}

const GATES: usize = 4; // i, f, g, o

/// Flat parameter vector layout.
pub(crate) struct Layout {
    pub cells: Vec<CellLayout>,
    pub dense: Vec<DenseLayout>,
    pub total: usize,
}

pub(crate) struct CellLayout {
    pub in_ch: usize,
    /// Per gate: offset of the input convolution weights.
    pub wx: [usize; GATES],
    /// Per gate: offset of the hidden convolution weights.
    pub wh: [usize; GATES],
    /// Per gate: offset of the bias.
    pub b: [usize; GATES],
    pub wx_len: usize,
    pub wh_len: usize,
}

pub(crate) struct DenseLayout {
    pub w: usize,
    pub b: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Layout {
    pub fn new(cfg: &ModelConfig, h: usize, w: usize) -> Self {
        let px = h * w;
        let k2 = cfg.kernel * cfg.kernel;
        let mut off = 0usize;
        let mut cells = Vec::with_capacity(cfg.cells);
        for c in 0..cfg.cells {
            let in_ch = if c == 0 { 1 } else { cfg.hidden };
            let wx_len = cfg.hidden * in_ch * k2;
            let wh_len = cfg.hidden * cfg.hidden * k2;
            let mut wx = [0; GATES];
            let mut wh = [0; GATES];
            let mut b = [0; GATES];
            for g in 0..GATES {
                wx[g] = off;
                off += wx_len;
                wh[g] = off;
                off += wh_len;
                b[g] = off;
                off += cfg.hidden;
            }
            cells.push(CellLayout {
                in_ch,
                wx,
                wh,
                b,
                wx_len,
                wh_len,
            });
        }
        let out_dim = cfg.n_y() * px;
        let mut dense = Vec::with_capacity(cfg.dense);
        for d in 0..cfg.dense {
            let in_dim = if d == 0 { cfg.hidden * px } else { out_dim };
            dense.push(DenseLayout {
                w: off,
                b: off + in_dim * out_dim,
                in_dim,
                out_dim,
            });
            off += in_dim * out_dim + out_dim;
        }
        Self {
            cells,
            dense,
            total: off,
        }
    }
}

/// Number of parameters implied by the architecture.
pub fn param_count(cfg: &ModelConfig, grid: &GridSpec) -> usize {
    Layout::new(cfg, grid.height, grid.width).total
}

#[derive(Debug, Clone)]
pub struct ForecastModel {
    pub config: ModelConfig,
    pub grid: GridSpec,
    pub scaler: Standardizer,
    pub params: Vec<f64>,
}

impl ForecastModel {
    /// Glorot-uniform weight initialization from `seed`; biases zero.
    pub fn new(config: ModelConfig, grid: GridSpec, scaler: Standardizer, seed: u64) -> Self {
        let layout = Layout::new(&config, grid.height, grid.width);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let k2 = config.kernel * config.kernel;
        for cell in &layout.cells {
            let fan_in_x = cell.in_ch * k2;
            let fan_in_h = config.hidden * k2;
            let fan_out = config.hidden * k2;
            let lim_x = (6.0 / (fan_in_x + fan_out) as f64).sqrt();
            let lim_h = (6.0 / (fan_in_h + fan_out) as f64).sqrt();
            for g in 0..GATES {
                for p in &mut params[cell.wx[g]..cell.wx[g] + cell.wx_len] {
                    *p = rng.gen_range(-lim_x..lim_x);
                }
                for p in &mut params[cell.wh[g]..cell.wh[g] + cell.wh_len] {
                    *p = rng.gen_range(-lim_h..lim_h);
                }
            }
        }
        for d in &layout.dense {
            let lim = (6.0 / (d.in_dim + d.out_dim) as f64).sqrt();
            for p in &mut params[d.w..d.w + d.in_dim * d.out_dim] {
                *p = rng.gen_range(-lim..lim);
            }
        }
        Self {
            config,
            grid,
            scaler,
            params,
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn layout(&self) -> Layout {
        Layout::new(&self.config, self.grid.height, self.grid.width)
    }

    fn check_input(&self, frames: &[Vec<f64>]) -> Result<(), GridcastError> {
        let px = self.grid.height * self.grid.width;
        if frames.len() != self.config.n_x {
            return Err(GridcastError::ShapeMismatch(format!(
                "expected {} input frames, got {}",
                self.config.n_x,
                frames.len()
            )));
        }
        for f in frames {
            if f.len() != px {
                return Err(GridcastError::ShapeMismatch(format!(
                    "expected frames of {px} pixels, got {}",
                    f.len()
                )));
            }
        }
        Ok(())
    }

    /// Forward pass on standardized input frames; returns `n_y` grids.
    pub fn forward(&self, frames: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, GridcastError> {
        self.check_input(frames)?;
        let (out, _) = self.forward_cached(frames);
        Ok(out)
    }

    fn forward_cached(&self, frames: &[Vec<f64>]) -> (Vec<Vec<f64>>, Cache) {
        let layout = self.layout();
        let (h, w) = (self.grid.height, self.grid.width);
        let px = h * w;
        let f_ch = self.config.hidden;
        let k = self.config.kernel;
        let t_len = self.config.n_x;

        let mut cell_caches = Vec::with_capacity(self.config.cells);
        let mut seq: Vec<Vec<f64>> = frames.to_vec();
        for cell in &layout.cells {
            let mut cc = CellCache::new(t_len);
            let mut h_prev = vec![0.0; f_ch * px];
            let mut c_prev = vec![0.0; f_ch * px];
            for x_t in &seq {
                let mut gates = [
                    vec![0.0; f_ch * px],
                    vec![0.0; f_ch * px],
                    vec![0.0; f_ch * px],
                    vec![0.0; f_ch * px],
                ];
                for (g, z) in gates.iter_mut().enumerate() {
                    bias_fill(z, &self.params[cell.b[g]..cell.b[g] + f_ch], px);
                    conv2d_acc(
                        x_t,
                        cell.in_ch,
                        h,
                        w,
                        &self.params[cell.wx[g]..cell.wx[g] + cell.wx_len],
                        f_ch,
                        k,
                        z,
                    );
                    conv2d_acc(
                        &h_prev,
                        f_ch,
                        h,
                        w,
                        &self.params[cell.wh[g]..cell.wh[g] + cell.wh_len],
                        f_ch,
                        k,
                        z,
                    );
                }
                let [zi, zf, zg, zo] = gates;
                let i_a: Vec<f64> = zi.iter().map(|&v| sigmoid(v)).collect();
                let f_a: Vec<f64> = zf.iter().map(|&v| sigmoid(v)).collect();
                let g_a: Vec<f64> = zg.iter().map(|&v| v.tanh()).collect();
                let o_a: Vec<f64> = zo.iter().map(|&v| sigmoid(v)).collect();
                let c_t: Vec<f64> = (0..f_ch * px)
                    .map(|n| f_a[n] * c_prev[n] + i_a[n] * g_a[n])
                    .collect();
                let tanh_c: Vec<f64> = c_t.iter().map(|&v| v.tanh()).collect();
                let h_t: Vec<f64> = (0..f_ch * px).map(|n| o_a[n] * tanh_c[n]).collect();
                cc.xs.push(x_t.clone());
                cc.i.push(i_a);
                cc.f.push(f_a);
                cc.g.push(g_a);
                cc.o.push(o_a);
                cc.c.push(c_t.clone());
                cc.tanh_c.push(tanh_c);
                cc.h.push(h_t.clone());
                h_prev = h_t;
                c_prev = c_t;
            }
            seq = cc.h.clone();
            cell_caches.push(cc);
        }

        // Dense stages on the flattened final hidden state.
        let mut acts: Vec<Vec<f64>> = vec![cell_caches.last().unwrap().h[t_len - 1].clone()];
        for (d, dl) in layout.dense.iter().enumerate() {
            let wm = &self.params[dl.w..dl.w + dl.in_dim * dl.out_dim];
            let bias = &self.params[dl.b..dl.b + dl.out_dim];
            let a_in = acts.last().unwrap();
            let mut z = vec![0.0; dl.out_dim];
            for (o, zo) in z.iter_mut().enumerate() {
                let row = &wm[o * dl.in_dim..(o + 1) * dl.in_dim];
                let mut acc = bias[o];
                for (wv, av) in row.iter().zip(a_in) {
                    acc += wv * av;
                }
                *zo = acc;
            }
            if d + 1 < layout.dense.len() {
                for v in z.iter_mut() {
                    *v = v.tanh();
                }
            }
            acts.push(z);
        }
        let flat = acts.last().unwrap();
        let out: Vec<Vec<f64>> = (0..self.config.n_y())
            .map(|i| flat[i * px..(i + 1) * px].to_vec())
            .collect();
        (
            out,
            Cache {
                cells: cell_caches,
                dense_acts: acts,
            },
        )
    }

    /// Mean-squared-error loss over the `n_y · H · W` outputs and its
    /// gradient with respect to every parameter (reverse mode).
    pub fn loss_and_grads(
        &self,
        frames: &[Vec<f64>],
        truth: &[Vec<f64>],
    ) -> Result<(f64, Vec<f64>), GridcastError> {
        self.check_input(frames)?;
        let px = self.grid.height * self.grid.width;
        if truth.len() != self.config.n_y() || truth.iter().any(|f| f.len() != px) {
            return Err(GridcastError::ShapeMismatch(
                "truth tensor shape mismatch".into(),
            ));
        }
        let layout = self.layout();
        let (pred, cache) = self.forward_cached(frames);
        let n_out = (self.config.n_y() * px) as f64;
        let mut loss = 0.0;
        let mut dflat = vec![0.0; self.config.n_y() * px];
        for (yi, (p, t)) in pred.iter().zip(truth).enumerate() {
            for (xi, (pv, tv)) in p.iter().zip(t).enumerate() {
                let d = pv - tv;
                loss += d * d;
                dflat[yi * px + xi] = 2.0 * d / n_out;
            }
        }
        loss /= n_out;

        let mut grads = vec![0.0; layout.total];

        // dense backward
        let mut da = dflat;
        for (d, dl) in layout.dense.iter().enumerate().rev() {
            let a_in = &cache.dense_acts[d];
            let a_out = &cache.dense_acts[d + 1];
            // identity on the output stage, tanh otherwise
            let dz: Vec<f64> = if d + 1 < layout.dense.len() {
                da.iter()
                    .zip(a_out)
                    .map(|(dv, av)| dv * (1.0 - av * av))
                    .collect()
            } else {
                da.clone()
            };
            let wm = &self.params[dl.w..dl.w + dl.in_dim * dl.out_dim];
            let mut da_in = vec![0.0; dl.in_dim];
            for o in 0..dl.out_dim {
                let dzo = dz[o];
                grads[dl.b + o] += dzo;
                let wrow = &wm[o * dl.in_dim..(o + 1) * dl.in_dim];
                let grow = &mut grads[dl.w + o * dl.in_dim..dl.w + (o + 1) * dl.in_dim];
                for idx in 0..dl.in_dim {
                    grow[idx] += dzo * a_in[idx];
                    da_in[idx] += dzo * wrow[idx];
                }
            }
            da = da_in;
        }

        // recurrent backward, top cell first
        let (h, w) = (self.grid.height, self.grid.width);
        let f_ch = self.config.hidden;
        let k = self.config.kernel;
        let t_len = self.config.n_x;
        // dh per frame flowing into the current cell from above
        let mut dh_seq: Vec<Vec<f64>> = vec![vec![0.0; f_ch * px]; t_len];
        dh_seq[t_len - 1] = da;
        for (ci, cell) in layout.cells.iter().enumerate().rev() {
            let cc = &cache.cells[ci];
            let mut dh_carry = vec![0.0; f_ch * px];
            let mut dc_carry = vec![0.0; f_ch * px];
            let mut dxs: Vec<Vec<f64>> = vec![vec![0.0; cell.in_ch * px]; t_len];
            for t in (0..t_len).rev() {
                let n = f_ch * px;
                let mut dh = dh_seq[t].clone();
                for idx in 0..n {
                    dh[idx] += dh_carry[idx];
                }
                let (i_a, f_a, g_a, o_a) = (&cc.i[t], &cc.f[t], &cc.g[t], &cc.o[t]);
                let tanh_c = &cc.tanh_c[t];
                let mut dc = vec![0.0; n];
                let mut dz = [
                    vec![0.0; n], // i
                    vec![0.0; n], // f
                    vec![0.0; n], // g
                    vec![0.0; n], // o
                ];
                for idx in 0..n {
                    let do_ = dh[idx] * tanh_c[idx];
                    dc[idx] = dc_carry[idx] + dh[idx] * o_a[idx] * (1.0 - tanh_c[idx] * tanh_c[idx]);
                    let di = dc[idx] * g_a[idx];
                    let dg = dc[idx] * i_a[idx];
                    let c_prev = if t > 0 { cc.c[t - 1][idx] } else { 0.0 };
                    let df = dc[idx] * c_prev;
                    dz[0][idx] = di * i_a[idx] * (1.0 - i_a[idx]);
                    dz[1][idx] = df * f_a[idx] * (1.0 - f_a[idx]);
                    dz[2][idx] = dg * (1.0 - g_a[idx] * g_a[idx]);
                    dz[3][idx] = do_ * o_a[idx] * (1.0 - o_a[idx]);
                }
                let zeros_h;
                let h_prev: &[f64] = if t > 0 {
                    &cc.h[t - 1]
                } else {
                    zeros_h = vec![0.0; n];
                    &zeros_h
                };
                let mut dh_carry_new = vec![0.0; n];
                for g in 0..GATES {
                    // bias gradient: channel-wise sum
                    for ch in 0..f_ch {
                        let mut acc = 0.0;
                        for p in 0..px {
                            acc += dz[g][ch * px + p];
                        }
                        grads[cell.b[g] + ch] += acc;
                    }
                    conv2d_weight_grad(
                        &cc.xs[t],
                        cell.in_ch,
                        h,
                        w,
                        &dz[g],
                        f_ch,
                        k,
                        &mut grads[cell.wx[g]..cell.wx[g] + cell.wx_len],
                    );
                    conv2d_input_grad(
                        &dz[g],
                        f_ch,
                        h,
                        w,
                        &self.params[cell.wx[g]..cell.wx[g] + cell.wx_len],
                        cell.in_ch,
                        k,
                        &mut dxs[t],
                    );
                    conv2d_weight_grad(
                        h_prev,
                        f_ch,
                        h,
                        w,
                        &dz[g],
                        f_ch,
                        k,
                        &mut grads[cell.wh[g]..cell.wh[g] + cell.wh_len],
                    );
                    conv2d_input_grad(
                        &dz[g],
                        f_ch,
                        h,
                        w,
                        &self.params[cell.wh[g]..cell.wh[g] + cell.wh_len],
                        f_ch,
                        k,
                        &mut dh_carry_new,
                    );
                }
                dh_carry = dh_carry_new;
                for idx in 0..n {
                    let f_t = f_a[idx];
                    dc_carry[idx] = dc[idx] * f_t;
                }
            }
            dh_seq = dxs;
        }

        Ok((loss, grads))
    }
}

struct CellCache {
    xs: Vec<Vec<f64>>,
    i: Vec<Vec<f64>>,
    f: Vec<Vec<f64>>,
    g: Vec<Vec<f64>>,
    o: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
    tanh_c: Vec<Vec<f64>>,
    h: Vec<Vec<f64>>,
}

impl CellCache {
    fn new(t_len: usize) -> Self {
        Self {
            xs: Vec::with_capacity(t_len),
            i: Vec::with_capacity(t_len),
            f: Vec::with_capacity(t_len),
            g: Vec::with_capacity(t_len),
            o: Vec::with_capacity(t_len),
            c: Vec::with_capacity(t_len),
            tanh_c: Vec::with_capacity(t_len),
            h: Vec::with_capacity(t_len),
        }
    }
}

struct Cache {
    cells: Vec<CellCache>,
    dense_acts: Vec<Vec<f64>>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn bias_fill(out: &mut [f64], bias: &[f64], px: usize) {
    for (ch, b) in bias.iter().enumerate() {
        for v in &mut out[ch * px..(ch + 1) * px] {
            *v = *b;
        }
    }
}

/// Same-padded 2-D convolution, accumulated into `out`.
/// `weight[((oc*in_ch + ic)*k + dy)*k + dx]`.
#[allow(clippy::too_many_arguments)]
fn conv2d_acc(
    inp: &[f64],
    in_ch: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    out_ch: usize,
    k: usize,
    out: &mut [f64],
) {
    let r = (k / 2) as isize;
    let px = h * w;
    for oc in 0..out_ch {
        for ic in 0..in_ch {
            let wbase = (oc * in_ch + ic) * k * k;
            for dy in 0..k {
                let oy = dy as isize - r;
                for dx in 0..k {
                    let ox = dx as isize - r;
                    let wv = weight[wbase + dy * k + dx];
                    if wv == 0.0 {
                        continue;
                    }
                    for y in 0..h as isize {
                        let iy = y + oy;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let orow = oc * px + y as usize * w;
                        let irow = ic * px + iy as usize * w;
                        let x_lo = (-ox).max(0) as usize;
                        let x_hi = (w as isize).min(w as isize - ox) as usize;
                        for x in x_lo..x_hi {
                            out[orow + x] += wv * inp[irow + (x as isize + ox) as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of the convolution with respect to its input, accumulated.
#[allow(clippy::too_many_arguments)]
fn conv2d_input_grad(
    dz: &[f64],
    out_ch: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    in_ch: usize,
    k: usize,
    dinp: &mut [f64],
) {
    let r = (k / 2) as isize;
    let px = h * w;
    for oc in 0..out_ch {
        for ic in 0..in_ch {
            let wbase = (oc * in_ch + ic) * k * k;
            for dy in 0..k {
                let oy = dy as isize - r;
                for dx in 0..k {
                    let ox = dx as isize - r;
                    let wv = weight[wbase + dy * k + dx];
                    if wv == 0.0 {
                        continue;
                    }
                    for y in 0..h as isize {
                        let iy = y + oy;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let zrow = oc * px + y as usize * w;
                        let irow = ic * px + iy as usize * w;
                        let x_lo = (-ox).max(0) as usize;
                        let x_hi = (w as isize).min(w as isize - ox) as usize;
                        for x in x_lo..x_hi {
                            dinp[irow + (x as isize + ox) as usize] += wv * dz[zrow + x];
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of the convolution with respect to its weights, accumulated.
#[allow(clippy::too_many_arguments)]
fn conv2d_weight_grad(
    inp: &[f64],
    in_ch: usize,
    h: usize,
    w: usize,
    dz: &[f64],
    out_ch: usize,
    k: usize,
    dweight: &mut [f64],
) {
    let r = (k / 2) as isize;
    let px = h * w;
    for oc in 0..out_ch {
        for ic in 0..in_ch {
            let wbase = (oc * in_ch + ic) * k * k;
            for dy in 0..k {
                let oy = dy as isize - r;
                for dx in 0..k {
                    let ox = dx as isize - r;
                    let mut acc = 0.0;
                    for y in 0..h as isize {
                        let iy = y + oy;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let zrow = oc * px + y as usize * w;
                        let irow = ic * px + iy as usize * w;
                        let x_lo = (-ox).max(0) as usize;
                        let x_hi = (w as isize).min(w as isize - ox) as usize;
                        for x in x_lo..x_hi {
                            acc += dz[zrow + x] * inp[irow + (x as isize + ox) as usize];
                        }
                    }
                    dweight[wbase + dy * k + dx] += acc;
                }
            }
        }
    }
}
